"""
Sweep Runner Module
Runs grids of train-and-evaluate experiments (method, K, RIS size, D, P_t,
rho, seed) concurrently and appends one CSV row per grid point
"""

import asyncio
import itertools
import logging
import os
import traceback
from dataclasses import asdict, dataclass, replace
from typing import Dict, Iterable, List, Sequence, Set, Tuple

import pandas as pd

import config
from data_fetcher import Dataset
from evaluation import prediction_rate
from scene_geometry import SceneConfig
from trainer import RecognizerTrainer, TrainConfig, train_model

logger = logging.getLogger(__name__)

KEY_COLUMNS = ['method', 'k', 'ris_size', 'distance', 'pt_dbm', 'rho', 'seed']
SWEEP_COLUMNS = KEY_COLUMNS + ['eta', 'best_epoch', 'n_test']


@dataclass(frozen=True)
class SweepPoint:
    method: str
    k: int
    ris_size: int
    distance: float
    pt_dbm: float
    rho: float
    seed: int

    def key(self) -> Tuple:
        return (self.method, int(self.k), int(self.ris_size), float(self.distance),
                float(self.pt_dbm), float(self.rho), int(self.seed))


def build_grid(methods: Sequence[str], ks: Sequence[int], ris_sizes: Sequence[int],
               distances: Sequence[float], pt_dbms: Sequence[float], rhos: Sequence[float],
               seeds: Sequence[int]) -> List[SweepPoint]:
    """
    Cartesian product of the ranges.

    Raises:
        ValueError: unknown method or an empty range
    """
    ranges = {'methods': methods, 'ks': ks, 'ris_sizes': ris_sizes, 'distances': distances,
              'pt_dbms': pt_dbms, 'rhos': rhos, 'seeds': seeds}
    for name, values in ranges.items():
        if len(values) == 0:
            raise ValueError(f"Sweep range {name} is empty")
    for method in methods:
        if method not in config.METHODS:
            raise ValueError(f"Invalid method {method!r}; expected one of {config.METHODS}")
    return [SweepPoint(*values) for values in itertools.product(
        methods, ks, ris_sizes, distances, pt_dbms, rhos, seeds)]


def completed_keys(path: str) -> Set[Tuple]:
    """Keys of rows already present in a sweep CSV"""
    if not os.path.exists(path):
        return set()
    frame = pd.read_csv(path)
    keys = set()
    for row in frame[KEY_COLUMNS].itertuples(index=False):
        keys.add(SweepPoint(*row).key())
    return keys


class SweepRunner:
    """
    Embarrassingly parallel sweep: each grid point trains its model in a
    worker thread with its own RNG streams; rows go through one writer.
    """

    def __init__(self, base_scene: SceneConfig, base_config: TrainConfig, train_set: Dataset,
                 test_set: Dataset, out_path: str, workers: int = 1, resume: bool = False):
        self.base_scene = base_scene
        self.base_config = base_config
        self.train_set = train_set
        self.test_set = test_set
        self.out_path = out_path
        self.workers = max(1, int(workers))
        self.resume = resume
        self._write_lock = asyncio.Lock()
        logger.info(f"SweepRunner initialized: {self.workers} worker(s), output {out_path}, "
                    f"resume={resume}")

    def scene_for(self, point: SweepPoint) -> SceneConfig:
        scene = self.base_scene.with_ris_size(point.ris_size).with_distance(point.distance)
        return replace(scene, tx_power_dbm=float(point.pt_dbm))

    def run_point(self, point: SweepPoint) -> Dict:
        """Train and evaluate one grid point (blocking)"""
        scene = self.scene_for(point)
        train_config = replace(self.base_config, method=point.method, k=int(point.k),
                               rho=float(point.rho), seed=int(point.seed), show_progress=False)
        result = train_model(self.train_set, scene, train_config)
        trainer = RecognizerTrainer(scene, train_config)
        prediction = trainer.predict(result.params, self.test_set, config.STREAM_TEST)
        report = prediction_rate(prediction.probs, prediction.labels, self.test_set.n_classes)

        row = asdict(point)
        row.update({'eta': report.eta, 'best_epoch': result.best_epoch, 'n_test': len(self.test_set)})
        return row

    async def _write_row(self, row: Dict):
        async with self._write_lock:
            header = not os.path.exists(self.out_path)
            pd.DataFrame([row], columns=SWEEP_COLUMNS).to_csv(self.out_path, mode='a',
                                                              header=header, index=False)

    async def _run_one(self, point: SweepPoint, semaphore: asyncio.Semaphore) -> Dict:
        async with semaphore:
            logger.info(f"Sweep point started: {point}")
            try:
                row = await asyncio.to_thread(self.run_point, point)
            except Exception as e:
                logger.error(f"Sweep point {point} failed: {e}")
                logger.error(traceback.format_exc())
                raise
            await self._write_row(row)
            logger.info(f"Sweep point done: {point.method} K={point.k} eta={row['eta']:.4f}")
            return row

    async def run(self, points: Iterable[SweepPoint]) -> pd.DataFrame:
        """
        Run every point not already in the output file (when resuming).

        Returns:
            Rows produced by this call, sorted by key
        """
        points = list(points)
        done = completed_keys(self.out_path) if self.resume else set()
        pending = [p for p in points if p.key() not in done]
        if len(pending) < len(points):
            logger.info(f"Resuming: {len(points) - len(pending)} of {len(points)} points already done")

        semaphore = asyncio.Semaphore(self.workers)
        rows = await asyncio.gather(*(self._run_one(p, semaphore) for p in pending))

        logger.info("=" * 60)
        logger.info(f"Sweep finished: {len(rows)} new rows in {self.out_path}")
        logger.info("=" * 60)
        frame = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
        return frame.sort_values(KEY_COLUMNS).reset_index(drop=True)


def run_sweep(runner: SweepRunner, points: Sequence[SweepPoint]) -> pd.DataFrame:
    """Blocking entry point"""
    return asyncio.run(runner.run(points))
