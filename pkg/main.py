"""
RIS Target Recognizer
Command-line entry point: train, eval, sweep, se-table, correlate, dump-channel
"""

import argparse
import json
import logging
import os
import sys
import traceback
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv

import config
from channel_model import get_channel_model, write_complex_csv
from checkpoint_manager import CheckpointManager, load_checkpoint
from comm_protocol import ProtocolConfig, se_table, write_se_table
from data_fetcher import DataFetcher, Dataset
from evaluation import averaged_correlation, prediction_rate
from recognizer import RecognizerParams, random_phase_set, run_episode
from scene_geometry import SceneConfig, load_scene
from sweep_runner import SweepRunner, build_grid, run_sweep
from trainer import RecognizerTrainer, TrainConfig, train_model

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)


def setup_logging(out_dir: str, level: str = 'INFO'):
    os.makedirs(out_dir, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(os.path.join(out_dir, config.LOG_FILE)),
            logging.StreamHandler()
        ],
        force=True
    )


def _int_list(text: str) -> List[int]:
    return [int(v) for v in text.split(',') if v.strip()]


def _float_list(text: str) -> List[float]:
    return [float(v) for v in text.split(',') if v.strip()]


def _str_list(text: str) -> List[str]:
    return [v.strip() for v in text.split(',') if v.strip()]


class ExperimentRunner:
    """
    Resolves scene, data and output locations from the parsed arguments and
    runs one subcommand.
    """

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.scene = self._resolve_scene()
        self.outputs = CheckpointManager(args.out)
        self._data: Optional[tuple] = None
        logger.info(f"ExperimentRunner initialized: command={args.command}, "
                    f"RIS {self.scene.ris_rows}x{self.scene.ris_cols}, D={self.scene.distance:.1f}")

    def _resolve_scene(self) -> SceneConfig:
        args = self.args
        scene = load_scene(args.scene) if args.scene else SceneConfig()
        if args.pt_dbm is not None:
            scene = replace(scene, tx_power_dbm=args.pt_dbm)
        if args.noise_free:
            scene = replace(scene, rx_noise_dbm=float('-inf'))
        return scene

    def train_config(self, **overrides) -> TrainConfig:
        args = self.args
        values = dict(method=args.method, k=args.k, rho=args.rho, seed=args.seed,
                      batch_size=args.batch_size, epochs=args.epochs, learning_rate=args.lr,
                      noise_free=args.noise_free, lr_schedule=args.lr_schedule,
                      phase_mode=args.phase_mode, feature_dim=args.feature_dim,
                      state_dim=args.feature_dim, hidden_units=args.hidden_units,
                      show_progress=not args.no_progress)
        values.update(overrides)
        return TrainConfig(**values)

    def data(self):
        """(train, test) datasets, loaded once"""
        if self._data is None:
            if not self.args.data_dir:
                raise ValueError("No MNIST directory: pass --data-dir or set MNIST_DATA_DIR")
            fetcher = DataFetcher(self.args.data_dir, self.scene.max_scattering)
            classes = _int_list(self.args.classes) if self.args.classes else None
            self._data = fetcher.prepare(classes, self.args.train_limit, self.args.test_limit)
        return self._data

    def _data_files(self) -> List[str]:
        if not self.args.data_dir:
            return []
        fetcher = DataFetcher(self.args.data_dir)
        files = []
        for key in config.MNIST_FILES:
            try:
                files.append(fetcher.path(key))
            except FileNotFoundError:
                pass
        return files

    def _checkpoint_path(self) -> str:
        return self.args.checkpoint[0] if self.args.checkpoint else self.outputs.path(config.CHECKPOINT_FILE)

    def _manifest(self, extra: Optional[Dict] = None, inputs: Sequence[str] = (),
                  outputs: Sequence[str] = ()):
        resolved = {'command': self.args.command, 'args': vars(self.args), 'scene': self.scene.to_dict()}
        resolved.update(extra or {})
        self.outputs.save_manifest(resolved, inputs=[self.args.scene, *inputs, *self._data_files()],
                                   outputs=outputs)

    def _evaluate(self, params: RecognizerParams, test_set: Dataset, train_config: TrainConfig):
        trainer = RecognizerTrainer(self.scene, train_config)
        prediction = trainer.predict(params, test_set, config.STREAM_TEST)
        report = prediction_rate(prediction.probs, prediction.labels, test_set.n_classes,
                                 run_config={'method': params.method, 'k': params.n_measurements,
                                             'seed': train_config.seed},
                                 wall_seconds=prediction.wall_seconds)
        logger.info(f"Test eta={report.eta:.4f} on {report.n_samples} targets "
                    f"({report.mean_inference_ms:.2f} ms per target)")
        return report

    def _write_report(self, report, name: str = 'eval_report.json') -> str:
        path = self.outputs.path(name)
        with open(path, 'w') as f:
            json.dump(report.to_dict(), f, indent=2)
        return path

    def train(self):
        train_set, test_set = self.data()
        train_config = self.train_config()
        result = train_model(train_set, self.scene, train_config)

        checkpoint = self.outputs.path(config.CHECKPOINT_FILE)
        self.outputs.save_params(result.params)
        metrics = self.outputs.save_metrics(result.history)
        report = self._evaluate(result.params, test_set, train_config)
        report_path = self._write_report(report)
        self._manifest({'best_epoch': result.best_epoch, 'test_eta': report.eta},
                       outputs=[checkpoint, metrics, report_path])

    def eval(self):
        _, test_set = self.data()
        checkpoint = self._checkpoint_path()
        params = load_checkpoint(checkpoint)
        report = self._evaluate(params, test_set, self.train_config(method=params.method))
        report_path = self._write_report(report)
        self._manifest({'test_eta': report.eta}, inputs=[checkpoint], outputs=[report_path])

    def sweep(self):
        args = self.args
        train_set, test_set = self.data()
        points = build_grid(
            methods=_str_list(args.methods) if args.methods else [args.method],
            ks=_int_list(args.ks) if args.ks else [args.k],
            ris_sizes=_int_list(args.ris_sizes) if args.ris_sizes else [self.scene.ris_rows],
            distances=_float_list(args.distances) if args.distances else [self.scene.distance],
            pt_dbms=_float_list(args.pt_dbms) if args.pt_dbms else [self.scene.tx_power_dbm],
            rhos=_float_list(args.rhos) if args.rhos else [args.rho],
            seeds=_int_list(args.seeds) if args.seeds else [args.seed],
        )
        out_path = self.outputs.path(config.SWEEP_FILE)
        runner = SweepRunner(self.scene, self.train_config(show_progress=False), train_set, test_set,
                             out_path, workers=args.workers, resume=args.resume)
        frame = run_sweep(runner, points)
        self._manifest({'points': len(points), 'new_rows': len(frame)}, outputs=[out_path])

    def _sensing_phases(self, scene: SceneConfig, sigma: np.ndarray,
                        checkpoints: Dict[int, RecognizerParams]) -> List[np.ndarray]:
        params = checkpoints.get(scene.n_ris)
        if params is None:
            logger.warning(f"No checkpoint for N_s={scene.n_ris}; using {self.args.k} random phase sets")
            return random_phase_set(self.args.k, scene.n_ris, self.args.seed)
        if params.method == 'adaptive':
            return list(run_episode(scene, sigma, params, params.n_steps, self.args.seed).omegas)
        angles = params.tensors.get('lisp_angles', params.tensors.get('fixed_angles'))
        if angles is None:
            raise ValueError("A no-ris checkpoint carries no sensing phases")
        return list(np.exp(1j * angles))

    def se_table(self):
        args = self.args
        sides = _int_list(args.ris_sizes) if args.ris_sizes else [self.scene.ris_rows]
        scenes = [self.scene.with_ris_size(side) for side in sides]

        if args.data_dir:
            _, test_set = self.data()
            sigma = test_set[args.target_index][0]
        else:
            logger.warning("No MNIST directory; SE table uses an empty ROI")
            sigma = np.zeros(self.scene.n_voxels)

        checkpoints = {}
        for path in args.checkpoint or []:
            params = load_checkpoint(path)
            n_ris = params.tensors.get('omega1_angles', params.tensors.get(
                'lisp_angles', params.tensors.get('fixed_angles', np.zeros((1, 0))))).shape[1]
            checkpoints[n_ris] = params

        phase_lists = [self._sensing_phases(scene, sigma, checkpoints) for scene in scenes]
        protocol = ProtocolConfig(mu=args.mu, sensing_symbols=self.scene.n_tx, frames_per_decision=args.k)
        reports = se_table(scenes, sigma, phase_lists, protocol)
        out_path = self.outputs.path(config.SE_TABLE_FILE)
        write_se_table(reports, out_path)
        logger.info(f"Recognition time for K={args.k}: {protocol.recognition_time(args.k) * 1000:.0f} ms")
        self._manifest({'rows': len(reports)}, inputs=args.checkpoint or [], outputs=[out_path])

    def correlate(self):
        _, test_set = self.data()
        checkpoint = self._checkpoint_path()
        params = load_checkpoint(checkpoint)
        trainer = RecognizerTrainer(self.scene, self.train_config(method=params.method))
        prediction = trainer.predict(params, test_set, config.STREAM_TEST, keep_phases=True)
        matrix = averaged_correlation(list(prediction.omegas))

        csv_path = self.outputs.path('correlation.csv')
        txt_path = self.outputs.path('correlation.txt')
        matrix.save(csv_path, txt_path)
        logger.info(f"Mean off-diagonal correlation over steps k>=2: {matrix.mean_offdiagonal(1):.4f}")
        self._manifest({'mean_offdiagonal': matrix.mean_offdiagonal(1)}, inputs=[checkpoint],
                       outputs=[csv_path, txt_path])

    def dump_channel(self):
        model = get_channel_model(self.scene)
        channel_dir = self.outputs.path('channels')
        os.makedirs(channel_dir, exist_ok=True)
        written = []
        for name in ('h_tx_ue', 'H_ris_tx', 'H_roi_tx', 'h_ue_ris', 'h_ue_roi', 'H_ris_roi',
                     'H_roi_ris', 'H_tx_ris', 'H_tx_roi', 'H_ris_rx', 'H_roi_rx', 'pilots'):
            path = os.path.join(channel_dir, f"{name}.csv")
            write_complex_csv(path, getattr(model, name))
            written.append(path)
        logger.info(f"{len(written)} channel matrices written to {channel_dir}")
        self._manifest(outputs=written)

    def run(self):
        handler = {
            'train': self.train,
            'eval': self.eval,
            'sweep': self.sweep,
            'se-table': self.se_table,
            'correlate': self.correlate,
            'dump-channel': self.dump_channel,
        }[self.args.command]
        handler()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--scene', help='key=value scene file; defaults apply to missing keys')
    common.add_argument('--seed', type=int, default=0)
    common.add_argument('--out', default=os.getenv('RIS_OUTPUT_DIR', 'runs'))
    common.add_argument('--method', choices=config.METHODS, default='adaptive')
    common.add_argument('--k', type=int, default=config.DEFAULT_K)
    common.add_argument('--rho', type=float, default=1.0)
    common.add_argument('--data-dir', default=os.getenv('MNIST_DATA_DIR'))
    common.add_argument('--classes', help='comma-separated digit subset, e.g. 0,1,2')
    common.add_argument('--train-limit', type=int)
    common.add_argument('--test-limit', type=int)
    common.add_argument('--epochs', type=int, default=config.EPOCHS)
    common.add_argument('--batch-size', type=int, default=config.BATCH_SIZE)
    common.add_argument('--lr', type=float, default=config.LEARNING_RATE)
    common.add_argument('--lr-schedule', choices=config.LR_SCHEDULES, default='constant')
    common.add_argument('--phase-mode', choices=config.PHASE_MODES, default='cossin')
    common.add_argument('--feature-dim', type=int, default=config.FEATURE_DIM)
    common.add_argument('--hidden-units', type=int, default=config.HIDDEN_UNITS)
    common.add_argument('--noise-free', action='store_true')
    common.add_argument('--pt-dbm', type=float)
    common.add_argument('--checkpoint', action='append', help='may be repeated for se-table')
    common.add_argument('--no-progress', action='store_true')
    common.add_argument('--log-level', default=os.getenv('RIS_LOG_LEVEL', 'INFO'))

    parser = argparse.ArgumentParser(description='RIS-aided adaptive target recognition')
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('train', parents=[common], help='train one method')
    sub.add_parser('eval', parents=[common], help='evaluate a checkpoint on the test set')

    sweep = sub.add_parser('sweep', parents=[common], help='train and evaluate a grid of settings')
    sweep.add_argument('--methods')
    sweep.add_argument('--ks')
    sweep.add_argument('--ris-sizes')
    sweep.add_argument('--distances')
    sweep.add_argument('--pt-dbms')
    sweep.add_argument('--rhos')
    sweep.add_argument('--seeds')
    sweep.add_argument('--workers', type=int, default=int(os.getenv('RIS_SWEEP_WORKERS', '1')))
    sweep.add_argument('--resume', action='store_true')

    se = sub.add_parser('se-table', parents=[common], help='spectral efficiency per RIS size')
    se.add_argument('--mu', type=int, default=1)
    se.add_argument('--ris-sizes')
    se.add_argument('--target-index', type=int, default=0)

    sub.add_parser('correlate', parents=[common], help='averaged phase correlation of a checkpoint')
    sub.add_parser('dump-channel', parents=[common], help='write the scene channel matrices as CSV')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point"""
    args = build_parser().parse_args(argv)
    setup_logging(args.out, args.log_level)
    try:
        ExperimentRunner(args).run()
        logger.info(f"✅ {args.command} completed")
        return 0
    except KeyboardInterrupt:
        logger.info("⏹️  Interrupted")
        return 1
    except Exception as e:
        logger.error(f"❌ {args.command} failed: {e}")
        logger.error(traceback.format_exc())
        return 1


if __name__ == "__main__":
    sys.exit(main())
