"""
Synthetic benchmark suite.

Generates N seeded scenes, segments each one in every configured mode,
and writes per-scene reports plus the aggregate comparison. Optional
sweeps over K and P and a rotated-view robustness check add their own CSV
files. Report files never carry wall-clock values unless record_timings is
set, so two runs with one config are byte-identical.
"""

import csv
import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch

import numerics
from config import Settings, replace, settings_echo
from errors import ConfigError, InvariantViolation
from evaluation import EvalReport, miou
from mini_vlm import FrozenModel, build_model
from pipeline import SegmentReport, segment_image
from scenes import SyntheticScene, builtin_library, gen_scene, scene_seed
from scl import SynonymLibrary

logger = logging.getLogger(__name__)

SCENE_COLUMNS = ['scene_id', 'mode', 'miou', 'loss_pre', 'loss_post', 'seconds']
SWEEP_COLUMNS = ['parameter', 'value', 'mode', 'miou', 'loss_pre', 'loss_post', 'decreased']
VIEW_COLUMNS = ['scene_id', 'rotation', 'mode', 'miou']


@dataclass
class SceneResult:
    scene_id: int
    mode: str
    report: EvalReport
    segment: SegmentReport
    seconds: float = 0.0

    @property
    def loss_pre(self) -> float:
        return _mean([pre for pre, _ in self.report.per_window_losses])

    @property
    def loss_post(self) -> float:
        return _mean([post for _, post in self.report.per_window_losses])


@dataclass
class SuiteReport:
    results: List[SceneResult] = field(default_factory=list)
    summary: Dict[str, float] = field(default_factory=dict)
    sweep: List[List[str]] = field(default_factory=list)
    views: List[List[str]] = field(default_factory=list)


def _mean(values: Sequence[float]) -> float:
    if not values:
        return math.nan
    total = 0.0
    for v in values:
        total += v
    return total / len(values)


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


def run_scene(model: FrozenModel, scene: SyntheticScene, library: SynonymLibrary, settings: Settings,
              mode: str, scene_id: int = 0) -> SceneResult:
    """Segment one scene in one mode and score it."""
    adaptation = replace(settings.adaptation, mode=mode)
    start = time.perf_counter()
    if mode == 'static':
        with numerics.track_trainables() as created:
            labels, segment = segment_image(model, scene.image, scene.categories, library, adaptation, static=True)
        if created:
            raise InvariantViolation(f"Static run created {len(created)} trainable parameters")
    else:
        labels, segment = segment_image(model, scene.image, scene.categories, library, adaptation)
    seconds = time.perf_counter() - start if settings.suite.record_timings else 0.0

    report = miou(labels, scene.gt, scene.J)
    report.per_window_losses = segment.losses
    report.runtime_seconds = seconds
    report.config = [('mode', mode), ('scene_seed', str(scene.seed))]
    return SceneResult(scene_id, mode, report, segment, seconds)


def suite_scenes(settings: Settings) -> List[SyntheticScene]:
    """The seeded scenes one suite run evaluates, in scene_id order."""
    suite = settings.suite
    H, W = suite.size
    return [
        gen_scene(scene_seed(suite.seed, i), H, W, suite.classes, suite.texture_noise,
                  min_size=settings.model.image_size)
        for i in range(suite.scenes)
    ]


def summarize(results: Sequence[SceneResult], modes: Sequence[str]) -> Dict[str, float]:
    """Aggregate per mode, reduced in ascending scene order."""
    summary: Dict[str, float] = {}
    for mode in modes:
        rows = sorted((r for r in results if r.mode == mode), key=lambda r: r.scene_id)
        losses = [pair for r in rows for pair in r.report.per_window_losses]
        summary[f"{mode}.miou"] = _mean([r.report.miou for r in rows])
        if mode == 'static' or mode == 'consensus':
            continue
        summary[f"{mode}.loss_pre"] = _mean([pre for pre, _ in losses])
        summary[f"{mode}.loss_post"] = _mean([post for _, post in losses])
        summary[f"{mode}.loss_decrease"] = summary[f"{mode}.loss_pre"] - summary[f"{mode}.loss_post"]
        summary[f"{mode}.decreased_windows"] = (
            sum(1 for pre, post in losses if post < pre) / len(losses) if losses else math.nan
        )
        relative = [(pre - post) / pre for pre, post in losses if pre > 0]
        summary[f"{mode}.median_relative_decrease"] = statistics.median(relative) if relative else math.nan
        summary[f"{mode}.trainables"] = float(max((r.segment.trainables for r in rows), default=0))
    return summary


def _sweep(model: FrozenModel, scenes: Sequence[SyntheticScene], library: SynonymLibrary,
           settings: Settings) -> List[List[str]]:
    rows = []
    axes = [('views', v) for v in settings.suite.sweep_views] + [('blocks', p) for p in settings.suite.sweep_blocks]
    for parameter, value in axes:
        if parameter == 'blocks' and not 1 <= value <= settings.model.num_blocks:
            raise ConfigError(f"sweep_blocks value {value} outside [1, {settings.model.num_blocks}]")
        swept = settings.model_copy(update={'adaptation': replace(settings.adaptation, **{parameter: value})})
        results = [run_scene(model, scene, library, swept, 'seeco', i) for i, scene in enumerate(scenes)]
        summary = summarize(results, ['seeco'])
        rows.append([parameter, str(value), 'seeco', _fmt(summary['seeco.miou']),
                     _fmt(summary['seeco.loss_pre']), _fmt(summary['seeco.loss_post']),
                     _fmt(summary['seeco.decreased_windows'])])
        logger.info(f"Sweep {parameter}={value}: mIoU {summary['seeco.miou']:.4f}")
    return rows


def _views(model: FrozenModel, scenes: Sequence[SyntheticScene], library: SynonymLibrary,
           settings: Settings) -> List[List[str]]:
    rows = []
    for i, scene in enumerate(scenes):
        if scene.image.shape[0] != scene.image.shape[1]:
            raise ConfigError("view_robustness needs square scenes")
        for quarter in range(4):
            rotated = SyntheticScene(torch.rot90(scene.image, quarter, dims=(0, 1)).contiguous(),
                                     torch.rot90(scene.gt, quarter, dims=(0, 1)).contiguous(),
                                     scene.J, scene.seed, scene.categories, scene.regions)
            for mode in settings.suite.modes:
                result = run_scene(model, rotated, library, settings, mode, i)
                rows.append([str(i), str(90 * quarter), mode, _fmt(result.report.miou)])
    return rows


def _write_csv(path: Path, header: List[str], rows: List[List[str]]):
    with open(path, 'w', newline='', encoding='utf-8') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(header)
        writer.writerows(rows)


def write_reports(report: SuiteReport, settings: Settings, out_dir: Union[str, Path]):
    out = Path(out_dir)
    reports = out / 'reports'
    reports.mkdir(parents=True, exist_ok=True)

    rows = []
    for result in report.results:
        (reports / f"scene_{result.scene_id:04d}_{result.mode}.txt").write_text(result.report.to_text(), encoding='utf-8')
        rows.append([str(result.scene_id), result.mode, _fmt(result.report.miou),
                     _fmt(result.loss_pre), _fmt(result.loss_post), _fmt(result.seconds)])
    _write_csv(out / 'scenes.csv', SCENE_COLUMNS, rows)

    lines = [f"scenes = {settings.suite.scenes}"]
    lines += [f"{key} = {_fmt(value)}" for key, value in report.summary.items()]
    lines += [f"config.{key} = {value}" for key, value in settings_echo(settings)]
    (out / 'summary.txt').write_text('\n'.join(lines) + '\n', encoding='utf-8')

    if report.sweep:
        _write_csv(out / 'sweep.csv', SWEEP_COLUMNS, report.sweep)
    if report.views:
        _write_csv(out / 'views.csv', VIEW_COLUMNS, report.views)


def run_suite(settings: Settings, out_dir: Union[str, Path], model: Optional[FrozenModel] = None) -> SuiteReport:
    """
    Run the full comparison and write its report files into out_dir.

    Raises:
        ConfigError: unusable sweep values or an output directory that cannot be written
    """
    numerics.configure_threads(settings.suite.threads)
    if settings.suite.threads != 1:
        logger.warning(f"threads={settings.suite.threads}: parallel reductions may change low-order bits, "
                       f"reports are only byte-identical with threads=1")
    if model is None:
        model = build_model(settings.model)
    library = builtin_library()
    scenes = suite_scenes(settings)
    logger.info(f"Running suite: {len(scenes)} scenes, modes {list(settings.suite.modes)}")

    report = SuiteReport()
    for i, scene in enumerate(scenes):
        for mode in settings.suite.modes:
            result = run_scene(model, scene, library, settings, mode, i)
            report.results.append(result)
            logger.info(f"Scene {i} [{mode}]: mIoU {result.report.miou:.4f}")
    report.summary = summarize(report.results, settings.suite.modes)
    if settings.suite.sweep_views or settings.suite.sweep_blocks:
        report.sweep = _sweep(model, scenes, library, settings)
    if settings.suite.view_robustness:
        report.views = _views(model, scenes, library, settings)

    try:
        write_reports(report, settings, out_dir)
    except OSError as e:
        raise ConfigError(f"Cannot write reports to {out_dir}: {e}") from e
    logger.info(f"Suite finished; reports in {out_dir}")
    return report
