"""
Whole-image inference.

A large image is covered by square windows (clamped at the far edges), each
window is segmented in the configured mode, and the per-window blended
score maps are averaged back into a full-resolution map whose argmax is the
label map.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from config import AdaptationConfig
from errors import AdaptationDiverged, ConfigError, ShapeMismatch, WindowTooLarge
from mini_vlm import CHANNELS, FrozenModel, ProbMap, encode_categories, predict, upsample
from oci import (
    ADAPTIVE_MODES,
    AdaptationSession,
    adapt,
    blend,
    fusion_weight,
    open_session,
    reset,
    static_branches,
    trainable_count,
)
from scl import EnrichedEmbeddings, SynonymLibrary, enrich

logger = logging.getLogger(__name__)

Placement = Tuple[int, int]


@dataclass
class WindowPlan:
    window: int
    stride: int
    rows: List[int]
    cols: List[int]

    @property
    def placements(self) -> List[Placement]:
        """Row-major (row, col) offsets."""
        return [(r, c) for r in self.rows for c in self.cols]


def _offsets(size: int, window: int, stride: int) -> List[int]:
    offsets = list(range(0, size - window + 1, stride))
    if offsets[-1] != size - window:
        offsets.append(size - window)
    return offsets


def plan_windows(H: int, W: int, window: int = 224, stride: int = 112) -> WindowPlan:
    """
    Offsets at multiples of `stride` plus a final one clamped to size - window.

    Raises:
        WindowTooLarge: the window does not fit the image
        ConfigError: stride < 1
    """
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if window > H or window > W:
        raise WindowTooLarge(f"Window {window} does not fit a {H}x{W} image")
    return WindowPlan(window, stride, _offsets(H, window, stride), _offsets(W, window, stride))


@dataclass
class AssembledPrediction:
    scores: ProbMap
    coverage: torch.Tensor

    def labels(self) -> torch.Tensor:
        return self.scores.labels()


def assemble(H: int, W: int, window: int, window_scores: Dict[Placement, torch.Tensor]) -> AssembledPrediction:
    """
    Average overlapping [window, window, J] score maps into an [H, W, J] map.

    Windows are summed in row-major placement order whatever order they
    were produced in, so the result does not depend on processing order.
    """
    if not window_scores:
        raise ShapeMismatch("No window scores to assemble")
    first = next(iter(window_scores.values()))
    J = first.shape[-1]
    total = torch.zeros((H, W, J), dtype=first.dtype)
    coverage = torch.zeros((H, W), dtype=torch.long)
    for (r, c) in sorted(window_scores):
        scores = window_scores[(r, c)]
        if tuple(scores.shape) != (window, window, J):
            raise ShapeMismatch(f"Window at {(r, c)} has scores {tuple(scores.shape)}")
        total[r:r + window, c:c + window] += scores
        coverage[r:r + window, c:c + window] += 1
    if bool((coverage == 0).any()):
        raise ShapeMismatch("Window placements leave pixels uncovered")
    return AssembledPrediction(ProbMap(total / coverage.unsqueeze(-1).to(total.dtype)), coverage)


@dataclass
class WindowReport:
    row: int
    col: int
    loss_pre: float = float('nan')
    loss_post: float = float('nan')
    diverged: bool = False


@dataclass
class SegmentReport:
    mode: str
    windows: List[WindowReport] = field(default_factory=list)
    trainables: int = 0

    @property
    def losses(self) -> List[Tuple[float, float]]:
        return [(w.loss_pre, w.loss_post) for w in self.windows if not math.isnan(w.loss_pre)]


def _consensus_scores(model: FrozenModel, window_img: torch.Tensor, enriched: EnrichedEmbeddings,
                      settings: AdaptationConfig, delta: float) -> torch.Tensor:
    branches = static_branches(model, window_img, enriched, settings)
    return blend(branches.consensus.target, branches.y_scl, delta)


def _prepare(model: FrozenModel, categories: Sequence[str], library: Optional[SynonymLibrary],
             settings: AdaptationConfig) -> EnrichedEmbeddings:
    if library is None:
        raise ConfigError(f"Mode '{settings.mode}' needs a synonym library")
    if library.Z > settings.synonym_count:
        library = library.truncated(settings.synonym_count)
    return enrich(model, categories, library)


def segment_image(model: FrozenModel, img: torch.Tensor, categories: Sequence[str],
                  library: Optional[SynonymLibrary], settings: AdaptationConfig,
                  static: bool = False) -> Tuple[torch.Tensor, SegmentReport]:
    """
    Segment an [H, W, 3] image with sliding windows.

    Args:
        model: frozen backbone; its image_size must equal the window size
        img: image with values in [0, 1]
        categories: class names, index j is label j
        library: synonym library (unused in static mode)
        settings: adaptation settings; `mode` picks the ablation
        static: force the raw unadapted prediction

    Returns:
        (label map [H, W], SegmentReport with per-window losses)
    """
    mode = 'static' if static else settings.mode
    if img.dim() != 3 or img.shape[2] != CHANNELS:
        raise ShapeMismatch(f"Expected an HxWx{CHANNELS} image, got {tuple(img.shape)}")
    if settings.window != model.cfg.image_size:
        raise ConfigError(f"window {settings.window} must equal the backbone input size {model.cfg.image_size}")
    H, W = img.shape[0], img.shape[1]
    plan = plan_windows(H, W, settings.window, settings.stride)
    report = SegmentReport(mode)
    window_scores: Dict[Placement, torch.Tensor] = {}

    if mode == 'static':
        T = encode_categories(model, categories)
        with torch.no_grad():
            for r, c in plan.placements:
                window_img = img[r:r + plan.window, c:c + plan.window]
                window_scores[(r, c)] = predict(model, window_img, T).scores
                report.windows.append(WindowReport(r, c))
        assembled = assemble(H, W, plan.window, window_scores)
        return assembled.labels(), report

    enriched = _prepare(model, categories, library, settings)
    delta = fusion_weight(mode, settings.delta)
    patch = model.cfg.patch_size

    if mode == 'consensus':
        for r, c in plan.placements:
            window_img = img[r:r + plan.window, c:c + plan.window]
            window_scores[(r, c)] = upsample(_consensus_scores(model, window_img, enriched, settings, delta), patch)
            report.windows.append(WindowReport(r, c))
        assembled = assemble(H, W, plan.window, window_scores)
        return assembled.labels(), report

    if mode not in ADAPTIVE_MODES:
        raise ConfigError(f"Unknown mode '{mode}'")

    shared: Optional[AdaptationSession] = None
    try:
        for r, c in plan.placements:
            window_img = img[r:r + plan.window, c:c + plan.window]
            if shared is None:
                shared = open_session(model, enriched, settings)
                report.trainables = max(report.trainables, trainable_count(shared))
            window_report = WindowReport(r, c)
            try:
                state = adapt(shared, window_img)
            except AdaptationDiverged as e:
                logger.warning(f"Window {(r, c)} diverged ({e}); using unadapted consensus scores")
                window_report.diverged = True
                reset(shared)
                shared = None
                scores = _consensus_scores(model, window_img, enriched, settings, delta)
            else:
                window_report.loss_pre, window_report.loss_post = state.loss_pre, state.loss_post
                scores = blend(state.y_gcl, state.y_scl, delta)
                if settings.session_mode == 'per_window':
                    reset(shared)
                    shared = None
            window_scores[(r, c)] = upsample(scores, patch)
            report.windows.append(window_report)
    finally:
        if shared is not None:
            reset(shared)

    assembled = assemble(H, W, plan.window, window_scores)
    logger.debug(f"Segmented {H}x{W} image in mode {mode}: {len(plan.placements)} windows")
    return assembled.labels(), report
