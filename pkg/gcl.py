"""
Geometric consensus learning.

Multi-view observation by exact quarter-turn rotations of a square window:
each view is predicted, turned back to the original orientation, and the
views are aggregated into the geometric consensus target (mean, or the
element-wise maximum pseudo-label variant).
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import torch

import numerics
from errors import EmptyInput, NonSquareInput, ShapeMismatch, UnsupportedViewCount
from mini_vlm import DenseFeatureMap, FrozenModel, ProbMap, TextEmbeddings, encode_image, similarity, upsample

logger = logging.getLogger(__name__)

SUPPORTED_VIEW_COUNTS = (1, 2, 4)


@dataclass(frozen=True)
class ViewSet:
    """Observation angles 2*k*pi/K for k = 1..K; the k = K view is the identity."""
    K: int = 4

    def __post_init__(self):
        if self.K not in SUPPORTED_VIEW_COUNTS:
            raise UnsupportedViewCount(f"K={self.K}; supported view counts are {SUPPORTED_VIEW_COUNTS}")

    @property
    def angles(self) -> List[float]:
        return [2.0 * k * torch.pi / self.K for k in range(1, self.K + 1)]

    def quarter_turns(self, k: int) -> int:
        return (4 * k // self.K) % 4


@dataclass
class GeoConsensus:
    """
    target: aggregated map (Y_GCL); per_view: the K inverse-rotated view
    predictions in ascending k; anchor: features of the identity view.
    """
    target: ProbMap
    per_view: List[ProbMap]
    anchor: Optional[DenseFeatureMap] = None


def _quarter_turns(X: torch.Tensor, k: int, K: int) -> int:
    views = ViewSet(K)
    if not 1 <= k <= K:
        raise UnsupportedViewCount(f"view index k={k} outside [1, {K}]")
    if X.dim() < 2 or X.shape[0] != X.shape[1]:
        raise NonSquareInput(f"Rotation needs a square array, got {tuple(X.shape)}")
    return views.quarter_turns(k)


def rotate(X: torch.Tensor, k: int, K: int) -> torch.Tensor:
    """
    Rotate the two leading axes counterclockwise by 2*k*pi/K.

    For a quarter turn out[i, j] = X[j, W - 1 - i]; the result is a
    permutation of X's entries.
    """
    return torch.rot90(X, _quarter_turns(X, k, K), dims=(0, 1))


def inverse_rotate(X: torch.Tensor, k: int, K: int) -> torch.Tensor:
    return torch.rot90(X, -_quarter_turns(X, k, K), dims=(0, 1))


def _aggregate_mean(maps: List[torch.Tensor]) -> torch.Tensor:
    # ascending k, fixed order
    total = maps[0]
    for m in maps[1:]:
        total = total + m
    return total / len(maps)


def gcl_target_pl(per_view: List[ProbMap]) -> ProbMap:
    """Pseudo-label variant: element-wise maximum over the views."""
    if not per_view:
        raise EmptyInput("No views to aggregate")
    shape = tuple(per_view[0].scores.shape)
    target = per_view[0].scores
    for view in per_view[1:]:
        if tuple(view.scores.shape) != shape:
            raise ShapeMismatch(f"View maps differ in shape: {shape} vs {tuple(view.scores.shape)}")
        target = torch.maximum(target, view.scores)
    return ProbMap(target, normalized=False)


def aggregate(per_view: List[ProbMap], aggregation: str = 'mean') -> ProbMap:
    if not per_view:
        raise EmptyInput("No views to aggregate")
    if aggregation == 'max':
        return gcl_target_pl(per_view)
    shape = tuple(per_view[0].scores.shape)
    if any(tuple(v.scores.shape) != shape for v in per_view):
        raise ShapeMismatch("View maps differ in shape")
    return ProbMap(_aggregate_mean([v.scores for v in per_view]), per_view[0].normalized)


def gcl_target(model: FrozenModel, img: torch.Tensor, T: TextEmbeddings, K: int = 4,
               aggregation: str = 'mean', view_softmax: bool = False,
               score_temperature: float = 0.01, resolution: str = 'pixel') -> GeoConsensus:
    """
    Predict every rotated view, undo its rotation, aggregate.

    Args:
        model: frozen backbone (with whatever adapters are attached)
        img: square window [H, W, 3]
        T: category embeddings
        K: number of views (1, 2 or 4)
        aggregation: 'mean' (Y_GCL) or 'max' (pseudo-label variant)
        view_softmax: normalize each view per cell before aggregating
        score_temperature: softmax temperature when view_softmax is set
        resolution: 'grid' (patch cells) or 'pixel'

    Returns:
        GeoConsensus with the target, the K views and the identity-view features
    """
    views = ViewSet(K)
    if img.shape[0] != img.shape[1]:
        raise NonSquareInput(f"Window must be square, got {tuple(img.shape)}")
    per_view: List[ProbMap] = []
    anchor = None
    for k in range(1, views.K + 1):
        features = encode_image(model, rotate(img, k, views.K))
        if k == views.K:
            anchor = features
        scores = inverse_rotate(similarity(features, T).scores, k, views.K)
        if view_softmax:
            scores = numerics.softmax(scores, score_temperature, dim=-1)
        if resolution == 'pixel':
            scores = upsample(scores, model.cfg.patch_size)
        per_view.append(ProbMap(scores, normalized=view_softmax))
    return GeoConsensus(aggregate(per_view, aggregation), per_view, anchor)
