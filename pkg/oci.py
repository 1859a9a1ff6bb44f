"""
Online consensus injector.

Low-rank adapters on the MLP layers of the last P vision blocks plus the
scene contexts of the text side form the only trainable surface. A session
is opened per window (or image), takes `iterations` AdamW steps on the
consensus loss with detached targets, produces the fused prediction, and is
reset so the backbone is exactly the frozen model again.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch
from torch import nn

import numerics
from config import AdaptationConfig
from errors import AdaptationDiverged, ConfigError, InvariantViolation, ShapeMismatch
from gcl import GeoConsensus, gcl_target
from mini_vlm import DenseLayer, FrozenModel, ProbMap
from numerics import AdamW, TrainableSet, backward, mse
from scl import EnrichedEmbeddings, SceneContexts, recalibrate_all, scl_target, zero_logits

logger = logging.getLogger(__name__)

ADAPTIVE_MODES = ('gcl', 'scl', 'seeco')


@dataclass
class LoRAAdapter:
    """Delta beta * (x A^T) B^T on a frozen dense layer; B starts at zero."""
    A: nn.Parameter
    B: nn.Parameter
    beta: float
    rank: int
    target_layer: DenseLayer

    def delta(self, x: torch.Tensor) -> torch.Tensor:
        return self.beta * ((x @ self.A.T) @ self.B.T)

    def effective_delta(self) -> torch.Tensor:
        """beta * B A, shaped like the frozen weight."""
        return self.beta * (self.B @ self.A)

    def numel(self) -> int:
        return self.A.numel() + self.B.numel()


def lora_a_scale(in_features: int, r: int) -> float:
    """Standard deviation of A: fan-in scale of the frozen layer times 1/sqrt(r)."""
    return (in_features * r) ** -0.5


def attach_lora(model: FrozenModel, P: int, r: int, beta: float, trainables: TrainableSet,
                seed: int = 0) -> List[LoRAAdapter]:
    """
    Attach adapters to every dense sublayer of the last P blocks.

    A is drawn from a stream derived from (seed, layer name) like a frozen
    dense weight (fan-in scaled normal) and then scaled by 1/sqrt(r); B is
    zero, so the adapted forward equals the frozen one until the first update.
    """
    num_blocks = model.cfg.num_blocks
    if not 1 <= P <= num_blocks:
        raise ConfigError(f"P={P} outside [1, {num_blocks}]")
    if r < 1:
        raise ConfigError(f"rank must be >= 1, got {r}")
    if beta <= 0:
        raise ConfigError(f"scaling factor must be positive, got {beta}")

    rng = numerics.seeded_rng(seed)
    adapters = []
    for block in range(num_blocks - P, num_blocks):
        for layer in model.dense_layers(block):
            init = rng.child(layer.name).normal((r, layer.in_features), scale=lora_a_scale(layer.in_features, r))
            A = trainables.register(f"{layer.name}.lora_A", init)
            B = trainables.register(f"{layer.name}.lora_B",
                                    torch.zeros((layer.out_features, r), dtype=numerics.DTYPE))
            adapter = LoRAAdapter(A, B, float(beta), r, layer)
            layer.install_adapter(adapter)
            adapters.append(adapter)
    return adapters


def detach_lora(adapters: List[LoRAAdapter]):
    for adapter in adapters:
        adapter.target_layer.remove_adapter(adapter)


# ---------------------------------------------------------------------------
# Consensus branches and loss
# ---------------------------------------------------------------------------

@dataclass
class Branches:
    """Everything one forward over a window yields, at grid resolution."""
    consensus: GeoConsensus
    y_scl: ProbMap
    y_hat: ProbMap
    y_bar: ProbMap


@dataclass
class Targets:
    """Detached consensus targets (Y_GCL, Y_SCL)."""
    geometric: torch.Tensor
    semantic: torch.Tensor


def compute_branches(model: FrozenModel, img: torch.Tensor, enriched: EnrichedEmbeddings,
                     logits: torch.Tensor, settings: AdaptationConfig) -> Branches:
    consensus = gcl_target(model, img, enriched.original, settings.views, settings.aggregation,
                           settings.view_softmax, settings.score_temperature, resolution='grid')
    recalibrated = recalibrate_all(logits, enriched, settings.tau)
    y_scl, y_hat, y_bar = scl_target(consensus.anchor, enriched.original, recalibrated)
    return Branches(consensus, y_scl, y_hat, y_bar)


def static_branches(model: FrozenModel, img: torch.Tensor, enriched: EnrichedEmbeddings,
                    settings: AdaptationConfig) -> Branches:
    """Consensus maps of the unadapted model; constructs no trainables."""
    logits = zero_logits(model.cfg.embed_dim, enriched.Z, settings.context_mode)
    with torch.no_grad():
        return compute_branches(model, img, enriched, logits, settings)


def seeco_loss(consensus: GeoConsensus, y_scl: ProbMap, y_hat: ProbMap, y_bar: ProbMap,
               geometric: bool = True, semantic: bool = True) -> torch.Tensor:
    """
    (1/K) sum_k mse(Y_GCL, Y^k) + mse(Y_SCL, Y_hat) + mse(Y_SCL, Y_bar).

    Both consensus targets are treated as constants.
    """
    shape = tuple(consensus.target.scores.shape)
    maps = [v.scores for v in consensus.per_view] + [y_scl.scores, y_hat.scores, y_bar.scores]
    if any(tuple(m.shape) != shape for m in maps):
        raise ShapeMismatch("Consensus maps disagree in shape")

    loss = torch.zeros((), dtype=numerics.DTYPE)
    if geometric:
        target = consensus.target.scores.detach()
        geo = torch.zeros((), dtype=numerics.DTYPE)
        for view in consensus.per_view:
            geo = geo + mse(target, view.scores)
        loss = loss + geo / len(consensus.per_view)
    if semantic:
        target = y_scl.scores.detach()
        loss = loss + mse(target, y_hat.scores) + mse(target, y_bar.scores)
    return loss


def loss_terms(mode: str) -> Tuple[bool, bool]:
    """(geometric, semantic) terms of the loss used by each adaptive mode."""
    return {'gcl': (True, False), 'scl': (False, True)}.get(mode, (True, True))


def fusion_weight(mode: str, delta: float) -> float:
    return {'gcl': 1.0, 'scl': 0.0}.get(mode, delta)


def blend(y_gcl: ProbMap, y_scl: ProbMap, delta: float) -> torch.Tensor:
    """delta * Y_GCL + (1 - delta) * Y_SCL."""
    if not 0.0 <= delta <= 1.0:
        raise ConfigError(f"delta={delta} outside [0, 1]")
    if y_gcl.scores.shape != y_scl.scores.shape:
        raise ShapeMismatch(f"Fusion inputs differ: {tuple(y_gcl.scores.shape)} vs {tuple(y_scl.scores.shape)}")
    return delta * y_gcl.scores + (1.0 - delta) * y_scl.scores


def fuse(y_gcl: ProbMap, y_scl: ProbMap, delta: float) -> torch.Tensor:
    """Per-cell argmax of the blend; ties go to the lowest class index."""
    return blend(y_gcl, y_scl, delta).argmax(dim=-1)


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------

@dataclass
class AdaptationSession:
    model: FrozenModel
    enriched: EnrichedEmbeddings
    settings: AdaptationConfig
    trainables: TrainableSet
    adapters: List[LoRAAdapter]
    contexts: Optional[SceneContexts]
    optimizer: Optional[AdamW]
    active: bool = True

    def __enter__(self) -> 'AdaptationSession':
        return self

    def __exit__(self, exc_type, exc, tb):
        reset(self)
        return False


@dataclass
class AdaptedState:
    """Losses before/after the update and the final consensus maps (grid)."""
    loss_pre: float
    loss_post: float
    y_gcl: ProbMap
    y_scl: ProbMap
    steps: int
    losses: List[Tuple[float, float]] = field(default_factory=list)


def open_session(model: FrozenModel, enriched: EnrichedEmbeddings, settings: AdaptationConfig) -> AdaptationSession:
    trainables = TrainableSet()
    adapters = attach_lora(model, settings.blocks, settings.rank, settings.beta, trainables,
                           seed=settings.adapter_seed)
    contexts = SceneContexts(trainables, model.cfg.embed_dim, enriched.Z, settings.tau, settings.context_mode)
    optimizer = AdamW(list(trainables), lr=settings.lr, betas=(settings.beta1, settings.beta2),
                      eps=settings.eps, weight_decay=settings.weight_decay)
    logger.debug(f"Opened adaptation session with {trainables.numel()} trainable values")
    return AdaptationSession(model, enriched, settings, trainables, adapters, contexts, optimizer)


def trainable_count(session: AdaptationSession) -> int:
    return session.trainables.numel()


def session_loss(session: AdaptationSession, img: torch.Tensor,
                 targets: Optional[Targets] = None) -> Tuple[torch.Tensor, Branches]:
    """
    Loss of the session's current parameters on a window.

    With `targets` the consensus maps are replaced by those constants, which
    makes the loss the exact function one optimizer step minimises.
    """
    if not session.active:
        raise InvariantViolation("Session has been reset")
    branches = compute_branches(session.model, img, session.enriched, session.contexts.logits, session.settings)
    consensus, y_scl = branches.consensus, branches.y_scl
    if targets is not None:
        consensus = GeoConsensus(ProbMap(targets.geometric), consensus.per_view, consensus.anchor)
        y_scl = ProbMap(targets.semantic)
    geometric, semantic = loss_terms(session.settings.mode)
    loss = seeco_loss(consensus, y_scl, branches.y_hat, branches.y_bar, geometric, semantic)
    return loss, branches


def adapt(session: AdaptationSession, img: torch.Tensor) -> AdaptedState:
    """
    Run the configured number of update iterations on one window.

    Each iteration re-estimates both consensus targets with the current
    parameters, freezes them, back-propagates the loss and applies AdamW to
    every trainable. The maps of the last post-update forward are the final
    consensus maps.

    Raises:
        AdaptationDiverged: the loss became NaN or infinite
    """
    losses: List[Tuple[float, float]] = []
    final: Optional[Branches] = None
    for _ in range(session.settings.iterations):
        loss, branches = session_loss(session, img)
        pre = float(loss.detach())
        if not math.isfinite(pre):
            raise AdaptationDiverged(f"Non-finite loss before update: {pre}")
        targets = Targets(branches.consensus.target.scores.detach(), branches.y_scl.scores.detach())

        backward(loss, session.trainables)
        session.optimizer.step()

        with torch.no_grad():
            post_loss, final = session_loss(session, img, targets)
        post = float(post_loss)
        if not math.isfinite(post):
            raise AdaptationDiverged(f"Non-finite loss after update: {post}")
        losses.append((pre, post))

    return AdaptedState(
        loss_pre=losses[0][0],
        loss_post=losses[-1][1],
        y_gcl=final.consensus.target.detach(),
        y_scl=final.y_scl.detach(),
        steps=len(losses),
        losses=losses,
    )


def reset(session: AdaptationSession):
    """Detach adapters and drop contexts and optimizer state. Idempotent."""
    detach_lora(session.adapters)
    session.adapters = []
    session.contexts = None
    session.optimizer = None
    session.trainables = TrainableSet()
    session.active = False
