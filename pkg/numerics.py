"""
Numeric substrate: float64 tensors, stable softmax, mean squared error,
an explicitly registered set of trainable parameters with reverse-mode
gradients, the AdamW update rule, and seeded random streams.

Frozen tensors never record autograd history; only parameters registered in a
TrainableSet do, so a backward pass materializes gradients for those alone.
"""

import hashlib
import logging
import os
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from errors import (
    ConfigError,
    DuplicateParameter,
    EmptyInput,
    InvalidTemperature,
    NonFiniteValue,
    ShapeMismatch,
    StaleGraph,
    StateUninitialized,
)

logger = logging.getLogger(__name__)

DTYPE = torch.float64
MASK64 = (1 << 64) - 1

# Finite-value and unit-norm checks; on unless SEECO_CHECKED=false
CHECKED = os.getenv('SEECO_CHECKED', 'true').lower() == 'true'

# Hooks called with every TrainableParam at construction time
_PARAM_HOOKS: List[Callable[[nn.Parameter], None]] = []


def configure_threads(threads: int = 1):
    """Pin intra-op parallelism so reductions run in one fixed order."""
    torch.set_num_threads(max(1, int(threads)))


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteValue(f"{what} contains NaN or Inf")
    return t


def as_tensor(data, checked: Optional[bool] = None) -> torch.Tensor:
    """
    Build a float64 tensor (row-major, contiguous) from array-like data.

    Args:
        data: nested lists, numpy array or tensor
        checked: reject NaN/Inf; defaults to the process-wide CHECKED switch

    Returns:
        float64 tensor
    """
    t = torch.as_tensor(data, dtype=DTYPE).contiguous()
    if checked is None:
        checked = CHECKED
    if checked:
        check_finite(t)
    return t


def softmax(v: torch.Tensor, tau: float = 1.0, dim: int = -1) -> torch.Tensor:
    """
    Temperature softmax exp(v/tau) / sum exp(v/tau) along `dim`.

    The maximum is subtracted before exponentiation, and the normalizer sums
    the exponentials in sorted order so the result is exactly
    permutation-equivariant.
    """
    tau = float(tau)
    if not tau > 0.0 or not np.isfinite(tau):
        raise InvalidTemperature(f"Temperature must be positive, got {tau}")
    if v.numel() == 0 or v.shape[dim] == 0:
        raise EmptyInput("softmax of an empty vector")
    z = v / tau
    z = z - z.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(z)
    denom = torch.sort(e, dim=dim).values.sum(dim=dim, keepdim=True)
    return e / denom


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean over all elements of (a - b)^2."""
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatch(f"mse operands differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.numel() == 0:
        raise EmptyInput("mse of empty tensors")
    return ((a - b) ** 2).mean()


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return x / torch.linalg.vector_norm(x, dim=dim, keepdim=True)


# ---------------------------------------------------------------------------
# Trainable parameters
# ---------------------------------------------------------------------------

class TrainableSet:
    """
    The registered trainables of one adaptation session.

    Each entry is an nn.Parameter carrying a unique `param_id` and a
    zero-initialized `.grad` of its own shape.
    """

    def __init__(self):
        self._params: Dict[str, nn.Parameter] = {}

    def register(self, name: str, value) -> nn.Parameter:
        if name in self._params:
            raise DuplicateParameter(f"Trainable '{name}' already registered")
        param = nn.Parameter(as_tensor(value).clone(), requires_grad=True)
        param.param_id = name
        param.grad = torch.zeros_like(param)
        self._params[name] = param
        for hook in list(_PARAM_HOOKS):
            hook(param)
        return param

    def __getitem__(self, name: str) -> nn.Parameter:
        return self._params[name]

    def __iter__(self) -> Iterator[nn.Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def numel(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.grad = torch.zeros_like(p)


def add_param_hook(hook: Callable[[nn.Parameter], None]) -> Callable[[], None]:
    """Register an instrumentation hook; returns a function removing it."""
    _PARAM_HOOKS.append(hook)
    return lambda: _PARAM_HOOKS.remove(hook)


@contextmanager
def track_trainables():
    """Collect every TrainableParam constructed inside the block."""
    created: List[nn.Parameter] = []
    remove = add_param_hook(created.append)
    try:
        yield created
    finally:
        remove()


def backward(loss: torch.Tensor, params: Iterable[nn.Parameter]):
    """
    Populate `.grad` of each registered param with d(loss)/d(param).

    Params the loss does not depend on receive zeros. A loss graph can be
    consumed once; a second call without a fresh forward raises StaleGraph.
    """
    params = list(params)
    if getattr(loss, '_seeco_consumed', False):
        raise StaleGraph("backward called twice on the same forward pass")
    if loss.dim() != 0:
        raise ShapeMismatch(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    loss._seeco_consumed = True

    grads: List[Optional[torch.Tensor]] = [None] * len(params)
    if loss.requires_grad and params:
        found = torch.autograd.grad(loss, params, allow_unused=True)
        grads = list(found)
    for p, g in zip(params, grads):
        p.grad = torch.zeros_like(p) if g is None else g.detach()


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

class AdamW(torch.optim.Optimizer):
    """
    AdamW with bias correction and decoupled weight decay.

    Per-parameter state (the OptimizerState): `exp_avg` (m), `exp_avg_sq` (v)
    and `step` (t), initialized eagerly at construction.
    """

    def __init__(self, params, lr: float = 3e-4, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        if lr < 0.0:
            raise ConfigError(f"Invalid learning rate: {lr}")
        if not 0.0 <= betas[0] < 1.0 or not 0.0 <= betas[1] < 1.0:
            raise ConfigError(f"Invalid betas: {betas}")
        if eps <= 0.0:
            raise ConfigError(f"Invalid eps: {eps}")
        if weight_decay < 0.0:
            raise ConfigError(f"Invalid weight_decay: {weight_decay}")
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)
        for group in self.param_groups:
            for p in group['params']:
                self.state[p] = {
                    'step': 0,
                    'exp_avg': torch.zeros_like(p, memory_format=torch.preserve_format),
                    'exp_avg_sq': torch.zeros_like(p, memory_format=torch.preserve_format),
                }

    def group_of(self, param: nn.Parameter) -> Dict:
        for group in self.param_groups:
            if any(p is param for p in group['params']):
                return group
        raise StateUninitialized(f"Parameter {getattr(param, 'param_id', '?')} is not managed by this optimizer")

    @torch.no_grad()
    def step(self, closure: Optional[Callable] = None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            for p in group['params']:
                adamw_step(self, p)
        return loss


@torch.no_grad()
def adamw_step(optimizer: AdamW, param: nn.Parameter):
    """
    One AdamW update of `param`:
        value <- value * (1 - lr * weight_decay)
        m <- b1 m + (1 - b1) g ;  v <- b2 v + (1 - b2) g^2 ;  t <- t + 1
        value <- value - lr * m_hat / (sqrt(v_hat) + eps)
    """
    state = optimizer.state.get(param)
    if not state or 'exp_avg' not in state:
        raise StateUninitialized(f"No optimizer state for {getattr(param, 'param_id', '?')}")
    if param.grad is None:
        raise StateUninitialized(f"No gradient for {getattr(param, 'param_id', '?')}")
    group = optimizer.group_of(param)
    lr = group['lr']
    beta1, beta2 = group['betas']
    grad = param.grad

    if group['weight_decay'] != 0:
        param.mul_(1.0 - lr * group['weight_decay'])

    state['step'] += 1
    t = state['step']
    exp_avg, exp_avg_sq = state['exp_avg'], state['exp_avg_sq']
    exp_avg.mul_(beta1).add_(grad, alpha=1 - beta1)
    exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)

    m_hat = exp_avg / (1 - beta1 ** t)
    v_hat = exp_avg_sq / (1 - beta2 ** t)
    param.sub_(lr * m_hat / (v_hat.sqrt() + group['eps']))


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

def _tag_value(tag: Union[int, str]) -> int:
    if isinstance(tag, str):
        return int.from_bytes(hashlib.blake2b(tag.encode('utf-8'), digest_size=8).digest(), 'little')
    return int(tag) & MASK64


class RandomStream:
    """
    Deterministic stream over numpy's Philox-4x64 counter-based generator.

    The key is derived with SeedSequence from (seed, *tags), so identical
    seeds give bit-identical sequences on every platform numpy supports.
    Children derived with `child(tag)` are independent streams.
    """

    def __init__(self, seed: int, tags: Sequence[int] = ()):
        self.seed = int(seed) & MASK64
        self.tags = tuple(tags)
        sequence = np.random.SeedSequence([self.seed, *self.tags])
        self._gen = np.random.Generator(np.random.Philox(sequence))

    def child(self, tag: Union[int, str]) -> 'RandomStream':
        return RandomStream(self.seed, self.tags + (_tag_value(tag),))

    def normal(self, shape, scale: float = 1.0) -> torch.Tensor:
        return torch.from_numpy(self._gen.standard_normal(size=shape) * scale).to(DTYPE)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> torch.Tensor:
        return torch.from_numpy(np.asarray(self._gen.uniform(low, high, size=shape))).to(DTYPE)

    def random(self) -> float:
        return float(self._gen.random())

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in [low, high)."""
        return int(self._gen.integers(low, high))


def seeded_rng(seed: int) -> RandomStream:
    return RandomStream(seed)
