"""
Frozen toy vision-language backbone.

A seeded ViT-style image encoder (patch projection, positional embedding,
ln_pre, pre-LN transformer blocks, ln_post + dense feature head) and a
hashed-word text encoder behind a fixed prompt template. Weights are random
but deterministic in the config seed, and never receive gradients: the only
trainable surface is whatever an adaptation session attaches to the exposed
dense sublayers.
"""

import hashlib
import json
import logging
import struct
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

import numerics
from errors import ConfigError, EmptyCategory, FormatError, InvariantViolation, ShapeMismatch
from numerics import DTYPE, RandomStream, l2_normalize

logger = logging.getLogger(__name__)

PROMPT_TEMPLATE = "an aerial photo of a {category}."
MLP_RATIO = 4
CHANNELS = 3

WEIGHTS_MAGIC = b"SEECOVLM"
WEIGHTS_VERSION = 1

UNIT_NORM_TOL = 1e-9

# DenseLayer -> adapter, visible only to the context (thread or task) that installed it
_ADAPTERS: ContextVar[Dict[Any, Any]] = ContextVar('seeco_adapters', default={})


class ModelConfig(BaseModel):
    """Structure of the frozen backbone."""

    model_config = ConfigDict(extra='forbid', frozen=True)

    image_size: int = Field(224, gt=0)
    patch_size: int = Field(16, gt=0)
    embed_dim: int = Field(64, gt=0)
    num_blocks: int = Field(4, gt=0)
    num_heads: int = Field(4, gt=0)
    vocab_size: int = Field(4096, gt=0)
    positional_embeddings: bool = True
    seed: int = 0

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size


def validate_model_config(cfg: ModelConfig):
    if cfg.image_size % cfg.patch_size != 0:
        raise ConfigError(f"image_size {cfg.image_size} not divisible by patch_size {cfg.patch_size}")
    if cfg.embed_dim % cfg.num_heads != 0:
        raise ConfigError(f"embed_dim {cfg.embed_dim} not divisible by num_heads {cfg.num_heads}")


@dataclass
class DenseFeatureMap:
    """Grid [h, w, D] of unit-norm features."""
    grid: torch.Tensor


@dataclass
class TextEmbeddings:
    """Matrix [D, J] of unit-norm category embeddings."""
    matrix: torch.Tensor
    category_names: List[str]

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[1]


@dataclass
class ProbMap:
    """Per-cell class scores [H', W', J]; `normalized` when rows sum to 1."""
    scores: torch.Tensor
    normalized: bool = False

    @property
    def num_classes(self) -> int:
        return self.scores.shape[-1]

    def labels(self) -> torch.Tensor:
        return self.scores.argmax(dim=-1)

    def detach(self) -> 'ProbMap':
        return ProbMap(self.scores.detach(), self.normalized)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class DenseLayer(nn.Module):
    """
    Frozen fully connected layer y = x W^T + b.

    An adaptation session may install a low-rank adapter for this layer; its
    delta is added to the frozen output. Adapters live in a context variable,
    not on the module: the layer itself never changes, other threads keep
    seeing the frozen forward, and nothing enters the state dict or the
    weight file.
    """

    def __init__(self, weight: torch.Tensor, bias: torch.Tensor, name: str):
        super().__init__()
        self.register_buffer('weight', weight)
        self.register_buffer('bias', bias)
        self.name = name

    @property
    def adapter(self):
        """Adapter installed for this layer in the current context, or None."""
        return _ADAPTERS.get().get(self)

    def install_adapter(self, adapter):
        current = _ADAPTERS.get()
        if self in current:
            raise InvariantViolation(f"{self.name} already carries an adapter")
        _ADAPTERS.set({**current, self: adapter})

    def remove_adapter(self, adapter):
        current = _ADAPTERS.get()
        if current.get(self) is adapter:
            _ADAPTERS.set({k: v for k, v in current.items() if k is not self})

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.linear(x, self.weight, self.bias)
        adapter = self.adapter
        if adapter is not None:
            out = out + adapter.delta(x)
        return out


def _dense(rng: RandomStream, d_in: int, d_out: int, name: str) -> DenseLayer:
    weight = rng.child(name + '.weight').normal((d_out, d_in), scale=d_in ** -0.5)
    bias = rng.child(name + '.bias').normal((d_out,), scale=0.02)
    return DenseLayer(weight, bias, name)


def _quarter_turn_symmetric(weight: torch.Tensor, patch: int) -> torch.Tensor:
    """Average a patch kernel [D, p*p*C] over the four quarter turns of the patch."""
    d = weight.shape[0]
    kernel = weight.reshape(d, patch, patch, CHANNELS)
    turns = [torch.rot90(kernel, q, dims=(1, 2)) for q in range(4)]
    return ((turns[0] + turns[1] + turns[2] + turns[3]) / 4.0).reshape(d, -1)


class TransformerBlock(nn.Module):

    def __init__(self, rng: RandomStream, dim: int, heads: int, index: int):
        super().__init__()
        self.heads = heads
        self.index = index
        self.ln_1 = nn.LayerNorm(dim, elementwise_affine=False, dtype=DTYPE)
        self.qkv = _dense(rng, dim, 3 * dim, f'blocks.{index}.qkv')
        self.out = _dense(rng, dim, dim, f'blocks.{index}.out')
        self.ln_2 = nn.LayerNorm(dim, elementwise_affine=False, dtype=DTYPE)
        self.fc1 = _dense(rng, dim, MLP_RATIO * dim, f'blocks.{index}.fc1')
        self.fc2 = _dense(rng, MLP_RATIO * dim, dim, f'blocks.{index}.fc2')

    def dense_layers(self) -> List[DenseLayer]:
        """The fully connected (MLP) sublayers adapters attach to."""
        return [self.fc1, self.fc2]

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        n, dim = x.shape
        head_dim = dim // self.heads
        q, k, v = self.qkv(x).reshape(n, 3, self.heads, head_dim).permute(1, 2, 0, 3)
        weights = torch.softmax(q @ k.transpose(-1, -2) / head_dim ** 0.5, dim=-1)
        mixed = (weights @ v).permute(1, 0, 2).reshape(n, dim)
        return self.out(mixed)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.ln_1(x))
        x = x + self.fc2(F.gelu(self.fc1(self.ln_2(x))))
        return x


class FrozenModel(nn.Module):
    """The seeded backbone. Build with `build_model`, never train."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        validate_model_config(cfg)
        self.cfg = cfg
        rng = numerics.seeded_rng(cfg.seed)
        dim, patch = cfg.embed_dim, cfg.patch_size

        self.patch_embed = _dense(rng, patch * patch * CHANNELS, dim, 'patch_embed')
        self.patch_embed.weight = _quarter_turn_symmetric(self.patch_embed.weight, patch)
        if cfg.positional_embeddings:
            self.register_buffer('pos_embed', rng.child('pos_embed').normal((cfg.grid_size ** 2, dim)))
        else:
            self.pos_embed = None
        self.ln_pre = nn.LayerNorm(dim, elementwise_affine=False, dtype=DTYPE)
        self.blocks = nn.ModuleList(
            TransformerBlock(rng, dim, cfg.num_heads, i) for i in range(cfg.num_blocks)
        )
        self.ln_post = nn.LayerNorm(dim, elementwise_affine=False, dtype=DTYPE)
        self.dense_head = _dense(rng, dim, dim, 'dense_head')

        self.register_buffer('token_embedding', rng.child('token_embedding').normal((cfg.vocab_size, dim)))
        self.text_proj = _dense(rng, dim, dim, 'text_proj')
        self.requires_grad_(False)

    def dense_layers(self, block: int) -> List[DenseLayer]:
        return self.blocks[block].dense_layers()

    def frozen_tensors(self) -> List[torch.Tensor]:
        """Weights in declaration order (the weight-file order)."""
        return [t for _, t in self.state_dict().items()]


def build_model(cfg: ModelConfig) -> FrozenModel:
    validate_model_config(cfg)
    model = FrozenModel(cfg)
    model.eval()
    logger.info(f"Built frozen backbone: D={cfg.embed_dim}, blocks={cfg.num_blocks}, "
                f"grid={cfg.grid_size}x{cfg.grid_size}, positional={cfg.positional_embeddings}")
    return model


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------

def _assert_unit_norm(x: torch.Tensor, what: str):
    if numerics.CHECKED:
        norms = torch.linalg.vector_norm(x.detach(), dim=-1)
        # NaN compares false against the tolerance
        if not bool(torch.isfinite(norms).all()):
            raise InvariantViolation(f"{what} contains NaN or Inf")
        if bool((norms - 1.0).abs().max() > UNIT_NORM_TOL):
            raise InvariantViolation(f"{what} lost unit norm")


def patchify(img: torch.Tensor, patch: int) -> torch.Tensor:
    """[H, W, C] -> [(H/p)*(W/p), p*p*C], row-major over patches."""
    h, w, c = img.shape
    return (img.reshape(h // patch, patch, w // patch, patch, c)
               .permute(0, 2, 1, 3, 4)
               .reshape((h // patch) * (w // patch), patch * patch * c))


def encode_image(model: FrozenModel, img: torch.Tensor) -> DenseFeatureMap:
    cfg = model.cfg
    if img.dim() != 3 or tuple(img.shape) != (cfg.image_size, cfg.image_size, CHANNELS):
        raise ShapeMismatch(f"Expected image {cfg.image_size}x{cfg.image_size}x{CHANNELS}, got {tuple(img.shape)}")
    tokens = model.patch_embed(patchify(img.to(DTYPE), cfg.patch_size))
    if model.pos_embed is not None:
        tokens = tokens + model.pos_embed
    x = model.ln_pre(tokens)
    for block in model.blocks:
        x = block(x)
    features = l2_normalize(model.dense_head(model.ln_post(x)))
    _assert_unit_norm(features, "image features")
    g = cfg.grid_size
    return DenseFeatureMap(features.reshape(g, g, cfg.embed_dim))


def tokenize(text: str, vocab_size: int) -> List[int]:
    """Lowercased whitespace words hashed (BLAKE2b) into vocab buckets."""
    ids = []
    for word in text.lower().split():
        digest = hashlib.blake2b(word.encode('utf-8'), digest_size=8).digest()
        ids.append(int.from_bytes(digest, 'little') % vocab_size)
    return ids


def encode_text(model: FrozenModel, category: str) -> torch.Tensor:
    if not category or not category.strip():
        raise EmptyCategory("Category name is empty")
    prompt = PROMPT_TEMPLATE.format(category=category.strip())
    ids = torch.tensor(tokenize(prompt, model.cfg.vocab_size), dtype=torch.long)
    pooled = model.token_embedding[ids].mean(dim=0)
    embedding = l2_normalize(model.text_proj(pooled))
    _assert_unit_norm(embedding, f"text embedding of '{category}'")
    return embedding


def encode_categories(model: FrozenModel, names: Sequence[str]) -> TextEmbeddings:
    if not names:
        raise EmptyCategory("At least one category is required")
    matrix = torch.stack([encode_text(model, name) for name in names], dim=1)
    return TextEmbeddings(matrix, list(names))


def similarity(V: DenseFeatureMap, T: TextEmbeddings) -> ProbMap:
    """Cosine scores [h, w, J]; both sides are unit norm so this is a dot product."""
    if V.grid.shape[-1] != T.matrix.shape[0]:
        raise ShapeMismatch(f"Feature dim {V.grid.shape[-1]} != text dim {T.matrix.shape[0]}")
    return ProbMap(V.grid @ T.matrix)


def upsample(scores: torch.Tensor, factor: int) -> torch.Tensor:
    """Nearest-neighbour replication of a [h, w, J] grid by `factor` cells."""
    return scores.repeat_interleave(factor, dim=0).repeat_interleave(factor, dim=1)


def predict(model: FrozenModel, img: torch.Tensor, T: TextEmbeddings, resolution: str = 'pixel') -> ProbMap:
    """Cosine scores per patch; argmax over the last axis is the label map."""
    grid = similarity(encode_image(model, img), T)
    if resolution == 'grid':
        return grid
    return ProbMap(upsample(grid.scores, model.cfg.patch_size))


# ---------------------------------------------------------------------------
# Weight file
# ---------------------------------------------------------------------------

def model_fingerprint(model: FrozenModel) -> str:
    """SHA-256 over every frozen tensor."""
    digest = hashlib.sha256()
    for t in model.frozen_tensors():
        digest.update(t.detach().contiguous().numpy().astype('<f8').tobytes())
    return digest.hexdigest()


def save_model(model: FrozenModel, path: str):
    """
    Layout: magic "SEECOVLM", u32 version, u32 config length, config JSON
    (UTF-8), then each tensor in declaration order as little-endian float64.
    """
    config_block = model.cfg.model_dump_json().encode('utf-8')
    with open(path, 'wb') as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack('<II', WEIGHTS_VERSION, len(config_block)))
        fh.write(config_block)
        for t in model.frozen_tensors():
            fh.write(t.detach().contiguous().numpy().astype('<f8').tobytes())
    logger.info(f"Saved backbone weights to {path}")


def load_model(path: str) -> FrozenModel:
    with open(path, 'rb') as fh:
        blob = fh.read()
    if blob[:len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: not a backbone weight file")
    offset = len(WEIGHTS_MAGIC)
    try:
        version, config_len = struct.unpack_from('<II', blob, offset)
    except struct.error as e:
        raise FormatError(f"{path}: truncated header") from e
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset += 8
    try:
        cfg = ModelConfig(**json.loads(blob[offset:offset + config_len].decode('utf-8')))
    except (ValueError, TypeError) as e:
        raise FormatError(f"{path}: bad config block ({e})") from e
    offset += config_len

    model = FrozenModel(cfg)
    state = model.state_dict()
    for name, t in state.items():
        nbytes = t.numel() * 8
        if offset + nbytes > len(blob):
            raise FormatError(f"{path}: truncated at tensor {name}")
        values = np.frombuffer(blob, dtype="<f8", count=t.numel(), offset=offset)
        state[name] = torch.from_numpy(values.astype(np.float64)).reshape(t.shape)
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    model.load_state_dict(state)
    model.eval()
    return model
