"""
Semantic consensus learning.

An offline synonym library stands in for LLM-generated category
descriptions. Synonym embeddings are mixed per image by trainable scene
contexts (temperature softmax over the synonyms) and compared with the plain
category embeddings to form the semantic consensus target.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch

import numerics
from config import read_utf8
from errors import ConfigError, FormatError, InconsistentSynonymCount, MissingCategory, ShapeMismatch
from mini_vlm import DenseFeatureMap, FrozenModel, ProbMap, TextEmbeddings, encode_text, similarity
from numerics import TrainableSet, l2_normalize

logger = logging.getLogger(__name__)

CONTEXT_MODES = ('per_dimension', 'per_synonym')


def normalize_name(name: str) -> str:
    return ' '.join(name.strip().lower().split())


@dataclass
class SynonymLibrary:
    """category (normalized) -> exactly Z synonyms, in file order."""
    entries: Dict[str, List[str]]
    Z: int

    def synonyms(self, category: str) -> List[str]:
        key = normalize_name(category)
        if key not in self.entries:
            raise MissingCategory(category)
        return self.entries[key]

    def validate(self, categories: Sequence[str]):
        for name in categories:
            self.synonyms(name)

    def truncated(self, Z: int) -> 'SynonymLibrary':
        """Keep the first Z synonyms of every entry."""
        if not 1 <= Z <= self.Z:
            raise ConfigError(f"Library holds {self.Z} synonyms per category, {Z} requested")
        return SynonymLibrary({k: v[:Z] for k, v in self.entries.items()}, Z)


def parse_synonyms(text: str, categories: Optional[Sequence[str]] = None) -> SynonymLibrary:
    """
    Parse `category: syn1, syn2, ..., synZ` lines; `#` starts a comment.

    Raises:
        FormatError: malformed line (with its number)
        InconsistentSynonymCount: entries with different Z
        MissingCategory: a requested category has no entry
    """
    entries: Dict[str, List[str]] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if ':' not in line:
            raise FormatError("expected 'category: synonym, ...'", number)
        name, _, rest = line.partition(':')
        key = normalize_name(name)
        if not key:
            raise FormatError("empty category name", number)
        if key in entries:
            raise FormatError(f"duplicate category '{key}'", number)
        synonyms = [s.strip() for s in rest.split(',')]
        if not synonyms or any(not s for s in synonyms):
            raise FormatError(f"empty synonym for '{key}'", number)
        entries[key] = synonyms

    counts = {len(v) for v in entries.values()}
    if len(counts) > 1:
        raise InconsistentSynonymCount(f"Synonym lists have differing lengths: {sorted(counts)}")
    library = SynonymLibrary(entries, counts.pop() if counts else 0)
    if categories is not None:
        library.validate(categories)
    return library


def load_synonyms(path: Union[str, Path], categories: Optional[Sequence[str]] = None) -> SynonymLibrary:
    text = read_utf8(path)
    library = parse_synonyms(text, categories)
    logger.info(f"Loaded synonym library {path}: {len(library.entries)} categories, Z={library.Z}")
    return library


def write_synonyms(library: SynonymLibrary, path: Union[str, Path]):
    lines = [f"{name}: {', '.join(syns)}" for name, syns in library.entries.items()]
    Path(path).write_text('\n'.join(lines) + '\n', encoding='utf-8')


@dataclass
class EnrichedEmbeddings:
    """
    synonyms: [J, D, Z], column z of slice j is the embedding of synonym z
    of category j (T_hat_j); original: [D, J] (T).
    """
    synonyms: torch.Tensor
    original: TextEmbeddings

    @property
    def Z(self) -> int:
        return self.synonyms.shape[2]


def enrich(model: FrozenModel, categories: Sequence[str], library: SynonymLibrary,
           original: Optional[TextEmbeddings] = None) -> EnrichedEmbeddings:
    """Encode every synonym of every category through the frozen text encoder."""
    library.validate(categories)
    if original is None:
        original = TextEmbeddings(torch.stack([encode_text(model, c) for c in categories], dim=1), list(categories))
    slices = []
    for name in categories:
        slices.append(torch.stack([encode_text(model, s) for s in library.synonyms(name)], dim=1))
    return EnrichedEmbeddings(torch.stack(slices, dim=0), original)


class SceneContexts:
    """
    Trainable mixing logits W shared across categories, zero at the start of
    every image: [D, Z] in per_dimension mode, [Z] in per_synonym mode.
    """

    def __init__(self, trainables: TrainableSet, dim: int, Z: int, tau: float = 0.01,
                 mode: str = 'per_dimension'):
        if mode not in CONTEXT_MODES:
            raise ConfigError(f"Unknown context mode '{mode}'")
        shape = (dim, Z) if mode == 'per_dimension' else (Z,)
        self.logits = trainables.register('contexts.logits', torch.zeros(shape, dtype=numerics.DTYPE))
        self.tau = tau
        self.mode = mode


def zero_logits(dim: int, Z: int, mode: str = 'per_dimension') -> torch.Tensor:
    """Constant (non-trainable) logits equal to a fresh SceneContexts."""
    return torch.zeros((dim, Z) if mode == 'per_dimension' else (Z,), dtype=numerics.DTYPE)


def recalibrate(W: Union[SceneContexts, torch.Tensor], That_j: torch.Tensor, tau: Optional[float] = None) -> torch.Tensor:
    """
    Mix one category's synonym embeddings [D, Z] into a unit vector [D].

    Per dimension d: w_d = softmax_z(W[d, z] / tau), T[d] = sum_z w_d[z] That_j[d, z];
    a [Z] logit vector applies the same weights to every dimension.
    """
    logits = W.logits if isinstance(W, SceneContexts) else W
    if tau is None:
        tau = W.tau if isinstance(W, SceneContexts) else 0.01
    if That_j.dim() != 2:
        raise ShapeMismatch(f"Synonym embeddings must be [D, Z], got {tuple(That_j.shape)}")
    if tuple(logits.shape) not in (tuple(That_j.shape), (That_j.shape[1],)):
        raise ShapeMismatch(f"Context logits {tuple(logits.shape)} do not fit synonyms {tuple(That_j.shape)}")
    weights = numerics.softmax(logits, tau, dim=-1)
    return l2_normalize((weights * That_j).sum(dim=-1), dim=0)


def recalibrate_all(W: Union[SceneContexts, torch.Tensor], enriched: EnrichedEmbeddings,
                    tau: Optional[float] = None) -> TextEmbeddings:
    columns = [recalibrate(W, enriched.synonyms[j], tau) for j in range(enriched.synonyms.shape[0])]
    return TextEmbeddings(torch.stack(columns, dim=1), list(enriched.original.category_names))


def scl_target(V: DenseFeatureMap, T: TextEmbeddings, T_breve: TextEmbeddings) -> Tuple[ProbMap, ProbMap, ProbMap]:
    """
    Returns:
        (Y_SCL, Y_hat, Y_bar) with Y_hat = S(V, T), Y_bar = S(V, T_breve)
        and Y_SCL their mean
    """
    y_hat = similarity(V, T)
    y_bar = similarity(V, T_breve)
    if y_hat.scores.shape != y_bar.scores.shape:
        raise ShapeMismatch("Original and recalibrated embeddings disagree in class count")
    y_scl = ProbMap((y_hat.scores + y_bar.scores) / 2.0)
    return y_scl, y_hat, y_bar
