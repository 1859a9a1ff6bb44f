"""
mIoU evaluation and its plain-text report.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Tuple

import torch

from errors import FormatError, ShapeMismatch

logger = logging.getLogger(__name__)


@dataclass
class EvalReport:
    """
    per_class_iou holds NaN for classes absent from both pred and gt;
    miou is the mean over the others (NaN when there are none).
    """
    per_class_iou: List[float]
    miou: float
    per_window_losses: List[Tuple[float, float]] = field(default_factory=list)
    runtime_seconds: float = 0.0
    config: List[Tuple[str, str]] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"miou = {self.miou!r}", f"classes = {len(self.per_class_iou)}"]
        lines += [f"iou.{j} = {iou!r}" for j, iou in enumerate(self.per_class_iou)]
        lines.append(f"windows = {len(self.per_window_losses)}")
        for i, (pre, post) in enumerate(self.per_window_losses):
            lines.append(f"loss.{i} = {pre!r},{post!r}")
        lines.append(f"runtime_seconds = {self.runtime_seconds!r}")
        lines += [f"config.{key} = {value}" for key, value in self.config]
        return '\n'.join(lines) + '\n'

    @classmethod
    def from_text(cls, text: str) -> 'EvalReport':
        values = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            if not raw.strip():
                continue
            key, sep, value = raw.partition(' = ')
            if not sep:
                raise FormatError("expected 'key = value'", number)
            values[key] = value
        try:
            J = int(values['classes'])
            per_class = [float(values[f"iou.{j}"]) for j in range(J)]
            losses = []
            for i in range(int(values['windows'])):
                pre, post = values[f"loss.{i}"].split(',')
                losses.append((float(pre), float(post)))
            config = [(k[len('config.'):], v) for k, v in values.items() if k.startswith('config.')]
            return cls(per_class, float(values['miou']), losses, float(values['runtime_seconds']), config)
        except (KeyError, ValueError) as e:
            raise FormatError(f"incomplete report ({e})") from e


def confusion_matrix(pred: torch.Tensor, gt: torch.Tensor, J: int) -> torch.Tensor:
    """[J, J] counts, rows gt, columns pred."""
    index = gt.reshape(-1).long() * J + pred.reshape(-1).long()
    return torch.bincount(index, minlength=J * J).reshape(J, J)


def miou(pred: torch.Tensor, gt: torch.Tensor, J: int) -> EvalReport:
    """
    IoU_j = |pred=j and gt=j| / |pred=j or gt=j| per class, averaged over
    the classes present in pred or gt.

    Raises:
        ShapeMismatch: pred and gt differ in shape, or labels fall outside [0, J)
    """
    if tuple(pred.shape) != tuple(gt.shape):
        raise ShapeMismatch(f"pred {tuple(pred.shape)} and gt {tuple(gt.shape)} differ")
    for name, labels in (('pred', pred), ('gt', gt)):
        if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= J):
            raise ShapeMismatch(f"{name} labels outside [0, {J})")

    conf = confusion_matrix(pred, gt, J).tolist()
    per_class = []
    for j in range(J):
        inter = conf[j][j]
        union = sum(conf[j]) + sum(row[j] for row in conf) - inter
        per_class.append(inter / union if union else math.nan)

    present = [iou for iou in per_class if not math.isnan(iou)]
    total = 0.0
    for iou in present:
        total += iou
    return EvalReport(per_class, total / len(present) if present else math.nan)
