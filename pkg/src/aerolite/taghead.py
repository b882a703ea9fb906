"""Multi-label tag head: sigmoid-linear classifier over frozen embeddings,
binary cross-entropy loss, and the @K retrieval metrics.

predict/bce_loss are pure numpy ops; TagHead is the torch twin used inside the
training graph. A test pins the two against each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .encoder import ImageEmbedding
from .errors import ValidationError

EPS = 1e-7  # probability clamp for log stability

R_AT_K_DEFINITION = (
    "R@k = macro-averaged label recall at cutoff k over samples with >=1 true tag"
)


@dataclass
class TagHeadParams:
    w: np.ndarray  # (K, d_v)
    b: np.ndarray  # (K,)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ValidationError("tag head shapes inconsistent")
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.b))):
            raise ValidationError("non-finite tag head parameters")


@dataclass
class TagPrediction:
    p: np.ndarray
    predicted: set[int]
    tau: float


@dataclass
class TagTarget:
    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y)
        if not np.all((self.y == 0) | (self.y == 1)):
            raise ValidationError("tag targets must be binary")


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def predict(v: ImageEmbedding | np.ndarray, params: TagHeadParams, tau: float = 0.5) -> TagPrediction:
    """p = sigmoid(W v + b); the predicted set uses the inclusive >= tau rule."""
    if not 0.0 < tau < 1.0:
        raise ValidationError(f"tau must be in (0,1), got {tau}")
    vec = v.v if isinstance(v, ImageEmbedding) else np.asarray(v)
    if vec.shape[0] != params.w.shape[1]:
        raise ValidationError(
            f"embedding dim {vec.shape[0]} != tag head dim {params.w.shape[1]}"
        )
    p = sigmoid(params.w @ vec.astype(np.float64) + params.b)
    return TagPrediction(p=p, predicted={int(k) for k in np.nonzero(p >= tau)[0]}, tau=tau)


def bce_loss(p: np.ndarray, target: TagTarget | np.ndarray) -> tuple[float, np.ndarray]:
    """Summed binary cross-entropy and its gradient w.r.t. the logits (p - y).

    Probabilities are clamped to [EPS, 1-EPS] before the logs.
    """
    y = target.y if isinstance(target, TagTarget) else np.asarray(target)
    p = np.asarray(p, dtype=np.float64)
    if p.shape != y.shape:
        raise ValidationError(f"length mismatch: p{p.shape} vs y{y.shape}")
    pc = np.clip(p, EPS, 1.0 - EPS)
    loss = -float(np.sum(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))
    return loss, p - y


class TagHead(nn.Module):
    """Torch tag head used in the joint training graph."""

    def __init__(self, num_tags: int, dim: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.linear = nn.Linear(dim, num_tags, dtype=dtype)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        """Probabilities for a batch of embeddings (..., d_v) -> (..., K)."""
        return torch.sigmoid(self.linear(v))

    def loss(self, p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        pc = p.clamp(EPS, 1.0 - EPS)
        per = -(y * pc.log() + (1.0 - y) * (1.0 - pc).log()).sum(dim=-1)
        return per.mean()

    def params(self) -> TagHeadParams:
        return TagHeadParams(
            self.linear.weight.detach().cpu().numpy(),
            self.linear.bias.detach().cpu().numpy(),
        )


# ---------------------------------------------------------------------------
# Table-1 style retrieval metrics


@dataclass
class RetrievalReport:
    k_cut: int
    precision_at_k: float
    recall_at_k: float
    f1_at_k: float
    map_at_k: float
    recall_at: dict[int, float]
    samples: int
    skipped_no_true: int
    r_at_k_definition: str = R_AT_K_DEFINITION
    extras: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "k_cut": self.k_cut,
            f"P@{self.k_cut}": self.precision_at_k,
            f"R@{self.k_cut}": self.recall_at_k,
            f"F1@{self.k_cut}": self.f1_at_k,
            f"mAP@{self.k_cut}": self.map_at_k,
            **{f"R@{k}": v for k, v in self.recall_at.items()},
            "samples": self.samples,
            "skipped_no_true": self.skipped_no_true,
            "r_at_k_definition": self.r_at_k_definition,
        }


def _ranking(p: np.ndarray) -> np.ndarray:
    """Tag ids by descending probability, ties broken by ascending id."""
    order = np.lexsort((np.arange(len(p)), -np.asarray(p, dtype=np.float64)))
    return order


def retrieval_metrics(
    preds: list[TagPrediction],
    targets: list[TagTarget],
    k_cut: int = 10,
    recall_cuts: tuple[int, ...] = (1, 5, 10),
) -> RetrievalReport:
    """Macro-averaged P@K, R@K, F1@K, AP@K and the recall@k columns.

    Samples with zero true tags contribute nothing to the averages; they are
    counted and reported instead.
    """
    if k_cut < 1:
        raise ValidationError("k_cut must be >= 1")
    if len(preds) != len(targets):
        raise ValidationError("preds/targets length mismatch")

    p_sum = r_sum = f_sum = ap_sum = 0.0
    rk_sum = {k: 0.0 for k in recall_cuts}
    used = 0
    skipped = 0
    for pred, tgt in zip(preds, targets):
        true = set(np.nonzero(tgt.y)[0])
        if not true:
            skipped += 1
            continue
        used += 1
        order = _ranking(pred.p)
        topk = list(order[:k_cut])
        hits = sum(1 for t in topk if t in true)
        prec = hits / k_cut
        rec = hits / len(true)
        p_sum += prec
        r_sum += rec
        f_sum += 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        # AP@K: mean of precision-at-rank over true tags ranked within K
        precs = []
        seen = 0
        for rank, t in enumerate(topk, 1):
            if t in true:
                seen += 1
                precs.append(seen / rank)
        ap_sum += sum(precs) / len(precs) if precs else 0.0
        for k in recall_cuts:
            cut = list(order[:k])
            rk_sum[k] += sum(1 for t in cut if t in true) / len(true)

    if used == 0:
        raise ValidationError("no samples with true tags")
    return RetrievalReport(
        k_cut=k_cut,
        precision_at_k=p_sum / used,
        recall_at_k=r_sum / used,
        f1_at_k=f_sum / used,
        map_at_k=ap_sum / used,
        recall_at={k: v / used for k, v in rk_sum.items()},
        samples=used,
        skipped_no_true=skipped,
    )
