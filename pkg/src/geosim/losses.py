"""Training objective: identity, triplet, view, orthogonality and prompt-offset terms."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch.nn import functional as F

from .errors import InputError


@dataclass(frozen=True)
class LossWeights:
    w_global: float = 1.0
    w_local: float = 1.0
    w_view_orth: float = 0.5
    w_geo: float = 0.1

    def __post_init__(self):
        if min(self.w_global, self.w_local, self.w_view_orth, self.w_geo) < 0:
            raise InputError("loss weights must be non-negative")


@dataclass
class LossReport:
    id_global: float
    tri_global: float
    id_local: float
    tri_local: float
    view: float
    orth: float
    geo: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def _labels(labels, n_classes: int | None = None) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if n_classes is not None and ((labels < 0) | (labels >= n_classes)).any():
        raise InputError(f"labels must lie in [0, {n_classes})")
    return labels


def id_loss(logits: torch.Tensor, labels, label_smoothing: float = 0.0) -> torch.Tensor:
    """Mean softmax cross-entropy."""
    labels = _labels(labels, logits.shape[-1])
    return F.cross_entropy(logits, labels, label_smoothing=label_smoothing)


def pairwise_euclidean(x: torch.Tensor) -> torch.Tensor:
    sq = (x.unsqueeze(1) - x.unsqueeze(0)).pow(2).sum(-1)
    # sqrt has an infinite slope at 0; the diagonal never feeds the loss, so pad it
    eye = torch.eye(x.shape[0], dtype=torch.bool)
    sq = torch.where(eye, torch.ones_like(sq), sq)
    return torch.where(eye, torch.zeros_like(sq), sq.clamp_min(1e-24).sqrt())


def triplet_loss(features: torch.Tensor, labels, margin: float = 0.3) -> torch.Tensor:
    """Batch-hard triplet loss with Euclidean distances."""
    labels = _labels(labels)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool)
    pos_mask = same & ~eye
    neg_mask = ~same
    if not pos_mask.any(dim=1).all() or not neg_mask.any(dim=1).all():
        raise InputError("batch-hard mining needs >= 2 identities with >= 2 instances each")
    dist = pairwise_euclidean(features)
    hardest_pos = torch.where(pos_mask, dist, torch.full_like(dist, -1.0)).max(dim=1).values
    hardest_neg = torch.where(neg_mask, dist, torch.full_like(dist, float("inf"))).min(dim=1).values
    return F.relu(hardest_pos - hardest_neg + margin).mean()


def view_loss(view_logits: torch.Tensor, view_labels) -> torch.Tensor:
    """Negative log-likelihood of the true view, averaged over the batch."""
    labels = _labels(view_labels, view_logits.shape[-1])
    logp = F.log_softmax(view_logits, dim=-1)
    return -logp.gather(-1, labels.unsqueeze(-1)).squeeze(-1).sum() / labels.numel()


def orth_loss(inv: torch.Tensor, v: torch.Tensor, inner_product: bool = False) -> torch.Tensor:
    """Sum over dims of |inv_i * v_i| (batch mean for 2-D input).

    ``inner_product=True`` uses |<inv, v>| instead.
    """
    if inv.shape != v.shape:
        raise InputError(f"shape mismatch {tuple(inv.shape)} vs {tuple(v.shape)}")
    if inner_product:
        per = (inv * v).sum(-1).abs()
    else:
        per = (inv * v).abs().sum(-1)
    return per.mean() if per.dim() else per


def geo_reg(offset: torch.Tensor) -> torch.Tensor:
    """Squared Frobenius norm of the prompt offset; batch mean for (B, L, d)."""
    sq = offset.pow(2)
    if offset.dim() == 3:
        return sq.sum(dim=(1, 2)).mean()
    return sq.sum()


def total_loss(parts: dict, w: LossWeights = LossWeights()):
    return (w.w_global * (parts["id_global"] + parts["tri_global"])
            + w.w_local * (parts["id_local"] + parts["tri_local"])
            + w.w_view_orth * (parts["view"] + parts["orth"])
            + w.w_geo * parts["geo"])


def compute_losses(out, ids, views, w: LossWeights = LossWeights(), margin: float = 0.3,
                   label_smoothing: float = 0.0, orth_inner_product: bool = False,
                   unit_features: bool = False):
    """All terms for one batch of :class:`~geosim.model.ModelOutput`; returns (total, parts).

    With ``unit_features`` the triplet and orthogonality terms see
    L2-normalized features, so neither can be lowered by shrinking them.
    """
    x_inv, x_ref, view = out.x_inv, out.x_ref, out.view
    if unit_features:
        x_inv, x_ref, view = (F.normalize(t, dim=-1) for t in (x_inv, x_ref, view))
    parts = {
        "id_global": id_loss(out.id_logits_global, ids, label_smoothing),
        "tri_global": triplet_loss(x_inv, ids, margin),
        "id_local": id_loss(out.id_logits_local, ids, label_smoothing),
        "tri_local": triplet_loss(x_ref, ids, margin),
        "view": view_loss(out.view_logits, views),
        "orth": orth_loss(x_inv, view, orth_inner_product),
        "geo": geo_reg(out.prompt_offset),
    }
    return total_loss(parts, w), parts


def report(parts: dict, w: LossWeights = LossWeights()) -> LossReport:
    vals = {k: float(v) for k, v in parts.items()}
    return LossReport(total=float(total_loss(vals, w)), **vals)
