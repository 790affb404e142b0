"""Fine-grained characteristic constraint, similarity constraint and loss composition."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .cal import softmax_ce
from .errors import ConfigError, DimensionError, StateError


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5
    lam: float = 0.8
    eta: float = 1.0
    mu: float = 0.05
    eps: float = 1e-8
    tau: float = 4.0

    def __post_init__(self):
        for name, key in (("alpha", "alpha"), ("beta", "beta"), ("lam", "lambda")):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{key} must lie in [0, 1], got {v}")
        if self.eta < 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        if not 0.0 < self.mu < 1.0:
            raise ConfigError(f"mu must lie in (0, 1), got {self.mu}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")

    def as_dict(self):
        return asdict(self)


@dataclass
class ConstraintReport:
    l_f: object
    l_s: object
    l_cls: object
    l_other: object
    l_total: object
    prototype_score: object = None


def norm_l2(u, v, eps=1e-8):
    """Symmetrically normalized distance ``|u-v| / (|u| + |v| + eps)`` over the last axis."""
    if u.shape[-1] != v.shape[-1]:
        raise DimensionError(f"dimension mismatch: {u.shape[-1]} vs {v.shape[-1]}")
    num = torch.linalg.vector_norm(u - v, dim=-1)
    den = torch.linalg.vector_norm(u, dim=-1) + torch.linalg.vector_norm(v, dim=-1) + eps
    return num / den


def _prototype_terms(z, bank, y, eps):
    """Return ``(l2(z, c_y), mean_{k != y, initialized} l2(z, c_k))`` per sample."""
    protos = bank.prototypes.to(z.dtype)
    if z.shape[-1] != protos.shape[-1]:
        raise DimensionError(f"representation dim {z.shape[-1]} != prototype dim {protos.shape[-1]}")
    k = protos.shape[0]
    single = z.dim() == 1
    zb = z.unsqueeze(0) if single else z
    yb = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    if yb.numel() != zb.shape[0]:
        raise DimensionError(f"{yb.numel()} labels for {zb.shape[0]} representations")
    if yb.min() < 0 or yb.max() >= k:
        raise IndexError(f"class index out of range [0, {k})")
    init = bank.initialized
    if int(init.sum()) < 2:
        raise StateError("fine-grained constraint needs at least two initialized prototypes")
    if not bool(init[yb].all()):
        raise StateError("target-class prototype is not initialized")

    dist = norm_l2(zb.unsqueeze(1), protos.unsqueeze(0), eps)  # (B, K)
    own = dist.gather(1, yb.unsqueeze(1)).squeeze(1)
    others = init.unsqueeze(0).expand_as(dist).clone()
    others[torch.arange(len(yb)), yb] = False
    other_mean = (dist * others).sum(1) / others.sum(1)
    if single:
        return own[0], other_mean[0]
    return own, other_mean


def fg_constraint(z, bank, y, beta=0.5, eps=1e-8):
    own, other_mean = _prototype_terms(z, bank, y, eps)
    return beta * own + (1.0 - beta) * (1.0 - other_mean)


def prototype_score(z, bank, y, beta=0.5, eps=1e-8):
    own, other_mean = _prototype_terms(z, bank, y, eps)
    return (1.0 - beta) * other_mean - beta * own


def similarity_constraint(a_current, priors, eps=1e-8):
    """``1 - mean_j l2(vec(a_current), vec(a_j))``; zero when there are no priors.

    Each attention set is flattened over its last three axes ``(M, H, W)``;
    leading axes are treated as a batch.
    """
    batch_shape = a_current.shape[:-3]
    if len(priors) == 0:
        return torch.zeros(batch_shape, dtype=a_current.dtype, device=a_current.device)
    for p in priors:
        if p.shape != a_current.shape:
            raise DimensionError(f"prior shape {tuple(p.shape)} != current {tuple(a_current.shape)}")
    cur = a_current.flatten(-3)
    stacked = torch.stack([p.flatten(-3) for p in priors], dim=0)
    return 1.0 - norm_l2(cur.unsqueeze(0), stacked, eps).mean(0)


def cls_loss(p_bb, p_cal, y, alpha=0.5, reduction="mean"):
    loss = (1.0 - alpha) * softmax_ce(p_bb, y) + alpha * softmax_ce(p_cal, y)
    return loss.mean() if reduction == "mean" and loss.dim() > 0 else loss


def total_loss(l_other, l_cls, l_f, l_s, lam=0.8, score=None):
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    l_total = l_other + l_cls + lam * l_f + (1.0 - lam) * l_s
    return ConstraintReport(l_f=l_f, l_s=l_s, l_cls=l_cls, l_other=l_other, l_total=l_total, prototype_score=score)
