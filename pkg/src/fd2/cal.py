"""Counterfactual attention learning: pooling, effect logits, prototypes, losses.

Tensors follow the ``(..., C, H, W)`` convention so every function works for a
single instance or a leading batch dimension.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, ValidationError

# inside the square root: keeps d/dx finite at 0 without moving nonzero values
SQRT_EPS = 1e-12
NORM_EPS = 1e-12

COUNTERFACTUAL_MODES = ("uniform", "random")


def _check_finite(name, t):
    if not torch.isfinite(t).all():
        raise ValidationError(f"{name} contains non-finite entries")


def _check_pair(features, attentions):
    if features.dim() < 3 or attentions.dim() < 3:
        raise DimensionError("feature map and attention set must be at least 3-D (C, H, W)")
    if features.shape[-2:] != attentions.shape[-2:]:
        raise DimensionError(
            f"spatial shape mismatch: features {tuple(features.shape[-2:])} vs "
            f"attention {tuple(attentions.shape[-2:])}"
        )
    if features.shape[:-3] != attentions.shape[:-3]:
        raise DimensionError(
            f"batch shape mismatch: {tuple(features.shape[:-3])} vs {tuple(attentions.shape[:-3])}"
        )


def l2_normalize(x, dim=-1):
    """Euclidean normalization; the zero vector maps to itself."""
    return F.normalize(x, p=2.0, dim=dim, eps=NORM_EPS)


def signed_sqrt(x):
    return torch.sign(x) * torch.sqrt(torch.abs(x) + SQRT_EPS)


def bilinear_pool(features, attentions):
    """Per-map attention-weighted spatial mean, flattened to ``(..., M*C)``."""
    _check_pair(features, attentions)
    h, w = features.shape[-2:]
    pooled = torch.einsum("...mhw,...chw->...mc", attentions, features) / float(h * w)
    return pooled.flatten(-2)


def attention_pool(features, attentions):
    """Bilinear attention pooling followed by signed sqrt and l2 normalization."""
    _check_finite("features", features)
    _check_finite("attentions", attentions)
    return l2_normalize(signed_sqrt(bilinear_pool(features, attentions)))


def _effect(features, attentions, cf_attentions, weight, bias=None):
    if cf_attentions.shape != attentions.shape:
        raise DimensionError(
            f"counterfactual shape {tuple(cf_attentions.shape)} != factual {tuple(attentions.shape)}"
        )
    z = attention_pool(features, attentions)
    z_hat = attention_pool(features, cf_attentions)
    if weight.shape[-1] != z.shape[-1]:
        raise DimensionError(f"classifier expects dim {weight.shape[-1]}, representation has {z.shape[-1]}")
    p_raw = z @ weight.T
    p_cf = z_hat @ weight.T
    if bias is not None:
        p_raw = p_raw + bias
        p_cf = p_cf + bias
    return z, p_raw, p_raw - p_cf


def counterfactual_effect(features, attentions, cf_attentions, weight, bias=None):
    """Return ``(p_raw, p_eff)`` for factual attention ``A`` and counterfactual ``A_bar``.

    ``p_eff = p_raw - W @ z_hat`` (a bias, if given, enters both predictions).
    """
    _, p_raw, p_eff = _effect(features, attentions, cf_attentions, weight, bias)
    return p_raw, p_eff


def sample_counterfactual(attentions, mode="random", seed=None, generator=None):
    """Draw an uninformative attention set with the shape of ``attentions``.

    ``uniform`` fills every map with ``1/(H*W)``; ``random`` draws i.i.d.
    U[0, 1) values from a seeded generator (``seed`` wins over ``generator``).
    """
    if mode == "uniform":
        h, w = attentions.shape[-2:]
        return torch.full_like(attentions, 1.0 / (h * w))
    if mode == "random":
        if seed is not None:
            generator = torch.Generator().manual_seed(int(seed))
        out = torch.rand(attentions.shape, generator=generator, dtype=attentions.dtype)
        return out.to(attentions.device)
    raise ConfigError(f"unknown counterfactual mode {mode!r}; expected one of {COUNTERFACTUAL_MODES}")


class PrototypeBank:
    """Momentum-updated, normalized class prototypes.

    Prototypes start at zero with ``initialized`` cleared; the first update of
    a class copies ``Norm(z)`` in (effective momentum 1).
    """

    def __init__(self, num_classes, dim, momentum=0.05, dtype=torch.float32):
        if not 0.0 <= momentum <= 1.0:
            raise ConfigError(f"momentum must lie in [0, 1], got {momentum}")
        self.prototypes = torch.zeros(num_classes, dim, dtype=dtype)
        self.initialized = torch.zeros(num_classes, dtype=torch.bool)
        self.momentum = float(momentum)

    @property
    def num_classes(self):
        return self.prototypes.shape[0]

    @property
    def dim(self):
        return self.prototypes.shape[1]

    def _check_class(self, y):
        y = int(y)
        if not 0 <= y < self.num_classes:
            raise IndexError(f"class index {y} out of range [0, {self.num_classes})")
        return y

    @torch.no_grad()
    def update(self, y, z):
        y = self._check_class(y)
        z = z.detach().to(self.prototypes.dtype).reshape(-1)
        if z.shape[0] != self.dim:
            raise DimensionError(f"representation dim {z.shape[0]} != prototype dim {self.dim}")
        _check_finite("representation", z)
        zn = l2_normalize(z)
        if not self.initialized[y]:
            self.prototypes[y] = zn
            self.initialized[y] = True
        else:
            mu = self.momentum
            self.prototypes[y] = (1.0 - mu) * self.prototypes[y] + mu * zn
        return self

    def update_batch(self, ys, zs):
        """Sequential per-sample updates in batch order."""
        for y, z in zip(ys.tolist(), zs):
            self.update(y, z)
        return self

    def copy(self):
        other = PrototypeBank(self.num_classes, self.dim, self.momentum, self.prototypes.dtype)
        other.prototypes = self.prototypes.clone()
        other.initialized = self.initialized.clone()
        return other

    def to(self, dtype):
        other = self.copy()
        other.prototypes = other.prototypes.to(dtype)
        return other


def update_prototype(bank, y, z):
    return bank.update(y, z)


def center_loss(z, c_y):
    """``||z - Norm(c_y)||^2`` along the last axis."""
    if z.shape[-1] != c_y.shape[-1]:
        raise DimensionError(f"dimension mismatch: {z.shape[-1]} vs {c_y.shape[-1]}")
    return (z - l2_normalize(c_y)).pow(2).sum(-1)


def _as_targets(y, logits):
    y = torch.as_tensor(y, dtype=torch.long, device=logits.device)
    k = logits.shape[-1]
    if y.numel() and (y.min() < 0 or y.max() >= k):
        raise IndexError(f"class index out of range [0, {k})")
    return y


def softmax_ce(logits, y):
    """Per-sample softmax cross-entropy for ``(K,)`` or ``(B, K)`` logits."""
    y = _as_targets(y, logits)
    if logits.dim() == 1:
        return F.cross_entropy(logits.unsqueeze(0), y.reshape(1), reduction="none")[0]
    return F.cross_entropy(logits, y.reshape(-1), reduction="none")


def cal_loss(p_raw, p_eff, z, c_y, y, eta=1.0, reduction="mean"):
    if eta < 0:
        raise ConfigError(f"eta must be nonnegative, got {eta}")
    loss = softmax_ce(p_raw, y) + softmax_ce(p_eff, y) + eta * center_loss(z, c_y)
    return loss.mean() if reduction == "mean" else loss


@dataclass
class TeacherOutputs:
    p_bb: torch.Tensor
    p_raw: torch.Tensor
    p_eff: torch.Tensor
    z: torch.Tensor
    attn: torch.Tensor
    features: torch.Tensor | None = None
    # per BN layer: (mean, var) of the layer input, reduced over spatial dims only
    bn_stats: list = field(default_factory=list)


def teacher_forward(image, model, counterfactual="uniform", generator=None, capture_bn=False):
    """Run the backbone + CAL teacher and collect every signal it produces."""
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    if image.dim() != 4 or image.shape[1] != model.in_channels:
        raise ValidationError(
            f"expected image of shape (B, {model.in_channels}, H, W), got {tuple(image.shape)}"
        )
    if model.image_size is not None and tuple(image.shape[-2:]) != (model.image_size, model.image_size):
        raise ValidationError(f"model expects {model.image_size}x{model.image_size} input, got {tuple(image.shape[-2:])}")

    stats = []
    handles = []
    if capture_bn:
        def hook(module, inputs, output):
            x = inputs[0]
            stats.append((x.mean(dim=(2, 3)), x.var(dim=(2, 3), unbiased=False)))

        handles = [m.register_forward_hook(hook) for m in model.bn_layers()]
    try:
        feats = model.backbone(image)
    finally:
        for h in handles:
            h.remove()

    attn = model.attn_predictor(feats)
    cf = sample_counterfactual(attn, counterfactual, generator=generator)
    clf = model.cal_classifier
    z, p_raw, p_eff = _effect(feats, attn, cf, clf.weight, clf.bias)
    p_bb = model.backbone_classifier(feats.mean(dim=(2, 3)))
    out = TeacherOutputs(p_bb=p_bb, p_raw=p_raw, p_eff=p_eff, z=z, attn=attn, features=feats, bn_stats=stats)
    if squeeze:
        out = TeacherOutputs(
            p_bb=p_bb[0], p_raw=p_raw[0], p_eff=p_eff[0], z=z[0], attn=attn[0], features=feats[0],
            bn_stats=[(m[0], v[0]) for m, v in stats],
        )
    return out
