"""Stage 2: group-wise synthesis of distilled images against a frozen teacher."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .cal import softmax_ce
from .constraints import cls_loss, fg_constraint, prototype_score, similarity_constraint, total_loss
from .data import class_names, to_normalized, to_uint8
from .errors import NonFiniteLossError, StateError, ValidationError
from .models import parameter_hash

logger = logging.getLogger(__name__)

ALL_TERMS = frozenset({"other", "cls", "fg", "sim"})
PIXEL_RANGE = (-1.0, 1.0)


@dataclass(frozen=True)
class DistillPlan:
    ipc: int
    group_size: int
    groups: tuple

    @property
    def num_groups(self):
        return len(self.groups)

    def group_starts(self):
        starts, s = [], 0
        for n in self.groups:
            starts.append(s)
            s += n
        return starts


def plan_groups(ipc, n_s):
    """Split ``ipc`` images into ``ceil(ipc / n_s)`` groups; only the last may be short."""
    if ipc < 1 or n_s < 1:
        raise ValueError(f"ipc and group size must be positive, got ipc={ipc}, n_s={n_s}")
    g = math.ceil(ipc / n_s)
    last = ipc - (g - 1) * n_s
    return DistillPlan(ipc=ipc, group_size=n_s, groups=tuple([n_s] * (g - 1) + [last]))


def _resize(img, size):
    if tuple(img.shape[-2:]) == (size, size):
        return img.clone()
    return F.interpolate(img.unsqueeze(0), size=(size, size), mode="bilinear",
                         align_corners=False, antialias=True)[0]


def init_image(source_pool, grid_mode, rng, size=None):
    """Initialize one image from real images of a single class.

    ``1x1`` picks one image; ``2x2`` tiles four downscaled picks into
    quadrants (top-left, top-right, bottom-left, bottom-right). Picks are
    drawn without replacement when the pool allows it.
    """
    n = source_pool.shape[0]
    if n == 0:
        raise ValidationError("source pool is empty")
    size = size or source_pool.shape[-1]
    if grid_mode == "1x1":
        return _resize(source_pool[int(rng.integers(n))], size)
    if grid_mode == "2x2":
        idx = rng.choice(n, size=4, replace=n < 4)
        half = size // 2
        tiles = [_resize(source_pool[int(i)], half) for i in idx]
        top = torch.cat(tiles[:2], dim=-1)
        bottom = torch.cat(tiles[2:], dim=-1)
        return torch.cat([top, bottom], dim=-2)
    raise ValueError(f"unknown grid mode {grid_mode!r}; expected '1x1' or '2x2'")


def bn_alignment(bn_stats, snapshot):
    """Per-sample sum over layers of squared gaps between batch and running statistics."""
    if len(bn_stats) != len(snapshot):
        raise StateError(f"captured {len(bn_stats)} BN layers but snapshot has {len(snapshot)}")
    total = 0.0
    for (mean, var), (r_mean, r_var) in zip(bn_stats, snapshot):
        r_mean = r_mean.to(mean.dtype)
        r_var = r_var.to(var.dtype)
        total = total + (mean - r_mean).pow(2).sum(-1) + (var - r_var).pow(2).sum(-1)
    return total


def base_distill_loss(outputs, snapshot, y, r_bn=0.01):
    """Reference base objective: CE on the backbone head plus BN-statistic alignment."""
    loss = softmax_ce(outputs.p_bb, y)
    if r_bn:
        loss = loss + r_bn * bn_alignment(outputs.bn_stats, snapshot)
    return loss


def _cosine_lr(base, step, total):
    return 0.5 * base * (1.0 + math.cos(math.pi * step / max(total, 1)))


def distill_sample(teacher, init, ys, prior_attns, weights, steps=500, lr=0.1, r_bn=0.01,
                   use_constraints=True, terms=None, history=None):
    """Optimize a batch of images (one per entry of ``ys``) against the frozen teacher.

    ``prior_attns`` holds the attention sets of the previously synthesized
    samples of the same group, each shaped like the teacher's attention for
    ``init``. Rows of the batch do not interact: every loss is per sample and
    Adam is elementwise. Returns ``(images, attention)``.
    """
    model, bank, snapshot = teacher.model, teacher.bank, teacher.bn_stats
    if any(p.requires_grad for p in model.parameters()):
        raise StateError("teacher must be frozen (requires_grad=False) during synthesis")
    model.eval()
    terms = ALL_TERMS if terms is None else frozenset(terms)
    ys = torch.as_tensor(ys, dtype=torch.long).reshape(-1)
    x = init.detach().clone().reshape(len(ys), *init.shape[-3:]).requires_grad_(True)
    opt = torch.optim.Adam([x], lr=lr, betas=(0.5, 0.9))

    for step in range(steps):
        for group in opt.param_groups:
            group["lr"] = _cosine_lr(lr, step, steps)
        out = model(x, counterfactual="uniform", capture_bn=True)
        zero = x.new_zeros(len(ys))
        l_other = base_distill_loss(out, snapshot, ys, r_bn) if "other" in terms else zero
        l_cls = cls_loss(out.p_bb, out.p_raw, ys, weights.alpha, reduction="none") if "cls" in terms else zero
        if use_constraints:
            l_f = fg_constraint(out.z, bank, ys, weights.beta, weights.eps) if "fg" in terms else zero
            l_s = similarity_constraint(out.attn, prior_attns, weights.eps) if "sim" in terms else zero
            report = total_loss(l_other, l_cls, l_f, l_s, weights.lam)
        else:
            report = total_loss(l_other, l_cls, zero, zero, 1.0)
        loss = report.l_total.sum()
        if not torch.isfinite(loss):
            raise NonFiniteLossError(f"non-finite synthesis loss at iteration {step}", iteration=step)
        (grad,) = torch.autograd.grad(loss, x)
        x.grad = grad
        opt.step()
        with torch.no_grad():
            x.clamp_(*PIXEL_RANGE)
        if history is not None:
            with torch.no_grad():
                score = prototype_score(out.z, bank, ys, weights.beta, weights.eps)
            history.append({k: getattr(report, k).detach().clone() for k in ("l_f", "l_s", "l_cls", "l_other", "l_total")}
                           | {"prototype_score": score})

    if any(p.grad is not None for p in model.parameters()):
        raise StateError("teacher parameters received gradients during synthesis")
    with torch.no_grad():
        final = x.detach().clone()
        attn = model(final).attn
    return final, attn


@dataclass
class DistilledSet:
    images: torch.Tensor  # (K, IPC, 3, H, W)
    classes: list
    provenance: dict = field(default_factory=dict)
    prior_counts: list = field(default_factory=list)  # (class, index, number of priors used)

    @property
    def num_classes(self):
        return self.images.shape[0]

    @property
    def ipc(self):
        return self.images.shape[1]

    def flat(self):
        """``(images (K*IPC, 3, H, W), labels (K*IPC,))`` in class-major order."""
        k, n = self.images.shape[:2]
        labels = torch.arange(k).repeat_interleave(n)
        return self.images.reshape(k * n, *self.images.shape[2:]), labels

    def save(self, root):
        """Write ``<root>/<class_id>/<index>.png`` plus ``<root>/manifest.json``."""
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        width = max(2, len(str(self.num_classes - 1)))
        pixels = to_uint8(self.images)
        paths = []
        for k in range(self.num_classes):
            d = root / f"{k:0{width}d}"
            d.mkdir(exist_ok=True)
            for i in range(self.ipc):
                p = d / f"{i}.png"
                Image.fromarray(pixels[k, i], mode="RGB").save(p, optimize=False)
                paths.append(p)
        manifest = {"classes": list(self.classes), "ipc": self.ipc, **self.provenance}
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return paths

    @classmethod
    def load(cls, root):
        root = Path(root)
        manifest_path = root / "manifest.json"
        if not manifest_path.exists():
            raise ValidationError(f"{root} has no manifest.json")
        manifest = json.loads(manifest_path.read_text())
        classes, ipc = manifest.pop("classes"), manifest.pop("ipc")
        width = max(2, len(str(len(classes) - 1)))
        rows = []
        for k in range(len(classes)):
            row = []
            for i in range(ipc):
                p = root / f"{k:0{width}d}" / f"{i}.png"
                if not p.exists():
                    raise ValidationError(f"missing distilled image {p}")
                with Image.open(p) as im:
                    row.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
            rows.append(np.stack(row))
        return cls(images=to_normalized(np.stack(rows)), classes=classes, provenance=manifest)


def _class_rng(seed, k):
    return np.random.default_rng([seed, 104729, k])


@torch.no_grad()
def _attention(model, images):
    return model(images).attn


def distill_dataset(teacher, source, config, history=None):
    """Synthesize ``config.ipc`` images for every class of ``source``.

    Groups are processed in order; inside a group the attention sets of the
    already finished samples are recomputed from their images before each new
    sample and the cache is dropped at group boundaries. All classes advance
    in lockstep as one batch; per-class seeds keep the result independent of
    that batching choice up to floating-point reduction order.
    """
    model = teacher.model
    for p in model.parameters():
        p.requires_grad_(False)
        p.grad = None  # stale gradients from training would trip the leak check
    model.eval()
    before = parameter_hash(model)
    k_classes = source.num_classes
    if int(teacher.bank.initialized.sum()) < min(2, k_classes) and config.use_constraints:
        raise StateError("teacher prototype bank is not initialized")
    plan = plan_groups(config.ipc, config.group_size)
    size = config.image_size
    pools = [source.of_class(k) for k in range(k_classes)]
    rngs = [_class_rng(config.seed, k) for k in range(k_classes)]
    ys = torch.arange(k_classes)
    images = torch.zeros(k_classes, config.ipc, source.images.shape[1], size, size)
    prior_counts = []

    for start, length in zip(plan.group_starts(), plan.groups):
        for i in range(length):
            idx = start + i
            init = torch.stack([init_image(pools[k], config.init_grid, rngs[k], size) for k in range(k_classes)])
            # attention maps of earlier samples in this group only
            priors = [_attention(model, images[:, start + j]) for j in range(i)]
            sample_hist = [] if history is not None else None
            img, _ = distill_sample(teacher, init, ys, priors, config.weights, steps=config.distill_steps,
                                    lr=config.distill_lr, r_bn=config.r_bn,
                                    use_constraints=config.use_constraints, history=sample_hist)
            images[:, idx] = img
            prior_counts.extend((k, idx, len(priors)) for k in range(k_classes))
            if history is not None:
                history.append({"index": idx, "group_start": start, "priors": len(priors), "steps": sample_hist})
            logger.info("distilled sample %d/%d (group at %d, %d priors)", idx + 1, config.ipc, start, len(priors))

    if parameter_hash(model) != before:
        raise StateError("teacher parameters changed during distillation")
    provenance = {
        "teacher_fingerprint": teacher.fingerprint(),
        "seed": config.seed,
        "group_size": config.group_size,
        "use_constraints": config.use_constraints,
        "weights": config.weights.as_dict(),
        "steps": config.distill_steps,
        "init_grid": config.init_grid,
    }
    classes = list(source.classes) if source.classes else class_names(k_classes)
    return DistilledSet(images=images, classes=classes, provenance=provenance, prior_counts=prior_counts)
