"""Stage 3: backbone-branch soft labels, student training and top-1 evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ProvenanceError, ValidationError
from .io import decode_soft_labels, encode_soft_labels
from .models import StudentModel

logger = logging.getLogger(__name__)

AUG_POLICIES = ("none", "crop")
CROP_SCALE = (0.5, 1.0)


def augment(images, policy, seed, epoch):
    """Deterministic per-(seed, epoch) augmentation of a batch of images.

    ``crop`` takes a random square crop covering 50-100% of the area and
    resizes it back. No flips: glyph-style cues are not mirror invariant.
    """
    if policy == "none":
        return images
    if policy != "crop":
        raise ValueError(f"unknown augmentation policy {policy!r}")
    rng = np.random.default_rng([seed, 31337, epoch])
    n, _, h, w = images.shape
    out = torch.empty_like(images)
    for i in range(n):
        area = rng.uniform(*CROP_SCALE)
        side = max(2, int(round(math.sqrt(area) * min(h, w))))
        r = int(rng.integers(0, h - side + 1))
        c = int(rng.integers(0, w - side + 1))
        crop = images[i:i + 1, :, r:r + side, c:c + side]
        out[i] = F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False)[0]
    return out


@dataclass
class SoftLabelStore:
    probs: torch.Tensor  # (n_images, vectors_per_image, K)
    tau: float
    teacher_fingerprint: str
    mode: str = "offline"
    aug_policy: str = "none"
    seed: int = 0

    @property
    def vectors_per_image(self):
        return self.probs.shape[1]

    def to_bytes(self):
        return encode_soft_labels(self.probs.numpy(), self.teacher_fingerprint)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path, tau, mode=None, aug_policy="none", seed=0):
        """Read an ``.fd2l`` file; temperature and augmentation settings come from the run config."""
        probs, fp = decode_soft_labels(Path(path).read_bytes(), str(path))
        mode = mode or ("offline" if probs.shape[1] == 1 else "online")
        return cls(torch.from_numpy(probs), tau, fp, mode, aug_policy, seed)


@torch.no_grad()
def _teacher_probs(model, images, tau, batch_size=256):
    model.eval()
    chunks = [F.softmax(model(images[i:i + batch_size]).p_bb / tau, dim=-1)
              for i in range(0, len(images), batch_size)]
    return torch.cat(chunks)


def generate_soft_labels(teacher, distilled, mode="online", tau=4.0, aug_policy="crop", seed=0, epochs=1,
                         check_provenance=True):
    """Label the distilled images with the teacher's backbone head.

    ``offline`` stores one vector per image from the raw image. ``online``
    stores one vector per image per student epoch, computed on exactly the
    augmented view :func:`augment` produces for that epoch.
    """
    if check_provenance:
        expected = distilled.provenance.get("teacher_fingerprint")
        actual = teacher.fingerprint()
        if expected != actual:
            raise ProvenanceError(f"distilled set was made by teacher {expected}, got teacher {actual}")
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    images, _ = distilled.flat()
    if mode == "offline":
        probs = _teacher_probs(teacher.model, images, tau).unsqueeze(1)
        policy = "none"
    elif mode == "online":
        if epochs < 1:
            raise ValueError("online soft labels need at least one epoch")
        probs = torch.stack([_teacher_probs(teacher.model, augment(images, aug_policy, seed, e), tau)
                             for e in range(epochs)], dim=1)
        policy = aug_policy
    else:
        raise ValueError(f"unknown soft-label mode {mode!r}")
    return SoftLabelStore(probs.float(), float(tau), teacher.fingerprint(), mode, policy, seed)


def soft_label_loss(student_logits, target_probs, tau):
    """``tau^2 * KL(target || softmax(student / tau))``, batch mean."""
    log_p = F.log_softmax(student_logits / tau, dim=-1)
    return F.kl_div(log_p, target_probs, reduction="batchmean") * (tau * tau)


def train_student(distilled, store, config, history=None):
    """Train a plain backbone student on distilled images and their soft labels."""
    images, _ = distilled.flat()
    n = images.shape[0]
    if store.probs.shape[0] != n:
        raise ValidationError(f"soft labels cover {store.probs.shape[0]} images, distilled set has {n}")
    if store.mode == "online" and store.vectors_per_image < config.student_epochs:
        raise ValidationError(
            f"online soft labels hold {store.vectors_per_image} epochs, student needs {config.student_epochs}")
    if store.probs.shape[-1] != distilled.num_classes:
        raise ValidationError("soft-label class count does not match the distilled set")

    torch.manual_seed(config.seed)
    student = StudentModel(distilled.num_classes, config.student_arch, images.shape[1])
    opt = torch.optim.AdamW(student.parameters(), lr=config.student_lr, weight_decay=config.student_weight_decay)
    steps_per_epoch = math.ceil(n / config.student_batch)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(config.student_epochs * steps_per_epoch, 1))
    order = torch.Generator().manual_seed(config.seed + 17)
    tau = store.tau
    for epoch in range(config.student_epochs):
        student.train()
        if store.mode == "online":
            views = augment(images, store.aug_policy, store.seed, epoch)
            targets = store.probs[:, epoch]
        else:
            views, targets = images, store.probs[:, 0]
        perm = torch.randperm(n, generator=order)
        total = 0.0
        for i in range(0, n, config.student_batch):
            idx = perm[i:i + config.student_batch]
            opt.zero_grad(set_to_none=True)
            loss = soft_label_loss(student(views[idx]), targets[idx], tau)
            loss.backward()
            opt.step()
            sched.step()
            total += float(loss.detach()) * len(idx)
        if history is not None:
            history.append({"epoch": epoch + 1, "loss": total / n})
    student.eval()
    return student


@torch.no_grad()
def predict(model, images, batch_size=256):
    model.eval()
    return torch.cat([model(images[i:i + batch_size]).argmax(-1) for i in range(0, len(images), batch_size)])


def evaluate(model, dataset):
    """Top-1 accuracy of ``model`` on ``dataset``."""
    if len(dataset) == 0:
        raise ValidationError("test set is empty")
    pred = predict(model, dataset.images)
    return int((pred == dataset.labels).sum()) / len(dataset)
