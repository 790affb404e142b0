"""Stage 1: train the backbone + CAL teacher and maintain class prototypes."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from .cal import PrototypeBank, cal_loss, softmax_ce
from .errors import NonFiniteLossError, StateError, ValidationError
from .io import decode_checkpoint, encode_checkpoint, fingerprint_bytes
from .models import TeacherModel, build_model

logger = logging.getLogger(__name__)


@dataclass
class TeacherCheckpoint:
    model: nn.Module
    bank: PrototypeBank
    bn_stats: list
    config_fingerprint: str = ""
    history: list = field(default_factory=list)

    def to_bytes(self):
        state = {k: v.float() for k, v in self.model.state_dict().items()}
        meta = {"arch": self.model.arch(), "history": self.history}
        return encode_checkpoint(state, self.bank.prototypes, self.bank.initialized, self.bank.momentum,
                                 self.bn_stats, self.config_fingerprint, meta)

    def fingerprint(self):
        return fingerprint_bytes(self.to_bytes())

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, data, path="<bytes>"):
        raw = decode_checkpoint(data, path)
        model = build_model(raw["metadata"]["arch"])
        ref = model.state_dict()
        if set(ref) != set(raw["tensors"]):
            raise ValidationError(f"{path}: checkpoint tensors do not match the architecture")
        model.load_state_dict({k: raw["tensors"][k].to(ref[k].dtype) for k in ref})
        model.eval()
        protos = raw["prototypes"]
        bank = PrototypeBank(protos.shape[0], protos.shape[1], raw["momentum"])
        bank.prototypes = protos
        bank.initialized = raw["initialized"]
        return cls(model=model, bank=bank, bn_stats=raw["bn_stats"],
                   config_fingerprint=raw["config_fingerprint"], history=raw["metadata"].get("history", []))

    @classmethod
    def load(cls, path):
        path = Path(path)
        return cls.from_bytes(path.read_bytes(), str(path))


def snapshot_bn_stats(model):
    """Copy running mean/variance of every BN layer, in module order."""
    layers = model.bn_layers() if hasattr(model, "bn_layers") else [
        m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not layers:
        raise StateError("model has no normalization layers to snapshot")
    return [(m.running_mean.detach().clone(), m.running_var.detach().clone()) for m in layers]


def restore_bn_stats(model, snapshot):
    layers = model.bn_layers()
    if len(layers) != len(snapshot):
        raise StateError(f"snapshot has {len(snapshot)} layers, model has {len(layers)}")
    with torch.no_grad():
        for m, (mean, var) in zip(layers, snapshot):
            m.running_mean.copy_(mean)
            m.running_var.copy_(var)


def pretrain_loss(out, y, bank, weights):
    """Per-batch mean of ``(1-a) CE(p_bb) + a L_CAL``.

    Terms with a zero coefficient are left out of the graph entirely so their
    parameters receive no gradient (and no weight decay) at all.
    """
    a = weights.alpha
    loss = out.p_bb.new_zeros(())
    if a < 1.0:
        loss = loss + (1.0 - a) * softmax_ce(out.p_bb, y).mean()
    if a > 0.0:
        c_y = bank.prototypes.to(out.z.dtype)[y]
        loss = loss + a * cal_loss(out.p_raw, out.p_eff, out.z, c_y, y, weights.eta)
    return loss


def pretrain_step(x, y, model, bank, optimizer, weights, generator=None, counterfactual="random", scheduler=None):
    """One optimizer step followed by per-sample prototype updates.

    Prototypes are updated from post-step representations computed in eval
    mode, the same feature space the frozen teacher exposes downstream.
    """
    model.train()
    optimizer.zero_grad(set_to_none=True)
    out = model(x, counterfactual=counterfactual, generator=generator)
    loss = pretrain_loss(out, y, bank, weights)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite pretraining loss {loss.item()} (lr may be too high)")
    loss.backward()
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    model.eval()
    with torch.no_grad():
        z = model(x).z
    bank.update_batch(y, z)
    return float(loss.detach())


@torch.no_grad()
def head_accuracies(model, dataset, batch_size=256):
    """Top-1 of the backbone head (``p_bb``) and the CAL head (``p_raw``)."""
    model.eval()
    correct_bb = correct_cal = 0
    for i in range(0, len(dataset), batch_size):
        x = dataset.images[i:i + batch_size]
        y = dataset.labels[i:i + batch_size]
        out = model(x)
        correct_bb += int((out.p_bb.argmax(1) == y).sum())
        correct_cal += int((out.p_raw.argmax(1) == y).sum())
    n = max(len(dataset), 1)
    return correct_bb / n, correct_cal / n


def build_teacher(config, num_classes=None):
    return TeacherModel(num_classes or config.num_classes, config.num_attention_maps, config.channels,
                        image_size=config.image_size)


def pretrain(train, val, config, model=None):
    """Train a teacher and return the checkpoint with the best backbone val accuracy."""
    if len(train) == 0:
        raise ValidationError("training set is empty")
    if train.num_classes < 2:
        raise ValidationError("pretraining needs at least two classes")
    if len(val) == 0:
        raise ValidationError("validation split is empty")
    weights = config.weights
    torch.manual_seed(config.seed)
    model = model or build_teacher(config, train.num_classes)
    bank = PrototypeBank(train.num_classes, model.rep_dim, weights.mu)
    opt = torch.optim.SGD(model.parameters(), lr=config.pretrain_lr, momentum=config.pretrain_momentum,
                          weight_decay=config.pretrain_weight_decay)
    steps_per_epoch = math.ceil(len(train) / config.pretrain_batch)
    total = max(config.pretrain_epochs * steps_per_epoch, 1)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total)
    order_gen = torch.Generator().manual_seed(config.seed)
    cf_gen = torch.Generator().manual_seed(config.seed + 1)

    history = []
    bb, cal = head_accuracies(model, val)
    best = (bb, copy.deepcopy(model.state_dict()), bank.copy())
    for epoch in range(config.pretrain_epochs):
        perm = torch.randperm(len(train), generator=order_gen)
        losses = []
        for i in range(0, len(train), config.pretrain_batch):
            idx = perm[i:i + config.pretrain_batch]
            losses.append(pretrain_step(train.images[idx], train.labels[idx], model, bank, opt, weights,
                                        cf_gen, config.counterfactual, sched))
        bb, cal = head_accuracies(model, val)
        history.append({"epoch": epoch + 1, "loss": sum(losses) / len(losses), "backbone_acc": bb, "cal_acc": cal})
        logger.info("epoch %d loss %.4f backbone %.3f cal %.3f", epoch + 1, history[-1]["loss"], bb, cal)
        if bb > best[0] or epoch == 0 and bb >= best[0]:
            best = (bb, copy.deepcopy(model.state_dict()), bank.copy())

    model.load_state_dict(best[1])
    model.zero_grad(set_to_none=True)
    model.eval()
    return TeacherCheckpoint(model=model, bank=best[2], bn_stats=snapshot_bn_stats(model),
                             config_fingerprint=config.fingerprint(), history=history)
