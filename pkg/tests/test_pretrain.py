import pytest
import torch

from conftest import TINY_SIZE, make_pool, make_tiny_teacher
from fd2.cal import PrototypeBank, cal_loss, softmax_ce
from fd2.config import PipelineConfig
from fd2.constraints import LossWeights
from fd2.errors import NonFiniteLossError, StateError, ValidationError
from fd2.models import TeacherModel
from fd2.pretrain import (
    TeacherCheckpoint,
    pretrain,
    pretrain_loss,
    pretrain_step,
    restore_bn_stats,
    snapshot_bn_stats,
)


def tiny_config(**kw):
    base = dict(image_size=TINY_SIZE, num_classes=2, channels=(4, 8), num_attention_maps=2, pretrain_epochs=2,
                pretrain_batch=4, seed=0)
    base.update(kw)
    return PipelineConfig(**base)


def _params(module):
    return {k: v.detach().clone() for k, v in module.named_parameters()}


def _one_step(alpha):
    torch.manual_seed(0)
    model = TeacherModel(2, num_attention_maps=2, channels=(4, 8))
    bank = PrototypeBank(2, model.rep_dim)
    opt = torch.optim.SGD(model.parameters(), lr=0.1, momentum=0.9, weight_decay=5e-4)
    pool = make_pool()
    before = _params(model)
    pretrain_step(pool.images[:6], pool.labels[:6], model, bank, opt, LossWeights(alpha=alpha),
                  torch.Generator().manual_seed(1))
    return before, _params(model), bank


def test_backbone_only_objective_leaves_cal_head_untouched():
    before, after, _ = _one_step(0.0)
    for k in before:
        changed = not torch.equal(before[k], after[k])
        assert changed == (k.startswith("backbone.") or k.startswith("backbone_classifier")), k


def test_cal_only_objective_leaves_backbone_head_untouched():
    before, after, _ = _one_step(1.0)
    for k in before:
        assert torch.equal(before[k], after[k]) == k.startswith("backbone_classifier"), k


def test_step_initializes_prototypes_from_post_step_representations():
    _, _, bank = _one_step(0.5)
    assert bank.initialized.all()
    assert torch.allclose(bank.prototypes.norm(dim=1), torch.ones(2), atol=0.2)


def test_loss_is_the_documented_mixture():
    teacher = make_tiny_teacher()
    x = make_pool().images[:4]
    y = torch.tensor([0, 1, 1, 0])
    out = teacher.model(x)
    w = LossWeights(alpha=0.3, eta=0.7)
    c_y = teacher.bank.prototypes[y]
    expected = 0.7 * softmax_ce(out.p_bb, y).mean() + 0.3 * cal_loss(out.p_raw, out.p_eff, out.z, c_y, y, 0.7)
    assert torch.allclose(pretrain_loss(out, y, teacher.bank, w), expected, atol=1e-6)


def test_non_finite_loss_is_reported():
    torch.manual_seed(0)
    model = TeacherModel(2, num_attention_maps=2, channels=(4, 8))
    bank = PrototypeBank(2, model.rep_dim)
    opt = torch.optim.SGD(model.parameters(), lr=0.1)
    with torch.no_grad():
        model.backbone_classifier.weight[0, 0] = float("inf")
    x = make_pool().images[:2]
    with pytest.raises(NonFiniteLossError):
        pretrain_step(x, torch.tensor([0, 1]), model, bank, opt, LossWeights())


def test_checkpoint_round_trip_preserves_outputs(tmp_path):
    teacher = make_tiny_teacher()
    teacher.history = [{"epoch": 1, "loss": 0.5}]
    path = teacher.save(tmp_path / "t.fd2c")
    back = TeacherCheckpoint.load(path)
    x = make_pool().images[:3]
    with torch.no_grad():
        a, b = teacher.model(x), back.model(x)
    assert torch.equal(a.p_bb, b.p_bb) and torch.equal(a.z, b.z)
    assert torch.equal(back.bank.prototypes, teacher.bank.prototypes)
    assert back.fingerprint() == teacher.fingerprint() and back.history == teacher.history
    for (m0, v0), (m1, v1) in zip(teacher.bn_stats, back.bn_stats):
        assert torch.equal(m0, m1) and torch.equal(v0, v1)


def test_bn_snapshot_restore():
    teacher = make_tiny_teacher()
    snap = snapshot_bn_stats(teacher.model)
    assert len(snap) == 2 and snap[0][0].shape == (4,)
    teacher.model.train()
    with torch.no_grad():
        teacher.model.backbone(torch.randn(8, 3, TINY_SIZE, TINY_SIZE) * 5)
    assert not torch.equal(snapshot_bn_stats(teacher.model)[0][0], snap[0][0])
    restore_bn_stats(teacher.model, snap)
    assert torch.equal(snapshot_bn_stats(teacher.model)[0][0], snap[0][0])
    with pytest.raises(StateError):
        restore_bn_stats(teacher.model, snap[:1])


def test_pretrain_keeps_best_epoch_and_is_deterministic():
    pool = make_pool(per_class=8)
    cfg = tiny_config()
    a = pretrain(pool, pool, cfg)
    b = pretrain(pool, pool, cfg)
    assert a.fingerprint() == b.fingerprint()
    assert [h["epoch"] for h in a.history] == [1, 2]
    assert a.config_fingerprint == cfg.fingerprint()
    assert all(p.grad is None for p in a.model.parameters())


def test_pretrain_input_validation():
    pool = make_pool()
    empty = make_pool(per_class=0)
    with pytest.raises(ValidationError):
        pretrain(empty, pool, tiny_config())
    with pytest.raises(ValidationError):
        pretrain(pool, empty, tiny_config())
