import sys

import pytest
import torch

from fd2.cal import PrototypeBank
from fd2.data import ImageDataset, class_names
from fd2.models import TeacherModel
from fd2.pretrain import TeacherCheckpoint, snapshot_bn_stats

TINY_SIZE = 16


def make_tiny_teacher(num_classes=2, seed=0, size=TINY_SIZE):
    """Small random teacher with BN statistics from a warm-up pass and initialized prototypes."""
    torch.manual_seed(seed)
    model = TeacherModel(num_classes, num_attention_maps=2, channels=(4, 8), image_size=size)
    model.train()
    with torch.no_grad():
        for _ in range(3):
            model.backbone(torch.randn(16, 3, size, size))
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    bank = PrototypeBank(num_classes, model.rep_dim)
    with torch.no_grad():
        for k in range(num_classes):
            bank.update(k, model(torch.randn(1, 3, size, size)).z[0])
    return TeacherCheckpoint(model=model, bank=bank, bn_stats=snapshot_bn_stats(model), config_fingerprint="test")


def make_pool(num_classes=2, per_class=5, seed=0, size=TINY_SIZE):
    g = torch.Generator().manual_seed(seed)
    images = torch.rand(num_classes * per_class, 3, size, size, generator=g) * 2 - 1
    labels = torch.arange(num_classes).repeat_interleave(per_class)
    return ImageDataset(images, labels, class_names(num_classes))


@pytest.fixture
def tiny_teacher():
    return make_tiny_teacher()


@pytest.fixture
def tiny_pool():
    return make_pool()


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
