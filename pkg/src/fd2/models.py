"""Backbone, backbone+CAL teacher and plain student networks."""
from __future__ import annotations

from torch import nn

from .cal import teacher_forward

DEFAULT_CHANNELS = (32, 64, 128, 128)


def conv_block(in_ch, out_ch):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(2),
    )


class ConvBackbone(nn.Module):
    """Stack of conv -> BN -> ReLU -> 2x2 max-pool blocks."""

    def __init__(self, channels=DEFAULT_CHANNELS, in_channels=3):
        super().__init__()
        chans = [in_channels, *channels]
        self.blocks = nn.Sequential(*[conv_block(a, b) for a, b in zip(chans[:-1], chans[1:])])
        self.out_channels = chans[-1]

    def forward(self, x):
        return self.blocks(x)


class TeacherModel(nn.Module):
    def __init__(self, num_classes, num_attention_maps=8, channels=DEFAULT_CHANNELS, in_channels=3, image_size=None):
        super().__init__()
        self.backbone = ConvBackbone(channels, in_channels)
        c = self.backbone.out_channels
        # 1x1 conv + ReLU keeps the maps nonnegative
        self.attn_predictor = nn.Sequential(nn.Conv2d(c, num_attention_maps, kernel_size=1), nn.ReLU())
        self.cal_classifier = nn.Linear(num_attention_maps * c, num_classes, bias=False)
        self.backbone_classifier = nn.Linear(c, num_classes)
        self.num_classes = num_classes
        self.num_attention_maps = num_attention_maps
        self.channels = tuple(channels)
        self.in_channels = in_channels
        self.image_size = image_size

    @property
    def rep_dim(self):
        return self.num_attention_maps * self.backbone.out_channels

    def bn_layers(self):
        return [m for m in self.backbone.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]

    def arch(self):
        return {
            "kind": "teacher",
            "num_classes": self.num_classes,
            "num_attention_maps": self.num_attention_maps,
            "channels": list(self.channels),
            "in_channels": self.in_channels,
            "image_size": self.image_size,
        }

    def forward(self, x, counterfactual="uniform", generator=None, capture_bn=False):
        return teacher_forward(x, self, counterfactual=counterfactual, generator=generator, capture_bn=capture_bn)


STUDENT_ARCHS = {
    "convnet4": DEFAULT_CHANNELS,
    "convnet3": (32, 64, 128),
}


class StudentModel(nn.Module):
    """Plain backbone + GAP + linear head, no CAL branch."""

    def __init__(self, num_classes, arch="convnet4", in_channels=3):
        super().__init__()
        if arch not in STUDENT_ARCHS:
            raise ValueError(f"unknown student architecture {arch!r}; choose from {sorted(STUDENT_ARCHS)}")
        self.backbone = ConvBackbone(STUDENT_ARCHS[arch], in_channels)
        self.classifier = nn.Linear(self.backbone.out_channels, num_classes)
        self.arch_name = arch
        self.num_classes = num_classes
        self.in_channels = in_channels

    def bn_layers(self):
        return [m for m in self.backbone.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]

    def arch(self):
        return {"kind": "student", "arch": self.arch_name, "num_classes": self.num_classes, "in_channels": self.in_channels}

    def forward(self, x):
        return self.classifier(self.backbone(x).mean(dim=(2, 3)))


def build_model(arch):
    arch = dict(arch)
    kind = arch.pop("kind")
    if kind == "teacher":
        arch["channels"] = tuple(arch["channels"])
        return TeacherModel(**arch)
    if kind == "student":
        return StudentModel(**arch)
    raise ValueError(f"unknown model kind {kind!r}")


def parameter_hash(model):
    """FNV-1a over every parameter and buffer, in state-dict order."""
    from .io import fnv1a64

    h = None
    for name, t in model.state_dict().items():
        h = fnv1a64(name.encode(), h)
        h = fnv1a64(t.detach().cpu().contiguous().numpy().tobytes(), h)
    return f"{h:016x}"


def set_frozen(model, frozen=True):
    for p in model.parameters():
        p.requires_grad_(not frozen)
    return model


__all__ = ["ConvBackbone", "TeacherModel", "StudentModel", "build_model", "parameter_hash"]
