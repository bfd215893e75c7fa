"""Encoder f, projection head g, shift classifier and supervised heads."""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_SCHEMA = 1


def _conv_block(cin, cout, pool=True):
    layers = [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout),
              nn.ReLU(inplace=True)]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return layers


class SmallConvNet(nn.Module):
    """Four conv blocks and global average pooling; desk-scale default."""

    def __init__(self, in_channels=3, width=32):
        super().__init__()
        w = width
        self.body = nn.Sequential(
            *_conv_block(in_channels, w),
            *_conv_block(w, 2 * w),
            *_conv_block(2 * w, 4 * w),
            *_conv_block(4 * w, 4 * w, pool=False),
        )
        self.out_dim = 4 * w

    def forward(self, x):
        return F.adaptive_avg_pool2d(self.body(x), 1).flatten(1)


class ToyEncoder(nn.Module):
    """Two dense layers with tanh; smooth, so finite differences behave."""

    def __init__(self, in_channels=3, image_size=4, width=16):
        super().__init__()
        self.fc1 = nn.Linear(in_channels * image_size * image_size, width)
        self.fc2 = nn.Linear(width, width)
        self.out_dim = width

    def forward(self, x):
        return torch.tanh(self.fc2(torch.tanh(self.fc1(x.flatten(1)))))


def _resnet18(in_channels):
    from torchvision.models import resnet18

    net = resnet18(num_classes=10)
    # CIFAR-style stem for small inputs
    net.conv1 = nn.Conv2d(in_channels, 64, 3, 1, 1, bias=False)
    net.maxpool = nn.Identity()
    net.out_dim = net.fc.in_features
    net.fc = nn.Identity()
    return net


def build_encoder(arch, in_channels=3, width=32, image_size=32):
    if arch == "small":
        return SmallConvNet(in_channels, width)
    if arch == "toy":
        return ToyEncoder(in_channels, image_size, width)
    if arch == "resnet18":
        return _resnet18(in_channels)
    raise ValueError(f"unknown architecture {arch!r}; options: small, toy, resnet18")


class ModelBundle(nn.Module):
    """f_theta plus heads.  ``z = proj(f(x))``; the shift head reads f(x).

    The shift head has no bias so its logit for shift k is exactly W_k . f(x).
    Joint logits are laid out shift-major: block k holds the C class logits
    for shift k, i.e. joint label = k * num_classes + y.
    """

    def __init__(self, arch="small", in_channels=3, width=32, image_size=32, proj_dim=128,
                 num_shifts=1, num_classes=0, joint=False):
        super().__init__()
        self.config = dict(arch=arch, in_channels=in_channels, width=width,
                           image_size=image_size, proj_dim=proj_dim, num_shifts=num_shifts,
                           num_classes=num_classes, joint=joint)
        self.encoder = build_encoder(arch, in_channels, width, image_size)
        d = self.encoder.out_dim
        self.feature_dim = d
        self.projection = nn.Sequential(nn.Linear(d, d), nn.ReLU(inplace=True),
                                        nn.Linear(d, proj_dim))
        self.shift_head = nn.Linear(d, num_shifts, bias=False) if num_shifts >= 1 else None
        self.class_head = nn.Linear(d, num_classes) if num_classes > 0 else None
        self.joint_head = (nn.Linear(d, num_classes * num_shifts)
                           if joint and num_classes > 0 else None)

    @property
    def num_shifts(self):
        return self.config["num_shifts"]

    @property
    def num_classes(self):
        return self.config["num_classes"]

    def _check(self, x):
        if x.dim() != 4 or x.shape[0] == 0:
            raise ValueError(f"expected a non-empty (B, C, H, W) batch, got {tuple(x.shape)}")
        if x.shape[1] != self.config["in_channels"]:
            raise ValueError(f"encoder expects {self.config['in_channels']} channels, "
                             f"got {x.shape[1]}")
        if self.config["arch"] == "toy" and x.shape[2:] != (self.config["image_size"],) * 2:
            raise ValueError(f"toy encoder expects {self.config['image_size']}px inputs")

    def features(self, x):
        self._check(x)
        return self.encoder(x)

    def forward(self, x):
        """Returns (features, contrastive embedding z)."""
        f = self.features(x)
        return f, self.projection(f)

    def embed(self, x):
        return self(x)[1]

    def shift_logits_from_features(self, f):
        if self.shift_head is None:
            raise ValueError("model has no shift head")
        return self.shift_head(f)

    def shift_logits(self, x):
        return self.shift_logits_from_features(self.features(x))

    def class_logits(self, x):
        if self.class_head is None:
            raise ValueError("model has no class head")
        return self.class_head(self.features(x))

    def joint_logits(self, x):
        """(B, K, C) joint logits."""
        if self.joint_head is None:
            raise ValueError("model has no joint head")
        out = self.joint_head(self.features(x))
        return out.view(-1, self.num_shifts, self.num_classes)

    def add_class_heads(self, num_classes, joint=True):
        d = self.feature_dim
        joint = joint and self.num_shifts >= 1
        self.config["num_classes"] = num_classes
        self.config["joint"] = joint
        ref = next(self.projection.parameters())
        self.class_head = nn.Linear(d, num_classes).to(ref)
        self.joint_head = (nn.Linear(d, num_classes * self.num_shifts).to(ref)
                           if joint else None)
        return self


def embed_batches(bundle, x, batch_size=256):
    """Eval-mode (features, z) for a large tensor, in chunks."""
    was_training = bundle.training
    bundle.eval()
    fs, zs = [], []
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            f, z = bundle(x[i:i + batch_size])
            fs.append(f)
            zs.append(z)
    bundle.train(was_training)
    return torch.cat(fs), torch.cat(zs)


def save_checkpoint(path, bundle, family_descriptor=None, config=None, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "schema": CHECKPOINT_SCHEMA,
        "architecture": dict(bundle.config),
        "state_dict": bundle.state_dict(),
        "shift_family": family_descriptor,
        "config": config,
        "extra": extra or {},
    }, path)
    return path


def load_checkpoint(path):
    """Returns (bundle in eval mode, checkpoint dict)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    schema = ckpt.get("schema")
    if schema is None or schema > CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {schema} (this build reads "
                         f"<= {CHECKPOINT_SCHEMA})")
    bundle = ModelBundle(**ckpt["architecture"])
    bundle.load_state_dict(ckpt["state_dict"])
    bundle.eval()
    return bundle, ckpt
