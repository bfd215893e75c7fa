"""Random augmentations T and shifting transformations S.

All image ops work on float tensors shaped (B, C, H, W) with values in
[0, 1].  Random parameters are drawn from a ``numpy.random.Generator`` so a
seed fully determines every view.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .data import Sample

SHIFT_NAMES = ("rotate", "perm", "noise", "blur", "cutout", "sobel")
MAX_FAMILY_SIZE = 64


def _as_batch(x):
    if isinstance(x, Sample):
        return torch.from_numpy(x.pixels.transpose(2, 0, 1).copy())[None]
    x = torch.as_tensor(x)
    return x[None] if x.dim() == 3 else x


# -- augmentation family T ----------------------------------------------------


@dataclass(frozen=True)
class AugmentationPolicy:
    crop_area_range: tuple[float, float] = (0.08, 1.0)
    crop_ratio_range: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    # hue: additive shift (fraction of a turn); saturation/value: scale factor 1 +- s
    jitter_strengths: dict = field(default_factory=lambda: {"hue": 0.1, "saturation": 0.4,
                                                            "value": 0.4})
    grayscale_prob: float = 0.2
    mode: str = "train"

    def __post_init__(self):
        lo, hi = self.crop_area_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop_area_range must lie in (0, 1], got {self.crop_area_range}")
        rlo, rhi = self.crop_ratio_range
        if not 0.0 < rlo <= rhi:
            raise ValueError("crop_ratio_range must be positive and ordered")
        for name in ("flip_prob", "jitter_prob", "grayscale_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        unknown = set(self.jitter_strengths) - {"hue", "saturation", "value"}
        if unknown:
            raise ValueError(f"unknown jitter keys {sorted(unknown)}")
        if any(v < 0 for v in self.jitter_strengths.values()):
            raise ValueError("jitter strengths must be non-negative")
        if self.mode not in ("train", "controlled"):
            raise ValueError(f"mode must be 'train' or 'controlled', got {self.mode!r}")

    def controlled(self):
        """Same family, every random draw pinned to its most common value."""
        return AugmentationPolicy(**{**asdict(self), "mode": "controlled"})

    def to_dict(self):
        d = asdict(self)
        d["crop_area_range"] = list(self.crop_area_range)
        d["crop_ratio_range"] = list(self.crop_ratio_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("crop_area_range", "crop_ratio_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


IDENTITY_POLICY = AugmentationPolicy(crop_area_range=(1.0, 1.0), crop_ratio_range=(1.0, 1.0),
                                     flip_prob=0.0, jitter_prob=0.0, grayscale_prob=0.0)


@dataclass(frozen=True)
class Augmentation:
    """Concrete, already-sampled augmentations for a batch of n images.

    Crop boxes are in normalized image coordinates (center, half-size).
    """
    cx: np.ndarray
    cy: np.ndarray
    half_w: np.ndarray
    half_h: np.ndarray
    flip: np.ndarray
    jitter: np.ndarray
    hue: np.ndarray
    saturation: np.ndarray
    value: np.ndarray
    gray: np.ndarray

    def __len__(self):
        return len(self.cx)

    @property
    def crop_area(self):
        # the box spans 2*half_w of the 2-unit wide normalized image
        return self.half_w * self.half_h

    def __call__(self, x):
        return apply_augmentation(x, self)


def sample_augmentations(policy: AugmentationPolicy, n: int, rng: np.random.Generator) -> Augmentation:
    """Draw ``n`` independent members of the family described by ``policy``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if policy.mode == "controlled":
        area = np.full(n, 0.5 * sum(policy.crop_area_range))
        log_r = np.full(n, 0.5 * (math.log(policy.crop_ratio_range[0])
                                  + math.log(policy.crop_ratio_range[1])))
        ratio = np.exp(log_r)
        w, h = np.sqrt(area * ratio), np.sqrt(area / ratio)
        bad = (w > 1) | (h > 1)
        w[bad] = h[bad] = np.sqrt(area[bad])
        return Augmentation(
            cx=np.zeros(n), cy=np.zeros(n), half_w=w, half_h=h,
            flip=np.full(n, policy.flip_prob > 0.5),
            jitter=np.full(n, policy.jitter_prob > 0.5),
            hue=np.zeros(n), saturation=np.ones(n), value=np.ones(n),
            gray=np.full(n, policy.grayscale_prob > 0.5),
        )
    area = rng.uniform(*policy.crop_area_range, size=n)
    log_r = rng.uniform(math.log(policy.crop_ratio_range[0]),
                        math.log(policy.crop_ratio_range[1]), size=n)
    ratio = np.exp(log_r)
    w, h = np.sqrt(area * ratio), np.sqrt(area / ratio)
    bad = (w > 1) | (h > 1)
    w[bad] = h[bad] = np.sqrt(area[bad])
    # box center so the crop stays inside [-1, 1]
    cx = rng.uniform(-1.0, 1.0, size=n) * (1.0 - w)
    cy = rng.uniform(-1.0, 1.0, size=n) * (1.0 - h)
    flip = rng.random(n) < policy.flip_prob
    jitter = rng.random(n) < policy.jitter_prob
    s = policy.jitter_strengths
    hue = rng.uniform(-1, 1, size=n) * s.get("hue", 0.0)
    sat = 1.0 + rng.uniform(-1, 1, size=n) * s.get("saturation", 0.0)
    val = 1.0 + rng.uniform(-1, 1, size=n) * s.get("value", 0.0)
    gray = rng.random(n) < policy.grayscale_prob
    return Augmentation(cx=cx, cy=cy, half_w=w, half_h=h, flip=flip, jitter=jitter,
                        hue=hue, saturation=sat, value=val, gray=gray)


def sample_augmentation(policy: AugmentationPolicy, rng: np.random.Generator) -> Augmentation:
    return sample_augmentations(policy, 1, rng)


def apply_augmentation(x, aug: Augmentation):
    x = _as_batch(x)
    n = x.shape[0]
    if len(aug) != n:
        raise ValueError(f"augmentation drawn for {len(aug)} images, got {n}")
    dtype = x.dtype
    sign = np.where(aug.flip, -1.0, 1.0)
    theta = np.zeros((n, 2, 3))
    theta[:, 0, 0] = aug.half_w * sign
    theta[:, 0, 2] = aug.cx
    theta[:, 1, 1] = aug.half_h
    theta[:, 1, 2] = aug.cy
    theta = torch.as_tensor(theta, dtype=dtype)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    if aug.jitter.any():
        idx = torch.as_tensor(np.flatnonzero(aug.jitter))
        sub = out[idx]
        out = out.clone()
        out[idx] = hsv_jitter(sub, aug.hue[aug.jitter], aug.saturation[aug.jitter],
                              aug.value[aug.jitter])
    if aug.gray.any() and out.shape[1] == 3:
        idx = torch.as_tensor(np.flatnonzero(aug.gray))
        out = out.clone()
        out[idx] = grayscale(out[idx])
    return out.clamp_(0.0, 1.0)


def grayscale(x):
    if x.shape[1] == 1:
        return x
    w = torch.tensor([0.299, 0.587, 0.114], dtype=x.dtype).view(1, 3, 1, 1)
    return (x * w).sum(1, keepdim=True).expand(-1, 3, -1, -1).contiguous()


def rgb_to_hsv(x):
    r, g, b = x.unbind(1)
    maxc, _ = x.max(1)
    minc, _ = x.min(1)
    delta = maxc - minc
    v = maxc
    s = torch.where(maxc > 0, delta / maxc.clamp_min(1e-12), torch.zeros_like(maxc))
    safe = delta.clamp_min(1e-12)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = torch.where(maxc == r, bc - gc, torch.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = torch.where(delta > 0, (h / 6.0) % 1.0, torch.zeros_like(h))
    return torch.stack([h, s, v], 1)


def hsv_to_rgb(x):
    h, s, v = x.unbind(1)
    i = torch.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.long() % 6
    r = torch.stack([v, q, p, p, t, v], 1).gather(1, i[:, None]).squeeze(1)
    g = torch.stack([t, v, v, q, p, p], 1).gather(1, i[:, None]).squeeze(1)
    b = torch.stack([p, p, t, v, v, q], 1).gather(1, i[:, None]).squeeze(1)
    return torch.stack([r, g, b], 1)


def hsv_jitter(x, hue, saturation, value):
    """Shift hue and scale saturation/value in HSV space."""
    def col(a):
        return torch.as_tensor(np.asarray(a), dtype=x.dtype).view(-1, 1, 1)
    if x.shape[1] == 1:
        return (x * col(value)[:, None]).clamp(0, 1)
    hsv = rgb_to_hsv(x)
    h = (hsv[:, 0] + col(hue)) % 1.0
    s = (hsv[:, 1] * col(saturation)).clamp(0, 1)
    v = (hsv[:, 2] * col(value)).clamp(0, 1)
    return hsv_to_rgb(torch.stack([h, s, v], 1))


# -- shifting family S --------------------------------------------------------


ShiftFn = Callable[[torch.Tensor, np.random.Generator], torch.Tensor]


@dataclass(frozen=True)
class ShiftFamily:
    """Ordered transforms S_0 = identity, S_1, ..., S_{K-1}.

    Each member maps a (B, C, H, W) batch and a generator to a batch.
    ``descriptor`` is a JSON-able record that rebuilds the family.
    """
    names: tuple[str, ...]
    fns: tuple[ShiftFn, ...]
    descriptor: dict

    def __post_init__(self):
        if len(self.names) < 1 or len(self.names) != len(self.fns):
            raise ValueError("a shift family needs K >= 1 named transforms")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"shift names must be unique: {self.names}")

    def __len__(self):
        return len(self.names)

    @property
    def K(self):
        return len(self.names)

    def apply(self, x, k, rng=None):
        """Apply S_k to a batch; ``k == 0`` returns the input untouched."""
        if not 0 <= k < self.K:
            raise IndexError(f"shift index {k} out of range for K={self.K}")
        if k == 0:
            return x
        if rng is None:
            rng = np.random.default_rng(0)
        return self.fns[k](x, rng)


def _identity(x, rng):
    return x


def _rotate(quarter_turns):
    def fn(x, rng):
        return torch.rot90(x, quarter_turns, dims=(2, 3))
    return fn


def _block_perm(perm, grid):
    def fn(x, rng):
        _, _, h, w = x.shape
        if h % grid or w % grid:
            raise ValueError(f"image {h}x{w} not divisible into a {grid}x{grid} grid")
        bh, bw = h // grid, w // grid
        blocks = [x[:, :, r * bh:(r + 1) * bh, c * bw:(c + 1) * bw]
                  for r in range(grid) for c in range(grid)]
        moved = [blocks[src] for src in perm]
        rows = [torch.cat(moved[r * grid:(r + 1) * grid], dim=3) for r in range(grid)]
        return torch.cat(rows, dim=2)
    return fn


def _gaussian_noise(sigma):
    def fn(x, rng):
        noise = torch.as_tensor(rng.standard_normal(tuple(x.shape)), dtype=x.dtype)
        return (x + sigma * noise).clamp(0.0, 1.0)
    return fn


def _gaussian_blur(sigma):
    radius = max(1, int(math.ceil(3 * sigma)))
    t = torch.arange(-radius, radius + 1, dtype=torch.float64)
    kernel = torch.exp(-0.5 * (t / sigma) ** 2)
    kernel = kernel / kernel.sum()

    def fn(x, rng):
        c = x.shape[1]
        k = kernel.to(x.dtype)
        kx = k.view(1, 1, 1, -1).repeat(c, 1, 1, 1)
        ky = k.view(1, 1, -1, 1).repeat(c, 1, 1, 1)
        y = F.pad(x, (radius, radius, 0, 0), mode="reflect")
        y = F.conv2d(y, kx, groups=c)
        y = F.pad(y, (0, 0, radius, radius), mode="reflect")
        return F.conv2d(y, ky, groups=c).clamp(0.0, 1.0)
    return fn


def _cutout(fraction, fill):
    def fn(x, rng):
        b, _, h, w = x.shape
        ph, pw = max(1, int(round(h * fraction))), max(1, int(round(w * fraction)))
        tops = rng.integers(0, h - ph + 1, size=b)
        lefts = rng.integers(0, w - pw + 1, size=b)
        out = x.clone()
        for i in range(b):
            out[i, :, tops[i]:tops[i] + ph, lefts[i]:lefts[i] + pw] = fill
        return out
    return fn


def _sobel(x, rng):
    c = x.shape[1]
    gx = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=x.dtype)
    kx = gx.view(1, 1, 3, 3).repeat(c, 1, 1, 1)
    ky = gx.t().contiguous().view(1, 1, 3, 3).repeat(c, 1, 1, 1)
    y = F.pad(x, (1, 1, 1, 1), mode="replicate")
    mag = torch.sqrt(F.conv2d(y, kx, groups=c) ** 2 + F.conv2d(y, ky, groups=c) ** 2)
    # largest possible magnitude for inputs in [0, 1] is 4 * sqrt(2)
    return (mag / (4.0 * math.sqrt(2.0))).clamp(0.0, 1.0)


def select_permutations(n_blocks, k, seed=0):
    """Identity first, then ``k - 1`` distinct non-identity permutations."""
    total = math.factorial(n_blocks)
    if not 1 <= k <= total:
        raise ValueError(f"cannot pick {k} permutations of {n_blocks} blocks (max {total})")
    identity = tuple(range(n_blocks))
    rng = np.random.default_rng(seed)
    if total <= 40320:
        others = [p for p in itertools.permutations(range(n_blocks)) if p != identity]
        chosen = [others[i] for i in rng.permutation(len(others))[:k - 1]]
    else:
        seen, chosen = {identity}, []
        while len(chosen) < k - 1:
            p = tuple(int(v) for v in rng.permutation(n_blocks))
            if p not in seen:
                seen.add(p)
                chosen.append(p)
    return [identity] + chosen


def make_shift_family(name: str, **params) -> ShiftFamily:
    """Build a named shift family.

    rotate: K=4 quarter turns.  perm: ``grid`` x ``grid`` jigsaw with ``k``
    fixed permutations.  noise / blur / cutout / sobel: {identity, transform}.
    """
    if name == "identity":
        return ShiftFamily(("identity",), (_identity,), {"name": "identity"})
    if name == "rotate":
        return ShiftFamily(("rot0", "rot90", "rot180", "rot270"),
                           tuple(_identity if q == 0 else _rotate(q) for q in range(4)),
                           {"name": "rotate"})
    if name == "perm":
        grid = int(params.get("grid", 2))
        k = int(params.get("k", 4))
        seed = int(params.get("seed", 0))
        perms = select_permutations(grid * grid, k, seed)
        names = tuple("perm" + "".join(map(str, p)) if i else "identity"
                      for i, p in enumerate(perms))
        fns = tuple(_identity if i == 0 else _block_perm(p, grid) for i, p in enumerate(perms))
        return ShiftFamily(names, fns, {"name": "perm", "grid": grid, "k": k, "seed": seed,
                                        "perms": [list(p) for p in perms]})
    if name == "noise":
        sigma = float(params.get("sigma", 0.1))
        return ShiftFamily(("identity", "noise"), (_identity, _gaussian_noise(sigma)),
                           {"name": "noise", "sigma": sigma})
    if name == "blur":
        sigma = float(params.get("sigma", 1.0))
        return ShiftFamily(("identity", "blur"), (_identity, _gaussian_blur(sigma)),
                           {"name": "blur", "sigma": sigma})
    if name == "cutout":
        fraction = float(params.get("fraction", 0.25))
        fill = float(params.get("fill", 0.0))
        return ShiftFamily(("identity", "cutout"), (_identity, _cutout(fraction, fill)),
                           {"name": "cutout", "fraction": fraction, "fill": fill})
    if name == "sobel":
        return ShiftFamily(("identity", "sobel"), (_identity, _sobel), {"name": "sobel"})
    raise ValueError(f"unknown shift family {name!r}; options: {('identity',) + SHIFT_NAMES}")


def compose_shift_families(a: ShiftFamily, b: ShiftFamily, cap: int = MAX_FAMILY_SIZE) -> ShiftFamily:
    """Cartesian product a x b; member (i, j) applies b_j first, then a_i.

    Index of (i, j) is ``i * len(b) + j`` so (0, 0) is the identity.
    """
    size = a.K * b.K
    if size > cap:
        raise ValueError(f"combined family has {size} members, above the cap of {cap}")
    names, fns = [], []
    for i in range(a.K):
        for j in range(b.K):
            names.append("identity" if i == j == 0 else f"{a.names[i]}+{b.names[j]}")
            if i == j == 0:
                fns.append(_identity)
            else:
                fns.append(_compose(a.fns[i], b.fns[j]))
    return ShiftFamily(tuple(names), tuple(fns),
                       {"name": "product", "parts": [a.descriptor, b.descriptor]})


def _compose(outer, inner):
    def fn(x, rng):
        return outer(inner(x, rng), rng)
    return fn


def family_from_descriptor(desc: dict) -> ShiftFamily:
    desc = dict(desc)
    name = desc.pop("name")
    if name == "product":
        a, b = (family_from_descriptor(p) for p in desc["parts"])
        return compose_shift_families(a, b)
    desc.pop("perms", None)
    return make_shift_family(name, **desc)


def apply_shift(x: Sample, family: ShiftFamily, k: int, rng=None) -> Sample:
    """Apply S_k to one sample, keeping its label and tagging ``shift_label``."""
    if not 0 <= k < family.K:
        raise IndexError(f"shift index {k} out of range for K={family.K}")
    if k == 0:
        return Sample(x.pixels, label=x.label, shift_label=0, uid=x.uid)
    out = family.apply(_as_batch(x), k, rng)[0]
    return Sample(out.numpy().transpose(1, 2, 0), label=x.label, shift_label=k, uid=x.uid)
