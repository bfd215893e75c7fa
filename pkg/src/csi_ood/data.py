"""Dataset ingestion, splits, synthetic OOD sources and fixed-resize builds.

Images are stored as ``float32`` arrays of shape (height, width, channels)
with values in [0, 1].  Everything that draws random numbers takes an
explicit seed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp", ".tif", ".tiff")
DEFAULT_TEST_FRACTION = 1.0 / 6.0
RESIZE_KERNEL = "PIL.Image.BILINEAR (antialiased when downscaling)"


@dataclass
class Sample:
    pixels: np.ndarray
    label: int | None = None
    shift_label: int | None = None
    uid: str | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3:
            raise ValueError(f"pixels must be (H, W, C), got shape {px.shape}")
        h, w, c = px.shape
        if h < 2 or w < 2:
            raise ValueError(f"image must be at least 2x2, got {h}x{w}")
        if c not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {c}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        self.pixels = px


@dataclass
class DatasetSplit:
    in_train: list[Sample]
    in_test: list[Sample]
    ood_test: dict[str, list[Sample]] = field(default_factory=dict)

    def __post_init__(self):
        train_ids = {s.uid for s in self.in_train if s.uid is not None}
        overlap = train_ids & {s.uid for s in self.in_test if s.uid is not None}
        if overlap:
            raise ValueError(f"in_train and in_test share {len(overlap)} sample ids")
        for name, samples in self.ood_test.items():
            if not samples:
                raise ValueError(f"OOD source {name!r} is empty")


def stack_pixels(samples):
    """Stack samples into a (B, C, H, W) float32 array."""
    if not samples:
        raise ValueError("cannot stack an empty sample list")
    arr = np.stack([s.pixels for s in samples])
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


def labels_of(samples):
    if any(s.label is None for s in samples):
        raise ValueError("every sample needs a class label")
    return np.array([s.label for s in samples], dtype=np.int64)


def train_test_partition(samples, test_fraction=DEFAULT_TEST_FRACTION, seed=0):
    """Stratified per-class split; unlabeled samples form a single stratum."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    strata: dict[int | None, list[int]] = {}
    for i, s in enumerate(samples):
        strata.setdefault(s.label, []).append(i)
    train_idx, test_idx = [], []
    for key in sorted(strata, key=lambda k: (k is None, k)):
        idx = np.array(strata[key])
        rng.shuffle(idx)
        n_test = int(round(len(idx) * test_fraction))
        test_idx.extend(idx[:n_test].tolist())
        train_idx.extend(idx[n_test:].tolist())
    return [samples[i] for i in sorted(train_idx)], [samples[i] for i in sorted(test_idx)]


def one_class_split(dataset, target_class, test_fraction=DEFAULT_TEST_FRACTION, seed=0):
    """In-distribution = one class; every other class is OOD ("rest").

    ``dataset`` is either a labeled sample list (split internally, stratified)
    or an already separated ``(train, test)`` pair.
    """
    if isinstance(dataset, tuple):
        train, test = dataset
    else:
        train, test = train_test_partition(dataset, test_fraction, seed)
    classes = sorted({s.label for s in train} | {s.label for s in test})
    if target_class not in classes:
        raise ValueError(f"unknown class {target_class!r}; valid classes: {classes}")
    in_train = [s for s in train if s.label == target_class]
    in_test = [s for s in test if s.label == target_class]
    rest = [s for s in test if s.label != target_class]
    ood = {"rest": rest} if rest else {}
    return DatasetSplit(in_train=in_train, in_test=in_test, ood_test=ood)


def interp_generator(test_set, count, rng_seed):
    """Midpoints 0.5 * (a + b) of distinct random pairs from ``test_set``."""
    if count <= 0:
        raise ValueError("count must be positive")
    if len(test_set) < 2:
        raise ValueError("need at least two samples to interpolate")
    rng = np.random.default_rng(rng_seed)
    out = []
    for n in range(count):
        i, j = rng.choice(len(test_set), size=2, replace=False)
        a, b = test_set[i].pixels, test_set[j].pixels
        if a.shape != b.shape:
            raise ValueError("interpolated samples must share a shape")
        out.append(Sample(0.5 * (a + b), uid=f"interp-{rng_seed}-{n}"))
    return out


# -- image files --------------------------------------------------------------


def to_pil(pixels):
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    return Image.fromarray(arr)


def from_pil(img, channels=3):
    img = img.convert("RGB" if channels == 3 else "L")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr if arr.ndim == 3 else arr[:, :, None]


def resize_pixels(pixels, size, method="bilinear"):
    """Resize to ``size`` x ``size``.

    ``bilinear`` goes through PIL and is antialiased when shrinking;
    ``nearest`` is plain index subsampling and keeps aliasing artifacts.
    """
    pixels = np.asarray(pixels, dtype=np.float32)
    if method == "nearest":
        h, w = pixels.shape[:2]
        rows = (np.arange(size) * h // size).astype(int)
        cols = (np.arange(size) * w // size).astype(int)
        return pixels[rows][:, cols]
    if method != "bilinear":
        raise ValueError(f"unknown resize method {method!r}")
    channels = pixels.shape[2] if pixels.ndim == 3 else 1
    img = to_pil(pixels).resize((size, size), Image.BILINEAR)
    return from_pil(img, channels)


def list_class_dirs(root):
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"not a directory: {root}")
    return sorted(p for p in root.iterdir() if p.is_dir())


def _image_files(folder):
    return sorted(p for p in Path(folder).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_image_folder(root, size=None, channels=3, labeled=True):
    """Load ``root/<class>/<image>`` (or a flat folder when ``labeled=False``).

    Returns ``(samples, class_names)``.
    """
    root = Path(root)
    if labeled:
        class_dirs = list_class_dirs(root)
        if not class_dirs:
            raise ValueError(f"no class subfolders in {root}")
    else:
        class_dirs = [root]
    samples, names = [], []
    for label, folder in enumerate(class_dirs):
        files = _image_files(folder)
        if labeled:
            names.append(folder.name)
        for path in files:
            with Image.open(path) as img:
                px = from_pil(img, channels)
            if size is not None and px.shape[:2] != (size, size):
                px = resize_pixels(px, size)
            samples.append(Sample(px, label=label if labeled else None, uid=str(path)))
    if not samples:
        raise ValueError(f"no images found under {root}")
    return samples, names


def write_samples(samples, out_dir, prefix="img"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(samples):
        path = out_dir / f"{prefix}_{i:05d}.png"
        to_pil(s.pixels).save(path)
        paths.append(path)
    return paths


def fixed_resize_dataset(source_dir, out_dir, size, per_class_count, exclude=(), rng_seed=0):
    """Sample images per class and write them at exactly ``size`` x ``size``.

    Returns the manifest (list of dicts), also written as
    ``out_dir/manifest.jsonl``.  Unreadable files are skipped and recorded.
    """
    if size < 2:
        raise ValueError("size must be at least 2")
    if per_class_count <= 0:
        raise ValueError("per_class_count must be positive")
    exclude = set(exclude)
    class_dirs = [d for d in list_class_dirs(source_dir) if d.name not in exclude]
    if not class_dirs:
        raise ValueError(f"no classes left in {source_dir} after excluding {sorted(exclude)}")
    rng = np.random.default_rng(rng_seed)
    out_dir = Path(out_dir)
    manifest = []
    for folder in class_dirs:
        files = _image_files(folder)
        if not files:
            raise ValueError(f"class {folder.name!r} has no images")
        order = rng.permutation(len(files))
        written = 0
        for idx in order:
            if written == per_class_count:
                break
            src = files[idx]
            try:
                with Image.open(src) as img:
                    img = img.convert("RGB").resize((size, size), Image.BILINEAR)
            except OSError as err:
                logger.warning("skipping unreadable image %s: %s", src, err)
                manifest.append({"output": None, "source": str(src), "class": folder.name,
                                 "status": "skipped", "reason": str(err)})
                continue
            dst = out_dir / folder.name / f"{written:05d}.png"
            dst.parent.mkdir(parents=True, exist_ok=True)
            img.save(dst)
            manifest.append({"output": str(dst), "source": str(src), "class": folder.name,
                             "status": "ok", "size": size, "kernel": RESIZE_KERNEL})
            written += 1
        if written == 0:
            raise ValueError(f"class {folder.name!r} has no readable images")
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.jsonl", "w") as fh:
        for rec in manifest:
            fh.write(json.dumps(rec) + "\n")
    return manifest


# -- bundled desk-scale corpus ------------------------------------------------


def _bundled_photos():
    from skimage import data as skdata
    from sklearn.datasets import load_sample_images

    photos = {}
    for name in ("astronaut", "chelsea", "coffee", "rocket", "hubble_deep_field",
                 "immunohistochemistry", "retina"):
        photos[name] = getattr(skdata, name)()
    sk = load_sample_images()
    photos["china"], photos["flower"] = sk.images
    for name in ("camera", "coins", "moon", "clock", "brick", "grass", "gravel"):
        gray = getattr(skdata, name)()
        photos[name] = np.repeat(gray[:, :, None], 3, axis=2)
    return {k: np.asarray(v, dtype=np.float32) / 255.0 for k, v in photos.items()}


PHOTO_CLASSES = ("astronaut", "chelsea", "coffee", "rocket", "china", "flower",
                 "hubble_deep_field", "immunohistochemistry", "retina", "camera",
                 "coins", "moon", "clock", "brick", "grass", "gravel")


def photo_patch_dataset(per_class=120, size=32, classes=None, crop_range=(0.35, 0.7),
                        resize="bilinear", seed=0):
    """Small natural-image dataset cut from photographs bundled with
    scikit-image and scikit-learn.

    Each class is one photograph; a sample is a random square crop whose side
    is a ``crop_range`` fraction of the photo's shorter side, resized to
    ``size``.  Crops keep the photo's upright orientation.
    """
    photos = _bundled_photos()
    classes = tuple(classes) if classes is not None else PHOTO_CLASSES
    unknown = [c for c in classes if c not in photos]
    if unknown:
        raise ValueError(f"unknown photo classes {unknown}; valid: {sorted(photos)}")
    rng = np.random.default_rng(seed)
    samples = []
    for label, name in enumerate(classes):
        img = photos[name]
        h, w = img.shape[:2]
        for n in range(per_class):
            side = int(rng.uniform(*crop_range) * min(h, w))
            top = int(rng.integers(0, h - side + 1))
            left = int(rng.integers(0, w - side + 1))
            crop = img[top:top + side, left:left + side]
            px = np.clip(resize_pixels(crop, size, resize), 0.0, 1.0)
            samples.append(Sample(px, label=label, uid=f"{name}-{seed}-{n}"))
    return samples, list(classes)


def lfw_face_dataset(size=32):
    """The 200-image LFW subset bundled with scikit-image: label 1 = face,
    label 0 = non-face patch.  Grayscale replicated to three channels."""
    from skimage import data as skdata

    imgs = skdata.lfw_subset()
    samples = []
    for i, img in enumerate(imgs):
        px = np.repeat(np.asarray(img, dtype=np.float32)[:, :, None], 3, axis=2)
        px = np.clip(resize_pixels(px, size), 0.0, 1.0)
        samples.append(Sample(px, label=1 if i < 100 else 0, uid=f"lfw-{i}"))
    return samples, ["nonface", "face"]


def synthetic_resize_corpus(n, size=32, source_size=256, resize="bilinear", detail=0.15,
                            seed=0):
    """Random smooth colour fields with fine texture, rendered at
    ``source_size`` and downscaled to ``size``.

    The texture sits above the Nyquist frequency of the output grid, so an
    antialiased (``bilinear``) resize averages it away while ``nearest``
    subsampling aliases it into pixel noise.  The two settings give a clean
    and a broken-resize corpus with the same content distribution.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, source_size, endpoint=False)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    nyquist = size / 2
    samples = []
    for i in range(n):
        img = np.empty((source_size, source_size, 3))
        for c in range(3):
            field = rng.uniform(0.3, 0.7)
            for _ in range(4):
                fx, fy = rng.uniform(0.5, 4.0, size=2)
                field += 0.12 * np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
            for _ in range(3):
                fx, fy = rng.uniform(1.5 * nyquist, 4 * nyquist, size=2)
                field += detail / 3 * np.sin(2 * np.pi * (fx * xx + fy * yy)
                                             + rng.uniform(0, 2 * np.pi))
            img[:, :, c] = field
        px = np.clip(resize_pixels(np.clip(img, 0.0, 1.0), size, resize), 0.0, 1.0)
        samples.append(Sample(px, uid=f"synthetic-{resize}-{seed}-{i}"))
    return samples

