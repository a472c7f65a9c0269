"""Dataset loading, case-level splits, resizing/augmentation, and a
synthetic nested-shapes generator for desk-scale end-to-end runs.

On-disk layout::

    root/<case_id>/slice_<k>_img.png    16-bit grayscale
    root/<case_id>/slice_<k>_mask.png   8-bit, pixel value = class index

A split manifest is a JSON file listing case ids per subset; splits are
always by case so no case contributes slices to two subsets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter


class DataError(ValueError):
    """Malformed or inconsistent dataset contents."""


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray | None
    case_id: str
    slice_index: int


@dataclass
class SplitManifest:
    labelled_cases: list
    unlabelled_cases: list
    validation_cases: list
    test_cases: list
    classes: int = 4

    def __post_init__(self):
        groups = [set(self.labelled_cases), set(self.unlabelled_cases),
                  set(self.validation_cases), set(self.test_cases)]
        for i in range(len(groups)):
            for j in range(i + 1, len(groups)):
                common = groups[i] & groups[j]
                if common:
                    raise DataError(f"case(s) {sorted(common)} appear in two subsets")

    def all_cases(self) -> set:
        return (set(self.labelled_cases) | set(self.unlabelled_cases)
                | set(self.validation_cases) | set(self.test_cases))

    def to_file(self, path):
        payload = {"labelled_cases": list(self.labelled_cases),
                   "unlabelled_cases": list(self.unlabelled_cases),
                   "validation_cases": list(self.validation_cases),
                   "test_cases": list(self.test_cases),
                   "classes": self.classes}
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")

    @classmethod
    def from_file(cls, path) -> "SplitManifest":
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise DataError(f"cannot read manifest {path}: {err}") from err
        try:
            return cls(**payload)
        except TypeError as err:
            raise DataError(f"manifest {path} has unexpected fields: {err}") from err


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im)
    except Exception as err:
        raise DataError(f"cannot parse {path}: {err}") from err


def normalize_intensity(raw: np.ndarray) -> np.ndarray:
    """Per-slice min-max normalization to [0, 1]."""
    raw = raw.astype(np.float32)
    lo, hi = raw.min(), raw.max()
    if hi > lo:
        return (raw - lo) / (hi - lo)
    return np.zeros_like(raw)


def load_dataset(root, classes: int | None = None) -> list[Sample]:
    """Load every slice under ``root``, ordered by (case_id, slice_index)."""
    root = Path(root)
    samples = []
    if not root.exists():
        raise DataError(f"dataset root {root} does not exist")
    for case_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        imgs = sorted(case_dir.glob("slice_*_img.png"))
        for img_path in imgs:
            k = int(img_path.name.split("_")[1])
            image = normalize_intensity(_read_png(img_path))
            if image.ndim != 2:
                raise DataError(f"{img_path} is not a single-channel image")
            mask_path = case_dir / f"slice_{k}_mask.png"
            mask = None
            if mask_path.exists():
                mask = _read_png(mask_path).astype(np.int64)
                if mask.shape != image.shape:
                    raise DataError(f"{mask_path} shape {mask.shape} does not match "
                                    f"image shape {image.shape}")
                if classes is not None and mask.max() >= classes:
                    raise DataError(f"{mask_path} contains class {int(mask.max())} "
                                    f">= class count {classes}")
            samples.append(Sample(image, mask, case_dir.name, k))
    samples.sort(key=lambda s: (s.case_id, s.slice_index))
    return samples


def split(samples: list[Sample], manifest: SplitManifest):
    """Partition samples by case into (labelled, unlabelled, validation, test).

    Unlabelled samples have their masks withheld even if present on disk.
    """
    present = {s.case_id for s in samples}
    missing = manifest.all_cases() - present
    if missing:
        raise DataError(f"manifest case(s) {sorted(missing)} not found in data")
    unassigned = present - manifest.all_cases()
    if unassigned:
        raise DataError(f"case(s) {sorted(unassigned)} not assigned to any subset")

    def pick(cases, strip_mask=False):
        chosen = [s for s in samples if s.case_id in set(cases)]
        if strip_mask:
            chosen = [Sample(s.image, None, s.case_id, s.slice_index) for s in chosen]
        return chosen

    return (pick(manifest.labelled_cases),
            pick(manifest.unlabelled_cases, strip_mask=True),
            pick(manifest.validation_cases),
            pick(manifest.test_cases))


def resize_pair(image: np.ndarray, mask: np.ndarray | None = None, target: int = 224):
    """Bilinear image resize, nearest-neighbor mask resize."""
    if image.shape == (target, target):
        return image, mask
    im = Image.fromarray(image.astype(np.float32), mode="F")
    out = np.asarray(im.resize((target, target), Image.BILINEAR))
    out_mask = None
    if mask is not None:
        mm = Image.fromarray(mask.astype(np.uint8), mode="L")
        out_mask = np.asarray(mm.resize((target, target), Image.NEAREST)).astype(np.int64)
    return out, out_mask


AUGMENT_OPS = ("identity", "rot90", "rot180", "rot270", "hflip", "vflip")


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random rotation/flip applied identically to image and mask."""
    op = AUGMENT_OPS[int(rng.integers(len(AUGMENT_OPS)))]
    img, mask = sample.image, sample.mask

    def apply(a):
        if a is None:
            return None
        if op == "identity":
            return a.copy()
        if op.startswith("rot"):
            return np.rot90(a, k=int(op[3:]) // 90).copy()
        return (np.fliplr(a) if op == "hflip" else np.flipud(a)).copy()

    return Sample(apply(img), apply(mask), sample.case_id, sample.slice_index)


def _ellipse_radius(size, cx, cy, ax, ay, theta):
    """Normalized elliptical radius field: 1.0 on the ellipse boundary."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    c, s = math.cos(theta), math.sin(theta)
    u = (c * dx + s * dy) / ax
    v = (-s * dx + c * dy) / ay
    return np.sqrt(u * u + v * v)


def synth_generate(n_cases: int, slices_per_case: int, classes: int, seed: int,
                   out_dir, image_size: int = 224) -> SplitManifest:
    """Write a deterministic synthetic dataset of nested elliptic structures.

    Four-class mode nests a disk (class 3) inside an annulus (class 2)
    inside an outer ellipse ring (class 1); two-class mode draws a single
    filled ellipse. Appearance varies strongly per case (intensity
    spacing with occasionally confusable innermost/outermost levels, a
    smooth multiplicative bias field, per-case noise, wide geometry
    ranges) so a small labelled subset underdetermines the task, while
    the foreground fraction stays within [5%, 40%] by construction.
    Returns the split manifest, which is also written as ``manifest.json``.
    """
    if classes not in (2, 4):
        raise ValueError(f"classes must be 2 or 4, got {classes}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    case_ids = [f"case_{i:04d}" for i in range(n_cases)]
    for ci, case_id in enumerate(case_ids):
        rng = np.random.default_rng([seed, ci])
        case_dir = out / case_id
        case_dir.mkdir(exist_ok=True)
        # case-level appearance and geometry
        base = rng.uniform(0.10, 0.40)
        gaps = rng.uniform(0.05, 0.35, size=3)
        gaps *= min(1.0, (0.97 - base) / gaps.sum())
        levels = base + np.cumsum(gaps)                     # class 1..3 intensities
        if classes == 4 and rng.random() < 0.5:
            # innermost structure shares the outer ring's intensity band,
            # so position in the nesting, not intensity, identifies it
            levels[2] = levels[0] + rng.uniform(-0.05, 0.05)
        cx0, cy0 = rng.uniform(0.36, 0.64, size=2) * image_size
        ax0, ay0 = rng.uniform(0.155, 0.27, size=2) * image_size
        th0 = rng.uniform(0, math.pi)
        r_ring = rng.uniform(0.45, 0.78)
        r_disk = rng.uniform(0.18, min(0.45, r_ring - 0.12))
        noise_sigma = rng.uniform(0.03, 0.09)

        for k in range(slices_per_case):
            srng = np.random.default_rng([seed, ci, k])
            cx = cx0 + srng.uniform(-0.03, 0.03) * image_size
            cy = cy0 + srng.uniform(-0.03, 0.03) * image_size
            sc = srng.uniform(0.88, 1.12)
            th = th0 + srng.uniform(-0.25, 0.25)
            rho = _ellipse_radius(image_size, cx, cy, ax0 * sc, ay0 * sc, th)

            mask = np.zeros((image_size, image_size), dtype=np.uint8)
            img = np.full((image_size, image_size), base, dtype=np.float64)
            if classes == 4:
                rr = r_ring * srng.uniform(0.95, 1.05)
                rd = r_disk * srng.uniform(0.95, 1.05)
                mask[rho <= 1.0] = 1
                mask[rho <= rr] = 2
                mask[rho <= rd] = 3
                for cls in (1, 2, 3):
                    img[mask == cls] = np.clip(
                        levels[cls - 1] + srng.uniform(-0.03, 0.03), 0.02, 0.98)
            else:
                mask[rho <= 1.0] = 1
                img[mask == 1] = levels[0] + srng.uniform(-0.03, 0.03)

            field = gaussian_filter(srng.standard_normal(img.shape),
                                    sigma=image_size / 3.0)
            img = img * (1.0 + 0.25 * field / (np.abs(field).max() + 1e-9))
            img = gaussian_filter(img, sigma=srng.uniform(0.5, 1.2))
            img = img + srng.normal(0.0, noise_sigma, img.shape)
            img = np.clip(img, 0.0, 1.0)

            Image.fromarray((img * 65535).astype(np.uint16)).save(
                case_dir / f"slice_{k}_img.png")
            Image.fromarray(mask, mode="L").save(case_dir / f"slice_{k}_mask.png")

    order = list(np.random.default_rng([seed, 10 ** 6]).permutation(n_cases))
    n_test = max(1, round(0.2 * n_cases))
    n_val = max(1, round(0.1 * n_cases))
    n_lab = max(1, round(0.1 * n_cases))
    test = [case_ids[i] for i in order[:n_test]]
    val = [case_ids[i] for i in order[n_test:n_test + n_val]]
    lab = [case_ids[i] for i in order[n_test + n_val:n_test + n_val + n_lab]]
    unlab = [case_ids[i] for i in order[n_test + n_val + n_lab:]]
    manifest = SplitManifest(labelled_cases=sorted(lab), unlabelled_cases=sorted(unlab),
                             validation_cases=sorted(val), test_cases=sorted(test),
                             classes=classes)
    manifest.to_file(out / "manifest.json")
    return manifest
