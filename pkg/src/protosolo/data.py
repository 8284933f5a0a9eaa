"""Synthetic fine-grained dataset generation, folder I/O, and augmentation.

Every generated class shares a common elliptical body; class identity is
carried by a single class-unique part (a distinct glyph shape + color)
attached to the body, over a textured noise background.  Ground-truth
foreground masks cover body plus part, which is what the precision (Pr)
metric consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image
from scipy import ndimage

MIN_IMAGE_SIZE = 32

_GLYPH_NAMES = ("square", "disk", "triangle", "diamond", "ring", "cross", "hbar", "vbar")
_PALETTE = (
    (0.90, 0.10, 0.10),  # red
    (0.10, 0.20, 0.90),  # blue
    (0.95, 0.88, 0.10),  # yellow
    (0.10, 0.80, 0.20),  # green
    (0.85, 0.15, 0.85),  # magenta
    (0.10, 0.85, 0.85),  # cyan
    (0.95, 0.55, 0.10),  # orange
    (0.55, 0.20, 0.85),  # purple
)


@dataclass(frozen=True)
class DatasetSpec:
    """Deterministic recipe for one synthetic dataset."""

    num_classes: int = 4
    per_class: int = 60
    image_size: int = 64
    seed: int = 0
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.per_class < 2:
            raise ValueError("per_class must be >= 2 so both splits are non-empty")
        if self.image_size < MIN_IMAGE_SIZE:
            raise ValueError(
                f"image_size {self.image_size} is below the minimum {MIN_IMAGE_SIZE} "
                "needed to place body and part"
            )
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")


@dataclass
class Sample:
    """One image with its label and ground-truth foreground mask."""

    image: np.ndarray  # (3, S, S) float64 in [0, 1]
    label: int
    mask: np.ndarray  # (S, S) bool, True on body + part
    id: str
    mask_missing: bool = False


def part_descriptor(class_index):
    """Class-unique (glyph shape, color) pair for the discriminative part."""
    shape = _GLYPH_NAMES[class_index % len(_GLYPH_NAMES)]
    color = _PALETTE[
        (class_index + class_index // len(_GLYPH_NAMES)) % len(_PALETTE)
    ]
    return shape, color


def _glyph_mask(name, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if name == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if name == "disk":
        return dy * dy + dx * dx <= r * r
    if name == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if name == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if name == "ring":
        rho = np.sqrt(dy * dy + dx * dx)
        return (rho <= r) & (rho >= 0.55 * r)
    if name == "cross":
        box = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        return box & ((np.abs(dy - dx) <= 0.4 * r) | (np.abs(dy + dx) <= 0.4 * r))
    if name == "hbar":
        return (np.abs(dy) <= 0.4 * r) & (np.abs(dx) <= r)
    if name == "vbar":
        return (np.abs(dx) <= 0.4 * r) & (np.abs(dy) <= r)
    raise ValueError(f"unknown glyph {name!r}")


def _textured_background(rng, size):
    # low-frequency noise: small random grid upsampled bilinearly per channel
    # kept dim so object pixels dominate every feature channel
    coarse = rng.uniform(0.0, 0.05, size=(3, 6, 6))
    zoom = size / 6.0
    bg = np.stack(
        [ndimage.zoom(coarse[c], zoom, order=1, grid_mode=True, mode="nearest") for c in range(3)]
    )
    bg += rng.normal(0.0, 0.01, size=bg.shape)
    return np.clip(bg, 0.0, 1.0)


def _render_sample(spec, class_index, item_index):
    rng = np.random.default_rng([spec.seed, class_index, item_index])
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)

    image = _textured_background(rng, s)

    # common body: a rotated ellipse, randomly placed and scaled
    a = rng.uniform(0.16, 0.24) * s
    b = rng.uniform(0.12, 0.18) * s
    theta = rng.uniform(0.0, math.pi)
    cy = rng.uniform(0.42, 0.58) * s
    cx = rng.uniform(0.42, 0.58) * s
    ct, st = math.cos(theta), math.sin(theta)
    u = (yy - cy) * ct + (xx - cx) * st
    v = -(yy - cy) * st + (xx - cx) * ct
    body = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    body_color = np.array([0.62, 0.48, 0.34]) + rng.uniform(-0.05, 0.05, 3)

    # class-unique part attached near the same body landmark every time
    # (like a head marking), so its position tracks the body placement
    glyph, color = part_descriptor(class_index)
    r = rng.uniform(0.085, 0.115) * s
    phi = -math.pi / 2.0 + rng.uniform(-0.25, 0.25)
    py = cy + (a * 0.8) * math.sin(phi)
    px = cx + (a * 0.8) * math.cos(phi)
    margin = r + 2.0
    py = float(np.clip(py, margin, s - 1 - margin))
    px = float(np.clip(px, margin, s - 1 - margin))
    part = _glyph_mask(glyph, yy, xx, py, px, r)

    for c in range(3):
        image[c][body] = body_color[c]
        image[c][part] = color[c]
    image += rng.normal(0.0, 0.01, size=image.shape)
    image = np.clip(image, 0.0, 1.0)

    mask = body | part
    return Sample(
        image=image,
        label=class_index,
        mask=mask,
        id=f"class{class_index:02d}_{item_index:03d}",
    )


def generate(spec):
    """Generate a stratified (train, test) split of synthetic samples.

    Pure in ``spec``: identical specs yield bit-identical datasets.
    """
    n_train = int(round(spec.per_class * spec.train_fraction))
    n_train = min(max(n_train, 1), spec.per_class - 1)
    train, test = [], []
    for k in range(spec.num_classes):
        for i in range(spec.per_class):
            sample = _render_sample(spec, k, i)
            (train if i < n_train else test).append(sample)
    return train, test


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    rotation_deg: float = 0.0
    shear_x_deg: float = 0.0
    shear_y_deg: float = 0.0


def sample_augment_params(rng):
    return AugmentParams(
        flip=bool(rng.random() < 0.5),
        rotation_deg=float(rng.uniform(-15.0, 15.0)),
        shear_x_deg=float(rng.uniform(-10.0, 10.0)),
        shear_y_deg=float(rng.uniform(-10.0, 10.0)),
    )


def _affine_matrix(params):
    t = math.radians(params.rotation_deg)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    shear = np.array(
        [
            [1.0, math.tan(math.radians(params.shear_y_deg))],
            [math.tan(math.radians(params.shear_x_deg)), 1.0],
        ]
    )
    return shear @ rot


def warp_plane(plane, params):
    """Warp one (S, S) plane: horizontal flip, then rotation + shear."""
    if params.flip:
        plane = plane[:, ::-1]
    if (
        params.rotation_deg == 0.0
        and params.shear_x_deg == 0.0
        and params.shear_y_deg == 0.0
    ):
        return np.ascontiguousarray(plane)
    m = _affine_matrix(params)
    center = (np.asarray(plane.shape, dtype=np.float64) - 1.0) / 2.0
    # output coord -> input coord mapping uses the inverse transform
    inv = np.linalg.inv(m)
    offset = center - inv @ center
    return ndimage.affine_transform(
        plane, inv, offset=offset, order=1, mode="nearest", output=np.float64
    )


def apply_augment(image, mask, params):
    """Apply one transform jointly to image and mask (kept registered)."""
    out_image = np.clip(
        np.stack([warp_plane(image[c], params) for c in range(image.shape[0])]),
        0.0,
        1.0,
    )
    out_mask = warp_plane(mask.astype(np.float64), params) >= 0.5
    return out_image, out_mask


def augment(sample, rng):
    """Randomly flip/rotate/shear a training sample; label is untouched."""
    params = sample_augment_params(rng)
    image, mask = apply_augment(sample.image, sample.mask, params)
    return replace(sample, image=image, mask=mask)


# ---------------------------------------------------------------------------
# folder I/O
# ---------------------------------------------------------------------------


def _to_png_array(image):
    return (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def save_folder(samples, root, class_names=None):
    """Write samples as root/<class>/<id>.png plus root/masks/<class>/<id>.png."""
    root.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        name = (
            class_names[sample.label]
            if class_names is not None
            else f"class{sample.label:02d}"
        )
        img_dir = root / name
        mask_dir = root / "masks" / name
        img_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
        rgb = _to_png_array(sample.image).transpose(1, 2, 0)
        Image.fromarray(rgb, mode="RGB").save(img_dir / f"{sample.id}.png")
        Image.fromarray(
            (sample.mask.astype(np.uint8) * 255), mode="L"
        ).save(mask_dir / f"{sample.id}.png")


def load_folder(root, size=None):
    """Load root/<class>/*.png in lexicographic class order.

    A sibling ``masks/`` tree supplies foreground masks; a missing mask file
    yields an all-ones mask with ``mask_missing=True`` set on the sample.
    """
    class_dirs = sorted(
        d for d in root.iterdir() if d.is_dir() and d.name != "masks"
    )
    if not class_dirs:
        raise ValueError(f"no class directories under {root}")
    samples = []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(class_dir.glob("*.png"))
        if not files:
            raise ValueError(f"empty class directory {class_dir}")
        for path in files:
            try:
                with Image.open(path) as im:
                    im = im.convert("RGB")
                    if size is not None and im.size != (size, size):
                        im = im.resize((size, size), Image.BILINEAR)
                    image = np.asarray(im, dtype=np.float64) / 255.0
            except Exception as exc:
                raise ValueError(f"cannot decode image file {path}: {exc}") from exc
            image = image.transpose(2, 0, 1)
            s = image.shape[1]
            mask_path = root / "masks" / class_dir.name / path.name
            if mask_path.exists():
                with Image.open(mask_path) as mm:
                    mm = mm.convert("L")
                    if mm.size != (s, s):
                        mm = mm.resize((s, s), Image.NEAREST)
                    mask = np.asarray(mm) > 0
                mask_missing = False
            else:
                mask = np.ones((s, s), dtype=bool)
                mask_missing = True
            samples.append(
                Sample(
                    image=image,
                    label=label,
                    mask=mask,
                    id=path.stem,
                    mask_missing=mask_missing,
                )
            )
    return samples


def stack_images(samples):
    """Stack samples into (images (N,3,S,S), labels (N,)) arrays."""
    images = np.stack([s.image for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.intp)
    return images, labels
