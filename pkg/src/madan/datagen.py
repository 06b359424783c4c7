"""Procedural multi-domain scene data.

Every domain shares one scene grammar (so label maps depend only on the
layout seed) and differs only in its rendering style.  Images are written as
binary PPM, labels as binary PGM, and each dataset directory carries a flat
``manifest.txt``.
"""
from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.ndimage import uniform_filter

CLASS_NAMES = ("road", "sky", "building", "car", "vegetation")
NUM_CLASSES = len(CLASS_NAMES)
ROAD, SKY, BUILDING, CAR, VEGETATION = range(NUM_CLASSES)
HEIGHT = WIDTH = 64

# Cityscapes-like colours for the zero-shift domain.
CANONICAL_PALETTE = (
    (128, 64, 128),
    (70, 130, 180),
    (70, 70, 70),
    (0, 0, 142),
    (107, 142, 35),
)
CANONICAL_TEXTURE_FREQ = 4.0
TEXTURE_AMPLITUDE = 18.0

# Per-unit-shift ranges used by sample_domain_spec.
PALETTE_JITTER = 110.0
NOISE_SIGMA_RANGE = (4.0, 16.0)
MAX_BLUR = 2.5

RNG_NAME = "numpy-philox4x64-10"
_LAYOUT_STREAM = 0x4C41594F5554  # "LAYOUT"
_STYLE_STREAM = 0x5354594C45  # "STYLE"
_SPEC_STREAM = 0x53504543  # "SPEC"
_MASK64 = (1 << 64) - 1


class IntegrityError(Exception):
    """A dataset on disk does not match its manifest."""


def philox(*words: int) -> np.random.Generator:
    """Counter-based generator keyed by up to two 64-bit words."""
    key = np.array([w & _MASK64 for w in words] + [0] * (2 - len(words)), dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    class_palette: tuple[tuple[int, int, int], ...] = CANONICAL_PALETTE
    noise_sigma: float = 0.0
    blur_radius: int = 0
    brightness_shift: float = 0.0
    contrast_scale: float = 1.0
    texture_freq: float = CANONICAL_TEXTURE_FREQ
    rng_seed: int = 0

    def __post_init__(self):
        if len(self.class_palette) != NUM_CLASSES:
            raise ValueError(f"class_palette needs {NUM_CLASSES} entries, got {len(self.class_palette)}")
        for rgb in self.class_palette:
            if len(rgb) != 3 or any(not 0 <= c <= 255 for c in rgb):
                raise ValueError(f"palette entry {rgb} outside [0, 255]")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.blur_radius < 0:
            raise ValueError("blur_radius must be >= 0")
        if not -0.3 <= self.brightness_shift <= 0.3:
            raise ValueError("brightness_shift must lie in [-0.3, 0.3]")
        if not 0.5 <= self.contrast_scale <= 1.5:
            raise ValueError("contrast_scale must lie in [0.5, 1.5]")
        if not self.texture_freq > 0:
            raise ValueError("texture_freq must be > 0")
        if not 0 <= self.rng_seed <= _MASK64:
            raise ValueError("rng_seed must be an unsigned 64-bit integer")

    def to_fields(self) -> dict[str, str]:
        """Canonical text form, used for the manifest and the fingerprint."""
        return {
            "spec.domain_id": self.domain_id,
            "spec.class_palette": ";".join(",".join(str(c) for c in rgb) for rgb in self.class_palette),
            "spec.noise_sigma": repr(float(self.noise_sigma)),
            "spec.blur_radius": str(int(self.blur_radius)),
            "spec.brightness_shift": repr(float(self.brightness_shift)),
            "spec.contrast_scale": repr(float(self.contrast_scale)),
            "spec.texture_freq": repr(float(self.texture_freq)),
            "spec.rng_seed": str(int(self.rng_seed)),
        }

    @classmethod
    def from_fields(cls, kv: dict[str, str]) -> "DomainSpec":
        palette = tuple(
            tuple(int(c) for c in rgb.split(",")) for rgb in kv["spec.class_palette"].split(";")
        )
        return cls(
            domain_id=kv["spec.domain_id"],
            class_palette=palette,
            noise_sigma=float(kv["spec.noise_sigma"]),
            blur_radius=int(kv["spec.blur_radius"]),
            brightness_shift=float(kv["spec.brightness_shift"]),
            contrast_scale=float(kv["spec.contrast_scale"]),
            texture_freq=float(kv["spec.texture_freq"]),
            rng_seed=int(kv["spec.rng_seed"]),
        )

    def fingerprint(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in sorted(self.to_fields().items()))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sample_domain_spec(domain_id: str, seed: int, shift_magnitude: float) -> DomainSpec:
    """Draw a domain whose style deviates from the canonical one by ``shift_magnitude``."""
    if not (math.isfinite(shift_magnitude) and 0.0 <= shift_magnitude <= 1.0):
        raise ValueError(f"shift_magnitude must lie in [0, 1], got {shift_magnitude}")
    s = float(shift_magnitude)
    rng = philox(seed, _name_key(domain_id) ^ _SPEC_STREAM)
    jitter = rng.uniform(-PALETTE_JITTER, PALETTE_JITTER, size=(NUM_CLASSES, 3))
    palette = tuple(
        tuple(int(np.clip(round(base + s * d), 0, 255)) for base, d in zip(rgb, row))
        for rgb, row in zip(CANONICAL_PALETTE, jitter)
    )
    noise = rng.uniform(*NOISE_SIGMA_RANGE)
    blur = rng.uniform(0.0, MAX_BLUR)
    brightness = rng.uniform(-0.3, 0.3)
    contrast = rng.uniform(-0.5, 0.5)
    freq = rng.uniform(-0.5, 0.5)
    return DomainSpec(
        domain_id=domain_id,
        class_palette=palette,
        noise_sigma=s * noise,
        blur_radius=int(math.floor(s * blur)),
        brightness_shift=s * brightness + 0.0,
        contrast_scale=1.0 + s * contrast,
        texture_freq=CANONICAL_TEXTURE_FREQ * (1.0 + s * freq),
        rng_seed=(seed ^ _name_key(domain_id)) & _MASK64,
    )


# ---------------------------------------------------------------------------
# Scene layout and rasterisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Shape:
    """One painted primitive, in integer pixel coordinates.

    rectangle: (x0, y0, x1, y1), half-open.
    circle:    (cx, cy, r), pixels with (x-cx)^2 + (y-cy)^2 <= r^2.
    triangle:  (x0, y0, x1, y1, x2, y2), closed, pixel-index vertices.
    """

    kind: str
    class_id: int
    coords: tuple[int, ...]


@dataclass(frozen=True)
class Scene:
    layout_seed: int
    horizon: int
    objects: tuple[Shape, ...] = field(default_factory=tuple)
    height: int = HEIGHT
    width: int = WIDTH


def make_scene(layout_seed: int, height: int = HEIGHT, width: int = WIDTH) -> Scene:
    """Sample a street-like layout.  Objects are listed in painting order."""
    rng = philox(layout_seed, _LAYOUT_STREAM)
    H, W = height, width
    horizon = int(rng.integers(int(0.35 * H), int(0.55 * H) + 1))
    shapes: list[Shape] = []

    for _ in range(int(rng.integers(2, 7))):
        bw = int(rng.integers(max(2, W // 10), max(3, W // 4) + 1))
        bh = int(rng.integers(max(2, H // 8), max(3, horizon - 1)))
        x0 = int(rng.integers(-bw // 2, W - bw // 2))
        shapes.append(Shape("rectangle", BUILDING, (x0, horizon - bh, x0 + bw, horizon + 1)))

    for _ in range(int(rng.integers(0, 4))):
        half = int(rng.integers(3, 8))
        th = int(rng.integers(6, 17))
        cx = int(rng.integers(0, W))
        base = horizon + int(rng.integers(0, 3))
        shapes.append(Shape("triangle", VEGETATION, (cx - half, base, cx + half, base, cx, base - th)))

    for _ in range(int(rng.integers(0, 4))):
        r = int(rng.integers(3, 7))
        cx = int(rng.integers(0, W))
        lo = min(horizon + r, H - 1)
        cy = int(rng.integers(lo, H))
        shapes.append(Shape("circle", CAR, (cx, cy, r)))

    mark_y = (horizon + H) // 2
    offset = int(rng.integers(0, 10))
    for x0 in range(offset - 10, W, 10):
        shapes.append(Shape("rectangle", ROAD, (x0, mark_y, x0 + 4, mark_y + 1)))

    return Scene(layout_seed=int(layout_seed), horizon=horizon, objects=tuple(shapes), height=H, width=W)


def _shape_mask(shape: Shape, H: int, W: int) -> np.ndarray:
    ys, xs = np.mgrid[0:H, 0:W]
    if shape.kind == "rectangle":
        x0, y0, x1, y1 = shape.coords
        return (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
    if shape.kind == "circle":
        cx, cy, r = shape.coords
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if shape.kind == "triangle":
        ax, ay, bx, by, cx, cy = shape.coords
        e0 = (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)
        e1 = (cx - bx) * (ys - by) - (cy - by) * (xs - bx)
        e2 = (ax - cx) * (ys - cy) - (ay - cy) * (xs - cx)
        return ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def rasterize(scene: Scene) -> np.ndarray:
    H, W = scene.height, scene.width
    labels = np.full((H, W), ROAD, dtype=np.uint8)
    labels[: scene.horizon] = SKY
    for shape in scene.objects:
        labels[_shape_mask(shape, H, W)] = shape.class_id
    return labels


def stylize(labels: np.ndarray, spec: DomainSpec, layout_seed: int) -> np.ndarray:
    """Apply the domain style to a label map; returns uint8 RGB, H x W x 3.

    Order: palette fill, texture, box blur, Gaussian noise,
    brightness/contrast, clamp, 8-bit quantisation.
    """
    H, W = labels.shape
    rng = philox(spec.rng_seed, (layout_seed * 0x9E3779B97F4A7C15) ^ _STYLE_STREAM)
    palette = np.asarray(spec.class_palette, dtype=np.float64)
    img = palette[labels]

    phases = rng.uniform(0.0, 2 * np.pi, size=NUM_CLASSES)
    v, u = np.mgrid[0:H, 0:W]
    u = u / W
    v = v / H
    angles = np.arange(NUM_CLASSES) * np.pi / NUM_CLASSES
    wave = np.sin(
        2 * np.pi * spec.texture_freq * (u * np.cos(angles[labels]) + v * np.sin(angles[labels]))
        + phases[labels]
    )
    img = img + TEXTURE_AMPLITUDE * wave[..., None]

    if spec.blur_radius > 0:
        size = 2 * spec.blur_radius + 1
        img = uniform_filter(img, size=(size, size, 1), mode="nearest")

    noise = rng.standard_normal(img.shape)
    if spec.noise_sigma > 0:
        img = img + spec.noise_sigma * noise

    img = (img / 255.0 - 0.5) * spec.contrast_scale + 0.5 + spec.brightness_shift
    img = np.clip(2.0 * img - 1.0, -1.0, 1.0)
    return np.clip(np.rint((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


def to_tensor(rgb: np.ndarray) -> np.ndarray:
    """uint8 H x W x 3 -> float32 3 x H x W in [-1, 1]."""
    return (rgb.astype(np.float32).transpose(2, 0, 1) / 127.5) - 1.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    """float 3 x H x W in [-1, 1] -> uint8 H x W x 3."""
    img = np.clip(np.rint((np.asarray(image, dtype=np.float64) + 1.0) * 127.5), 0, 255)
    return img.astype(np.uint8).transpose(1, 2, 0)


def render_scene(spec: DomainSpec, layout_seed: int, height: int = HEIGHT, width: int = WIDTH):
    """Render one sample; returns (image 3xHxW float32 in [-1, 1], labels HxW uint8)."""
    labels = rasterize(make_scene(layout_seed, height, width))
    return to_tensor(stylize(labels, spec, layout_seed)), labels


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_ppm(path: Path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    _atomic_write(path, f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def write_pgm(path: Path, gray: np.ndarray) -> None:
    h, w = gray.shape
    _atomic_write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


def _read_netpbm(path: Path, magic: bytes) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IntegrityError(f"cannot read {path}: {exc}") from exc
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IntegrityError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != magic or tokens[3] != b"255":
        raise IntegrityError(f"{path}: expected {magic.decode()} with maxval 255")
    w, h = int(tokens[1]), int(tokens[2])
    channels = 3 if magic == b"P6" else 1
    body = data[pos:]
    if len(body) != w * h * channels:
        raise IntegrityError(f"{path}: expected {w * h * channels} bytes of pixel data, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(Path(path), b"P6")


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(Path(path), b"P5")


def read_kv(path) -> dict[str, str]:
    kv: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        kv[key.strip()] = value.strip()
    return kv


def write_kv(path: Path, kv: dict[str, str]) -> None:
    _atomic_write(Path(path), "".join(f"{k}={v}\n" for k, v in kv.items()).encode("utf-8"))


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    domain_id: str
    n: int
    height: int
    width: int
    classes: int
    labeled: bool
    spec: DomainSpec
    spec_hash: str
    layout_seeds: list[int]
    images: list[str]
    labels: list[str]
    image_sha256: list[str]
    label_sha256: list[str]
    rng: str = RNG_NAME

    def to_kv(self) -> dict[str, str]:
        kv = {
            "domain_id": self.domain_id,
            "n": str(self.n),
            "height": str(self.height),
            "width": str(self.width),
            "classes": str(self.classes),
            "labeled": "1" if self.labeled else "0",
            "rng": self.rng,
            "spec_hash": self.spec_hash,
        }
        kv.update(self.spec.to_fields())
        for i in range(self.n):
            kv[f"sample.{i}.layout_seed"] = str(self.layout_seeds[i])
            kv[f"sample.{i}.image"] = self.images[i]
            kv[f"sample.{i}.image_sha256"] = self.image_sha256[i]
            if self.labeled:
                kv[f"sample.{i}.label"] = self.labels[i]
                kv[f"sample.{i}.label_sha256"] = self.label_sha256[i]
        return kv

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "DatasetManifest":
        n = int(kv["n"])
        spec = DomainSpec.from_fields(kv)
        labeled = kv.get("labeled", "1") == "1"
        return cls(
            domain_id=kv["domain_id"],
            n=n,
            height=int(kv["height"]),
            width=int(kv["width"]),
            classes=int(kv["classes"]),
            labeled=labeled,
            spec=spec,
            spec_hash=kv["spec_hash"],
            layout_seeds=[int(kv[f"sample.{i}.layout_seed"]) for i in range(n)],
            images=[kv[f"sample.{i}.image"] for i in range(n)],
            labels=[kv[f"sample.{i}.label"] for i in range(n)] if labeled else [],
            image_sha256=[kv[f"sample.{i}.image_sha256"] for i in range(n)],
            label_sha256=[kv[f"sample.{i}.label_sha256"] for i in range(n)] if labeled else [],
            rng=kv["rng"],
        )


def layout_seeds_for(spec: DomainSpec, n: int, offset: int = 0) -> list[int]:
    """Per-sample layout seeds; ``offset`` selects a disjoint range (e.g. a held-out split)."""
    rng = philox(spec.rng_seed, _LAYOUT_STREAM ^ _name_key("layouts"))
    seeds = rng.integers(0, 2**63, size=offset + n, dtype=np.int64)
    return [int(s) for s in seeds[offset:]]


def generate_dataset(spec: DomainSpec, n: int, out_dir, labeled: bool = True,
                     height: int = HEIGHT, width: int = WIDTH, seed_offset: int = 0) -> DatasetManifest:
    """Render ``n`` samples into ``out_dir`` and write ``manifest.txt`` last.

    ``labeled=False`` (target-domain training sets) writes images only.
    """
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc

    seeds = layout_seeds_for(spec, n, seed_offset)
    images, labels, img_sha, lab_sha = [], [], [], []
    width_digits = max(4, len(str(n - 1)))
    for i, seed in enumerate(seeds):
        lab = rasterize(make_scene(seed, height, width))
        rgb = stylize(lab, spec, seed)
        img_name = f"{i:0{width_digits}d}.ppm"
        write_ppm(out / img_name, rgb)
        images.append(img_name)
        img_sha.append(hashlib.sha256((out / img_name).read_bytes()).hexdigest())
        if labeled:
            lab_name = f"{i:0{width_digits}d}.pgm"
            write_pgm(out / lab_name, lab)
            labels.append(lab_name)
            lab_sha.append(hashlib.sha256((out / lab_name).read_bytes()).hexdigest())

    manifest = DatasetManifest(
        domain_id=spec.domain_id, n=n, height=height, width=width, classes=NUM_CLASSES,
        labeled=labeled, spec=spec, spec_hash=spec.fingerprint(), layout_seeds=seeds,
        images=images, labels=labels, image_sha256=img_sha, label_sha256=lab_sha,
    )
    write_kv(out / "manifest.txt", manifest.to_kv())
    return manifest


def read_manifest(dir_path) -> DatasetManifest:
    path = Path(dir_path) / "manifest.txt"
    if not path.is_file():
        raise IntegrityError(f"missing manifest {path}")
    try:
        manifest = DatasetManifest.from_kv(read_kv(path))
    except (KeyError, ValueError) as exc:
        raise IntegrityError(f"corrupt manifest {path}: {exc}") from exc
    if manifest.spec.fingerprint() != manifest.spec_hash:
        raise IntegrityError(f"{path}: spec fingerprint mismatch")
    return manifest


def _check(path: Path, expected: str, index: int) -> bytes:
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IntegrityError(f"sample {index}: cannot read {path}: {exc}") from exc
    if hashlib.sha256(data).hexdigest() != expected:
        raise IntegrityError(f"sample {index}: checksum mismatch for {path}")
    return data


def load_dataset(dir_path, with_labels: bool | None = None) -> Iterator[tuple[np.ndarray, np.ndarray | None]]:
    """Yield (image, labels) in manifest order.

    Unlabeled (target) datasets yield ``None`` labels.  ``with_labels=True``
    on such a dataset is an error.
    """
    root = Path(dir_path)
    manifest = read_manifest(root)
    if with_labels is None:
        with_labels = manifest.labeled
    elif with_labels and not manifest.labeled:
        raise IntegrityError(f"{root}: dataset {manifest.domain_id!r} is unlabeled")
    for i in range(manifest.n):
        img_path = root / manifest.images[i]
        _check(img_path, manifest.image_sha256[i], i)
        rgb = read_ppm(img_path)
        if rgb.shape[:2] != (manifest.height, manifest.width):
            raise IntegrityError(f"sample {i}: {img_path} has shape {rgb.shape[:2]}")
        label = None
        if with_labels:
            lab_path = root / manifest.labels[i]
            _check(lab_path, manifest.label_sha256[i], i)
            label = read_pgm(lab_path)
            if label.max(initial=0) >= manifest.classes:
                raise IntegrityError(f"sample {i}: {lab_path} has out-of-range class ids")
        yield to_tensor(rgb), label


def load_arrays(dir_path, with_labels: bool | None = None):
    """Whole dataset as stacked arrays: (N x 3 x H x W float32, N x H x W int64 or None)."""
    images, labels = [], []
    for img, lab in load_dataset(dir_path, with_labels):
        images.append(img)
        labels.append(lab)
    x = np.stack(images)
    y = None if labels[0] is None else np.stack(labels).astype(np.int64)
    return x, y

