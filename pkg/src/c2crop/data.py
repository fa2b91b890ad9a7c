"""Synthetic imbalanced-composition benchmark, manifest ingestion, batching.

Synthetic samples are pure functions of (master seed, index): nothing is
stored on disk, the whole dataset regenerates from its config. Each image
contains one red-ish elliptical subject placed so that a rule-of-thirds
crop around it is the ground truth, plus grayscale distractor blobs and
pixel noise. Crop size ratios follow Beta(a, b), which makes large crops
(many-shot) dominate and small crops genuinely rare.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

BOUNDARIES = ("l", "r", "t", "b")


@dataclass(frozen=True)
class CropBox:
    """Normalized crop rectangle; 0 <= left < right <= 1, same for top/bottom."""

    left: float
    top: float
    right: float
    bottom: float

    def __post_init__(self):
        if not (0.0 <= self.left < self.right <= 1.0):
            raise ValueError(f"invalid box: left={self.left}, right={self.right}")
        if not (0.0 <= self.top < self.bottom <= 1.0):
            raise ValueError(f"invalid box: top={self.top}, bottom={self.bottom}")

    @property
    def size_ratio(self) -> float:
        return (self.right - self.left) * (self.bottom - self.top)


def targets_from_box(box: CropBox) -> np.ndarray:
    """Boundary targets in (l, r, t, b) order."""
    return np.array([box.left, box.right, box.top, box.bottom], dtype=np.float64)


def box_from_targets(t) -> CropBox:
    t = np.asarray(t, dtype=np.float64)
    return CropBox(left=float(t[0]), top=float(t[2]), right=float(t[1]), bottom=float(t[3]))


@dataclass
class Sample:
    image: np.ndarray  # (3, S, S) float64 in [0, 1]
    box: CropBox
    size_ratio: float
    source: str


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 64
    train_size: int = 2000
    val_size: int = 200
    beta_a: float = 5.0
    beta_b: float = 2.0
    # draws below min_size_ratio are clamped; Beta(5,2) mass there is ~1e-6
    min_size_ratio: float = 0.05
    aspect_low: float = 0.8
    aspect_high: float = 1.25
    # boxes always contain the image center by at least this margin, so each
    # boundary stays inside the image half its regression head sees
    center_margin: float = 0.02
    subject_point: float = 1.0 / 3.0  # rule-of-thirds anchor inside the box
    subject_scale: float = 0.28  # subject semi-axes relative to box w/h
    n_distractors: int = 3
    noise_level: float = 0.02
    master_seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise ValueError(f"image_size too small: {self.image_size}")
        if self.train_size < 0 or self.val_size < 0:
            raise ValueError("dataset sizes must be non-negative")
        if self.beta_a <= 0 or self.beta_b <= 0:
            raise ValueError("Beta skew parameters must be positive")
        if not 0 < self.min_size_ratio < 1:
            raise ValueError("min_size_ratio must be in (0, 1)")
        if not 0 < self.aspect_low <= self.aspect_high:
            raise ValueError("invalid aspect range")
        if not 0 < self.center_margin < 0.25:
            raise ValueError("center_margin must be in (0, 0.25)")
        if not 0 < self.subject_point < 1:
            raise ValueError("subject_point must be in (0, 1)")
        if not 0 < self.subject_scale < min(self.subject_point, 1 - self.subject_point):
            raise ValueError("subject must fit inside the box")
        if self.min_size_ratio < 2 * self.center_margin:
            raise ValueError("min_size_ratio must be at least 2*center_margin")

    @property
    def total_size(self) -> int:
        return self.train_size + self.val_size


# seed-sequence namespaces; keeps sample, split, shuffle, augment, init and
# oversampling streams disjoint even when the same integer seed is reused
NS_SAMPLE = 101
NS_SPLIT = 102
NS_SHUFFLE = 301
NS_AUGMENT = 302


def _sample_rng(config: GeneratorConfig, index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([config.master_seed, NS_SAMPLE, index])
    )


def _draw_geometry(config: GeneratorConfig, rng: np.random.Generator):
    """Box plus subject ellipse (cx, cy, rx, ry). Consumes a fixed draw count."""
    r = max(float(rng.beta(config.beta_a, config.beta_b)), config.min_size_ratio)
    q = float(np.clip(rng.uniform(config.aspect_low, config.aspect_high), r, 1.0 / r))
    w = np.sqrt(r * q)
    h = np.sqrt(r / q)
    d = config.center_margin
    lo = max(0.0, 0.5 + d - w)
    left = float(rng.uniform(lo, max(lo, min(0.5 - d, 1.0 - w))))
    lo = max(0.0, 0.5 + d - h)
    top = float(rng.uniform(lo, max(lo, min(0.5 - d, 1.0 - h))))
    box = CropBox(left=left, top=top, right=left + w, bottom=top + h)
    cx = left + config.subject_point * w
    cy = top + config.subject_point * h
    subject = (cx, cy, config.subject_scale * w, config.subject_scale * h)
    return box, subject


def generate_box(config: GeneratorConfig, index: int) -> CropBox:
    """Ground-truth box only; identical to generate_sample's box, no render."""
    box, _ = _draw_geometry(config, _sample_rng(config, index))
    return box


def _render(config: GeneratorConfig, rng: np.random.Generator, subject) -> np.ndarray:
    s = config.image_size
    ax = (np.arange(s) + 0.5) / s
    gx, gy = np.meshgrid(ax, ax)  # gx varies along width, gy along height

    base = rng.uniform(0.3, 0.7, size=3)
    slope = rng.uniform(-0.25, 0.25, size=2)
    img = np.empty((3, s, s))
    background = slope[0] * (gx - 0.5) + slope[1] * (gy - 0.5)
    for c in range(3):
        img[c] = base[c] + background

    for _ in range(config.n_distractors):
        dcx, dcy = rng.uniform(0.0, 1.0, size=2)
        ex, ey = rng.uniform(0.02, 0.06, size=2)
        gray = rng.uniform(0.1, 0.9)
        mask = (np.abs(gx - dcx) < ex) & (np.abs(gy - dcy) < ey)
        img[:, mask] = gray

    color = np.array(
        [rng.uniform(0.75, 1.0), rng.uniform(0.0, 0.25), rng.uniform(0.0, 0.25)]
    )
    cx, cy, rx, ry = subject
    dist = np.sqrt(((gx - cx) / rx) ** 2 + ((gy - cy) / ry) ** 2)
    coverage = np.clip(0.5 + (1.0 - dist) * min(rx, ry) * s, 0.0, 1.0)
    img = img * (1.0 - coverage) + color[:, None, None] * coverage

    img += rng.normal(0.0, config.noise_level, size=(3, s, s))
    return np.clip(img, 0.0, 1.0)


def generate_sample(config: GeneratorConfig, index: int) -> Sample:
    """Deterministic in (master_seed, index); bit-identical across calls."""
    if not 0 <= index < config.total_size:
        raise IndexError(f"sample index {index} out of range")
    rng = _sample_rng(config, index)
    box, subject = _draw_geometry(config, rng)
    image = _render(config, rng, subject)
    return Sample(
        image=image,
        box=box,
        size_ratio=box.size_ratio,
        source=f"synthetic:{config.master_seed}:{index}",
    )


def split_dataset(config: GeneratorConfig) -> tuple[list[int], list[int]]:
    """Disjoint, seeded (train, validation) index lists covering the dataset."""
    rng = np.random.default_rng(np.random.SeedSequence([config.master_seed, NS_SPLIT]))
    perm = rng.permutation(config.total_size)
    val = sorted(int(i) for i in perm[: config.val_size])
    train = sorted(int(i) for i in perm[config.val_size :])
    return train, val


class SyntheticDataset:
    """Sequence view over generated samples; rendered images are cached."""

    def __init__(self, config: GeneratorConfig, indices, cache: bool = True):
        self.config = config
        self.indices = list(indices)
        self._cache: dict[int, Sample] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, i: int) -> Sample:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        sample = generate_sample(self.config, self.indices[i])
        if self._cache is not None:
            self._cache[i] = sample
        return sample

    def target_matrix(self) -> np.ndarray:
        """(N, 4) boundary targets in (l, r, t, b) order, no rendering."""
        boxes = [generate_box(self.config, j) for j in self.indices]
        return np.stack([targets_from_box(b) for b in boxes])

    @property
    def image_size(self) -> int:
        return self.config.image_size


# ---------------------------------------------------------------------------
# augmentation


def transform_box(box: CropBox, window: CropBox) -> CropBox:
    """Re-normalize `box` into the frame of `window` (which must contain it)."""
    w = window.right - window.left
    h = window.bottom - window.top
    return CropBox(
        left=(box.left - window.left) / w,
        top=(box.top - window.top) / h,
        right=(box.right - window.left) / w,
        bottom=(box.bottom - window.top) / h,
    )


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _, h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def random_crop_augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Crop a random window fully containing the gt box, rescale, re-normalize.

    The window snaps outward to the pixel grid, so the returned box is exact
    in the resampled frame. With zero slack the sample is returned unchanged.
    """
    s = sample.image.shape[-1]
    box = sample.box
    win_l = rng.uniform(0.0, box.left)
    win_t = rng.uniform(0.0, box.top)
    win_r = rng.uniform(box.right, 1.0)
    win_b = rng.uniform(box.bottom, 1.0)
    x0 = int(np.floor(win_l * s))
    y0 = int(np.floor(win_t * s))
    x1 = min(int(np.ceil(win_r * s)), s)
    y1 = min(int(np.ceil(win_b * s)), s)
    if x0 == 0 and y0 == 0 and x1 == s and y1 == s:
        return sample
    window = CropBox(left=x0 / s, top=y0 / s, right=x1 / s, bottom=y1 / s)
    new_box = transform_box(box, window)
    image = _resize_bilinear(sample.image[:, y0:y1, x0:x1], s, s)
    return Sample(
        image=image, box=new_box, size_ratio=new_box.size_ratio, source=sample.source
    )


# ---------------------------------------------------------------------------
# manifest ingestion (real images, binary PPM only)


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6, 8-bit) to a (3, H, W) float64 array in [0, 1]."""
    raw = Path(path).read_bytes()

    tokens = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(raw):
            raise ValueError(f"{path}: truncated PPM header")
        ch = raw[pos : pos + 1]
        if ch == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos : pos + 1].isspace():
                pos += 1
            tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval

    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    width, height, maxval = (int(t) for t in tokens[1:4])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported, maxval={maxval}")
    need = width * height * 3
    pixels = raw[pos : pos + need]
    if len(pixels) < need:
        raise ValueError(f"{path}: truncated PPM pixel data")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_ppm(path, image: np.ndarray) -> None:
    """(3, H, W) floats in [0, 1] to binary PPM."""
    _, h, w = image.shape
    body = (
        (np.clip(image, 0.0, 1.0) * 255.0)
        .round()
        .astype(np.uint8)
        .transpose(1, 2, 0)
        .tobytes()
    )
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + body)


@dataclass
class ManifestRecord:
    image_path: Path
    box: CropBox


class ManifestDataset:
    """Samples backed by a JSON-lines manifest; images load on access."""

    def __init__(self, records: list[ManifestRecord], image_size: int, cache: bool = True):
        self.records = records
        self.image_size = image_size
        self._cache: dict[int, Sample] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> Sample:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        rec = self.records[i]
        img = read_ppm(rec.image_path)
        if img.shape[1:] != (self.image_size, self.image_size):
            img = _resize_bilinear(img, self.image_size, self.image_size)
        sample = Sample(
            image=img,
            box=rec.box,
            size_ratio=rec.box.size_ratio,
            source=str(rec.image_path),
        )
        if self._cache is not None:
            self._cache[i] = sample
        return sample

    def target_matrix(self) -> np.ndarray:
        return np.stack([targets_from_box(r.box) for r in self.records])


def load_manifest(path, image_size: int = 64) -> ManifestDataset:
    """Parse a JSON-lines manifest: {"image": <path>, "box": [l, t, r, b]}.

    Boxes are validated eagerly; images stay on disk until a sample is
    materialized. Relative image paths resolve against the manifest's dir.
    """
    path = Path(path)
    base = path.parent
    records: list[ManifestRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(obj, dict) or set(obj) != {"image", "box"}:
                raise ValueError(
                    f"{path}:{lineno}: expected exactly the fields 'image' and 'box'"
                )
            box_vals = obj["box"]
            if not (isinstance(box_vals, list) and len(box_vals) == 4):
                raise ValueError(f"{path}:{lineno}: 'box' must be [left, top, right, bottom]")
            try:
                box = CropBox(*(float(v) for v in box_vals))
            except (TypeError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
            img_path = Path(obj["image"])
            if not img_path.is_absolute():
                img_path = base / img_path
            records.append(ManifestRecord(image_path=img_path, box=box))
    return ManifestDataset(records, image_size=image_size)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    images: np.ndarray  # (B, 3, S, S)
    targets: np.ndarray  # (B, 4) in (l, r, t, b) order
    size_ratios: np.ndarray  # (B,)
    indices: list[int] = field(default_factory=list)


def batch_iter(dataset, batch_size: int, seed: int, epoch: int = 0, augment: bool = False):
    """Seeded per-epoch shuffle; the final short batch is kept.

    Augmentation draws come from a stream derived from (seed, epoch), in
    shuffled dataset order, so a given (seed, epoch) always yields the same
    batches bit for bit.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = np.random.default_rng(
        np.random.SeedSequence([seed, NS_SHUFFLE, epoch])
    ).permutation(n)
    aug_rng = np.random.default_rng(np.random.SeedSequence([seed, NS_AUGMENT, epoch]))
    for start in range(0, n, batch_size):
        chunk = [int(i) for i in order[start : start + batch_size]]
        samples = [dataset[i] for i in chunk]
        if augment:
            samples = [random_crop_augment(smp, aug_rng) for smp in samples]
        yield Batch(
            images=np.stack([smp.image for smp in samples]),
            targets=np.stack([targets_from_box(smp.box) for smp in samples]),
            size_ratios=np.array([smp.size_ratio for smp in samples]),
            indices=chunk,
        )
