"""Glyph and MNIST datasets, image-space rotation, occlusion blocks and
training-pair assembly."""
from __future__ import annotations

import csv
import gzip
import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from lgad.group import GroupElement
from lgad.tensor import Tensor

GLYPH_CLASSES = ("bar", "L", "T", "cross", "triangle", "disk", "ring", "chevron",
                 "S-curve", "dot-pair")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    pass


def derive_seed(seed: int, label: str) -> int:
    """Stable 63-bit sub-seed from a run seed and a fixed label."""
    h = hashlib.sha256(f"{int(seed)}:{label}".encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


@dataclass
class ImageDataset:
    images: np.ndarray  # [N, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    source: str = "synthetic-glyph"
    seed: int | None = None
    num_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 3 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} / labels {self.labels.shape}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def subset(self, idx) -> ImageDataset:
        return ImageDataset(self.images[idx], self.labels[idx], self.source, self.seed,
                            self.num_classes)

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)


# ------------------------------------------------------------------ glyphs
#
# Glyphs are unions of stroked segments and disks, described in a unit frame
# (x right, y down, extent about [-1, 1]) and rendered from signed distances
# with a one-pixel coverage ramp for antialiasing.

_GLYPH_SCALE = 8.5  # pixels per unit at size 28
_STROKE = 1.8       # stroke half-width in pixels at size 28


def _polyline(*pts):
    return [("seg", pts[i], pts[i + 1]) for i in range(len(pts) - 1)]


def _s_curve():
    t = np.linspace(-1.0, 1.0, 13)
    pts = list(zip(0.55 * np.sin(np.pi * t), t))
    return _polyline(*pts)


_GLYPHS = {
    "bar": _polyline((0.0, -1.0), (0.0, 1.0)),
    "L": _polyline((-0.45, -1.0), (-0.45, 0.95), (0.6, 0.95)),
    "T": _polyline((-0.8, -0.9), (0.8, -0.9)) + _polyline((0.0, -0.9), (0.0, 1.0)),
    "cross": _polyline((-0.8, 0.0), (0.8, 0.0)) + _polyline((0.0, -0.8), (0.0, 0.8)),
    "triangle": _polyline((0.0, -0.9), (0.85, 0.75), (-0.85, 0.75), (0.0, -0.9)),
    "disk": [("disk", (0.0, 0.0), 0.6)],
    "ring": [("ring", (0.0, 0.0), 0.75)],
    "chevron": _polyline((-0.8, -0.6), (0.0, 0.65), (0.8, -0.6)),
    "S-curve": _s_curve(),
    "dot-pair": [("disk", (-0.5, 0.0), 0.3), ("disk", (0.5, 0.0), 0.3)],
}


def _segment_distance(px, py, a, b):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    t = ((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def render_glyph(name: str, size: int = 28, offset=(0.0, 0.0)) -> np.ndarray:
    """Rasterize one glyph class with a (dx, dy) pixel offset."""
    scale = _GLYPH_SCALE * size / 28.0
    stroke = _STROKE * size / 28.0
    c = (size - 1) / 2.0
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    px = (cols - c - offset[0]) / scale
    py = (rows - c - offset[1]) / scale
    sdf = np.full((size, size), np.inf)
    for prim in _GLYPHS[name]:
        kind = prim[0]
        if kind == "seg":
            d = _segment_distance(px, py, prim[1], prim[2]) * scale - stroke
        elif kind == "disk":
            d = (np.hypot(px - prim[1][0], py - prim[1][1]) - prim[2]) * scale
        else:
            d = np.abs(np.hypot(px - prim[1][0], py - prim[1][1]) - prim[2]) * scale - stroke
        sdf = np.minimum(sdf, d)
    return np.clip(0.5 - sdf, 0.0, 1.0).astype(np.float32)


def gen_glyph_dataset(n: int, classes: int = 10, size: int = 28, seed: int = 0,
                      workers: int = 1) -> ImageDataset:
    """Balanced procedural glyphs at random sub-pixel offsets.

    Image ``i`` draws its offset from a generator seeded by (seed, i), so the
    output does not depend on ``workers``.
    """
    if not 1 <= classes <= len(GLYPH_CLASSES):
        raise ValueError(f"classes must be in 1..{len(GLYPH_CLASSES)}")
    if n < classes:
        raise ValueError(f"need at least one image per class (n={n}, classes={classes})")
    labels = np.random.default_rng(seed).permutation(np.arange(n) % classes).astype(np.int64)

    def one(i):
        off = np.random.default_rng([seed, i]).uniform(-0.5, 0.5, size=2)
        return render_glyph(GLYPH_CLASSES[labels[i]], size, off)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            imgs = list(pool.map(one, range(n)))
    else:
        imgs = [one(i) for i in range(n)]
    return ImageDataset(np.stack(imgs), labels, "synthetic-glyph", seed, classes)


# --------------------------------------------------------------------- IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix != ".gz":
        return path.read_bytes()
    try:
        with gzip.open(path, "rb") as fh:
            return fh.read()
    except (gzip.BadGzipFile, EOFError) as exc:
        raise IDXFormatError(f"{path}: bad gzip stream ({exc})") from None


def _parse_idx(buf: bytes, magic: int, ndim: int, path) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IDXFormatError(f"{path}: truncated header ({len(buf)} bytes)")
    got = int.from_bytes(buf[:4], "big")
    if got != magic:
        raise IDXFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = [int.from_bytes(buf[4 + 4 * k: 8 + 4 * k], "big") for k in range(ndim)]
    need = header + int(np.prod(dims))
    if len(buf) < need:
        raise IDXFormatError(f"{path}: truncated payload ({len(buf)} of {need} bytes)")
    if len(buf) > need:
        raise IDXFormatError(f"{path}: {len(buf) - need} trailing bytes")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> ImageDataset:
    """Read an MNIST-style IDX image/label pair (optionally gzipped)."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if len(images) != len(labels):
        raise IDXFormatError(f"{len(images)} images but {len(labels)} labels")
    num_classes = int(labels.max()) + 1 if len(labels) else 0
    return ImageDataset((images / np.float32(255.0)).astype(np.float32),
                        labels.astype(np.int64), "idx-mnist", None, max(num_classes, 10))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write images [N, H, W] and labels [N] as IDX files, gzipped for ``.gz`` paths.

    Float images are taken to lie in [0, 1] and quantized to 8 bits.
    """
    images = np.asarray(images)
    if images.dtype.kind == "f":
        images = np.clip(np.round(images * 255.0), 0, 255)
    images = images.astype(np.uint8)
    labels = np.asarray(labels).astype(np.uint8)
    img_buf = IDX_IMAGES_MAGIC.to_bytes(4, "big") + b"".join(
        int(d).to_bytes(4, "big") for d in images.shape) + images.tobytes()
    lab_buf = IDX_LABELS_MAGIC.to_bytes(4, "big") + len(labels).to_bytes(4, "big") + labels.tobytes()
    for path, buf in ((images_path, img_buf), (labels_path, lab_buf)):
        if Path(path).suffix == ".gz":
            buf = gzip.compress(buf, mtime=0)
        Path(path).write_bytes(buf)


# ---------------------------------------------------------- transformations


def rotate_images(imgs: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Bilinear rotation of a stack [N, H, W] about the image centre.

    A pixel at offset (dx, dy) from the centre (x = column, y = row) moves
    to (dx cos t - dy sin t, dx sin t + dy cos t). Samples falling outside
    the source read as zero.
    """
    imgs = np.asarray(imgs, dtype=np.float32)
    n, h, w = imgs.shape
    angles = np.asarray(angles, dtype=np.float64).reshape(n)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = cols - cx, rows - cy
    c = np.cos(angles)[:, None, None]
    s = np.sin(angles)[:, None, None]
    # inverse map: source = R(-t) * destination
    sx = c * dx + s * dy + cx
    sy = -s * dx + c * dy + cy
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0).astype(np.float32)
    fy = (sy - y0).astype(np.float32)
    padded = np.zeros((n, h + 2, w + 2), dtype=np.float32)
    padded[:, 1:-1, 1:-1] = imgs
    # out-of-range corners index the zero border
    xi0 = np.clip(x0 + 1, 0, w + 1)
    xi1 = np.clip(x0 + 2, 0, w + 1)
    yi0 = np.clip(y0 + 1, 0, h + 1)
    yi1 = np.clip(y0 + 2, 0, h + 1)
    k = np.arange(n)[:, None, None]
    out = ((1 - fy) * ((1 - fx) * padded[k, yi0, xi0] + fx * padded[k, yi0, xi1])
           + fy * ((1 - fx) * padded[k, yi1, xi0] + fx * padded[k, yi1, xi1]))
    out = np.clip(out, 0.0, 1.0)
    exact = angles == 0.0
    if np.any(exact):
        out[exact] = imgs[exact]
    return out.astype(np.float32)


def rotate_image(img: np.ndarray, g) -> np.ndarray:
    angle = g.angle if isinstance(g, GroupElement) else float(g)
    return rotate_images(np.asarray(img)[None], np.array([angle]))[0]


def apply_block(img: np.ndarray, block: int = 7, prob: float = 0.5,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """With probability ``prob`` paint a white block x block square at a uniform position."""
    h, w = img.shape
    if block > min(h, w):
        raise ValueError(f"block {block} larger than image {img.shape}")
    rng = rng if rng is not None else np.random.default_rng()
    out = np.array(img, dtype=np.float32, copy=True)
    if rng.random() < prob:
        r = int(rng.integers(0, h - block + 1))
        c = int(rng.integers(0, w - block + 1))
        out[r:r + block, c:c + block] = 1.0
    return out


# ------------------------------------------------------------------- pairs


@dataclass
class PairBatch:
    x: Tensor
    x_t: Tensor
    g: list[GroupElement]
    labels: np.ndarray

    @property
    def angles(self) -> np.ndarray:
        return np.array([e.angle for e in self.g])

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class PairSet:
    """A fixed set of (x, T_g(x), g) triples, batched on demand."""
    x: np.ndarray       # [N, H, W]
    x_t: np.ndarray     # [N, H, W]
    angles: np.ndarray  # [N]
    labels: np.ndarray  # [N]
    source_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, idx) -> PairBatch:
        n = len(idx)
        return PairBatch(Tensor(self.x[idx].reshape(n, -1)), Tensor(self.x_t[idx].reshape(n, -1)),
                         [GroupElement(a) for a in self.angles[idx]], self.labels[idx])

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[PairBatch]:
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            yield self.batch(order[start:start + batch_size])


def make_pair_set(ds: ImageDataset, n_pairs: int, blocked: bool = False, seed: int = 0,
                  block_prob: float = 0.5, block: int = 7) -> PairSet:
    """Sample base images, optionally occlude them, then rotate by theta ~ U[0, 2pi).

    The block is painted before rotation, so it turns with the glyph.
    """
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(ds), size=n_pairs)
    base = ds.images[idx].astype(np.float32, copy=True)
    if blocked:
        base = np.stack([apply_block(img, block, block_prob, rng) for img in base])
    angles = rng.uniform(0.0, 2.0 * np.pi, size=n_pairs)
    return PairSet(base, rotate_images(base, angles), angles, ds.labels[idx].copy(), idx)


def make_pairs(ds: ImageDataset, n_pairs: int, blocked: bool = False, seed: int = 0,
               batch_size: int = 64, block_prob: float = 0.5) -> Iterator[PairBatch]:
    return make_pair_set(ds, n_pairs, blocked, seed, block_prob).batches(batch_size)


def split_dataset(ds: ImageDataset, test_fraction: float, seed: int) -> tuple[ImageDataset, ImageDataset]:
    order = np.random.default_rng(seed).permutation(len(ds))
    n_test = int(round(len(ds) * test_fraction))
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


# ------------------------------------------------------------------ export


def write_pgm(path, img: np.ndarray) -> None:
    """Write a [0, 1] float image as binary 8-bit PGM (P5)."""
    img = np.asarray(img)
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    pix = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos + 1)
    return pix.reshape(h, w).astype(np.float32) / maxval


def export_dataset(ds: ImageDataset, out_dir) -> Path:
    """PGM per image plus ``manifest.csv`` (index, class, file)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "class", "file"])
        for i, (img, label) in enumerate(zip(ds.images, ds.labels)):
            name = f"{i:06d}.pgm"
            write_pgm(out_dir / name, img)
            writer.writerow([i, int(label), name])
    return manifest


def image_grid(images: list[np.ndarray], cols: int, pad: int = 1) -> np.ndarray:
    h, w = images[0].shape
    rows = (len(images) + cols - 1) // cols
    grid = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad), dtype=np.float32)
    for k, img in enumerate(images):
        r, c = divmod(k, cols)
        grid[pad + r * (h + pad): pad + r * (h + pad) + h,
             pad + c * (w + pad): pad + c * (w + pad) + w] = img
    return grid

