"""Dataset construction: IDX ingestion, bias injection, synthetic blobs.

Every generator is a pure function of (inputs, seed); datasets are plain
arrays, immutable by convention, with ground-truth bias annotations carried
alongside the features.
"""

from __future__ import annotations

import configparser
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049

# ten visually distinct tints: primaries, secondaries and a few mixes
DEFAULT_PALETTE = np.array([
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.0, 1.0],
    [0.0, 1.0, 0.5],
    [1.0, 1.0, 1.0],
])


class IdxError(ValueError):
    """Base for IDX parsing failures."""


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


class DatasetCacheError(ValueError):
    """Cached tensor file disagrees with its manifest."""


def derive_seed(master, label):
    """Stable 63-bit child seed from a master seed and a role label."""
    digest = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass
class RawDataset:
    """Grayscale images in [0,1], integer labels."""

    images: np.ndarray  # (N, H, W) float64
    labels: np.ndarray  # (N,) int64
    n_classes: int

    @property
    def n(self):
        return self.images.shape[0]

    def subset(self, idx):
        return RawDataset(self.images[idx], self.labels[idx], self.n_classes)


@dataclass
class BiasedDataset:
    """Flat features plus target labels and per-attribute bias annotations.

    `bias` and `aligned` have one column per bias attribute (one normally,
    two for the split-canvas variant). aligned[i, a] is True iff bias label
    equals the palette index designated to class y[i].
    """

    X: np.ndarray        # (N, D) float64 in [0, 1]
    y: np.ndarray        # (N,) int64
    bias: np.ndarray     # (N, A) int64
    aligned: np.ndarray  # (N, A) bool
    n_classes: int
    rho: tuple           # per-attribute severity
    split: str = "train"
    image_shape: tuple | None = None  # (channels, H, W) when spatial
    palette: np.ndarray | None = None

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def n_attributes(self):
        return self.bias.shape[1]

    def conflicting(self):
        """True where the sample conflicts with the (first) bias attribute."""
        return ~self.aligned[:, 0]

    def fully_aligned(self):
        return self.aligned.all(axis=1)

    def group_ids(self):
        """Integer id per sample from its alignment pattern (2^A groups)."""
        ids = np.zeros(self.n, dtype=np.int64)
        for a in range(self.n_attributes):
            ids = 2 * ids + (~self.aligned[:, a]).astype(np.int64)
        return ids

    def subset(self, idx):
        return BiasedDataset(self.X[idx], self.y[idx], self.bias[idx],
                             self.aligned[idx], self.n_classes, self.rho,
                             self.split, self.image_shape, self.palette)


def load_idx(images_path, labels_path):
    """Parse an IDX ubyte image/label pair into a RawDataset.

    Big-endian headers; image magic 2051, label magic 2049. Pixels are
    rescaled to [0,1].
    """
    with open(images_path, "rb") as fh:
        ibuf = fh.read()
    with open(labels_path, "rb") as fh:
        lbuf = fh.read()
    if len(ibuf) < 16:
        raise IdxTruncatedError(f"{images_path}: header shorter than 16 bytes")
    magic, n_img, h, w = struct.unpack_from(">IIII", ibuf, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise IdxMagicError(f"{images_path}: magic {magic}, expected {IDX_IMAGE_MAGIC}")
    if len(ibuf) != 16 + n_img * h * w:
        raise IdxTruncatedError(
            f"{images_path}: expected {16 + n_img * h * w} bytes, got {len(ibuf)}")
    if len(lbuf) < 8:
        raise IdxTruncatedError(f"{labels_path}: header shorter than 8 bytes")
    lmagic, n_lab = struct.unpack_from(">II", lbuf, 0)
    if lmagic != IDX_LABEL_MAGIC:
        raise IdxMagicError(f"{labels_path}: magic {lmagic}, expected {IDX_LABEL_MAGIC}")
    if len(lbuf) != 8 + n_lab:
        raise IdxTruncatedError(f"{labels_path}: expected {8 + n_lab} bytes, got {len(lbuf)}")
    if n_img != n_lab:
        raise IdxCountMismatchError(f"{n_img} images vs {n_lab} labels")
    images = np.frombuffer(ibuf, dtype=np.uint8, offset=16).reshape(n_img, h, w)
    labels = np.frombuffer(lbuf, dtype=np.uint8, offset=8).astype(np.int64)
    n_classes = int(labels.max()) + 1 if n_lab else 0
    return RawDataset(images.astype(np.float64) / 255.0, labels, n_classes)


def write_idx(images_path, labels_path, images_u8, labels):
    """Serialize uint8 images/labels as a standard IDX pair."""
    images_u8 = np.ascontiguousarray(images_u8, dtype=np.uint8)
    n, h, w = images_u8.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        fh.write(images_u8.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        fh.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def _check_palette(palette, n_classes):
    palette = np.asarray(palette, dtype=np.float64)
    if palette.shape != (n_classes, 3):
        raise ValueError(f"palette must be ({n_classes}, 3), got {palette.shape}")
    for i in range(len(palette)):
        for j in range(i + 1, len(palette)):
            if np.array_equal(palette[i], palette[j]):
                raise ValueError(f"palette entries {i} and {j} collide")
    return palette


def _draw_bias(labels, rho, n_classes, rng):
    """Aligned with probability rho, else uniform over the other classes.

    Consumes a fixed number of draws regardless of rho, so streams stay
    comparable across severities.
    """
    n = labels.shape[0]
    aligned = rng.random(n) < rho
    offsets = rng.integers(1, n_classes, size=n) if n_classes > 1 else np.zeros(n, np.int64)
    bias = np.where(aligned, labels, (labels + offsets) % n_classes)
    return bias.astype(np.int64), aligned


def _tint(intensity, colors):
    """(N,H,W) grayscale x (N,3) color -> flat (N, 3*H*W), channels first."""
    planes = intensity[:, None, :, :] * colors[:, :, None, None]
    return planes.reshape(intensity.shape[0], -1)


def colorize(raw, rho, palette=None, seed=0, split="train"):
    """Dye each digit with its class color w.p. rho, another color otherwise.

    The grayscale intensity modulates the chosen tint per channel, so the
    background stays black and stroke shape survives in every channel.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    palette = _check_palette(DEFAULT_PALETTE[:raw.n_classes] if palette is None else palette,
                             raw.n_classes)
    rng = np.random.default_rng(seed)
    bias, aligned = _draw_bias(raw.labels, rho, raw.n_classes, rng)
    X = _tint(raw.images, palette[bias])
    h, w = raw.images.shape[1:]
    return BiasedDataset(X, raw.labels.copy(), bias[:, None], aligned[:, None],
                         raw.n_classes, (rho,), split, (3, h, w), palette)


def multi_colorize(raw, rho_left, rho_right, seed=0, palette=None, split="train"):
    """Two independent color attributes: left and right canvas halves.

    Each half is dyed by its own attribute draw; the two draws use separate
    child seeds, so the left half depends only on (seed, rho_left).
    """
    for rho in (rho_left, rho_right):
        if not 0.0 <= rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
    palette = _check_palette(DEFAULT_PALETTE[:raw.n_classes] if palette is None else palette,
                             raw.n_classes)
    rng_l = np.random.default_rng(derive_seed(seed, "left"))
    rng_r = np.random.default_rng(derive_seed(seed, "right"))
    bias_l, al_l = _draw_bias(raw.labels, rho_left, raw.n_classes, rng_l)
    bias_r, al_r = _draw_bias(raw.labels, rho_right, raw.n_classes, rng_r)

    n, h, w = raw.images.shape
    half = w // 2
    planes = np.empty((n, 3, h, w))
    planes[:, :, :, :half] = (raw.images[:, None, :, :half]
                              * palette[bias_l][:, :, None, None])
    planes[:, :, :, half:] = (raw.images[:, None, :, half:]
                              * palette[bias_r][:, :, None, None])
    X = planes.reshape(n, -1)
    bias = np.stack([bias_l, bias_r], axis=1)
    aligned = np.stack([al_l, al_r], axis=1)
    return BiasedDataset(X, raw.labels.copy(), bias, aligned, raw.n_classes,
                         (rho_left, rho_right), split, (3, h, w), palette)


def synth_blobs(n, signal_dim, rho, n_classes, seed=0, split="train",
                signal_scale=1.3, noise_scale=1.0):
    """Gaussian class blobs squashed to [0,1] plus a one-hot bias block.

    The block equals the class w.p. rho, else a uniformly different class;
    it is a perfectly predictive shortcut when aligned, while the signal
    dims need actual decision boundaries. Fast stand-in for image runs.
    """
    if n < n_classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, signal_scale, size=(n_classes, signal_dim))
    y = rng.integers(0, n_classes, size=n)
    signal = means[y] + rng.normal(0.0, noise_scale, size=(n, signal_dim))
    signal = 1.0 / (1.0 + np.exp(-signal))  # bound into (0,1)
    bias, aligned = _draw_bias(y, rho, n_classes, rng)
    block = np.zeros((n, n_classes))
    block[np.arange(n), bias] = 1.0
    X = np.concatenate([signal, block], axis=1)
    return BiasedDataset(X, y.astype(np.int64), bias[:, None], aligned[:, None],
                         n_classes, (rho,), split, None, None)


def make_unbiased_test(raw_test, palette=None, seed=0, attributes=1):
    """Test split with color independent of the target (uniform over C).

    With attributes=2 both halves get independent uniform draws.
    """
    palette = _check_palette(DEFAULT_PALETTE[:raw_test.n_classes] if palette is None else palette,
                             raw_test.n_classes)
    C = raw_test.n_classes
    rho_uniform = 1.0 / C
    if attributes == 1:
        rng = np.random.default_rng(seed)
        bias = rng.integers(0, C, size=raw_test.n).astype(np.int64)
        X = _tint(raw_test.images, palette[bias])
        aligned = bias == raw_test.labels
        h, w = raw_test.images.shape[1:]
        return BiasedDataset(X, raw_test.labels.copy(), bias[:, None],
                             aligned[:, None], C, (rho_uniform,), "test",
                             (3, h, w), palette)
    if attributes == 2:
        rng_l = np.random.default_rng(derive_seed(seed, "left"))
        rng_r = np.random.default_rng(derive_seed(seed, "right"))
        bias_l = rng_l.integers(0, C, size=raw_test.n).astype(np.int64)
        bias_r = rng_r.integers(0, C, size=raw_test.n).astype(np.int64)
        n, h, w = raw_test.images.shape
        half = w // 2
        planes = np.empty((n, 3, h, w))
        planes[:, :, :, :half] = (raw_test.images[:, None, :, :half]
                                  * palette[bias_l][:, :, None, None])
        planes[:, :, :, half:] = (raw_test.images[:, None, :, half:]
                                  * palette[bias_r][:, :, None, None])
        bias = np.stack([bias_l, bias_r], axis=1)
        aligned = bias == raw_test.labels[:, None]
        return BiasedDataset(planes.reshape(n, -1), raw_test.labels.copy(),
                             bias, aligned, C, (rho_uniform, rho_uniform),
                             "test", (3, h, w), palette)
    raise ValueError("attributes must be 1 or 2")


def balance_classes(raw, seed=0):
    """Subsample a RawDataset so every class has the minimum class count."""
    rng = np.random.default_rng(seed)
    counts = np.bincount(raw.labels, minlength=raw.n_classes)
    m = int(counts.min())
    keep = []
    for c in range(raw.n_classes):
        idx = np.flatnonzero(raw.labels == c)
        keep.append(rng.permutation(idx)[:m])
    keep = np.sort(np.concatenate(keep))
    return raw.subset(keep)


# ---------------------------------------------------------------------------
# Procedural digit glyphs. Self-contained stand-in for handwritten digits:
# dot-matrix bitmaps warped by a random affine map. Every glyph is designed
# to be rotationally asymmetric so that 4-way rotation prediction is a
# learnable task (no digit looks like another digit, or itself, rotated).

_GLYPHS = {
    0: (".###.",
        "#...#",
        "#...#",
        "#...#",
        "#...#",
        "##..#",
        ".###."),
    1: ("..#..",
        ".##..",
        "#.#..",
        "..#..",
        "..#..",
        "..#..",
        ".####"),
    2: (".###.",
        "#...#",
        "....#",
        "...#.",
        "..#..",
        ".#...",
        "#####"),
    3: ("####.",
        "....#",
        "...#.",
        "..##.",
        "....#",
        "#...#",
        ".###."),
    4: ("...#.",
        "..##.",
        ".#.#.",
        "#..#.",
        "#####",
        "...#.",
        "...#."),
    5: ("#####",
        "#....",
        "####.",
        "....#",
        "....#",
        "#...#",
        ".###."),
    6: ("..##.",
        ".#...",
        "#....",
        "####.",
        "#...#",
        "#...#",
        ".###."),
    7: ("#####",
        "....#",
        "...#.",
        "...#.",
        "..#..",
        "..#..",
        "..#.."),
    8: (".###.",
        "#...#",
        "#...#",
        ".###.",
        "#...#",
        "#...#",
        "####."),
    9: (".###.",
        "#...#",
        "#...#",
        ".####",
        "....#",
        "....#",
        "...#."),
}


def glyph_bitmap(digit):
    """The raw 7x5 dot-matrix bitmap for a digit, as float 0/1."""
    rows = _GLYPHS[digit]
    return np.array([[1.0 if ch == "#" else 0.0 for ch in row] for row in rows])


def _box_blur(img, k=3):
    """Separable k x k mean filter with zero padding."""
    kernel = np.ones(k) / k
    out = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 1, img)
    return np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="same"), 0, out)


_BASE_CACHE = {}


def _glyph_base(digit, up=6):
    """Upsampled, blurred glyph used as the continuous source image."""
    if (digit, up) not in _BASE_CACHE:
        hi = np.kron(glyph_bitmap(digit), np.ones((up, up)))
        _BASE_CACHE[(digit, up)] = _box_blur(_box_blur(hi, 5), 3)
    return _BASE_CACHE[(digit, up)]


def _bilinear(img, rows, cols):
    """Sample img at fractional coordinates; outside the canvas reads 0."""
    h, w = img.shape
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    fr = rows - r0
    fc = cols - c0

    def at(r, c):
        valid = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        out = np.zeros_like(rows)
        out[valid] = img[r[valid], c[valid]]
        return out

    return ((1 - fr) * (1 - fc) * at(r0, c0) + (1 - fr) * fc * at(r0, c0 + 1)
            + fr * (1 - fc) * at(r0 + 1, c0) + fr * fc * at(r0 + 1, c0 + 1))


def glyph_digits(n, seed=0, size=28, jitter=1.0):
    """n procedural digit images (uint8, size x size) with balanced labels.

    Each image is the digit's bitmap under a random rotation (+-12 deg),
    anisotropic scale, shear, translation and amplitude, plus stroke noise.
    `jitter` scales all geometric distortion.
    """
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 10).astype(np.int64)
    out = np.zeros((n, size, size), dtype=np.uint8)

    up = 6
    grid = np.stack(np.meshgrid(np.arange(size), np.arange(size), indexing="ij"),
                    axis=-1).reshape(-1, 2).astype(np.float64)
    center = (size - 1) / 2.0

    for i in range(n):
        base = _glyph_base(int(labels[i]), up)
        bh, bw = base.shape
        ang = np.deg2rad(rng.uniform(-12, 12) * jitter)
        sy = 1.0 + rng.uniform(-0.15, 0.15) * jitter
        sx = 1.0 + rng.uniform(-0.15, 0.15) * jitter
        shear = rng.uniform(-0.18, 0.18) * jitter
        ty = rng.uniform(-2.0, 2.0) * jitter
        tx = rng.uniform(-2.0, 2.0) * jitter
        amp = rng.uniform(0.7, 1.0)

        # output pixel -> source coordinate (inverse map of the affine)
        rel = grid - center
        rel = rel - np.array([ty, tx])
        cos, sin = np.cos(-ang), np.sin(-ang)
        rr = cos * rel[:, 0] - sin * rel[:, 1]
        cc = sin * rel[:, 0] + cos * rel[:, 1]
        cc = cc - shear * rr
        rr = rr / (sy * 0.78)
        cc = cc / (sx * 0.78)
        # map the 20x20 target box onto the base canvas
        src_r = rr * (bh / (size - 8)) + (bh - 1) / 2.0
        src_c = cc * (bw / (size - 8)) + (bw - 1) / 2.0

        vals = _bilinear(base, src_r, src_c).reshape(size, size)
        vals = np.clip(vals * 1.6, 0.0, 1.0) * amp
        mask = vals > 0.05
        vals = vals + rng.normal(0.0, 0.03, size=vals.shape) * mask
        out[i] = (np.clip(vals, 0.0, 1.0) * 255).astype(np.uint8)
    return out, labels


def glyph_raw(n, seed=0, jitter=1.0):
    """RawDataset of procedural glyphs (already scaled to [0,1])."""
    images, labels = glyph_digits(n, seed, jitter=jitter)
    return RawDataset(images.astype(np.float64) / 255.0, labels, 10)


# ---------------------------------------------------------------------------
# Cache files: one .npz of tensors plus a small text manifest with a sha256
# checksum so a stale or corrupted cache is detected instead of trusted.

def _dataset_checksum(ds):
    h = hashlib.sha256()
    for arr in (ds.X, ds.y, ds.bias, ds.aligned.astype(np.uint8)):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def save_dataset(prefix, ds, seed=None):
    """Write <prefix>.npz tensors and <prefix>.manifest metadata."""
    prefix = str(prefix)
    np.savez(prefix + ".npz", X=ds.X, y=ds.y, bias=ds.bias,
             aligned=ds.aligned, palette=(ds.palette if ds.palette is not None
                                          else np.zeros((0, 3))))
    cp = configparser.ConfigParser()
    cp["dataset"] = {
        "n": str(ds.n),
        "n_classes": str(ds.n_classes),
        "dim": str(ds.X.shape[1]),
        "attributes": str(ds.n_attributes),
        "rho": ",".join(repr(r) for r in ds.rho),
        "split": ds.split,
        "seed": "" if seed is None else str(seed),
        "image_shape": ("" if ds.image_shape is None
                        else ",".join(str(v) for v in ds.image_shape)),
        "palette": ("" if ds.palette is None
                    else ";".join(",".join(repr(v) for v in row) for row in ds.palette)),
        "checksum": _dataset_checksum(ds),
    }
    with open(prefix + ".manifest", "w") as fh:
        cp.write(fh)


def load_dataset(prefix):
    """Reload a cached dataset, verifying the manifest checksum."""
    prefix = str(prefix)
    cp = configparser.ConfigParser()
    if not cp.read(prefix + ".manifest"):
        raise FileNotFoundError(prefix + ".manifest")
    meta = cp["dataset"]
    with np.load(prefix + ".npz") as z:
        palette = z["palette"] if z["palette"].size else None
        shape_txt = meta["image_shape"]
        ds = BiasedDataset(
            z["X"], z["y"], z["bias"], z["aligned"].astype(bool),
            int(meta["n_classes"]),
            tuple(float(r) for r in meta["rho"].split(",")),
            meta["split"],
            tuple(int(v) for v in shape_txt.split(",")) if shape_txt else None,
            palette)
    if _dataset_checksum(ds) != meta["checksum"]:
        raise DatasetCacheError(f"{prefix}.npz does not match its manifest checksum")
    return ds
