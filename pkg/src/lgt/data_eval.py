"""Patch ingestion, PSNR, block-matching baselines, and the model table.

Patches live in "LGP1" pair files: a fixed little-endian header followed
by raw float64 patch payloads, bit-exact across write/read. Each patch
is conceptually a masked center region plus a buffer border; the error
metrics only ever look at the center, so content may flow in and out of
the buffer and block matching gets the same information the continuous
models do.
"""

from __future__ import annotations

import logging
import os
import re
import struct
from dataclasses import dataclass

import numpy as np

from .energy import EnergyConfig, PatchPair

__all__ = [
    "PairsFile",
    "center_mask",
    "read_pgm",
    "extract_pairs",
    "psnr",
    "mc_full_pixel",
    "mc_quarter_pixel",
    "MODEL_IDS",
    "MissingModelFile",
    "evaluate_models",
    "EvalRun",
]

log = logging.getLogger(__name__)

LGP1_MAGIC = b"LGP1"
PSNR_CAP_DB = 100.0

# The seven comparison models, in complexity order.
MODEL_IDS = (
    "no_transform",
    "mc_full_pixel",
    "mc_quarter_pixel",
    "cont_translation_no_sigma",
    "cont_translation_sigma",
    "translation_plus_learned",
    "learned_15",
)


class MissingModelFile(FileNotFoundError):
    """A model in the list needs a learned-operator file that was not given."""


def center_mask(patch_w, patch_h, mask_w, mask_h):
    """Boolean n-vector selecting the centered mask_h x mask_w region."""
    if mask_w > patch_w or mask_h > patch_h:
        raise ValueError("mask dims must not exceed patch dims")
    top = (patch_h - mask_h) // 2
    left = (patch_w - mask_w) // 2
    m = np.zeros((patch_h, patch_w), dtype=bool)
    m[top : top + mask_h, left : left + mask_w] = True
    return m.ravel()


@dataclass
class PairsFile:
    """In-memory form of an LGP1 pairs file.

    data has shape (count, 2, patch_h * patch_w) with data[i, 0] the
    source patch and data[i, 1] the target patch, both row-major float64.
    """

    patch_w: int
    patch_h: int
    mask_w: int
    mask_h: int
    data: np.ndarray
    version: int = 1

    def __post_init__(self):
        d = np.ascontiguousarray(self.data, dtype=np.float64)
        if d.ndim != 3 or d.shape[1] != 2 or d.shape[2] != self.patch_w * self.patch_h:
            raise ValueError(f"bad payload shape {d.shape}")
        if d.shape[0] < 1:
            raise ValueError("pairs file needs at least one pair")
        if self.mask_w > self.patch_w or self.mask_h > self.patch_h:
            raise ValueError("mask dims must not exceed patch dims")
        object.__setattr__(self, "data", d)

    @property
    def count(self):
        return self.data.shape[0]

    @property
    def n(self):
        return self.patch_w * self.patch_h

    def mask_vector(self):
        return center_mask(self.patch_w, self.patch_h, self.mask_w, self.mask_h)

    def pair(self, i):
        return PatchPair(self.data[i, 0], self.data[i, 1], id=i)

    def pairs(self):
        return [self.pair(i) for i in range(self.count)]

    def patch_2d(self, i, which):
        return self.data[i, which].reshape(self.patch_h, self.patch_w)

    def write(self, path):
        with open(path, "wb") as fh:
            fh.write(LGP1_MAGIC)
            fh.write(
                struct.pack(
                    "<IIIIII",
                    self.version,
                    self.count,
                    self.patch_w,
                    self.patch_h,
                    self.mask_w,
                    self.mask_h,
                )
            )
            fh.write(np.ascontiguousarray(self.data, dtype="<f8").tobytes())

    @classmethod
    def read(cls, path):
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != LGP1_MAGIC:
            raise ValueError(f"{path}: not an LGP1 pairs file")
        version, count, pw, ph, mw, mh = struct.unpack_from("<IIIIII", blob, 4)
        if version != 1:
            raise ValueError(f"{path}: unsupported LGP1 version {version}")
        expected = 28 + count * 2 * pw * ph * 8
        if len(blob) != expected:
            raise ValueError(f"{path}: truncated or oversized payload ({len(blob)} vs {expected})")
        data = np.frombuffer(blob, dtype="<f8", offset=28).reshape(count, 2, pw * ph)
        return cls(pw, ph, mw, mh, data.copy(), version=version)


# --- frame ingestion -------------------------------------------------------


def read_pgm(path):
    """8-bit binary PGM (P5) as a float array in [0, 1].

    Tolerates comment lines anywhere in the header. Only maxval <= 255
    single-byte data is accepted.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # Header: P5 <width> <height> <maxval>, with # comments allowed.
    tokens = []
    pos = 2
    while len(tokens) < 3:
        m = re.match(rb"(\s*(#[^\n]*\n)*\s*)(\d+)", blob[pos:])
        if not m:
            raise ValueError(f"{path}: malformed PGM header")
        tokens.append(int(m.group(3)))
        pos += m.end()
    if blob[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise ValueError(f"{path}: malformed PGM header")
    pos += 1
    width, height, maxval = tokens
    if not (0 < maxval <= 255):
        raise ValueError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    need = width * height
    raw = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    if raw.size != need:
        raise ValueError(f"{path}: truncated pixel data")
    return raw.reshape(height, width).astype(np.float64) / 255.0


def extract_pairs(frame_dir, patch_w, patch_h, mask_w, mask_h, count, rng, stride=None):
    """Sample patch pairs from consecutive frames in a directory.

    Frames are 8-bit PGM files taken in lexicographic (temporal) order.
    Offsets are drawn uniformly (reproducible under the rng's seed);
    passing a stride instead tiles offsets on a regular grid, cycling
    through frame pairs. Unreadable or mismatched frames are skipped
    with a log message; an empty directory is an error.
    """
    names = sorted(
        f for f in os.listdir(frame_dir) if f.lower().endswith(".pgm")
    )
    if not names:
        raise FileNotFoundError(f"{frame_dir}: no PGM frames found")
    frames = []
    shape = None
    for name in names:
        path = os.path.join(frame_dir, name)
        try:
            img = read_pgm(path)
        except (ValueError, OSError) as exc:
            log.warning("skipping bad frame %s: %s", name, exc)
            continue
        if shape is None:
            shape = img.shape
        if img.shape != shape:
            log.warning("skipping frame %s: shape %s != %s", name, img.shape, shape)
            continue
        frames.append(img)
    if len(frames) < 2:
        raise ValueError(f"{frame_dir}: need at least two readable frames of equal size")
    height, width = shape
    if patch_h > height or patch_w > width:
        raise ValueError("patch larger than frames")
    n_slots = len(frames) - 1
    max_r = height - patch_h
    max_c = width - patch_w

    picks = []
    if stride is None:
        for _ in range(count):
            t = int(rng.integers(n_slots))
            r = int(rng.integers(max_r + 1))
            c = int(rng.integers(max_c + 1))
            picks.append((t, r, c))
    else:
        grid = [
            (r, c)
            for r in range(0, max_r + 1, stride)
            for c in range(0, max_c + 1, stride)
        ]
        i = 0
        while len(picks) < count:
            t = (i // len(grid)) % n_slots
            r, c = grid[i % len(grid)]
            picks.append((t, r, c))
            i += 1

    data = np.zeros((count, 2, patch_h * patch_w))
    for i, (t, r, c) in enumerate(picks):
        data[i, 0] = frames[t][r : r + patch_h, c : c + patch_w].ravel()
        data[i, 1] = frames[t + 1][r : r + patch_h, c : c + patch_w].ravel()
    return PairsFile(patch_w, patch_h, mask_w, mask_h, data)


# --- metrics ---------------------------------------------------------------


def psnr(a, b, mask=None, peak=1.0):
    """Peak signal-to-noise ratio in dB over the masked pixels.

    10 log10(peak^2 / MSE), capped at 100 dB (zero MSE reports the cap).
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool).ravel()
        a = a[m]
        b = b[m]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))


def _mask_geometry(patch_h, patch_w, mask_h, mask_w, radius):
    top = (patch_h - mask_h) // 2
    left = (patch_w - mask_w) // 2
    if radius > min(top, left, patch_h - mask_h - top, patch_w - mask_w - left):
        raise ValueError("search radius exceeds the buffer width")
    return top, left


def mc_full_pixel(src, tgt, mask_w, mask_h, radius):
    """Whole-pixel motion compensation over the centered mask region.

    Exhaustively searches integer offsets (dx, dy) in [-radius, radius]^2
    for the source window best matching the target center; ties break
    toward the smallest offset norm, then scan order. Returns
    ((dx, dy), psnr_db).
    """
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    ph, pw = src.shape
    top, left = _mask_geometry(ph, pw, mask_h, mask_w, radius)
    center = tgt[top : top + mask_h, left : left + mask_w]
    best = None
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            win = src[top + dy : top + dy + mask_h, left + dx : left + dx + mask_w]
            mse = float(np.mean((win - center) ** 2))
            key = (mse, dx * dx + dy * dy)
            if best is None or key < best[0]:
                best = (key, (dx, dy), mse)
    _, (dx, dy), mse = best
    return (dx, dy), _mse_to_psnr(mse)


def _mse_to_psnr(mse, peak=1.0):
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))


def _bilinear_window(src, top_f, left_f, mask_h, mask_w):
    """mask_h x mask_w window of src at a fractional top-left corner."""
    t0 = int(np.floor(top_f))
    l0 = int(np.floor(left_f))
    fy = top_f - t0
    fx = left_f - l0
    a = src[t0 : t0 + mask_h, l0 : l0 + mask_w]
    if fy == 0.0 and fx == 0.0:
        return a
    b = src[t0 : t0 + mask_h, l0 + 1 : l0 + 1 + mask_w]
    c = src[t0 + 1 : t0 + 1 + mask_h, l0 : l0 + mask_w]
    d = src[t0 + 1 : t0 + 1 + mask_h, l0 + 1 : l0 + 1 + mask_w]
    return (
        (1 - fy) * (1 - fx) * a
        + (1 - fy) * fx * b
        + fy * (1 - fx) * c
        + fy * fx * d
    )


def mc_quarter_pixel(src, tgt, mask_w, mask_h, radius):
    """Quarter-pixel motion compensation with bilinear interpolation.

    Searches the quarter-pixel lattice in [-radius, radius]^2; since the
    integer lattice is a subset, its PSNR is never below mc_full_pixel's
    on the same pair. Returns ((dx, dy), psnr_db) with float offsets.
    """
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    ph, pw = src.shape
    top, left = _mask_geometry(ph, pw, mask_h, mask_w, radius)
    center = tgt[top : top + mask_h, left : left + mask_w]
    q = 4 * radius
    best = None
    for qy in range(-q, q + 1):
        for qx in range(-q, q + 1):
            dy = qy / 4.0
            dx = qx / 4.0
            win = _bilinear_window(src, top + dy, left + dx, mask_h, mask_w)
            mse = float(np.mean((win - center) ** 2))
            key = (mse, dx * dx + dy * dy)
            if best is None or key < best[0]:
                best = (key, (dx, dy), mse)
    (dx, dy), mse = best[1], best[2]
    return (dx, dy), _mse_to_psnr(mse)


# --- the model comparison table -------------------------------------------


@dataclass
class EvalRun:
    """Per-model PSNR distributions over one batch of pairs."""

    scores: dict  # model name -> (count,) psnr array

    def summary(self):
        """Rows of (model, mean, median, p10, p90)."""
        rows = []
        for name in MODEL_IDS:
            if name not in self.scores:
                continue
            v = self.scores[name]
            rows.append(
                (
                    name,
                    float(np.mean(v)),
                    float(np.median(v)),
                    float(np.percentile(v, 10)),
                    float(np.percentile(v, 90)),
                )
            )
        return rows

    def summary_csv(self):
        lines = ["model,mean_psnr,median_psnr,p10,p90"]
        for name, mean, med, p10, p90 in self.summary():
            lines.append(f"{name},{mean:.6f},{med:.6f},{p10:.6f},{p90:.6f}")
        return "\n".join(lines) + "\n"


def _translation_chain(pairs_file, boundary):
    from .affine import PatchGrid, affine_chain, spectral_translation_chain

    if boundary == "spectral":
        return spectral_translation_chain(pairs_file.patch_w, pairs_file.patch_h)
    grid = PatchGrid(pairs_file.patch_w, pairs_file.patch_h, boundary)
    return affine_chain(grid, kinds=("translate_h", "translate_v"))


def evaluate_models(pairs_file, models, model_files=None, config=None,
                    boundary="zero", radius=None, threads=1, spec=None):
    """Reconstruction PSNR of each requested model over a pairs file.

    The continuous-translation models run coefficient inference with the
    two whole-patch translation operators (sigma pinned to zero for the
    no-sigma variant, free otherwise); boundary picks their
    discretization ("zero" or "periodic" central differences, or
    "spectral" for the exact periodic generators used with synthetic
    periodic data). Learned-operator models load their chain from
    model_files[name] (an LGT1 path). Every model is scored with the
    same masked PSNR against the target center.
    """
    from .inference import InferencePolicy, infer_batch
    from .operator import apply_chain, load_chain

    model_files = model_files or {}
    mask = pairs_file.mask_vector()
    if radius is None:
        radius = min(
            (pairs_file.patch_w - pairs_file.mask_w) // 2,
            (pairs_file.patch_h - pairs_file.mask_h) // 2,
        )
    base_config = config or EnergyConfig()
    config = EnergyConfig(base_config.eta_n, base_config.eta_d, base_config.eta_sigma, mask)
    pairs = pairs_file.pairs()
    scores = {}
    for name in models:
        if name not in MODEL_IDS:
            raise ValueError(f"unknown model {name!r}")
        if name == "no_transform":
            vals = [
                psnr(pairs_file.data[i, 0], pairs_file.data[i, 1], mask)
                for i in range(pairs_file.count)
            ]
        elif name in ("mc_full_pixel", "mc_quarter_pixel"):
            fn = mc_full_pixel if name == "mc_full_pixel" else mc_quarter_pixel
            vals = []
            for i in range(pairs_file.count):
                _, score = fn(
                    pairs_file.patch_2d(i, 0),
                    pairs_file.patch_2d(i, 1),
                    pairs_file.mask_w,
                    pairs_file.mask_h,
                    radius,
                )
                vals.append(score)
        else:
            if name == "cont_translation_no_sigma":
                chain = _translation_chain(pairs_file, boundary)
                policy = InferencePolicy(blur_mode="frozen_zero")
            elif name == "cont_translation_sigma":
                chain = _translation_chain(pairs_file, boundary)
                policy = InferencePolicy(blur_mode="adaptive")
            else:
                path = model_files.get(name)
                if path is None:
                    raise MissingModelFile(f"model {name} needs an operator file")
                chain = load_chain(path, expect_n=pairs_file.n)
                policy = InferencePolicy(blur_mode="adaptive")
            results = infer_batch(chain, pairs, config, policy, spec, threads=threads)
            vals = []
            for i, res in enumerate(results):
                if res is None:
                    vals.append(0.0)
                    continue
                recon, _ = apply_chain(chain, res.coeffs, pairs[i].x_src)
                vals.append(psnr(recon, pairs[i].x_tgt, mask))
        scores[name] = np.asarray(vals)
    return EvalRun(scores=scores)
