"""On-disk tensor format, synthetic ultrasound-like data, sampling and splits.

The synthetic generator is a desk-scale stand-in for a real cardiac
ultrasound corpus: smoothly deforming bright-boundary ellipses inside a
cone-shaped field of view, corrupted by multiplicative speckle, with exact
per-frame class masks.  Real data can be converted externally and dropped
into the same directory layout.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VTNS"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i4")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int32"): 2}


class TensorIOError(Exception):
    """Base class for tensor-file format errors."""


class BadMagicError(TensorIOError):
    pass


class DtypeError(TensorIOError):
    pass


class TruncatedError(TensorIOError):
    pass


def write_tensor(path, array: np.ndarray) -> None:
    """Write `array` in the VTNS format (little-endian, bit-exact round trip)."""
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _DTYPE_CODES:
        raise DtypeError(f"unsupported dtype {arr.dtype}; use f32, f64 or i32")
    if arr.ndim > 255:
        raise TensorIOError("too many dimensions for the format (max 255)")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BBBB", 1, _DTYPE_CODES[arr.dtype], arr.ndim, 0))
        for d in arr.shape:
            fh.write(struct.pack("<Q", d))
        fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    return tensor_from_bytes(data)


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 8:
        raise TruncatedError("header truncated")
    version, dtype_code, ndim, _reserved = struct.unpack("<BBBB", data[4:8])
    if version != 1:
        raise TensorIOError(f"unsupported format version {version}")
    if dtype_code not in _DTYPES:
        raise DtypeError(f"unknown dtype code {dtype_code}")
    header_end = 8 + 8 * ndim
    if len(data) < header_end:
        raise TruncatedError("dimension list truncated")
    dims = struct.unpack(f"<{ndim}Q", data[8:header_end]) if ndim else ()
    dtype = _DTYPES[dtype_code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    expected = count * dtype.itemsize
    payload = data[header_end:]
    if len(payload) != expected:
        raise TruncatedError(
            f"payload is {len(payload)} bytes, header declares {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def tensor_to_bytes(array: np.ndarray) -> bytes:
    import io

    arr = np.ascontiguousarray(array)
    if arr.dtype not in _DTYPE_CODES:
        raise DtypeError(f"unsupported dtype {arr.dtype}; use f32, f64 or i32")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<BBBB", 1, _DTYPE_CODES[arr.dtype], arr.ndim, 0))
    for d in arr.shape:
        buf.write(struct.pack("<Q", d))
    buf.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    return buf.getvalue()


@dataclass
class VideoClip:
    frames: np.ndarray  # f32 [T, H, W], values in [0, 1]
    source_id: str = ""
    start_frame: int = 0

    @property
    def shape(self):
        return self.frames.shape


@dataclass
class SegmentationMask:
    labels: np.ndarray  # i32 [T, H, W]
    num_classes: int = 3  # foreground classes; background = 0


@dataclass
class PhantomParams:
    frames: int = 24
    height: int = 32
    width: int = 32
    num_structures: int = 3
    motion_amplitude: float = 0.12  # fraction of base radius
    speckle: float = 0.25
    patch_check: tuple[int, int] | None = None  # (patch_h, patch_w) divisibility guard


def _structure_layout(n: int, rng: np.random.Generator):
    """Centres/radii in unit coordinates, laid out inside the cone."""
    anchors = [(0.42, 0.36), (0.55, 0.64), (0.74, 0.50), (0.35, 0.60), (0.68, 0.30)]
    out = []
    for k in range(n):
        cy, cx = anchors[k % len(anchors)]
        cy += rng.uniform(-0.03, 0.03)
        cx += rng.uniform(-0.03, 0.03)
        ry = rng.uniform(0.10, 0.14)
        rx = rng.uniform(0.10, 0.14)
        out.append((cy, cx, ry, rx, rng.uniform(0, 2 * math.pi)))
    return out


def generate_synthetic_video(seed: int, params: PhantomParams) -> tuple[VideoClip, SegmentationMask]:
    """Deterministic phantom video: deforming ellipses in a cone, speckled.

    Structure k (1-based class label) has a constant dark interior and a
    bright boundary ring; later structures do not overwrite earlier labels.
    """
    if params.patch_check is not None:
        ph, pw = params.patch_check
        if params.height % ph or params.width % pw:
            raise ValueError(
                f"resolution {params.height}x{params.width} not divisible by "
                f"patch size {ph}x{pw}"
            )
    rng = np.random.default_rng(seed)
    T, H, W = params.frames, params.height, params.width
    ys = (np.arange(H, dtype=np.float64) + 0.5) / H
    xs = (np.arange(W, dtype=np.float64) + 0.5) / W
    yy, xx = np.meshgrid(ys, xs, indexing="ij")

    # Cone FOV: apex at top centre, half-angle wide enough to hold the phantoms.
    half_angle = math.radians(38.0)
    in_cone = (np.abs(xx - 0.5) <= np.tan(half_angle) * (yy + 0.06)) & (yy <= 0.97)

    structures = _structure_layout(params.num_structures, rng)
    interior_vals = [0.12, 0.18, 0.10, 0.16, 0.14]
    ring_width = 1.6 / max(H, W)

    frames = np.zeros((T, H, W), dtype=np.float32)
    labels = np.zeros((T, H, W), dtype=np.int32)
    for f in range(T):
        phase = 2 * math.pi * f / T
        img = np.where(in_cone, 0.35, 0.0)
        lab = np.zeros((H, W), dtype=np.int32)
        for k, (cy, cx, ry, rx, ph0) in enumerate(structures):
            a = 1.0 + params.motion_amplitude * math.sin(phase + ph0)
            b = 1.0 + params.motion_amplitude * math.cos(phase + ph0)
            d = np.sqrt(((yy - cy) / (ry * a)) ** 2 + ((xx - cx) / (rx * b)) ** 2)
            inside = d <= 1.0
            ring = (d > 1.0) & (d <= 1.0 + ring_width / min(ry * a, rx * b))
            unclaimed = lab == 0
            img = np.where(inside & unclaimed, interior_vals[k % len(interior_vals)], img)
            img = np.where(ring & unclaimed & in_cone, 0.9, img)
            lab = np.where(inside & unclaimed, k + 1, lab)
        if params.speckle > 0:
            g = rng.standard_normal((H, W))
            img = img * (1.0 + params.speckle * g)
        img = np.clip(img, 0.0, 1.0) * in_cone
        frames[f] = img.astype(np.float32)
        labels[f] = lab * in_cone
    clip = VideoClip(frames=frames, source_id=f"phantom{seed:05d}")
    return clip, SegmentationMask(labels=labels, num_classes=params.num_structures)


def sample_clip(video: np.ndarray, frame_step: int, T: int, rng: np.random.Generator,
                source_id: str = "") -> VideoClip:
    """T frames at stride frame_step from a random valid start."""
    length = video.shape[0]
    needed = (T - 1) * frame_step + 1
    if length < needed:
        raise ValueError(
            f"video has {length} frames, need at least {needed} "
            f"for T={T}, frame_step={frame_step}"
        )
    start = int(rng.integers(0, length - needed + 1))
    return VideoClip(
        frames=video[start : start + needed : frame_step].copy(),
        source_id=source_id,
        start_frame=start,
    )


@dataclass
class DatasetSplit:
    train_ids: list[str] = field(default_factory=list)
    val_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)
    fraction: int = 100
    seed: int = 0


def subsample_train(train_ids: list[str], fraction: int, seed: int) -> list[str]:
    """Seeded shuffle then prefix; subsets are nested across fractions."""
    if not train_ids:
        raise ValueError("empty train set")
    if not 0 < fraction <= 100:
        raise ValueError(f"fraction must be in (0, 100], got {fraction}")
    order = sorted(train_ids)
    rng = np.random.default_rng(seed)
    rng.shuffle(order)
    k = math.ceil(len(order) * fraction / 100)
    return sorted(order[:k])


# Dataset directory layout: <root>/<split>/<video_id>/frames.vtns (+ labels.vtns)

def write_video_dir(root, split: str, video_id: str,
                    frames: np.ndarray, labels: np.ndarray | None = None) -> Path:
    d = Path(root) / split / video_id
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "frames.vtns", frames.astype(np.float32))
    if labels is not None:
        write_tensor(d / "labels.vtns", labels.astype(np.int32))
    return d


def list_videos(root, split: str) -> list[str]:
    d = Path(root) / split
    if not d.is_dir():
        return []
    return sorted(p.name for p in d.iterdir() if (p / "frames.vtns").is_file())


def load_video(root, split: str, video_id: str):
    d = Path(root) / split / video_id
    frames = read_tensor(d / "frames.vtns")
    labels_path = d / "labels.vtns"
    labels = read_tensor(labels_path) if labels_path.is_file() else None
    return frames, labels


def generate_dataset(root, n_videos: int, params: PhantomParams, seed: int,
                     splits=(0.5, 0.25, 0.25)) -> dict:
    """Emit a full synthetic dataset directory plus manifest.json."""
    root = Path(root)
    names = ["train", "val", "test"]
    n_train = max(1, round(n_videos * splits[0]))
    n_val = max(1, round(n_videos * splits[1]))
    n_test = max(1, n_videos - n_train - n_val)
    counts = dict(zip(names, (n_train, n_val, n_test)))
    manifest = {"seed": seed, "params": params.__dict__.copy(), "splits": {}}
    manifest["params"].pop("patch_check", None)
    vid_seed = seed
    for split, count in counts.items():
        ids = []
        for _ in range(count):
            clip, mask = generate_synthetic_video(vid_seed, params)
            vid = f"v{vid_seed:05d}"
            write_video_dir(root, split, vid, clip.frames, mask.labels)
            ids.append(vid)
            vid_seed += 1
        manifest["splits"][split] = ids
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest
