"""Image I/O, the synthetic identity generator and dataset directory loading.

Datasets follow the Market-1501 layout: ``train/``, ``query/`` and
``gallery/`` folders of ``<pid>_c<cam>_<tag>.ppm`` files, pid ``-1`` marking
junk images.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

SPLITS = ("train", "query", "gallery")
TINT_STD = 0.06
FILENAME_RE = re.compile(r"^(-1|\d+)_c(\d+)_([A-Za-z0-9]+)\.ppm$")


class DatasetError(ValueError):
    pass


class PPMError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PPM codec


def encode_ppm(img: np.ndarray) -> bytes:
    """Encode an H×W×3 uint8 array (or 3×H×W floats in [0,1]) as binary PPM."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
        if arr.ndim == 3 and arr.shape[0] == 3:
            arr = arr.transpose(1, 2, 0)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise PPMError(f"expected H×W×3 image, got {arr.shape}")
    h, w, _ = arr.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def write_ppm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


def decode_ppm(raw: bytes) -> np.ndarray:
    """Parse binary PPM bytes into an H×W×3 uint8 array."""
    pos = 0
    tokens = []
    n = len(raw)
    while len(tokens) < 4:
        while pos < n and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos : pos + 1] == b"#":
            while pos < n and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PPMError("truncated PPM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise PPMError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PPMError("non-numeric PPM header field") from exc
    if w < 1 or h < 1 or maxval != 255:
        raise PPMError(f"unsupported PPM geometry {w}x{h} maxval {maxval}")
    if pos >= n or not raw[pos : pos + 1].isspace():
        raise PPMError("missing whitespace after PPM header")
    pos += 1
    need = w * h * 3
    if n - pos < need:
        raise PPMError(f"truncated pixel data: {n - pos} of {need} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def resize_bilinear(img: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a C×H×W array with half-pixel sample centres."""
    c, h, w = img.shape
    th, tw = target_hw
    if (th, tw) == (h, w):
        return img.copy()

    def axis(src: int, dst: int):
        pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
        pos = np.clip(pos, 0, src - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, (pos - lo)

    y0, y1, fy = axis(h, th)
    x0, x1, fx = axis(w, tw)
    fy = fy[:, None]
    fx = fx[None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(img.dtype)


def normalize(img: np.ndarray, mean: float = 0.5, std: float = 0.5) -> np.ndarray:
    return ((img - mean) / std).astype(img.dtype)


def decode_resize(path, target_hw, normalized: bool = True, mean: float = 0.5, std: float = 0.5) -> np.ndarray:
    """Read a PPM file as a 3×H×W float32 tensor resized to ``target_hw``."""
    img = read_ppm(path).transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)
    img = resize_bilinear(img, tuple(target_hw))
    return normalize(img, mean, std) if normalized else img


# ---------------------------------------------------------------------------
# dataset directories


@dataclass
class Sample:
    path: Path
    person_id: int
    camera_id: int
    split: str
    image: Optional[np.ndarray] = None


@dataclass
class DatasetManifest:
    root: Path
    splits: dict[str, list[Sample]]
    class_index: dict[int, int] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.class_index)

    def labels(self, split: str = "train") -> np.ndarray:
        return np.array([self.class_index[s.person_id] for s in self.splits[split]], dtype=np.int64)

    def images(self, split: str, target_hw, normalized: bool = True) -> np.ndarray:
        """Decode every image of a split into an N×3×H×W float32 array."""
        samples = self.splits[split]
        out = np.empty((len(samples), 3, *target_hw), dtype=np.float32)
        for i, s in enumerate(samples):
            out[i] = decode_resize(s.path, target_hw, normalized=normalized)
        return out


def parse_filename(name: str) -> tuple[int, int]:
    """``"0002_c1_000451.ppm"`` -> (2, 1)."""
    m = FILENAME_RE.match(name)
    if not m:
        raise DatasetError(f"unparseable filename {name!r}")
    return int(m.group(1)), int(m.group(2))


def load_dataset(root) -> DatasetManifest:
    root = Path(root)
    splits: dict[str, list[Sample]] = {}
    for split in SPLITS:
        folder = root / split
        if not folder.is_dir():
            raise DatasetError(f"missing split directory {folder}")
        samples = []
        for path in sorted(folder.iterdir()):
            if path.name.startswith("."):
                continue
            pid, cam = parse_filename(path.name)
            if split == "train" and pid < 0:
                continue
            samples.append(Sample(path, pid, cam, split))
        if not samples:
            raise DatasetError(f"split {split!r} is empty")
        splits[split] = samples
    raw_ids = sorted({s.person_id for s in splits["train"]})
    return DatasetManifest(root, splits, {pid: i for i, pid in enumerate(raw_ids)})


# ---------------------------------------------------------------------------
# synthetic identities


def _camera_tints(seed: int, n_cams: int, strength: float) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCA4E]))
    tints = np.empty((n_cams, 3, 3))
    for c in range(n_cams):
        tints[c] = np.eye(3) + rng.normal(0.0, strength, size=(3, 3))
    return tints


def identity_appearance(seed: int, pid: int) -> dict:
    """Palette and rectangle layout that define one synthetic person."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, pid]))
    n_rects = int(rng.integers(3, 6))
    palette = rng.uniform(0.0, 1.0, size=(n_rects + 1, 3))
    rects = []
    for _ in range(n_rects):
        rh, rw = rng.uniform(0.15, 0.5), rng.uniform(0.3, 0.9)
        top, left = rng.uniform(0.0, 1.0 - rh), rng.uniform(0.0, 1.0 - rw)
        rects.append((top, left, rh, rw))
    return {"background": palette[0], "colors": palette[1:], "rects": rects}


def render(appearance: dict, image_hw, shift=(0.0, 0.0)) -> np.ndarray:
    """Draw an appearance as a 3×H×W float image, translated by ``shift`` (fractions)."""
    h, w = image_hw
    img = np.empty((3, h, w))
    img[:] = appearance["background"][:, None, None]
    for color, (top, left, rh, rw) in zip(appearance["colors"], appearance["rects"]):
        y0 = int(round((top + shift[0]) * h))
        x0 = int(round((left + shift[1]) * w))
        y1 = y0 + max(1, int(round(rh * h)))
        x1 = x0 + max(1, int(round(rw * w)))
        img[:, max(y0, 0) : max(min(y1, h), 0), max(x0, 0) : max(min(x1, w), 0)] = color[:, None, None]
    return img


def synth_dataset(n_ids: int, per_id: int, n_cams: int, image_hw, seed: int, out_dir, tint: float = TINT_STD) -> dict:
    """Write a seeded synthetic re-ID dataset and its manifest.json.

    The first two thirds of the identities form the training split. Each
    remaining identity contributes one query image from camera 1 and its
    other images to the gallery under cameras 2..n_cams.
    """
    if n_ids < 2 or per_id < 2 or n_cams < 2:
        raise ValueError("need n_ids >= 2, per_id >= 2 and n_cams >= 2")
    h, w = (int(v) for v in image_hw)
    if h < 8 or w < 8:
        raise ValueError("image must be at least 8x8")
    out = Path(out_dir)
    for split in SPLITS:
        (out / split).mkdir(parents=True, exist_ok=True)
    tints = _camera_tints(seed, n_cams, tint)
    n_train = (2 * n_ids) // 3
    manifest = {
        "n_ids": n_ids, "per_id": per_id, "n_cams": n_cams, "image_hw": [h, w], "seed": seed,
        "splits": {s: [] for s in SPLITS},
    }
    tag = 0
    for pid in range(1, n_ids + 1):
        look = identity_appearance(seed, pid)
        for k in range(per_id):
            rng = np.random.default_rng(np.random.SeedSequence([seed, pid, k]))
            if pid <= n_train:
                split, cam = "train", k % n_cams + 1
            elif k == 0:
                split, cam = "query", 1
            else:
                split, cam = "gallery", (k - 1) % (n_cams - 1) + 2
            shift = rng.uniform(-0.1, 0.1, size=2)
            img = render(look, (h, w), shift)
            img = np.einsum("ij,jhw->ihw", tints[cam - 1], img)
            img = img * rng.uniform(0.8, 1.2) + rng.normal(0.0, 0.05, size=img.shape)
            tag += 1
            name = f"{pid:04d}_c{cam}_{tag:06d}.ppm"
            write_ppm(out / split / name, np.clip(img, 0.0, 1.0))
            manifest["splits"][split].append({"file": name, "person_id": pid, "camera_id": cam})
    for split in SPLITS:
        manifest["splits"][split].sort(key=lambda e: e["file"])
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest
