"""Dataset preparation and the MARF raster format.

MARF layout (little-endian)::

    b"MARF" | version u16 (=1) | dtype u8 (0 = float32) | rank u8 | dims u32 * rank | payload

The builder writes::

    root/train_free/<id>_p<k>.marf                  clean images only
    root/train_corrupt/<id>_p<k>.marf               corrupted images only
    root/val/<id>_p<k>.clean.marf, .corrupt.marf    paired
    root/test/...                                   paired
    root/manifest.json
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .kspace import MotionSpec, corrupted_fraction, simulate_motion

MAGIC = b"MARF"
VERSION = 1
DTYPES = {0: np.dtype("<f4")}
MANIFEST_VERSION = 1
EMPTY_THRESHOLD = 0.02


class MarfError(ValueError):
    """Malformed or unsupported MARF file."""


# ---------------------------------------------------------------------------
# MARF I/O
# ---------------------------------------------------------------------------


def encode_marf(image: np.ndarray) -> bytes:
    arr = np.asarray(image)
    if arr.ndim < 1 or arr.ndim > 255:
        raise MarfError(f"cannot store a rank-{arr.ndim} array")
    if any(d == 0 for d in arr.shape):
        raise MarfError(f"zero-length dimension in shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise MarfError("refusing to write non-finite values")
    header = MAGIC + struct.pack("<HBB", VERSION, 0, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_marf(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise MarfError("truncated header")
    if buf[:4] != MAGIC:
        raise MarfError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, dtype_code, rank = struct.unpack_from("<HBB", buf, 4)
    if version != VERSION:
        raise MarfError(f"unsupported version {version}")
    if dtype_code not in DTYPES:
        raise MarfError(f"unknown dtype code {dtype_code}")
    if rank == 0:
        raise MarfError("rank 0 is not allowed")
    if len(buf) < 8 + 4 * rank:
        raise MarfError("truncated dimension table")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    if any(d == 0 for d in dims):
        raise MarfError(f"zero dimension in {dims}")
    dtype = DTYPES[dtype_code]
    offset = 8 + 4 * rank
    expected = dtype.itemsize * int(np.prod(dims))
    if len(buf) - offset != expected:
        raise MarfError(f"payload is {len(buf) - offset} bytes, expected {expected}")
    return np.frombuffer(buf, dtype=dtype, offset=offset).reshape(dims).astype(np.float32)


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_marf(path, image: np.ndarray) -> None:
    _atomic_write(Path(path), encode_marf(image))


def read_marf(path) -> np.ndarray:
    return decode_marf(Path(path).read_bytes())


def export_png(path, image: np.ndarray) -> None:
    """8-bit preview for people; lossy, never read back by the pipeline."""
    from PIL import Image

    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(path)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def normalize(image: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant image maps to zeros."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot normalize an empty image")
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def filter_empty(image: np.ndarray, threshold: float = EMPTY_THRESHOLD) -> bool:
    """True if the (normalized) image has enough signal to keep."""
    return float(np.mean(image)) > threshold


def patch_coordinates(
    shape: Tuple[int, int], patch: int = 128, strategy: str = "grid", count: int = 1, seed=None
) -> List[Tuple[int, int]]:
    h, w = shape
    if h < patch or w < patch:
        raise ValueError(f"image {h}x{w} is smaller than the {patch}x{patch} patch")
    if strategy == "grid":
        return [(r, c) for r in range(0, h - patch + 1, patch) for c in range(0, w - patch + 1, patch)]
    if strategy == "random":
        rng = np.random.default_rng(seed)
        rows = rng.integers(0, h - patch + 1, size=count)
        cols = rng.integers(0, w - patch + 1, size=count)
        return [(int(r), int(c)) for r, c in zip(rows, cols)]
    raise ValueError(f"unknown crop strategy {strategy!r}")


def crop_patches(
    image: np.ndarray, patch: int = 128, strategy: str = "grid", count: int = 1, seed=None
) -> List[np.ndarray]:
    """Non-overlapping grid tiles (partial edges dropped) or seeded random crops.

    Use :func:`patch_coordinates` once and slice both images of a pair to keep
    them aligned.
    """
    image = np.asarray(image)
    coords = patch_coordinates(image.shape, patch, strategy, count, seed)
    return [image[r : r + patch, c : c + patch] for r, c in coords]


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """In-memory view of a built dataset; arrays are [N, H, W] float32."""

    train_free: np.ndarray
    train_corrupt: np.ndarray
    val_clean: np.ndarray
    val_corrupt: np.ndarray
    test_clean: np.ndarray
    test_corrupt: np.ndarray
    manifest: dict = field(default_factory=dict)

    def counts(self) -> Dict[str, int]:
        return {
            "train_free": len(self.train_free),
            "train_corrupt": len(self.train_corrupt),
            "val": len(self.val_clean),
            "test": len(self.test_clean),
        }


def split_counts(n: int, split: Sequence[float]) -> Tuple[int, int, int]:
    if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9 or min(split) < 0:
        raise ValueError(f"split must be three nonnegative fractions summing to 1, got {split}")
    n_val = int(round(split[1] * n))
    n_test = int(round(split[2] * n))
    n_train = n - n_val - n_test
    if n_train < 2 or n_val < 1 or n_test < 1:
        raise ValueError(
            f"{n} images give train/val/test = {n_train}/{n_val}/{n_test}; "
            "need >= 2 training images and a nonempty val and test split"
        )
    return n_train, n_val, n_test


def build_dataset(
    clean_images: Sequence[np.ndarray],
    spec: MotionSpec,
    out_dir=None,
    split: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    patch: int = 128,
    empty_threshold: float = EMPTY_THRESHOLD,
) -> Dataset:
    """Simulate corruption, split by image, and (optionally) write the tree.

    Train images are split into two disjoint halves: one contributes only its
    clean patches, the other only its corrupted patches.
    """
    n = len(clean_images)
    n_train, n_val, n_test = split_counts(n, split)
    ss = np.random.SeedSequence(seed)
    perm_seed, sim_seed = ss.spawn(2)
    order = np.random.default_rng(perm_seed).permutation(n)
    sim_seeds = sim_seed.generate_state(n)
    ids = [f"img{i:04d}" for i in range(n)]

    assignment = {
        "train_free": [int(i) for i in order[: n_train // 2]],
        "train_corrupt": [int(i) for i in order[n_train // 2 : n_train]],
        "val": [int(i) for i in order[n_train : n_train + n_val]],
        "test": [int(i) for i in order[n_train + n_val :]],
    }

    pools: Dict[str, List[np.ndarray]] = {k: [] for k in ("train_free", "train_corrupt")}
    pairs: Dict[str, Tuple[List[np.ndarray], List[np.ndarray]]] = {"val": ([], []), "test": ([], [])}
    files: List[Tuple[str, np.ndarray]] = []
    fractions = {}

    for group, members in assignment.items():
        for idx in sorted(members):
            clean = normalize(clean_images[idx])
            corrupt, mask = simulate_motion(clean, spec, seed=int(sim_seeds[idx]))
            fractions[ids[idx]] = corrupted_fraction(mask)
            coords = patch_coordinates(clean.shape, patch)
            for k, (r, c) in enumerate(coords):
                pc = clean[r : r + patch, c : c + patch].astype(np.float32)
                pa = corrupt[r : r + patch, c : c + patch].astype(np.float32)
                if not filter_empty(pc, empty_threshold):
                    continue
                stem = f"{ids[idx]}_p{k}"
                if group == "train_free":
                    pools[group].append(pc)
                    files.append((f"train_free/{stem}.marf", pc))
                elif group == "train_corrupt":
                    pools[group].append(pa)
                    files.append((f"train_corrupt/{stem}.marf", pa))
                else:
                    pairs[group][0].append(pc)
                    pairs[group][1].append(pa)
                    files.append((f"{group}/{stem}.clean.marf", pc))
                    files.append((f"{group}/{stem}.corrupt.marf", pa))

    def stack(lst, shape):
        return np.stack(lst) if lst else np.zeros((0,) + shape, dtype=np.float32)

    shape = (patch, patch)
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "patch": patch,
        "split": list(split),
        "motion_spec": spec.to_dict(),
        "counts": {
            "images": n,
            "train_images": n_train,
            "train_free_images": len(assignment["train_free"]),
            "train_corrupt_images": len(assignment["train_corrupt"]),
            "val_images": n_val,
            "test_images": n_test,
            "train_free_patches": len(pools["train_free"]),
            "train_corrupt_patches": len(pools["train_corrupt"]),
            "val_patches": len(pairs["val"][0]),
            "test_patches": len(pairs["test"][0]),
        },
        "assignment": {k: [ids[i] for i in sorted(v)] for k, v in assignment.items()},
        "corrupted_fraction": fractions,
        "files": [],
    }

    if out_dir is not None:
        root = Path(out_dir)
        for rel, arr in files:
            write_marf(root / rel, arr)
            manifest["files"].append({"path": rel, "sha256": hashlib.sha256(encode_marf(arr)).hexdigest()})
        _atomic_write(root / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())

    return Dataset(
        train_free=stack(pools["train_free"], shape),
        train_corrupt=stack(pools["train_corrupt"], shape),
        val_clean=stack(pairs["val"][0], shape),
        val_corrupt=stack(pairs["val"][1], shape),
        test_clean=stack(pairs["test"][0], shape),
        test_corrupt=stack(pairs["test"][1], shape),
        manifest=manifest,
    )


def load_dataset(root) -> Dataset:
    """Read a tree written by :func:`build_dataset`, verifying file hashes."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    arrays: Dict[str, List[np.ndarray]] = {}
    for entry in manifest["files"]:
        path = root / entry["path"]
        payload = path.read_bytes()
        if hashlib.sha256(payload).hexdigest() != entry["sha256"]:
            raise MarfError(f"hash mismatch for {entry['path']}")
        rel = entry["path"]
        group = rel.split("/", 1)[0]
        if rel.endswith(".clean.marf"):
            key = f"{group}_clean"
        elif rel.endswith(".corrupt.marf"):
            key = f"{group}_corrupt"
        else:
            key = group
        arrays.setdefault(key, []).append(decode_marf(payload))
    patch = manifest["patch"]

    def get(key):
        lst = arrays.get(key, [])
        return np.stack(lst) if lst else np.zeros((0, patch, patch), dtype=np.float32)

    return Dataset(
        train_free=get("train_free"),
        train_corrupt=get("train_corrupt"),
        val_clean=get("val_clean"),
        val_corrupt=get("val_corrupt"),
        test_clean=get("test_clean"),
        test_corrupt=get("test_corrupt"),
        manifest=manifest,
    )
