"""Dataset persistence (CSV + JSON sidecar), IDX image files, parameter
checkpoints and the colored classification data generators."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .scm import EnvDataset, ScmSetting

CSV_HEADER = "env,x1,x2,x3,x4,x5,x6"

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801

# per-environment probability that the color agrees with the (noisy) label
COLOR_AGREEMENT = {1: 0.9, 2: 0.8, 3: 0.1}
LABEL_FLIP_PROB = 0.25
BLOB_SCORE_SD = 0.4


# -- SCM dataset CSV -----------------------------------------------------------


def write_dataset_csv(path, envs: list[EnvDataset]) -> None:
    """One CSV for all environments; values use shortest round-trip reprs so
    a read-back is bit-exact. The setting metadata goes to a `.json` sidecar."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write(CSV_HEADER + "\n")
        for ds in envs:
            for row in ds.x:
                fh.write(str(ds.env_id) + "," + ",".join(repr(float(v)) for v in row))
                fh.write("\n")
    setting = next((ds.setting for ds in envs if ds.setting is not None), None)
    if setting is not None:
        sidecar_path(path).write_text(json.dumps(setting.meta_dict(), indent=1))


def sidecar_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".json")


def read_dataset_csv(path) -> list[EnvDataset]:
    """Partition a dataset CSV back into per-environment datasets.

    A missing sidecar leaves the metadata fields at their unknown defaults
    (target -1, no parents, setting None).
    """
    path = Path(path)
    env_col: list[int] = []
    rows: list[list[float]] = []
    with path.open() as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"{path}:1: expected header {CSV_HEADER!r}, got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            env_col.append(int(parts[0]))
            rows.append([float(v) for v in parts[1:]])
    envs = np.asarray(env_col)
    x = np.asarray(rows, dtype=np.float64)

    setting = None
    sidecar = sidecar_path(path)
    if sidecar.exists():
        setting = ScmSetting.from_meta(json.loads(sidecar.read_text()))

    out = []
    for env_id in sorted(set(env_col)):
        mask = envs == env_id
        out.append(
            EnvDataset(
                env_id=int(env_id),
                x=x[mask],
                target=setting.target if setting else -1,
                parents=setting.parents if setting else (),
                setting=setting,
            )
        )
    return out


# -- IDX binary files -----------------------------------------------------------


def read_idx(path) -> np.ndarray:
    """Parse a big-endian IDX file of unsigned bytes (images or labels)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated header, {len(raw)} bytes")
    (magic,) = struct.unpack(">i", raw[:4])
    if magic not in (IDX_MAGIC_IMAGES, IDX_MAGIC_LABELS):
        raise ValueError(f"{path}: bad magic 0x{magic:08x} at offset 0")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise ValueError(f"{path}: truncated dimension table at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}i", raw[4:header_len])
    expected = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload length {len(payload)} != {expected} "
            f"(dims {dims}, offset {header_len})"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = IDX_MAGIC_LABELS if array.ndim == 1 else IDX_MAGIC_IMAGES
    if array.ndim not in (1, 3):
        raise ValueError(f"write_idx: expected 1-d labels or 3-d images, got {array.ndim}-d")
    with Path(path).open("wb") as fh:
        fh.write(struct.pack(">i", magic))
        for d in array.shape:
            fh.write(struct.pack(">i", d))
        fh.write(array.tobytes())


# -- parameter checkpoints --------------------------------------------------------


def save_checkpoint(path, params: list[Tensor]) -> None:
    """JSON list of named parameter arrays; float reprs round-trip exactly."""
    entries = [
        {
            "name": p.name or f"param{i}",
            "shape": list(p.shape),
            "data": [float(v) for v in p.data.reshape(-1)],
        }
        for i, p in enumerate(params)
    ]
    Path(path).write_text(json.dumps(entries))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    entries = json.loads(Path(path).read_text())
    return {
        e["name"]: np.asarray(e["data"], dtype=np.float64).reshape(e["shape"])
        for e in entries
    }


def restore_params(params: list[Tensor], loaded: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in loaded:
            raise KeyError(f"checkpoint missing parameter {p.name!r}")
        src = loaded[p.name]
        if src.shape != p.shape:
            raise ValueError(
                f"checkpoint shape mismatch for {p.name!r}: {src.shape} vs {p.shape}"
            )
        p.data = src.copy()


# -- colored classification data ----------------------------------------------------


@dataclass
class ClassBase:
    """Environment-independent sample pool: evidence features plus the true
    binary shape label; colors and labels get (re)assigned per epoch."""

    evidence: np.ndarray  # (n, k) raw shape evidence
    shape: np.ndarray  # (n,) binary


@dataclass
class ColoredEnv:
    x: np.ndarray  # (n, d) features including the color channel(s)
    y: np.ndarray  # (n,) binary labels
    env_id: int


def make_blob_base(n: int, rng: np.random.Generator) -> ClassBase:
    """Synthetic stand-in for image shapes: a scalar noisy evidence score."""
    shape = (rng.random(n) < 0.5).astype(np.int64)
    score = shape + BLOB_SCORE_SD * rng.standard_normal(n)
    return ClassBase(evidence=score[:, None], shape=shape)


def make_idx_base(images_path, labels_path) -> ClassBase:
    """Downsampled two-tone image base: 28x28 -> 14x14 mean pooling, digit
    threshold at 5 for the binary shape label."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"inconsistent IDX pair: images {images.shape}, labels {labels.shape}"
        )
    imgs = images.astype(np.float64) / 255.0
    n, h, w = imgs.shape
    pooled = imgs.reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    return ClassBase(
        evidence=pooled.reshape(n, -1), shape=(labels >= 5).astype(np.int64)
    )


def make_colored_env(base: ClassBase, env_id: int, rng: np.random.Generator) -> ColoredEnv:
    """Assign noisy labels and spuriously correlated colors for one environment.

    The label is the shape flipped with probability 0.25 (capping shape-based
    accuracy at 75%); the color matches the label with the per-environment
    agreement probability.
    """
    if env_id not in COLOR_AGREEMENT:
        raise ValueError(f"env_id must be one of {sorted(COLOR_AGREEMENT)}, got {env_id}")
    n = base.shape.shape[0]
    label = np.where(rng.random(n) < LABEL_FLIP_PROB, 1 - base.shape, base.shape)
    agree = COLOR_AGREEMENT[env_id]
    color = np.where(rng.random(n) < agree, label, 1 - label)
    if base.evidence.shape[1] == 1:
        x = np.column_stack([base.evidence[:, 0], color.astype(np.float64)])
    else:
        # two color channels: the shape appears in the channel picked by color
        k = base.evidence.shape[1]
        x = np.zeros((n, 2 * k))
        rows = np.arange(n)
        x[rows[color == 0], :k] = base.evidence[color == 0]
        x[rows[color == 1], k:] = base.evidence[color == 1]
    return ColoredEnv(x=x, y=label.astype(np.int64), env_id=env_id)
