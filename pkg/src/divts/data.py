"""Windowed time-series datasets: slicing, normalization, splits and on-disk format.

Class labels are 1-based throughout (``1..C``). After ``partition_id_ood`` the
ID classes occupy ``1..C_id`` and OOD classes the indices above them.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    DataError,
    DimensionMismatch,
    EmptySplit,
    FormatError,
    LabelSpanConflict,
    LengthTooShort,
    NonFiniteInput,
    TooFewIDClasses,
)

log = logging.getLogger(__name__)

MAGIC = b"DIVTS\0"
FORMAT_VERSION = 1


@dataclass
class RawSeries:
    """One multichannel recording before windowing.

    ``labels`` is either a single class index for the whole series or one
    class index per timestep.
    """

    values: np.ndarray  # [channels, length]
    labels: int | np.ndarray
    subject_id: object = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise DataError(f"series values must be [channels, length], got {self.values.shape}")
        if not np.isscalar(self.labels):
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.length,):
                raise DataError("per-timestep labels must have one entry per timestep")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class WindowConfig:
    window: int = 200
    step: int = 100
    allow_gaps: bool = False

    def __post_init__(self):
        if self.window < 1 or self.step < 1:
            raise DataError("window and step must be positive")
        if self.step > self.window and not self.allow_gaps:
            raise DataError(f"step {self.step} > window {self.window} leaves gaps")


@dataclass
class Instance:
    x: np.ndarray  # [channels, 1, window]
    y: int
    d_pseudo: int | None = None
    d_planted: int | None = None
    subject: int | None = None


@dataclass
class Dataset:
    """Array-backed collection of windows.

    ``subject`` is carried in memory for diagnostics only and is not written
    to disk.
    """

    x: np.ndarray
    y: np.ndarray
    class_names: list[str]
    ood_classes: frozenset[int] = frozenset()
    d_planted: np.ndarray | None = None
    d_pseudo: np.ndarray | None = None
    subject: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.ood_classes = frozenset(int(c) for c in self.ood_classes)
        self.class_names = list(self.class_names)
        if self.x.ndim != 4 or self.x.shape[2] != 1:
            raise DimensionMismatch(f"x must be [N, channels, 1, window], got {self.x.shape}")
        if self.y.shape != (len(self.x),):
            raise DimensionMismatch(f"{len(self.y)} labels for {len(self.x)} instances")
        for name in ("d_planted", "d_pseudo", "subject"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=np.int64)
                if arr.shape != self.y.shape:
                    raise DimensionMismatch(f"{name} has {len(arr)} entries for {len(self.y)} instances")
                setattr(self, name, arr)
        if len(self.y) and (self.y.min() < 1 or self.y.max() > len(self.class_names)):
            raise DataError(f"labels must lie in 1..{len(self.class_names)}")
        if self.ood_classes and (min(self.ood_classes) < 1 or max(self.ood_classes) > len(self.class_names)):
            raise DataError("ood class index out of range")
        if self.num_id_classes < 2:
            raise TooFewIDClasses(f"need at least 2 ID classes, have {self.num_id_classes}")

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> Instance:
        opt = lambda a: None if a is None else int(a[i])  # noqa: E731
        return Instance(self.x[i], int(self.y[i]), opt(self.d_pseudo), opt(self.d_planted), opt(self.subject))

    def __iter__(self) -> Iterator[Instance]:
        return (self[i] for i in range(len(self)))

    @property
    def instances(self) -> list[Instance]:
        return list(self)

    @property
    def channels(self) -> int:
        return self.x.shape[1]

    @property
    def window(self) -> int:
        return self.x.shape[3]

    @property
    def num_id_classes(self) -> int:
        return len(self.class_names) - len(self.ood_classes)

    @property
    def id_classes(self) -> list[int]:
        return [c for c in range(1, len(self.class_names) + 1) if c not in self.ood_classes]

    @property
    def is_ood(self) -> np.ndarray:
        return np.isin(self.y, sorted(self.ood_classes))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return Dataset(
            self.x[idx], self.y[idx], self.class_names, self.ood_classes,
            pick(self.d_planted), pick(self.d_pseudo), pick(self.subject),
        )

    def equals(self, other: "Dataset") -> bool:
        """Bit-exact comparison of the persisted fields."""
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()

        return (
            same(self.x, other.x) and same(self.y, other.y) and same(self.d_planted, other.d_planted)
            and self.class_names == other.class_names and self.ood_classes == other.ood_classes
        )


def from_instances(instances: Sequence[Instance], class_names, ood_classes=()) -> Dataset:
    if not instances:
        raise EmptySplit("no instances")
    x = np.stack([np.asarray(inst.x, dtype=np.float32) for inst in instances])
    y = np.array([inst.y for inst in instances])

    def column(attr):
        vals = [getattr(inst, attr) for inst in instances]
        return None if any(v is None for v in vals) else np.array(vals)

    return Dataset(x, y, class_names, ood_classes, column("d_planted"), column("d_pseudo"), column("subject"))


def concat(parts: Sequence[Dataset]) -> Dataset:
    first = parts[0]

    def cat(attr):
        arrs = [getattr(p, attr) for p in parts]
        return None if any(a is None for a in arrs) else np.concatenate(arrs)

    return Dataset(
        np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]),
        first.class_names, first.ood_classes, cat("d_planted"), cat("d_pseudo"), cat("subject"),
    )


# ---------------------------------------------------------------------------
# windowing and normalization

def num_windows(length: int, window: int, step: int) -> int:
    if length < window:
        return 0
    return (length - window) // step + 1


def slide_windows_with_report(series: RawSeries, cfg: WindowConfig, on_conflict: str = "drop"):
    """Cut ``series`` into windows; returns ``(instances, n_dropped)``.

    Windows whose span covers more than one segment label are dropped
    (``on_conflict="drop"``) or raise ``LabelSpanConflict`` (``"raise"``).
    """
    if series.length < cfg.window:
        raise LengthTooShort(f"series length {series.length} < window {cfg.window}")
    n = num_windows(series.length, cfg.window, cfg.step)
    out, dropped = [], 0
    for i in range(n):
        lo, hi = i * cfg.step, i * cfg.step + cfg.window
        if np.isscalar(series.labels):
            label = int(series.labels)
        else:
            span = series.labels[lo:hi]
            if np.any(span != span[0]):
                if on_conflict == "raise":
                    raise LabelSpanConflict(f"window [{lo}, {hi}) crosses a label boundary")
                dropped += 1
                continue
            label = int(span[0])
        x = series.values[:, None, lo:hi].astype(np.float32)
        subj = series.subject_id if isinstance(series.subject_id, (int, np.integer)) else None
        out.append(Instance(x, label, subject=subj))
    if dropped:
        log.info("dropped %d of %d windows crossing label boundaries", dropped, n)
    return out, dropped


def slide_windows(series: RawSeries, cfg: WindowConfig) -> list[Instance]:
    return slide_windows_with_report(series, cfg)[0]


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    """Map ``x`` affinely onto [0, 1] using its own min and max.

    A constant input maps to all zeros.
    """
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("cannot normalize non-finite values")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return np.clip((x - lo) / (hi - lo), 0, 1).astype(x.dtype, copy=False)


def normalize_windows(x: np.ndarray, mode: str = "sample") -> np.ndarray:
    """Normalize a stack of windows ``[N, ...]``.

    ``mode="sample"`` uses each window's own extremes, ``"global"`` the
    extremes of the whole stack.
    """
    x = np.asarray(x)
    if mode == "global":
        return minmax_normalize(x)
    if mode != "sample":
        raise ValueError(f"unknown normalization mode {mode!r}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("cannot normalize non-finite values")
    flat = x.reshape(len(x), -1)
    lo = flat.min(axis=1, keepdims=True)
    span = flat.max(axis=1, keepdims=True) - lo
    safe = np.where(span == 0, 1, span)
    out = np.where(span == 0, 0, (flat - lo) / safe)
    return np.clip(out, 0, 1).astype(x.dtype, copy=False).reshape(x.shape)


# ---------------------------------------------------------------------------
# splits

def split_indices(n: int, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < ratio < 1:
        raise EmptySplit(f"ratio must lie strictly inside (0, 1), got {ratio}")
    n_train = int(round(ratio * n))
    if n_train == 0 or n_train == n:
        raise EmptySplit(f"ratio {ratio} on {n} instances leaves one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split_train_val(ds: Dataset, ratio: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded shuffle-split of the ID instances of ``ds``."""
    id_idx = np.flatnonzero(~ds.is_ood)
    tr, va = split_indices(len(id_idx), ratio, seed)
    return ds.subset(id_idx[tr]), ds.subset(id_idx[va])


def partition_id_ood(ds: Dataset, ood_classes) -> tuple[Dataset, Dataset]:
    """Relabel so ID classes come first, then split off a training pool.

    Returns ``(train_pool, test)``: the pool holds no instance of an OOD
    class, the test set keeps every instance with ``ood_classes`` recorded.
    """
    n_total = len(ds.class_names)
    ood = sorted(set(int(c) for c in ood_classes))
    if any(c < 1 or c > n_total for c in ood):
        raise DataError(f"ood classes {ood} outside 1..{n_total}")
    ids = [c for c in range(1, n_total + 1) if c not in ood]
    if len(ids) < 2:
        raise TooFewIDClasses(f"only {len(ids)} ID classes would remain")
    order = ids + ood
    remap = np.zeros(n_total + 1, dtype=np.int64)
    remap[order] = np.arange(1, n_total + 1)
    names = [ds.class_names[c - 1] for c in order]
    new_ood = frozenset(range(len(ids) + 1, n_total + 1))
    test = Dataset(ds.x, remap[ds.y], names, new_ood, ds.d_planted, ds.d_pseudo, ds.subject)
    pool = test.subset(np.flatnonzero(~test.is_ood))
    return pool, test


# ---------------------------------------------------------------------------
# on-disk format

def _write_bin(path: Path, arr: np.ndarray, dtype: str):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_bin(path: Path, dtype: str, count: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    head = raw[: len(MAGIC)]
    if head != MAGIC:
        bad = next((i for i in range(len(MAGIC)) if i >= len(head) or head[i] != MAGIC[i]), 0)
        raise FormatError(f"{path.name}: bad magic prefix", offset=bad)
    payload = raw[len(MAGIC):]
    if len(payload) % 4:
        raise FormatError(f"{path.name}: payload is not a whole number of 4-byte words",
                          offset=len(MAGIC) + len(payload) - len(payload) % 4)
    arr = np.frombuffer(payload, dtype=dtype)
    if arr.size != count:
        raise DimensionMismatch(f"{path.name}: manifest implies {count} values, payload has {arr.size}")
    return arr.copy()


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = {"x": "x.bin", "y": "y.bin"}
    _write_bin(path / "x.bin", ds.x, "<f4")
    _write_bin(path / "y.bin", ds.y, "<i4")
    if ds.d_planted is not None:
        files["d"] = "d.bin"
        _write_bin(path / "d.bin", ds.d_planted, "<i4")
    elif (path / "d.bin").exists():
        os.remove(path / "d.bin")
    manifest = {
        "version": FORMAT_VERSION,
        "channels": ds.channels,
        "window": ds.window,
        "num_instances": len(ds),
        "classes": ds.class_names,
        "ood_classes": sorted(ds.ood_classes),
        "files": files,
    }
    write_json(path / "manifest.json", manifest)
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise FormatError(f"no manifest.json in {path}")
    try:
        m = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest.json: {exc.msg}", offset=exc.pos) from exc
    missing = {"version", "channels", "window", "num_instances", "classes", "ood_classes", "files"} - set(m)
    if missing:
        raise FormatError(f"manifest.json missing keys {sorted(missing)}")
    if m["version"] != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {m['version']}")
    n, ch, w = int(m["num_instances"]), int(m["channels"]), int(m["window"])
    files = m["files"]
    x = _read_bin(path / files.get("x", "x.bin"), "<f4", n * ch * w).reshape(n, ch, 1, w)
    y = _read_bin(path / files.get("y", "y.bin"), "<i4", n)
    d = None
    if "d" in files:
        d = _read_bin(path / files["d"], "<i4", n)
    return Dataset(x.astype(np.float32), y.astype(np.int64), m["classes"], m["ood_classes"],
                   None if d is None else d.astype(np.int64))
