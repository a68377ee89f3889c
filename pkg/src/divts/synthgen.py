"""Synthetic multichannel series with planted latent domains.

Every (domain, class) pair yields its own waveform family:

* the class fixes the waveform shape: two sinusoids with a class-specific
  frequency ratio and mixing weight, gated by a square (even classes) or
  sawtooth (odd classes) envelope;
* the domain fixes a frequency multiplier, per-channel gains, per-channel DC
  offsets and a phase offset;
* ``drift_rate`` drifts the domain frequency and channel gains linearly
  along each recording (temporal shift);
* the target set uses a held-out domain placed midway between training
  domains 0 and 1 plus an offset, and adds ``ood_extra`` unseen classes,
  each a linear chirp repeated every window.

Windows are min-max normalized per sample, like the real-data pipeline.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data import Dataset, RawSeries, WindowConfig, concat, from_instances, normalize_windows, slide_windows
from .errors import InvalidConfig, MissingPlantedLabels
from .rng import numpy_rng


@dataclass(frozen=True)
class SynthConfig:
    K_true: int = 3
    C: int = 4
    ood_extra: int = 1
    channels: int = 3
    series_length: int = 1056
    window: int = 64
    step: int = 32
    subjects_per_domain: int = 5
    target_subjects: int = 3
    noise_sigma: float = 0.3
    drift_rate: float = 0.1
    target_offset: float = 0.15
    subject_jitter: float = 1.0  # scales per-recording frequency/gain jitter and random phase
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.K_true < 1:
            problems.append("K_true must be >= 1")
        if self.C < 2:
            problems.append("C must be >= 2")
        if self.ood_extra < 0:
            problems.append("ood_extra must be >= 0")
        if self.channels < 1:
            problems.append("channels must be >= 1")
        if self.noise_sigma < 0 or self.drift_rate < 0 or self.subject_jitter < 0:
            problems.append("noise_sigma, drift_rate and subject_jitter must be >= 0")
        if self.window < 1 or not 1 <= self.step <= self.window:
            problems.append("need 1 <= step <= window")
        if self.series_length < self.window:
            problems.append("series_length must be >= window")
        if self.subjects_per_domain < 1 or self.target_subjects < 1:
            problems.append("need at least one subject per domain")
        if problems:
            raise InvalidConfig("; ".join(problems))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise InvalidConfig(f"unknown synth keys {sorted(set(d) - known)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from exc

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class DomainParams:
    freq_mult: float
    gains: np.ndarray
    offsets: np.ndarray
    phase: float
    gain_drift: np.ndarray


@dataclass
class ClassParams:
    base_cycles: float  # cycles per window at freq_mult 1
    ratio: float
    mix: float
    envelope: str
    env_cycles: float
    chirp: bool = False  # OOD classes: linear sweep within every window


# cycles per window swept by an OOD chirp. A steady tone at a new frequency is
# indistinguishable from an ID class seen under a new domain multiplier, a
# sweep is not
CHIRP_BAND = (2.0, 12.0)


def class_params(C_total: int, window: int, seed: int, n_id: int | None = None) -> list[ClassParams]:
    rng = numpy_rng(seed, "synth.classes")
    n_id = C_total if n_id is None else n_id
    out = []
    for c in range(C_total):
        out.append(ClassParams(
            base_cycles=3.0 + 1.25 * c + rng.uniform(-0.2, 0.2),
            ratio=(2.0, 3.0, 1.5, 2.5, 3.5, 4.0)[c % 6],
            mix=rng.uniform(0.3, 0.8),
            envelope="square" if c % 2 == 0 else "sawtooth",
            env_cycles=rng.uniform(0.5, 1.5),
            chirp=c >= n_id,
        ))
    return out


def domain_params(cfg: SynthConfig) -> tuple[list[DomainParams], DomainParams]:
    """Training domains plus the held-out target domain."""
    rng = numpy_rng(cfg.seed, "synth.domains")
    mults = np.linspace(0.75, 1.35, cfg.K_true) if cfg.K_true > 1 else np.array([1.0])
    doms = []
    for k in range(cfg.K_true):
        doms.append(DomainParams(
            freq_mult=float(mults[k] * rng.uniform(0.97, 1.03)),
            gains=rng.uniform(0.3, 1.6, cfg.channels),
            offsets=rng.uniform(-1.0, 1.0, cfg.channels),
            phase=float(rng.uniform(0, 2 * np.pi)),
            gain_drift=rng.choice([-1.0, 1.0], cfg.channels),
        ))
    a, b = doms[0], doms[1] if cfg.K_true > 1 else doms[0]
    off = cfg.target_offset
    target = DomainParams(
        freq_mult=0.5 * (a.freq_mult + b.freq_mult) * (1 + off),
        gains=0.5 * (a.gains + b.gains) * (1 + off * rng.choice([-1.0, 1.0], cfg.channels)),
        offsets=0.5 * (a.offsets + b.offsets) + off * rng.choice([-1.0, 1.0], cfg.channels),
        phase=0.5 * (a.phase + b.phase),
        gain_drift=rng.choice([-1.0, 1.0], cfg.channels),
    )
    return doms, target


def _envelope(kind, t_frac):
    if kind == "square":
        return np.where(np.sin(2 * np.pi * t_frac) >= 0, 1.0, 0.4)
    return 0.4 + 0.6 * (t_frac % 1.0)


def render_series(cfg: SynthConfig, dom: DomainParams, cls: ClassParams, rng: np.random.Generator) -> np.ndarray:
    """One ``[channels, series_length]`` recording."""
    L, W = cfg.series_length, cfg.window
    t = np.arange(L, dtype=np.float64)
    ramp = cfg.drift_rate * t / L
    # per-recording jitter
    j = cfg.subject_jitter
    mult = dom.freq_mult * (1 + j * rng.uniform(-0.03, 0.03)) * (1 + ramp)
    gains = dom.gains[:, None] * (1 + j * rng.uniform(-0.08, 0.08, (cfg.channels, 1))) \
        * (1 + ramp * dom.gain_drift[:, None])
    phase0 = dom.phase + j * rng.uniform(0, 2 * np.pi)
    if cls.chirp:
        lo, hi = CHIRP_BAND
        theta = 2 * np.pi * np.cumsum(lo + (hi - lo) * (t % W) / W) / W + phase0
        sig = gains * np.sin(theta) + dom.offsets[:, None]
        return sig + cfg.noise_sigma * rng.standard_normal(sig.shape)
    # integrate instantaneous frequency so drift does not cause phase jumps
    cycles = np.cumsum(cls.base_cycles * mult / W)
    theta = 2 * np.pi * cycles + phase0
    wave = np.sin(theta) + cls.mix * np.sin(cls.ratio * theta + 0.5)
    env = _envelope(cls.envelope, cls.env_cycles * t / W)
    chan_phase = np.linspace(0, np.pi / 2, cfg.channels)[:, None]
    sig = gains * env * wave + 0.25 * gains * np.sin(0.5 * theta[None, :] + chan_phase)
    sig = sig + dom.offsets[:, None]
    sig = sig + cfg.noise_sigma * rng.standard_normal(sig.shape)
    return sig


def _windows(cfg, dom, cls, label, subject, domain_idx, rng):
    series = RawSeries(render_series(cfg, dom, cls, rng), label, subject)
    insts = slide_windows(series, WindowConfig(cfg.window, cfg.step))
    for inst in insts:
        inst.d_planted = domain_idx
    return insts


def generate(cfg: SynthConfig) -> tuple[Dataset, Dataset]:
    """Returns ``(train, target)``; both share class names and OOD class set."""
    C_total = cfg.C + cfg.ood_extra
    names = [f"class{c}" for c in range(1, cfg.C + 1)] + [f"ood{j}" for j in range(1, cfg.ood_extra + 1)]
    ood = frozenset(range(cfg.C + 1, C_total + 1))
    cls = class_params(C_total, cfg.window, cfg.seed, cfg.C)
    doms, target_dom = domain_params(cfg)
    rng = numpy_rng(cfg.seed, "synth.series")

    train, subj = [], 0
    for k, dom in enumerate(doms):
        for _ in range(cfg.subjects_per_domain):
            for c in range(cfg.C):
                train += _windows(cfg, dom, cls[c], c + 1, subj, k, rng)
            subj += 1
    test = []
    for _ in range(cfg.target_subjects):
        for c in range(C_total):
            test += _windows(cfg, target_dom, cls[c], c + 1, subj, cfg.K_true, rng)
        subj += 1

    train_ds = from_instances(train, names, ood)
    test_ds = from_instances(test, names, ood)
    train_ds.x = normalize_windows(train_ds.x)
    test_ds.x = normalize_windows(test_ds.x)
    return train_ds, test_ds


def window_features(x: np.ndarray) -> np.ndarray:
    """Per-channel mean and variance of each window: ``[N, 2 * channels]``."""
    flat = x.reshape(x.shape[0], x.shape[1], -1)
    return np.concatenate([flat.mean(axis=2), flat.var(axis=2)], axis=1)


def separability_check(ds: Dataset) -> float:
    """Leave-one-out nearest-centroid accuracy of planted domains from window statistics."""
    if ds.d_planted is None:
        raise MissingPlantedLabels("dataset carries no planted domain labels")
    f = window_features(ds.x).astype(np.float64)
    sd = f.std(axis=0)
    f = (f - f.mean(axis=0)) / np.where(sd == 0, 1, sd)
    labels = np.unique(ds.d_planted)
    if len(labels) == 1:
        return 1.0
    lab_idx = np.searchsorted(labels, ds.d_planted)
    counts = np.bincount(lab_idx, minlength=len(labels)).astype(np.float64)
    sums = np.zeros((len(labels), f.shape[1]))
    np.add.at(sums, lab_idx, f)
    # centroid of every domain, and the own-domain centroid with the sample removed
    cent = sums / counts[:, None]
    d2 = ((f[:, None, :] - cent[None]) ** 2).sum(axis=2)
    n_own = counts[lab_idx]
    own = np.where(n_own[:, None] > 1, (sums[lab_idx] - f) / np.maximum(n_own - 1, 1)[:, None], np.nan)
    d_own = ((f - own) ** 2).sum(axis=1)
    d2[np.arange(len(f)), lab_idx] = np.where(np.isnan(d_own), np.inf, d_own)
    return float(np.mean(np.argmin(d2, axis=1) == lab_idx))
