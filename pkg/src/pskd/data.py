"""Paired skeleton + accelerometer datasets: synthesis, file I/O, resampling, fusion.

Array layouts follow the usual conventions for the two modalities:

* skeleton: (C_SK, T_SK, N_SK)  channels x frames x joints
* accel:    (C_AC, S_AC, T_AC)  channels x sensors x frames
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ParameterError, ParseError, ValidationError

C_SK = 3
C_AC = 3


class GenConfig(BaseModel):
    """Knobs of the synthetic generator.  Defaults give the desk-scale benchmark set."""

    model_config = ConfigDict(extra="forbid")

    num_classes: int = Field(6, ge=2)
    samples_per_class: int = Field(150, ge=2)
    t_sk: int = Field(40, ge=4)
    n_sk: int = Field(8, ge=1)
    t_ac: int = Field(30, ge=2)
    sigma_sk: float = Field(2.0, ge=0)
    sigma_ac: float = Field(12.0, ge=0)
    wrist_joint: int = Field(0, ge=0)
    time_jitter: float = Field(0.1, ge=0)
    amp_jitter: float = Field(0.15, ge=0)
    max_frequency: int = Field(4, ge=2)
    seed: int = 0

    @model_validator(mode="after")
    def _check_wrist(self):
        if self.wrist_joint >= self.n_sk:
            raise ValueError(f"wrist_joint {self.wrist_joint} out of range for n_sk={self.n_sk}")
        return self


@dataclass(frozen=True)
class DatasetMeta:
    num_classes: int
    c_sk: int
    t_sk: int
    n_sk: int
    c_ac: int
    s_ac: int
    t_ac: int
    class_names: tuple

    def to_json(self):
        d = {k: getattr(self, k) for k in ("num_classes", "c_sk", "t_sk", "n_sk", "c_ac", "s_ac", "t_ac")}
        d["class_names"] = list(self.class_names)
        return d


@dataclass(frozen=True, eq=False)
class Sample:
    label: int
    skeleton: np.ndarray
    accel: np.ndarray
    subject: int | None = 1


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: tuple
    meta: DatasetMeta
    split: tuple | None = None  # per-sample "train" / "test"

    def __len__(self):
        return len(self.samples)

    def indices(self, split=None):
        if split is None:
            return np.arange(len(self.samples))
        if self.split is None:
            raise ParameterError("dataset has no split assignment")
        return np.array([i for i, s in enumerate(self.split) if s == split], dtype=np.int64)

    def labels(self, split=None):
        return np.array([self.samples[i].label for i in self.indices(split)], dtype=np.int64)

    def skeletons(self, split=None):
        return np.stack([self.samples[i].skeleton for i in self.indices(split)])

    def accels(self, split=None):
        return np.stack([self.samples[i].accel for i in self.indices(split)])


# ---------------------------------------------------------------- resampling / fusion

def resample_time(series, target_len):
    """Linear interpolation along the last axis, endpoints mapped to endpoints."""
    series = np.asarray(series, dtype=np.float64)
    t_in = series.shape[-1]
    if t_in < 2:
        raise ParameterError(f"need at least 2 time steps to resample, got {t_in}")
    if target_len < 2:
        raise ParameterError(f"target length must be >= 2, got {target_len}")
    if target_len == t_in:
        return series.copy()
    pos = np.linspace(0.0, t_in - 1, target_len)
    lo = np.minimum(np.floor(pos).astype(np.int64), t_in - 2)
    frac = pos - lo
    a = series[..., lo]
    b = series[..., lo + 1]
    out = a + frac * (b - a)
    # rounding in a + f*(b-a) can step one ulp outside [a, b] or miss the endpoint
    out = np.clip(out, np.minimum(a, b), np.maximum(a, b))
    out[..., 0] = series[..., 0]
    out[..., -1] = series[..., -1]
    return out


def fuse_modalities(sk, ac, T):
    """Channel-concatenate skeleton and accelerometer at a common length T.

    The single sensor's channels are broadcast over every joint, giving shape
    (C_SK + C_AC, T, N_SK).
    """
    sk = np.asarray(sk, dtype=np.float64)
    ac = np.asarray(ac, dtype=np.float64)
    if sk.ndim != 3 or sk.shape[0] != C_SK:
        raise ParameterError(f"skeleton must have shape ({C_SK}, T, N), got {sk.shape}")
    if ac.ndim != 3 or ac.shape[0] != C_AC:
        raise ParameterError(f"accel must have shape ({C_AC}, S, T), got {ac.shape}")
    if ac.shape[1] != 1:
        raise ParameterError(f"fusion broadcasts a single sensor; got S_AC={ac.shape[1]}")
    if T < 2:
        raise ParameterError(f"fused length must be >= 2, got {T}")
    n_sk = sk.shape[2]
    sk_r = resample_time(sk.transpose(0, 2, 1), T).transpose(0, 2, 1)  # (3, T, N)
    ac_r = resample_time(ac[:, 0, :], T)  # (3, T)
    ac_b = np.broadcast_to(ac_r[:, :, None], (C_AC, T, n_sk))
    return np.concatenate([sk_r, ac_b], axis=0)


# ---------------------------------------------------------------- synthesis

def _second_difference(x, dt):
    return (x[..., 2:] - 2.0 * x[..., 1:-1] + x[..., :-2]) / (dt * dt)


def generate_dataset(cfg: GenConfig) -> Dataset:
    """Draw class prototypes, then jittered noisy samples of each class.

    Every joint-channel of a class prototype is a sum of 2-3 sinusoids whose
    frequencies (cycles per sequence) are drawn per class.  The accelerometer is
    the second time-derivative of the wrist joint, in units where a one-cycle
    unit-amplitude sinusoid has unit peak acceleration.
    """
    rng = np.random.default_rng(cfg.seed)
    C, N, T = cfg.num_classes, cfg.n_sk, cfg.t_sk
    freqs_pool = np.arange(1, cfg.max_frequency + 1)

    protos = []
    for _ in range(C):
        comps = []
        for _ in range(C_SK * N):
            n_comp = int(rng.integers(2, 4))
            freqs = rng.choice(freqs_pool, size=n_comp, replace=n_comp > freqs_pool.size)
            amps = rng.uniform(0.4, 1.0, size=n_comp)
            phases = rng.uniform(0.0, 2.0 * math.pi, size=n_comp)
            comps.append((freqs.astype(np.float64), amps, phases))
        protos.append(comps)

    u = np.linspace(0.0, 1.0, T)
    dt = 1.0 / (T - 1)
    accel_scale = 1.0 / (2.0 * math.pi) ** 2
    samples = []
    for c in range(C):
        for _ in range(cfg.samples_per_class):
            shift = rng.normal(0.0, cfg.time_jitter)
            gain = 1.0 + rng.normal(0.0, cfg.amp_jitter)
            clean = np.empty((C_SK * N, T))
            for idx, (freqs, amps, phases) in enumerate(protos[c]):
                arg = 2.0 * math.pi * freqs[:, None] * (u[None, :] + shift) + phases[:, None]
                clean[idx] = gain * (amps[:, None] * np.sin(arg)).sum(axis=0)
            clean = clean.reshape(N, C_SK, T).transpose(1, 2, 0)  # (3, T, N)
            skeleton = clean + rng.normal(0.0, cfg.sigma_sk, size=clean.shape)
            wrist = clean[:, :, cfg.wrist_joint]
            acc = resample_time(_second_difference(wrist, dt) * accel_scale, cfg.t_ac)
            acc = acc + rng.normal(0.0, cfg.sigma_ac, size=acc.shape)
            samples.append(Sample(label=c, skeleton=skeleton, accel=acc[:, None, :], subject=1))

    meta = DatasetMeta(
        num_classes=C, c_sk=C_SK, t_sk=T, n_sk=N, c_ac=C_AC, s_ac=1, t_ac=cfg.t_ac,
        class_names=tuple(f"class_{c}" for c in range(C)),
    )
    return Dataset(tuple(samples), meta)


def split_dataset(ds: Dataset, train_fraction: float, seed) -> Dataset:
    """Stratified shuffle split; every class lands in both splits."""
    if not 0.0 < train_fraction < 1.0:
        raise ParameterError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    labels = np.array([s.label for s in ds.samples])
    tags = [None] * len(ds.samples)
    for c in range(ds.meta.num_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size < 2:
            raise ParameterError(f"class {c} has {idx.size} sample(s); need at least 2 to split")
        idx = rng.permutation(idx)
        n_train = min(max(int(round(train_fraction * idx.size)), 1), idx.size - 1)
        for i in idx[:n_train]:
            tags[i] = "train"
        for i in idx[n_train:]:
            tags[i] = "test"
    return replace(ds, split=tuple(tags))


# ---------------------------------------------------------------- normalization

@dataclass(frozen=True)
class NormStats:
    sk_mean: np.ndarray
    sk_std: np.ndarray
    ac_mean: np.ndarray
    ac_std: np.ndarray

    def to_json(self):
        return {
            "skeleton": {"mean": self.sk_mean.tolist(), "std": self.sk_std.tolist()},
            "accel": {"mean": self.ac_mean.tolist(), "std": self.ac_std.tolist()},
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            np.array(d["skeleton"]["mean"]), np.array(d["skeleton"]["std"]),
            np.array(d["accel"]["mean"]), np.array(d["accel"]["std"]),
        )


def _channel_stats(x, axes):
    mean = x.mean(axis=axes)
    std = x.std(axis=axes)
    flat = std < 1e-12
    return np.where(flat, 0.0, mean), np.where(flat, 1.0, std)


def apply_norm(ds: Dataset, stats: NormStats) -> Dataset:
    skm, sks = stats.sk_mean[:, None, None], stats.sk_std[:, None, None]
    acm, acs = stats.ac_mean[:, None, None], stats.ac_std[:, None, None]
    samples = tuple(
        replace(s, skeleton=(s.skeleton - skm) / sks, accel=(s.accel - acm) / acs) for s in ds.samples
    )
    return replace(ds, samples=samples)


def normalize(ds: Dataset):
    """Per-channel z-score with statistics from the train split only."""
    sk = ds.skeletons("train")  # (n, 3, T, N)
    ac = ds.accels("train")  # (n, 3, S, T)
    if sk.shape[0] == 0:
        raise ParameterError("normalize needs a non-empty train split")
    sk_mean, sk_std = _channel_stats(sk, (0, 2, 3))
    ac_mean, ac_std = _channel_stats(ac, (0, 2, 3))
    stats = NormStats(sk_mean, sk_std, ac_mean, ac_std)
    return apply_norm(ds, stats), stats


# ---------------------------------------------------------------- files

META_KEYS = ("num_classes", "c_sk", "t_sk", "n_sk", "c_ac", "s_ac", "t_ac", "class_names")


def write_jsonl(ds: Dataset, out_dir, force=False):
    """Write ``meta.json`` + ``data.jsonl``; refuses to overwrite unless ``force``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta_path, data_path = out_dir / "meta.json", out_dir / "data.jsonl"
    if not force:
        for p in (meta_path, data_path):
            if p.exists():
                raise FileExistsError(f"{p} exists (use --force to overwrite)")
    meta_path.write_text(json.dumps(ds.meta.to_json(), indent=2) + "\n", encoding="utf-8")
    with data_path.open("w", encoding="utf-8", newline="\n") as f:
        for s in ds.samples:
            rec = {"label": int(s.label), "subject": s.subject,
                   "skeleton": s.skeleton.tolist(), "accel": s.accel.tolist()}
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")
    return data_path, meta_path


def _read_meta(meta_path):
    try:
        raw = json.loads(Path(meta_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"meta file is not valid JSON: {e.msg}", line=e.lineno) from e
    if not isinstance(raw, dict):
        raise ValidationError("meta must be a JSON object")
    missing = [k for k in META_KEYS if k not in raw]
    if missing:
        raise ValidationError(f"missing keys {missing}", field="meta")
    for k in META_KEYS[:-1]:
        v = raw[k]
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise ValidationError(f"must be a positive integer, got {v!r}", field=k)
    if raw["c_sk"] != C_SK or raw["c_ac"] != C_AC:
        raise ValidationError("skeleton and accel must both have 3 channels (x, y, z)", field="meta")
    names = raw["class_names"]
    if not isinstance(names, list) or len(names) != raw["num_classes"]:
        raise ValidationError("needs one name per class", field="class_names")
    return DatasetMeta(**{k: raw[k] for k in META_KEYS[:-1]}, class_names=tuple(names))


def _as_array(value, shape, field, lineno):
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (ValueError, TypeError) as e:
        raise ValidationError(f"line {lineno}: not a rectangular numeric array", field=field) from e
    if arr.shape != shape:
        raise ValidationError(f"line {lineno}: shape {arr.shape}, expected {shape}", field=field)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"line {lineno}: non-finite values", field=field)
    return arr


def ingest_jsonl(data_path, meta_path) -> Dataset:
    meta = _read_meta(meta_path)
    sk_shape = (meta.c_sk, meta.t_sk, meta.n_sk)
    ac_shape = (meta.c_ac, meta.s_ac, meta.t_ac)
    samples = []
    with Path(data_path).open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON ({e.msg})", line=lineno) from e
            if not isinstance(rec, dict):
                raise ParseError("record must be a JSON object", line=lineno)
            for key in ("label", "skeleton", "accel"):
                if key not in rec:
                    raise ValidationError(f"line {lineno}: missing", field=key)
            label = rec["label"]
            if not isinstance(label, int) or isinstance(label, bool) or not 0 <= label < meta.num_classes:
                raise ValidationError(f"line {lineno}: invalid label {label!r}", field="label")
            subject = rec.get("subject")
            if subject is not None and (not isinstance(subject, int) or isinstance(subject, bool)):
                raise ValidationError(f"line {lineno}: must be int or null", field="subject")
            samples.append(Sample(
                label=label,
                skeleton=_as_array(rec["skeleton"], sk_shape, "skeleton", lineno),
                accel=_as_array(rec["accel"], ac_shape, "accel", lineno),
                subject=subject,
            ))
    if not samples:
        raise ValidationError("no samples", field="data")
    return Dataset(tuple(samples), meta)
