"""Temporal-convolution encoders for the two teachers and the student.

All three share one trunk::

    conv1d(k) -> ReLU -> conv1d(k) -> ReLU -> mean over time -> fc0 -> ReLU -> fc1

``fc0`` activations are the semantic features H, ``fc1`` outputs the logits Z.
The joint (or sensor) axis is folded into channels, so inputs are (B, channels, T).
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import C_AC, C_SK, Dataset, fuse_modalities
from .errors import LoadError, ParameterError
from .numerics import autodiff as ad
from .numerics.autodiff import GradTape, Var

ROLES = ("teacher_sk", "teacher_fu", "student")
MAGIC = b"PSKD"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass(frozen=True)
class EncoderSpec:
    role: str
    in_channels: int
    num_classes: int
    widths: tuple = (16, 32)
    kernel_size: int = 5
    d_sem: int = 64

    def __post_init__(self):
        if self.role not in ROLES:
            raise ParameterError(f"unknown role {self.role!r}")
        if self.in_channels < 1 or self.num_classes < 2 or self.d_sem < 1:
            raise ParameterError(f"invalid encoder dims: {self}")
        if len(self.widths) < 1 or any(w < 1 for w in self.widths):
            raise ParameterError(f"conv widths must be positive, got {self.widths}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ParameterError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")

    def to_json(self):
        return {"role": self.role, "in_channels": self.in_channels, "num_classes": self.num_classes,
                "widths": list(self.widths), "kernel_size": self.kernel_size, "d_sem": self.d_sem}

    @classmethod
    def from_json(cls, d):
        return cls(d["role"], d["in_channels"], d["num_classes"], tuple(d["widths"]),
                   d["kernel_size"], d["d_sem"])

    def param_shapes(self):
        shapes = {}
        cin = self.in_channels
        for i, w in enumerate(self.widths):
            shapes[f"conv{i}.w"] = (w, cin, self.kernel_size)
            shapes[f"conv{i}.b"] = (w,)
            cin = w
        shapes["fc0.w"] = (cin, self.d_sem)
        shapes["fc0.b"] = (self.d_sem,)
        shapes["fc1.w"] = (self.d_sem, self.num_classes)
        shapes["fc1.b"] = (self.num_classes,)
        return shapes


def role_in_channels(role, n_sk, s_ac=1):
    if role == "teacher_sk":
        return C_SK * n_sk
    if role == "teacher_fu":
        return (C_SK + C_AC) * n_sk
    if role == "student":
        return C_AC * s_ac
    raise ParameterError(f"unknown role {role!r}")


def make_specs(meta, widths=(16, 32), kernel_size=5, d_sem=64):
    """One spec per role for a dataset; all share ``d_sem`` and the class count."""
    return {
        role: EncoderSpec(role, role_in_channels(role, meta.n_sk, meta.s_ac), meta.num_classes,
                          tuple(widths), kernel_size, d_sem)
        for role in ROLES
    }


def check_compatible(specs):
    specs = list(specs)
    if len({s.d_sem for s in specs}) != 1:
        raise ParameterError(f"semantic dims differ across models: {[s.d_sem for s in specs]}")
    if len({s.num_classes for s in specs}) != 1:
        raise ParameterError("class counts differ across models")


@dataclass(eq=False)
class Model:
    spec: EncoderSpec
    params: dict
    seed: int | None = None

    @property
    def n_params(self):
        return sum(p.size for p in self.params.values())

    def copy(self):
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()}, self.seed)


@dataclass(frozen=True)
class ForwardOutput:
    H: Var  # (B, d_sem)
    Z: Var  # (B, C)
    tape: GradTape | None = field(default=None, repr=False)


def build_model(spec: EncoderSpec, seed, dtype="float64") -> Model:
    """Fan-in scaled uniform weights, zero biases, drawn in declaration order."""
    if dtype not in _DTYPES:
        raise ParameterError(f"unsupported dtype {dtype!r}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
        bound = math.sqrt(6.0 / fan_in) if name != "fc1.w" else 1.0 / math.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Model(spec, params, seed)


def forward_params(spec, params, batch):
    """Trunk forward on ``params`` values, which may be arrays or watched Vars."""
    batch = batch if isinstance(batch, Var) else Var(np.asarray(batch))
    v = batch.value
    if v.ndim != 3 or v.shape[1] != spec.in_channels:
        raise ParameterError(
            f"{spec.role} expects batches of shape (B, {spec.in_channels}, T), got {v.shape}")
    # conv trunk runs time-major: (B, T, C)
    h = Var(np.ascontiguousarray(v.transpose(0, 2, 1)))
    for i in range(len(spec.widths)):
        h = ad.relu(ad.conv1d(h, params[f"conv{i}.w"], params[f"conv{i}.b"]))
    h = ad.mean(h, axis=1)
    H = ad.relu(ad.add(ad.matmul(h, params["fc0.w"]), params["fc0.b"]))
    Z = ad.add(ad.matmul(H, params["fc1.w"]), params["fc1.b"])
    return H, Z


def forward(model: Model, batch, tape: GradTape | None = None) -> ForwardOutput:
    """Inference when ``tape`` is None; otherwise parameters are watched on ``tape``."""
    if tape is None:
        params = model.params
    else:
        params = {k: tape.watch(k, v) for k, v in model.params.items()}
    batch = np.asarray(batch, dtype=next(iter(model.params.values())).dtype)
    H, Z = forward_params(model.spec, params, batch)
    return ForwardOutput(H, Z, tape)


def predict_logits(model, x, chunk=512):
    out = [forward(model, x[i:i + chunk]).Z.value for i in range(0, len(x), chunk)]
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------- input layouts

def fold_skeleton(sk):
    """(n, C, T, N) -> (n, C*N, T), channel index c*N + j."""
    n, c, t, j = sk.shape
    return np.ascontiguousarray(sk.transpose(0, 1, 3, 2).reshape(n, c * j, t))


def fold_accel(ac):
    """(n, C, S, T) -> (n, C*S, T)."""
    n, c, s, t = ac.shape
    return np.ascontiguousarray(ac.reshape(n, c * s, t))


def role_inputs(ds: Dataset, split=None, fused_length=None, dtype="float64"):
    """Model-ready input arrays for every role, plus labels, for one split."""
    idx = ds.indices(split)
    T = fused_length or ds.meta.t_sk
    sk = np.stack([ds.samples[i].skeleton for i in idx])
    ac = np.stack([ds.samples[i].accel for i in idx])
    fu = np.stack([fuse_modalities(ds.samples[i].skeleton, ds.samples[i].accel, T) for i in idx])
    return {
        "teacher_sk": fold_skeleton(sk).astype(dtype),
        "teacher_fu": fold_skeleton(fu).astype(dtype),
        "student": fold_accel(ac).astype(dtype),
    }, ds.labels(split)


# ---------------------------------------------------------------- checkpoints

def save_model(model: Model, path):
    dtype = next(iter(model.params.values())).dtype.name
    if dtype not in _DTYPES:
        raise ParameterError(f"cannot checkpoint dtype {dtype}")
    header = {
        "spec": model.spec.to_json(),
        "seed": model.seed,
        "dtype": dtype,
        "params": [[k, list(v.shape)] for k, v in model.params.items()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(v, dtype=_DTYPES[dtype]).tobytes() for v in model.params.values())
    blob = MAGIC + struct.pack("<II", FORMAT_VERSION, len(hbytes)) + hbytes + payload
    blob += struct.pack("<Q", len(payload))
    Path(path).write_bytes(blob)


def load_model(path) -> Model:
    blob = Path(path).read_bytes()
    if len(blob) < 12 + 8 or blob[:4] != MAGIC:
        raise LoadError(f"{path}: not a pskd checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise LoadError(f"{path}: unsupported format version {version}")
    if 12 + hlen + 8 > len(blob):
        raise LoadError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
        spec = EncoderSpec.from_json(header["spec"])
        dtype = header["dtype"]
        layout = [(k, tuple(s)) for k, s in header["params"]]
    except (ValueError, KeyError, TypeError, ParameterError) as e:
        raise LoadError(f"{path}: malformed header ({e})") from e
    if dtype not in _DTYPES:
        raise LoadError(f"{path}: unknown dtype {dtype!r}")
    expected = spec.param_shapes()
    if dict(layout) != expected or [k for k, _ in layout] != list(expected):
        raise LoadError(f"{path}: parameter layout disagrees with spec")
    itemsize = np.dtype(_DTYPES[dtype]).itemsize
    n_bytes = sum(int(np.prod(s)) for _, s in layout) * itemsize
    payload = blob[12 + hlen:-8]
    (footer,) = struct.unpack("<Q", blob[-8:])
    if len(payload) != n_bytes or footer != n_bytes:
        raise LoadError(f"{path}: payload length {len(payload)} (footer {footer}) but spec needs {n_bytes}")
    params, off = {}, 0
    for name, shape in layout:
        n = int(np.prod(shape)) * itemsize
        params[name] = np.frombuffer(payload[off:off + n], dtype=_DTYPES[dtype]).astype(dtype).reshape(shape)
        off += n
    return Model(spec, params, header.get("seed"))
