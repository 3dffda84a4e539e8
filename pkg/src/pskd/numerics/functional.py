"""Probability-level building blocks used by every loss.

Each function accepts either plain arrays or :class:`Var` objects.  Arrays in,
arrays out; a ``Var`` in gives a ``Var`` out so the call is recorded on its tape.
"""
from __future__ import annotations

import numpy as np

from ..errors import NumericDomainError, ParameterError
from . import autodiff as ad
from .autodiff import PROB_EPS, Var

DEFAULT_TEMPERATURE = 4.0


def _unwrap_like(result, *inputs):
    if any(isinstance(x, Var) for x in inputs):
        return result
    return result.value


def _lift(x):
    if isinstance(x, Var):
        return x
    x = np.asarray(x)
    return Var(x if x.dtype.kind == "f" else x.astype(np.float64))


def check_finite(x, what="value"):
    v = x.value if isinstance(x, Var) else np.asarray(x)
    if not np.all(np.isfinite(v)):
        raise NumericDomainError(f"non-finite {what}")
    return x


def _as_matrix(x, what):
    v = x.value if isinstance(x, Var) else np.asarray(x)
    if v.ndim != 2:
        raise ParameterError(f"{what} must be 2-D (B x C), got shape {v.shape}")
    return v


def softmax_temp(logits, temperature=DEFAULT_TEMPERATURE):
    """Row-wise softmax of ``logits / temperature``."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    _as_matrix(logits, "logits")
    check_finite(logits, "logits")
    z = _lift(logits)
    return _unwrap_like(ad.softmax(z, temperature), logits)


def log_softmax_temp(logits, temperature=1.0):
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    _as_matrix(logits, "logits")
    check_finite(logits, "logits")
    z = _lift(logits)
    return _unwrap_like(ad.log_softmax(z, temperature), logits)


def kl_div(p, q):
    """Mean over rows of KL(p_b || q_b); q is clamped at 1e-12, 0*ln 0 = 0."""
    pv, qv = _as_matrix(p, "p"), _as_matrix(q, "q")
    if pv.shape != qv.shape:
        raise ParameterError(f"kl_div shape mismatch: {pv.shape} vs {qv.shape}")
    out = ad.mean(ad.kl_rows(_lift(p), _lift(q)))
    return _unwrap_like(check_finite(out, "kl_div"), p, q)


def cross_entropy(probs, labels):
    """Mean over rows of -ln probs[b, labels[b]], probabilities clamped at 1e-12."""
    pv = _as_matrix(probs, "probs")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != pv.shape[0]:
        raise ParameterError(f"labels must be a vector of length {pv.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= pv.shape[1]):
        raise ParameterError(f"label out of range [0, {pv.shape[1]})")
    picked = ad.take_labels(_lift(probs), labels.astype(np.int64))
    out = ad.scale(ad.mean(ad.log(picked, PROB_EPS)), -1.0)
    return _unwrap_like(check_finite(out, "cross_entropy"), probs)
