"""Adaptive-Confidence Semantic (ACS) objective for a student distilled from K teachers.

    total = L_KD + beta * L_MK + gamma * L_S
    L_KD  = L_C + alpha * L_K

* L_C   cross-entropy of the student against the labels
* L_K   mean over teachers of KL(teacher soft targets || student soft targets)
* L_MK  per-sample, confidence-weighted soft-target cross-entropy (weights ``omega``)
* L_S   mean squared distance between student and teacher fc0 features

Teacher outputs only ever enter as constants: gradients never reach teacher parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import ParameterError
from .models import ForwardOutput
from .numerics import autodiff as ad
from .numerics.autodiff import Var
from .numerics.functional import check_finite, cross_entropy, kl_div


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(1.0, ge=0)
    beta: float = Field(1.0, ge=0)
    gamma: float = Field(0.01, ge=0)
    temperature: float = Field(4.0, gt=0)
    # literal reading of the multi-teacher term: raw teacher logits as CE coefficients
    mk_raw_logits: bool = False
    # conventional T^2 scaling of the KL term
    kd_t_squared: bool = True
    # gate teachers on ce < gate_tau instead of argmax correctness
    gate_tau: float | None = Field(None, gt=0)


@dataclass
class LossBreakdown:
    l_c: float
    l_k: float
    l_kd: float
    l_mk: float
    l_s: float
    total: float
    omega: np.ndarray  # (B, K)
    ce: np.ndarray  # (B, K)
    graph: Var | None = field(default=None, repr=False)

    def scalars(self):
        return {"l_c": self.l_c, "l_k": self.l_k, "l_kd": self.l_kd,
                "l_mk": self.l_mk, "l_s": self.l_s, "l_total": self.total}


def _teacher_values(teachers):
    if len(teachers) < 1:
        raise ParameterError("need at least one teacher")
    Zs = [t.Z.value if isinstance(t.Z, Var) else np.asarray(t.Z) for t in teachers]
    Hs = [t.H.value if isinstance(t.H, Var) else np.asarray(t.H) for t in teachers]
    B, C = Zs[0].shape
    for z, h in zip(Zs, Hs):
        if z.shape != (B, C):
            raise ParameterError(f"teacher logits shape {z.shape} != {(B, C)}")
        if h.shape[0] != B or h.shape[1] != Hs[0].shape[1]:
            raise ParameterError("teacher features disagree in batch size or dimension")
    return Zs, Hs


def _softmax_np(z, temperature=1.0):
    s = z / temperature
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax_np(z):
    s = z - z.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def _check_labels(labels, B, C):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (B,):
        raise ParameterError(f"labels must have shape ({B},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ParameterError(f"labels out of range [0, {C})")
    return labels


def kd_loss(student: ForwardOutput, teachers, labels, w: LossWeights):
    """Return (L_C, L_K, L_KD) as Vars."""
    Zs, _ = _teacher_values(teachers)
    z_s = ad.as_var(student.Z)
    if z_s.value.shape != Zs[0].shape:
        raise ParameterError(f"student logits {z_s.value.shape} vs teacher {Zs[0].shape}")
    labels = _check_labels(labels, *z_s.value.shape)
    T = w.temperature
    l_c = cross_entropy(ad.softmax(z_s), labels)
    q_s = ad.softmax(z_s, T)
    terms = [kl_div(_softmax_np(z_t, T), q_s) for z_t in Zs]
    l_k = terms[0]
    for t in terms[1:]:
        l_k = ad.add(l_k, t)
    scale = 1.0 / len(terms)
    if w.kd_t_squared:
        scale *= T * T
    l_k = ad.scale(l_k, scale)
    l_kd = ad.add(l_c, ad.scale(l_k, w.alpha))
    return l_c, l_k, l_kd


def teacher_ce(teachers, labels):
    """Per-sample, per-teacher cross-entropy against the labels: (B, K)."""
    Zs, _ = _teacher_values(teachers)
    labels = _check_labels(labels, *Zs[0].shape)
    rows = np.arange(labels.shape[0])
    return np.stack([-_log_softmax_np(z)[rows, labels] for z in Zs], axis=1)


def adaptive_weights(ce, teacher_logits, labels, gate_tau=None):
    """Per-sample teacher weights.

    A teacher is eligible on a sample when its argmax is the true label (or, with
    ``gate_tau``, when its CE is below ``gate_tau``).  Eligible teachers get
    ``(1 - exp-share of their CE) / (K-1)``, renormalized to sum to 1; a single
    eligible teacher gets 1; a row with no eligible teacher is all zero.
    """
    ce = np.asarray(ce, dtype=np.float64)
    if ce.ndim != 2 or ce.shape[1] == 0:
        raise ParameterError(f"need ce of shape (B, K) with K >= 1, got {ce.shape}")
    B, K = ce.shape
    labels = np.asarray(labels, dtype=np.int64)
    if gate_tau is None:
        if len(teacher_logits) != K:
            raise ParameterError(f"{len(teacher_logits)} teacher logit sets for K={K}")
        eligible = np.stack([np.argmax(np.asarray(z), axis=1) == labels for z in teacher_logits], axis=1)
    else:
        eligible = ce < gate_tau

    omega = np.zeros((B, K))
    n_elig = eligible.sum(axis=1)
    single = n_elig == 1
    omega[single] = eligible[single].astype(np.float64)
    multi = n_elig >= 2
    if multi.any():
        c = np.where(eligible[multi], ce[multi], -np.inf)
        c = c - c.max(axis=1, keepdims=True)
        e = np.exp(c)
        share = e / e.sum(axis=1, keepdims=True)
        raw = np.where(eligible[multi], (1.0 - share) / (K - 1), 0.0)
        omega[multi] = raw / raw.sum(axis=1, keepdims=True)
        _sum_to_one(omega, eligible, np.flatnonzero(multi))
    return omega


def _sum_to_one(omega, eligible, rows):
    """Absorb the last-ulp renormalization error into each row's last eligible weight."""
    for b in rows:
        last = np.flatnonzero(eligible[b])[-1]
        for _ in range(4):
            err = 1.0 - omega[b].sum()
            if err == 0.0:
                break
            omega[b, last] += err


def multi_teacher_loss(omega, teachers, student: ForwardOutput, temperature, raw_logits=False):
    """Batch mean of -sum_k omega[b,k] sum_c target_k[b,c] log softmax(Z_S)[b,c]."""
    Zs, _ = _teacher_values(teachers)
    omega = np.asarray(omega)
    z_s = ad.as_var(student.Z)
    B = z_s.value.shape[0]
    if omega.shape != (B, len(Zs)):
        raise ParameterError(f"omega shape {omega.shape} != {(B, len(Zs))}")
    target = np.zeros_like(z_s.value)
    for k, z_t in enumerate(Zs):
        q = z_t if raw_logits else _softmax_np(z_t, temperature)
        target = target + omega[:, k:k + 1] * q
    logp = ad.log_softmax(z_s)
    # sign folded into the target so an all-zero omega gives +0.0, not -0.0
    per_sample = ad.sum_(ad.mul(logp, (-target).astype(z_s.value.dtype)), axis=1)
    return ad.mean(per_sample)


def semantic_loss(student: ForwardOutput, teachers):
    """(1/K) sum_k mean_b ||H_S[b] - H_Tk[b]||^2."""
    _, Hs = _teacher_values(teachers)
    h_s = ad.as_var(student.H)
    if h_s.value.shape != Hs[0].shape:
        raise ParameterError(f"semantic dims differ: student {h_s.value.shape}, teacher {Hs[0].shape}")
    total = None
    for h_t in Hs:
        d = ad.sub(h_s, h_t.astype(h_s.value.dtype))
        term = ad.mean(ad.sum_(ad.square(d), axis=1))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(Hs))


def total_loss(student: ForwardOutput, teachers, labels, w: LossWeights) -> LossBreakdown:
    l_c, l_k, l_kd = kd_loss(student, teachers, labels, w)
    Zs, _ = _teacher_values(teachers)
    ce = teacher_ce(teachers, labels)
    omega = adaptive_weights(ce, Zs, labels, w.gate_tau)
    l_mk = multi_teacher_loss(omega, teachers, student, w.temperature, w.mk_raw_logits)
    l_s = semantic_loss(student, teachers)
    total = ad.add(ad.add(l_kd, ad.scale(l_mk, w.beta)), ad.scale(l_s, w.gamma))
    check_finite(total, "total loss")
    return LossBreakdown(
        l_c=float(l_c.value), l_k=float(l_k.value), l_kd=float(l_kd.value),
        l_mk=float(l_mk.value), l_s=float(l_s.value), total=float(total.value),
        omega=omega, ce=ce, graph=total,
    )


def plain_st_loss(student: ForwardOutput, teacher: ForwardOutput, labels, alpha, temperature):
    """Single-teacher soft-target baseline: L_C + alpha * KL(teacher_T || student_T)."""
    z_s = ad.as_var(student.Z)
    z_t = teacher.Z.value if isinstance(teacher.Z, Var) else np.asarray(teacher.Z)
    if alpha < 0:
        raise ParameterError("alpha must be >= 0")
    labels = _check_labels(labels, *z_s.value.shape)
    l_c = cross_entropy(ad.softmax(z_s), labels)
    l_k = kl_div(_softmax_np(z_t, temperature), ad.softmax(z_s, temperature))
    return ad.add(l_c, ad.scale(l_k, alpha))
