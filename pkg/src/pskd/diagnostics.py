"""Finite-difference checks of every loss term on small random networks."""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass

import numpy as np

from .losses import LossWeights, kd_loss, multi_teacher_loss, semantic_loss, teacher_ce, adaptive_weights, total_loss
from .models import EncoderSpec, ForwardOutput, build_model, forward, forward_params
from .numerics import autodiff as ad
from .numerics.functional import cross_entropy
from .numerics.gradcheck import finite_diff_check

LOSS_TERMS = ("l_c", "l_k", "l_mk", "l_s", "total", "teacher_sk_ce", "teacher_fu_ce")


@dataclass
class GradCheckSummary:
    reports: dict  # term -> GradCheckReport
    n_params: int
    seconds: float

    @property
    def passed(self):
        return all(r.passed for r in self.reports.values())

    def lines(self):
        out = []
        for term, r in self.reports.items():
            flag = "ok  " if r.passed else "FAIL"
            out.append(f"{flag} {term:14s} max_rel_err={r.max_rel_error:.3e} tol={r.tol:.0e} coords={r.n_coords}")
        return out


def small_setup(seed=0, num_classes=3, n_sk=2, t_sk=8, t_ac=10, batch=4, widths=(4, 4), kernel_size=3, d_sem=6):
    """Random teachers, student and a batch whose labels make both teachers eligible on some rows."""
    rng = np.random.default_rng(seed)
    specs = {
        "teacher_sk": EncoderSpec("teacher_sk", 3 * n_sk, num_classes, widths, kernel_size, d_sem),
        "teacher_fu": EncoderSpec("teacher_fu", 6 * n_sk, num_classes, widths, kernel_size, d_sem),
        "student": EncoderSpec("student", 3, num_classes, widths, kernel_size, d_sem),
    }
    models = {role: build_model(s, seed=seed + i + 1) for i, (role, s) in enumerate(specs.items())}
    # zero biases put pre-activations exactly on the ReLU kink wherever a whole
    # receptive field is dead; random biases keep the check on smooth ground
    for m in models.values():
        for k, v in m.params.items():
            if k.endswith(".b"):
                m.params[k] = rng.normal(0.0, 0.1, size=v.shape)
    x = {
        "teacher_sk": rng.normal(size=(batch, 3 * n_sk, t_sk)),
        "teacher_fu": rng.normal(size=(batch, 6 * n_sk, t_sk)),
        "student": rng.normal(size=(batch, 3, t_ac)),
    }
    pred_sk = np.argmax(forward(models["teacher_sk"], x["teacher_sk"]).Z.value, axis=1)
    labels = rng.integers(0, num_classes, size=batch)
    labels[: batch // 2] = pred_sk[: batch // 2]
    return specs, models, x, labels


def run_gradchecks(weights: LossWeights | None = None, seed=0, h=1e-5, tol=1e-4, kernel_size=3,
                   corrupt: str | None = None, factor=1.1) -> GradCheckSummary:
    w = weights or LossWeights(alpha=1.0, beta=1.0, gamma=0.5, kd_t_squared=False)
    t0 = time.perf_counter()
    specs, models, x, labels = small_setup(seed=seed, kernel_size=kernel_size)
    teachers = [forward(models[r], x[r]) for r in ("teacher_sk", "teacher_fu")]
    t_const = [ForwardOutput(ad.Var(t.H.value), ad.Var(t.Z.value)) for t in teachers]
    s_spec, s_params = specs["student"], models["student"].params
    omega = adaptive_weights(teacher_ce(t_const, labels), [t.Z.value for t in t_const], labels, w.gate_tau)

    def student_out(params):
        H, Z = forward_params(s_spec, params, x["student"])
        return ForwardOutput(H, Z)

    closures = {
        "l_c": lambda p, tape: kd_loss(student_out(p), t_const, labels, w)[0],
        "l_k": lambda p, tape: kd_loss(student_out(p), t_const, labels, w)[1],
        "l_mk": lambda p, tape: multi_teacher_loss(omega, t_const, student_out(p), w.temperature, w.mk_raw_logits),
        "l_s": lambda p, tape: semantic_loss(student_out(p), t_const),
        "total": lambda p, tape: total_loss(student_out(p), t_const, labels, w).graph,
    }

    def teacher_closure(role):
        spec = specs[role]

        def fn(p, tape):
            _, Z = forward_params(spec, p, x[role])
            return cross_entropy(ad.softmax(Z), labels)
        return fn

    ctx = ad.corrupted_backward(corrupt, factor) if corrupt else contextlib.nullcontext()
    reports = {}
    with ctx:
        for term, fn in closures.items():
            reports[term] = finite_diff_check(fn, s_params, h=h, tol=tol)
        for role in ("teacher_sk", "teacher_fu"):
            reports[f"{role}_ce"] = finite_diff_check(teacher_closure(role), models[role].params, h=h, tol=tol)
    n_params = sum(m.n_params for m in models.values())
    return GradCheckSummary(reports, n_params, time.perf_counter() - t0)
