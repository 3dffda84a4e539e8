"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradTape, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    per_param: dict = field(default_factory=dict)
    worst: tuple | None = None  # (param name, flat index)
    n_coords: int = 0


def finite_diff_check(loss_fn, params, h=1e-5, tol=1e-4):
    """Compare analytic gradients with central differences, coordinate by coordinate.

    ``loss_fn(params, tape)`` must build the loss from ``params`` (a dict of name to
    array, or of name to Var when a tape is given) and return a scalar Var.  It is
    called once with a tape and ``2 * n_coords`` times without.
    """
    tape = GradTape()
    watched = {k: tape.watch(k, np.array(v, dtype=np.float64)) for k, v in params.items()}
    analytic = backward(tape, loss_fn(watched, tape))

    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    worst_err, worst_at, n = 0.0, None, 0
    per_param = {}
    for name, arr in base.items():
        flat = arr.reshape(-1)
        g_an = analytic[name].reshape(-1)
        p_err = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(loss_fn(base, None).value)
            flat[i] = orig - h
            f_minus = float(loss_fn(base, None).value)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(g_an[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            n += 1
            if err > p_err:
                p_err = err
            if err > worst_err:
                worst_err, worst_at = err, (name, i)
        per_param[name] = p_err
    return GradCheckReport(worst_err, worst_err < tol, tol, per_param, worst_at, n)
