"""Training schedules: teacher pretraining, no-distill control, baseline KD, PSKD(k).

A :class:`Trainer` owns all mutable state of one run (three models, their
optimizer states, per-model shuffling streams).  Every random stream is derived
from ``(seed, role)`` alone, so a model's initialization and batch order do not
depend on which schedule drives it.  That is what makes the reduction identities
(e.g. PSKD(epochs) == baseline KD) hold bit-for-bit.
"""
from __future__ import annotations

import hashlib
import itertools
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .data import Dataset
from .errors import NumericDomainError, PSKDError, ParameterError, RunError
from .evaluation import evaluate_logits
from .losses import LossWeights, total_loss
from .models import ForwardOutput, Model, build_model, check_compatible, forward, make_specs, role_inputs
from .numerics import autodiff as ad
from .numerics.autodiff import GradTape
from .numerics.functional import cross_entropy
from .numerics.optim import adam_init, optimizer_step

TEACHERS = ("teacher_sk", "teacher_fu")
_ROLE_KEY = {"teacher_sk": 1, "teacher_fu": 2, "student": 3}


class Schedule(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Literal["no_distill", "baseline_kd", "pskd"] = "pskd"
    k: int = Field(1, ge=1)
    epochs: int = Field(60, ge=0)
    batch_size: int = Field(32, ge=1)
    lr_teacher: float = Field(1e-3, gt=0)
    lr_student: float = Field(1e-3, gt=0)
    teacher_warmup_epochs: int = Field(0, ge=0)
    precision: Literal["float64", "float32"] = "float64"

    @model_validator(mode="after")
    def _k_le_epochs(self):
        if self.mode == "pskd" and self.epochs > 0 and self.k > self.epochs:
            raise ValueError(f"k={self.k} exceeds epochs={self.epochs}")
        return self


def derive_seed(*keys) -> int:
    """Deterministic 32-bit seed from integer keys (order-sensitive)."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint32)[0])


def role_seeds(seed, role):
    """(init seed, shuffle seed) for one model of a run."""
    key = _ROLE_KEY[role]
    return derive_seed(seed, key, 0), derive_seed(seed, key, 1)


@dataclass
class EpochRecord:
    run_id: str
    seed: int
    mode: str
    k: int
    epoch: int
    model: str
    split: str
    l_c: float | None
    l_k: float | None
    l_kd: float | None
    l_mk: float | None
    l_s: float | None
    l_total: float | None
    accuracy: float
    macro_f1: float
    wall_ms: float | None = None

    def to_json(self):
        return asdict(self)


METRIC_KEYS = tuple(EpochRecord.__dataclass_fields__)


@dataclass
class TrainData:
    """Model-ready arrays for both splits."""

    train: dict
    y_train: np.ndarray
    test: dict
    y_test: np.ndarray
    num_classes: int
    meta: object = None

    @classmethod
    def from_dataset(cls, ds: Dataset, fused_length=None, dtype="float64"):
        train, y_train = role_inputs(ds, "train", fused_length, dtype)
        test, y_test = role_inputs(ds, "test", fused_length, dtype)
        if len(y_train) == 0 or len(y_test) == 0:
            raise ParameterError("both splits must be non-empty")
        return cls(train, y_train, test, y_test, ds.meta.num_classes, ds.meta)

    def astype(self, dtype):
        return TrainData({k: v.astype(dtype) for k, v in self.train.items()}, self.y_train,
                         {k: v.astype(dtype) for k, v in self.test.items()}, self.y_test,
                         self.num_classes, self.meta)


@dataclass
class Snapshot:
    """Frozen teacher copies plus their outputs on both splits."""

    models: dict
    train_out: list  # [ForwardOutput] in TEACHERS order, tape-free
    test_out: list

    def checksum(self):
        return {r: _params_digest(m) for r, m in self.models.items()}


def _params_digest(model):
    h = hashlib.sha256()
    for k, v in model.params.items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


def _full_outputs(model, x, chunk=512):
    Hs, Zs = [], []
    for i in range(0, len(x), chunk):
        out = forward(model, x[i:i + chunk])
        Hs.append(out.H.value)
        Zs.append(out.Z.value)
    return ForwardOutput(ad.Var(np.concatenate(Hs)), ad.Var(np.concatenate(Zs)))


def _slice_output(out, idx):
    return ForwardOutput(ad.Var(out.H.value[idx]), ad.Var(out.Z.value[idx]))


class _Learner:
    def __init__(self, role, spec, lr, seed, dtype):
        init_seed, shuffle_seed = role_seeds(seed, role)
        self.role = role
        self.model = build_model(spec, init_seed, dtype)
        self.opt = adam_init(self.model.params, lr=lr)
        self.rng = np.random.default_rng(shuffle_seed)
        self.epoch = 0

    def batches(self, n, batch_size):
        perm = self.rng.permutation(n)
        return [perm[i:i + batch_size] for i in range(0, n, batch_size)]

    def step(self, loss_of):
        """One optimizer step; ``loss_of(tape)`` returns (loss Var, extra)."""
        tape = GradTape()
        loss, extra = loss_of(tape)
        if not np.isfinite(loss.value):
            raise RunError("loss diverged (non-finite)", epoch=self.epoch + 1, model=self.role)
        grads = ad.backward(tape, loss)
        try:
            self.model.params, self.opt = optimizer_step(self.opt, self.model.params, grads)
        except NumericDomainError as e:
            raise RunError(f"optimizer refused step: {e}", epoch=self.epoch + 1, model=self.role) from e
        return loss, extra


class Trainer:
    """Mutable state for one (config, seed) run."""

    def __init__(self, data: TrainData, specs, schedule: Schedule, weights: LossWeights | None = None,
                 seed=0, run_id="run", sink: Callable | None = None, record_wall_time=False,
                 teacher_cache: "TeacherCache | None" = None):
        check_compatible(specs.values())
        if teacher_cache is not None:
            teacher_cache.check(data, specs, schedule, seed)
        self.teacher_cache = teacher_cache
        self.data = data
        self.specs = specs
        self.schedule = schedule
        self.weights = weights or LossWeights()
        self.seed = seed
        self.run_id = run_id
        self.records: list[EpochRecord] = []
        self.sink = sink
        self.record_wall_time = record_wall_time
        dtype = schedule.precision
        self.learners = {
            role: _Learner(role, specs[role], schedule.lr_teacher if role in TEACHERS else schedule.lr_student,
                           seed, dtype)
            for role in ("teacher_sk", "teacher_fu", "student")
        }

    # ------------------------------------------------------------ bookkeeping

    def _emit(self, model, split, losses, metrics, wall_ms):
        rec = EpochRecord(
            run_id=self.run_id, seed=self.seed, mode=self.schedule.mode, k=self.schedule.k,
            epoch=self.learners[model].epoch, model=model, split=split,
            l_c=losses.get("l_c"), l_k=losses.get("l_k"), l_kd=losses.get("l_kd"),
            l_mk=losses.get("l_mk"), l_s=losses.get("l_s"), l_total=losses.get("l_total"),
            accuracy=metrics.accuracy, macro_f1=metrics.macro_f1,
            wall_ms=wall_ms if self.record_wall_time else None,
        )
        self.records.append(rec)
        if self.sink is not None:
            self.sink(rec)

    def model(self, role) -> Model:
        return self.learners[role].model

    # ------------------------------------------------------------ epochs

    def teacher_epoch(self, role):
        if self.teacher_cache is not None:
            self._replay_teacher_epoch(role)
            return
        lr = self.learners[role]
        x, y = self.data.train[role], self.data.y_train
        t0 = time.perf_counter()
        acc_loss, n = 0.0, 0
        for idx in lr.batches(len(y), self.schedule.batch_size):
            def loss_of(tape, idx=idx):
                out = forward(lr.model, x[idx], tape)
                return cross_entropy(ad.softmax(out.Z), y[idx]), None

            loss, _ = lr.step(loss_of)
            acc_loss += float(loss.value) * len(idx)
            n += len(idx)
        lr.epoch += 1
        wall = (time.perf_counter() - t0) * 1000.0
        train_l = acc_loss / n
        self._eval_teacher(role, train_l, wall)

    def _eval_teacher(self, role, train_loss, wall):
        m = self.learners[role].model
        out_tr = _full_outputs(m, self.data.train[role])
        met_tr, _ = evaluate_logits(out_tr.Z.value, self.data.y_train, self.data.num_classes)
        self._emit(role, "train", {"l_c": train_loss, "l_total": train_loss}, met_tr, wall)
        out_te = _full_outputs(m, self.data.test[role])
        l_te = float(cross_entropy(ad.softmax(out_te.Z), self.data.y_test).value)
        met_te, _ = evaluate_logits(out_te.Z.value, self.data.y_test, self.data.num_classes)
        self._emit(role, "test", {"l_c": l_te, "l_total": l_te}, met_te, wall)

    def _replay_teacher_epoch(self, role):
        lr = self.learners[role]
        lr.epoch += 1
        lr.model = self.teacher_cache.model(role, lr.epoch)
        for rec in self.teacher_cache.records(role, lr.epoch):
            rec = replace(rec, run_id=self.run_id, mode=self.schedule.mode, k=self.schedule.k,
                          wall_ms=rec.wall_ms if self.record_wall_time else None)
            self.records.append(rec)
            if self.sink is not None:
                self.sink(rec)

    def snapshot(self) -> Snapshot:
        if self.teacher_cache is not None:
            return self.teacher_cache.snapshot(*(self.learners[r].epoch for r in TEACHERS))
        models = {r: self.learners[r].model.copy() for r in TEACHERS}
        train_out = [_full_outputs(models[r], self.data.train[r]) for r in TEACHERS]
        test_out = [_full_outputs(models[r], self.data.test[r]) for r in TEACHERS]
        return Snapshot(models, train_out, test_out)

    def student_epoch(self, snap: Snapshot | None):
        """One student epoch: ACS loss against ``snap``, or plain CE when ``snap`` is None."""
        lr = self.learners["student"]
        x, y = self.data.train["student"], self.data.y_train
        w = self.weights
        t0 = time.perf_counter()
        sums = {}
        n = 0
        for idx in lr.batches(len(y), self.schedule.batch_size):
            def loss_of(tape, idx=idx):
                out = forward(lr.model, x[idx], tape)
                if snap is None:
                    l_c = cross_entropy(ad.softmax(out.Z), y[idx])
                    v = float(l_c.value)
                    return l_c, {"l_c": v, "l_total": v}
                teachers = [_slice_output(o, idx) for o in snap.train_out]
                br = total_loss(out, teachers, y[idx], w)
                return br.graph, br.scalars()

            _, scalars = lr.step(loss_of)
            for key, v in scalars.items():
                sums[key] = sums.get(key, 0.0) + v * len(idx)
            n += len(idx)
        lr.epoch += 1
        wall = (time.perf_counter() - t0) * 1000.0
        train_losses = {key: v / n for key, v in sums.items()}
        self._eval_student(snap, train_losses, wall)

    def _eval_student(self, snap, train_losses, wall):
        m = self.learners["student"].model
        out_tr = _full_outputs(m, self.data.train["student"])
        met_tr, _ = evaluate_logits(out_tr.Z.value, self.data.y_train, self.data.num_classes)
        self._emit("student", "train", train_losses, met_tr, wall)
        out_te = _full_outputs(m, self.data.test["student"])
        if snap is None:
            v = float(cross_entropy(ad.softmax(out_te.Z), self.data.y_test).value)
            test_losses = {"l_c": v, "l_total": v}
        else:
            test_losses = total_loss(out_te, snap.test_out, self.data.y_test, self.weights).scalars()
        met_te, _ = evaluate_logits(out_te.Z.value, self.data.y_test, self.data.num_classes)
        self._emit("student", "test", test_losses, met_te, wall)

    # ------------------------------------------------------------ schedules

    def run_teachers(self, epochs):
        for role in TEACHERS:
            for _ in range(epochs):
                self.teacher_epoch(role)

    def run_no_distill(self):
        for _ in range(self.schedule.epochs):
            self.student_epoch(None)

    def run_baseline(self, snap: Snapshot | None = None):
        if snap is None:
            self.run_teachers(self.schedule.teacher_warmup_epochs + self.schedule.epochs)
            snap = self.snapshot()
        for _ in range(self.schedule.epochs):
            self.student_epoch(snap)
        return snap

    def run_pskd(self, on_window: Callable | None = None):
        sch = self.schedule
        self.run_teachers(sch.teacher_warmup_epochs)
        done = 0
        while done < sch.epochs:
            n = min(sch.k, sch.epochs - done)
            self.run_teachers(n)
            snap = self.snapshot()
            before = snap.checksum() if on_window else None
            for _ in range(n):
                self.student_epoch(snap)
            if on_window:
                on_window(snap, before, snap.checksum())
            done += n

    def run(self):
        mode = self.schedule.mode
        if mode == "no_distill":
            self.run_no_distill()
        elif mode == "baseline_kd":
            self.run_baseline()
        else:
            self.run_pskd()
        return self


class TeacherCache:
    """Per-epoch teacher states of one seed, replayable into any schedule.

    Teacher training never sees the student, so its trajectory depends only on
    (data, specs, teacher lr, batch size, precision, seed).  Replaying it is
    bit-identical to recomputing it and saves most of the cost of multi-arm
    experiments.
    """

    def __init__(self, data: TrainData, specs, schedule: Schedule, seed, epochs, record_wall_time=True):
        self._key = self._make_key(data, specs, schedule, seed)
        self.epochs = epochs
        tr = Trainer(data, specs, schedule, seed=seed, record_wall_time=record_wall_time)
        self._models = {r: [None] for r in TEACHERS}
        self._records = {r: [None] for r in TEACHERS}
        for role in TEACHERS:
            for _ in range(epochs):
                n0 = len(tr.records)
                tr.teacher_epoch(role)
                self._models[role].append(tr.model(role).copy())
                self._records[role].append(tr.records[n0:])
        self._data = data
        self._snaps = {}

    @staticmethod
    def _make_key(data, specs, schedule, seed):
        return (id(data), tuple(sorted((r, s) for r, s in specs.items())), schedule.lr_teacher,
                schedule.batch_size, schedule.precision, seed)

    def check(self, data, specs, schedule, seed):
        if self._make_key(data, specs, schedule, seed) != self._key:
            raise ParameterError("teacher cache was built for a different data/spec/schedule/seed")
        need = schedule.teacher_warmup_epochs + schedule.epochs
        if schedule.mode != "no_distill" and need > self.epochs:
            raise ParameterError(f"teacher cache holds {self.epochs} epochs, schedule needs {need}")

    def model(self, role, epoch):
        return self._models[role][epoch]

    def records(self, role, epoch):
        return self._records[role][epoch]

    def snapshot(self, e_sk, e_fu):
        key = (e_sk, e_fu)
        if key not in self._snaps:
            models = {"teacher_sk": self._models["teacher_sk"][e_sk].copy(),
                      "teacher_fu": self._models["teacher_fu"][e_fu].copy()}
            train_out = [_full_outputs(models[r], self._data.train[r]) for r in TEACHERS]
            test_out = [_full_outputs(models[r], self._data.test[r]) for r in TEACHERS]
            self._snaps[key] = Snapshot(models, train_out, test_out)
        return self._snaps[key]


# ---------------------------------------------------------------- functional entry points

def _specs_for(data: TrainData, specs):
    if specs is not None:
        return specs
    if data.meta is None:
        raise ParameterError("specs required when data carries no dataset meta")
    return make_specs(data.meta)


def _wrap_errors(fn):
    def inner(*a, **kw):
        try:
            return fn(*a, **kw)
        except RunError:
            raise
        except NumericDomainError as e:
            raise RunError(str(e)) from e

    inner.__name__ = fn.__name__
    inner.__doc__ = fn.__doc__
    return inner


@_wrap_errors
def pretrain_teachers(data: TrainData, specs=None, schedule: Schedule | None = None, seed=0, **kw):
    """Teacher_sk and Teacher_fu trained with plain CE on their own inputs."""
    schedule = schedule or Schedule()
    tr = Trainer(data, _specs_for(data, specs), schedule, seed=seed, **kw)
    tr.run_teachers(schedule.teacher_warmup_epochs + schedule.epochs)
    return tr.model("teacher_sk"), tr.model("teacher_fu"), tr


@_wrap_errors
def train_no_distill(data: TrainData, specs=None, schedule: Schedule | None = None, seed=0, **kw):
    schedule = (schedule or Schedule()).model_copy(update={"mode": "no_distill"})
    tr = Trainer(data, _specs_for(data, specs), schedule, seed=seed, **kw)
    tr.run_no_distill()
    return tr.model("student"), tr


@_wrap_errors
def train_baseline_kd(data: TrainData, specs=None, schedule: Schedule | None = None,
                      weights: LossWeights | None = None, seed=0, snapshot: Snapshot | None = None, **kw):
    """Student distilled from teachers pretrained for the full budget and then frozen.

    ``snapshot`` lets several students share one set of pretrained teachers; it must
    come from a run with the same seed and schedule to match a standalone run.
    """
    schedule = (schedule or Schedule()).model_copy(update={"mode": "baseline_kd"})
    tr = Trainer(data, _specs_for(data, specs), schedule, weights, seed=seed, **kw)
    snap = tr.run_baseline(snapshot)
    return tr.model("student"), snap, tr


@_wrap_errors
def train_pskd(data: TrainData, specs=None, schedule: Schedule | None = None,
               weights: LossWeights | None = None, seed=0, on_window=None, **kw):
    """Alternate k teacher epochs with k student epochs against the fresh snapshot."""
    schedule = (schedule or Schedule()).model_copy(update={"mode": "pskd"})
    tr = Trainer(data, _specs_for(data, specs), schedule, weights, seed=seed, **kw)
    tr.run_pskd(on_window)
    return tr.model("student"), (tr.model("teacher_sk"), tr.model("teacher_fu")), tr


def run_schedule(data, specs, schedule, weights, seed, **kw) -> Trainer:
    if schedule.mode == "no_distill":
        return train_no_distill(data, specs, schedule, seed=seed, **kw)[-1]
    if schedule.mode == "baseline_kd":
        return train_baseline_kd(data, specs, schedule, weights, seed=seed, **kw)[-1]
    return train_pskd(data, specs, schedule, weights, seed=seed, **kw)[-1]


def final_metrics(records, model="student", split="test"):
    """Last record for (model, split)."""
    last = None
    for r in records:
        if r.model == model and r.split == split:
            last = r
    if last is None:
        raise ParameterError(f"no records for {model}/{split}")
    return last


# ---------------------------------------------------------------- grid search

@dataclass
class GridCell:
    index: int
    alpha: float
    beta: float
    gamma: float
    seed: int
    accuracy: float | None = None
    macro_f1: float | None = None
    status: str = "ok"
    records: list = field(default_factory=list, repr=False)


def expand_grid(grid):
    """``{"alpha": [...], "beta": [...], "gamma": [...]}`` -> list of (a, b, g) in product order."""
    if isinstance(grid, dict):
        axes = [list(grid.get(k, [None])) for k in ("alpha", "beta", "gamma")]
        cells = list(itertools.product(*axes))
    else:
        cells = [tuple(c) for c in grid]
    if not cells:
        raise ParameterError("grid is empty")
    return cells


def grid_search(data: TrainData, specs, schedule: Schedule, weights: LossWeights, grid, base_seed=0):
    """One run per cell with seed ``derive_seed(base_seed, cell_index)``.

    Returns (cells, best cell).  Best is the highest final student test accuracy,
    ties broken by the lexicographically smallest (alpha, beta, gamma).
    A failing cell is kept with its error as status.
    """
    cells = []
    for i, (a, b, g) in enumerate(expand_grid(grid)):
        upd = {k: v for k, v in (("alpha", a), ("beta", b), ("gamma", g)) if v is not None}
        w = weights.model_copy(update=upd)
        cell = GridCell(i, w.alpha, w.beta, w.gamma, derive_seed(base_seed, i))
        try:
            tr = run_schedule(data, specs, schedule, w, cell.seed)
            last = final_metrics(tr.records)
            cell.accuracy, cell.macro_f1, cell.records = last.accuracy, last.macro_f1, tr.records
        except PSKDError as e:
            cell.status = f"error: {e}"
        cells.append(cell)
    ok = [c for c in cells if c.status == "ok"]
    best = min(ok, key=lambda c: (-c.accuracy, c.alpha, c.beta, c.gamma)) if ok else None
    return cells, best


def mean_std(values):
    values = [v for v in values if v is not None and not math.isnan(v)]
    if not values:
        return float("nan"), float("nan")
    arr = np.array(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())
