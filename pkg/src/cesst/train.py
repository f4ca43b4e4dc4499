"""Adam with cosine annealing, resumable training, evaluation and ablation runs."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import CesstConfig, ConfigError
from .data import Dataset, DataError, HsiCube
from .losses import LossConfig, loss_terms
from .metrics import MetricReport, average_reports, metric_suite
from .model import CESST, cesst_infer, count_model_macs, make_variant
from .serialize import load_checkpoint, save_checkpoint
from .tensor import NonFiniteError, Tensor, backward

CHECKPOINT_NAME = "checkpoint.ckpt"
SNAPSHOT_NAME = "nonfinite_snapshot.ckpt"


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, snapshot: Optional[str] = None):
        super().__init__(message)
        self.snapshot = snapshot


# ---------------------------------------------------------------- optimizer
@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr0: float = 2e-4

    def tensors(self) -> dict:
        out = {f"adam_m/{k}": a for k, a in self.m.items()}
        out.update({f"adam_v/{k}": a for k, a in self.v.items()})
        return out

    def meta(self) -> dict:
        return {"t": self.t, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "lr0": self.lr0}

    @classmethod
    def restore(cls, tensors: dict, meta: dict) -> "OptimState":
        m = {k[len("adam_m/"):]: a for k, a in tensors.items() if k.startswith("adam_m/")}
        v = {k[len("adam_v/"):]: a for k, a in tensors.items() if k.startswith("adam_v/")}
        return cls(m, v, **meta)


def adam_step(params: dict, grads: dict, state: OptimState, lr: Optional[float] = None) -> dict:
    """One bias-corrected Adam update; ``params`` arrays are updated in place and returned."""
    lr = state.lr0 if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass(frozen=True)
class Schedule:
    total_steps: int
    lr0: float = 2e-4
    lr_min: float = 1e-6

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("schedule needs total_steps >= 1")


def cosine_lr(step: int, sched: Schedule) -> float:
    """lr_min + (lr0 - lr_min) * (1 + cos(pi * step / T)) / 2; clamps to lr_min past T."""
    if step >= sched.total_steps:
        return sched.lr_min
    step = max(step, 0)
    return sched.lr_min + (sched.lr0 - sched.lr_min) * (1 + math.cos(math.pi * step / sched.total_steps)) / 2


# ---------------------------------------------------------------- training
@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 1
    crop: int = 32
    lr0: float = 2e-4
    lr_min: float = 1e-6
    augment: bool = True
    grad_clip: Optional[float] = None
    checkpoint_every: int = 0
    eval_every: int = 0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> "TrainConfig":
        if self.steps < 1 or self.batch_size < 1 or self.crop < 4:
            raise ConfigError("steps and batch_size must be >= 1, crop >= 4")
        if self.crop % 16:
            raise ConfigError(f"crop must be a multiple of 16, got {self.crop}")
        if self.lr0 <= 0 or self.lr_min < 0 or self.lr_min > self.lr0:
            raise ConfigError("need 0 <= lr_min <= lr0 and lr0 > 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training keys: {unknown}")
        if "loss" in d:
            try:
                d["loss"] = LossConfig(**d["loss"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad loss config: {exc}") from exc
        try:
            return cls(**d).validate()
        except TypeError as exc:
            raise ConfigError(f"bad training config: {exc}") from exc


@dataclass
class RunRecord:
    steps: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    def log(self, step: int, terms: dict, lr: float, wallclock: float) -> None:
        if self.steps and step <= self.steps[-1]["step"]:
            raise ValueError("step index must increase")
        self.steps.append({"step": step, **terms, "lr": lr, "wallclock": wallclock})

    def losses(self, key: str = "total") -> list:
        return [s[key] for s in self.steps]

    def to_dict(self) -> dict:
        return {"steps": self.steps, "evals": self.evals}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(list(d.get("steps", [])), list(d.get("evals", [])))


@dataclass
class TrainResult:
    model: CESST
    state: OptimState
    record: RunRecord
    step: int
    checkpoint: Optional[str] = None


def _clip(grads: dict, max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] *= grads[k].dtype.type(scale)


def save_training_state(path, model: CESST, state: OptimState, step: int, tcfg: TrainConfig,
                        record: Optional[RunRecord] = None, extra: Optional[dict] = None) -> str:
    tensors = {f"model/{k}": a for k, a in model.state_dict().items()}
    tensors.update(state.tensors())
    meta = {"step": step, "optim": state.meta(), "model_config": model.cfg.to_dict(),
            "train_config": tcfg.to_dict(), "record": record.to_dict() if record else None}
    if extra:
        meta.update(extra)
    save_checkpoint(path, tensors, meta)
    return str(path)


def load_model(path, dtype=np.float32) -> tuple[CESST, dict, dict]:
    """Rebuild the model described by a checkpoint; returns (model, tensors, metadata)."""
    tensors, meta = load_checkpoint(path)
    if "model_config" not in meta:
        raise DataError(f"{path} is not a model checkpoint")
    model = CESST(CesstConfig.from_dict(meta["model_config"]), dtype=dtype)
    state = {k[len("model/"):]: a for k, a in tensors.items() if k.startswith("model/")}
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise DataError(f"checkpoint {path} does not match its model config: {exc}") from exc
    return model, tensors, meta


def train(cfg: CesstConfig, dataset: Dataset, tcfg: TrainConfig, out_dir=None,
          resume: Optional[str] = None, stop_at: Optional[int] = None,
          heldout: Optional[Dataset] = None, model: Optional[CESST] = None) -> TrainResult:
    """Train for ``tcfg.steps`` steps (cosine schedule over that horizon).

    Batches depend only on (dataset seed, step), so a run stopped at
    ``stop_at`` and resumed from its checkpoint matches an uninterrupted run
    bit for bit.  A non-finite loss or gradient raises :class:`NumericalError`
    after writing a snapshot next to the checkpoint.
    """
    tcfg.validate()
    if len(dataset) == 0:
        raise DataError("dataset is empty")
    sched = Schedule(tcfg.steps, tcfg.lr0, tcfg.lr_min)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        model, tensors, meta = load_model(resume)
        state = OptimState.restore(tensors, meta["optim"])
        start = int(meta["step"])
        record = RunRecord.from_dict(meta["record"] or {})
    else:
        model = model if model is not None else CESST(cfg)
        state = OptimState(lr0=tcfg.lr0)
        start = 0
        record = RunRecord()
    end = tcfg.steps if stop_at is None else min(stop_at, tcfg.steps)
    params = {k: p for k, p in model.named_parameters()}
    dtype = model.global_residual.weight.dtype
    ckpt_path = None
    t0 = time.perf_counter()
    for step in range(start, end):
        rgb, gt = dataset.batch_for_step(step, tcfg.batch_size, tcfg.crop, tcfg.augment)
        model.zero_grad()
        try:
            pred = model(Tensor(rgb.astype(dtype)))
            terms = loss_terms(list(pred), [g.astype(dtype) for g in gt], tcfg.loss)
            backward(terms.total)
        except NonFiniteError as exc:
            raise _abort(model, state, step, tcfg, record, out, str(exc)) from exc
        values = terms.floats()
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        if not math.isfinite(values["total"]) or not all(np.isfinite(g).all() for g in grads.values()):
            raise _abort(model, state, step, tcfg, record, out, f"non-finite loss or gradient at step {step}: {values}")
        if tcfg.grad_clip is not None:
            _clip(grads, tcfg.grad_clip)
        lr = cosine_lr(step, sched)
        adam_step({k: p.data for k, p in params.items()}, grads, state, lr)
        record.log(step, values, lr, time.perf_counter() - t0)
        done = step + 1
        if heldout is not None and tcfg.eval_every and done % tcfg.eval_every == 0:
            record.evals.append({"step": done, **evaluate(model, heldout).to_dict()})
        if out is not None and tcfg.checkpoint_every and done % tcfg.checkpoint_every == 0 and done < end:
            save_training_state(out / CHECKPOINT_NAME, model, state, done, tcfg, record)
    if out is not None:
        ckpt_path = save_training_state(out / CHECKPOINT_NAME, model, state, max(end, start), tcfg, record)
        (out / "run.json").write_text(record.to_json())
    model.zero_grad()
    return TrainResult(model, state, record, max(end, start), ckpt_path)


def _abort(model, state, step, tcfg, record, out, message) -> NumericalError:
    snap = None
    if out is not None:
        snap = save_training_state(out / SNAPSHOT_NAME, model, state, step, tcfg, record,
                                   extra={"error": message})
    return NumericalError(message, snap)


# ---------------------------------------------------------------- evaluation
def evaluate(model, dataset: Dataset) -> MetricReport:
    """Average per-image metrics of the full-resolution reconstruction over a set."""
    if isinstance(model, (str, Path)):
        model = load_model(model)[0]
    reports = []
    for pair in dataset.pairs:
        y = pair.gt[0]
        if pair.rgb.shape[-2:] != y.shape[-2:]:
            raise DataError(f"RGB {pair.rgb.shape} and cube {y.shape} differ in size")
        x = cesst_infer(model, pair.rgb)
        reports.append(metric_suite(x, HsiCube(y)))
    avg = average_reports(reports)
    H, W = dataset.pairs[0].rgb.shape[-2:]
    avg.params = model.num_parameters()
    avg.flops = count_model_macs(model, H + (-H) % 16, W + (-W) % 16)
    return avg


def training_mrae(model: CESST, dataset: Dataset) -> float:
    return evaluate(model, dataset).mrae


# ---------------------------------------------------------------- ablation
ABLATION_HEADER = ["row", "params", "flops", "mrae", "rmse", "psnr"]


def run_ablation(rows: Sequence[str], budget: int, cfg: CesstConfig, dataset: Dataset,
                 heldout: Optional[Dataset] = None, tcfg: Optional[TrainConfig] = None) -> list[dict]:
    """Train each variant with the same seed, budget and data; report census and metrics."""
    variants = [(row, make_variant(cfg, row)) for row in rows]
    base = tcfg or TrainConfig()
    tc = dataclasses.replace(base, steps=budget)
    heldout = heldout or dataset
    table = []
    for row, vcfg in variants:
        res = train(vcfg, dataset, tc)
        rep = evaluate(res.model, heldout)
        table.append({"row": row, "params": rep.params, "flops": rep.flops,
                      "mrae": rep.mrae, "rmse": rep.rmse, "psnr": rep.psnr,
                      "final_loss": res.record.steps[-1]["total"]})
    return table


def ablation_csv(table: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER)
    for r in table:
        w.writerow([r[k] for k in ABLATION_HEADER])
    return buf.getvalue()
