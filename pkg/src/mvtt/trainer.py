"""Adam with per-epoch exponential learning-rate decay, early stopping and k-fold splits.

One whole volume is one optimization step: all its axial slices form the
ConvLSTM sequence and the fusion needs every view of the same volume.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .mvtt_net import MvttConfig, MvttNet, hybrid_loss
from .tensor_core import Tensor

log = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    def __init__(self, epoch: int, sample_id: str):
        super().__init__(f"non-finite training loss at epoch {epoch} (volume {sample_id})")
        self.epoch = epoch


@dataclass
class TrainConfig:
    initial_lr: float = 1e-3
    lr_decay_rate: float = 0.98
    decay_unit: str = "epoch"
    max_epochs: int = 100
    early_stop_patience: int = 10
    early_stop_metric: str = "val_hybrid_loss"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    deterministic: bool = True
    folds: int = 10

    def __post_init__(self):
        if not 0 < self.lr_decay_rate <= 1:
            raise ValueError("lr_decay_rate must lie in (0, 1]")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.decay_unit != "epoch":
            raise ValueError("only per-epoch decay is supported")
        if self.initial_lr <= 0 or self.max_epochs < 1:
            raise ValueError("initial_lr must be positive and max_epochs >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ optimizer

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update of every parameter."""
    for p in params:
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {p!r} has no gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.initial_lr * config.lr_decay_rate ** epoch


# --------------------------------------------------------------------- splits

@dataclass
class FoldPlan:
    k: int
    seed: int
    assignments: dict[str, int]

    def folds(self) -> list[list[str]]:
        out: list[list[str]] = [[] for _ in range(self.k)]
        for ident, f in self.assignments.items():
            out[f].append(ident)
        return out

    def split(self, fold: int) -> tuple[list[str], list[str]]:
        """(train ids, held-out ids) for one fold."""
        train = [i for i, f in self.assignments.items() if f != fold]
        held = [i for i, f in self.assignments.items() if f == fold]
        return train, held


def make_folds(ids: Sequence[str], k: int, seed: int = 0) -> FoldPlan:
    """Seeded shuffle followed by round-robin assignment."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("make_folds: ids must be unique")
    if k < 1 or k > len(ids):
        raise ValueError(f"make_folds: cannot split {len(ids)} ids into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldPlan(k=k, seed=seed, assignments={ids[j]: n % k for n, j in enumerate(order)})


class EarlyStopping:
    """Stop once the monitored loss has not improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.wait = 0

    def update(self, epoch: int, value: float) -> bool:
        if value < self.best:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


# ------------------------------------------------------------------- training

@dataclass
class Sample:
    id: str
    image: np.ndarray  # normalized (Z, Y, X)
    anatomy: np.ndarray
    scar: np.ndarray


@dataclass
class TrainResult:
    model: MvttNet
    log: list[dict]
    best_epoch: int
    stopped_early: bool


def _snapshot(model: MvttNet) -> dict:
    snap = {f"p:{n}": p.data.copy() for n, p in model.named_parameters()}
    for n, bn in model.named_buffers():
        snap[f"rm:{n}"] = bn.running_mean.copy()
        snap[f"rv:{n}"] = bn.running_var.copy()
    return snap


def _restore(model: MvttNet, snap: dict) -> None:
    for n, p in model.named_parameters():
        p.data = snap[f"p:{n}"].copy()
    for n, bn in model.named_buffers():
        bn.running_mean = snap[f"rm:{n}"].copy()
        bn.running_var = snap[f"rv:{n}"].copy()


def evaluate_loss(model: MvttNet, samples: Sequence[Sample]) -> float:
    model.eval()
    try:
        losses = []
        for s in samples:
            m_l, m_as = model.forward(s.image)
            losses.append(hybrid_loss(m_l, s.anatomy, m_as, s.scar).item())
        return float(np.mean(losses))
    finally:
        model.train()


def save_train_state(path, model: MvttNet, adam: AdamState, next_epoch: int,
                     stopper: EarlyStopping, best: dict | None, log_records: list[dict]) -> None:
    arrays = {k: v for k, v in _snapshot(model).items()}
    for n, (m, v) in enumerate(zip(adam.m, adam.v)):
        arrays[f"adam_m:{n}"] = m
        arrays[f"adam_v:{n}"] = v
    if best is not None:
        arrays.update({f"best:{k}": v for k, v in best.items()})
    meta = {"config": model.config.to_dict(), "adam_step": adam.step, "next_epoch": next_epoch,
            "best": None if math.isinf(stopper.best) else stopper.best,
            "best_epoch": stopper.best_epoch, "wait": stopper.wait, "log": log_records}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _load_train_state(path):
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    model = MvttNet(MvttConfig.from_dict(meta["config"]))
    _restore(model, arrays)
    params = model.parameters()
    adam = AdamState([arrays[f"adam_m:{n}"] for n in range(len(params))],
                     [arrays[f"adam_v:{n}"] for n in range(len(params))], meta["adam_step"])
    best = {k[5:]: v for k, v in arrays.items() if k.startswith("best:")} or None
    stopper_state = (meta["best"], meta["best_epoch"], meta["wait"])
    return model, adam, meta["next_epoch"], stopper_state, best, meta["log"]


def train(train_set: Sequence[Sample], val_set: Sequence[Sample], config: TrainConfig,
          model_config: MvttConfig | None = None, out_dir=None, resume_from=None,
          stop_after: int | None = None, on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Minimize the hybrid loss; early stopping is active iff ``val_set`` is nonempty.

    ``out_dir`` receives ``train_log.jsonl``, ``train_state.npz`` (exact resume
    state) and ``model.ckpt`` (best-validation weights, or the final weights
    without validation). ``stop_after`` ends the run after that many epochs in
    this call, leaving a resumable state.
    """
    if not train_set:
        raise ValueError("train needs at least one training volume")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        model, adam, start, (best, best_epoch, wait), best_snap, records = _load_train_state(resume_from)
        stopper = EarlyStopping(config.early_stop_patience)
        stopper.best = math.inf if best is None else best
        stopper.best_epoch, stopper.wait = best_epoch, wait
    else:
        if model_config is None:
            raise ValueError("model_config is required unless resuming")
        model = MvttNet(model_config)
        adam = AdamState.zeros_like(model.parameters())
        start, stopper, best_snap, records = 0, EarlyStopping(config.early_stop_patience), None, []

    if out is not None:
        with open(out / "train_log.jsonl", "w") as fh:
            for r in records:
                fh.write(json.dumps(r) + "\n")

    params = model.parameters()
    model.train()
    stopped_early = False
    epoch = start
    ran = 0
    while epoch < config.max_epochs:
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, config)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set))
        losses = []
        for idx in order:
            s = train_set[idx]
            model.zero_grad()
            m_l, m_as = model.forward(s.image)
            loss = hybrid_loss(m_l, s.anatomy, m_as, s.scar)
            if not math.isfinite(loss.item()):
                raise NonFiniteLoss(epoch, s.id)
            loss.backward()
            adam_step(params, adam, lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
            model.quantize_()
            losses.append(loss.item())
        train_loss = float(np.mean(losses))
        val_loss = evaluate_loss(model, val_set) if val_set else None
        if val_loss is not None and not math.isfinite(val_loss):
            raise NonFiniteLoss(epoch, "validation")
        record = {"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_loss": val_loss,
                  "seconds": time.perf_counter() - t0}
        records.append(record)
        log.info("epoch %d lr %.6g train %.5f val %s", epoch, lr, train_loss, val_loss)
        if out is not None:
            with open(out / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
        if on_epoch is not None:
            on_epoch(record)

        epoch += 1
        ran += 1
        if val_loss is not None:
            improved = val_loss < stopper.best
            if stopper.update(record["epoch"], val_loss):
                stopped_early = True
            if improved:
                best_snap = _snapshot(model)
        if out is not None:
            save_train_state(out / "train_state.npz", model, adam, epoch, stopper, best_snap, records)
        if stopped_early or (stop_after is not None and ran >= stop_after):
            break

    if best_snap is not None:
        _restore(model, best_snap)
    if out is not None:
        save_checkpoint(model, out / "model.ckpt")
    return TrainResult(model=model, log=records, best_epoch=stopper.best_epoch if val_set else epoch - 1,
                       stopped_early=stopped_early)
