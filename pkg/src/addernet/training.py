"""Shared training loop for the experiment drivers.

Two granularities cover the training recipes: epoch-driven runs (image
classification: per-epoch learning rate and norm-exponent schedules) and
iteration-driven runs (2-D toys: a fixed iteration budget with per-iteration
cosine decay).  Both are deterministic given (config, seed): batch order,
initialization and every update come from the seeded counter-based stream.

Wall-clock timings are collected out of band so metric rows stay
byte-reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import netgraph as N
from . import layers as L
from .data import LabeledDataset, shuffle_batches
from .optim import (LrSchedule, NagOptimizer, PSchedule, default_p_schedule,
                    lr_at, p_at_epoch)
from .tensor import RngState

MODES = ("adder-l1", "adder-l2", "adder-lp", "conv")

EPOCH_HEADER = ["epoch", "p", "lr", "train_loss", "train_acc", "test_acc"]
ITER_HEADER = ["iteration", "p", "lr", "train_loss", "train_acc"]


@dataclass
class FitConfig:
    mode: str = "adder-lp"
    epochs: int = 10
    iterations: int = 0          # > 0 switches to iteration-driven training
    batch_size: int = 256
    lr0: float = 0.1
    schedule: str = "cosine"
    poly_power: float = 2.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    eta: float = 0.2
    adaptive: bool = True
    e_decay: int = 0             # epochs until p hits 1; 0 = 75% of the run
    grad_mode: str = "full"
    log_every: int = 500

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.grad_mode not in ("full", "sign"):
            raise ValueError(f"unknown gradient mode {self.grad_mode!r}")


def _p_for(cfg: FitConfig, sched: PSchedule, epoch: int) -> float:
    if cfg.mode == "adder-l1" or cfg.mode == "conv":
        return 1.0
    if cfg.mode == "adder-l2":
        return 2.0
    return p_at_epoch(sched, epoch)


def _grad_mode(cfg: FitConfig) -> L.GradientMode:
    return L.GradientMode.SIGN if cfg.grad_mode == "sign" else L.GradientMode.FULL_PRECISION


def evaluate_accuracy(net: N.Network, ds: LabeledDataset, chunk: int = 1024) -> float:
    hits = 0
    for lo in range(0, len(ds), chunk):
        hi = min(len(ds), lo + chunk)
        pred = N.predict(net, ds.inputs[lo:hi])
        hits += int((pred == ds.labels[lo:hi]).sum())
    return hits / len(ds)


def _batch_accuracy(net: N.Network, outputs, labels) -> float:
    if net.loss_kind == "softmax_ce":
        pred = outputs.argmax(axis=1)
    else:
        pred = (L.sigmoid(outputs) > 0.5).astype(np.int64)
    return float((pred == labels).mean())


def _train_step(net, optimizer, x, y, lr, mode):
    outputs, trace = N.forward_pass(net, x, training=True)
    if net.loss_kind == "softmax_ce":
        loss, d_logits = L.softmax_cross_entropy(outputs, y)
    else:
        loss, d_logits = L.sigmoid_bce(outputs, y)
    grads = N.backward_pass(net, trace, d_logits, mode)
    optimizer.step(net.param_refs(), grads, lr)
    return loss, outputs


def fit_epochs(net: N.Network, train_ds: LabeledDataset, cfg: FitConfig,
               rng: RngState, test_ds: LabeledDataset = None):
    """Epoch-driven training; returns (rows, header, timings).

    Row 0 describes the freshly initialized network (loss/accuracy on the
    training side are nan there); rows 1..epochs follow completed epochs.
    """
    sched = LrSchedule(cfg.schedule, cfg.lr0, cfg.poly_power)
    p_sched = (PSchedule(cfg.e_decay, cfg.epochs) if cfg.e_decay
               else default_p_schedule(cfg.epochs))
    optimizer = NagOptimizer(cfg.momentum, cfg.weight_decay, cfg.eta, cfg.adaptive)
    mode = _grad_mode(cfg)
    rows, timings = [], []

    net.set_p(_p_for(cfg, p_sched, 0))
    test_acc = evaluate_accuracy(net, test_ds) if test_ds is not None else float("nan")
    rows.append([0, _p_for(cfg, p_sched, 0), lr_at(sched, 0, max(cfg.epochs, 1)),
                 float("nan"), float("nan"), test_acc])

    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        p = _p_for(cfg, p_sched, epoch)
        net.set_p(p)
        lr = lr_at(sched, epoch, cfg.epochs)
        losses, hits, seen = [], 0, 0
        for idx in shuffle_batches(len(train_ds), cfg.batch_size, rng):
            x, y = train_ds.inputs[idx], train_ds.labels[idx]
            loss, outputs = _train_step(net, optimizer, x, y, lr, mode)
            losses.append(loss * len(idx))
            hits += _batch_accuracy(net, outputs, y) * len(idx)
            seen += len(idx)
        test_acc = evaluate_accuracy(net, test_ds) if test_ds is not None else float("nan")
        rows.append([epoch + 1, p, lr, sum(losses) / seen, hits / seen, test_acc])
        timings.append((f"epoch {epoch + 1}", time.perf_counter() - start))
    return rows, EPOCH_HEADER, timings


def fit_iterations(net: N.Network, train_ds: LabeledDataset, cfg: FitConfig,
                   rng: RngState):
    """Iteration-driven training (the 2-D toy recipe); returns (rows, header,
    timings).  The final row carries the eval-mode accuracy over the whole
    training set."""
    if cfg.iterations < 1:
        raise ValueError("iteration-driven training needs iterations >= 1")
    sched = LrSchedule(cfg.schedule, cfg.lr0, cfg.poly_power)
    p_sched = PSchedule(cfg.e_decay if cfg.e_decay
                        else max(1, int(round(0.75 * cfg.iterations))),
                        cfg.iterations)
    optimizer = NagOptimizer(cfg.momentum, cfg.weight_decay, cfg.eta, cfg.adaptive)
    mode = _grad_mode(cfg)
    rows, timings = [], []
    start = time.perf_counter()

    batches = []
    win_loss, win_hits, win_seen = [], 0.0, 0
    for it in range(cfg.iterations):
        if not batches:
            batches = shuffle_batches(len(train_ds), cfg.batch_size, rng)
        idx = batches.pop(0)
        p = _p_for(cfg, p_sched, it)
        net.set_p(p)
        lr = lr_at(sched, it, cfg.iterations)
        x, y = train_ds.inputs[idx], train_ds.labels[idx]
        loss, outputs = _train_step(net, optimizer, x, y, lr, mode)
        win_loss.append(loss * len(idx))
        win_hits += _batch_accuracy(net, outputs, y) * len(idx)
        win_seen += len(idx)
        if (it + 1) % cfg.log_every == 0:
            rows.append([it + 1, p, lr, sum(win_loss) / win_seen,
                         win_hits / win_seen])
            win_loss, win_hits, win_seen = [], 0.0, 0
    final_acc = evaluate_accuracy(net, train_ds)
    rows.append([cfg.iterations, _p_for(cfg, p_sched, cfg.iterations), 0.0,
                 float("nan"), final_acc])
    timings.append(("total", time.perf_counter() - start))
    return rows, ITER_HEADER, timings


def final_train_accuracy(rows) -> float:
    return float(rows[-1][-1])
