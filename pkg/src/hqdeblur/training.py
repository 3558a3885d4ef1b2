"""Mini-batch trainer: Adam updates, non-negativity projection, LR schedule.

Every random draw is routed through seeded generators and every reduction
runs in a fixed order, so identical (seed, data, config) inputs produce
byte-identical checkpoints and logs.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import dblt
from .backprop import GradientSet, LossTerms, backward, loss_seeds
from .network import NetworkParams, forward, model_entries, params_from_entries

PARAM_FLOOR = 1e-8


class TrainingDivergedError(RuntimeError):
    """Raised when a batch produces a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 160
    lr0: float = 1e-3
    decay_factor: float = 0.5
    decay_every: int = 20
    batch_size: int = 32
    kappa0: float = 1e5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    def validate(self) -> None:
        for name in ("epochs", "lr0", "decay_factor", "decay_every",
                     "batch_size", "kappa0", "eps_adam"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("Adam momentum factors must lie in (0, 1)")
        if self.decay_every > self.epochs:
            raise ValueError("decay_every must not exceed epochs")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class OptimState:
    """First/second Adam moments mirroring the parameter shapes."""

    m: GradientSet
    v: GradientSet
    step: int = 0

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "OptimState":
        return cls(m=GradientSet.zeros_like(params),
                   v=GradientSet.zeros_like(params), step=0)


@dataclass
class BatchStats:
    total: float
    kernel_term: float
    image_term: float

    @classmethod
    def from_terms(cls, terms: Sequence[LossTerms]) -> "BatchStats":
        n = len(terms)
        return cls(total=sum(t.total for t in terms) / n,
                   kernel_term=sum(t.kernel_term for t in terms) / n,
                   image_term=sum(t.image_term for t in terms) / n)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    total: float
    kernel_term: float
    image_term: float


@dataclass
class FitResult:
    params: NetworkParams
    opt: OptimState
    history: list[EpochStats] = field(default_factory=list)


def init_params(depth: int, channels: int, planes: int = 1,
                k_shape: tuple[int, int] = (31, 31), seed: int = 0,
                epsilon: float = 1e-6) -> NetworkParams:
    """Fresh parameters: b = 0.02, zeta = 1, beta = 0, eta = 20, and 3x3
    banks drawn uniformly within the fan-balanced Glorot bound."""
    rng = np.random.default_rng(seed)
    w = []
    for l in range(depth):
        c_in = channels if l < depth - 1 else planes
        limit = math.sqrt(6.0 / (9 * c_in + 9 * channels))
        w.append(rng.uniform(-limit, limit, size=(channels, c_in, 3, 3)))
    params = NetworkParams(
        w=w,
        b=np.full((depth, channels), 0.02),
        zeta=np.ones((depth, channels)),
        beta=np.zeros(depth),
        eta=np.full(channels, 20.0),
        k_shape=k_shape,
        epsilon=epsilon,
    )
    params.validate()
    return params


def _slots(params: NetworkParams, *sets: GradientSet) -> Iterator[tuple[np.ndarray, ...]]:
    """Aligned (param, set1, set2, ...) array tuples in a fixed order."""
    for l in range(params.depth):
        yield (params.w[l], *(s.w[l] for s in sets))
    yield (params.b, *(s.b for s in sets))
    yield (params.zeta, *(s.zeta for s in sets))
    yield (params.beta, *(s.beta for s in sets))
    yield (params.eta, *(s.eta for s in sets))


def adam_update(params: NetworkParams, grads: GradientSet, opt: OptimState,
                lr: float, config: TrainConfig) -> None:
    """One bias-corrected Adam step, applied in place."""
    opt.step += 1
    correct1 = 1.0 - config.beta1 ** opt.step
    correct2 = 1.0 - config.beta2 ** opt.step
    for theta, g, m, v in _slots(params, grads, opt.m, opt.v):
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        theta -= lr * (m / correct1) / (np.sqrt(v / correct2) + config.eps_adam)


def project_params(params: NetworkParams) -> None:
    """Clamp thresholds and slopes at zero, floor the positive scales."""
    np.maximum(params.b, 0.0, out=params.b)
    np.maximum(params.beta, 0.0, out=params.beta)
    np.maximum(params.zeta, PARAM_FLOOR, out=params.zeta)
    np.maximum(params.eta, PARAM_FLOOR, out=params.eta)


def lr_for_epoch(epoch: int, config: TrainConfig) -> float:
    return config.lr0 * config.decay_factor ** (epoch // config.decay_every)


def train_step(batch: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]],
               params: NetworkParams, opt: OptimState, lr: float,
               config: TrainConfig) -> BatchStats:
    """One update from a batch of (blurred, sharp, kernel) triples.

    Per-sample gradients are mean-reduced in batch order before the Adam
    step; the non-negativity projection runs after the update.
    """
    if not batch:
        raise ValueError("batch must contain at least one sample")
    grads = GradientSet.zeros_like(params)
    weight = 1.0 / len(batch)
    terms_seen = []
    for index, (blurred, sharp, kernel) in enumerate(batch):
        out = forward(blurred, params)
        terms, seed_image, seed_kernel = loss_seeds(
            out.image, out.kernel, sharp, kernel, kappa0=config.kappa0)
        if not math.isfinite(terms.total):
            raise TrainingDivergedError(
                f"non-finite loss {terms.total!r} at batch sample {index}")
        grads.add_scaled(backward(out.tape, params, seed_image, seed_kernel),
                         weight)
        terms_seen.append(terms)
    adam_update(params, grads, opt, lr, config)
    project_params(params)
    return BatchStats.from_terms(terms_seen)


def save_checkpoint(path, params: NetworkParams, opt: OptimState,
                    epoch: int) -> None:
    """Model manifest extended with optimizer moments and epoch counter."""
    entries = model_entries(params)
    for prefix, moments in (("opt.m", opt.m), ("opt.v", opt.v)):
        for l, wl in enumerate(moments.w, start=1):
            entries[f"{prefix}.w.{l}"] = wl
        for l in range(1, params.depth + 1):
            entries[f"{prefix}.b.{l}"] = moments.b[l - 1]
            entries[f"{prefix}.zeta.{l}"] = moments.zeta[l - 1]
        entries[f"{prefix}.beta"] = moments.beta
        entries[f"{prefix}.eta"] = moments.eta
    entries["opt.step"] = np.array(float(opt.step))
    entries["epoch"] = np.array(float(epoch))
    dblt.write_manifest(path, entries)


def load_checkpoint(path) -> tuple[NetworkParams, OptimState, int]:
    entries = dblt.read_manifest(path)
    params = params_from_entries(entries)
    opt = OptimState.zeros_like(params)
    for prefix, moments in (("opt.m", opt.m), ("opt.v", opt.v)):
        try:
            for l in range(1, params.depth + 1):
                moments.w[l - 1][:] = entries[f"{prefix}.w.{l}"]
                moments.b[l - 1][:] = entries[f"{prefix}.b.{l}"]
                moments.zeta[l - 1][:] = entries[f"{prefix}.zeta.{l}"]
            moments.beta[:] = entries[f"{prefix}.beta"]
            moments.eta[:] = entries[f"{prefix}.eta"]
        except KeyError as exc:
            raise ValueError(f"checkpoint lacks optimizer entry {exc}") from exc
    if "opt.step" not in entries or "epoch" not in entries:
        raise ValueError("checkpoint lacks step or epoch counters")
    opt.step = int(entries["opt.step"])
    return params, opt, int(entries["epoch"])


def _write_log(path: Path, history: Sequence[EpochStats]) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["epoch", "lr", "mean_total_loss", "mean_kernel_term",
                     "mean_image_term"])
    for row in history:
        writer.writerow([row.epoch, f"{row.lr:.10g}", f"{row.total:.17g}",
                         f"{row.kernel_term:.17g}", f"{row.image_term:.17g}"])
    dblt.atomic_write_bytes(path, buffer.getvalue().encode("ascii"))


def fit(samples: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]],
        params: NetworkParams, config: TrainConfig, out_dir,
        opt: OptimState | None = None, start_epoch: int = 0,
        checkpoint_every: int = 20) -> FitResult:
    """Run the training loop over (blurred, sharp, kernel) triples.

    Each epoch shuffles with a generator keyed by (config.seed, epoch), so
    resuming from a checkpoint at epoch E replays the exact batch sequence
    an uninterrupted run would have used from E onward.
    """
    config.validate()
    if not samples:
        raise ValueError("training set is empty")
    if checkpoint_every <= 0:
        raise ValueError("checkpoint_every must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if opt is None:
        opt = OptimState.zeros_like(params)
    history: list[EpochStats] = []
    n = len(samples)
    for epoch in range(start_epoch, config.epochs):
        lr = lr_for_epoch(epoch, config)
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        sums = np.zeros(3)
        for lo in range(0, n, config.batch_size):
            batch = [samples[i] for i in order[lo:lo + config.batch_size]]
            try:
                stats = train_step(batch, params, opt, lr, config)
            except TrainingDivergedError:
                save_checkpoint(out_dir / "diverged_snapshot.dblt", params,
                                opt, epoch)
                raise
            sums += len(batch) * np.array(
                [stats.total, stats.kernel_term, stats.image_term])
        history.append(EpochStats(epoch, lr, *(sums / n)))
        _write_log(out_dir / "training_log.csv", history)
        if (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(out_dir / f"checkpoint_epoch_{epoch + 1:04d}.dblt",
                            params, opt, epoch + 1)
    save_checkpoint(out_dir / "model.dblt", params, opt, config.epochs)
    return FitResult(params=params, opt=opt, history=history)
