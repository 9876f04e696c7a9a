"""Training loop: Adam, staged exponential learning-rate decay, PK batches,
checkpointing, and a per-batch loss trace."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_blob, save_blob
from .data import Manifest, augment, pk_sample, resize
from .errors import CheckpointError, NumericFault, TrainError
from .loss import accumulate_minibatch_gradient
from .model import EmbeddingNetConfig, ModelParams, init_params
from .tensor import Tensor


@dataclass(frozen=True)
class Schedule:
    """Constant learning rate for warm_batches, then per-batch exponential
    decay. The default decay lands at base_lr/100 on the final batch."""

    base_lr: float = 3e-4
    warm_batches: int = 640
    total_batches: int = 2000
    decay_rate: float | None = None

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise TrainError(f"trainer: base_lr must be positive, got {self.base_lr}")
        if not (0 <= self.warm_batches < self.total_batches):
            raise TrainError(
                f"trainer: need 0 <= warm_batches < total_batches, got {self.warm_batches}/{self.total_batches}"
            )
        gamma = self.gamma()
        if not (0.0 < gamma <= 1.0):
            raise TrainError(f"trainer: decay rate must lie in (0, 1], got {gamma}")

    def gamma(self) -> float:
        if self.decay_rate is not None:
            return self.decay_rate
        decayed_span = self.total_batches - self.warm_batches - 1
        if decayed_span <= 0:
            return 1.0
        return 0.01 ** (1.0 / decayed_span)


def lr_at(schedule: Schedule, batch_index: int) -> float:
    if not (0 <= batch_index < schedule.total_batches):
        raise TrainError(
            f"trainer: batch index {batch_index} outside [0, {schedule.total_batches})"
        )
    if batch_index < schedule.warm_batches:
        return schedule.base_lr
    return schedule.base_lr * schedule.gamma() ** (batch_index - schedule.warm_batches)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init_like(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.trainables()},
            v={name: np.zeros_like(p.data) for name, p in params.trainables()},
        )


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, lr: float) -> AdamState:
    """One Adam update with bias correction; mutates params in place."""
    if lr <= 0:
        raise TrainError(f"trainer: learning rate must be positive, got {lr}")
    named = params.trainables()
    names = {name for name, _ in named}
    if set(grads) != names:
        raise TrainError(
            f"trainer: gradient set does not match parameters "
            f"(missing {sorted(names - set(grads))}, extra {sorted(set(grads) - names)})"
        )
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in named:
        g = grads[name]
        if g.shape != p.data.shape:
            raise TrainError(f"trainer: gradient shape {g.shape} for {name} of shape {p.data.shape}")
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v)
        denom /= np.sqrt(bc2)
        denom += state.eps
        step = m / denom
        step *= lr / bc1
        p.data = p.data - step
    return state


@dataclass(frozen=True)
class TrainRunConfig:
    model: EmbeddingNetConfig = EmbeddingNetConfig()
    schedule: Schedule = Schedule()
    p: int = 21
    k: int = 4
    soft_margin: bool = True
    margin: float = 0.2
    loss_reduction: str = "sum"
    squared_distances: bool = False
    augment: bool = True
    seed_sampler: int = 1
    seed_augment: int = 2
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def validate(self) -> None:
        if self.p < 2 or self.k < 2:
            raise TrainError(f"trainer: need P >= 2 and K >= 2, got P={self.p}, K={self.k}")
        if not self.soft_margin and self.margin <= 0:
            raise TrainError(f"trainer: hard margin must be positive, got {self.margin}")
        self.model.validate()
        self.schedule.validate()

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "schedule": {
                "base_lr": self.schedule.base_lr,
                "warm_batches": self.schedule.warm_batches,
                "total_batches": self.schedule.total_batches,
                "decay_rate": self.schedule.decay_rate,
            },
            "p": self.p,
            "k": self.k,
            "soft_margin": self.soft_margin,
            "margin": self.margin,
            "loss_reduction": self.loss_reduction,
            "squared_distances": self.squared_distances,
            "augment": self.augment,
            "seed_sampler": self.seed_sampler,
            "seed_augment": self.seed_augment,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunConfig":
        sched = d["schedule"]
        return cls(
            model=EmbeddingNetConfig.from_dict(d["model"]),
            schedule=Schedule(
                base_lr=float(sched["base_lr"]),
                warm_batches=int(sched["warm_batches"]),
                total_batches=int(sched["total_batches"]),
                decay_rate=None if sched["decay_rate"] is None else float(sched["decay_rate"]),
            ),
            p=int(d["p"]),
            k=int(d["k"]),
            soft_margin=bool(d["soft_margin"]),
            margin=float(d["margin"]),
            loss_reduction=str(d["loss_reduction"]),
            squared_distances=bool(d["squared_distances"]),
            augment=bool(d["augment"]),
            seed_sampler=int(d["seed_sampler"]),
            seed_augment=int(d["seed_augment"]),
            checkpoint_every=int(d["checkpoint_every"]),
        )


@dataclass
class TraceRow:
    batch: int
    lr: float
    loss: float
    mean_hardest_pos: float
    mean_hardest_neg: float


TRACE_COLUMNS = ["batch", "lr", "loss", "mean_hardest_pos", "mean_hardest_neg"]


def write_trace(path: str, rows: list[TraceRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for r in rows:
            writer.writerow([r.batch, repr(r.lr), repr(r.loss), repr(r.mean_hardest_pos), repr(r.mean_hardest_neg)])


def read_trace(path: str) -> list[TraceRow]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append(
                TraceRow(
                    batch=int(rec["batch"]),
                    lr=float(rec["lr"]),
                    loss=float(rec["loss"]),
                    mean_hardest_pos=float(rec["mean_hardest_pos"]),
                    mean_hardest_neg=float(rec["mean_hardest_neg"]),
                )
            )
    return rows


@dataclass
class TrainResult:
    params: ModelParams
    adam: AdamState
    config: TrainRunConfig
    trace: list[TraceRow] = field(default_factory=list)
    final_checkpoint: str | None = None


def checkpoint_save(
    path: str,
    params: ModelParams,
    adam: AdamState,
    config: TrainRunConfig,
    next_batch: int,
    rng_states: dict,
) -> None:
    arrays = dict(params.state_arrays())
    for name, arr in adam.m.items():
        arrays[f"adam.m.{name}"] = arr
    for name, arr in adam.v.items():
        arrays[f"adam.v.{name}"] = arr
    meta = {
        "config": config.to_dict(),
        "adam": {"t": adam.t, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
        "bn_steps_seen": params.bn.steps_seen,
        "next_batch": next_batch,
        "rng_states": rng_states,
    }
    save_blob(path, meta, arrays)


def checkpoint_load(path: str) -> tuple[ModelParams, AdamState, TrainRunConfig, int, dict]:
    meta, arrays = load_blob(path)
    config = TrainRunConfig.from_dict(meta["config"])
    params = init_params(config.model)
    for name, p in params.trainables():
        if name not in arrays:
            raise CheckpointError(f"trainer: checkpoint missing array {name!r}")
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(
                f"trainer: checkpoint array {name!r} has shape {arrays[name].shape}, "
                f"model expects {p.data.shape}"
            )
        p.data = arrays[name]
    params.bn.running_mean = arrays["bn.running_mean"]
    params.bn.running_var = arrays["bn.running_var"]
    params.bn.steps_seen = int(meta["bn_steps_seen"])
    adam = AdamState(
        m={name: arrays[f"adam.m.{name}"] for name, _ in params.trainables()},
        v={name: arrays[f"adam.v.{name}"] for name, _ in params.trainables()},
        t=int(meta["adam"]["t"]),
        beta1=float(meta["adam"]["beta1"]),
        beta2=float(meta["adam"]["beta2"]),
        eps=float(meta["adam"]["eps"]),
    )
    return params, adam, config, int(meta["next_batch"]), meta["rng_states"]


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def _batch_pixels(cache: dict, record, side: int) -> np.ndarray:
    pixels = cache.get(record.image_id)
    if pixels is None:
        pixels = record.pixels
        if pixels.shape[1] != side or pixels.shape[2] != side:
            pixels = resize(pixels, side)
        cache[record.image_id] = pixels
    return pixels


def train(
    config: TrainRunConfig,
    manifest: Manifest,
    checkpoint_dir: str | None = None,
    trace_path: str | None = None,
    resume_from: str | None = None,
    progress=None,
) -> TrainResult:
    """Run the full optimisation loop; fully deterministic given seeds.

    Every batch: PK sample -> augment -> embed (train mode) -> batch-hard
    loss -> backward -> Adam step. A non-finite loss aborts with the batch
    index in the diagnostic.
    """
    config.validate()
    n_ids = len(manifest.identities)
    if n_ids < config.p:
        raise TrainError(
            f"trainer: manifest has {n_ids} identities but P={config.p}; "
            "cannot form PK batches"
        )

    if resume_from is not None:
        params, adam, ckpt_config, start_batch, rng_states = checkpoint_load(resume_from)
        if ckpt_config.to_dict() != config.to_dict():
            raise CheckpointError("trainer: checkpoint config does not match the requested run")
        sampler_rng = _restore_rng(rng_states["sampler"])
        augment_rng = _restore_rng(rng_states["augment"])
    else:
        params = init_params(config.model)
        adam = AdamState.init_like(params)
        start_batch = 0
        sampler_rng = np.random.default_rng([config.seed_sampler, 101])
        augment_rng = np.random.default_rng([config.seed_augment, 211])

    side = config.model.input_side
    margin = None if config.soft_margin else config.margin
    cache: dict[str, np.ndarray] = {}
    trace: list[TraceRow] = []
    final_path = None

    def save_ckpt(next_batch: int, name: str) -> str:
        path = os.path.join(checkpoint_dir, name)
        checkpoint_save(
            path,
            params,
            adam,
            config,
            next_batch,
            {"sampler": sampler_rng.bit_generator.state, "augment": augment_rng.bit_generator.state},
        )
        return path

    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)

    for t in range(start_batch, config.schedule.total_batches):
        lr = lr_at(config.schedule, t)
        batch = pk_sample(manifest, config.p, config.k, sampler_rng)
        images = []
        for rec in batch.records:
            pixels = _batch_pixels(cache, rec, side)
            if config.augment:
                pixels = augment(pixels, augment_rng)
            images.append(pixels)
        stacked = np.stack(images)

        try:
            grads, loss_value, result = accumulate_minibatch_gradient(
                params,
                stacked,
                batch.labels,
                margin=margin,
                reduction=config.loss_reduction,
                squared=config.squared_distances,
            )
        except NumericFault as exc:
            raise NumericFault(f"trainer: numeric fault in batch {t}: {exc}") from exc
        if not np.isfinite(loss_value):
            raise NumericFault(f"trainer: non-finite loss at batch {t}")

        adam_step(params, grads, adam, lr)
        trace.append(
            TraceRow(
                batch=t,
                lr=lr,
                loss=loss_value,
                mean_hardest_pos=float(result.hardest_pos.mean()),
                mean_hardest_neg=float(result.hardest_neg.mean()),
            )
        )
        if progress is not None:
            progress(trace[-1])
        if (
            checkpoint_dir is not None
            and config.checkpoint_every > 0
            and (t + 1) % config.checkpoint_every == 0
            and (t + 1) < config.schedule.total_batches
        ):
            save_ckpt(t + 1, f"checkpoint-{t + 1:06d}.finck")

    if checkpoint_dir is not None:
        final_path = save_ckpt(config.schedule.total_batches, "checkpoint-final.finck")
    if trace_path is not None:
        write_trace(trace_path, trace)
    return TrainResult(params=params, adam=adam, config=config, trace=trace, final_checkpoint=final_path)
