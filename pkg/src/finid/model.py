"""The embedding network f: image -> R^D.

A small convolutional trunk (conv + ReLU + max-pool blocks) feeding the
head: a wide fully connected layer with ReLU and batch normalisation,
followed by a linear projection to the embedding dimension.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class EmbeddingNetConfig:
    """Architecture and initialisation settings for the embedding network.

    conv_blocks entries are (out_channels, kernel, pool). Kernels must be
    odd (same-padding trunk); every pooled block halves the spatial side.
    """

    input_side: int = 32
    input_channels: int = 1
    conv_blocks: tuple[tuple[int, int, bool], ...] = ((16, 3, True), (32, 3, True), (64, 3, True))
    head_hidden: int = 1024
    embed_dim: int = 128
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    init_seed: int = 0
    normalize_embeddings: bool = False

    def validate(self) -> None:
        if self.embed_dim < 2:
            raise ConfigError(f"model: embed_dim must be >= 2, got {self.embed_dim}")
        if not self.conv_blocks:
            raise ConfigError("model: at least one conv block is required")
        if self.input_channels not in (1, 3):
            raise ConfigError(f"model: input_channels must be 1 or 3, got {self.input_channels}")
        if not (0.0 < self.bn_momentum < 1.0):
            raise ConfigError(f"model: bn_momentum must lie in (0,1), got {self.bn_momentum}")
        if self.head_hidden < 1:
            raise ConfigError(f"model: head_hidden must be positive, got {self.head_hidden}")
        side = self.input_side
        for i, (out_ch, kernel, pool) in enumerate(self.conv_blocks):
            if out_ch < 1:
                raise ConfigError(f"model: block {i} has {out_ch} channels")
            if kernel % 2 == 0 or kernel < 1:
                raise ConfigError(f"model: block {i} kernel must be odd, got {kernel}")
            if pool:
                if side % 2:
                    raise ConfigError(
                        f"model: block {i} pools an odd side {side}; spatial collapse"
                    )
                side //= 2
        if side < 1:
            raise ConfigError("model: spatial side collapsed below 1")

    def spatial_out(self) -> int:
        side = self.input_side
        for _, _, pool in self.conv_blocks:
            if pool:
                side //= 2
        return side

    def flat_features(self) -> int:
        return self.conv_blocks[-1][0] * self.spatial_out() ** 2

    def to_dict(self) -> dict:
        return {
            "input_side": self.input_side,
            "input_channels": self.input_channels,
            "conv_blocks": [list(b) for b in self.conv_blocks],
            "head_hidden": self.head_hidden,
            "embed_dim": self.embed_dim,
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
            "init_seed": self.init_seed,
            "normalize_embeddings": self.normalize_embeddings,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddingNetConfig":
        blocks = tuple((int(c), int(k), bool(p)) for c, k, p in d["conv_blocks"])
        return cls(
            input_side=int(d["input_side"]),
            input_channels=int(d["input_channels"]),
            conv_blocks=blocks,
            head_hidden=int(d["head_hidden"]),
            embed_dim=int(d["embed_dim"]),
            bn_momentum=float(d["bn_momentum"]),
            bn_eps=float(d["bn_eps"]),
            init_seed=int(d["init_seed"]),
            normalize_embeddings=bool(d["normalize_embeddings"]),
        )


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    steps_seen: int = 0


@dataclass
class ModelParams:
    """All learnable weights plus batch-norm running statistics."""

    config: EmbeddingNetConfig
    conv_weights: list[Tensor] = field(default_factory=list)
    conv_biases: list[Tensor] = field(default_factory=list)
    fc1_w: Tensor = None
    fc1_b: Tensor = None
    bn: BatchNormState = None
    fc2_w: Tensor = None
    fc2_b: Tensor = None

    def trainables(self) -> list[tuple[str, Tensor]]:
        named = []
        for i, (w, b) in enumerate(zip(self.conv_weights, self.conv_biases)):
            named.append((f"conv{i}.w", w))
            named.append((f"conv{i}.b", b))
        named.extend(
            [
                ("fc1.w", self.fc1_w),
                ("fc1.b", self.fc1_b),
                ("bn.gamma", self.bn.gamma),
                ("bn.beta", self.bn.beta),
                ("fc2.w", self.fc2_w),
                ("fc2.b", self.fc2_b),
            ]
        )
        return named

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every array needed to reconstruct the params, trainable or not."""
        arrays = {name: p.data for name, p in self.trainables()}
        arrays["bn.running_mean"] = self.bn.running_mean
        arrays["bn.running_var"] = self.bn.running_var
        return arrays

    def clear_grads(self) -> None:
        for _, p in self.trainables():
            p.grad = None


def init_params(config: EmbeddingNetConfig) -> ModelParams:
    """Fan-in-scaled normal initialisation, deterministic in init_seed."""
    config.validate()
    rng = np.random.default_rng(config.init_seed)
    params = ModelParams(config=config)

    in_ch = config.input_channels
    for out_ch, kernel, _ in config.conv_blocks:
        fan_in = in_ch * kernel * kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, kernel, kernel))
        params.conv_weights.append(Tensor(w, requires_grad=True))
        params.conv_biases.append(Tensor(np.zeros(out_ch), requires_grad=True))
        in_ch = out_ch

    flat = config.flat_features()
    params.fc1_w = Tensor(
        rng.normal(0.0, np.sqrt(2.0 / flat), size=(flat, config.head_hidden)), requires_grad=True
    )
    params.fc1_b = Tensor(np.zeros(config.head_hidden), requires_grad=True)
    params.bn = BatchNormState(
        gamma=Tensor(np.ones(config.head_hidden), requires_grad=True),
        beta=Tensor(np.zeros(config.head_hidden), requires_grad=True),
        running_mean=np.zeros(config.head_hidden),
        running_var=np.ones(config.head_hidden),
    )
    params.fc2_w = Tensor(
        rng.normal(0.0, np.sqrt(1.0 / config.head_hidden), size=(config.head_hidden, config.embed_dim)),
        requires_grad=True,
    )
    params.fc2_b = Tensor(np.zeros(config.embed_dim), requires_grad=True)
    return params


def _batch_norm(h: Tensor, bn: BatchNormState, cfg: EmbeddingNetConfig, mode: str, update_running: bool) -> Tensor:
    if mode == "train":
        mu = h.mean(axis=0, keepdims=True)
        centered = h - mu
        var = centered.square().mean(axis=0, keepdims=True)
        xhat = centered / (var + cfg.bn_eps).sqrt()
        if update_running:
            m = cfg.bn_momentum
            bn.running_mean = m * bn.running_mean + (1.0 - m) * mu.data[0]
            bn.running_var = m * bn.running_var + (1.0 - m) * var.data[0]
            bn.steps_seen += 1
    else:
        xhat = (h - Tensor(bn.running_mean)) / Tensor(np.sqrt(bn.running_var + cfg.bn_eps))
    return xhat * bn.gamma + bn.beta


def batch_norm_train_stats(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch mean/variance as the train-mode forward computes them."""
    mu = h.mean(axis=0)
    var = ((h - mu) ** 2).mean(axis=0)
    return mu, var


def embed(params: ModelParams, batch, mode: str = "eval", update_running: bool = True) -> Tensor:
    """Map a batch [N, C, S, S] to embeddings [N, D].

    Train mode normalises with batch statistics (N >= 2 required) and, when
    update_running is set, folds them into the running averages. Eval mode
    uses the running statistics and never mutates params.
    """
    cfg = params.config
    if mode not in ("train", "eval"):
        raise ConfigError(f"model: unknown mode {mode!r}")
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    expected = (cfg.input_channels, cfg.input_side, cfg.input_side)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"embed: expected batch [N, {expected[0]}, {expected[1]}, {expected[2]}], got {x.shape}")
    n = x.shape[0]
    if mode == "train" and n < 2:
        raise ShapeError(f"embed: train mode needs a batch of >= 2, got {n}")

    for (w, b), (_, kernel, pool) in zip(
        zip(params.conv_weights, params.conv_biases), cfg.conv_blocks
    ):
        x = T.conv2d(x, w, b, stride=1, padding=kernel // 2)
        x = x.relu()
        if pool:
            x = T.maxpool2d(x, 2)

    x = x.reshape((n, cfg.flat_features()))
    h = (x @ params.fc1_w + params.fc1_b).relu()
    h = _batch_norm(h, params.bn, cfg, mode, update_running)
    e = h @ params.fc2_w + params.fc2_b
    if cfg.normalize_embeddings:
        norms = (e.square().sum(axis=1, keepdims=True) + 1e-24).sqrt()
        e = e / norms
    return e
