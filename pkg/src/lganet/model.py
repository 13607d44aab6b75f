"""Full network: convolutional front-end, halving attention blocks, multi-label head."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .attention import VARIANT_LGA, VARIANT_VIT, LgaConfig, LgaWeights, attention_core
from .errors import ConfigError, FormatError
from .ops import (
    Conv1dParams,
    LayerNormParams,
    conv1d,
    layer_norm,
    linear,
    linear_params,
    max_pool1d,
    relu,
)
from .tensor import Tensor, add, read_weights, resolve_dtype, tmean, transpose, write_weights

FRONT_BLOCKS = 4


@dataclass
class ResBlockSpec:
    """Geometry of one front-end residual block (conv-conv-skip, then halving pool)."""

    in_channels: int
    out_channels: int
    kernel: int = 7
    pool_stride: int = 2

    def validate(self) -> None:
        if self.pool_stride < 1:
            raise ConfigError(f"pool stride must be >= 1, got {self.pool_stride}")
        if self.kernel % 2 == 0:
            raise ConfigError(f"front-end conv kernel must be odd, got {self.kernel}")


@dataclass
class BlockSpec:
    """One attention stage: layer config plus its widening MLP."""

    stage: int  # 1-based
    lga: LgaConfig
    d_base: int
    mlp_hidden: int

    def validate(self) -> None:
        if self.mlp_hidden != self.d_base * 2 * self.stage:
            raise ConfigError(
                f"stage {self.stage}: mlp_hidden {self.mlp_hidden} != d_base*2*stage = {self.d_base * 2 * self.stage}"
            )
        self.lga.validate()


@dataclass
class ModelConfig:
    """Architecture plus the derived per-block specs."""

    leads: int = 12
    input_len: int = 4096
    embed_dim: int = 128
    heads: int = 4
    num_stages: int = 4
    num_classes: int = 6
    window_len: int = 64
    stride: int = 2
    query_kernel: int = 3
    kv_kernel: int = 3
    variant: str = VARIANT_LGA
    pos_encoding: str = "NONE"
    precision: str = "f32"
    front_end: tuple[ResBlockSpec, ...] = field(default_factory=tuple)
    blocks: tuple[BlockSpec, ...] = field(default_factory=tuple)

    KNOBS = ("leads", "input_len", "embed_dim", "heads", "num_stages", "num_classes",
             "window_len", "stride", "query_kernel", "kv_kernel", "variant",
             "pos_encoding", "precision")

    @classmethod
    def create(cls, **knobs) -> "ModelConfig":
        unknown = set(knobs) - set(cls.KNOBS)
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        cfg = cls(**knobs)
        cfg._derive()
        cfg.validate()
        return cfg

    def _derive(self) -> None:
        d = self.embed_dim
        chans = [self.leads] + [max(1, d >> (FRONT_BLOCKS - 1 - j)) for j in range(FRONT_BLOCKS)]
        self.front_end = tuple(ResBlockSpec(a, b) for a, b in zip(chans[:-1], chans[1:]))
        d_base = d // 4
        n1 = self.input_len // (1 << FRONT_BLOCKS)
        blocks = []
        for i in range(1, self.num_stages + 1):
            stage_len = n1 >> (i - 1)
            lga = LgaConfig(
                embed_dim=d, heads=self.heads, window_len=self.window_len,
                stride=self.stride, query_kernel=self.query_kernel,
                kv_kernel=self.kv_kernel, variant=self.variant,
                pos_encoding=self.pos_encoding, max_len=max(stage_len, 1),
            )
            blocks.append(BlockSpec(i, lga, d_base, d_base * 2 * i))
        self.blocks = tuple(blocks)

    def validate(self) -> None:
        down = 1 << (FRONT_BLOCKS + self.num_stages)
        if self.input_len % down or self.input_len // down < 1:
            raise ConfigError(
                f"input_len {self.input_len} must be a positive multiple of {down} "
                f"(front-end pools + {self.num_stages} halving stages)"
            )
        if self.leads < 1 or self.num_classes < 1 or self.num_stages < 1:
            raise ConfigError("leads, num_classes and num_stages must be positive")
        if self.embed_dim % 4:
            raise ConfigError(f"embed_dim must be a multiple of 4, got {self.embed_dim}")
        try:
            resolve_dtype(self.precision)
        except Exception:
            raise ConfigError(f"precision must be 'f32' or 'f64', got {self.precision!r}") from None
        for spec in self.front_end:
            spec.validate()
        for spec in self.blocks:
            spec.validate()

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.KNOBS}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls.create(**dict(d))

    @property
    def dtype(self) -> np.dtype:
        return resolve_dtype(self.precision)


class ResBlock:
    """conv(k) -> ReLU -> conv(k) -> add skip -> ReLU -> halving max pool."""

    def __init__(self, spec: ResBlockSpec, rng: np.random.Generator, dtype):
        spec.validate()
        self.spec = spec
        pad = spec.kernel // 2
        self.conv1 = Conv1dParams.create(spec.in_channels, spec.out_channels, spec.kernel,
                                         1, pad, rng, dtype)
        self.conv2 = Conv1dParams.create(spec.out_channels, spec.out_channels, spec.kernel,
                                         1, pad, rng, dtype)
        self.skip = None
        if spec.in_channels != spec.out_channels:
            self.skip = Conv1dParams.create(spec.in_channels, spec.out_channels, 1, 1, 0, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = conv1d(relu(conv1d(x, self.conv1)), self.conv2)
        s = x if self.skip is None else conv1d(x, self.skip)
        h = relu(add(h, s))
        return max_pool1d(h, self.spec.pool_stride, self.spec.pool_stride)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {
            f"{prefix}.conv1.weight": self.conv1.weight, f"{prefix}.conv1.bias": self.conv1.bias,
            f"{prefix}.conv2.weight": self.conv2.weight, f"{prefix}.conv2.bias": self.conv2.bias,
        }
        if self.skip is not None:
            out[f"{prefix}.skip.weight"] = self.skip.weight
            out[f"{prefix}.skip.bias"] = self.skip.bias
        return out


class TransformerBlock:
    """Attention with pooled 1x1-conv residual path, then a stage-widened MLP."""

    def __init__(self, spec: BlockSpec, rng: np.random.Generator, dtype):
        spec.validate()
        self.spec = spec
        d = spec.lga.embed_dim
        self.attn = LgaWeights.create(spec.lga, rng, dtype)
        self.res_conv = Conv1dParams.create(d, d, 1, 1, 0, rng, dtype)
        self.reduce = None
        if spec.lga.variant == VARIANT_VIT:
            # full-length attention output needs the same pooled reduction
            self.reduce = Conv1dParams.create(d, d, 1, 1, 0, rng, dtype)
        self.norm2 = LayerNormParams.create(d, dtype)
        self.w1, self.b1 = linear_params(d, spec.mlp_hidden, rng, dtype)
        self.w2, self.b2 = linear_params(spec.mlp_hidden, d, rng, dtype)

    def _pool_reduce(self, t: Tensor, conv: Conv1dParams) -> Tensor:
        s = self.spec.lga.stride
        pooled = max_pool1d(transpose(t, (0, 2, 1)), s, s)
        return transpose(conv1d(pooled, conv), (0, 2, 1))

    def forward(self, x: Tensor, capture: dict | None = None) -> Tensor:
        if x.shape[1] % self.spec.lga.stride:
            raise ConfigError(f"block input length {x.shape[1]} not divisible by stride")
        x_norm = layer_norm(x, self.attn.norm)
        y = attention_core(x_norm, self.spec.lga, self.attn, capture)
        if self.reduce is not None:
            y = self._pool_reduce(y, self.reduce)
        z = add(y, self._pool_reduce(x_norm, self.res_conv))
        h = linear(relu(linear(layer_norm(z, self.norm2), self.w1, self.b1)), self.w2, self.b2)
        return add(z, h)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out = self.attn.parameters(f"{prefix}.attn")
        out[f"{prefix}.res.weight"] = self.res_conv.weight
        out[f"{prefix}.res.bias"] = self.res_conv.bias
        if self.reduce is not None:
            out[f"{prefix}.reduce.weight"] = self.reduce.weight
            out[f"{prefix}.reduce.bias"] = self.reduce.bias
        out[f"{prefix}.norm2.gamma"] = self.norm2.gamma
        out[f"{prefix}.norm2.beta"] = self.norm2.beta
        out[f"{prefix}.mlp.w1"] = self.w1
        out[f"{prefix}.mlp.b1"] = self.b1
        out[f"{prefix}.mlp.w2"] = self.w2
        out[f"{prefix}.mlp.b2"] = self.b2
        return out


class Model:
    """End-to-end classifier emitting one logit per class."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        if not config.blocks:
            config._derive()
        config.validate()
        self.config = config
        self.dtype = config.dtype
        rng = np.random.default_rng(seed)
        self.res_blocks = [ResBlock(s, rng, self.dtype) for s in config.front_end]
        self.blocks = [TransformerBlock(s, rng, self.dtype) for s in config.blocks]
        self.head_w, self.head_b = linear_params(config.embed_dim, config.num_classes, rng, self.dtype)

    def front_end(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.config.leads or x.shape[2] != self.config.input_len:
            raise ConfigError(
                f"input shape {x.shape} does not match (B, {self.config.leads}, {self.config.input_len})"
            )
        for blk in self.res_blocks:
            x = blk.forward(x)
        return transpose(x, (0, 2, 1))

    def forward(self, x: Tensor, capture: dict | None = None) -> Tensor:
        h = self.front_end(x)
        for blk in self.blocks:
            h = blk.forward(h, capture)
        return linear(tmean(h, axis=1), self.head_w, self.head_b)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, blk in enumerate(self.res_blocks, 1):
            out.update(blk.parameters(f"front{i}"))
        for i, blk in enumerate(self.blocks, 1):
            out.update(blk.parameters(f"stage{i}"))
        out["head.weight"] = self.head_w
        out["head.bias"] = self.head_b
        return out

    def count_parameters(self) -> int:
        return count_parameters(self.parameters())

    def state_snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise FormatError(f"weight names mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, tensor in params.items():
            arr = np.asarray(state[name])
            if arr.shape != tensor.shape:
                raise FormatError(f"weight {name!r} has shape {arr.shape}, expected {tensor.shape}")
            tensor.data = arr.astype(self.dtype, copy=True)
            tensor.grad = None

    def save(self, path) -> None:
        write_weights(path, self.parameters())
        sidecar = str(path) + ".json"
        with open(sidecar, "w", encoding="utf-8") as fh:
            json.dump({"model": self.config.to_dict()}, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path, precision: str | None = None) -> "Model":
        sidecar = str(path) + ".json"
        try:
            with open(sidecar, "r", encoding="utf-8") as fh:
                meta = json.load(fh)
        except FileNotFoundError:
            raise FormatError(f"missing weight sidecar {sidecar}") from None
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid weight sidecar {sidecar}: {exc}") from None
        if "model" not in meta:
            raise FormatError(f"weight sidecar {sidecar} lacks a 'model' section")
        cfg_dict = dict(meta["model"])
        if precision is not None:
            cfg_dict["precision"] = precision
        config = ModelConfig.from_dict(cfg_dict)
        model = cls(config, seed=0)
        model.load_state(read_weights(path))
        return model


def count_parameters(params: Mapping[str, Tensor]) -> int:
    """Total element count across a named parameter mapping."""
    return sum(int(np.prod(t.shape, dtype=np.int64)) if t.ndim else 1 for t in params.values())
