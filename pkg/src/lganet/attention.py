"""Local-global attention: averaged windowed queries attending to global keys/values.

The main layer normalizes its input, builds one query per overlapping
temporal window (convolutional projection averaged over the window),
attends to keys/values convolved from the whole sequence, and adds the
query tensor back as a residual. Four alternative attention mechanisms
and three positional-encoding strategies live behind the same interface
for ablation runs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .ops import Conv1dParams, LayerNormParams, avg_pool1d, conv1d, layer_norm
from .tensor import (
    Tensor,
    add,
    matmul,
    mul,
    narrow,
    pad_axis,
    reshape,
    softmax,
    stack,
    take_rows,
    tmean,
    transpose,
    unfold_windows,
)

VARIANT_LGA = "LGA"
VARIANT_VIT = "VIT_LIKE"
VARIANT_SWIN = "SWIN_LIKE"
VARIANT_GLOBAL_QKV = "GLOBAL_QKV"
VARIANT_LOCAL_QKV = "LOCAL_QKV"
VARIANTS = (VARIANT_LGA, VARIANT_VIT, VARIANT_SWIN, VARIANT_GLOBAL_QKV, VARIANT_LOCAL_QKV)

PE_NONE = "NONE"
PE_SINUSOIDAL = "SINUSOIDAL_APE"
PE_LEARNABLE = "LEARNABLE_APE"
PE_RELATIVE = "RELATIVE"
POS_ENCODINGS = (PE_NONE, PE_SINUSOIDAL, PE_LEARNABLE, PE_RELATIVE)


@dataclass
class LgaConfig:
    """Hyperparameters of one attention layer."""

    embed_dim: int
    heads: int
    window_len: int
    stride: int = 2
    query_kernel: int = 3
    query_padding: int | None = None  # None -> (query_kernel - 1) // 2
    kv_kernel: int = 3
    variant: str = VARIANT_LGA
    pos_encoding: str = PE_NONE
    halving: bool = True
    max_len: int | None = None  # positional table capacity

    @property
    def query_pad(self) -> int:
        if self.query_padding is None:
            return (self.query_kernel - 1) // 2
        return self.query_padding

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def halo(self) -> int:
        """Zero padding per side used in halving mode so M = N / stride."""
        return (self.window_len - self.stride) // 2 if self.halving else 0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown attention variant {self.variant!r}, expected one of {VARIANTS}")
        if self.pos_encoding not in POS_ENCODINGS:
            raise ConfigError(f"unknown positional encoding {self.pos_encoding!r}, expected one of {POS_ENCODINGS}")
        if self.embed_dim <= 0 or self.heads <= 0 or self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} must be a positive multiple of heads {self.heads}")
        if not self.window_len >= self.stride >= 1:
            raise ConfigError(f"need window_len >= stride >= 1, got {self.window_len}, {self.stride}")
        if 2 * self.query_pad != self.query_kernel - 1:
            raise ConfigError(
                f"query conv must preserve length: 2*padding == kernel-1, got k={self.query_kernel} p={self.query_pad}"
            )
        if self.kv_kernel % 2 == 0:
            raise ConfigError(f"kv_kernel must be odd to preserve length, got {self.kv_kernel}")
        if self.halving and (self.window_len - self.stride) % 2:
            raise ConfigError(
                f"halving mode needs even window_len-stride, got {self.window_len}-{self.stride}"
            )
        if self.pos_encoding != PE_NONE and (self.max_len is None or self.max_len < 1):
            raise ConfigError("positional encodings require a positive max_len table capacity")


def sinusoidal_encoding(n: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed interleaved sin/cos table: row p is [sin(p/w_0), cos(p/w_0), sin(p/w_1), ...]."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    pair = np.arange(0, dim, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, pair / dim)
    table = np.zeros((n, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)[:, : dim // 2]
    return table.astype(dtype)


@dataclass
class LgaWeights:
    """Learnable state of one attention layer (including its layer norm)."""

    norm: LayerNormParams
    conv_q: Conv1dParams | None
    conv_k: Conv1dParams | None
    conv_v: Conv1dParams | None
    ape: Tensor | None = None  # [max_len, D]; fixed for sinusoidal, learnable otherwise
    rel: Tensor | None = None  # [2*max_len + 1] offset table gathered into score bias

    @classmethod
    def create(cls, cfg: LgaConfig, rng: np.random.Generator, dtype=np.float32) -> "LgaWeights":
        cfg.validate()
        d = cfg.embed_dim
        norm = LayerNormParams.create(d, dtype)
        conv_q = conv_k = conv_v = None
        if cfg.variant in (VARIANT_LGA, VARIANT_GLOBAL_QKV):
            kv_pad = (cfg.kv_kernel - 1) // 2
            conv_q = Conv1dParams.create(d, d, cfg.query_kernel, 1, cfg.query_pad, rng, dtype)
            conv_k = Conv1dParams.create(d, d, cfg.kv_kernel, 1, kv_pad, rng, dtype)
            conv_v = Conv1dParams.create(d, d, cfg.kv_kernel, 1, kv_pad, rng, dtype)
        elif cfg.variant in (VARIANT_VIT, VARIANT_SWIN):
            conv_q = Conv1dParams.create(d, d, 1, 1, 0, rng, dtype)
            conv_k = Conv1dParams.create(d, d, 1, 1, 0, rng, dtype)
            conv_v = Conv1dParams.create(d, d, 1, 1, 0, rng, dtype)
        ape = rel = None
        if cfg.pos_encoding == PE_SINUSOIDAL:
            ape = Tensor(sinusoidal_encoding(cfg.max_len, d, dtype))
        elif cfg.pos_encoding == PE_LEARNABLE:
            ape = Tensor(rng.uniform(-0.02, 0.02, (cfg.max_len, d)),
                         requires_grad=True, dtype=dtype)
        elif cfg.pos_encoding == PE_RELATIVE:
            # zero init: identical to no encoding until trained
            rel = Tensor(np.zeros(2 * cfg.max_len + 1), requires_grad=True, dtype=dtype)
        return cls(norm, conv_q, conv_k, conv_v, ape, rel)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.norm.gamma": self.norm.gamma, f"{prefix}.norm.beta": self.norm.beta}
        for tag, conv in (("q", self.conv_q), ("k", self.conv_k), ("v", self.conv_v)):
            if conv is not None:
                out[f"{prefix}.conv_{tag}.weight"] = conv.weight
                out[f"{prefix}.conv_{tag}.bias"] = conv.bias
        if self.ape is not None and self.ape.requires_grad:
            out[f"{prefix}.ape"] = self.ape
        if self.rel is not None:
            out[f"{prefix}.rel"] = self.rel
        return out


def window_count(n: int, window_len: int, stride: int, halving: bool = True) -> int:
    """Number of query windows over a length-n sequence."""
    if not window_len >= stride >= 1:
        raise ShapeError(f"need window_len >= stride >= 1, got {window_len}, {stride}")
    if halving:
        if n < stride:
            raise ShapeError(f"sequence length {n} shorter than stride {stride}")
        return n // stride
    if n < window_len:
        raise ShapeError(f"sequence length {n} shorter than window {window_len} (unpadded mode)")
    return (n - window_len) // stride + 1


# -- positional encoding helpers ----------------------------------------------


def _check_capacity(cfg: LgaConfig, n: int) -> None:
    if cfg.max_len is not None and n > cfg.max_len:
        raise ConfigError(f"sequence length {n} exceeds positional table capacity {cfg.max_len}")


def _ape_rows(w: LgaWeights, cfg: LgaConfig, n: int) -> Tensor:
    """Absolute encodings for positions 0..n-1 as [1, n, D]."""
    _check_capacity(cfg, n)
    return reshape(narrow(w.ape, slice(0, n)), (1, n, cfg.embed_dim))


def _window_mean_ape(w: LgaWeights, cfg: LgaConfig, n: int) -> Tensor:
    """Per-window mean of absolute encodings, zeros on the halving halo -> [1, M, D]."""
    _check_capacity(cfg, n)
    pe = transpose(reshape(narrow(w.ape, slice(0, n)), (1, n, cfg.embed_dim)), (0, 2, 1))
    if cfg.halo:
        pe = pad_axis(pe, 2, cfg.halo, cfg.halo)
    pooled = avg_pool1d(pe, cfg.window_len, cfg.stride)
    return transpose(pooled, (0, 2, 1))


def _relative_bias(w: LgaWeights, cfg: LgaConfig, q_pos: np.ndarray, k_pos: np.ndarray) -> Tensor:
    """Gather the offset table into a [len(q_pos), len(k_pos)] score bias."""
    cap = cfg.max_len
    _check_capacity(cfg, int(k_pos.max()) + 1 if k_pos.size else 0)
    offsets = k_pos[None, :] - q_pos[:, None]
    idx = np.clip(offsets, -cap, cap) + cap
    return take_rows(w.rel, idx)


# -- core attention pieces -----------------------------------------------------


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return transpose(reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _mha(q: Tensor, k: Tensor, v: Tensor, heads: int,
         rel_bias: Tensor | None = None, capture: dict | None = None) -> Tensor:
    """Scaled dot-product attention over split heads; q is [B, M, D], k/v [B, N, D]."""
    b, m, d = q.shape
    n = k.shape[1]
    dh = d // heads
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if rel_bias is not None:
        scores = add(scores, reshape(rel_bias, (1, 1, m, n)))
    attn = softmax(scores, axis=-1)
    if capture is not None:
        capture.setdefault("attn", []).append(attn.data)
    return _merge_heads(matmul(attn, vh))


def local_queries(x_norm: Tensor, cfg: LgaConfig, w: LgaWeights, reference: bool = False) -> Tensor:
    """One averaged convolutional query per overlapping window -> [B, M, D].

    The default path convolves the whole (halo-padded) sequence once and
    average-pools with kernel=window_len, stride=stride. The reference
    path slices every window together with its convolution context and
    reduces it independently; both agree to machine precision.
    """
    b, n, d = x_norm.shape
    l, s = cfg.window_len, cfg.stride
    m = window_count(n, l, s, cfg.halving)
    xc = transpose(x_norm, (0, 2, 1))
    if cfg.halo:
        xc = pad_axis(xc, 2, cfg.halo, cfg.halo)
    if not reference:
        q = avg_pool1d(conv1d(xc, w.conv_q), l, s)
        return transpose(q, (0, 2, 1))
    p_q = w.conv_q.padding
    valid_conv = replace(w.conv_q, padding=0)
    n_pad = xc.shape[2]
    queries = []
    for i in range(m):
        lo, hi = i * s - p_q, i * s + l + p_q
        piece = narrow(xc, (slice(None), slice(None), slice(max(lo, 0), min(hi, n_pad))))
        piece = pad_axis(piece, 2, max(0, -lo), max(0, hi - n_pad))
        queries.append(tmean(conv1d(piece, valid_conv), axis=2))
    return transpose(stack(queries, axis=2), (0, 2, 1))


def global_kv(x_norm: Tensor, cfg: LgaConfig, w: LgaWeights) -> tuple[Tensor, Tensor]:
    """Shape-preserving convolutions over the whole sequence -> (K, V), each [B, N, D]."""
    xc = transpose(x_norm, (0, 2, 1))
    k = transpose(conv1d(xc, w.conv_k), (0, 2, 1))
    v = transpose(conv1d(xc, w.conv_v), (0, 2, 1))
    return k, v


def _lga_core(x_norm: Tensor, cfg: LgaConfig, w: LgaWeights, capture: dict | None) -> Tensor:
    b, n, d = x_norm.shape
    q = local_queries(x_norm, cfg, w)
    k, v = global_kv(x_norm, cfg, w)
    if cfg.pos_encoding in (PE_SINUSOIDAL, PE_LEARNABLE):
        q = add(q, _window_mean_ape(w, cfg, n))
        k = add(k, _ape_rows(w, cfg, n))
    rel_bias = None
    if cfg.pos_encoding == PE_RELATIVE:
        m = q.shape[1]
        q_pos = np.arange(m) * cfg.stride - cfg.halo  # window start in true coordinates
        rel_bias = _relative_bias(w, cfg, q_pos, np.arange(n))
    out = _mha(q, k, v, cfg.heads, rel_bias, capture)
    return add(out, q)  # Q kept as a residual


def _vit_core(x_norm: Tensor, cfg: LgaConfig, w: LgaWeights, capture: dict | None) -> Tensor:
    b, n, d = x_norm.shape
    xc = transpose(x_norm, (0, 2, 1))
    q = transpose(conv1d(xc, w.conv_q), (0, 2, 1))
    k = transpose(conv1d(xc, w.conv_k), (0, 2, 1))
    v = transpose(conv1d(xc, w.conv_v), (0, 2, 1))
    if cfg.pos_encoding in (PE_SINUSOIDAL, PE_LEARNABLE):
        rows = _ape_rows(w, cfg, n)
        q, k = add(q, rows), add(k, rows)
    rel_bias = None
    if cfg.pos_encoding == PE_RELATIVE:
        rel_bias = _relative_bias(w, cfg, np.arange(n), np.arange(n))
    return _mha(q, k, v, cfg.heads, rel_bias, capture)


def _swin_core(x_norm: Tensor, cfg: LgaConfig, w: LgaWeights, capture: dict | None) -> Tensor:
    b, n, d = x_norm.shape
    win = min(cfg.window_len, n)
    if n % win:
        raise ConfigError(f"sequence length {n} not divisible by attention window {win}")
    heads, dh = cfg.heads, cfg.head_dim
    xc = transpose(x_norm, (0, 2, 1))
    q = transpose(conv1d(xc, w.conv_q), (0, 2, 1))
    k = transpose(conv1d(xc, w.conv_k), (0, 2, 1))
    v = transpose(conv1d(xc, w.conv_v), (0, 2, 1))
    if cfg.pos_encoding in (PE_SINUSOIDAL, PE_LEARNABLE):
        rows = _ape_rows(w, cfg, n)
        q, k = add(q, rows), add(k, rows)
    nw = n // win
    def to_windows(t):
        return transpose(reshape(t, (b, nw, win, heads, dh)), (0, 1, 3, 2, 4))
    qw, kw, vw = to_windows(q), to_windows(k), to_windows(v)
    scores = mul(matmul(qw, transpose(kw, (0, 1, 2, 4, 3))), 1.0 / np.sqrt(dh))
    if cfg.pos_encoding == PE_RELATIVE:
        bias = _relative_bias(w, cfg, np.arange(win), np.arange(win))
        scores = add(scores, reshape(bias, (1, 1, 1, win, win)))
    attn = softmax(scores, axis=-1)
    if capture is not None:
        capture.setdefault("attn", []).append(attn.data)
    ow = matmul(attn, vw)  # [B, nw, H, win, Dh]
    o = reshape(transpose(ow, (0, 1, 3, 2, 4)), (b, n, d))
    pooled = avg_pool1d(transpose(o, (0, 2, 1)), cfg.stride, cfg.stride)
    return transpose(pooled, (0, 2, 1))


def _local_core(x_norm: Tensor, cfg: LgaConfig, w: LgaWeights, capture: dict | None) -> Tensor:
    b, n, d = x_norm.shape
    l, s = cfg.window_len, cfg.stride
    heads, dh = cfg.heads, cfg.head_dim
    window_count(n, l, s, cfg.halving)  # shape validation
    xp = pad_axis(x_norm, 1, cfg.halo, cfg.halo) if cfg.halo else x_norm
    xw = unfold_windows(xp, l, s)  # [B, M, l, D]
    m = xw.shape[1]
    q = tmean(xw, axis=2)  # mean of raw window embeddings
    kw = xw
    if cfg.pos_encoding in (PE_SINUSOIDAL, PE_LEARNABLE):
        q = add(q, _window_mean_ape(w, cfg, n))
        pe = _ape_rows(w, cfg, n)
        if cfg.halo:
            pe = pad_axis(pe, 1, cfg.halo, cfg.halo)
        kw = add(kw, unfold_windows(pe, l, s))
    qh = reshape(q, (b, m, heads, 1, dh))
    def heads_of(t):
        return transpose(reshape(t, (b, m, l, heads, dh)), (0, 1, 3, 2, 4))
    kh, vh = heads_of(kw), heads_of(xw)
    scores = mul(matmul(qh, transpose(kh, (0, 1, 2, 4, 3))), 1.0 / np.sqrt(dh))
    if cfg.pos_encoding == PE_RELATIVE:
        bias = _relative_bias(w, cfg, np.zeros(1, dtype=int), np.arange(l))
        scores = add(scores, reshape(bias, (1, 1, 1, 1, l)))
    attn = softmax(scores, axis=-1)
    if capture is not None:
        capture.setdefault("attn", []).append(attn.data)
    o = reshape(matmul(attn, vh), (b, m, d))
    return add(o, q)


_CORES = {
    VARIANT_LGA: _lga_core,
    VARIANT_VIT: _vit_core,
    VARIANT_SWIN: _swin_core,
    VARIANT_LOCAL_QKV: _local_core,
}


def attention_core(x_norm: Tensor, cfg: LgaConfig, w: LgaWeights,
                   capture: dict | None = None) -> Tensor:
    """Dispatch the configured variant on an already-normalized input."""
    if cfg.variant == VARIANT_GLOBAL_QKV:
        # queries built exactly like keys/values, then pooled: window == stride
        return _lga_core(x_norm, replace(cfg, window_len=cfg.stride), w, capture)
    try:
        core = _CORES[cfg.variant]
    except KeyError:
        raise ConfigError(f"unknown attention variant {cfg.variant!r}") from None
    return core(x_norm, cfg, w, capture)


def lg_attention(x: Tensor, cfg: LgaConfig, w: LgaWeights, capture: dict | None = None) -> Tensor:
    """The main layer: layer norm, windowed queries, global K/V, residual add."""
    return _lga_core(layer_norm(x, w.norm), cfg, w, capture)


def attention_variant(x: Tensor, cfg: LgaConfig, w: LgaWeights, capture: dict | None = None) -> Tensor:
    """Layer norm followed by the configured attention variant."""
    return attention_core(layer_norm(x, w.norm), cfg, w, capture)
