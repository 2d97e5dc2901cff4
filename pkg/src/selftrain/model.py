"""Tiny decoder-only causal transformer.

Parameters live in a plain ordered name->tensor mapping rather than an
``nn.Module`` so that optimizer updates, checkpoint layout, and gradient
checks all see one explicit, declared parameter order.  Forward math is
pre-norm attention + GELU MLP with learned absolute positions.

Gradients come from autograd on the forward graph; the finite-difference
check in the test suite validates them through an independent route.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .rng import stream

LN_EPS = 1e-5
INIT_STD = 0.02

CHECKPOINT_MAGIC = b"STLB"
CHECKPOINT_VERSION = 1
_HEADER_FMT = "<4sI6IBBQ4Q2I"
_FLAG_SFT_WARMED = 1
_FLAG_HAS_RNG = 2


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


class ModelError(ValueError):
    """Invalid model configuration or forward input."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    context_len: int = 160
    vocab_size: int = 44
    precision: str = "single"

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "context_len", "vocab_size"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ModelError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ModelError("head dimension must be even for rotary positions")
        if self.precision not in ("single", "double"):
            raise ModelError(f"precision must be 'single' or 'double', got {self.precision!r}")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "double" else torch.float32


def param_specs(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Declared parameter order; checkpoints store arrays in this order."""
    d, ff, v = config.d_model, config.d_ff, config.vocab_size
    specs: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (v, d)),
    ]
    for i in range(config.n_layers):
        p = f"layers.{i}."
        specs += [
            (p + "ln1.gain", (d,)),
            (p + "ln1.bias", (d,)),
            (p + "attn.wq", (d, d)),
            (p + "attn.bq", (d,)),
            (p + "attn.wk", (d, d)),
            (p + "attn.bk", (d,)),
            (p + "attn.wv", (d, d)),
            (p + "attn.bv", (d,)),
            (p + "attn.wo", (d, d)),
            (p + "attn.bo", (d,)),
            (p + "ln2.gain", (d,)),
            (p + "ln2.bias", (d,)),
            (p + "mlp.w1", (d, ff)),
            (p + "mlp.b1", (ff,)),
            (p + "mlp.w2", (ff, d)),
            (p + "mlp.b2", (d,)),
        ]
    specs += [
        ("ln_f.gain", (d,)),
        ("ln_f.bias", (d,)),
        ("out.w", (d, v)),
        ("out.b", (v,)),
    ]
    return specs


class ModelParams:
    """All model weights, keyed by name in declared order."""

    def __init__(self, config: ModelConfig, tensors: dict[str, torch.Tensor], sft_warmed: bool = False):
        self.config = config
        self.tensors = tensors
        self.sft_warmed = sft_warmed

    def param_count(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def clone(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: v.detach().clone() for k, v in self.tensors.items()},
            self.sft_warmed,
        )

    def to_precision(self, precision: str) -> "ModelParams":
        config = replace(self.config, precision=precision)
        return ModelParams(
            config,
            {k: v.detach().to(config.dtype) for k, v in self.tensors.items()},
            self.sft_warmed,
        )


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic init: N(0, 0.02) weights, zero biases, unit LN gains."""
    rng = stream("init", seed)
    tensors: dict[str, torch.Tensor] = {}
    for name, shape in param_specs(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("gain",):
            arr = np.ones(shape, dtype=np.float64)
        elif leaf.startswith("b") or leaf == "bias":
            arr = np.zeros(shape, dtype=np.float64)
        else:
            arr = rng.normal(0.0, INIT_STD, size=shape)
        tensors[name] = torch.from_numpy(np.ascontiguousarray(arr)).to(config.dtype)
    return ModelParams(config, tensors)


ROPE_BASE = 10000.0

_rope_cache: dict[tuple[int, int, torch.dtype], tuple[torch.Tensor, torch.Tensor]] = {}


def _rope_tables(seq_len: int, head_dim: int, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    key = (seq_len, head_dim, dtype)
    if key not in _rope_cache:
        inv_freq = ROPE_BASE ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
        angles = torch.arange(seq_len, dtype=torch.float64)[:, None] * inv_freq[None, :]
        angles = torch.cat([angles, angles], dim=-1)  # [T, head_dim]
        _rope_cache[key] = (angles.cos().to(dtype), angles.sin().to(dtype))
    return _rope_cache[key]


def _rotate_half(x: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    return torch.cat([-x[..., half:], x[..., :half]], dim=-1)


def forward_batch(
    params: ModelParams, ids: torch.Tensor, return_hidden: bool = False
) -> torch.Tensor | tuple[torch.Tensor, torch.Tensor]:
    """Causal next-token logits for a [B, T] id batch.

    Positions enter through rotary offsets on the attention queries and
    keys; token order matters only relatively, which keeps behavior stable
    when a prompt is embedded in a longer template.  With ``return_hidden``
    the post-final-norm hidden states [B, T, d] are returned alongside the
    logits.
    """
    F = torch.nn.functional
    t = params.tensors
    cfg = params.config
    B, T = ids.shape
    if T > cfg.context_len:
        raise ModelError(f"sequence length {T} exceeds context length {cfg.context_len}")
    d, n_heads = cfg.d_model, cfg.n_heads
    shape = (d,)
    cos, sin = _rope_tables(T, d // n_heads, t["tok_emb"].dtype)
    h = t["tok_emb"][ids]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        a = F.layer_norm(h, shape, t[p + "ln1.gain"], t[p + "ln1.bias"], LN_EPS)
        q = (a @ t[p + "attn.wq"] + t[p + "attn.bq"]).view(B, T, n_heads, -1).transpose(1, 2)
        k = (a @ t[p + "attn.wk"] + t[p + "attn.bk"]).view(B, T, n_heads, -1).transpose(1, 2)
        v = (a @ t[p + "attn.wv"] + t[p + "attn.bv"]).view(B, T, n_heads, -1).transpose(1, 2)
        q = q * cos + _rotate_half(q) * sin
        k = k * cos + _rotate_half(k) * sin
        attn = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        attn = attn.transpose(1, 2).reshape(B, T, d)
        h = h + attn @ t[p + "attn.wo"] + t[p + "attn.bo"]
        m = F.layer_norm(h, shape, t[p + "ln2.gain"], t[p + "ln2.bias"], LN_EPS)
        h = h + F.gelu(m @ t[p + "mlp.w1"] + t[p + "mlp.b1"]) @ t[p + "mlp.w2"] + t[p + "mlp.b2"]
    h = F.layer_norm(h, shape, t["ln_f.gain"], t["ln_f.bias"], LN_EPS)
    logits = h @ t["out.w"] + t["out.b"]
    if return_hidden:
        return logits, h
    return logits


def forward(
    params: ModelParams, ids, return_hidden: bool = False
) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
    """Next-token logits [T, V] for a single id sequence (no grads)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ModelError("forward expects a single 1-D id sequence")
    if ids.size == 0:
        raise ModelError("forward expects at least one token")
    if ids.min() < 0 or ids.max() >= params.config.vocab_size:
        raise ModelError("token id out of vocabulary range")
    with torch.no_grad():
        out = forward_batch(params, torch.from_numpy(ids)[None, :], return_hidden)
    if return_hidden:
        logits, hidden = out
        return logits[0].numpy(), hidden[0].numpy()
    return out[0].numpy()


def _masked_nll(params: ModelParams, inputs: torch.Tensor, targets: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    logits = forward_batch(params, inputs)
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return (nll * loss_mask).sum() / loss_mask.sum()


def _to_long(arr) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.int64))


def loss_value(params: ModelParams, inputs, targets, loss_mask) -> float:
    """Masked mean next-token NLL, evaluated without gradients."""
    mask = torch.from_numpy(np.ascontiguousarray(loss_mask)).to(params.config.dtype)
    if mask.sum() == 0:
        return 0.0
    with torch.no_grad():
        return float(_masked_nll(params, _to_long(inputs), _to_long(targets), mask))


def loss_and_grads(
    params: ModelParams, inputs, targets, loss_mask
) -> tuple[float, dict[str, torch.Tensor], int]:
    """Masked mean next-token NLL plus its gradient for every parameter.

    ``loss_mask`` is 0/1 per target position; positions with mask 0 do not
    contribute.  A fully masked batch is defined as zero loss with zero
    gradients.  Also returns the number of contributing positions.
    """
    mask = torch.from_numpy(np.ascontiguousarray(loss_mask)).to(params.config.dtype)
    token_count = int(mask.sum().item())
    if token_count == 0:
        zeros = {k: torch.zeros_like(v) for k, v in params.tensors.items()}
        return 0.0, zeros, 0
    names = list(params.tensors)
    leaves = [params.tensors[n].requires_grad_(True) for n in names]
    try:
        loss = _masked_nll(params, _to_long(inputs), _to_long(targets), mask)
        grads = torch.autograd.grad(loss, leaves)
    finally:
        for leaf in leaves:
            leaf.requires_grad_(False)
    return float(loss.detach()), dict(zip(names, grads)), token_count


# ---------------------------------------------------------------------------
# Checkpoints: fixed header followed by float32 little-endian arrays in
# declared parameter order.
# ---------------------------------------------------------------------------


def _split_u128(value: int) -> tuple[int, int]:
    return value >> 64, value & ((1 << 64) - 1)


def save_checkpoint(path: str | Path, params: ModelParams, config: ModelConfig | None = None, rng_state: dict | None = None) -> None:
    config = config or params.config
    if config != params.config:
        raise CheckpointError("config does not match params.config")
    flags = (_FLAG_SFT_WARMED if params.sft_warmed else 0) | (_FLAG_HAS_RNG if rng_state else 0)
    rng_words = [0, 0, 0, 0]
    has_uint32, uinteger = 0, 0
    if rng_state:
        st = rng_state["state"]
        rng_words = [*_split_u128(st["state"]), *_split_u128(st["inc"])]
        has_uint32 = int(rng_state.get("has_uint32", 0))
        uinteger = int(rng_state.get("uinteger", 0))
    header = struct.pack(
        _HEADER_FMT,
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        config.n_layers,
        config.n_heads,
        config.d_model,
        config.d_ff,
        config.context_len,
        config.vocab_size,
        1 if config.precision == "double" else 0,
        flags,
        params.param_count(),
        *rng_words,
        has_uint32,
        uinteger,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for name, shape in param_specs(config):
            arr = params.tensors[name].detach().numpy()
            if tuple(arr.shape) != shape:
                raise CheckpointError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelConfig, dict | None]:
    data = Path(path).read_bytes()
    header_size = struct.calcsize(_HEADER_FMT)
    if len(data) < header_size:
        raise CheckpointError("file too short for checkpoint header")
    (
        magic,
        version,
        n_layers,
        n_heads,
        d_model,
        d_ff,
        context_len,
        vocab_size,
        precision_code,
        flags,
        param_count,
        st_hi,
        st_lo,
        inc_hi,
        inc_lo,
        has_uint32,
        uinteger,
    ) = struct.unpack_from(_HEADER_FMT, data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = ModelConfig(
        n_layers=n_layers,
        n_heads=n_heads,
        d_model=d_model,
        d_ff=d_ff,
        context_len=context_len,
        vocab_size=vocab_size,
        precision="double" if precision_code else "single",
    )
    specs = param_specs(config)
    expected_count = sum(int(np.prod(s)) for _, s in specs)
    if param_count != expected_count:
        raise CheckpointError(f"header says {param_count} parameters, config implies {expected_count}")
    if len(data) != header_size + 4 * expected_count:
        raise CheckpointError(
            f"file has {len(data)} bytes, expected {header_size + 4 * expected_count}"
        )
    tensors: dict[str, torch.Tensor] = {}
    offset = header_size
    for name, shape in specs:
        n = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape).copy()
        tensors[name] = torch.from_numpy(arr).to(config.dtype)
        offset += 4 * n
    rng_state = None
    if flags & _FLAG_HAS_RNG:
        rng_state = {
            "bit_generator": "PCG64",
            "state": {"state": (st_hi << 64) | st_lo, "inc": (inc_hi << 64) | inc_lo},
            "has_uint32": has_uint32,
            "uinteger": uinteger,
        }
    params = ModelParams(config, tensors, sft_warmed=bool(flags & _FLAG_SFT_WARMED))
    return params, config, rng_state
