"""Compact bidirectional/causal transformer with toggleable optimizations.

Three architecture switches mirror the ablation harness:

  * weight_tying      — reuse the token embedding matrix as the output
                        projection (logits = h @ E^T), dropping the
                        separate vocab-sized output matrix;
  * pre_ln_rmsnorm    — pre-layer RMSNorm residual blocks (off = the
                        post-norm LayerNorm baseline);
  * cope              — contextual position encoding inside attention
                        (off = learned absolute position embeddings).

Checkpoints use a small binary container: magic "SMM1", a uint32
little-endian header length, a JSON header (config + parameter manifest
with shapes), then float32 little-endian payloads in manifest order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import PAD
from .errors import ConfigurationError, DataError
from .masking import TrainingExample

CHECKPOINT_MAGIC = b"SMM1"


@dataclass
class ModelConfig:
    vocab_size: int
    hidden: int = 512
    layers: int = 8
    heads: int = 8
    ffn_mult: int = 4
    max_len: int = 30
    dropout: float = 0.1
    causal: bool = False
    weight_tying: bool = True
    pre_ln_rmsnorm: bool = True
    cope: bool = True
    cope_p_max: int | None = None
    seed: int = 42

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ConfigurationError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.heads})"
            )
        if self.cope_p_max is None:
            self.cope_p_max = self.max_len
        if self.cope_p_max < 1:
            raise ConfigurationError(f"cope_p_max must be >= 1, got {self.cope_p_max}")
        if self.vocab_size < 3:
            raise ConfigurationError("vocab_size must cover PAD, MASK, and at least one item")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0,1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple]]:
    """Single source of truth for parameter names/shapes, in storage order."""
    d, f = config.hidden, config.hidden * config.ffn_mult
    shapes: list[tuple[str, tuple]] = [("tok_emb", (config.vocab_size, d))]
    if not config.cope:
        shapes.append(("pos_emb", (config.max_len, d)))
    for i in range(config.layers):
        b = f"block{i}"
        for proj in ("q_proj", "k_proj", "v_proj", "out_proj"):
            shapes.append((f"{b}.attn.{proj}.weight", (d, d)))
            shapes.append((f"{b}.attn.{proj}.bias", (d,)))
        if config.cope:
            shapes.append((f"{b}.attn.cope_table", (config.cope_p_max + 1, config.head_dim)))
        shapes.append((f"{b}.ffn.w1.weight", (d, f)))
        shapes.append((f"{b}.ffn.w1.bias", (f,)))
        shapes.append((f"{b}.ffn.w2.weight", (f, d)))
        shapes.append((f"{b}.ffn.w2.bias", (d,)))
        for norm in ("norm1", "norm2"):
            shapes.append((f"{b}.{norm}.gain", (d,)))
            if not config.pre_ln_rmsnorm:
                shapes.append((f"{b}.{norm}.bias", (d,)))
    shapes.append(("final_norm.gain", (d,)))
    if not config.pre_ln_rmsnorm:
        shapes.append(("final_norm.bias", (d,)))
    if not config.weight_tying:
        shapes.append(("out_proj.weight", (config.vocab_size, d)))
    return shapes


def _truncated_normal(rng: np.random.Generator, shape, std=0.02, clip_sigmas=2.0):
    x = rng.normal(0.0, std, size=shape)
    bound = clip_sigmas * std
    bad = np.abs(x) > bound
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > bound
    return x


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Parameter], dtype=np.float32):
        self.config = config
        self.params = params
        self.dtype = dtype

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def tensor(self, name: str) -> Tensor:
        return self.params[name].tensor

    def forward(self, input_ids, attention_flags, training=False, rng=None) -> Tensor:
        return forward_arrays(self, input_ids, attention_flags, training, rng)


def init_model(config: ModelConfig, dtype=np.float32) -> Model:
    """Weights ~ Normal(0, 0.02) truncated at two sigma, biases zero,
    norm gains one; deterministic from config.seed."""
    rng = np.random.default_rng(config.seed)
    params: dict[str, Parameter] = {}
    for name, shape in parameter_shapes(config):
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            data = _truncated_normal(rng, shape)
        params[name] = Parameter(name, Tensor(data.astype(dtype), requires_grad=True))
    return Model(config, params, dtype)


def count_parameters(model: Model) -> dict:
    return _count(((p.name, p.tensor.data.shape) for p in model.parameters()))


def count_parameters_for_config(config: ModelConfig) -> dict:
    """Exact counts from the manifest alone (no allocation)."""
    return _count(parameter_shapes(config))


def _count(named_shapes) -> dict:
    by_component: dict[str, int] = {}
    total = 0
    for name, shape in named_shapes:
        n = int(np.prod(shape))
        component = name.split(".")[0]
        by_component[component] = by_component.get(component, 0) + n
        total += n
    return {"by_component": by_component, "total": total}


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def batch_arrays(examples: Sequence[TrainingExample]) -> tuple[np.ndarray, np.ndarray]:
    ids = np.array([ex.input_ids for ex in examples], dtype=np.int64)
    flags = np.array([ex.attention_flags for ex in examples], dtype=bool)
    return ids, flags


def _visible_pairs(config: ModelConfig, flags: np.ndarray) -> np.ndarray:
    """(B, T, T) bool: query i may attend key j."""
    b, t = flags.shape
    vis = np.broadcast_to(flags[:, None, :], (b, t, t))
    if config.causal:
        vis = vis & np.tri(t, dtype=bool)[None, :, :]
    return np.ascontiguousarray(vis)


def attention_scores_with_cope(q: Tensor, k: Tensor, cope_table: Tensor, visible) -> Tensor:
    """Pre-mask attention logits: scaled content dot product plus the
    gate-accumulated position term. q, k are (N, T, head_dim)."""
    head_dim = q.shape[-1]
    content = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(head_dim))
    return content + ad.cope_position_logits(q, k, cope_table, visible)


def _split_heads(x: Tensor, b: int, t: int, heads: int, head_dim: int) -> Tensor:
    x = ad.reshape(x, (b, t, heads, head_dim))
    x = ad.transpose(x, (0, 2, 1, 3))
    return ad.reshape(x, (b * heads, t, head_dim))


def _merge_heads(x: Tensor, b: int, t: int, heads: int, head_dim: int) -> Tensor:
    x = ad.reshape(x, (b, heads, t, head_dim))
    x = ad.transpose(x, (0, 2, 1, 3))
    return ad.reshape(x, (b, t, heads * head_dim))


def _attention(model: Model, x: Tensor, visible: np.ndarray, block: str,
               training: bool, rng) -> Tensor:
    cfg = model.config
    b, t, _ = x.shape
    heads, head_dim = cfg.heads, cfg.head_dim

    def proj(name):
        w = model.tensor(f"{block}.attn.{name}.weight")
        bias = model.tensor(f"{block}.attn.{name}.bias")
        return ad.matmul(x, w) + bias

    q = _split_heads(proj("q_proj"), b, t, heads, head_dim)
    k = _split_heads(proj("k_proj"), b, t, heads, head_dim)
    v = _split_heads(proj("v_proj"), b, t, heads, head_dim)

    vis_heads = np.repeat(visible, heads, axis=0)
    if cfg.cope:
        scores = attention_scores_with_cope(q, k, model.tensor(f"{block}.attn.cope_table"), vis_heads)
    else:
        scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(head_dim))
    scores = ad.masked_fill(scores, ~vis_heads, ad.NEG_FILL)
    probs = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(probs, v)
    ctx = _merge_heads(ctx, b, t, heads, head_dim)
    if training:
        ctx = ad.dropout(ctx, cfg.dropout, rng)
    w_out = model.tensor(f"{block}.attn.out_proj.weight")
    return ad.matmul(ctx, w_out) + model.tensor(f"{block}.attn.out_proj.bias")


def _ffn(model: Model, x: Tensor, block: str, training: bool, rng) -> Tensor:
    cfg = model.config
    h = ad.matmul(x, model.tensor(f"{block}.ffn.w1.weight")) + model.tensor(f"{block}.ffn.w1.bias")
    h = ad.gelu(h)
    if training:
        h = ad.dropout(h, cfg.dropout, rng)
    return ad.matmul(h, model.tensor(f"{block}.ffn.w2.weight")) + model.tensor(f"{block}.ffn.w2.bias")


def _norm(model: Model, x: Tensor, name: str) -> Tensor:
    if model.config.pre_ln_rmsnorm:
        return ad.rms_norm(x, model.tensor(f"{name}.gain"))
    return ad.layer_norm(x, model.tensor(f"{name}.gain"), model.tensor(f"{name}.bias"))


def forward_arrays(model: Model, input_ids, attention_flags, training=False, rng=None) -> Tensor:
    """Logits (B, T, vocab) for a packed batch.

    Pre-LN blocks: x += Attn(RMSNorm(x)); x += FFN(RMSNorm(x)); final
    RMSNorm before the output projection. Post-norm baseline:
    x = LN(x + Attn(x)); x = LN(x + FFN(x)); final LN.
    """
    cfg = model.config
    input_ids = np.asarray(input_ids, dtype=np.int64)
    attention_flags = np.asarray(attention_flags, dtype=bool)
    b, t = input_ids.shape
    if t > cfg.max_len:
        raise DataError(f"batch length {t} exceeds max_len {cfg.max_len}")
    if training and cfg.dropout > 0.0 and rng is None:
        raise ConfigurationError("training forward with dropout requires an rng")

    x = ad.embedding(model.tensor("tok_emb"), input_ids)
    if not cfg.cope:
        x = x + ad.embedding(model.tensor("pos_emb"), np.arange(t))
    visible = _visible_pairs(cfg, attention_flags)

    for i in range(cfg.layers):
        block = f"block{i}"
        if cfg.pre_ln_rmsnorm:
            x = x + _attention(model, _norm(model, x, f"{block}.norm1"), visible, block, training, rng)
            x = x + _ffn(model, _norm(model, x, f"{block}.norm2"), block, training, rng)
        else:
            x = _norm(model, x + _attention(model, x, visible, block, training, rng), f"{block}.norm1")
            x = _norm(model, x + _ffn(model, x, block, training, rng), f"{block}.norm2")

    x = _norm(model, x, "final_norm")
    out_table = model.tensor("tok_emb") if cfg.weight_tying else model.tensor("out_proj.weight")
    return ad.matmul(x, ad.transpose(out_table, (1, 0)))


def forward(model: Model, batch: Sequence[TrainingExample], training=False, rng=None) -> Tensor:
    ids, flags = batch_arrays(batch)
    return forward_arrays(model, ids, flags, training, rng)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, path: str | Path) -> None:
    manifest = [{"name": p.name, "shape": list(p.tensor.data.shape)} for p in model.parameters()]
    header = json.dumps({"config": asdict(model.config), "params": manifest}).encode()
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for p in model.parameters():
            fh.write(np.ascontiguousarray(p.tensor.data, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path, dtype=np.float32) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    (header_len,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + header_len].decode())
    config = ModelConfig(**header["config"])
    model = init_model(config, dtype=dtype)
    offset = 8 + header_len
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        chunk = raw[offset:offset + 4 * n]
        if len(chunk) != 4 * n:
            raise ConfigurationError(f"{path}: truncated payload for {entry['name']}")
        values = np.frombuffer(chunk, dtype="<f4").reshape(shape)
        model.params[entry["name"]].tensor.data = values.astype(dtype)
        offset += 4 * n
    return model
