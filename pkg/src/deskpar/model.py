"""Tiny Llama-style transformer: meta construction, sharded init, dense oracle.

The dense forward/backward here is the single-rank ground truth that every
parallel configuration is compared against. It is deliberately written
straight through with no parallel hooks; the parallel engine lives in
:mod:`deskpar.parallelize`.

Weights are stored as ``[in_features, out_features]`` so ``y = x @ w``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import ndtensor as nt
from .dtensor import DTensor, Partial, Placement, Replicate, local_region, validate_placements
from .simruntime import DeviceMesh, current


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    vocab_size: int = 256
    seq_len: int = 128
    ffn_hidden: int = 128
    norm_eps: float = 1e-5
    rope_theta: float = 10000.0

    def __post_init__(self):
        for name in ("dim", "n_layers", "n_heads", "vocab_size", "seq_len", "ffn_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be positive")
        if self.dim % self.n_heads:
            raise ValueError(f"model.dim={self.dim} not divisible by n_heads={self.n_heads}")
        if self.head_dim % 2:
            raise ValueError("head dim must be even for rotary embeddings")
        if self.norm_eps <= 0:
            raise ValueError("model.norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads


@dataclass(frozen=True)
class ParamSpec:
    shape: tuple[int, ...]
    dtype: nt.DType = nt.DType.F64

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape))


BLOCK_PARAMS = ("attention_norm.weight", "attention.wq.weight", "attention.wk.weight",
                "attention.wv.weight", "attention.wo.weight", "ffn_norm.weight",
                "mlp.w1.weight", "mlp.w2.weight", "mlp.w3.weight")


def block_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.dim, cfg.ffn_hidden
    return {
        "attention_norm.weight": (d,),
        "attention.wq.weight": (d, d),
        "attention.wk.weight": (d, d),
        "attention.wv.weight": (d, d),
        "attention.wo.weight": (d, d),
        "ffn_norm.weight": (d,),
        "mlp.w1.weight": (d, f),
        "mlp.w2.weight": (f, d),
        "mlp.w3.weight": (d, f),
    }


@dataclass
class MetaModel:
    """Shapes and dtypes only; no parameter storage exists yet."""

    cfg: ModelConfig
    params: dict[str, ParamSpec]
    buffers: dict[str, ParamSpec] = field(default_factory=dict)

    def __getitem__(self, name: str) -> ParamSpec:
        if name in self.params:
            return self.params[name]
        if name + ".weight" in self.params:
            return self.params[name + ".weight"]
        raise KeyError(f"no parameter {name!r}")

    def fqns(self) -> list[str]:
        return list(self.params)

    def numel(self) -> int:
        return sum(p.numel for p in self.params.values())

    def nbytes(self) -> int:
        return sum(p.numel * p.dtype.itemsize for p in self.params.values())

    def top_level(self) -> list[str]:
        """Top-level modules in execution order (split points refer to these)."""
        return (["tok_embeddings"] + [f"layers.{i}" for i in range(self.cfg.n_layers)]
                + ["norm", "output"])


def build_meta_model(cfg: ModelConfig, dtype: nt.DType = nt.DType.F64) -> MetaModel:
    params = {"tok_embeddings.weight": ParamSpec((cfg.vocab_size, cfg.dim), dtype)}
    for i in range(cfg.n_layers):
        for name, shape in block_param_shapes(cfg).items():
            params[f"layers.{i}.{name}"] = ParamSpec(shape, dtype)
    params["norm.weight"] = ParamSpec((cfg.dim,), dtype)
    params["output.weight"] = ParamSpec((cfg.dim, cfg.vocab_size), dtype)
    buffers = {"freqs_cis": ParamSpec((cfg.seq_len, cfg.head_dim // 2, 2), dtype)}
    return MetaModel(cfg, params, buffers)


def init_weights(meta: MetaModel, mesh: DeviceMesh | None = None,
                 placements_per_fqn: Mapping[str, tuple[Placement, ...]] | None = None,
                 master_seed: int = 0, fqns=None) -> dict:
    """Materialise parameters.

    Without a mesh, returns full numpy arrays. With a mesh, returns DTensors
    whose locals are generated directly for this rank's region (no full
    tensor is ever built).
    """
    out = {}
    for fqn in (meta.fqns() if fqns is None else fqns):
        spec = meta.params[fqn]
        if mesh is None:
            out[fqn] = nt.init_param(fqn, spec.shape, master_seed, dtype=spec.dtype)
            continue
        placements = tuple((placements_per_fqn or {}).get(fqn, (Replicate(),) * mesh.ndim))
        placements = validate_placements(spec.shape, mesh, placements)
        if any(isinstance(p, Partial) for p in placements):
            raise ValueError(f"{fqn}: parameters cannot be initialised as Partial")
        region = local_region(spec.shape, mesh.shape, placements, mesh.coordinate(current().rank))
        local = nt.init_param(fqn, spec.shape, master_seed, region=region, dtype=spec.dtype)
        out[fqn] = DTensor(local, mesh, placements, spec.shape)
    return out


def freqs_cis(cfg: ModelConfig, dtype=np.float64) -> np.ndarray:
    return nt.precompute_freqs_cis(cfg.seq_len, cfg.head_dim, cfg.rope_theta, dtype)


# --------------------------------------------------------------------------
# dense oracle


def _attention_forward(x, p, pre, cfg, freqs):
    b, s, _ = x.shape
    h, hd = cfg.n_heads, cfg.head_dim
    q = nt.rotary_apply(nt.matmul(x, p[pre + "attention.wq.weight"]).reshape(b, s, h, hd), freqs)
    k = nt.rotary_apply(nt.matmul(x, p[pre + "attention.wk.weight"]).reshape(b, s, h, hd), freqs)
    v = nt.matmul(x, p[pre + "attention.wv.weight"]).reshape(b, s, h, hd)
    qt, kt, vt = (t.transpose(0, 2, 1, 3) for t in (q, k, v))
    o = nt.sdpa(qt, kt, vt, causal=True).transpose(0, 2, 1, 3).reshape(b, s, h * hd)
    return nt.matmul(o, p[pre + "attention.wo.weight"]), (qt, kt, vt, o)


def _attention_backward(d_y, x, p, pre, cfg, freqs, saved, grads):
    b, s, _ = x.shape
    h, hd = cfg.n_heads, cfg.head_dim
    qt, kt, vt, o = saved
    d_o, grads[pre + "attention.wo.weight"] = nt.matmul_backward(d_y, o, p[pre + "attention.wo.weight"])
    d_ot = d_o.reshape(b, s, h, hd).transpose(0, 2, 1, 3)
    d_qt, d_kt, d_vt = nt.sdpa_backward(d_ot, qt, kt, vt, causal=True)
    d_q = nt.rotary_backward(d_qt.transpose(0, 2, 1, 3), freqs).reshape(b, s, -1)
    d_k = nt.rotary_backward(d_kt.transpose(0, 2, 1, 3), freqs).reshape(b, s, -1)
    d_v = d_vt.transpose(0, 2, 1, 3).reshape(b, s, -1)
    d_x = np.zeros_like(x)
    for name, d in (("wq", d_q), ("wk", d_k), ("wv", d_v)):
        dx, grads[f"{pre}attention.{name}.weight"] = nt.matmul_backward(d, x, p[f"{pre}attention.{name}.weight"])
        d_x = d_x + dx
    return d_x


def block_forward(h, p, i, cfg, freqs):
    pre = f"layers.{i}."
    xa = nt.rms_norm(h, p[pre + "attention_norm.weight"], cfg.norm_eps)
    att, att_saved = _attention_forward(xa, p, pre, cfg, freqs)
    h2 = h + att
    xf = nt.rms_norm(h2, p[pre + "ffn_norm.weight"], cfg.norm_eps)
    a = nt.matmul(xf, p[pre + "mlp.w1.weight"])
    c = nt.matmul(xf, p[pre + "mlp.w3.weight"])
    g = nt.mul(nt.silu(a), c)
    out = h2 + nt.matmul(g, p[pre + "mlp.w2.weight"])
    return out, (h, xa, att_saved, h2, xf, a, c, g)


def block_backward(d_out, p, i, cfg, freqs, saved, grads):
    pre = f"layers.{i}."
    h, xa, att_saved, h2, xf, a, c, g = saved
    d_g, grads[pre + "mlp.w2.weight"] = nt.matmul_backward(d_out, g, p[pre + "mlp.w2.weight"])
    d_silu, d_c = nt.mul_backward(d_g, nt.silu(a), c)
    d_a = nt.silu_backward(d_silu, a)
    d_xf1, grads[pre + "mlp.w1.weight"] = nt.matmul_backward(d_a, xf, p[pre + "mlp.w1.weight"])
    d_xf3, grads[pre + "mlp.w3.weight"] = nt.matmul_backward(d_c, xf, p[pre + "mlp.w3.weight"])
    d_h2n, grads[pre + "ffn_norm.weight"] = nt.rms_norm_backward(
        d_xf1 + d_xf3, h2, p[pre + "ffn_norm.weight"], cfg.norm_eps)
    d_h2 = d_out + d_h2n
    d_xa = _attention_backward(d_h2, xa, p, pre, cfg, freqs, att_saved, grads)
    d_hn, grads[pre + "attention_norm.weight"] = nt.rms_norm_backward(
        d_xa, h, p[pre + "attention_norm.weight"], cfg.norm_eps)
    return d_h2 + d_hn


def forward(params: Mapping[str, np.ndarray], input_ids: np.ndarray, cfg: ModelConfig):
    """Logits ``[batch, seq, vocab]`` plus everything backward needs."""
    freqs = freqs_cis(cfg)[: input_ids.shape[1]]
    h = nt.embedding_lookup(params["tok_embeddings.weight"], input_ids)
    saved_blocks = []
    for i in range(cfg.n_layers):
        h, saved = block_forward(h, params, i, cfg, freqs)
        saved_blocks.append(saved)
    hn = nt.rms_norm(h, params["norm.weight"], cfg.norm_eps)
    logits = nt.matmul(hn, params["output.weight"])
    return logits, (input_ids, freqs, saved_blocks, h, hn)


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Shared loss function: mean token cross entropy."""
    return nt.softmax_cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1))


def cross_entropy_loss_backward(logits: np.ndarray, labels: np.ndarray, scale: float = 1.0) -> np.ndarray:
    flat = logits.reshape(-1, logits.shape[-1])
    return nt.softmax_cross_entropy_backward(flat, labels.reshape(-1), scale).reshape(logits.shape)


def backward(d_logits, params, cfg, cache) -> dict[str, np.ndarray]:
    input_ids, freqs, saved_blocks, h, hn = cache
    grads: dict[str, np.ndarray] = {}
    d_hn, grads["output.weight"] = nt.matmul_backward(d_logits, hn, params["output.weight"])
    d_h, grads["norm.weight"] = nt.rms_norm_backward(d_hn, h, params["norm.weight"], cfg.norm_eps)
    for i in reversed(range(cfg.n_layers)):
        d_h = block_backward(d_h, params, i, cfg, freqs, saved_blocks[i], grads)
    grads["tok_embeddings.weight"] = nt.embedding_backward(d_h, input_ids, cfg.vocab_size)
    return grads


def forward_backward_step(params: Mapping[str, np.ndarray], batch: Mapping[str, np.ndarray],
                          cfg: ModelConfig, loss_fn: Callable = cross_entropy_loss,
                          grad_scale: float = 1.0) -> tuple[float, dict[str, np.ndarray]]:
    logits, cache = forward(params, batch["input_ids"], cfg)
    loss = loss_fn(logits, batch["labels"])
    if not np.isfinite(loss):
        raise nt.NonFiniteError(f"non-finite loss {loss}")
    d_logits = cross_entropy_loss_backward(logits, batch["labels"], grad_scale)
    return loss, backward(d_logits, params, cfg, cache)


# --------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class SGDConfig:
    lr: float = 0.1
    momentum: float = 0.9


def sgd_step(params: dict, grads: Mapping[str, np.ndarray], momentum_buf: dict, cfg: SGDConfig) -> None:
    """In-place SGD with momentum; purely elementwise, so it shards trivially."""
    for fqn, g in grads.items():
        if cfg.momentum:
            buf = momentum_buf.get(fqn)
            buf = g.copy() if buf is None else cfg.momentum * buf + g
            momentum_buf[fqn] = buf
            g = buf
        params[fqn] = params[fqn] - cfg.lr * g


def train_oracle(cfg: ModelConfig, batches, steps: int, master_seed: int = 0,
                 sgd: SGDConfig = SGDConfig(), microbatches: int = 1) -> list[float]:
    """Single-rank ground truth; ``batches`` yields dicts with the global batch."""
    params = init_weights(build_meta_model(cfg), master_seed=master_seed)
    momentum: dict = {}
    losses = []
    for _ in range(steps):
        batch = next(batches)
        loss, grads = accumulate_step(params, batch, cfg, microbatches)
        sgd_step(params, grads, momentum, sgd)
        losses.append(loss)
    return losses


def accumulate_step(params, batch, cfg: ModelConfig, microbatches: int = 1):
    """Forward/backward over ``microbatches`` equal slices, gradients scaled 1/m."""
    n = batch["input_ids"].shape[0]
    if n % microbatches:
        raise ValueError(f"batch {n} not divisible into {microbatches} microbatches")
    size = n // microbatches
    total_loss, grads = 0.0, None
    for j in range(microbatches):
        mb = {k: v[j * size:(j + 1) * size] for k, v in batch.items()}
        loss, g = forward_backward_step(params, mb, cfg, grad_scale=1.0 / microbatches)
        total_loss += loss
        grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
    return total_loss / microbatches, grads
