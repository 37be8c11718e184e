"""Decoder-only language model stacking hybrid mixer blocks, plus AdamW and
the learning-rate schedule.

Layer layout: x -> x + Mixer(RMSNorm(x)) -> x + SwiGLU(RMSNorm(x)); a final
RMSNorm and tied embeddings produce logits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nm
from .block import BlockConfig, block_backward, block_forward, init_block_params

LAYER_KINDS = {"hybrid": "hybrid", "gdn": "linear", "softmax": "softmax"}
ROUTING_MODES = ("learned", "all_softmax", "all_linear")


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 256
    n_layers: int = 2
    layer_pattern: tuple = ("hybrid", "hybrid")
    mlp_mult: float = 8.0 / 3.0
    seed: int = 0
    precision: str = "f32"
    block: BlockConfig = field(default_factory=BlockConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if len(self.layer_pattern) != self.n_layers:
            raise ValueError(f"layer_pattern has {len(self.layer_pattern)} entries, "
                             f"n_layers={self.n_layers}")
        bad = [k for k in self.layer_pattern if k not in LAYER_KINDS]
        if bad:
            raise ValueError(f"unknown layer kinds {bad}; use {sorted(LAYER_KINDS)}")
        nm.dtype_for(self.precision)
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")

    @property
    def d_model(self):
        return self.block.d_model

    @property
    def d_ff(self):
        return max(8, int(round(self.mlp_mult * self.d_model / 8.0)) * 8)

    @property
    def dtype(self):
        return nm.dtype_for(self.precision)

    def layer_block(self, i) -> BlockConfig:
        return replace(self.block, kind=LAYER_KINDS[self.layer_pattern[i]])


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    lr_init: float = 3e-4
    lr_end_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    warmup_steps: int = 100
    total_steps: int = 3000
    batch: int = 8
    seq_len: int = 256
    clip: float = 1.0
    log_every: int = 50

    def validate(self, chunk):
        if self.seq_len % chunk:
            raise ValueError(f"seq_len={self.seq_len} must be a multiple of chunk={chunk}")
        if self.total_steps < 1 or self.batch < 1:
            raise ValueError("total_steps and batch must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")


def lr_at(step, tc: TrainConfig):
    """Linear warmup from lr_init to lr, then cosine decay to lr * lr_end_ratio."""
    if tc.warmup_steps and step <= tc.warmup_steps:
        return tc.lr_init + (tc.lr - tc.lr_init) * step / tc.warmup_steps
    lr_end = tc.lr * tc.lr_end_ratio
    span = max(1, tc.total_steps - tc.warmup_steps)
    frac = min(1.0, (step - tc.warmup_steps) / span)
    return lr_end + 0.5 * (tc.lr - lr_end) * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------- params

def init_params(cfg: ModelConfig, seed=None) -> nm.ParamStore:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dt = cfg.dtype
    D, F = cfg.d_model, cfg.d_ff
    P = nm.ParamStore()
    P.add("embed", (0.02 * rng.standard_normal((cfg.vocab, D))).astype(dt))
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        P.add(p + "norm1", np.ones(D, dtype=dt))
        init_block_params(cfg.layer_block(i), rng, P, prefix=p + "mixer.", dtype=dt)
        P.add(p + "norm2", np.ones(D, dtype=dt))
        P.add(p + "mlp.W1", (0.02 * rng.standard_normal((D, F))).astype(dt))
        P.add(p + "mlp.W3", (0.02 * rng.standard_normal((D, F))).astype(dt))
        P.add(p + "mlp.W2", (0.02 * rng.standard_normal((F, D))).astype(dt))
    P.add("norm_f", np.ones(D, dtype=dt))
    return P


# ---------------------------------------------------------------- forward / backward

def _layer_override(routing, i):
    if routing is None or (isinstance(routing, str) and routing == "learned"):
        return None
    if isinstance(routing, (list, tuple)):
        return routing[i]
    return routing


def model_forward(tokens, P, cfg: ModelConfig, routing="learned", counter=None):
    """tokens: int [B, L]. Returns (logits [B, L, V], routings per layer, saved)."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ValueError(f"token id out of range [0, {cfg.vocab})")
    vals = P.values if isinstance(P, nm.ParamStore) else P
    eps = cfg.block.norm_eps
    x = vals["embed"][tokens]
    saved = dict(tokens=tokens, layers=[])
    routings = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h1 = nm.rmsnorm(x, vals[p + "norm1"], eps)
        y, r, bsv = block_forward(h1, vals, cfg.layer_block(i), prefix=p + "mixer.",
                                  routing_override=_layer_override(routing, i), counter=counter)
        x1 = x + y
        h2 = nm.rmsnorm(x1, vals[p + "norm2"], eps)
        a = h2 @ vals[p + "mlp.W1"]
        b = h2 @ vals[p + "mlp.W3"]
        sa = nm.activation("silu", a)
        m = sa * b
        x2 = x1 + m @ vals[p + "mlp.W2"]
        if counter is not None:
            counter.add("mlp", 3 * m.size * cfg.d_model)
        saved["layers"].append(dict(x=x, h1=h1, bsv=bsv, x1=x1, h2=h2, a=a, b=b, sa=sa, m=m))
        routings.append(r)
        x = x2
    hf = nm.rmsnorm(x, vals["norm_f"], eps)
    logits = hf @ vals["embed"].T
    if counter is not None:
        counter.add("lm_head", logits.size * cfg.d_model)
    saved.update(x_final=x, hf=hf)
    return logits, routings, saved


def model_backward(dlogits, saved, P, cfg: ModelConfig):
    """Returns a dict of parameter gradients."""
    vals = P.values if isinstance(P, nm.ParamStore) else P
    eps = cfg.block.norm_eps
    D = cfg.d_model
    g = {}
    hf = saved["hf"]
    E = vals["embed"]
    V = E.shape[0]
    g["embed"] = dlogits.reshape(-1, V).T @ hf.reshape(-1, D)
    dhf = dlogits @ E
    dx, g["norm_f"] = nm.rmsnorm_backward(dhf, saved["x_final"], vals["norm_f"], eps)
    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}."
        s = saved["layers"][i]
        F = s["m"].shape[-1]
        # MLP
        g[p + "mlp.W2"] = s["m"].reshape(-1, F).T @ dx.reshape(-1, D)
        dm = dx @ vals[p + "mlp.W2"].T
        dsa = dm * s["b"]
        db = dm * s["sa"]
        da = nm.activation_backward("silu", dsa, s["a"])
        h2f = s["h2"].reshape(-1, D)
        g[p + "mlp.W1"] = h2f.T @ da.reshape(-1, F)
        g[p + "mlp.W3"] = h2f.T @ db.reshape(-1, F)
        dh2 = da @ vals[p + "mlp.W1"].T + db @ vals[p + "mlp.W3"].T
        dx1_n, g[p + "norm2"] = nm.rmsnorm_backward(dh2, s["x1"], vals[p + "norm2"], eps)
        dx1 = dx + dx1_n
        # mixer
        dh1, _ = block_backward(dx1, s["bsv"], vals, prefix=p + "mixer.", grads=g)
        dx0_n, g[p + "norm1"] = nm.rmsnorm_backward(dh1, s["x"], vals[p + "norm1"], eps)
        dx = dx1 + dx0_n
    tok = saved["tokens"].reshape(-1)
    np.add.at(g["embed"], tok, dx.reshape(-1, D))
    return g


def loss_and_grads(tokens, targets, P, cfg: ModelConfig, routing="learned", ignore=-100):
    logits, routings, saved = model_forward(tokens, P, cfg, routing)
    loss = nm.cross_entropy(logits, targets, ignore)
    dlogits = nm.cross_entropy_backward(logits, targets, ignore)
    grads = model_backward(dlogits, saved, P, cfg)
    return loss, grads, routings, logits


def routing_stats(routings):
    """Per layer, per group fraction of Softmax-routed chunks (mean over batch and chunks)."""
    return [1.0 - r.linear.reshape(-1, *r.linear.shape[-2:]).mean(axis=(0, 2)) for r in routings]


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamW:
    """Adam with decoupled weight decay applied to matrices (not the embedding)."""

    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, tc: TrainConfig):
        return cls(beta1=tc.beta1, beta2=tc.beta2, eps=tc.adam_eps, weight_decay=tc.weight_decay)

    def decays(self, name, value):
        return value.ndim == 2 and name != "embed"

    def step(self, P: nm.ParamStore, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, val in P.values.items():
            gr = grads[name]
            m = self.m.setdefault(name, np.zeros_like(val))
            v = self.v.setdefault(name, np.zeros_like(val))
            m *= b1
            m += (1.0 - b1) * gr
            v *= b2
            v += (1.0 - b2) * gr * gr
            if self.weight_decay and self.decays(name, val):
                val *= 1.0 - lr * self.weight_decay
            val -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(val.dtype, copy=False)


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_grads(grads, max_norm):
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def train_step(batch, P, opt: AdamW, cfg: ModelConfig, tc: TrainConfig, step,
               routing="learned"):
    """One optimizer step on (tokens, targets). Returns (loss, grad_norm, routings)."""
    tokens, targets = batch
    loss, grads, routings, _ = loss_and_grads(tokens, targets, P, cfg, routing)
    norm = global_norm(grads)
    if not (math.isfinite(loss) and math.isfinite(norm)):
        layer_norms = {}
        for k, v in grads.items():
            key = k.split(".mixer.")[0].split(".mlp.")[0] if k.startswith("layers.") else k
            layer_norms[key] = layer_norms.get(key, 0.0) + float(np.sum(np.square(v)))
        raise nm.NumericalError(
            f"non-finite loss or gradient at step {step}",
            {"step": step, "loss": loss,
             "grad_norms": {k: math.sqrt(v) for k, v in layer_norms.items()},
             "softmax_fraction": [float(f.mean()) for f in routing_stats(routings)]})
    clip_grads(grads, tc.clip)
    opt.step(P, grads, lr_at(step, tc))
    return loss, norm, routings
