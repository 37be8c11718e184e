"""Hybrid token-mixer block: shared projections feeding a routed softmax path
and a Gated DeltaNet path, merged per token with learned convex weights.

Head grouping: h_softmax softmax heads of size d_head, h_lin GDN heads. Each
GDN head reads the concatenated channels of its G = h_softmax / h_lin
softmax heads (size G * d_head) and its normalized output is split back into
G slices, one per softmax head of the group. One routing decision and one
merge-weight pair are shared by a group.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nm
from .attn_softmax import ColumnMask, masked_attention_backward, masked_attention_forward, \
    rope_apply, rope_backward
from .gdn import gdn_chunkwise_backward, gdn_chunkwise_forward
from .router import ChunkRouting, compute_scores, forced_routing, route, score_backward

KINDS = ("hybrid", "linear", "softmax")


@dataclass(frozen=True)
class BlockConfig:
    d_model: int = 128
    h_softmax: int = 4
    h_lin: int = 2
    d_head: int = 32
    chunk: int = 16
    sub_chunk: int | None = None       # GDN sub-chunk; defaults to ``chunk``
    conv_width: int = 4
    rope: bool = False
    rope_theta: float = 10000.0
    norm_eps: float = 1e-6
    l2_eps: float = 1e-6
    score_bias: bool = False
    kind: str = "hybrid"               # hybrid | linear (GDN only) | softmax (attention only)
    # ablations
    inner_chunk: str = "both"          # both | softmax | linear
    decay_softmax_chunks: bool = True
    merge_norm: str = "separate"       # separate | single
    merge_weights: str = "q"           # q | x | fixed
    fixed_weights: tuple = (0.5, 0.5)
    output_gate: bool = True

    def __post_init__(self):
        self.validate()

    @property
    def groups(self):
        return self.h_softmax // self.h_lin

    @property
    def c(self):
        return self.sub_chunk or self.chunk

    @property
    def width(self):
        return self.h_softmax * self.d_head

    @property
    def uses_softmax(self):
        return self.kind != "linear" and self.merge_pair[0] != 0.0

    @property
    def uses_linear(self):
        return self.kind != "softmax" and self.merge_pair[1] != 0.0

    @property
    def merge_pair(self):
        """Constant merge weights, or (None, None) when they are learned."""
        if self.kind == "linear":
            return (0.0, 1.0)
        if self.kind == "softmax":
            return (1.0, 0.0)
        if self.merge_weights == "fixed":
            return tuple(float(w) for w in self.fixed_weights)
        return (None, None)

    @property
    def learned_weights(self):
        return self.kind == "hybrid" and self.merge_weights in ("q", "x")

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"block.kind must be one of {KINDS}, got {self.kind!r}")
        if self.h_lin < 1 or self.h_softmax % self.h_lin:
            raise ValueError(f"h_softmax={self.h_softmax} must be a multiple of h_lin={self.h_lin}")
        if self.chunk % self.c:
            raise ValueError(f"sub_chunk={self.c} must divide chunk={self.chunk}")
        if self.rope and self.d_head % 2:
            raise ValueError("rope needs an even d_head")
        if self.inner_chunk not in ("both", "softmax", "linear"):
            raise ValueError(f"inner_chunk must be both|softmax|linear, got {self.inner_chunk!r}")
        if self.merge_norm not in ("separate", "single"):
            raise ValueError(f"merge_norm must be separate|single, got {self.merge_norm!r}")
        if self.merge_weights not in ("q", "x", "fixed"):
            raise ValueError(f"merge_weights must be q|x|fixed, got {self.merge_weights!r}")
        if self.merge_weights == "fixed":
            w = tuple(self.fixed_weights)
            if len(w) != 2 or min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
                raise ValueError(f"fixed_weights must be a convex pair, got {w!r}")
        if self.conv_width < 1:
            raise ValueError("conv_width must be >= 1")


def init_block_params(cfg: BlockConfig, rng, store: nm.ParamStore, prefix="", dtype=np.float64):
    """Adds this block's parameters to ``store`` under ``prefix``."""
    D, hd, hl = cfg.d_model, cfg.width, cfg.h_lin

    def normal(*shape):
        return (0.02 * rng.standard_normal(shape)).astype(dtype)

    p = prefix
    store.add(p + "Wq", normal(D, hd))
    store.add(p + "Wk", normal(D, hd))
    store.add(p + "Wv", normal(D, hd))
    bound = 1.0 / np.sqrt(cfg.conv_width)
    for n in ("conv_q", "conv_k", "conv_v"):
        store.add(p + n, rng.uniform(-bound, bound, (hd, cfg.conv_width)).astype(dtype))
    if cfg.uses_softmax:
        store.add(p + "gamma_qs", np.ones(cfg.d_head, dtype=dtype))
        store.add(p + "gamma_ks", np.ones(cfg.d_head, dtype=dtype))
    if cfg.uses_linear:
        store.add(p + "Wa", normal(D, hl))
        # softplus(ba) spread over [1e-3, 1e-1]: slow to moderate forgetting
        sp = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), hl))
        store.add(p + "ba", np.log(np.expm1(sp)).astype(dtype))
        store.add(p + "Wb", normal(D, hl))
        store.add(p + "bb", np.zeros(hl, dtype=dtype))
    if cfg.kind == "hybrid":
        store.add(p + "W_score", normal(D, hl * 2))
        if cfg.score_bias:
            store.add(p + "b_score", np.zeros(hl * 2, dtype=dtype))
    if cfg.learned_weights:
        src = hd if cfg.merge_weights == "q" else D
        store.add(p + "W_w", normal(src, hl * 2))
    if cfg.uses_softmax:
        store.add(p + "gamma_onla", np.ones(cfg.d_head, dtype=dtype))
    if cfg.uses_linear and (cfg.merge_norm == "separate" or not cfg.uses_softmax):
        store.add(p + "gamma_ola", np.ones(cfg.groups * cfg.d_head, dtype=dtype))
    if cfg.output_gate:
        store.add(p + "Wgate", normal(D, hd))
        store.add(p + "bgate", np.zeros(hd, dtype=dtype))
    store.add(p + "Wo", normal(hd, D))


def block_param_names(cfg: BlockConfig):
    s = nm.ParamStore()
    init_block_params(cfg, np.random.default_rng(0), s)
    return s.names()


# ---------------------------------------------------------------- merge

def merge_outputs(O_nla, O_la, w, gamma_nla=None, gamma_la=None, eps=1e-6, single_norm=False,
                  d_head=None):
    """Per token and softmax head: w0 * Norm(O_nla) + w1 * Norm(O_la slice).

    O_nla: [..., L, H, d]; O_la: [..., L, h_lin, G * d]; w: [..., L, h_lin, 2].
    Either path may be None (pass ``d_head`` when O_nla is). ``single_norm``
    normalizes the weighted sum once, per softmax head, with ``gamma_nla``;
    it only differs from the default when both paths are present.
    Returns (O [..., L, H, d], cache for ``merge_outputs_backward``).
    """
    hl = w.shape[-2]
    if O_nla is not None:
        H, d = O_nla.shape[-2:]
        lead = O_nla.shape[:-2]
        ref = O_nla
    else:
        if d_head is None:
            raise nm.ShapeError("merge without a softmax path needs d_head")
        d = d_head
        H = hl * (O_la.shape[-1] // d)
        lead = O_la.shape[:-2]
        ref = O_la
    if O_la is not None and O_la.shape[-2:] != (hl, (H // hl) * d):
        raise nm.ShapeError(f"O_la shape {O_la.shape} does not fit {H} heads of size {d}")
    G = H // hl
    single = single_norm and O_nla is not None and O_la is not None
    we = np.repeat(w, G, axis=-2)                      # [..., L, H, 2]
    la = None if O_la is None else O_la.reshape(lead + (H, d))
    cache = dict(O_nla=O_nla, O_la=O_la, la=la, we=we, G=G, hl=hl, eps=eps, single=single,
                 gamma_nla=gamma_nla, gamma_la=gamma_la)
    if single:
        m = we[..., 0:1] * O_nla + we[..., 1:2] * la
        cache["m"] = m
        return nm.rmsnorm(m, gamma_nla, eps), cache
    out = np.zeros(lead + (H, d), dtype=ref.dtype)
    if O_nla is not None:
        n1 = nm.rmsnorm(O_nla, gamma_nla, eps)
        cache["n1"] = n1
        out = out + we[..., 0:1] * n1
    if O_la is not None:
        n2 = nm.rmsnorm(O_la, gamma_la, eps).reshape(lead + (H, d))
        cache["n2"] = n2
        out = out + we[..., 1:2] * n2
    return out, cache


def merge_outputs_backward(dout, cache):
    """Returns (dO_nla, dO_la, dw, dgamma_nla, dgamma_la); absent paths give None."""
    we, G, hl, eps = cache["we"], cache["G"], cache["hl"], cache["eps"]
    O_nla, O_la, la = cache["O_nla"], cache["O_la"], cache["la"]
    dwe = np.zeros_like(we)
    dO_nla = dO_la = dg_nla = dg_la = None
    if cache["single"]:
        dm, dg_nla = nm.rmsnorm_backward(dout, cache["m"], cache["gamma_nla"], eps)
        dO_nla = we[..., 0:1] * dm
        dwe[..., 0] = np.sum(dm * O_nla, axis=-1)
        dO_la = (we[..., 1:2] * dm).reshape(O_la.shape)
        dwe[..., 1] = np.sum(dm * la, axis=-1)
    else:
        if O_nla is not None:
            dwe[..., 0] = np.sum(dout * cache["n1"], axis=-1)
            dO_nla, dg_nla = nm.rmsnorm_backward(we[..., 0:1] * dout, O_nla,
                                                 cache["gamma_nla"], eps)
        if O_la is not None:
            dwe[..., 1] = np.sum(dout * cache["n2"], axis=-1)
            dn2 = (we[..., 1:2] * dout).reshape(O_la.shape)
            dO_la, dg_la = nm.rmsnorm_backward(dn2, O_la, cache["gamma_la"], eps)
    dw = dwe.reshape(dwe.shape[:-2] + (hl, G, 2)).sum(axis=-2)
    return dO_nla, dO_la, dw, dg_nla, dg_la


# ---------------------------------------------------------------- forward / backward

@dataclass
class BlockSaved:
    cfg: BlockConfig
    X: np.ndarray
    z: dict = field(default_factory=dict)      # pre-conv projections
    cv: dict = field(default_factory=dict)     # post-conv, pre-activation
    act: dict = field(default_factory=dict)    # post-SiLU q, k, v [B, L, hd]
    soft: dict = field(default_factory=dict)
    lin: dict = field(default_factory=dict)
    routing: ChunkRouting | None = None
    pooled: np.ndarray | None = None
    w: np.ndarray | None = None
    w_src: np.ndarray | None = None
    merge: dict | None = None
    O: np.ndarray | None = None
    gate_pre: np.ndarray | None = None
    gate: np.ndarray | None = None
    Og: np.ndarray | None = None
    positions: np.ndarray | None = None


def _routing_for(cfg: BlockConfig, X, P, prefix, override, B, n):
    shape = (B, cfg.h_lin, n)
    if cfg.kind == "linear":
        return forced_routing("all_linear", shape), None
    if cfg.kind == "softmax":
        return forced_routing("all_softmax", shape), None
    if override is not None:
        if isinstance(override, ChunkRouting):
            lin = np.broadcast_to(override.linear, shape).copy()
            return ChunkRouting(linear=lin, override=override.override or "given"), None
        if isinstance(override, str):
            return forced_routing(override, shape), None
        lin = np.broadcast_to(np.asarray(override, dtype=bool), shape).copy()
        return ChunkRouting(linear=lin, override="given"), None
    bias = P[prefix + "b_score"] if cfg.score_bias else None
    scores, pooled = compute_scores(X, P[prefix + "W_score"], cfg.chunk, bias)
    return route(scores), pooled


def block_forward(X, P, cfg: BlockConfig, prefix="", routing_override=None, counter=None,
                  positions=None):
    """X: [B, L, D] (or [L, D]). Returns (Y, routing, saved).

    ``routing_override`` may be "all_softmax", "all_linear", a boolean array
    ``linear[B?, h_lin, n]`` or a ChunkRouting; it severs the score gradient.
    """
    squeeze = X.ndim == 2
    if squeeze:
        X = X[None]
    B, L, D = X.shape
    if D != cfg.d_model:
        raise nm.ShapeError(f"input width {D} != d_model {cfg.d_model}")
    C = cfg.chunk
    if L % C:
        raise nm.ShapeError(f"L={L} is not a multiple of chunk={C}; pad upstream")
    n = L // C
    H, hl, d, G = cfg.h_softmax, cfg.h_lin, cfg.d_head, cfg.groups
    p = prefix
    sv = BlockSaved(cfg=cfg, X=X)
    for name in ("q", "k", "v"):
        z = X @ P[p + "W" + name]
        cv = nm.depthwise_causal_conv(z, P[p + "conv_" + name])
        sv.z[name], sv.cv[name] = z, cv
        sv.act[name] = nm.activation("silu", cv)
    q, k, v = sv.act["q"], sv.act["k"], sv.act["v"]

    routing, pooled = _routing_for(cfg, X, P, p, routing_override, B, n)
    sv.routing, sv.pooled = routing, pooled

    O_nla = O_la = None
    if cfg.uses_softmax:
        qh, kh = q.reshape(B, L, H, d), k.reshape(B, L, H, d)
        qs = nm.rmsnorm(qh, P[p + "gamma_qs"], cfg.norm_eps)
        ks = nm.rmsnorm(kh, P[p + "gamma_ks"], cfg.norm_eps)
        pos = np.arange(L) if positions is None else np.asarray(positions)
        sv.positions = pos
        if cfg.rope:
            qs = rope_apply(qs, pos, cfg.rope_theta)
            ks = rope_apply(ks, pos, cfg.rope_theta)
        mask = ColumnMask(~routing.linear, C)
        O_nla, asv = masked_attention_forward(qs, ks, v.reshape(B, L, H, d), mask,
                                              np.arange(H) // G,
                                              inner=cfg.inner_chunk != "linear",
                                              counter=counter)
        sv.soft = dict(qh=qh, kh=kh, ks=ks, vs=v.reshape(B, L, H, d), saved=asv)
    if cfg.uses_linear:
        ql_raw, kl_raw = q.reshape(B, L, hl, G * d), k.reshape(B, L, hl, G * d)
        ql = nm.l2_normalize(ql_raw, cfg.l2_eps)
        kl = nm.l2_normalize(kl_raw, cfg.l2_eps)
        a = X @ P[p + "Wa"] + P[p + "ba"]
        log_alpha = -nm.softplus(a)
        bpre = X @ P[p + "Wb"] + P[p + "bb"]
        beta = nm.sigmoid(bpre)
        O_la, S_fin, gsv = gdn_chunkwise_forward(
            ql, kl, v.reshape(B, L, hl, G * d), beta=beta, log_alpha=log_alpha,
            linear_chunks=routing.linear, C=C, c=cfg.c,
            inner=cfg.inner_chunk != "softmax", decay_softmax=cfg.decay_softmax_chunks,
            counter=counter)
        sv.lin = dict(ql_raw=ql_raw, kl_raw=kl_raw, ql=ql, kl=kl, a=a, bpre=bpre, beta=beta,
                      S_final=S_fin, saved=gsv)

    # merge weights
    if cfg.learned_weights:
        src = q if cfg.merge_weights == "q" else X
        logits = (src @ P[p + "W_w"]).reshape(B, L, hl, 2)
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        w = e / e.sum(axis=-1, keepdims=True)
        sv.w_src = src
    else:
        w = np.broadcast_to(np.asarray(cfg.merge_pair, dtype=X.dtype), (B, L, hl, 2))
    sv.w = w
    g_nla = P[p + "gamma_onla"] if cfg.uses_softmax else None
    g_la = P[p + "gamma_ola"] if (p + "gamma_ola") in P else None
    O, mc = merge_outputs(O_nla, O_la, w, g_nla, g_la, cfg.norm_eps,
                          single_norm=cfg.merge_norm == "single", d_head=d)
    sv.merge = mc
    O = O.reshape(B, L, H * d)
    sv.O = O
    if cfg.output_gate:
        gp = X @ P[p + "Wgate"] + P[p + "bgate"]
        gate = nm.sigmoid(gp)
        Og = O * gate
        sv.gate_pre, sv.gate = gp, gate
    else:
        Og = O
    sv.Og = Og
    Y = Og @ P[p + "Wo"]
    if counter is not None:
        hd = H * d
        proj = 3 * D * hd + hd * D
        if cfg.output_gate:
            proj += D * hd
        if cfg.uses_linear:
            proj += 2 * D * hl
        if cfg.learned_weights:
            proj += (hd if cfg.merge_weights == "q" else D) * hl * 2
        counter.add("projections", B * L * proj + (B * n * D * hl * 2 if pooled is not None
                                                   else 0))
    nm.check_finite(Y, "block output")
    if squeeze:
        return Y[0], routing, sv
    return Y, routing, sv


def block_backward(dY, sv: BlockSaved, P, prefix="", grads=None):
    """Returns (dX, grads dict name -> array). Routing is held fixed; the
    score projection receives the straight-through routing gradient unless the
    routing was forced."""
    cfg = sv.cfg
    p = prefix
    squeeze = dY.ndim == 2
    if squeeze:
        dY = dY[None]
    X = sv.X
    B, L, D = X.shape
    H, hl, d = cfg.h_softmax, cfg.h_lin, cfg.d_head
    g = {} if grads is None else grads

    def acc(name, val):
        key = p + name
        if key in g:
            g[key] = g[key] + val
        else:
            g[key] = val

    Xf = X.reshape(-1, D)
    dYf = dY.reshape(-1, D)
    acc("Wo", sv.Og.reshape(-1, H * d).T @ dYf)
    dOg = dY @ P[p + "Wo"].T
    dX = np.zeros_like(X)
    if cfg.output_gate:
        dO = dOg * sv.gate
        dgp = dOg * sv.O * sv.gate * (1.0 - sv.gate)
        acc("Wgate", Xf.T @ dgp.reshape(-1, H * d))
        acc("bgate", dgp.reshape(-1, H * d).sum(axis=0))
        dX += dgp @ P[p + "Wgate"].T
    else:
        dO = dOg
    dO = dO.reshape(B, L, H, d)
    dO_nla, dO_la, dw, dg_nla, dg_la = merge_outputs_backward(dO, sv.merge)
    if dg_nla is not None:
        acc("gamma_onla", dg_nla)
    if dg_la is not None:
        acc("gamma_ola", dg_la)

    dq = np.zeros_like(sv.act["q"])
    dk = np.zeros_like(sv.act["k"])
    dv = np.zeros_like(sv.act["v"])
    if cfg.learned_weights:
        w = sv.w
        dlog = w * (dw - np.sum(dw * w, axis=-1, keepdims=True))
        dlog = dlog.reshape(B, L, hl * 2)
        acc("W_w", sv.w_src.reshape(-1, sv.w_src.shape[-1]).T @ dlog.reshape(-1, hl * 2))
        dsrc = dlog @ P[p + "W_w"].T
        if cfg.merge_weights == "q":
            dq += dsrc
        else:
            dX += dsrc

    n = L // cfg.chunk
    dscore_nla = np.zeros((B, hl, n), dtype=X.dtype)
    dscore_la = np.zeros((B, hl, n), dtype=X.dtype)
    if cfg.uses_softmax:
        s = sv.soft
        dqs, dks, dvs, dscore_nla = masked_attention_backward(dO_nla, s["saved"])
        if cfg.rope:
            dqs = rope_backward(dqs, sv.positions, cfg.rope_theta)
            dks = rope_backward(dks, sv.positions, cfg.rope_theta)
        dqh, dgq = nm.rmsnorm_backward(dqs, s["qh"], P[p + "gamma_qs"], cfg.norm_eps)
        dkh, dgk = nm.rmsnorm_backward(dks, s["kh"], P[p + "gamma_ks"], cfg.norm_eps)
        acc("gamma_qs", dgq)
        acc("gamma_ks", dgk)
        dq += dqh.reshape(B, L, H * d)
        dk += dkh.reshape(B, L, H * d)
        dv += dvs.reshape(B, L, H * d)
    if cfg.uses_linear:
        lsv = sv.lin
        gg = gdn_chunkwise_backward(dO_la, lsv["saved"])
        dscore_la = gg.dscore_la
        dq += nm.l2_normalize_backward(gg.dq, lsv["ql_raw"], cfg.l2_eps).reshape(B, L, H * d)
        dk += nm.l2_normalize_backward(gg.dk, lsv["kl_raw"], cfg.l2_eps).reshape(B, L, H * d)
        dv += gg.dv.reshape(B, L, H * d)
        da = -gg.dlog_alpha * nm.sigmoid(lsv["a"])
        beta = lsv["beta"]
        dbp = gg.dbeta * beta * (1.0 - beta)
        acc("Wa", Xf.T @ da.reshape(-1, hl))
        acc("ba", da.reshape(-1, hl).sum(axis=0))
        acc("Wb", Xf.T @ dbp.reshape(-1, hl))
        acc("bb", dbp.reshape(-1, hl).sum(axis=0))
        dX += da @ P[p + "Wa"].T + dbp @ P[p + "Wb"].T

    if cfg.kind == "hybrid":
        if sv.routing.override is None:
            out = score_backward(dscore_nla, dscore_la, sv.routing, sv.pooled,
                                 P[p + "W_score"], cfg.chunk, with_bias=cfg.score_bias)
            acc("W_score", out[0])
            dX += out[1]
            if cfg.score_bias:
                acc("b_score", out[2])
        else:
            acc("W_score", np.zeros_like(P[p + "W_score"]))
            if cfg.score_bias:
                acc("b_score", np.zeros_like(P[p + "b_score"]))

    for name, dact in (("q", dq), ("k", dk), ("v", dv)):
        dcv = nm.activation_backward("silu", dact, sv.cv[name])
        dz, dker = nm.depthwise_causal_conv_backward(dcv, sv.z[name], P[p + "conv_" + name])
        acc("conv_" + name, dker)
        acc("W" + name, Xf.T @ dz.reshape(-1, H * d))
        dX += dz @ P[p + "W" + name].T

    if squeeze:
        return dX[0], g
    return dX, g


def with_ablation(cfg: BlockConfig, flag: str) -> BlockConfig:
    """The six single-flag ablation variants, by short name."""
    table = {
        "inner_softmax": dict(inner_chunk="softmax"),
        "inner_linear": dict(inner_chunk="linear"),
        "no_softmax_decay": dict(decay_softmax_chunks=False),
        "single_norm": dict(merge_norm="single"),
        "fixed_weights": dict(merge_weights="fixed", fixed_weights=(0.5, 0.5)),
        "weights_from_x": dict(merge_weights="x"),
    }
    if flag not in table:
        raise ValueError(f"unknown ablation {flag!r}; known: {sorted(table)}")
    return replace(cfg, **table[flag])


ABLATIONS = ("inner_softmax", "inner_linear", "no_softmax_decay", "single_norm",
             "fixed_weights", "weights_from_x")
