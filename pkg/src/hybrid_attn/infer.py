"""Token-by-token decoding with a routing-aware state.

Per layer the decoder keeps
  * a softmax KV cache per head group, holding only chunks routed Softmax;
  * the committed linear state S (decayed through Softmax chunks);
  * a speculative working state that runs the delta rule over the current,
    not yet routed chunk (it becomes the committed state if the chunk routes
    Linear, otherwise it is dropped);
  * the current chunk's buffer (block inputs for the score, softmax K/V rows);
  * short-conv tails.

A chunk is routed the moment its C-th token arrives, with the same score
computation as training, so decode and the one-shot forward agree.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .attn_softmax import rope_apply
from .block import BlockConfig, merge_outputs
from .model import ModelConfig, model_forward
from .router import ChunkRouting, compute_scores, route


@dataclass
class LayerState:
    cfg: BlockConfig
    conv_tail: dict
    kv_k: list            # per group: [m, G, d]
    kv_v: list
    S_commit: np.ndarray | None   # [h_lin, dv, dk]
    S_work: np.ndarray | None
    log_decay: np.ndarray | None  # [h_lin], summed over the current chunk
    buf_x: list = field(default_factory=list)   # block inputs [D]
    buf_k: list = field(default_factory=list)   # [H, d]
    buf_v: list = field(default_factory=list)
    trace: list = field(default_factory=list)   # (chunk, group, choice, score_softmax, score_linear)


@dataclass
class DecodeState:
    layers: list
    pos: int = 0
    n_committed: int = 0      # completed chunks

    @property
    def chunk_fill(self):
        return len(self.layers[0].buf_x) if self.layers else 0


def _empty_layer(bc: BlockConfig, dtype):
    hl, G, d = bc.h_lin, bc.groups, bc.d_head
    hd = bc.width
    tail = {nme: np.zeros((bc.conv_width - 1, hd), dtype=dtype) for nme in "qkv"}
    kv_k = [np.zeros((0, G, d), dtype=dtype) for _ in range(hl)]
    kv_v = [np.zeros((0, G, d), dtype=dtype) for _ in range(hl)]
    S = None
    if bc.uses_linear:
        S = np.zeros((hl, G * d, G * d), dtype=dtype)
    return LayerState(cfg=bc, conv_tail=tail, kv_k=kv_k, kv_v=kv_v, S_commit=S,
                      S_work=None if S is None else S.copy(),
                      log_decay=None if S is None else np.zeros(hl, dtype=dtype))


def init_state(cfg: ModelConfig) -> DecodeState:
    return DecodeState(layers=[_empty_layer(cfg.layer_block(i), cfg.dtype)
                               for i in range(cfg.n_layers)])


# ---------------------------------------------------------------- single-token block

def _chunk_choice(st: LayerState, vals, p, routing, chunk_idx):
    """Linear flags [h_lin] and scores for the chunk that just completed."""
    bc = st.cfg
    hl = bc.h_lin
    if bc.kind == "linear":
        return np.ones(hl, dtype=bool), None
    if bc.kind == "softmax":
        return np.zeros(hl, dtype=bool), None
    if routing is None or (isinstance(routing, str) and routing == "learned"):
        X = np.stack(st.buf_x)
        bias = vals[p + "b_score"] if bc.score_bias else None
        scores, _ = compute_scores(X, vals[p + "W_score"], bc.chunk, bias)
        r = route(scores)
        return r.linear[:, 0], scores[:, 0]
    if isinstance(routing, str):
        if routing == "all_linear":
            return np.ones(hl, dtype=bool), None
        if routing == "all_softmax":
            return np.zeros(hl, dtype=bool), None
        raise ValueError(f"unknown routing {routing!r}")
    lin = np.asarray(routing.linear if isinstance(routing, ChunkRouting) else routing, dtype=bool)
    return lin.reshape(-1, hl, lin.shape[-1])[0, :, chunk_idx], None


def block_decode(x, st: LayerState, vals, pos, prefix="", routing=None, chunk_idx=0):
    """One token through the mixer. x: [D]. Returns y: [D]; updates ``st``."""
    bc = st.cfg
    p = prefix
    H, hl, d, G = bc.h_softmax, bc.h_lin, bc.d_head, bc.groups
    act = {}
    for nme in "qkv":
        z = x @ vals[p + "W" + nme]
        xp = np.concatenate([st.conv_tail[nme], z[None]], axis=0)
        ker = vals[p + "conv_" + nme]
        cv = np.zeros_like(z)
        for j in range(bc.conv_width):
            cv += ker[:, j] * xp[j]
        st.conv_tail[nme] = xp[1:]
        act[nme] = nm.activation("silu", cv)
    q, k, v = act["q"], act["k"], act["v"]
    st.buf_x.append(x)

    O_nla = O_la = None
    if bc.uses_softmax:
        qs = nm.rmsnorm(q.reshape(H, d), vals[p + "gamma_qs"], bc.norm_eps)
        ks = nm.rmsnorm(k.reshape(H, d), vals[p + "gamma_ks"], bc.norm_eps)
        if bc.rope:
            qs = rope_apply(qs[None], [pos], bc.rope_theta)[0]
            ks = rope_apply(ks[None], [pos], bc.rope_theta)[0]
        st.buf_k.append(ks)
        st.buf_v.append(v.reshape(H, d))
        scale = 1.0 / math.sqrt(d)
        out = np.zeros((H, d), dtype=x.dtype)
        bk, bv = np.stack(st.buf_k), np.stack(st.buf_v)
        for g in range(hl):
            hs = slice(g * G, (g + 1) * G)
            if bc.inner_chunk == "linear":
                Kg, Vg = st.kv_k[g], st.kv_v[g]
            else:
                Kg = np.concatenate([st.kv_k[g], bk[:, hs]], axis=0)
                Vg = np.concatenate([st.kv_v[g], bv[:, hs]], axis=0)
            if Kg.shape[0] == 0:
                continue
            s = np.einsum("hd,mhd->hm", qs[hs], Kg) * scale
            s = s - s.max(axis=-1, keepdims=True)
            e = np.exp(s)
            pr = e / e.sum(axis=-1, keepdims=True)
            out[hs] = np.einsum("hm,mhd->hd", pr, Vg)
        O_nla = out[None]
    if bc.uses_linear:
        ql = nm.l2_normalize(q.reshape(hl, G * d), bc.l2_eps)
        kl = nm.l2_normalize(k.reshape(hl, G * d), bc.l2_eps)
        vl = v.reshape(hl, G * d)
        la = -nm.softplus(x @ vals[p + "Wa"] + vals[p + "ba"])
        alpha = np.exp(la)
        beta = nm.sigmoid(x @ vals[p + "Wb"] + vals[p + "bb"])
        S = st.S_work
        Sk = np.einsum("hvk,hk->hv", S, kl)
        S = alpha[:, None, None] * (S - beta[:, None, None] * Sk[:, :, None] * kl[:, None, :]) \
            + beta[:, None, None] * vl[:, :, None] * kl[:, None, :]
        st.S_work = S
        st.log_decay = st.log_decay + la
        if bc.inner_chunk == "softmax":
            o = np.exp(st.log_decay)[:, None] * np.einsum("hvk,hk->hv", st.S_commit, ql)
        else:
            o = np.einsum("hvk,hk->hv", S, ql)
        O_la = o[None]

    if bc.learned_weights:
        src = q if bc.merge_weights == "q" else x
        lg = (src @ vals[p + "W_w"]).reshape(hl, 2)
        e = np.exp(lg - lg.max(axis=-1, keepdims=True))
        w = (e / e.sum(axis=-1, keepdims=True))[None]
    else:
        w = np.broadcast_to(np.asarray(bc.merge_pair, dtype=x.dtype), (1, hl, 2))
    g_nla = vals[p + "gamma_onla"] if bc.uses_softmax else None
    g_la = vals[p + "gamma_ola"] if (p + "gamma_ola") in vals else None
    O, _ = merge_outputs(O_nla, O_la, w, g_nla, g_la, bc.norm_eps,
                         single_norm=bc.merge_norm == "single", d_head=d)
    O = O.reshape(H * d)
    if bc.output_gate:
        O = O * nm.sigmoid(x @ vals[p + "Wgate"] + vals[p + "bgate"])
    y = O @ vals[p + "Wo"]

    if len(st.buf_x) == bc.chunk:
        _commit_chunk(st, vals, p, routing, chunk_idx)
    return y


def _commit_chunk(st: LayerState, vals, p, routing, chunk_idx):
    bc = st.cfg
    G = bc.groups
    lin, scores = _chunk_choice(st, vals, p, routing, chunk_idx)
    if bc.uses_softmax:
        bk, bv = np.stack(st.buf_k), np.stack(st.buf_v)
    for g in range(bc.h_lin):
        if lin[g]:
            if bc.uses_linear:
                st.S_commit[g] = st.S_work[g]
        else:
            if bc.uses_linear and bc.decay_softmax_chunks:
                st.S_commit[g] = np.exp(st.log_decay[g]) * st.S_commit[g]
            if bc.uses_softmax:
                hs = slice(g * G, (g + 1) * G)
                st.kv_k[g] = np.concatenate([st.kv_k[g], bk[:, hs]], axis=0)
                st.kv_v[g] = np.concatenate([st.kv_v[g], bv[:, hs]], axis=0)
        sc = (math.nan, math.nan) if scores is None else (float(scores[g, 0]),
                                                          float(scores[g, 1]))
        st.trace.append((chunk_idx, g, int(lin[g]), sc[0], sc[1]))
    if bc.uses_linear:
        st.S_work = st.S_commit.copy()
        st.log_decay = np.zeros_like(st.log_decay)
    st.buf_x, st.buf_k, st.buf_v = [], [], []


# ---------------------------------------------------------------- model level

def decode_step(token, state: DecodeState, P, cfg: ModelConfig, routing="learned"):
    """Feeds one token; returns the next-token logits [V]."""
    vals = P.values if isinstance(P, nm.ParamStore) else P
    if not 0 <= int(token) < cfg.vocab:
        raise ValueError(f"token id {token} out of range [0, {cfg.vocab})")
    eps = cfg.block.norm_eps
    chunk_idx = state.pos // cfg.block.chunk
    x = vals["embed"][int(token)]
    for i, st in enumerate(state.layers):
        pfx = f"layers.{i}."
        h1 = nm.rmsnorm(x, vals[pfx + "norm1"], eps)
        r = routing[i] if isinstance(routing, (list, tuple)) else routing
        x = x + block_decode(h1, st, vals, state.pos, prefix=pfx + "mixer.", routing=r,
                             chunk_idx=chunk_idx)
        h2 = nm.rmsnorm(x, vals[pfx + "norm2"], eps)
        m = nm.activation("silu", h2 @ vals[pfx + "mlp.W1"]) * (h2 @ vals[pfx + "mlp.W3"])
        x = x + m @ vals[pfx + "mlp.W2"]
    state.pos += 1
    if state.pos % cfg.block.chunk == 0:
        state.n_committed += 1
    hf = nm.rmsnorm(x, vals["norm_f"], eps)
    return hf @ vals["embed"].T


def _state_from_forward(saved, routings, cfg: ModelConfig, L):
    state = init_state(cfg)
    state.pos = L
    state.n_committed = L // cfg.block.chunk
    for i, (st, lay, r) in enumerate(zip(state.layers, saved["layers"], routings)):
        bc = st.cfg
        bsv = lay["bsv"]
        kw = bc.conv_width
        for nme in "qkv":
            z = bsv.z[nme][0]
            tail = np.concatenate([np.zeros((kw - 1, z.shape[-1]), dtype=z.dtype), z])[-(kw - 1):]
            st.conv_tail[nme] = tail[:kw - 1] if kw > 1 else tail[:0]
        lin = r.linear[0]                                  # [h_lin, n]
        n = lin.shape[-1]
        C, G = bc.chunk, bc.groups
        if bc.uses_softmax:
            ks = bsv.soft["ks"][0]                         # [L, H, d]
            vs = bsv.soft["vs"][0]
            for g in range(bc.h_lin):
                keep = np.repeat(~lin[g], C)
                hs = slice(g * G, (g + 1) * G)
                st.kv_k[g] = np.ascontiguousarray(ks[keep, hs])
                st.kv_v[g] = np.ascontiguousarray(vs[keep, hs])
        if bc.uses_linear:
            st.S_commit = np.array(bsv.lin["S_final"][0])
            st.S_work = st.S_commit.copy()
        for t in range(n):
            for g in range(bc.h_lin):
                sc = ((math.nan, math.nan) if r.scores is None else
                      (float(r.scores[0, g, t, 0]), float(r.scores[0, g, t, 1])))
                st.trace.append((t, g, int(lin[g, t]), sc[0], sc[1]))
    return state


def _first_chunks(routing, n):
    """Restricts an explicit per-chunk routing to its first ``n`` chunks."""
    if routing is None or isinstance(routing, str):
        return routing
    if isinstance(routing, (list, tuple)):
        return [_first_chunks(r, n) for r in routing]
    lin = routing.linear if isinstance(routing, ChunkRouting) else np.asarray(routing, dtype=bool)
    return lin[..., :n]


def prefill(tokens, P, cfg: ModelConfig, routing="learned", return_all=False):
    """Processes a prompt; complete chunks go through the training forward.

    Returns (state, logits of the last position) or, with ``return_all``,
    (state, logits [L, V]).
    """
    tokens = np.asarray(tokens).reshape(-1)
    if tokens.size == 0:
        raise ValueError("prefill needs at least one token")
    C = cfg.block.chunk
    L_full = (tokens.size // C) * C
    logits = []
    if L_full:
        lg, routings, saved = model_forward(tokens[None, :L_full], P, cfg,
                                            _first_chunks(routing, L_full // C))
        state = _state_from_forward(saved, routings, cfg, L_full)
        logits.append(lg[0])
    else:
        state = init_state(cfg)
    for t in tokens[L_full:]:
        logits.append(decode_step(t, state, P, cfg, routing)[None])
    all_logits = np.concatenate(logits, axis=0)
    return (state, all_logits) if return_all else (state, all_logits[-1])


# ---------------------------------------------------------------- footprint

def footprint_components(state: DecodeState):
    """Exact counts of stored real values, by component."""
    kv = lin = buf = conv = 0
    for st in state.layers:
        kv += sum(a.size for a in st.kv_k) + sum(a.size for a in st.kv_v)
        if st.S_commit is not None:
            lin += st.S_commit.size
            buf += st.S_work.size + st.log_decay.size
        buf += sum(a.size for a in st.buf_x) + sum(a.size for a in st.buf_k) \
            + sum(a.size for a in st.buf_v)
        conv += sum(a.size for a in st.conv_tail.values())
    return dict(kv=kv, lin=lin, buffers=buf, conv=conv, total=kv + lin + buf + conv)


def state_footprint(state: DecodeState) -> int:
    return footprint_components(state)["total"]


def softmax_chunk_pairs(state: DecodeState):
    """Per layer, number of committed (group, chunk) pairs routed Softmax."""
    out = []
    for st in state.layers:
        out.append(sum(1 for (_, _, choice, _, _) in st.trace if choice == 0)
                   if st.cfg.uses_softmax else 0)
    return out


# ---------------------------------------------------------------- sampling

def sample(logits, temperature=0.0, rng=None):
    if temperature <= 0:
        return int(np.argmax(logits))
    z = (logits - logits.max()) / temperature
    p = np.exp(z)
    p /= p.sum()
    rng = rng or np.random.default_rng()
    return int(rng.choice(p.size, p=p))


def generate(prompt, n_new, P, cfg: ModelConfig, routing="learned", temperature=0.0, seed=0):
    rng = np.random.default_rng(seed)
    state, last = prefill(prompt, P, cfg, routing)
    out = []
    for _ in range(n_new):
        tok = sample(last, temperature, rng)
        out.append(tok)
        last = decode_step(tok, state, P, cfg, routing)
    return out, state
