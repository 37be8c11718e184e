"""FLOP accounting and wall-clock microbenchmarks.

Kernels report multiply-adds into a ``FlopCounter`` under these tags:

    softmax_inner   diagonal (same-chunk) attention blocks
    softmax_cross   attention blocks against earlier, Softmax-routed chunks
    linear_inner    GDN intra-chunk work (UT transform, outputs, inner folds)
    linear_fold     the chunk-closing state update: a full fold for Linear
                    chunks, a decay-only scaling for Softmax chunks
    projections, mlp, lm_head

The routing-dependent attention cost is softmax_cross + linear_fold; the
inner-chunk tags do not depend on routing.
"""
from __future__ import annotations

import statistics
import time
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .block import BlockConfig, block_forward, init_block_params
from .model import ModelConfig, init_params
from .numerics import ParamStore
from .router import forced_routing


@dataclass
class FlopCounter:
    counts: dict = field(default_factory=lambda: defaultdict(int))

    def add(self, kind, n):
        self.counts[kind] += int(n)

    def __getitem__(self, kind):
        return self.counts.get(kind, 0)

    @property
    def attn_softmax(self):
        return self["softmax_inner"] + self["softmax_cross"]

    @property
    def attn_linear(self):
        return self["linear_inner"] + self["linear_fold"]

    @property
    def attention(self):
        return self.attn_softmax + self.attn_linear

    @property
    def routed(self):
        return self["softmax_cross"] + self["linear_fold"]

    def report(self):
        out = {k: int(v) for k, v in sorted(self.counts.items())}
        out.update(attn_softmax=self.attn_softmax, attn_linear=self.attn_linear,
                   attention=self.attention, routed=self.routed)
        return out


def bench_block_config(cfg: ModelConfig) -> BlockConfig:
    return replace(cfg.block, kind="hybrid")


def count_block(bcfg: BlockConfig, L, mode="fraction", fraction=None, seed=0, params=None):
    """Runs one block forward (batch 1) under a forced routing and returns
    (FlopCounter, number of Softmax tokens, number of Linear tokens).

    mode: "fraction" (share ``fraction`` of chunks Softmax), "all_softmax",
    "all_linear" or "learned".
    """
    rng = np.random.default_rng(seed)
    if params is None:
        params = ParamStore()
        init_block_params(bcfg, rng, params, dtype=np.float32)
    vals = params.values if isinstance(params, ParamStore) else params
    X = rng.standard_normal((1, L, bcfg.d_model)).astype(np.float32)
    n = L // bcfg.chunk
    if mode == "learned":
        override = None
    elif mode == "fraction":
        override = forced_routing("fraction", (1, bcfg.h_lin, n), fraction)
    else:
        override = mode
    counter = FlopCounter()
    _, routing, _ = block_forward(X, vals, bcfg, routing_override=override, counter=counter)
    lin = routing.linear[0]
    # tokens averaged over groups: each group routes its own chunks
    L_la = float(lin.sum()) * bcfg.chunk / bcfg.h_lin
    return counter, L - L_la, L_la


@dataclass
class ComplexityFit:
    a: float
    b: float
    points: list          # dicts with L, p, L_nla, L_la, counted, predicted, rel_err
    ratio_linear: float
    ratio_softmax: float

    @property
    def max_rel_err(self):
        return max(abs(pt["rel_err"]) for pt in self.points)


def fit_cost(points, C, key="counted"):
    """Relative least squares for cost = a * L_nla * L + b * L_la * C."""
    A = np.array([[pt["L_nla"] * pt["L"], pt["L_la"] * C] for pt in points], dtype=np.float64)
    y = np.array([pt[key] for pt in points], dtype=np.float64)
    w = 1.0 / y
    coef, *_ = np.linalg.lstsq(A * w[:, None], y * w, rcond=None)
    pred = A @ coef
    return float(coef[0]), float(coef[1]), pred


def complexity_fit(bcfg: BlockConfig, lengths=(256, 512, 1024, 2048),
                   fractions=(0.0, 0.25, 0.5, 1.0), metric="routed", seed=0):
    """Counts attention multiply-adds over a grid and fits the two-term model.

    ``metric``: "routed" (routing-dependent work) or "attention" (all of it).
    """
    rng = np.random.default_rng(seed)
    params = ParamStore()
    init_block_params(bcfg, rng, params, dtype=np.float32)
    points = []
    for L in lengths:
        for p in fractions:
            c, L_nla, L_la = count_block(bcfg, L, "fraction", p, seed, params)
            points.append(dict(L=L, p=p, L_nla=L_nla, L_la=L_la,
                               counted=getattr(c, metric), report=c.report()))
    a, b, pred = fit_cost(points, bcfg.chunk)
    for pt, pr in zip(points, pred):
        pt["predicted"] = float(pr)
        pt["rel_err"] = float((pt["counted"] - pr) / pt["counted"])
    Lmax, Lprev = lengths[-1], lengths[-2]

    def at(L, p):
        return next(pt["counted"] for pt in points if pt["L"] == L and pt["p"] == p)

    ratio_lin = at(Lmax, 0.0) / at(Lprev, 0.0) * (Lprev * 2 / Lmax)
    ratio_soft = at(Lmax, 1.0) / at(Lprev, 1.0) * (Lprev * 2 / Lmax) ** 2
    return ComplexityFit(a=a, b=b, points=points, ratio_linear=ratio_lin,
                         ratio_softmax=ratio_soft)


def time_inference(cfg: ModelConfig, L, routing="learned", decode_steps=32, seed=0, params=None):
    """Prefill wall time for L tokens and median per-token decode time."""
    from .infer import decode_step, footprint_components, prefill

    rng = np.random.default_rng(seed)
    P = params if params is not None else init_params(cfg)
    tokens = rng.integers(0, cfg.vocab, L)
    t0 = time.perf_counter()
    state, last = prefill(tokens, P, cfg, routing)
    t_prefill = time.perf_counter() - t0
    times = []
    tok = int(np.argmax(last))
    for _ in range(max(20, decode_steps)):
        t0 = time.perf_counter()
        last = decode_step(tok, state, P, cfg, routing)
        times.append(time.perf_counter() - t0)
        tok = int(np.argmax(last))
    return dict(L=L, prefill_s=t_prefill, decode_median_s=statistics.median(times),
                footprint=footprint_components(state))
