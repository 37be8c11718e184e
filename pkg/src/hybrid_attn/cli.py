"""Command-line front end.

    hybrid-attn train       --config run.cfg --out runs/a
    hybrid-attn eval        --checkpoint runs/a/checkpoint.npz --out runs/a
    hybrid-attn generate    --checkpoint runs/a/checkpoint.npz --prompt 2,3,4
    hybrid-attn bench       --config run.cfg --out runs/bench
    hybrid-attn route-stats --checkpoint runs/a/checkpoint.npz --out runs/a

Exit codes: 0 ok, 2 configuration or input error, 3 numerical failure.
HYBRID_ATTN_THREADS caps the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import config as cfgmod
from .bench import bench_block_config, complexity_fit, count_block, time_inference
from .config import ConfigError, RunConfig
from .infer import footprint_components, generate
from .model import init_params
from .numerics import NumericalError
from .train import eval_batch, evaluate, run_training

log = logging.getLogger("hybrid_attn")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
COMMANDS = ("train", "eval", "generate", "bench", "route-stats")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser():
    ap = _Parser(prog="hybrid-attn", description="Chunk-routed hybrid attention toolkit.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="sets model.seed and task.seed")
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("--routing", choices=("learned", "all_softmax", "all_linear"))
    common.add_argument("--out", metavar="DIR", help="existing output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name != "train" and name != "bench":
            p.add_argument("--checkpoint", metavar="PATH",
                           help="trained parameters (random init if omitted)")
        if name == "generate":
            p.add_argument("--prompt", help="comma separated token ids "
                                            "(default: first eval sequence up to its separator)")
            p.add_argument("--tokens", type=int, help="number of tokens to generate")
        if name == "bench":
            p.add_argument("--fraction", type=float, action="append",
                           help="Softmax chunk share for FLOP counting (repeatable)")
            p.add_argument("--length", type=int, action="append",
                           help="sequence length (repeatable)")
            p.add_argument("--pin-threads", action="store_true",
                           help="use a single BLAS thread for timing stability")
            p.add_argument("--no-timing", action="store_true", help="FLOP counts only")
    return ap


# ---------------------------------------------------------------- config plumbing

def _flag_overrides(args):
    pairs = cfgmod.parse_set(args.overrides)
    if args.seed is not None:
        pairs += [("model.seed", str(args.seed)), ("task.seed", str(args.seed))]
    if args.precision:
        pairs.append(("model.precision", args.precision))
    if args.routing:
        pairs.append(("run.routing", args.routing))
    return pairs


def resolve_config(args, base_text=None) -> RunConfig:
    """Config file (or checkpoint echo), then --set pairs, then explicit flags."""
    pairs = _flag_overrides(args)
    if args.config:
        return cfgmod.load(args.config, pairs)
    return cfgmod.loads(base_text or "", pairs)


def _out_dir(args, required=True):
    if args.out is None:
        if required:
            raise ConfigError("--out DIR is required for this command")
        return None
    if not os.path.isdir(args.out):
        raise ConfigError(f"output directory {args.out!r} does not exist")
    return args.out


def _params_and_config(args):
    """Loads the checkpoint (if any) and the config governing it."""
    if getattr(args, "checkpoint", None):
        try:
            P, text = ckpt.load(args.checkpoint)
        except ckpt.CheckpointError as e:
            raise ConfigError(str(e)) from None
        cfg = resolve_config(args, base_text=text)
        try:
            ckpt.check_compatible(P, init_params(cfg.model))
        except ckpt.CheckpointError as e:
            raise ConfigError(str(e)) from None
        return P.astype(cfg.model.dtype), cfg
    cfg = resolve_config(args)
    return init_params(cfg.model), cfg


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def _routed_layers(cfg: RunConfig):
    return [i for i in range(cfg.model.n_layers) if cfg.model.layer_block(i).kind == "hybrid"]


# ---------------------------------------------------------------- commands

def cmd_train(args):
    out = _out_dir(args)
    cfg = resolve_config(args)
    text = cfgmod.dumps(cfg)
    _write(os.path.join(out, "config.txt"), text)

    def progress(rec):
        log.info("step %d loss %.4f lr %.2e grad_norm %.3f softmax_frac %s", rec["step"],
                 rec["loss"], rec["lr"], rec["grad_norm"], rec["softmax_frac"])

    res = run_training(cfg.model, cfg.train, cfg.task, routing=cfg.run.routing,
                       metrics_path=os.path.join(out, "metrics.jsonl"), log=progress)
    ckpt.save(os.path.join(out, "checkpoint.npz"), res.params, text)
    ev = evaluate(res.params, cfg.model, cfg.task, cfg.run.routing, cfg.run.eval_seqs,
                  cfg.run.eval_seed)
    stats = _route_stats(ev, cfg)
    stats.update(final_loss=res.final_loss, eval_accuracy=ev["accuracy"], eval_loss=ev["loss"])
    _write(os.path.join(out, "routing_stats.json"), json.dumps(stats, indent=2) + "\n")
    print(json.dumps(dict(final_loss=res.final_loss, eval_accuracy=ev["accuracy"],
                          softmax_fraction=stats["overall"])))
    return EXIT_OK


def _route_stats(ev, cfg: RunConfig):
    """Per layer and group Softmax share over the evaluation routings."""
    per_layer = {}
    fracs = []
    for i in range(cfg.model.n_layers):
        lin = np.concatenate([batch[i].linear.reshape(-1, *batch[i].linear.shape[-2:])
                              for batch in ev["routings"]])
        soft = 1.0 - lin.mean(axis=(0, 2))
        per_layer[str(i)] = dict(kind=cfg.model.layer_block(i).kind,
                                 per_group=[round(float(f), 6) for f in soft],
                                 per_chunk=[round(float(f), 6)
                                            for f in 1.0 - lin.mean(axis=(0, 1))])
        if cfg.model.layer_block(i).kind == "hybrid":
            fracs.append(1.0 - lin.mean())
    overall = float(np.mean(fracs)) if fracs else None
    return dict(routing=cfg.run.routing, layers=per_layer, overall=overall)


def _write_trace(path, ev, cfg: RunConfig):
    """One line per (sequence, layer, group, chunk) for hybrid layers."""
    rows = 0
    with open(path, "w") as fh:
        fh.write("seq\tlayer\tgroup\tchunk\tchoice\tscore_softmax\tscore_linear\n")
        seq0 = 0
        for batch in ev["routings"]:
            B = batch[0].linear.shape[0]
            for i in _routed_layers(cfg):
                r = batch[i]
                for b in range(B):
                    for g in range(r.linear.shape[1]):
                        for t in range(r.linear.shape[2]):
                            if r.scores is None:
                                s0 = s1 = "nan"
                            else:
                                s0 = repr(float(r.scores[b, g, t, 0]))
                                s1 = repr(float(r.scores[b, g, t, 1]))
                            fh.write(f"{seq0 + b}\t{i}\t{g}\t{t}\t{int(r.linear[b, g, t])}"
                                     f"\t{s0}\t{s1}\n")
                            rows += 1
            seq0 += B
    return rows


def cmd_eval(args):
    out = _out_dir(args)
    P, cfg = _params_and_config(args)
    ev = evaluate(P, cfg.model, cfg.task, cfg.run.routing, cfg.run.eval_seqs, cfg.run.eval_seed)
    rows = _write_trace(os.path.join(out, "routing_trace.tsv"), ev, cfg)
    report = dict(task=cfg.task.kind, routing=cfg.run.routing, accuracy=ev["accuracy"],
                  loss=ev["loss"], perplexity=float(np.exp(ev["loss"])),
                  n_sequences=cfg.run.eval_seqs, n_scored=ev["n_scored"], trace_rows=rows,
                  softmax_fraction=_route_stats(ev, cfg)["overall"])
    _write(os.path.join(out, "eval.json"), json.dumps(report, indent=2) + "\n")
    print(json.dumps(report))
    return EXIT_OK


def cmd_route_stats(args):
    out = _out_dir(args, required=False)
    P, cfg = _params_and_config(args)
    ev = evaluate(P, cfg.model, cfg.task, cfg.run.routing, cfg.run.eval_seqs, cfg.run.eval_seed)
    stats = _route_stats(ev, cfg)
    if out:
        _write(os.path.join(out, "routing_stats.json"), json.dumps(stats, indent=2) + "\n")
    for i, rec in stats["layers"].items():
        print(f"layer {i} ({rec['kind']}): softmax share per group "
              + " ".join(f"{f:.3f}" for f in rec["per_group"]))
    if stats["overall"] is not None:
        print(f"overall softmax share (hybrid layers): {stats['overall']:.4f}")
    return EXIT_OK


def _parse_prompt(text, vocab):
    try:
        toks = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"--prompt must be comma separated integers, got {text!r}") from None
    if not toks or min(toks) < 0 or max(toks) >= vocab:
        raise ConfigError(f"--prompt tokens must lie in [0, {vocab})")
    return np.array(toks)


def cmd_generate(args):
    out = _out_dir(args, required=False)
    P, cfg = _params_and_config(args)
    if args.prompt:
        prompt = _parse_prompt(args.prompt, cfg.model.vocab)
    else:
        tokens, targets = eval_batch(cfg.task, 1, cfg.run.eval_seed)
        scored = np.flatnonzero(targets[0] != -100)
        prompt = tokens[0, :scored[0] + 1] if scored.size else tokens[0]
    n_new = args.tokens if args.tokens is not None else cfg.run.gen_tokens
    toks, state = generate(prompt, n_new, P, cfg.model, cfg.run.routing,
                           cfg.run.temperature, seed=cfg.model.seed)
    rec = dict(prompt=[int(t) for t in prompt], generated=toks,
               footprint=footprint_components(state))
    if out:
        _write(os.path.join(out, "generate.json"), json.dumps(rec) + "\n")
    print(json.dumps(rec))
    return EXIT_OK


def cmd_bench(args):
    out = _out_dir(args)
    cfg = resolve_config(args)
    lengths = tuple(args.length) if args.length else cfg.run.bench_lengths
    fractions = tuple(args.fraction) if args.fraction else cfg.run.bench_fractions
    C = cfg.model.block.chunk
    bad = [L for L in lengths if L % C]
    if bad:
        raise ConfigError(f"bench lengths {bad} are not multiples of block.chunk={C}")
    if len(lengths) < 2:
        raise ConfigError("bench needs at least two lengths")
    bcfg = bench_block_config(cfg.model)
    fit = complexity_fit(bcfg, lengths, fractions, seed=cfg.model.seed)
    with open(os.path.join(out, "flops.jsonl"), "w") as fh:
        for pt in fit.points:
            rec = dict(L=pt["L"], p=pt["p"], L_nla=pt["L_nla"], L_la=pt["L_la"],
                       counted=pt["counted"], predicted=round(pt["predicted"], 3),
                       rel_err=round(pt["rel_err"], 6), **pt["report"])
            fh.write(json.dumps(rec) + "\n")
    summary = dict(a=fit.a, b=fit.b, chunk=C, max_rel_err=fit.max_rel_err,
                   ratio_all_linear=fit.ratio_linear, ratio_all_softmax=fit.ratio_softmax)
    _write(os.path.join(out, "fit.json"), json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    if args.no_timing:
        return EXIT_OK
    limit = _thread_limit(1) if args.pin_threads else contextlib.nullcontext()
    P = init_params(cfg.model)
    with limit, open(os.path.join(out, "timing.jsonl"), "w") as fh:
        for L in lengths:
            t = time_inference(cfg.model, L, cfg.run.routing, cfg.run.bench_decode_steps,
                               seed=cfg.model.seed, params=P)
            counter, L_nla, L_la = count_block(bcfg, L, cfg.run.routing, seed=cfg.model.seed)
            rec = dict(L=L, routing=cfg.run.routing, prefill_s=round(t["prefill_s"], 6),
                       decode_median_s=round(t["decode_median_s"], 6),
                       attention_macs=counter.attention, routed_macs=counter.routed,
                       predicted_routed=round(fit.a * L_nla * L + fit.b * L_la * C, 3),
                       footprint=t["footprint"])
            fh.write(json.dumps(rec) + "\n")
            log.info("L=%d prefill %.3fs decode %.2fms footprint %d", L, t["prefill_s"],
                     1e3 * t["decode_median_s"], t["footprint"]["total"])
    return EXIT_OK


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "generate": cmd_generate,
            "bench": cmd_bench, "route-stats": cmd_route_stats}


def _thread_limit(n):
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _env_threads():
    raw = os.environ.get("HYBRID_ATTN_THREADS")
    if raw is None or raw == "":
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"HYBRID_ATTN_THREADS must be a positive integer, got {raw!r}") from None
    return _thread_limit(n)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        with _env_threads():
            return HANDLERS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        diag = getattr(e, "diagnostics", None)
        if diag:
            print(json.dumps(diag, default=str), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
