"""``pbs-attn`` command line harness.

Subcommands: ``gen``, ``run``, ``sweep``, ``bench``, ``viz``. Errors print a
single line ``E<code>:<kind>: <message>`` to stderr and exit with ``<code>``:
2 config, 3 I/O or format, 4 resource limit, 5 numerical degeneracy.
"""

import argparse
import csv
import json
import os
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import _backend
from .errors import ConfigError, FormatError, PBSError, ResourceLimitError
from .manifest import RunManifest
from .pipeline import (
    MAX_DENSE_ENTRIES, STAGES, STRATEGIES, PipelineConfig, causal_reference, density_sweep,
    output_error, pbs_attention, pbs_attention_heads,
)
from .attention import ElementMask, attention_block_sparse
from .permutation import apply_rows
from .selection import build_block_causal_mask
from .tensor_core import softmax_rows, write_tensor
from .workloads import KINDS, WorkloadSpec, generate

SWEEP_HEADER = ["tau", "S", "strategy", "density", "coverage", "max_err", "mean_err", "time_us"]


def _csv_floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _csv_words(text):
    return [x.strip() for x in text.split(",") if x.strip()]


def _add_config_flags(p):
    g = p.add_argument_group("pipeline")
    g.add_argument("--precision", choices=["f32", "f64"])
    g.add_argument("--block-size", type=int)
    g.add_argument("--segment-size", type=int)
    g.add_argument("--tau", type=float)
    g.add_argument("--strategy", choices=STRATEGIES)
    g.add_argument("--seed", type=int, help="overrides the workload seed")
    g.add_argument("--threads", type=int,
                   help="heads evaluated concurrently (default: $PBS_THREADS or 1)")
    g.add_argument("--backend", choices=["auto", "compiled", "python"])


def _add_input_flags(p):
    p.add_argument("--manifest", help="run manifest JSON")
    p.add_argument("--q")
    p.add_argument("--k")
    p.add_argument("--v")


def _add_workload_flags(p):
    p.add_argument("--kind", choices=KINDS, default="gaussian")
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--line-count", type=int, default=8)
    p.add_argument("--line-strength", type=float, default=WorkloadSpec.line_strength)
    p.add_argument("--scatter", choices=["scattered", "clustered"], default="scattered")
    p.add_argument("--workload-segment-size", type=int, default=256,
                   help="segment size used to place vertical lines")
    p.add_argument("--workload-block-size", type=int, default=128,
                   help="block size used by the block_diag workload")


def _threads(args):
    if getattr(args, "threads", None) is not None:
        n = args.threads
    else:
        try:
            n = int(os.environ.get("PBS_THREADS", "1"))
        except ValueError:
            raise ConfigError("PBS_THREADS must be an integer") from None
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


def _backend_name(args):
    name = getattr(args, "backend", None) or "auto"
    return None if name == "auto" else name


def _manifest(args):
    """Build the effective manifest from ``--manifest`` plus flag overrides."""
    if args.manifest:
        m = RunManifest.load(args.manifest)
    elif args.q or args.k or args.v:
        if not (args.q and args.k and args.v):
            raise ConfigError("--q, --k and --v must be given together")
        m = RunManifest(inputs={"q": args.q, "k": args.k, "v": args.v},
                        base_dir=os.getcwd())
    else:
        raise ConfigError("give --manifest or --q/--k/--v")
    cfg = m.config.to_dict()
    for flag, key in (("precision", "precision"), ("block_size", "block_size"),
                      ("segment_size", "segment_size"), ("tau", "tau"),
                      ("strategy", "strategy")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val
    wl = m.workload
    if wl is not None and getattr(args, "seed", None) is not None:
        wl = WorkloadSpec.from_dict({**wl.to_dict(), "seed": args.seed})
    return RunManifest(config=PipelineConfig.from_dict(cfg), inputs=m.inputs, workload=wl,
                       outputs=m.outputs, base_dir=m.base_dir)


def _aggregate(reports):
    covs = [r.attention_coverage for r in reports]
    return {
        "block_density": float(np.mean([r.block_density for r in reports])),
        "causal_density_baseline": float(np.mean([r.causal_density_baseline for r in reports])),
        "attention_coverage": None if None in covs else float(np.mean(covs)),
        "selected_blocks": int(sum(r.selected_blocks for r in reports)),
        "total_admissible_blocks": int(sum(r.total_admissible_blocks for r in reports)),
        "timings_us": {s: float(sum(r.timings_us[s] for r in reports)) for s in STAGES},
    }


def cmd_gen(args):
    spec = WorkloadSpec(
        kind=args.kind, n=args.n, d=args.d, heads=args.heads, seed=args.seed or 0,
        line_count=args.line_count, line_strength=args.line_strength, scatter=args.scatter,
        segment_size=args.workload_segment_size, block_size=args.workload_block_size)
    q, k, v = generate(spec, args.precision or "f32")
    os.makedirs(args.out_dir, exist_ok=True)
    for name, t in (("q", q), ("k", k), ("v", v)):
        write_tensor(os.path.join(args.out_dir, f"{name}.pbst"), t)
    with open(os.path.join(args.out_dir, "workload.json"), "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
    print(json.dumps({"out_dir": args.out_dir, "shape": list(q.shape),
                      "precision": args.precision or "f32"}))
    return 0


def cmd_run(args):
    m = _manifest(args)
    q, k, v = m.load_tensors()
    threads = _threads(args)
    out, reports = pbs_attention_heads(q, k, v, m.config, threads=threads,
                                       backend=_backend_name(args))
    n = q.shape[1]
    check = not args.no_check and n * n <= MAX_DENSE_ENTRIES
    heads = []
    worst = None
    for h, rep in enumerate(reports):
        entry = {"head": h, "report": rep.to_dict(), "pooled_coverage": rep.pooled_coverage}
        if check:
            mx, mean = output_error(out[h], causal_reference(q[h], k[h], v[h], m.config))
            entry["output_error"] = {"max_abs": mx, "mean_abs": mean}
            worst = mx if worst is None else max(worst, mx)
        heads.append(entry)
    doc = {"config": m.config.to_dict(), "heads": heads, "aggregate": _aggregate(reports),
           "output_error_max": worst, "backend": _backend_name(args) or _backend.ACTIVE}
    out_path = args.out or m.outputs.get("output")
    report_path = args.report or m.outputs.get("report")
    if out_path:
        write_tensor(m.resolve(out_path) if not args.out else out_path, out)
    text = json.dumps(doc, indent=2)
    if report_path:
        with open(m.resolve(report_path) if not args.report else report_path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_sweep(args):
    m = _manifest(args)
    q, k, v = m.load_tensors()
    if not 0 <= args.head < q.shape[0]:
        raise ConfigError(f"head {args.head} out of range (have {q.shape[0]})")
    taus = args.taus or [m.config.tau]
    segs = args.segments or [m.config.segment_size]
    strategies = args.strategies or [m.config.strategy]
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}")
    rows = density_sweep(q[args.head], k[args.head], v[args.head], m.config, taus, segs,
                         strategies, backend=_backend_name(args))
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([repr(r.tau), r.segment_size, r.strategy, repr(r.density),
                        "" if r.coverage is None else repr(r.coverage),
                        repr(r.max_err), repr(r.mean_err), f"{r.time_us:.1f}"])
    finally:
        if args.out:
            fh.close()
    return 0


def _quantiles(xs):
    q1, med, q3 = np.percentile(xs, [25, 50, 75])
    return {"median_us": float(med), "iqr_us": float(q3 - q1)}


def cmd_bench(args):
    if args.repeat < 3:
        raise ConfigError(f"--repeat must be >= 3, got {args.repeat}")
    m = _manifest(args)
    q, k, v = m.load_tensors()
    backend = _backend_name(args)
    threads = _threads(args)
    per_stage = {s: [] for s in STAGES}
    totals, dense = [], []
    cfg = m.config
    n = q.shape[1]
    t = -(-n // cfg.block_size)
    full = np.isfinite(build_block_causal_mask(t, t, cfg.block_size, 0))
    ident = ElementMask.identity(n, n)
    density = []
    for _ in range(args.repeat):
        _, reports = pbs_attention_heads(q, k, v, cfg, threads=threads, coverage=False,
                                         backend=backend)
        for s in STAGES:
            per_stage[s].append(sum(r.timings_us[s] for r in reports))
        totals.append(sum(sum(r.timings_us.values()) for r in reports))
        density.append(float(np.mean([r.block_density for r in reports])))
        t0 = time.perf_counter_ns()
        for h in range(q.shape[0]):
            attention_block_sparse(q[h], k[h], v[h], cfg.attention_config(), full, ident,
                                   backend=backend)
        dense.append((time.perf_counter_ns() - t0) / 1e3)
    doc = {
        "repeat": args.repeat, "n": n, "d": q.shape[2], "heads": q.shape[0],
        "backend": backend or _backend.ACTIVE, "config": cfg.to_dict(),
        "block_density": density[0],
        "stages": {s: _quantiles(per_stage[s]) for s in STAGES},
        "total": _quantiles(totals),
        "causal_full_attention": _quantiles(dense),
    }
    text = json.dumps(doc, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_viz(args):
    m = _manifest(args)
    q, k, v = m.load_tensors()
    if not 0 <= args.head < q.shape[0]:
        raise ConfigError(f"head {args.head} out of range (have {q.shape[0]})")
    qh, kh, vh = q[args.head], k[args.head], v[args.head]
    n = qh.shape[0]
    if n * n > args.max_entries:
        raise ResourceLimitError(
            f"viz materializes {n}x{n} attention, limit is {args.max_entries}")
    _, rep = pbs_attention(qh, kh, vh, m.config, coverage=False, backend=_backend_name(args))
    # attention probabilities in permuted coordinates, causal on original positions
    qp = apply_rows(rep.q_perm, qh).astype(np.float64)
    kp = apply_rows(rep.k_perm, kh).astype(np.float64)
    scale = m.config.scale or 1.0 / np.sqrt(qh.shape[1])
    em = ElementMask(rep.q_perm.map, rep.k_perm.map)
    probs = softmax_rows((qp @ kp.T) * scale, em.additive())
    os.makedirs(args.out_dir, exist_ok=True)
    stem = os.path.join(args.out_dir, f"{args.layer_label}_h{args.head}")
    write_tensor(f"{stem}_attn.pbst", probs.astype(m.config.dtype))
    rep.mask.save(f"{stem}_mask.pbst")
    print(json.dumps({"attention": f"{stem}_attn.pbst", "mask": f"{stem}_mask.pbst",
                      "block_density": rep.block_density}))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"E2:config: {message}\n")


def build_parser():
    p = _Parser(prog="pbs-attn", description="Permuted block-sparse attention harness")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic Q/K/V workload")
    _add_workload_flags(g)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--precision", choices=["f32", "f64"], default="f32")
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="run the pipeline on a manifest or tensor files")
    _add_input_flags(r)
    _add_config_flags(r)
    r.add_argument("--out", help="output tensor path")
    r.add_argument("--report", help="report JSON path (default: stdout)")
    r.add_argument("--no-check", action="store_true", help="skip the oracle comparison")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="density/error table over tau and segment size")
    _add_input_flags(s)
    _add_config_flags(s)
    s.add_argument("--taus", type=_csv_floats)
    s.add_argument("--segments", type=lambda t: [int(x) for x in _csv_floats(t)])
    s.add_argument("--strategies", type=_csv_words)
    s.add_argument("--head", type=int, default=0)
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(func=cmd_sweep)

    b = sub.add_parser("bench", help="per-stage timing, median and IQR")
    _add_input_flags(b)
    _add_config_flags(b)
    b.add_argument("--repeat", type=int, default=5)
    b.add_argument("--out", help="timing JSON path (default: stdout)")
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("viz", help="emit attention and block-mask matrices for plotting")
    _add_input_flags(v)
    _add_config_flags(v)
    v.add_argument("--head", type=int, default=0)
    v.add_argument("--layer-label", default="layer")
    v.add_argument("--out-dir", required=True)
    v.add_argument("--max-entries", type=int, default=1 << 26)
    v.set_defaults(func=cmd_viz)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with threadpool_limits(limits=1):
            return args.func(args)
    except PBSError as exc:
        err, code = exc, exc.exit_code
    except (OSError, FormatError) as exc:
        err, code = exc, 3
    except (ValueError, KeyError, TypeError) as exc:
        err, code = exc, 2
    kind = getattr(err, "code", "io" if code == 3 else "config")
    msg = str(err).replace("\n", " ")
    print(f"E{code}:{kind}: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
