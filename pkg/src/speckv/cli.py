"""Command-line surface.

Verbs: gen-model, skew, run, bench, report. All outputs are plain JSON/CSV
for external plotting. Validation failures exit non-zero with a one-line
machine-readable JSON error on stderr.
"""

import argparse
import json
import sys

import numpy as np

from . import metrics
from .costmodel import CostParams, ExecutionStyle
from .engine import RunConfig, Scheme, Trace, run
from .model import ModelSpec, generate_synthetic, load_model, save_model, random_prompt
from .pool import EvictionPolicy
from .skewing import skew_model, verification_report
from .speculation import SpeculationConfig

DEFAULT_OUTLIER_SCALE = 2.0  # calibrated sweep value; see README


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speckv")
    sub = parser.add_subparsers(required=True)

    p = sub.add_parser("gen-model", help="generate a synthetic model file")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--model-dim", type=int, default=128)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn-dim", type=int, default=None,
                   help="defaults to 4 * model-dim")
    p.add_argument("--outlier-channels", type=int, default=8)
    p.add_argument("--outlier-scale", type=float, default=DEFAULT_OUTLIER_SCALE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True, help="manifest path")
    p.set_defaults(func=_cmd_gen_model)

    p = sub.add_parser("skew", help="calibrate and fold in skew matrices")
    p.add_argument("--model", required=True)
    p.add_argument("--calib-seed", type=int, default=0)
    p.add_argument("--calib-tokens", type=int, default=None)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--report", default=None,
                   help="optional JSON verification report path")
    p.set_defaults(func=_cmd_skew)

    p = sub.add_parser("run", help="run one scheme and write a trace")
    _add_run_args(p)
    p.add_argument("-o", "--output", required=True, help="trace JSON path")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("bench", help="run several schemes and compare")
    _add_run_args(p, scheme_list=True)
    p.add_argument("--cost-config", default=None)
    p.add_argument("-o", "--output", required=True, help="comparison JSON path")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("report", help="flatten traces into CSV/JSON reports")
    p.add_argument("traces", nargs="+", help="trace JSON files")
    p.add_argument("--cost-config", default=None)
    p.add_argument("--style", default=None,
                   choices=[s.value for s in ExecutionStyle])
    p.add_argument("--csv", default=None)
    p.add_argument("--json", dest="json_out", default=None)
    p.set_defaults(func=_cmd_report)
    return parser


def _add_run_args(p: argparse.ArgumentParser, scheme_list: bool = False) -> None:
    p.add_argument("--model", required=True)
    if scheme_list:
        p.add_argument("--schemes", default="full,speculative",
                       help="comma-separated scheme list")
    else:
        p.add_argument("--scheme", default="full",
                       choices=[s.value for s in Scheme])
    p.add_argument("--prompt-len", type=int, default=64)
    p.add_argument("--gen-len", type=int, default=16)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--alpha", type=float, default=4.0)
    p.add_argument("--partial-ratio", type=float, default=0.3)
    p.add_argument("--cap-ratio", type=float, default=0.2)
    p.add_argument("--min-select", type=int, default=1)
    p.add_argument("--pool-limit", default=None,
                   help="max pool rows, or a fraction of prompt+gen length")
    p.add_argument("--policy", default="counter",
                   choices=[p.value for p in EvictionPolicy])
    p.add_argument("--h2o-budget", type=float, default=0.2)
    p.add_argument("--oracle-budget", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--record-scores", action="store_true")
    p.add_argument("--record-selection", action="store_true")


def _parse_pool_limit(raw, total_rows: int) -> int | None:
    if raw is None:
        return None
    value = float(raw)
    if 0 < value < 1:
        return max(1, int(value * total_rows))
    if value != int(value) or value < 1:
        raise ValueError(f"pool limit must be a row count or fraction, got {raw}")
    return int(value)


def _run_config(args, scheme: Scheme) -> RunConfig:
    total = args.prompt_len + args.gen_len
    return RunConfig(
        scheme=scheme,
        prompt_len=args.prompt_len,
        gen_len=args.gen_len,
        batch=args.batch,
        speculation=SpeculationConfig(
            partial_ratio=args.partial_ratio, alpha=args.alpha,
            cap_ratio=args.cap_ratio, min_select=args.min_select),
        pool_limit=_parse_pool_limit(args.pool_limit, total),
        pool_policy=EvictionPolicy(args.policy),
        h2o_budget_fraction=args.h2o_budget,
        oracle_budget_fraction=args.oracle_budget,
        prompt_seed=args.seed,
        record_scores=args.record_scores,
        record_selection=args.record_selection,
    )


def _cmd_gen_model(args) -> int:
    spec = ModelSpec(
        layers=args.layers, model_dim=args.model_dim, heads=args.heads,
        ffn_dim=args.ffn_dim if args.ffn_dim is not None else 4 * args.model_dim,
        outlier_channels=args.outlier_channels, outlier_scale=args.outlier_scale,
        seed=args.seed)
    model = generate_synthetic(spec)
    save_model(model, args.output)
    print(json.dumps({"written": args.output, "layers": spec.layers,
                      "model_dim": spec.model_dim, "heads": spec.heads}))
    return 0


def _cmd_skew(args) -> int:
    model = load_model(args.model)
    skewed, _ = skew_model(model, args.calib_seed, args.calib_tokens)
    save_model(skewed, args.output)
    prompt = random_prompt(128, model.spec.model_dim, args.calib_seed + 1)
    report = verification_report(model, skewed, prompt)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            json.dump(report, f, indent=1)
    print(json.dumps({"written": args.output,
                      "max_abs_forward_deviation":
                          report["max_abs_forward_deviation"]}))
    return 0


def _cmd_run(args) -> int:
    model = load_model(args.model)
    config = _run_config(args, Scheme(args.scheme))
    trace, _ = run(model, config)
    with open(args.output, "w", encoding="utf-8") as f:
        json.dump(trace.to_json(), f)
    print(json.dumps({"written": args.output, "scheme": args.scheme,
                      "total_bytes": trace.total_bytes()}))
    return 0


def _cmd_bench(args) -> int:
    model = load_model(args.model)
    params = (CostParams.from_file(args.cost_config) if args.cost_config
              else CostParams())
    schemes = [Scheme(s.strip()) for s in args.schemes.split(",") if s.strip()]
    comparison = {}
    for scheme in schemes:
        config = _run_config(args, scheme)
        trace, finals = run(model, config)
        iters = trace.cost_iterations()
        style = (ExecutionStyle.SELECTIVE_PREFETCH
                 if scheme in (Scheme.SPECULATIVE, Scheme.ORACLE, Scheme.H2O)
                 else ExecutionStyle.PREFETCH_ALL)
        breakdown = {
            st.value: costmodel_total(iters, st, params)
            for st in (ExecutionStyle.CPU_SERIAL, ExecutionStyle.PREFETCH_ALL,
                       ExecutionStyle.SELECTIVE_PREFETCH)
        }
        comparison[scheme.value] = {
            "total_bytes": trace.total_bytes(),
            "mean_selected_fraction": _mean_selected_fraction(trace),
            "native_style": style.value,
            "simulated_total_s": breakdown,
            "final_output_norm": [float(np.linalg.norm(f)) for f in finals],
        }
    with open(args.output, "w", encoding="utf-8") as f:
        json.dump(comparison, f, indent=1)
    print(json.dumps({"written": args.output, "schemes":
                      [s.value for s in schemes]}))
    return 0


def costmodel_total(iters, style, params) -> float:
    from . import costmodel

    if not iters:
        return 0.0
    return costmodel.simulate_run(iters, style, params).total_s


def _mean_selected_fraction(trace: Trace) -> float:
    fracs = [r.bytes / r.full_bytes
             for s in trace.sequences for it in s.iterations for r in it
             if r.full_bytes > 0]
    return float(np.mean(fracs)) if fracs else 0.0


def _cmd_report(args) -> int:
    traces = []
    for path in args.traces:
        with open(path, "r", encoding="utf-8") as f:
            traces.append(Trace.from_json(json.load(f)))
    params = style = None
    if args.cost_config or args.style:
        params = (CostParams.from_file(args.cost_config) if args.cost_config
                  else CostParams())
        style = ExecutionStyle(args.style or "selective_prefetch")
    rows = metrics.report_rows(traces, cost_params=params, style=style)
    metrics.write_report(rows, csv_path=args.csv, json_path=args.json_out)
    if not args.csv and not args.json_out:
        raise ValueError("report needs --csv and/or --json output paths")
    print(json.dumps({"rows": len(rows),
                      "csv": args.csv, "json": args.json_out}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
