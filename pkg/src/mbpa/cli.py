"""Command-line front end: ``mbpa run|sweep|verify|demo``.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 a
verification check failed.  Errors are reported on stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from . import verify as V
from .config import RunConfig, parse_config
from .errors import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

# Convenience spellings for frequently swept keys.
ALIASES = {
    "alpha-m": "adaptation.alpha_m",
    "alpha_m": "adaptation.alpha_m",
    "beta": "adaptation.beta",
    "steps": "adaptation.steps",
    "k": "adaptation.k",
    "lambda": "mixture.lambda",
    "regime": "regime",
    "eval-subset": "eval_subset",
}


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker threads (0 = number of cores)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--repeats", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mbpa", description="Memory-based parameter adaptation experiments.",
                                epilog="Any config key can be overridden with --section.key=VALUE "
                                       "(VALUE is parsed as JSON when possible).")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run the regime named in the config")
    sub.add_parser("sweep", parents=[common], help="run a hyperparameter sweep")
    sub.add_parser("verify", parents=[common], help="run the built-in verification checks")
    sub.add_parser("demo", parents=[common], help="1-D regression demo, writes curve.csv")
    return p


def parse_overrides(extra: list[str]) -> dict:
    """Turn ``["--a.b=1", "--c", "2"]`` into ``{"a.b": "1", "c": "2"}`` (aliases expanded)."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(tok, "unexpected argument")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ConfigError(key, "missing value")
            i += 1
            value = extra[i]
        out[ALIASES.get(key, key)] = value
        i += 1
    return out


def load_config(args, extra, regime: str | None = None) -> RunConfig:
    overrides = parse_overrides(extra)
    for flag, key in (("seed", "seed"), ("threads", "threads"), ("out", "output_dir"), ("repeats", "repeats")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    if regime is not None:
        overrides["regime"] = regime
    return parse_config(args.config, overrides)


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return out


def _write_records(records, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    H.write_jsonl(records, out / "metrics.jsonl")
    H.write_csv(records, out / "metrics.csv")


def _summary(regime, records) -> str:
    r = H.headline(records, regime)
    p = H.headline(records, regime, "parametric")
    return f"{regime}: final {r.split} top1 mbpa={r.top1:.4f} parametric={p.top1:.4f} auc mbpa={r.auc:.4f}"


def cmd_run(cfg: RunConfig) -> int:
    """Execute ``cfg.regime``; write metrics and the resolved config; print a summary line."""
    if cfg.regime == "verify":
        return cmd_verify()
    if cfg.regime == "regression-demo":
        return cmd_demo(cfg)
    if cfg.regime == "sweep":
        return cmd_sweep(cfg)
    out = _prepare_out(cfg)
    runs = []
    for rep in range(cfg.repeats):
        seed = H.derived_seed(cfg.seed, rep)
        records = H.run_regime(cfg, seed=seed)
        runs.append(records)
        _write_records(records, out if cfg.repeats == 1 else out / f"repeat-{rep}")
    if cfg.repeats > 1:
        H.write_jsonl(H.summarize_repeats(runs), out / "summary.jsonl")
        tops = [H.headline(r, cfg.regime).top1 for r in runs]
        print(f"{cfg.regime}: final mbpa top1 over {cfg.repeats} repeats "
              f"mean={np.mean(tops):.4f} std={np.std(tops):.4f}")
    else:
        print(_summary(cfg.regime, runs[0]))
    return EXIT_OK


def cmd_demo(cfg: RunConfig) -> int:
    cfg.regime = "regression-demo"
    out = _prepare_out(cfg)
    rows = H.run_regression_demo(cfg)
    H.write_curve_csv(rows, out / "curve.csv")
    mse = {k: float(np.mean([(r[k] - r["y_true"]) ** 2 for r in rows]))
           for k in ("y_parametric", "y_attention", "y_mbpa")}
    print("regression-demo: grid MSE " + " ".join(f"{k[2:]}={v:.4g}" for k, v in mse.items()))
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    cfg.regime = "sweep"
    out = _prepare_out(cfg)
    rows = []
    for value, rec in H.run_sweep(cfg):
        rows.append({"axis": cfg.sweep.axis, "value": value, **rec.to_dict()})
    H.write_jsonl(rows, out / "metrics.jsonl")
    with open(out / "metrics.csv", "w", encoding="utf-8", newline="\n") as f:
        f.write("axis,value,predictor,split,top1,auc,n\n")
        for r in rows:
            f.write(f"{r['axis']},{json.dumps(r['value'])},{r['predictor']},{r['split']},"
                    f"{r['top1']!r},{r['auc']!r},{r['n']}\n")
    print(f"sweep {cfg.sweep.axis}: " + " ".join(f"{r['value']}->{r['top1']:.4f}" for r in rows))
    return EXIT_OK


def cmd_verify(hooks: dict | None = None) -> int:
    """Run the verification checks, print one line each; exit 3 if any fails."""
    results = V.run_checks(hooks)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"verify: {len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_VERIFY


def _error(kind: str, exc: Exception, code: int) -> int:
    payload = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        payload["path"] = exc.path
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            return cmd_verify()
        regime = {"sweep": "sweep", "demo": "regression-demo"}.get(args.command)
        cfg = load_config(args, extra, regime)
    except ConfigError as e:
        return _error("config", e, EXIT_CONFIG)
    try:
        return cmd_run(cfg)
    except ConfigError as e:
        return _error("config", e, EXIT_CONFIG)
    except Exception as e:  # noqa: BLE001 - surfaced as a structured runtime error
        return _error("runtime", e, EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
