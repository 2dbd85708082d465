"""Command line entry point: ``cqnas <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 training divergence.
Outputs go under ``--out``, else ``$CQNAS_OUTPUT_DIR``, else ``./runs``.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .harness import (ConfigError, RunLog, TrainingDiverged, config_to_text, emit_artifacts, evaluate,
                      critic_policy, generate_demos, load_agent, load_config, output_dir, plot_runs,
                      rtg_regression, run_training)
from .envs import make_env
from .replay import save_episode

log = logging.getLogger("cqnas")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _overrides(extra):
    """Turn leftover ``--key value`` / ``--key=value`` tokens into a dict."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        elif i + 1 < len(extra):
            val = extra[i + 1]
            i += 2
        else:
            raise ConfigError(f"{key}: missing value")
        out[key] = val
    return out


def _ints(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from None


def _out(args, sub):
    d = Path(args.out) if args.out else output_dir() / sub
    d.mkdir(parents=True, exist_ok=True)
    return d


def _progress(seed):
    return lambda r: log.info("seed %s step %d success %.3f td %.4f bc %.4f (%.0fs)", seed, r.step,
                              r.success_rate, r.td_loss, r.bc_loss, r.wall_s)


def cmd_train(args, extra):
    cfg = load_config(args.config, _overrides(extra))
    out = _out(args, "train")
    (out / "config.txt").write_text(config_to_text(cfg))
    ckpt = out / f"critic_seed{args.seed}.ckpt"
    run = run_training(cfg, args.seed, progress=_progress(args.seed), checkpoint=ckpt)
    run.to_csv(out / f"run_seed{args.seed}.csv")
    print(f"final success {run.final_success:.3f} after {run.rows[-1].step} steps ({run.meta['stop']}); "
          f"wrote {out}")
    return EXIT_OK


def cmd_eval(args, extra):
    cfg = load_config(args.config, _overrides(extra))
    critic, scaler = load_agent(args.checkpoint, cfg)
    sr = evaluate(critic_policy(critic), cfg.env, args.episodes, args.seed, cfg.K, cfg.temporal_ensemble,
                  cfg.ensemble_m, cfg.eval_workers, scaler)
    print(f"success rate {sr:.3f} over {args.episodes} episodes")
    return EXIT_OK


def cmd_gen_demos(args, extra):
    cfg = load_config(args.config, _overrides(extra))
    out = _out(args, "demos")
    demos = generate_demos(cfg, np.random.default_rng(args.seed))
    sem = make_env(cfg.env).semantics
    for i, d in enumerate(demos):
        save_episode(out / f"demo_{i:04d}.ep", d, sem)
    print(f"wrote {len(demos)} episodes ({np.mean([d.success for d in demos]):.2f} successful) to {out}")
    return EXIT_OK


def cmd_rtg_exp(args, extra):
    cfg = load_config(args.config, _overrides(extra))
    sem = make_env(cfg.env).semantics
    out = _out(args, "rtg")
    rows = []
    for seed in _ints(args.seeds):
        demos = generate_demos(cfg, np.random.default_rng(seed))
        for K, l1 in rtg_regression(demos, _ints(args.K_list), seed, cfg.gamma, sem, epochs=args.epochs):
            rows.append((seed, K, l1))
            print(f"seed {seed} K {K} validation L1 {l1:.5f}")
    with open(out / "rtg.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "K", "val_l1"])
        w.writerows([(s, k, repr(v)) for s, k, v in rows])
    return EXIT_OK


def cmd_sweep(args, extra):
    base = _overrides(extra)
    if args.config:
        load_config(args.config, base)  # validate early
    out = _out(args, "sweep")
    runs = {}
    for value in args.values.split(","):
        label = f"{args.axis}={value}"
        cfg = load_config(args.config, {**base, args.axis: value})
        runs[label] = [run_training(cfg, s, progress=_progress(s)) for s in _ints(args.seeds)]
        finals = [r.final_success for r in runs[label]]
        print(f"{label}: final success mean {np.mean(finals):.3f} per seed {finals}")
    emit_artifacts({k.replace("=", "_"): v for k, v in runs.items()}, out, name=f"sweep_{args.axis}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_plot(args, extra):
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    groups = {}
    for p in map(Path, args.csv):
        label = p.stem.rsplit("_seed", 1)[0]
        groups.setdefault(label, []).append(RunLog.from_csv(p))
    if not groups:
        raise ConfigError("plot: no CSV files given")
    out = Path(args.output) if args.output else output_dir() / "plot.svg"
    out.parent.mkdir(parents=True, exist_ok=True)
    plot_runs(groups, out)
    print(f"wrote {out}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="cqnas", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seeds=False):
        p.add_argument("--config", help="key=value config file; other --key value pairs override it")
        p.add_argument("--out", help="output directory")
        if seeds:
            p.add_argument("--seeds", default="0,1,2,3,4")
        else:
            p.add_argument("--seed", type=int, default=0)
        return p

    common(sub.add_parser("train", help="train one agent"))
    p = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=25)
    common(sub.add_parser("gen-demos", help="write scripted demonstrations as episode files"))
    p = common(sub.add_parser("rtg-exp", help="return-to-go regression versus sequence length"), seeds=True)
    p.add_argument("--K-list", dest="K_list", default="1,8")
    p.add_argument("--epochs", type=int, default=300)
    p = common(sub.add_parser("sweep", help="train over one config axis and several seeds"), seeds=True)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True)
    p = sub.add_parser("plot", help="plot run CSVs; files named <label>_seed<n>.csv are grouped")
    p.add_argument("csv", nargs="+")
    p.add_argument("-o", "--output")
    return ap


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gen-demos": cmd_gen_demos, "rtg-exp": cmd_rtg_exp,
            "sweep": cmd_sweep, "plot": cmd_plot}


def main(argv=None):
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args, extra)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
