"""Command line entry point: ``flowalign <command> --config PATH [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigError, FlowAlignError
from .experiments import (bootstrap_mean_diff_ci, diversity_table, evaluate, mode_hit_rate, noise_table,
                          pretrain, window_means)
from .flow import VelocityModel
from .grpo import train
from .nn import load_params, save_params
from .rollout import leaf_count

log = logging.getLogger("flowalign")

EXIT_CODES = {"config": 2, "schedule": 2, "shape": 3, "numeric": 4, "io": 5, "error": 1}


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def flat_metric_rows(records: list[dict], names) -> list[dict]:
    rows = []
    for r in records:
        row = {"iteration": r["iteration"]}
        row.update({f"mean_reward_{n}": v for n, v in zip(names, r["mean_reward"])})
        row.update({k: v for k, v in r.items() if k not in ("iteration", "mean_reward")})
        rows.append(row)
    return rows


def _prepare_out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    return out


def load_model(path, cfg: ExperimentConfig) -> VelocityModel:
    if not path:
        raise ConfigError("checkpoint: a pretrained checkpoint is required (--checkpoint PATH)")
    params, spec = load_params(path)
    env = cfg.env()
    if spec.output_dim != env.dim or spec.input_dim != env.dim + 1 + env.n_conditions:
        raise ConfigError(f"checkpoint: {path} does not match the environment "
                          f"(d={env.dim}, conditions={env.n_conditions})")
    return VelocityModel(spec, params, env.n_conditions)


def _run_align(model, cfg: ExperimentConfig, out: Path, schedule=None, grouping=None, tag: str = ""):
    gcfg = cfg.grpo_config(schedule, grouping)
    out.mkdir(parents=True, exist_ok=True)
    params, records = train(gcfg, model, cfg.env(), cfg.reward_spec(), cfg.seed, out / f"metrics{tag}.jsonl")
    _write_csv(out / f"metrics{tag}.csv", flat_metric_rows(records, cfg.reward_names))
    save_params(out / f"final{tag}.bin", params, model.spec)
    return params, records


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(cfg: ExperimentConfig) -> dict:
    out = _prepare_out(cfg)
    env = cfg.env()
    model, losses = pretrain(env, cfg.pretrain_config(), cfg.seed)
    save_params(out / "checkpoint.bin", model.params, model.spec)
    _write_csv(out / "pretrain_loss.csv", [{"iteration": i, "loss": l} for i, l in enumerate(losses)])
    summary = {"seed": cfg.seed, "final_loss": losses[-1] if losses else None,
               "mode_hit_rate": mode_hit_rate(model, env, seed=cfg.seed)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def cmd_align(cfg: ExperimentConfig) -> dict:
    out = _prepare_out(cfg)
    model = load_model(cfg.checkpoint, cfg)
    _, records = _run_align(model, cfg, out)
    first, last = window_means(records, cfg.window) if records else (None, None)
    summary = {
        "seed": cfg.seed,
        "iterations": len(records),
        "leaves_per_tree": leaf_count(cfg.schedule()),
        "initial_mean_reward": None if first is None else first.tolist(),
        "final_mean_reward": None if last is None else last.tolist(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def cmd_eval(cfg: ExperimentConfig) -> dict:
    out = _prepare_out(cfg)
    model = load_model(cfg.checkpoint, cfg)
    env = cfg.env()
    summary = {
        "mean_reward": dict(zip(cfg.reward_names,
                                evaluate(model, env, cfg.reward_spec(), cfg.grpo_config(), cfg.eval_samples, cfg.seed))),
        "mode_hit_rate": mode_hit_rate(model, env, seed=cfg.seed),
    }
    (out / "eval.json").write_text(json.dumps(summary, indent=2))
    return summary


def cmd_diversity(cfg: ExperimentConfig) -> dict:
    out = _prepare_out(cfg)
    model = load_model(cfg.checkpoint, cfg)
    steps = [int(s) for s in cfg.diversity_steps.split(",") if s.strip()]
    gcfg = cfg.grpo_config()
    rows = diversity_table(model, cfg.env(), cfg.time_steps, steps, cfg.diversity_factor,
                           cfg.diversity_trees, gcfg.noise, cfg.seed)
    _write_csv(out / "diversity.csv", [{k: r[k] for k in ("step", "mean", "std", "n")} for r in rows])
    (out / "diversity.json").write_text(json.dumps(rows, indent=2))
    summary = {"rows": [{k: r[k] for k in ("step", "mean", "std")} for r in rows]}
    if len(rows) >= 2:
        summary["first_minus_last_ci95"] = bootstrap_mean_diff_ci(rows[0]["values"], rows[-1]["values"])
    return summary


def cmd_noise_table(cfg: ExperimentConfig) -> dict:
    out = _prepare_out(cfg)
    Ts = [int(s) for s in cfg.noise_table_T.split(",") if s.strip()]
    rows = noise_table(Ts, cfg.noise_level, cfg.t_clip)
    _write_csv(out / "noise_table.csv", rows)
    return {"rows": len(rows), "T": Ts}


def ablation_arms(cfg: ExperimentConfig) -> list[dict]:
    """Schedule arms use the configured grouping; weight arms use naive mixing plus one grouped run."""
    arms = []
    for text in cfg.ablate_schedule_list():
        arms.append({"name": f"schedule[{text}]", "schedule": cfg._checked_schedule(text, "ablate_schedules"),
                     "grouping": cfg.grouping_config()})
    weights = cfg.ablate_weight_list()
    for w in weights:
        arms.append({"name": "naive_mix[" + ",".join(f"{x:g}" for x in w) + "]", "schedule": cfg.schedule(),
                     "grouping": cfg.grouping_config(strategy="naive_mix", weights=w)})
    if weights:
        arms.append({"name": "reward_grouped", "schedule": cfg.schedule(),
                     "grouping": cfg.grouping_config(strategy="reward_grouped", weights=None)})
    return arms


def cmd_ablate(cfg: ExperimentConfig) -> dict:
    out = _prepare_out(cfg)
    model = load_model(cfg.checkpoint, cfg)
    report = []
    for k, arm in enumerate(ablation_arms(cfg)):
        _, records = _run_align(model, cfg, out / f"arm{k}", arm["schedule"], arm["grouping"])
        first, last = window_means(records, cfg.window) if records else (np.full(len(cfg.reward_names), np.nan),) * 2
        report.append({"arm": arm["name"], "seed": cfg.seed,
                       "schedule": arm["schedule"].to_steps_from_end(cfg.time_steps),
                       **{f"initial_{n}": float(v) for n, v in zip(cfg.reward_names, first)},
                       **{f"final_{n}": float(v) for n, v in zip(cfg.reward_names, last)},
                       **{f"delta_{n}": float(b - a) for n, a, b in zip(cfg.reward_names, first, last)}})
    _write_csv(out / "report.csv", report)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    return {"arms": [r["arm"] for r in report]}


COMMANDS = {
    "pretrain": cmd_pretrain,
    "align": cmd_align,
    "diversity": cmd_diversity,
    "noise-table": cmd_noise_table,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowalign", description=__doc__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--checkpoint", help="pretrained parameter checkpoint")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out"] = args.out
    if args.checkpoint is not None:
        overrides["checkpoint"] = args.checkpoint
    return ExperimentConfig.from_strings(overrides, cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        cfg = resolve_config(args)
        summary = COMMANDS[args.command](cfg)
    except FlowAlignError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
