"""Command-line lifecycle: gen-data, train, eval, ablate, probe, stats.

Config files are flat INI ([run], [model], [train], [eval] sections; see
README for the schema). Exit codes: 0 ok, 2 usage or bad input, 3
integrity (checkpoint/config digest mismatch), 4 partial ablation failure.

Every command is deterministic given identical inputs, and every output
file carries a provenance header (config digest, seed, package version).
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__, envs
from .charts import line_chart, write_svg
from .data import (DatasetFormatError, GenerationError, dataset_digest,
                   dataset_stats, generate_dataset, load_dataset, save_dataset)
from .evaluation import (attention_probe, build_target_grid,
                         evaluate_alignment, rollout_many, rtg_trace,
                         summarize)
from .layers import CheckpointError
from .model import RadtConfig, build_model, load_model
from .train import TrainConfig, DivergenceError, single_thread_blas, train

ABLATION_VARIANTS = {
    "full": {"variant": "radt"},
    "no-seqra": {"variant": "radt", "use_seqra": False},
    "no-stepra": {"variant": "radt", "use_stepra": False},
    "no-adascale": {"variant": "radt", "use_stepra": False, "use_adaptive_scaling": False},
    "dt": {"variant": "dt"},
}


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    env: str
    dataset: str
    out: str
    seed: int
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    def digest(self) -> str:
        blob = json.dumps({"env": self.env, "seed": self.seed, "model": self.model,
                           "train": self.train, "eval": self.eval},
                          sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_MODEL_KEYS = {"variant": str, "n_layers": int, "n_heads": int, "d_model": int,
               "context_len": int, "dropout": float, "max_timesteps": int,
               "use_seqra": bool, "use_stepra": bool, "use_adaptive_scaling": bool,
               "scale_scores": bool, "loss_last_only": bool}
_TRAIN_KEYS = {"steps": int, "batch_size": int, "base_lr": float,
               "warmup_steps": int, "weight_decay": float, "grad_clip": float,
               "eval_every": int, "cosine_decay": bool}
_EVAL_KEYS = {"episodes": int, "seeds": str}


def _coerce_section(parser: configparser.ConfigParser, section: str,
                    schema: Dict[str, type]) -> dict:
    out = {}
    if not parser.has_section(section):
        return out
    for key in parser.options(section):
        if key not in schema:
            raise UsageError(f"config section [{section}]: unknown field {key!r}")
        try:
            if schema[key] is bool:
                out[key] = parser.getboolean(section, key)
            elif schema[key] is int:
                out[key] = parser.getint(section, key)
            elif schema[key] is float:
                out[key] = parser.getfloat(section, key)
            else:
                out[key] = parser.get(section, key)
        except ValueError as exc:
            raise UsageError(f"config section [{section}], field {key!r}: {exc}") from None
    return out


def default_seed() -> int:
    return int(os.environ.get("RADT_LAB_SEED", "0"))


def load_run_config(path) -> RunConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise UsageError(f"config file not found: {path}")
    if not parser.has_section("run"):
        raise UsageError("config needs a [run] section with env and dataset")
    run = parser["run"]
    env = run.get("env")
    dataset = run.get("dataset")
    if not env or not dataset:
        raise UsageError("config [run] must set env and dataset")
    seed = run.getint("seed", fallback=default_seed())
    out = run.get("out", fallback=".")
    base = Path(path).parent
    dataset = str((base / dataset) if not Path(dataset).is_absolute() else Path(dataset))
    return RunConfig(env=env, dataset=dataset, out=out, seed=seed,
                     model=_coerce_section(parser, "model", _MODEL_KEYS),
                     train=_coerce_section(parser, "train", _TRAIN_KEYS),
                     eval=_coerce_section(parser, "eval", _EVAL_KEYS))


def model_config_for(rc: RunConfig, overrides: Optional[dict] = None) -> RadtConfig:
    spec = envs.make(rc.env)
    kwargs = dict(rc.model)
    kwargs.update(overrides or {})
    kwargs.setdefault("max_timesteps", spec.horizon + 1)
    kwargs["state_dim"] = spec.state_dim
    kwargs["action_space"] = spec.action_space
    return RadtConfig(**kwargs)


def provenance(digest: str, seed) -> str:
    return f"radt-lab v{__version__} config={digest[:12]} seed={seed}"


def _write_csv(path, header: List[str], rows: List[dict], prov: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {prov}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(row[h]) if isinstance(row[h], float) else str(row[h])
                              for h in header) + "\n")


def _write_json(path, payload: dict, prov: str) -> None:
    payload = dict(payload)
    payload["provenance"] = prov
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _parse_seeds(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip() != ""]
    except ValueError:
        raise UsageError(f"bad seed list {text!r}; expected e.g. 1,2,3") from None


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    try:
        spec = envs.make(args.env)
    except KeyError as exc:
        raise UsageError(f"{exc.args[0]}") from None
    seed = args.seed if args.seed is not None else default_seed()
    ds = generate_dataset(spec, args.policy_mix, args.n_traj, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out / "dataset.jsonl", ds)
    digest = hashlib.sha256(json.dumps(
        {"env": args.env, "n_traj": args.n_traj, "seed": seed,
         "policy_mix": args.policy_mix}, sort_keys=True).encode()).hexdigest()
    _write_json(out / "stats.json", dataset_stats(ds), provenance(digest, seed))
    print(f"wrote {out / 'dataset.jsonl'} ({args.n_traj} trajectories)")
    return 0


def _train_one(rc: RunConfig, model_overrides: dict, seed: int, out: Path,
               dataset) -> Path:
    """Train a single model into ``out``; returns the checkpoint path."""
    out.mkdir(parents=True, exist_ok=True)
    cfg = model_config_for(rc, model_overrides)
    model = build_model(cfg, seed=seed, return_scale=dataset.return_scale)
    tc = TrainConfig(seed=seed, **rc.train)
    prov = provenance(rc.digest(), seed)
    ckpt_path = out / "checkpoint.bin"
    rows = train(model, dataset, tc,
                 checkpoint_sink=lambda step, m: m.save(ckpt_path))
    _write_csv(out / "metrics.csv", ["step", "lr", "loss", "grad_norm"], rows, prov)
    summary = model.summary()
    summary["config_digest"] = cfg.digest().hex()
    summary["train_config"] = tc.to_dict()
    summary["dataset_digest"] = dataset_digest(dataset)
    _write_json(out / "model_summary.json", summary, prov)
    return ckpt_path


def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    if args.out:
        rc.out = args.out
    dataset = _load_dataset_checked(rc.dataset, rc.env)
    out = Path(rc.out)
    ckpt = _train_one(rc, {}, rc.seed, out, dataset)
    print(f"wrote {ckpt}")
    return 0


def _load_dataset_checked(path, env: str):
    if not Path(path).exists():
        raise UsageError(f"dataset not found: {path}")
    ds = load_dataset(path)
    if ds.env_id != env:
        raise UsageError(f"dataset env {ds.env_id!r} does not match configured env {env!r}")
    return ds


def _load_model_checked(checkpoint, summary_path=None):
    ckpt = Path(checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    summary_path = Path(summary_path) if summary_path else ckpt.parent / "model_summary.json"
    if not summary_path.exists():
        raise UsageError(f"model summary not found next to checkpoint: {summary_path}")
    with open(summary_path) as fh:
        summary = json.load(fh)
    cfg = RadtConfig.from_dict(summary["config"])
    return load_model(ckpt, cfg), summary


def _eval_one(model, dataset, episodes: int, seeds: List[int], out: Path,
              prov: str, seed_label=None) -> dict:
    spec = dataset.spec()
    grid = build_target_grid(dataset)
    rows = []
    records_by_target = {}
    with single_thread_blas():
        for seed in seeds:
            rows.extend(evaluate_alignment(model, spec, grid, episodes, [seed],
                                           seed_label=seed_label))
        for target in grid.values:
            records_by_target[target] = rollout_many(
                model, spec, target, [10_000 + e for e in range(episodes)])
    report = summarize(rows, grid)
    out.mkdir(parents=True, exist_ok=True)
    csv_rows = [{"variant": model.cfg.variant, **r} for r in rows]
    _write_csv(out / "alignment.csv",
               ["variant", "seed", "target", "episode", "actual", "abs_err_norm"],
               csv_rows, prov)
    _write_json(out / "summary.json", report.to_dict(), prov)
    trace_table = rtg_trace(records_by_target)
    series = []
    for target in grid.values:
        pts = [r for r in trace_table if r["target"] == target]
        series.append({"label": f"target {target:.2f}",
                       "xs": [r["step"] for r in pts],
                       "ys": [r["mean"] for r in pts],
                       "stderr": [r["stderr"] for r in pts]})
    write_svg(out / "traces.svg",
              line_chart(series, "return-to-go during evaluation episodes",
                         "step", "return-to-go", comment=prov))
    err_series = [{"label": model.cfg.variant,
                   "xs": [t["target_norm"] for t in report.per_target],
                   "ys": [t["mean"] for t in report.per_target],
                   "stderr": [t["stderr"] for t in report.per_target]}]
    write_svg(out / "errors.svg",
              line_chart(err_series, "normalized absolute error by target return",
                         "target return (normalized)", "absolute error (normalized)",
                         comment=prov))
    return report.to_dict()


def cmd_eval(args) -> int:
    model, summary = _load_model_checked(args.checkpoint, args.summary)
    dataset = load_dataset(args.dataset) if Path(args.dataset).exists() else None
    if dataset is None:
        raise UsageError(f"dataset not found: {args.dataset}")
    seeds = _parse_seeds(args.seeds)
    out = Path(args.out)
    prov = provenance(summary.get("config_digest", "0" * 12), args.seeds)
    report = _eval_one(model, dataset, args.episodes, seeds, out, prov)
    print(f"grand mean normalized error: {report['grand_mean']:.3f}")
    return 0


def cmd_ablate(args) -> int:
    rc = load_run_config(args.config)
    if args.out:
        rc.out = args.out
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; known: {sorted(ABLATION_VARIANTS)}")
    if "dt" not in variants:
        raise UsageError("variants must include dt (the normalization baseline)")
    seeds = _parse_seeds(args.seeds)
    dataset = _load_dataset_checked(rc.dataset, rc.env)
    episodes = int(rc.eval.get("episodes", 8))
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance(rc.digest(), args.seeds)

    jobs = {}
    for variant in variants:
        for seed in seeds:
            jobs[(variant, seed)] = out / f"{variant}-s{seed}"

    results: Dict[tuple, dict] = {}
    failures: Dict[tuple, str] = {}

    def run_one(key):
        variant, seed = key
        sub = jobs[key]
        ckpt = _train_one(rc, ABLATION_VARIANTS[variant], seed, sub, dataset)
        model, _ = _load_model_checked(ckpt)
        return _eval_one(model, dataset, episodes, [seed], sub,
                         provenance(rc.digest(), seed), seed_label=seed)

    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        futures = {key: pool.submit(run_one, key) for key in sorted(jobs)}
        for key, fut in futures.items():
            try:
                results[key] = fut.result()
            except Exception as exc:  # noqa: BLE001 - sub-run isolation
                failures[key] = f"{type(exc).__name__}: {exc}"

    table_rows = []
    grand: Dict[str, List[float]] = {}
    for variant in variants:
        means = [results[(variant, s)]["grand_mean"] for s in seeds
                 if (variant, s) in results]
        if means:
            grand[variant] = means
    dt_mean = float(np.mean(grand["dt"])) if "dt" in grand else float("nan")
    for variant in variants:
        if variant not in grand:
            continue
        mean = float(np.mean(grand[variant]))
        table_rows.append({"variant": variant, rc.env: mean / dt_mean})
    _write_csv(out / "ablation.csv", ["variant", rc.env], table_rows, prov)
    payload = {
        "env": rc.env,
        "seeds": seeds,
        "episodes": episodes,
        "dt_grand_mean": dt_mean,
        "normalized": {r["variant"]: r[rc.env] for r in table_rows},
        "raw_grand_means": {v: grand[v] for v in grand},
        "failures": {f"{k[0]}-s{k[1]}": v for k, v in failures.items()},
    }
    _write_json(out / "summary.json", payload, prov)
    for row in table_rows:
        print(f"{row['variant']:>12}: {row[rc.env]:.3f}")
    if failures:
        print(f"{len(failures)} sub-run(s) failed; partial results written", file=sys.stderr)
        return 4
    return 0


def cmd_probe(args) -> int:
    model, summary = _load_model_checked(args.checkpoint, args.summary)
    if not Path(args.dataset).exists():
        raise UsageError(f"dataset not found: {args.dataset}")
    dataset = load_dataset(args.dataset)
    spec = dataset.spec()
    grid = build_target_grid(dataset)
    seeds = _parse_seeds(args.seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance(summary.get("config_digest", "0" * 12), args.seeds)
    if model.cfg.variant == "radt" and not model.cfg.use_seqra and args.mode == "attention":
        raise UsageError("attention probe needs the return cross-attention layer "
                         "(model was trained with use_seqra=false)")
    with single_thread_blas():
        records_by_target = {}
        for ti, target in enumerate(grid.values):
            ep_seeds = [_probe_seed(1000 * s + ti, e)
                        for s in seeds for e in range(args.episodes)]
            records_by_target[target] = rollout_many(model, spec, target, ep_seeds)
        if args.mode == "rtg-trace":
            table = rtg_trace(records_by_target)
            _write_csv(out / "traces.csv", ["target", "step", "mean", "stderr"],
                       table, prov)
            series = []
            for target in grid.values:
                pts = [r for r in table if r["target"] == target]
                series.append({"label": f"target {target:.2f}",
                               "xs": [r["step"] for r in pts],
                               "ys": [r["mean"] for r in pts],
                               "stderr": [r["stderr"] for r in pts]})
            write_svg(out / "traces.svg",
                      line_chart(series, "return-to-go during probe episodes",
                                 "step", "return-to-go", comment=prov))
        else:
            episodes = [rec for recs in records_by_target.values() for rec in recs]
            masses = attention_probe(model, spec, episodes)
            rows = [{"variant": model.cfg.variant, "group": g, "mass": m}
                    for g, m in masses.items()]
            _write_csv(out / "attention.csv", ["variant", "group", "mass"], rows, prov)
            series = [{"label": model.cfg.variant, "xs": [0, 1, 2],
                       "ys": [masses["return"], masses["state"], masses["action"]]}]
            write_svg(out / "attention.svg",
                      line_chart(series, "first-layer attention mass "
                                 "(0=return, 1=state, 2=action)",
                                 "token group", "mass", comment=prov))
    print(f"wrote probe outputs to {out}")
    return 0


def _probe_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence((seed, 9999, episode)).generate_state(1)[0])


def cmd_stats(args) -> int:
    if not Path(args.dataset).exists():
        raise UsageError(f"dataset not found: {args.dataset}")
    ds = load_dataset(args.dataset)
    print(json.dumps(dataset_stats(ds), sort_keys=True, indent=2))
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="radt-lab",
                                description="return-aligned decision transformer lab")
    p.add_argument("--version", action="version", version=f"radt-lab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate an offline dataset")
    g.add_argument("--env", required=True)
    g.add_argument("--n-traj", type=int, required=True)
    g.add_argument("--seed", type=int, default=None,
                   help="default: RADT_LAB_SEED or 0")
    g.add_argument("--out", required=True)
    g.add_argument("--policy-mix", default="mixed", choices=["mixed", "zero", "max"])
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="alignment evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--episodes", type=int, default=8)
    e.add_argument("--seeds", default="1")
    e.add_argument("--summary", default=None,
                   help="model summary JSON (default: next to checkpoint)")
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate ablation variants")
    a.add_argument("--config", required=True)
    a.add_argument("--variants", default="full,no-seqra,no-stepra,no-adascale,dt")
    a.add_argument("--seeds", default="1,2,3")
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--out", default=None)
    a.set_defaults(func=cmd_ablate)

    pr = sub.add_parser("probe", help="attention or rtg-trace probe")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--dataset", required=True)
    pr.add_argument("--mode", required=True, choices=["attention", "rtg-trace"])
    pr.add_argument("--episodes", type=int, default=4)
    pr.add_argument("--seeds", default="1")
    pr.add_argument("--summary", default=None)
    pr.add_argument("--out", default=".")
    pr.set_defaults(func=cmd_probe)

    s = sub.add_parser("stats", help="print dataset return statistics")
    s.add_argument("--dataset", required=True)
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("run with --help for usage", file=sys.stderr)
        return 2
    except (GenerationError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
