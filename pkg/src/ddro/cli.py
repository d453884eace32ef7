"""``ddro`` command line: synth, perturb, train, eval, run, verify, report, preset.

Exit status: 0 on success, 2 for configuration errors, 1 when a run fails
(a partial bundle flagged ``status: failed`` is still written).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import benchmark as bm
from .bundle import ResultBundle, report, write_table
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .data import synth_generate, write_csv
from .metrics import convergence_probe
from .predictor import DecisionModel
from .trainer import RunFailure

log = logging.getLogger("ddro")

PRESETS = {
    # calibrated desk-scale benchmark (see README)
    "desk": {},
    # the published hyperparameters; slow at T=500
    "paper": {
        "diffusion": {"T": 500, "beta_min": 1e-4, "beta_max": 0.02, "tuned_steps": 15},
        "inner": {"K": 10, "eps": 0.015, "eta": 0.01, "kappa": 0.4, "reward": "raw", "relative_budget": False},
        "outer": {"iterations": 15, "epochs": 2, "batch_size": 64},
        "predictor": {"pretrain_epochs": 100},
        "baselines": {"wdro_budget": 0.3, "kl_eps": 4.0},
    },
}


def preset(name: str, **top) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (choose from {', '.join(PRESETS)})")
    cfg = bm.with_overrides(ExperimentConfig(), **PRESETS[name])
    return replace(cfg, output=f"runs/{name}", source=f"<preset {name}>", **top)


def benchmark_id(cfg: ExperimentConfig) -> str:
    """Bundles with equal ids evaluate on the same kind of test data."""
    d = cfg.to_dict()
    key = json.dumps({k: d[k] for k in ("data", "noise", "predictor")}, sort_keys=True, default=list)
    return hashlib.sha256(key.encode()).hexdigest()[:12]


def _new_bundle(cfg: ExperimentConfig) -> ResultBundle:
    return ResultBundle(cfg.hash(), benchmark_id(cfg), cfg.seed, dump_config(cfg))


def _record_traces(bundle: ResultBundle, name: str, res) -> None:
    for j, (loss, g) in enumerate(zip(res.losses, res.grad_norms), 1):
        bundle.add("traces", name, j, loss, g)
    for j, tr in enumerate(res.inner_traces, 1):
        for k, (J, mu, ef) in enumerate(zip(tr.J, tr.mu, tr.expected_f), 1):
            bundle.add("inner", name, j, k, J, mu, ef)


def _record_eval(bundle: ResultBundle, name: str, w: DecisionModel, bench, levels) -> None:
    for dataset, mse in bm.evaluate(w, bench).items():
        bundle.add("metrics", name, dataset, mse)
    for kind, lv, data in levels:
        bundle.add("curves", name, kind, lv, bm.mse_eval(w, data))


def train_all(cfg: ExperimentConfig, bundle: ResultBundle) -> dict:
    """Train every configured method; returns {method: DecisionModel}."""
    bench = bm.build_benchmark(cfg)
    pre = bm.pretrain(cfg, bench, diffusion=bm.needs_diffusion(cfg.methods) or bool(cfg.sweep.eps))
    models = {}
    for m in cfg.methods:
        log.info("training %s (seed %d)", m, cfg.seed)
        try:
            res = bm.run_method(m, cfg, bench, pre)
        except RunFailure as exc:
            _record_traces(bundle, m, exc.partial)
            bundle.status, bundle.error = "failed", f"{m}: {exc.partial.error}"
            raise
        _record_traces(bundle, m, res)
        models[m] = res.w
    for e in cfg.sweep.eps:
        log.info("eps sweep: %g", e)
        res = bm.run_method("ddro", cfg, bench, pre, eps=float(e))
        for dataset, mse in bm.evaluate(res.w, bench).items():
            bundle.add("sweep", float(e), dataset, mse)
    return models


def eval_all(cfg: ExperimentConfig, bundle: ResultBundle, models: dict) -> None:
    bench = bm.build_benchmark(cfg)
    levels = bm.level_sets(cfg, bench, cfg.seed)
    for m, w in models.items():
        _record_eval(bundle, m, w, bench, levels)


def save_models(models: dict, path: Path) -> None:
    doc = {m: {"L_in": w.L_in, "L_out": w.L_out, "hidden": list(w.hidden), "arch": w.arch, "params": [p.tolist() for p in w.params]} for m, w in models.items()}
    path.write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_models(path: Path) -> dict:
    doc = json.loads(path.read_text(encoding="utf-8"))
    return {m: DecisionModel([np.array(p) for p in d["params"]], d["L_in"], d["L_out"], tuple(d["hidden"]), d["arch"]) for m, d in doc.items()}


def run_experiment(cfg: ExperimentConfig, out: Path | None = None) -> ResultBundle:
    """Train, evaluate and persist one (config, seed) run."""
    bundle = _new_bundle(cfg)
    out = cfg.output_dir() if out is None else Path(out)
    try:
        models = train_all(cfg, bundle)
        eval_all(cfg, bundle, models)
        save_models(models, _ensure(out) / "models.json")
    except (RunFailure, FloatingPointError) as exc:
        bundle.status = "failed"
        bundle.error = bundle.error or str(exc)
        bundle.write(out)
        raise
    bundle.write(out)
    return bundle


def _ensure(p: Path) -> Path:
    p.mkdir(parents=True, exist_ok=True)
    return p


def verify(cfg: ExperimentConfig, bundle: ResultBundle) -> None:
    """Analytic and trained score-matching vs KL probes, plus the convergence probe of a D-DRO run."""
    for name, rep in (("lemma1_analytic", bm.analytic_lemma1_probe(cfg.seed)), ("lemma1_training", bm.lemma1_training_probe(cfg.seed))):
        for row in rep.as_rows():
            bundle.add("probes", name, *row)
    bench = bm.build_benchmark(cfg)
    pre = bm.pretrain(cfg, bench)
    res = bm.run_method("ddro", cfg, bench, pre)
    for row in convergence_probe(res).as_rows():
        bundle.add("probes", "convergence", *row)


# ---------------------------------------------------------------------------
# argument handling


def _load(args) -> ExperimentConfig:
    if args.config is None:
        cfg = preset(args.preset)
    else:
        cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = replace(cfg, output=args.out)
    return cfg


def cmd_synth(cfg, args):
    out = _ensure(cfg.output_dir())
    if cfg.data.source != "synthetic":
        raise ConfigError("synth needs data.source = synthetic", cfg.source)
    write_csv(synth_generate(cfg.synth_spec(), bm.derive(cfg.seed, bm._TRAIN)), out / "train.csv")
    write_csv(synth_generate(cfg.synth_spec(cfg.data.test_length), bm.derive(cfg.seed, bm._TEST)), out / "test.csv")
    print(out)


def cmd_perturb(cfg, args):
    out = _ensure(cfg.output_dir())
    bench = bm.build_benchmark(cfg)
    sets = {"clean": bench.clean, **bench.tests}
    for kind, lv, data in bm.level_sets(cfg, bench, cfg.seed):
        sets[f"{kind}_{lv!r}"] = data
    for name, d in sets.items():
        L_in, L_out = d.windows.shape[1], d.horizons.shape[1]
        header = [f"x{i}" for i in range(L_in)] + [f"y{i}" for i in range(L_out)]
        write_table(out / f"test_{name}.csv", header, [tuple(float(v) for v in row) for row in d.vectors])
    print(out)


def cmd_train(cfg, args):
    bundle = _new_bundle(cfg)
    out = cfg.output_dir()
    try:
        models = train_all(cfg, bundle)
    finally:
        bundle.write(out)
    save_models(models, out / "models.json")
    print(out)


def cmd_eval(cfg, args):
    out = cfg.output_dir()
    path = out / "models.json"
    if not path.exists():
        raise ConfigError(f"no trained models at {path}; run 'ddro train' first", cfg.source)
    bundle = ResultBundle.read(out)
    if bundle.config_hash != cfg.hash():
        raise ConfigError(f"{out} was trained with a different config (hash {bundle.config_hash})", cfg.source)
    bundle.tables["metrics"], bundle.tables["curves"] = [], []
    eval_all(cfg, bundle, load_models(path))
    bundle.write(out)
    print(out)


def cmd_run(cfg, args):
    run_experiment(cfg)
    print(cfg.output_dir())


def cmd_verify(cfg, args):
    bundle = _new_bundle(cfg)
    verify(cfg, bundle)
    out = bundle.write(cfg.output_dir())
    print(out)


def cmd_report(args):
    bundles = [ResultBundle.read(p) for p in args.bundles]
    res = report(bundles, Path(args.out))
    for m, d, mse, imp in res["table"]:
        imp_s = "" if imp == "" else f"{imp:+.1f}%"
        print(f"{m:6s} {d:9s} {mse:.6f} {imp_s}")


def cmd_preset(args):
    sys.stdout.write(dump_config(preset(args.name)))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddro", description="Diffusion-model DRO experiments at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("synth", "write synthetic train/test series as CSV"),
        ("perturb", "write the clean and noisy test sets as CSV"),
        ("train", "train the configured methods"),
        ("eval", "evaluate trained methods on every test set"),
        ("run", "train and evaluate (one bundle)"),
        ("verify", "run the diagnostic probes"),
    ]:
        s = sub.add_parser(name, help=help_)
        g = s.add_mutually_exclusive_group()
        g.add_argument("config", nargs="?", help="experiment config file")
        g.add_argument("--preset", default="desk", choices=sorted(PRESETS), help="use a bundled preset instead of a file")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--out", help="override the output directory")
    r = sub.add_parser("report", help="aggregate bundles into tables and plot data")
    r.add_argument("bundles", nargs="+")
    r.add_argument("--out", required=True)
    pr = sub.add_parser("preset", help="print a bundled preset config")
    pr.add_argument("name", choices=sorted(PRESETS))
    return p


COMMANDS = {"synth": cmd_synth, "perturb": cmd_perturb, "train": cmd_train, "eval": cmd_eval, "run": cmd_run, "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "report":
            cmd_report(args)
        elif args.command == "preset":
            cmd_preset(args)
        else:
            COMMANDS[args.command](_load(args), args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RunFailure, FloatingPointError) as exc:
        print(f"error: run failed: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
