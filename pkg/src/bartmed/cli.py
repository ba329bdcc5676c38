"""Command-line interface: ``bartmed {synth,validate,fit,effects,simulate}``.

Settings come from an optional YAML config; command-line flags override it.
Every command writes a JSON manifest with the resolved config, its hash, the
dataset hash and all seeds, and never embeds timestamps, so reruns are
byte-identical. Failures print ``{"error": {"kind": ..., "message": ...}}``
on stderr and exit with the error's code (2 I/O, 3 config or input, 4
numerical, 5 internal consistency).
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .bart import BartConfig, fit_bart, load_posterior, save_posterior
from .basis import bart_covariates, build_mediator_design, build_outcome_design, make_design_spec
from .dataset import load_dataset, synthesize_dataset, validate, write_dataset
from .errors import BartmedError, ConfigError, ConsistencyError, InputIOError, StaleArtifactError
from .glm import fit_quasipoisson, load_outcome_fit, save_outcome_fit
from .mediation import ExposureGrid, effect_identities_check, estimate_effects, write_effect_draws, write_effect_table
from .mediator_linear import fit_linear_mediator, load_linear_mediator, save_linear_mediator
from .simstudy import NB_SIZE, ScenarioConfig, metrics_manifest, run_scenario, write_scenario_csv

log = logging.getLogger("bartmed")

# full-scale defaults; "desk" swaps in the reduced BART and K
DEFAULTS = {
    "data": {"path": None, "schema": None, "holidays": None},
    "model": {"mediator": "bart", "df": 6},
    "bart": BartConfig().to_dict(),
    "effects": {
        "K": 20000,
        "seed": 0,
        "reference_quantile": 0.50,
        "exposure_quantiles": [0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95],
        "mediator_draw_mode": "mean",
        "share_weights": True,
        "resample_draws": False,
        "write_draws": False,
    },
    # nb_dispersion: negative-binomial size of simulated counts; null for Poisson
    "simulate": {"scenario": "linear/linear", "n_reps": None, "seed": 0, "T": 2208, "data_seed": 20240101,
                 "nb_dispersion": NB_SIZE},
    "preset": "full",
    "workers": None,
    "output": "out",
}
DESK = {"bart": BartConfig.desk().to_dict(), "effects": {"K": 2000}}
SCENARIOS = ("linear/linear", "linear/bart", "bart/linear", "bart/bart")
ARTIFACTS = {"outcome": "outcome_fit.npz", "design": "design.json", "manifest": "fit_manifest.json",
             "bart": "mediator_bart.npz", "linear": "mediator_linear.npz"}


# -- config ---------------------------------------------------------------

def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigError(f"unknown config key {path + k!r}", key=path + k)
        if isinstance(out[k], dict) and isinstance(v, dict) and k not in ("schema",):
            out[k] = _merge(out[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def load_config(path) -> dict:
    """Read a YAML config (missing file -> ``io.not_found``)."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        raise InputIOError(f"config file not found: {path}", kind="io.not_found", path=str(path)) from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    return raw


def resolve_config(file_cfg: dict | None, overrides: dict) -> dict:
    """Defaults <- preset <- file <- flag overrides, then validation."""
    file_cfg = file_cfg or {}
    preset = overrides.get("preset") or file_cfg.get("preset") or "full"
    if preset not in ("full", "desk"):
        raise ConfigError(f"preset must be 'full' or 'desk', got {preset!r}")
    cfg = copy.deepcopy(DEFAULTS)
    if preset == "desk":
        cfg = _merge(cfg, DESK)
    cfg = _merge(cfg, file_cfg)
    cfg = _merge(cfg, _nest(overrides))
    cfg["preset"] = preset
    _check(cfg)
    return cfg


def _nest(flat):
    out = {}
    for key, v in flat.items():
        if v is None:
            continue
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = v
    return out


def _check(cfg):
    df = cfg["model"]["df"]
    dfs = df.values() if isinstance(df, dict) else [df]
    if isinstance(df, dict) and set(df) != {"temperature", "doy", "humidity"}:
        raise ConfigError("model.df mapping needs keys temperature, doy, humidity")
    for v in dfs:
        if not isinstance(v, int) or isinstance(v, bool) or v < 2:
            raise ConfigError(f"spline df must be an integer >= 2, got {v!r}", key="model.df")
    if cfg["model"]["mediator"] not in ("bart", "linear"):
        raise ConfigError(f"model.mediator must be 'bart' or 'linear', got {cfg['model']['mediator']!r}")
    try:
        BartConfig(**{**cfg["bart"], "move_probs": tuple(cfg["bart"]["move_probs"])})
        ExposureGrid(cfg["effects"]["reference_quantile"], tuple(cfg["effects"]["exposure_quantiles"]))
    except BartmedError as exc:
        raise ConfigError(str(exc)) from None
    e = cfg["effects"]
    if not isinstance(e["K"], int) or e["K"] < 100:
        raise ConfigError(f"effects.K must be an integer >= 100, got {e['K']!r}")
    if e["mediator_draw_mode"] not in ("mean", "predictive"):
        raise ConfigError("effects.mediator_draw_mode must be 'mean' or 'predictive'")
    nb = cfg["simulate"]["nb_dispersion"]
    if nb is not None and (isinstance(nb, bool) or not isinstance(nb, (int, float)) or not nb > 0):
        raise ConfigError(f"simulate.nb_dispersion must be positive or null, got {nb!r}")
    w = cfg["workers"]
    if w is not None and (not isinstance(w, int) or w < 1):
        raise ConfigError("workers must be a positive integer")


def _bart_config(cfg) -> BartConfig:
    return BartConfig(**{**cfg["bart"], "move_probs": tuple(cfg["bart"]["move_probs"])})


def _workers(cfg):
    return cfg["workers"] or os.cpu_count() or 1


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(cfg) -> str:
    # outputs do not depend on the output directory or worker count
    core = {k: v for k, v in cfg.items() if k not in ("output", "workers")}
    return hashlib.sha256(_canonical(core).encode()).hexdigest()


def _file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_manifest(path, command, cfg, dataset_hash, seeds, outputs):
    doc = {
        "command": command,
        "bartmed_version": __version__,
        "numpy_version": np.__version__,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "dataset_hash": dataset_hash,
        "seeds": seeds,
        "outputs": {Path(p).name: _file_hash(p) for p in outputs},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2, default=str) + "\n")
    return doc


def _load_data(cfg):
    d = cfg["data"]
    if not d["path"]:
        raise ConfigError("no input dataset given (data.path or --data)")
    return load_dataset(d["path"], schema=d["schema"], holidays=d["holidays"])


def _outdir(cfg) -> Path:
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands -------------------------------------------------------------

def cmd_synth(args):
    if args.days <= 0:
        raise ConfigError("--days must be positive")
    ds = synthesize_dataset(args.days, args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, args.out)
    print(json.dumps({"path": str(args.out), "days": len(ds), "dataset_hash": ds.fingerprint()}))
    return 0


def cmd_validate(args):
    schema = _parse_schema(args.schema)
    ds = load_dataset(args.data, schema=schema, holidays=args.holidays)
    report = validate(ds)
    print(json.dumps({"days": len(ds), "ok": report.ok, "errors": [list(map(str, e)) for e in report.errors],
                      "warnings": [list(map(str, w)) for w in report.warnings],
                      "dataset_hash": ds.fingerprint()}, indent=2))
    report.raise_if_invalid()
    return 0


def cmd_fit(args, cfg):
    ds = _load_data(cfg)
    validate(ds).raise_if_invalid()
    out = _outdir(cfg)
    df = cfg["model"]["df"]
    ospec = make_design_spec(ds, "outcome", df)
    outcome = fit_quasipoisson(build_outcome_design(ds, ospec), ds.y)
    save_outcome_fit(outcome, out / ARTIFACTS["outcome"])
    kind = cfg["model"]["mediator"]
    seeds = {}
    if kind == "bart":
        bcfg = _bart_config(cfg)
        post = fit_bart(bart_covariates(ds), ds.m, bcfg)
        save_posterior(post, out / ARTIFACTS["bart"])
        seeds["bart"] = bcfg.seed
    else:
        mspec = make_design_spec(ds, "mediator", df)
        lin = fit_linear_mediator(build_mediator_design(ds, mspec), ds.m)
        save_linear_mediator(lin, out / ARTIFACTS["linear"])
    design = {"outcome": ospec.to_dict(), "mediator_model": kind,
              "mediator": make_design_spec(ds, "mediator", df).to_dict() if kind == "linear" else None}
    (out / ARTIFACTS["design"]).write_text(json.dumps(design, sort_keys=True, indent=2) + "\n")
    outputs = [out / ARTIFACTS["outcome"], out / ARTIFACTS[kind], out / ARTIFACTS["design"]]
    _write_manifest(out / ARTIFACTS["manifest"], "fit", cfg, ds.fingerprint(), seeds, outputs)
    print(json.dumps({"artifacts": [str(p) for p in outputs + [out / ARTIFACTS["manifest"]]],
                      "dispersion": outcome.dispersion}, indent=2))
    return 0


def _load_fit_dir(fit_dir: Path):
    mpath = fit_dir / ARTIFACTS["manifest"]
    if not mpath.exists():
        raise InputIOError(f"no fit manifest in {fit_dir}", kind="io.not_found", path=str(mpath))
    manifest = json.loads(mpath.read_text())
    for name, digest in manifest["outputs"].items():
        p = fit_dir / name
        if not p.exists():
            raise InputIOError(f"artifact missing: {p}", kind="io.not_found", path=str(p))
        if _file_hash(p) != digest:
            raise StaleArtifactError(f"artifact {p} changed since it was written", path=str(p))
    outcome = load_outcome_fit(fit_dir / ARTIFACTS["outcome"])
    kind = manifest["config"]["model"]["mediator"]
    med = load_posterior(fit_dir / ARTIFACTS["bart"]) if kind == "bart" else \
        load_linear_mediator(fit_dir / ARTIFACTS["linear"])
    return manifest, outcome, med


def cmd_effects(args, cfg):
    fit_dir = Path(args.fit_dir)
    manifest, outcome, med = _load_fit_dir(fit_dir)
    if not cfg["data"]["path"]:
        cfg["data"] = manifest["config"]["data"]
    ds = _load_data(cfg)
    if ds.fingerprint() != manifest["dataset_hash"]:
        raise StaleArtifactError("fit artifacts were made from a different dataset; rerun 'fit'",
                                 expected=manifest["dataset_hash"], found=ds.fingerprint())
    e = cfg["effects"]
    grid = ExposureGrid(e["reference_quantile"], tuple(e["exposure_quantiles"]))
    table = estimate_effects(outcome, med, ds, grid, e["K"], e["seed"],
                             mediator_draw_mode=e["mediator_draw_mode"], share_weights=e["share_weights"],
                             resample_draws=e["resample_draws"], keep_draws=True, workers=_workers(cfg))
    if e["share_weights"] and not effect_identities_check(table, 1e-12):
        raise ConsistencyError("per-draw effect identities failed")
    out = _outdir(cfg)
    outputs = [out / "effects.csv"]
    write_effect_table(table, outputs[0])
    if e["write_draws"]:
        outputs.append(out / "effects_draws.npz")
        write_effect_draws(table, outputs[1])
    _write_manifest(out / "effects_manifest.json", "effects", cfg, ds.fingerprint(),
                    {"effects": e["seed"], "fit_manifest": _file_hash(fit_dir / ARTIFACTS["manifest"])}, outputs)
    print(json.dumps({"table": str(outputs[0]), "rows": 5 * len(grid)}))
    return 0


def cmd_simulate(args, cfg):
    presets = [p for p in (args.smoke and "smoke", args.sim_preset) if p]
    if len(set(presets)) > 1:
        raise ConfigError(f"conflicting simulation presets: {presets}")
    s = cfg["simulate"]
    name = presets[0] if presets else ("desk" if cfg["preset"] == "desk" else "full")
    overrides = {"T": s["T"], "data_seed": s["data_seed"], "workers": _workers(cfg),
                 "mediator_draw_mode": cfg["effects"]["mediator_draw_mode"],
                 "nb_dispersion": None if s["nb_dispersion"] is None else float(s["nb_dispersion"])}
    if args.sim_preset is None and not args.smoke:
        overrides.update(K=cfg["effects"]["K"], bart=_bart_config(cfg))
    if args.K is not None:
        overrides["K"] = args.K
    if s["n_reps"] is not None:
        overrides["n_reps"] = s["n_reps"]
    scfg = ScenarioConfig.preset(name, **overrides)
    scen = s["scenario"]
    todo = SCENARIOS if scen == "all" else (scen,)
    for sc in todo:
        if sc not in SCENARIOS:
            raise ConfigError(f"scenario must be 'all' or one of {SCENARIOS}, got {sc!r}")
    ds = synthesize_dataset(scfg.T, scfg.data_seed)
    results = []
    for sc in todo:
        truth_kind, fit_kind = sc.split("/")
        log.info("scenario %s (%d replicates)", sc, scfg.n_reps)
        results.append(run_scenario(truth_kind, fit_kind, cfg=scfg, seed=s["seed"], dataset=ds))
    out = _outdir(cfg)
    csv_path = out / "scenarios.csv"
    write_scenario_csv(results, csv_path)
    (out / "scenario_details.json").write_text(metrics_manifest(results, scfg, s["seed"]) + "\n")
    _write_manifest(out / "simulate_manifest.json", "simulate", {**cfg, "scenario_config": scfg.to_dict()},
                    ds.fingerprint(), {"seed": s["seed"], "data_seed": scfg.data_seed,
                                       "replicates": "SeedSequence([seed, rep])"},
                    [csv_path, out / "scenario_details.json"])
    print(json.dumps({"table": str(csv_path), "rows": sum(len(m.rows) for m in results)}))
    return 0


# -- parser ---------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}", kind="config.usage")


def _parse_schema(items):
    if not items:
        return None
    out = {}
    for it in items:
        if "=" not in it:
            raise ConfigError(f"--schema entries look like field=column, got {it!r}")
        k, v = it.split("=", 1)
        out[k] = v
    return out


def _common(p):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--data", help="input CSV (overrides data.path)")
    p.add_argument("--schema", action="append", metavar="FIELD=COLUMN", help="column mapping, repeatable")
    p.add_argument("--holidays", help="file of holiday dates")
    p.add_argument("--out", help="output directory")
    p.add_argument("--preset", choices=("full", "desk"), help="full-scale or reduced settings")
    p.add_argument("--desk", action="store_true", help="shorthand for --preset desk")
    p.add_argument("--workers", type=int, help="worker processes (default: all cores)")
    p.add_argument("--seed", type=int, help="seed for the command's random draws")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bartmed", description="Mediation analysis with BART or linear mediator models.")
    parser.add_argument("--version", action="version", version=f"bartmed {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--days", type=int, default=2208)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("validate", help="check a dataset")
    p.add_argument("data")
    p.add_argument("--schema", action="append", metavar="FIELD=COLUMN")
    p.add_argument("--holidays")

    p = sub.add_parser("fit", help="fit the outcome and mediator models")
    _common(p)
    p.add_argument("--mediator", choices=("bart", "linear"))
    p.add_argument("--df", type=int, help="degrees of freedom of every spline")

    p = sub.add_parser("effects", help="estimate effects from fitted artifacts")
    _common(p)
    p.add_argument("--fit-dir", required=True, help="directory written by 'fit'")
    p.add_argument("-K", "--draws", dest="K", type=int, help="Monte-Carlo draws")
    p.add_argument("--reference-quantile", type=float)
    p.add_argument("--exposure-quantiles", type=lambda s: [float(v) for v in s.split(",")],
                   help="comma-separated quantiles")
    p.add_argument("--mode", dest="mediator_draw_mode", choices=("mean", "predictive"))
    p.add_argument("--write-draws", action="store_true", default=None)
    p.add_argument("--resample-draws", action="store_true", default=None)

    p = sub.add_parser("simulate", help="run simulation scenarios")
    _common(p)
    p.add_argument("--scenario", help="truth/fit pair such as linear/bart, or 'all'")
    p.add_argument("--n-reps", type=int)
    p.add_argument("--sim-preset", choices=("smoke", "desk", "full"))
    p.add_argument("--smoke", action="store_true", help="shorthand for --sim-preset smoke")
    p.add_argument("-K", "--draws", dest="K", type=int)
    return parser


def _overrides(args) -> dict:
    if getattr(args, "desk", False) and args.preset not in (None, "desk"):
        raise ConfigError("--desk conflicts with --preset " + args.preset)
    ov = {
        "preset": "desk" if getattr(args, "desk", False) else getattr(args, "preset", None),
        "data.path": getattr(args, "data", None),
        "data.schema": _parse_schema(getattr(args, "schema", None)),
        "data.holidays": getattr(args, "holidays", None),
        "output": getattr(args, "out", None),
        "workers": getattr(args, "workers", None),
        "model.mediator": getattr(args, "mediator", None),
        "model.df": getattr(args, "df", None),
        "effects.K": getattr(args, "K", None),
        "effects.reference_quantile": getattr(args, "reference_quantile", None),
        "effects.exposure_quantiles": getattr(args, "exposure_quantiles", None),
        "effects.mediator_draw_mode": getattr(args, "mediator_draw_mode", None),
        "effects.write_draws": getattr(args, "write_draws", None),
        "effects.resample_draws": getattr(args, "resample_draws", None),
        "simulate.scenario": getattr(args, "scenario", None),
        "simulate.n_reps": getattr(args, "n_reps", None),
    }
    seed = getattr(args, "seed", None)
    if seed is not None:
        key = {"fit": "bart.seed", "effects": "effects.seed", "simulate": "simulate.seed"}[args.command]
        ov[key] = seed
    return ov


def _fail(exc: BartmedError) -> int:
    sys.stderr.write(json.dumps({"error": exc.to_dict()}, sort_keys=True) + "\n")
    return exc.exit_code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except BartmedError as exc:
        return _fail(exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "validate":
            return cmd_validate(args)
        file_cfg = load_config(args.config) if args.config else None
        cfg = resolve_config(file_cfg, _overrides(args))
        if cfg["data"]["path"] and not Path(cfg["data"]["path"]).exists():
            raise InputIOError(f"input file not found: {cfg['data']['path']}", kind="io.not_found",
                               path=str(cfg["data"]["path"]))
        return {"fit": cmd_fit, "effects": cmd_effects, "simulate": cmd_simulate}[args.command](args, cfg)
    except BartmedError as exc:
        return _fail(exc)
    except OSError as exc:
        return _fail(InputIOError(str(exc)))


if __name__ == "__main__":
    sys.exit(main())
