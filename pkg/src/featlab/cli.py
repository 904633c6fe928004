"""Command-line front end.

Subcommands:
  simulate {erm,irmv1,pretrain-irmv1}  training trajectories -> CSV/JSON
  verify {race,suppression,transfer,corollary,oracle,fixed-point,kernel,gradcheck}
  feat / ifeat                         feature-augmented training rounds
  data                                 dataset generation -> CSV + sidecar

Configs are JSON with every default materialized into the run manifest;
`--set key=value` overrides use dotted paths. Exit codes: 0 ok,
2 config error, 3 numeric abort, 4 verification failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checks, dynamics, feat, io, plots, theory
from .cnn import Activation, init_cnn
from .data import EnvironmentSpec, dataset_to_csv, sample_dataset, sample_test_set
from .dynamics import NumericAbortError, PreconditionError, TrainConfig
from .feat import FeatConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4


class ConfigError(ValueError):
    def __init__(self, pointer: str, msg: str) -> None:
        super().__init__(f"config error at {pointer}: {msg}")
        self.pointer = pointer


DEFAULT_SIM = {
    "envs": [
        {"alpha": 0.25, "beta": 0.1, "n": 2500},
        {"alpha": 0.25, "beta": 0.2, "n": 2500},
    ],
    "eta": 0.1,
    "steps": 2000,
    "lambda": 1e8,
    "pretrain_steps": 0,
    "eta_irm": None,
    "record_every": 10,
    "activation": "linear",
    "beta_smooth": 5.0,
    "sigma_0": 0.01,
    "sigma_p": 0.01,
    "m": 10,
    "d": 50,
    "seed": 0,
}

DEFAULT_FEAT = {
    "envs": [
        {"alpha": 0.25, "beta": 0.1, "n": 2500},
        {"alpha": 0.25, "beta": 0.2, "n": 2500},
    ],
    "d": 50,
    "sigma_p": 0.01,
    "seed": 0,
    "max_rounds": 2,
    "inner_epochs": 200,
    "termination_threshold": 0.55,
    "termination_sum": 1.30,
    "lambda_retain": 1.0,
    "lr": 0.5,
    "hidden": 32,
    "activation": "relu",
    "ood_n": 5000,
}

DEFAULT_DATA = {
    "envs": [
        {"alpha": 0.25, "beta": 0.1, "n": 2500},
        {"alpha": 0.25, "beta": 0.2, "n": 2500},
    ],
    "d": 50,
    "sigma_p": 0.01,
    "seed": 0,
    "test_set": False,
    "test_n": 5000,
    "test_betas": [0.1, 0.2],
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Dotted-path --set overrides, e.g. eta=0.5 or envs.0.alpha=0.3."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError("/" + item, "override must look like key=value")
        key, _, raw = item.partition("=")
        parts = key.split(".")
        node = config
        for i, part in enumerate(parts[:-1]):
            if isinstance(node, list):
                node = node[int(part)]
            elif part in node:
                node = node[part]
            else:
                raise ConfigError("/" + "/".join(parts[: i + 1]), "unknown key")
        leaf = parts[-1]
        if isinstance(node, list):
            node[int(leaf)] = _parse_value(raw)
        else:
            if leaf not in node:
                raise ConfigError("/" + "/".join(parts), "unknown key")
            node[leaf] = _parse_value(raw)
    return config


def load_config(defaults: dict, path: str | None, overrides: list[str]) -> dict:
    config = json.loads(json.dumps(defaults))  # deep copy
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError("/", f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError("/", f"config is not valid JSON: {e}")
        for key, value in user.items():
            if key not in config:
                raise ConfigError(f"/{key}", "unknown key")
            config[key] = value
    return apply_overrides(config, overrides)


def _check(cond: bool, pointer: str, msg: str) -> None:
    if not cond:
        raise ConfigError(pointer, msg)


def validate_sim(config: dict) -> TrainConfig:
    envs = config["envs"]
    _check(isinstance(envs, list) and envs, "/envs", "must be a nonempty list")
    specs = []
    for i, env in enumerate(envs):
        for fkey in ("alpha", "beta", "n"):
            _check(fkey in env, f"/envs/{i}/{fkey}", "missing")
        _check(0 <= env["alpha"] <= 1, f"/envs/{i}/alpha", "must be in [0, 1]")
        _check(0 <= env["beta"] <= 1, f"/envs/{i}/beta", "must be in [0, 1]")
        _check(env["n"] >= 1, f"/envs/{i}/n", "must be >= 1")
        specs.append(EnvironmentSpec(env["alpha"], env["beta"], env["n"]))
    _check(config["eta"] is not None and config["eta"] >= 0, "/eta", "must be >= 0")
    _check(config["steps"] >= 0, "/steps", "must be >= 0")
    _check(config["lambda"] >= 0, "/lambda", "must be >= 0")
    _check(0 <= config["pretrain_steps"] <= config["steps"],
           "/pretrain_steps", "must be in [0, steps]")
    _check(config["eta_irm"] is None or config["eta_irm"] > 0, "/eta_irm", "must be > 0")
    _check(config["record_every"] >= 1, "/record_every", "must be >= 1")
    _check(config["activation"] in ("linear", "smoothed_relu", "tanh"),
           "/activation", "must be linear, smoothed_relu, or tanh")
    _check(config["sigma_0"] >= 0, "/sigma_0", "must be >= 0")
    _check(config["sigma_p"] >= 0, "/sigma_p", "must be >= 0")
    _check(config["m"] >= 1, "/m", "must be >= 1")
    _check(config["d"] >= 3, "/d", "must be >= 3")
    return TrainConfig(
        envs=tuple(specs),
        eta=config["eta"],
        steps=config["steps"],
        lam=config["lambda"],
        pretrain_steps=config["pretrain_steps"],
        eta_irm=config["eta_irm"],
        record_every=config["record_every"],
        activation=Activation(config["activation"], config["beta_smooth"]),
        sigma_0=config["sigma_0"],
        sigma_p=config["sigma_p"],
        m=config["m"],
        d=config["d"],
        seed=config["seed"],
    )


def validate_feat(config: dict) -> tuple[FeatConfig, list[EnvironmentSpec], dict]:
    specs = validate_sim({**DEFAULT_SIM, "envs": config["envs"], "d": config["d"],
                          "sigma_p": config["sigma_p"], "seed": config["seed"]}).envs
    _check(config["max_rounds"] >= 1, "/max_rounds", "must be >= 1")
    _check(0 < config["termination_threshold"] <= 1,
           "/termination_threshold", "must be in (0, 1]")
    _check(config["inner_epochs"] >= 1, "/inner_epochs", "must be >= 1")
    _check(config["lr"] > 0, "/lr", "must be > 0")
    _check(config["hidden"] >= 1, "/hidden", "must be >= 1")
    _check(config["activation"] in ("relu", "identity"),
           "/activation", "must be relu or identity")
    fcfg = FeatConfig(
        max_rounds=config["max_rounds"],
        inner_epochs=config["inner_epochs"],
        termination_threshold=config["termination_threshold"],
        termination_sum=config["termination_sum"],
        lambda_retain=config["lambda_retain"],
        lr=config["lr"],
        hidden=config["hidden"],
        activation=config["activation"],
        seed=config["seed"],
    )
    return fcfg, list(specs), config


def out_dir(args, default_name: str) -> Path:
    root = Path(args.out) if args.out else Path(os.environ.get("FEATLAB_OUT", "runs")) / default_name
    root.mkdir(parents=True, exist_ok=True)
    return root


def _sweep_seeds(args) -> list[int] | None:
    if not getattr(args, "sweep", None):
        return None
    spec = args.sweep
    if not spec.startswith("seeds="):
        raise ConfigError("/sweep", "expected seeds=a..b")
    lo, _, hi = spec[len("seeds="):].partition("..")
    return list(range(int(lo), int(hi) + 1))


def run_with_sweep(args, config: dict, runner, default_name: str) -> int:
    """Run once, or fan out one run per seed into subdirectories."""
    seeds = _sweep_seeds(args)
    base = out_dir(args, default_name)
    if seeds is None:
        return runner(config, base)
    def one(seed: int) -> int:
        sub = base / f"seed-{seed}"
        sub.mkdir(parents=True, exist_ok=True)
        cfg_s = json.loads(json.dumps(config))
        cfg_s["seed"] = seed
        return runner(cfg_s, sub)
    with ThreadPoolExecutor(max_workers=min(8, len(seeds))) as pool:
        codes = list(pool.map(one, seeds))
    return max(codes)


def cmd_simulate(args) -> int:
    config = load_config(DEFAULT_SIM, args.config, args.set or [])

    def runner(config: dict, out: Path) -> int:
        cfg = validate_sim(config)
        manifest = io.RunManifest(f"simulate-{args.mode}", config, config["seed"])
        with io.Timer() as timer:
            try:
                traj = dynamics.run_gd(cfg, args.mode)
            except NumericAbortError as e:
                print(f"numeric abort: {e}", file=sys.stderr)
                return EXIT_NUMERIC
        manifest.duration_s = timer.elapsed
        csv_path = out / "trajectory.csv"
        io.write_trajectory_csv(traj, csv_path, manifest.hash)
        io.save_checkpoint(traj.final_params, out / "checkpoint.txt", seed=cfg.seed)
        summary = {
            "schedule": args.mode,
            "switch_step": traj.switch_step,
            "final": {
                "agg_inv": float(traj.agg_inv[-1]),
                "agg_spu": float(traj.agg_spu[-1]),
                "c_norm": float(traj.c_norm[-1]),
                "train_acc": float(traj.train_acc[-1]),
            },
            "config": config,
        }
        if cfg.activation.kind == "linear" and len(cfg.envs) == 2 \
                and cfg.envs[0].alpha == cfg.envs[1].alpha \
                and 0 < cfg.envs[0].alpha < 1:
            try:
                fp = theory.closed_form_fixed_point(
                    cfg.envs[0].alpha, cfg.envs[0].beta, cfg.envs[1].beta
                )
                summary["fixed_point"] = {
                    "gamma1_inf": fp.gamma1_inf, "gamma2_inf": fp.gamma2_inf
                }
            except ValueError:
                pass
        io.write_json(summary, out / "summary.json", manifest.hash)
        manifest.outputs = ["trajectory.csv", "checkpoint.txt", "summary.json"]
        if args.plot:
            plots.plot_trajectory(traj, out / "trajectory.png", traj.switch_step)
            manifest.outputs.append("trajectory.png")
        manifest.write(out / "manifest.json")
        print(f"wrote {csv_path}")
        return EXIT_OK

    return run_with_sweep(args, config, runner, f"simulate-{args.mode}")


def _verify_report(report: dict, out: Path, manifest: io.RunManifest, name: str) -> int:
    io.write_json(report, out / "report.json", manifest.hash)
    manifest.outputs = ["report.json"]
    manifest.write(out / "manifest.json")
    status = "PASS" if report.get("passed", False) else "FAIL"
    print(f"verify {name}: {status}")
    for key, value in report.items():
        if key != "passed":
            print(f"  {key}: {value}")
    return EXIT_OK if report.get("passed", False) else EXIT_VERIFY


def cmd_verify(args) -> int:
    overrides = args.set or []
    name = args.check
    base = {"race": {"steps": 200, "eta": 0.003},
            "fixed-point": {},
            "suppression": {"eta": 5e-8, "steps": 2000},
            "transfer": {"eta": 0.5, "eta_irm": 5e-9, "steps": 5500, "pretrain_steps": 5000},
            "corollary": {"eta": 5e-8},
            "oracle": {
                "eta": 0.05,
                "sigma_p": 1e-4,
                "envs": [{"alpha": 0.25, "beta": 0.1, "n": 100_000},
                         {"alpha": 0.25, "beta": 0.2, "n": 100_000}],
            },
            "kernel": {},
            "gradcheck": {}}.get(name, {})
    config = load_config({**DEFAULT_SIM, **base}, args.config, overrides)
    out = out_dir(args, f"verify-{name}")
    manifest = io.RunManifest(f"verify-{name}", config, config["seed"])

    try:
        if name == "fixed-point":
            alpha = args.alpha if args.alpha is not None else 0.25
            betas = args.beta if args.beta else [0.1, 0.2]
            fp = theory.closed_form_fixed_point(alpha, betas[0], betas[1])
            print(f"gamma1_inf = {fp.gamma1_inf:.6f}")
            print(f"gamma2_inf = {fp.gamma2_inf:.6f}")
            report = {
                "alpha": alpha, "beta": betas,
                "a_const": fp.a_const, "b_const": fp.b_const,
                "g_m": fp.g_m, "g_b": fp.g_b,
                "gamma1_inf": fp.gamma1_inf, "gamma2_inf": fp.gamma2_inf,
                "passed": True,
            }
        elif name == "gradcheck":
            report = checks.gradcheck_suite()
            print(f"max relative error: {report['max_rel_err']:.3e}")
        elif name == "kernel":
            cfg = validate_sim(config)
            ds = sample_dataset(list(cfg.envs), cfg.d, cfg.sigma_p, cfg.seed)
            p = init_cnn(cfg.m, cfg.d, cfg.sigma_0, cfg.activation, cfg.seed + 1)
            diag = theory.irm_kernel(p, ds)
            sym = float(np.max(np.abs(diag.h_matrix - diag.h_matrix.T)))
            report = {
                "h_matrix": diag.h_matrix.tolist(),
                "lambda0": diag.lambda0,
                "rank": diag.rank,
                "symmetric": bool(sym < 1e-10),
                "passed": bool(sym < 1e-10 and diag.lambda0 > -1e-10
                               and diag.rank <= 2),
            }
        elif name == "race":
            report = dynamics.verify_erm_race(validate_sim(config))
        elif name == "suppression":
            report = dynamics.verify_suppression(validate_sim(config))
        elif name == "transfer":
            report = dynamics.verify_irmv1_transfer(validate_sim(config))
        elif name == "corollary":
            report = dynamics.verify_corollary_degradation(validate_sim(config))
        elif name == "oracle":
            report = dynamics.verify_oracle(validate_sim(config))
        else:
            raise ConfigError("/check", f"unknown verification: {name}")
    except PreconditionError as e:
        print(f"precondition violated: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbortError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC

    return _verify_report(report, out, manifest, name)


def cmd_feat(args) -> int:
    config = load_config(DEFAULT_FEAT, args.config, args.set or [])
    incremental = args.variant == "ifeat"

    def runner(config: dict, out: Path) -> int:
        fcfg, specs, config = validate_feat(config)
        manifest = io.RunManifest(args.variant, config, config["seed"])
        ds_train = sample_dataset(specs, d=config["d"], sigma_p=config["sigma_p"],
                                  seed=config["seed"])
        ds_ood = sample_test_set(
            config["ood_n"], [s.beta for s in specs], d=config["d"],
            sigma_p=config["sigma_p"], seed=config["seed"] + 10_000,
        )
        with io.Timer() as timer:
            try:
                run = feat.run_ifeat if incremental else feat.run_feat
                result = run(fcfg, ds_train, ds_ood)
                total_epochs = sum(len(rm.epoch_log) for rm in result.rounds)
                baseline = feat.erm_baseline(fcfg, ds_train, max(total_epochs, 1))
            except feat.NumericAbortError as e:
                print(f"numeric abort: {e}", file=sys.stderr)
                return EXIT_NUMERIC
        manifest.duration_s = timer.elapsed

        io.write_rounds_csv(result, out / "rounds.csv", manifest.hash)
        final_ood = feat.evaluate(result.model, ds_ood)["accuracy"]
        base_ood = feat.evaluate(baseline, ds_ood)["accuracy"]
        result_json = {
            "variant": args.variant,
            "rounds_completed": result.rounds_completed,
            "termination_reason": result.termination_reason,
            "rounds": [
                {
                    "round": rm.round_index,
                    "train_acc": rm.train_acc,
                    "retention_acc": None if np.isnan(rm.retention_acc) else rm.retention_acc,
                    "ood_acc": rm.ood_acc,
                    "aug_size": rm.aug_size,
                    "ret_size": rm.ret_size,
                    "kept": rm.kept,
                }
                for rm in result.rounds
            ],
            "final_ood_acc": final_ood,
            "config": config,
        }
        io.write_json(result_json, out / "result.json", manifest.hash)
        kept = [rm for rm in result.rounds if rm.kept and rm.ood_acc is not None]
        round_ood = kept[-1].ood_acc if kept else final_ood
        comparison = {
            "round_ood_acc": round_ood,  # last kept round's model
            "averaged_ood_acc": final_ood,
            "baseline_ood_acc": base_ood,
            "ood_gain": round_ood - base_ood,
            "baseline_epochs": total_epochs,
        }
        io.write_json(comparison, out / "comparison.json", manifest.hash)
        manifest.outputs = ["rounds.csv", "result.json", "comparison.json"]
        if args.plot:
            plots.plot_rounds(result, out / "rounds.png")
            manifest.outputs.append("rounds.png")
        manifest.write(out / "manifest.json")
        print(f"{args.variant}: rounds={result.rounds_completed} "
              f"reason={result.termination_reason} ood={final_ood:.4f} "
              f"(baseline {base_ood:.4f})")
        return EXIT_OK

    return run_with_sweep(args, config, runner, args.variant)


def cmd_data(args) -> int:
    config = load_config(DEFAULT_DATA, args.config, args.set or [])
    out = out_dir(args, "data")
    manifest = io.RunManifest("data", config, config["seed"])
    sim = validate_sim({**DEFAULT_SIM, "envs": config["envs"], "d": config["d"],
                        "sigma_p": config["sigma_p"], "seed": config["seed"]})
    if config["test_set"]:
        ds = sample_test_set(config["test_n"], config["test_betas"], d=config["d"],
                             sigma_p=config["sigma_p"], seed=config["seed"])
    else:
        ds = sample_dataset(list(sim.envs), d=config["d"], sigma_p=config["sigma_p"],
                            seed=config["seed"])
    path = out / "dataset.csv"
    dataset_to_csv(ds, path, header_comment=f"manifest={manifest.hash}")
    manifest.outputs = ["dataset.csv", "dataset.csv.json"]
    manifest.write(out / "manifest.json")
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featlab",
        description="Two-bit feature-learning simulation laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, sweep=True, plot=False):
        p.add_argument("--config", help="JSON config path")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-path config override")
        p.add_argument("--out", help="output directory")
        if sweep:
            p.add_argument("--sweep", metavar="seeds=a..b",
                           help="fan out one run per seed")
        if plot:
            p.add_argument("--plot", action="store_true",
                           help="render matplotlib figures next to the CSVs")

    p_sim = sub.add_parser("simulate", help="run a training trajectory")
    p_sim.add_argument("mode", choices=["erm", "irmv1", "pretrain-irmv1"])
    common(p_sim, plot=True)
    p_sim.set_defaults(func=cmd_simulate)

    p_ver = sub.add_parser("verify", help="run a theory verification")
    p_ver.add_argument("check", choices=[
        "race", "suppression", "transfer", "corollary", "oracle",
        "fixed-point", "kernel", "gradcheck",
    ])
    p_ver.add_argument("--alpha", type=float)
    p_ver.add_argument("--beta", type=float, nargs=2)
    common(p_ver, sweep=False)
    p_ver.set_defaults(func=cmd_verify)

    for variant in ("feat", "ifeat"):
        p_f = sub.add_parser(variant, help=f"run {variant} rounds")
        common(p_f, plot=True)
        p_f.set_defaults(func=cmd_feat, variant=variant)

    p_d = sub.add_parser("data", help="generate a dataset CSV")
    common(p_d, sweep=False)
    p_d.set_defaults(func=cmd_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, PreconditionError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
