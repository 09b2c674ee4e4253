"""Command-line entry point.

Every command writes into its output directory (``--out``): the outputs
themselves, ``config.yaml`` (the fully resolved configuration) and
``manifest.json`` (sha256 digests of inputs and outputs). Exit codes:
0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import config as cfgmod
from .checkpoint import load_checkpoint, save_checkpoint
from .data.eventfile import load_events, save_events
from .data.features import FeatureMatrix
from .data.kinematics import (M_P, generate_events, infer_recoil_from_features, mandelstam_t_from_features,
                              project_24_to_10, smear_events)
from .data.mocks import FAMILIES, sample_mock
from .data.preprocess import apply_preprocess, fit_preprocess, invert_preprocess
from .errors import (CheckpointError, ConfigError, DegenerateFeatureError, DivergenceError, EventFileError,
                     EventValidationError, FlowFoldError, KinematicsError, ModeError, NonConvergenceError,
                     ShapeError, TrainingDivergedError)
from .metrics import evaluate, histograms
from .odeint import GENERATE_TOL, UNFOLD_TOL, _integrate_chunks, generate, unfold
from .training import AdamW, TrainConfig, cfm_loss_and_grad, sample_cfm_batch, train

log = logging.getLogger("flowfold")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
USAGE_ERRORS = (ConfigError, ModeError, ShapeError, EventFileError, CheckpointError, DegenerateFeatureError,
                EventValidationError, FileNotFoundError)
NUMERIC_ERRORS = (NonConvergenceError, DivergenceError, TrainingDivergedError, KinematicsError)
MCPOM = "mcpom"


class UsageError(ConfigError):
    pass


# -- helpers -------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, command: str, cfg: dict):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg["output"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        (self.out / "config.yaml").write_text(cfgmod.dump_config(cfg))

    def path(self, name: str) -> Path:
        if name not in self.outputs:
            self.outputs.append(name)
        return self.out / name

    def input(self, path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"input file not found: {p}")
        self.inputs[str(path)] = sha256_file(p)
        return p

    def finish(self) -> None:
        names = ["config.yaml"] + sorted(self.outputs)
        manifest = {
            "command": self.command,
            "version": __version__,
            "inputs": self.inputs,
            "outputs": {n: sha256_file(self.out / n) for n in names if (self.out / n).is_file()},
        }
        write_json(self.out / "manifest.json", manifest)


def _summary(values: np.ndarray) -> dict:
    v = values.astype(np.float64)
    n = v.shape[0]
    out = {"count": int(n), "features": int(v.shape[1])}
    if n:
        mean = v.mean(axis=0)
        std = v.std(axis=0)
        centered = v - mean
        with np.errstate(invalid="ignore", divide="ignore"):
            skew = np.where(std > 0, (centered**3).mean(axis=0) / std**3, 0.0)
        out.update(min=v.min(axis=0).tolist(), max=v.max(axis=0).tolist(), mean=mean.tolist(),
                   std=std.tolist(), skewness=skew.tolist())
    return out


def _truth_half(m: FeatureMatrix) -> FeatureMatrix:
    return m.split_pairs()[0] if m.paired else m


def _physical(m: FeatureMatrix, stats) -> FeatureMatrix:
    if m.space == "physical":
        return m
    if stats is None:
        raise ConfigError("standardized event file carries no statistics to undo the preprocessing")
    return invert_preprocess(m, stats)


# -- commands --------------------------------------------------------------------


def cmd_mock(cfg: dict, args) -> dict:
    spec = cfgmod.mock_spec(cfg)
    run = Run("mock", cfg)
    if spec.family == MCPOM:
        if spec.params:
            raise ConfigError("the mcpom generator takes no dataset.params")
        data = FeatureMatrix(project_24_to_10(generate_events(spec.n, spec.seed)))
    else:
        data = sample_mock(spec)
    save_events(run.path("events.ev"), data)
    summary = {"family": spec.family, **_summary(data.values)}
    write_json(run.path("summary.json"), summary)
    run.finish()
    print(f"wrote {data.n_events} events to {run.out / 'events.ev'}")
    return summary


def cmd_smear(cfg: dict, args) -> dict:
    if not args.data:
        raise UsageError("smear needs --data")
    run = Run("smear", cfg)
    truth, stats = load_events(run.input(args.data))
    truth = _physical(_truth_half(truth), stats)
    if truth.n_features != 10:
        raise ShapeError(f"smearing expects 10 kinematic features, file has {truth.n_features}")
    sc = cfgmod.smear_config(cfg)
    detector = smear_events(truth.values, sc, np.random.default_rng(sc.seed))
    paired = FeatureMatrix.pair(truth, FeatureMatrix(detector))
    save_events(run.path("paired.ev"), paired)
    t_vals = paired.split_pairs()[0].values.astype(np.float64)
    d_vals = paired.split_pairs()[1].values.astype(np.float64)
    summary = {
        "count": truth.n_events,
        "sigma_smear": sc.sigma_smear,
        "truth_std": t_vals.std(axis=0).tolist() if truth.n_events else [],
        "detector_std": d_vals.std(axis=0).tolist() if truth.n_events else [],
    }
    if truth.n_events:
        # recoil rebuilt from the (smeared) pions via momentum conservation
        for name, vals in (("truth", t_vals), ("detector", d_vals)):
            recoil = infer_recoil_from_features(vals)
            m2 = recoil[:, 0] ** 2 - np.sum(recoil[:, 1:] ** 2, axis=1)
            summary[f"{name}_recoil_mass_mean"] = float(np.mean(np.sqrt(np.clip(m2, 0, None))))
            summary[f"{name}_recoil_mass_rms_dev"] = float(np.sqrt(np.mean((np.sqrt(np.clip(m2, 0, None)) - M_P) ** 2)))
            summary[f"{name}_t_mean"] = float(np.mean(mandelstam_t_from_features(vals)))
    write_json(run.path("summary.json"), summary)
    run.finish()
    print(f"wrote {truth.n_events} paired events to {run.out / 'paired.ev'}")
    return summary


def _prepare_training_data(data: FeatureMatrix, stats, mode: str, scale: float):
    if mode == "unfold" and not data.paired:
        raise ModeError("unfold training needs a paired truth/detector file (see the smear command)")
    if mode == "generate" and data.paired:
        raise ModeError("generate training takes a plain event file, not a paired one")
    if data.space == "standardized":
        if stats is None:
            raise ConfigError("standardized training file carries no statistics")
        return data, stats
    stats = fit_preprocess(data, scale=scale, allow_degenerate=True)
    return apply_preprocess(data, stats), stats


def cmd_train(cfg: dict, args) -> dict:
    data_path = args.data or cfg["dataset"]["path"]
    if not data_path:
        raise UsageError("train needs --data (or dataset.path in the config)")
    run = Run("train", cfg)
    raw, file_stats = load_events(run.input(data_path))
    mode = cfg["model"]["mode"]
    tc = cfgmod.train_config(cfg)
    resume = best = None
    if args.resume:
        resume = load_checkpoint(run.input(args.resume), expect_mode=mode)
        if resume.optimizer is None or resume.rng_state is None:
            raise CheckpointError("checkpoint has no optimizer/RNG state; resume from last.ckpt", "optimizer")
        best_path = Path(args.resume).with_name("best.ckpt")
        if best_path.is_file():
            best = load_checkpoint(best_path, expect_mode=mode)
        stats = resume.stats
        data = apply_preprocess(raw, stats) if raw.space == "physical" else raw
        net_cfg = resume.net.config
        _prepare_training_data(data, stats, mode, stats.scale)  # mode/pairing checks
    else:
        data, stats = _prepare_training_data(raw, file_stats, mode, cfg["preprocess"]["scale"])
        dim = data.n_features // 2 if data.paired else data.n_features
        net_cfg = cfgmod.net_config(cfg, dim)

    log_path = run.path("epochs.jsonl")
    kept = []
    if resume is not None and log_path.is_file():
        kept = [ln for ln in log_path.read_text().splitlines() if ln and json.loads(ln)["epoch"] <= resume.epoch]
    log_path.write_text("".join(ln + "\n" for ln in kept))
    best_path, last_path = run.path("best.ckpt"), run.path("last.ckpt")

    def on_epoch(entry, last, best_rec):
        with open(log_path, "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        save_checkpoint(last_path, last)
        if best_rec.epoch == entry["epoch"]:
            save_checkpoint(best_path, best_rec)
        print(f"epoch {entry['epoch']:4d}  loss {entry['train_loss']:.5f}  val {entry['val_loss']:.5f}  "
              f"W1 {entry['wasserstein_mean']:.4g}  nfe {entry['nfe_mean']:.1f}  lr {entry['lr']:.3g}", flush=True)

    result = train(data, tc, net_cfg, stats, resume=resume, best=best, on_epoch=on_epoch)
    if not result.log:
        save_checkpoint(last_path, result.last)
    if not best_path.is_file() or not result.log:
        save_checkpoint(best_path, result.best)
    run.finish()
    return {"epochs": len(result.log), "best_epoch": result.best.epoch, "best_value": result.best.monitor_value}


def cmd_sample(cfg: dict, args) -> dict:
    if not args.checkpoint:
        raise UsageError("sample needs --checkpoint")
    run = Run("sample", cfg)
    ckpt = load_checkpoint(run.input(args.checkpoint), expect_mode="generate")
    n = cfg["dataset"]["n"] if args.n is None else args.n
    if n < 0:
        raise UsageError("--n must be nonnegative")
    solver = cfgmod.solver_config(cfg, GENERATE_TOL)
    events, nfe = generate(ckpt, n, solver, seed=cfg["seed"])
    save_events(run.path("samples.ev"), events)
    report = {"n": n, "nfe_mean": nfe, "atol": solver.atol, "rtol": solver.rtol}
    write_json(run.path("sample_stats.json"), report)
    run.finish()
    print(f"generated {n} events, mean NFE {nfe:.1f}")
    return report


def cmd_unfold(cfg: dict, args) -> dict:
    if not args.checkpoint or not args.data:
        raise UsageError("unfold needs --checkpoint and --data")
    run = Run("unfold", cfg)
    ckpt = load_checkpoint(run.input(args.checkpoint), expect_mode="unfold")
    det, stats = load_events(run.input(args.data))
    if det.paired:
        det = det.split_pairs()[1]
    det = _physical(det, stats)
    solver = cfgmod.solver_config(cfg, UNFOLD_TOL)
    events, nfe = unfold(ckpt, det, solver, seed=cfg["seed"])
    save_events(run.path("unfolded.ev"), events)
    report = {"n": det.n_events, "nfe_mean": nfe, "atol": solver.atol, "rtol": solver.rtol}
    write_json(run.path("unfold_stats.json"), report)
    run.finish()
    print(f"unfolded {det.n_events} events, mean NFE {nfe:.1f}")
    return report


def cmd_eval(cfg: dict, args) -> dict:
    if not args.gen or not args.truth:
        raise UsageError("eval needs --gen and --truth")
    run = Run("eval", cfg)
    gen, gs = load_events(run.input(args.gen))
    truth, ts = load_events(run.input(args.truth))
    gen, truth = _physical(_truth_half(gen), gs), _physical(_truth_half(truth), ts)
    if gen.n_features != truth.n_features:
        raise ShapeError(f"feature counts differ: gen {gen.n_features}, truth {truth.n_features}")
    kwargs = {}
    if args.train:
        tr, trs = load_events(run.input(args.train))
        tr = _physical(_truth_half(tr), trs)
        if tr.n_features != truth.n_features:
            raise ShapeError(f"training file has {tr.n_features} features, truth {truth.n_features}")
        # neighbour distances are measured in the standardized training space
        st = fit_preprocess(tr, scale=cfg["preprocess"]["scale"], allow_degenerate=True)
        kwargs = {"train": tr.values, "nn_gen": apply_preprocess(gen, st).values,
                  "nn_train": apply_preprocess(tr, st).values, "seed": cfg["seed"]}
    report = evaluate(gen.values, truth.values, **kwargs).to_dict(include_nn=bool(args.train))
    write_json(run.path("metrics.json"), report)
    if args.histograms:
        write_json(run.path("histograms.json"), histograms(gen.values, truth.values))
    run.finish()
    print(json.dumps(report, indent=2, sort_keys=True))
    return report


def _mean_std(xs) -> dict:
    a = np.asarray(xs, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std(ddof=1)) if a.size > 1 else 0.0, "samples": a.tolist()}


def cmd_bench(cfg: dict, args) -> dict:
    if not args.checkpoint:
        raise UsageError("bench needs --checkpoint")
    run = Run("bench", cfg)
    ckpt = load_checkpoint(run.input(args.checkpoint))
    net = ckpt.net
    dim = net.config.dim
    rng = np.random.default_rng(cfg["seed"])
    if args.data:
        data, ds = load_events(run.input(args.data))
        data = _physical(data, ds)
        if net.config.conditional and not data.paired:
            raise ModeError("conditional bench needs a paired file")
        z = apply_preprocess(data, ckpt.stats)
        if net.config.conditional:
            x1, cond = (m.values for m in z.split_pairs())
        else:
            x1, cond = _truth_half(z).values, None
        if x1.shape[1] != dim:
            raise ShapeError(f"bench data has {x1.shape[1]} features, model expects {dim}")
    else:
        scale = ckpt.stats.scale
        x1 = (scale * rng.standard_normal((max(args.batch, args.events), dim))).astype(np.float32)
        cond = (x1 + 0.1 * scale * rng.standard_normal(x1.shape)).astype(np.float32) if net.config.conditional else None

    tcfg = TrainConfig(**{**ckpt.train_config}) if ckpt.train_config else TrainConfig()
    work = net.copy()
    opt = AdamW(work.params)
    train_ms = []
    for _ in range(args.iterations):
        t0 = time.perf_counter()
        batch = sample_cfm_batch(x1, args.batch, rng, cond)
        _, grads = cfm_loss_and_grad(work, batch)
        opt.step(work.params, grads, tcfg.learning_rate, tcfg.weight_decay)
        train_ms.append(1e3 * (time.perf_counter() - t0))

    inference = []
    for tol in args.tolerances:
        solver = cfgmod.solver_config({**cfg, "solver": {**cfg["solver"], "atol": tol, "rtol": tol}})
        rates, nfes = [], []
        for r in range(args.runs):
            idx = rng.integers(0, x1.shape[0], args.events)
            x0 = np.random.default_rng([cfg["seed"], r]).standard_normal((args.events, dim)).astype(net.dtype)
            t0 = time.perf_counter()
            _, nfe = _integrate_chunks(net, x0, solver, args.events, cond=None if cond is None else cond[idx])
            rates.append(args.events / (time.perf_counter() - t0))
            nfes.append(nfe)
        inference.append({"tol": tol, "events_per_s": _mean_std(rates), "nfe_mean": float(np.mean(nfes))})
        print(f"inference tol {tol:g}: {np.mean(rates):.1f} +- {np.std(rates, ddof=1) if len(rates) > 1 else 0:.1f}"
              f" events/s, NFE {np.mean(nfes):.1f}")
    report = {
        "mode": net.config.mode,
        "parameters": net.config.parameter_count(),
        "training": {"batch_size": args.batch, "iterations": args.iterations, "ms_per_iteration": _mean_std(train_ms)},
        "inference": {"events": args.events, "runs": args.runs, "results": inference},
    }
    print(f"training: {np.mean(train_ms):.1f} ms/iteration at batch {args.batch}")
    write_json(run.path("bench.json"), report)
    run.finish()
    return report


COMMANDS = {"mock": cmd_mock, "smear": cmd_smear, "train": cmd_train, "sample": cmd_sample,
            "unfold": cmd_unfold, "eval": cmd_eval, "bench": cmd_bench}


# -- argument parsing --------------------------------------------------------------


def _solver_flags(s) -> None:
    s.add_argument("--tol", type=float, help="set solver atol and rtol together")
    s.add_argument("--atol", type=float, help="solver.atol")
    s.add_argument("--rtol", type=float, help="solver.rtol")
    s.add_argument("--max-steps", type=int, help="solver.max_steps")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--out", help="output directory (config key: output)")
    common.add_argument("--seed", type=int, help="global seed (config key: seed)")
    common.add_argument("--threads", type=int, help="BLAS thread count; 1 guarantees bitwise reproducibility")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")

    p = argparse.ArgumentParser(
        prog="flowfold",
        description="Flow matching event generation and detector unfolding.",
        epilog="Any config key can be overridden with a dotted flag, e.g. --train.lr=1e-4 or --model.hidden 64.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("mock", parents=[common], help="write a synthetic dataset",
                       description="Sample a synthetic dataset. Family parameters may be given as extra flags "
                                   "(e.g. --loc 0.3) or as --dataset.params.NAME=VALUE.")
    s.add_argument("--family", help=f"one of {', '.join(FAMILIES + (MCPOM,))}")
    s.add_argument("--n", type=int, help="number of events")

    s = sub.add_parser("smear", parents=[common], help="apply detector smearing, writing a paired file")
    s.add_argument("--data", help="10-feature event file")
    s.add_argument("--sigma", type=float, help="smearing strength (smear.sigma_smear)")
    s.add_argument("--k", type=float, help="resolution coefficient in GeV^-1 (smear.k)")

    s = sub.add_parser("train", parents=[common], help="train a velocity network")
    s.add_argument("--data", help="training event file (paired for --mode unfold)")
    s.add_argument("--mode", choices=("generate", "unfold"), help="model.mode")
    s.add_argument("--epochs", type=int, help="train.epochs")
    s.add_argument("--resume", help="last.ckpt of an earlier run to continue from")

    s = sub.add_parser("sample", parents=[common], help="generate events from an unconditional checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("--n", type=int, help="number of events (default dataset.n)")
    _solver_flags(s)

    s = sub.add_parser("unfold", parents=[common], help="unfold detector events with a conditional checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("--data", help="detector-level (or paired) event file")
    _solver_flags(s)

    s = sub.add_parser("eval", parents=[common], help="compute the metrics report")
    s.add_argument("--gen", help="generated or unfolded events")
    s.add_argument("--truth", help="reference events")
    s.add_argument("--train", help="training events; enables the nearest-neighbour block")
    s.add_argument("--histograms", action="store_true", help="also dump 50-bin histograms per feature")

    s = sub.add_parser("bench", parents=[common], help="time training iterations and inference")
    s.add_argument("--checkpoint")
    s.add_argument("--data", help="optional event file for realistic batches")
    s.add_argument("--iterations", type=int, default=10)
    s.add_argument("--batch", type=int, default=20_000)
    s.add_argument("--runs", type=int, default=5)
    s.add_argument("--events", type=int, default=50_000)
    s.add_argument("--tolerances", type=float, nargs="+", default=[GENERATE_TOL, UNFOLD_TOL])
    return p


def _split_extras(extras: list[str]) -> list[tuple[str, str]]:
    pairs = []
    i = 0
    while i < len(extras):
        tok = extras[i]
        if not tok.startswith("--") or tok == "--":
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extras):
                raise UsageError(f"flag --{key} needs a value")
            value = extras[i + 1]
            i += 2
        pairs.append((key, value))
    return pairs


def resolve_config(args, extras: list[str]) -> dict:
    overrides = []
    flat = {
        "output": args.out, "seed": args.seed, "threads": args.threads,
    }
    for key, value in flat.items():
        if value is not None:
            overrides.append({key: value})
    cmd = args.command
    if cmd == "mock":
        if args.family is not None:
            overrides.append({"dataset": {"family": args.family}})
        if args.n is not None:
            overrides.append({"dataset": {"n": args.n}})
        if args.seed is not None:
            overrides.append({"dataset": {"seed": args.seed}})
    if cmd == "smear":
        if args.sigma is not None:
            overrides.append({"smear": {"sigma_smear": args.sigma}})
        if args.k is not None:
            overrides.append({"smear": {"k": args.k}})
        if args.seed is not None:
            overrides.append({"smear": {"seed": args.seed}})
    if cmd == "train":
        if args.mode is not None:
            overrides.append({"model": {"mode": args.mode}})
        if args.epochs is not None:
            overrides.append({"train": {"epochs": args.epochs}})
    if cmd in ("sample", "unfold"):
        if args.tol is not None:
            overrides.append({"solver": {"atol": args.tol, "rtol": args.tol}})
        for key in ("atol", "rtol", "max_steps"):
            if getattr(args, key) is not None:
                overrides.append({"solver": {key: getattr(args, key)}})
    for key, value in _split_extras(extras):
        if "." in key:
            overrides.append(cfgmod.parse_override(key, value))
        elif cmd == "mock":
            overrides.append(cfgmod.parse_override(f"dataset.params.{key}", value))
        else:
            raise UsageError(f"unknown flag --{key}")
    return cfgmod.load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args, extras)
        with threadpool_limits(limits=cfg["threads"]):
            COMMANDS[args.command](cfg, args)
    except NUMERIC_ERRORS as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FlowFoldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
