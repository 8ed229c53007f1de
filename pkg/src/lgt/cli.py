"""Command-line front end.

Subcommands:
  synth      generate a synthetic pairs file plus ground-truth CSV and
             the operator file that generated (or should recover) it
  infer      estimate per-pair coefficients for a pairs file
  train      learn operators from a pairs file, checkpointing per epoch
  eval       PSNR comparison table across model configurations
  gradcheck  finite-difference validation of all analytic gradients

Every command takes --out DIR, writes its results there along with the
fully resolved configuration, and is deterministic given --seed. Exit
codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import re
import sys

import numpy as np

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- configuration ---------------------------------------------------------

_SCHEMA = {
    "energy": {"eta_n": float, "eta_d": float, "eta_sigma": float},
    "optimize": {
        "max_iters": int,
        "grad_tol": float,
        "memory": int,
        "c1": float,
        "backtrack": float,
    },
    "inference": {
        "init_mu": float,
        "init_sigma": float,
        "restarts": int,
        "blur_mode": str,
        "restart_scale": float,
    },
    "train": {
        "batch_size": int,
        "epochs": int,
        "init_scale": float,
        "mstep_max_iters": int,
        "n_ops": int,
    },
    "run": {"seed": int, "threads": int},
}

_DEFAULTS = {
    "energy": {"eta_n": 1.0, "eta_d": 0.005, "eta_sigma": 0.01},
    "optimize": {"max_iters": 300, "grad_tol": 1e-6, "memory": 10, "c1": 1e-4, "backtrack": 0.5},
    "inference": {"init_mu": 0.0, "init_sigma": None, "restarts": 0,
                  "blur_mode": "adaptive", "restart_scale": 3.0},
    "train": {"batch_size": 200, "epochs": 10, "init_scale": 0.01,
              "mstep_max_iters": 50, "n_ops": 1},
    "run": {"seed": 0, "threads": 1},
}


class RunConfig:
    """Flat key = value configuration with sections, flag-overridable.

    Unknown sections or keys are rejected; the fully resolved state is
    echoed into every run's output directory.
    """

    def __init__(self):
        self.values = {sec: dict(vals) for sec, vals in _DEFAULTS.items()}

    def _check(self, section, key):
        if section not in _SCHEMA:
            raise UsageError(f"unknown config section [{section}]")
        if key not in _SCHEMA[section]:
            raise UsageError(f"unknown config key {section}.{key}")

    def set(self, section, key, raw):
        self._check(section, key)
        kind = _SCHEMA[section][key]
        try:
            self.values[section][key] = kind(raw)
        except ValueError as exc:
            raise UsageError(f"bad value for {section}.{key}: {raw!r}") from exc

    def load(self, path):
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise FileNotFoundError(f"config file not found: {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                self.set(section, key, raw)

    def apply_overrides(self, pairs):
        for item in pairs or []:
            m = re.fullmatch(r"([A-Za-z_]+)\.([A-Za-z_]+)=(.*)", item)
            if not m:
                raise UsageError(f"--set expects section.key=value, got {item!r}")
            self.set(m.group(1), m.group(2), m.group(3))

    def __getitem__(self, section):
        return self.values[section]

    def resolved_ini(self):
        lines = []
        for section in sorted(self.values):
            lines.append(f"[{section}]")
            for key in sorted(self.values[section]):
                lines.append(f"{key} = {self.values[section][key]}")
            lines.append("")
        return "\n".join(lines)

    def energy_config(self, mask=None):
        from .energy import EnergyConfig

        e = self.values["energy"]
        return EnergyConfig(e["eta_n"], e["eta_d"], e["eta_sigma"], mask)

    def minimize_spec(self, max_iters=None):
        from .optimize import MinimizeSpec

        o = self.values["optimize"]
        return MinimizeSpec(
            max_iters=max_iters or o["max_iters"],
            grad_tol=o["grad_tol"],
            memory=o["memory"],
            c1=o["c1"],
            backtrack=o["backtrack"],
        )

    def inference_policy(self, seed, blur_mode=None, restarts=None):
        from .inference import InferencePolicy

        i = self.values["inference"]
        return InferencePolicy(
            init_mu=i["init_mu"],
            init_sigma=i["init_sigma"],
            restarts=i["restarts"] if restarts is None else restarts,
            blur_mode=blur_mode or i["blur_mode"],
            restart_scale=i["restart_scale"],
            seed=seed,
        )


def _prepare_out(args, config):
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config_resolved.ini"), "w") as fh:
        fh.write(config.resolved_ini())


def _load_config(args):
    config = RunConfig()
    if getattr(args, "config", None):
        config.load(args.config)
    config.apply_overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        config.set("run", "seed", str(args.seed))
    if getattr(args, "threads", None) is not None:
        config.set("run", "threads", str(args.threads))
    return config


def _fmt(x):
    return f"{x:.17g}"


# --- synth ------------------------------------------------------------------

_SYNTH_KINDS = ("affine6", "translate1d", "translate2d", "translate_brightness")


def cmd_synth(args):
    from .affine import (
        PatchGrid,
        affine_chain,
        circular_translation_generator,
        spectral_translation_chain,
        synth_affine_batch,
        synth_translation_batch,
    )
    from .data_eval import PairsFile
    from .operator import TransformChain, save_chain

    if args.count < 1:
        raise UsageError("--count must be >= 1")
    config = _load_config(args)
    _prepare_out(args, config)
    seed = config["run"]["seed"]
    rng = np.random.default_rng(seed)

    if args.kind == "affine6":
        grid = PatchGrid(11, 11, "zero")
        pairs, truth = synth_affine_batch(args.count, rng, grid, blur=args.blur)
        chain = affine_chain(grid)
        header = "translate_h,translate_v,rotate,scale_h,scale_v,skew_h"
        geometry = (11, 11, 11, 11)
    elif args.kind == "translate1d":
        n = 16
        fixed = (args.shift, 0.0) if args.shift is not None else None
        pairs, truth = synth_translation_batch(
            args.count, rng, width=n, height=1, shift_range=3.0,
            blur=args.blur, fixed_shift=fixed,
        )
        truth = truth[:, :1]
        chain = TransformChain((circular_translation_generator(n),))
        header = "shift"
        geometry = (n, 1, 8, 1)
    elif args.kind in ("translate2d", "translate_brightness"):
        brightness = 0.3 if args.kind == "translate_brightness" else 0.0
        pairs, truth = synth_translation_batch(
            args.count, rng, width=13, height=13, shift_range=1.5,
            blur=args.blur, brightness_range=brightness,
            fixed_shift=(args.shift, 0.0) if args.shift is not None else None,
        )
        chain = spectral_translation_chain(13, 13)
        header = "dx,dy" + (",brightness" if brightness else "")
        geometry = (13, 13, 9, 9)
    else:
        raise UsageError(f"unknown synth kind {args.kind!r}")

    pw, ph, mw, mh = geometry
    data = np.stack([np.stack([p.x_src, p.x_tgt]) for p in pairs])
    pf = PairsFile(pw, ph, mw, mh, data)
    pf.write(os.path.join(args.out, "pairs.lgp"))
    with open(os.path.join(args.out, "truth.csv"), "w") as fh:
        fh.write(header + "\n")
        for row in np.atleast_2d(truth):
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    save_chain(os.path.join(args.out, "operators.lgt"), chain)
    print(f"wrote {pf.count} pairs ({pw}x{ph}, mask {mw}x{mh}) to {args.out}")
    return EXIT_OK


# --- infer ------------------------------------------------------------------


def cmd_infer(args):
    from .data_eval import PairsFile, psnr
    from .inference import coefficient_recovery_stats, infer_batch
    from .operator import apply_chain, load_chain

    config = _load_config(args)
    _prepare_out(args, config)
    pf = PairsFile.read(args.pairs)
    chain = load_chain(args.ops, expect_n=pf.n)
    mask = pf.mask_vector()
    energy_config = config.energy_config(mask)
    policy = config.inference_policy(
        seed=config["run"]["seed"],
        blur_mode="frozen_zero" if args.no_blur else None,
        restarts=args.restarts,
    )
    spec = config.minimize_spec()
    pairs = pf.pairs()
    results = infer_batch(chain, pairs, energy_config, policy, spec,
                          threads=config["run"]["threads"])

    k = len(chain)
    ok = 0
    rows = []
    inferred = np.zeros((pf.count, k))
    for i, res in enumerate(results):
        if res is None:
            rows.append(f"{i}," + ",".join(["nan"] * (2 * k + 2)) + ",0")
            continue
        ok += 1
        recon, _ = apply_chain(chain, res.coeffs, pairs[i].x_src)
        score = psnr(recon, pairs[i].x_tgt, mask)
        inferred[i] = res.coeffs.mu
        rows.append(
            f"{i},"
            + ",".join(_fmt(v) for v in res.coeffs.mu)
            + ","
            + ",".join(_fmt(v) for v in res.coeffs.sigma)
            + f",{_fmt(res.energy)},{score:.6f},{int(res.converged)}"
        )
    header = (
        "pair,"
        + ",".join(f"mu_{j}" for j in range(k))
        + ","
        + ",".join(f"sigma_{j}" for j in range(k))
        + ",energy,psnr,converged"
    )
    with open(os.path.join(args.out, "coefficients.csv"), "w") as fh:
        fh.write(header + "\n")
        fh.write("\n".join(rows) + "\n")
    print(f"inferred {ok}/{pf.count} pairs -> {args.out}/coefficients.csv")

    if args.truth:
        truth = np.loadtxt(args.truth, delimiter=",", skiprows=1, ndmin=2)
        if truth.shape[1] == k:
            periods = [2.0 * np.pi if j == 2 and k == 6 else None for j in range(k)]
            stats = coefficient_recovery_stats(truth, inferred, periods=periods)
            print(f"recovery: {stats}")
        else:
            log.warning("truth has %d columns, chain has %d operators; skipping recovery",
                        truth.shape[1], k)
    return EXIT_OK if ok >= 1 else EXIT_NUMERIC


# --- train ------------------------------------------------------------------


def cmd_train(args):
    from .affine import PatchGrid, affine_chain, spectral_translation_chain
    from .data_eval import PairsFile
    from .learning import TrainSpec, train
    from .operator import load_chain

    config = _load_config(args)
    _prepare_out(args, config)
    pf = PairsFile.read(args.pairs)
    seed = config["run"]["seed"]
    tr = config["train"]
    n_ops = args.k if args.k is not None else tr["n_ops"]
    epochs = args.epochs if args.epochs is not None else tr["epochs"]

    fixed = ()
    preset = {}
    if args.fix_translations:
        if n_ops < 2:
            raise UsageError("--fix-translations needs at least 2 operators")
        if args.boundary == "spectral":
            tchain = spectral_translation_chain(pf.patch_w, pf.patch_h)
        else:
            grid = PatchGrid(pf.patch_w, pf.patch_h, args.boundary)
            tchain = affine_chain(grid, kinds=("translate_h", "translate_v"))
        preset = {0: tchain.ops[0], 1: tchain.ops[1]}
        fixed = (0, 1)

    spec = TrainSpec(
        n_ops=n_ops,
        fixed_ops=fixed,
        batch_size=min(tr["batch_size"], pf.count),
        epochs=epochs,
        seed=seed,
        init_scale=tr["init_scale"],
        mstep_max_iters=tr["mstep_max_iters"],
    )
    pool = pf.pairs()

    def source(epoch):
        rng = np.random.default_rng([seed, epoch, 0x5EED])
        replace = spec.batch_size > len(pool)
        idx = rng.choice(len(pool), size=spec.batch_size, replace=replace)
        return [pool[i] for i in idx]

    initial_chain = None
    start_epoch = 0
    if args.resume:
        found = sorted(
            f for f in os.listdir(args.out)
            if re.fullmatch(r"checkpoint_\d{4}\.lgt", f)
        )
        if found:
            start_epoch = int(found[-1][11:15])
            initial_chain = load_chain(os.path.join(args.out, found[-1]), expect_n=pf.n)
            log.info("resuming from %s (epoch %d)", found[-1], start_epoch)

    mask = pf.mask_vector()
    chain, history = train(
        source,
        config.energy_config(mask),
        spec,
        preset_ops=preset,
        policy=config.inference_policy(seed),
        initial_chain=initial_chain,
        start_epoch=start_epoch,
        checkpoint_dir=args.out,
        threads=config["run"]["threads"],
        infer_spec=config.minimize_spec(),
    )
    mode = "a" if args.resume and start_epoch > 0 else "w"
    log_path = os.path.join(args.out, "train_log.csv")
    with open(log_path, mode) as fh:
        text = history.csv()
        fh.write(text if mode == "w" else text.split("\n", 1)[1] + "")
    print(f"trained {epochs} epoch(s), checkpoints in {args.out}")
    return EXIT_OK


# --- eval -------------------------------------------------------------------


def cmd_eval(args):
    from .data_eval import MODEL_IDS, PairsFile, evaluate_models

    config = _load_config(args)
    _prepare_out(args, config)
    pf = PairsFile.read(args.pairs)
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    for m in models:
        if m not in MODEL_IDS:
            raise UsageError(f"unknown model {m!r}; choose from {', '.join(MODEL_IDS)}")
    model_files = {}
    for item in args.model_file or []:
        name, _, path = item.partition("=")
        if not path:
            raise UsageError(f"--model-file expects name=path, got {item!r}")
        model_files[name] = path

    run = evaluate_models(
        pf,
        models,
        model_files=model_files,
        config=config.energy_config(),
        boundary=args.boundary,
        radius=args.radius,
        threads=config["run"]["threads"],
        spec=config.minimize_spec(),
    )
    with open(os.path.join(args.out, "summary.csv"), "w") as fh:
        fh.write(run.summary_csv())
    with open(os.path.join(args.out, "per_pair.csv"), "w") as fh:
        fh.write("pair," + ",".join(models) + "\n")
        for i in range(pf.count):
            fh.write(
                f"{i}," + ",".join(f"{run.scores[m][i]:.6f}" for m in models) + "\n"
            )
    for name, mean, med, p10, p90 in run.summary():
        print(f"{name:28s} mean {mean:6.2f}  median {med:6.2f}  p10 {p10:6.2f}  p90 {p90:6.2f}")
    return EXIT_OK


# --- gradcheck ---------------------------------------------------------------


def cmd_gradcheck(args):
    from .energy import gradcheck

    config = _load_config(args)
    if args.out:
        _prepare_out(args, config)
    report = gradcheck(
        n_instances=args.instances,
        seed=config["run"]["seed"],
        h=args.h,
        log=print if args.verbose else None,
    )
    print(
        f"gradcheck: {report.n_instances} instances, {report.n_components} components, "
        f"max relative error {report.max_rel_err:.3e}"
    )
    print("PASS" if report.passed else "FAIL (threshold 1e-5)")
    return EXIT_OK if report.passed else EXIT_NUMERIC


# --- entry point --------------------------------------------------------------


def _build_parser():
    p = _Parser(prog="lgt", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="INI config file (flat key = value with sections)")
        sp.add_argument("--set", action="append", metavar="SEC.KEY=VAL",
                        help="override one config value (repeatable)")
        sp.add_argument("--seed", type=int, help="run seed (overrides config)")
        sp.add_argument("--threads", type=int, help="worker cap (overrides config)")
        if out_required:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("synth", help="generate synthetic pair batches")
    sp.add_argument("--kind", required=True, choices=_SYNTH_KINDS)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--blur", type=float, default=1.7, help="texture smoothness")
    sp.add_argument("--shift", type=float, help="pin the (horizontal) shift instead of sampling")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("infer", help="estimate coefficients for a pairs file")
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--ops", required=True, help="LGT1 operator file")
    sp.add_argument("--no-blur", action="store_true", help="pin sigma = 0 (no adaptive smoothing)")
    sp.add_argument("--restarts", type=int, default=None)
    sp.add_argument("--truth", help="truth CSV from synth; prints recovery stats")
    common(sp)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("train", help="learn operators from a pairs file")
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--k", type=int, help="number of operators")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--fix-translations", action="store_true",
                    help="pre-code operators 0,1 as whole-patch translations")
    sp.add_argument("--boundary", default="zero", choices=("zero", "periodic", "spectral"))
    sp.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="model comparison table")
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--models", required=True, help="comma-separated model names")
    sp.add_argument("--model-file", action="append", metavar="NAME=PATH",
                    help="operator file for a learned model (repeatable)")
    sp.add_argument("--boundary", default="zero", choices=("zero", "periodic", "spectral"))
    sp.add_argument("--radius", type=int, default=None, help="block-matching search radius")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    sp.add_argument("--instances", type=int, default=50)
    sp.add_argument("--h", type=float, default=1e-5)
    sp.add_argument("--verbose", action="store_true")
    sp.add_argument("--out", help="optional output directory")
    common(sp, out_required=False)
    sp.set_defaults(func=cmd_gradcheck)

    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    from .inference import AllRestartsFailed
    from .operator import NonDiagonalizableError, OverflowGuardError
    from .optimize import NonFiniteObjective

    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonDiagonalizableError, OverflowGuardError, AllRestartsFailed, NonFiniteObjective) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, IsADirectoryError, PermissionError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
