"""Command-line entry point: train / attack / eval / sweep / verify / gen-data.

Resolution order for every setting: built-in default < config file < flag.
The fully resolved configuration, seed, version, paths and duration are
written atomically to a JSON manifest next to every output; `rselab rerun
--manifest M` replays a run and reproduces its outputs byte-for-byte within
one build.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .attacks import FAMILIES, AttackConfig, run_attack
from .checkpoint import load_checkpoint, save_checkpoint
from .config import parse_kv, reject_unknown
from .data import Dataset, gen_synthetic, load_cifar10, parse_cifar_batch, serialize_cifar_batch
from .defense import (DEFENSE_KINDS, EnsembleConfig, TrainConfig, desk_config,
                      make_decision_fn, train, train_adversarial,
                      train_distilled, train_robust_brelu)
from .errors import ConfigurationError, RselabError, UsageError
from .evaluate import (DEFAULT_C_GRID, DEFAULT_ENSEMBLE_GRID, DEFAULT_NOISE_LEVELS,
                       ablation_models, ablation_modes, accuracy_under_attack,
                       attack_dataset, clean_accuracy, per_image_csv,
                       sweep_ensemble, sweep_noise, theory_csv)
from .layers import build_model
from .rng import RngStream
from .tensor import grad_check
from .theory import (QuadraticLoss, check_jensen, check_taylor_network,
                     check_taylor_quadratic)

# Built-in named configs, selectable as --config <name>.
NAMED_CONFIGS = {
    "rse_default": {"defense": "rse", "sigma_init": "0.2", "sigma_inner": "0.1"},
    "undefended": {"defense": "none", "sigma_init": "0", "sigma_inner": "0"},
}

_TRAIN_KEYS = ("defense", "epochs", "batch_size", "lr", "lr_decay",
               "decay_epochs", "momentum", "weight_decay", "sigma_init",
               "sigma_inner", "aug_sigma", "temperature", "image_size",
               "classes", "n_per_class", "data_seed", "activation")
_TRAIN_DEFAULTS = {
    "defense": "none", "epochs": 10, "batch_size": 50, "lr": 0.01,
    "lr_decay": 0.1, "decay_epochs": "", "momentum": 0.9, "weight_decay": 0.0,
    "sigma_init": 0.2, "sigma_inner": 0.1, "aug_sigma": 0.05,
    "temperature": 40.0, "image_size": 16, "classes": 10, "n_per_class": 200,
    "data_seed": 7, "activation": "relu",
}


def _resolve(defaults: dict, config_path: str | None, flags: dict,
             allowed) -> dict:
    """defaults < config file < flags; unknown config keys rejected."""
    merged = dict(defaults)
    if config_path:
        if config_path in NAMED_CONFIGS:
            file_cfg = dict(NAMED_CONFIGS[config_path])
        else:
            try:
                with open(config_path, encoding="utf-8") as fh:
                    file_cfg = parse_kv(fh.read())
            except OSError as e:
                raise UsageError(f"cannot read config '{config_path}': {e}") from e
        reject_unknown(file_cfg, allowed, f"config '{config_path}'")
        merged.update(file_cfg)
    for k, v in flags.items():
        if v is not None:
            merged[k] = v
    return merged


def _coerce_like(resolved: dict, defaults: dict) -> dict:
    """String config values take the type of their built-in default."""
    out = {}
    for k, v in resolved.items():
        ref = defaults.get(k)
        if isinstance(v, str) and not isinstance(ref, str) and ref is not None:
            try:
                v = type(ref)(v)
            except ValueError as e:
                raise ConfigurationError(f"key '{k}': {e}") from e
        out[k] = v
    return out


def _write_atomic(path: str, data: bytes):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _manifest_path(out_path: str) -> str:
    return f"{out_path}.manifest.json"


def _write_manifest(subcommand: str, out_path: str, resolved: dict, seed: int,
                    inputs: list, outputs: list, t0: float):
    manifest = {
        "subcommand": subcommand,
        "config": {k: v for k, v in sorted(resolved.items())},
        "seed": seed,
        "version": __version__,
        "inputs": inputs,
        "outputs": outputs,
        "duration_seconds": round(time.time() - t0, 3),
    }
    path = _manifest_path(out_path)
    _write_atomic(path, (json.dumps(manifest, indent=2) + "\n").encode())
    return path


def _load_data(spec: str, cfg: dict, split: str) -> Dataset:
    """--data 'synthetic', a CIFAR batch file, or a CIFAR directory."""
    if spec == "synthetic":
        return gen_synthetic(int(cfg.get("data_seed", 7)),
                             int(cfg.get("n_per_class", 200)),
                             int(cfg.get("classes", 10)),
                             int(cfg.get("image_size", 16)), split=split)
    if os.path.isdir(spec):
        tr, te = load_cifar10(spec)
        return tr if split == "train" else te
    try:
        with open(spec, "rb") as fh:
            buf = fh.read()
    except OSError as e:
        raise UsageError(f"cannot read data '{spec}': {e}") from e
    images, labels = parse_cifar_batch(buf, source=spec)
    return Dataset(images=images, labels=labels, classes=10, split=split,
                   provenance=spec)


def _train_model(cfg: dict, data: Dataset, seed: int):
    decay = tuple(int(e) for e in str(cfg["decay_epochs"]).split(",") if e.strip())
    tc = TrainConfig(epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]),
                     lr=float(cfg["lr"]), lr_decay=float(cfg["lr_decay"]),
                     decay_epochs=decay, momentum=float(cfg["momentum"]),
                     weight_decay=float(cfg["weight_decay"]), seed=seed,
                     defense=str(cfg["defense"]), sigma_init=float(cfg["sigma_init"]),
                     sigma_inner=float(cfg["sigma_inner"]),
                     aug_sigma=float(cfg["aug_sigma"]),
                     temperature=float(cfg["temperature"]))
    tc.validate()
    shape = data.images.shape[1:]
    noisy = tc.defense == "rse"
    si = tc.sigma_init if noisy else 0.0
    sn = tc.sigma_inner if noisy else 0.0
    arch = desk_config(shape, data.classes, si, sn,
                       activation=str(cfg["activation"]))
    if tc.defense in ("none", "rse"):
        model = build_model(arch, RngStream(seed))
        return train(model, data, tc)
    if tc.defense in ("adv_train_1", "adv_train_2"):
        model = build_model(arch, RngStream(seed))
        model, _ = train(model, data, replace(tc, defense="none"))
        return train_adversarial(model, data, tc)
    if tc.defense == "robust_brelu":
        arch = desk_config(shape, data.classes, 0.0, 0.0, activation="brelu")
        return train_robust_brelu(arch, data, tc)
    if tc.defense == "distill":
        return train_distilled(arch, data, tc)
    raise ConfigurationError(f"unknown defense '{tc.defense}'")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    t0 = time.time()
    cfg = _resolve(_TRAIN_DEFAULTS, args.config, {
        "defense": args.defense, "epochs": args.epochs, "lr": args.lr,
        "sigma_init": args.sigma_init, "sigma_inner": args.sigma_inner,
        "data_seed": args.data_seed,
    }, _TRAIN_KEYS)
    cfg = _coerce_like(cfg, _TRAIN_DEFAULTS)
    data = _load_data(args.data, cfg, "train")
    model, trace = _train_model(cfg, data, args.seed)
    save_checkpoint(model, args.out)
    trace_path = f"{args.out}.loss.csv"
    manifest = _manifest_path(args.out)
    lines = ["epoch,mean_loss"]
    lines += [f"{i},{loss:.6f}" for i, loss in enumerate(trace)]
    lines.append(f"#manifest={os.path.basename(manifest)}")
    _write_atomic(trace_path, ("\n".join(lines) + "\n").encode())
    _write_manifest("train", args.out, {**cfg, "data": args.data, "out": args.out},
                    args.seed, [args.data], [args.out, trace_path], t0)
    print(f"trained defense={cfg['defense']} epochs={cfg['epochs']} "
          f"final_loss={trace[-1]:.4f} -> {args.out}")
    return 0


_ATTACK_DEFAULTS = {
    "attack": "cw", "c": 0.1, "eps": 8.0 / 256.0, "alpha": 2.0 / 256.0,
    "steps": 10, "kappa": 0.0, "cw_steps": 100, "cw_lr": 0.02, "eot": 1,
    "ensemble_n": 10, "image_size": 16, "classes": 10, "n_per_class": 200,
    "data_seed": 7, "limit": 0,
}
_ATTACK_KEYS = tuple(_ATTACK_DEFAULTS)


def _attack_config(cfg: dict, seed: int, targeted=None) -> AttackConfig:
    ac = AttackConfig(family=str(cfg["attack"]), epsilon=float(cfg["eps"]),
                      alpha=float(cfg["alpha"]), steps=int(cfg["steps"]),
                      c=float(cfg["c"]), kappa=float(cfg["kappa"]),
                      cw_steps=int(cfg["cw_steps"]), cw_lr=float(cfg["cw_lr"]),
                      eot_samples=int(cfg["eot"]), targeted=targeted, seed=seed)
    ac.validate()
    return ac


def cmd_attack(args) -> int:
    t0 = time.time()
    cfg = _resolve(_ATTACK_DEFAULTS, args.config, {
        "attack": args.attack, "c": args.c, "eps": args.eps,
        "kappa": args.kappa, "steps": args.steps, "eot": args.eot,
        "ensemble_n": args.ensemble_n, "limit": args.limit,
        "data_seed": args.data_seed,
    }, _ATTACK_KEYS)
    cfg = _coerce_like(cfg, _ATTACK_DEFAULTS)
    model = load_checkpoint(args.ckpt)
    data = _load_data(args.data, cfg, "test")
    if int(cfg["limit"]):
        data = data.subset(np.arange(min(int(cfg["limit"]), len(data))))
    acfg = _attack_config(cfg, args.seed, args.targeted)
    ens = EnsembleConfig(n=int(cfg["ensemble_n"]), seed=args.seed)
    clean_ok, results = attack_dataset(model, data, acfg, ens,
                                       workers=args.workers)
    dec = make_decision_fn(model, ens)
    clean_pred = dec(data.images)
    strength = acfg.c if acfg.family == "cw" else acfg.epsilon
    rows = [(i, int(data.labels[i]), int(clean_pred[i]), acfg.family, strength, r)
            for i, r in enumerate(results)]
    manifest = _manifest_path(args.out)
    _write_atomic(args.out,
                  per_image_csv(rows, os.path.basename(manifest)).encode())
    _write_manifest("attack", args.out,
                    {**cfg, "ckpt": args.ckpt, "data": args.data,
                     "targeted": args.targeted, "out": args.out,
                     "workers": args.workers},
                    args.seed, [args.ckpt, args.data], [args.out], t0)
    acc = float(np.mean(clean_ok & ~np.array([r.success for r in results])))
    dists = [r.l2_distortion for r in results if r.success]
    mean_d = float(np.mean(dists)) if dists else float("nan")
    print(f"accuracy-under-attack {acc:.4f} mean-distortion {mean_d:.4f} "
          f"success-rate {np.mean([r.success for r in results]):.4f}")
    return 0


def _parse_grid(text: str, cast=float):
    try:
        vals = [cast(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"bad grid '{text}': {e}") from e
    if not vals:
        raise UsageError(f"empty grid '{text}'")
    return vals


def cmd_eval(args) -> int:
    t0 = time.time()
    cfg = _resolve(_ATTACK_DEFAULTS, args.config,
                   {"eot": args.eot, "ensemble_n": args.ensemble_n,
                    "limit": args.limit, "data_seed": args.data_seed},
                   _ATTACK_KEYS)
    cfg = _coerce_like(cfg, _ATTACK_DEFAULTS)
    model = load_checkpoint(args.ckpt)
    data = _load_data(args.data, cfg, "test")
    if int(cfg["limit"]):
        data = data.subset(np.arange(min(int(cfg["limit"]), len(data))))
    grid = _parse_grid(args.c_grid) if args.c_grid else list(DEFAULT_C_GRID)
    acfg = _attack_config(cfg, args.seed)
    ens = EnsembleConfig(n=int(cfg["ensemble_n"]), seed=args.seed)
    report = accuracy_under_attack(model, data, acfg, grid, ens,
                                   defense=args.label, workers=args.workers)
    manifest = _manifest_path(args.out)
    _write_atomic(args.out, report.to_csv(os.path.basename(manifest)).encode())
    _write_manifest("eval", args.out,
                    {**cfg, "ckpt": args.ckpt, "data": args.data,
                     "c_grid": ",".join(str(c) for c in grid),
                     "label": args.label, "out": args.out,
                     "workers": args.workers},
                    args.seed, [args.ckpt, args.data], [args.out], t0)
    print(f"clean accuracy {report.clean_accuracy:.4f}; "
          f"{len(report.rows)} c-grid rows -> {args.out}")
    return 0


def cmd_sweep(args) -> int:
    t0 = time.time()
    cfg = _resolve({**_TRAIN_DEFAULTS, **_ATTACK_DEFAULTS}, args.config,
                   {"eot": args.eot, "ensemble_n": args.ensemble_n,
                    "limit": args.limit, "data_seed": args.data_seed,
                    "epochs": args.epochs},
                   tuple(_TRAIN_KEYS) + _ATTACK_KEYS)
    cfg = _coerce_like(cfg, {**_TRAIN_DEFAULTS, **_ATTACK_DEFAULTS})
    test = _load_data(args.data, cfg, "test")
    if int(cfg["limit"]):
        test = test.subset(np.arange(min(int(cfg["limit"]), len(test))))
    ens = EnsembleConfig(n=int(cfg["ensemble_n"]), seed=args.seed)
    lines = []

    if args.what == "ensemble":
        model = load_checkpoint(args.ckpt)
        grid = _parse_grid(args.n, int) if args.n else list(DEFAULT_ENSEMBLE_GRID)
        lines.append("n,accuracy")
        for n, acc in sweep_ensemble(model, test, grid, seed=args.seed):
            lines.append(f"{n},{acc:.6f}")
    elif args.what == "c":
        model = load_checkpoint(args.ckpt)
        grid = _parse_grid(args.c_grid) if args.c_grid else list(DEFAULT_C_GRID)
        report = accuracy_under_attack(model, test, _attack_config(cfg, args.seed),
                                       grid, ens, defense=args.label,
                                       workers=args.workers)
        lines.append(report.to_csv().rstrip("\n"))
    elif args.what in ("noise", "ablation"):
        train_data = _load_data(args.data, cfg, "train")
        tc = TrainConfig(epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]),
                         lr=float(cfg["lr"]), seed=args.seed,
                         sigma_init=float(cfg["sigma_init"]),
                         sigma_inner=float(cfg["sigma_inner"]))
        grid = _parse_grid(args.c_grid) if args.c_grid else list(DEFAULT_C_GRID)
        acfg = _attack_config(cfg, args.seed)
        shape = train_data.images.shape[1:]
        if args.what == "noise":
            levels = DEFAULT_NOISE_LEVELS
            if args.levels:
                levels = [tuple(float(v) for v in pair.split(":"))
                          for pair in args.levels.split(",")]
            reports = sweep_noise(levels, train_data, test, tc, acfg, grid, ens,
                                  input_shape=shape, classes=train_data.classes,
                                  workers=args.workers)
            lines.append(",".join(REPORT_HEADER_STR))
            for (si, sn), rep in reports:
                for body in rep.to_csv().splitlines()[1:]:
                    lines.append(body)
        else:
            models = ablation_models(train_data, tc, input_shape=shape,
                                     classes=train_data.classes)
            reports = ablation_modes(models, test, acfg, grid, ens,
                                     workers=args.workers)
            lines.append(",".join(REPORT_HEADER_STR))
            for mode, rep in reports.items():
                for body in rep.to_csv().splitlines()[1:]:
                    lines.append(body)
    manifest = _manifest_path(args.out)
    lines.append(f"#manifest={os.path.basename(manifest)}")
    _write_atomic(args.out, ("\n".join(lines) + "\n").encode())
    _write_manifest("sweep", args.out,
                    {**cfg, "what": args.what, "data": args.data,
                     "ckpt": args.ckpt, "n": args.n, "c_grid": args.c_grid,
                     "levels": args.levels, "label": args.label,
                     "out": args.out, "workers": args.workers},
                    args.seed, [args.data], [args.out], t0)
    print(f"sweep {args.what} -> {args.out}")
    return 0


REPORT_HEADER_STR = ("c", "accuracy", "mean_l2_distortion", "success_rate",
                     "n_images", "defense", "attack", "ensemble_n", "seed")


def _verify_grad(seed: int):
    from .tensor import Tensor, matmul, mul, relu, sum_reduce

    rng = RngStream(seed, 1)
    reports = []
    for trial in range(3):
        w1 = rng.gaussian((8, 6)) * 0.5
        w2 = rng.gaussian((4, 8)) * 0.5
        x0 = Tensor(rng.gaussian((2, 6)), dtype=np.float64)

        def f(x, w1=w1, w2=w2):
            h = relu(matmul(x, Tensor(w1.astype(np.float64)), transpose_b=True))
            out = matmul(h, Tensor(w2.astype(np.float64)), transpose_b=True)
            return sum_reduce(mul(out, out))

        rep = grad_check(f, [x0], tol=1e-4)
        reports.append((f"grad.net{trial}", rep.max_rel_err, 1e-4, rep.passed))
    return reports


def cmd_verify(args) -> int:
    t0 = time.time()
    rows = []
    checks = ("grad", "jensen", "taylor") if args.check == "all" else (args.check,)
    failed = False
    for check in checks:
        if check == "grad":
            for name, err, tol, ok in _verify_grad(args.seed):
                rows.append(_Row(name, err, tol, tol, "pass" if ok else "fail",
                                 args.samples))
                failed |= not ok
        elif check == "jensen":
            model, data = _verify_model(args.seed)
            rep = check_jensen(model, data.images[:64], data.labels[:64],
                               samples=args.samples,
                               rng=RngStream(args.seed, 21))
            rows.append(rep)
            failed |= rep.status == "fail"
        elif check == "taylor":
            reports = check_taylor_quadratic(np.diag([1.0, 2.0, 3.0]),
                                             np.zeros(3), (0.1,),
                                             samples=args.samples,
                                             rng=RngStream(args.seed, 23))
            for rep in reports:
                rows.append(rep)
                failed |= rep.status == "fail"
                failed |= args.strict and rep.status == "inconclusive"
        else:
            raise UsageError(f"unknown check '{check}'")
    manifest = _manifest_path(args.out)
    _write_atomic(args.out,
                  theory_csv(rows, os.path.basename(manifest)).encode())
    _write_manifest("verify", args.out,
                    {"check": args.check, "samples": args.samples,
                     "strict": args.strict, "out": args.out},
                    args.seed, [], [args.out], t0)
    for r in rows:
        print(f"{r.check}: {r.status} (lhs={r.lhs:.6g} rhs={r.rhs:.6g})")
    return 3 if failed else 0


class _Row:
    """Ad-hoc report row matching TheoryCheckReport's CSV fields."""

    def __init__(self, check, lhs, rhs, tolerance, status, samples):
        self.check, self.lhs, self.rhs = check, lhs, rhs
        self.tolerance, self.status, self.samples = tolerance, status, samples


def _verify_model(seed: int):
    """Small trained RSE model for the Jensen check."""
    data = gen_synthetic(seed, 20, 4, 8, split="train")
    model = build_model(desk_config((3, 8, 8), 4, 0.2, 0.1), RngStream(seed))
    model, _ = train(model, data, TrainConfig(epochs=2, batch_size=20,
                                              defense="rse", seed=seed))
    return model, data


def cmd_gen_data(args) -> int:
    t0 = time.time()
    ds = gen_synthetic(args.seed, args.n_per_class, args.classes, 32,
                       split=args.split)
    buf = serialize_cifar_batch(ds.images, ds.labels)
    _write_atomic(args.out, buf)
    _write_manifest("gen-data", args.out,
                    {"n_per_class": args.n_per_class, "classes": args.classes,
                     "split": args.split, "out": args.out},
                    args.seed, [], [args.out], t0)
    print(f"wrote {len(ds)} records -> {args.out}")
    return 0


def cmd_rerun(args) -> int:
    try:
        with open(args.manifest, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read manifest '{args.manifest}': {e}") from e
    sub = manifest["subcommand"]
    cfg = manifest["config"]
    argv = [sub]
    # Per subcommand: positional-style flags replayed verbatim, then extra
    # flag-only settings; everything else goes through a temp config file.
    plans = {
        "train": (("data", "out"), ()),
        "attack": (("ckpt", "data", "out"), ("targeted", "workers")),
        "eval": (("ckpt", "data", "out"), ("c_grid", "label", "workers")),
        "sweep": (("what", "data", "out"),
                  ("ckpt", "n", "c_grid", "levels", "label", "workers")),
        "verify": (("out",), ("check", "samples", "strict")),
        "gen-data": (("out",), ("n_per_class", "classes", "split")),
    }
    if sub not in plans:
        raise UsageError(f"manifest subcommand '{sub}' is not replayable")
    flags, extras = plans[sub]
    argv += ["--seed", str(manifest["seed"])]
    if args.out:
        cfg = {**cfg, "out": args.out}
    for key in flags:
        if cfg.get(key) is not None:
            argv += [f"--{key.replace('_', '-')}", str(cfg[key])]
    for extra in extras:
        if extra in cfg and cfg[extra] not in (None, False):
            flag = f"--{extra.replace('_', '-')}"
            if cfg[extra] is True:
                argv.append(flag)
            else:
                argv += [flag, str(cfg[extra])]
    rest = {k: v for k, v in sorted(cfg.items())
            if k not in flags and k not in extras and v is not None}
    cfg_path = f"{cfg['out']}.rerun.cfg"
    if sub in ("train", "attack", "eval", "sweep"):
        _write_atomic(cfg_path,
                      "".join(f"{k}={v}\n" for k, v in rest.items()).encode())
        argv += ["--config", cfg_path]
    try:
        return main(argv)
    finally:
        if os.path.exists(cfg_path):
            os.remove(cfg_path)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rselab",
                                description="noise-ensemble robustness lab")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--config", default=None)
        sp.add_argument("--data", default="synthetic")
        sp.add_argument("--data-seed", dest="data_seed", type=int, default=None)
        sp.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model, write a checkpoint")
    common(t)
    t.add_argument("--defense", choices=DEFENSE_KINDS, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--sigma-init", dest="sigma_init", type=float, default=None)
    t.add_argument("--sigma-inner", dest="sigma_inner", type=float, default=None)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", help="attack a checkpoint, write per-image CSV")
    common(a)
    a.add_argument("--ckpt", required=True)
    a.add_argument("--attack", choices=FAMILIES, default=None)
    a.add_argument("--c", type=float, default=None)
    a.add_argument("--eps", type=float, default=None)
    a.add_argument("--kappa", type=float, default=None)
    a.add_argument("--steps", type=int, default=None)
    a.add_argument("--eot", type=int, default=None)
    a.add_argument("--ensemble-n", dest="ensemble_n", type=int, default=None)
    a.add_argument("--targeted", type=int, default=None)
    a.add_argument("--limit", type=int, default=None)
    a.set_defaults(func=cmd_attack)

    e = sub.add_parser("eval", help="accuracy/distortion curve over the c grid")
    common(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--c-grid", dest="c_grid", default=None)
    e.add_argument("--eot", type=int, default=None)
    e.add_argument("--ensemble-n", dest="ensemble_n", type=int, default=None)
    e.add_argument("--limit", type=int, default=None)
    e.add_argument("--label", default="model")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="noise/ensemble/c/ablation sweeps")
    common(s)
    s.add_argument("--what", choices=("noise", "ensemble", "c", "ablation"),
                   required=True)
    s.add_argument("--ckpt", default=None)
    s.add_argument("--n", default=None, help="ensemble sizes, comma-separated")
    s.add_argument("--c-grid", dest="c_grid", default=None)
    s.add_argument("--levels", default=None,
                   help="noise levels as si:sn pairs, comma-separated")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--eot", type=int, default=None)
    s.add_argument("--ensemble-n", dest="ensemble_n", type=int, default=None)
    s.add_argument("--limit", type=int, default=None)
    s.add_argument("--label", default="model")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="gradient / Jensen / Taylor checks")
    v.add_argument("--check", choices=("grad", "jensen", "taylor", "all"),
                   default="all")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--samples", type=int, default=1000)
    v.add_argument("--strict", action="store_true")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("gen-data", help="write a synthetic CIFAR-format batch")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-per-class", dest="n_per_class", type=int, default=100)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--split", choices=("train", "test"), default="train")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("rerun", help="replay a run from its manifest")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_rerun)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except RselabError as e:
        print(f"rselab: error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
