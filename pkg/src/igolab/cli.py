"""Experiment driver: ``igolab <command> --config PATH [--seed N] [--out DIR]``.

Configs are JSON. Every run writes ``resolved_config.json`` with all defaults
filled in, a digest of its contents and a build fingerprint;
``igolab replay --config resolved_config.json`` regenerates the same files.
"""
import argparse
import copy
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._rng import derive_seed, make_rng
from .downstream import (Generator, MeasurementModel, config_hash, csgm_recover, lipschitz_estimate,
                         ppower, range_expansion_probe, sample_complexity_sweep, spiked_covariance,
                         weight_divergence)
from .exceptions import ConfigError, IgoError, VersionMismatch
from .io import read_csv, write_csv
from .sampling import SamplerConfig, probability_flow_sample, reverse_em, write_samples
from .score import IgoConfig, ScoreNet, train
from .sde import EmConfig, make_process, simulate, simulate_ensemble

COMMANDS = ("simulate", "train", "sample", "gpca", "csgm", "sweep", "probe", "metrics")

DEFAULTS = {
    "command": None,
    "seed": 0,
    "output_dir": "out",
    "checkpoint": None,
    "process": {"name": "ou", "dim": 1, "horizon": 1.0, "params": {}},
    "simulate": {"x0": [0.0], "dt": 1e-3, "capture_times": [0.5], "n_paths": 1},
    "data": {"kind": "gaussian_mixture", "centers": [[2.0, 2.0], [-2.0, -2.0]], "std": 0.5,
             "n": 4000, "path": None},
    "model": {"hidden": 64, "depth": 3, "tap_layer": None, "activation": "silu",
              "time_embed_dim": 16, "encoder_layers": 1},
    "igo": {"alpha": 0.5, "lambda_schedule": "constant", "tau_rule": "half_t", "tau_list": [],
            "batch_size": 128, "steps": 2000, "lr": 1e-3, "beta1": 0.9, "beta2": 0.999,
            "eps": 1e-8, "t_min": 1e-3, "dt": 1e-3, "kernel": "gaussian",
            "use_regularizer": True, "log_interval": 100, "checkpoint_every": 0},
    "sampler": {"method": "reverse_em", "n_samples": 1000, "n_steps": 500, "t_start": None,
                "t_min": 1e-3, "pathway": "final", "rtol": 1e-5, "atol": 1e-5,
                "denoise_last": True},
    "downstream": {
        "generator": {"mode": "linear_rig", "n": 32, "k": 4, "orthonormal": True, "radius": 10.0,
                      "t": 1e-3},
        "m": 16, "m_list": [4, 8, 16, 32], "trials": 5, "noise_std": 0.0, "iters": 50,
        "steps": 500, "lr": 1.0, "restarts": 1, "step_rule": "backtracking",
        "projection_steps": 100, "projection_lr": 1e-3, "beta": 4.0, "pca_samples": 2000,
        "n_samples": 2000, "n_test": 200, "n_pairs": 10000,
    },
}

# Sections whose contents are free-form (no unknown-key checking below them).
_FREE = {("process", "params")}


def build_fingerprint():
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    root = Path(__file__).resolve().parent
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:16]}"


def _merge(defaults, given, path=()):
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        if key not in defaults:
            where = ".".join(path + (key,))
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict) and path + (key,) not in _FREE:
            if not isinstance(val, dict):
                raise ConfigError(f"config key {'.'.join(path + (key,))!r} must be a mapping")
            out[key] = _merge(defaults[key], val, path + (key,))
        else:
            out[key] = val
    return out


def resolve(raw, command=None, seed=None, out=None):
    """Fill defaults, apply CLI overrides and validate."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = {k: v for k, v in raw.items() if k != "_meta"}
    cfg = _merge(DEFAULTS, raw)
    if command is not None:
        cfg["command"] = command
    if seed is not None:
        cfg["seed"] = int(seed)
    if out is not None:
        cfg["output_dir"] = str(out)
    if cfg["command"] not in COMMANDS:
        raise ConfigError(f"command must be one of {COMMANDS}, got {cfg['command']!r}")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a nonnegative integer")
    return cfg


def _content(cfg):
    return {k: v for k, v in cfg.items() if k != "output_dir"}


def write_resolved(cfg, out_dir):
    doc = dict(cfg)
    doc["_meta"] = {"fingerprint": build_fingerprint(), "config_hash": config_hash(_content(cfg))}
    path = Path(out_dir) / "resolved_config.json"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# -- builders ------------------------------------------------------------------

def _process(cfg, horizon=None):
    p = cfg["process"]
    params = dict(p["params"])
    params["horizon"] = p["horizon"] if horizon is None else horizon
    try:
        return make_process(p["name"], dim=p["dim"], **params)
    except TypeError as exc:
        raise ConfigError(f"bad process params: {exc}") from exc


def _dataset(cfg):
    d = cfg["data"]
    if d["kind"] == "csv":
        if not d["path"]:
            raise ConfigError("data.kind='csv' needs data.path")
        return read_csv(d["path"])[2]
    if d["kind"] == "gaussian_mixture":
        centers = np.asarray(d["centers"], dtype=float)
        rng = make_rng(cfg["seed"], "data")
        lab = rng.integers(0, len(centers), d["n"])
        return centers[lab] + d["std"] * rng.standard_normal((d["n"], centers.shape[1]))
    raise ConfigError(f"unknown data.kind {d['kind']!r}")


def _igo(cfg):
    fields = {k: v for k, v in cfg["igo"].items() if k != "checkpoint_every"}
    fields["tau_list"] = tuple(fields["tau_list"])
    return IgoConfig(**fields)


def _net(cfg):
    if cfg["checkpoint"]:
        return ScoreNet.load(cfg["checkpoint"])
    raise ConfigError(f"command {cfg['command']!r} needs a 'checkpoint'")


def _sampler(cfg):
    s = {k: v for k, v in cfg["sampler"].items() if k not in ("method", "n_samples")}
    return SamplerConfig(seed=derive_seed(cfg["seed"], "sample"), **s)


def _generators(cfg, label="gen"):
    g = cfg["downstream"]["generator"]
    mode = g["mode"]
    if mode == "linear_rig":
        rng = make_rng(cfg["seed"], label)
        B = rng.standard_normal((g["n"], g["k"]))
        if g["orthonormal"]:
            B = np.linalg.qr(B)[0]
        return [Generator.linear_rig(B, g["radius"])]
    net = _net(cfg)
    if mode in ("final", "intermediate"):
        return [Generator.from_net(net, mode, g["t"], g["radius"])]
    if mode == "union":
        return [Generator.from_net(net, "final", g["t"], g["radius"]),
                Generator.from_net(net, "intermediate", g["t"], g["radius"])]
    raise ConfigError(f"unknown generator mode {mode!r}")


# -- commands ------------------------------------------------------------------

def cmd_simulate(cfg, out):
    spec = _process(cfg)
    s = cfg["simulate"]
    em = EmConfig(s["dt"], derive_seed(cfg["seed"], "simulate"), s["capture_times"])
    traj = simulate(spec, np.asarray(s["x0"], dtype=float), em)
    meta = [f"seed={cfg['seed']}", f"process={spec.name}", f"dt={s['dt']!r}"]
    traj.to_csv(out / "trajectory.csv", out / "captures.csv", meta)
    if s["n_paths"] > 1:
        ens = simulate_ensemble(spec, np.asarray(s["x0"], dtype=float), em, s["n_paths"])
        write_csv(out / "ensemble_final.csv", [f"x{i}" for i in range(spec.dim)], ens.final, meta)


def cmd_train(cfg, out):
    X = _dataset(cfg)
    spec = _process(cfg)
    m = cfg["model"]
    net = ScoreNet(X.shape[1], m["hidden"], m["depth"], m["tap_layer"], m["activation"],
                   m["time_embed_dim"], m["encoder_layers"], seed=derive_seed(cfg["seed"], "init"))
    every = cfg["igo"]["checkpoint_every"]
    log = train(net, X, spec, _igo(cfg), seed=derive_seed(cfg["seed"], "train"),
                checkpoint_every=every or None, checkpoint_path=str(out / "model_step{step}.ckpt"))
    log.to_csv(out / "train_log.csv")
    net.save(out / "model.ckpt")


def cmd_sample(cfg, out):
    net = _net(cfg)
    spec = _process(cfg)
    if spec.dim != net.data_dim:
        raise ConfigError(f"process dim {spec.dim} does not match checkpoint dim {net.data_dim}")
    sc = _sampler(cfg)
    n = cfg["sampler"]["n_samples"]
    t0 = sc.start(spec)
    rng = make_rng(cfg["seed"], "prior")
    if spec.name == "vp" and t0 == spec.horizon:
        x_T = rng.standard_normal((n, spec.dim))
    else:
        # below the horizon the prior is the data law pushed forward to t0
        X = _dataset(cfg)
        em = EmConfig(cfg["igo"]["dt"], derive_seed(cfg["seed"], "prior-push"))
        x_T = simulate_ensemble(_process(cfg, horizon=t0), X[rng.integers(0, len(X), n)], em, n).final
    method = cfg["sampler"]["method"]
    if method == "reverse_em":
        X = reverse_em(net, spec, x_T, sc)
    elif method == "ode":
        X = probability_flow_sample(net, spec, x_T, sc)
    else:
        raise ConfigError(f"unknown sampler.method {method!r}")
    write_samples(out / "samples.csv", X, sc, method, spec)


def cmd_gpca(cfg, out):
    d = cfg["downstream"]
    gens = _generators(cfg)
    base = gens[0]
    z_star = base.sample_latents(1, make_rng(cfg["seed"], "gpca-truth"))[0]
    x_star = base(z_star)
    x_star = x_star / np.linalg.norm(x_star)
    V = spiked_covariance(x_star, d["pca_samples"], d["beta"], derive_seed(cfg["seed"], "gpca-data"))
    v = ppower(V, gens if len(gens) > 1 else base, iters=d["iters"],
               seed=derive_seed(cfg["seed"], "ppower"), steps=d["projection_steps"],
               lr=d["projection_lr"])
    write_csv(out / "vhat.csv", ["v", "x_star"], zip(v, x_star),
              [f"seed={cfg['seed']}", f"abs_cosine={abs(float(v @ x_star))!r}",
               f"config_hash={config_hash(_content(cfg))}"])


def cmd_csgm(cfg, out):
    d = cfg["downstream"]
    gen = _generators(cfg)[0]
    x_true = gen(gen.sample_latents(1, make_rng(cfg["seed"], "csgm-truth"))[0])
    model = MeasurementModel.gaussian(x_true, d["m"], d["noise_std"], derive_seed(cfg["seed"], "A"))
    rec = csgm_recover(model, gen, d["steps"], d["lr"], d["restarts"],
                       derive_seed(cfg["seed"], "csgm"), d["step_rule"])
    write_csv(out / "csgm.csv", ["x_true", "x_hat"], zip(x_true, rec.x_hat),
              [f"seed={cfg['seed']}", f"residual={rec.residual!r}",
               f"relative_error={rec.recovery_error!r}", f"config_hash={config_hash(_content(cfg))}"])


def cmd_sweep(cfg, out):
    d = cfg["downstream"]
    gen = _generators(cfg)[0]
    table = sample_complexity_sweep(gen, gen.out_dim, gen.latent_dim, d["m_list"], d["trials"],
                                    derive_seed(cfg["seed"], "sweep"), d["noise_std"],
                                    steps=d["steps"], lr=d["lr"], restarts=d["restarts"],
                                    step_rule=d["step_rule"])
    table.to_csv(out / "sweep.csv", config_hash(_content(cfg)))


def cmd_probe(cfg, out):
    d = cfg["downstream"]
    g = cfg["downstream"]["generator"]
    if g["mode"] == "linear_rig":
        base = _generators(cfg, "gen")[0]
        inter = _generators(cfg, "gen-inter")[0]
    else:
        net = _net(cfg)
        base = Generator.from_net(net, "final", g["t"], g["radius"])
        inter = Generator.from_net(net, "intermediate", g["t"], g["radius"])
    rng = make_rng(cfg["seed"], "probe-test")
    test = base(base.sample_latents(d["n_test"], rng)) + inter(inter.sample_latents(d["n_test"], rng))
    rep = range_expansion_probe(base, inter, test, d["n_samples"], derive_seed(cfg["seed"], "probe"))
    rep.to_csv(out / "probe.csv", config_hash(_content(cfg)))
    rows = []
    for name, gen in (("base", base), ("inter", inter)):
        est = lipschitz_estimate(gen, d["n_pairs"], derive_seed(cfg["seed"], "lipschitz", len(rows)))
        rows.append((name, est.L_lower, est.n_pairs))
    write_csv(out / "lipschitz.csv", ["generator", "L_lower", "n_pairs"], rows,
              [f"seed={cfg['seed']}", "note=sampled lower bound"])


def cmd_metrics(cfg, out):
    wd = weight_divergence(_net(cfg))
    write_csv(out / "metrics.csv", ["cos_E", "cos_D", "eucl_E", "eucl_D", "pad_E", "pad_D"],
              [[wd.cos_E, wd.cos_D, wd.eucl_E, wd.eucl_D, wd.pad_E, wd.pad_D]],
              [f"checkpoint={os.path.basename(cfg['checkpoint'])}"])


HANDLERS = {"simulate": cmd_simulate, "train": cmd_train, "sample": cmd_sample, "gpca": cmd_gpca,
            "csgm": cmd_csgm, "sweep": cmd_sweep, "probe": cmd_probe, "metrics": cmd_metrics}


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from exc


def run(config, command=None, seed=None, out=None):
    """Resolve ``config`` (a path or dict), execute it and return the output directory."""
    raw = load_config(config) if not isinstance(config, dict) else config
    cfg = resolve(raw, command, seed, out)
    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out_dir)
    HANDLERS[cfg["command"]](cfg, out_dir)
    return out_dir


def replay(path, out=None):
    """Re-run a resolved config produced by this build."""
    doc = load_config(path)
    meta = doc.get("_meta")
    if not isinstance(meta, dict):
        raise ConfigError(f"{path}: not a resolved config (no _meta)")
    if meta.get("fingerprint") != build_fingerprint():
        raise VersionMismatch(f"config was resolved by build {meta.get('fingerprint')}, "
                              f"this is {build_fingerprint()}")
    body = {k: v for k, v in doc.items() if k != "_meta"}
    cfg = resolve(body)
    if config_hash(_content(cfg)) != meta.get("config_hash"):
        raise ConfigError(f"{path}: contents changed since it was resolved")
    return run(cfg, out=out)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="igolab", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS + ("replay",))
    parser.add_argument("--config", required=True)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")
    args = parser.parse_args(argv)
    try:
        if args.command == "replay":
            if args.seed is not None:
                raise ConfigError("replay does not accept --seed")
            replay(args.config, args.out)
        else:
            run(args.config, args.command, args.seed, args.out)
    except IgoError as exc:
        print(f"error [{exc.module}]: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, (ConfigError, VersionMismatch)) else 1
    except (OSError, ValueError, TypeError) as exc:
        print(f"error [cli]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
