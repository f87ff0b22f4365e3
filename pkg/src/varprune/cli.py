"""Command line entry point: ``varprune {train,eval,ode-lab,prior-curve,estimator-bench}``.

Options come from built-in defaults, then a JSON config file (``--config``),
then explicit flags, later sources winning. The effective configuration is
written to the output directory before any computation starts.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import convergence as cv
from . import data as dt
from . import estimators as es
from . import hyperprior as hpm
from . import network as nw
from . import trainer as tr
from .tensor import NumericError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# keys accepted by the train/eval commands besides the TrainConfig fields
RUN_KEYS = {
    "data": (str, "blobs"),          # mnist | blobs
    "data_root": (str, None),
    "n_train": (int, None),          # use only the first n training samples
    "n_test": (int, None),
    "arch": (str, "784-300-100-10"),  # dash-separated sizes or "lenet5"
    "out": (str, "run"),
    "checkpoint_every": (int, 0),
    "resume": (str, None),
    "blob_classes": (int, 4),
    "blob_dim": (int, 16),
    "blob_train_per_class": (int, 500),
    "blob_test_per_class": (int, 500),
    "blob_separation": (float, 4.0),
    "blob_seed": (int, 0),
    "slope": (float, 1e-3),
}

ODE_KEYS = {
    "p": (int, 4), "q": (int, 3), "matrix_seed": (int, 0), "lam": (float, 1.0),
    "eta": (float, 2.0), "kappa": (float, 2.0), "prior": (str, "flattening"),
    "log_gamma": (float, math.log(0.1)), "alpha": (float, 0.9), "beta": (float, 10.0),
    "eps1": (float, 0.05), "eps2": (float, 1e-4), "theta_l": (float, 1e-6),
    "starts": (int, 100), "start_seed": (int, 1), "radius_fraction": (float, 1.0),
    "dt": (float, None), "T": (float, None), "every": (int, 10), "out": (str, "ode"),
}


class CliConfigError(tr.ConfigError):
    pass


def _train_types():
    out = {}
    for f in fields(tr.TrainConfig):
        default = f.default
        if isinstance(default, bool):
            typ = bool
        elif isinstance(default, int) and f.name not in ("n0",):
            typ = int
        elif isinstance(default, str):
            typ = str
        elif f.name == "n0":
            typ = int
        else:
            typ = float
        out[f.name] = (typ, default)
    return out


def _coerce(key, typ, value):
    if value is None:
        return None
    try:
        if typ is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if typ is float:
            return float(value)
        if typ is str:
            if not isinstance(value, str):
                raise ValueError
            return value
    except (TypeError, ValueError):
        raise CliConfigError(f"config key {key!r} expects {typ.__name__}, got {value!r}") from None
    return value


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise CliConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise CliConfigError("config file must hold a JSON object")
    return data


def resolve(schema, file_cfg, flags):
    """Merge defaults < config file < flags and type-check every key."""
    unknown = set(file_cfg) - set(schema)
    if unknown:
        raise CliConfigError(f"unknown config keys: {sorted(unknown)}")
    out = {}
    for key, (typ, default) in schema.items():
        value = default
        if key in file_cfg:
            value = file_cfg[key]
        if flags.get(key) is not None:
            value = flags[key]
        out[key] = _coerce(key, typ, value)
    return out


def _add_schema_flags(parser, schema):
    for key, (typ, default) in schema.items():
        parser.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None,
                            help=f"(default: {default})")


def _echo(out_dir, name, cfg):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / name, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# data and architecture

def _datasets(cfg):
    kind = cfg["data"]
    if kind == "mnist":
        train = dt.load_mnist(cfg["data_root"], "train")
        test = dt.load_mnist(cfg["data_root"], "test")
    elif kind == "blobs":
        train, test = dt.blob_split(cfg["blob_classes"], cfg["blob_dim"], cfg["blob_train_per_class"],
                                    cfg["blob_test_per_class"], cfg["blob_seed"], cfg["blob_separation"])
    else:
        raise CliConfigError(f"unknown data kind {kind!r} (use 'mnist' or 'blobs')")
    if cfg.get("n_train"):
        train = train.subset(slice(0, cfg["n_train"]))
    if cfg.get("n_test"):
        test = test.subset(slice(0, cfg["n_test"]))
    return train, test


def _network(cfg, rng, n_in, n_out):
    arch = cfg["arch"]
    if arch == "lenet5":
        return nw.lenet5(rng, slope=cfg["slope"])
    try:
        sizes = [int(s) for s in arch.split("-")]
    except ValueError:
        raise CliConfigError(f"cannot parse architecture {arch!r}") from None
    if len(sizes) < 2:
        raise CliConfigError("architecture needs at least an input and an output size")
    if sizes[0] != n_in or sizes[-1] != n_out:
        raise CliConfigError(f"architecture {arch} does not match data ({n_in} inputs, {n_out} classes)")
    return nw.dense_net(sizes, rng, slope=cfg["slope"])


# ---------------------------------------------------------------------------
# commands

def cmd_train(args):
    schema = dict(_train_types())
    schema.update(RUN_KEYS)
    cfg = resolve(schema, _load_config(args.config), vars(args))
    train_cfg = tr.TrainConfig(**{f.name: cfg[f.name] for f in fields(tr.TrainConfig)})
    train_cfg.validate()
    out = Path(cfg["out"])
    _echo(out, "effective_config.json", cfg)

    train, test = _datasets(cfg)
    train_cfg.validate(len(train))
    if cfg["resume"]:
        state = ck.load_checkpoint(cfg["resume"])
    else:
        rng = np.random.default_rng(train_cfg.seed)
        net = _network(cfg, rng, train.inputs.shape[1], train.targets.shape[1])
        state = tr.init_state(net, train_cfg, rng)
    if cfg["arch"] == "lenet5":
        train, test = train.reshaped((1, 28, 28)), test.reshaped((1, 28, 28))

    every = cfg["checkpoint_every"]

    def on_epoch(st, row):
        if every and st.epoch % every == 0:
            ck.save_checkpoint(out / f"epoch{st.epoch:04d}.ckpt", st)
        print(json.dumps(row.flat()), flush=True)

    if state.phase == "train":
        tr.train(state, train, test, epochs=train_cfg.epochs - state.epoch, on_epoch=on_epoch)
        ck.save_checkpoint(out / "trained.ckpt", state)
        tr.finalize_gates(state)
        ck.save_checkpoint(out / "finalized.ckpt", state)
    if state.phase in ("finalized", "fine_tune"):
        tr.fine_tune(state, train, test, on_epoch=on_epoch)
        ck.save_checkpoint(out / "fine_tuned.ckpt", state)
    ck.emit_metrics(out / "metrics.csv", state.history, len(state.gates))
    ck.emit_theta_trajectory(out / "theta_trajectory.csv", state.theta_history, state.initial_widths)
    with open(out / "summary.json", "w") as fh:
        json.dump(tr.summary(state), fh, indent=2)
    print(json.dumps(tr.summary(state)))
    return EXIT_OK


def cmd_eval(args):
    state = ck.load_checkpoint(args.checkpoint)
    cfg = resolve(RUN_KEYS, _load_config(args.config), vars(args))
    _, test = _datasets(cfg)
    if state.net.input_shape != (test.inputs.shape[1],):
        test = test.reshaped(state.net.input_shape)
    gates = state.gates if state.phase == "train" else None
    acc, loss = tr.evaluate(state.net, test.inputs, test.targets, gates)
    thr = state.config.input_threshold if state.phase == "fine_tune" else None
    result = {"accuracy": acc, "mean_loss": loss, "widths": state.net.widths(),
              "pruning_ratio": tr.pruning_ratio(state.initial_weights, state.net, thr), "phase": state.phase}
    print(json.dumps(result))
    return EXIT_OK


def _prior(kind, log_gamma, alpha, beta):
    try:
        if kind == "flattening":
            return hpm.Flattening.from_log(log_gamma)
        if kind == "beta":
            return hpm.Beta(alpha, beta)
    except ValueError as exc:
        raise CliConfigError(str(exc)) from exc
    raise CliConfigError(f"unknown prior {kind!r}")


def cmd_prior_curve(args):
    if args.gamma is not None and not args.gamma > 0:
        raise CliConfigError("gamma must be positive")
    hp = _prior(args.prior, args.log_gamma if args.gamma is None else math.log(args.gamma), args.alpha, args.beta)
    try:
        cb = hpm.ClipBounds(args.eps1, args.eps2)
    except ValueError as exc:
        raise CliConfigError(str(exc)) from exc
    lo = args.theta_min if args.theta_min is not None else cb.eps1 / 10
    hi = args.theta_max if args.theta_max is not None else 1 - cb.eps2 / 10
    if not 0 < lo <= hi < 1 or args.points < 1:
        raise CliConfigError("need 0 < theta-min <= theta-max < 1 and points >= 1")
    grid = np.linspace(lo, hi, args.points) if args.points > 1 else np.array([lo])
    rows = hpm.curve_export(hp, cb, grid)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["theta", "pi_star", "reg_term"])
        for r in rows:
            w.writerow([repr(v) for v in r])
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


def cmd_ode_lab(args):
    cfg = resolve(ODE_KEYS, _load_config(args.config), vars(args))
    out = Path(cfg["out"])
    _echo(out, "effective_config.json", cfg)
    rng = np.random.default_rng(cfg["matrix_seed"])
    q, p = cfg["q"], cfg["p"]
    if q < 1 or p < 1 or cfg["starts"] < 1:
        raise CliConfigError("p, q and starts must be >= 1")
    A = rng.normal(size=(q, p))
    A *= cfg["eta"] / np.linalg.norm(A, 2)
    c = rng.normal(size=q + p)
    c /= np.linalg.norm(c)
    kappa = cfg["kappa"]

    def diff(w_f, w_b):
        w = np.concatenate([w_f, w_b], axis=-1)
        return kappa * 0.5 * np.sum(w * w, axis=-1) * np.tanh(w @ c)

    hp = _prior(cfg["prior"], cfg["log_gamma"], cfg["alpha"], cfg["beta"])
    try:
        cb = hpm.ClipBounds(cfg["eps1"], cfg["eps2"])
        dyn = cv.UnitDynamics(0.5 * A, 0.5 * A.T, cfg["lam"], diff, hp, cb, (cfg["theta_l"], 1 - cfg["theta_l"]))
    except ValueError as exc:
        raise CliConfigError(str(exc)) from exc
    lam = cfg["lam"]
    stable = cv.stability_check(lam, cfg["eta"], kappa, cfg["eps1"])
    radius = cv.roa_radius(lam, cfg["eta"], kappa, cfg["eps1"])
    if radius <= 0:
        radius = cfg["eps1"]
    radius *= cfg["radius_fraction"]
    step = cfg["dt"] or min(1e-2, 0.1 / lam)
    T = cfg["T"] or 200.0 / lam
    starts = cv.sample_ball_starts(np.random.default_rng(cfg["start_seed"]), cfg["starts"], q, p, radius,
                                   cfg["eps1"])
    traj = cv.integrate(dyn, starts, step, T, every=1)
    w_f, w_b, th = dyn.split(traj)
    V = cv.lyapunov_V(w_f, w_b, th, cfg["eps1"])
    rise = np.max(np.diff(V, axis=0), axis=0)
    final_dev = np.max(np.abs(traj[-1] - dyn.equilibrium()), axis=1)
    with open(out / "trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory", "t", "norm_w_f", "norm_w_b", "theta", "V"])
        for k in range(traj.shape[1]):
            for s in range(0, traj.shape[0], cfg["every"]):
                w.writerow([k, repr(s * step), repr(float(np.linalg.norm(w_f[s, k]))),
                            repr(float(np.linalg.norm(w_b[s, k]))), repr(float(th[s, k])), repr(float(V[s, k]))])
    summary = {
        "stability_condition": stable, "radius": radius, "dt": step, "T": T,
        "converged": int(np.sum(final_dev < 1e-4)), "trajectories": int(traj.shape[1]),
        "max_V_increase": float(rise.max()),
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_estimator_bench(args):
    if args.draws < 1:
        raise CliConfigError("draws must be >= 1")
    try:
        sizes = [int(s) for s in args.arch.split("-")]
    except ValueError:
        raise CliConfigError(f"cannot parse architecture {args.arch!r}") from None
    if sum(sizes[1:-1]) > es.MAX_ENUMERATED_UNITS:
        raise CliConfigError(f"at most {es.MAX_ENUMERATED_UNITS} gated units can be enumerated")
    rng = np.random.default_rng(args.seed)
    net = nw.dense_net(sizes, rng)
    gates = nw.init_gates(net, args.theta)
    X = rng.normal(size=(args.samples, sizes[0]))
    Y = np.eye(sizes[-1])[rng.integers(0, sizes[-1], args.samples)]
    bf = es.brute_force_diff(net, X, Y, gates).flat()
    tay, con, sam = [], [], []
    for _ in range(args.draws):
        xi = nw.sample_gates(gates, rng)
        _, trace = nw.forward(net, X, xi)
        nw.backward(net, trace, Y)
        tay.append(es.taylor_diff(trace, gates).flat())
        sam.append(es.sampling_diff(net, X, Y, gates, rng, xi=xi).flat())
        con.append(es.concrete_grad(net, X, Y, gates, rng, args.t).flat())
    w = csv.writer(sys.stdout)
    w.writerow(["unit", "taylor", "concrete", "sampling", "brute_force"])
    units = [(gi, j) for gi, g in enumerate(gates) for j in range(g.theta.size)]
    for k, (gi, j) in enumerate(units):
        w.writerow([f"{gi}:{j}", repr(float(np.mean(tay, 0)[k])), repr(float(np.mean(con, 0)[k])),
                    repr(float(np.mean(sam, 0)[k])), repr(float(bf[k]))])
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="varprune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train, finalise and fine-tune a gated network")
    p.add_argument("--config", help="JSON config file")
    schema = dict(_train_types())
    schema.update(RUN_KEYS)
    _add_schema_flags(p, schema)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    p.add_argument("checkpoint")
    p.add_argument("--config", help="JSON config file (data keys)")
    _add_schema_flags(p, RUN_KEYS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ode-lab", help="integrate single-unit dynamics from a sweep of starts")
    p.add_argument("--config", help="JSON config file")
    _add_schema_flags(p, ODE_KEYS)
    p.set_defaults(func=cmd_ode_lab)

    p = sub.add_parser("prior-curve", help="tabulate pi* and the gate-gradient log term")
    p.add_argument("--prior", choices=["flattening", "beta"], default="flattening")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--log-gamma", type=float, default=math.log(1e-2))
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--beta", type=float, default=10.0)
    p.add_argument("--eps1", type=float, default=1e-4)
    p.add_argument("--eps2", type=float, default=1e-4)
    p.add_argument("--theta-min", type=float, default=None)
    p.add_argument("--theta-max", type=float, default=None)
    p.add_argument("--points", type=int, default=1001)
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_prior_curve)

    p = sub.add_parser("estimator-bench", help="compare cost-difference estimators on a tiny net")
    p.add_argument("--arch", default="2-3-2")
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--draws", type=int, default=2000)
    p.add_argument("--t", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_estimator_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except tr.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (dt.DataError, ck.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
