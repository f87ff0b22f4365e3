"""Binary checkpoints and CSV metric files.

Checkpoint layout (all integers little-endian)::

    b"VPCK" | u32 version | u32 section count | sections... | u32 CRC32 of all preceding bytes

    section = u16 name length | name (utf-8) | u8 kind | u64 payload length | payload
    kind J: utf-8 JSON
    kind A: u16 dtype length | dtype string | u8 ndim | u64 dims... | raw little-endian data
"""
from __future__ import annotations

import csv
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .network import Conv, Dense, Flatten, GateState, Network, Pool
from .tensor import CategoricalCE, GaussianNLL, Identity, LeakyReLU
from .trainer import MetricsRow, TrainConfig, TrainState, make_optimizer

MAGIC = b"VPCK"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupted or incompatible checkpoint."""


# ---------------------------------------------------------------------------
# container

def _pack_array(arr):
    arr = np.asarray(arr, order="C")
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    arr = arr.astype(dt, copy=False)
    dstr = dt.str.encode()
    head = struct.pack("<H", len(dstr)) + dstr + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def _unpack_array(buf):
    (n,) = struct.unpack_from("<H", buf, 0)
    dtype = np.dtype(buf[2:2 + n].decode())
    pos = 2 + n
    (ndim,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    return data.reshape(shape).copy()


def write_container(path, meta, arrays):
    sections = [("meta", b"J", json.dumps(meta, sort_keys=True).encode())]
    sections += [(name, b"A", _pack_array(a)) for name, a in arrays.items()]
    out = bytearray(MAGIC + struct.pack("<II", VERSION, len(sections)))
    for name, kind, payload in sections:
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb + kind + struct.pack("<Q", len(payload)) + payload
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(out))


def read_container(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this library reads {VERSION}")
    pos, meta, arrays = 12, None, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, pos)
        name = raw[pos + 2:pos + 2 + n].decode()
        pos += 2 + n
        kind = raw[pos:pos + 1]
        (length,) = struct.unpack_from("<Q", raw, pos + 1)
        pos += 9
        payload = raw[pos:pos + length]
        pos += length
        if kind == b"J":
            meta = json.loads(payload.decode())
        elif kind == b"A":
            arrays[name] = _unpack_array(payload)
        else:
            raise CheckpointError(f"{path}: unknown section kind {kind!r}")
    if pos != len(raw) - 4 or meta is None:
        raise CheckpointError(f"{path}: malformed section table")
    return meta, arrays


# ---------------------------------------------------------------------------
# network description

def _act_desc(act):
    if isinstance(act, LeakyReLU):
        return {"kind": "leaky_relu", "slope": act.slope}
    return {"kind": "identity"}


def _act_from(desc):
    return LeakyReLU(desc["slope"]) if desc["kind"] == "leaky_relu" else Identity()


def _loss_desc(loss):
    if isinstance(loss, GaussianNLL):
        return {"kind": "gaussian", "tau": loss.tau}
    if isinstance(loss, CategoricalCE):
        return {"kind": "categorical"}
    raise CheckpointError(f"cannot store loss {type(loss).__name__}")


def _loss_from(desc):
    return GaussianNLL(desc["tau"]) if desc["kind"] == "gaussian" else CategoricalCE()


def describe(net):
    layers = []
    for layer in net.layers:
        if isinstance(layer, (Dense, Conv)):
            layers.append({"type": "dense" if isinstance(layer, Dense) else "conv",
                           "gated": layer.gated, "act": _act_desc(layer.act)})
        else:
            layers.append({"type": "pool" if isinstance(layer, Pool) else "flatten"})
    return {"layers": layers, "input_shape": list(net.input_shape), "loss": _loss_desc(net.loss)}


def network_arrays(net, prefix="net/"):
    out = {}
    for name, arr in net.named_params().items():
        out[prefix + name] = arr
    return out


def build_network(desc, arrays, prefix="net/"):
    layers = []
    for i, d in enumerate(desc["layers"]):
        if d["type"] in ("dense", "conv"):
            cls = Dense if d["type"] == "dense" else Conv
            layers.append(cls(arrays[f"{prefix}{i}.W"].copy(), arrays[f"{prefix}{i}.b"].copy(),
                              d["gated"], _act_from(d["act"])))
        else:
            layers.append(Pool() if d["type"] == "pool" else Flatten())
    return Network(layers, _loss_from(desc["loss"]), tuple(desc["input_shape"]))


# ---------------------------------------------------------------------------
# training state

GATE_FIELDS = ("theta", "pi_star", "last_xi", "theta_max", "alive", "ids")


def save_checkpoint(path, state):
    arrays = network_arrays(state.net)
    for gi, g in enumerate(state.gates):
        for f in GATE_FIELDS:
            arrays[f"gate/{gi}/{f}"] = getattr(g, f)
    for gi, t in enumerate(state.last_theta):
        arrays[f"last_theta/{gi}"] = t
    for e, snap in enumerate(state.theta_history):
        for gi, t in enumerate(snap):
            arrays[f"hist/{e}/{gi}"] = t
    scalars, opt_arrays = state.opt.state()
    for k, v in opt_arrays.items():
        arrays[f"opt/{k}"] = v
    meta = {
        "architecture": describe(state.net),
        "config": state.config.to_dict(),
        "n": state.n, "epoch": state.epoch, "phase": state.phase,
        "initial_weights": state.initial_weights, "initial_widths": state.initial_widths,
        "pruned": state.pruned, "converged": state.converged,
        "iters_per_epoch": state.iters_per_epoch, "ft_start": state.ft_start,
        "rng": state.rng.bit_generator.state,
        "optimizer": {"kind": state.opt.kind, "scalars": scalars, "lr": state.opt.lr,
                      "decay": getattr(state.opt, "decay", None)},
        "history": [vars(r) for r in state.history],
        "n_gates": len(state.gates), "n_history": len(state.theta_history),
    }
    write_container(path, meta, arrays)


def load_checkpoint(path):
    meta, arrays = read_container(path)
    try:
        net = build_network(meta["architecture"], arrays)
        gates = [GateState(*(arrays[f"gate/{gi}/{f}"] for f in GATE_FIELDS)) for gi in range(meta["n_gates"])]
        config = TrainConfig.from_dict(meta["config"])
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        o = meta["optimizer"]
        opt = make_optimizer(o["kind"], o["lr"], o["decay"] if o["decay"] is not None else float("inf"))
        opt.load(o["scalars"], {k[4:]: v for k, v in arrays.items() if k.startswith("opt/")})
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing entry {exc}") from exc
    state = TrainState(
        net=net, gates=gates, config=config, rng=rng, opt=opt,
        n=meta["n"], epoch=meta["epoch"], phase=meta["phase"],
        initial_weights=meta["initial_weights"], initial_widths=meta["initial_widths"],
        history=[MetricsRow(**r) for r in meta["history"]],
        theta_history=[[arrays[f"hist/{e}/{gi}"] for gi in range(meta["n_gates"])]
                       for e in range(meta["n_history"])],
        last_theta=[arrays[f"last_theta/{gi}"] for gi in range(meta["n_gates"])],
        pruned=meta["pruned"], converged=meta["converged"],
        iters_per_epoch=meta["iters_per_epoch"], ft_start=meta["ft_start"],
    )
    return state


# ---------------------------------------------------------------------------
# CSV output

def emit_metrics(path, rows, n_layers=None):
    """One row per epoch with a fixed column order; 0 rows give a header-only file."""
    if rows:
        header = list(rows[0].flat().keys())
    else:
        n_layers = n_layers or 0
        header = ["phase", "epoch", "iteration", "train_loss", "test_accuracy", "test_loss", "pruning_ratio"]
        for name in ("alive", "theta_mean", "theta_min", "theta_max"):
            header += [f"{name}_{i}" for i in range(n_layers)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            flat = r.flat()
            w.writerow([_fmt(flat[k]) for k in header])


def emit_theta_trajectory(path, history, widths):
    """Epoch-by-unit table of gate probabilities over the initial units."""
    header = ["epoch"] + [f"l{li}_u{j}" for li, w in enumerate(widths) for j in range(w)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for e, snap in enumerate(history, start=1):
            w.writerow([e] + [_fmt(v) for t in snap for v in t])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v
