"""Command-line entry point ``rieszlab``.

Subcommands::

    potential     evaluate g and grad g at points (JSON lines)
    pde run       mean-field PDE run from a TOML config
    sde run       particle ensemble from a TOML config
    me-check      modulated-energy lower-bound audit
    fi-check      functional-inequality ratio sweep
    chaos-study, relaxation, uniform-time, fi-sweep
                  studies from a TOML config (exit code 1 if a check fails)
    rerun         repeat a study from its manifest.json and compare CSVs
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import experiments as ex
from . import pde as pde_mod
from .errors import RieszLabError
from .grid import GridField, save_snapshot
from .particles import default_eps_reg, initial_config, run_ensemble
from .riesz import RieszParams, build_table

log = logging.getLogger("rieszlab")


def _load_toml(path):
    import tomli

    with open(path, "rb") as fh:
        return tomli.load(fh)


def _profile(text, n, d):
    """``uniform`` or ``name:key=val,key=val`` -> density GridField."""
    if text in (None, "", "uniform"):
        return GridField.constant(1.0, n, d, probability=True)
    name, _, rest = text.partition(":")
    spec = dict(name=name)
    for item in filter(None, rest.split(",")):
        k, _, v = item.partition("=")
        spec[k.strip()] = json.loads(v)
    return pde_mod.initial_profile(spec, n, d)


def _write_manifest(out, **payload):
    payload.setdefault("versions", ex._versions())
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)


# -- subcommands --------------------------------------------------------------------------------

def cmd_potential(args):
    params = RieszParams(args.d, args.s)
    table = build_table(params, args.grid, args.cutoff)
    for item in args.eval:
        x = np.array([float(v) for v in item.split(",")])
        g, grad = table.evaluate(x)
        print(json.dumps(dict(x=x.tolist(), g=float(g), grad=np.atleast_1d(grad).tolist())))
    return 0


def cmd_pde_run(args):
    data = _load_toml(args.config)
    cfg = pde_mod.PdeConfig.from_dict(data.get("pde", data))
    os.makedirs(args.out, exist_ok=True)
    out = pde_mod.run(cfg)
    rows = [r.row() for r in out.records]
    with open(os.path.join(args.out, "diagnostics.csv"), "wb") as fh:
        fh.write(ex.csv_bytes(pde_mod.RECORD_COLUMNS, rows))
    snaps = []
    for t, mu in sorted(out.snapshots.items()):
        name = f"snapshot_t{t:.6g}.rzf"
        save_snapshot(mu, os.path.join(args.out, name), time=t)
        snaps.append(name)
    _write_manifest(args.out, kind="pde", config=cfg.to_dict(), snapshots=snaps)
    log.info("%d records written to %s", len(rows), args.out)
    return 0


SDE_KEYS = dict(d=1, s=0.0, flow="gradient", sigma=0.25, N=256, replicas=4, dt=1e-3, t_end=0.1, seed=0,
                record_times=None, record_every=None, initial="uniform", grid=128, kmax=4, eps_reg=None,
                interaction=True, cutoff=0.125, table_grid=256)


def cmd_sde_run(args):
    data = _load_toml(args.config)
    data = data.get("sde", data)
    extra = set(data) - set(SDE_KEYS)
    if extra:
        raise RieszLabError(f"unknown sde config keys: {sorted(extra)}")
    c = {**SDE_KEYS, **data}
    params = RieszParams(c["d"], c["s"], c["flow"], c["sigma"])
    initial = c["initial"]
    mu0 = (_profile(initial, c["grid"], c["d"]) if isinstance(initial, str)
           else pde_mod.initial_profile(initial, c["grid"], c["d"]))
    if c["record_times"] is not None:
        times = sorted(float(t) for t in c["record_times"])
    else:
        every = c["record_every"] or c["t_end"]
        times = list(np.arange(1, int(round(c["t_end"] / every)) + 1) * every)
    table = build_table(params, c["table_grid"], c["cutoff"])
    eps = c["eps_reg"] if c["eps_reg"] is not None else default_eps_reg(c["N"], c["d"], float(mu0.values.max()))
    uniform = np.allclose(mu0.values, 1.0)
    res = run_ensemble(params, c["N"], c["replicas"], c["dt"], times, table, c["seed"], None if uniform else mu0,
                       eps, c["interaction"], c["kmax"], keep_positions=False)
    os.makedirs(args.out, exist_ok=True)
    K, d = c["kmax"], c["d"]
    header = ["t"] + [f"xi{a + 1}" for a in range(d)] + ["re", "im", "replica"]
    rows = []
    for r, run in enumerate(res.runs):
        for t, block in zip(run["times"], run["fourier"]):
            for idx in np.ndindex(block.shape):
                z = block[idx]
                rows.append([t, *[i - K for i in idx], float(z.real), float(z.imag), r])
    with open(os.path.join(args.out, "fourier.csv"), "wb") as fh:
        fh.write(ex.csv_bytes(header, rows))
    with open(os.path.join(args.out, "status.csv"), "wb") as fh:
        fh.write(ex.csv_bytes(["replica", "status"], [[r, run["status"]] for r, run in enumerate(res.runs)]))
    _write_manifest(args.out, kind="sde", config=c, eps_reg=eps, survived=res.survival_count)
    log.info("%d/%d replicas survived", res.survival_count, c["replicas"])
    return 0


def _check_common(args):
    params = RieszParams(args.d, args.s)
    table = build_table(params, args.table_grid, args.cutoff)
    mu = _profile(args.mu, args.grid, args.d)
    return params, table, mu


def cmd_me_check(args):
    params, table, mu = _check_common(args)
    C_cal, rows = ex.me_check(params, args.N, args.configs, args.seed, mu, table, args.calib_N,
                              args.calib_configs, args.safety)
    data = ex.csv_bytes(["N", "configs", "min_shifted", "violations", "C_cal"], [r + [C_cal] for r in rows])
    _emit(data, args.out)
    return int(any(r[3] > 0 for r in rows))


def cmd_fi_check(args):
    cfg = ex.StudyConfig(kind="fi_sweep", d=args.d, s=args.s, N=args.N, configs=args.configs, seed=args.seed,
                         grid=args.grid, v_per_config=args.v_per_config, calib_configs=args.calib_configs,
                         table_grid=args.table_grid, cutoff=args.cutoff,
                         initial=_profile_spec(args.mu), replicas=1)
    res = ex.fi_sweep(cfg, log.info)
    header, rows = res.tables["fi_sweep"]
    _emit(ex.csv_bytes(header, rows), args.out)
    return 0 if res.passed else 1


def _profile_spec(text):
    if text in (None, "", "uniform"):
        return dict(name="single_mode", eps=0.0, k=1)
    name, _, rest = text.partition(":")
    spec = dict(name=name)
    for item in filter(None, rest.split(",")):
        k, _, v = item.partition("=")
        spec[k.strip()] = json.loads(v)
    return spec


def _emit(data, out):
    if out in (None, "-"):
        sys.stdout.write(data.decode())
    else:
        with open(out, "wb") as fh:
            fh.write(data)


def _study(kind):
    def cmd(args):
        cfg = ex.load_config(args.config)
        if cfg.kind != kind:
            cfg = ex.StudyConfig.from_dict({**cfg.to_dict(), "kind": kind})
        res = ex.run_study(cfg, log.info)
        ex.write_study(res, cfg, args.out)
        for name, ok in res.checks.items():
            print(f"{name}: {'PASS' if ok else 'FAIL'}")
        return 0 if res.passed else 1

    return cmd


def cmd_rerun(args):
    res, manifest, same = ex.rerun_from_manifest(args.manifest, args.out, log.info)
    print(f"identical CSVs: {same}")
    return 0 if same else 1


# -- parser -------------------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="rieszlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("potential", help="evaluate the periodic potential")
    q.add_argument("--d", type=int, default=1)
    q.add_argument("--s", type=float, default=0.0)
    q.add_argument("--grid", type=int, default=256)
    q.add_argument("--cutoff", type=float, default=0.125)
    q.add_argument("--eval", action="append", default=[], metavar="X1[,X2]", help="point (repeatable)")
    q.set_defaults(func=cmd_potential)

    for name, func in (("pde", cmd_pde_run), ("sde", cmd_sde_run)):
        q = sub.add_parser(name, help=f"{name.upper()} runs")
        qs = q.add_subparsers(dest="action", required=True)
        r = qs.add_parser("run")
        r.add_argument("--config", required=True)
        r.add_argument("--out", required=True)
        r.set_defaults(func=func)

    for name, func in (("me-check", cmd_me_check), ("fi-check", cmd_fi_check)):
        q = sub.add_parser(name)
        q.add_argument("--d", type=int, default=1)
        q.add_argument("--s", type=float, default=0.0)
        q.add_argument("--N", type=int, nargs="+", default=[128, 256, 512, 1024])
        q.add_argument("--configs", type=int, default=200 if name == "me-check" else 100)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--mu", default="uniform", help="uniform or name:key=value,...")
        q.add_argument("--grid", type=int, default=64)
        q.add_argument("--table-grid", type=int, default=256)
        q.add_argument("--cutoff", type=float, default=0.125)
        q.add_argument("--calib-N", type=int, default=64)
        q.add_argument("--calib-configs", type=int, default=200)
        q.add_argument("--safety", type=float, default=2.0)
        if name == "fi-check":
            q.add_argument("--v-per-config", type=int, default=5)
        q.add_argument("--out", default="-")
        q.set_defaults(func=func)

    for kind, name in (("chaos_scaling", "chaos-study"), ("relaxation", "relaxation"),
                       ("uniform_time", "uniform-time"), ("fi_sweep", "fi-sweep")):
        q = sub.add_parser(name)
        q.add_argument("--config", required=True)
        q.add_argument("--out", required=True)
        q.set_defaults(func=_study(kind))

    q = sub.add_parser("rerun", help="rerun a study from its manifest")
    q.add_argument("--manifest", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_rerun)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except RieszLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
