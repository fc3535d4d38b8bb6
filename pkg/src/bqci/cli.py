"""Batch front door: configure, run, and inspect constructions.

All runs are driven by a flat ``key = value`` config file (UTF-8, ``#``
comments); every key has a default and every key can be overridden on the
command line with ``--set key=value``.  Reports are sorted key=value text,
scaling tables are CSV, field snapshots use the binary format from
``torus_field``.

Exit codes: 0 success, 1 runtime / contract failure (with a witness in the
report), 2 configuration or format error.
"""

import argparse
import os
import sys
import time

import numpy as np

from . import diagnostics as dg
from . import iteration as it
from . import torus_field as tf

__all__ = ["main", "load_config", "DEFAULTS", "ConfigError"]


class ConfigError(ValueError):
    pass


DEFAULTS = {
    # execution mode: "desk" builds fields, "asymptotic" is report-only
    "mode": "desk",
    # grid and time sampling
    "nx": "48", "ny": "48", "nz": "48",
    "nt": "33", "t0": "0.75", "t1": "4.25",
    # budgets and schedule (kappa_n = schedule_a ** (-schedule_b ** n))
    "kappa": "0.25", "kappa_bar": "", "schedule_a": "4", "schedule_b": "1.5",
    "steps": "2",
    # desk-mode construction parameters
    "mu": "4", "lam_init": "8", "M": "0.05",
    "lams": "16,32,64,128,256,512",
    "ells": "0.3,0.3,0.3,0.3,0.3,0.3",
    "ellzs": "0.3,0.3,0.3,0.3,0.3,0.3",
    "energy_level": "",  # blank: 10 * kappa
    # asymptotic-mode bookkeeping constants
    "L_v": "10", "D_v": "100", "eps": "0.05", "Lam": "1", "Lam_bar": "1",
    # tolerances
    "tolerance": "1e-6",            # validate-initial normalized residuals
    "residual_tolerance": "5.0",    # step residual vs Richardson floor
    # scaling study
    "quantity": "all",
    "sweep": "",
    # i/o and reproducibility
    "out": ".",
    "snapshots": "0",
    "snapshot_in": "",
    "seed": "0",
    "threads": "0",
}

_SCALING_QUANTITIES = ("lambda", "mu", "mollification", "all")


# ---------------------------------------------------------------------------
# config handling

def _parse_lines(text, source):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def load_config(path=None, overrides=()):
    cfg = dict(DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        parsed = _parse_lines(text, path)
        for key in parsed:
            if key not in DEFAULTS:
                raise ConfigError(f"{path}: unknown key {key!r}")
        cfg.update(parsed)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, val = item.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"--set: unknown key {key!r}")
        cfg[key] = val.strip()
    return cfg


def _get_int(cfg, key):
    try:
        return int(cfg[key])
    except ValueError:
        raise ConfigError(f"{key} = {cfg[key]!r} is not an integer") from None


def _get_float(cfg, key):
    try:
        return float(cfg[key])
    except ValueError:
        raise ConfigError(f"{key} = {cfg[key]!r} is not a number") from None


def _get_list(cfg, key, conv=float):
    raw = cfg[key].strip()
    if not raw:
        return []
    try:
        return [conv(x) for x in raw.split(",")]
    except ValueError:
        raise ConfigError(f"{key} = {cfg[key]!r} is not a comma list") from None


def _grids(cfg):
    grid = tf.Grid3(_get_int(cfg, "nx"), _get_int(cfg, "ny"), _get_int(cfg, "nz"))
    nt = _get_int(cfg, "nt")
    if nt < 5:
        raise ConfigError(f"nt = {nt} is below the 5-sample minimum of the "
                          "4th-order time stencil")
    tgrid = tf.TimeGrid(_get_float(cfg, "t0"), _get_float(cfg, "t1"), nt)
    return grid, tgrid


def _kappa_bar(cfg, kappa):
    if cfg["kappa_bar"].strip():
        kb = _get_float(cfg, "kappa_bar")
    else:
        kb = kappa ** 1.5
    if kb > kappa ** 1.5:
        raise ConfigError(
            f"kappa_bar = {kb:.4g} exceeds kappa^(3/2) = {kappa ** 1.5:.4g}: "
            "the step contract requires kappa_bar <= kappa^(3/2)")
    return kb


def _desk_state(cfg):
    grid, tgrid = _grids(cfg)
    kappa = _get_float(cfg, "kappa")
    level = (_get_float(cfg, "energy_level") if cfg["energy_level"].strip()
             else 10 * kappa)
    e_vals = np.full(tgrid.nt, level)
    return it.initial_state(grid, tgrid, mu=_get_int(cfg, "mu"), kappa=kappa,
                            e_vals=e_vals, M=_get_float(cfg, "M"),
                            lam=_get_int(cfg, "lam_init"))


def _outdir(cfg):
    out = cfg["out"] or "."
    os.makedirs(out, exist_ok=True)
    return out


def _set_threads(cfg):
    n = _get_int(cfg, "threads")
    if n > 0:
        os.environ["OMP_NUM_THREADS"] = str(n)


# ---------------------------------------------------------------------------
# subcommands

def cmd_validate_initial(cfg):
    """Build the starting tuple and check its normalized residuals."""
    _kappa_bar(cfg, _get_float(cfg, "kappa"))
    state = _desk_state(cfg)
    res = dg.normalized_residuals(state)
    tol = _get_float(cfg, "tolerance")
    ok = max(res["momentum"], res["flux"], res["incompressibility"]) <= tol
    report = dict(res)
    report.update({"tolerance": tol, "passed": ok,
                   "grid": f"{state.grid.nx}x{state.grid.ny}x{state.grid.nz}",
                   "nt": state.tgrid.nt})
    it.write_report(os.path.join(_outdir(cfg), "validate_initial.txt"), report)
    print("\n".join(it.format_report(report)))
    return 0 if ok else 1


def _witness(state):
    """Time / point location of the worst fine-stencil momentum residual."""
    res = dg.system_residual(state, "fine")
    j = int(np.argmax(res["momentum_slices"]))
    return {"witness_t": state.tgrid.times()[j], "witness_slice": j,
            "witness_sup": res["momentum_slices"][j]}


def _check_snapshot_in(cfg):
    path = cfg["snapshot_in"].strip()
    if not path:
        return
    try:
        _, rank, grid, tgrid = tf.read_snapshot(path)
    except (tf.SnapshotFormatError, OSError) as exc:
        raise ConfigError(f"snapshot_in {path}: {exc}") from None
    want = (_get_int(cfg, "nx"), _get_int(cfg, "ny"), _get_int(cfg, "nz"))
    if grid.shape != want or tgrid.nt != _get_int(cfg, "nt"):
        raise ConfigError(
            f"snapshot_in {path}: header {grid.shape} x {tgrid.nt} does not "
            f"match config {want} x {cfg['nt']}")


def _asymptotic_report(cfg):
    kappa = _get_float(cfg, "kappa")
    params = it.choose_params(
        _get_float(cfg, "L_v"), kappa, _kappa_bar(cfg, kappa),
        _get_float(cfg, "Lam"), _get_float(cfg, "Lam_bar"),
        _get_float(cfg, "D_v"), eps=_get_float(cfg, "eps"))
    nyquist = min(_get_int(cfg, "nx"), _get_int(cfg, "ny"),
                  _get_int(cfg, "nz")) // 2
    return {
        "mode": "asymptotic", "mu": params.mu, "lam0": params.lam0,
        "lams": params.lams, "ells": params.ells, "ellzs": params.ellzs,
        "violations": params.violations,
        "grid_nyquist": nyquist,
        "representable": bool(max(params.lams) <= nyquist),
        "fields_built": False,
    }


def cmd_step(cfg):
    """Run one six-substep update (or report parameters in asymptotic mode)."""
    _check_snapshot_in(cfg)
    out = _outdir(cfg)
    if cfg["mode"] == "asymptotic":
        report = _asymptotic_report(cfg)
        it.write_report(os.path.join(out, "step.txt"), report)
        print("\n".join(it.format_report(report)))
        return 0
    if cfg["mode"] != "desk":
        raise ConfigError(f"unknown mode {cfg['mode']!r} (desk | asymptotic)")
    lams = _get_list(cfg, "lams", int)
    ells = _get_list(cfg, "ells")
    ellzs = _get_list(cfg, "ellzs")
    if not (len(lams) == len(ells) == len(ellzs) == 6):
        raise ConfigError("lams, ells, ellzs must each list six values")
    _kappa_bar(cfg, _get_float(cfg, "kappa"))
    state = _desk_state(cfg)
    blocks = it.begin_step(state, ells[0], ellzs[0])
    report = it.run_step(state, lams, ells, ellzs)
    report["blocks"] = blocks
    check = dg.richardson_floor(state, _get_float(cfg, "residual_tolerance"))
    report["residual"] = check
    if not check["passed"]:
        report["residual"].update(_witness(state))
    it.write_report(os.path.join(out, "step.txt"), report)
    if _get_int(cfg, "snapshots"):
        tf.write_snapshot(os.path.join(out, "velocity.bci"),
                          state.v, 1, state.grid, state.tgrid)
        tf.write_snapshot(os.path.join(out, "temperature.bci"),
                          state.theta[:, None], 0, state.grid, state.tgrid)
    print("\n".join(it.format_report(report)))
    return 0 if check["passed"] else 1


def cmd_outer(cfg):
    """Chain outer steps under the kappa schedule, doubling the frequency
    ladder each step, and record the solution increments."""
    if cfg["mode"] != "desk":
        raise ConfigError("outer requires mode = desk")
    steps = _get_int(cfg, "steps")
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    a = _get_float(cfg, "schedule_a")
    b = _get_float(cfg, "schedule_b")
    lams = _get_list(cfg, "lams", int)
    ells = _get_list(cfg, "ells")
    ellzs = _get_list(cfg, "ellzs")
    if not (len(lams) == len(ells) == len(ellzs) == 6):
        raise ConfigError("lams, ells, ellzs must each list six values")
    tol = _get_float(cfg, "residual_tolerance")
    out = _outdir(cfg)

    kappas = [a ** (-(b ** n)) for n in range(steps + 1)]
    cfg = dict(cfg)
    cfg["kappa"] = repr(kappas[0])
    state = _desk_state(cfg)
    reports = []
    passed = True
    for s in range(steps):
        if s > 0:
            # the next step's profile must keep e - a >= kappa/2 on the
            # stress support; the carried stress sets the floor
            level = 10 * kappas[s] + 8.0 * tf.sup_norm(state.delta_R)
            e_next = np.full(state.tgrid.nt, level)
            state = it.advance_step(state, kappas[s], e_next)
        v0 = state.v.copy()
        th0 = state.theta.copy()
        blocks = it.begin_step(state, ells[0], ellzs[0])
        lam_s = [l * 2 ** s for l in lams]
        rep = it.run_step(state, lam_s, ells, ellzs)
        rep["blocks"] = blocks
        rep["v_increment_sup"] = tf.sup_norm(state.v - v0)
        rep["theta_increment_sup"] = tf.sup_norm(state.theta - th0)
        check = dg.richardson_floor(state, tol)
        rep["residual"] = check
        if not check["passed"]:
            rep["residual"].update(_witness(state))
            passed = False
        reports.append(rep)
    report = {"steps": reports, "kappas": kappas[:steps], "passed": passed}
    it.write_report(os.path.join(out, "outer.txt"), report)
    print("\n".join(it.format_report(report)))
    return 0 if passed else 1


def cmd_scaling(cfg):
    """Fit decay slopes of the update terms over parameter ladders."""
    quantity = cfg["quantity"]
    if quantity not in _SCALING_QUANTITIES:
        raise ConfigError(f"unknown quantity {quantity!r}; valid: "
                          + ", ".join(_SCALING_QUANTITIES))
    sweep = _get_list(cfg, "sweep")
    if sweep and len(sweep) < 3:
        raise ConfigError("sweep needs at least 3 points for a slope fit")
    out = _outdir(cfg)
    report = {}
    ok = True
    if quantity in ("lambda", "all"):
        lams = [int(x) for x in sweep] if (sweep and quantity == "lambda") \
            else (16, 32, 64, 128)
        res = dg.lambda_scaling(lams=lams)
        rows = list(zip(res["lams"], *(res["norms"][k] for k in sorted(res["norms"]))))
        dg.write_csv(os.path.join(out, "scaling_lambda.csv"),
                     ["lam"] + sorted(res["norms"]), rows)
        report["lambda"] = {"slopes": res["slopes"]}
        ok &= all(-1.2 < s < -0.8 for s in res["slopes"].values())
    if quantity in ("mu", "all"):
        mus = [int(x) for x in sweep] if (sweep and quantity == "mu") \
            else (2, 4, 8, 16)
        res = dg.mu_scaling(mus=mus)
        dg.write_csv(os.path.join(out, "scaling_mu.csv"), ["mu", "norm"],
                     list(zip(res["mus"], res["norms"])))
        report["mu"] = {"slope": res["slope"]}
        ok &= -1.3 < res["slope"] < -0.7
    if quantity in ("mollification", "all"):
        ells = sweep if (sweep and quantity == "mollification") \
            else (0.15, 0.3, 0.6)
        res = dg.mollification_scaling(ells=ells)
        dg.write_csv(os.path.join(out, "scaling_mollification.csv"),
                     ["ell", "norm"], list(zip(res["ells"], res["norms"])))
        report["mollification"] = {"slope": res["slope"]}
        ok &= 0.7 < res["slope"] < 1.3
    report["passed"] = bool(ok)
    it.write_report(os.path.join(out, "scaling.txt"), report)
    print("\n".join(it.format_report(report)))
    return 0 if ok else 1


def cmd_selftest(cfg):
    """Run the package's full test suite (requires a tests/ directory next
    to the working copy)."""
    import pytest

    candidates = [
        os.path.join(os.getcwd(), "tests"),
        os.path.abspath(os.path.join(os.path.dirname(__file__),
                                     "..", "..", "tests")),
    ]
    tests = next((c for c in candidates if os.path.isdir(c)), None)
    if tests is None:
        raise ConfigError("no tests/ directory found next to the working copy")
    code = pytest.main(["-q", tests])
    return 0 if code == 0 else 1


# ---------------------------------------------------------------------------
# entry point

def _build_parser():
    parser = argparse.ArgumentParser(
        prog="bqci",
        description="Construction kernel for the Boussinesq system with "
                    "vertical viscosity on the 3-torus")
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {
        "validate-initial": cmd_validate_initial,
        "step": cmd_step,
        "outer": cmd_outer,
        "scaling": cmd_scaling,
        "selftest": cmd_selftest,
    }
    for name, func in handlers.items():
        p = sub.add_parser(name, help=func.__doc__)
        p.add_argument("config", nargs="?", default=None,
                       help="key = value config file (defaults apply)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                       help="override a config key")
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    start = time.time()
    try:
        cfg = load_config(args.config, args.set)
        _set_threads(cfg)
        code = args.func(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except it.ContractError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1
    print(f"[{args.command}] finished in {time.time() - start:.1f}s "
          f"(exit {code})", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
