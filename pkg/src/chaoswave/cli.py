"""Verification suite, simulations and reports for the chaos-expansion wave solver.

Every subcommand reads one JSON config (``--config``), applies flag
overrides, validates the result and writes ``<command>-<hash>.json`` and
``<command>-<hash>.csv`` into the output directory.  The hash is taken over
the echoed config, so equal configs map to equal file names and contents.

Exit codes: 0 success, 1 failed check, 2 invalid config, 3 exhausted budget.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import hilbert, kernels, solver
from .model import (CovarianceModel, I_beta_w, I_beta_w_quad, ModelError, QuadratureFailure, big_gamma,
                    c0, K_M, l2_norm_FG, l2_norm_FG_quad)
from .noise import GridError, GridSpec, cell_covariance, covariance_check, factorize, sample_increments, write_samples

log = logging.getLogger("chaoswave")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_BUDGET = 0, 1, 2, 3
SEED_ENV = "CHAOSWAVE_SEED"


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


class CheckFailed(AssertionError):
    """A verification step did not pass."""


@dataclass(frozen=True)
class RunConfig:
    hurst: float = 0.75
    riesz_alpha: float = 0.5
    spatial_mode: str = "riesz"
    T: float = 1.0
    L: float = 1.0
    nt: int = 16
    nx: int = 16
    N: int = 2
    t: float = 1.0
    x: float = 0.0
    seed: int = 20240611
    count: int = 10000
    deltas: tuple[float, ...] = (0.4, 0.2, 0.1, 0.05)
    m: int = 10
    m_ladder: tuple[int, ...] = (3, 5, 7)
    M_scan: tuple[float, ...] = (2.0, 5.0, 10.0, 20.0)
    t_grid: tuple[float, ...] = (0.5, 1.0)
    scan_L: float = 1.5
    scan_nt: int = 12
    scan_nx: int = 36
    modulus_count: int = 4000
    bandwidth: float = 0.0
    dump: bool = False
    threads: int = 1
    output: str = "chaoswave-out"

    # keys that do not change any result and stay out of the echo and hash
    NEUTRAL = ("output",)

    def model(self) -> CovarianceModel:
        return CovarianceModel(self.hurst, self.riesz_alpha, self.spatial_mode)

    def grid(self) -> GridSpec:
        return GridSpec(self.T, self.L, self.nt, self.nx)

    def scan_grid(self) -> GridSpec:
        return GridSpec(self.T, self.scan_L, self.scan_nt, self.scan_nx)

    def validate(self) -> "RunConfig":
        self.model()
        self.grid()
        if not 0 <= self.N <= 3:
            raise ConfigError("N must lie in 0..3")
        if self.count < 0 or self.modulus_count < 2:
            raise ConfigError("sample counts must be nonnegative")
        if self.threads < 1:
            raise ConfigError("threads must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if not (0 < self.t <= self.T and abs(self.x) + self.t <= self.L):
            raise ConfigError("target (t, x) must have its backward cone inside the grid")
        if self.m < 1 or any(k < 1 for k in self.m_ladder):
            raise ConfigError("m levels must be positive")
        if any(d < 0 for d in self.deltas) or any(M <= 0 for M in self.M_scan):
            raise ConfigError("deltas must be nonnegative and M values positive")
        return self

    def echo(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        for k in self.NEUTRAL:
            d.pop(k)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def to_text(self) -> str:
        d = dataclasses.asdict(self)
        return json.dumps({k: list(v) if isinstance(v, tuple) else v for k, v in d.items()},
                          sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kw = {k: _coerce(known[k], v) for k, v in data.items()}
        return cls(**kw)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def digest(self) -> str:
        text = json.dumps(self.echo(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:12]


def _coerce(f: dataclasses.Field, value: Any) -> Any:
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if kind.startswith("tuple"):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            inner = int if "int" in kind else float
            return tuple(inner(v) for v in value)
        if kind == "bool":
            if isinstance(value, str):
                if value.lower() not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(value)
                return value.lower() in ("1", "true", "yes")
            return bool(value)
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {f.name}: {value!r}") from None


# ---------------------------------------------------------------------------
# output

def _clean(obj: Any) -> Any:
    """JSON-ready copy; non-finite floats are rejected."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (complex, np.complexfloating)):
        return [_clean(obj.real), _clean(obj.imag)]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if not math.isfinite(v):
            raise CheckFailed("non-finite value in report")
        return v
    return obj


def _csv_text(header: list[str], rows: list[list[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        out = []
        for v in row:
            if isinstance(v, (float, np.floating)):
                if not math.isfinite(float(v)):
                    raise CheckFailed("non-finite value in CSV output")
                out.append(repr(float(v)))
            else:
                out.append(v)
        w.writerow(out)
    return buf.getvalue()


@dataclass
class Outcome:
    results: dict[str, Any]
    header: list[str]
    rows: list[list[Any]]
    failures: list[str] = dataclasses.field(default_factory=list)


def _write(cfg: RunConfig, command: str, out: Outcome) -> Path:
    folder = Path(cfg.output)
    folder.mkdir(parents=True, exist_ok=True)
    stem = f"{command}-{cfg.digest()}"
    doc = {"command": command, "config": cfg.echo(), "status": "fail" if out.failures else "pass",
           "failures": out.failures, "results": _clean(out.results)}
    (folder / f"{stem}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (folder / f"{stem}.csv").write_text(_csv_text(out.header, out.rows))
    return folder / stem


# ---------------------------------------------------------------------------
# commands

def _check(checks: list[dict], name: str, value: float, reference: float, tol: float,
           kind: str, relative: bool = True, one_sided: bool = False) -> None:
    if one_sided:
        gap = value - reference
        passed = value <= reference
    else:
        gap = abs(value - reference) / (abs(reference) if relative and reference else 1.0)
        passed = gap <= tol
    checks.append({"name": name, "value": value, "reference": reference, "gap": gap,
                   "tolerance": tol, "kind": kind, "passed": bool(passed)})


def cmd_verify(cfg: RunConfig) -> Outcome:
    """Deterministic identity suite."""
    model = cfg.model()
    exact = "closed-form"
    quad = "closed-form" if model.white else "quadrature"
    checks: list[dict] = []
    for t in (0.5, 1.0, 2.0):
        _check(checks, f"psi_grid(t={t})", solver.psi_grid(t), kernels.psi(t), 1e-12, exact, relative=False)
    for s in (0.3, 1.0, 2.0):
        _check(checks, f"l2_FG(s={s})", l2_norm_FG_quad(s), l2_norm_FG(s), 1e-5, "quadrature")
    for beta in np.linspace(0.5, 4.5, 5):
        for xi in np.linspace(0.0, 4.0, 5):
            _check(checks, f"I_beta_w(beta={beta:g},xi={xi:g})", I_beta_w_quad(beta, xi),
                   I_beta_w(beta, xi), 1e-8, "quadrature")
    for rep in hilbert.parseval_suite(model):
        # complex pairings: gap of the complex values, real parts reported
        rel = abs(rep.spectral_value - rep.direct_value) / max(abs(rep.direct_value), 1e-300)
        checks.append({"name": f"parseval[{rep.name}]", "value": float(np.real(rep.spectral_value)),
                       "reference": float(np.real(rep.direct_value)), "gap": rel, "tolerance": 1e-5,
                       "kind": "quadrature", "passed": bool(rel <= 1e-5)})
    etas = [0.5, 1.0, 2.0, 5.0]
    for t in cfg.t_grid:
        m = hilbert.max_principle_scan(model, t, [0.0] + etas)
        for eta, v in zip(etas, m[1:]):
            _check(checks, f"max_principle(t={t},eta={eta})", v, m[0] * (1 + 1e-7), 0.0, quad,
                   one_sided=True)
        for eta, v in zip([0.0] + etas, m):
            _check(checks, f"max_principle_dual(t={t},eta={eta})", v,
                   hilbert.max_principle_direct(model, t, eta), 1e-6, quad)
    t9 = np.linspace(0.1, 0.9, 9)
    cz = c0(model)
    for t in t9:
        p0 = kernels.psi0(model, t)
        _check(checks, f"psi0(t={t:.1f})", p0, kernels.psi0_closed(model, t), 1e-8, quad)
        _check(checks, f"psi0_le_c0t(t={t:.1f})", p0, cz * t, 0.0, quad, one_sided=True)
        _check(checks, f"phi_le_gamma_psi0(t={t:.1f})", kernels.phi(model, t),
               big_gamma(model, t) * kernels.psi0_closed(model, t), 0.0, quad, one_sided=True)
    for t in cfg.t_grid:
        _check(checks, f"alpha1_closed_vs_rule(t={t})", kernels.alpha_1_closed(model, t),
               kernels.phi(model, t), 1e-10, exact if model.white else "quadrature")
    for a, b in ((0.3, 0.3), (0.4, 1.0), (1.0, 2.0)):
        _check(checks, f"psi1_dual(a={a},b={b})", kernels.psi1_spectral(model, a, b),
               float(kernels.g_pairing(model, a, b)), 1e-8, quad)
    for t in cfg.t_grid:
        for n in (1, 2, 3):
            rep = kernels.alpha_bound_check(model, n, t, cfg.M_scan)
            for M in cfg.M_scan:
                _check(checks, f"alpha_bound(n={n},t={t},M={M:g})", rep.values[n],
                       rep.bounds[(n, float(M))], 0.0, rep_kind(model, n), one_sided=True)
    dn = kernels.d_norm_constant(model, cfg.T)
    for row in dn.orders:
        _check(checks, f"d_norm(n={row['n']},r={row['r']:g})", row["lhs"], row["bound"], 0.0,
               quad, one_sided=True)
    d2 = kernels.d2_norm_constant(model, cfg.T)
    for row in d2.orders:
        _check(checks, f"d2_norm(r={row['r']:g},theta={row['theta']:g})", row["lhs"], row["bound"],
               0.0, quad, one_sided=True)
    rng = np.random.default_rng(cfg.seed)
    _check(checks, "hermiticity", hilbert.hermiticity_check(rng.standard_normal((16, 16))), 0.0,
           1e-12, exact, relative=False)
    failures = [c["name"] for c in checks if not c["passed"]]
    rows = [[c["name"], c["kind"], c["value"], c["reference"], c["gap"], c["tolerance"],
             int(c["passed"])] for c in checks]
    return Outcome({"checks": checks, "count": len(checks), "failed": len(failures)},
                   ["name", "kind", "value", "reference", "gap", "tolerance", "passed"], rows, failures)


def rep_kind(model: CovarianceModel, n: int) -> str:
    if n == 1:
        return "closed-form"
    return "qmc" if n == 3 else "quadrature"


def cmd_moments(cfg: RunConfig) -> Outcome:
    model, grid = cfg.model(), cfg.grid()
    if cfg.N == 0:
        rep = solver.mc_second_moment(model, grid, cfg.t, cfg.x, 0, cfg.count, cfg.seed)
        return Outcome({"moment": rep.as_dict()}, ["n", "norm2"], [], [])
    coeffs = solver.project_kernels(model, grid, cfg.t, cfg.x, cfg.N)
    rep = solver.mc_second_moment(model, grid, cfg.t, cfg.x, cfg.N, cfg.count, cfg.seed,
                                  cfg.threads, coeffs)
    law = solver.chaos_law_check(coeffs, cfg.count, cfg.seed + 1, cfg.threads)
    failures = []
    if abs(rep.z_discrete) > 3:
        failures.append("second_moment")
    failures += [f"isometry[{n + 1}]" for n, z in enumerate(law.isometry_z()) if abs(z) > 3]
    failures += [f"orthogonality[{k}]" for k, z in law.orthogonality_z().items() if abs(z) > 4]
    alphas = {n: kernels.alpha_n(model, n, cfg.t) for n in range(1, cfg.N + 1)}
    rows = []
    for n in range(1, cfg.N + 1):
        scaled = math.factorial(n) * rep.norms2[n - 1]
        rows.append([n, rep.norms2[n - 1], law.variance[n - 1], law.variance_se[n - 1],
                     law.isometry_z()[n - 1], alphas[n], scaled / alphas[n] - 1])
    return Outcome({"moment": rep.as_dict(), "law": law.as_dict(),
                    "alpha": {str(k): v for k, v in alphas.items()}},
                   ["n", "norm2", "mc_variance", "mc_se", "z", "alpha_n", "discretization_gap"],
                   rows, failures)


def cmd_noise_check(cfg: RunConfig) -> Outcome:
    model, grid = cfg.model(), cfg.grid()
    cov = factorize(cell_covariance(model, grid))
    rec_t = float(np.max(np.abs(cov.L_time @ cov.L_time.T - cov.C_time)))
    rec_s = float(np.max(np.abs(cov.L_space @ cov.L_space.T - cov.C_space)))
    res = {"psd_slack": cov.psd_slack, "reconstruction_time": rec_t, "reconstruction_space": rec_s}
    failures = []
    if max(rec_t, rec_s) > 1e-10:
        failures.append("factor_reconstruction")
    if cfg.count >= 2:
        chk = covariance_check(grid, cov, cfg.seed, cfg.count, cfg.threads)
        res["covariance"] = chk.as_dict()
        if not chk.passed():
            failures.append("empirical_covariance")
    rows = [[k, float(v)] for k, v in sorted(_flatten(res).items())]
    return Outcome(res, ["statistic", "value"], rows, failures)


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def cmd_simulate(cfg: RunConfig) -> Outcome:
    model, grid = cfg.model(), cfg.grid()
    header = ["index", "u"] + [f"I{n}" for n in range(1, cfg.N + 1)] + ["Q"]
    if cfg.count == 0:
        return Outcome({"count": 0}, header, [])
    cov = factorize(cell_covariance(model, grid))
    zeta, inc = sample_increments(grid, cov, cfg.seed, cfg.count, cfg.threads)
    if cfg.N == 0:
        u, I, Q = np.ones(cfg.count), np.zeros((cfg.count, 0)), np.zeros(cfg.count)
    else:
        coeffs = solver.project_kernels(model, grid, cfg.t, cfg.x, cfg.N, cov)
        u, I = solver.solution_batch(coeffs, zeta)
        Q = solver.malliavin_batch(coeffs, zeta)[2]
    if cfg.dump:
        Path(cfg.output).mkdir(parents=True, exist_ok=True)
        write_samples(Path(cfg.output) / f"simulate-{cfg.digest()}.bin", inc)
    rows = [[i, float(u[i])] + [float(v) for v in I[i]] + [float(Q[i])] for i in range(cfg.count)]
    summary = {"count": cfg.count, "mean": float(u.mean()), "second_moment": float(np.mean(u * u)),
               "min": float(u.min()), "max": float(u.max()), "Q_min": float(Q.min()),
               "Q_mean": float(Q.mean())}
    return Outcome(summary, header, rows)


def cmd_density(cfg: RunConfig) -> Outcome:
    model, grid = cfg.model(), cfg.grid()
    if cfg.count < 10_000:
        raise ConfigError("density needs count >= 10000")
    if cfg.N == 0:
        raise ConfigError("density needs N >= 1")
    cov = factorize(cell_covariance(model, grid))
    coeffs = solver.project_kernels(model, grid, cfg.t, cfg.x, cfg.N, cov)
    zeta, _ = sample_increments(grid, cov, cfg.seed, cfg.count, cfg.threads)
    u, _ = solver.solution_batch(coeffs, zeta)
    exact = (1.0, kernels.alpha_n(model, 1, cfg.t)) if cfg.N == 1 else None
    rep = solver.density_report(u, cfg.bandwidth or None, exact=exact)
    failures = []
    if exact is not None and rep.ks_stat > rep.ks_critical:
        failures.append("ks_gaussian")
    rows = [[float(a), float(b)] for a, b in zip(rep.kde_x, rep.kde_y)]
    return Outcome(rep.as_dict(), ["x", "density"], rows, failures)


def cmd_delta_scan(cfg: RunConfig) -> Outcome:
    model = cfg.model()
    rep = solver.delta_scan(model, cfg.scan_grid(), cfg.t, cfg.x, cfg.m, cfg.deltas, cfg.count,
                            cfg.seed, max(cfg.N, 1), cfg.modulus_count)
    failures = []
    if not rep.rhs_decreasing:
        failures.append("rhs_monotone")
    if not rep.rhs[int(np.argmin(rep.deltas))] < rep.rhs[int(np.argmax(rep.deltas))]:
        failures.append("rhs_endpoints")
    rows = [[d, G, g, se, ge, r] for d, G, g, se, ge, r in
            zip(rep.deltas, rep.gamma_delta, rep.g, rep.g_se, rep.g_exact, rep.rhs)]
    return Outcome(rep.as_dict(), ["delta", "gamma_delta", "g", "g_se", "g_exact", "rhs"], rows, failures)


def cmd_constants(cfg: RunConfig) -> Outcome:
    model = cfg.model()
    ms = kernels.second_moment_series(model, cfg.T, 3)
    table = kernels.constants_table(model, cfg.T, ms.partial_sum + ms.tail_bound)
    Ms = sorted(set(cfg.M_scan) | {table.M_T, table.M_T_prime})
    km = {f"{M:g}": K_M(model, M) for M in Ms}
    res = {"table": table.as_dict(), "K_M": km, "series": ms.as_dict()}
    rows = [[k, float(v)] for k, v in table.as_dict().items() if v is not None]
    rows += [[f"K_M[{k}]", v] for k, v in km.items()]
    return Outcome(res, ["name", "value"], rows)


COMMANDS: dict[str, Callable[[RunConfig], Outcome]] = {
    "verify": cmd_verify,
    "moments": cmd_moments,
    "noise-check": cmd_noise_check,
    "simulate": cmd_simulate,
    "density": cmd_density,
    "delta-scan": cmd_delta_scan,
    "constants": cmd_constants,
}


# ---------------------------------------------------------------------------
# argument handling

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chaoswave", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="JSON config file")
        for f in fields(RunConfig):
            sp.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None,
                            help=f"override {f.name} (default {f.default!r})")
    return p


def load_config(args: argparse.Namespace, env: dict[str, str] | None = None) -> RunConfig:
    """Config file, then ``CHAOSWAVE_SEED``, then explicit flags."""
    env = os.environ if env is None else env
    data: dict[str, Any] = {}
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        data.update(json.loads(RunConfig.from_text(text).to_text()))
    if env.get(SEED_ENV):
        data["seed"] = env[SEED_ENV]
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            data[f.name] = v
    return RunConfig.from_dict(data).validate()


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        out = COMMANDS[args.command](cfg)
        path = _write(cfg, args.command, out)
    except (ConfigError, ModelError, GridError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (kernels.ScanExhausted, QuadratureFailure) as exc:
        print(f"budget exhausted: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    print(f"{path}.json")
    if out.failures:
        print("failed: " + ", ".join(out.failures), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
