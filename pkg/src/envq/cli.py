"""Command-line front end.

Exit codes: 0 success, 1 model error, 2 negative verdict under ``--strict``,
64 usage error.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import numpy as np

from envq import ct_solver, embedded, mg1, models, numerics, sim
from envq.env_core import ModelSpec, load_model, validate

EXIT_MODEL = 1
EXIT_VERDICT = 2
EXIT_USAGE = 64


class VerdictFailure(Exception):
    pass


def _floats(text: str | None):
    if text is None:
        return None
    vals = [float(x) for x in str(text).split(",") if x.strip()]
    return vals[0] if len(vals) == 1 else vals


def _label(s) -> str:
    return "/".join(map(str, s)) if isinstance(s, tuple) else str(s)


def _num(x: float) -> str:
    return repr(float(x))


def model_options(f):
    opts = [
        click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), help="model JSON file"),
        click.option("--builder", type=click.Choice(["rs", "rq", "rs-phase", "rq-phase", "tandem", "sensor",
                                                     "maintenance", "inventory-production"])),
        click.option("--r", "r", type=int),
        click.option("--S", "S", type=int),
        click.option("--Q", "Q", type=int),
        click.option("--N", "N", type=int),
        click.option("--lambda", "lam", help="arrival rate or comma list lambda(0..)"),
        click.option("--mu", help="service rate or comma list mu(1..)"),
        click.option("--nu", help="replenishment/breakdown rate(s)"),
        click.option("--beta", type=float),
        click.option("--b", "weights", help="phase weights b(1..L)"),
        click.option("--alpha", type=float),
        click.option("--a", "a_rate", type=float),
        click.option("--s", "s_rate", type=float),
        click.option("--nu-m", type=float),
        click.option("--nu-r", type=float),
        click.option("--capacity", type=int, help="finite waiting room N (levels 0..N+1)"),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def _need(**kw):
    missing = [k for k, v in kw.items() if v is None]
    if missing:
        raise click.UsageError(f"missing option(s): {', '.join('--' + m for m in missing)}")


def resolve_model(o: dict) -> ModelSpec:
    if (o["model_path"] is None) == (o["builder"] is None):
        raise click.UsageError("give exactly one of --model or --builder")
    if o["model_path"]:
        model = load_model(o["model_path"])
    else:
        b = o["builder"]
        lam, mu, nu = _floats(o["lam"]), _floats(o["mu"]), _floats(o["nu"])
        _need(**{"lambda": lam, "mu": mu})
        if b == "rs":
            _need(r=o["r"], S=o["S"], nu=nu)
            model = models.build_rs(o["r"], o["S"], lam, mu, nu)[0]
        elif b == "rq":
            _need(r=o["r"], Q=o["Q"], nu=nu)
            model = models.build_rq(o["r"], o["Q"], lam, mu, nu)[0]
        elif b in ("rs-phase", "rq-phase"):
            _need(r=o["r"], beta=o["beta"], b=o["weights"])
            w = np.atleast_1d(_floats(o["weights"]))
            if b == "rs-phase":
                _need(S=o["S"])
                model = models.build_rs_phase(models.PhaseLeadTimeSpec(o["beta"], tuple(w), o["r"], S=o["S"]), lam, mu)[0]
            else:
                _need(Q=o["Q"])
                model = models.build_rq_phase(models.PhaseLeadTimeSpec(o["beta"], tuple(w), o["r"], Q=o["Q"]), lam, mu)
        elif b == "tandem":
            _need(N=o["N"], nu=nu)
            model = models.build_tandem(o["N"], lam, mu, nu)[0]
        elif b == "sensor":
            _need(alpha=o["alpha"], beta=o["beta"], a=o["a_rate"], s=o["s_rate"])
            model = models.build_sensor_node(lam, mu, o["alpha"], o["beta"], o["a_rate"], o["s_rate"])[0]
        elif b == "maintenance":
            _need(N=o["N"], nu=nu, nu_m=o["nu_m"], nu_r=o["nu_r"])
            spec = models.MaintenanceSpec(float(np.atleast_1d(lam)[0]), float(np.atleast_1d(mu)[0]), nu,
                                          o["nu_m"], o["nu_r"], N=o["N"])
            model = models.build_maintenance(spec)[0]
        else:
            _need(r=o["r"], S=o["S"], nu=nu)
            model = models.build_inventory_production(o["r"], o["S"], lam, mu, nu)
    if o.get("capacity") is not None:
        model = model.with_queue(capacity=o["capacity"])
    return model


def write_table(path: Path, rows, header=("level", "state", "value")) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _joint_rows(states, pi: np.ndarray):
    return [(n, _label(s), _num(pi[n, i])) for n in range(pi.shape[0]) for i, s in enumerate(states)]



def _emit_solution(out: Path, stem: str, model: ModelSpec, sol: ct_solver.ProductFormSolution, levels: int) -> None:
    doc = {"model": model.name, "verdict": sol.verdict, "reason": sol.reason,
           "C": None if not np.isfinite(sol.C) else float(sol.C),
           "theta": None if sol.theta is None else {_label(s): float(v) for s, v in zip(model.env.states, sol.theta)},
           "diagnostics": {k: v for k, v in sol.diagnostics.items()}}
    write_json(out / f"{stem}.json", doc)
    if sol.ok:
        top = levels if model.queue.top_level is None else min(levels, model.queue.top_level)
        write_table(out / f"{stem}.csv", _joint_rows(model.env.states, sol.pi(top)))
        click.echo(f"{sol.verdict}  C = {sol.C:.12g}")
        for s, v in zip(model.env.states, sol.theta):
            click.echo(f"  theta({_label(s)}) = {v:.12g}")
    else:
        (out / f"{stem}.csv").unlink(missing_ok=True)
        click.echo(f"{sol.verdict}: {sol.reason}")


@click.group()
@click.option("--out", type=click.Path(file_okay=False), default="envq_out", show_default=True,
              help="directory for CSV/JSON artifacts")
@click.option("--strict", is_flag=True, help="exit 2 on NotProductForm/NotErgodic verdicts")
@click.pass_context
def cli(ctx, out, strict):
    """Product-form analysis of single-server systems in a random environment."""
    ctx.obj = {"out": Path(out), "strict": strict}


@cli.command("validate")
@model_options
def validate_cmd(**o):
    """Check R, V and the flow condition."""
    model = resolve_model(o)
    report = validate(model)
    click.echo(str(report))
    if not report.ok:
        sys.exit(EXIT_MODEL)


def _verdict(ctx, ok: bool):
    if not ok and ctx.obj["strict"]:
        raise VerdictFailure()


@cli.command("solve")
@model_options
@click.option("--levels", type=int, default=30, show_default=True)
@click.pass_context
def solve_cmd(ctx, levels, **o):
    """Continuous-time product form (infinite waiting room)."""
    model = resolve_model(o)
    sol = ct_solver.solve_product_form(model)
    _emit_solution(ctx.obj["out"], "solve", model, sol, levels)
    _verdict(ctx, sol.ok)


@cli.command("solve-finite")
@model_options
@click.pass_context
def solve_finite_cmd(ctx, **o):
    """Product form for a finite waiting room (needs --capacity or a model capacity)."""
    model = resolve_model(o)
    if model.queue.capacity is None:
        raise click.UsageError("solve-finite needs a finite capacity")
    sol = ct_solver.solve_product_form_finite(model)
    _emit_solution(ctx.obj["out"], "solve_finite", model, sol, model.queue.top_level)
    _verdict(ctx, sol.ok)


@cli.command("embedded")
@model_options
@click.option("--levels", type=int, default=30, show_default=True)
@click.pass_context
def embedded_cmd(ctx, levels, **o):
    """Departure-epoch product form for exponential service."""
    model = resolve_model(o)
    sol = embedded.solve_embedded(model)
    out = ctx.obj["out"]
    write_table(out / "embedded.csv", _joint_rows(model.env.states, sol.pi_hat(levels)))
    write_json(out / "embedded.json", {
        "model": model.name,
        "theta_hat": {_label(s): float(v) for s, v in zip(model.env.states, sol.theta_hat)},
        "L": [_label(s) for s in sol.L],
        "inessential": [_label(s) for s in sol.inessential],
        "period": sol.period,
        "route_gap": sol.diagnostics["route_gap"],
    })
    for s, v in zip(model.env.states, sol.theta_hat):
        click.echo(f"  theta_hat({_label(s)}) = {v:.12g}")
    click.echo(f"L = {[_label(s) for s in sol.L]}  inessential = {[_label(s) for s in sol.inessential]}  "
               f"period = {sol.period}")


def _law(text: str) -> mg1.ServiceLaw:
    kind, _, rest = text.partition(":")
    vals = [float(x) for x in rest.split(",") if x]
    try:
        if kind == "deterministic":
            return mg1.ServiceLaw.deterministic(*vals)
        if kind == "exponential":
            return mg1.ServiceLaw.exponential(*vals)
        if kind == "erlang":
            return mg1.ServiceLaw.erlang(int(vals[0]), vals[1])
        if kind == "phase":
            return mg1.ServiceLaw.phase_mixture(vals[:-1], vals[-1])
    except (TypeError, IndexError) as exc:
        raise click.UsageError(f"bad service law {text!r}: {exc}")
    raise click.UsageError(f"unknown service law {kind!r}")


@cli.command("mg1")
@click.option("--lambda", "lam", type=float, required=True)
@click.option("--service", "law", required=True,
              help="deterministic:d | exponential:rate | erlang:k,rate | phase:b1,..,bL,beta")
@click.option("--env", "env_kind", type=click.Choice(["single", "zero-lead", "zero-s", "vacation"]),
              default="single", show_default=True)
@click.option("--r", "r", type=int, default=0)
@click.option("--S", "S", type=int, default=1)
@click.option("--nu", type=float, default=1.0)
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False),
              help="environment from a model file (queue rates ignored)")
@click.pass_context
def mg1_cmd(ctx, lam, law, env_kind, r, S, nu, model_path):
    """Tensor-product departure law for interference-free environments."""
    if model_path:
        env = load_model(model_path).env
    elif env_kind == "single":
        env = models._env(["up"], set(), {}, {("up", "up"): 1.0})
    elif env_kind == "zero-lead":
        env = models.zero_lead_time_env(r, S)
    elif env_kind == "zero-s":
        env = models.zero_s_env(S, nu)
    else:
        env = models.vacation_env(nu)
    try:
        sol = mg1.mg1_product_form(mg1.HessenbergKernel.single(lam, _law(law)), env)
    except mg1.NotErgodic as exc:
        click.echo(f"NotErgodic: {exc}")
        _verdict(ctx, False)
        return
    out = ctx.obj["out"]
    write_table(out / "mg1.csv", _joint_rows(env.states, sol.pi_hat))
    write_json(out / "mg1.json", {
        "theta_hat": {_label(s): float(v) for s, v in zip(env.states, sol.theta_hat)},
        "xi_hat_head": [float(x) for x in sol.xi_hat[:10]],
        "levels": int(sol.xi_hat.size),
        "residual": sol.residual,
    })
    click.echo(f"levels = {sol.xi_hat.size}  residual = {sol.residual:.3e}")
    for s, v in zip(env.states, sol.theta_hat):
        click.echo(f"  theta_hat({_label(s)}) = {v:.12g}")


@cli.command("counterexample")
@click.option("--lambda", "lam", type=float, default=1.0, show_default=True)
@click.option("--mu", type=float, default=2.0, show_default=True)
@click.option("--nu", type=float, default=3.0, show_default=True)
@click.pass_context
def counterexample_cmd(ctx, lam, mu, nu):
    """M/D/1 with a (1,2) lost-sales inventory: test the would-be product form."""
    res = mg1.md1_inventory_counterexample(lam, mu, nu)
    chain = mg1.solve_counterexample_chain(lam, mu, nu)
    write_json(ctx.obj["out"] / "counterexample.json", {
        "ratio_level0": res.ratio_level0, "ratio_level1": res.ratio_level1,
        "product_form_refuted": res.product_form_refuted,
        "marginal_gap": chain.marginal_gap, "rank_one_residual": chain.rank_one_residual,
    })
    click.echo(f"ratio at level 0: {res.ratio_level0:.6f}")
    click.echo(f"ratio at level 1: {res.ratio_level1:.6f}")
    click.echo("product form refuted" if res.product_form_refuted else "product form not refuted")
    click.echo(f"direct solve: level marginal gap {chain.marginal_gap:.2e}, "
               f"rank-one L1 residual {chain.rank_one_residual:.4f}")
    _verdict(ctx, not res.product_form_refuted)


@cli.command("optimize-maintenance")
@click.option("--lambda", "lam", type=float, required=True)
@click.option("--mu", type=float, required=True)
@click.option("--nu-m", type=float, required=True)
@click.option("--nu-r", type=float, required=True)
@click.option("--c-m", type=float, default=0.0)
@click.option("--c-r", type=float, default=0.0)
@click.option("--c-b", type=float, default=0.0)
@click.option("--nu", type=float, help="constant breakdown rate")
@click.option("--nu-slope", type=float, help="breakdown rate slope * k after k services")
@click.option("--n-min", type=int, default=1, show_default=True)
@click.option("--n-max", type=int, default=100, show_default=True)
@click.pass_context
def optimize_cmd(ctx, lam, mu, nu_m, nu_r, c_m, c_r, c_b, nu, nu_slope, n_min, n_max):
    """Cost curve g(N) and the optimal maintenance threshold."""
    if (nu is None) == (nu_slope is None):
        raise click.UsageError("give exactly one of --nu or --nu-slope")
    rate = nu if nu is not None else (lambda k, c=nu_slope: c * k)
    spec = models.MaintenanceSpec(lam, mu, rate, nu_m, nu_r, c_m, c_r, c_b)
    opt = models.optimize_maintenance(spec, range(n_min, n_max + 1))
    out = ctx.obj["out"]
    write_table(out / "maintenance_g.csv", [(int(n), _num(g)) for n, g in zip(opt.N, opt.g)], header=("N", "g"))
    write_json(out / "maintenance.json", {"N_star": opt.N_star, "g_min": float(opt.g.min()), "trend": opt.trend})
    click.echo(f"N* = {opt.N_star}  g(N*) = {opt.g.min():.10g}")
    if opt.trend is not None:
        click.echo({1: "g increasing in N", -1: "g decreasing in N", 0: "g constant in N"}[opt.trend])


@cli.command("simulate")
@model_options
@click.option("--events", type=int, default=10**6, show_default=True)
@click.option("--seed", type=int, default=None, help="defaults to $ENVQ_SEED or 0")
@click.option("--service", "law", default=None, help="general service law (default exponential from --mu)")
@click.pass_context
def simulate_cmd(ctx, events, seed, law, **o):
    """Event-driven simulation with batch-means standard errors."""
    model = resolve_model(o)
    est = sim.simulate(model, events, seed, service=_law(law) if law else None)
    out = ctx.obj["out"]
    states = model.env.states
    rows = [(n, _label(s), _num(est.occupancy[n, i]), _num(est.occupancy_se[n, i]),
             _num(est.departures[n, i]), _num(est.departures_se[n, i]))
            for n in range(est.occupancy.shape[0]) for i, s in enumerate(states)]
    write_table(out / "simulate.csv", rows, header=("level", "state", "value", "se", "departure_value", "departure_se"))
    env_t, env_se = est.env_marginal()
    write_json(out / "simulate.json", {"seed": est.seed, "events": est.events, "departures": est.n_departures,
                                       "env_marginal": {_label(s): float(v) for s, v in zip(states, env_t)}})
    click.echo(f"seed = {est.seed}  events = {est.events}  departures = {est.n_departures}")
    for s, v, e in zip(states, env_t, env_se):
        click.echo(f"  P(Y = {_label(s)}) = {v:.6f} +- {e:.6f}")


def example_matrix(lam: float = 1.0) -> tuple[np.ndarray, list[int]]:
    """Six-state test matrix: K_W = {1, 2} (indices 0, 1), blocking states 3..6."""
    n = 6
    V = np.zeros((n, n))
    for a, b in [(2, 3), (3, 2), (4, 3), (4, 6), (5, 4), (6, 3)]:
        V[a - 1, b - 1] = 1.0
    np.fill_diagonal(V, -V.sum(axis=1))
    w = [0, 1]
    M = -lam * np.diag([1.0 if i in w else 0.0 for i in range(n)]) + V
    return M, w


@cli.command("check-invertible")
@click.option("--matrix", "matrix_path", type=click.Path(exists=True, dir_okay=False),
              help='JSON {"M": [[...]], "K_W": [indices]}')
@click.option("--example", is_flag=True, help="use the built-in six-state example")
def check_invertible_cmd(matrix_path, example):
    """Certify invertibility by diagonal dominance and the flow condition."""
    if example == bool(matrix_path):
        raise click.UsageError("give exactly one of --matrix or --example")
    if example:
        M, w = example_matrix()
    else:
        doc = json.loads(Path(matrix_path).read_text())
        M, w = np.asarray(doc["M"], dtype=float), list(doc["K_W"])
    verdict = numerics.check_flow_invertible(M, w)
    click.echo(verdict.status + (f" witness={list(verdict.witness)}" if verdict.witness else "")
               + (f" ({verdict.reason})" if verdict.reason else ""))
    if not verdict.certified:
        sys.exit(EXIT_MODEL)


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, prog_name="envq", standalone_mode=False)
    except click.exceptions.UsageError as exc:
        click.echo(exc.format_message() if hasattr(exc, "format_message") else str(exc), err=True)
        if exc.ctx is not None:
            click.echo(exc.ctx.get_usage(), err=True)
        return EXIT_USAGE
    except click.exceptions.Abort:
        return EXIT_USAGE
    except VerdictFailure:
        return EXIT_VERDICT
    except SystemExit as exc:
        return int(exc.code or 0)
    except (ValueError, KeyError, ArithmeticError, json.JSONDecodeError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_MODEL
    return 0


def run() -> None:
    sys.exit(main())
