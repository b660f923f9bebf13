"""Command-line client and local sandbox runner.

Exit codes: 0 success, 2 validation error, 3 budget refusal, 4 transport error.
"""

from __future__ import annotations

import json
import re
import sys

import click
import numpy as np

from . import wire
from .client import Client, ClientConfig, ProtocolError, ServerRefusal, TransportError
from .config import read_toml
from .errors import SynthVerifyError
from .panel import build_frame, load_csv, load_formula, load_schema
from .posterior import posterior_r, theta_decision
from .regression import clustered_se, fit_ols, fit_per_year
from .verify import CoefficientQuery, Interval, TrendQuery, check_periods

EXIT_OK, EXIT_VALIDATION, EXIT_BUDGET, EXIT_TRANSPORT = 0, 2, 3, 4


class CliFailure(click.ClickException):
    def __init__(self, message, code):
        super().__init__(message)
        self.exit_code = code


def _fail_validation(msg):
    raise CliFailure(msg, EXIT_VALIDATION)


def parse_periods(text: str) -> tuple[tuple[int, int], ...]:
    """``"1988-2003,2003-2011"`` -> ((1988, 2003), (2003, 2011))."""
    out = []
    for part in text.split(","):
        m = re.fullmatch(r"\s*(-?\d+)\s*-\s*(-?\d+)\s*", part)
        if not m:
            _fail_validation(f"cannot parse period {part!r}; expected FIRST-LAST")
        out.append((int(m.group(1)), int(m.group(2))))
    periods = tuple(out)
    try:
        check_periods(periods)
    except SynthVerifyError as exc:
        _fail_validation(str(exc))
    return periods


def split_intervals(text: str) -> list[str]:
    """Split on commas that are not inside brackets."""
    parts, depth, cur = [], 0, ""
    for ch in text:
        if ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append(cur)
            cur = ""
        else:
            cur += ch
    parts.append(cur)
    return [p.strip() for p in parts]


def _interval(text):
    try:
        return Interval.parse(text)
    except SynthVerifyError as exc:
        _fail_validation(str(exc))


def _coef_interval(interval, gamma0, lower, upper):
    given = sum(x is not None for x in (interval, gamma0)) + (lower is not None or upper is not None)
    if given != 1:
        _fail_validation("give exactly one of --interval, --gamma0, or --lower/--upper")
    if interval is not None:
        return _interval(interval)
    if gamma0 is not None:
        return Interval(upper=gamma0)
    return Interval(-np.inf if lower is None else lower, np.inf if upper is None else upper)


def _load_index(path):
    if path is None:
        return None
    doc = read_toml(path)
    table = doc.get("inflation_index", doc)
    return {int(k): float(v) for k, v in table.items()}


# -- rendering -----------------------------------------------------------------


def _fmt(x, digits=3):
    return "-" if x is None else f"{x:.{digits}f}"


def render_release(doc: dict, gamma1: float | None = None, epsilon_note: str = "") -> str:
    rows = [("coefficient / period", "S_noisy", "mode r", "95% CI", "eps")]
    decisions = []
    for rel in doc["releases"]:
        post = rel["posterior"]
        ci = "-" if post is None else f"[{post['ci95'][0]:.3f}, {post['ci95'][1]:.3f}]"
        s = _fmt(rel["S_noisy"], 2)
        if "err_noisy" in rel:
            s += f" (errors ~{rel.get('errors_mode')})"
        rows.append((rel["label"], s, _fmt(post and post["mode"]), ci, f"{rel['epsilon']:g}"))
        if gamma1 is not None and rel.get("err_noisy") is None:
            # client-side post-processing: recompute the posterior from public values
            p = posterior_r(rel["S_noisy"], rel["M"], rel["epsilon"], rel["sensitivity"])
            decisions.append((rel["label"], theta_decision(p, gamma1), p.mass_at_least(gamma1)))
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    for label, theta, mass in decisions:
        lines.append(f"theta[{label}] = {theta}  (P(r >= {gamma1:g}) = {mass:.3f})")
    lines.append(f"epsilon spent {doc['epsilon_spent']:g}{epsilon_note}; "
                 f"analysis total {doc['spent']:g}, remaining {doc['remaining']:g}")
    return "\n".join(lines)


def render_budget(doc: dict) -> str:
    lines = [f"analysis {doc['analysis_id']}: spent {doc['spent']:g} of {doc['cap']:g} "
             f"(remaining {doc['remaining']:g})"]
    for e in doc.get("entries", []):
        scope = e.get("scope_key") or "-"
        lines.append(f"  #{e['entry_id']}  eps={e['epsilon']:g}  scope={scope}")
    return "\n".join(lines)


def _emit(ctx, doc, text):
    if ctx.obj["config"].output == "json":
        click.echo(json.dumps(doc, indent=2))
    else:
        click.echo(text)


# -- commands --------------------------------------------------------------------


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="Client configuration file (TOML, [client] table).")
@click.option("--url", default=None)
@click.option("--token", default=None)
@click.option("--analysis-id", default=None)
@click.option("--format", "output", type=click.Choice(["table", "json"]), default=None)
@click.pass_context
def main(ctx, config_path, url, token, analysis_id, output):
    """Verify regression findings against confidential data and rehearse queries locally."""
    try:
        cfg = ClientConfig.load(config_path, url=url, token=token, analysis_id=analysis_id, output=output)
    except SynthVerifyError as exc:
        _fail_validation(str(exc))
    ctx.obj = {"config": cfg}


def _submit(ctx, envelope, gamma1=None, epsilon_note=""):
    cfg = ctx.obj["config"]
    try:
        cfg.require_remote()
        doc = Client(cfg).verify(envelope)
    except ServerRefusal as exc:
        if exc.kind == "budget_exhausted":
            raise CliFailure(f"refused: privacy budget exhausted (remaining {exc.body.get('remaining', 0):g})",
                             EXIT_BUDGET)
        code = EXIT_VALIDATION if exc.status < 500 else EXIT_TRANSPORT
        raise CliFailure(f"refused ({exc.status}): {exc}", code)
    except (TransportError, ProtocolError) as exc:
        raise CliFailure(str(exc), EXIT_TRANSPORT)
    except SynthVerifyError as exc:
        _fail_validation(str(exc))
    _emit(ctx, doc, render_release(doc, gamma1, epsilon_note))


def _epsilon(ctx, epsilon):
    if epsilon is None:
        eps = ctx.obj["config"].default_epsilon
        return eps, f" (default epsilon {eps:g})"
    return epsilon, ""


def _formula(path):
    try:
        return load_formula(path)
    except (SynthVerifyError, OSError, ValueError) as exc:
        _fail_validation(f"cannot read formula {path}: {exc}")


@main.command("verify-coef")
@click.option("--formula", "formula_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--coefficient", required=True)
@click.option("--interval", default=None, help="e.g. '(-0.031,-0.010)', 'neg' or 'pos'.")
@click.option("--gamma0", type=float, default=None, help="One-sided interval (-inf, gamma0].")
@click.option("--lower", type=float, default=None)
@click.option("--upper", type=float, default=None)
@click.option("--M", "M", type=int, default=None)
@click.option("--epsilon", type=float, default=None)
@click.option("--gamma1", type=float, default=None, help="Apply the theta decision client-side.")
@click.option("--scope", default=None, help="Disjoint scope, e.g. gender=female.")
@click.pass_context
def verify_coef(ctx, formula_path, coefficient, interval, gamma0, lower, upper, M, epsilon, gamma1, scope):
    """Ask whether a coefficient lies in an interval."""
    cfg = ctx.obj["config"]
    eps, note = _epsilon(ctx, epsilon)
    try:
        query = CoefficientQuery(_formula(formula_path), coefficient, _coef_interval(interval, gamma0, lower, upper),
                                 M=M or cfg.default_M, epsilon=eps, gamma1=gamma1)
    except SynthVerifyError as exc:
        _fail_validation(str(exc))
    _submit(ctx, wire.QueryEnvelope(cfg.analysis_id, "coef_verify", query, scope), gamma1, note)


@main.command("verify-trend")
@click.option("--formula", "formula_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--coefficient", required=True)
@click.option("--periods", required=True, help="e.g. 1988-2003,2003-2011")
@click.option("--intervals", required=True, help="One per period: neg, pos or (l,u).")
@click.option("--mode", type=click.Choice(["separate", "composite"]), default="separate")
@click.option("--M", "M", type=int, default=None)
@click.option("--epsilon", type=float, default=None)
@click.option("--scope", default=None)
@click.pass_context
def verify_trend(ctx, formula_path, coefficient, periods, intervals, mode, M, epsilon, scope):
    """Ask whether a coefficient's slope over each period lies in an interval."""
    cfg = ctx.obj["config"]
    eps, note = _epsilon(ctx, epsilon)
    parsed_periods = parse_periods(periods)
    parsed_intervals = tuple(_interval(t) for t in split_intervals(intervals))
    try:
        query = TrendQuery(_formula(formula_path), coefficient, parsed_periods, parsed_intervals,
                           mode=mode, M=M or cfg.default_M, epsilon=eps)
    except SynthVerifyError as exc:
        _fail_validation(str(exc))
    _submit(ctx, wire.QueryEnvelope(cfg.analysis_id, "trend_verify", query, scope), None, note)


@main.command()
@click.option("--analysis-id", "aid", default=None, help="Defaults to the configured analysis.")
@click.pass_context
def budget(ctx, aid):
    """Show the privacy budget of an analysis."""
    cfg = ctx.obj["config"]
    aid = aid or cfg.analysis_id
    if not aid:
        _fail_validation("no analysis id given")
    try:
        doc = Client(cfg).budget(aid)
    except ServerRefusal as exc:
        raise CliFailure(f"refused ({exc.status}): {exc}", EXIT_VALIDATION)
    except (TransportError, ProtocolError) as exc:
        raise CliFailure(str(exc), EXIT_TRANSPORT)
    _emit(ctx, doc, render_budget(doc))


def _load_panel(data, schema):
    try:
        return load_csv(data, load_schema(schema))
    except (SynthVerifyError, OSError) as exc:
        _fail_validation(f"cannot load {data}: {exc}")


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False), help="Training panel CSV.")
@click.option("--schema", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--plan", "plan_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--count", type=int, required=True)
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def synth(data, schema, plan_path, count, seed, out):
    """Fit a synthesis plan and write a synthetic panel CSV."""
    from .synth.sequential import load_plan, synthesize_sequential

    panel = _load_panel(data, schema)
    try:
        plan = load_plan(plan_path)
        result = synthesize_sequential(panel, plan, count, seed)
    except SynthVerifyError as exc:
        _fail_validation(str(exc))
    result.to_csv(out)
    click.echo(f"wrote {result.n_rows} rows for {result.n_entities} entities to {out}")


@main.command("calibrate-m")
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False), help="Synthetic panel CSV.")
@click.option("--schema", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--formula", "formula_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--coefficient", required=True)
@click.option("--interval", default=None)
@click.option("--gamma0", type=float, default=None)
@click.option("--periods", default=None, help="Calibrate a trend query instead.")
@click.option("--intervals", default=None)
@click.option("--mode", type=click.Choice(["separate", "composite"]), default="separate")
@click.option("--candidates", default="10,50,200")
@click.option("--replications", type=int, default=20)
@click.option("--epsilon", type=float, default=1.0)
@click.option("--seed", type=int, default=0)
@click.option("--inflation", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
def calibrate_m_cmd(ctx, data, schema, formula_path, coefficient, interval, gamma0, periods, intervals,
                    mode, candidates, replications, epsilon, seed, inflation):
    """Posterior modes per candidate M on a local panel (no server, no budget)."""
    from .sandbox import calibrate_m

    panel = _load_panel(data, schema)
    formula = _formula(formula_path)
    try:
        Ms = [int(c) for c in candidates.split(",")]
    except ValueError:
        _fail_validation(f"cannot parse candidates {candidates!r}")
    try:
        if periods:
            if not intervals:
                _fail_validation("--intervals is required with --periods")
            query = TrendQuery(formula, coefficient, parse_periods(periods),
                               tuple(_interval(t) for t in split_intervals(intervals)), mode=mode,
                               epsilon=epsilon)
        else:
            query = CoefficientQuery(formula, coefficient, _coef_interval(interval, gamma0, None, None),
                                     epsilon=epsilon)
        rows = calibrate_m(panel, query, Ms, replications, seed, _load_index(inflation))
    except SynthVerifyError as exc:
        _fail_validation(str(exc))
    doc = {"replications": replications, "rows": [r.to_json() for r in rows]}
    lines = [f"{'M':>6}  {'mean':>6}  {'q10':>6}  {'median':>6}  {'q90':>6}"]
    for r in rows:
        q10, q50, q90 = r.quantiles()
        lines.append(f"{r.M:>6}  {r.mean:6.3f}  {q10:6.3f}  {q50:6.3f}  {q90:6.3f}")
    _emit(ctx, doc, "\n".join(lines))


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--schema", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--formula", "formula_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--per-year", is_flag=True, help="Also fit each year separately.")
@click.option("--coefficient", default=None, help="Coefficient to show per year.")
@click.option("--inflation", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
def analyze(ctx, data, schema, formula_path, per_year, coefficient, inflation):
    """Fit a regression locally with entity-clustered standard errors."""
    panel = _load_panel(data, schema)
    try:
        frame = build_frame(panel, _formula(formula_path), _load_index(inflation))
        fit = fit_ols(frame)
        fit = fit.with_clustered_se(clustered_se(frame, fit))
        doc = {"fit": fit.to_json()}
        lines = [f"{'term':<32} {'estimate':>10} {'cluster SE':>10}"]
        for name, b in fit.coefficients.items():
            lines.append(f"{name:<32} {b:>10.4f} {fit.se_clustered[name]:>10.4f}")
        if fit.dropped_columns:
            lines.append("dropped (collinear): " + ", ".join(sorted(fit.dropped_columns)))
        lines.append(f"n = {fit.n_rows}")
        if per_year:
            path = fit_per_year(frame)
            name = coefficient or next((c for c in fit.coefficients if c != "(Intercept)"), None)
            series = path.coefficient(name) if name else {}
            doc["per_year"] = {"coefficient": name, "estimates": {str(t): v for t, v in series.items()}}
            lines.append(f"per-year {name}:")
            lines.extend(f"  {t}  {_fmt(None if np.isnan(v) else v, 4)}" for t, v in series.items())
    except SynthVerifyError as exc:
        _fail_validation(str(exc))
    _emit(ctx, doc, "\n".join(lines))


@main.command()
@click.option("--confidential", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--synthetic", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--schema", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--keys", required=True, help="Comma-separated key variables.")
@click.option("--sensitive", required=True)
@click.option("--threshold", type=float, required=True)
@click.pass_context
def risk(ctx, confidential, synthetic, schema, keys, sensitive, threshold):
    """Attribute disclosure risk of a synthetic panel."""
    from .synth.risk import assess_attribute_risk

    conf = _load_panel(confidential, schema)
    syn = _load_panel(synthetic, schema)
    try:
        report = assess_attribute_risk(conf, syn, [k.strip() for k in keys.split(",")], sensitive, threshold)
    except (SynthVerifyError, ValueError) as exc:
        _fail_validation(str(exc))
    text = (f"{report.n_at_risk} of {report.n_entities} entities ({report.fraction_at_risk:.1%}) at or above "
            f"threshold {threshold:g}; {report.n_no_match} without a synthetic match")
    _emit(ctx, report.to_json(), text)


@main.command()
@click.option("--config", "server_config", required=True, type=click.Path(exists=True, dir_okay=False))
def serve(server_config):
    """Run the verification server."""
    from .server import ServerConfig, serve as run

    try:
        cfg = ServerConfig.load(server_config)
    except (SynthVerifyError, KeyError, OSError) as exc:
        _fail_validation(f"bad server configuration: {exc}")
    run(cfg)


if __name__ == "__main__":
    sys.exit(main())
