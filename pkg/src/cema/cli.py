"""Command-line front end: run scenarios, answer queries, run sweeps, serve.

Exit codes: 0 success, 2 validation error, 3 degenerate dataset.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .causal import (
    ALPHA_SCHEDULE,
    CausalConfig,
    DegenerateDatasetError,
    SlicePlan,
    sweep_alpha,
    sweep_sample_size,
)
from .engine import Engine
from .explain import ConversationState, default_mode, realise
from .query import QueryError, UnmatchedQueryError, parse_query
from .simulator import run as run_scenario, write_jsonl
from .world import ScenarioError, load_scenario

VALIDATION_EXIT = 2
DEGENERATE_EXIT = 3


def _load_scenario(path: str):
    try:
        return load_scenario(Path(path).read_text())
    except (OSError, ScenarioError) as e:
        raise click.ClickException(f"scenario: {e}") from None


def _load_query(path: str):
    try:
        return parse_query(Path(path).read_text())
    except (OSError, QueryError, json.JSONDecodeError) as e:
        raise click.ClickException(f"query: {e}") from None


@click.group()
def main():
    """Counterfactual causal explanations for multi-agent driving."""


@main.command(name="run")
@click.argument("scenario", type=click.Path(exists=True))
@click.option("--seed", default=21, show_default=True)
@click.option("--steps", default=None, type=int,
              help="Simulation length in timesteps (default from the scenario).")
@click.option("--out", default=None, type=click.Path(),
              help="Write the trace as JSON lines.")
def run_cmd(scenario, seed, steps, out):
    """Simulate a scenario and print a summary."""
    sc = _load_scenario(scenario)
    steps = steps if steps is not None else int(sc.document.get("max_steps", 280))
    trace = run_scenario(sc, steps, seed)
    if out:
        write_jsonl(trace, out)
        click.echo(f"wrote {trace.length} frames to {out}")
    ego = trace.ego_id
    from .world import label_runs

    for man, mac, a, b in label_runs(trace.labels(ego), trace.start):
        click.echo(f"ego [{a:4d},{b:4d}] {man} / {mac}")


@main.command(name="query")
@click.argument("scenario", type=click.Path(exists=True))
@click.argument("query", type=click.Path(exists=True))
@click.option("--k", "--K", "k", default=None, type=int, help="Sample count K.")
@click.option("--alpha", default=None, type=float, help="Smoothing strength.")
@click.option("--seed", default=21, show_default=True)
@click.option("--steps", default=None, type=int)
@click.option("--out", default=None, type=click.Path(), help="Report JSON path.")
@click.option("--text/--no-text", default=True, show_default=True,
              help="Print the realised answer.")
@click.option("--mode", default=None,
              type=click.Choice(["teleological", "mechanistic", "associative"]))
@click.option("--replan", is_flag=True,
              help="Re-run MCTS per counterfactual sample instead of memoising.")
def query_cmd(scenario, query, k, alpha, seed, steps, out, text, mode, replan):
    """Answer a query about a scenario's ego."""
    sc = _load_scenario(scenario)
    q = _load_query(query)
    cfg = CausalConfig(replan=replan)
    engine = Engine(sc, seed=seed, steps=steps, causal_cfg=cfg)
    try:
        report = engine.answer(q, K=k, alpha=alpha, seed=seed)
    except (QueryError, UnmatchedQueryError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(VALIDATION_EXIT)
    except DegenerateDatasetError as e:
        click.echo(f"degenerate dataset: {e}", err=True)
        sys.exit(DEGENERATE_EXIT)
    payload = report.to_json()
    if out:
        Path(out).write_text(payload)
    else:
        click.echo(payload)
    if text:
        m = mode or default_mode(q)
        try:
            exp = realise(report, q, m)
            click.echo(exp.text)
        except Exception as e:
            if report.degenerate.get("teleological") and report.degenerate.get("mechanistic"):
                click.echo(f"degenerate dataset: {e}", err=True)
                sys.exit(DEGENERATE_EXIT)
            click.echo(f"realisation unavailable: {e}", err=True)


@main.command(name="sweep")
@click.argument("kind", type=click.Choice(["size", "alpha"]))
@click.argument("scenario", type=click.Path(exists=True))
@click.argument("query", type=click.Path(exists=True))
@click.option("--seed", default=21, show_default=True)
@click.option("--out", default=None, type=click.Path())
@click.option("--sizes", default="5:100:5", show_default=True,
              help="start:stop:step for the size sweep.")
@click.option("--repeats", default=50, show_default=True)
@click.option("--k", "--K", "k", default=50, show_default=True,
              help="Dataset size for the alpha sweep.")
@click.option("--master", default=300, show_default=True,
              help="Master pool size for the size sweep.")
def sweep_cmd(kind, scenario, query, seed, out, sizes, repeats, k, master):
    """Robustness sweeps over sample size or smoothing strength."""
    sc = _load_scenario(scenario)
    q = _load_query(query)
    engine = Engine(sc, seed=seed)
    try:
        res = engine.resolve(q)
    except (QueryError, UnmatchedQueryError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(VALIDATION_EXIT)
    from .causal import RollbackConfig, rollback

    cfg = engine.causal_cfg
    tau, _ = rollback(engine.factual, max(res.window.u, 1),
                      RollbackConfig(cfg.tau_min_s, cfg.tau_max_s, "mechanistic"))
    plan = SlicePlan((max(res.window.u, tau + 2), engine.factual.horizon))
    if kind == "size":
        lo, hi, step = (int(v) for v in sizes.split(":"))
        master_ds = engine.sampler.sample(res, tau, master, cfg.alpha, seed=seed)
        result = sweep_sample_size(master_ds, plan, cfg.thresholds, cfg,
                                   sizes=range(lo, hi + 1, step),
                                   repeats=repeats, seed=seed)
        payload = json.dumps(result.as_dict(), sort_keys=True)
    else:
        entries = sweep_alpha(engine.sampler, res, tau, plan,
                              alphas=ALPHA_SCHEDULE, K=k,
                              thresholds=cfg.thresholds, cfg=cfg, seed=seed)
        payload = json.dumps(entries, sort_keys=True)
    if out:
        Path(out).write_text(payload)
        click.echo(f"wrote {out}")
    else:
        click.echo(payload)


@main.command(name="serve")
@click.option("--port", default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--scenarios", "scenario_dir", default=None, type=click.Path(exists=True),
              help="Directory of scenario JSON files (default: built-ins).")
@click.option("--state-dir", default=None, type=click.Path(),
              help="Persist session state as JSON under this directory.")
@click.option("--frontend", default=None, type=click.Path(exists=True),
              help="Static directory for the browser client.")
def serve_cmd(port, host, scenario_dir, state_dir, frontend):
    """Serve the HTTP API (and optionally the browser client)."""
    import uvicorn

    from .http import build_app

    app = build_app(scenario_dir=scenario_dir, state_dir=state_dir,
                    frontend_dir=frontend)
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
