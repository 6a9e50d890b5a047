"""Command line client of the planning service.

By default requests are served in-process; ``--url`` sends them to a
running ``pardespot serve`` instead. Every command exits nonzero when an
episode aborted.
"""
from __future__ import annotations

import json
import sys

import click

from pardespot.domains.config import load_config, parse_value
from pardespot.harness.results import OUTPUT_ENV
from pardespot.service.schemas import SearchSettings

# flag name, field, type, help
SEARCH_FLAGS = (
    ("--K", "K", int, "scenarios sampled per planning call"),
    ("--gamma", "gamma", float, "discount (default: the domain's)"),
    ("--xi", "xi", float, "target uncertainty fraction of the root gap"),
    ("--c-a", "c_a", float, "action exploration constant"),
    ("--c-o", "c_o", float, "virtual loss constant"),
    ("--max-depth", "max_depth", int, "search and roll-out depth (default: the domain's)"),
    ("--time-budget", "time_budget", float, "planning seconds per step"),
    ("--max-trials", "max_trials", int, "trial cap per planning call"),
    ("--workers", "workers", int, "search workers"),
    ("--search-seed", "seed", int, "scenario seed"),
    ("--backend", "backend", click.Choice(["serial", "parallel"]), "simulation backend"),
    ("--eps-target", "eps_target", float, "stop once the root gap falls to this"),
)
SEARCH_SWITCHES = (
    ("clamp", "clamp bounds to their initial values during backup"),
    ("record-bounds", "record root bounds after every backup"),
    ("trace", "keep a per-trial trace log"),
    ("audit", "audit lock ownership on every tree mutation"),
)


def search_options(fn):
    for flag, field, typ, text in reversed(SEARCH_FLAGS):
        fn = click.option(flag, field, type=typ, default=None, help=text)(fn)
    for name, text in reversed(SEARCH_SWITCHES):
        field = name.replace("-", "_")
        fn = click.option(f"--{name}/--no-{name}", field, default=None, help=text)(fn)
    return fn


def domain_options(fn):
    fn = click.option("--domain-config", type=click.Path(exists=True, dir_okay=False),
                      help="key = value file with domain parameters (may set 'domain')")(fn)
    fn = click.option("--param", "-p", "params", multiple=True, metavar="KEY=VALUE",
                      help="domain parameter, repeatable")(fn)
    fn = click.option("--domain", "-d", default=None, help="domain name")(fn)
    return fn


def experiment_options(fn):
    fn = click.option("--output", "-o", default=None, help=f"result directory (else ${OUTPUT_ENV}, else ./results)")(fn)
    fn = click.option("--seed", default=0, show_default=True, type=int, help="experiment seed")(fn)
    fn = click.option("--step-limit", default=None, type=int, help="steps per episode (default: per domain)")(fn)
    fn = click.option("--particles", default=10_000, show_default=True, type=int, help="belief particles")(fn)
    fn = click.option("--variants", default="serial,hybrid", show_default=True,
                      help="comma separated: serial, parallel-tree-only, parallel-backend-only, hybrid")(fn)
    fn = click.option("--episodes", "-n", default=10, show_default=True, type=int, help="episodes per variant")(fn)
    return fn


def _search(kw) -> dict:
    fields = [f for _, f, _, _ in SEARCH_FLAGS] + [n.replace("-", "_") for n, _ in SEARCH_SWITCHES]
    out = {f: kw.pop(f) for f in fields if kw.get(f) is not None}
    for f in fields:
        kw.pop(f, None)
    SearchSettings(**out)  # validate early for a readable error
    return out


def _domain(kw) -> dict:
    domain = kw.pop("domain")
    params = {}
    cfg_file = kw.pop("domain_config")
    if cfg_file:
        name, file_params = load_config(cfg_file)
        params.update(file_params)
        domain = domain or name
    for item in kw.pop("params"):
        if "=" not in item:
            raise click.BadParameter(f"expected KEY=VALUE, got {item!r}", param_hint="--param")
        k, v = item.split("=", 1)
        params[k.strip()] = parse_value(v.strip())
    return {"domain": domain or "navigation", "domain_params": params}


class Client:
    def __init__(self, url: str | None):
        if url:
            import httpx

            self._http = httpx.Client(base_url=url, timeout=None)
        else:
            import warnings

            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                from fastapi.testclient import TestClient

            from pardespot.service.app import app

            self._http = TestClient(app)

    def post(self, path: str, payload: dict) -> dict:
        resp = self._http.post(path, json=payload)
        if resp.status_code >= 400:
            raise click.ClickException(f"{path} failed ({resp.status_code}): {resp.text}")
        return resp.json()


def _emit(data, as_json: bool, brief: str):
    if as_json:
        click.echo(json.dumps(data, indent=2, sort_keys=True))
    else:
        click.echo(brief)


@click.group()
@click.option("--url", envvar="PARDESPOT_URL", default=None, help="service URL; in-process when omitted")
@click.option("--json", "as_json", is_flag=True, help="print the full JSON response")
@click.pass_context
def main(ctx, url, as_json):
    """Hybrid-parallel belief-tree planner."""
    ctx.obj = {"client": Client(url), "json": as_json}


@main.command("plan")
@domain_options
@search_options
@click.option("--particles", default=10_000, show_default=True, type=int)
@click.option("--belief-seed", default=0, type=int, show_default=True)
@click.option("--tree-out", type=click.Path(dir_okay=False), help="write the tree dump here")
@click.pass_context
def plan_cmd(ctx, particles, belief_seed, tree_out, **kw):
    """Plan once from the initial belief and report tree statistics."""
    body = {**_domain(kw), "search": _search(kw), "particles": particles, "belief_seed": belief_seed,
            "include_tree": bool(tree_out)}
    res = ctx.obj["client"].post("/plan", body)
    if tree_out:
        with open(tree_out, "w") as fh:
            json.dump(res.pop("tree"), fh)
    s = res["stats"]
    _emit(res, ctx.obj["json"],
          f"action={res['action']} nodes={s['node_count']} trials={s['trials']} depth={s['max_depth']} "
          f"bounds=[{s['root_lower']:.4f}, {s['root_upper']:.4f}] elapsed={s['elapsed']:.3f}s stop={s['stop_reason']}")


@main.command("episode")
@domain_options
@search_options
@click.option("--variant", default="hybrid", show_default=True)
@click.option("--particles", default=10_000, show_default=True, type=int)
@click.option("--step-limit", default=None, type=int)
@click.option("--seed", default=0, type=int, show_default=True)
@click.pass_context
def episode_cmd(ctx, variant, particles, step_limit, seed, **kw):
    """Run one closed-loop episode."""
    body = {**_domain(kw), "search": _search(kw), "variant": variant, "particles": particles,
            "step_limit": step_limit, "seed": seed}
    res = ctx.obj["client"].post("/episode", body)
    r = res["record"]
    _emit(res, ctx.obj["json"],
          f"steps={r['step_count']} return={r['discounted_return']:.4f} success={r['success']} "
          f"aborted={r['aborted']} {r['error']}".rstrip())
    if res["aborted"]:
        sys.exit(2)


@main.command("experiment")
@domain_options
@search_options
@experiment_options
@click.pass_context
def experiment_cmd(ctx, episodes, variants, particles, step_limit, seed, output, **kw):
    """Run several episodes per planner variant and write CSV/JSON results."""
    body = {**_domain(kw), "search": _search(kw), "episodes": episodes,
            "variants": [v.strip() for v in variants.split(",") if v.strip()],
            "particles": particles, "step_limit": step_limit, "seed": seed, "output": output}
    res = ctx.obj["client"].post("/experiment", body)
    lines = []
    for v, agg in res["summary"]["variants"].items():
        sp = res["summary"]["speedup"].get(v)
        lines.append(f"{v:>22}: return {agg['return_mean']:.3f} ± {agg['return_se']:.3f}  nodes {agg['nodes_mean']:.1f}"
                     f"  depth {agg['depth_mean']:.2f}  success {agg['success_rate']}  aborted {agg['aborted']}"
                     + (f"  speedup {sp:.2f}" if sp is not None else ""))
    lines.append(f"results: {res['files'].get('summary', '-')}")
    _emit(res, ctx.obj["json"], "\n".join(lines))
    if res["aborted"]:
        sys.exit(2)


@main.command("sweep")
@domain_options
@search_options
@experiment_options
@click.option("--over", "param", required=True, help="parameter to vary: a search field, an experiment field or domain.<name>")
@click.option("--values", required=True, help="comma separated values")
@click.option("--mode", type=click.Choice(["plan", "experiment"]), default="plan", show_default=True)
@click.option("--runs", type=int, default=None, help="planning calls per point in plan mode (default: --episodes)")
@click.pass_context
def sweep_cmd(ctx, param, values, mode, runs, episodes, variants, particles, step_limit, seed, output, **kw):
    """Repeat a planning benchmark or an experiment over parameter values."""
    body = {**_domain(kw), "search": _search(kw), "episodes": episodes,
            "variants": [v.strip() for v in variants.split(",") if v.strip()],
            "particles": particles, "step_limit": step_limit, "seed": seed, "output": output,
            "param": param, "values": [parse_value(v.strip()) for v in values.split(",")], "mode": mode,
            "runs": runs}
    res = ctx.obj["client"].post("/sweep", body)
    lines = []
    for p in res["result"]["points"]:
        parts = [f"{v}: nodes {a['nodes_mean']:.1f} depth {a['depth_mean']:.2f}" for v, a in p["variants"].items()]
        sp = ", ".join(f"{v} {x:.2f}" for v, x in p["speedup"].items())
        lines.append(f"{param}={p['value']}  " + "; ".join(parts) + (f"  speedup [{sp}]" if sp else ""))
    lines.append(f"results: {res['files'].get('sweep', '-')}")
    _emit(res, ctx.obj["json"], "\n".join(lines))
    if res["aborted"]:
        sys.exit(2)


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve_cmd(host, port):
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run("pardespot.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()
