"""Command-line runner: solve, simulate, verify, export, serve."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import opf
from .ledger import LedgerError, import_chain, replay, validate_chain
from .network import FeederError, load_feeder, load_scenario, validate
from .orchestrator import MarketSession, SessionConfig, SessionError

DATA = Path(__file__).parent / "data"


def _load(feeder: str | None, scenario: str | None, periods: int | None):
    """Resolve the scenario from CLI inputs; bundled 6-bus demo when unset."""
    if scenario is None and feeder is None:
        feeder = str(DATA / "feeder6.json")
        scenario = str(DATA / "scenario6.json")
    net = load_feeder(feeder) if feeder else None
    if scenario is None:
        raise click.UsageError("--feeder without --scenario; supply profiles")
    scn = load_scenario(scenario, feeder=net)
    if periods and periods != scn.horizon:
        raise click.UsageError(f"--periods {periods} != scenario horizon {scn.horizon}")
    return scn


def _parse_faults(spec: str) -> dict[int, str]:
    # e.g. "0:crash,2:equivocate"
    out: dict[int, str] = {}
    if not spec:
        return out
    for part in spec.split(","):
        idx, _, kind = part.partition(":")
        out[int(idx)] = kind or "crash"
    return out


@click.group(context_settings={"auto_envvar_prefix": "CES"})
def main():
    """Crowdsourced energy market platform."""


@main.command()
@click.option("--feeder", type=click.Path(exists=True), default=None)
@click.option("--scenario", type=click.Path(exists=True), default=None)
@click.option("--periods", type=int, default=None, help="horizon override (demo only)")
@click.option("--agents", default=None,
              type=click.Choice(["always_accept", "always_reject", "threshold",
                                 "logistic", "none"]),
              help="default response policy for buses without agent config")
@click.option("--seed", type=int, default=42)
@click.option("--out", type=click.Path(), default="results",
              help="artifact directory")
@click.option("--ordering-nodes", type=int, default=None)
@click.option("--faults", default="", help="orderer faults, e.g. '0:crash'")
@click.option("--serve", "serve_port", type=int, default=None,
              help="serve the session over HTTP on this port instead of "
                   "running the loop headlessly")
def run(feeder, scenario, periods, agents, seed, out, ordering_nodes, faults,
        serve_port):
    """Run day-ahead plus the realtime loop; write all artifacts."""
    try:
        scn = _load(feeder, scenario, periods)
        cfg = SessionConfig.from_market(
            scn.market, seed=seed, default_agent=agents,
            ordering_nodes=ordering_nodes)
        if faults:
            cfg.ordering_behaviors = _parse_faults(faults)
        session = MarketSession(scn, cfg)
        if serve_port is not None:
            _serve_session(session, "127.0.0.1", serve_port, seed)
            return
        report = session.run()
    except (FeederError, SessionError, opf.OpfError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "opf.json").write_text(
        json.dumps(session.day_ahead.to_json(), sort_keys=True, indent=1))
    (outdir / "session.json").write_text(json.dumps(report, sort_keys=True, indent=1))
    (outdir / "incentives.csv").write_text(session.incentives_csv())
    (outdir / "schedules.csv").write_text(
        opf.schedules_csv(session.day_ahead, scn))
    (outdir / "dlmp.csv").write_text(opf.dlmp_csv(session.day_ahead))
    (outdir / "events.jsonl").write_text(
        "\n".join(json.dumps(ev, sort_keys=True) for ev in session.events) + "\n")
    from .ledger import export_chain

    export_chain(session.ledger.blocks, outdir / "ledger" / "chain.bin")
    click.echo(f"ok: objective {report['objective']:.2f}, "
               f"{report['ledger_height'] + 1} blocks, artifacts in {outdir}/")


@main.group()
def ledger():
    """Ledger inspection tools."""


@ledger.command("verify")
@click.argument("path", type=click.Path(exists=True))
def ledger_verify(path):
    """Validate hash links and tx roots of a chain file or results dir."""
    p = Path(path)
    if p.is_dir():
        p = p / "chain.bin" if (p / "chain.bin").exists() else p / "ledger" / "chain.bin"
    try:
        blocks = import_chain(p)
    except (LedgerError, FileNotFoundError, OSError) as exc:
        click.echo(f"unreadable chain: {exc}", err=True)
        sys.exit(2)
    bad = validate_chain(blocks)
    if bad is not None:
        click.echo(f"INVALID: first bad height {bad}")
        sys.exit(1)
    led = replay(blocks)
    click.echo(f"ok: {len(blocks)} blocks, state hash {led.state_hash().hex()}")


@main.command()
@click.option("--run", "run_dir", type=click.Path(exists=True), default="results")
@click.option("--period", type=int, required=True)
def dlmp(run_dir, period):
    """Print nodal prices for one period from a results directory."""
    sol = json.loads((Path(run_dir) / "opf.json").read_text())
    duals = sol.get("balance_duals_pu")
    if sol["status"] != "optimal" or duals is None:
        click.echo("no prices: day-ahead not optimal", err=True)
        sys.exit(1)
    if period not in sol["periods"]:
        click.echo(f"period {period} outside horizon", err=True)
        sys.exit(1)
    i = sol["periods"].index(period)
    scale = sol["base_mva"] * sol["dt"]
    for j, bus in enumerate(sol["bus_ids"]):
        click.echo(f"bus {bus}: {duals[i][j] / scale:.4f} $/MWh")


@main.command()
@click.argument("path", type=click.Path(exists=True))
def validate_feeder(path):
    """Check a feeder file against every invariant."""
    try:
        net = load_feeder(path)
    except FeederError as exc:
        click.echo(f"invalid ({exc.code}): {exc}", err=True)
        sys.exit(1)
    problems = validate(net)
    if problems:
        for p in problems:
            click.echo(f"violation: {p}", err=True)
        sys.exit(1)
    click.echo(f"ok: {len(net.buses)} buses, {len(net.lines)} lines, "
               f"{len(net.devices)} devices")


def _serve_session(session: MarketSession, host: str, port: int, seed: int):
    import uvicorn

    from .api import _token_for, create_app
    from .ledger import OPERATOR

    click.echo(f"operator token: {_token_for(seed, OPERATOR)}")
    uvicorn.run(create_app(session), host=host, port=port, log_level="warning")


@main.command()
@click.option("--feeder", type=click.Path(exists=True), default=None)
@click.option("--scenario", type=click.Path(exists=True), default=None)
@click.option("--periods", type=int, default=None)
@click.option("--agents", default="none", help="policy for buses without config")
@click.option("--seed", type=int, default=42)
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
def serve(feeder, scenario, periods, agents, seed, host, port):
    """Start the HTTP service (offers, responses, prices, ledger, events)."""
    scn = _load(feeder, scenario, periods)
    cfg = SessionConfig.from_market(scn.market, seed=seed, default_agent=agents)
    _serve_session(MarketSession(scn, cfg), host, port, seed)


if __name__ == "__main__":
    main()
