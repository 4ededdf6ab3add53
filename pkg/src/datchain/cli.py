"""Operator command line: run a node, manage keys, audit ledgers, simulate."""

from __future__ import annotations

import os
import sys
from dataclasses import replace
from pathlib import Path

import click

from datchain import market
from datchain.errors import DatchainError, StateDivergence
from datchain.keys import KeyPair
from datchain.ledger import Block, ChainState, append_block, verify_chain
from datchain.netsim import (
    CSV_COLUMNS,
    ENGINES,
    SimScenario,
    compare_engines,
    load_scenario,
    metrics_row,
    run_scenario,
)
from datchain.node import LEDGER_FILE, DatchainNode, load_node_config
from datchain.store import RECORD_BLOCK, RECORD_SITE, RecordFile
from datchain.tangle import TangleSite, genesis_site_id, insert_site, tangle_genesis, verify_tangle


@click.group()
def main():
    """Encrypted sensor-data marketplace on a local ledger."""


@main.command("keygen")
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
def keygen(out_path: Path):
    """Generate an account keypair; private seed hex goes to --out."""
    keypair = KeyPair.generate()
    fd = os.open(out_path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
    try:
        os.write(fd, keypair.private_bytes().hex().encode("ascii") + b"\n")
    finally:
        os.close(fd)
    click.echo(f"address: {keypair.address.hex()}")
    click.echo(f"public_key: {keypair.public_key.hex()}")
    click.echo(f"private key written to {out_path}")


@main.group("node")
def node_group():
    """Run and inspect a marketplace node."""


@node_group.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, path_type=Path))
def node_run(config_path: Path):
    """Start the HTTP service for the configured node."""
    from datchain.service import run_service

    config = load_node_config(config_path)
    data_dir = os.environ.get("DATCHAIN_DATA_DIR")
    if data_dir:
        config = replace(config, data_dir=Path(data_dir))
    node = DatchainNode(config)
    click.echo(
        f"datchain node on {config.host}:{config.port} "
        f"({config.ledger_mode}/{config.engine}, height {node.height()})"
    )
    run_service(node)


def _read_ledger(data_dir: Path, chain_id: str):
    """Load persisted records; returns ('chain', ChainState) or ('tangle', TangleState)."""
    records = RecordFile(data_dir / LEDGER_FILE)
    if not records.exists() or records.count() == 0:
        raise click.ClickException(f"no ledger found under {data_dir}")
    rows = records.read_all()
    rtype = rows[0][0]
    if rtype == RECORD_BLOCK:
        state = ChainState.from_genesis(Block.decode(rows[0][1]))
        for i, (rt, raw) in enumerate(rows[1:], start=1):
            if rt != RECORD_BLOCK:
                raise click.ClickException(f"record {i}: unexpected type {rt}")
            try:
                append_block(state, Block.decode(raw))
            except DatchainError as exc:
                raise click.ClickException(f"block record {i} rejected: {exc}") from exc
        return "chain", state
    if rtype == RECORD_SITE:
        expected = genesis_site_id(chain_id)
        genesis = TangleSite.decode(rows[0][1], genesis_id=expected)
        if genesis.site_id != expected:
            raise click.ClickException("genesis site does not match --chain-id")
        state = tangle_genesis(chain_id)
        for i, (rt, raw) in enumerate(rows[1:], start=1):
            if rt != RECORD_SITE:
                raise click.ClickException(f"record {i}: unexpected type {rt}")
            try:
                insert_site(state, TangleSite.decode(raw))
            except DatchainError as exc:
                raise click.ClickException(f"site record {i} rejected: {exc}") from exc
        return "tangle", state
    raise click.ClickException(f"unknown leading record type {rtype}")


@main.group("ledger")
def ledger_group():
    """Ledger audits."""


@ledger_group.command("verify")
@click.option("--data-dir", "data_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--chain-id", default="datchain", show_default=True)
def ledger_verify(data_dir: Path, chain_id: str):
    """Recompute every hash and link; exit 0 iff the ledger is intact."""
    try:
        mode, state = _read_ledger(data_dir, chain_id)
    except DatchainError as exc:
        raise click.ClickException(f"ledger rejected while loading: {exc}") from exc
    report = verify_chain(state) if mode == "chain" else verify_tangle(state)
    if report.valid:
        units = state.height + 1 if mode == "chain" else state.site_count()
        click.echo(f"ledger OK: {mode}, {units} records")
        return
    bad = report.first_bad_index if mode == "chain" else report.first_bad_ordinal
    click.echo(f"ledger INVALID at {mode} record {bad}: {report.reason}", err=True)
    sys.exit(1)


@main.group("market")
def market_group():
    """Marketplace state audits."""


@market_group.command("replay")
@click.option("--data-dir", "data_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--chain-id", default="datchain", show_default=True)
def market_replay(data_dir: Path, chain_id: str):
    """Rebuild market state from the ledger; exit 0 iff replay is clean."""
    try:
        mode, state = _read_ledger(data_dir, chain_id)
    except DatchainError as exc:
        raise click.ClickException(f"ledger rejected while loading: {exc}") from exc
    if mode == "chain":
        txs = [tx for block in state.blocks for tx in block.transactions]
    else:
        txs = [
            state.sites[sid].payload
            for sid in state.order
            if state.sites[sid].payload is not None
        ]
    try:
        rebuilt = market.replay(txs)
    except StateDivergence as exc:
        click.echo(f"replay DIVERGED: {exc}", err=True)
        sys.exit(1)
    click.echo(
        f"replay OK: {len(txs)} txs, {len(rebuilt.accounts)} accounts, "
        f"supply {rebuilt.total_supply}, digest {market.market_digest(rebuilt).hex()[:16]}"
    )


@main.group("sim")
def sim_group():
    """Deterministic multi-node simulations."""


def _write_csv(text: str, out_path: Path | None):
    if out_path is None:
        click.echo(text, nl=False)
    else:
        out_path.write_text(text, encoding="utf-8")
        click.echo(f"wrote {out_path}")


@sim_group.command("run")
@click.option("--scenario", "scenario_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_path", type=click.Path(path_type=Path))
def sim_run(scenario_path: Path, out_path: Path | None):
    """Run one scenario; emit its metrics as CSV."""
    scenario = load_scenario(scenario_path)
    metrics, digests = run_scenario(scenario)
    _write_csv(CSV_COLUMNS + "\n" + metrics_row(scenario, metrics) + "\n", out_path)
    if metrics.divergence_detected:
        click.echo("divergence detected among honest nodes", err=True)
        sys.exit(2)


@sim_group.command("compare")
@click.option("--engines", "engines_opt", default=",".join(ENGINES), show_default=True)
@click.option("--scenario", "scenario_path", type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_path", type=click.Path(path_type=Path))
def sim_compare(engines_opt: str, scenario_path: Path | None, out_path: Path | None):
    """Run the same load across engines; emit one CSV row per engine."""
    template = load_scenario(scenario_path) if scenario_path else SimScenario()
    engines = tuple(e.strip() for e in engines_opt.split(",") if e.strip())
    _write_csv(compare_engines(template, engines), out_path)


if __name__ == "__main__":
    main()
