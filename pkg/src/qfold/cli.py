"""Command-line entry point: ``qfold <subcommand> ...``.

Exit codes: 0 success, 1 configuration error, 2 unreadable or mismatched
input, 3 empty contact set, 4 non-finite energy.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

from . import harness
from .errors import (
    ConfigError,
    EmptyContactsError,
    NonFiniteError,
    QFoldError,
)
from .metrics import CSV_HEADER, evaluate
from .pdb_io import read_chain, read_dimer, write_pdb
from .restraints import CONTACT_THRESHOLD, extract_true_contacts, read_contact_file, write_contact_file

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_EMPTY, EXIT_NONFINITE = 0, 1, 2, 3, 4

EMPTY_CONTACTS_HINT = (
    "no inter-chain contacts: a dimer without contacts gives the optimiser nothing to satisfy, "
    "so such targets are excluded from benchmarks"
)


def _chains(text: str | None) -> tuple[str, str] | None:
    if text is None:
        return None
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if len(parts) != 2:
        raise ConfigError(f"--chains expects two chain ids like A,B; got {text!r}")
    return parts[0], parts[1]


def _chain_spec(text: str) -> tuple[str, str | None]:
    """``path[:chain]``; a trailing single character after ':' names the chain."""
    head, sep, tail = text.rpartition(":")
    if sep and len(tail) == 1 and head:
        return head, tail
    return text, None


def _common(parser: argparse.ArgumentParser, *, method: bool = True) -> None:
    parser.add_argument("--config", type=Path, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=0)
    if method:
        parser.add_argument("--method", choices=[m.value for m in harness.Method], default="gd")
    parser.add_argument("--obs-size", type=int, help="observation image size D")
    parser.add_argument("--action-mode", choices=["six", "twelve"])
    parser.add_argument("--total-steps", type=int, help="DRL training budget")
    parser.add_argument("--restarts", type=int, help="optimiser restarts")
    parser.add_argument("--max-iterations", type=int, help="optimiser iterations per restart")


def _settings(args) -> harness.RunSettings:
    overrides = {
        "env": {"obs_size": args.obs_size, "action_mode": args.action_mode},
        "train": {"total_steps": args.total_steps},
        "optimizer": {"restarts": args.restarts, "max_iterations": args.max_iterations},
    }
    return harness.load_settings(getattr(args, "config", None), overrides)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qfold", description="Rigid-body dimer reconstruction from inter-chain contacts.")
    sub = p.add_subparsers(dest="command", required=True)

    ex = sub.add_parser("extract-contacts", help="write the true contacts of a native dimer")
    ex.add_argument("pdb", type=Path)
    ex.add_argument("--chains", help="receptor,ligand chain ids (default: the two chains in the file)")
    ex.add_argument("--out", type=Path, required=True)
    ex.add_argument("--threshold", type=float, default=CONTACT_THRESHOLD)

    rc = sub.add_parser("reconstruct", help="place a ligand chain against a receptor chain")
    rc.add_argument("--receptor", required=True, help="PDB path, optionally suffixed with :CHAIN")
    rc.add_argument("--ligand", required=True, help="PDB path, optionally suffixed with :CHAIN")
    rc.add_argument("--contacts", type=Path, required=True)
    rc.add_argument("--out-pdb", type=Path, required=True)
    rc.add_argument("--out-log", type=Path, required=True)
    rc.add_argument("--summary", type=Path, help="also write the JSON summary here")
    _common(rc)

    ev = sub.add_parser("evaluate", help="score a model against the native complex")
    ev.add_argument("model", type=Path)
    ev.add_argument("native", type=Path)
    ev.add_argument("--chains", help="receptor,ligand chain ids shared by both files")
    ev.add_argument("--out", type=Path, help="CSV file (default: stdout)")
    ev.add_argument("--target", default="model")
    ev.add_argument("--scenario", choices=[s.value for s in harness.Scenario], default="optimal")
    ev.add_argument("--method", default="none")

    bm = sub.add_parser("benchmark", help="run every job of a manifest")
    bm.add_argument("manifest", type=Path)
    bm.add_argument("--out", type=Path, required=True)
    bm.add_argument("--threads", type=int, help="worker processes (default: QFOLD_THREADS or CPU count)")
    _common(bm, method=False)

    rp = sub.add_parser("report", help="print the tables of a finished benchmark")
    rp.add_argument("out", type=Path)
    return p


def cmd_extract(args) -> int:
    receptor, ligand = read_dimer(args.pdb, _chains(args.chains))
    contacts = extract_true_contacts(receptor, ligand, args.threshold)
    if not contacts.restraints:
        print(f"error: {EMPTY_CONTACTS_HINT}", file=sys.stderr)
        return EXIT_EMPTY
    write_contact_file(contacts, args.out)
    print(f"{len(contacts)} contacts written to {args.out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    settings = _settings(args)
    rec_path, rec_chain = _chain_spec(args.receptor)
    lig_path, lig_chain = _chain_spec(args.ligand)
    receptor = read_chain(rec_path, rec_chain)
    ligand = read_chain(lig_path, lig_chain)
    contacts = read_contact_file(args.contacts, ligand.length, receptor.length)
    start = time.perf_counter()
    result = harness.reconstruct(receptor, ligand, contacts, args.method, settings, args.seed)
    wall = time.perf_counter() - start
    write_pdb(receptor, ligand, result.pose, args.out_pdb)
    with open(args.out_log, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"config": settings.to_dict(), "method": args.method, "seed": args.seed}, sort_keys=True) + "\n")
        for line in result.log_lines:
            fh.write(line + "\n")
    summary = {"method": args.method, "seed": args.seed, "final_energy": result.energy, "steps": result.steps, "wall_time": wall}
    text = json.dumps(summary, sort_keys=True)
    if args.summary:
        args.summary.write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    chains = _chains(args.chains)
    model = read_dimer(args.model, chains)
    native = read_dimer(args.native, chains)
    report = evaluate(model, native)
    row = report.as_row(args.target, args.scenario, args.method)
    sink = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(sink, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerow(row)
    finally:
        if args.out:
            sink.close()
    return EXIT_OK


def cmd_benchmark(args) -> int:
    manifest = harness.read_manifest(args.manifest)
    if args.config is None and manifest.config is not None:
        args.config = manifest.config
    settings = _settings(args)
    threads = args.threads if args.threads is not None else harness.default_threads()
    if threads < 1:
        raise ConfigError("--threads must be at least 1")
    records = harness.run_benchmark(manifest, args.out, threads, settings)
    failed = sum(not r.ok for r in records)
    print(f"{len(records)} jobs, {failed} failed; tables in {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    if not (args.out / "summary.csv").exists():
        raise ConfigError(f"{args.out} holds no benchmark results")
    print(harness.format_report(args.out), end="")
    return EXIT_OK


COMMANDS = {
    "extract-contacts": cmd_extract,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except EmptyContactsError as exc:
        print(f"error: {exc}. {EMPTY_CONTACTS_HINT}", file=sys.stderr)
        return EXIT_EMPTY
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (QFoldError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
