"""Command-line interface.

Subcommands wire the pipeline stages over files:

    simulate   config -> QTT1 tag file, with observed-vs-analytic rates
    coincide   QTT1 -> raw bit file + coincidence summary JSON
    certify    QTT1 -> certification report JSON
    extract    raw bit file -> extracted bit file + ratio report JSON
    test       bit file -> battery report JSON + final P-value table
    run        full pipeline with manifest (reproducible via --from-manifest)
    sweep      one pipeline per parameter value -> CSV
    export     bit file -> raw_packed or ascii01 bytes

Exit codes: 0 success, 2 configuration error, 3 I/O error,
4 certification refused (UNCERTIFIED without --force).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .certify import Verdict
from .coincidence import assign_bits, coincidence_summary, concat_coincidences
from .extract import extract_stream
from .pipeline import (
    CertificationRefused,
    ConfigError,
    StageError,
    _match_section_pairs,
    certification_report,
    load_config,
    rerun_from_manifest,
    run_pipeline,
    simulate_to_file,
    sweep,
    sweep_csv,
)
from .randtests import export_bits, run_battery
from .timetags import (
    BitSequence,
    Channel,
    TagFileError,
    read_bits,
    read_stream,
    write_bits,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_REFUSED = 4


def _add_config_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="config file (key = value lines)")
    parser.add_argument(
        "--set",
        dest="sets",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    parser.add_argument("--seed", type=int, help="shorthand for source.rng_seed")
    parser.add_argument("--pump-power", type=float, help="shorthand for source.pump_power (mW)")
    parser.add_argument(
        "--window-ns", type=float, help="shorthand for coincidence.window_tau, in ns"
    )
    parser.add_argument("--out", type=Path, help="output directory")


def _collect_overrides(args) -> dict:
    overrides: dict[str, object] = {}
    for item in args.sets:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        from .pipeline import _coerce

        overrides[key.strip()] = _coerce(value.strip())
    if args.seed is not None:
        overrides["source.rng_seed"] = args.seed
    if args.pump_power is not None:
        overrides["source.pump_power"] = args.pump_power
    if args.window_ns is not None:
        overrides["coincidence.window_tau"] = int(round(args.window_ns * 1000))
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    return overrides


def _load(args):
    return load_config(args.config, _collect_overrides(args))


def cmd_simulate(args) -> int:
    cfg = _load(args)
    out_dir = Path(args.out) if args.out else cfg.output_dir
    stream, tag_path, rates = simulate_to_file(cfg, out_dir)
    print(f"wrote {tag_path} ({len(stream)} tags, {cfg.source.duration} ps)")
    print(f"{'channel':>8} {'observed Hz':>14} {'expected Hz':>14}")
    for name, row in rates.items():
        print(f"{name:>8} {row['observed_hz']:>14.1f} {row['expected_hz']:>14.1f}")
    return EXIT_OK


def cmd_coincide(args) -> int:
    cfg = _load(args)
    stream = read_stream(args.tags)
    out_dir = Path(args.out) if args.out else cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = coincidence_summary(stream, cfg.coincidence)
    bit_coincs, _, _, pair_counts = _match_section_pairs(stream, cfg.coincidence)
    raw = assign_bits(bit_coincs)
    bits = BitSequence.from_bits(raw.bits)
    write_bits(bits, out_dir / "raw.bits")
    summary["raw_bits"] = len(bits)
    (out_dir / "coincidence_summary.json").write_text(json.dumps(summary, indent=2))
    print(f"raw bits: {len(bits)}")
    for pair, row in summary["pairs"].items():
        print(
            f"{pair}: {row['coincidences']} coincidences, "
            f"accidental {row['accidental_rate_hz']:.2f} Hz, CAR {row['car']:.1f}"
        )
    return EXIT_OK


def cmd_certify(args) -> int:
    cfg = _load(args)
    stream = read_stream(args.tags)
    out_dir = Path(args.out) if args.out else cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    _, cert_coincs, times, _ = _match_section_pairs(stream, cfg.coincidence)
    _, report = certification_report(
        cert_coincs,
        cfg.source.analyzer_schedule,
        cfg.cert_block,
        stream.duration,
        cfg.coincidence,
        times[Channel.C1],
        times[Channel.C2],
    )
    (out_dir / "cert_report.json").write_text(json.dumps(report, indent=2))
    s = report.get("S_run")
    s_text = f"{s:.4f} +/- {report.get('S_run_stderr', 0.0):.4f}" if isinstance(s, float) else "n/a"
    print(f"verdict: {report['verdict']}  S = {s_text}  g2 = {report.get('g2_run')}")
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = _load(args)
    raw = read_bits(args.bits)
    out_dir = Path(args.out) if args.out else cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_source = cfg.extractor.seed_path or None
    extracted, report, params = extract_stream(
        raw,
        epsilon=cfg.extractor.epsilon,
        n_block=cfg.extractor.n_block,
        seed_source=seed_source,
    )
    write_bits(extracted, out_dir / "extracted.bits")
    (out_dir / "toeplitz_seed.bin").write_bytes(params.seed.to_bytes())
    (out_dir / "ratio_report.json").write_text(json.dumps(report.to_dict(), indent=2))
    print(
        f"h_min {report.h_min:.4f} | {report.bits_in} -> {report.bits_out} bits "
        f"(ratio {report.ratio:.4f}, {report.blocks} blocks)"
    )
    return EXIT_OK


def cmd_test(args) -> int:
    cfg = _load(args)
    bits = read_bits(args.bits)
    out_dir = Path(args.out) if args.out else cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    report = run_battery(
        bits,
        cfg.battery.n_sequences,
        cfg.battery.seq_len,
        cfg.battery.significance,
    )
    (out_dir / "battery_report.json").write_text(json.dumps(report.to_dict(), indent=2))
    lo, hi = report.proportion_range
    print(f"{'test':<22} {'final P':>10} {'proportion':>11}  in ({lo:.4f}, {hi:.4f})")
    for test_id in report.p_values:
        ok = lo <= report.proportion[test_id] <= hi and report.uniformity_p[test_id] >= 1e-4
        print(
            f"{test_id:<22} {report.uniformity_p[test_id]:>10.4f} "
            f"{report.proportion[test_id]:>11.3f}  {'pass' if ok else 'FAIL'}"
        )
    print(f"battery verdict: {'pass' if report.passed else 'FAIL'}")
    return EXIT_OK


def cmd_run(args) -> int:
    out_dir = Path(args.out) if args.out else None
    if args.from_manifest:
        result = rerun_from_manifest(
            args.from_manifest, out_dir or Path("qrng_rerun"), force=args.force
        )
    else:
        cfg = _load(args)
        result = run_pipeline(cfg, out_dir=out_dir, force=args.force)
    print(result.summary)
    print(f"manifest: {result.out_dir / 'manifest.json'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    values = [float(v) for v in args.values.split(",") if v.strip()]
    out_dir = Path(args.out) if args.out else cfg.output_dir
    rows = sweep(cfg, args.parameter, values, out_dir)
    csv_text = sweep_csv(rows)
    (out_dir / "sweep.csv").write_text(csv_text)
    print(csv_text, end="")
    return EXIT_OK


def cmd_export(args) -> int:
    bits = read_bits(args.bits)
    payload = export_bits(bits, args.format)
    Path(args.out_file).write_bytes(payload)
    print(f"wrote {len(payload)} bytes ({args.format}) to {args.out_file}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qrng-forge",
        description="entangled-pair QRNG pipeline: simulate, certify, extract, validate",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a QTT1 tag file from config")
    _add_config_options(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("coincide", help="match coincidences and emit raw bits")
    _add_config_options(p)
    p.add_argument("--tags", type=Path, required=True, help="QTT1 input file")
    p.set_defaults(func=cmd_coincide)

    p = sub.add_parser("certify", help="blockwise certification report")
    _add_config_options(p)
    p.add_argument("--tags", type=Path, required=True, help="QTT1 input file")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("extract", help="Toeplitz-extract a raw bit file")
    _add_config_options(p)
    p.add_argument("--bits", type=Path, required=True, help="raw bit file")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("test", help="run the statistical battery on a bit file")
    _add_config_options(p)
    p.add_argument("--bits", type=Path, required=True, help="bit file")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("run", help="full pipeline with manifest")
    _add_config_options(p)
    p.add_argument("--force", action="store_true", help="extract even if UNCERTIFIED")
    p.add_argument(
        "--from-manifest", type=Path, help="re-run a recorded manifest byte-identically"
    )
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="pipeline sweep over one parameter")
    _add_config_options(p)
    p.add_argument(
        "--parameter",
        required=True,
        choices=["pump_power", "window_tau", "alpha"],
    )
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export", help="export bits for external harnesses")
    p.add_argument("--bits", type=Path, required=True)
    p.add_argument("--format", choices=["raw_packed", "ascii01"], default="raw_packed")
    p.add_argument("--out-file", type=Path, required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CertificationRefused as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, TagFileError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except StageError as exc:
        cause = exc.cause
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(cause, CertificationRefused):
            return EXIT_REFUSED
        if isinstance(cause, (ConfigError, ValueError)):
            return EXIT_CONFIG
        if isinstance(cause, (OSError, TagFileError)):
            return EXIT_IO
        return 1


if __name__ == "__main__":
    sys.exit(main())
