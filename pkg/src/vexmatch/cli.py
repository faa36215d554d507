"""Command-line entry point: scan, normalize, matrix, agreement, correlate,
consensus, coverage.

Exit codes are a stable contract: 0 success, 1 data error, 2 usage/config
error, 3 numeric-domain error.  Analysis outputs carry no wall-clock
timestamps, so identical inputs and flags produce byte-identical output.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

from . import filters, orchestrator, parsers, similarity
from .filters import FilterSpec, UnknownImageError
from .model import (
    DatasetManifest,
    IdSystem,
    InputMode,
    RecordSet,
    Status,
    ToolConfig,
    ValidationError,
    VulnRecord,
    read_records,
    write_records,
)
from .orchestrator import JobRunner, JobStatus
from .parsers import ParseError, ReportFormat
from .similarity import CorrelationUndefinedError

OUT_FORMATS = ("csv", "json", "md")


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message, file=sys.stderr)


def _write_output(args, text: str) -> None:
    out = getattr(args, "out", None)
    if out and out != "-":
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _gather_record_files(raw_paths: list[str]) -> list[Path]:
    files: list[Path] = []
    for raw in raw_paths:
        path = Path(raw)
        if path.is_dir():
            found = sorted(path.glob("*.jsonl"))
            if not found:
                raise ValidationError(f"no *.jsonl record files under {path}")
            files.extend(found)
        elif path.is_file():
            files.append(path)
        else:
            raise ValidationError(f"no such file or directory: {path}")
    return files


def _load_grouped_records(args) -> dict[str, list[VulnRecord]]:
    records: list[VulnRecord] = []
    for path in _gather_record_files(args.records):
        records.extend(read_records(path))
    spec = _filter_from_args(args)
    manifest = None
    if getattr(args, "manifest", None):
        manifest = DatasetManifest.load(args.manifest)
    records = filters.apply_filter(records, spec, manifest)
    grouped: dict[str, list[VulnRecord]] = {}
    for record in records:
        grouped.setdefault(record.tool_config_id, []).append(record)
    return grouped


def _filter_from_args(args) -> FilterSpec:
    id_systems = None
    if getattr(args, "id_system", None):
        id_systems = frozenset(
            IdSystem(v.strip().upper()) for v in args.id_system
        )
    status_in = None
    if getattr(args, "status", None):
        status_in = frozenset(
            Status(v.strip().replace("-", "_").upper()) for v in args.status
        )
    return FilterSpec(
        subset=getattr(args, "subset", None),
        id_systems=id_systems,
        exclude_temp=getattr(args, "exclude_temp", False),
        status_in=status_in,
    )


def _ordered_labels(labels: list[str], args) -> list[str]:
    order_file = getattr(args, "label_order", None)
    if not order_file:
        return sorted(labels)
    wanted = [
        line.strip()
        for line in Path(order_file).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    missing = sorted(set(labels) - set(wanted))
    if missing:
        raise ValidationError(
            f"--label-order file does not list: {', '.join(missing)}"
        )
    return [label for label in wanted if label in set(labels)]


def _add_filter_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument(
        "--subset",
        choices=("random", "vulnerable", "non_vulnerable", "complete"),
        help="restrict to one manifest subset (requires --manifest)",
    )
    sub.add_argument("--manifest", help="dataset manifest file")
    sub.add_argument(
        "--id-system",
        action="append",
        metavar="SYSTEM",
        help="keep only these identifier systems (repeatable): cve, ghsa, ...",
    )
    sub.add_argument(
        "--exclude-temp", action="store_true", help="drop TEMP-identifier records"
    )
    sub.add_argument(
        "--status",
        action="append",
        metavar="STATUS",
        help="keep only these statuses (repeatable): affected, fixed, ...",
    )
    sub.add_argument("--label-order", help="file listing output label order")


def _cache_dir(args) -> str:
    # The environment variable deliberately wins over the flag so wrapper
    # scripts can redirect whole pipelines.
    return os.environ.get("VEXMATCH_CACHE") or args.cache_dir or "cache"


def cmd_scan(args) -> int:
    tools, rows = orchestrator.load_tools_file(args.config)
    configs = orchestrator.configs_from_file(tools, rows)
    manifest = DatasetManifest.load(args.manifest_path)
    jobs = orchestrator.plan_jobs(configs, manifest, tools)
    runner = JobRunner(
        tools,
        _cache_dir(args),
        timeout=args.timeout,
        workers=args.workers,
        force=args.force,
    )
    runner.run_plan(jobs)
    for job in jobs:
        if not args.quiet:
            detail = f"  ({job.detail})" if job.detail and job.detail != "cache hit" else ""
            print(f"[{job.status.value}] {job.job_id}{detail}", file=sys.stderr)
    counts = orchestrator.summarize(jobs)
    done = counts.get(JobStatus.DONE.value, 0)
    cached = counts.get(JobStatus.SKIPPED_CACHED.value, 0)
    failed = counts.get(JobStatus.FAILED.value, 0)
    print(f"{done} done, {cached} skipped (cached), {failed} failed")
    if failed == 0:
        return 0
    if args.keep_going and done > 0:
        return 0
    return 1


def cmd_normalize(args) -> int:
    records: list[VulnRecord] = []
    for raw_path in args.raw:
        path = Path(raw_path)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise ValidationError(f"cannot read {path}: {exc}") from exc
        try:
            if args.format:
                fmt = ReportFormat(args.format)
            else:
                fmt = parsers.detect_format(raw)
            records.extend(
                parsers.parse_report(raw, fmt, args.image, args.tool_config)
            )
        except ParseError as exc:
            raise ParseError(f"{path}: {exc}") from exc
    buf = io.StringIO()
    count = write_records(records, buf)
    _write_output(args, buf.getvalue())
    _say(args, f"{count} records")
    return 0


def _record_sets(args) -> dict[str, RecordSet]:
    grouped = _load_grouped_records(args)
    return {
        label: RecordSet.from_records(label, records)
        for label, records in grouped.items()
    }


def cmd_matrix(args) -> int:
    if args.databases_from:
        if args.records:
            raise ValidationError(
                "give either record paths or --databases-from, not both"
            )
        tools, _ = orchestrator.load_tools_file(args.databases_from)
        configs = [_database_config(tools, tools[name]) for name in sorted(tools)]
        matrix = similarity.database_similarity(configs)
    else:
        sets = _record_sets(args)
        if len(sets) < 2:
            raise ValidationError(
                f"need at least 2 tool configurations, found {len(sets)}"
            )
        labels = _ordered_labels(list(sets), args)
        matrix = similarity.pairwise_matrix([sets[label] for label in labels])
    _write_output(args, similarity.render_matrix(matrix, args.out_format))
    return 0


def _database_config(
    tools: dict[str, orchestrator.ToolInfo], info: orchestrator.ToolInfo
) -> ToolConfig:
    """A representative valid configuration carrying the tool's databases."""
    caps = info.capabilities
    common = dict(tool_name=info.name, capabilities=caps, databases=info.databases)
    if caps.scan_image:
        return ToolConfig(input_mode=InputMode.IMAGE, **common)
    if caps.scan_sbom and caps.produce_sbom:
        return ToolConfig(input_mode=InputMode.NATIVE_SBOM, **common)
    if caps.scan_sbom:
        for producer in sorted(tools):
            if producer != info.name and tools[producer].capabilities.produce_sbom:
                return ToolConfig(
                    input_mode=InputMode.EXTERNAL_SBOM, sbom_source=producer, **common
                )
    raise ValidationError(f"{info.name} has no usable capability")


def _render_rows(header: list[str], rows: list[list[str]], out_format: str) -> str:
    if out_format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    if out_format == "json":
        payload = [dict(zip(header, row)) for row in rows]
        return json.dumps(payload, indent=2) + "\n"
    if out_format == "md":
        widths = [
            max(len(header[i]), *(len(row[i]) for row in rows)) if rows else len(header[i])
            for i in range(len(header))
        ]
        lines = [
            "| " + " | ".join(h.ljust(widths[i]) for i, h in enumerate(header)) + " |",
            "| " + " | ".join("-" * w for w in widths) + " |",
        ]
        for row in rows:
            lines.append(
                "| " + " | ".join(c.ljust(widths[i]) for i, c in enumerate(row)) + " |"
            )
        return "\n".join(lines) + "\n"
    raise ValidationError(f"unknown output format {out_format!r}")


def _parse_members(text: str) -> list[str]:
    members = [m.strip() for m in text.split(",") if m.strip()]
    if len(members) < 2:
        raise ValidationError("--members needs at least 2 comma-separated labels")
    return members


def cmd_agreement(args) -> int:
    sets = _record_sets(args)
    labels = _ordered_labels(list(sets), args)
    if args.members:
        groups = [tuple(_parse_members(args.members))]
    else:
        groups = similarity.group_combinations(labels, args.group_size)
    results = similarity.group_agreement(sets, groups)
    rows = [
        [
            "+".join(r.member_labels),
            format(r.tversky, ".4f"),
            str(r.intersection_count),
            str(r.union_count),
        ]
        for r in results
    ]
    if args.out_format == "json":
        payload = [
            {
                "members": list(r.member_labels),
                "tversky": r.tversky,
                "intersection_count": r.intersection_count,
                "union_count": r.union_count,
            }
            for r in results
        ]
        _write_output(args, json.dumps(payload, indent=2) + "\n")
    else:
        _write_output(
            args,
            _render_rows(
                ["members", "tversky", "intersection_count", "union_count"],
                rows,
                args.out_format,
            ),
        )
    return 0


def cmd_correlate(args) -> int:
    m1 = similarity.load_matrix(args.matrix_a)
    m2 = similarity.load_matrix(args.matrix_b)
    coefficient = similarity.pearson_between_matrices(m1, m2, cells=args.cells)
    print(format(coefficient, ".4f"))
    return 0


def cmd_consensus(args) -> int:
    sets = _record_sets(args)
    members = _parse_members(args.members)
    agreement, consensus_set = similarity.consensus(sets, members)
    lines = []
    for key in sorted(consensus_set.keys, key=lambda k: k.as_tuple()):
        lines.append(
            json.dumps(
                {
                    "image_ref": key.image_ref,
                    "component_id": key.component_id,
                    "vuln_id": key.vuln_id,
                },
                ensure_ascii=False,
                separators=(",", ":"),
            )
        )
    _write_output(args, "".join(line + "\n" for line in lines))
    _say(
        args,
        f"consensus of {'+'.join(agreement.member_labels)}: "
        f"tversky={agreement.tversky:.4f} "
        f"intersection={agreement.intersection_count} union={agreement.union_count}",
    )
    return 0


def cmd_coverage(args) -> int:
    grouped = _load_grouped_records(args)
    allow = frozenset(
        IdSystem(v.strip().upper()) for v in (args.of or ["cve"])
    )
    labels = _ordered_labels(list(grouped), args)
    rows = []
    for label in labels:
        fraction = filters.coverage_fraction(grouped[label], allow)
        if args.out_format == "md":
            rows.append([label, f"{fraction * 100:.1f}%"])
        else:
            rows.append([label, format(fraction, ".4f")])
    if args.out_format == "json":
        payload = [
            {"label": label, "coverage": filters.coverage_fraction(grouped[label], allow)}
            for label in labels
        ]
        _write_output(args, json.dumps(payload, indent=2) + "\n")
    else:
        _write_output(args, _render_rows(["label", "coverage"], rows, args.out_format))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vexmatch",
        description="Normalize container vulnerability reports and measure "
        "cross-scanner consistency.",
    )
    parser.add_argument("--cache-dir", help="scan cache directory (default: cache)")
    parser.add_argument(
        "--out-format", choices=OUT_FORMATS, default="csv", help="table output format"
    )
    parser.add_argument("--quiet", action="store_true", help="suppress diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", help="run external scanners over the manifest")
    p.add_argument("config", help="tools configuration file (TOML)")
    p.add_argument("manifest_path", help="pinned image manifest")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--timeout", type=float, default=900.0, help="per-job seconds")
    p.add_argument("--force", action="store_true", help="bypass the cache")
    p.add_argument(
        "--keep-going",
        action="store_true",
        help="exit 0 when at least one job succeeded despite failures",
    )
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("normalize", help="convert raw reports to canonical records")
    p.add_argument("raw", nargs="+", help="raw report file(s)")
    p.add_argument("--image", required=True, help="pinned image reference")
    p.add_argument("--tool-config", required=True, help="producing configuration id")
    p.add_argument(
        "--format",
        choices=[f.value for f in ReportFormat],
        help="report format (auto-detected when omitted)",
    )
    p.add_argument("--out", default="-", help="output file (default: stdout)")
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("matrix", help="pairwise similarity matrix")
    p.add_argument("records", nargs="*", help="record files or directories")
    p.add_argument(
        "--databases-from",
        metavar="TOOLS_TOML",
        help="build the matrix from tool database lists instead of records",
    )
    p.add_argument("--out", default="-")
    _add_filter_flags(p)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("agreement", help="n-ary group agreement (joint overlap)")
    p.add_argument("records", nargs="+")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--group-size", type=int, metavar="K")
    group.add_argument("--members", metavar="A,B,C")
    p.add_argument("--out", default="-")
    _add_filter_flags(p)
    p.set_defaults(func=cmd_agreement)

    p = sub.add_parser("correlate", help="Pearson correlation of two matrices")
    p.add_argument("matrix_a")
    p.add_argument("matrix_b")
    p.add_argument(
        "--cells",
        choices=("upper", "full"),
        default="upper",
        help="matrix cells to correlate: strict upper triangle (default) or "
        "the full flattened matrix",
    )
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("consensus", help="intersection shared by all members")
    p.add_argument("records", nargs="+")
    p.add_argument("--members", required=True, metavar="A,B,C")
    p.add_argument("--out", default="-")
    _add_filter_flags(p)
    p.set_defaults(func=cmd_consensus)

    p = sub.add_parser("coverage", help="identifier-system coverage per tool")
    p.add_argument("records", nargs="+")
    p.add_argument(
        "--of",
        action="append",
        metavar="SYSTEM",
        help="identifier systems counted as covered (default: cve)",
    )
    p.add_argument("--out", default="-")
    _add_filter_flags(p)
    p.set_defaults(func=cmd_coverage)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CorrelationUndefinedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ParseError, UnknownImageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
