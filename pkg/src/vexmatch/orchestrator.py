"""External scanner orchestration: planning, execution, caching, provenance.

Jobs are planned from a declarative tools file plus a pinned image manifest,
executed with per-job timeouts, and cached under
``cache/<tool>/<version>/<digest>/<mode>.raw`` with a sibling ``.meta`` JSON.
The cache key includes the tool version because scanner databases update
silently; a finished-job ledger (append-only JSON lines) records provenance
for longitudinal reruns.
"""

from __future__ import annotations

import json
import os
import re
import shlex
import string
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .model import (
    DatasetManifest,
    InputMode,
    ToolCapabilities,
    ToolConfig,
    ValidationError,
    image_digest,
)


class PlanningError(ValidationError):
    """A requested configuration violates tool capabilities."""


class ToolUnavailableError(RuntimeError):
    """The external tool could not be located or version-probed."""


_TEMPLATE_FIELDS = {"image", "sbom_path", "out_path"}


@dataclass(frozen=True)
class ToolInfo:
    """One tool entry from the declarative configuration file."""

    name: str
    capabilities: ToolCapabilities
    scan_image_template: str = ""
    scan_sbom_template: str = ""
    produce_sbom_template: str = ""
    version: str | None = None
    version_command: str = ""
    sbom_format: str = ""
    accepts_sbom_formats: tuple[str, ...] = ()
    databases: frozenset[str] = frozenset()


def _check_template(tool: str, label: str, template: str) -> None:
    fields = {
        name
        for _, name, _, _ in string.Formatter().parse(template)
        if name is not None
    }
    unknown = fields - _TEMPLATE_FIELDS
    if unknown:
        raise ValidationError(
            f"{tool}: {label} uses unknown placeholders {sorted(unknown)}"
        )
    if template and "out_path" not in fields:
        raise ValidationError(f"{tool}: {label} must contain {{out_path}}")


def parse_tools_config(text: str) -> tuple[dict[str, ToolInfo], list[dict] | None]:
    """Parse the TOML tools file; returns (registry, explicit config rows)."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"invalid tools file: {exc}") from exc
    tools: dict[str, ToolInfo] = {}
    for name, entry in sorted((doc.get("tools") or {}).items()):
        if not isinstance(entry, dict):
            raise ValidationError(f"tools.{name} must be a table")
        info = ToolInfo(
            name=name,
            capabilities=ToolCapabilities(
                scan_sbom=bool(entry.get("scan_sbom", False)),
                produce_sbom=bool(entry.get("produce_sbom", False)),
                scan_image=bool(entry.get("scan_image", False)),
            ),
            scan_image_template=str(entry.get("scan_image_template", "")),
            scan_sbom_template=str(entry.get("scan_sbom_template", "")),
            produce_sbom_template=str(entry.get("produce_sbom_template", "")),
            version=str(entry["version"]) if "version" in entry else None,
            version_command=str(entry.get("version_command", "")),
            sbom_format=str(entry.get("sbom_format", "")),
            accepts_sbom_formats=tuple(entry.get("accepts_sbom_formats", ())),
            databases=frozenset(str(d) for d in entry.get("databases", ())),
        )
        for label in ("scan_image_template", "scan_sbom_template", "produce_sbom_template"):
            _check_template(name, label, getattr(info, label))
        tools[name] = info
    if not tools:
        raise ValidationError("tools file defines no [tools.*] entries")
    rows = doc.get("configurations")
    if rows is not None and not isinstance(rows, list):
        raise ValidationError("[[configurations]] must be an array of tables")
    return tools, rows


def load_tools_file(path: str | Path) -> tuple[dict[str, ToolInfo], list[dict] | None]:
    return parse_tools_config(Path(path).read_text(encoding="utf-8"))


def build_config(
    tools: Mapping[str, ToolInfo],
    tool: str,
    mode: InputMode,
    sbom_source: str | None = None,
) -> ToolConfig:
    """Build and validate one configuration cell against the registry."""
    if tool not in tools:
        raise PlanningError(f"unknown tool {tool!r}")
    info = tools[tool]
    if mode is InputMode.IMAGE:
        template = info.scan_image_template
    else:
        template = info.scan_sbom_template
    config = ToolConfig(
        tool_name=tool,
        input_mode=mode,
        capabilities=info.capabilities,
        command_template=template,
        databases=info.databases,
        sbom_source=sbom_source,
    )
    if mode is InputMode.EXTERNAL_SBOM:
        assert sbom_source is not None
        if sbom_source not in tools:
            raise PlanningError(f"unknown SBOM source tool {sbom_source!r}")
        source = tools[sbom_source]
        if not source.capabilities.produce_sbom:
            raise PlanningError(
                f"{sbom_source} cannot produce SBOMs (capability produce_sbom=false)"
            )
        if (
            source.sbom_format
            and info.accepts_sbom_formats
            and source.sbom_format not in info.accepts_sbom_formats
        ):
            raise PlanningError(
                f"{tool} accepts {'/'.join(info.accepts_sbom_formats)} SBOMs but "
                f"{sbom_source} produces {source.sbom_format}"
            )
    return config


def enumerate_default_configs(tools: Mapping[str, ToolInfo]) -> list[ToolConfig]:
    """The full capability matrix: every image cell plus every compatible
    (producer, scanner) SBOM cell.  Incompatible SBOM-format cells are not
    part of the matrix and are skipped, not errored."""
    configs: list[ToolConfig] = []
    for name in sorted(tools):
        if tools[name].capabilities.scan_image:
            configs.append(build_config(tools, name, InputMode.IMAGE))
    producers = [n for n in sorted(tools) if tools[n].capabilities.produce_sbom]
    scanners = [n for n in sorted(tools) if tools[n].capabilities.scan_sbom]
    for scanner in scanners:
        for producer in producers:
            if scanner == producer:
                configs.append(build_config(tools, scanner, InputMode.NATIVE_SBOM))
                continue
            try:
                configs.append(
                    build_config(tools, scanner, InputMode.EXTERNAL_SBOM, producer)
                )
            except PlanningError:
                continue
    return sorted(configs, key=lambda c: c.config_id)


def configs_from_file(
    tools: Mapping[str, ToolInfo], rows: list[dict] | None
) -> list[ToolConfig]:
    """Resolve explicit [[configurations]] rows, or the default full matrix."""
    if rows is None:
        return enumerate_default_configs(tools)
    configs = []
    for i, row in enumerate(rows):
        try:
            mode = InputMode(str(row.get("input", "")))
        except ValueError as exc:
            raise PlanningError(
                f"configurations[{i}]: unknown input mode {row.get('input')!r}"
            ) from exc
        source = row.get("sbom_source")
        configs.append(
            build_config(tools, str(row.get("tool", "")), mode, source)
        )
    if not configs:
        raise PlanningError("configurations list is empty")
    return configs


class JobKind(str, Enum):
    SCAN = "scan"
    SBOM = "sbom"


class JobStatus(str, Enum):
    PENDING = "PENDING"
    RUNNING = "RUNNING"
    DONE = "DONE"
    FAILED = "FAILED"
    SKIPPED_CACHED = "SKIPPED_CACHED"


@dataclass
class ScanJob:
    """One planned external-process execution over one pinned image."""

    job_id: str
    kind: JobKind
    tool_name: str
    tool_config_id: str
    input_mode: InputMode
    sbom_source: str | None
    image_ref: str
    command_template: str
    depends_on: str | None = None
    output_path: Path | None = None
    status: JobStatus = JobStatus.PENDING
    started_at: str | None = None
    finished_at: str | None = None
    tool_version: str | None = None
    detail: str = ""

    @property
    def mode_slug(self) -> str:
        if self.kind is JobKind.SBOM:
            return "export-sbom"
        if self.input_mode is InputMode.IMAGE:
            return "image"
        if self.input_mode is InputMode.NATIVE_SBOM:
            return "native-sbom"
        return f"{self.sbom_source}-sbom"


def plan_jobs(
    configs: Sequence[ToolConfig],
    manifest: DatasetManifest,
    tools: Mapping[str, ToolInfo],
) -> list[ScanJob]:
    """One scan job per (valid config, image), preceded by deduplicated
    SBOM-production jobs; deterministic topological order."""
    ids = [c.config_id for c in configs]
    if len(set(ids)) != len(ids):
        raise PlanningError("duplicate configuration ids in plan input")
    if not manifest.entries:
        raise ValidationError("manifest has no images")

    for config in configs:
        # Re-validate cross-tool constraints for configs built elsewhere.
        build_config(tools, config.tool_name, config.input_mode, config.sbom_source)
        if not config.command_template:
            raise PlanningError(
                f"{config.config_id}: no command template for {config.input_mode.value}"
            )

    sbom_jobs: dict[str, ScanJob] = {}
    scan_jobs: list[ScanJob] = []
    for config in sorted(configs, key=lambda c: c.config_id):
        for image in sorted(manifest.images):
            depends_on = None
            if config.input_mode is not InputMode.IMAGE:
                producer = config.sbom_source or config.tool_name
                sbom_id = f"sbom:{producer}|{image}"
                if sbom_id not in sbom_jobs:
                    template = tools[producer].produce_sbom_template
                    if not template:
                        raise PlanningError(
                            f"{producer}: no produce_sbom_template for SBOM export"
                        )
                    sbom_jobs[sbom_id] = ScanJob(
                        job_id=sbom_id,
                        kind=JobKind.SBOM,
                        tool_name=producer,
                        tool_config_id=f"{producer}+sbom-export",
                        input_mode=InputMode.IMAGE,
                        sbom_source=None,
                        image_ref=image,
                        command_template=template,
                    )
                depends_on = sbom_id
            scan_jobs.append(
                ScanJob(
                    job_id=f"scan:{config.config_id}|{image}",
                    kind=JobKind.SCAN,
                    tool_name=config.tool_name,
                    tool_config_id=config.config_id,
                    input_mode=config.input_mode,
                    sbom_source=config.sbom_source,
                    image_ref=image,
                    command_template=config.command_template,
                    depends_on=depends_on,
                )
            )
    ordered = [sbom_jobs[k] for k in sorted(sbom_jobs)]
    ordered.extend(scan_jobs)
    return ordered


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sanitize_version(version: str) -> str:
    cleaned = re.sub(r"[^A-Za-z0-9._+-]", "-", version.strip())
    return cleaned[:64] or "unknown"


class JobRunner:
    """Executes planned jobs with caching, timeouts and a finished-job ledger."""

    def __init__(
        self,
        tools: Mapping[str, ToolInfo],
        cache_dir: str | Path,
        *,
        timeout: float = 900.0,
        workers: int = 4,
        force: bool = False,
    ):
        self.tools = tools
        self.cache_dir = Path(cache_dir)
        self.timeout = timeout
        self.workers = max(1, workers)
        self.force = force
        self._versions: dict[str, str] = {
            name: _sanitize_version(info.version)
            for name, info in tools.items()
            if info.version is not None
        }
        self._version_lock = threading.Lock()
        self._ledger_lock = threading.Lock()

    @property
    def ledger_path(self) -> Path:
        return self.cache_dir / "ledger.jsonl"

    def tool_version(self, tool: str) -> str:
        """Pinned version from the tools file, else a memoized probe."""
        with self._version_lock:
            if tool in self._versions:
                return self._versions[tool]
        info = self.tools.get(tool)
        if info is None or not info.version_command:
            raise ToolUnavailableError(f"no pinned version or version_command for {tool}")
        try:
            proc = subprocess.run(
                shlex.split(info.version_command),
                capture_output=True,
                text=True,
                timeout=60,
            )
        except FileNotFoundError as exc:
            raise ToolUnavailableError(f"{tool}: executable not found: {exc}") from exc
        except subprocess.TimeoutExpired as exc:
            raise ToolUnavailableError(f"{tool}: version probe timed out") from exc
        if proc.returncode != 0:
            raise ToolUnavailableError(
                f"{tool}: version probe exited {proc.returncode}"
            )
        first_line = next(
            (line for line in (proc.stdout or proc.stderr).splitlines() if line.strip()),
            "",
        )
        if not first_line:
            raise ToolUnavailableError(f"{tool}: version probe produced no output")
        version = _sanitize_version(first_line)
        with self._version_lock:
            self._versions[tool] = version
        return version

    def artifact_path(self, tool: str, version: str, image_ref: str, slug: str) -> Path:
        return self.cache_dir / tool / version / image_digest(image_ref) / f"{slug}.raw"

    def _cache_fresh(self, job: ScanJob, raw: Path) -> bool:
        meta_path = raw.with_suffix(".meta")
        if not raw.is_file() or raw.stat().st_size == 0 or not meta_path.is_file():
            return False
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            return False
        key = {
            "tool": job.tool_name,
            "tool_version": job.tool_version,
            "tool_config_id": job.tool_config_id,
            "image_ref": job.image_ref,
            "mode": job.mode_slug,
            "sbom_source": job.sbom_source,
        }
        return all(meta.get(k) == v for k, v in key.items())

    def _finish(self, job: ScanJob, status: JobStatus, detail: str = "") -> ScanJob:
        job.status = status
        job.detail = detail
        job.finished_at = _now_iso()
        self._append_ledger(job)
        return job

    def _append_ledger(self, job: ScanJob) -> None:
        row = {
            "job_id": job.job_id,
            "kind": job.kind.value,
            "tool": job.tool_name,
            "tool_config_id": job.tool_config_id,
            "image_ref": job.image_ref,
            "input_mode": job.input_mode.value,
            "sbom_source": job.sbom_source,
            "tool_version": job.tool_version,
            "status": job.status.value,
            "output_path": str(job.output_path) if job.output_path else None,
            "detail": job.detail,
            "started_at": job.started_at,
            "finished_at": job.finished_at,
        }
        line = json.dumps(row, ensure_ascii=False)
        with self._ledger_lock:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            with self.ledger_path.open("a", encoding="utf-8") as fp:
                fp.write(line + "\n")

    def _sbom_artifact(self, job: ScanJob) -> Path:
        producer = job.sbom_source or job.tool_name
        version = self.tool_version(producer)
        return self.artifact_path(producer, version, job.image_ref, "export-sbom")

    def run_job(self, job: ScanJob) -> ScanJob:
        """Execute one job, honoring the cache; failures never raise."""
        job.started_at = _now_iso()
        job.status = JobStatus.RUNNING
        try:
            job.tool_version = self.tool_version(job.tool_name)
        except ToolUnavailableError as exc:
            return self._finish(job, JobStatus.FAILED, f"not-found: {exc}")

        raw = self.artifact_path(
            job.tool_name, job.tool_version, job.image_ref, job.mode_slug
        )
        job.output_path = raw
        if not self.force and self._cache_fresh(job, raw):
            return self._finish(job, JobStatus.SKIPPED_CACHED, "cache hit")

        mapping: dict[str, str] = {"image": job.image_ref}
        if job.kind is JobKind.SCAN and job.input_mode is not InputMode.IMAGE:
            try:
                sbom = self._sbom_artifact(job)
            except ToolUnavailableError as exc:
                return self._finish(job, JobStatus.FAILED, f"not-found: {exc}")
            if not sbom.is_file() or sbom.stat().st_size == 0:
                return self._finish(
                    job, JobStatus.FAILED, f"missing SBOM artifact: {sbom}"
                )
            mapping["sbom_path"] = str(sbom)

        raw.parent.mkdir(parents=True, exist_ok=True)
        tmp = raw.parent / f".{raw.name}.tmp-{os.getpid()}-{threading.get_ident()}"
        mapping["out_path"] = str(tmp)
        try:
            command = shlex.split(job.command_template.format_map(mapping))
        except KeyError as exc:
            return self._finish(
                job, JobStatus.FAILED, f"unresolvable placeholder {exc.args[0]!r}"
            )
        try:
            proc = subprocess.run(
                command, capture_output=True, text=True, timeout=self.timeout
            )
        except FileNotFoundError:
            tmp.unlink(missing_ok=True)
            return self._finish(
                job, JobStatus.FAILED, f"not-found: executable {command[0]!r}"
            )
        except subprocess.TimeoutExpired:
            tmp.unlink(missing_ok=True)
            return self._finish(
                job, JobStatus.FAILED, f"timeout after {self.timeout:g}s"
            )
        if proc.returncode != 0:
            tmp.unlink(missing_ok=True)
            stderr = (proc.stderr or "").strip().splitlines()
            excerpt = stderr[-1][:400] if stderr else ""
            return self._finish(
                job, JobStatus.FAILED, f"exit {proc.returncode}: {excerpt}"
            )
        if not tmp.is_file() or tmp.stat().st_size == 0:
            tmp.unlink(missing_ok=True)
            return self._finish(job, JobStatus.FAILED, "empty-output")
        os.replace(tmp, raw)
        meta = {
            "tool": job.tool_name,
            "tool_version": job.tool_version,
            "tool_config_id": job.tool_config_id,
            "image_ref": job.image_ref,
            "digest": image_digest(job.image_ref),
            "mode": job.mode_slug,
            "sbom_source": job.sbom_source,
            "command": command,
            "bytes": raw.stat().st_size,
            "created_at": _now_iso(),
        }
        raw.with_suffix(".meta").write_text(
            json.dumps(meta, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
        )
        return self._finish(job, JobStatus.DONE)

    def run_plan(self, jobs: Sequence[ScanJob]) -> list[ScanJob]:
        """Run all jobs: SBOM wave first, then scans; independent jobs run in
        parallel up to the worker count.  A failed dependency fails its
        dependents without spawning them; siblings keep running."""
        jobs = list(jobs)
        by_id = {j.job_id: j for j in jobs}
        sbom_wave = [j for j in jobs if j.kind is JobKind.SBOM]
        scan_wave = [j for j in jobs if j.kind is JobKind.SCAN]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            if sbom_wave:
                list(pool.map(self.run_job, sbom_wave))
            runnable = []
            for job in scan_wave:
                dep = by_id.get(job.depends_on) if job.depends_on else None
                if dep is not None and dep.status is JobStatus.FAILED:
                    job.started_at = _now_iso()
                    self._finish(
                        job, JobStatus.FAILED, f"dependency failed: {dep.job_id}"
                    )
                else:
                    runnable.append(job)
            if runnable:
                list(pool.map(self.run_job, runnable))
        return jobs


def read_ledger(path: str | Path) -> list[dict]:
    """Load finished-job rows from a run ledger."""
    rows = []
    ledger = Path(path)
    if not ledger.is_file():
        return rows
    for line in ledger.read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append(json.loads(line))
    return rows


def summarize(jobs: Iterable[ScanJob]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for job in jobs:
        counts[job.status.value] = counts.get(job.status.value, 0) + 1
    return counts
