"""Per-format report adapters: raw scanner/VEX documents to VulnRecords.

Each supported format gets one parse function and one sniffing predicate,
registered in ``DESCRIPTORS``.  Parsers are pure functions of their input
bytes: no network, no filesystem, deterministic record order (document
order).  Entries with unknown status tokens are kept with UNSPECIFIED and
a warning diagnostic rather than dropped.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable

from .model import Status, ValidationError, VulnRecord, require_pinned

log = logging.getLogger("vexmatch.parsers")


class ReportFormat(Enum):
    """Supported input formats; values are the CLI-visible names."""

    GRYPE_NATIVE = "grype"
    TRIVY_NATIVE = "trivy"
    CYCLONEDX_VEX = "cyclonedx-vex"
    CSAF_VEX = "csaf"
    OSV_NATIVE = "osv"
    SCOUT_NATIVE = "scout"
    SNYK_NATIVE = "snyk"
    DEPSCAN_NATIVE = "depscan"
    VEXY_NATIVE = "vexy"


class ParseError(ValueError):
    """Malformed report document; carries a locator when known."""

    def __init__(self, message: str, *, path: str | None = None, offset: int | None = None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(f"at {path}")
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class AmbiguousFormatError(ParseError):
    def __init__(self, candidates: list[ReportFormat]):
        self.candidates = candidates
        names = ", ".join(sorted(f.value for f in candidates)) or "none"
        super().__init__(f"cannot identify report format; matching formats: {names}")


# Status token tables.  AFFECTED follows the convention "known and no patch
# provided": won't-fix and deferred-fix tokens therefore map to AFFECTED,
# while an available fix maps to FIXED.
_GRYPE_FIX_STATE = {
    "not-fixed": Status.AFFECTED,
    "wont-fix": Status.AFFECTED,
    "fixed": Status.FIXED,
}

_TRIVY_STATUS = {
    "affected": Status.AFFECTED,
    "will_not_fix": Status.AFFECTED,
    "fix_deferred": Status.AFFECTED,
    "end_of_life": Status.AFFECTED,
    "fixed": Status.FIXED,
    "not_affected": Status.NOT_AFFECTED,
    "under_investigation": Status.UNDER_INVESTIGATION,
}

_CSAF_BUCKETS = {
    "known_affected": Status.AFFECTED,
    "first_affected": Status.AFFECTED,
    "last_affected": Status.AFFECTED,
    "known_not_affected": Status.NOT_AFFECTED,
    "fixed": Status.FIXED,
    "first_fixed": Status.FIXED,
    "under_investigation": Status.UNDER_INVESTIGATION,
}

_CDX_ANALYSIS_STATE = {
    "exploitable": Status.AFFECTED,
    "resolved": Status.FIXED,
    "resolved_with_pedigree": Status.FIXED,
    "in_triage": Status.UNDER_INVESTIGATION,
    "not_affected": Status.NOT_AFFECTED,
    "false_positive": Status.NOT_AFFECTED,
}

_SCOUT_STATE = {
    "detected": Status.AFFECTED,
    "confirmed": Status.AFFECTED,
    "resolved": Status.FIXED,
    "dismissed": Status.NOT_AFFECTED,
}

_DEPSCAN_STATUS = {
    "affected": Status.AFFECTED,
    "exploitable": Status.AFFECTED,
    "fixed": Status.FIXED,
    "not_affected": Status.NOT_AFFECTED,
    "under_investigation": Status.UNDER_INVESTIGATION,
}


def _map_status(table: dict[str, Status], token: object, fmt: ReportFormat) -> Status:
    """Map a raw token; None means the entry carried no status field."""
    if token is None:
        return Status.UNSPECIFIED
    key = str(token).strip().lower()
    if key in table:
        return table[key]
    log.warning("unknown %s status token %r; recording UNSPECIFIED", fmt.value, token)
    return Status.UNSPECIFIED


def _purl_name_version(purl: str) -> tuple[str, str]:
    base = purl.split("?", 1)[0].split("#", 1)[0]
    tail = base.rsplit("/", 1)[-1]
    if "@" in tail:
        name, _, version = tail.partition("@")
        return name, version
    return tail, ""


def _decode_json(raw: bytes, *, path: str = "$") -> object:
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path=path, offset=exc.pos) from exc


def _as_text(raw: bytes | str) -> str:
    if isinstance(raw, bytes):
        return raw.decode("utf-8", errors="replace")
    return raw


def _as_bytes(raw: bytes | str) -> bytes:
    if isinstance(raw, str):
        return raw.encode("utf-8")
    return raw


def _require(entry: dict, key: str, path: str) -> object:
    value = entry.get(key)
    if value in (None, ""):
        raise ParseError(f"missing required field {key!r}", path=path)
    return value


def _parse_grype(doc: object, image_ref: str, tool_config_id: str) -> list[VulnRecord]:
    matches = doc.get("matches") if isinstance(doc, dict) else None
    if not isinstance(matches, list):
        raise ParseError("expected top-level 'matches' array", path="$.matches")
    observed = None
    descriptor = doc.get("descriptor")
    if isinstance(descriptor, dict):
        observed = descriptor.get("timestamp")
    records = []
    for i, match in enumerate(matches):
        path = f"$.matches[{i}]"
        vuln = match.get("vulnerability")
        if not isinstance(vuln, dict):
            raise ParseError("match entry without 'vulnerability'", path=path)
        artifact = match.get("artifact") or {}
        fix = vuln.get("fix") or {}
        records.append(
            VulnRecord.build(
                image_ref=image_ref,
                component_name=str(
                    artifact.get("name") or _require(artifact, "purl", path + ".artifact")
                ),
                component_version=str(artifact.get("version") or ""),
                vuln_id=str(_require(vuln, "id", path + ".vulnerability")),
                status=_map_status(
                    _GRYPE_FIX_STATE, fix.get("state"), ReportFormat.GRYPE_NATIVE
                ),
                tool_config_id=tool_config_id,
                severity=vuln.get("severity"),
                source_db=vuln.get("namespace"),
                observed_at=observed,
            )
        )
    return records


def _parse_trivy(doc: object, image_ref: str, tool_config_id: str) -> list[VulnRecord]:
    results = doc.get("Results") if isinstance(doc, dict) else None
    if results is None:
        results = []
    if not isinstance(results, list):
        raise ParseError("'Results' must be an array", path="$.Results")
    observed = doc.get("CreatedAt") if isinstance(doc, dict) else None
    records = []
    for i, result in enumerate(results):
        for j, vuln in enumerate(result.get("Vulnerabilities") or []):
            path = f"$.Results[{i}].Vulnerabilities[{j}]"
            datasource = vuln.get("DataSource") or {}
            records.append(
                VulnRecord.build(
                    image_ref=image_ref,
                    component_name=str(_require(vuln, "PkgName", path)),
                    component_version=str(vuln.get("InstalledVersion") or ""),
                    vuln_id=str(_require(vuln, "VulnerabilityID", path)),
                    status=_map_status(
                        _TRIVY_STATUS, vuln.get("Status"), ReportFormat.TRIVY_NATIVE
                    ),
                    tool_config_id=tool_config_id,
                    severity=vuln.get("Severity"),
                    source_db=datasource.get("ID") or datasource.get("Name"),
                    observed_at=observed,
                )
            )
    return records


def _cyclonedx_component_index(doc: dict) -> dict[str, dict]:
    index = {}
    for comp in doc.get("components") or []:
        ref = comp.get("bom-ref")
        if ref:
            index[str(ref)] = comp
    return index


def _parse_cyclonedx_like(
    doc: object,
    image_ref: str,
    tool_config_id: str,
    fmt: ReportFormat,
    *,
    force_unspecified: bool,
) -> list[VulnRecord]:
    if not isinstance(doc, dict) or doc.get("bomFormat") != "CycloneDX":
        raise ParseError("expected a CycloneDX document", path="$.bomFormat")
    components = _cyclonedx_component_index(doc)
    observed = (doc.get("metadata") or {}).get("timestamp")
    records = []
    for i, vuln in enumerate(doc.get("vulnerabilities") or []):
        path = f"$.vulnerabilities[{i}]"
        vuln_id = str(_require(vuln, "id", path))
        source_db = (vuln.get("source") or {}).get("name")
        severity = None
        for rating in vuln.get("ratings") or []:
            if rating.get("severity"):
                severity = str(rating["severity"])
                break
        if force_unspecified:
            status = Status.UNSPECIFIED
        else:
            analysis = vuln.get("analysis") or {}
            status = _map_status(_CDX_ANALYSIS_STATE, analysis.get("state"), fmt)
        for k, affect in enumerate(vuln.get("affects") or []):
            ref = str(affect.get("ref") or "")
            if not ref:
                raise ParseError("affects entry without 'ref'", path=f"{path}.affects[{k}]")
            comp = components.get(ref)
            if comp is not None:
                name = str(comp.get("name") or comp.get("purl") or ref)
                version = str(comp.get("version") or "")
            elif "pkg:" in ref:
                name, version = _purl_name_version(ref[ref.index("pkg:") :])
            else:
                name, version = ref, ""
            records.append(
                VulnRecord.build(
                    image_ref=image_ref,
                    component_name=name,
                    component_version=version,
                    vuln_id=vuln_id,
                    status=status,
                    tool_config_id=tool_config_id,
                    severity=severity,
                    source_db=source_db,
                    observed_at=observed,
                )
            )
    return records


def _csaf_products(doc: dict) -> dict[str, tuple[str, str]]:
    """Map product_id -> (component name, version) from the product tree."""
    out: dict[str, tuple[str, str]] = {}

    def take(node: dict) -> None:
        pid = node.get("product_id")
        if not pid:
            return
        helper = node.get("product_identification_helper") or {}
        purl = helper.get("purl")
        if purl:
            out[str(pid)] = _purl_name_version(str(purl))
        else:
            out[str(pid)] = (str(node.get("name") or pid), "")

    def walk_branches(branches: list) -> None:
        for branch in branches:
            product = branch.get("product")
            if isinstance(product, dict):
                take(product)
            walk_branches(branch.get("branches") or [])

    tree = doc.get("product_tree") or {}
    for node in tree.get("full_product_names") or []:
        take(node)
    walk_branches(tree.get("branches") or [])
    return out


def _parse_csaf(doc: object, image_ref: str, tool_config_id: str) -> list[VulnRecord]:
    if not isinstance(doc, dict) or "document" not in doc:
        raise ParseError("expected a CSAF document", path="$.document")
    products = _csaf_products(doc)
    observed = ((doc.get("document") or {}).get("tracking") or {}).get(
        "current_release_date"
    )
    records = []
    for i, vuln in enumerate(doc.get("vulnerabilities") or []):
        path = f"$.vulnerabilities[{i}]"
        vuln_id = vuln.get("cve")
        ids = vuln.get("ids") or []
        if not vuln_id and ids:
            vuln_id = ids[0].get("text")
        if not vuln_id:
            raise ParseError("vulnerability without 'cve' or 'ids'", path=path)
        source_db = ids[0].get("system_name") if ids else None
        severity = None
        for score in vuln.get("scores") or []:
            base = (score.get("cvss_v3") or {}).get("baseSeverity")
            if base:
                severity = str(base)
                break
        for bucket, product_ids in (vuln.get("product_status") or {}).items():
            status = _map_status(_CSAF_BUCKETS, bucket, ReportFormat.CSAF_VEX)
            for pid in product_ids or []:
                name, version = products.get(str(pid), (str(pid), ""))
                records.append(
                    VulnRecord.build(
                        image_ref=image_ref,
                        component_name=name,
                        component_version=version,
                        vuln_id=str(vuln_id),
                        status=status,
                        tool_config_id=tool_config_id,
                        severity=severity,
                        source_db=source_db,
                        observed_at=observed,
                    )
                )
    return records


def _parse_osv(doc: object, image_ref: str, tool_config_id: str) -> list[VulnRecord]:
    results = doc.get("results") if isinstance(doc, dict) else None
    if not isinstance(results, list):
        raise ParseError("expected top-level 'results' array", path="$.results")
    records = []
    for i, result in enumerate(results):
        for j, pkg in enumerate(result.get("packages") or []):
            info = pkg.get("package") or {}
            path = f"$.results[{i}].packages[{j}]"
            for k, vuln in enumerate(pkg.get("vulnerabilities") or []):
                db_specific = vuln.get("database_specific") or {}
                records.append(
                    VulnRecord.build(
                        image_ref=image_ref,
                        component_name=str(_require(info, "name", path + ".package")),
                        component_version=str(info.get("version") or ""),
                        vuln_id=str(
                            _require(vuln, "id", f"{path}.vulnerabilities[{k}]")
                        ),
                        # The format has no exploitability-status field.
                        status=Status.UNSPECIFIED,
                        tool_config_id=tool_config_id,
                        severity=db_specific.get("severity"),
                        source_db=db_specific.get("source"),
                        observed_at=None,
                    )
                )
    return records


def _parse_scout(doc: object, image_ref: str, tool_config_id: str) -> list[VulnRecord]:
    if not isinstance(doc, dict) or "vulnerabilities" not in doc:
        raise ParseError("expected 'vulnerabilities' array", path="$.vulnerabilities")
    observed = (doc.get("scan") or {}).get("end_time")
    records = []
    for i, vuln in enumerate(doc.get("vulnerabilities") or []):
        path = f"$.vulnerabilities[{i}]"
        identifiers = vuln.get("identifiers") or []
        vuln_id = None
        if identifiers:
            vuln_id = identifiers[0].get("value") or identifiers[0].get("name")
        if not vuln_id:
            vuln_id = vuln.get("name") or vuln.get("id")
        if not vuln_id:
            raise ParseError("entry without vulnerability identifier", path=path)
        dependency = ((vuln.get("location") or {}).get("dependency")) or {}
        package = dependency.get("package") or {}
        records.append(
            VulnRecord.build(
                image_ref=image_ref,
                component_name=str(_require(package, "name", path + ".location")),
                component_version=str(dependency.get("version") or ""),
                vuln_id=str(vuln_id),
                status=_map_status(
                    _SCOUT_STATE, vuln.get("state"), ReportFormat.SCOUT_NATIVE
                ),
                tool_config_id=tool_config_id,
                severity=vuln.get("severity"),
                source_db=vuln.get("source"),
                observed_at=observed,
            )
        )
    return records


def _parse_snyk(doc: object, image_ref: str, tool_config_id: str) -> list[VulnRecord]:
    if not isinstance(doc, dict) or not isinstance(doc.get("vulnerabilities"), list):
        raise ParseError("expected 'vulnerabilities' array", path="$.vulnerabilities")
    records = []
    for i, vuln in enumerate(doc["vulnerabilities"]):
        path = f"$.vulnerabilities[{i}]"
        identifiers = vuln.get("identifiers") or {}
        # Prefer the public alias over the tool-private id so reports line
        # up with tools that publish CVE/GHSA ids directly.
        vuln_id = None
        for system in ("CVE", "GHSA"):
            aliases = identifiers.get(system) or []
            if aliases:
                vuln_id = aliases[0]
                break
        if not vuln_id:
            vuln_id = _require(vuln, "id", path)
        upgradable = vuln.get("isUpgradable")
        patchable = vuln.get("isPatchable")
        if upgradable is None and patchable is None:
            status = Status.UNSPECIFIED
        elif upgradable or patchable:
            status = Status.FIXED
        else:
            status = Status.AFFECTED
        records.append(
            VulnRecord.build(
                image_ref=image_ref,
                component_name=str(_require(vuln, "packageName", path)),
                component_version=str(vuln.get("version") or ""),
                vuln_id=str(vuln_id),
                status=status,
                tool_config_id=tool_config_id,
                severity=vuln.get("severity"),
                source_db=None,
                observed_at=None,
            )
        )
    return records


def _depscan_lines(raw: bytes) -> list[dict]:
    out = []
    offset = 0
    for line in _as_text(raw).splitlines(keepends=True):
        if line.strip():
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(
                    f"invalid JSON line: {exc.msg}", offset=offset + exc.pos
                ) from exc
            if not isinstance(obj, dict):
                raise ParseError("finding line must be a JSON object", offset=offset)
            out.append(obj)
        offset += len(line.encode("utf-8"))
    return out


def _parse_depscan(raw: bytes, image_ref: str, tool_config_id: str) -> list[VulnRecord]:
    records = []
    for i, finding in enumerate(_depscan_lines(raw)):
        path = f"line {i + 1}"
        purl = finding.get("purl")
        name = finding.get("package")
        version = str(finding.get("version") or "")
        if not name and purl:
            name, pv = _purl_name_version(str(purl))
            version = version or pv
        if not name:
            raise ParseError("finding without 'package' or 'purl'", path=path)
        if finding.get("status") is not None:
            status = _map_status(
                _DEPSCAN_STATUS, finding.get("status"), ReportFormat.DEPSCAN_NATIVE
            )
        elif str(finding.get("fix_version") or "").strip():
            status = Status.FIXED
        else:
            status = Status.AFFECTED
        records.append(
            VulnRecord.build(
                image_ref=image_ref,
                component_name=str(name),
                component_version=version,
                vuln_id=str(_require(finding, "id", path)),
                status=status,
                tool_config_id=tool_config_id,
                severity=finding.get("severity"),
                source_db=finding.get("source"),
                observed_at=None,
            )
        )
    return records


def _tool_names(doc: dict) -> list[str]:
    tools = (doc.get("metadata") or {}).get("tools")
    names: list[str] = []
    if isinstance(tools, list):
        names = [str(t.get("name") or "") for t in tools if isinstance(t, dict)]
    elif isinstance(tools, dict):
        names = [
            str(t.get("name") or "")
            for t in tools.get("components") or []
            if isinstance(t, dict)
        ]
    return [n.lower() for n in names if n]


def _is_vexy_doc(doc: object) -> bool:
    return (
        isinstance(doc, dict)
        and doc.get("bomFormat") == "CycloneDX"
        and "vexy" in _tool_names(doc)
    )


def _detect_depscan(raw: bytes, doc: object) -> bool:
    if isinstance(doc, dict):
        return "id" in doc and "purl" in doc
    if doc is not None:
        return False
    # Whole-document JSON failed: accept only if every non-blank line is a
    # finding object.
    try:
        findings = _depscan_lines(raw)
    except ParseError:
        return False
    return bool(findings) and all(
        ("purl" in f or "package" in f) and ("id" in f or "cve" in f) for f in findings
    )


@dataclass(frozen=True)
class ParserDescriptor:
    """One supported format: a sniffing rule plus its parse function."""

    format_name: ReportFormat
    detect: Callable[[bytes, object], bool]
    parse: Callable[[bytes, object, str, str], list[VulnRecord]]


def _wrap_doc(fn: Callable[[object, str, str], list[VulnRecord]]):
    def parse(raw: bytes, doc: object, image_ref: str, tool_config_id: str):
        if doc is None:
            doc = _decode_json(raw)
        return fn(doc, image_ref, tool_config_id)

    return parse


DESCRIPTORS: tuple[ParserDescriptor, ...] = (
    ParserDescriptor(
        ReportFormat.GRYPE_NATIVE,
        lambda raw, doc: isinstance(doc, dict)
        and isinstance(doc.get("matches"), list)
        and all(isinstance(m, dict) and "vulnerability" in m for m in doc["matches"]),
        _wrap_doc(_parse_grype),
    ),
    ParserDescriptor(
        ReportFormat.TRIVY_NATIVE,
        lambda raw, doc: isinstance(doc, dict)
        and "SchemaVersion" in doc
        and "Results" in doc,
        _wrap_doc(_parse_trivy),
    ),
    ParserDescriptor(
        ReportFormat.CYCLONEDX_VEX,
        lambda raw, doc: isinstance(doc, dict)
        and doc.get("bomFormat") == "CycloneDX"
        and not _is_vexy_doc(doc),
        _wrap_doc(
            lambda doc, image, cfg: _parse_cyclonedx_like(
                doc, image, cfg, ReportFormat.CYCLONEDX_VEX, force_unspecified=False
            )
        ),
    ),
    ParserDescriptor(
        ReportFormat.VEXY_NATIVE,
        lambda raw, doc: _is_vexy_doc(doc),
        _wrap_doc(
            # The format carries no exploitability-status field.
            lambda doc, image, cfg: _parse_cyclonedx_like(
                doc, image, cfg, ReportFormat.VEXY_NATIVE, force_unspecified=True
            )
        ),
    ),
    ParserDescriptor(
        ReportFormat.CSAF_VEX,
        lambda raw, doc: isinstance(doc, dict)
        and isinstance(doc.get("document"), dict)
        and str(doc["document"].get("category", "")).startswith("csaf"),
        _wrap_doc(_parse_csaf),
    ),
    ParserDescriptor(
        ReportFormat.OSV_NATIVE,
        lambda raw, doc: isinstance(doc, dict)
        and isinstance(doc.get("results"), list)
        and all(isinstance(r, dict) and "packages" in r for r in doc["results"]),
        _wrap_doc(_parse_osv),
    ),
    ParserDescriptor(
        ReportFormat.SCOUT_NATIVE,
        lambda raw, doc: isinstance(doc, dict)
        and isinstance(doc.get("scan"), dict)
        and isinstance(doc.get("vulnerabilities"), list),
        _wrap_doc(_parse_scout),
    ),
    ParserDescriptor(
        ReportFormat.SNYK_NATIVE,
        lambda raw, doc: isinstance(doc, dict)
        and "ok" in doc
        and isinstance(doc.get("vulnerabilities"), list)
        and "scan" not in doc,
        _wrap_doc(_parse_snyk),
    ),
    ParserDescriptor(
        ReportFormat.DEPSCAN_NATIVE,
        _detect_depscan,
        lambda raw, doc, image, cfg: _parse_depscan(raw, image, cfg),
    ),
)

_BY_FORMAT = {d.format_name: d for d in DESCRIPTORS}


def _sniff_doc(raw: bytes) -> object:
    """Best-effort whole-document JSON parse used only for detection."""
    try:
        return json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError):
        return None


def detect_format(raw: bytes | str) -> ReportFormat:
    """Identify a document's format; exactly one descriptor must accept."""
    raw = _as_bytes(raw)
    if not raw.strip():
        raise ValidationError("cannot detect format of an empty document")
    doc = _sniff_doc(raw)
    accepted = [d.format_name for d in DESCRIPTORS if d.detect(raw, doc)]
    if len(accepted) != 1:
        raise AmbiguousFormatError(accepted)
    return accepted[0]


def parse_report(
    raw: bytes | str,
    format_name: ReportFormat | str,
    image_ref: str,
    tool_config_id: str,
) -> list[VulnRecord]:
    """Parse one raw report into VulnRecords, in document order.

    ``image_ref`` must be digest-pinned; every emitted record is validated
    against the record invariants at this boundary.  An empty report yields
    an empty list.
    """
    raw = _as_bytes(raw)
    if isinstance(format_name, str):
        format_name = ReportFormat(format_name)
    require_pinned(image_ref)
    descriptor = _BY_FORMAT[format_name]
    doc = None
    if format_name is not ReportFormat.DEPSCAN_NATIVE:
        doc = _decode_json(raw)
    try:
        return descriptor.parse(raw, doc, image_ref, tool_config_id)
    except (ParseError, ValidationError):
        raise
    except (AttributeError, KeyError, IndexError, TypeError) as exc:
        raise ParseError(
            f"malformed {format_name.value} document: {exc}"
        ) from exc
