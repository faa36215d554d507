"""Canonical domain types for normalized vulnerability observations.

Every report format is reduced to flat ``VulnRecord`` rows; two rows from
different tools describe "the same vulnerability" exactly when their
``MatchKey`` projections (image, component id, vulnerability id) are equal.
All types are immutable after construction and safe for concurrent reads.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, TextIO


class ValidationError(ValueError):
    """Input violates a documented precondition or invariant."""


class IdSystem(str, Enum):
    CVE = "CVE"
    GHSA = "GHSA"
    NSWG = "NSWG"
    BIT = "BIT"
    DSA = "DSA"
    NPM = "NPM"
    TEMP = "TEMP"
    OTHER = "OTHER"


class Status(str, Enum):
    AFFECTED = "AFFECTED"
    NOT_AFFECTED = "NOT_AFFECTED"
    UNDER_INVESTIGATION = "UNDER_INVESTIGATION"
    FIXED = "FIXED"
    # Distinct value, not absent data: some report formats carry no status
    # field at all and the filter layer must tell "no status" apart from
    # "not affected".
    UNSPECIFIED = "UNSPECIFIED"


class InputMode(str, Enum):
    IMAGE = "image"
    NATIVE_SBOM = "native-sbom"
    EXTERNAL_SBOM = "external-sbom"


# Prefix families checked in declaration order; first match wins.
_ID_PREFIXES: tuple[tuple[str, IdSystem], ...] = (
    ("CVE-", IdSystem.CVE),
    ("GHSA-", IdSystem.GHSA),
    ("NSWG-", IdSystem.NSWG),
    ("BIT-", IdSystem.BIT),
    ("DSA-", IdSystem.DSA),
    ("NPM-", IdSystem.NPM),
    ("TEMP-", IdSystem.TEMP),
)

_DIGEST_RE = re.compile(r"@sha256:[0-9a-f]{64}$")

SUBSET_LABELS = ("random", "vulnerable", "non_vulnerable")


def classify_identifier(vuln_id: str) -> IdSystem:
    """Return the identifier family for a vulnerability id.

    Case-insensitive prefix match; anything outside the known families
    (e.g. tool-private ids like SNYK-...) is OTHER.
    """
    if not vuln_id or not vuln_id.strip():
        raise ValidationError("vulnerability id must be non-empty")
    upper = vuln_id.strip().upper()
    for prefix, system in _ID_PREFIXES:
        if upper.startswith(prefix):
            return system
    return IdSystem.OTHER


def normalize_component(name: str, version: str = "", namespace: str = "") -> str:
    """Build the canonical component identifier used for cross-tool matching.

    Plain names become lowercase ``name@version`` (bare lowercase name when
    the version is empty).  A package-URL passed as ``name`` is kept in purl
    form but stripped of qualifiers and subpath, lowercased, and given the
    supplied version if the purl itself carries none.  ``namespace`` is
    accepted for caller convenience and does not contribute to identity.
    Idempotent: normalizing an already-normalized id is the identity.
    """
    if not name or not name.strip():
        raise ValidationError("component name must be non-empty")
    name = name.strip()
    version = version.strip()
    if name.lower().startswith("pkg:"):
        base = name.split("?", 1)[0].split("#", 1)[0]
        tail = base.rsplit("/", 1)[-1]
        if "@" not in tail and version:
            base = f"{base}@{version}"
        return base.lower()
    if version:
        return f"{name}@{version}".lower()
    return name.lower()


def require_pinned(image_ref: str) -> str:
    """Validate that an image reference carries an explicit sha256 digest."""
    if not _DIGEST_RE.search(image_ref):
        raise ValidationError(
            f"image reference must be pinned with @sha256:<64 hex digits>: {image_ref!r}"
        )
    return image_ref


def image_digest(image_ref: str) -> str:
    """Extract the hex digest from a pinned image reference."""
    require_pinned(image_ref)
    return image_ref.rsplit("@sha256:", 1)[1]


@dataclass(frozen=True)
class VulnRecord:
    """One normalized vulnerability observation from one tool configuration."""

    image_ref: str
    component_id: str
    component_name: str
    component_version: str
    vuln_id: str
    id_system: IdSystem
    status: Status
    tool_config_id: str
    severity: str | None = None
    source_db: str | None = None
    observed_at: str | None = None

    def __post_init__(self) -> None:
        if not self.vuln_id or self.vuln_id != self.vuln_id.strip():
            raise ValidationError(
                f"vuln_id must be non-empty without surrounding whitespace: {self.vuln_id!r}"
            )
        expected = classify_identifier(self.vuln_id)
        if self.id_system is not expected:
            raise ValidationError(
                f"id_system {self.id_system.value} inconsistent with {self.vuln_id!r}"
                f" (classified {expected.value})"
            )

    @classmethod
    def build(
        cls,
        *,
        image_ref: str,
        component_name: str,
        component_version: str,
        vuln_id: str,
        status: Status,
        tool_config_id: str,
        severity: str | None = None,
        source_db: str | None = None,
        observed_at: str | None = None,
    ) -> "VulnRecord":
        """Normalize raw parser fields into a valid record.

        Vulnerability ids are uppercased before storage: CVE/GHSA ids are
        case-insensitive in the wild and case drift would otherwise count
        as disagreement between tools.
        """
        vuln_id = vuln_id.strip().upper()
        return cls(
            image_ref=require_pinned(image_ref),
            component_id=normalize_component(component_name, component_version),
            component_name=component_name,
            component_version=component_version,
            vuln_id=vuln_id,
            id_system=classify_identifier(vuln_id),
            status=status,
            tool_config_id=tool_config_id,
            severity=severity,
            source_db=source_db,
            observed_at=observed_at,
        )

    @property
    def match_key(self) -> "MatchKey":
        return MatchKey(self.image_ref, self.component_id, self.vuln_id)


@dataclass(frozen=True)
class MatchKey:
    """The 3-field identity under which two observations count as equal."""

    image_ref: str
    component_id: str
    vuln_id: str

    def as_tuple(self) -> tuple[str, str, str]:
        return (self.image_ref, self.component_id, self.vuln_id)


@dataclass(frozen=True)
class RecordSet:
    """A labeled set of MatchKeys from one tool configuration and subset."""

    label: str
    keys: frozenset[MatchKey]

    @classmethod
    def from_records(cls, label: str, records: Iterable[VulnRecord]) -> "RecordSet":
        return cls(label=label, keys=frozenset(r.match_key for r in records))

    def __len__(self) -> int:
        return len(self.keys)


@dataclass(frozen=True)
class ManifestEntry:
    image_ref: str
    subset: str

    def __post_init__(self) -> None:
        require_pinned(self.image_ref)
        if self.subset not in SUBSET_LABELS:
            raise ValidationError(
                f"unknown subset label {self.subset!r}; expected one of {SUBSET_LABELS}"
            )


@dataclass(frozen=True)
class DatasetManifest:
    """Pinned image list partitioned into random/vulnerable/non_vulnerable."""

    entries: tuple[ManifestEntry, ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for entry in self.entries:
            if entry.image_ref in seen:
                raise ValidationError(f"duplicate manifest image: {entry.image_ref}")
            seen.add(entry.image_ref)

    @classmethod
    def parse(cls, text: str) -> "DatasetManifest":
        """Parse the plain-text manifest: one "image@sha256:digest label" per line."""
        entries = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValidationError(
                    f"manifest line {lineno}: expected 'image@sha256:digest subset-label'"
                )
            entries.append(ManifestEntry(image_ref=parts[0], subset=parts[1]))
        return cls(entries=tuple(entries))

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    @property
    def images(self) -> tuple[str, ...]:
        return tuple(e.image_ref for e in self.entries)

    def subset_of(self, image_ref: str) -> str | None:
        for entry in self.entries:
            if entry.image_ref == image_ref:
                return entry.subset
        return None


@dataclass(frozen=True)
class ToolCapabilities:
    scan_sbom: bool = False
    produce_sbom: bool = False
    scan_image: bool = False


@dataclass(frozen=True)
class ToolConfig:
    """A tool plus input mode: one column of the experiment matrix."""

    tool_name: str
    input_mode: InputMode
    capabilities: ToolCapabilities
    command_template: str = ""
    databases: frozenset[str] = frozenset()
    sbom_source: str | None = None

    def __post_init__(self) -> None:
        caps = self.capabilities
        if self.input_mode is InputMode.IMAGE and not caps.scan_image:
            raise ValidationError(f"{self.tool_name} cannot scan images directly")
        if self.input_mode in (InputMode.NATIVE_SBOM, InputMode.EXTERNAL_SBOM):
            if not caps.scan_sbom:
                raise ValidationError(f"{self.tool_name} cannot scan SBOMs")
        if self.input_mode is InputMode.NATIVE_SBOM and not caps.produce_sbom:
            raise ValidationError(
                f"{self.tool_name} cannot produce its own SBOM for native-SBOM scanning"
            )
        if self.input_mode is InputMode.EXTERNAL_SBOM:
            if not self.sbom_source:
                raise ValidationError("external-SBOM configuration requires sbom_source")
            if self.sbom_source == self.tool_name:
                raise ValidationError(
                    "external-SBOM source must be a different tool; use native-sbom"
                )
        elif self.sbom_source is not None:
            raise ValidationError("sbom_source is only valid for external-sbom mode")

    @property
    def config_id(self) -> str:
        if self.input_mode is InputMode.IMAGE:
            return self.tool_name
        if self.input_mode is InputMode.NATIVE_SBOM:
            return f"{self.tool_name}+native-sbom"
        return f"{self.tool_name}+{self.sbom_source}-sbom"


@dataclass(frozen=True)
class SimilarityMatrix:
    """Labeled symmetric matrix of similarity scores in [0, 1].

    ``flagged`` marks cells whose value came from the empty-vs-empty
    convention (defined similarity 1) so they stay distinguishable from
    genuinely identical non-empty sets in rendered output.
    """

    labels: tuple[str, ...]
    values: tuple[tuple[float, ...], ...]
    flagged: frozenset[tuple[int, int]] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        n = len(self.labels)
        if len(set(self.labels)) != n:
            raise ValidationError("matrix labels must be distinct")
        if len(self.values) != n or any(len(row) != n for row in self.values):
            raise ValidationError(f"matrix must be {n}x{n}")
        for i in range(n):
            if self.values[i][i] != 1.0:
                raise ValidationError(f"diagonal cell [{i}][{i}] must be 1")
            for j in range(n):
                v = self.values[i][j]
                if not 0.0 <= v <= 1.0:
                    raise ValidationError(f"cell [{i}][{j}]={v} outside [0, 1]")
                if self.values[i][j] != self.values[j][i]:
                    raise ValidationError(f"matrix not symmetric at [{i}][{j}]")

    @property
    def size(self) -> int:
        return len(self.labels)

    def cell(self, a: str, b: str) -> float:
        return self.values[self.labels.index(a)][self.labels.index(b)]


# Canonical record-line format: one flat JSON object per line, exactly these
# fields in this order, lines sorted by (image_ref, component_id, vuln_id).
RECORD_FIELDS = (
    "image_ref",
    "component_id",
    "component_name",
    "component_version",
    "vuln_id",
    "id_system",
    "status",
    "severity",
    "source_db",
    "tool_config_id",
    "observed_at",
)

def _sort_key(record: VulnRecord) -> tuple[str, str, str, str, str]:
    return (
        record.image_ref,
        record.component_id,
        record.vuln_id,
        record.tool_config_id,
        record.status.value,
    )


def record_to_json_line(record: VulnRecord) -> str:
    payload = {
        "image_ref": record.image_ref,
        "component_id": record.component_id,
        "component_name": record.component_name,
        "component_version": record.component_version,
        "vuln_id": record.vuln_id,
        "id_system": record.id_system.value,
        "status": record.status.value,
        "severity": record.severity,
        "source_db": record.source_db,
        "tool_config_id": record.tool_config_id,
        "observed_at": record.observed_at,
    }
    return json.dumps(payload, ensure_ascii=False, separators=(",", ":"))


def record_from_json_line(line: str) -> VulnRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"bad record line: {exc}") from exc
    if not isinstance(obj, dict):
        raise ValidationError("record line must be a JSON object")
    missing = [f for f in RECORD_FIELDS if f not in obj]
    if missing:
        raise ValidationError(f"record line missing fields: {', '.join(missing)}")
    try:
        return VulnRecord(
            image_ref=obj["image_ref"],
            component_id=obj["component_id"],
            component_name=obj["component_name"],
            component_version=obj["component_version"],
            vuln_id=obj["vuln_id"],
            id_system=IdSystem(obj["id_system"]),
            status=Status(obj["status"]),
            tool_config_id=obj["tool_config_id"],
            severity=obj["severity"],
            source_db=obj["source_db"],
            observed_at=obj["observed_at"],
        )
    except ValueError as exc:
        raise ValidationError(f"bad record line: {exc}") from exc


def write_records(records: Iterable[VulnRecord], out: TextIO) -> int:
    """Emit canonical record lines, sorted; returns the number written."""
    ordered = sorted(records, key=_sort_key)
    for record in ordered:
        out.write(record_to_json_line(record))
        out.write("\n")
    return len(ordered)


def iter_record_lines(text: str) -> Iterator[VulnRecord]:
    for line in text.splitlines():
        if line.strip():
            yield record_from_json_line(line)


def read_records(path: str | Path) -> list[VulnRecord]:
    return list(iter_record_lines(Path(path).read_text(encoding="utf-8")))
