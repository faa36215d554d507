"""Dataset restrictions: subset selection, identifier filters, status filters.

A ``FilterSpec`` is a conjunction of independent predicates.  Filters never
mutate their input, preserve input order, and always return a subset, so
they are idempotent and commute with each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .model import (
    SUBSET_LABELS,
    DatasetManifest,
    IdSystem,
    Status,
    ValidationError,
    VulnRecord,
)


class UnknownImageError(ValidationError):
    """A record's image is missing from the manifest while subsetting."""


@dataclass(frozen=True)
class FilterSpec:
    subset: str | None = None
    id_systems: frozenset[IdSystem] | None = None
    exclude_temp: bool = False
    status_in: frozenset[Status] | None = None

    def __post_init__(self) -> None:
        if self.subset is not None and self.subset not in SUBSET_LABELS + ("complete",):
            raise ValidationError(f"unknown subset {self.subset!r}")
        if self.exclude_temp and self.id_systems == frozenset({IdSystem.TEMP}):
            raise ValidationError(
                "contradictory filter: exclude_temp with id_systems={TEMP}"
            )

    @property
    def active_subset(self) -> str | None:
        # "complete" is an explicit spelling of "no subset restriction".
        return None if self.subset == "complete" else self.subset


def apply_filter(
    records: Sequence[VulnRecord],
    spec: FilterSpec,
    manifest: DatasetManifest | None = None,
) -> list[VulnRecord]:
    """Return exactly the records passing all present predicates, in order."""
    subset = spec.active_subset
    labels: dict[str, str] = {}
    if subset is not None:
        if manifest is None:
            raise ValidationError("subset filtering requires a dataset manifest")
        labels = {e.image_ref: e.subset for e in manifest.entries}

    out = []
    for record in records:
        if subset is not None:
            label = labels.get(record.image_ref)
            if label is None:
                raise UnknownImageError(
                    f"image not in manifest: {record.image_ref}"
                )
            if label != subset:
                continue
        if spec.id_systems is not None and record.id_system not in spec.id_systems:
            continue
        if spec.exclude_temp and record.id_system is IdSystem.TEMP:
            continue
        if spec.status_in is not None and record.status not in spec.status_in:
            continue
        out.append(record)
    return out


def coverage_fraction(
    records: Iterable[VulnRecord], id_systems: frozenset[IdSystem] | set[IdSystem]
) -> float:
    """Fraction of records whose id_system is in the allow-set.

    Empty input returns 1 by convention, keeping coverage reports total
    over tools that found nothing.
    """
    total = 0
    matching = 0
    for record in records:
        total += 1
        if record.id_system in id_systems:
            matching += 1
    if total == 0:
        return 1.0
    return matching / total
