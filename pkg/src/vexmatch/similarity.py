"""Set-similarity and correlation mathematics over record sets.

Pairwise similarity is intersection-over-union; group agreement generalizes
it to n sets (n-ary intersection over n-ary union).  Scores are plain float
ratios of integer cardinalities.  Two fully empty sides are defined as
similarity 1 (zero findings on both sides is agreement, not divergence);
matrix cells produced by that convention are flagged so rendered output
keeps them distinguishable.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .model import MatchKey, RecordSet, SimilarityMatrix, ToolConfig, ValidationError


class CorrelationUndefinedError(ArithmeticError):
    """Pearson correlation is undefined (zero variance in an input vector)."""


def _iou(a: frozenset, b: frozenset) -> tuple[float, bool]:
    union = len(a | b)
    if union == 0:
        return 1.0, True
    return len(a & b) / union, False


def jaccard(a: RecordSet, b: RecordSet) -> float:
    """Pairwise intersection-over-union of two record sets."""
    return _iou(a.keys, b.keys)[0]


def tversky(sets: Sequence[RecordSet]) -> float:
    """Joint agreement of n record sets: |intersection| / |union|."""
    if len(sets) < 2:
        raise ValidationError("group agreement requires at least 2 sets")
    union = frozenset().union(*(s.keys for s in sets))
    if not union:
        return 1.0
    intersection = sets[0].keys.intersection(*(s.keys for s in sets[1:]))
    return len(intersection) / len(union)


def pairwise_matrix(sets: Sequence[RecordSet]) -> SimilarityMatrix:
    """Symmetric unit-diagonal matrix of pairwise scores, in given order."""
    labels = tuple(s.label for s in sets)
    if len(set(labels)) != len(labels):
        raise ValidationError("duplicate record-set labels in matrix input")
    n = len(sets)
    values = [[1.0] * n for _ in range(n)]
    flagged = set()
    for i in range(n):
        if not sets[i].keys:
            flagged.add((i, i))
        for j in range(i + 1, n):
            score, degenerate = _iou(sets[i].keys, sets[j].keys)
            values[i][j] = values[j][i] = score
            if degenerate:
                flagged.add((i, j))
                flagged.add((j, i))
    return SimilarityMatrix(
        labels=labels,
        values=tuple(tuple(row) for row in values),
        flagged=frozenset(flagged),
    )


def group_combinations(labels: Sequence[str], k: int) -> list[tuple[str, ...]]:
    """All C(n, k) label groups in lexicographic order."""
    if not 2 <= k <= len(labels):
        raise ValidationError(
            f"group size {k} out of range [2, {len(labels)}]"
        )
    return list(combinations(sorted(labels), k))


@dataclass(frozen=True)
class GroupAgreement:
    """Joint-agreement score for one group of tool configurations."""

    member_labels: tuple[str, ...]
    tversky: float
    intersection_count: int
    union_count: int


def group_agreement(
    sets_by_label: Mapping[str, RecordSet],
    groups: Iterable[Sequence[str]],
) -> list[GroupAgreement]:
    out = []
    for group in groups:
        members = tuple(group)
        try:
            sets = [sets_by_label[label] for label in members]
        except KeyError as exc:
            raise ValidationError(f"no record set for label {exc.args[0]!r}") from exc
        if len(sets) < 2:
            raise ValidationError("group agreement requires at least 2 sets")
        union = frozenset().union(*(s.keys for s in sets))
        intersection = sets[0].keys.intersection(*(s.keys for s in sets[1:]))
        score = len(intersection) / len(union) if union else 1.0
        out.append(
            GroupAgreement(
                member_labels=members,
                tversky=score,
                intersection_count=len(intersection),
                union_count=len(union),
            )
        )
    return out


def consensus(
    sets_by_label: Mapping[str, RecordSet], members: Sequence[str]
) -> tuple[GroupAgreement, RecordSet]:
    """Agreement plus the intersection set shared by every member."""
    if len(members) < 2:
        raise ValidationError("consensus requires at least 2 members")
    [agreement] = group_agreement(sets_by_label, [tuple(members)])
    keys: frozenset[MatchKey] = sets_by_label[members[0]].keys.intersection(
        *(sets_by_label[m].keys for m in members[1:])
    )
    label = f"consensus({','.join(sorted(members))})"
    return agreement, RecordSet(label=label, keys=keys)


def database_similarity(configs: Sequence[ToolConfig]) -> SimilarityMatrix:
    """Pairwise intersection-over-union of the tools' database name sets."""
    labels = tuple(c.tool_name for c in configs)
    if len(set(labels)) != len(labels):
        raise ValidationError("duplicate tool names in database-similarity input")
    n = len(configs)
    values = [[1.0] * n for _ in range(n)]
    flagged = set()
    for i in range(n):
        if not configs[i].databases:
            flagged.add((i, i))
        for j in range(i + 1, n):
            score, degenerate = _iou(configs[i].databases, configs[j].databases)
            values[i][j] = values[j][i] = score
            if degenerate:
                flagged.add((i, j))
                flagged.add((j, i))
    return SimilarityMatrix(
        labels=labels,
        values=tuple(tuple(row) for row in values),
        flagged=frozenset(flagged),
    )


def _matrix_vectors(
    m1: SimilarityMatrix, m2: SimilarityMatrix, cells: str
) -> tuple[list[float], list[float]]:
    if m1.labels != m2.labels:
        raise ValidationError(
            "matrices must carry identical label lists in identical order"
        )
    n = m1.size
    if n < 3:
        raise ValidationError("correlation requires at least 3 labels")
    if cells == "upper":
        idx = [(i, j) for i in range(n) for j in range(i + 1, n)]
    elif cells == "full":
        idx = [(i, j) for i in range(n) for j in range(n)]
    else:
        raise ValidationError(f"unknown cell selection {cells!r}")
    return (
        [m1.values[i][j] for i, j in idx],
        [m2.values[i][j] for i, j in idx],
    )


def pearson_between_matrices(
    m1: SimilarityMatrix, m2: SimilarityMatrix, *, cells: str = "upper"
) -> float:
    """Pearson correlation between two equally-labeled matrices.

    ``cells="upper"`` (default) correlates the strict upper triangles: the
    constant unit diagonal and the duplicated symmetric entries would
    otherwise inflate the coefficient.  ``cells="full"`` flattens whole
    matrices instead, reproducing the common spreadsheet/dataframe recipe.
    """
    xs, ys = _matrix_vectors(m1, m2, cells)
    n = len(xs)
    mean_x = sum(xs) / n
    mean_y = sum(ys) / n
    var_x = sum((x - mean_x) ** 2 for x in xs)
    var_y = sum((y - mean_y) ** 2 for y in ys)
    if var_x == 0.0 or var_y == 0.0:
        raise CorrelationUndefinedError(
            "correlation undefined: zero variance in input vector"
        )
    cov = sum((x - mean_x) * (y - mean_y) for x, y in zip(xs, ys))
    return cov / math.sqrt(var_x * var_y)


# Matrix serialization.  CSV and markdown are display formats and round to
# 4 decimal places; JSON keeps full precision for machine interchange.
# A trailing "*" marks cells produced by the empty-vs-empty convention.

def _fmt_cell(matrix: SimilarityMatrix, i: int, j: int) -> str:
    text = format(matrix.values[i][j], ".4f")
    if (i, j) in matrix.flagged:
        text += "*"
    return text


def matrix_to_csv(matrix: SimilarityMatrix) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["", *matrix.labels])
    for i, label in enumerate(matrix.labels):
        writer.writerow([label, *(_fmt_cell(matrix, i, j) for j in range(matrix.size))])
    return buf.getvalue()


def matrix_from_csv(text: str) -> SimilarityMatrix:
    rows = [row for row in csv.reader(io.StringIO(text)) if row]
    if len(rows) < 2:
        raise ValidationError("matrix CSV must have a header row and data rows")
    labels = tuple(cell.strip() for cell in rows[0][1:])
    values = []
    flagged = set()
    for i, row in enumerate(rows[1:]):
        if len(row) != len(labels) + 1:
            raise ValidationError(f"matrix CSV row {i + 2} has wrong cell count")
        if row[0].strip() != labels[i]:
            raise ValidationError(
                f"matrix CSV row label {row[0]!r} does not match column {labels[i]!r}"
            )
        parsed = []
        for j, cell in enumerate(row[1:]):
            cell = cell.strip()
            if cell.endswith("*"):
                flagged.add((i, j))
                cell = cell[:-1]
            try:
                parsed.append(float(cell))
            except ValueError as exc:
                raise ValidationError(f"bad matrix cell {cell!r}") from exc
        values.append(tuple(parsed))
    return SimilarityMatrix(
        labels=labels, values=tuple(values), flagged=frozenset(flagged)
    )


def matrix_to_json(matrix: SimilarityMatrix) -> str:
    payload = {
        "labels": list(matrix.labels),
        "values": [list(row) for row in matrix.values],
        "flagged": sorted(list(pair) for pair in matrix.flagged),
    }
    return json.dumps(payload, indent=2) + "\n"


def matrix_from_json(text: str) -> SimilarityMatrix:
    obj = json.loads(text)
    return SimilarityMatrix(
        labels=tuple(obj["labels"]),
        values=tuple(tuple(float(v) for v in row) for row in obj["values"]),
        flagged=frozenset((int(i), int(j)) for i, j in obj.get("flagged", [])),
    )


def matrix_to_markdown(matrix: SimilarityMatrix) -> str:
    cells = [
        [_fmt_cell(matrix, i, j) for j in range(matrix.size)]
        for i in range(matrix.size)
    ]
    widths = [len(label) for label in matrix.labels]
    for j in range(matrix.size):
        widths[j] = max(widths[j], *(len(row[j]) for row in cells))
    stub = max(len(label) for label in matrix.labels)
    lines = [
        "| "
        + " | ".join(
            [" " * stub, *(label.ljust(widths[j]) for j, label in enumerate(matrix.labels))]
        )
        + " |",
        "| " + " | ".join(["-" * stub, *("-" * w for w in widths)]) + " |",
    ]
    for i, label in enumerate(matrix.labels):
        lines.append(
            "| "
            + " | ".join(
                [label.ljust(stub), *(cells[i][j].ljust(widths[j]) for j in range(matrix.size))]
            )
            + " |"
        )
    return "\n".join(lines) + "\n"


def render_matrix(matrix: SimilarityMatrix, out_format: str) -> str:
    if out_format == "csv":
        return matrix_to_csv(matrix)
    if out_format == "json":
        return matrix_to_json(matrix)
    if out_format == "md":
        return matrix_to_markdown(matrix)
    raise ValidationError(f"unknown output format {out_format!r}")


def load_matrix(path: str | Path) -> SimilarityMatrix:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        return matrix_from_json(text)
    return matrix_from_csv(text)
