"""vexmatch: normalize container vulnerability reports and measure
cross-scanner consistency with set-similarity analytics."""

from .filters import FilterSpec, apply_filter, coverage_fraction
from .model import (
    DatasetManifest,
    IdSystem,
    InputMode,
    MatchKey,
    RecordSet,
    SimilarityMatrix,
    Status,
    ToolCapabilities,
    ToolConfig,
    ValidationError,
    VulnRecord,
    classify_identifier,
    normalize_component,
)
from .parsers import ReportFormat, detect_format, parse_report
from .similarity import (
    GroupAgreement,
    consensus,
    database_similarity,
    group_agreement,
    group_combinations,
    jaccard,
    pairwise_matrix,
    pearson_between_matrices,
    tversky,
)

__version__ = "0.1.0"

__all__ = [
    "DatasetManifest",
    "FilterSpec",
    "GroupAgreement",
    "IdSystem",
    "InputMode",
    "MatchKey",
    "RecordSet",
    "ReportFormat",
    "SimilarityMatrix",
    "Status",
    "ToolCapabilities",
    "ToolConfig",
    "ValidationError",
    "VulnRecord",
    "apply_filter",
    "classify_identifier",
    "consensus",
    "coverage_fraction",
    "database_similarity",
    "detect_format",
    "group_agreement",
    "group_combinations",
    "jaccard",
    "normalize_component",
    "pairwise_matrix",
    "parse_report",
    "pearson_between_matrices",
    "tversky",
]
