#!/usr/bin/env python3
"""End-to-end demo: normalize two synthetic scanner reports, build the
pairwise similarity matrix, extract the consensus, and correlate the two
bundled reference matrices.

Usage:
  python scripts/demo_pipeline.py [--workdir demo-output]
"""

import argparse
import json
import sys
from pathlib import Path

from vexmatch.cli import main as vexmatch

REPO = Path(__file__).resolve().parent.parent
FIXTURES = REPO / "tests" / "fixtures"

IMAGE = "registry.example/demo-app@sha256:" + "a" * 64

GRYPE_REPORT = {
    "matches": [
        {
            "vulnerability": {
                "id": vuln_id,
                "namespace": "debian:distro:debian:11",
                "severity": severity,
                "fix": {"versions": [], "state": state},
            },
            "artifact": {"name": name, "version": version},
        }
        for name, version, vuln_id, state, severity in [
            ("apt", "2.2.4", "CVE-2011-3374", "not-fixed", "Negligible"),
            ("libssl", "1.1.1", "CVE-2023-0464", "fixed", "High"),
            ("zlib", "1.2.11", "CVE-2022-37434", "not-fixed", "Critical"),
        ]
    ],
    "descriptor": {"name": "grype", "timestamp": "2024-05-31T00:00:00Z"},
}

TRIVY_REPORT = {
    "SchemaVersion": 2,
    "CreatedAt": "2024-05-31T00:00:00Z",
    "Results": [
        {
            "Target": "demo-app (debian 11)",
            "Vulnerabilities": [
                {
                    "VulnerabilityID": vuln_id,
                    "PkgName": name,
                    "InstalledVersion": version,
                    "Status": status,
                    "Severity": severity,
                    "DataSource": {"ID": "debian"},
                }
                for name, version, vuln_id, status, severity in [
                    ("apt", "2.2.4", "CVE-2011-3374", "affected", "LOW"),
                    ("libssl", "1.1.1", "CVE-2023-0464", "fixed", "HIGH"),
                    ("curl", "7.74.0", "CVE-2023-27533", "affected", "MEDIUM"),
                ]
            ],
        }
    ],
}


def run(argv: list[str]) -> None:
    print(f"$ vexmatch {' '.join(argv)}", flush=True)
    code = vexmatch(argv)
    if code != 0:
        sys.exit(f"demo step failed with exit code {code}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="demo-output")
    args = parser.parse_args()

    work = Path(args.workdir)
    (work / "raw").mkdir(parents=True, exist_ok=True)
    (work / "raw" / "grype.json").write_text(json.dumps(GRYPE_REPORT, indent=1))
    (work / "raw" / "trivy.json").write_text(json.dumps(TRIVY_REPORT, indent=1))

    for tool in ("grype", "trivy"):
        records = work / "records" / tool
        records.mkdir(parents=True, exist_ok=True)
        run(
            ["normalize", str(work / "raw" / f"{tool}.json"),
             "--image", IMAGE, "--tool-config", tool,
             "--out", str(records / "demo-app.jsonl")]
        )

    record_dirs = [str(work / "records" / t) for t in ("grype", "trivy")]
    print("\npairwise similarity (both tools found apt + libssl, J = 2/4):")
    run(["matrix", *record_dirs])
    print("\nconsensus:")
    run(["consensus", *record_dirs, "--members", "grype,trivy",
         "--out", str(work / "consensus.jsonl")])
    print(f"  -> {work / 'consensus.jsonl'}")
    print("\nidentifier coverage:")
    run(["coverage", *record_dirs])

    print("\ncorrelating the bundled reference matrices:")
    report = str(FIXTURES / "report_similarity.csv")
    database = str(FIXTURES / "database_similarity.csv")
    print("strict upper triangle: ", end="")
    run(["correlate", report, database])
    print("full flattened matrix: ", end="")
    run(["correlate", report, database, "--cells", "full"])


if __name__ == "__main__":
    main()
