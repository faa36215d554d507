import json
from pathlib import Path

import pytest

import corpus
from vexmatch.cli import main

IMG = corpus.IMG_ONE


@pytest.fixture(autouse=True)
def _no_cache_env(monkeypatch):
    monkeypatch.delenv("VEXMATCH_CACHE", raising=False)


def write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def corpus_records(tmp_path) -> Path:
    return corpus.write_corpus_records(tmp_path)


@pytest.fixture
def manifest_path(tmp_path) -> Path:
    return write(tmp_path / "manifest.txt", corpus.MANIFEST_TEXT)


class TestNormalize:
    def test_single_match_report(self, tmp_path, capsys):
        raw = write(
            tmp_path / "report.json",
            json.dumps(
                corpus.grype_doc(
                    [
                        corpus.grype_match(
                            "apt", "2.2.4", "CVE-2011-3374", severity="Negligible"
                        )
                    ]
                )
            ),
        )
        out = tmp_path / "records.jsonl"
        code = main(
            [
                "normalize",
                str(raw),
                "--image",
                IMG,
                "--tool-config",
                "grype",
                "--out",
                str(out),
            ]
        )
        assert code == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 1
        record = json.loads(lines[0])
        assert record["vuln_id"] == "CVE-2011-3374"
        assert record["severity"] == "Negligible"
        assert record["source_db"] == "debian:distro:debian:11"
        assert record["status"] == "AFFECTED"
        assert "1 records" in capsys.readouterr().err

    def test_autodetects_format(self, tmp_path):
        raw = write(
            tmp_path / "r.json",
            json.dumps(corpus.trivy_doc([corpus.trivy_vuln("apt", "2.2.4", "CVE-2020-1")])),
        )
        out = tmp_path / "out.jsonl"
        code = main(
            ["normalize", str(raw), "--image", IMG, "--tool-config", "trivy",
             "--out", str(out)]
        )
        assert code == 0
        assert json.loads(out.read_text())["tool_config_id"] == "trivy"

    def test_ambiguous_format_exit_1(self, tmp_path, capsys):
        raw = write(tmp_path / "r.json", '{"hello": 1}')
        code = main(["normalize", str(raw), "--image", IMG, "--tool-config", "x"])
        assert code == 1
        assert "r.json" in capsys.readouterr().err

    def test_parse_failure_names_file_and_offset(self, tmp_path, capsys):
        raw = write(tmp_path / "broken.json", '{"matches": [')
        code = main(
            ["normalize", str(raw), "--format", "grype", "--image", IMG,
             "--tool-config", "grype"]
        )
        assert code == 1
        err = capsys.readouterr().err
        assert "broken.json" in err and "byte" in err

    def test_unpinned_image_exit_2(self, tmp_path):
        raw = write(tmp_path / "r.json", json.dumps(corpus.grype_doc([])))
        code = main(
            ["normalize", str(raw), "--format", "grype",
             "--image", "neo4j:latest", "--tool-config", "grype"]
        )
        assert code == 2


class TestMatrix:
    def test_two_disjoint_record_files(self, tmp_path, capsys):
        from vexmatch.model import Status, VulnRecord, write_records

        def rec(tool, vuln):
            return VulnRecord.build(
                image_ref=IMG, component_name="apt", component_version="1",
                vuln_id=vuln, status=Status.AFFECTED, tool_config_id=tool,
            )

        a = tmp_path / "a.jsonl"
        b = tmp_path / "b.jsonl"
        with a.open("w") as fp:
            write_records([rec("a", "CVE-2020-1")], fp)
        with b.open("w") as fp:
            write_records([rec("b", "CVE-2020-2")], fp)
        code = main(["matrix", str(a), str(b)])
        assert code == 0
        assert capsys.readouterr().out == (
            ",a,b\na,1.0000,0.0000\nb,0.0000,1.0000\n"
        )

    def test_corpus_matrix_golden(self, corpus_records, capsys):
        code = main(["matrix", *map(str, sorted(corpus_records.iterdir()))])
        assert code == 0
        assert capsys.readouterr().out == (
            ",grype,snyk,trivy\n"
            "grype,1.0000,0.2222,0.3750\n"
            "snyk,0.2222,1.0000,0.4286\n"
            "trivy,0.3750,0.4286,1.0000\n"
        )

    def test_id_system_restriction_golden(self, corpus_records, capsys):
        # Hand-computed on the CVE-only corpus subsets:
        #   grype: {0001,0002,0003,1111}, snyk: {0001,0005,1111,2222},
        #   trivy: {0001,0002,0004,1111,2222}
        #   J(g,s)=2/6, J(g,t)=3/6, J(s,t)=3/6
        code = main(
            ["matrix", *map(str, sorted(corpus_records.iterdir())), "--id-system", "cve"]
        )
        assert code == 0
        assert capsys.readouterr().out == (
            ",grype,snyk,trivy\n"
            "grype,1.0000,0.3333,0.5000\n"
            "snyk,0.3333,1.0000,0.5000\n"
            "trivy,0.5000,0.5000,1.0000\n"
        )

    def test_subset_with_unlabeled_image_exit_1(self, corpus_records, tmp_path):
        partial = write(
            tmp_path / "partial.txt", f"{corpus.IMG_ONE} random\n"
        )
        code = main(
            ["matrix", *map(str, sorted(corpus_records.iterdir())),
             "--subset", "random", "--manifest", str(partial)]
        )
        assert code == 1

    def test_single_group_exit_2(self, corpus_records):
        code = main(["matrix", str(corpus_records / "grype")])
        assert code == 2

    def test_databases_matrix(self, tmp_path, capsys):
        tools_file = write(tmp_path / "tools.toml", corpus.tools_toml())
        code = main(["matrix", "--databases-from", str(tools_file)])
        assert code == 0
        out = capsys.readouterr().out
        first = out.splitlines()[0]
        assert first == ",depscan,grype,osv,scout,snyk,trivy,vexy"
        # trivy and vexy reference disjoint databases
        trivy_row = next(l for l in out.splitlines() if l.startswith("trivy,"))
        assert trivy_row.endswith("0.0000")

    def test_md_output(self, corpus_records, capsys):
        code = main(
            ["--out-format", "md", "matrix", *map(str, sorted(corpus_records.iterdir()))]
        )
        assert code == 0
        assert capsys.readouterr().out.startswith("| ")

    def test_label_order_file(self, corpus_records, tmp_path, capsys):
        order = write(tmp_path / "order.txt", "trivy\nsnyk\ngrype\n")
        code = main(
            ["matrix", *map(str, sorted(corpus_records.iterdir())),
             "--label-order", str(order)]
        )
        assert code == 0
        assert capsys.readouterr().out.splitlines()[0] == ",trivy,snyk,grype"


class TestAgreement:
    def test_group_size_over_three_tools(self, corpus_records, capsys):
        code = main(
            ["agreement", *map(str, sorted(corpus_records.iterdir())), "--group-size", "2"]
        )
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "members,tversky,intersection_count,union_count"
        assert len(lines) == 4  # C(3,2) groups

    def test_members_row_with_counts(self, corpus_records, capsys):
        code = main(
            ["agreement", *map(str, sorted(corpus_records.iterdir())),
             "--members", "grype,snyk,trivy"]
        )
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[1] == "grype+snyk+trivy,0.2000,2,10"

    def test_k_out_of_range_exit_2(self, corpus_records):
        code = main(
            ["agreement", *map(str, sorted(corpus_records.iterdir())), "--group-size", "1"]
        )
        assert code == 2


class TestCorrelate:
    def test_identical_matrices(self, corpus_records, tmp_path, capsys):
        main(["matrix", *map(str, sorted(corpus_records.iterdir())),
              "--out", str(tmp_path / "m.csv")])
        capsys.readouterr()
        code = main(["correlate", str(tmp_path / "m.csv"), str(tmp_path / "m.csv")])
        assert code == 0
        assert capsys.readouterr().out.strip() == "1.0000"

    def test_reference_fixtures_strict_upper(self, fixtures_dir, capsys):
        code = main(
            ["correlate", str(fixtures_dir / "report_similarity.csv"),
             str(fixtures_dir / "database_similarity.csv")]
        )
        assert code == 0
        assert capsys.readouterr().out.strip() == "0.3592"

    def test_reference_fixtures_full_cells(self, fixtures_dir, capsys):
        code = main(
            ["correlate", str(fixtures_dir / "report_similarity.csv"),
             str(fixtures_dir / "database_similarity.csv"), "--cells", "full"]
        )
        assert code == 0
        assert capsys.readouterr().out.strip() == "0.8852"

    def test_two_label_matrix_exit_2(self, tmp_path):
        m = write(tmp_path / "m.csv", ",a,b\na,1.0,0.5\nb,0.5,1.0\n")
        assert main(["correlate", str(m), str(m)]) == 2

    def test_zero_variance_exit_3(self, tmp_path):
        flat = write(
            tmp_path / "flat.csv",
            ",a,b,c\na,1.0,0.5,0.5\nb,0.5,1.0,0.5\nc,0.5,0.5,1.0\n",
        )
        varied = write(
            tmp_path / "varied.csv",
            ",a,b,c\na,1.0,0.2,0.4\nb,0.2,1.0,0.6\nc,0.4,0.6,1.0\n",
        )
        assert main(["correlate", str(flat), str(varied)]) == 3

    def test_label_mismatch_exit_2(self, tmp_path):
        m1 = write(tmp_path / "m1.csv", ",a,b,c\na,1,0.2,0.4\nb,0.2,1,0.6\nc,0.4,0.6,1\n")
        m2 = write(tmp_path / "m2.csv", ",a,b,d\na,1,0.2,0.4\nb,0.2,1,0.6\nd,0.4,0.6,1\n")
        assert main(["correlate", str(m1), str(m2)]) == 2


class TestConsensus:
    def test_duplicated_set_is_identity(self, tmp_path, capsys):
        records = corpus.write_corpus_records(tmp_path)
        # Two labels over identical key sets: copy grype records as "grype2".
        clone = tmp_path / "records" / "grype2"
        clone.mkdir()
        for fp in (records / "grype").glob("*.jsonl"):
            text = fp.read_text().replace('"tool_config_id":"grype"',
                                          '"tool_config_id":"grype2"')
            (clone / fp.name).write_text(text)
        out = tmp_path / "consensus.jsonl"
        code = main(
            ["consensus", str(records / "grype"), str(clone),
             "--members", "grype,grype2", "--out", str(out)]
        )
        assert code == 0
        assert len(out.read_text().splitlines()) == 6
        assert "tversky=1.0000" in capsys.readouterr().err

    def test_disjoint_sets_empty_output(self, tmp_path, capsys):
        from vexmatch.model import Status, VulnRecord, write_records

        root = tmp_path / "recs"
        root.mkdir()
        for i, tool in enumerate(["a", "b", "c", "d"]):
            with (root / f"{tool}.jsonl").open("w") as fp:
                write_records(
                    [
                        VulnRecord.build(
                            image_ref=IMG, component_name="apt", component_version="1",
                            vuln_id=f"CVE-2020-{i}", status=Status.AFFECTED,
                            tool_config_id=tool,
                        )
                    ],
                    fp,
                )
        out = tmp_path / "c.jsonl"
        code = main(
            ["consensus", str(root), "--members", "a,b,c,d", "--out", str(out)]
        )
        assert code == 0
        assert out.read_text() == ""
        assert "tversky=0.0000" in capsys.readouterr().err

    def test_corpus_consensus_matches_oracle(self, corpus_records, capsys):
        code = main(
            ["consensus", *map(str, sorted(corpus_records.iterdir())),
             "--members", "grype,snyk,trivy"]
        )
        assert code == 0
        captured = capsys.readouterr()
        keys = [json.loads(line) for line in captured.out.splitlines()]
        assert [k["vuln_id"] for k in keys] == ["CVE-2020-0001", "CVE-2021-1111"]
        assert "intersection=2 union=10" in captured.err


class TestCoverage:
    def test_corpus_coverage_fractions(self, corpus_records, capsys):
        code = main(["coverage", *map(str, sorted(corpus_records.iterdir()))])
        assert code == 0
        assert capsys.readouterr().out == (
            "label,coverage\ngrype,0.6667\nsnyk,0.8000\ntrivy,1.0000\n"
        )

    def test_markdown_percentages(self, corpus_records, capsys):
        code = main(
            ["--out-format", "md", "coverage", *map(str, sorted(corpus_records.iterdir()))]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "66.7%" in out and "100.0%" in out


class TestScan:
    def test_all_cached_summary(self, tmp_path, stub_tool_factory, manifest_path, capsys):
        executables = {
            name: stub_tool_factory(name) for name in corpus.TOOL_CAPABILITIES
        }
        config = write(
            tmp_path / "tools.toml",
            corpus.tools_toml(executables,
                              configurations=[{"tool": "trivy", "input": "image"}]),
        )
        cache = tmp_path / "cache"
        assert main(["--cache-dir", str(cache), "--quiet",
                     "scan", str(config), str(manifest_path)]) == 0
        assert "3 done" in capsys.readouterr().out
        assert main(["--cache-dir", str(cache), "--quiet",
                     "scan", str(config), str(manifest_path)]) == 0
        assert "3 skipped (cached)" in capsys.readouterr().out

    def test_incompatible_cell_requested_exit_2(self, tmp_path, manifest_path, capsys):
        config = write(
            tmp_path / "tools.toml",
            corpus.tools_toml(
                configurations=[
                    {"tool": "depscan", "input": "external-sbom", "sbom_source": "scout"}
                ]
            ),
        )
        code = main(["--cache-dir", str(tmp_path / "cache"), "scan",
                     str(config), str(manifest_path)])
        assert code == 2
        err = capsys.readouterr().err
        assert "spdx" in err

    def test_empty_manifest_exit_2(self, tmp_path):
        config = write(tmp_path / "tools.toml", corpus.tools_toml())
        manifest = write(tmp_path / "empty.txt", "\n")
        code = main(["--cache-dir", str(tmp_path / "cache"), "scan",
                     str(config), str(manifest)])
        assert code == 2

    def test_failure_exit_1_and_keep_going(self, tmp_path, stub_tool_factory, manifest_path):
        executables = {
            name: stub_tool_factory(name) for name in corpus.TOOL_CAPABILITIES
        }
        executables["grype"] = stub_tool_factory("grype-broken", exit_code=2)
        config = write(
            tmp_path / "tools.toml",
            corpus.tools_toml(
                executables,
                configurations=[
                    {"tool": "trivy", "input": "image"},
                    {"tool": "grype", "input": "image"},
                ],
            ),
        )
        assert main(["--cache-dir", str(tmp_path / "cache-a"), "--quiet", "scan",
                     str(config), str(manifest_path)]) == 1
        # keep-going tolerates failures as long as at least one job ran to DONE
        assert main(["--cache-dir", str(tmp_path / "cache-b"), "--quiet", "scan",
                     str(config), str(manifest_path), "--keep-going"]) == 0

    def test_env_var_overrides_cache_flag(self, tmp_path, stub_tool_factory,
                                          manifest_path, monkeypatch):
        executables = {
            name: stub_tool_factory(name) for name in corpus.TOOL_CAPABILITIES
        }
        config = write(
            tmp_path / "tools.toml",
            corpus.tools_toml(executables,
                              configurations=[{"tool": "snyk", "input": "image"}]),
        )
        env_cache = tmp_path / "env-cache"
        monkeypatch.setenv("VEXMATCH_CACHE", str(env_cache))
        assert main(["--cache-dir", str(tmp_path / "flag-cache"), "--quiet",
                     "scan", str(config), str(manifest_path)]) == 0
        assert env_cache.is_dir()
        assert not (tmp_path / "flag-cache").exists()


class TestReproducibility:
    def test_matrix_bytes_stable_across_runs(self, corpus_records, tmp_path):
        args = ["matrix", *map(str, sorted(corpus_records.iterdir()))]
        out_a = tmp_path / "a.csv"
        out_b = tmp_path / "b.csv"
        assert main(args + ["--out", str(out_a)]) == 0
        assert main(args + ["--out", str(out_b)]) == 0
        assert out_a.read_bytes() == out_b.read_bytes()

    def test_usage_error_exit_2(self):
        assert main(["agreement"]) == 2

    def test_unknown_subcommand_exit_2(self):
        assert main(["no-such-command"]) == 2
