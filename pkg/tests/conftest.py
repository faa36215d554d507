from __future__ import annotations

import json
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def pinned_image() -> str:
    return "docker.io/library/neo4j@sha256:" + "ab" * 32


def make_stub_tool(
    bin_dir: Path,
    name: str,
    spawn_log: Path,
    payload: str = '{"stub": true}\n',
    exit_code: int = 0,
    sleep: float = 0.0,
    write_output: bool = True,
) -> Path:
    """Create a tiny fake scanner executable.

    Every spawn appends one byte to ``spawn_log``; the last argument is
    treated as the output path.
    """
    bin_dir.mkdir(parents=True, exist_ok=True)
    script = bin_dir / name
    lines = [
        "#!/bin/sh",
        f'printf s >> "{spawn_log}"',
        'if [ "$1" = "--version" ]; then',
        f'  echo "{name} 9.9.9"',
        "  exit 0",
        "fi",
    ]
    if sleep:
        lines.append(f"sleep {sleep}")
    if exit_code:
        lines.append('echo "stub failure" >&2')
        lines.append(f"exit {exit_code}")
    elif write_output:
        lines.append('for out; do :; done')  # last positional arg
        lines.append(f"printf '%s' '{payload}' > \"$out\"")
    lines.append("exit 0")
    script.write_text("\n".join(lines) + "\n")
    script.chmod(0o755)
    return script


@pytest.fixture
def stub_tool_factory(tmp_path):
    log = tmp_path / "spawns.log"
    log.touch()
    bin_dir = tmp_path / "bin"

    def factory(name: str, **kwargs) -> Path:
        return make_stub_tool(bin_dir, name, log, **kwargs)

    factory.spawn_log = log
    return factory


def spawn_count(log: Path) -> int:
    return len(log.read_bytes()) if log.exists() else 0


def write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1), encoding="utf-8")
    return path
