import contextlib
import io
from dataclasses import dataclass
from pathlib import Path

import pytest

from revfp.cli import main


@dataclass
class CliResult:
    code: int
    out: str
    err: str


def run_cli(*args) -> CliResult:
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        try:
            code = main([str(a) for a in args])
        except SystemExit as exc:
            code = exc.code
    return CliResult(code, out.getvalue(), err.getvalue())


@dataclass
class Pipeline:
    root: Path
    rooms: Path
    manifest: Path
    features: Path


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory) -> Pipeline:
    """Five small simulated rooms, 4 samples each, featurized for Baseline and PlusPhase."""
    root = tmp_path_factory.mktemp("pipeline")
    r = run_cli("--workers", 1, "simulate-rooms", "--count", 5, "--volume-min", 30, "--volume-max", 120,
                "--alpha-min", 0.4, "--alpha-max", 0.6, "--receivers", 2, "--seed", 3,
                "--out", root / "rooms")
    assert r.code == 0, r.err
    r = run_cli("--workers", 1, "generate", "--rooms", root / "rooms" / "rooms.jsonl",
                "--synthetic-clips", 3, "--synthetic-seconds", 5, "--per-room", 4, "--seed", 3,
                "--allow-simulated-test", "--out", root / "data")
    assert r.code == 0, r.err
    for recipe in ("Baseline", "PlusPhase"):
        r = run_cli("--workers", 1, "featurize", "--manifest", root / "data" / "manifest.jsonl",
                    "--recipe", recipe)
        assert r.code == 0, r.err
    return Pipeline(root, root / "rooms" / "rooms.jsonl", root / "data" / "manifest.jsonl",
                    root / "data" / "features")
