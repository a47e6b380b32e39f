"""Shared fixtures for the acceptance pipeline.

The training-dependent criteria reuse artifacts across tests and across
sessions: every stage writes into .acceptance_cache/ through the CLI, keyed
by its exact flag list, and is skipped when its outputs already exist
(byte-identical reproducibility makes this sound).  Delete the directory to
force a full rebuild.
"""

import hashlib
import json
from pathlib import Path

import pytest

CACHE_ROOT = Path(__file__).resolve().parent.parent / ".acceptance_cache"


def flags_digest(argv):
    return hashlib.sha256(" ".join(argv).encode()).hexdigest()[:12]


def run_cli_stage(stage_dir, argv, expect):
    """Run a CLI command once per unique flag list; reuse cached outputs."""
    from gudrl.cli import main

    stamp = stage_dir / "stage.json"
    digest = flags_digest(argv)
    if stamp.exists() and json.loads(stamp.read_text())["digest"] == digest:
        if all((stage_dir / rel).exists() for rel in expect):
            return stage_dir
    stage_dir.mkdir(parents=True, exist_ok=True)
    code = main(argv)
    assert code == 0, f"stage failed ({code}): {' '.join(argv)}"
    for rel in expect:
        assert (stage_dir / rel).exists(), f"stage produced no {rel}"
    stamp.write_text(json.dumps({"digest": digest, "argv": argv}) + "\n")
    return stage_dir


@pytest.fixture(scope="session")
def cache_root():
    CACHE_ROOT.mkdir(exist_ok=True)
    return CACHE_ROOT
