"""Shared fixtures: locations of the desk-scale trained models.

The acceptance tests exercise trained models.  Training them takes
about 90 minutes, so the suite uses prebuilt artifacts from
scripts/run_desk_pipeline.py, looked up under JOINTDIFF_FIXTURE_DIR
(default: .fixtures/desk at the repository root).  When the artifacts
are missing the fixture builds them once, which is slow but leaves the
suite self-sufficient on a fresh checkout.
"""
import os
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path

import pytest

REPO_ROOT = Path(__file__).resolve().parent.parent
FIXTURE_DIR = Path(os.environ.get("JOINTDIFF_FIXTURE_DIR",
                                  REPO_ROOT / ".fixtures" / "desk"))


@dataclass(frozen=True)
class DeskArtifacts:
    root: Path
    train_bin: Path
    heldout_bin: Path
    base_ckpt: Path
    s1_ckpt: Path
    s2_ckpt: Path
    s1_history: Path


def _artifacts(root: Path) -> DeskArtifacts:
    return DeskArtifacts(
        root=root,
        train_bin=root / "train.bin",
        heldout_bin=root / "heldout.bin",
        base_ckpt=root / "base" / "model.ckpt",
        s1_ckpt=root / "s1" / "model.ckpt",
        s2_ckpt=root / "s2" / "model.ckpt",
        s1_history=root / "s1" / "history.json",
    )


@pytest.fixture(scope="session")
def desk() -> DeskArtifacts:
    art = _artifacts(FIXTURE_DIR)
    required = [art.train_bin, art.heldout_bin, art.base_ckpt, art.s1_ckpt,
                art.s2_ckpt, art.s1_history]
    missing = [p for p in required if not p.exists()]
    if missing:
        print(f"\n[conftest] desk fixtures missing under {FIXTURE_DIR}; "
              f"training now (this takes ~90 minutes)", file=sys.stderr)
        subprocess.run([sys.executable,
                        str(REPO_ROOT / "scripts" / "run_desk_pipeline.py"),
                        "--out", str(FIXTURE_DIR)], check=True)
        missing = [p for p in required if not p.exists()]
        assert not missing, f"pipeline did not produce {missing}"
    return art
