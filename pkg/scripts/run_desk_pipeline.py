#!/usr/bin/env python3
"""Produce the desk-scale model fixtures end to end via the CLI.

Renders a train and a held-out dataset, pretrains the RGB backbone,
then runs stage 1 (joint branch, RGB frozen) and stage 2 (all weights,
low lr).  Outputs land under --out; the test suite points there through
the JOINTDIFF_FIXTURE_DIR environment variable (default .fixtures/desk
at the repository root).

Every step goes through ``jointdiff.cli.main`` so the artifacts match
what the command line produces, manifests included.  Seeds are fixed;
rerunning reproduces the same files byte for byte (manifests aside).
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from jointdiff.cli import main as cli  # noqa: E402

MODEL_FLAGS = ["--base-width", "16", "--channel-mults", "1,2,4",
               "--groups", "8", "--heads", "4"]


def run(label: str, argv: list[str], done_marker: Path | None = None):
    if done_marker is not None and done_marker.exists():
        print(f"[pipeline] {label}: reusing {done_marker}", flush=True)
        return
    t0 = time.time()
    print(f"[pipeline] {label}: jointdiff {' '.join(argv)}", flush=True)
    rc = cli(argv)
    if rc != 0:
        raise SystemExit(f"{label} failed with exit code {rc}")
    print(f"[pipeline] {label} done in {time.time() - t0:.0f}s", flush=True)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent
                                         / ".fixtures" / "desk"))
    ap.add_argument("--quick", action="store_true",
                    help="tiny step counts, for a fast pipeline check")
    ap.add_argument("--force", action="store_true",
                    help="rebuild everything, even stages that look complete")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def marker(p: Path) -> Path | None:
        return None if args.force else p

    n_train, n_held = (256, 64)
    steps = {"base": 3000, "1": 3000, "2": 1000}
    if args.quick:
        n_train, n_held = (24, 8)
        steps = {"base": 4, "1": 4, "2": 2}

    run("synth train data", ["synth-data", "--out", str(out / "train.bin"),
                             "-n", str(n_train), "--size", "32", "--seed", "0"],
        marker(out / "train.bin"))
    run("synth held-out data", ["synth-data", "--out", str(out / "heldout.bin"),
                                "-n", str(n_held), "--size", "32", "--seed", "1"],
        marker(out / "heldout.bin"))
    run("stage base", ["train", "--stage", "base",
                       "--dataset", str(out / "train.bin"),
                       "--out", str(out / "base"),
                       "--steps", str(steps["base"]), "--seed", "3",
                       *MODEL_FLAGS],
        marker(out / "base" / "model.ckpt"))
    run("stage 1", ["train", "--stage", "1",
                    "--dataset", str(out / "train.bin"),
                    "--out", str(out / "s1"),
                    "--init-from", str(out / "base" / "model.ckpt"),
                    "--steps", str(steps["1"]), "--seed", "4"],
        marker(out / "s1" / "model.ckpt"))
    run("stage 2", ["train", "--stage", "2",
                    "--dataset", str(out / "train.bin"),
                    "--out", str(out / "s2"),
                    "--init-from", str(out / "s1" / "model.ckpt"),
                    "--steps", str(steps["2"]), "--seed", "5"],
        marker(out / "s2" / "model.ckpt"))
    print("[pipeline] all stages complete", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
