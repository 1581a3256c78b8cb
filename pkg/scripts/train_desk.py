"""Train the shipped desk-scale model into models/desk and record wall time."""
import json
import sys
import time
from pathlib import Path

from flowplane.cli import main

ROOT = Path(__file__).resolve().parents[1]


def run() -> int:
    out = ROOT / "models" / "desk"
    t0 = time.perf_counter()
    code = main(["train", "--config", str(ROOT / "configs" / "desk.json"), "--out-dir", str(out), "--verbose"])
    hours = (time.perf_counter() - t0) / 3600
    # kept apart from train_summary.json so that file stays byte-deterministic
    (out / "timing.json").write_text(json.dumps({"wall_hours": hours}) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(run())
