"""Regenerate the shipped test data under tests/data/.

    python scripts/regen_test_data.py

Writes the quadrant fixture bundle and dataset, the golden explain heatmap,
and the Riemann calibration record. Only rerun when the pipeline intentionally
changes; the tests compare against these files byte for byte.
"""
import json
import sys
from pathlib import Path

from igcam import cli, fixtures

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "tests" / "data"
sys.path.insert(0, str(ROOT / "tests"))

from riemann import riemann_suite, suite_distance  # noqa: E402


def main():
    quad = DATA / "quadrant"
    fixtures.write_fixture(fixtures.quadrant_fixture(0), quad)
    rc = cli.main(["explain", "--model", str(quad / "model.json"), "--image", str(quad / "img_000.png"),
                   "--out", str(DATA / "golden_quadrant_igc.png"),
                   "--overlay", str(DATA / "golden_quadrant_igc_overlay.png")])
    if rc:
        sys.exit(rc)
    (DATA / "golden_quadrant_igc.sal").unlink()

    measured = suite_distance(riemann_suite(), 20, 200)
    tau = float(f"{measured * 1.1:.2g}")
    record = {"riemann_m20_m200_measured": measured, "tau": tau,
              "note": "tau = measured suite distance * 1.1, two significant digits"}
    (DATA / "calibration.json").write_text(json.dumps(record, indent=2) + "\n")
    print(record)


if __name__ == "__main__":
    main()
