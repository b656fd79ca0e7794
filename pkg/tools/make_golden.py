"""Regenerate the bundled golden vessel-removal fixture.

The expected output is produced by the brute-force oracle in tests/oracles.py,
not by the package, so the golden check compares two independent routes.
"""

import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))
sys.path.insert(0, str(ROOT / "src"))

from oracles import clean_oracle  # noqa: E402
from drseverity.dataio import write_mask, write_rgb  # noqa: E402
from drseverity.synthetic import synthetic_fundus  # noqa: E402

OUT = ROOT / "src" / "drseverity" / "data" / "golden"


def main():
    rng = np.random.default_rng(20240611)
    img, mask = synthetic_fundus(rng, (96, 96), n_vessels=5)
    cleaned = clean_oracle(img, mask)
    OUT.mkdir(parents=True, exist_ok=True)
    write_rgb(OUT / "input.png", img)
    write_mask(OUT / "mask.png", mask)
    write_rgb(OUT / "cleaned.png", cleaned)
    print(f"wrote {OUT}: {int(mask.sum())} masked pixels")


if __name__ == "__main__":
    main()
