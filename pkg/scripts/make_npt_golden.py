"""Regenerate tests/data/npt_golden.json with the scalar reference encoder."""
import json
import pathlib
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "tests"))
from oracles import encode_scalar  # noqa: E402

POINTS = [[0.0, 0.0], [17.9, 3.2], [63.5, 40.25], [127.0, 95.0], [64.0, 48.0]]
FRAME = (128, 96)


def main():
    desc = np.zeros((len(POINTS), 4))
    feats = encode_scalar(np.array(POINTS), desc, FRAME[0], FRAME[1], channels=8, seed=0)
    out = {"frame": FRAME, "channels": 8, "seed": 0, "descriptor_dim": 4,
           "points": POINTS, "features": feats.tolist()}
    path = pathlib.Path(__file__).resolve().parents[1] / "tests" / "data" / "npt_golden.json"
    path.write_text(json.dumps(out, indent=1) + "\n")
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
