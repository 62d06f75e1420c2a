"""The whole workflow through the command-line surface.

Everything the other demos do with library calls is also scriptable:
sample a dataset, train both model kinds, build a replication
reference, predict at a sweep of conditions, and score the predictions.
Each step writes plain CSV/JSON artifacts next to each other, so the
pipeline can be resumed, inspected, or plotted by other tools.
"""

import json
import tempfile
from pathlib import Path

from hetgp.cli import main as hetgp


def run(*argv) -> None:
    argv = [str(a) for a in argv]
    print(f"$ hetgp {' '.join(argv)}")
    rc = hetgp(argv)
    if rc != 0:
        raise SystemExit(f"step failed with exit code {rc}")


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        data = root / "data.csv"
        sweep = "x=0.1..0.9 step 0.2"

        run("sample", "--scenario", "S1", "--n", 400, "--seed", 7, "-o", data)
        run("train", "--model", "gpr", "--data", data, "-o", root / "gpr.json")
        run("train", "--model", "hgpr", "--data", data, "--inducing", 40,
            "--max-iters", 250, "-o", root / "hgpr.json")
        run("sample", "--scenario", "S1", "--replicate", 100,
            "--at-slice", sweep, "--seed", 101, "-o", root / "ref.json")
        for kind in ("gpr", "hgpr"):
            run("predict", "--model", root / f"{kind}.json", "--at-slice", sweep,
                "--samples", 2000, "--seed", 5, "-o", root / f"pred_{kind}.csv")
        run("evaluate", "--reference", root / "ref.json",
            "--predictions", root / "pred_gpr.csv", root / "pred_hgpr.csv",
            "--labels", "gpr", "hgpr", "-o", root / "scores.json")

        print("\nartifacts written:")
        for p in sorted(root.iterdir()):
            print(f"  {p.name:22s} {p.stat().st_size:8d} bytes")

        report = json.loads((root / "scores.json").read_text())
        print("\nper-condition d_W1 from scores.json:")
        for entry in report["per_condition"]:
            x = entry["condition"]["x"]
            res = entry["results"]
            print(f"  x = {x:.1f}: gpr {res['gpr']['d_w1']:.3f}, "
                  f"hgpr {res['hgpr']['d_w1']:.3f}")


if __name__ == "__main__":
    main()
