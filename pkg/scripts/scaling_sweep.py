"""Flop and wall-time scaling of one fast gradient against the dense oracle.

Sweeps several Taylor degrees so the fixed-rank slope can be compared across ranks.

    python3 scripts/scaling_sweep.py --degrees 2 3 4 --out results/scaling.json
"""

import argparse
import json
import sys

from altgrad.bench import RunSpec, dumps_17g, run


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--degrees", type=int, nargs="+", default=[2, 3, 4])
    ap.add_argument("--n-list", type=int, nargs="+", default=[256, 512, 1024, 2048, 4096])
    ap.add_argument("--d", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    reports = []
    for g in args.degrees:
        rep = run(RunSpec("scaling", d=args.d, degree=g, n_list=args.n_list, seed=args.seed))
        s = rep.summary
        print(
            f"degree {g:2d} rank {rep.results[0]['rank']:4d}  "
            f"fast slope {s['fast_flop_slope']:.3f}  dense slope {s['dense_flop_slope']:.3f}",
            file=sys.stderr,
        )
        reports.append(rep.to_dict())
    text = dumps_17g({"sweeps": reports})
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        print(text)
    return 0 if all(r["passed"] for r in reports) else 2


if __name__ == "__main__":
    sys.exit(main())
