"""Approximation error of the low-rank path against Taylor degree, over several seeds.

    python3 scripts/error_vs_degree.py --seeds 0 1 2 --out results/errsweep.csv
"""

import argparse
import csv
import sys
import warnings

from altgrad.bench import RunSpec, run


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--n", type=int, default=16)
    ap.add_argument("--d", type=int, default=4)
    ap.add_argument("--degrees", type=int, nargs="+", default=[1, 2, 3, 4, 5, 6, 7, 8, 9, 10])
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    rows, all_ok = [], True
    for seed in args.seeds:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            report = run(RunSpec("errsweep", n=args.n, d=args.d, seed=seed, degrees=args.degrees))
        all_ok &= report.passed
        rows.extend({"seed": seed, **r} for r in report.results)

    keys = list(dict.fromkeys(k for r in rows for k in r))
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    writer = csv.DictWriter(fh, keys, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: format(v, ".17g") if isinstance(v, float) else v for k, v in r.items()})
    if args.out:
        fh.close()
    print(f"monotone and within bound on every seed: {all_ok}", file=sys.stderr)
    return 0 if all_ok else 2


if __name__ == "__main__":
    sys.exit(main())
