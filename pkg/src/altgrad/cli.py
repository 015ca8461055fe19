"""Command-line entry point: ``altgrad gradcheck|errsweep|scaling|train-demo``.

Exit codes: 0 success, 1 invalid arguments, 2 acceptance threshold violated,
3 capacity or degeneracy error.
"""

from __future__ import annotations

import argparse
import sys
import warnings

from .bench import COMMANDS, RunSpec, run
from .errors import AltGradError, CapacityError, DegeneracyError, RangeError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_THRESHOLD = 2
EXIT_CAPACITY = 3


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default, which is reserved for threshold failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="altgrad", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--n", type=int, default=16)
    parser.add_argument("--d", type=int, default=4)
    parser.add_argument("--layers", type=int, default=2)
    parser.add_argument("--heads", type=int, default=1)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--degree", type=int, default=None, help="Taylor degree (per-command default)")
    parser.add_argument("--degrees", type=_int_list, default=[2, 4, 6, 8, 10])
    parser.add_argument("--n-list", type=_int_list, default=[256, 512, 1024, 2048, 4096])
    parser.add_argument("--residual", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--causal", action="store_true")
    parser.add_argument("--loss", choices=("ce", "sq"), default="sq")
    parser.add_argument("--path", choices=("exact", "fast"), default="fast")
    parser.add_argument("--activation", choices=("identity", "relu", "gelu-tanh"), default="identity")
    parser.add_argument("--steps", type=int, default=20)
    parser.add_argument("--lr", type=float, default=0.005)
    parser.add_argument("--out", default=None, help="write the report here instead of stdout")
    parser.add_argument("--format", choices=("json", "csv"), default="json")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = _spec(args)
    except AltGradError as err:
        print(f"altgrad: {err}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            report = run(spec)
    except (CapacityError, DegeneracyError, RangeError) as err:
        print(f"altgrad: {err}", file=sys.stderr)
        return EXIT_CAPACITY
    except AltGradError as err:
        print(f"altgrad: {err}", file=sys.stderr)
        return EXIT_USAGE
    text = report.render(spec.format)
    if spec.out:
        with open(spec.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    return EXIT_OK if report.passed else EXIT_THRESHOLD


def _spec(args) -> RunSpec:
    return RunSpec(
        command=args.command,
        n=args.n,
        d=args.d,
        layers=args.layers,
        heads=args.heads,
        seed=args.seed,
        degree=args.degree,
        degrees=args.degrees,
        n_list=args.n_list,
        residual=args.residual,
        causal=args.causal,
        loss=args.loss,
        path=args.path,
        activation=args.activation,
        steps=args.steps,
        lr=args.lr,
        out=args.out,
        format=args.format,
    )


if __name__ == "__main__":
    sys.exit(main())
