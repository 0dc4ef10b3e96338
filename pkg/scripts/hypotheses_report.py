"""Sample the structural hypotheses for each kind and print the JSON reports.

usage: python3 scripts/hypotheses_report.py [--samples 100] [--p 1.5 3] [--q 2]
"""
import argparse

from invpower.operators import PAIR_KINDS, check_hypotheses, make_pair


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--samples", type=int, default=100)
    ap.add_argument("--p", type=float, nargs="+", default=[1.5, 2.0, 3.0, 4.0])
    ap.add_argument("--q", type=float, default=2.0)
    ap.add_argument("--M", type=int, default=32)
    args = ap.parse_args()
    for kind in PAIR_KINDS:
        for p in args.p:
            M = args.M if kind != "dirichlet-2d" else max(4, args.M // 2)
            rep = check_hypotheses(make_pair(kind, M, p, args.q), n_samples=args.samples)
            print(rep.to_json())


if __name__ == "__main__":
    main()
