"""First eigenvalue against grid size for one (kind, p, q).

Prints M, the engine value, the oracle minimum and, at p = q = 2, the dense
value and the continuum limit (pi^2, 2 pi^2 or tanh(1/2)).

usage: python3 scripts/convergence_in_M.py --kind dirichlet-1d --p 2 --q 2 --M 16 32 64 128
"""
import argparse
import math

from invpower.engine import EngineConfig, run, seed
from invpower.operators import make_pair
from invpower.oracle import dense_eig_p2, rayleigh_minimize_direct

CONTINUUM = {"dirichlet-1d": math.pi**2, "dirichlet-2d": 2 * math.pi**2, "steklov-1d": math.tanh(0.5)}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--kind", default="dirichlet-1d")
    ap.add_argument("--p", type=float, default=2.0)
    ap.add_argument("--q", type=float, default=2.0)
    ap.add_argument("--M", type=int, nargs="+", default=[16, 32, 64, 128])
    args = ap.parse_args()
    linear = args.p == 2.0 and args.q == 2.0
    print("M,lambda,mu_hat,dense,continuum_gap")
    for M in args.M:
        pair = make_pair(args.kind, M, args.p, args.q)
        res = run(pair, seed(pair), EngineConfig(rtol=1e-12))
        mu = rayleigh_minimize_direct(pair).mu_hat
        dense = dense_eig_p2(pair)[0] if linear else float("nan")
        ref = CONTINUUM.get(args.kind) if linear else None
        gap = res.lam - ref if ref is not None else float("nan")
        print(f"{M},{res.lam:.15g},{mu:.15g},{dense:.15g},{gap:.3e}")


if __name__ == "__main__":
    main()
