"""Run the monotonicity and lower-bound matrix and print one line per case.

usage: python3 scripts/run_matrix.py [--M 32 64] [--no-mu-hat]
"""
import argparse
import time

from invpower.engine import EngineConfig, run, seed
from invpower.errors import InvalidExponent
from invpower.operators import PAIR_KINDS, make_pair
from invpower.oracle import rayleigh_minimize_direct

PS = (1.5, 2.0, 3.0, 4.0)


def cases(Ms):
    for kind in PAIR_KINDS:
        for p in PS:
            qs = [1.0, 2.0, p] + ([p + 1.0] if kind == "dirichlet-1d" else [])
            for q in dict.fromkeys(qs):
                for M in Ms:
                    yield kind, p, q, M


def run_case(kind, p, q, M, mu_hat=True):
    """Return a dict describing one run, or None if (p, q) is outside the admissible range."""
    try:
        pair = make_pair(kind, M, p, q)
    except InvalidExponent:
        return None
    w0 = seed(pair)
    mu = rayleigh_minimize_direct(pair) if mu_hat else None
    cfg = EngineConfig(mu_hat=mu.mu_hat if mu else None)
    res = run(pair, w0, cfg)
    lams = res.trace.lambdas
    slack = res.trace.slack
    lower = None
    if mu is not None:
        lower = float(min(lams) - (mu.mu_hat - (1e-6 * mu.mu_hat + slack)))
    return {
        "kind": kind, "p": p, "q": q, "M": M, "lam": res.lam, "converged": res.converged,
        "iterations": res.iterations, "ledger": len(res.trace.ledger), "slack": slack,
        "margins": dict(res.trace.margins), "mu_hat": mu.mu_hat if mu else None,
        "mu_converged": mu.converged if mu else None, "lower_margin": lower,
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--M", type=int, nargs="+", default=[32, 64])
    ap.add_argument("--no-mu-hat", action="store_true")
    args = ap.parse_args()
    t0 = time.time()
    for case in cases(args.M):
        t = time.time()
        r = run_case(*case, mu_hat=not args.no_mu_hat)
        if r is None:
            print(f"{case[0]:14s} p={case[1]:<4} q={case[2]:<4} M={case[3]:<4} skipped (exponent range)")
            continue
        print(f"{r['kind']:14s} p={r['p']:<4} q={r['q']:<4} M={r['M']:<4} lam={r['lam']:.12g} "
              f"iters={r['iterations']:<4} conv={r['converged']} ledger={r['ledger']} "
              f"mu_hat={r['mu_hat'] if r['mu_hat'] is None else format(r['mu_hat'], '.12g')} "
              f"{time.time() - t:.2f}s")
    print(f"total {time.time() - t0:.1f}s")


if __name__ == "__main__":
    main()
