"""Run (or refresh) every experiment the acceptance suite reads.

    python scripts/run_acceptance.py --data-root /root/data [--only mnist_sharp_s0 ...] [--force]

Results land in results/ (or $SHARP_RESULTS) keyed by config digest.
"""
import argparse
import logging
import time

from sharpcl.experiments import acceptance_runs, cached, run_experiment


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--data-root", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--only", nargs="*")
    p.add_argument("--force", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    for name, (kind, cfg) in acceptance_runs().items():
        if args.only and name not in args.only:
            continue
        if cached(name, cfg, args.out) and not args.force:
            print(f"{name}: cached")
            continue
        t = time.perf_counter()
        res = run_experiment(name, kind, cfg, args.data_root, args.out, force=args.force)
        print(f"{name}: accuracy {res['accuracy']:.4f} in {time.perf_counter() - t:.0f}s", flush=True)


if __name__ == "__main__":
    main()
