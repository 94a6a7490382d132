"""Vanilla vs FFD TPS evaluation benchmark; writes CSV to stdout or --out."""
import argparse
import sys

from warpforge._parallel import worker_count
from warpforge.tps_ffd import bench_csv, bench_tps, parse_resolutions


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--resolutions", default="566x800,1329x2000")
    ap.add_argument("--grid", type=int, default=12, help="U = V")
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--threads", type=int, default=0, help="0 = auto; 1 skips the -mt rows")
    ap.add_argument("--out")
    args = ap.parse_args()
    n = worker_count(args.threads)
    threads = (1,) if args.threads == 1 else (1, max(2, n))
    rows = bench_tps(parse_resolutions(args.resolutions), U=args.grid, V=args.grid,
                     repeats=args.repeats, threads=threads)
    text = bench_csv(rows)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    sys.stdout.write(text)


if __name__ == "__main__":
    main()
