"""Print and save the GSP vs GAP predictions of the idealized block model on m x m block inputs.

A block of side W_b holding C_b objects is the calibration unit. On an input of
m x m such blocks the true count is m^2 * C_b; the GSP head reports exactly
that while the GAP head stays at C_b.

Usage: python scripts/idealized_scaling.py [--out idealized_scaling.csv]
"""
import argparse
import csv

from gspcount.model import build_idealized, idealized_scaling_check


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="idealized_scaling.csv")
    parser.add_argument("--max-m", type=int, default=6)
    args = parser.parse_args()

    rows = []
    for block in (4, 8, 16):
        for count in (1.0, 2.5, 5.0):
            model = build_idealized(block, count)
            for m in range(1, args.max_m + 1):
                gsp, gap = idealized_scaling_check(model, m)
                rows.append((block, count, m, m * m * count, gsp, gap))

    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["block", "count_per_block", "m", "true_count", "gsp", "gap"])
        writer.writerows(rows)
    print(f"{'W_b':>4} {'C_b':>5} {'m':>3} {'true':>8} {'GSP':>8} {'GAP':>8}")
    for block, count, m, true, gsp, gap in rows:
        print(f"{block:>4} {count:>5} {m:>3} {true:>8.2f} {gsp:>8.2f} {gap:>8.2f}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
