#!/usr/bin/env python3
"""Plot a sweep's plot.csv (mean with a lo/hi band) or a bench.csv."""

import argparse
import csv
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def plot_sweep(rows, ax):
    xs = [float(r["x"]) for r in rows]
    mean = [float(r["y_mean"]) for r in rows]
    lo = [float(r["y_lo"]) for r in rows]
    hi = [float(r["y_hi"]) for r in rows]
    ax.plot(xs, mean, marker="o", label="mean")
    ax.fill_between(xs, lo, hi, alpha=0.2, label="±std")
    ax.set_xlabel("funnel layer")
    ax.set_ylabel("metric")
    ax.legend()


def plot_bench(rows, ax):
    xs = [float(r["funnel_layer"]) for r in rows]
    flops = [float(r["flops_savings"]) for r in rows]
    lat = [float(r["latency_savings"]) for r in rows]
    ax.plot(xs, flops, marker="o", label="flops savings")
    ax.plot(xs, lat, marker="s", label="latency savings")
    ax.set_xlabel("funnel layer")
    ax.set_ylabel("savings vs no funnel")
    ax.legend()


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("csv_path")
    p.add_argument("-o", "--out", default="plot.png")
    p.add_argument("--title", default="")
    args = p.parse_args()

    rows = read_rows(args.csv_path)
    if not rows:
        sys.exit("empty csv: " + args.csv_path)

    fig, ax = plt.subplots(figsize=(6, 4))
    if "y_mean" in rows[0]:
        plot_sweep(rows, ax)
    elif "latency_savings" in rows[0]:
        plot_bench(rows, ax)
    else:
        sys.exit("unrecognized columns: " + ",".join(rows[0]))
    if args.title:
        ax.set_title(args.title)
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)
    print("wrote", args.out)


if __name__ == "__main__":
    main()
