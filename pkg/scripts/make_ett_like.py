"""Regenerate the bundled hourly transformer-load CSV used by the desk pipeline.

The series mimics the shape of electricity-transformer recordings: six load
columns with daily and weekly cycles plus an oil-temperature column that lags
the loads. Output is fully determined by the seed.

    python scripts/make_ett_like.py [--out PATH] [--hours N] [--seed S]
"""

import argparse
import csv
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

COLUMNS = ("HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL")


def ar1(rng, n, phi, sigma):
    out = np.zeros(n)
    e = rng.normal(0, sigma, n)
    for t in range(1, n):
        out[t] = phi * out[t - 1] + e[t]
    return out


def generate(hours: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    t = np.arange(hours, dtype=np.float64)
    daily = np.sin(2 * np.pi * t / 24 - 1.2)
    weekly = np.sin(2 * np.pi * t / 168)
    drift = 0.8 * np.sin(2 * np.pi * t / hours)
    cols = {}
    for i, name in enumerate(COLUMNS):
        base = rng.uniform(2.0, 10.0)
        amp = rng.uniform(0.5, 2.5)
        cols[name] = base + amp * daily + 0.4 * amp * weekly + drift + ar1(rng, hours, 0.9, 0.15 + 0.05 * i)
    load = sum(cols[c] for c in COLUMNS) / len(COLUMNS)
    # oil temperature: first-order lag of the mean load plus its own slow cycle
    ot = np.zeros(hours)
    ot[0] = load[0]
    for k in range(1, hours):
        ot[k] = 0.92 * ot[k - 1] + 0.08 * load[k]
    cols["OT"] = 3.0 * ot + 1.5 * np.sin(2 * np.pi * t / 24 - 2.0) + ar1(rng, hours, 0.8, 0.1)
    return cols


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    default_out = Path(__file__).resolve().parents[1] / "src" / "tsinterp" / "data" / "ett_like.csv"
    ap.add_argument("--out", type=Path, default=default_out)
    ap.add_argument("--hours", type=int, default=2880)
    ap.add_argument("--seed", type=int, default=20160701)
    args = ap.parse_args(argv)
    cols = generate(args.hours, args.seed)
    start = datetime(2016, 7, 1)
    with args.out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *COLUMNS, "OT"])
        for k in range(args.hours):
            stamp = (start + timedelta(hours=k)).strftime("%Y-%m-%d %H:%M:%S")
            w.writerow([stamp, *(f"{cols[c][k]:.3f}" for c in (*COLUMNS, "OT"))])
    print(f"wrote {args.hours} rows to {args.out}")


if __name__ == "__main__":
    main()
