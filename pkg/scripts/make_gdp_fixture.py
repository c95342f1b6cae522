#!/usr/bin/env python3
"""Regenerate data/gdp_synthetic.csv, a 97-row country-style fixture.

Synthetic stand-in for a cross-country GDP table: five economic predictors,
a four-level world-region group for the random effect, and a response whose
slope structure changes across latent FDI/trade segments.  Deterministic;
the committed CSV should match this script's output exactly.
"""

import csv
from pathlib import Path

import numpy as np

REGIONS = ["africa", "americas", "asia_pacific", "europe_central_asia"]
REGION_COUNTS = [29, 22, 24, 22]  # 97 rows
REGION_EFFECT = {"africa": -0.9, "americas": 0.2, "asia_pacific": 0.4,
                 "europe_central_asia": 0.6}


def generate():
    rng = np.random.default_rng(20240131)
    rows = []
    for region, count in zip(REGIONS, REGION_COUNTS):
        for _ in range(count):
            fdi_out = float(np.round(rng.lognormal(mean=-1.5, sigma=1.4), 4))
            fdi_in = float(np.round(rng.lognormal(mean=0.2, sigma=1.0), 4))
            trade = float(np.round(rng.normal(90.0, 35.0), 2))
            unemployment = float(np.round(max(rng.normal(7.0, 3.5), 0.4), 2))
            inflation = float(np.round(rng.normal(1.10, 0.12), 4))

            # latent segments: low/medium/high FDI outflows, trade sub-split
            if fdi_out >= 0.57:
                gdp = 5.5 + 2.2 * inflation + 0.004 * trade - 0.09 * unemployment
            elif fdi_out >= 0.015:
                gdp = 2.8 + 0.35 * fdi_in - 0.002 * trade - 0.02 * unemployment
            elif trade >= 85.0:
                gdp = 1.6 + 0.25 * fdi_in - 1.1 * (inflation - 1.1)
            else:
                gdp = 0.7 + 0.12 * fdi_in - 0.5 * (inflation - 1.1) + 0.01 * unemployment
            gdp += REGION_EFFECT[region] + float(rng.normal(0.0, 0.35))
            rows.append([round(gdp, 4), fdi_in, fdi_out, round(trade, 2),
                         round(unemployment, 2), inflation, region])
    return rows


def main():
    out = Path(__file__).resolve().parent.parent / "data" / "gdp_synthetic.csv"
    out.parent.mkdir(exist_ok=True)
    rows = generate()
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gdp", "fdi_inflows", "fdi_outflows", "trade",
                         "unemployment", "inflation", "region"])
        writer.writerows(rows)
    print(f"wrote {out} ({len(rows)} rows)")


if __name__ == "__main__":
    main()
