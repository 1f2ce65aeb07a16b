"""Regenerates the synthetic regional death-count fixtures in data/regions.

The series are stand-ins with plausible shapes (first deaths in early March,
provincial peaks in late April / early May, a weekly reporting cycle and
negative binomial noise). They are not observed data.
"""

import datetime as dt
import json
from pathlib import Path

import numpy as np

START = dt.date(2020, 1, 31)
END = dt.date(2020, 6, 24)
SEED = 20200317
OUT = Path(__file__).resolve().parent / "regions"

# Multiplicative reporting factors, Monday first.
WEEKLY = np.array([0.80, 1.10, 1.15, 1.10, 1.05, 0.95, 0.85])


def curve(days, onset, peak, height, rise, fall):
    t = days - peak
    width = np.where(t < 0, rise, fall)
    mu = height * np.exp(-0.5 * (t / width) ** 2)
    return np.where(days < onset, 0.0, mu)


def draw(rng, mu, theta):
    lam = rng.gamma(theta, np.maximum(mu, 1e-12) / theta)
    return np.where(mu > 0, rng.poisson(lam), 0)


def main():
    n = (END - START).days + 1
    dates = [START + dt.timedelta(days=i) for i in range(n)]
    days = np.arange(n, dtype=float)
    dow = np.array([d.weekday() for d in dates])
    week = WEEKLY[dow]
    rng = np.random.default_rng(SEED)

    mar8 = (dt.date(2020, 3, 8) - START).days
    shapes = {
        "quebec": dict(onset=mar8 + 10, peak=95, height=135.0, rise=14.0, fall=24.0, theta=12.0),
        "ontario": dict(onset=mar8 + 9, peak=88, height=68.0, rise=13.0, fall=26.0, theta=12.0),
        "alberta": dict(onset=mar8 + 12, peak=80, height=5.0, rise=12.0, fall=22.0, theta=8.0),
        "rest": dict(onset=mar8, peak=75, height=6.0, rise=12.0, fall=20.0, theta=8.0),
    }
    counts = {}
    for name, s in shapes.items():
        mu = curve(days, s["onset"], s["peak"], s["height"], s["rise"], s["fall"]) * week
        counts[name] = draw(rng, mu, s["theta"])
    counts["canada"] = sum(counts[k] for k in ("quebec", "ontario", "alberta", "rest"))

    OUT.mkdir(parents=True, exist_ok=True)
    for region in ("canada", "quebec", "ontario", "alberta"):
        with open(OUT / f"{region}.csv", "w", newline="\n") as fh:
            fh.write("date,deaths,region\n")
            for d, c in zip(dates, counts[region]):
                fh.write(f"{d.isoformat()},{int(c)},{region}\n")
    manifest = {
        "synthetic": True,
        "generator": "data/generate_fixtures.py",
        "seed": SEED,
        "start": START.isoformat(),
        "end": END.isoformat(),
        "regions": ["canada", "quebec", "ontario", "alberta"],
        "note": "Stand-in series with plausible shapes; not observed counts.",
    }
    (OUT / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


if __name__ == "__main__":
    main()
