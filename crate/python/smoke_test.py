"""Smoke test for the gamcast extension module.

Uses an installed `gamcast` if there is one, otherwise the library built by
`cargo build -p gamcast-py --release`.
"""

import importlib
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[1]


def import_gamcast():
    try:
        return importlib.import_module("gamcast")
    except ImportError:
        pass
    for name in ("libgamcast_py.so", "libgamcast_py.dylib", "gamcast_py.dll"):
        built = ROOT / "target" / "release" / name
        if built.exists():
            break
    else:
        sys.exit("build the extension first: cargo build -p gamcast-py --release")
    tmp = pathlib.Path(tempfile.mkdtemp())
    suffix = ".pyd" if built.suffix == ".dll" else ".so"
    shutil.copy(built, tmp / f"gamcast{suffix}")
    sys.path.insert(0, str(tmp))
    return importlib.import_module("gamcast")


def main():
    gc = import_gamcast()
    series = gc.load(str(ROOT / "data" / "regions" / "quebec.csv"), "quebec")
    assert len(series) == 146, len(series)

    fit = gc.fit(series, anchor="2020-03-17")
    assert fit.formula == ["trend", "weekly"], fit.formula
    assert 0.0 < fit.r_sq_adj <= 1.0
    assert len(fit.fitted) == len(series)
    print(fit)

    pk = gc.peak(fit, seed=42, n_sim=2000)
    assert abs(sum(pk["day_probabilities"]) - 1.0) < 1e-9
    lo, hi = pk["interval_95"]
    assert lo <= pk["mode_day"] <= hi
    print("peak:", series.dates[pk["mode_day"]])
    assert gc.peak(fit, seed=42, n_sim=2000) == pk

    prof = gc.deconvolve(series, seed=1, iterations=6000, thin=10)
    assert len(prof["median"]) == len(series) + 15
    best = max(range(len(prof["median"])), key=prof["median"].__getitem__)
    print("infection peak:", prof["dates"][best])

    try:
        gc.fit(series, formula=["hourly"])
    except ValueError:
        pass
    else:
        raise AssertionError("unknown term accepted")
    try:
        gc.load("/nonexistent.csv")
    except gc.GamcastError:
        pass
    else:
        raise AssertionError("missing file accepted")
    print("ok")


if __name__ == "__main__":
    main()
