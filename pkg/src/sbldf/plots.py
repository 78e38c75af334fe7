"""Static SVG figures from result tables. Presentation only."""
from __future__ import annotations

import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .bench import read_csv, success_ci  # noqa: E402

plt.rcParams["svg.hashsalt"] = "sbldf"
plt.rcParams["svg.fonttype"] = "none"


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)


def _groups(rows, key):
    out = {}
    for r in rows:
        out.setdefault(key(r), []).append(r)
    return out


def _kind(rows):
    return rows[0]["experiment"].split("/", 1)[0]


def _method(r):
    return r["experiment"].split("/", 1)[1]


def plot_success_vs_m(rows, out):
    rows = [r for r in rows if _method(r) != "sbl_df_grid"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for (meth, sw, sd), grp in sorted(_groups(rows, lambda r: (_method(r), r["support_errors"], r["sigma_dyn2"])).items()):
        pts = []
        for m, g in sorted(_groups(grp, lambda r: int(r["m"])).items()):
            k = sum(int(r["success"]) for r in g)
            pts.append((m, *success_ci(k, len(g))))
        ms, p, lo, hi = (np.array(v) for v in zip(*pts))
        label = "static SBL" if meth == "static" else f"SBL-DF swaps={sw} dyn={sd}"
        ax.errorbar(ms, p, yerr=np.vstack([p - lo, hi - p]), marker="o", capsize=2, label=label,
                    linestyle=":" if meth == "static" else "-")
    ax.set_xlabel("M")
    ax.set_ylabel("success rate")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=7)
    return [_save(fig, out / "success_vs_m.svg")]


def plot_rmse_vs_axis(rows, out):
    axis = "structure_c" if len({r["structure_c"] for r in rows}) > 1 else "sigma_obs2"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for meth, grp in sorted(_groups(rows, _method).items()):
        pts = []
        for v, g in sorted(_groups(grp, lambda r: float(r[axis])).items()):
            q = np.percentile([float(r["rmse"]) for r in g], [25, 50, 75])
            pts.append((v, *q))
        v, q25, q50, q75 = (np.array(c) for c in zip(*pts))
        ax.plot(v, q50, marker="o", label=meth)
        ax.fill_between(v, q25, q75, alpha=0.2)
    if axis == "sigma_obs2":
        ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel(axis)
    ax.set_ylabel("rMSE (median, quartiles)")
    ax.legend(fontsize=7)
    return [_save(fig, out / f"rmse_vs_{axis}.svg")]


def plot_rmse_vs_t(rows, out):
    files = []
    for meth, grp in sorted(_groups(rows, _method).items()):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        pts = []
        for t, g in sorted(_groups(grp, lambda r: int(r["t"])).items()):
            pts.append((t, *np.percentile([float(r["rmse"]) for r in g], [25, 50, 75])))
        t, q25, q50, q75 = (np.array(c) for c in zip(*pts))
        ax.plot(t, q50, marker="o", label=meth)
        ax.fill_between(t, q25, q75, alpha=0.2)
        ax.set_yscale("log")
        ax.set_xlabel("time step")
        ax.set_ylabel("rMSE")
        ax.set_title(meth)
        files.append(_save(fig, out / f"rmse_vs_t_{meth}.svg"))
    return files


def plot_time_vs_n(rows, out):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for meth, grp in sorted(_groups(rows, _method).items()):
        pts = [(n, np.mean([float(r["wall_ms"]) for r in g])) for n, g in sorted(_groups(grp, lambda r: int(r["n"])).items())]
        n, ms = zip(*pts)
        ax.plot(n, ms, marker="o", label=meth)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("N")
    ax.set_ylabel("wall time [ms]")
    ax.legend(fontsize=7)
    return [_save(fig, out / "time_vs_n.svg")]


_PLOTTERS = {
    "measurements": plot_success_vs_m,
    "coherence": plot_rmse_vs_axis,
    "tracking": plot_rmse_vs_t,
    "runtime": plot_time_vs_n,
}


def emit_plots(csv_path, out_dir):
    """Write the SVG figures for a results CSV; returns the written paths.

    An empty table writes nothing and emits a warning.
    """
    rows = read_csv(csv_path)
    if not rows:
        warnings.warn(f"{csv_path}: empty table, no plots written", stacklevel=2)
        return []
    kind = _kind(rows)
    if kind not in _PLOTTERS:
        raise ValueError(f"unknown experiment kind {kind!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return _PLOTTERS[kind](rows, out)
