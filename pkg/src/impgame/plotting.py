"""Figures rendered from the column files written by ``impgame report``.

Only the ``.dat`` files on disk are read, so a figure can be regenerated
without re-running any solver.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def write_dat(path, columns, rows, comments=()) -> None:
    """Whitespace-separated columns with ``#`` comment and header lines."""
    with open(path, "w") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        fh.write("# " + " ".join(columns) + "\n")
        for r in rows:
            fh.write(" ".join(_fmt(v) for v in r) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def read_dat(path):
    """Return ``(columns, data)``; ``data`` has shape ``(rows, len(columns))``."""
    columns, rows = [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                columns = line[1:].split()  # the last comment line names the columns
                continue
            rows.append([float(v) for v in line.split()])
    data = np.asarray(rows, dtype=float).reshape(-1, len(columns))
    return columns, data


def _finish(fig, ax, out):
    ax.grid(alpha=0.3)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_value_slice(dat, out):
    """Value against the first state coordinate, one curve per budget pair."""
    cols, data = read_dat(dat)
    fig, ax = plt.subplots(figsize=(6, 4))
    if len(data):
        k, l, x = (data[:, cols.index(c)] for c in ("k", "l", "x1"))
        v = data[:, cols.index("value")]
        for kk, ll in sorted(set(zip(k, l))):
            sel = (k == kk) & (l == ll)
            order = np.argsort(x[sel])
            ax.plot(x[sel][order], v[sel][order], lw=1.2, label=f"k={int(kk)}, l={int(ll)}")
    ax.set_xlabel("x1")
    ax.set_ylabel("value at t=0")
    return _finish(fig, ax, out)


def plot_convergence(dat, out):
    """Probe value against budget ``k`` for each resolution."""
    cols, data = read_dat(dat)
    fig, ax = plt.subplots(figsize=(6, 4))
    if len(data):
        eps, k, probe, v = (data[:, cols.index(c)] for c in ("eps", "k", "probe", "value"))
        for e in sorted(set(eps), reverse=True):
            for p in sorted(set(probe)):
                sel = (eps == e) & (probe == p)
                ax.plot(k[sel], v[sel], marker="o", ms=3, label=f"eps={e:g}, probe {int(p)}")
        ax.set_xscale("log", base=2)
    ax.set_xlabel("k")
    ax.set_ylabel("value")
    return _finish(fig, ax, out)


def plot_penalty(dat, out):
    """Penalized probe value against the penalty level."""
    cols, data = read_dat(dat)
    fig, ax = plt.subplots(figsize=(6, 4))
    if len(data):
        n, k, probe, v = (data[:, cols.index(c)] for c in ("n", "k", "probe", "value"))
        for kk in sorted(set(k)):
            for p in sorted(set(probe)):
                sel = (k == kk) & (probe == p)
                ax.plot(n[sel], v[sel], marker="s", ms=3, label=f"k={int(kk)}, probe {int(p)}")
        ax.set_xscale("log", base=2)
    ax.set_xlabel("penalty level n")
    ax.set_ylabel("value")
    return _finish(fig, ax, out)


def plot_margins(dat, out):
    """Saddle margins per trial, player 1 deviations then player 2 densities."""
    cols, data = read_dat(dat)
    fig, ax = plt.subplots(figsize=(6, 4))
    if len(data):
        side, m = data[:, cols.index("side")], data[:, cols.index("margin")]
        idx = np.arange(len(m))
        for s, c in ((1, "tab:blue"), (2, "tab:orange")):
            sel = side == s
            ax.bar(idx[sel], m[sel], color=c, label=f"player {s}")
        ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xlabel("trial")
    ax.set_ylabel("margin")
    return _finish(fig, ax, out)


RENDERERS = {
    "value_slice": plot_value_slice,
    "convergence": plot_convergence,
    "penalty": plot_penalty,
    "saddle_margins": plot_margins,
}


def render_all(directory) -> list:
    """Render every known ``.dat`` file in ``directory`` to a PNG beside it."""
    directory = Path(directory)
    made = []
    for dat in sorted(directory.glob("*.dat")):
        stem = dat.stem
        fn = next((f for key, f in RENDERERS.items() if stem.startswith(key)), None)
        if fn is not None:
            made.append(fn(dat, dat.with_suffix(".png")))
    return made
