"""Figures for experiment tables: overhead and trace outcomes against horizon."""

from __future__ import annotations

import io
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _per_net(rows):
    out = {}
    for r in rows:
        d = out.setdefault(r.net, {})
        e = d.setdefault(r.horizon, {"n": 0, "sum": 0.0, "max": 0.0, "viol": 0, "clear": 0})
        e["n"] += r.n_traces
        e["sum"] += r.mean_ms * r.n_traces
        e["max"] = max(e["max"], r.max_ms)
        e["viol" if r.outcome == "violation" else "clear"] += r.n_traces
    return out


def _png(fig) -> bytes:
    buf = io.BytesIO()
    # fixed metadata keeps the bytes reproducible
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return buf.getvalue()


def render_figures(rows: Sequence, stem: Path) -> dict:
    """Return ``{path: png bytes}`` for ``<stem>_overhead.png`` and ``<stem>_traces.png``."""
    data = _per_net(rows)
    stem = Path(stem)

    fig, ax = plt.subplots(figsize=(6, 4))
    for i, (net, d) in enumerate(data.items()):
        hs = sorted(d)
        ax.plot(hs, [d[h]["sum"] / d[h]["n"] for h in hs], color=f"C{i}", marker="o", label=f"{net} mean")
        ax.plot(hs, [d[h]["max"] for h in hs], color=f"C{i}", linestyle="--", alpha=0.6, label=f"{net} max")
    # the cold first cube solves dominate the max, so means need a log axis to be visible
    ax.set_yscale("log")
    ax.set_xlabel("lookahead horizon [steps]")
    ax.set_ylabel("time per step [ms]")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    overhead = _png(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    for i, (net, d) in enumerate(data.items()):
        hs = sorted(d)
        ax.plot(hs, [d[h]["viol"] for h in hs], color=f"C{i}", marker="s", label=f"{net} violation")
        ax.plot(hs, [d[h]["clear"] for h in hs], color=f"C{i}", marker="o", linestyle=":", label=f"{net} all-clear")
    ax.set_xlabel("lookahead horizon [steps]")
    ax.set_ylabel("traces")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    traces = _png(fig)

    return {stem.parent / f"{stem.name}_overhead.png": overhead,
            stem.parent / f"{stem.name}_traces.png": traces}
