"""Report figures: metric traces over the edit stream and routing-score histograms."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated renders of the same data byte-identical
_PNG_META = {"Software": None}


def plot_metric_traces(runs: Mapping[str, Sequence[dict]], path: Union[str, Path]) -> Path:
    """One panel per metric, one line per labelled run (records as dicts)."""
    names = ("rel", "gen", "loc", "op")
    fig, axes = plt.subplots(1, len(names), figsize=(3.2 * len(names), 3.0), sharey=True)
    for ax, name in zip(axes, names):
        for label, recs in runs.items():
            ax.plot([r["step"] for r in recs], [r[name] for r in recs], marker="o", ms=3, label=label)
        ax.set_title(name.capitalize() if name != "op" else "OP")
        ax.set_xlabel("edits")
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_routing_histogram(snapshot: Optional[dict], path: Union[str, Path],
                           title: str = "routing scores") -> Optional[Path]:
    """Histogram of max shard scores for edit and locality prompts, epsilon marked."""
    if not snapshot:
        return None
    edit = np.asarray(snapshot.get("edit_scores", []), dtype=float)
    loc = np.asarray(snapshot.get("locality_scores", []), dtype=float)
    both = np.concatenate([edit, loc])
    if both.size == 0:
        return None
    bins = np.linspace(0.0, max(float(both.max()), 1e-9) * 1.05, 30)
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    ax.hist(loc, bins=bins, alpha=0.6, label=f"locality (n={loc.size})")
    ax.hist(edit, bins=bins, alpha=0.6, label=f"edit (n={edit.size})")
    ax.axvline(snapshot.get("epsilon", 0.0), color="k", ls="--", lw=1, label="epsilon")
    ax.set_xlabel("max activation score")
    ax.set_ylabel("count")
    ax.set_title(f"{title} (step {snapshot.get('step', '?')})")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path
