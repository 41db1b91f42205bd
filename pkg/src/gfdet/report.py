"""Figure rendering for the CLI report paths.

Each writer pairs with one of the delimited outputs: the benchmark curve
next to its CSV, the loss trace next to the training log, and the anchor
table next to its CSV.  PNG metadata is stripped so identical inputs give
byte-identical files.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  backend must be pinned first

_SAVE = dict(dpi=100, metadata={"Software": None})


def save_curve_figure(curve: Sequence[tuple[float, float]], path,
                      title: str = "miss rate vs false positives per image") -> None:
    fig, ax = plt.subplots(figsize=(6, 4.5))
    fppi = [p[0] for p in curve]
    mr = [p[1] for p in curve]
    ax.step(fppi, mr, where="post", color="tab:red")
    positive = [f for f in fppi if f > 0]
    if positive:
        ax.set_xscale("log")
        ax.set_xlim(min(min(positive) / 2, 1e-2), max(max(fppi) * 1.5, 1.0))
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("false positives per image")
    ax.set_ylabel("miss rate")
    ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def save_loss_figure(rows: Sequence[Mapping[str, float]], path,
                     title: str = "training loss") -> None:
    """`rows` as read_training_log returns them: step plus loss components."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    steps = [r["step"] for r in rows]
    for key, color in (("l_total", "black"), ("l_cls", "tab:blue"),
                       ("l_loc", "tab:orange"), ("l2", "tab:green")):
        ax.plot(steps, [r[key] for r in rows], label=key, color=color,
                linewidth=1.2 if key == "l_total" else 0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def save_anchor_figure(names: Sequence[str], counts: Sequence[int], path,
                       title: str = "anchors per head map") -> None:
    fig, ax = plt.subplots(figsize=(6, 0.5 + 0.4 * max(len(names), 1)))
    pos = range(len(names))
    ax.barh(pos, counts, color="tab:blue")
    ax.set_yticks(pos, labels=names)
    ax.invert_yaxis()
    ax.set_xlabel("anchors")
    ax.set_title(f"{title} (total {sum(counts)})")
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
