"""Figures written next to the delimited outputs: latent-space scatter plots, confusion matrices, loss curves."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PANELS = (
    ("pitch_style", "Pitch style space"),
    ("rhythm_style", "Rhythm style space"),
    ("style", "Total style space"),
    ("content", "Total content space"),
)

_PNG_META = {"Software": None}


def publication_axes(width: float = 5.0, height: float | None = None):
    """Figure and axes with readable font sizes; height defaults to the golden ratio of width."""
    golden = (np.sqrt(5) - 1.0) / 2.0
    height = height or width * golden
    fig, ax = plt.subplots(figsize=(width, height), facecolor="w")
    ax.tick_params(labelsize=9)
    for side in ("top", "right"):
        ax.spines[side].set_visible(False)
    return fig, ax


def read_latents(path: str | Path) -> tuple[list[str], dict[str, np.ndarray]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    labels = [r[0] for r in rows]
    values = np.array([[float(v) for v in r[1:]] for r in rows]) if rows else np.zeros((0, len(header) - 1))
    blocks = {}
    for name, _ in PANELS:
        cols = [i - 1 for i, h in enumerate(header) if h.rsplit("_", 1)[0] == name]
        blocks[name] = values[:, cols]
    return labels, blocks


def tsne_embed(x: np.ndarray, perplexity: float = 30.0, seed: int = 0) -> np.ndarray:
    from sklearn.manifold import TSNE

    perplexity = min(perplexity, max(1.0, (len(x) - 1) / 3))
    return TSNE(n_components=2, perplexity=perplexity, random_state=seed, init="pca").fit_transform(x)


def plot_latents(latents_csv: str | Path, out_dir: str | Path, perplexity: float = 30.0, seed: int = 0,
                 max_points: int = 2000) -> list[Path]:
    """2-D t-SNE of each latent block, one scatter image per block plus the coordinates as CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels, blocks = read_latents(latents_csv)
    idx = np.arange(len(labels))
    if len(idx) > max_points:
        idx = np.sort(np.random.default_rng(seed).choice(len(idx), max_points, replace=False))
    labels = [labels[i] for i in idx]
    regions = sorted(set(labels))
    colors = plt.get_cmap("tab10")
    written, coords = [], {}
    for name, title in PANELS:
        xy = tsne_embed(blocks[name][idx], perplexity, seed)
        coords[name] = xy
        fig, ax = publication_axes()
        for k, region in enumerate(regions):
            m = np.array([lab == region for lab in labels])
            ax.scatter(xy[m, 0], xy[m, 1], s=4, alpha=0.6, color=colors(k % 10), label=region)
        ax.set_title(title, fontsize=11)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.legend(fontsize=8, markerscale=3, frameon=False)
        path = out / f"tsne_{name}.png"
        fig.savefig(path, dpi=150, bbox_inches="tight", metadata=_PNG_META)
        plt.close(fig)
        written.append(path)
    with open(out / "tsne_coords.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region"] + [f"{name}_{axis}" for name, _ in PANELS for axis in ("x", "y")])
        for k, lab in enumerate(labels):
            w.writerow([lab] + [f"{coords[name][k, a]:.6g}" for name, _ in PANELS for a in (0, 1)])
    written.append(out / "tsne_coords.csv")
    return written


def plot_confusion(confusion, regions, path: str | Path, title: str = "Total-style recognition") -> Path:
    conf = np.asarray(confusion, dtype=float)
    fig, ax = publication_axes(4.0, 3.6)
    rows = conf.sum(axis=1, keepdims=True)
    ax.imshow(np.divide(conf, rows, out=np.zeros_like(conf), where=rows > 0), cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(len(regions)), regions, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(len(regions)), regions, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title, fontsize=10)
    for i in range(conf.shape[0]):
        for j in range(conf.shape[1]):
            ax.text(j, i, int(conf[i, j]), ha="center", va="center", fontsize=7)
    fig.savefig(path, dpi=150, bbox_inches="tight", metadata=_PNG_META)
    plt.close(fig)
    return Path(path)


def plot_metrics(metrics_jsonl: str | Path, path: str | Path) -> Path:
    """Per-step total loss and per-epoch validation accuracy from a metrics log."""
    steps, totals, ep_steps, val = [], [], [], []
    with open(metrics_jsonl, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["kind"] == "step":
                steps.append(rec["step"])
                totals.append(rec["total"])
            elif rec.get("val_accuracy") is not None:
                ep_steps.append(rec["step"])
                val.append(rec["val_accuracy"])
    fig, ax = publication_axes(6.0)
    ax.plot(steps, totals, lw=0.6, color="tab:blue")
    ax.set_xlabel("step")
    ax.set_ylabel("total loss", color="tab:blue")
    if val:
        ax2 = ax.twinx()
        ax2.plot(ep_steps, val, "o-", color="tab:orange", ms=3)
        ax2.set_ylabel("validation accuracy", color="tab:orange")
        ax2.set_ylim(0, 1)
    fig.savefig(path, dpi=150, bbox_inches="tight", metadata=_PNG_META)
    plt.close(fig)
    return Path(path)
