"""Region-conditioned melody generation and MIDI rendering."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import TernaryWindow, Vocabulary, window_events, write_midi
from .evaluator import decode_tokens, latent_means
from .model import DisentangledVAE, join_latent


@dataclass
class StyleBank:
    """Per-region centroid of posterior style means (pitch style followed by rhythm style)."""

    regions: list[str]
    centroids: np.ndarray  # (n_regions, 2 * style_dim)
    counts: list[int]

    def centroid(self, region: str) -> np.ndarray:
        try:
            return self.centroids[self.regions.index(region)]
        except ValueError:
            raise KeyError(f"unknown region {region!r}; known: {self.regions}") from None

    def to_dict(self) -> dict:
        return {"regions": self.regions, "counts": self.counts,
                "centroids": [[float(v) for v in row] for row in self.centroids]}

    @classmethod
    def from_dict(cls, d: dict) -> "StyleBank":
        return cls(list(d["regions"]), np.asarray(d["centroids"], dtype=np.float64), list(d["counts"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "StyleBank":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_style_bank(model: DisentangledVAE, windows: Sequence[TernaryWindow], vocab: Vocabulary) -> StyleBank:
    style = latent_means(model, windows)["style"].astype(np.float64)
    labels = np.array([w.region for w in windows])
    centroids, counts = [], []
    for rid, name in enumerate(vocab.region_labels):
        mask = labels == rid
        if not mask.any():
            raise ValueError(f"region {name!r} has no windows")
        centroids.append(style[mask].mean(axis=0))
        counts.append(int(mask.sum()))
    return StyleBank(list(vocab.region_labels), np.stack(centroids), counts)


@torch.no_grad()
def generate(model: DisentangledVAE, bank: StyleBank, vocab: Vocabulary, region: str, n_samples: int = 1,
             temperature: float = 1.0, seed: int = 0, style_jitter: float = 0.0,
             return_latents: bool = False):
    """Sample windows for ``region``: its style centroid plus standard-normal content.

    Pitch and rhythm ids are drawn from the temperature-scaled decoder
    distributions; intervals are recomputed from the drawn pitches.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    cfg = model.cfg
    dtype = next(model.parameters()).dtype
    gen = torch.Generator().manual_seed(int(seed))
    z_s = torch.as_tensor(bank.centroid(region), dtype=dtype).expand(n_samples, -1).clone()
    if style_jitter > 0:
        z_s = z_s + style_jitter * torch.randn(z_s.shape, generator=gen, dtype=dtype)
    z_c = torch.randn((n_samples, 2 * cfg.content_dim), generator=gen, dtype=dtype)
    ds, dc = cfg.style_dim, cfg.content_dim
    # same layouts as LatentBundle.z_style / z_content
    parts = {"pitch_style": z_s[:, :ds], "rhythm_style": z_s[:, ds:],
             "pitch_content": z_c[:, :dc], "rhythm_content": z_c[:, dc:]}
    z = join_latent(parts)
    p, i, r = decode_tokens(model, z, vocab, temperature, gen)
    rid = vocab.region_id(region)
    windows = [TernaryWindow(p[k].tolist(), i[k].tolist(), r[k].tolist(), rid, f"generated/{region}/{seed}/{k}")
               for k in range(n_samples)]
    return (windows, z) if return_latents else windows


def render_midi(window: TernaryWindow, vocab: Vocabulary, out: str | Path) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_midi(window_events(window, vocab), out)
    return out
