"""Objective metrics: reconstruction, style recognition of generated windows, latent probes."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .corpus import PAD, TernaryWindow, Vocabulary, derive_intervals, split_by_song
from .model import DisentangledVAE, MelodyEmbedding, ResidualBiGRU, join_latent, split_latent

VARIANTS = {
    # which latent parts are kept from the encoding; every other slot is redrawn from N(0, I)
    "pitch-style": ("pitch_style",),
    "rhythm-style": ("rhythm_style",),
    "total-style": ("pitch_style", "rhythm_style"),
}


def _arrays(windows):
    from .trainer import WindowArrays

    return windows if isinstance(windows, WindowArrays) else WindowArrays(windows)


@torch.no_grad()
def reconstruction_scores(model: DisentangledVAE, windows, batch_size: int = 500) -> dict[str, float]:
    """Token accuracy of argmax decoding from posterior means, pooled and per stream."""
    data = _arrays(windows)
    correct_p = correct_r = total = 0
    for b in data.batches(batch_size):
        bundle = model.encode_means(b.pitch, b.interval, b.rhythm)
        p = model.pitch_decoder.sample(bundle.z_pitch("mean"))
        r = model.rhythm_decoder.sample(bundle.z_rhythm("mean"))
        correct_p += int((p == b.pitch).sum())
        correct_r += int((r == b.rhythm).sum())
        total += b.pitch.numel()
    return {"pooled": (correct_p + correct_r) / (2 * total), "pitch": correct_p / total, "rhythm": correct_r / total}


def reconstruction_accuracy(model: DisentangledVAE, windows) -> float:
    if len(windows) == 0:
        raise ValueError("empty test set")
    return reconstruction_scores(model, windows)["pooled"]


class StyleRecognizer(nn.Module):
    """Region classifier over token windows: residual bidirectional GRU plus a linear head."""

    def __init__(self, vocab_sizes, n_regions: int, hidden: int = 64, layers: int = 2,
                 embed_dim: int = 32, seed: int = 0):
        super().__init__()
        self.hparams = {"vocab_sizes": list(vocab_sizes), "n_regions": n_regions, "hidden": hidden,
                        "layers": layers, "embed_dim": embed_dim, "seed": seed}
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.embed = MelodyEmbedding(vocab_sizes, embed_dim)
            self.encoder = ResidualBiGRU(self.embed.out_dim, hidden, layers)
            self.head = nn.Linear(2 * hidden, n_regions)

    def forward(self, pitch, interval, rhythm) -> torch.Tensor:
        h = self.encoder(self.embed(pitch, interval, rhythm))
        return self.head(self.encoder.summary(h))

    @torch.no_grad()
    def predict(self, pitch, interval, rhythm, batch_size: int = 1000) -> torch.Tensor:
        out = [self.forward(pitch[i:i + batch_size], interval[i:i + batch_size], rhythm[i:i + batch_size]).argmax(-1)
               for i in range(0, len(pitch), batch_size)]
        return torch.cat(out)

    def save(self, path: str | Path) -> None:
        torch.save({"hparams": self.hparams, "state_dict": self.state_dict()}, path)

    @classmethod
    def load(cls, path: str | Path) -> "StyleRecognizer":
        blob = torch.load(path, weights_only=True)
        rec = cls(**blob["hparams"])
        rec.load_state_dict(blob["state_dict"])
        rec.eval()
        return rec


def train_style_recognizer(windows: Sequence[TernaryWindow], vocab: Vocabulary, epochs: int = 2,
                           batch_size: int = 64, lr: float = 2e-3, hidden: int = 64, seed: int = 0,
                           test_fraction: float = 0.1) -> tuple[StyleRecognizer, float]:
    """Train the recognizer on a song-level split; returns it with its held-out accuracy."""
    from .trainer import WindowArrays

    if len({w.region for w in windows}) < 2:
        raise ValueError("style recognizer needs at least two regions")
    train_w, test_w = split_by_song(windows, test_fraction, seed)
    data, test = WindowArrays(train_w), WindowArrays(test_w)
    rec = StyleRecognizer(vocab.sizes, vocab.n_regions, hidden=hidden, seed=seed)
    opt = torch.optim.Adam(rec.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    rec.train()
    for _ in range(epochs):
        for b in data.batches(batch_size, rng.permutation(len(data))):
            opt.zero_grad(set_to_none=True)
            loss = nn.functional.cross_entropy(rec(b.pitch, b.interval, b.rhythm), b.region)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(rec.parameters(), 5.0)
            opt.step()
    rec.eval()
    b = test.batch()
    acc = float((rec.predict(b.pitch, b.interval, b.rhythm) == b.region).float().mean())
    return rec, acc


def pitches_to_interval_ids(pitch_ids: torch.Tensor, vocab: Vocabulary) -> torch.Tensor:
    """Interval ids recomputed from pitch ids; deltas unseen in the vocabulary map to NONE."""
    out = []
    for row in pitch_ids.tolist():
        ivs = derive_intervals([vocab.pitch_tokens[i] for i in row])
        out.append([vocab.interval_id(PAD) if iv == PAD else vocab.interval_id_or_none(iv) for iv in ivs])
    return torch.tensor(out, dtype=torch.long)


@torch.no_grad()
def decode_tokens(model: DisentangledVAE, z: torch.Tensor, vocab: Vocabulary, temperature: float | None = None,
                  generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Full latents -> (pitch, interval, rhythm) ids; intervals follow from the decoded pitches."""
    parts = split_latent(z, model.cfg)
    z_p = torch.cat([parts["pitch_style"], parts["pitch_content"]], -1)
    z_r = torch.cat([parts["rhythm_style"], parts["rhythm_content"]], -1)
    p = model.pitch_decoder.sample(z_p, temperature, generator)
    r = model.rhythm_decoder.sample(z_r, temperature, generator)
    return p, pitches_to_interval_ids(p, vocab), r


@torch.no_grad()
def style_recognition(model: DisentangledVAE, recognizer: StyleRecognizer, windows, vocab: Vocabulary,
                      variant: str, seed: int = 0, batch_size: int = 500) -> tuple[float, np.ndarray]:
    """Accuracy and confusion matrix of the recognizer on windows regenerated from kept style parts."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    data = _arrays(windows)
    if len(data) == 0:
        raise ValueError("empty test set")
    keep = VARIANTS[variant]
    gen = torch.Generator().manual_seed(seed)
    n = vocab.n_regions
    confusion = np.zeros((n, n), dtype=np.int64)
    for b in data.batches(batch_size):
        bundle = model.encode_means(b.pitch, b.interval, b.rhythm)
        parts = {k: (v if k in keep else torch.randn(v.shape, generator=gen, dtype=v.dtype))
                 for k, v in bundle.mean.items()}
        p, i, r = decode_tokens(model, join_latent(parts), vocab)
        pred = recognizer.predict(p, i, r)
        np.add.at(confusion, (b.region.numpy(), pred.numpy()), 1)
    return float(np.trace(confusion) / confusion.sum()), confusion


def style_recognition_accuracy(model, recognizer, windows, vocab, variant: str, seed: int = 0) -> float:
    return style_recognition(model, recognizer, windows, vocab, variant, seed)[0]


@torch.no_grad()
def latent_means(model: DisentangledVAE, windows, batch_size: int = 1000) -> dict[str, np.ndarray]:
    data = _arrays(windows)
    chunks: dict[str, list] = {}
    for b in data.batches(batch_size):
        bundle = model.encode_means(b.pitch, b.interval, b.rhythm)
        for name, t in (("pitch_style", bundle.mean["pitch_style"]), ("rhythm_style", bundle.mean["rhythm_style"]),
                        ("style", bundle.z_style("mean")), ("content", bundle.z_content("mean"))):
            chunks.setdefault(name, []).append(t.numpy())
    return {k: np.concatenate(v) for k, v in chunks.items()}


def _probe(x_train, y_train, x_test, y_test, seed) -> float:
    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000, random_state=seed))
    clf.fit(x_train, y_train)
    return float(clf.score(x_test, y_test))


def probe_latents(model: DisentangledVAE, windows: Sequence[TernaryWindow], test_windows=None,
                  test_fraction: float = 0.2, seed: int = 0, max_train: int = 5000) -> dict[str, float]:
    """Held-out accuracy of fresh linear probes predicting the region from style and content means.

    Without ``test_windows`` the windows are split by song, so overlapping windows
    of one song never straddle the split.
    """
    if test_windows is None:
        windows, test_windows = split_by_song(windows, test_fraction, seed)
    rng = np.random.default_rng(seed)
    if len(windows) > max_train:
        windows = [windows[i] for i in np.sort(rng.choice(len(windows), max_train, replace=False))]
    tr, te = latent_means(model, windows), latent_means(model, test_windows)
    y_tr = np.array([w.region for w in windows])
    if len(set(y_tr.tolist())) < 2:
        raise ValueError("latent probes need at least two regions in the training split")
    y_te = np.array([w.region for w in test_windows])
    return {"style": _probe(tr["style"], y_tr, te["style"], y_te, seed),
            "content": _probe(tr["content"], y_tr, te["content"], y_te, seed)}


@torch.no_grad()
def cross_decoder_activation(model: DisentangledVAE, windows, batch_size: int = 500) -> dict[str, float]:
    """Mean sigmoid activation of each stream decoder when fed the other stream's latent means."""
    data = _arrays(windows)
    sums = {"pitch_from_rhythm": 0.0, "rhythm_from_pitch": 0.0}
    counts = {"pitch_from_rhythm": 0, "rhythm_from_pitch": 0}
    for b in data.batches(batch_size):
        bundle = model.encode_means(b.pitch, b.interval, b.rhythm)
        for key, act in (("pitch_from_rhythm", torch.sigmoid(model.decode_pitch(bundle.z_rhythm("mean")))),
                         ("rhythm_from_pitch", torch.sigmoid(model.decode_rhythm(bundle.z_pitch("mean"))))):
            sums[key] += float(act.sum())
            counts[key] += act.numel()
    return {k: sums[k] / counts[k] for k in sums}


def export_latents(model: DisentangledVAE, windows: Sequence[TernaryWindow], vocab: Vocabulary,
                   out: str | Path) -> int:
    """One CSV row per window: region label followed by pitch-style, rhythm-style, style and content means."""
    means = latent_means(model, windows)
    order = ("pitch_style", "rhythm_style", "style", "content")
    header = ["region"] + [f"{name}_{i}" for name in order for i in range(means[name].shape[1])]
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k, win in enumerate(windows):
            row = [vocab.region_labels[win.region]]
            for name in order:
                row.extend(f"{v:.9g}" for v in means[name][k])
            w.writerow(row)
    return len(windows)


@dataclass
class EvalReport:
    reconstruction_accuracy: float
    reconstruction_pitch: float
    reconstruction_rhythm: float
    style_recognition: dict[str, float]
    probe_style_acc: float
    probe_content_acc: float
    confusion: list[list[int]]
    regions: list[str]
    recognizer_accuracy: float | None = None
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        accs = [self.reconstruction_accuracy, self.probe_style_acc, self.probe_content_acc,
                *self.style_recognition.values()]
        if not all(0.0 <= a <= 1.0 for a in accs if not math.isnan(a)):
            raise ValueError("accuracy outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def evaluate(model: DisentangledVAE, recognizer: StyleRecognizer, windows: Sequence[TernaryWindow],
             vocab: Vocabulary, seed: int = 0, probe_windows=None) -> EvalReport:
    """Run every metric; the confusion matrix belongs to the total-style variant."""
    if not windows:
        raise ValueError("empty test set")
    rec = reconstruction_scores(model, windows)
    styles, confusion = {}, None
    for variant in VARIANTS:
        acc, conf = style_recognition(model, recognizer, windows, vocab, variant, seed)
        styles[variant] = acc
        if variant == "total-style":
            confusion = conf
    probes = probe_latents(model, probe_windows if probe_windows is not None else windows, seed=seed)
    report = EvalReport(rec["pooled"], rec["pitch"], rec["rhythm"], styles, probes["style"], probes["content"],
                        confusion.tolist(), list(vocab.region_labels),
                        extra={"cross_decoder_activation": cross_decoder_activation(model, windows)})
    report.validate()
    return report
