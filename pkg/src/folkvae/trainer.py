"""Two-step adversarial training with linear KL annealing.

Each batch first updates the content adversary on detached latents, then updates
the VAE (encoder, decoders, style classifier) against the frozen adversary.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import losses as L
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .corpus import TernaryWindow, Vocabulary, split_by_song
from .model import DisentangledVAE, ModelConfig

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 50
    vae_lr: float = 0.01
    classifier_lr: float = 0.005
    beta_start: float = 0.0
    beta_end: float = 0.15
    ablation: str = "total"
    seed: int = 0
    val_fraction: float = 0.1
    adversary_steps: int = 1
    grad_clip: float = 5.0
    reduction: str = "mean"
    recon_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.recon_weights = tuple(float(w) for w in self.recon_weights)
        if not 0 <= self.beta_start <= self.beta_end:
            raise ValueError("need 0 <= beta_start <= beta_end")
        if min(self.epochs, self.batch_size, self.adversary_steps) <= 0:
            raise ValueError("epochs, batch_size and adversary_steps must be positive")
        if self.vae_lr <= 0 or self.classifier_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")
        L.ObjectiveFlags.from_ablation(self.ablation)

    @property
    def flags(self) -> L.ObjectiveFlags:
        return L.ObjectiveFlags.from_ablation(self.ablation)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recon_weights"] = list(self.recon_weights)
        return d


def beta_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp from ``beta_start`` at step 0 to ``beta_end`` at ``total_steps``, flat afterwards."""
    if total_steps <= 0 or step < 0:
        raise ValueError("need step >= 0 and total_steps > 0")
    if step >= total_steps:
        return cfg.beta_end
    return cfg.beta_start + (cfg.beta_end - cfg.beta_start) * step / total_steps


@dataclass
class Batch:
    pitch: torch.Tensor
    interval: torch.Tensor
    rhythm: torch.Tensor
    region: torch.Tensor

    def __len__(self) -> int:
        return self.pitch.shape[0]


class WindowArrays:
    """Column-stacked view of a window list for fast batching."""

    def __init__(self, windows: Sequence[TernaryWindow]):
        if not windows:
            raise ValueError("empty dataset")
        self.windows = list(windows)
        self.pitch = np.array([w.pitch_ids for w in windows], dtype=np.int64)
        self.interval = np.array([w.interval_ids for w in windows], dtype=np.int64)
        self.rhythm = np.array([w.rhythm_ids for w in windows], dtype=np.int64)
        self.region = np.array([w.region for w in windows], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.region)

    def batch(self, idx=None) -> Batch:
        idx = slice(None) if idx is None else idx
        return Batch(*(torch.from_numpy(a[idx]) for a in (self.pitch, self.interval, self.rhythm, self.region)))

    def batches(self, batch_size: int, order=None):
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start:start + batch_size])


def compute_parts(model: DisentangledVAE, batch: Batch, flags: L.ObjectiveFlags = L.ObjectiveFlags(),
                  reduction: str = "mean", noise=None, generator=None, freeze_adversary: bool = True) -> dict:
    """Every loss component for one batch; disabled components are not computed."""
    bundle, out = model(batch.pitch, batch.interval, batch.rhythm, noise, generator)
    parts = {
        "recon_pitch": L.sequence_ce(out.pitch_logits, batch.pitch, reduction),
        "recon_rhythm": L.sequence_ce(out.rhythm_logits, batch.rhythm, reduction),
        "recon_melody": L.melody_bce(out.melody_activations,
                                     model.melody_target(batch.pitch, batch.interval, batch.rhythm), reduction),
        "kl_total": L.kl_total(bundle, reduction),
    }
    if flags.adv_pr:
        parts["adv_pitch"] = L.cross_decoder_adversary(torch.sigmoid(model.decode_pitch(bundle.z_rhythm())), reduction)
        parts["adv_rhythm"] = L.cross_decoder_adversary(torch.sigmoid(model.decode_rhythm(bundle.z_pitch())), reduction)
    if flags.dis_zs:
        parts["style_ce"] = L.style_ce(model.classify_style(bundle.z_style()), batch.region)
    if flags.adv_zc:
        parts["adversary_entropy"] = L.adversary_entropy(
            model.classify_adversary(bundle.z_content(), frozen=freeze_adversary))
    return parts


def _seed_for(*key: int) -> int:
    return int(np.random.SeedSequence([abs(int(k)) for k in key]).generate_state(1)[0])


class Trainer:
    def __init__(self, model: DisentangledVAE, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.flags = cfg.flags
        self.vae_opt = torch.optim.Adam(model.vae_parameters(), lr=cfg.vae_lr)
        self.style_opt = torch.optim.SGD(model.style_parameters(), lr=cfg.classifier_lr)
        self.adv_opt = torch.optim.SGD(model.adversary_parameters(), lr=cfg.classifier_lr)
        self.step = 0

    def _generator(self, tag: int) -> torch.Generator:
        return torch.Generator().manual_seed(_seed_for(self.cfg.seed, self.step, tag))

    def adversary_step(self, batch: Batch) -> float:
        """Fit the content adversary to the true labels on latents treated as constants."""
        model = self.model
        with torch.no_grad():
            bundle = model.encode(model.embed_melody(batch.pitch, batch.interval, batch.rhythm),
                                  generator=self._generator(1))
            z_c = bundle.z_content()
        self.adv_opt.zero_grad(set_to_none=True)
        loss = L.style_ce(model.classify_adversary(z_c), batch.region)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.adversary_parameters(), self.cfg.grad_clip)
        self.adv_opt.step()
        return float(loss.detach())

    def vae_step(self, batch: Batch, beta: float) -> L.LossReport:
        """One update of encoder, decoders and style classifier; the adversary stays frozen."""
        model = self.model
        self.vae_opt.zero_grad(set_to_none=True)
        self.style_opt.zero_grad(set_to_none=True)
        parts = compute_parts(model, batch, self.flags, self.cfg.reduction, generator=self._generator(2))
        for name, value in parts.items():
            if not torch.isfinite(value):
                raise FloatingPointError(f"non-finite loss component {name} at step {self.step}")
        total, report = L.total_loss(parts, beta, self.flags, self.cfg.recon_weights)
        total.backward()
        torch.nn.utils.clip_grad_norm_(model.vae_parameters(), self.cfg.grad_clip)
        torch.nn.utils.clip_grad_norm_(model.style_parameters(), self.cfg.grad_clip)
        self.vae_opt.step()
        self.style_opt.step()
        return report

    def train_batch(self, batch: Batch, beta: float) -> tuple[L.LossReport, float]:
        adv = float("nan")
        for _ in range(self.cfg.adversary_steps):
            adv = self.adversary_step(batch)
        report = self.vae_step(batch, beta)
        self.step += 1
        return report, adv

    def optimizer_state(self) -> dict:
        return {"vae": self.vae_opt.state_dict(), "style": self.style_opt.state_dict(),
                "adversary": self.adv_opt.state_dict()}

    def load_optimizer_state(self, state: dict) -> None:
        self.vae_opt.load_state_dict(state["vae"])
        self.style_opt.load_state_dict(state["style"])
        self.adv_opt.load_state_dict(state["adversary"])


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]
    train_windows: list[TernaryWindow]
    val_windows: list[TernaryWindow]
    history: list[dict] = field(default_factory=list)


def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, allow_nan=True)


def train(windows: Sequence[TernaryWindow], vocab: Vocabulary, model_cfg: ModelConfig | None, cfg: TrainConfig,
          out_dir: str | Path | None = None, resume: str | Path | Checkpoint | None = None,
          max_steps: int | None = None, validate: bool = True, extra: dict | None = None) -> TrainResult:
    """Train a model from scratch or resume it from a checkpoint.

    Windows are split by song into train/validation parts. With ``out_dir`` the
    metrics log, ``last.ckpt`` and ``best.ckpt`` are written there. ``max_steps``
    stops early (after that many global steps), which is how interrupted runs are
    simulated.
    """
    from .evaluator import reconstruction_scores

    if not windows:
        raise ValueError("empty dataset")
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        model = ckpt.model
        start_step = ckpt.step
        state = ckpt.extra.get("trainer", {})
        if extra is None:
            extra = {k: v for k, v in ckpt.extra.items() if k not in ("trainer", "train_config", "val_songs")}
    else:
        if model_cfg is None:
            raise ValueError("model_cfg is required when not resuming")
        model = DisentangledVAE(model_cfg)
        ckpt, start_step, state = None, 0, {}
    if tuple(model.cfg.vocab_sizes) != vocab.sizes or model.cfg.n_regions != vocab.n_regions:
        raise ValueError(f"model dims {model.cfg.vocab_sizes}/{model.cfg.n_regions} do not match "
                         f"vocabulary {vocab.sizes}/{vocab.n_regions}")
    seq_len = len(windows[0].pitch_ids)
    if seq_len != model.cfg.seq_len:
        raise ValueError(f"windows have length {seq_len}, model expects {model.cfg.seq_len}")

    train_w, val_w = split_by_song(windows, cfg.val_fraction, cfg.seed)
    data = WindowArrays(train_w)
    val = WindowArrays(val_w) if (val_w and validate) else None
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    trainer = Trainer(model, cfg)
    trainer.step = start_step
    if ckpt is not None and ckpt.optimizer_state:
        trainer.load_optimizer_state(ckpt.optimizer_state)
    best_val = state.get("best_val", -1.0)
    last_val = state.get("last_val")
    epoch_totals = state.get("epoch_totals", [])

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "metrics.jsonl", "a" if resume is not None else "w", encoding="utf-8")

    def make_ckpt():
        info = {"trainer": {"best_val": best_val, "last_val": last_val, "epoch_totals": epoch_totals},
                "train_config": cfg.to_dict(),
                "val_songs": sorted({w.source_song for w in val_w}), **(extra or {})}
        return Checkpoint(model, vocab, trainer.step, trainer.optimizer_state(), info)

    metrics: list[dict] = []
    history: list[dict] = []

    def emit(rec):
        metrics.append(rec)
        if log_fh is not None:
            log_fh.write(_json_line(rec) + "\n")
            log_fh.flush()

    try:
        model.train()
        while trainer.step < total_steps:
            if max_steps is not None and trainer.step >= max_steps:
                break
            epoch, offset = divmod(trainer.step, steps_per_epoch)
            order = np.random.default_rng(_seed_for(cfg.seed, epoch, 7)).permutation(len(data))
            batches = list(data.batches(cfg.batch_size, order))
            for b in batches[offset:]:
                if max_steps is not None and trainer.step >= max_steps:
                    break
                beta = beta_schedule(trainer.step, total_steps, cfg)
                report, adv_loss = trainer.train_batch(b, beta)
                epoch_totals.append(report.total)
                emit({"kind": "step", "step": trainer.step, "epoch": epoch + 1, **report.to_dict(),
                      "adversary_loss": adv_loss, "val_accuracy": last_val})
            if trainer.step % steps_per_epoch == 0 and trainer.step > 0:
                mean_total = float(np.mean(epoch_totals)) if epoch_totals else float("nan")
                epoch_totals = []
                rec = {"kind": "epoch", "epoch": epoch + 1, "step": trainer.step, "mean_total": mean_total}
                if val is not None:
                    model.eval()
                    scores = reconstruction_scores(model, val)
                    model.train()
                    last_val = scores["pooled"]
                    rec.update(val_accuracy=scores["pooled"], val_pitch=scores["pitch"], val_rhythm=scores["rhythm"])
                emit(rec)
                history.append(rec)
                log.info("epoch %d: mean total %.4f val %s", epoch + 1, mean_total, last_val)
                if out is not None and val is not None and last_val > best_val:
                    best_val = last_val
                    save_checkpoint(make_ckpt(), out / "best.ckpt")
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    final = make_ckpt()
    if out is not None:
        save_checkpoint(final, out / "last.ckpt")
    return TrainResult(final, metrics, train_w, val_w, history)
