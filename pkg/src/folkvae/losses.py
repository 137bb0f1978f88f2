"""Training objectives as pure functions of model outputs and targets.

Every term is averaged over the batch. ``reduction="mean"`` additionally averages
over time steps / elements / latent dimensions, ``"sum"`` sums over them.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import torch

PROB_EPS = 1e-7
LOGVAR_CLAMP = 20.0

ABLATIONS = {
    # name: (cross-decoder terms, content-entropy term, style cross-entropy)
    "vae": (False, False, False),
    "vae+advpr": (True, False, False),
    "vae+advpr+advzc": (True, True, False),
    "vae+advpr+diszs": (True, False, True),
    "total": (True, True, True),
}


@dataclass(frozen=True)
class ObjectiveFlags:
    adv_pr: bool = True
    adv_zc: bool = True
    dis_zs: bool = True

    @classmethod
    def from_ablation(cls, name: str) -> "ObjectiveFlags":
        try:
            return cls(*ABLATIONS[name])
        except KeyError:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}") from None


def _check_reduction(reduction):
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")


def kl_gaussian(mean, logvar, reduction: str = "sum") -> torch.Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)) over the last axis, averaged over leading axes."""
    _check_reduction(reduction)
    mean, logvar = torch.as_tensor(mean), torch.as_tensor(logvar)
    if mean.shape != logvar.shape:
        raise ValueError(f"mean {tuple(mean.shape)} and logvar {tuple(logvar.shape)} differ")
    lv = logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
    per_dim = 0.5 * (mean.pow(2) + lv.exp() - lv - 1)
    per_vec = per_dim.sum(-1) if reduction == "sum" else per_dim.mean(-1)
    return per_vec.mean() if per_vec.dim() else per_vec


def kl_total(bundle, reduction: str = "sum") -> torch.Tensor:
    """KL of the four latent variables; with ``"mean"`` it is normalized by the total latent width."""
    _check_reduction(reduction)
    total = sum(kl_gaussian(bundle.mean[n], bundle.logvar[n], "sum") for n in bundle.mean)
    if reduction == "mean":
        total = total / sum(m.shape[-1] for m in bundle.mean.values())
    return total


def sequence_ce(logits, target_ids, reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy of per-step logits ``(..., T, V)`` against ids ``(..., T)``."""
    _check_reduction(reduction)
    logits, target_ids = torch.as_tensor(logits), torch.as_tensor(target_ids)
    if logits.shape[:-1] != target_ids.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match targets {tuple(target_ids.shape)}")
    v = logits.shape[-1]
    if target_ids.numel() and (int(target_ids.min()) < 0 or int(target_ids.max()) >= v):
        raise ValueError(f"target id out of range [0, {v})")
    nll = -torch.log_softmax(logits, -1).gather(-1, target_ids.unsqueeze(-1)).squeeze(-1)
    if reduction == "mean":
        return nll.mean()
    return nll.sum(-1).mean() if nll.dim() > 1 else nll.sum()


def melody_bce(activations, multi_hot, reduction: str = "mean") -> torch.Tensor:
    """Binary cross-entropy on activations clamped to ``[1e-7, 1 - 1e-7]``."""
    _check_reduction(reduction)
    a, t = torch.as_tensor(activations), torch.as_tensor(multi_hot)
    if a.shape != t.shape:
        raise ValueError(f"activations {tuple(a.shape)} do not match targets {tuple(t.shape)}")
    a = a.clamp(PROB_EPS, 1 - PROB_EPS)
    el = -(t * torch.log(a) + (1 - t) * torch.log1p(-a))
    if reduction == "mean":
        return el.mean()
    # (batch, T, D) sums per sample; a single (T, D) sequence just sums
    return el.sum(dim=(-2, -1)).mean() if el.dim() > 2 else el.sum()


def cross_decoder_adversary(wrong_activations, reduction: str = "mean") -> torch.Tensor:
    """BCE of a wrong-latent decoder pass against the all-zero sequence."""
    a = torch.as_tensor(wrong_activations)
    return melody_bce(a, torch.zeros_like(a), reduction)


def style_ce(probs, labels) -> torch.Tensor:
    """Negative log-probability of the true region, averaged over the batch."""
    probs, labels = torch.as_tensor(probs), torch.as_tensor(labels)
    n = probs.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n):
        raise ValueError(f"label out of range [0, {n})")
    p = probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1) if probs.dim() > 1 else probs[labels]
    return -torch.log(p.clamp(PROB_EPS, 1.0)).mean()


def adversary_entropy(probs) -> torch.Tensor:
    """Shannon entropy in nats of region distributions, averaged over the batch."""
    probs = torch.as_tensor(probs)
    return -torch.xlogy(probs, probs).sum(-1).mean()


@dataclass
class LossReport:
    recon_pitch: float
    recon_rhythm: float
    recon_melody: float
    kl_total: float
    adv_pitch: float
    adv_rhythm: float
    style_ce: float
    adversary_entropy: float
    beta: float
    total: float

    def recompute_total(self, weights=(1.0, 1.0, 1.0)) -> float:
        wp, wr, wm = weights
        return (wp * self.recon_pitch + wr * self.recon_rhythm + wm * self.recon_melody
                + self.beta * self.kl_total + self.adv_pitch + self.adv_rhythm
                + self.style_ce - self.adversary_entropy)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in self.to_dict().values())


COMPONENTS = ("recon_pitch", "recon_rhythm", "recon_melody", "kl_total",
              "adv_pitch", "adv_rhythm", "style_ce", "adversary_entropy")


def total_loss(parts: dict, beta: float, flags: ObjectiveFlags = ObjectiveFlags(),
               weights=(1.0, 1.0, 1.0)) -> tuple[torch.Tensor, LossReport]:
    """Assemble the full objective.

    ``parts`` maps component names to scalars (tensors or floats); ablated or
    missing components contribute exactly zero and are reported as 0.
    """
    zero = torch.zeros((), dtype=torch.get_default_dtype())

    def get(name, enabled=True):
        if not enabled or name not in parts:
            return zero
        v = parts[name]
        return v if torch.is_tensor(v) else torch.tensor(float(v), dtype=torch.float64)

    used = {
        "recon_pitch": get("recon_pitch"),
        "recon_rhythm": get("recon_rhythm"),
        "recon_melody": get("recon_melody"),
        "kl_total": get("kl_total"),
        "adv_pitch": get("adv_pitch", flags.adv_pr),
        "adv_rhythm": get("adv_rhythm", flags.adv_pr),
        "style_ce": get("style_ce", flags.dis_zs),
        "adversary_entropy": get("adversary_entropy", flags.adv_zc),
    }
    wp, wr, wm = weights
    total = (wp * used["recon_pitch"] + wr * used["recon_rhythm"] + wm * used["recon_melody"]
             + beta * used["kl_total"] + used["adv_pitch"] + used["adv_rhythm"]
             + used["style_ce"] - used["adversary_entropy"])
    values = {k: float(v.detach()) for k, v in used.items()}
    report = LossReport(**values, beta=float(beta), total=0.0)
    # reassemble in float64 from the reported values so the identity is exact
    report.total = report.recompute_total(weights)
    return total, report
