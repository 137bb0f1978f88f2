"""Recurrent VAE whose latent code is split into pitch/rhythm x style/content parts."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ZERO = "zero"

LATENT_NAMES = ("pitch_style", "pitch_content", "rhythm_style", "rhythm_content")


@dataclass
class ModelConfig:
    vocab_sizes: tuple[int, int, int]
    n_regions: int
    hidden_size: int = 128
    style_dim: int = 32
    content_dim: int = 96
    encoder_layers: int = 2
    decoder_layers: int = 2
    embed_dim: int = 64
    one_hot: bool = False
    autoregressive: bool = False
    seq_len: int = 32
    init_seed: int = 0

    def __post_init__(self):
        self.vocab_sizes = tuple(int(v) for v in self.vocab_sizes)
        dims = (self.hidden_size, self.style_dim, self.content_dim, self.encoder_layers,
                self.decoder_layers, self.embed_dim, self.seq_len, self.n_regions, *self.vocab_sizes)
        if len(self.vocab_sizes) != 3 or min(dims) <= 0:
            raise ValueError(f"invalid model config {self}")

    @property
    def stream_dim(self) -> int:
        """Width of one stream latent (style + content)."""
        return self.style_dim + self.content_dim

    @property
    def latent_dim(self) -> int:
        return 2 * self.stream_dim

    @property
    def melody_dim(self) -> int:
        return sum(self.vocab_sizes)

    def latent_dims(self) -> dict[str, int]:
        return {"pitch_style": self.style_dim, "pitch_content": self.content_dim,
                "rhythm_style": self.style_dim, "rhythm_content": self.content_dim}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab_sizes"] = list(self.vocab_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LatentBundle:
    """Means, log-variances and samples of the four latent variables, each ``(batch, dim)``."""

    mean: dict[str, torch.Tensor]
    logvar: dict[str, torch.Tensor]
    sample: dict[str, torch.Tensor]
    noise: dict[str, torch.Tensor] = field(default_factory=dict)

    def _cat(self, names, which: str) -> torch.Tensor:
        src = getattr(self, which)
        return torch.cat([src[n] for n in names], dim=-1)

    # concatenation layouts shared by training, generation and evaluation
    def z_pitch(self, which="sample"):
        return self._cat(("pitch_style", "pitch_content"), which)

    def z_rhythm(self, which="sample"):
        return self._cat(("rhythm_style", "rhythm_content"), which)

    def z_style(self, which="sample"):
        return self._cat(("pitch_style", "rhythm_style"), which)

    def z_content(self, which="sample"):
        return self._cat(("pitch_content", "rhythm_content"), which)

    def z_all(self, which="sample"):
        return self._cat(LATENT_NAMES, which)


@dataclass
class DecoderOutput:
    pitch_logits: torch.Tensor
    rhythm_logits: torch.Tensor
    melody_activations: torch.Tensor


def split_latent(z: torch.Tensor, cfg: ModelConfig) -> dict[str, torch.Tensor]:
    """Inverse of :meth:`LatentBundle.z_all`."""
    parts = torch.split(z, [cfg.latent_dims()[n] for n in LATENT_NAMES], dim=-1)
    return dict(zip(LATENT_NAMES, parts))


def join_latent(parts: dict[str, torch.Tensor]) -> torch.Tensor:
    return torch.cat([parts[n] for n in LATENT_NAMES], dim=-1)


class MelodyEmbedding(nn.Module):
    """Per-step concatenation of pitch, interval and rhythm encodings."""

    def __init__(self, vocab_sizes, embed_dim: int, one_hot: bool = False):
        super().__init__()
        self.vocab_sizes = tuple(vocab_sizes)
        self.one_hot = one_hot
        if one_hot:
            self.tables = None
            self.out_dim = sum(self.vocab_sizes)
        else:
            self.tables = nn.ModuleList(nn.Embedding(v, embed_dim) for v in self.vocab_sizes)
            self.out_dim = 3 * embed_dim

    def forward(self, pitch, interval, rhythm) -> torch.Tensor:
        streams = (pitch, interval, rhythm)
        for name, ids, size in zip(("pitch", "interval", "rhythm"), streams, self.vocab_sizes):
            if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= size):
                raise IndexError(f"{name} id out of range [0, {size})")
        if self.one_hot:
            dtype = torch.get_default_dtype()
            return torch.cat([F.one_hot(ids, size).to(dtype) for ids, size in zip(streams, self.vocab_sizes)], -1)
        return torch.cat([table(ids) for table, ids in zip(self.tables, streams)], -1)


class ResidualBiGRU(nn.Module):
    """Stack of bidirectional GRU blocks, each wrapped in an additive skip connection."""

    def __init__(self, in_dim: int, hidden: int, layers: int):
        super().__init__()
        self.hidden = hidden
        self.proj = nn.Linear(in_dim, 2 * hidden)
        self.blocks = nn.ModuleList(
            nn.GRU(2 * hidden, hidden, batch_first=True, bidirectional=True) for _ in range(layers))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.proj(x)
        for gru in self.blocks:
            y, _ = gru(h)
            h = h + y
        return h

    def summary(self, h: torch.Tensor) -> torch.Tensor:
        """Last forward-direction state joined with the last backward-direction state."""
        return torch.cat([h[:, -1, :self.hidden], h[:, 0, self.hidden:]], dim=-1)


class SequenceDecoder(nn.Module):
    """GRU decoder conditioned on a latent vector through its initial state and every step input.

    Non-autoregressive by default: step ``t`` sees only the latent and a one-hot
    step index. With ``autoregressive=True`` the previous token (teacher forced during
    training) is appended to the step input.
    """

    def __init__(self, latent_dim, hidden, out_dim, layers, seq_len, autoregressive=False):
        super().__init__()
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.layers = layers
        self.seq_len = seq_len
        self.out_dim = out_dim
        self.autoregressive = autoregressive
        in_dim = latent_dim + seq_len + (out_dim if autoregressive else 0)
        self.init = nn.Linear(latent_dim, layers * hidden)
        self.gru = nn.GRU(in_dim, hidden, layers, batch_first=True)
        self.out = nn.Linear(hidden, out_dim)

    def _check(self, z):
        if z.dim() != 2 or z.shape[-1] != self.latent_dim:
            raise ValueError(f"decoder expects latent of shape (batch, {self.latent_dim}), got {tuple(z.shape)}")

    def _h0(self, z):
        b = z.shape[0]
        return torch.tanh(self.init(z)).view(b, self.layers, self.hidden).transpose(0, 1).contiguous()

    def _steps(self, z):
        b = z.shape[0]
        pos = torch.eye(self.seq_len, dtype=z.dtype, device=z.device).expand(b, -1, -1)
        return torch.cat([z.unsqueeze(1).expand(-1, self.seq_len, -1), pos], dim=-1)

    def forward(self, z: torch.Tensor, targets: torch.Tensor | None = None) -> torch.Tensor:
        """Logits ``(batch, seq_len, out_dim)``.

        In autoregressive mode ``targets`` supplies teacher-forcing tokens; without
        them every previous-token slot is zero (used for wrong-latent passes).
        """
        self._check(z)
        x = self._steps(z)
        if self.autoregressive:
            prev = torch.zeros(z.shape[0], self.seq_len, self.out_dim, dtype=z.dtype, device=z.device)
            if targets is not None:
                prev[:, 1:] = F.one_hot(targets[:, :-1], self.out_dim).to(z.dtype)
            x = torch.cat([x, prev], dim=-1)
        y, _ = self.gru(x, self._h0(z))
        return self.out(y)

    @torch.no_grad()
    def sample(self, z: torch.Tensor, temperature: float | None = None,
               generator: torch.Generator | None = None) -> torch.Tensor:
        """Token ids ``(batch, seq_len)``; ``temperature=None`` means argmax."""
        self._check(z)
        if not self.autoregressive:
            return _pick(self.forward(z), temperature, generator)
        x = self._steps(z)
        h = self._h0(z)
        prev = torch.zeros(z.shape[0], 1, self.out_dim, dtype=z.dtype)
        ids = []
        for t in range(self.seq_len):
            y, h = self.gru(torch.cat([x[:, t:t + 1], prev], dim=-1), h)
            tok = _pick(self.out(y), temperature, generator)
            ids.append(tok)
            prev = F.one_hot(tok, self.out_dim).to(z.dtype)
        return torch.cat(ids, dim=1)


def _pick(logits, temperature, generator):
    if temperature is None:
        return logits.argmax(-1)
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    probs = torch.softmax(logits / temperature, dim=-1)
    flat = probs.reshape(-1, probs.shape[-1])
    return torch.multinomial(flat, 1, generator=generator).view(probs.shape[:-1])


class DisentangledVAE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.init_seed)
            self._build()

    def _build(self):
        cfg = self.cfg
        h = cfg.hidden_size
        self.embed = MelodyEmbedding(cfg.vocab_sizes, cfg.embed_dim, cfg.one_hot)
        self.encoder = ResidualBiGRU(self.embed.out_dim, h, cfg.encoder_layers)
        dims = cfg.latent_dims()
        self.mean_heads = nn.ModuleDict({n: nn.Linear(2 * h, dims[n]) for n in LATENT_NAMES})
        self.logvar_heads = nn.ModuleDict({n: nn.Linear(2 * h, dims[n]) for n in LATENT_NAMES})
        n_p, _, n_r = cfg.vocab_sizes
        ar = cfg.autoregressive
        self.pitch_decoder = SequenceDecoder(cfg.stream_dim, h, n_p, cfg.decoder_layers, cfg.seq_len, ar)
        self.rhythm_decoder = SequenceDecoder(cfg.stream_dim, h, n_r, cfg.decoder_layers, cfg.seq_len, ar)
        self.melody_decoder = SequenceDecoder(cfg.latent_dim, h, cfg.melody_dim, cfg.decoder_layers, cfg.seq_len)
        self.style_classifier = nn.Linear(2 * cfg.style_dim, cfg.n_regions)
        self.adversary = nn.Linear(2 * cfg.content_dim, cfg.n_regions)

    # -- parameter groups ---------------------------------------------------
    def vae_parameters(self):
        skip = {id(p) for p in self.classifier_parameters()}
        return [p for p in self.parameters() if id(p) not in skip]

    def style_parameters(self):
        return list(self.style_classifier.parameters())

    def adversary_parameters(self):
        return list(self.adversary.parameters())

    def classifier_parameters(self):
        return self.style_parameters() + self.adversary_parameters()

    # -- forward pieces -----------------------------------------------------
    def embed_melody(self, pitch, interval, rhythm) -> torch.Tensor:
        x = self.embed(pitch, interval, rhythm)
        if x.shape[1] != self.cfg.seq_len:
            raise ValueError(f"expected sequences of length {self.cfg.seq_len}, got {x.shape[1]}")
        return x

    def encode(self, inputs: torch.Tensor, noise=None, generator: torch.Generator | None = None) -> LatentBundle:
        """Posterior parameters and reparameterized samples.

        ``noise`` is :data:`ZERO` (samples equal means), a dict of per-latent draws,
        or None to draw fresh standard-normal noise from ``generator``.
        """
        h = self.encoder(inputs)
        bad = ~torch.isfinite(h)
        if bad.any():
            step = int(bad.any(dim=-1).any(dim=0).nonzero()[0])
            raise FloatingPointError(f"non-finite encoder activation at step {step}")
        s = self.encoder.summary(h)
        mean = {n: self.mean_heads[n](s) for n in LATENT_NAMES}
        logvar = {n: self.logvar_heads[n](s) for n in LATENT_NAMES}
        if isinstance(noise, str):
            if noise != ZERO:
                raise ValueError(f"unknown noise mode {noise!r}")
            eps = {n: torch.zeros_like(mean[n]) for n in LATENT_NAMES}
        elif noise is None:
            eps = {n: torch.randn(mean[n].shape, generator=generator, dtype=mean[n].dtype)
                   for n in LATENT_NAMES}
        else:
            eps = noise
        sample = {n: mean[n] + torch.exp(0.5 * logvar[n].clamp(-20, 20)) * eps[n] for n in LATENT_NAMES}
        return LatentBundle(mean, logvar, sample, eps)

    def decode_pitch(self, z_p, targets=None) -> torch.Tensor:
        return self.pitch_decoder(z_p, targets)

    def decode_rhythm(self, z_r, targets=None) -> torch.Tensor:
        return self.rhythm_decoder(z_r, targets)

    def decode_melody(self, z_all) -> torch.Tensor:
        return torch.sigmoid(self.melody_decoder(z_all))

    def classify_style(self, z_s) -> torch.Tensor:
        if z_s.shape[-1] != 2 * self.cfg.style_dim:
            raise ValueError(f"style classifier expects width {2 * self.cfg.style_dim}, got {z_s.shape[-1]}")
        return torch.softmax(self.style_classifier(z_s), dim=-1)

    def classify_adversary(self, z_c, frozen: bool = False) -> torch.Tensor:
        """Adversary probabilities; ``frozen`` stops gradients into the adversary's own weights."""
        if z_c.shape[-1] != 2 * self.cfg.content_dim:
            raise ValueError(f"adversary expects width {2 * self.cfg.content_dim}, got {z_c.shape[-1]}")
        if frozen:
            logits = F.linear(z_c, self.adversary.weight.detach(), self.adversary.bias.detach())
        else:
            logits = self.adversary(z_c)
        return torch.softmax(logits, dim=-1)

    def melody_target(self, pitch, interval, rhythm) -> torch.Tensor:
        """Multi-hot target with ones at the pitch, offset interval and offset rhythm positions."""
        n_p, n_i, n_r = self.cfg.vocab_sizes
        dtype = torch.get_default_dtype()
        return torch.cat([F.one_hot(pitch, n_p), F.one_hot(interval, n_i), F.one_hot(rhythm, n_r)], -1).to(dtype)

    def forward(self, pitch, interval, rhythm, noise=None, generator=None) -> tuple[LatentBundle, DecoderOutput]:
        bundle = self.encode(self.embed_melody(pitch, interval, rhythm), noise, generator)
        tf_p = pitch if self.cfg.autoregressive else None
        tf_r = rhythm if self.cfg.autoregressive else None
        out = DecoderOutput(self.decode_pitch(bundle.z_pitch(), tf_p),
                            self.decode_rhythm(bundle.z_rhythm(), tf_r),
                            self.decode_melody(bundle.z_all()))
        return bundle, out

    @torch.no_grad()
    def encode_means(self, pitch, interval, rhythm) -> LatentBundle:
        return self.encode(self.embed_melody(pitch, interval, rhythm), ZERO)


def parameter_checksum(params) -> float:
    """Sum of absolute values; used to assert parameters were left untouched."""
    return float(sum(p.detach().abs().sum().item() for p in params))


def snapshot(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}
