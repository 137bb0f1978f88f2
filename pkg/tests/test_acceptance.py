"""Acceptance gate: one group of tests per numbered criterion, plus the acceptance-run checks.

The synthetic study (3 seeds x full objective and reconstruction-only objective) is trained
once per session and shared by criteria 5-7; criterion 8 trains the full objective on a
low-entropy variant of the corpus. Expect over an hour on one CPU core.
"""

import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from folkvae import losses as L
from folkvae.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from folkvae.cli import dispatch
from folkvae.corpus import (NONE, PAD, REST, NoteEvent, Song, TernaryWindow, Vocabulary, build_vocabulary,
                            default_styles, derive_intervals, make_windows, parse_midi, songs_to_windows,
                            synthesize_corpus)
from folkvae.experiments import SyntheticSetup, SyntheticStudy
from folkvae.generator import build_style_bank, generate, render_midi
from folkvae.model import DisentangledVAE, ModelConfig, snapshot
from folkvae.trainer import Trainer, TrainConfig, WindowArrays, beta_schedule, compute_parts, train

from oracles import finite_difference_check, tiny_setup

SEEDS = (0, 1, 2)
C = pytest.mark.criterion


def _mean(xs):
    return float(np.mean(list(xs)))


# ---------------------------------------------------------------- 1 gradient check

@C("1 gradient check")
def test_gradient_check_tiny(record_property):
    t0 = time.time()
    model, batch, noise = tiny_setup(seed=0, batch=3)

    def loss():
        parts = compute_parts(model, batch, noise=noise, freeze_adversary=False)
        return L.total_loss(parts, 0.15)[0]

    err = finite_difference_check(loss, list(model.parameters()))
    frac = float(np.mean(err < 1e-4))
    seconds = time.time() - t0
    record_property("within_1e-4", f"{frac:.4f} of {err.size}")
    record_property("seconds", f"{seconds:.1f}")
    assert frac >= 0.99
    assert seconds < 120


# ---------------------------------------------------------------- 2 loss identities

@C("2 loss identities")
def test_loss_identities():
    ln6, ln2 = math.log(6), math.log(2)
    assert L.kl_gaussian(torch.zeros(7), torch.zeros(7)).item() == 0.0
    assert abs(L.sequence_ce(torch.zeros(4, 6, dtype=torch.float64), torch.arange(4)).item() - ln6) < 1e-9
    assert abs(L.adversary_entropy(torch.full((6,), 1 / 6, dtype=torch.float64)).item() - ln6) < 1e-9
    half = torch.full((3, 32, 5), 0.5, dtype=torch.float64)
    assert abs(L.cross_decoder_adversary(half).item() - ln2) < 1e-9
    rng = np.random.default_rng(0)
    for _ in range(100):
        parts = dict(zip(L.COMPONENTS, rng.uniform(0, 5, len(L.COMPONENTS))))
        beta = float(rng.uniform(0, 0.15))
        _, r = L.total_loss(parts, beta)
        direct = (parts["recon_pitch"] + parts["recon_rhythm"] + parts["recon_melody"] + beta * parts["kl_total"]
                  + parts["adv_pitch"] + parts["adv_rhythm"] + parts["style_ce"] - parts["adversary_entropy"])
        assert abs(r.total - direct) < 1e-12


# ---------------------------------------------------------------- 3 isolation

@C("3 two-step isolation")
def test_two_step_isolation_bitwise():
    songs = synthesize_corpus(default_styles(8), 3, 40, rng_seed=0)
    vocab = build_vocabulary(songs)
    windows = songs_to_windows(songs, vocab)
    model = DisentangledVAE(ModelConfig(vocab.sizes, vocab.n_regions, hidden_size=16, style_dim=4, content_dim=6,
                                        embed_dim=8))
    trainer = Trainer(model, TrainConfig())
    adv = {k for k, p in model.named_parameters() if any(p is q for q in model.adversary_parameters())}
    batch = WindowArrays(windows[:25]).batch()
    s0 = snapshot(model)
    trainer.adversary_step(batch)
    s1 = snapshot(model)
    trainer.vae_step(batch, 0.1)
    s2 = snapshot(model)
    assert all(np.array_equal(s0[k], s1[k]) for k in s0 if k not in adv)
    assert any(not np.array_equal(s0[k], s1[k]) for k in adv)
    assert all(np.array_equal(s1[k], s2[k]) for k in adv)


# ---------------------------------------------------------------- 4 beta

@C("4 beta schedule")
def test_beta_schedule():
    cfg = TrainConfig()
    assert beta_schedule(0, 2000, cfg) == 0.0
    assert beta_schedule(2000, 2000, cfg) == 0.15
    assert abs(beta_schedule(1000, 2000, cfg) - 0.075) < 1e-12


# ---------------------------------------------------------------- synthetic study (5-8)

class _Runs:
    def __init__(self, setup):
        self.study = SyntheticStudy(setup)
        self._cache = {}

    def get(self, ablation, seed):
        key = (ablation, seed)
        if key not in self._cache:
            self._cache[key] = self.study.run(ablation, seed)
            r = self._cache[key]
            print(f"[{ablation} seed {seed}] recon={r.reconstruction} style={r.style_recognition} "
                  f"probes={r.probes} cross={r.cross_decoder} {r.seconds:.0f}s")
        return self._cache[key]

    def all(self, ablation):
        return [self.get(ablation, s) for s in SEEDS]


@pytest.fixture(scope="session")
def runs():
    # free random walk: the planted-style ablation corpus
    return _Runs(SyntheticSetup())


@pytest.fixture(scope="session")
def low_entropy_runs():
    # each song repeats a four-note phrase
    return _Runs(SyntheticSetup(phrase_length=4))


@C("5a full objective recognition >= chance + 0.35")
@pytest.mark.slow
def test_ablation_full_objective(runs, record_property):
    per_seed = [r.style_recognition["total-style"] for r in runs.all("total")]
    acc = _mean(per_seed)
    record_property("accuracy", f"{acc:.4f}")
    record_property("per_seed", " ".join(f"{a:.3f}" for a in per_seed))
    assert acc >= runs.study.chance + 0.35


@C("5b reconstruction-only recognition within chance +- 0.10")
@pytest.mark.slow
def test_ablation_vae_only(runs, record_property):
    per_seed = [r.style_recognition["total-style"] for r in runs.all("vae")]
    acc = _mean(per_seed)
    record_property("accuracy", f"{acc:.4f}")
    record_property("per_seed", " ".join(f"{a:.3f}" for a in per_seed))
    assert abs(acc - runs.study.chance) <= 0.10


@C("5c full objective exceeds reconstruction-only by >= 0.25")
@pytest.mark.slow
def test_ablation_gap(runs, record_property):
    full = _mean(r.style_recognition["total-style"] for r in runs.all("total"))
    vae = _mean(r.style_recognition["total-style"] for r in runs.all("vae"))
    record_property("gap", f"{full - vae:.4f}")
    assert full - vae >= 0.25


@C("5 run budget < 30 min per run")
@pytest.mark.slow
def test_run_budget(runs, record_property):
    record_property("max_seconds", f"{max(r.seconds for r in runs.all('total') + runs.all('vae')):.0f}")
    assert max(r.seconds for r in runs.all("total") + runs.all("vae")) < 1800
    assert 10_000 <= len(runs.study.train_windows) + len(runs.study.test_windows) < 100_000


@C("6a style probe >= 0.8")
@pytest.mark.slow
def test_style_probe(runs, record_property):
    acc = _mean(r.probes["style"] for r in runs.all("total"))
    record_property("accuracy", f"{acc:.4f}")
    assert acc >= 0.8


@C("6b content probe <= chance + 0.15")
@pytest.mark.slow
def test_content_probe(runs, record_property):
    acc = _mean(r.probes["content"] for r in runs.all("total"))
    record_property("accuracy", f"{acc:.4f}")
    assert acc <= runs.study.chance + 0.15


@C("7 cross-decoder suppression")
@pytest.mark.slow
def test_cross_decoder_direction(runs, record_property):
    for seed in SEEDS:
        on, off = runs.get("total", seed).cross_decoder, runs.get("vae", seed).cross_decoder
        record_property(f"seed{seed}", f"on {on['pitch_from_rhythm']:.2e} off {off['pitch_from_rhythm']:.3f}")
        assert on["pitch_from_rhythm"] < 0.1
        assert off["pitch_from_rhythm"] > 0.2


@C("8 held-out reconstruction >= 0.85")
@pytest.mark.slow
def test_heldout_reconstruction(low_entropy_runs, record_property):
    acc = _mean(r.reconstruction["pooled"] for r in low_entropy_runs.all("total"))
    record_property("accuracy", f"{acc:.4f}")
    assert acc >= 0.85


@C("acceptance runs: every logged loss component finite")
@pytest.mark.slow
def test_acceptance_runs_finite(runs, low_entropy_runs):
    for r in runs.all("total") + runs.all("vae") + low_entropy_runs.all("total"):
        steps = [m for m in r.metrics if m["kind"] == "step"]
        assert steps and all(math.isfinite(m[k]) for m in steps for k in L.COMPONENTS + ("total",))


@C("acceptance runs: generated samples stay in the style's pitch set")
@pytest.mark.slow
def test_generation_uses_style_pitch_set(runs, record_property):
    study = runs.study
    trained = runs.get("total", 0).model
    bank = build_style_bank(trained, study.train_windows, study.vocab)
    for spec in default_styles(study.setup.phrase_length):
        samples = generate(trained, bank, study.vocab, spec.name, 100, temperature=1.0, seed=0)
        allowed = set(spec.pitch_set) | {REST}
        inside = [all(study.vocab.pitch_tokens[i] in allowed for i in w.pitch_ids) for w in samples]
        record_property(spec.name, f"{np.mean(inside):.2f}")
        assert np.mean(inside) >= 0.7


# ---------------------------------------------------------------- 9 pipeline properties

@C("9 pipeline properties")
def test_window_count_law_1000_lengths():
    rng = np.random.default_rng(0)
    for n in rng.integers(1, 200, 1000):
        song = Song.from_events("s", "a", [NoteEvent(60 + (k % 3), Fraction(1)) for k in range(int(n))])
        assert len(make_windows(song, build_vocabulary([song]))) == max(0, int(n) - 31)


@C("9 pipeline properties")
@settings(max_examples=1000, deadline=None, derandomize=True)
@given(st.lists(st.integers(0, 127), min_size=1, max_size=64))
def test_interval_round_trip_1000(pitches):
    iv = derive_intervals(pitches)
    assert iv[-1] == PAD
    rebuilt = [pitches[0]]
    for d in iv[:-1]:
        rebuilt.append(rebuilt[-1] + d)
    assert rebuilt == pitches


@C("9 pipeline properties")
def test_midi_round_trip_100_windows(tmp_path):
    vocab = Vocabulary([55, 57, 60, 62, 64, 67, 69, 72, REST], [-3, -2, 2, 3, NONE, PAD],
                       [Fraction(1, 8), Fraction(1, 4), Fraction(1, 2), Fraction(1), Fraction(3, 2)], ["a", "b"])
    rng = np.random.default_rng(1)
    for k in range(100):
        # no two adjacent rests: a merged rest has no single-token inverse
        pitch = [int(rng.integers(0, 9))]
        for _ in range(31):
            nxt = int(rng.integers(0, 9))
            while pitch[-1] == 8 and nxt == 8:
                nxt = int(rng.integers(0, 9))
            pitch.append(nxt)
        rhythm = [int(x) for x in rng.integers(0, 5, 32)]
        ivs = derive_intervals([vocab.pitch_tokens[i] for i in pitch])
        w = TernaryWindow(pitch, [vocab.interval_id_or_none(v) for v in ivs], rhythm, 0)
        events = parse_midi(render_midi(w, vocab, tmp_path / f"{k}.mid"))
        assert [(vocab.pitch_id(e.pitch), vocab.rhythm_id(e.duration)) for e in events] == list(zip(pitch, rhythm))


@C("9 pipeline properties")
def test_checkpoint_round_trip(tmp_path):
    songs = synthesize_corpus(default_styles(8), 2, 40, rng_seed=1)
    vocab = build_vocabulary(songs)
    model = DisentangledVAE(ModelConfig(vocab.sizes, vocab.n_regions, hidden_size=16, style_dim=4, content_dim=6))
    save_checkpoint(Checkpoint(model, vocab, 3), tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    for (k, v), (k2, v2) in zip(model.state_dict().items(), back.model.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


@C("9 pipeline properties")
def test_end_to_end_determinism(tmp_path):
    songs = synthesize_corpus(default_styles(8), 4, 40, rng_seed=2)
    vocab = build_vocabulary(songs)
    windows = songs_to_windows(songs, vocab)
    mcfg = ModelConfig(vocab.sizes, vocab.n_regions, hidden_size=12, style_dim=3, content_dim=5, embed_dim=6)
    for name in ("a", "b"):
        train(windows, vocab, mcfg, TrainConfig(epochs=2, batch_size=16, seed=4), out_dir=tmp_path / name)
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


# ---------------------------------------------------------------- 10 smoke pipeline

@C("10 smoke pipeline < 5 min")
def test_smoke_pipeline(tmp_path, record_property):
    data, vocab = tmp_path / "d.jsonl", tmp_path / "d.vocab.json"
    ck = str(tmp_path / "run" / "last.ckpt")
    steps = [
        ["synth", "--out", str(data), "--songs-per-style", "20"],
        ["train", "--data", str(data), "--vocab", str(vocab), "--out", str(tmp_path / "run"), "--epochs", "1",
         "--hidden-size", "16", "--style-dim", "4", "--content-dim", "8", "--embed-dim", "8"],
        ["bank", "--ckpt", ck, "--data", str(data), "--out", str(tmp_path / "bank.json")],
        ["generate", "--ckpt", ck, "--bank", str(tmp_path / "bank.json"), "--region", "low",
         "--out", str(tmp_path / "gen")],
        ["train-recognizer", "--data", str(data), "--vocab", str(vocab), "--out", str(tmp_path / "rec.pt"),
         "--epochs", "1"],
        ["eval", "--ckpt", ck, "--data", str(data), "--recognizer", str(tmp_path / "rec.pt"),
         "--report", str(tmp_path / "report.json")],
        ["export-latents", "--ckpt", ck, "--out", str(tmp_path / "lat.csv")],
        ["plot", "--latents", str(tmp_path / "lat.csv"), "--out", str(tmp_path / "plots")],
    ]
    t0 = time.time()
    for step in steps:
        assert dispatch(step) == 0, step[0]
    seconds = time.time() - t0
    record_property("seconds", f"{seconds:.1f}")
    assert seconds < 300
    assert len(list((tmp_path / "gen").glob("*.mid"))) == 5
    assert json.loads((tmp_path / "report.json").read_text())["style_recognition"]
