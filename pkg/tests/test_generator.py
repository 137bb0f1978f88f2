from fractions import Fraction
from pathlib import Path

import mido
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from folkvae.corpus import NONE, PAD, REST, NoteEvent, TernaryWindow, Vocabulary, derive_intervals, parse_midi
from folkvae.generator import StyleBank, build_style_bank, generate, render_midi
from folkvae.evaluator import latent_means
from folkvae.model import DisentangledVAE, ModelConfig

DATA = Path(__file__).parent / "data"

VOCAB = Vocabulary(
    [48, 50, 55, 60, 62, 64, 67, 69, 72, 76, REST],
    [-12, -5, -2, 2, 3, 5, 7, NONE, PAD],
    [Fraction(1, 16), Fraction(1, 8), Fraction(1, 4), Fraction(3, 8), Fraction(1, 2), Fraction(1), Fraction(3, 2),
     Fraction(2)],
    ["east", "north", "west"],
)

GOLDEN_PITCH = [3, 4, 5, 6, 10, 6, 5, 4, 3, 0, 1, 2, 10, 10, 8, 9] * 2
GOLDEN_RHYTHM = [2, 2, 4, 5, 2, 1, 0, 3, 6, 7, 2, 2, 4, 1, 5, 2] * 2


def _window(pitch_ids, rhythm_ids, region=0):
    ivs = derive_intervals([VOCAB.pitch_tokens[i] for i in pitch_ids])
    return TernaryWindow(list(pitch_ids), [VOCAB.interval_id_or_none(v) for v in ivs], list(rhythm_ids), region)


@pytest.fixture(scope="module")
def model():
    cfg = ModelConfig(VOCAB.sizes, VOCAB.n_regions, hidden_size=16, style_dim=4, content_dim=6, embed_dim=8)
    return DisentangledVAE(cfg).eval()


def _windows(n, seed):
    rng = np.random.default_rng(seed)
    return [_window(rng.integers(0, 11, 32), rng.integers(0, 8, 32), region=k % 3) for k in range(n)]


# ---------------------------------------------------------------- rendering

@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 10), min_size=32, max_size=32), st.lists(st.integers(0, 7), min_size=32, max_size=32))
def test_render_parse_round_trip(tmp_path_factory, pitch_ids, rhythm_ids):
    path = render_midi(_window(pitch_ids, rhythm_ids), VOCAB, tmp_path_factory.mktemp("rt") / "w.mid")
    events = parse_midi(path)
    # adjacent rests merge on parse, so compare event streams with merged rests on both sides
    expected = []
    for p, r in zip(pitch_ids, rhythm_ids):
        tok, dur = VOCAB.pitch_tokens[p], VOCAB.rhythm_tokens[r]
        if tok == REST and expected and expected[-1].pitch == REST:
            expected[-1] = NoteEvent(REST, expected[-1].duration + dur)
        else:
            expected.append(NoteEvent(tok, dur))
    assert events == expected


def test_rest_free_round_trip_is_token_exact(tmp_path):
    rng = np.random.default_rng(0)
    for k in range(100):
        p, r = rng.integers(0, 10, 32), rng.integers(0, 8, 32)
        events = parse_midi(render_midi(_window(p, r), VOCAB, tmp_path / f"{k}.mid"))
        assert [VOCAB.pitch_id(e.pitch) for e in events] == list(p)
        assert [VOCAB.rhythm_id(e.duration) for e in events] == list(r)


def test_all_rest_window_has_no_notes(tmp_path):
    path = render_midi(_window([10] * 32, [2] * 32), VOCAB, tmp_path / "rest.mid")
    mid = mido.MidiFile(str(path))
    assert not [m for m in mid.tracks[0] if m.type == "note_on"]


def test_golden_file_byte_stable(tmp_path):
    path = render_midi(_window(GOLDEN_PITCH, GOLDEN_RHYTHM), VOCAB, tmp_path / "g.mid")
    assert path.read_bytes() == (DATA / "golden_window.mid").read_bytes()


# ---------------------------------------------------------------- style bank

def test_bank_single_window_equals_its_mean(model):
    wins = _windows(3, 0)
    bank = build_style_bank(model, wins, VOCAB)
    style = latent_means(model, wins)["style"]
    for k, region in enumerate(VOCAB.region_labels):
        np.testing.assert_allclose(bank.centroid(region), style[k], rtol=0, atol=1e-12)
    assert bank.counts == [1, 1, 1]


def test_bank_symmetric_means_cancel(model, monkeypatch):
    import folkvae.generator as G

    v = np.arange(8, dtype=np.float32)
    monkeypatch.setattr(G, "latent_means", lambda m, w: {"style": np.stack([v, -v, v * 0, v * 0])})
    bank = build_style_bank(model, [_window([0] * 32, [0] * 32, r) for r in (0, 0, 1, 2)], VOCAB)
    assert np.array_equal(bank.centroid("east"), np.zeros(8))


def test_bank_missing_region(model):
    with pytest.raises(ValueError, match="west"):
        build_style_bank(model, _windows(2, 0), VOCAB)


def test_bank_json_round_trip(model, tmp_path):
    bank = build_style_bank(model, _windows(9, 1), VOCAB)
    bank.save(tmp_path / "b.json")
    back = StyleBank.load(tmp_path / "b.json")
    assert back.regions == bank.regions and back.counts == bank.counts
    assert np.array_equal(back.centroids, bank.centroids)
    assert bank.centroids.shape == (3, 2 * model.cfg.style_dim)


# ---------------------------------------------------------------- generation

@pytest.fixture(scope="module")
def bank(model):
    return build_style_bank(model, _windows(9, 1), VOCAB)


def test_generate_deterministic(model, bank):
    a = generate(model, bank, VOCAB, "north", 4, temperature=1.0, seed=7)
    b = generate(model, bank, VOCAB, "north", 4, temperature=1.0, seed=7)
    c = generate(model, bank, VOCAB, "north", 4, temperature=1.0, seed=8)
    assert a == b and a != c
    for w in a:
        w.validate(VOCAB)
        assert w.region == VOCAB.region_id("north")


def test_generate_intervals_follow_pitches(model, bank):
    for w in generate(model, bank, VOCAB, "east", 5, temperature=1.5, seed=1):
        ivs = derive_intervals([VOCAB.pitch_tokens[i] for i in w.pitch_ids])
        assert w.interval_ids == [VOCAB.interval_id_or_none(v) for v in ivs]


def test_generate_uses_centroid_in_style_slots(model, bank):
    _, z = generate(model, bank, VOCAB, "west", 3, seed=2, return_latents=True)
    s, c = model.cfg.style_dim, model.cfg.content_dim
    cen = torch.as_tensor(bank.centroid("west"), dtype=z.dtype)
    assert torch.equal(z[:, :s], cen[:s].expand(3, -1))
    assert torch.equal(z[:, s + c:2 * s + c], cen[s:].expand(3, -1))


def test_low_temperature_is_argmax(model, bank):
    cold = generate(model, bank, VOCAB, "east", 3, temperature=1e-6, seed=3)
    _, z = generate(model, bank, VOCAB, "east", 3, temperature=1e-6, seed=3, return_latents=True)
    s, c = model.cfg.style_dim, model.cfg.content_dim
    argmax = model.decode_pitch(z[:, :s + c]).argmax(-1)
    assert [w.pitch_ids for w in cold] == argmax.tolist()


def test_generate_errors(model, bank):
    with pytest.raises(KeyError, match="korean"):
        generate(model, bank, VOCAB, "korean", 1)
    with pytest.raises(ValueError, match="temperature"):
        generate(model, bank, VOCAB, "east", 1, temperature=0.0)
