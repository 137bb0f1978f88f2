"""Command-line entry point: ``folkvae <subcommand> [flags]``.

Failures exit nonzero with one line on stderr: ``error: category=<cat> message=<text>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as C

EXIT_CODES = {"usage": 2, "data": 3, "io": 4, "numeric": 5, "internal": 1}

log = logging.getLogger("folkvae")


class UsageError(Exception):
    pass


def _opt(p, flag, section=None, key=None, help="", note=None, **kw):
    """Add a flag whose default lives in the layered config (shown in help, applied later)."""
    if section is not None:
        default = C.DEFAULTS[section][key]
        extra = f"; {note}" if note else ""
        help = f"{help} (default: {default}{extra})"
        kw.setdefault("dest", f"cfg:{section}:{key}")
        kw["default"] = argparse.SUPPRESS
    p.add_argument(flag, help=help, **kw)


def _bool_opt(p, flag, section, key, help):
    _opt(p, flag, section, key, help, action=argparse.BooleanOptionalAction)


REF = "reference setting"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="folkvae", description="Style-disentangled melody VAE toolkit.")
    parser.add_argument("--config", help="JSON config file; flags override it (default: none)")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("ingest", help="MIDI folder tree -> windowed dataset + vocabulary")
    p.add_argument("--midi-dir", required=True, help="root folder; first-level subfolders are region labels")
    p.add_argument("--out", required=True, help="output dataset (.jsonl)")
    p.add_argument("--vocab", required=True, help="output vocabulary (.json)")
    _opt(p, "--grid", "corpus", "grid", "quantization steps per quarter note", type=int)
    _opt(p, "--window", "corpus", "window", "window length in tokens", note=REF, type=int)
    _bool_opt(p, "--keep-highest", "corpus", "keep_highest", "resolve overlapping notes by keeping the highest")
    _bool_opt(p, "--transpose", "corpus", "transpose", "transpose every song so its tonic is C")

    p = sub.add_parser("synth", help="synthetic corpus with planted styles -> dataset + vocabulary")
    p.add_argument("--spec", help="style spec JSON (default: built-in three-style fixture)")
    p.add_argument("--out", required=True, help="output dataset (.jsonl)")
    p.add_argument("--vocab", help="output vocabulary (default: <out stem>.vocab.json)")
    _opt(p, "--seed", "corpus", "seed", "random seed", type=int)
    _opt(p, "--songs-per-style", "corpus", "songs_per_style", "songs drawn per style", type=int)
    _opt(p, "--song-length", "corpus", "song_length", "notes per song", type=int)
    _opt(p, "--phrase-length", "corpus", "phrase_length", "built-in styles: notes per repeated phrase (0: none)",
         type=int)
    _opt(p, "--window", "corpus", "window", "window length in tokens", note=REF, type=int)

    p = sub.add_parser("train", help="train the model")
    p.add_argument("--data", required=True, help="dataset (.jsonl)")
    p.add_argument("--vocab", required=True, help="vocabulary (.json)")
    p.add_argument("--out", required=True, help="output directory for checkpoints and metrics")
    p.add_argument("--resume", help="checkpoint to resume from (default: none)")
    _opt(p, "--ablation", "train", "ablation", "objective set", choices=["total", "vae", "vae+advpr",
                                                                         "vae+advpr+advzc", "vae+advpr+diszs"])
    _opt(p, "--seed", "train", "seed", "training seed", type=int)
    _opt(p, "--epochs", "train", "epochs", "training epochs", note=REF, type=int)
    _opt(p, "--batch-size", "train", "batch_size", "mini-batch size", note=REF, type=int)
    _opt(p, "--vae-lr", "train", "vae_lr", "Adam learning rate for encoder/decoders", note=REF, type=float)
    _opt(p, "--classifier-lr", "train", "classifier_lr", "SGD learning rate for both classifiers", note=REF,
         type=float)
    _opt(p, "--beta-start", "train", "beta_start", "KL weight at the first step", note=REF, type=float)
    _opt(p, "--beta-end", "train", "beta_end", "KL weight at the last step", note=REF, type=float)
    _opt(p, "--val-fraction", "train", "val_fraction", "fraction of songs held out for validation", type=float)
    _opt(p, "--adversary-steps", "train", "adversary_steps", "adversary updates per VAE update", type=int)
    _opt(p, "--grad-clip", "train", "grad_clip", "gradient-norm clip", type=float)
    _opt(p, "--reduction", "train", "reduction", "loss reduction over steps/elements", choices=["mean", "sum"])
    _opt(p, "--hidden-size", "model", "hidden_size", "recurrent hidden size", note=REF, type=int)
    _opt(p, "--style-dim", "model", "style_dim", "width of each style latent", note=REF, type=int)
    _opt(p, "--content-dim", "model", "content_dim", "width of each content latent", note=REF, type=int)
    _opt(p, "--embed-dim", "model", "embed_dim", "embedding width per stream", type=int)
    _opt(p, "--encoder-layers", "model", "encoder_layers", "residual encoder blocks", type=int)
    _opt(p, "--decoder-layers", "model", "decoder_layers", "decoder GRU layers", note=REF, type=int)
    _opt(p, "--init-seed", "model", "init_seed", "weight initialization seed", type=int)
    _bool_opt(p, "--one-hot", "model", "one_hot", "one-hot inputs instead of learned embeddings")
    _bool_opt(p, "--autoregressive", "model", "autoregressive", "teacher-forced autoregressive stream decoders")

    p = sub.add_parser("bank", help="per-region style centroids for generation")
    p.add_argument("--ckpt", required=True, help="checkpoint")
    p.add_argument("--data", required=True, help="labelled dataset (.jsonl)")
    p.add_argument("--out", required=True, help="output style bank (.json)")

    p = sub.add_parser("generate", help="sample melodies for a region")
    p.add_argument("--ckpt", required=True, help="checkpoint")
    p.add_argument("--bank", required=True, help="style bank (.json)")
    p.add_argument("--region", required=True, help="region label")
    p.add_argument("--out", required=True, help="output directory")
    _opt(p, "--n", "generate", "n", "number of samples", type=int)
    _opt(p, "--temperature", "generate", "temperature", "sampling temperature (> 0)", type=float)
    _opt(p, "--seed", "generate", "seed", "sampling seed", type=int)
    _opt(p, "--style-jitter", "generate", "style_jitter", "std of Gaussian jitter added to the centroid",
         type=float)

    p = sub.add_parser("train-recognizer", help="train the independent style recognizer")
    p.add_argument("--data", required=True, help="labelled dataset (.jsonl)")
    p.add_argument("--vocab", required=True, help="vocabulary (.json)")
    p.add_argument("--out", required=True, help="output recognizer file")
    _opt(p, "--epochs", "eval", "recognizer_epochs", "recognizer training epochs", type=int)
    _opt(p, "--hidden-size", "eval", "recognizer_hidden", "recognizer hidden size", type=int)
    _opt(p, "--seed", "eval", "seed", "seed", type=int)

    p = sub.add_parser("eval", help="objective metrics report")
    p.add_argument("--ckpt", required=True, help="checkpoint")
    p.add_argument("--data", required=True, help="dataset (.jsonl)")
    p.add_argument("--recognizer", required=True, help="recognizer file from train-recognizer")
    p.add_argument("--report", required=True, help="output report (.json); a confusion plot is written beside it")
    _opt(p, "--seed", "eval", "seed", "seed for random latent slots", type=int)
    _opt(p, "--subset", "eval", "subset", "'all' windows or only the checkpoint's held-out 'val' songs",
         choices=["all", "val"])

    p = sub.add_parser("export-latents", help="posterior means per window as CSV")
    p.add_argument("--ckpt", required=True, help="checkpoint")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--data", help="dataset (default: the dataset the checkpoint was trained on)")

    p = sub.add_parser("plot", help="t-SNE scatter plots of exported latents")
    p.add_argument("--latents", required=True, help="CSV from export-latents")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--perplexity", type=float, default=30.0, help="t-SNE perplexity (default: 30.0)")
    p.add_argument("--seed", type=int, default=0, help="t-SNE seed (default: 0)")
    p.add_argument("--max-points", type=int, default=2000, help="rows subsampled for t-SNE (default: 2000)")
    return parser


def _resolve(args) -> C.RunConfig:
    flags = {}
    for k, v in vars(args).items():
        if k.startswith("cfg:"):
            _, section, key = k.split(":")
            flags[(section, key)] = v
    return C.resolve(flags, args.config)


def _provenance(rc: C.RunConfig, out: Path, args) -> None:
    rc.sources["command"] = args.command
    rc.write(out)


def _load_data(path, vocab):
    from .corpus import load_windows

    windows = load_windows(path, vocab)
    if not windows:
        raise ValueError(f"{path}: no windows")
    return windows


def cmd_ingest(args, rc):
    from .corpus import build_vocabulary, load_midi_dir, save_windows, songs_to_windows

    cc = rc["corpus"]
    songs = load_midi_dir(args.midi_dir, grid=cc["grid"], keep_highest=cc["keep_highest"],
                          transpose=cc["transpose"], min_length=cc["window"])
    if not songs:
        raise ValueError(f"{args.midi_dir}: no usable songs")
    vocab = build_vocabulary(songs)
    vocab.save(args.vocab)
    n = save_windows(songs_to_windows(songs, vocab, cc["window"]), vocab, args.out)
    _provenance(rc, Path(args.out).with_suffix(".run_config.json"), args)
    print(json.dumps({"songs": len(songs), "windows": n, "vocab_sizes": vocab.sizes}))


def cmd_synth(args, rc):
    from .corpus import build_vocabulary, default_styles, load_style_specs, save_windows, songs_to_windows, \
        synthesize_corpus

    cc = rc["corpus"]
    specs = default_styles(cc["phrase_length"])
    if args.spec:
        specs, opts = load_style_specs(args.spec)
        for key in ("songs_per_style", "song_length"):
            if key in opts and f"corpus.{key}" not in rc.sources:
                cc[key] = opts[key]
                rc.sources[f"corpus.{key}"] = f"spec:{args.spec}"
    songs = synthesize_corpus(specs, cc["songs_per_style"], cc["song_length"], cc["seed"])
    vocab = build_vocabulary(songs)
    vocab_path = Path(args.vocab) if args.vocab else Path(args.out).with_suffix(".vocab.json")
    vocab.save(vocab_path)
    n = save_windows(songs_to_windows(songs, vocab, cc["window"]), vocab, args.out)
    _provenance(rc, Path(args.out).with_suffix(".run_config.json"), args)
    print(json.dumps({"songs": len(songs), "windows": n, "vocab": str(vocab_path), "vocab_sizes": vocab.sizes}))


def cmd_train(args, rc):
    from .corpus import Vocabulary
    from .model import ModelConfig
    from .plotting import plot_metrics
    from .trainer import TrainConfig, train

    vocab = Vocabulary.load(args.vocab)
    windows = _load_data(args.data, vocab)
    tc = TrainConfig(**rc["train"])
    mc = ModelConfig(vocab.sizes, vocab.n_regions, seq_len=len(windows[0].pitch_ids), **rc["model"])
    out = Path(args.out)
    result = train(windows, vocab, None if args.resume else mc, tc, out_dir=out, resume=args.resume,
                   extra={"data_path": str(Path(args.data).resolve())})
    plot_metrics(out / "metrics.jsonl", out / "metrics.png")
    _provenance(rc, out / "run_config.json", args)
    last = result.history[-1] if result.history else {}
    print(json.dumps({"steps": result.checkpoint.step, "last_epoch": last}))


def cmd_bank(args, rc):
    from .checkpoint import load_checkpoint
    from .generator import build_style_bank

    ck = load_checkpoint(args.ckpt)
    windows = _load_data(args.data, ck.vocab)
    bank = build_style_bank(ck.model, windows, ck.vocab)
    bank.save(args.out)
    _provenance(rc, Path(args.out).with_suffix(".run_config.json"), args)
    print(json.dumps({"regions": bank.regions, "counts": bank.counts}))


def cmd_generate(args, rc):
    from .checkpoint import load_checkpoint
    from .generator import StyleBank, generate, render_midi

    gc = rc["generate"]
    ck = load_checkpoint(args.ckpt)
    bank = StyleBank.load(args.bank)
    windows, z = generate(ck.model, bank, ck.vocab, args.region, gc["n"], gc["temperature"], gc["seed"],
                          gc["style_jitter"], return_latents=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for k, w in enumerate(windows):
        midi = render_midi(w, ck.vocab, out / f"{args.region}_{k:03d}.mid")
        rec = w.to_record(ck.vocab)
        rec.update(midi=midi.name, latent=[round(float(v), 6) for v in z[k]],
                   provenance={"checkpoint": str(args.ckpt), "bank": str(args.bank), "region": args.region,
                               "seed": gc["seed"], "temperature": gc["temperature"], "index": k,
                               "style_jitter": gc["style_jitter"], "latent_layout": "style centroid + N(0, I) content"})
        records.append(rec)
    with open(out / "samples.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    _provenance(rc, out / "run_config.json", args)
    print(json.dumps({"samples": len(windows), "out": str(out)}))


def cmd_train_recognizer(args, rc):
    from .corpus import Vocabulary
    from .evaluator import train_style_recognizer

    ec = rc["eval"]
    vocab = Vocabulary.load(args.vocab)
    windows = _load_data(args.data, vocab)
    rec, acc = train_style_recognizer(windows, vocab, epochs=ec["recognizer_epochs"],
                                      hidden=ec["recognizer_hidden"], seed=ec["seed"])
    rec.save(args.out)
    _provenance(rc, Path(args.out).with_suffix(".run_config.json"), args)
    print(json.dumps({"test_accuracy": acc}))


def cmd_eval(args, rc):
    from .checkpoint import load_checkpoint
    from .evaluator import StyleRecognizer, evaluate
    from .plotting import plot_confusion

    ec = rc["eval"]
    ck = load_checkpoint(args.ckpt)
    windows = _load_data(args.data, ck.vocab)
    if ec["subset"] == "val":
        held = set(ck.extra.get("val_songs", []))
        windows = [w for w in windows if w.source_song in held]
        if not windows:
            raise ValueError("checkpoint has no held-out songs in this dataset")
    recognizer = StyleRecognizer.load(args.recognizer)
    report = evaluate(ck.model, recognizer, windows, ck.vocab, seed=ec["seed"])
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json() + "\n", encoding="utf-8")
    plot_confusion(report.confusion, report.regions, path.with_suffix(".confusion.png"))
    _provenance(rc, path.with_suffix(".run_config.json"), args)
    print(report.to_json())


def cmd_export_latents(args, rc):
    from .checkpoint import load_checkpoint
    from .evaluator import export_latents

    ck = load_checkpoint(args.ckpt)
    data = args.data or ck.extra.get("data_path")
    if not data:
        raise UsageError("--data is required: the checkpoint does not record its dataset")
    n = export_latents(ck.model, _load_data(data, ck.vocab), ck.vocab, args.out)
    _provenance(rc, Path(args.out).with_suffix(".run_config.json"), args)
    print(json.dumps({"rows": n}))


def cmd_plot(args, rc):
    from .plotting import plot_latents

    paths = plot_latents(args.latents, args.out, args.perplexity, args.seed, args.max_points)
    _provenance(rc, Path(args.out) / "run_config.json", args)
    print(json.dumps({"written": [str(p) for p in paths]}))


COMMANDS = {
    "ingest": cmd_ingest, "synth": cmd_synth, "train": cmd_train, "bank": cmd_bank, "generate": cmd_generate,
    "train-recognizer": cmd_train_recognizer, "eval": cmd_eval, "export-latents": cmd_export_latents,
    "plot": cmd_plot,
}


def _category(exc: BaseException) -> str:
    from .corpus import MidiParseError

    if isinstance(exc, (UsageError, C.ConfigError)):
        return "usage"
    if isinstance(exc, FloatingPointError):
        return "numeric"
    if isinstance(exc, MidiParseError):
        return "data"
    if isinstance(exc, (FileNotFoundError, PermissionError, IsADirectoryError, OSError)):
        return "io"
    if isinstance(exc, (ValueError, KeyError, IndexError)):
        return "data"
    return "internal"


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage / help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("error: category=usage message=missing subcommand", file=sys.stderr)
        return EXIT_CODES["usage"]
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = _resolve(args)
        COMMANDS[args.command](args, rc)
    except Exception as exc:  # noqa: BLE001 - top-level error boundary
        cat = _category(exc)
        msg = str(exc).replace("\n", " ") or type(exc).__name__
        print(f"error: category={cat} message={msg}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_CODES[cat]
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
