"""Command line entry points: make-toy-corpus, featurize, train, convert, eval, plot."""
import argparse
import json
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import conversion as conv_mod
from . import corpus as corpus_mod
from . import signal as sig
from . import training as train_mod
from . import vocoder as voc_mod
from .model import ModelConfig


def _load_config_file(path):
    if path is None:
        return {}
    with open(path, "rb") as f:
        if path.endswith(".toml"):
            return tomllib.load(f)
        return json.load(f)


def _build_configs(args):
    """Merge defaults < config file < flags into the three config objects."""
    file_cfg = _load_config_file(getattr(args, "config", None))
    frame = sig.FrameConfig(**file_cfg.get("frame", {}))
    model_section = dict(file_cfg.get("model", {}))
    model = ModelConfig.from_dict({**ModelConfig.toy().to_dict(), **model_section})
    train_section = dict(file_cfg.get("train", {}))
    train = train_mod.TrainConfig(**train_section)
    overrides = {}
    for flag, section in (("total_steps", "train"), ("warmup_steps", "train"),
                          ("batch_size", "train"), ("seed", "train")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.setdefault(section, {})[flag] = value
    if "train" in overrides:
        merged = {**train.to_dict(), **overrides["train"]}
        train = train_mod.TrainConfig.from_dict(merged)
    return frame, model, train


def _write_run_config(out_dir, frame, model, train):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_config.json"), "w") as f:
        json.dump({"frame": frame.to_dict(), "model": model.to_dict(),
                   "train": train.to_dict()}, f, indent=2)


def cmd_make_toy_corpus(args):
    speakers = []
    pitches = [float(p) for p in args.pitches.split(",")] if args.pitches else []
    for i in range(args.speakers):
        pitch = pitches[i] if i < len(pitches) else 110.0 * (1.3 ** i)
        kind = "singing" if i >= args.speakers - args.singing_speakers else "speech"
        speakers.append(corpus_mod.ToySpeaker(
            f"spk{i}", pitch, kind, formant_shift=1.0 + 0.08 * i))
    spec = corpus_mod.ToyCorpusSpec(speakers, utterances_per_speaker=args.utts)
    corpus = corpus_mod.generate_toy_corpus(spec, args.seed, args.out)
    print(f"wrote {len(corpus.utterances)} utterances for "
          f"{len(corpus.speakers)} speakers under {args.out}")
    return 0


def cmd_featurize(args):
    frame, _, _ = _build_configs(args)
    corpus = corpus_mod.load_manifest(args.manifest)
    _, stats = corpus_mod.featurize_corpus(corpus, frame, args.cache_dir)
    print(f"featurized: {stats.extracted} extracted, {stats.cached} cached")
    return 0


def cmd_train(args):
    frame, model, train = _build_configs(args)
    corpus = corpus_mod.load_manifest(args.manifest)
    records, _ = corpus_mod.featurize_corpus(corpus, frame, args.cache_dir)
    _write_run_config(args.out, frame, model, train)
    ckpt = train_mod.train(corpus, records, model, train, frame, args.out,
                           resume_from=args.resume)
    print(f"checkpoint written to {ckpt}")
    return 0


def cmd_convert(args):
    if args.nu is not None and args.nu != "auto" and float(args.nu) <= 0:
        raise ValueError("--nu must be 'auto' or a positive float")
    checkpoint = train_mod.Checkpoint.load(args.checkpoint)
    corpus = corpus_mod.load_manifest(args.manifest)
    records, _ = corpus_mod.featurize_corpus(corpus, checkpoint.frame_config,
                                             args.cache_dir)
    source = next((u for u in corpus.utterances if u.id == args.source), None)
    if source is None:
        raise ValueError(f"source utterance {args.source!r} not in manifest")
    if args.nu is None or args.nu == "auto":
        nu_mode, nu = "auto", None
    else:
        nu_mode, nu = "manual", float(args.nu)
    request = conv_mod.ConversionRequest(
        source, records[source.id], args.speaker, nu_mode=nu_mode, nu=nu,
        key_shift_semitones=args.key_shift)
    mel, diagnostics = conv_mod.convert(request, checkpoint, corpus, records)
    clip = voc_mod.mel_to_audio(mel)
    sig.save_wav(args.out, clip)
    diag_path = os.path.splitext(args.out)[0] + ".diagnostics.json"
    with open(diag_path, "w") as f:
        json.dump(diagnostics, f, indent=2)
    print(f"wrote {args.out} and {diag_path} (nu={diagnostics['nu']:.4f})")
    return 0


def cmd_eval(args):
    checkpoint = train_mod.Checkpoint.load(args.checkpoint)
    corpus = corpus_mod.load_manifest(args.manifest)
    if not corpus.utterances:
        raise ValueError("evaluation manifest is empty")
    records, _ = corpus_mod.featurize_corpus(corpus, checkpoint.frame_config,
                                             args.cache_dir)
    metrics = train_mod.evaluate(checkpoint, corpus, records)
    json.dump(metrics, sys.stdout, indent=2)
    print()
    return 0


def cmd_plot(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    frame, _, _ = _build_configs(args)
    corpus = corpus_mod.load_manifest(args.manifest)
    utt = next((u for u in corpus.utterances if u.id == args.utterance), None)
    if utt is None:
        raise ValueError(f"utterance {args.utterance!r} not in manifest")
    record = corpus_mod.extract_features(utt, frame)
    os.makedirs(args.out, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(10, 4))
    ax.imshow(record.mel.T, aspect="auto", origin="lower", cmap="magma")
    ax.set(title=f"{utt.id} mel", xlabel="frame", ylabel="mel bin")
    path = os.path.join(args.out, f"{utt.id}.mel.png")
    fig.savefig(path); plt.close(fig); written.append(path)

    overlay_f0 = None
    if args.converted_f0_json:
        with open(args.converted_f0_json) as f:
            overlay_f0 = json.load(f)
    fig, ax = plt.subplots(figsize=(10, 3))
    ax.plot(record.f0, label="f0 (Hz)")
    if overlay_f0 is not None:
        ax.plot(overlay_f0, label="converted f0 (Hz)", alpha=0.7)
    ax.set(title=f"{utt.id} f0", xlabel="frame")
    ax.legend()
    path = os.path.join(args.out, f"{utt.id}.f0.png")
    fig.savefig(path); plt.close(fig); written.append(path)

    fig, ax = plt.subplots(figsize=(10, 3))
    ax.plot(record.rmse)
    ax.set(title=f"{utt.id} rmse", xlabel="frame")
    path = os.path.join(args.out, f"{utt.id}.rmse.png")
    fig.savefig(path); plt.close(fig); written.append(path)

    print("wrote " + ", ".join(written))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="singconv",
        description="Train a duration-informed acoustic model and convert "
                    "singing to a target speaker's voice.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy-corpus", help="generate a synthetic corpus")
    p.add_argument("--speakers", type=int, default=4)
    p.add_argument("--singing-speakers", type=int, default=1,
                   help="how many of the speakers sing (the rest speak)")
    p.add_argument("--utts", type=int, default=10)
    p.add_argument("--pitches", default=None,
                   help="comma-separated base pitches in Hz per speaker")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_toy_corpus)

    p = sub.add_parser("featurize", help="extract and cache features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache-dir", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train the acoustic model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--total-steps", dest="total_steps", type=int, default=None)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="convert an utterance to a target voice")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True,
                   help="manifest containing the source utterance")
    p.add_argument("--cache-dir", required=True)
    p.add_argument("--source", required=True, help="source utterance id")
    p.add_argument("--speaker", required=True, help="target speaker id")
    p.add_argument("--nu", default="auto")
    p.add_argument("--key-shift", dest="key_shift", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("eval", help="teacher-forced metrics on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="plot mel/f0/rmse for an utterance")
    p.add_argument("--manifest", required=True)
    p.add_argument("--utterance", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--converted-f0-json", default=None,
                   help="optional JSON array of converted f0 values to overlay")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # runtime failure -> exit 1 with a message
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
