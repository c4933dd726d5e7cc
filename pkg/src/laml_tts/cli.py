"""Command line entry point: ``laml-tts <command> ...``.

Every command takes a JSON run config (``--config``); flags override it, and
the resolved settings plus the code version are written to the command's
output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import subprocess
import sys
import traceback
from pathlib import Path
from typing import Sequence

from . import __version__, laml
from .acoustic import AcousticModel, ModelConfig, tts_loss_fn
from .aligner import AlignerConfig, AlignerVocabulary, load_aligner, save_aligner
from .data import (
    FeatureCache,
    FeatureConfig,
    cap_manifest,
    load_manifest,
    load_wav,
    save_manifest,
    select_minutes_budget,
    wav_duration,
    write_wav,
)
from .evalharness import Reference, accent_delta, project2d, similarity_report
from .frontend import LanguageRegistry, LexiconG2P, default_inventory
from .pipeline import (
    Frontend,
    ModelSynthesizer,
    align_records,
    aligner_items,
    build_registry,
    load_model,
    prepare_record,
    save_model,
    train_aligner,
    training_samples,
)
from .speaker import build_embedder, embed

log = logging.getLogger("laml_tts")

CACHE_ENV = "LAML_TTS_CACHE"


class RunConfig:
    """Settings from a JSON file; relative paths resolve against the file's directory."""

    def __init__(self, raw: dict, base: Path):
        self.raw = raw
        self.base = base

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh), path.parent.resolve())

    def path(self, value: str | Path) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    @property
    def languages(self) -> LanguageRegistry:
        return LanguageRegistry({int(k): v["name"] for k, v in self.raw["languages"].items()})

    def frontend(self, languages: LanguageRegistry | None = None) -> Frontend:
        lexicons = {int(k): self.path(v["lexicon"]) for k, v in self.raw["languages"].items() if "lexicon" in v}
        return Frontend(LexiconG2P.from_files(lexicons), languages or self.languages, default_inventory())

    @property
    def features(self) -> FeatureConfig:
        return FeatureConfig.from_dict(self.raw.get("features", {}))

    @property
    def embedder_name(self) -> str:
        return self.raw.get("embedder", "toy")

    def cache(self) -> FeatureCache:
        root = os.environ.get(CACHE_ENV) or self.path(self.raw.get("cache_dir", "cache"))
        return FeatureCache(root, self.features, extra_key=self.embedder_name)

    def train_config(self, section: str, **overrides) -> laml.TrainConfig:
        d = dict(self.raw.get(section, {}))
        d.update({k: v for k, v in overrides.items() if v is not None})
        return laml.TrainConfig.from_dict(d)

    def model_config(self, **overrides) -> ModelConfig:
        d = dict(self.raw.get("model", {}))
        d.update(overrides)
        return ModelConfig.from_dict(d)

    def aligner_config(self) -> AlignerConfig:
        d = dict(self.raw.get("aligner", {}))
        d.setdefault("n_mels", self.features.n_mels)
        return AlignerConfig(**d)


def code_version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_resolved(out_dir: Path, command: str, args: argparse.Namespace, cfg: RunConfig | None, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    doc = {"command": command, "code_version": code_version(), "flags": flags,
           "config": cfg.raw if cfg else None, **(extra or {})}
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, ensure_ascii=False, default=str)


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    cfg = RunConfig.load(args.config)
    out = Path(args.out_dir)
    cap = args.cap if args.cap is not None else cfg.raw.get("cap", 20_000)
    seed = args.seed if args.seed is not None else cfg.raw.get("seed", 0)
    manifest = cap_manifest(load_manifest(args.manifest), cap=cap, seed=seed)
    languages = cfg.languages
    for lid in manifest.language_ids():
        if lid not in languages:
            raise ValueError(f"manifest language {lid} is not declared in the run config")
    cache = cfg.cache()
    embedder = build_embedder(cfg.embedder_name)
    for i, record in enumerate(manifest.records):
        prepare_record(record, cache, embedder)
        if (i + 1) % 100 == 0:
            log.info("prepared %d/%d", i + 1, len(manifest.records))
    write_resolved(out, "prepare", args, cfg, {"cap": cap, "seed": seed})
    save_manifest(manifest, out / "manifest.jsonl")
    counts = {lid: len(r) for lid, r in manifest.by_language().items()}
    print(json.dumps({"records": len(manifest.records), "per_language": counts, "cache": str(cache.root)}))
    return 0


def cmd_train_aligner(args) -> int:
    cfg = RunConfig.load(args.config)
    out = Path(args.out_dir)
    write_resolved(out, "train-aligner", args, cfg)
    records = load_manifest(args.manifest).records
    cache = cfg.cache()
    frontend = cfg.frontend()
    vocab = AlignerVocabulary.from_inventory(frontend.inventory)
    tc = cfg.train_config("aligner_train", steps=args.steps)
    items = aligner_items(records, cache, frontend, vocab)
    model = train_aligner(items, vocab, tc, cfg.aligner_config())
    save_aligner(out / "aligner.pt", model, vocab, cache.config_hash)
    align_records(records, cache, frontend, model, vocab)
    print(json.dumps({"aligner": str(out / "aligner.pt"), "aligned": len(records)}))
    return 0


def _model_for(cfg: RunConfig, languages: LanguageRegistry, embedder) -> AcousticModel:
    ids = languages.ids()
    if ids != list(range(len(ids))):
        raise ValueError(f"language ids must be 0..n-1 for pretraining, got {ids}")
    mc = cfg.model_config(language_count=len(ids), speaker_dim=embedder.dim,
                          feature_dim=default_inventory().dim, mel_bins=cfg.features.n_mels)
    return AcousticModel(mc)


def cmd_pretrain(args) -> int:
    cfg = RunConfig.load(args.config)
    out = Path(args.out_dir)
    write_resolved(out, "pretrain", args, cfg)
    records = load_manifest(args.manifest).records
    cache = cfg.cache()
    tc = cfg.train_config("train", steps=args.steps)
    embedder = build_embedder(cfg.embedder_name)
    present = sorted({r.language_id for r in records})
    languages = LanguageRegistry({lid: cfg.languages.name(lid) for lid in present})
    frontend = cfg.frontend(languages)
    registry = build_registry(training_samples(records, cache, frontend), tc.batch_size, tc.seed)
    if args.resume:
        state, languages, _, _ = load_model(args.resume, registry)
    else:
        laml.seed_everything(tc.seed)
        state = laml.new_train_state(_model_for(cfg, languages, embedder), tc)
    state.config = dataclasses.replace(state.config, steps=tc.steps)
    meta = dict(languages=languages, inventory=frontend.inventory, feature_config=cfg.features,
                embedder_name=cfg.embedder_name)
    ckpt_dir = out / "checkpoints"

    def checkpoint(st, _):
        if st.step % max(1, tc.checkpoint_every) == 0 or st.step == tc.steps:
            save_model(ckpt_dir / f"step{st.step:07d}.pt", st, registry, **meta)

    laml.pretrain(registry, state, tts_loss_fn, loss_log=laml.LossLog(out / "losses.csv"), callback=checkpoint)
    save_model(out / "model.pt", state, registry, **meta)
    print(json.dumps({"model": str(out / "model.pt"), "step": state.step}))
    return 0


def cmd_finetune(args) -> int:
    cfg = RunConfig.load(args.config)
    out = Path(args.out_dir)
    cache = cfg.cache()
    new_records = load_manifest(args.manifest).records
    new_langs = {r.language_id for r in new_records}
    if len(new_langs) != 1:
        raise ValueError(f"the fine-tuning manifest must hold exactly one language, found {sorted(new_langs)}")
    new_lang = new_langs.pop()
    seed = args.seed if args.seed is not None else cfg.raw.get("seed", 0)
    selected = select_minutes_budget(new_records, args.minutes_budget * 60.0, seed=seed)
    if not selected:
        raise ValueError("no utterance fits in the minutes budget")
    total_seconds = sum(wav_duration(r.audio_path) for r in selected)
    write_resolved(out, "finetune", args, cfg, {"selected_seconds": total_seconds, "selected": len(selected)})
    save_manifest(selected, out / "selected_manifest.jsonl")

    state, ckpt_languages, feature_config, embedder_name = load_model(args.checkpoint)
    if new_lang in ckpt_languages:
        raise ValueError(f"language id {new_lang} collides with a pretraining language")
    ckpt_languages.register(cfg.languages.name(new_lang), new_lang)
    frontend = cfg.frontend(ckpt_languages)
    pre_records = load_manifest(args.pretrain_manifest).records

    embedder = build_embedder(embedder_name)
    for r in selected:
        prepare_record(r, cache, embedder)
    aligner, vocab = load_aligner(args.aligner, cache.config_hash)
    align_records(selected, cache, frontend, aligner, vocab)
    new_samples = training_samples(selected, cache, frontend)[new_lang]

    tc = cfg.train_config("train", finetune_steps=args.steps)
    registry = build_registry(training_samples(pre_records, cache, frontend), tc.batch_size, tc.seed)
    state.config = tc
    meta = dict(languages=ckpt_languages, inventory=frontend.inventory, feature_config=feature_config,
                embedder_name=embedder_name)
    state = laml.finetune_lowresource(state, new_samples, new_lang, registry, tts_loss_fn,
                                      loss_log=laml.LossLog(out / "losses.csv"))
    save_model(out / "model.pt", state, registry, **meta)
    print(json.dumps({"model": str(out / "model.pt"), "selected": len(selected), "selected_seconds": round(total_seconds, 3)}))
    return 0


def _synthesizer(cfg: RunConfig, checkpoint: str):
    state, languages, feature_config, embedder_name = load_model(checkpoint)
    frontend = cfg.frontend(languages)
    embedder = build_embedder(embedder_name)
    from .vocoder import GriffinLim

    vocoder = GriffinLim(feature_config, n_iter=cfg.raw.get("griffin_lim_iterations", 60))
    return ModelSynthesizer(state.model, frontend, embedder, vocoder, feature_config), languages, feature_config


def cmd_synthesize(args) -> int:
    cfg = RunConfig.load(args.config)
    synth, languages, fc = _synthesizer(cfg, args.checkpoint)
    lang = languages.lookup(args.language)
    emb_lang = languages.lookup(args.embedding_language) if args.embedding_language is not None else lang
    ref = Reference("reference", load_wav(args.reference, fc.sample_rate), lang)
    wave = synth(args.text, lang, ref, emb_lang)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_wav(out, wave, fc.sample_rate)
    print(json.dumps({"wav": str(out), "seconds": round(len(wave) / fc.sample_rate, 3)}))
    return 0


def cmd_evaluate(args) -> int:
    cfg = RunConfig.load(args.config)
    out = Path(args.out_dir)
    write_resolved(out, "evaluate", args, cfg)
    synth, languages, fc = _synthesizer(cfg, args.checkpoint)
    refs = []
    with open(args.references, encoding="utf-8") as fh:
        base = Path(args.references).parent
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                p = Path(obj["audio_path"])
                refs.append(Reference(str(obj["speaker_id"]), load_wav(p if p.is_absolute() else base / p, fc.sample_rate),
                                      int(obj["language_id"])))
    with open(args.texts, encoding="utf-8") as fh:
        texts = {languages.lookup(k): v[: args.texts_per_cell] for k, v in json.load(fh).items()}
    report = similarity_report(synth, synth.embedder, refs, texts)
    report.write_csv(out / "similarity.csv")
    summary = report.summary({lid: languages.name(lid) for lid in languages.ids()})
    (out / "similarity.txt").write_text(summary + "\n", encoding="utf-8")
    finite = lambda d: {k: (v if v == v else None) for k, v in d.items()}  # NaN is not valid JSON
    result = {"similarity": str(out / "similarity.csv"), "mean": finite(report.mean), "std": finite(report.std)}
    if args.accent_languages:
        subs = [languages.lookup(x) for x in args.accent_languages]
        deltas = accent_delta(synth, synth.embedder, refs, texts, subs)
        with open(out / "accent.csv", "w", encoding="utf-8") as fh:
            fh.write("language,delta_similarity\n")
            for k, v in deltas.items():
                fh.write(f"{k},{v:.6f}\n")
        result["accent_delta"] = finite(deltas)
    # projection of synthetic-speech embeddings, one point per (speaker, language, text)
    points, labels = [], []
    for ref in {r.speaker_id: r for r in refs}.values():
        for lang, lang_texts in texts.items():
            for text in lang_texts:
                try:
                    points.append(embed(synth(text, lang, ref, lang), synth.embedder))
                except Exception as exc:
                    log.warning("projection: skipping %s/%s: %s", ref.speaker_id, lang, exc)
                    continue
                labels.append(ref.speaker_id)
    if len(points) >= 3:
        project2d(points, labels, method=args.projection, seed=args.seed, plot_path=out / "projection.png",
                  table_path=out / "projection.csv")
        result["projection"] = str(out / "projection.png")
    print(json.dumps(result, default=float))
    return 0


def cmd_make_toy(args) -> int:
    from .toy import make_toy_corpus

    out = Path(args.out_dir)
    corpus = make_toy_corpus(out / "corpus", languages=args.languages, utterances_per_language=args.utterances,
                             seed=args.seed, language_offset=args.language_offset)
    config = {
        "languages": {str(k): {"name": v, "lexicon": str(corpus.lexicon_paths[k].relative_to(out))}
                      for k, v in corpus.language_names.items()},
        "embedder": "toy",
        "cache_dir": "cache",
        "seed": args.seed,
        "model": dataclasses.asdict(ModelConfig(hidden_dim=64, encoder_layers=1, decoder_layers=1, attention_heads=2,
                                                ffn_dim=128, conv_kernel=5, bottleneck_dim=16, dropout=0.0,
                                                max_relative_position=16)),
        "aligner": {"hidden": 64},
        "aligner_train": {"steps": 800, "batch_size": 4, "learning_rate": 0.002, "warmup_steps": 50},
        "train": {"steps": 300, "batch_size": 4, "learning_rate": 0.001, "warmup_steps": 100,
                  "checkpoint_every": 100, "finetune_steps": 200},
        "griffin_lim_iterations": 32,
    }
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, ensure_ascii=False)
    print(json.dumps({"manifest": str(corpus.manifest_path), "config": str(out / "config.json")}))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="laml-tts", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="manifest -> capped manifest + feature cache")
    s.add_argument("--config", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--cap", type=int, help="max records per corpus (default 20000)")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train-aligner", help="train the CTC aligner and write durations to the cache")
    s.add_argument("--config", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train_aligner)

    s = sub.add_parser("pretrain", help="LAML pretraining of the acoustic model")
    s.add_argument("--config", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="add a low-resource language to a pretrained model")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True, help="new-language manifest")
    s.add_argument("--pretrain-manifest", required=True)
    s.add_argument("--aligner", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--minutes-budget", type=float, default=5.0)
    s.add_argument("--steps", type=int, help="fine-tuning steps (default 5000)")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("synthesize", help="text + reference audio -> WAV")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--text", required=True)
    s.add_argument("--language", required=True, help="language name or id")
    s.add_argument("--reference", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--embedding-language", help="swap in another language embedding")
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("evaluate", help="speaker similarity, accent transfer and embedding projection")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--references", required=True, help="JSON lines: audio_path, speaker_id, language_id")
    s.add_argument("--texts", required=True, help="JSON object: language -> list of texts")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--texts-per-cell", type=int, default=2)
    s.add_argument("--accent-languages", nargs="*", help="single-speaker languages to swap in")
    s.add_argument("--projection", choices=["pca", "tsne"], default="pca")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("make-toy", help="write a synthetic toy corpus and run config")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--languages", nargs="+", default=["toy_a", "toy_b"])
    s.add_argument("--language-offset", type=int, default=0)
    s.add_argument("--utterances", type=int, default=24, help="utterances per language")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_toy)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        if args.verbose:
            err["traceback"] = traceback.format_exc()
        print(json.dumps(err), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
