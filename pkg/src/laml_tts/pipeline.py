"""Glue between the modules: corpus preparation, alignment, training samples, synthesis."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import laml
from .acoustic import AcousticModel, ModelConfig, TrainingSample
from .aligner import Aligner, AlignerConfig, AlignerVocabulary, align, aligner_loss
from .data import AcousticFeatures, FeatureCache, FeatureConfig, UtteranceRecord, extract_features, load_wav
from .evalharness import Reference
from .frontend import G2P, FeatureInventory, LanguageRegistry, PhoneSequence, default_inventory, text_to_units
from .speaker import Embedder, embed
from .vocoder import GriffinLim, Vocoder

log = logging.getLogger(__name__)


@dataclass
class Frontend:
    g2p: G2P
    languages: LanguageRegistry
    inventory: FeatureInventory

    def units(self, text: str, language_id: int) -> PhoneSequence:
        return text_to_units(text, language_id, self.g2p, languages=self.languages, inventory=self.inventory)


def prepare_record(record: UtteranceRecord, cache: FeatureCache, embedder: Embedder | None = None) -> AcousticFeatures:
    """Frame-level features (and the utterance speaker embedding) from cache, computing them on a miss."""
    cached = cache.read(record)
    if cached is not None:
        return cached
    record.validate()
    wave = load_wav(record.audio_path, cache.config.sample_rate)
    frames = extract_features(wave, cache.config, source=record.audio_path)
    spk = embed(wave, embedder).vector.astype(np.float32) if embedder is not None else None
    feats = AcousticFeatures.from_frames(frames, speaker_embedding=spk)
    cache.write(record, feats)
    return feats


def aligner_items(records: Sequence[UtteranceRecord], cache: FeatureCache, frontend: Frontend,
                  vocab: AlignerVocabulary) -> dict[int, list[tuple[np.ndarray, list[int]]]]:
    """(mel, class ids) pairs grouped by language, the aligner's training tasks."""
    out: dict[int, list] = {}
    for r in records:
        feats = prepare_record(r, cache)
        seq = frontend.units(r.transcript, r.language_id)
        out.setdefault(r.language_id, []).append((feats.mel, vocab.encode(seq)))
    return out


def train_aligner(items: Mapping[int, Sequence[tuple[np.ndarray, list[int]]]], vocab: AlignerVocabulary,
                  train_config: laml.TrainConfig, aligner_config: AlignerConfig = AlignerConfig(),
                  steps: int | None = None) -> Aligner:
    """Multilingual aligner training with the same one-batch-per-language summed loss."""
    laml.seed_everything(train_config.seed)
    model = Aligner(len(vocab), aligner_config)
    registry = laml.TaskRegistry(train_config.batch_size)
    for lang, lang_items in sorted(items.items()):
        registry.register(lang, list(lang_items), seed=train_config.seed)
    state = laml.new_train_state(model, train_config)
    laml.pretrain(registry, state, aligner_loss, steps=steps)
    model.eval()
    return model


def align_records(records: Sequence[UtteranceRecord], cache: FeatureCache, frontend: Frontend, aligner: Aligner,
                  vocab: AlignerVocabulary) -> list[AcousticFeatures]:
    """Durations and phoneme-averaged prosody for each record, written back to the cache."""
    out = []
    for r in records:
        feats = prepare_record(r, cache)
        seq = frontend.units(r.transcript, r.language_id)
        durations = align(aligner, vocab, feats.mel, seq)
        feats = feats.with_durations(durations)
        cache.write(r, feats)
        out.append(feats)
    return out


def training_samples(records: Sequence[UtteranceRecord], cache: FeatureCache, frontend: Frontend) -> dict[int, list[TrainingSample]]:
    """Aligned cache entries as per-language acoustic-model samples."""
    out: dict[int, list[TrainingSample]] = {}
    for r in records:
        feats = cache.read(r)
        if feats is None or feats.durations is None:
            raise RuntimeError(f"{r.audio_path}: no aligned features in cache; run prepare and train-aligner first")
        if feats.speaker_embedding is None:
            raise RuntimeError(f"{r.audio_path}: no speaker embedding in cache")
        seq = frontend.units(r.transcript, r.language_id)
        out.setdefault(r.language_id, []).append(TrainingSample(seq, feats, feats.speaker_embedding, r.speaker_id))
    return out


def build_registry(samples: Mapping[int, Sequence], batch_size: int, seed: int) -> laml.TaskRegistry:
    registry = laml.TaskRegistry(batch_size)
    for lang, items in sorted(samples.items()):
        registry.register(lang, list(items), seed=seed)
    return registry


# ---------------------------------------------------------------------------
# acoustic-model checkpoints

MODEL_FORMAT = "laml-tts-acoustic/1"


def save_model(path: str | Path, state: laml.TrainState, registry: laml.TaskRegistry | None, languages: LanguageRegistry,
               inventory: FeatureInventory, feature_config: FeatureConfig, embedder_name: str) -> Path:
    meta = {
        "model_format": MODEL_FORMAT,
        "model_config": state.model.config.to_dict(),
        "languages": languages.to_dict(),
        "inventory_digest": inventory.digest,
        "feature_config": feature_config.to_dict(),
        "embedder": embedder_name,
    }
    return laml.save_checkpoint(path, state, registry, meta)


def load_model(path: str | Path, registry: laml.TaskRegistry | None = None, inventory: FeatureInventory | None = None):
    """Returns (train state, language registry, feature config, embedder name)."""
    blob = laml.read_checkpoint(path)
    meta = blob["meta"]
    if meta.get("model_format") != MODEL_FORMAT:
        raise ValueError(f"{path}: not an acoustic-model checkpoint")
    inventory = inventory or default_inventory()
    if meta["inventory_digest"] != inventory.digest:
        raise ValueError(f"{path}: trained with a different feature inventory")
    model = AcousticModel(ModelConfig.from_dict(meta["model_config"]))
    state = laml.restore_state(blob, model, registry)
    languages = LanguageRegistry({int(k): v for k, v in meta["languages"].items()})
    return state, languages, FeatureConfig.from_dict(meta["feature_config"]), meta["embedder"]


# ---------------------------------------------------------------------------
# synthesis


class ModelSynthesizer:
    """Text + reference audio -> waveform, usable directly by the evaluation harness."""

    def __init__(self, model: AcousticModel, frontend: Frontend, embedder: Embedder, vocoder: Vocoder | None = None,
                 feature_config: FeatureConfig = FeatureConfig()):
        self.model = model
        self.frontend = frontend
        self.embedder = embedder
        self.vocoder = vocoder or GriffinLim(feature_config)

    def mel(self, text: str, language_id: int, speaker: np.ndarray, embedding_language_id: int | None = None) -> np.ndarray:
        seq = self.frontend.units(text, language_id)
        return self.model.synthesize(seq, speaker, language_id=embedding_language_id)

    def __call__(self, text: str, language_id: int, reference: Reference, embedding_language_id: int) -> np.ndarray:
        spk = embed(reference.audio, self.embedder).vector
        return self.vocoder.invert(self.mel(text, language_id, spk, embedding_language_id))
