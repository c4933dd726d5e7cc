"""Training samples from a toy corpus using its gold durations."""

from __future__ import annotations

import numpy as np

from laml_tts.acoustic import TrainingSample
from laml_tts.data import AcousticFeatures, extract_features, load_wav
from laml_tts.speaker import ToyEmbedder, embed

EMBEDDER = ToyEmbedder()


def gold_samples(corpus) -> dict[int, list[TrainingSample]]:
    out: dict[int, list[TrainingSample]] = {}
    for u in corpus.utterances:
        wave = load_wav(u.record.audio_path)
        feats = AcousticFeatures.from_frames(extract_features(wave)).with_durations(u.durations)
        spk = embed(wave, EMBEDDER).vector.astype(np.float32)
        feats.speaker_embedding = spk
        out.setdefault(u.record.language_id, []).append(TrainingSample(u.sequence, feats, spk, u.record.speaker_id))
    return out
