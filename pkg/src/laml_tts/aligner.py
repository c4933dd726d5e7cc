"""Self-contained phoneme-to-frame aligner.

A frame classifier is trained as a small CTC recognizer, regularized by an L1
loss between the input spectrogram and what an auxiliary decoder rebuilds from
the frame-wise predictions. Durations come from monotonic alignment search over
the classifier's log-probabilities, reordered to the expected unit sequence.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .frontend import PAUSE_ROW, SENTENCE_MARKS, FeatureInventory, PhoneSequence, TextUnit, UnitKind

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "laml-tts-aligner/1"
BLANK = 0


class AlignmentError(ValueError):
    pass


# ---------------------------------------------------------------------------
# monotonic alignment search


def mas(selected_logprobs: np.ndarray) -> np.ndarray:
    """Best monotonic, surjective, skip-free frame-to-unit assignment.

    ``selected_logprobs[t, l]`` scores frame ``t`` belonging to the ``l``-th
    expected unit. Returns a length-T vector of unit indices that starts at 0,
    ends at L-1 and advances by at most one per frame. Ties prefer staying on
    the current unit.
    """
    x = np.asarray(selected_logprobs, dtype=np.float64)
    if x.ndim != 2:
        raise AlignmentError("expected a T x L matrix")
    T, L = x.shape
    if L < 1:
        raise AlignmentError("need at least one unit")
    if T < L:
        raise AlignmentError(f"{T} frames cannot cover {L} units")
    if not np.isfinite(x).all():
        raise AlignmentError("non-finite scores")

    q = np.full((T, L), -np.inf)
    q[0, 0] = x[0, 0]
    for t in range(1, T):
        stay = q[t - 1]
        advance = np.concatenate(([-np.inf], q[t - 1, :-1]))
        q[t] = x[t] + np.maximum(stay, advance)

    path = np.empty(T, dtype=np.int64)
    l = L - 1
    for t in range(T - 1, -1, -1):
        path[t] = l
        if t == 0:
            break
        if l > 0 and q[t - 1, l - 1] > q[t - 1, l]:
            l -= 1
    return path


def durations_from_path(path: Sequence[int], num_units: int) -> np.ndarray:
    return np.bincount(np.asarray(path, dtype=np.int64), minlength=num_units)


def path_score(selected_logprobs: np.ndarray, path: Sequence[int]) -> float:
    x = np.asarray(selected_logprobs, dtype=np.float64)
    return float(x[np.arange(x.shape[0]), np.asarray(path)].sum())


# ---------------------------------------------------------------------------
# vocabulary


class AlignerVocabulary:
    """Class ids for CTC: 0 is blank, then every inventory phoneme, pause and sentence mark."""

    def __init__(self, symbols: Sequence[str]):
        self.symbols = ["<blank>", *symbols]
        self.index = {s: i for i, s in enumerate(self.symbols)}

    @classmethod
    def from_inventory(cls, inventory: FeatureInventory) -> "AlignerVocabulary":
        return cls([*inventory.phonemes, PAUSE_ROW, *sorted(SENTENCE_MARKS)])

    def __len__(self) -> int:
        return len(self.symbols)

    def unit_id(self, unit: TextUnit) -> int:
        if unit.kind is UnitKind.WORD_BOUNDARY:
            raise AlignmentError("word boundaries have no acoustic class")
        key = PAUSE_ROW if unit.kind is UnitKind.PAUSE else unit.symbol
        try:
            return self.index[key]
        except KeyError:
            raise AlignmentError(f"symbol {unit.symbol!r} missing from aligner vocabulary") from None

    def encode(self, seq: PhoneSequence) -> list[int]:
        """Class ids of all non-boundary units, in order."""
        return [self.unit_id(u) for u in seq.without_boundaries()]


# ---------------------------------------------------------------------------
# model


@dataclass
class AlignerConfig:
    n_mels: int = 80
    hidden: int = 128
    conv_kernel: int = 5
    conv_layers: int = 3
    recurrent: bool = False  # BiGRU on top of the convolutions; lets CTC spikes drift away from their segments
    recon_weight: float = 1.0
    recon_kernel: int = 3


class Aligner(nn.Module):
    def __init__(self, vocab_size: int, config: AlignerConfig = AlignerConfig()):
        super().__init__()
        self.config = config
        self.vocab_size = vocab_size
        h, k = config.hidden, config.conv_kernel
        self.input_norm = nn.LayerNorm(config.n_mels)
        layers: list[nn.Module] = []
        for i in range(config.conv_layers):
            layers += [nn.Conv1d(config.n_mels if i == 0 else h, h, k, padding=k // 2), nn.ReLU()]
        self.convs = nn.Sequential(*layers)
        self.rnn = nn.GRU(h, h // 2, batch_first=True, bidirectional=True) if config.recurrent else None
        self.classifier = nn.Linear(h, vocab_size)
        # backtranslation of frame-wise predictions to a spectrogram
        self.reconstructor = nn.Sequential(
            nn.Conv1d(vocab_size - 1, h, config.recon_kernel, padding=config.recon_kernel // 2),
            nn.ReLU(),
            nn.Conv1d(h, config.n_mels, config.recon_kernel, padding=config.recon_kernel // 2),
        )

    def forward(self, mels: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """Frame logits, batch x frames x classes."""
        x = self.input_norm(mels)
        x = self.convs(x.transpose(1, 2)).transpose(1, 2)
        if self.rnn is None:
            return self.classifier(x)
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=mels.shape[1])
        return self.classifier(out)

    def reconstruct(self, logits: torch.Tensor) -> torch.Tensor:
        # blank-free posteriors, the same distribution that alignment search reads
        probs = logits[..., 1:].softmax(-1)
        return self.reconstructor(probs.transpose(1, 2)).transpose(1, 2)

    @torch.no_grad()
    def posteriogram(self, mel: np.ndarray) -> np.ndarray:
        """Per-frame log-probabilities over the vocabulary (rows log-sum-exp to 0)."""
        self.eval()
        m = torch.as_tensor(mel, dtype=torch.float32)[None]
        logits = self(m, torch.tensor([m.shape[1]]))[0]
        return logits.log_softmax(-1).double().numpy()


def aligner_loss(model: Aligner, batch: Sequence[tuple[np.ndarray, Sequence[int]]]) -> tuple[torch.Tensor, dict[str, float]]:
    """CTC plus weighted L1 spectrogram reconstruction over a batch of (mel, target ids)."""
    usable = []
    for i, (mel, target) in enumerate(batch):
        if len(target) == 0 or len(target) > mel.shape[0]:
            log.warning("skipping sample %d: %d targets for %d frames", i, len(target), mel.shape[0])
            continue
        usable.append((mel, target))
    if not usable:
        raise AlignmentError("no usable samples in batch")

    lengths = torch.tensor([m.shape[0] for m, _ in usable])
    mels = torch.zeros(len(usable), int(lengths.max()), model.config.n_mels)
    for i, (m, _) in enumerate(usable):
        mels[i, : m.shape[0]] = torch.as_tensor(m)
    targets = torch.cat([torch.as_tensor(list(t), dtype=torch.long) for _, t in usable])
    target_lengths = torch.tensor([len(t) for _, t in usable])

    logits = model(mels, lengths)
    logprobs = logits.log_softmax(-1)
    ctc = F.ctc_loss(
        logprobs.transpose(0, 1), targets, lengths, target_lengths, blank=BLANK, reduction="mean", zero_infinity=True
    )
    mask = (torch.arange(mels.shape[1])[None, :] < lengths[:, None]).unsqueeze(-1)
    recon = model.reconstruct(logits)
    l1 = ((recon - mels).abs() * mask).sum() / (mask.sum() * model.config.n_mels)
    total = ctc + model.config.recon_weight * l1
    parts = {"ctc": float(ctc.detach()), "l1": float(l1.detach())}
    parts["total"] = float(total.detach())
    return total, parts


def aligner_train_step(batch, state) -> tuple[object, dict[str, float]]:
    """One optimizer step on a single batch; ``state`` is a :class:`laml.TrainState`."""
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    loss, parts = aligner_loss(state.model, batch)
    loss.backward()
    state.apply_update()
    return state, parts


# ---------------------------------------------------------------------------
# duration extraction


def selected_logprobs(posteriogram: np.ndarray, target_ids: Sequence[int]) -> np.ndarray:
    """Drop the blank class, renormalize, and pick the columns of the expected units."""
    no_blank = posteriogram[:, 1:]
    no_blank = no_blank - np.logaddexp.reduce(no_blank, axis=1, keepdims=True)
    return no_blank[:, np.asarray(target_ids) - 1]


def align(model: Aligner, vocab: AlignerVocabulary, mel: np.ndarray, seq: PhoneSequence) -> np.ndarray:
    """Per-unit frame counts for ``seq`` (word boundaries get 0, every other unit at least 1)."""
    ids = vocab.encode(seq)
    sel = selected_logprobs(model.posteriogram(mel), ids)
    acoustic = durations_from_path(mas(sel), len(ids))
    out = np.zeros(len(seq), dtype=np.int64)
    out[~seq.boundary_mask()] = acoustic
    return out


# ---------------------------------------------------------------------------
# checkpoint


def save_aligner(path: str | Path, model: Aligner, vocab: AlignerVocabulary, feature_config_hash: str) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(model.config),
            "vocabulary": vocab.symbols[1:],
            "feature_config_hash": feature_config_hash,
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_aligner(path: str | Path, feature_config_hash: str | None = None) -> tuple[Aligner, AlignerVocabulary]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise AlignmentError(f"{path}: not an aligner checkpoint ({blob.get('format')!r})")
    if feature_config_hash is not None and blob["feature_config_hash"] != feature_config_hash:
        raise AlignmentError(f"{path}: trained with a different feature extraction config")
    vocab = AlignerVocabulary(blob["vocabulary"])
    model = Aligner(len(vocab), AlignerConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, vocab
