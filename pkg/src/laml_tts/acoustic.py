"""FastSpeech-2 style acoustic model with language and speaker conditioning.

The language embedding is added to every position before the first encoder
block; the speaker embedding is injected after the last one. Word-boundary
units take part in encoding but their durations are forced to zero, so the
length regulator drops them before the decoder.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import AcousticFeatures
from .frontend import PhoneSequence


class ShapeError(ValueError):
    pass


@dataclass
class ModelConfig:
    feature_dim: int = 29
    hidden_dim: int = 384
    encoder_layers: int = 6
    decoder_layers: int = 6
    attention_heads: int = 4
    ffn_dim: int = 1536
    conv_kernel: int = 7
    bottleneck_dim: int = 64
    speaker_dim: int = 704
    language_count: int = 1
    mel_bins: int = 80
    variance_kernel: int = 3
    dropout: float = 0.1
    max_relative_position: int = 64
    macaron: bool = False
    postnet: bool = False

    def __post_init__(self):
        if self.hidden_dim <= 0:
            raise ValueError("hidden_dim must be positive")
        if not 0 < self.bottleneck_dim < self.hidden_dim:
            raise ValueError("bottleneck_dim must be positive and smaller than hidden_dim")
        if self.hidden_dim % self.attention_heads:
            raise ValueError("hidden_dim must be divisible by attention_heads")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def toy_config(**overrides) -> ModelConfig:
    """Reduced configuration for desk-scale runs and tests."""
    base = ModelConfig(
        hidden_dim=64,
        encoder_layers=1,
        decoder_layers=1,
        attention_heads=2,
        ffn_dim=128,
        conv_kernel=5,
        bottleneck_dim=16,
        speaker_dim=32,
        dropout=0.0,
        max_relative_position=16,
    )
    return replace(base, **overrides)


# ---------------------------------------------------------------------------
# batches


@dataclass
class TTSBatch:
    features: torch.Tensor  # B x L x F
    unit_mask: torch.Tensor  # B x L, True on real units
    boundary_mask: torch.Tensor  # B x L, True on word boundaries
    language_ids: torch.Tensor  # B
    speaker: torch.Tensor  # B x D
    durations: torch.Tensor | None = None  # B x L
    pitch: torch.Tensor | None = None  # B x L, normalized
    energy: torch.Tensor | None = None
    mel: torch.Tensor | None = None  # B x T x M
    frame_mask: torch.Tensor | None = None  # B x T

    def to(self, dtype: torch.dtype) -> "TTSBatch":
        def conv(t):
            return t.to(dtype) if t is not None and t.is_floating_point() else t

        return TTSBatch(**{f.name: conv(getattr(self, f.name)) for f in fields(self)})

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class TrainingSample:
    sequence: PhoneSequence
    features: AcousticFeatures
    speaker: np.ndarray
    speaker_id: str = ""


def collate(samples: Sequence[TrainingSample]) -> TTSBatch:
    B = len(samples)
    L = max(len(s.sequence) for s in samples)
    T = max(s.features.n_frames for s in samples)
    F_ = samples[0].sequence.units[0].features.shape[0]
    M = samples[0].features.mel.shape[1]
    feats = torch.zeros(B, L, F_)
    unit_mask = torch.zeros(B, L, dtype=torch.bool)
    bmask = torch.zeros(B, L, dtype=torch.bool)
    dur = torch.zeros(B, L, dtype=torch.long)
    pitch = torch.zeros(B, L)
    energy = torch.zeros(B, L)
    mel = torch.zeros(B, T, M)
    fmask = torch.zeros(B, T, dtype=torch.bool)
    for i, s in enumerate(samples):
        n, t = len(s.sequence), s.features.n_frames
        if s.features.durations is None or len(s.features.durations) != n:
            raise ShapeError(f"sample {i}: durations do not match its {n} units")
        feats[i, :n] = torch.from_numpy(s.sequence.feature_matrix())
        unit_mask[i, :n] = True
        bmask[i, :n] = torch.from_numpy(s.sequence.boundary_mask())
        dur[i, :n] = torch.from_numpy(np.asarray(s.features.durations, dtype=np.int64))
        pitch[i, :n] = torch.from_numpy(s.features.normalized_unit_pitch())
        energy[i, :n] = torch.from_numpy(s.features.normalized_unit_energy())
        mel[i, :t] = torch.from_numpy(np.asarray(s.features.mel, dtype=np.float32))
        fmask[i, :t] = True
    return TTSBatch(
        features=feats,
        unit_mask=unit_mask,
        boundary_mask=bmask,
        language_ids=torch.tensor([s.sequence.language_id for s in samples]),
        speaker=torch.from_numpy(np.stack([np.asarray(s.speaker, dtype=np.float32) for s in samples])),
        durations=dur,
        pitch=pitch,
        energy=energy,
        mel=mel,
        frame_mask=fmask,
    )


# ---------------------------------------------------------------------------
# building blocks


class RelativeSelfAttention(nn.Module):
    """Multi-head self-attention with a learned per-head bias for each clipped relative offset."""

    def __init__(self, dim: int, heads: int, max_relative: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.max_relative = max_relative
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros(heads, 2 * max_relative + 1))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        B, N, D = x.shape
        q, k, v = self.qkv(x).view(B, N, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        pos = torch.arange(N, device=x.device)
        offset = (pos[None, :] - pos[:, None]).clamp(-self.max_relative, self.max_relative) + self.max_relative
        scores = scores + self.rel_bias[:, offset].unsqueeze(0)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = self.dropout(scores.softmax(-1))
        ctx = (attn @ v).transpose(1, 2).reshape(B, N, D)
        return self.out(ctx)


class ConvModule(nn.Module):
    def __init__(self, dim: int, kernel: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pointwise_in = nn.Conv1d(dim, 2 * dim, 1)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.mid_norm = nn.LayerNorm(dim)
        self.pointwise_out = nn.Conv1d(dim, dim, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        y = self.norm(x) * mask.unsqueeze(-1)
        y = F.glu(self.pointwise_in(y.transpose(1, 2)), dim=1)
        y = self.depthwise(y * mask.unsqueeze(1))
        y = F.silu(self.mid_norm(y.transpose(1, 2))).transpose(1, 2)
        return self.dropout(self.pointwise_out(y).transpose(1, 2))


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(dim), nn.Linear(dim, hidden), nn.SiLU(), nn.Dropout(dropout), nn.Linear(hidden, dim), nn.Dropout(dropout)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class ConformerBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.macaron = FeedForward(d, cfg.ffn_dim, cfg.dropout) if cfg.macaron else None
        self.attn_norm = nn.LayerNorm(d)
        self.attn = RelativeSelfAttention(d, cfg.attention_heads, cfg.max_relative_position, cfg.dropout)
        self.conv = ConvModule(d, cfg.conv_kernel, cfg.dropout)
        self.ff = FeedForward(d, cfg.ffn_dim, cfg.dropout)
        self.final_norm = nn.LayerNorm(d)
        self.drop = nn.Dropout(cfg.dropout)
        self.ff_scale = 0.5 if cfg.macaron else 1.0

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if self.macaron is not None:
            x = x + 0.5 * self.macaron(x)
        x = x + self.drop(self.attn(self.attn_norm(x), mask))
        x = x + self.conv(x, mask)
        x = x + self.ff_scale * self.ff(x)
        return self.final_norm(x) * mask.unsqueeze(-1)


class VariancePredictor(nn.Module):
    def __init__(self, dim: int, kernel: int, dropout: float):
        super().__init__()
        self.conv1 = nn.Conv1d(dim, dim, kernel, padding=kernel // 2)
        self.norm1 = nn.LayerNorm(dim)
        self.conv2 = nn.Conv1d(dim, dim, kernel, padding=kernel // 2)
        self.norm2 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)
        self.proj = nn.Linear(dim, 1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        m = mask.unsqueeze(-1)
        y = self.drop(self.norm1(F.relu(self.conv1((x * m).transpose(1, 2))).transpose(1, 2)))
        y = self.drop(self.norm2(F.relu(self.conv2((y * m).transpose(1, 2))).transpose(1, 2)))
        return self.proj(y).squeeze(-1) * mask


class SpeakerInjection(nn.Module):
    """Bottleneck + SoftSign on the speaker vector, concatenated per position, projected back, layer-normed."""

    def __init__(self, hidden: int, speaker_dim: int, bottleneck: int):
        super().__init__()
        self.speaker_dim = speaker_dim
        self.bottleneck = nn.Linear(speaker_dim, bottleneck)
        self.project = nn.Linear(hidden + bottleneck, hidden)
        self.norm = nn.LayerNorm(hidden)

    def squash(self, speaker: torch.Tensor) -> torch.Tensor:
        return F.softsign(self.bottleneck(speaker))

    def forward(self, h: torch.Tensor, speaker: torch.Tensor, *, return_pre_affine: bool = False):
        if speaker.shape[-1] != self.speaker_dim:
            raise ShapeError(f"speaker embedding has dimension {speaker.shape[-1]}, expected {self.speaker_dim}")
        s = self.squash(speaker).unsqueeze(1).expand(-1, h.shape[1], -1)
        z = self.project(torch.cat([h, s], dim=-1))
        normed = F.layer_norm(z, (z.shape[-1],), eps=self.norm.eps)
        out = normed * self.norm.weight + self.norm.bias
        return (out, normed) if return_pre_affine else out


class Postnet(nn.Module):
    def __init__(self, mel_bins: int, channels: int = 256, layers: int = 5, kernel: int = 5):
        super().__init__()
        convs = []
        for i in range(layers):
            cin = mel_bins if i == 0 else channels
            cout = mel_bins if i == layers - 1 else channels
            convs.append(nn.Conv1d(cin, cout, kernel, padding=kernel // 2))
        self.convs = nn.ModuleList(convs)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        y = mel.transpose(1, 2)
        for i, conv in enumerate(self.convs):
            y = conv(y)
            if i < len(self.convs) - 1:
                y = torch.tanh(y)
        return mel + y.transpose(1, 2)


# ---------------------------------------------------------------------------
# length regulation


def force_boundary_zero(durations: torch.Tensor, boundary_mask: torch.Tensor) -> torch.Tensor:
    return durations.masked_fill(boundary_mask, 0)


def length_regulate(
    hidden: torch.Tensor, durations: torch.Tensor, boundary_mask: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Repeat each unit ``duration`` times; word boundaries are dropped.

    Works on a single sequence (L x D) or a batch (B x L x D). Returns the
    upsampled frames and a frame mask.
    """
    single = hidden.dim() == 2
    if single:
        hidden, durations, boundary_mask = hidden[None], durations[None], boundary_mask[None]
    if durations.shape != hidden.shape[:2] or boundary_mask.shape != durations.shape:
        raise ShapeError("durations and boundary mask must match the unit axis")
    if (durations < 0).any():
        raise ShapeError("negative duration")
    durations = force_boundary_zero(durations.long(), boundary_mask)
    totals = durations.sum(1)
    T = int(totals.max()) if totals.numel() else 0
    out = hidden.new_zeros(hidden.shape[0], T, hidden.shape[2])
    for b in range(hidden.shape[0]):
        rows = torch.repeat_interleave(hidden[b], durations[b], dim=0)
        out[b, : rows.shape[0]] = rows
    mask = torch.arange(T, device=hidden.device)[None, :] < totals[:, None]
    if single:
        return out[0], mask[0]
    return out, mask


def inference_durations(log_durations: torch.Tensor, boundary_mask: torch.Tensor, unit_mask: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """exp, subtract the +1 offset, round, clamp at 0; boundaries forced to 0."""
    d = torch.clamp(torch.round((torch.exp(log_durations) - 1.0) * scale), min=0).long()
    d = force_boundary_zero(d, boundary_mask | ~unit_mask)
    for b in range(d.shape[0]):
        if d[b].sum() == 0:
            candidates = log_durations[b].masked_fill(boundary_mask[b] | ~unit_mask[b], float("-inf"))
            d[b, int(candidates.argmax())] = 1
    return d


# ---------------------------------------------------------------------------
# model


@dataclass
class VarianceOutput:
    log_durations: torch.Tensor
    pitch: torch.Tensor
    energy: torch.Tensor


@dataclass
class ModelOutput:
    mel: torch.Tensor
    frame_mask: torch.Tensor
    variances: VarianceOutput
    used_durations: torch.Tensor
    used_pitch: torch.Tensor
    used_energy: torch.Tensor


class AcousticModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        H = config.hidden_dim
        self.input_proj = nn.Linear(config.feature_dim, H)
        self.language_table = nn.Embedding(config.language_count, H)
        self.encoder = nn.ModuleList(ConformerBlock(config) for _ in range(config.encoder_layers))
        self.speaker_injection = SpeakerInjection(H, config.speaker_dim, config.bottleneck_dim)
        self.duration_predictor = VariancePredictor(H, config.variance_kernel, config.dropout)
        self.pitch_predictor = VariancePredictor(H, config.variance_kernel, config.dropout)
        self.energy_predictor = VariancePredictor(H, config.variance_kernel, config.dropout)
        self.pitch_embed = nn.Linear(1, H)
        self.energy_embed = nn.Linear(1, H)
        self.decoder = nn.ModuleList(ConformerBlock(config) for _ in range(config.decoder_layers))
        self.mel_out = nn.Linear(H, config.mel_bins)
        self.postnet = Postnet(config.mel_bins) if config.postnet else None

    # -- stages --------------------------------------------------------------

    def encode(self, features: torch.Tensor, language_ids: torch.Tensor, unit_mask: torch.Tensor) -> torch.Tensor:
        if (language_ids < 0).any() or (language_ids >= self.config.language_count).any():
            raise ValueError(f"language id outside the {self.config.language_count} registered languages")
        x = self.input_proj(features) + self.language_table(language_ids).unsqueeze(1)
        for block in self.encoder:
            x = block(x, unit_mask)
        return x

    def inject_speaker(self, hidden: torch.Tensor, speaker: torch.Tensor) -> torch.Tensor:
        return self.speaker_injection(hidden, speaker)

    def predict_variances(self, hidden: torch.Tensor, unit_mask: torch.Tensor) -> VarianceOutput:
        return VarianceOutput(
            self.duration_predictor(hidden, unit_mask),
            self.pitch_predictor(hidden, unit_mask),
            self.energy_predictor(hidden, unit_mask),
        )

    def decode(self, frames: torch.Tensor, frame_mask: torch.Tensor) -> torch.Tensor:
        if frames.shape[-2] == 0:
            raise ShapeError("decoder input is empty")
        x = frames
        for block in self.decoder:
            x = block(x, frame_mask)
        mel = self.mel_out(x)
        if self.postnet is not None:
            mel = self.postnet(mel)
        return mel

    # -- full passes ---------------------------------------------------------

    def forward(self, batch: TTSBatch, *, teacher_forcing: bool = True, language_override: torch.Tensor | None = None,
                duration_scale: float = 1.0) -> ModelOutput:
        langs = batch.language_ids if language_override is None else language_override
        h = self.encode(batch.features, langs, batch.unit_mask)
        h = self.inject_speaker(h, batch.speaker) * batch.unit_mask.unsqueeze(-1)
        var = self.predict_variances(h, batch.unit_mask)
        if teacher_forcing:
            durations, pitch, energy = batch.durations, batch.pitch, batch.energy
        else:
            durations = inference_durations(var.log_durations, batch.boundary_mask, batch.unit_mask, duration_scale)
            pitch, energy = var.pitch, var.energy
        h = h + self.pitch_embed(pitch.unsqueeze(-1)) + self.energy_embed(energy.unsqueeze(-1))
        h = h * batch.unit_mask.unsqueeze(-1)
        frames, frame_mask = length_regulate(h, durations.masked_fill(~batch.unit_mask, 0), batch.boundary_mask)
        mel = self.decode(frames, frame_mask) * frame_mask.unsqueeze(-1)
        return ModelOutput(mel, frame_mask, var, force_boundary_zero(durations, batch.boundary_mask), pitch, energy)

    @torch.no_grad()
    def synthesize(self, sequence: PhoneSequence, speaker: np.ndarray, *, language_id: int | None = None,
                   duration_scale: float = 1.0) -> np.ndarray:
        """Mel spectrogram (frames x bins) for one sequence; ``language_id`` overrides the embedding row."""
        self.eval()
        n = len(sequence)
        batch = TTSBatch(
            features=torch.from_numpy(sequence.feature_matrix())[None],
            unit_mask=torch.ones(1, n, dtype=torch.bool),
            boundary_mask=torch.from_numpy(sequence.boundary_mask())[None],
            language_ids=torch.tensor([sequence.language_id]),
            speaker=torch.as_tensor(np.asarray(speaker, dtype=np.float32))[None],
        )
        override = None if language_id is None else torch.tensor([language_id])
        out = self(batch, teacher_forcing=False, language_override=override, duration_scale=duration_scale)
        return out.mel[0].numpy()

    def add_language(self) -> int:
        """Append a language row initialized to the mean of the existing rows; returns its id."""
        old = self.language_table.weight.data
        table = nn.Embedding(old.shape[0] + 1, old.shape[1]).to(old)
        table.weight.data[:-1] = old
        table.weight.data[-1] = old.mean(0)
        self.language_table = table
        self.config.language_count += 1
        return old.shape[0]


# ---------------------------------------------------------------------------
# loss


def _masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    n = mask.sum().clamp(min=1)
    return (((pred - target) ** 2) * mask).sum() / n


def tts_loss(output: ModelOutput, batch: TTSBatch) -> tuple[torch.Tensor, dict[str, float]]:
    """L1 on mel plus MSE on log durations, pitch and energy; boundary units are masked."""
    if output.mel.shape[1] != batch.mel.shape[1]:
        raise ShapeError(f"predicted {output.mel.shape[1]} frames, gold has {batch.mel.shape[1]}")
    fmask = batch.frame_mask.unsqueeze(-1).to(output.mel.dtype)
    mel_l1 = ((output.mel - batch.mel).abs() * fmask).sum() / (fmask.sum() * output.mel.shape[-1])
    units = (batch.unit_mask & ~batch.boundary_mask).to(output.mel.dtype)
    log_target = torch.log(batch.durations.to(output.mel.dtype) + 1.0)
    dur = _masked_mse(output.variances.log_durations, log_target, units)
    pitch = _masked_mse(output.variances.pitch, batch.pitch, units)
    energy = _masked_mse(output.variances.energy, batch.energy, units)
    total = mel_l1 + dur + pitch + energy
    parts = {"mel_l1": mel_l1, "duration": dur, "pitch": pitch, "energy": energy, "total": total}
    return total, {k: float(v.detach()) for k, v in parts.items()}


def tts_loss_fn(model: AcousticModel, samples: Sequence[TrainingSample]) -> tuple[torch.Tensor, dict[str, float]]:
    """Loss callable for the meta-training loop; leaves the model's train/eval mode alone."""
    batch = collate(samples)
    param = next(model.parameters())
    batch = batch.to(param.dtype)
    return tts_loss(model(batch), batch)
