"""Speaker-transfer evaluation: similarity matrices, accent deltas, 2-D projections, ASR hooks."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .speaker import Embedder, SpeakerEmbedding, cosine_similarity, embed

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


@dataclass
class Reference:
    speaker_id: str
    audio: np.ndarray
    language_id: int


class Synthesizer(Protocol):
    """``(text, language_id, reference, embedding_language_id) -> waveform``."""

    def __call__(self, text: str, language_id: int, reference: Reference, embedding_language_id: int) -> np.ndarray: ...


def identity_synthesizer(text: str, language_id: int, reference: Reference, embedding_language_id: int) -> np.ndarray:
    """Echoes the reference audio; a harness self-test stand-in."""
    return reference.audio


@dataclass
class SimilarityReport:
    speakers: list[str]
    languages: list[int]
    matrix: np.ndarray  # speakers x languages, NaN where every synthesis failed
    mean: dict[str, float]
    std: dict[str, float]
    upper_bound: dict[str, float]
    rows: list[tuple[str, int, int, float]] = field(default_factory=list)
    missing: list[tuple[str, int, int, str]] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["speaker", "language", "text_id", "similarity"])
            for row in self.rows:
                w.writerow([row[0], row[1], row[2], f"{row[3]:.6f}"])

    def summary(self, language_names: Mapping[int, str] | None = None) -> str:
        names = language_names or {}
        head = ["speaker"] + [names.get(l, str(l)) for l in self.languages] + ["mean", "std", "upper"]
        lines = ["\t".join(head)]
        for i, spk in enumerate(self.speakers):
            cells = ["-" if np.isnan(v) else f"{v:.3f}" for v in self.matrix[i]]
            ub = self.upper_bound.get(spk)
            lines.append("\t".join([spk, *cells, f"{self.mean[spk]:.3f}", f"{self.std[spk]:.3f}",
                                    "-" if ub is None else f"{ub:.3f}"]))
        return "\n".join(lines)


def _group(references: Sequence[Reference]) -> dict[str, list[Reference]]:
    out: dict[str, list[Reference]] = {}
    for r in references:
        out.setdefault(r.speaker_id, []).append(r)
    return out


def similarity_report(
    synthesize: Synthesizer,
    embedder: Embedder,
    references: Sequence[Reference],
    texts: Mapping[int, Sequence[str]],
) -> SimilarityReport:
    """Cosine similarity of synthetic speech to each reference, for every language and text.

    The first reference of each speaker conditions synthesis. With two or
    more references for a speaker, their mean pairwise similarity is the
    human-to-human upper bound.
    """
    if not references:
        raise EvaluationError("need at least one reference")
    languages = sorted(texts)
    if not languages or any(not texts[l] for l in languages):
        raise EvaluationError("need at least one text per language")
    groups = _group(references)
    speakers = list(groups)
    matrix = np.full((len(speakers), len(languages)), np.nan)
    rows, missing, upper = [], [], {}
    for i, spk in enumerate(speakers):
        ref = groups[spk][0]
        ref_emb = embed(ref.audio, embedder)
        if len(groups[spk]) >= 2:
            embs = [embed(r.audio, embedder) for r in groups[spk]]
            upper[spk] = float(np.mean([cosine_similarity(a, b) for a, b in combinations(embs, 2)]))
        for j, lang in enumerate(languages):
            cell = []
            for k, text in enumerate(texts[lang]):
                try:
                    wave = synthesize(text, lang, ref, lang)
                    sim = cosine_similarity(embed(wave, embedder), ref_emb)
                except Exception as exc:  # recorded per cell, the report is still produced
                    log.warning("synthesis failed for %s/%s/%d: %s", spk, lang, k, exc)
                    missing.append((spk, lang, k, str(exc)))
                    continue
                cell.append(sim)
                rows.append((spk, lang, k, sim))
            if cell:
                matrix[i, j] = float(np.mean(cell))
    mean = {s: float(np.nanmean(matrix[i])) if not np.isnan(matrix[i]).all() else float("nan") for i, s in enumerate(speakers)}
    std = {s: float(np.nanstd(matrix[i])) if not np.isnan(matrix[i]).all() else float("nan") for i, s in enumerate(speakers)}
    return SimilarityReport(speakers, languages, matrix, mean, std, upper, rows, missing)


def accent_delta(
    synthesize: Synthesizer,
    embedder: Embedder,
    target_refs: Sequence[Reference],
    texts: Mapping[int, Sequence[str]],
    substitute_language_ids: Sequence[int],
) -> dict[int, float]:
    """Mean absolute change in similarity to the target speaker when the language embedding is swapped.

    For every target speaker, language and text, speech is synthesized with
    the matching language embedding and again with each substitute's
    embedding; the result maps each substitute id to its mean |delta|.
    """
    languages = sorted(texts)
    if len(set(languages) | set(substitute_language_ids)) < 2:
        raise EvaluationError("accent transfer needs at least two languages")
    deltas: dict[int, list[float]] = {s: [] for s in substitute_language_ids}
    for ref in target_refs:
        ref_emb = embed(ref.audio, embedder)
        for lang in languages:
            for text in texts[lang]:
                try:
                    base = cosine_similarity(embed(synthesize(text, lang, ref, lang), embedder), ref_emb)
                except Exception as exc:
                    log.warning("synthesis failed for %s/%s: %s", ref.speaker_id, lang, exc)
                    continue
                for sub in substitute_language_ids:
                    try:
                        swapped = cosine_similarity(embed(synthesize(text, lang, ref, sub), embedder), ref_emb)
                    except Exception as exc:
                        log.warning("synthesis failed for %s/%s->%s: %s", ref.speaker_id, lang, sub, exc)
                        continue
                    deltas[sub].append(abs(base - swapped))
    return {s: float(np.mean(v)) if v else float("nan") for s, v in deltas.items()}


# ---------------------------------------------------------------------------
# projection


def project2d(
    embeddings: Sequence[SpeakerEmbedding],
    labels: Sequence[str],
    *,
    method: str = "pca",
    seed: int = 0,
    plot_path: str | Path | None = None,
    table_path: str | Path | None = None,
) -> np.ndarray:
    """2-D coordinates of the embeddings (PCA, or t-SNE with a fixed seed); optional PNG and CSV."""
    if len(embeddings) < 3:
        raise EvaluationError("need at least three embeddings to project")
    if len(labels) != len(embeddings):
        raise EvaluationError("one label per embedding")
    X = np.stack([e.vector for e in embeddings])
    if method == "pca":
        Xc = X - X.mean(axis=0)
        U, S, Vt = np.linalg.svd(Xc, full_matrices=False)
        # fix SVD sign ambiguity: largest-magnitude loading positive
        signs = np.sign(Vt[np.arange(Vt.shape[0]), np.abs(Vt).argmax(axis=1)])
        signs[signs == 0] = 1
        coords = (Xc @ (Vt.T * signs))[:, :2]
        if coords.shape[1] < 2:
            coords = np.pad(coords, ((0, 0), (0, 2 - coords.shape[1])))
    elif method == "tsne":
        from sklearn.manifold import TSNE

        perplexity = min(30.0, max(1.0, (len(X) - 1) / 3))
        coords = TSNE(n_components=2, random_state=seed, perplexity=perplexity, init="pca").fit_transform(X)
    else:
        raise EvaluationError(f"unknown projection method {method!r}")

    if table_path is not None:
        with open(table_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "x", "y"])
            for lab, (x, y) in zip(labels, coords):
                w.writerow([lab, f"{x:.6f}", f"{y:.6f}"])
    if plot_path is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 5))
        uniq = list(dict.fromkeys(labels))
        cmap = plt.get_cmap("tab20", max(len(uniq), 1))
        for i, lab in enumerate(uniq):
            sel = [k for k, l in enumerate(labels) if l == lab]
            ax.scatter(coords[sel, 0], coords[sel, 1], color=cmap(i), label=lab, s=30)
        ax.legend(fontsize=7, loc="best")
        ax.set_title("speaker embeddings")
        fig.tight_layout()
        fig.savefig(plot_path, dpi=120)
        plt.close(fig)
    return coords


# ---------------------------------------------------------------------------
# intelligibility


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Edit distance with unit costs, two-row dynamic program."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def error_rate(hypothesis: Sequence, reference: Sequence) -> float:
    """Edit distance over reference length, in percent."""
    if len(reference) == 0:
        raise EvaluationError("empty reference")
    return 100.0 * levenshtein(hypothesis, reference) / len(reference)


ASRAdapter = Callable[[str], Sequence[str]]


@dataclass
class IntelligibilityRow:
    wav: str
    reference: list[str]
    hypothesis: list[str]
    error_rate: float


def intelligibility_hook(
    wavs: Sequence[str | Path],
    transcripts: Sequence[Sequence[str]],
    asr_adapter: ASRAdapter | None,
    csv_path: str | Path | None = None,
) -> list[IntelligibilityRow] | None:
    """PER or WER (depending on what the adapter and references tokenize) per file.

    Returns ``None`` with a logged notice when no adapter is registered.
    """
    if asr_adapter is None:
        log.warning("no ASR adapter registered; intelligibility scoring skipped")
        return None
    if len(wavs) != len(transcripts):
        raise EvaluationError("one transcript per WAV file")
    rows = []
    for wav, ref in zip(wavs, transcripts):
        hyp = list(asr_adapter(str(wav)))
        rows.append(IntelligibilityRow(str(wav), list(ref), hyp, error_rate(hyp, list(ref))))
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["wav", "reference", "hypothesis", "error_rate"])
            for r in rows:
                w.writerow([r.wav, " ".join(r.reference), " ".join(r.hypothesis), f"{r.error_rate:.2f}"])
    return rows
