"""Diagnostics: matched-vs-mismatched cosine similarity of pooled modality
representations, attention heatmap export (PGM + CSV), and the fraction of
attention mass landing on padded image regions."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import AttentionRecord
from .data import DataConfig, Vocabulary, encode_sample
from .guidance import QuerySpan, aggregate_attention
from .model import Model

HIST_BIN_WIDTH = 0.05


@dataclass
class SimilarityReport:
    matched: list
    mismatched: list
    auc: float
    bin_edges: list = field(default_factory=list)
    matched_hist: list = field(default_factory=list)
    mismatched_hist: list = field(default_factory=list)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.dot(u, v) / (nu * nv))


def rank_auc(positives, negatives) -> float:
    """Mann-Whitney AUC from rank statistics (midranks for ties)."""
    pos = np.asarray(positives, dtype=np.float64)
    neg = np.asarray(negatives, dtype=np.float64)
    combined = np.concatenate([pos, neg])
    order = np.argsort(combined, kind="stable")
    ranks = np.empty(len(combined))
    sorted_vals = combined[order]
    i = 0
    while i < len(sorted_vals):
        j = i
        while j + 1 < len(sorted_vals) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = ranks[:len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def _derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    while True:
        perm = rng.permutation(n)
        if n == 1 or not np.any(perm == np.arange(n)):
            return perm


def pooled_vectors(model: Model, sample, vocab: Vocabulary, data_cfg: DataConfig):
    """Mean-pooled adapter visual tokens and final-layer text hidden states."""
    prep = encode_sample(sample, vocab, data_cfg)
    visual = model.encode_image(prep.image)
    return visual.tokens.data.mean(axis=0), _final_hidden(model, prep, visual).mean(axis=0)


def _final_hidden(model: Model, prep, visual) -> np.ndarray:
    from . import tensor as T
    ids = prep.token_ids
    h = T.add(T.take_rows(model.embed.value, ids),
              T.slice_axis(model.pos_embed.value, 0, 0, len(ids)))
    for layer in model.layers:
        h, _ = layer(h, visual.tokens)
    return model.final_ln(h).data


def similarity_analysis(model: Model, samples, vocab: Vocabulary,
                        data_cfg: DataConfig, pairing_seed: int = 0) -> SimilarityReport:
    if len(samples) < 2:
        raise ValueError("similarity analysis needs at least 2 samples")
    ordered = sorted(samples, key=lambda s: s.id)
    vis, txt = [], []
    for s in ordered:
        v, t = pooled_vectors(model, s, vocab, data_cfg)
        vis.append(v)
        txt.append(t)
    rng = np.random.default_rng(pairing_seed)
    perm = _derangement(len(ordered), rng)
    matched = [cosine_similarity(txt[i], vis[i]) for i in range(len(ordered))]
    mismatched = [cosine_similarity(txt[i], vis[perm[i]]) for i in range(len(ordered))]
    edges = np.round(np.arange(-1.0, 1.0 + HIST_BIN_WIDTH / 2, HIST_BIN_WIDTH), 10)
    m_hist, _ = np.histogram(matched, bins=edges)
    mm_hist, _ = np.histogram(mismatched, bins=edges)
    return SimilarityReport(matched=matched, mismatched=mismatched,
                            auc=rank_auc(matched, mismatched),
                            bin_edges=edges.tolist(),
                            matched_hist=m_hist.tolist(),
                            mismatched_hist=mm_hist.tolist())


def write_similarity_report(report: SimilarityReport, csv_path, summary_path) -> None:
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair_id", "kind", "cosine"])
        for i, c in enumerate(report.matched):
            writer.writerow([i, "matched", repr(c)])
        for i, c in enumerate(report.mismatched):
            writer.writerow([i, "mismatched", repr(c)])
    summary = {
        "matched_mean": float(np.mean(report.matched)),
        "mismatched_mean": float(np.mean(report.mismatched)),
        "auc": report.auc,
    }
    Path(summary_path).write_text(json.dumps(summary, indent=1, sort_keys=True))


def normalize_heatmap(p: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; constant maps stay constant (at 0)."""
    lo, hi = p.min(), p.max()
    if hi == lo:
        return np.zeros_like(p)
    return (p - lo) / (hi - lo)


def export_attention_heatmap(record: AttentionRecord, span: QuerySpan,
                             grid: tuple[int, int], path) -> None:
    """Write an 8-bit binary PGM (P5) of the aggregated map plus a raw CSV."""
    p = aggregate_attention(record, span, grid).data
    norm = normalize_heatmap(p)
    h, w = grid
    pixels = np.round(norm * 255.0).astype(np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in p:
            writer.writerow([repr(float(v)) for v in row])


def padding_attention_mass(p: np.ndarray, pad_region: np.ndarray) -> float:
    pad_region = np.asarray(pad_region, dtype=bool)
    if pad_region.shape != p.shape:
        raise ValueError(f"pad region {pad_region.shape} vs attention {p.shape}")
    return float(p[pad_region].sum())
