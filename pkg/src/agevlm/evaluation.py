"""Held-out evaluation: answer accuracy, attention-in-mask mass, and the
image-swap sensitivity probe (does the prediction actually depend on the
image?)."""

from __future__ import annotations

import numpy as np

from .data import DataConfig, Vocabulary, encode_sample
from .guidance import aggregate_attention
from .model import Model


def predict_answer(model: Model, sample, vocab: Vocabulary, data_cfg: DataConfig,
                   image=None) -> str:
    """Greedy single-token answer for the prompt, optionally with a swapped image."""
    prompt_ids = np.concatenate([[vocab.bos], vocab.encode(sample.prompt), [vocab.sep]])
    visual = model.encode_image(image if image is not None else sample.image)
    out = model.generate_greedy(prompt_ids.astype(np.int64), visual, max_new=1)
    tid = int(out[-1])
    # vocab_size may exceed the word list; unused ids never match any answer
    return vocab.words[tid] if tid < len(vocab.words) else f"<unused:{tid}>"


def answer_accuracy(model: Model, samples, vocab: Vocabulary, data_cfg: DataConfig,
                    family: str | None = None) -> float:
    subset = [s for s in samples if family is None or s.family == family]
    if not subset:
        raise ValueError(f"no samples for family {family!r}")
    hits = sum(predict_answer(model, s, vocab, data_cfg) == s.answer[0] for s in subset)
    return hits / len(subset)


def attention_in_mask(model: Model, samples, vocab: Vocabulary,
                      data_cfg: DataConfig) -> float:
    """Mean (over guided samples and cross-attention layers) attention mass
    inside the downsampled ground-truth mask."""
    grid = model.config.grid
    masses = []
    for s in samples:
        if s.mask is None:
            continue
        prep = encode_sample(s, vocab, data_cfg)
        visual = model.encode_image(prep.image)
        _, records = model.forward(prep.token_ids, visual, collect_attention=True)
        layer_masses = []
        for rec in records:
            p = aggregate_attention(rec, prep.span, grid).data
            layer_masses.append(float((p * prep.mask_down).sum()))
        masses.append(float(np.mean(layer_masses)))
    if not masses:
        raise ValueError("no guided samples to evaluate")
    return float(np.mean(masses))


def swap_pairs(samples):
    """Deterministic pairs with identical prompts but different answers."""
    by_prompt: dict[tuple, list] = {}
    for s in sorted(samples, key=lambda s: s.id):
        by_prompt.setdefault(tuple(s.prompt), []).append(s)
    pairs = []
    for group in by_prompt.values():
        used = set()
        for i, a in enumerate(group):
            if i in used:
                continue
            for j in range(i + 1, len(group)):
                if j not in used and group[j].answer != a.answer:
                    pairs.append((a, group[j]))
                    used.update((i, j))
                    break
    return pairs


def image_swap_sensitivity(model: Model, samples, vocab: Vocabulary,
                           data_cfg: DataConfig) -> float:
    """Fraction of probes whose argmax answer changes when the image is
    swapped with a same-prompt, different-answer partner."""
    pairs = swap_pairs(samples)
    if not pairs:
        raise ValueError("no swappable pairs in probe set")
    changed = 0
    probes = 0
    for a, b in pairs:
        for s, other in ((a, b), (b, a)):
            own = predict_answer(model, s, vocab, data_cfg)
            swapped = predict_answer(model, s, vocab, data_cfg, image=other.image)
            probes += 1
            changed += own != swapped
    return changed / probes
