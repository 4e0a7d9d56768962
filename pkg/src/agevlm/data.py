"""Synthetic grounded dataset: shape scenes, question templates, polygon
rasterization, and JSONL + sidecar-binary persistence.

Each sample places 1-3 non-overlapping shapes (square / circle / triangle,
one image channel per shape type) on a noisy background and asks a
templated question about one shape type; the ground-truth mask is that
type's exact pixel footprint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import tensor_from_bytes, tensor_to_bytes
from .guidance import PreparedSample, QuerySpan, downsample_mask
from .model import ImageGrid

PAD, BOS, EOS, SEP = "<pad>", "<bos>", "<eos>", "<sep>"
SHAPES = ("square", "circle", "triangle")
QUADRANTS = ("top-left", "top-right", "bottom-left", "bottom-right")
WORDS = [
    PAD, BOS, EOS, SEP,
    "where", "is", "the", "how", "many", "there", "a",
    "square", "circle", "triangle",
    "yes", "no", "zero", "one", "two", "three",
    *QUADRANTS,
]
COUNT_WORDS = ("zero", "one", "two", "three")


class DataError(ValueError):
    pass


class Vocabulary:
    """Closed word-level vocabulary with fixed special-token ids."""

    def __init__(self, words=WORDS):
        self.words = list(words)
        self.ids = {w: i for i, w in enumerate(self.words)}
        self.pad, self.bos, self.eos, self.sep = (self.ids[w] for w in (PAD, BOS, EOS, SEP))

    def __len__(self):
        return len(self.words)

    def encode(self, tokens) -> np.ndarray:
        try:
            return np.array([self.ids[t] for t in tokens], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> list[str]:
        return [self.words[int(i)] for i in ids]


@dataclass
class DataConfig:
    image_size: int = 32
    patch_size: int = 4
    guided_fraction: float = 0.10
    noise_amplitude: float = 1.0   # background = 0.5 + amp * (U(0,1) - 0.5)
    pad_border: int = 0            # zeroed image border, excluded from placement
    min_shapes: int = 1
    max_shapes: int = 3
    decoy_shapes: int = 0          # distractor shapes with a corrupted signature

    @property
    def grid(self) -> tuple[int, int]:
        s = self.image_size // self.patch_size
        return (s, s)


@dataclass
class GroundingSample:
    id: int
    image: ImageGrid
    prompt: list                  # words, no specials
    answer: list                  # words
    query_span: QuerySpan         # indices into [BOS] + prompt + [SEP]
    family: str                   # where | count | exist
    mask: Optional[np.ndarray] = None      # full-res binary footprint of queried type
    polygon: Optional[list] = None         # clockwise (x, y) vertices, when polygonal


@dataclass
class DatasetManifest:
    split: str
    count: int
    guided_fraction: float
    vocab_file: str
    image_size: int
    grid: tuple
    seed: int


# ---------------------------------------------------------------------------
# rasterization

def _edge_crossings(vertices: np.ndarray, px: np.ndarray, py: np.ndarray):
    inside = np.zeros(px.shape, dtype=bool)
    on_edge = np.zeros(px.shape, dtype=bool)
    n = len(vertices)
    for i in range(n):
        x1, y1 = vertices[i]
        x2, y2 = vertices[(i + 1) % n]
        cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        in_box = ((px >= min(x1, x2)) & (px <= max(x1, x2)) &
                  (py >= min(y1, y2)) & (py <= max(y1, y2)))
        on_edge |= (cross == 0.0) & in_box
        hits = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= hits & (px < xint)
    return inside, on_edge


def rasterize_polygon(vertices, grid: tuple[int, int]) -> np.ndarray:
    """Even-odd fill on pixel centers; points exactly on an edge count inside."""
    verts = np.asarray(vertices, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[0] < 3 or verts.shape[1] != 2:
        raise DataError("degenerate polygon: need at least 3 (x, y) vertices")
    h, w = grid
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    px += 0.5
    py += 0.5
    inside, on_edge = _edge_crossings(verts, px, py)
    return (inside | on_edge).astype(np.uint8)


# ---------------------------------------------------------------------------
# scene construction

def _clockwise(verts: np.ndarray) -> np.ndarray:
    # Screen coordinates (y down): negative shoelace sum means counter-clockwise.
    x, y = verts[:, 0], verts[:, 1]
    area2 = np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    return verts if area2 >= 0 else verts[::-1]


def _place_shape(rng, kind: str, size: int, lo: int, hi: int):
    """Return (footprint mask over full image, bbox, polygon-or-None)."""
    if kind == "square":
        s = size
        r0 = int(rng.integers(lo, hi - s + 1))
        c0 = int(rng.integers(lo, hi - s + 1))
        poly = _clockwise(np.array([[c0, r0], [c0 + s, r0], [c0 + s, r0 + s], [c0, r0 + s]], dtype=float))
        return ("square", (r0, c0, s), (r0, c0, r0 + s, c0 + s), [(int(x), int(y)) for x, y in poly])
    if kind == "circle":
        r = size // 2
        cy = int(rng.integers(lo + r, hi - r))
        cx = int(rng.integers(lo + r, hi - r))
        return ("circle", (cy, cx, r), (cy - r, cx - r, cy + r + 1, cx + r + 1), None)
    s = size
    r0 = int(rng.integers(lo, hi - s))
    c0 = int(rng.integers(lo, hi - s))
    for _ in range(50):
        pts = rng.integers(0, s + 1, size=(3, 2)).astype(float)
        x, y = pts[:, 0], pts[:, 1]
        area2 = abs(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
        if area2 >= 0.5 * s * s:
            break
    verts = _clockwise(pts + np.array([c0, r0], dtype=float))
    poly = [(int(x), int(y)) for x, y in verts]
    return ("triangle", None, (r0, c0, r0 + s + 1, c0 + s + 1), poly)


def _footprint(spec, poly, image_size: int) -> np.ndarray:
    kind, params = spec
    mask = np.zeros((image_size, image_size), dtype=np.uint8)
    if kind == "square":
        r0, c0, s = params
        mask[r0:r0 + s, c0:c0 + s] = 1
    elif kind == "circle":
        cy, cx, r = params
        yy, xx = np.mgrid[0:image_size, 0:image_size]
        mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1
    else:
        mask = rasterize_polygon(poly, (image_size, image_size))
    return mask


def _boxes_overlap(a, b) -> bool:
    return not (a[2] + 1 <= b[0] or b[2] + 1 <= a[0] or a[3] + 1 <= b[1] or b[3] + 1 <= a[1])


def _build_scene(rng, cfg: DataConfig, type_counts: dict[str, int]):
    """Place the requested number of each shape type with disjoint bounding boxes."""
    lo = cfg.pad_border
    hi = cfg.image_size - cfg.pad_border
    if hi - lo < 14:
        raise DataError(f"grid too small to place shapes: usable extent {hi - lo}")
    placed = []   # (kind, footprint, polygon, is_decoy)
    boxes = []
    requests = [(kind, False) for kind, n in type_counts.items() for _ in range(n)]
    requests += [(SHAPES[int(rng.integers(0, 3))], True)
                 for _ in range(cfg.decoy_shapes)]
    for kind, is_decoy in requests:
        for _attempt in range(200):
            size = int(rng.integers(6, 11))
            kind_, params, box, poly = _place_shape(rng, kind, size, lo, hi)
            fp = _footprint((kind_, params), poly, cfg.image_size)
            if fp.sum() == 0:
                continue
            if all(not _boxes_overlap(box, b) for b in boxes):
                placed.append((kind, fp, poly, is_decoy))
                boxes.append(box)
                break
        else:
            return None
    return placed


def _render(rng, cfg: DataConfig, placed) -> ImageGrid:
    s = cfg.image_size
    img = 0.5 + cfg.noise_amplitude * (rng.random((3, s, s)) - 0.5)
    for kind, fp, _poly, is_decoy in placed:
        ch = SHAPES.index(kind)
        region = fp.astype(bool)
        # Decoys bleed into a second channel, so they carry no pure
        # single-channel signature and never satisfy a query.
        hot = {ch, (ch + 1) % 3} if is_decoy else {ch}
        for c in range(3):
            img[c][region] = 1.0 if c in hot else 0.0
    if cfg.pad_border > 0:
        b = cfg.pad_border
        img[:, :b, :] = 0.0
        img[:, -b:, :] = 0.0
        img[:, :, :b] = 0.0
        img[:, :, -b:] = 0.0
    return ImageGrid(np.clip(img, 0.0, 1.0))


def _centroid_quadrant(mask: np.ndarray) -> Optional[str]:
    ys, xs = np.nonzero(mask)
    cy, cx = ys.mean() + 0.5, xs.mean() + 0.5
    h, w = mask.shape
    if abs(cy - h / 2) < 1.0 or abs(cx - w / 2) < 1.0:
        return None
    vert = "top" if cy < h / 2 else "bottom"
    horiz = "left" if cx < w / 2 else "right"
    return f"{vert}-{horiz}"


def generate_synthetic(seed: int, count: int, cfg: DataConfig = DataConfig()):
    """Deterministically build ``count`` samples; returns (samples, vocab)."""
    if count < 1:
        raise DataError("count must be >= 1")
    rng = np.random.default_rng(seed)
    vocab = Vocabulary()
    samples = []
    while len(samples) < count:
        family = ("where", "count", "exist")[int(rng.integers(0, 3))]
        queried = SHAPES[int(rng.integers(0, 3))]
        n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
        if family == "where":
            others = [s for s in SHAPES if s != queried]
            extra = [others[int(rng.integers(0, 2))] for _ in range(n_shapes - 1)]
            types = [queried] + extra
        elif family == "exist" and rng.random() < 0.5:
            others = [s for s in SHAPES if s != queried]
            types = [others[int(rng.integers(0, 2))] for _ in range(n_shapes)]
        else:
            types = [SHAPES[int(rng.integers(0, 3))] for _ in range(n_shapes)]
            if family == "exist" and queried not in types:
                types[0] = queried
        counts: dict[str, int] = {}
        for t in types:
            counts[t] = counts.get(t, 0) + 1
        placed = _build_scene(rng, cfg, counts)
        if placed is None:
            continue
        mask = np.zeros((cfg.image_size, cfg.image_size), dtype=np.uint8)
        polygon = None
        for kind, fp, poly, is_decoy in placed:
            if kind == queried and not is_decoy:
                mask |= fp
                polygon = poly if counts.get(queried) == 1 else None
        if family == "where":
            quad = _centroid_quadrant(mask)
            if quad is None:
                continue
            prompt = ["where", "is", "the", queried]
            answer = [quad]
            span_word = 4
        elif family == "count":
            prompt = ["how", "many", queried]
            answer = [COUNT_WORDS[counts.get(queried, 0)]]
            span_word = 3
        else:
            prompt = ["is", "there", "a", queried]
            answer = ["yes" if counts.get(queried, 0) > 0 else "no"]
            span_word = 4
        image = _render(rng, cfg, placed)
        samples.append(GroundingSample(
            id=len(samples), image=image, prompt=prompt, answer=answer,
            query_span=QuerySpan(span_word, span_word + 1), family=family,
            mask=mask if mask.sum() > 0 else None, polygon=polygon,
        ))
    # Only a seeded subset keeps its mask (participates in guidance).
    maskable = [s for s in samples if s.mask is not None]
    n_guided = int(round(cfg.guided_fraction * len(samples)))
    keep = set()
    if maskable and n_guided > 0:
        idx = rng.permutation(len(maskable))[:n_guided]
        keep = {maskable[i].id for i in idx}
    for s in samples:
        if s.id not in keep:
            s.mask = None
            s.polygon = None
    return samples, vocab


# ---------------------------------------------------------------------------
# encoding for training

def encode_sample(sample: GroundingSample, vocab: Vocabulary, cfg: DataConfig,
                  answer_only: bool = False) -> PreparedSample:
    prompt_ids = np.concatenate([[vocab.bos], vocab.encode(sample.prompt), [vocab.sep]])
    full = np.concatenate([prompt_ids, vocab.encode(sample.answer), [vocab.eos]]).astype(np.int64)
    sep_idx = len(prompt_ids) - 1
    ignore = np.zeros(len(full) - 1, dtype=bool)
    if answer_only:
        ignore[:sep_idx] = True
    mask_down = None
    if sample.mask is not None:
        mask_down = downsample_mask(sample.mask, cfg.grid)
    return PreparedSample(
        token_ids=full, lm_ignore=ignore, image=sample.image,
        span=sample.query_span, mask_down=mask_down, guided=sample.mask is not None,
    )


# ---------------------------------------------------------------------------
# run-length coding and persistence

def rle_encode(mask: np.ndarray) -> list[int]:
    """Alternating run lengths over the flattened mask, starting with zeros."""
    flat = np.asarray(mask, dtype=np.uint8).reshape(-1)
    runs = []
    current, run = 0, 0
    for v in flat:
        if v == current:
            run += 1
        else:
            runs.append(run)
            current, run = v, 1
    runs.append(run)
    return [int(r) for r in runs]


def rle_decode(runs, shape) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=np.uint8)
    pos, val = 0, 0
    for r in runs:
        if val:
            flat[pos:pos + r] = 1
        pos += r
        val ^= 1
    if pos != flat.size:
        raise DataError(f"run lengths cover {pos} cells, expected {flat.size}")
    return flat.reshape(shape)


def write_dataset(path, samples, vocab: Vocabulary, cfg: DataConfig,
                  split: str, seed: int) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    guided = sum(1 for s in samples if s.mask is not None)
    records = []
    with open(root / "images.bin", "wb") as img_fh:
        for s in samples:
            blob = tensor_to_bytes(s.image.pixels)
            offset = img_fh.tell()
            img_fh.write(blob)
            records.append({
                "id": s.id, "prompt": s.prompt, "answer": s.answer,
                "span": [s.query_span.start, s.query_span.end], "family": s.family,
                "mask_rle": None if s.mask is None else rle_encode(s.mask),
                "polygon": s.polygon,
                "image_offset": offset, "image_length": len(blob),
            })
    with open(root / "samples.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (root / "vocab.json").write_text(json.dumps(vocab.words))
    manifest = {
        "split": split, "count": len(samples), "guided_fraction": guided / len(samples),
        "vocab_file": "vocab.json", "image_size": cfg.image_size,
        "grid": list(cfg.grid), "seed": seed, "patch_size": cfg.patch_size,
        "pad_border": cfg.pad_border, "noise_amplitude": cfg.noise_amplitude,
        "min_shapes": cfg.min_shapes, "max_shapes": cfg.max_shapes,
        "decoy_shapes": cfg.decoy_shapes,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_dataset(path):
    """Returns (samples, vocab, manifest dict); errors carry the failing line."""
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    vocab = Vocabulary(json.loads((root / manifest["vocab_file"]).read_text()))
    blob = (root / "images.bin").read_bytes()
    size = manifest["image_size"]
    samples = []
    with open(root / "samples.jsonl") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pixels = tensor_from_bytes(
                    blob[rec["image_offset"]:rec["image_offset"] + rec["image_length"]],
                    f"images.bin @ line {lineno}")
                mask = None
                if rec["mask_rle"] is not None:
                    mask = rle_decode(rec["mask_rle"], (size, size))
                samples.append(GroundingSample(
                    id=rec["id"], image=ImageGrid(pixels), prompt=rec["prompt"],
                    answer=rec["answer"], query_span=QuerySpan(*rec["span"]),
                    family=rec["family"], mask=mask,
                    polygon=None if rec["polygon"] is None else [tuple(v) for v in rec["polygon"]],
                ))
            except (KeyError, ValueError, IndexError, json.JSONDecodeError) as exc:
                raise DataError(f"samples.jsonl line {lineno}: {exc}") from exc
    if len(samples) != manifest["count"]:
        raise DataError(f"manifest count {manifest['count']} != {len(samples)} records")
    return samples, vocab, manifest


def config_from_manifest(manifest: dict) -> DataConfig:
    return DataConfig(
        image_size=manifest["image_size"], patch_size=manifest["patch_size"],
        guided_fraction=manifest["guided_fraction"],
        noise_amplitude=manifest.get("noise_amplitude", 1.0),
        pad_border=manifest.get("pad_border", 0),
        min_shapes=manifest.get("min_shapes", 1),
        max_shapes=manifest.get("max_shapes", 3),
        decoy_shapes=manifest.get("decoy_shapes", 0),
    )
