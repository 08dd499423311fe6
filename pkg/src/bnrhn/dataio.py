"""Datasets, vocabularies and checkpoints.

Dataset files are JSON Lines with one ``{"id", "feature", "captions"}``
object per sample. Checkpoints are versioned JSON documents; see FORMATS.md.
"""

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import _tree
from .capmetrics import tokenize
from .vocab import RESERVED, Vocab

__all__ = [
    "CaptionSample",
    "DatasetSpec",
    "DataError",
    "CheckpointError",
    "MalformedCheckpointError",
    "CheckpointVersionError",
    "CheckpointShapeError",
    "FORMAT_VERSION",
    "synth_dataset",
    "build_vocab",
    "read_jsonl",
    "write_jsonl",
    "save_checkpoint",
    "load_checkpoint",
]

FORMAT_VERSION = 1


class DataError(ValueError):
    pass


class CheckpointError(Exception):
    pass


class MalformedCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass(frozen=True)
class CaptionSample:
    id: str
    feature: np.ndarray
    references: tuple

    def __post_init__(self):
        if not self.references or any(len(r) == 0 for r in self.references):
            raise DataError(f"sample {self.id!r} needs at least one non-empty reference")


# Slot pools for the synthetic corpus. None marks an omitted optional slot.
DEFAULT_POOL = {
    "adj": (None, "small", "red", "young", "black"),
    "noun": ("man", "woman", "dog", "cat", "boy", "girl"),
    "verb": ("riding", "holding", "chasing", "watching"),
    "object": ("ball", "bike", "kite", "skateboard"),
    "place": (None, "street", "park", "beach", "field"),
}


def _render(adj, noun, verb, obj, place):
    words = ["a"]
    if adj:
        words.append(adj)
    words += [noun, verb, "a", obj]
    if place:
        words += ["on", "the", place]
    return tuple(words)


@dataclass(frozen=True)
class DatasetSpec:
    n_samples: int = 200
    feature_width: int = 32
    min_len: int = 5
    max_len: int = 9
    seed: int = 0
    noise: float = 0.1
    pool: dict = field(default_factory=lambda: DEFAULT_POOL)

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("a dataset needs at least 2 samples")
        if self.feature_width < 1:
            raise ValueError("feature_width must be positive")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"invalid caption length range [{self.min_len}, {self.max_len}]")


def synth_dataset(spec):
    """Seeded synthetic captioning corpus.

    Each caption fills the template ``a [adj] noun verb a object [on the
    place]``. Its feature vector is the sum of fixed random codes of the
    chosen slot values plus Gaussian noise, so captions are recoverable from
    features and distinct samples never share a caption.
    """
    rng = np.random.default_rng(spec.seed)
    slots = list(spec.pool)
    codes = {
        slot: rng.normal(size=(len(values), spec.feature_width)) / math.sqrt(len(slots))
        for slot, values in spec.pool.items()
    }
    combos = []
    seen = set()
    valid = 0
    for choice in np.ndindex(*(len(spec.pool[s]) for s in slots)):
        n = len(_render(*(spec.pool[s][i] for s, i in zip(slots, choice))))
        valid += spec.min_len <= n <= spec.max_len
    if valid < spec.n_samples:
        raise ValueError(f"only {valid} distinct captions fit the length range; asked for {spec.n_samples}")
    while len(combos) < spec.n_samples:
        choice = tuple(int(rng.integers(len(spec.pool[s]))) for s in slots)
        caption = _render(*(spec.pool[s][i] for s, i in zip(slots, choice)))
        if choice in seen or not spec.min_len <= len(caption) <= spec.max_len:
            continue
        seen.add(choice)
        combos.append((choice, caption))
    samples = []
    for k, (choice, caption) in enumerate(combos):
        feature = sum(codes[s][i] for s, i in zip(slots, choice))
        feature = feature + spec.noise * rng.normal(size=spec.feature_width)
        samples.append(CaptionSample(id=f"s{k:05d}", feature=feature, references=(caption,)))
    return samples


def build_vocab(samples, min_count=1):
    """Tokens with count >= min_count, ordered by descending count then lexicographically."""
    counts = Counter(tok for s in samples for ref in s.references for tok in ref)
    kept = [t for t, k in counts.items() if k >= min_count and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab.from_words(kept)


def read_jsonl(path):
    samples = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                sid = str(obj["id"])
                feature = np.asarray(obj["feature"], dtype=np.float64)
                captions = obj["captions"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed sample ({exc})") from None
            if feature.ndim != 1 or not np.all(np.isfinite(feature)):
                raise DataError(f"{path}:{lineno}: feature must be a flat list of finite numbers")
            if width is None:
                width = feature.shape[0]
            elif feature.shape[0] != width:
                raise DataError(f"{path}:{lineno}: feature width {feature.shape[0]} differs from {width}")
            if isinstance(captions, str):
                captions = [captions]
            refs = tuple(tuple(tokenize(c)) for c in captions)
            samples.append(CaptionSample(id=sid, feature=feature, references=refs))
    return samples


def write_jsonl(samples, path):
    with open(path, "w") as fh:
        for s in samples:
            obj = {
                "id": s.id,
                "feature": [float(v) for v in s.feature],
                "captions": [" ".join(r) for r in s.references],
            }
            fh.write(json.dumps(obj) + "\n")


# --------------------------------------------------------------------------
# checkpoints


def _encode_array(a):
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def save_checkpoint(params, cfg, vocab, path):
    """Write params, the training config and the vocabulary as one JSON document.

    Floats are written with ``repr`` precision, so arrays load back bit-identical.
    """
    from .training import model_architecture

    doc = {
        "format_version": FORMAT_VERSION,
        "config": dict(cfg) if cfg is not None else {},
        "architecture": model_architecture(params),
        "vocab": list(vocab.tokens),
        "params": {k: _encode_array(v) for k, v in _tree.trainable(params).items()},
        "bn_stats": {},
    }
    every = _tree.all_arrays(params)
    for name in _tree.buffer_names(params):
        doc["bn_stats"][name] = _encode_array(every[name])
    doc["bn_updates"] = {name: layer.n_updates for name, layer in _bn_layers(params)}
    with open(path, "w") as fh:
        json.dump(doc, fh)


def _bn_layers(params):
    """``(name, object)`` for everything carrying an ``n_updates`` counter."""
    cell = params.cell
    out = []
    if getattr(cell, "bn_state", None) is not None:
        out += [(f"cell.bn_state.{i}", layer) for i, layer in enumerate(cell.bn_state)]
        out.append(("cell.bn_input", cell.bn_input))
    for k, slot in enumerate(params.step_stats or ()):
        out += [(f"step_stats.{k}.{i}", st) for i, st in enumerate(slot)]
    return out


def load_checkpoint(path):
    """Returns ``(params, config, vocab)``."""
    from dataclasses import replace

    from .training import build_model

    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise MalformedCheckpointError(f"{path}: not a JSON document ({exc})") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise MalformedCheckpointError(f"{path}: missing format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format_version {doc['format_version']} does not match supported version {FORMAT_VERSION}"
        )
    try:
        vocab = Vocab(tuple(doc["vocab"]))
        params = build_model(doc["architecture"])
        mapping = {}
        every = _tree.all_arrays(params)
        stored = dict(doc["params"])
        stored.update(doc["bn_stats"])
        if set(stored) != set(every):
            missing = sorted(set(every) - set(stored))
            extra = sorted(set(stored) - set(every))
            raise CheckpointShapeError(f"{path}: parameter names differ (missing {missing}, unexpected {extra})")
        for name, entry in stored.items():
            shape = tuple(entry["shape"])
            if shape != every[name].shape:
                raise CheckpointShapeError(f"{path}: {name} has shape {shape}, architecture expects {every[name].shape}")
            data = np.asarray(entry["data"], dtype=np.float64)
            if data.size != math.prod(shape):
                raise CheckpointShapeError(f"{path}: {name} holds {data.size} values for shape {shape}")
            mapping[name] = data.reshape(shape)
        params = _tree.replace(params, mapping)
        updates = doc.get("bn_updates", {})
        cell = params.cell
        if cell is not None and getattr(cell, "bn_state", None) is not None:
            bn_state = tuple(
                replace(layer, n_updates=int(updates.get(f"cell.bn_state.{i}", 0)))
                for i, layer in enumerate(cell.bn_state)
            )
            bn_input = replace(cell.bn_input, n_updates=int(updates.get("cell.bn_input", 0)))
            params = replace(params, cell=replace(cell, bn_state=bn_state, bn_input=bn_input))
        if params.step_stats is not None:
            step_stats = tuple(
                tuple(replace(st, n_updates=int(updates.get(f"step_stats.{k}.{i}", 0))) for i, st in enumerate(slot))
                for k, slot in enumerate(params.step_stats)
            )
            params = replace(params, step_stats=step_stats)
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedCheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    return params, doc.get("config", {}), vocab
