"""Word-tagged captions, word-class ablations and caption statistics."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import random
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

WORD_CLASSES = ("N", "A", "F", "O")
_CLASS_ALIASES = {
    "N": "N", "noun": "N", "Noun": "N",
    "A": "A", "adj": "A", "AdjAdv": "A",
    "F": "F", "function": "F", "Function": "F",
    "O": "O", "other": "O", "Other": "O",
}

ABLATION_MODES = ("full", "nouns-only", "no-adj-adv", "no-nouns", "no-function-words", "shuffle-words")


@dataclass(frozen=True)
class AnnotatedCaption:
    words: list  # [(surface, class)] with class in WORD_CLASSES
    raw_text: str

    def __post_init__(self):
        words = [(str(s), _CLASS_ALIASES.get(c, c)) for s, c in self.words]
        for s, c in words:
            if c not in WORD_CLASSES:
                raise ValueError(f"word {s!r} has unknown class {c!r}")
        object.__setattr__(self, "words", words)

    @classmethod
    def untagged(cls, text: str) -> AnnotatedCaption:
        """A caption without word classes; usable only with ``full`` mode."""
        return cls(words=[], raw_text=text)

    @property
    def tagged(self) -> bool:
        return bool(self.words) or not self.raw_text.strip()

    def surfaces(self) -> list[str]:
        return [s for s, _ in self.words]


def normalize_whitespace(text: str) -> str:
    """Collapse runs of whitespace and drop spaces before punctuation/clitics."""
    text = " ".join(text.split())
    return re.sub(r" (?=[.,;:!?]|['’]s\b)", "", text)


@dataclass(frozen=True)
class AblationMode:
    name: str
    seed: int | None = None

    def __post_init__(self):
        if self.name not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {self.name!r}")
        if self.name == "shuffle-words" and self.seed is None:
            raise ValueError("shuffle-words needs an explicit seed")


FULL = AblationMode("full")
NOUNS_ONLY = AblationMode("nouns-only")
NO_ADJ_ADV = AblationMode("no-adj-adv")
NO_NOUNS = AblationMode("no-nouns")
NO_FUNCTION_WORDS = AblationMode("no-function-words")


def shuffle_words(seed: int) -> AblationMode:
    return AblationMode("shuffle-words", seed)


_REMOVED_CLASS = {"no-adj-adv": "A", "no-nouns": "N", "no-function-words": "F"}


def apply_ablation(caption: AnnotatedCaption, mode: AblationMode) -> str:
    """Rewrite ``caption`` according to ``mode``.

    ``nouns-only`` keeps each distinct noun once, in first-occurrence order,
    joined by bare commas ("man,grass,fish"). The removal modes keep the
    surviving words in order, single-space separated.
    """
    if mode.name == "full":
        return caption.raw_text
    if not caption.tagged:
        raise ValueError(f"{mode.name} needs word-class tags; caption has none")
    words = caption.words
    if mode.name == "nouns-only":
        return ",".join(dict.fromkeys(s for s, c in words if c == "N"))
    if mode.name == "shuffle-words":
        surfaces = [s for s, _ in words]
        random.Random(mode.seed).shuffle(surfaces)
        return " ".join(surfaces)
    drop = _REMOVED_CLASS[mode.name]
    return " ".join(s for s, c in words if c != drop)


def parse_mode(text: str, seed: int = 0) -> AblationMode:
    text = text.strip().lower().replace("_", "-")
    if text in ("shuffle", "shuffle-words"):
        return shuffle_words(seed)
    return AblationMode(text)


# --- JSONL I/O ---------------------------------------------------------------

def caption_to_json(cap: AnnotatedCaption, cap_id: str) -> dict:
    return {"id": cap_id, "caption": cap.raw_text, "words": [[s, c] for s, c in cap.words]}


def caption_from_json(d: dict) -> tuple[str, AnnotatedCaption]:
    words = d.get("words") or []
    return str(d["id"]), AnnotatedCaption(words=[tuple(w) for w in words], raw_text=d["caption"])


def write_captions_jsonl(path, captions, ids) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cap_id, cap in zip(ids, captions):
            fh.write(json.dumps(caption_to_json(cap, cap_id), ensure_ascii=False) + "\n")


def read_captions_jsonl(path) -> dict[str, AnnotatedCaption]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                cap_id, cap = caption_from_json(json.loads(line))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad caption record ({exc})") from exc
            if cap_id in out:
                raise ValueError(f"{path}:{lineno}: duplicate caption id {cap_id!r}")
            out[cap_id] = cap
    return out


def caption_seed(seed: int, cap_id: str) -> int:
    """Per-caption shuffle seed, so equal-length captions get different permutations."""
    digest = hashlib.sha256(f"{seed}:{cap_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def ablate_corpus(captions: dict[str, AnnotatedCaption], mode: AblationMode) -> dict[str, AnnotatedCaption]:
    """Ablated copies; the output keeps word tags only when words survive intact.

    ``shuffle-words`` draws each caption's permutation from ``caption_seed(mode.seed, id)``.
    """
    out = {}
    base = mode
    for cap_id, cap in captions.items():
        if base.name == "shuffle-words":
            mode = shuffle_words(caption_seed(base.seed, cap_id))
        text = apply_ablation(cap, mode)
        if mode.name in _REMOVED_CLASS:
            kept = [(s, c) for s, c in cap.words if c != _REMOVED_CLASS[mode.name]]
        elif mode.name == "shuffle-words":
            order = list(range(len(cap.words)))
            random.Random(mode.seed).shuffle(order)
            kept = [cap.words[i] for i in order]
        elif mode.name == "full":
            kept = list(cap.words)
        else:
            kept = []
        out[cap_id] = AnnotatedCaption(words=kept, raw_text=text)
    return out


# --- statistics --------------------------------------------------------------

@dataclass
class CaptionStats:
    n: int
    mean_length: float
    median_length: float
    length_hist: list  # [(bin_lo, bin_hi, count)]
    similarity_hist: list  # [(bin_lo, bin_hi, count)], empty without a model
    mean_similarity: float | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["histogram", "bin_lo", "bin_hi", "count"])
        for lo, hi, c in self.length_hist:
            w.writerow(["length", lo, hi, c])
        for lo, hi, c in self.similarity_hist:
            w.writerow(["similarity", f"{lo:.2f}", f"{hi:.2f}", c])
        return buf.getvalue()


def word_count(cap: AnnotatedCaption) -> int:
    return len(cap.words) if cap.words else len(cap.raw_text.split())


def _histogram(values, width: float, origin: float = 0.0) -> list:
    if len(values) == 0:
        return []
    idx = np.floor((np.asarray(values, dtype=np.float64) - origin) / width + 1e-9).astype(np.int64)
    counts = {}
    for k in idx:
        counts[int(k)] = counts.get(int(k), 0) + 1
    return [(origin + k * width, origin + (k + 1) * width, counts[k]) for k in sorted(counts)]


def caption_stats(corpus, state=None, images=None, vocab=None) -> CaptionStats:
    """Length histogram (bin width 5) and, given a model, image-caption cosine histogram (bin width 0.02)."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("caption_stats needs a non-empty corpus")
    lengths = np.array([word_count(c) for c in corpus], dtype=np.float64)
    sims, mean_sim = [], None
    if state is not None:
        if images is None or len(images) != len(corpus):
            raise ValueError("images must be aligned one-to-one with the caption corpus")
        from ralb.encoders import encode_image, encode_texts

        import torch

        with torch.no_grad():
            _, img = encode_image(state, torch.as_tensor(np.asarray(images)))
            _, txt = encode_texts(state, [c.raw_text for c in corpus])
            sims = (img * txt).sum(-1).double().numpy()
        mean_sim = float(sims.mean())
    return CaptionStats(
        n=len(corpus),
        mean_length=float(lengths.mean()),
        median_length=float(np.median(lengths)),
        length_hist=[(int(lo), int(hi), c) for lo, hi, c in _histogram(lengths, 5)],
        similarity_hist=_histogram(sims, 0.02, origin=-1.0) if len(sims) else [],
        mean_similarity=mean_sim,
    )


def read_caption_corpus(path) -> dict[str, AnnotatedCaption]:
    return read_captions_jsonl(Path(path))
