"""Feature records and text featurization.

Text becomes two categorical channels: boundary-marked character trigrams
with ids from an enumerated vocabulary, and hashed word unigrams/bigrams.
Hashing uses the first 8 bytes of BLAKE2b over the UTF-8 token, read as a
little-endian unsigned 64-bit integer, modulo the bucket count, so ids are
stable across processes and platforms.
"""
import hashlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument

ALPHABET = "#abcdefghijklmnopqrstuvwxyz0123456789?"
_CHAR_ID = {c: i for i, c in enumerate(ALPHABET)}
TRIGRAM_VOCAB = len(ALPHABET) ** 3
DEFAULT_WORD_BUCKETS = 2 ** 18


@dataclass
class FeatureRecord:
    text_fields: dict = field(default_factory=dict)  # name -> str
    categorical: dict = field(default_factory=dict)  # channel -> [(id, weight)]
    dense: dict = field(default_factory=dict)  # channel -> vector

    def __post_init__(self):
        for ch, items in self.categorical.items():
            items = [(int(i), float(w)) for i, w in items]
            for i, w in items:
                if i < 0 or not np.isfinite(w):
                    raise InvalidArgument(f"channel {ch!r}: bad feature ({i}, {w})")
            self.categorical[ch] = items
        self.dense = {k: np.asarray(v, dtype=np.float64) for k, v in self.dense.items()}

    @classmethod
    def from_json(cls, obj):
        obj = obj or {}
        return cls(dict(obj.get("text_fields", {})),
                   {k: [tuple(x) for x in v] for k, v in obj.get("categorical", {}).items()},
                   dict(obj.get("dense", {})))

    def to_json(self):
        out = {}
        if self.text_fields:
            out["text_fields"] = dict(self.text_fields)
        if self.categorical:
            out["categorical"] = {k: [[i, w] for i, w in v] for k, v in self.categorical.items()}
        if self.dense:
            out["dense"] = {k: v.tolist() for k, v in self.dense.items()}
        return out


def _words(text):
    return text.lower().split()


def char_trigrams(text):
    """Boundary-marked character trigrams of each lowercased word, with repeats."""
    out = []
    for w in _words(text):
        s = "#" + "".join(c if c in _CHAR_ID else "?" for c in w) + "#"
        out.extend(s[i:i + 3] for i in range(len(s) - 2))
    return out


def trigram_id(tri):
    a, b, c = (_CHAR_ID[ch] for ch in tri)
    n = len(ALPHABET)
    return (a * n + b) * n + c


def hash_token(token, buckets=DEFAULT_WORD_BUCKETS):
    h = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(h, "little") % buckets


def word_ngrams(text):
    words = _words(text)
    return words + [f"{a} {b}" for a, b in zip(words, words[1:])]


def extract_text_features(text, buckets=DEFAULT_WORD_BUCKETS):
    """Return ``{"trigram": [(id, tf)], "word": [(id, tf)]}`` sorted by id."""
    tri = Counter(trigram_id(t) for t in char_trigrams(text))
    words = Counter(hash_token(t, buckets) for t in word_ngrams(text))
    return {"trigram": sorted((i, float(c)) for i, c in tri.items()),
            "word": sorted((i, float(c)) for i, c in words.items())}
