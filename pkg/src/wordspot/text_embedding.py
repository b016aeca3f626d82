"""Pyramidal binary embeddings of strings: PHOC (characters) and PHOB (bigrams)."""

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCorpus, EmptyString, UnsupportedCharacter, WrongLength

PHOC = "phoc"
PHOB = "phob"

DEFAULT_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789"
DIGITS = "0123456789"

# Common English letter bigrams, roughly by frequency.
_ENGLISH_BIGRAMS = """
th he in er an re on at en nd ti es or te of ed is it al ar st to nt ng
se ha as ou io le ve co me de hi ri ro ic ne ea ra ce li ch ll be ma si
om ur ca el ta la ns di fo ho pe ec pr no ct us ac ot il tr ly nc et ut
ss so rs un lo wa ge ie wh ee wi em ad ol rt po we na ul ni ts mo ow pa
im mi ai sh ir su id os iv ia am fi ci vi pl ig tu ev ld ry mp fe bl ab
gh ty op wo sa ay ex ke fr oo av ag if ap gr od bo sp rd do uc bu ei ov
by rm ep tt oc fa ef cu rn sc gi da yo cr cl du ga qu ue ff ba ey ls va
um pp ua up lu go ht ru ug ds lt pi rc rr eg au ck ew mu br bi pt ak pu
""".split()

DEFAULT_INDEX_BIGRAMS = tuple(_ENGLISH_BIGRAMS[:150])
DEFAULT_WORD_BIGRAMS = DEFAULT_INDEX_BIGRAMS[:50]


@dataclass(frozen=True)
class EmbeddingConfig:
    alphabet: str = DEFAULT_ALPHABET
    char_levels: tuple = (2, 3, 4, 5)
    word_bigrams: tuple = DEFAULT_WORD_BIGRAMS
    word_bigram_levels: tuple = (2,)
    index_bigrams: tuple = DEFAULT_INDEX_BIGRAMS
    index_bigram_levels: tuple = (2,)
    digit_levels_phob: tuple = (2, 3)
    _lookup: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.alphabet)) != len(self.alphabet):
            raise ValueError("alphabet has duplicate characters")
        for name in ("word_bigrams", "index_bigrams"):
            grams = getattr(self, name)
            if len(set(grams)) != len(grams):
                raise ValueError(f"{name} has duplicates")
            if any(len(g) != 2 for g in grams):
                raise ValueError(f"{name} entries must be 2 characters")
        object.__setattr__(self, "_lookup", {c: i for i, c in enumerate(self.alphabet)})

    @property
    def phoc_dim(self):
        return (len(self.alphabet) * sum(self.char_levels)
                + len(self.word_bigrams) * sum(self.word_bigram_levels))

    @property
    def phob_dim(self):
        return (len(self.index_bigrams) * sum(self.index_bigram_levels)
                + len(DIGITS) * sum(self.digit_levels_phob))

    def dim(self, kind):
        return self.phoc_dim if kind == PHOC else self.phob_dim

    def to_dict(self):
        return {
            "alphabet": self.alphabet,
            "char_levels": list(self.char_levels),
            "word_bigrams": list(self.word_bigrams),
            "word_bigram_levels": list(self.word_bigram_levels),
            "index_bigrams": list(self.index_bigrams),
            "index_bigram_levels": list(self.index_bigram_levels),
            "digit_levels_phob": list(self.digit_levels_phob),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            alphabet=d["alphabet"],
            char_levels=tuple(d["char_levels"]),
            word_bigrams=tuple(d["word_bigrams"]),
            word_bigram_levels=tuple(d["word_bigram_levels"]),
            index_bigrams=tuple(d["index_bigrams"]),
            index_bigram_levels=tuple(d["index_bigram_levels"]),
            digit_levels_phob=tuple(d["digit_levels_phob"]),
        )


@dataclass(frozen=True)
class PyramidalTextEmbedding:
    bits: np.ndarray
    kind: str

    def __len__(self):
        return len(self.bits)


def normalize_text(text, cfg):
    """Lowercase and validate against the alphabet."""
    if not text:
        raise EmptyString("empty string")
    text = text.lower()
    for i, c in enumerate(text):
        if c not in cfg._lookup:
            raise UnsupportedCharacter(c, i)
    return text


def occupied_regions(start, length, n, level):
    """Regions of ``level`` occupied by the unit span [start, start+length) of an n-unit string.

    Coordinates are scaled by ``n * level`` so the test is exact integer
    arithmetic. A span occupies a region when at least half of it falls
    inside. Spans shorter than that allows (a region narrower than half the
    span) fall back to the regions of maximal overlap, so every symbol
    marks at least one region per level.
    """
    lo, hi = start * level, (start + length) * level
    span = hi - lo
    inters = [min(hi, (r + 1) * n) - max(lo, r * n) for r in range(level)]
    out = [r for r, inter in enumerate(inters) if 2 * inter >= span]
    if not out:
        best = max(inters)
        out = [r for r, inter in enumerate(inters) if inter == best]
    return out


def _fill(bits, offset, levels, n_symbols, occurrences, n):
    # occurrences: (symbol index, start, length) in character units
    for level in levels:
        for sym, start, length in occurrences:
            for r in occupied_regions(start, length, n, level):
                bits[offset + r * n_symbols + sym] = 1
        offset += level * n_symbols
    return offset


def phoc_encode(text, cfg=EmbeddingConfig()):
    text = normalize_text(text, cfg)
    n = len(text)
    bits = np.zeros(cfg.phoc_dim, dtype=np.uint8)
    chars = [(cfg._lookup[c], i, 1) for i, c in enumerate(text)]
    off = _fill(bits, 0, cfg.char_levels, len(cfg.alphabet), chars, n)
    bg = {g: j for j, g in enumerate(cfg.word_bigrams)}
    grams = [(bg[text[i:i + 2]], i, 2) for i in range(n - 1) if text[i:i + 2] in bg]
    _fill(bits, off, cfg.word_bigram_levels, len(cfg.word_bigrams), grams, n)
    return PyramidalTextEmbedding(bits, PHOC)


def phob_encode(text, cfg=EmbeddingConfig()):
    text = normalize_text(text, cfg)
    n = len(text)
    bits = np.zeros(cfg.phob_dim, dtype=np.uint8)
    bg = {g: j for j, g in enumerate(cfg.index_bigrams)}
    grams = [(bg[text[i:i + 2]], i, 2) for i in range(n - 1) if text[i:i + 2] in bg]
    off = _fill(bits, 0, cfg.index_bigram_levels, len(cfg.index_bigrams), grams, n)
    digits = [(DIGITS.index(c), i, 1) for i, c in enumerate(text) if c in DIGITS]
    _fill(bits, off, cfg.digit_levels_phob, len(DIGITS), digits, n)
    return PyramidalTextEmbedding(bits, PHOB)


def bigram_embedding(bigram, cfg=EmbeddingConfig()):
    if len(bigram) != 2:
        raise WrongLength(f"bigram must have 2 characters, got {len(bigram)}")
    return phob_encode(bigram, cfg)


def encode(text, kind, cfg=EmbeddingConfig()):
    return phoc_encode(text, cfg) if kind == PHOC else phob_encode(text, cfg)


def distinct_bigrams(text):
    seen = []
    for i in range(len(text) - 1):
        g = text[i:i + 2]
        if g not in seen:
            seen.append(g)
    return seen


def select_index_bigrams(corpus, k):
    """Top-``k`` bigrams by occurrence count over ``corpus``.

    Ties break lexicographically. Returns ``(bigrams, coverage)`` where
    coverage is the fraction of all bigram occurrences accounted for.
    """
    if not corpus:
        raise EmptyCorpus("no transcriptions")
    if k < 1:
        raise ValueError("k must be >= 1")
    counts = Counter()
    for text in corpus:
        text = text.lower()
        counts.update(text[i:i + 2] for i in range(len(text) - 1))
    total = sum(counts.values())
    if total == 0:
        raise EmptyCorpus("corpus has no bigrams")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    coverage = sum(c for _, c in ranked) / total
    return [g for g, _ in ranked], coverage


def corpus_config(corpus, base=EmbeddingConfig()):
    """Config whose bigram lists lead with the corpus' most frequent bigrams.

    The lists keep their default lengths; slots the corpus cannot fill are
    topped up from the built-in English ranking. Bigrams with characters
    outside the alphabet are ignored.
    """
    k_idx = len(base.index_bigrams)
    usable = [t.lower() for t in corpus if all(c in base._lookup for c in t.lower())]
    ranked, _ = select_index_bigrams(usable, k_idx) if usable else ([], 0.0)

    def fill(head, target, fallback):
        out = list(head[:target])
        for g in fallback:
            if len(out) >= target:
                break
            if g not in out:
                out.append(g)
        return tuple(out)

    index = fill(ranked, k_idx, base.index_bigrams)
    word = fill(ranked, len(base.word_bigrams), base.word_bigrams + base.index_bigrams)
    return EmbeddingConfig(
        alphabet=base.alphabet,
        char_levels=base.char_levels,
        word_bigrams=word,
        word_bigram_levels=base.word_bigram_levels,
        index_bigrams=index,
        index_bigram_levels=base.index_bigram_levels,
        digit_levels_phob=base.digit_levels_phob,
    )


def write_bigram_list(path, bigrams):
    with open(path, "w", encoding="utf-8") as f:
        for g in bigrams:
            f.write(g + "\n")


def read_bigram_list(path):
    with open(path, encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]
