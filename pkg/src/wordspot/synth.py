"""Deterministic synthetic handwritten-like pages with word and line ground truth."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import PageOverflow, UnsupportedCharacter, VocabularyEmpty
from .evaluation import PageTruth
from .text_embedding import DEFAULT_ALPHABET

# 5x9 cells: rows 0-1 ascender, 2-6 body, 7-8 descender.
_GLYPHS = {
    "a": "..... ..... .###. ....# .#### #...# .#### ..... .....",
    "b": "#.... #.... ####. #...# #...# #...# ####. ..... .....",
    "c": "..... ..... .#### #.... #.... #.... .#### ..... .....",
    "d": "....# ....# .#### #...# #...# #...# .#### ..... .....",
    "e": "..... ..... .###. #...# ##### #.... .#### ..... .....",
    "f": "..##. .#... ####. .#... .#... .#... .#... ..... .....",
    "g": "..... ..... .#### #...# #...# #...# .#### ....# .###.",
    "h": "#.... #.... ####. #...# #...# #...# #...# ..... .....",
    "i": "..#.. ..... .##.. ..#.. ..#.. ..#.. .###. ..... .....",
    "j": "...#. ..... ..##. ...#. ...#. ...#. ...#. #..#. .##..",
    "k": "#.... #.... #..#. #.#.. ##... #.#.. #..#. ..... .....",
    "l": ".##.. ..#.. ..#.. ..#.. ..#.. ..#.. .###. ..... .....",
    "m": "..... ..... ##.#. #.#.# #.#.# #.#.# #.#.# ..... .....",
    "n": "..... ..... ####. #...# #...# #...# #...# ..... .....",
    "o": "..... ..... .###. #...# #...# #...# .###. ..... .....",
    "p": "..... ..... ####. #...# #...# #...# ####. #.... #....",
    "q": "..... ..... .#### #...# #...# #...# .#### ....# ....#",
    "r": "..... ..... #.##. ##..# #.... #.... #.... ..... .....",
    "s": "..... ..... .#### #.... .###. ....# ####. ..... .....",
    "t": "..... .#... ####. .#... .#... .#..# ..##. ..... .....",
    "u": "..... ..... #...# #...# #...# #..## .##.# ..... .....",
    "v": "..... ..... #...# #...# #...# .#.#. ..#.. ..... .....",
    "w": "..... ..... #...# #...# #.#.# #.#.# .#.#. ..... .....",
    "x": "..... ..... #...# .#.#. ..#.. .#.#. #...# ..... .....",
    "y": "..... ..... #...# #...# #...# #...# .#### ....# .###.",
    "z": "..... ..... ##### ...#. ..#.. .#... ##### ..... .....",
    "0": ".###. #...# #..## #.#.# ##..# #...# .###. ..... .....",
    "1": "..#.. .##.. ..#.. ..#.. ..#.. ..#.. .###. ..... .....",
    "2": ".###. #...# ....# ...#. ..#.. .#... ##### ..... .....",
    "3": "####. ....# ....# .###. ....# ....# ####. ..... .....",
    "4": "...#. ..##. .#.#. #..#. ##### ...#. ...#. ..... .....",
    "5": "##### #.... ####. ....# ....# #...# .###. ..... .....",
    "6": "..##. .#... #.... ####. #...# #...# .###. ..... .....",
    "7": "##### ....# ...#. ..#.. .#... .#... .#... ..... .....",
    "8": ".###. #...# #...# .###. #...# #...# .###. ..... .....",
    "9": ".###. #...# #...# .#### ....# ...#. .##.. ..... .....",
}
GLYPHS = {c: np.array([[ch == "#" for ch in row] for row in rows.split()], dtype=np.float64)
          for c, rows in _GLYPHS.items()}
GLYPH_ROWS, GLYPH_COLS = 9, 5

DEFAULT_VOCABULARY = (
    "letter", "general", "army", "service", "regiment", "company", "officer",
    "would", "should", "there", "their", "which", "about", "people", "public",
    "country", "honour", "number", "soldiers", "together", "received", "between",
    "necessary", "present", "possible", "without", "against", "captain", "colonel",
    "virginia", "provisions", "quarters", "instructions", "directions", "enemy",
    "march", "camp", "horse", "arms", "money", "time", "great", "might", "could",
    "fort", "orders", "and", "men", "duty", "1755",
)


@dataclass(frozen=True)
class CorpusSpec:
    vocabulary: tuple = DEFAULT_VOCABULARY
    instances: int = 8
    pages: int = 10
    page_size: tuple = (960, 600)       # (w, h) px
    unit: float = 4.0                   # px per glyph cell
    stroke_width: float = 1.0           # in cells
    slant_jitter: float = 0.12
    scale_jitter: float = 0.08
    noise: float = 0.02
    seed: int = 0


@dataclass
class Corpus:
    pages: dict         # page id -> uint8 raster
    truth: dict         # page id -> PageTruth
    train: list         # page ids
    test: list          # page ids


def render_word(word, spec, rng):
    """Render ``word`` as a float ink map (1 = ink) with per-glyph jitter."""
    u = spec.unit * (1 + rng.uniform(-spec.scale_jitter, spec.scale_jitter))
    slant = rng.uniform(-spec.slant_jitter, spec.slant_jitter)
    advance = (GLYPH_COLS + 1) * u
    height = int(np.ceil(GLYPH_ROWS * u + 2 * u))
    width = int(np.ceil(len(word) * advance + abs(slant) * height + 2 * u))
    ink = np.zeros((height, width))
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    pen = u + max(0.0, -slant) * height
    for ch in word:
        g = GLYPHS[ch]
        gu = u * (1 + rng.uniform(-spec.scale_jitter, spec.scale_jitter) / 2)
        dy = rng.uniform(-0.3, 0.3) * u
        # inverse map: page px -> glyph cell, shear about the baseline
        base = u + 7 * u + dy
        cy = (yy - u - dy) / gu
        cx = (xx - pen + slant * (yy - base)) / gu
        inside = (cx >= 0) & (cx < GLYPH_COLS) & (cy >= 0) & (cy < GLYPH_ROWS)
        ci = np.clip(cx.astype(int), 0, GLYPH_COLS - 1)
        ri = np.clip(cy.astype(int), 0, GLYPH_ROWS - 1)
        ink = np.maximum(ink, np.where(inside, g[ri, ci], 0.0))
        pen += advance * (1 + rng.uniform(-0.05, 0.05))
    if spec.stroke_width > 1:
        ink = ndimage.grey_dilation(ink, size=int(round(spec.stroke_width)))
    return ndimage.gaussian_filter(ink, 0.6)


def _split(vocab, instances):
    train, test = [], []
    for w in vocab:
        n_test = instances // 2 if instances > 1 else 0
        train += [w] * (instances - n_test)
        test += [w] * n_test
    return train, test


def _layout(words, spec, rng, n_pages, prefix):
    pages, truth = {}, {}
    W, H = spec.page_size
    margin = int(3 * spec.unit)
    line_h = int(round(13 * spec.unit))
    per_page = -(-len(words) // n_pages) if n_pages else len(words)
    queue = list(words)
    for p in range(n_pages):
        pid = f"{prefix}{p:03d}"
        bg = 0.93 + rng.uniform(-0.02, 0.02)
        canvas = np.full((H, W), bg)
        gt = PageTruth()
        todo, queue = queue[:per_page], queue[per_page:]
        x, y = margin, margin
        line_id, line_boxes = 0, []
        for word in todo:
            ink = render_word(word, spec, rng)
            ih, iw = ink.shape
            if x + iw > W - margin:
                x, y = margin, y + line_h
                line_id += 1
            if y + ih > H - margin or iw > W - 2 * margin:
                raise PageOverflow(f"page {pid}: cannot place {len(todo)} words")
            yj = y + int(rng.integers(-spec.unit // 2, spec.unit // 2 + 1))
            yj = min(max(yj, 0), H - ih)
            dark = rng.uniform(0.8, 0.95)
            region = canvas[yj:yj + ih, x:x + iw]
            np.minimum(region, bg - dark * ink * bg, out=region)
            rows = np.nonzero(ink.max(1) > 0.5)[0]
            cols = np.nonzero(ink.max(0) > 0.5)[0]
            box = (int(x + cols[0]), int(yj + rows[0]),
                   int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))
            gt.words.append((box, word))
            while len(line_boxes) <= line_id:
                line_boxes.append([])
            line_boxes[line_id].append(box)
            x += iw + int(rng.uniform(4, 8) * spec.unit)
        for lid, boxes in enumerate(line_boxes):
            if boxes:
                x0 = min(b[0] for b in boxes)
                y0 = min(b[1] for b in boxes)
                x1 = max(b[0] + b[2] for b in boxes)
                y1 = max(b[1] + b[3] for b in boxes)
                gt.lines.append((f"{pid}-{lid:02d}", (x0, y0, x1 - x0, y1 - y0)))
        canvas = canvas + rng.normal(0.0, spec.noise, canvas.shape)
        pages[pid] = np.clip(np.round(canvas * 255), 0, 255).astype(np.uint8)
        truth[pid] = gt
    return pages, truth


def generate(spec=CorpusSpec()):
    """Render train and test pages.

    Half of each word's instances (rounded down) go to the test pages, the
    rest to the train pages, so every test word also occurs in training.
    """
    if not spec.vocabulary:
        raise VocabularyEmpty("empty vocabulary")
    for w in spec.vocabulary:
        for i, c in enumerate(w):
            if c not in DEFAULT_ALPHABET:
                raise UnsupportedCharacter(c, i)
    rng = np.random.default_rng(spec.seed)
    train_words, test_words = _split(spec.vocabulary, spec.instances)
    rng.shuffle(train_words)
    rng.shuffle(test_words)
    n_test = spec.pages // 2 if test_words else 0
    n_train = spec.pages - n_test
    pages, truth = _layout(train_words, spec, rng, n_train, "train")
    p2, t2 = _layout(test_words, spec, rng, n_test, "test")
    pages.update(p2)
    truth.update(t2)
    return Corpus(pages, truth, sorted(p for p in pages if p.startswith("train")),
                  sorted(p for p in pages if p.startswith("test")))
