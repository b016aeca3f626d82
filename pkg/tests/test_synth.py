from collections import Counter

import numpy as np
import pytest

from wordspot.errors import PageOverflow, UnsupportedCharacter, VocabularyEmpty
from wordspot.evaluation import iou
from wordspot.layout import binarize
from wordspot.synth import CorpusSpec, generate


@pytest.fixture(scope="module")
def corpus():
    return generate(CorpusSpec())


def test_counts_and_split(corpus):
    words = [t for pid in corpus.truth for _, t in corpus.truth[pid].words]
    assert len(words) == 50 * 8
    train = Counter(t for pid in corpus.train for _, t in corpus.truth[pid].words)
    test = Counter(t for pid in corpus.test for _, t in corpus.truth[pid].words)
    assert set(corpus.train).isdisjoint(corpus.test)
    assert all(train[w] == 4 and test[w] == 4 for w in CorpusSpec().vocabulary)
    assert set(test) <= set(train)


def test_single_instance_words_go_to_train():
    c = generate(CorpusSpec(vocabulary=("cat", "dog"), instances=1, pages=2))
    assert c.test == [] and len(c.train) == 2
    assert sum(len(c.truth[p].words) for p in c.train) == 2


def test_deterministic(corpus):
    again = generate(CorpusSpec())
    assert corpus.pages.keys() == again.pages.keys()
    for pid in corpus.pages:
        assert np.array_equal(corpus.pages[pid], again.pages[pid])
        assert corpus.truth[pid] == again.truth[pid]
    other = generate(CorpusSpec(seed=1))
    assert not np.array_equal(other.pages["train000"], corpus.pages["train000"])


def test_boxes_hold_ink_and_do_not_overlap(corpus):
    for pid, page in corpus.pages.items():
        h, w = page.shape
        fg = binarize(page)
        boxes = [b for b, _ in corpus.truth[pid].words]
        for i, (x, y, bw, bh) in enumerate(boxes):
            assert 0 <= x and 0 <= y and x + bw <= w and y + bh <= h
            assert fg[y:y + bh, x:x + bw].any()
            for other in boxes[i + 1:]:
                assert iou((x, y, bw, bh), other) == 0.0
        assert page.dtype == np.uint8


def test_lines_cover_their_words(corpus):
    truth = corpus.truth["test000"]
    assert truth.lines
    for box, _ in truth.words:
        cx, cy = box[0] + box[2] / 2, box[1] + box[3] / 2
        hits = [lid for lid, (x, y, w, h) in truth.lines
                if x <= cx < x + w and y <= cy < y + h]
        assert len(hits) >= 1


def test_errors():
    with pytest.raises(VocabularyEmpty):
        generate(CorpusSpec(vocabulary=()))
    with pytest.raises(UnsupportedCharacter):
        generate(CorpusSpec(vocabulary=("ok", "no-go")))
    with pytest.raises(PageOverflow):
        generate(CorpusSpec(instances=40, pages=2))
