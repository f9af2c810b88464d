import json

import numpy as np
import pytest

from metatext.episodes import Corpus, Episode
from metatext.model import FIRST_REAL_ID, ModelConfig


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return path


def build_corpus(num_classes=6, docs_per_class=10, doc_len=4):
    """In-memory corpus where every document has unique, identifiable content:
    doc j of class c is [base + j] * doc_len, so support/query overlap checks
    can key on content."""
    documents = []
    vocab = {"<pad>": 0, "<unk>": 1, "<mask>": 2}
    next_id = FIRST_REAL_ID
    for c in range(num_classes):
        for j in range(docs_per_class):
            tok = f"c{c}d{j}"
            vocab[tok] = next_id
            documents.append((np.full(doc_len, next_id, dtype=np.int64), c))
            next_id += 1
    class_names = [f"class{c}" for c in range(num_classes)]
    return Corpus(documents=documents, vocab=vocab, class_names=class_names)


def random_episode(rng, n_way=3, k_shot=2, q=3, vocab_size=12, min_len=2, max_len=6):
    support, query = [], []
    for c in range(n_way):
        for _ in range(k_shot):
            support.append((rng.integers(FIRST_REAL_ID, vocab_size,
                                         size=rng.integers(min_len, max_len + 1)), c))
        for _ in range(q):
            query.append((rng.integers(FIRST_REAL_ID, vocab_size,
                                       size=rng.integers(min_len, max_len + 1)), c))
    return Episode(support=support, query=query, label_map=tuple(range(n_way)))


@pytest.fixture
def small_model_cfg():
    return ModelConfig(vocab_size=12, d_emb=4, d_h=3, n_way=3)
