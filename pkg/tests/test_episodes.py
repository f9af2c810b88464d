import numpy as np
import pytest

from metatext.episodes import (
    ClassSplit,
    CorpusError,
    SamplingError,
    SplitError,
    load_corpus,
    load_split_file,
    make_splits,
    sample_episode,
    tokenize,
)

from conftest import build_corpus, write_jsonl


# ---------------------------------------------------------------------------
# load_corpus


def test_load_corpus_hand_trace(tmp_path):
    # freq: a=2, b=2, c=1; tie a<b lexicographic; ids assigned after reserved 0/1/2
    path = write_jsonl(tmp_path / "c.jsonl", [
        {"text": "a b a", "label": "X"},
        {"text": "b c", "label": "Y"},
    ])
    corpus = load_corpus(path, max_len=16, min_freq=1)
    assert corpus.vocab["a"] == 3
    assert corpus.vocab["b"] == 4
    assert corpus.vocab["c"] == 5
    assert corpus.class_names == ["X", "Y"]
    seq0, cls0 = corpus.documents[0]
    seq1, cls1 = corpus.documents[1]
    assert seq0.tolist() == [3, 4, 3] and corpus.class_names[cls0] == "X"
    assert seq1.tolist() == [4, 5] and corpus.class_names[cls1] == "Y"


def test_load_corpus_truncates_to_max_len(tmp_path):
    path = write_jsonl(tmp_path / "c.jsonl", [{"text": "a b a", "label": "X"}])
    corpus = load_corpus(path, max_len=2)
    assert corpus.documents[0][0].tolist() == [3, 4]


def test_load_corpus_empty_text_flagged_not_dropped(tmp_path):
    path = write_jsonl(tmp_path / "c.jsonl", [
        {"text": "", "label": "X"},
        {"text": "a", "label": "X"},
    ])
    corpus = load_corpus(path, max_len=8)
    assert len(corpus.documents) == 2
    assert corpus.documents[0][0].size == 0
    assert corpus.empty_docs == (0,)


def test_load_corpus_min_freq_maps_to_unk(tmp_path):
    path = write_jsonl(tmp_path / "c.jsonl", [
        {"text": "a a rare", "label": "X"},
    ])
    corpus = load_corpus(path, max_len=8, min_freq=2)
    assert "rare" not in corpus.vocab
    assert corpus.documents[0][0].tolist() == [3, 3, 1]


def test_tokenize_lowercases_and_splits_punctuation():
    assert tokenize("Hello, world!") == ["hello", ",", "world", "!"]
    assert tokenize("A  b\tc") == ["a", "b", "c"]


def test_load_corpus_malformed_line_names_line_number(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text('{"text": "a", "label": "X"}\n{not json}\n')
    with pytest.raises(CorpusError, match="line 2"):
        load_corpus(path, max_len=8)


def test_load_corpus_missing_field_names_line_number(tmp_path):
    path = write_jsonl(tmp_path / "c.jsonl", [{"text": "a"}])
    with pytest.raises(CorpusError, match="line 1"):
        load_corpus(path, max_len=8)


def test_load_corpus_unreadable_path(tmp_path):
    with pytest.raises(OSError):
        load_corpus(tmp_path / "missing.jsonl", max_len=8)


def test_load_corpus_empty_file_rejected(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text("")
    with pytest.raises(CorpusError, match="empty"):
        load_corpus(path, max_len=8)


def test_load_corpus_token_ids_never_pad_or_mask(tmp_path):
    path = write_jsonl(tmp_path / "c.jsonl", [
        {"text": "x y z w q r s t u v", "label": "A"},
        {"text": "x x y", "label": "B"},
    ])
    corpus = load_corpus(path, max_len=32)
    for seq, _ in corpus.documents:
        assert np.all(seq != 0) and np.all(seq != 2)
        assert np.all(seq < corpus.vocab_size)


# ---------------------------------------------------------------------------
# make_splits


def test_make_splits_twenty_five_sixteen():
    corpus = build_corpus(num_classes=41, docs_per_class=2)
    names = corpus.class_names
    split = make_splits(corpus, names[:20], names[20:25], names[25:41])
    assert len(split.train_classes) == 20
    assert len(split.val_classes) == 5
    assert len(split.test_classes) == 16
    assert not split.train_classes & split.test_classes


def test_make_splits_rejects_overlap():
    corpus = build_corpus(num_classes=3)
    with pytest.raises(SplitError, match="both"):
        make_splits(corpus, ["class0"], ["class1"], ["class0"])


def test_make_splits_rejects_unknown_class():
    corpus = build_corpus(num_classes=3)
    with pytest.raises(SplitError, match="unknown"):
        make_splits(corpus, ["class0"], ["class1"], ["nope"])


def test_make_splits_singletons():
    corpus = build_corpus(num_classes=3)
    split = make_splits(corpus, ["class0"], ["class1"], ["class2"])
    assert split.part("train") == (0,)
    assert split.part("val") == (1,)
    assert split.part("test") == (2,)


def test_split_part_unknown_name():
    corpus = build_corpus(num_classes=3)
    split = make_splits(corpus, ["class0"], ["class1"], ["class2"])
    with pytest.raises(SamplingError, match="train/val/test"):
        split.part("validation")


def test_load_split_file_requires_exact_keys(tmp_path):
    path = tmp_path / "s.json"
    path.write_text('{"train": [], "val": []}')
    with pytest.raises(SplitError):
        load_split_file(path)


# ---------------------------------------------------------------------------
# sample_episode


def _full_split(corpus):
    names = corpus.class_names
    return make_splits(corpus, names, [], [])


def test_sample_episode_shapes_paper_protocol():
    # N=5, K=1, q=25 per class: support 5, query 125
    corpus = build_corpus(num_classes=6, docs_per_class=30)
    split = _full_split(corpus)
    ep = sample_episode(corpus, split, "train", 5, 1, 25, np.random.default_rng(0))
    assert len(ep.support) == 5
    assert len(ep.query) == 125
    assert len(set(ep.label_map)) == 5


def test_sample_episode_minimal_one_class():
    corpus = build_corpus(num_classes=1, docs_per_class=2)
    split = _full_split(corpus)
    ep = sample_episode(corpus, split, "train", 1, 1, 1, np.random.default_rng(0))
    assert len(ep.support) == len(ep.query) == 1
    assert ep.support[0][0].tolist() != ep.query[0][0].tolist()


def test_sample_episode_support_query_disjoint_and_balanced():
    corpus = build_corpus(num_classes=6, docs_per_class=10)
    split = _full_split(corpus)
    for seed in range(20):
        ep = sample_episode(corpus, split, "train", 4, 2, 3, np.random.default_rng(seed))
        sup = {tuple(seq.tolist()) for seq, _ in ep.support}
        qry = {tuple(seq.tolist()) for seq, _ in ep.query}
        assert not sup & qry  # documents have unique content in build_corpus
        sup_counts = np.bincount([lbl for _, lbl in ep.support], minlength=4)
        qry_counts = np.bincount([lbl for _, lbl in ep.query], minlength=4)
        assert sup_counts.tolist() == [2] * 4
        assert qry_counts.tolist() == [3] * 4


def test_sample_episode_deterministic_per_seed():
    corpus = build_corpus()
    split = _full_split(corpus)

    def snapshot(seed):
        ep = sample_episode(corpus, split, "train", 3, 2, 2, np.random.default_rng(seed))
        return (ep.label_map,
                tuple(tuple(s.tolist()) for s, _ in ep.support),
                tuple(tuple(s.tolist()) for s, _ in ep.query))

    assert snapshot(7) == snapshot(7)
    distinct = {snapshot(seed) for seed in range(100)}
    assert len(distinct) > 90


def test_sample_episode_insufficient_classes():
    corpus = build_corpus(num_classes=2)
    split = _full_split(corpus)
    with pytest.raises(SamplingError, match="classes"):
        sample_episode(corpus, split, "train", 3, 1, 1, np.random.default_rng(0))


def test_sample_episode_insufficient_documents_names_class():
    corpus = build_corpus(num_classes=3, docs_per_class=3)
    split = _full_split(corpus)
    with pytest.raises(SamplingError, match="class"):
        sample_episode(corpus, split, "train", 3, 2, 2, np.random.default_rng(0))


def test_train_test_episode_classes_disjoint():
    corpus = build_corpus(num_classes=10, docs_per_class=4)
    names = corpus.class_names
    split = make_splits(corpus, names[:5], [], names[5:])
    rng = np.random.default_rng(3)
    train_classes, test_classes = set(), set()
    for _ in range(1000):
        train_classes.update(sample_episode(corpus, split, "train", 2, 1, 1, rng).label_map)
        test_classes.update(sample_episode(corpus, split, "test", 2, 1, 1, rng).label_map)
    assert not train_classes & test_classes
    assert train_classes <= split.train_classes
    assert test_classes <= split.test_classes
