import numpy as np
import pytest

from phraseforge.corpus import Corpus, Passage, PhraseSpan, span_count
from phraseforge.encoder import (HashedFeaturizer, PhraseEmbedding, ProjectionHead,
                                 QueryEmbedding, featurize)
from phraseforge.errors import ConfigurationError, IndexFormatError
from phraseforge.index import (PhraseIndex, brute_force_oracle, build_index, load_index,
                               passages_from_phrases, save_index, score, search_topk)


def make_query(dim, seed):
    rng = np.random.default_rng(seed)
    return QueryEmbedding(rng.standard_normal(dim), rng.standard_normal(dim))


def make_index(n, dim, seed, n_dupes=0):
    rng = np.random.default_rng(seed)
    matrix = rng.standard_normal((n, 2 * dim)).astype(np.float32)
    for _ in range(n_dupes):
        matrix[rng.integers(n)] = matrix[rng.integers(n)]
    spans = [PhraseSpan(f"p{i // 7:04d}", i % 7, i % 7, f"tok{i}") for i in range(n)]
    return PhraseIndex(spans, matrix, dim, "0" * 64)


class TestScore:
    def test_unit_vectors(self):
        q = QueryEmbedding(np.array([1.0, 0.0]), np.array([1.0, 0.0]))
        p = PhraseEmbedding(np.array([1.0, 0.0]), np.array([1.0, 0.0]))
        assert score(q, p) == 2.0

    def test_zero_phrase(self):
        q = make_query(8, 0)
        p = PhraseEmbedding(np.zeros(8), np.zeros(8))
        assert score(q, p) == 0.0

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(1)
        for trial in range(20):
            q = make_query(8, trial)
            p = PhraseEmbedding(rng.standard_normal(8), rng.standard_normal(8))
            want = sum(q.start_vec[j] * p.start_vec[j] for j in range(8)) + \
                sum(q.end_vec[j] * p.end_vec[j] for j in range(8))
            assert score(q, p) == pytest.approx(want, abs=1e-9)

    def test_equals_concatenated_inner_product(self):
        q = make_query(8, 5)
        p = PhraseEmbedding(*make_query(8, 6).concat().reshape(2, 8))
        want = float(np.dot(q.concat(), p.concat()))
        assert score(q, p) == pytest.approx(want, abs=1e-9)

    def test_dim_mismatch(self):
        with pytest.raises(ConfigurationError):
            score(make_query(8, 0), PhraseEmbedding(np.zeros(4), np.zeros(4)))


class TestSearch:
    def test_search_equals_oracle_exactly(self):
        index = make_index(10_000, 8, seed=0, n_dupes=300)
        for qseed in range(5):
            q = make_query(8, 100 + qseed)
            for k in (1, 5, 100):
                got = search_topk(index, q, k)
                want = brute_force_oracle(index, q, k)
                assert [(r.span.key(), r.score, r.rank) for r in got] == \
                    [(r.span.key(), r.score, r.rank) for r in want]

    def test_self_similarity_ranks_first(self):
        provider = HashedFeaturizer(16, 3)
        head = ProjectionHead.identity(16)
        corpus = Corpus.from_passages([
            Passage.from_text("p1", "", "alpha beta gamma"),
            Passage.from_text("p2", "", "delta epsilon zeta"),
        ])
        index = build_index(corpus, head, provider, max_phrase_len=2)
        from phraseforge.encoder import compose_span_text

        target = index.spans[0]
        text = compose_span_text(target, corpus.get(target.passage_id))
        base = featurize(text, 16, 3)
        q = QueryEmbedding(base.start_vec, base.end_vec)
        assert search_topk(index, q, 1)[0].span.key() == target.key()

    def test_zero_query_returns_entry_order(self):
        index = make_index(50, 4, seed=1)
        q = QueryEmbedding(np.zeros(4), np.zeros(4))
        got = search_topk(index, q, 5)
        assert [r.span.key() for r in got] == [s.key() for s in index.spans[:5]]
        assert all(r.score == 0.0 for r in got)

    def test_k_larger_than_index(self):
        index = make_index(7, 4, seed=2)
        assert len(search_topk(index, make_query(4, 3), 100)) == 7
        assert len(brute_force_oracle(index, make_query(4, 3), 100)) == 7

    def test_k_zero_rejected(self):
        index = make_index(5, 4, seed=3)
        with pytest.raises(ConfigurationError):
            search_topk(index, make_query(4, 0), 0)
        with pytest.raises(ConfigurationError):
            brute_force_oracle(index, make_query(4, 0), 0)

    def test_ranks_contiguous_scores_non_increasing(self):
        index = make_index(200, 8, seed=4, n_dupes=50)
        got = search_topk(index, make_query(8, 5), 40)
        assert [r.rank for r in got] == list(range(1, 41))
        scores = [r.score for r in got]
        assert all(a >= b for a, b in zip(scores, scores[1:]))

    def test_growing_k_extends_prefix(self):
        index = make_index(300, 8, seed=6, n_dupes=60)
        q = make_query(8, 7)
        small = search_topk(index, q, 10)
        large = search_topk(index, q, 50)
        assert [r.span.key() for r in large[:10]] == [r.span.key() for r in small]

    def test_dim_mismatch(self):
        index = make_index(5, 4, seed=8)
        with pytest.raises(ConfigurationError):
            search_topk(index, make_query(6, 0), 1)


class TestBuildIndex:
    def setup_method(self):
        self.provider = HashedFeaturizer(8, 1)
        self.head = ProjectionHead.identity(8)

    def test_span_count_formula(self):
        corpus = Corpus.from_passages([Passage.from_text("p", "", "a b c")])
        index = build_index(corpus, self.head, self.provider, max_phrase_len=2)
        assert len(index) == 5 == span_count(3, 2)

    def test_empty_text_passage_contributes_nothing(self):
        corpus = Corpus.from_passages([
            Passage.from_text("p1", "", ""),
            Passage.from_text("p2", "", "x y"),
        ])
        index = build_index(corpus, self.head, self.provider, max_phrase_len=2)
        assert all(s.passage_id == "p2" for s in index.spans)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ConfigurationError):
            build_index(Corpus.from_passages([]), self.head, self.provider, 2)

    def test_entries_ordered_by_passage_then_span(self):
        corpus = Corpus.from_passages([
            Passage.from_text("zz", "", "a b"),
            Passage.from_text("aa", "", "c d"),
        ])
        index = build_index(corpus, self.head, self.provider, max_phrase_len=1)
        assert [s.key() for s in index.spans] == [
            ("aa", 0, 0), ("aa", 1, 1), ("zz", 0, 0), ("zz", 1, 1)]

    def test_rebuild_is_bitwise_identical(self, tmp_path):
        corpus = Corpus.from_passages([Passage.from_text("p", "", "a b c d e")])
        a = build_index(corpus, self.head, self.provider, 3)
        b = build_index(corpus, self.head, self.provider, 3)
        save_index(a, tmp_path / "a.idx")
        save_index(b, tmp_path / "b.idx")
        assert (tmp_path / "a.idx").read_bytes() == (tmp_path / "b.idx").read_bytes()


class TestPassagesFromPhrases:
    def _ranked(self, pids):
        return [type("R", (), {"span": PhraseSpan(p, 0, 0, ""), "score": 0.0,
                               "rank": i + 1})() for i, p in enumerate(pids)]

    def test_dedup_keeps_best_rank_order(self):
        assert passages_from_phrases(self._ranked(["p1", "p1", "p2"]), 10) == ["p1", "p2"]

    def test_single_passage(self):
        assert passages_from_phrases(self._ranked(["p", "p", "p"]), 10) == ["p"]

    def test_cutoff_one(self):
        assert passages_from_phrases(self._ranked(["a", "b", "c"]), 1) == ["a"]

    def test_bad_cutoff(self):
        with pytest.raises(ConfigurationError):
            passages_from_phrases([], 0)


class TestPersistence:
    def setup_method(self):
        self.provider = HashedFeaturizer(8, 2)
        self.head = ProjectionHead.identity(8)
        self.corpus = Corpus.from_passages([
            Passage.from_text("p1", "", "a b c"),
            Passage.from_text("p2", "", "d e"),
        ])
        self.index = build_index(self.corpus, self.head, self.provider, 2)

    def test_roundtrip_bitwise(self, tmp_path):
        path = tmp_path / "x.idx"
        save_index(self.index, path)
        again = load_index(path, corpus=self.corpus)
        assert again.dim == self.index.dim
        assert again.fingerprint == self.index.fingerprint
        assert [s.key() for s in again.spans] == [s.key() for s in self.index.spans]
        assert [s.surface for s in again.spans] == [s.surface for s in self.index.spans]
        assert again.matrix.tobytes() == self.index.matrix.tobytes()

    def test_truncated_file_is_format_error(self, tmp_path):
        path = tmp_path / "x.idx"
        save_index(self.index, path)
        raw = path.read_bytes()
        for cut in (3, 20, len(raw) - 5):
            path.write_bytes(raw[:cut])
            with pytest.raises(IndexFormatError):
                load_index(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "x.idx"
        path.write_bytes(b"NOPE" + b"\x00" * 100)
        with pytest.raises(IndexFormatError, match="not a phrase index"):
            load_index(path)

    def test_fingerprint_mismatch_rejected(self, tmp_path):
        path = tmp_path / "x.idx"
        save_index(self.index, path)
        other = Corpus.from_passages([Passage.from_text("p1", "", "a b c CHANGED")])
        with pytest.raises(IndexFormatError, match="fingerprint"):
            load_index(path, corpus=other)

    def test_load_without_corpus_skips_check(self, tmp_path):
        path = tmp_path / "x.idx"
        save_index(self.index, path)
        again = load_index(path)
        assert len(again) == len(self.index)
