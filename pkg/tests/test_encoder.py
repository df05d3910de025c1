import hashlib

import numpy as np
import pytest

from phraseforge.corpus import ConvContext, Passage, PhraseSpan
from phraseforge.encoder import (CONTEXT_WINDOW, SPAN_CLOSE, SPAN_OPEN, BaseEmbedding,
                                 HashedFeaturizer, ProjectionHead, compose_span_text,
                                 encode_context, encode_phrase, featurize)
from phraseforge.errors import ConfigurationError, IndexFormatError


def recipe_components(text, dim, seed, mix_scale=4.0):
    """Independent re-implementation of the featurizer recipe: hashed bag plus
    position-weighted start/end mixes, before normalization."""
    tokens = text.split()
    n = len(tokens)
    bag = np.zeros(dim)
    smix = np.zeros(dim)
    emix = np.zeros(dim)
    key = (seed & (2 ** 64 - 1)).to_bytes(8, "little")
    for pos, tok in enumerate(tokens):
        for salt, vec, w in ((b"bag", bag, 1.0),
                             (b"start", smix, mix_scale / (1.0 + pos)),
                             (b"end", emix, mix_scale / (1.0 + (n - 1 - pos)))):
            h = int.from_bytes(
                hashlib.blake2b(tok.encode(), digest_size=8, key=key, person=salt).digest(),
                "little")
            vec[(h >> 1) % dim] += (1.0 if (h & 1) == 0 else -1.0) * w
    return bag, smix, emix


class TestFeaturize:
    def test_deterministic(self):
        a = featurize("the quick brown fox", 64, 7)
        b = featurize("the quick brown fox", 64, 7)
        assert np.array_equal(a.start_vec, b.start_vec)
        assert np.array_equal(a.end_vec, b.end_vec)

    def test_empty_text_is_zero_vector(self):
        e = featurize("", 16, 0)
        assert np.all(e.start_vec == 0.0) and np.all(e.end_vec == 0.0)
        assert not np.any(np.isnan(e.start_vec))

    def test_dim_too_small(self):
        with pytest.raises(ConfigurationError):
            featurize("x", 1, 0)

    def test_seed_changes_embedding(self):
        assert not np.allclose(featurize("x y", 32, 1).start_vec,
                               featurize("x y", 32, 2).start_vec)

    def test_matches_recipe_oracle(self):
        # Recompute bag + mixes independently and apply the normalization.
        for text in ("a b", "b a", "one two three two"):
            bag, smix, emix = recipe_components(text, 64, 7)
            got = featurize(text, 64, 7)
            want_start = (bag + smix) / np.linalg.norm(bag + smix)
            want_end = (bag + emix) / np.linalg.norm(bag + emix)
            np.testing.assert_allclose(got.start_vec, want_start, atol=1e-12)
            np.testing.assert_allclose(got.end_vec, want_end, atol=1e-12)

    def test_token_order_affects_mixes_not_bag(self):
        bag_ab, smix_ab, emix_ab = recipe_components("a b", 64, 7)
        bag_ba, smix_ba, emix_ba = recipe_components("b a", 64, 7)
        assert np.array_equal(bag_ab, bag_ba)
        assert not np.array_equal(smix_ab, smix_ba)
        assert not np.array_equal(emix_ab, emix_ba)
        assert not np.allclose(featurize("a b", 64, 7).start_vec,
                               featurize("b a", 64, 7).start_vec)

    def test_unit_norm(self):
        e = featurize("some words here", 32, 3)
        assert np.linalg.norm(e.start_vec) == pytest.approx(1.0, abs=1e-12)
        assert np.linalg.norm(e.end_vec) == pytest.approx(1.0, abs=1e-12)


def naive_matvec(w, v):
    out = np.zeros(w.shape[0])
    for i in range(w.shape[0]):
        acc = 0.0
        for j in range(w.shape[1]):
            acc += w[i, j] * v[j]
        out[i] = acc
    return out


class TestProjection:
    def setup_method(self):
        self.provider = HashedFeaturizer(16, 5)
        self.ctx = ConvContext("c", 1, "what is this", 64)

    def test_identity_head_is_passthrough(self):
        head = ProjectionHead.identity(16)
        base = self.provider.encode(self.ctx.serialized_text)
        q = encode_context(self.ctx, head, self.provider)
        np.testing.assert_array_equal(q.start_vec, base.start_vec)
        np.testing.assert_array_equal(q.end_vec, base.end_vec)

    def test_scaled_identity_doubles(self):
        head = ProjectionHead(*(2 * np.eye(16) for _ in range(4)))
        base = self.provider.encode(self.ctx.serialized_text)
        q = encode_context(self.ctx, head, self.provider)
        np.testing.assert_allclose(q.start_vec, 2 * base.start_vec)

    def test_matches_naive_matvec_oracle(self):
        rng = np.random.default_rng(0)
        head = ProjectionHead(*(rng.standard_normal((16, 16)) for _ in range(4)))
        base = self.provider.encode(self.ctx.serialized_text)
        q = encode_context(self.ctx, head, self.provider)
        np.testing.assert_allclose(q.start_vec, naive_matvec(head.w_q_start, base.start_vec),
                                   rtol=1e-6)
        np.testing.assert_allclose(q.end_vec, naive_matvec(head.w_q_end, base.end_vec),
                                   rtol=1e-6)

    def test_linearity_in_head(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal((16, 16))
        head1 = ProjectionHead(w, w, w, w)
        head3 = ProjectionHead(3 * w, 3 * w, 3 * w, 3 * w)
        q1 = encode_context(self.ctx, head1, self.provider)
        q3 = encode_context(self.ctx, head3, self.provider)
        np.testing.assert_allclose(q3.start_vec, 3 * q1.start_vec, rtol=1e-12)

    def test_dim_mismatch(self):
        head = ProjectionHead.identity(8)
        with pytest.raises(ConfigurationError):
            encode_context(self.ctx, head, self.provider)


class TestEncodePhrase:
    def setup_method(self):
        self.provider = HashedFeaturizer(32, 9)
        self.head = ProjectionHead.identity(32)

    def test_identity_head_equals_composed_featurize(self):
        passage = Passage.from_text("p", "", "alpha beta gamma delta epsilon")
        span = PhraseSpan("p", 1, 2, "beta gamma")
        got = encode_phrase(span, passage, self.head, self.provider)
        want = featurize(compose_span_text(span, passage), 32, 9)
        np.testing.assert_array_equal(got.start_vec, want.start_vec)

    def test_composition_shape(self):
        passage = Passage.from_text("p", "", " ".join(f"t{i}" for i in range(30)))
        span = PhraseSpan("p", 15, 16, "t15 t16")
        words = compose_span_text(span, passage).split()
        # left window, bracketed span, right window, bracketed span again
        assert words[:CONTEXT_WINDOW] == [f"t{i}" for i in range(5, 15)]
        assert words[CONTEXT_WINDOW] == SPAN_OPEN
        assert words[-1] == SPAN_CLOSE
        assert words.count(SPAN_OPEN) == 2 and words.count(SPAN_CLOSE) == 2

    def test_same_surface_different_context_differs(self):
        p1 = Passage.from_text("p1", "", "aa bb target cc dd")
        p2 = Passage.from_text("p2", "", "xx yy target zz ww")
        s1 = PhraseSpan("p1", 2, 2, "target")
        s2 = PhraseSpan("p2", 2, 2, "target")
        e1 = encode_phrase(s1, p1, self.head, self.provider)
        e2 = encode_phrase(s2, p2, self.head, self.provider)
        assert not np.allclose(e1.start_vec, e2.start_vec)

    def test_whole_passage_span_has_empty_windows(self):
        passage = Passage.from_text("p", "", "one two")
        span = PhraseSpan("p", 0, 1, "one two")
        emb = encode_phrase(span, passage, self.head, self.provider)
        assert np.isfinite(emb.start_vec).all()
        words = compose_span_text(span, passage).split()
        assert words[0] == SPAN_OPEN


class TestHeadPersistence:
    def test_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(2)
        head = ProjectionHead(*(rng.standard_normal((8, 8)) for _ in range(4)))
        path = tmp_path / "head.bin"
        head.save(path)
        again = ProjectionHead.load(path)
        for name, mat in head.matrices().items():
            assert np.array_equal(mat, getattr(again, name))

    def test_save_is_deterministic(self, tmp_path):
        head = ProjectionHead.identity(8)
        head.save(tmp_path / "a.bin")
        head.save(tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_truncated_file_rejected(self, tmp_path):
        head = ProjectionHead.identity(8)
        path = tmp_path / "head.bin"
        head.save(path)
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(IndexFormatError):
            ProjectionHead.load(path)

    def test_non_finite_rejected(self):
        bad = np.eye(4)
        bad[0, 0] = np.nan
        with pytest.raises(ConfigurationError):
            ProjectionHead(bad, np.eye(4), np.eye(4), np.eye(4))
