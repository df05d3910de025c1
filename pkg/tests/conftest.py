import hashlib
from pathlib import Path

import numpy as np
import pytest

from phraseforge.corpus import ConvContext, PhraseSpan
from phraseforge.encoder import BaseEmbedding
from phraseforge.training import Batch, TrainingExample

FIXTURES = Path(__file__).parent.parent / "fixtures" / "synthetic"


class RandomProvider:
    """Deterministic random unit base embeddings keyed by text. Keeps math
    tests independent of the hashed featurizer."""

    def __init__(self, dim, seed):
        self.dim = dim
        self.seed = seed

    def encode(self, text):
        digest = hashlib.blake2b(text.encode(), digest_size=8,
                                 key=self.seed.to_bytes(8, "little")).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        s = rng.standard_normal(self.dim)
        e = rng.standard_normal(self.dim)
        return BaseEmbedding(s / np.linalg.norm(s), e / np.linalg.norm(e))

    def encode_batch(self, texts):
        return [self.encode(t) for t in texts]

    def describe(self):
        return f"random-provider(dim={self.dim}, seed={self.seed})"


class ConstantProvider:
    """Same base embedding for every text; makes every score identical."""

    def __init__(self, dim):
        self.dim = dim
        vec = np.zeros(dim)
        vec[0] = 1.0
        self._emb = BaseEmbedding(vec, vec.copy())

    def encode(self, text):
        return self._emb

    def encode_batch(self, texts):
        return [self._emb for _ in texts]

    def describe(self):
        return f"constant-provider(dim={self.dim})"


def make_batch(size, tag=0, with_prev="every-other"):
    """Synthetic batch; prev contexts on even examples unless specified."""
    examples = []
    for i in range(size):
        has_prev = {"every-other": i % 2 == 0, "all": True, "none": False}[with_prev]
        ctx = ConvContext(f"c{i}", 2 if has_prev else 1,
                          f"question {i} tag {tag}", 64)
        prev = (ConvContext(f"c{i}", 1, f"prior {i} tag {tag}", 64)
                if has_prev else None)
        span = PhraseSpan(f"p{i}", 0, 1, f"answer {i}")
        examples.append(TrainingExample(ctx, span, f"phrase {i} tag {tag}", prev))
    return Batch(examples)


@pytest.fixture(scope="session")
def rand_provider():
    return RandomProvider(8, 99)
