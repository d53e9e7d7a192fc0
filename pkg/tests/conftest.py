import numpy as np
import pytest

from xlingmap.embed_io import EmbeddingTable, Vocabulary


class FixedRng:
    """Rng stand-in that replays a fixed uniform field, for gradient checks
    that need a frozen dropout mask."""

    def __init__(self, uniforms):
        self.uniforms = np.asarray(uniforms, dtype=np.float64)

    def uniform(self, size=None):
        if size is None:
            return float(self.uniforms.ravel()[0])
        out = np.broadcast_to(self.uniforms, size) if self.uniforms.shape != tuple(
            np.atleast_1d(size)
        ) else self.uniforms
        return np.reshape(out, size)

    def normal(self, size=None):
        raise NotImplementedError("FixedRng only replays uniforms")


def random_table(n_words, dim, seed=0, prefix="w"):
    rng = np.random.default_rng(seed)
    vocab = Vocabulary([f"{prefix}{i}" for i in range(n_words)])
    return EmbeddingTable(vocab, rng.normal(size=(n_words, dim)))


@pytest.fixture
def tiny_tables():
    return random_table(30, 6, seed=1, prefix="s"), random_table(30, 6, seed=2, prefix="t")
