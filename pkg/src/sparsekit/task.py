"""Synthetic sequence task: y_i = (x_i + x_{i-1}) mod V with padding tails.

Each sequence draws i.i.d. token ids and a random true length; positions
past the length are padding (input id 0, target masked out). The previous
token at position 0 is defined as id 0, so y_0 = x_0 and the rule is
uniform across positions. Splits are generated once from the task seed and
are immutable; batch iteration shuffles with a caller-provided generator
so training order is reproducible from the training seed alone.
"""

import numpy as np

from .distill import TokenBatch
from .tensor import rng


class SyntheticTask:
    def __init__(
        self,
        vocab=32,
        seq=16,
        seed=0,
        train_size=2048,
        val_size=512,
        test_size=512,
        min_len=None,
    ):
        if vocab < 2 or seq < 1:
            raise ValueError("need vocab >= 2 and seq >= 1")
        self.vocab = vocab
        self.seq = seq
        self.seed = seed
        self.min_len = max(1, seq // 2) if min_len is None else min_len
        if not 1 <= self.min_len <= seq:
            raise ValueError(f"min_len must be in [1, {seq}]")
        gen = rng(seed)
        self.splits = {
            "train": self._generate(gen, train_size),
            "val": self._generate(gen, val_size),
            "test": self._generate(gen, test_size),
        }

    def _generate(self, gen, size):
        inputs = gen.integers(0, self.vocab, size=(size, self.seq))
        lengths = gen.integers(self.min_len, self.seq + 1, size=size)
        padding = np.arange(self.seq)[None, :] >= lengths[:, None]
        inputs[padding] = 0
        prev = np.concatenate([np.zeros((size, 1), dtype=inputs.dtype), inputs[:, :-1]], axis=1)
        targets = (inputs + prev) % self.vocab
        targets[padding] = 0
        return {"inputs": inputs, "targets": targets, "padding": padding}

    def split(self, name):
        """Full split as (inputs, TokenBatch)."""
        s = self.splits[name]
        return s["inputs"], TokenBatch(s["targets"], s["padding"])

    def size(self, name):
        return len(self.splits[name]["inputs"])

    def iter_batches(self, name, batch_size, gen=None):
        """Yield (inputs, TokenBatch) minibatches, shuffled when gen is given."""
        s = self.splits[name]
        n = len(s["inputs"])
        order = np.arange(n) if gen is None else gen.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            yield s["inputs"][idx], TokenBatch(s["targets"][idx], s["padding"][idx])
