"""Mean-pooling comparator head used by the robustness sweep.

Every location of every frame goes through the same rectified projector as
the graph head; the projected features are averaged over all nodes and fed to
an affine classifier. No graph, no propagation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feature_context import flatten_frames
from .gcn import _Model, cross_entropy, glorot
from .numerics import add, matmul, reduce_mean, relu, softmax


@dataclass(frozen=True)
class BaselineHyper:
    c: int = 8


class MeanPoolBaseline(_Model):
    kind = "baseline"

    def __init__(self, c_in: int, c: int = 8, params=None, seed: int = 0):
        self.c_in = c_in
        self.hyper = BaselineHyper(c)
        if params is None:
            rng = np.random.default_rng([seed, 0xB5])
            params = {
                "P": glorot(rng, c_in, c),
                "bias": np.zeros(c),
                "W": glorot(rng, c, 2),
                "b": np.zeros(2),
            }
        self.params = params

    def logits(self, vars_, frames):
        X = relu(add(matmul(flatten_frames(frames), vars_["P"]), vars_["bias"]))
        pooled = reduce_mean(X, axis=-2)
        return add(matmul(pooled, vars_["W"]), vars_["b"]), X

    def loss_terms(self, vars_, frames, labels):
        logits, X = self.logits(vars_, frames)
        ce = reduce_mean(cross_entropy(softmax(logits), labels, 2))
        return ce, ce, reduce_mean(X)
