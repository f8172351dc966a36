"""Deterministic stub classifier for tests: pixel statistics as the pooled
feature layer, a fixed random linear head on top."""

import numpy as np


class StubModel:
    class_names = ["c0", "c1", "c2"]
    feature_dim = 8

    def __init__(self):
        rng = np.random.default_rng(99)
        self.head_weight = rng.normal(size=(3, 8))
        self.head_bias = rng.normal(size=3)

    def features(self, images):
        rows = []
        for img in images:
            img = np.asarray(img, dtype=np.float64)
            rows.append(np.array([
                img[..., 0].mean(), img[..., 1].mean(), img[..., 2].mean(),
                img[..., 0].std(), img[..., 1].std(), img[..., 2].std(),
                img.mean(), img.max(),
            ]) / 255.0)
        return np.stack(rows)


def build_model():
    return StubModel()


class HeadlessModel:
    """Missing the head hooks; used to exercise validation."""

    class_names = ["a"]

    def features(self, images):
        return np.zeros((len(images), 2))
