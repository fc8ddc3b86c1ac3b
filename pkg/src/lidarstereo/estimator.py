"""Scikit-learn style estimator facade over the stereo pipeline.

The estimator trains on an internally generated synthetic scene stream
(the package's only data source), so ``fit`` takes no training arrays;
``predict`` consumes stereo pairs with optional sparse seeds.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .losses import LossWeights
from .model import ModelConfig
from .refine import SparseDisparity
from .scenegen import SceneConfig, StereoSample
from .traineval import TrainConfig, evaluate, train


def _as_pair(item):
    """Normalize one prediction input to (left, right, sparse-or-None)."""
    if isinstance(item, StereoSample):
        return item.image_left, item.image_right, None
    if not isinstance(item, (tuple, list)) or len(item) not in (2, 3):
        raise ValueError("expected (left, right) or (left, right, sparse)")
    left, right = np.asarray(item[0]), np.asarray(item[1])
    sparse = item[2] if len(item) == 3 else None
    if left.ndim != 3 or left.shape[0] != 3 or left.shape != right.shape:
        raise ValueError(f"expected matching [3,H,W] images, got "
                         f"{left.shape} and {right.shape}")
    if sparse is not None and not isinstance(sparse, SparseDisparity):
        raise ValueError("sparse seeds must be a SparseDisparity")
    return left, right, sparse


class SparseStereoEstimator(BaseEstimator):
    """Disparity estimator with LiDAR-seeded iterative refinement.

    Follows the sklearn estimator protocol: constructor stores
    hyper-parameters verbatim, ``fit`` produces trailing-underscore
    attributes, ``get_params``/``set_params`` come from ``BaseEstimator``.
    """

    def __init__(self, steps=200, batch_size=1, max_lr=2e-4,
                 strategy="self-half2", n_points=500, seed=0,
                 scene=None, model=None, weights=None):
        self.steps = steps
        self.batch_size = batch_size
        self.max_lr = max_lr
        self.strategy = strategy
        self.n_points = n_points
        self.seed = seed
        self.scene = scene
        self.model = model
        self.weights = weights

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps, batch_size=self.batch_size, max_lr=self.max_lr,
            strategy=self.strategy, n_points=self.n_points, seed=self.seed,
            scene=self.scene or SceneConfig(),
            model=self.model or ModelConfig(),
            weights=self.weights or LossWeights())

    def fit(self, X=None, y=None):
        """Train on the synthetic stream configured by the constructor.

        ``X`` and ``y`` are accepted for pipeline compatibility and ignored.
        """
        cfg = self._train_config()
        result = train(cfg)
        self.model_ = result.model
        self.curve_ = result.curve
        return self

    def _fitted_model(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit first")
        return self.model_

    def predict(self, X):
        """Predict dense disparity for one pair or a list of pairs.

        Each item is ``(left, right)`` or ``(left, right, sparse)`` with
        [3,H,W] images, or a StereoSample. A single item returns one [H,W]
        map; a list returns a list of maps.
        """
        model = self._fitted_model()
        single = isinstance(X, StereoSample) or (
            isinstance(X, (tuple, list)) and len(X) in (2, 3)
            and not isinstance(X[0], (tuple, list, StereoSample)))
        items = [X] if single else list(X)
        preds = [model.predict(*_as_pair(item)) for item in items]
        return preds[0] if single else preds

    def score(self, X=None, y=None):
        """Negative held-out EPE (higher is better, sklearn convention)."""
        model = self._fitted_model()
        return -evaluate(model, self._train_config(), count=10).epe
