"""scikit-learn style wrappers: a degradation transformer and a trainable restorer."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .config import ModelConfig, desk_scale_preset
from .degrade import CompositeSpec, compose, parse_composite
from .evaluation import restore_image
from .exceptions import ShapeError
from .guidance.providers import StubProviders
from .io import ManifestRow
from .metrics import psnr
from .training import ImageCache, new_train_state, run_training
from .validation import check_image_batch


def _as_list(X):
    return [np.asarray(x, dtype=np.float64) for x in check_image_batch(X)]


def _pack(images):
    shapes = {im.shape for im in images}
    return np.stack(images) if len(shapes) == 1 else images


class DegradationTransformer(TransformerMixin, BaseEstimator):
    """Apply a composite degradation to each image; image ``i`` uses seed offset ``seed ^ i``."""

    def __init__(self, spec: str = "gaussian_noise sigma=25", seed: int = 0):
        self.spec = spec
        self.seed = seed

    def fit(self, X, y=None):
        self.spec_ = self.spec if isinstance(self.spec, CompositeSpec) else parse_composite(self.spec)
        return self

    def transform(self, X):
        if not hasattr(self, "spec_"):
            raise NotFittedError("DegradationTransformer is not fitted")
        return _pack([compose(x, self.spec_, self.seed ^ i) for i, x in enumerate(_as_list(X))])


class GuidedRestorer(BaseEstimator):
    """Guided restoration model trained on in-memory (degraded, clean) pairs.

    ``X`` holds degraded images and ``y`` clean ones, each ``[N, C, H, W]`` or
    a list of ``[C, H, W]`` arrays in ``[0, 1]``.  ``score`` is mean PSNR.
    """

    def __init__(self, config: Optional[ModelConfig] = None, iterations: Optional[int] = None,
                 seed: Optional[int] = None, providers=None):
        self.config = config
        self.iterations = iterations
        self.seed = seed
        self.providers = providers

    def _config(self) -> ModelConfig:
        cfg = self.config or desk_scale_preset()
        if self.iterations is not None:
            cfg = cfg.with_optimizer(total_iterations=int(self.iterations))
        return cfg

    def fit(self, X, y):
        xs, ys = _as_list(X), _as_list(y)
        if len(xs) != len(ys):
            raise ShapeError(f"X has {len(xs)} images but y has {len(ys)}")
        for i, (a, b) in enumerate(zip(xs, ys)):
            if a.shape != b.shape:
                raise ShapeError(f"pair {i}: degraded {a.shape} and clean {b.shape} differ")
        cfg = self._config()
        cache = ImageCache()
        rows = []
        for i, (a, b) in enumerate(zip(xs, ys)):
            rows.append(ManifestRow(f"mem/{i:05d}", f"mem/clean/{i:05d}", "train"))
            cache.put(rows[-1].degraded, a)
            cache.put(rows[-1].clean, b)
        self.providers_ = self.providers or StubProviders.from_config(cfg)
        self.state_ = run_training(new_train_state(cfg, self.seed, xs[0].shape[0]), rows, self.providers_,
                                   cache=cache)
        self.n_iter_ = self.state_.iteration
        return self

    def _check_fitted(self):
        if not hasattr(self, "state_"):
            raise NotFittedError("GuidedRestorer is not fitted")

    def predict(self, X):
        self._check_fitted()
        return _pack([restore_image(self.state_.model, x, self.providers_) for x in _as_list(X)])

    def score(self, X, y) -> float:
        out = self.predict(X)
        return float(np.mean([psnr(a, b) for a, b in zip(out, _as_list(y))]))
