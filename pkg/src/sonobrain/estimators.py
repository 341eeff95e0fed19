"""Scikit-learn style estimators wrapping the segmentation pipelines.

``BrainExtractor`` trains the volumetric encoder-decoder network on
(volume, mask) pairs and predicts binary masks; ``EllipsoidExtractor`` is
the closed-form baseline that fits and rasterizes an ellipsoid per input.
Both follow the fit/predict protocol with ``get_params``/``set_params``
inherited from BaseEstimator, so they compose with sklearn tooling.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from .ellipsoid import fit_ellipsoid, rasterize_ellipsoid
from .harness import train_arrays
from .metrics import dsc
from .network import Network, NetworkSpec
from .validation import as_mask_batch, as_volume_batch, check_same_batch
from .volume import Mask, Volume


class BrainExtractor(BaseEstimator):
    """Trainable 3D brain extractor.

    Parameters mirror the network hyperparameters (input size ``n`` per
    axis, pooling levels ``l``, kernel ``k``, first-layer filters ``f``)
    plus the training knobs.  ``fit`` holds out ``val_fraction`` of the
    samples for early stopping when there are enough of them.
    """

    def __init__(
        self,
        n: int = 32,
        l: int = 3,
        k: int = 3,
        f: int = 4,
        lr: float = 1e-3,
        max_steps: int = 400,
        batch_size: int = 1,
        val_fraction: float = 0.15,
        val_every: int = 50,
        patience: int = 1,
        threshold: float = 0.5,
        random_state: int = 0,
    ):
        self.n = n
        self.l = l
        self.k = k
        self.f = f
        self.lr = lr
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.val_every = val_every
        self.patience = patience
        self.threshold = threshold
        self.random_state = random_state

    def _spec(self) -> NetworkSpec:
        return NetworkSpec(n=self.n, l=self.l, k=self.k, f=self.f)

    def fit(self, X, y):
        X = as_volume_batch(X)
        y = as_mask_batch(y, like=X)
        check_same_batch(X, y.astype(np.float32))
        spec = self._spec()
        if X.shape[1:] != (self.n,) * 3:
            raise ValueError(
                f"volumes must be {(self.n,) * 3} for this estimator, got {X.shape[1:]}"
            )
        inputs = [X[i][None, None] for i in range(X.shape[0])]
        targets = [y[i].astype(np.float32)[None, None] for i in range(y.shape[0])]
        rng = np.random.default_rng(self.random_state)
        n_val = int(round(self.val_fraction * len(inputs)))
        if n_val >= 1 and len(inputs) - n_val >= 1:
            order = rng.permutation(len(inputs))
            val_idx = set(order[:n_val].tolist())
        else:
            val_idx = set()
        train_x = [v for i, v in enumerate(inputs) if i not in val_idx]
        train_t = [v for i, v in enumerate(targets) if i not in val_idx]
        val_x = [v for i, v in enumerate(inputs) if i in val_idx]
        val_t = [v for i, v in enumerate(targets) if i in val_idx]
        result = train_arrays(
            spec,
            train_x,
            train_t,
            val_x or None,
            val_t or None,
            seed=self.random_state,
            lr=self.lr,
            max_steps=self.max_steps,
            batch_size=self.batch_size,
            val_every=self.val_every,
            patience=self.patience,
            val_threshold=self.threshold,
        )
        self.network_: Network = result.network
        self.loss_curve_ = result.loss_curve
        self.validation_curve_ = result.val_curve
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "network_"):
            raise NotFittedError("this BrainExtractor has not been fitted yet")

    def predict_proba(self, X) -> np.ndarray:
        """Per-voxel brain probabilities, shape (n_samples, d, h, w)."""
        self._check_fitted()
        X = as_volume_batch(X)
        out = np.empty(X.shape, dtype=np.float32)
        with ad.no_grad():
            for i in range(X.shape[0]):
                out[i] = self.network_.forward(
                    ad.Tensor(X[i][None, None]), mode="eval"
                ).values[0, 0]
        return out

    def predict(self, X) -> np.ndarray:
        """Binary masks at the configured threshold."""
        proba = self.predict_proba(X)
        return (proba >= self.threshold).astype(np.uint8)

    def score(self, X, y) -> float:
        """Mean Dice overlap against reference masks."""
        y = as_mask_batch(y)
        pred = self.predict(X)
        scores = [
            dsc(Mask(pred[i]), Mask(y[i])) for i in range(pred.shape[0])
        ]
        return float(np.mean(scores))


class EllipsoidExtractor(BaseEstimator):
    """Closed-form baseline: moment-fit an ellipsoid to each probability
    volume and rasterize it as the predicted mask.  Stateless; ``fit`` only
    validates input."""

    def __init__(self, spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)):
        self.spacing = spacing

    def fit(self, X, y=None):
        as_volume_batch(X)
        self.fitted_ = True
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "fitted_"):
            raise NotFittedError("call fit first")
        X = as_volume_batch(X)
        out = np.zeros(X.shape, dtype=np.uint8)
        for i in range(X.shape[0]):
            vol = Volume(X[i], self.spacing)
            ell = fit_ellipsoid(vol)
            out[i] = rasterize_ellipsoid(ell, vol.grid).data
        return out

    def score(self, X, y) -> float:
        y = as_mask_batch(y)
        pred = self.predict(X)
        return float(np.mean([dsc(Mask(pred[i]), Mask(y[i])) for i in range(len(pred))]))
