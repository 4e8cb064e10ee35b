"""scikit-learn front end for the certified gradient denoiser."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .denoiser import denoise
from .imaging import psnr
from .network import init_network
from .training import TrainConfig, clamp_negative_weights, train
from .verification import estimate_lipschitz, run_suite

__all__ = ["MoLGradDenoiser"]


class MoLGradDenoiser(TransformerMixin, BaseEstimator):
    """Weight-tied nonnegative network denoiser.

    ``fit`` trains on clean signals (one per row) with fresh Gaussian noise
    each batch, then zeroes the remaining negative weights so the fitted
    denoiser is the gradient of a convex potential.  ``transform`` denoises.

    Parameters
    ----------
    hidden : tuple of int
        Widths ``d_1, ..., d_N``; the input width comes from the data.
    gamma : float
        Half-width of the sReLU quadratic region.
    epochs, batch_size, noise_sigma, alpha_barrier
        See :class:`molgrad.training.TrainConfig`.
    learning_rate, final_learning_rate, final_fraction : float
        Two-phase schedule: the last ``final_fraction`` of the epochs use
        ``final_learning_rate``.
    skip : tuple of int or None
        Optional skip pair ``(a, b)``.
    clamp : bool
        Zero negative weights of layers n >= 2 after training.
    random_state : int
        Seeds initialization, shuffling and noise.
    """

    def __init__(
        self,
        hidden=(512, 256),
        gamma=1.0,
        epochs=100,
        batch_size=16,
        noise_sigma=0.05,
        alpha_barrier=10.0,
        learning_rate=3e-3,
        final_learning_rate=3e-4,
        final_fraction=0.2,
        skip=None,
        clamp=True,
        random_state=0,
    ):
        self.hidden = hidden
        self.gamma = gamma
        self.epochs = epochs
        self.batch_size = batch_size
        self.noise_sigma = noise_sigma
        self.alpha_barrier = alpha_barrier
        self.learning_rate = learning_rate
        self.final_learning_rate = final_learning_rate
        self.final_fraction = final_fraction
        self.skip = skip
        self.clamp = clamp
        self.random_state = random_state

    def _schedule(self):
        K = self.epochs
        if K == 0:
            return ()
        cut = K - int(round(self.final_fraction * K))
        cut = min(max(cut, 1), K)
        sched = [(1, cut, self.learning_rate)]
        if cut < K:
            sched.append((cut + 1, K, self.final_learning_rate))
        return tuple(sched)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        net = init_network([X.shape[1], *self.hidden], gamma=self.gamma, seed=self.random_state, skip=self.skip)
        config = TrainConfig(
            epochs=self.epochs,
            alpha_barrier=self.alpha_barrier,
            lr_schedule=self._schedule(),
            batch_size=self.batch_size,
            noise_sigma=self.noise_sigma,
            seed=self.random_state,
        )
        net, self.history_ = train(config, X, net)
        self.network_ = clamp_negative_weights(net) if self.clamp else net
        return self

    def transform(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return denoise(self.network_, X)

    def score(self, X, y):
        """Mean PSNR (dB) of ``transform(X)`` against clean ``y``."""
        y = check_array(y, dtype=np.float64)
        return float(np.mean([psnr(a, b) for a, b in zip(self.transform(X), y)]))

    def lipschitz(self, X) -> float:
        check_is_fitted(self, "network_")
        return estimate_lipschitz(self.network_, check_array(X, dtype=np.float64))

    def certify(self, **kwargs) -> list:
        """Run the verification suite on the fitted network."""
        check_is_fitted(self, "network_")
        return run_suite(self.network_, **kwargs)
