"""scikit-learn style front end: a density estimator and a color transformer."""
from __future__ import annotations

import math

import numpy as np
import torch
from sklearn.base import BaseEstimator, DensityMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import checkpoint
from .data import ImageDataset, ycocg_lossy, ycocg_lossy_inverse, ycocg_r, ycocg_r_inverse
from .neural import MlpConfig
from .region_graph import build_quad_rg
from .train import TrainConfig, mean_nll, train


def check_pixels(X, num_vars: int | None = None, categories: int | None = None) -> np.ndarray:
    """Validate a 2-D array of categorical pixel values and return it as int64."""
    X = check_array(X, dtype=None, ensure_2d=True)
    if not np.issubdtype(X.dtype, np.integer):
        if not np.all(np.mod(X, 1) == 0):
            raise ValueError("pixel values must be integers")
    X = X.astype(np.int64)
    if num_vars is not None and X.shape[1] != num_vars:
        raise ValueError(f"X has {X.shape[1]} features, but the estimator expects {num_vars}")
    if X.min() < 0 or (categories is not None and X.max() >= categories):
        raise ValueError(f"pixel values must lie in [0, {categories})")
    return X


def check_mask(mask, num_vars: int) -> np.ndarray | None:
    """Boolean marginalization mask of shape ``(num_vars,)`` or ``(n, num_vars)``."""
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] != num_vars or mask.ndim > 2:
        raise ValueError(f"mask must have a trailing axis of {num_vars} variables, got shape {mask.shape}")
    return mask


class QPCDensityEstimator(DensityMixin, BaseEstimator):
    """Density estimator over images of categorical pixels.

    A quad-tree (``rg="qt"``) or quad-graph (``rg="qg"``) region graph is
    compiled into a circuit with ``K`` integration points per latent
    dimension and trained by maximum likelihood.

    Parameters
    ----------
    height, width : int
        Image shape; ``X`` rows are flattened as ``(i*width + j)*channels + c``.
    channels : int, default=1
    categories : int, default=256
    rg : {"qg", "qt"}, default="qg"
    merge : {"cp", "tucker"}, default="cp"
    K : int, default=16
    mode : {"pic", "pc"}, default="pic"
        Neural parameterization or direct tensors.
    input_sharing, inner_sharing : str, default="F", "C"
    mlp_layers, mlp_width : int, default=2, 256
    sigma : float, default=1.0
        Fourier-feature frequency scale.
    mlp_bias : bool, default=True
    batch_size, cycle_steps, patience, max_epochs : int
    max_steps : int or None
    delta : float, default=0.0
        Early-stopping threshold in total validation nats.
    valid_fraction : float, default=0.05
        Share of ``X`` held out for early stopping.
    random_state : int, default=0

    Attributes
    ----------
    model_ : QpcModel
    rg_ : RegionGraph
    history_ : TrainHistory
    n_features_in_ : int
    """

    def __init__(self, height=28, width=28, channels=1, categories=256, rg="qg", merge="cp", K=16, mode="pic",
                 input_sharing="F", inner_sharing="C", mlp_layers=2, mlp_width=256, sigma=1.0, mlp_bias=True,
                 batch_size=256, cycle_steps=250, delta=0.0, patience=5, max_epochs=200, max_steps=None,
                 valid_fraction=0.05, random_state=0):
        self.height = height
        self.width = width
        self.channels = channels
        self.categories = categories
        self.rg = rg
        self.merge = merge
        self.K = K
        self.mode = mode
        self.input_sharing = input_sharing
        self.inner_sharing = inner_sharing
        self.mlp_layers = mlp_layers
        self.mlp_width = mlp_width
        self.sigma = sigma
        self.mlp_bias = mlp_bias
        self.batch_size = batch_size
        self.cycle_steps = cycle_steps
        self.delta = delta
        self.patience = patience
        self.max_epochs = max_epochs
        self.max_steps = max_steps
        self.valid_fraction = valid_fraction
        self.random_state = random_state

    def _model_config(self) -> checkpoint.ModelConfig:
        mlp = MlpConfig(layers=self.mlp_layers, width=self.mlp_width, sigma=self.sigma, bias=self.mlp_bias,
                        seed=self.random_state)
        return checkpoint.ModelConfig(merge=self.merge, K=self.K, categories=self.categories, mode=self.mode,
                                      input_sharing=self.input_sharing, inner_sharing=self.inner_sharing,
                                      mlp=mlp, seed=self.random_state)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, cycle_steps=self.cycle_steps, delta=self.delta,
                           patience=self.patience, max_epochs=self.max_epochs, max_steps=self.max_steps,
                           seed=self.random_state)

    def fit(self, X, y=None, X_valid=None):
        """Train on ``X``; ``X_valid`` overrides the internal hold-out split."""
        if self.rg not in ("qg", "qt"):
            raise ValueError(f"rg must be 'qg' or 'qt', got {self.rg!r}")
        D = self.height * self.width * self.channels
        X = check_pixels(X, D, self.categories)
        if X_valid is None:
            rng = np.random.default_rng(self.random_state)
            perm = rng.permutation(len(X))
            n_valid = min(max(1, round(len(X) * self.valid_fraction)), len(X) - 1)
            X, X_valid = X[perm[:-n_valid]], X[perm[-n_valid:]]
        else:
            X_valid = check_pixels(X_valid, D, self.categories)
        torch.manual_seed(self.random_state)
        self.rg_ = build_quad_rg(self.height, self.width, is_tree=self.rg == "qt", channels=self.channels)
        self.config_ = self._model_config()
        self.model_ = self.config_.build(self.rg_)
        self.history_ = train(self.model_, X, X_valid, self._train_config())
        self.n_features_in_ = D
        return self

    def score_samples(self, X, mask=None) -> np.ndarray:
        """Normalized log-likelihood of each row; masked variables are marginalized out."""
        check_is_fitted(self, "model_")
        X = check_pixels(X, self.n_features_in_, self.categories)
        mask = check_mask(mask, self.n_features_in_)
        with torch.no_grad():
            m = None if mask is None else torch.as_tensor(mask)
            ll = self.model_.forward(torch.as_tensor(X), m) - self.model_.log_partition()
        return ll.numpy()

    def score(self, X, y=None) -> float:
        """Mean normalized log-likelihood in nats."""
        return float(np.mean(self.score_samples(X)))

    def bpd(self, X) -> float:
        """Bits per dimension of ``X``."""
        check_is_fitted(self, "model_")
        X = check_pixels(X, self.n_features_in_, self.categories)
        return mean_nll(self.model_, X) / (self.n_features_in_ * math.log(2))

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        checkpoint.save(path, self.model_, self.config_, self.rg_, {"estimator": self.get_params()})


_TRANSFORMS = {"ycocg_r": (ycocg_r, ycocg_r_inverse), "ycocg_lossy": (ycocg_lossy, ycocg_lossy_inverse)}


class YCoCgTransformer(TransformerMixin, BaseEstimator):
    """Per-pixel RGB to YCoCg transform on rows flattened with channels last.

    Parameters
    ----------
    kind : {"ycocg_r", "ycocg_lossy"}, default="ycocg_r"
    """

    def __init__(self, kind="ycocg_r"):
        self.kind = kind

    def fit(self, X, y=None):
        if self.kind not in _TRANSFORMS:
            raise ValueError(f"kind must be one of {sorted(_TRANSFORMS)}, got {self.kind!r}")
        X = check_pixels(X, categories=256)
        if X.shape[1] % 3:
            raise ValueError("rows must hold a multiple of 3 channel values")
        self.n_features_in_ = X.shape[1]
        return self

    def _apply(self, X, fn):
        check_is_fitted(self, "n_features_in_")
        X = check_pixels(X, self.n_features_in_, 256)
        return fn(X.reshape(len(X), -1, 3)).reshape(len(X), -1)

    def transform(self, X):
        return self._apply(X, _TRANSFORMS[self.kind][0])

    def inverse_transform(self, X):
        return self._apply(X, _TRANSFORMS[self.kind][1])


def as_dataset(X, height: int, width: int, channels: int = 1, categories: int = 256) -> ImageDataset:
    return ImageDataset(check_pixels(X, height * width * channels, categories), height, width, channels, categories)
