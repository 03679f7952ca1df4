"""scikit-learn style wrappers.

``FreqMixTransformer`` turns images into flat spectral descriptors and fits in a
``Pipeline``.  ``FederatedClassifier`` trains a whole simulated federation on
``fit`` and predicts by averaging the clients' personalised softmax outputs.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .federation import ClientData, Federation, RoundConfig
from .models import ModelConfig, layer_rng
from .spectral import DEFAULT_BANDS, DEFAULT_CUTOFF, DEFAULT_SECTORS, attach_cell_codes, freqmix_batch
from .synthdata import dirichlet_partition
from .tensor import Tensor, softmax_rows


def _as_images(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (N, H, W) or (N, C, H, W), got {X.shape}")
    return X


class FreqMixTransformer(BaseEstimator, TransformerMixin):
    """Stateless: band/sector mean log-magnitudes of the low-pass spectrum, one row per image."""

    def __init__(self, cutoff=DEFAULT_CUTOFF, bands=DEFAULT_BANDS, sectors=DEFAULT_SECTORS):
        self.cutoff = cutoff
        self.bands = bands
        self.sectors = sectors

    def fit(self, X, y=None):
        self.n_features_out_ = self.bands * self.sectors
        return self

    def transform(self, X):
        return freqmix_batch(_as_images(X), self.cutoff, self.bands, self.sectors)[:, :, 0]


class FederatedClassifier(BaseEstimator, ClassifierMixin):
    """Image classifier trained by the spectral-prompt federation.

    ``fit(X, y, groups=...)`` takes the client id of every sample; without
    ``groups`` the samples are split across ``num_clients`` by Dirichlet label skew.
    """

    def __init__(self, num_clients=4, rounds=10, lam=0.1, top_k=2, local_epochs=2, lr=0.05,
                 batch_size=16, participation=1.0, dirichlet_gamma=0.5, dim=32, depth=2, patch_size=4,
                 fusion="eca", prompting="psp", retrieval="topk", random_state=0):
        self.num_clients = num_clients
        self.rounds = rounds
        self.lam = lam
        self.top_k = top_k
        self.local_epochs = local_epochs
        self.lr = lr
        self.batch_size = batch_size
        self.participation = participation
        self.dirichlet_gamma = dirichlet_gamma
        self.dim = dim
        self.depth = depth
        self.patch_size = patch_size
        self.fusion = fusion
        self.prompting = prompting
        self.retrieval = retrieval
        self.random_state = random_state

    def fit(self, X, y, groups=None):
        X = _as_images(X)
        self.classes_, y_idx = np.unique(np.asarray(y), return_inverse=True)
        seed = int(self.random_state)
        if groups is None:
            shards = dirichlet_partition(y_idx, self.num_clients, self.dirichlet_gamma,
                                         layer_rng(seed, "partition"))
        else:
            groups = np.asarray(groups)
            shards = [np.flatnonzero(groups == g) for g in np.unique(groups)]
        mcfg = ModelConfig(task="classification", image_size=X.shape[-1], channels=X.shape[1],
                           num_classes=len(self.classes_), patch_size=self.patch_size, dim=self.dim,
                           depth=self.depth, fusion=self.fusion, prompting=self.prompting,
                           retrieval=self.retrieval)
        rcfg = RoundConfig(num_clients=len(shards), rounds=self.rounds, participation=self.participation,
                           local_epochs=self.local_epochs, lr=self.lr, lam=self.lam, top_k=self.top_k,
                           batch_size=self.batch_size, seed=seed)
        desc = self._descriptors(X, mcfg)
        # training data doubles as the per-round evaluation split
        data = [ClientData(X[s], y_idx[s], desc[s], X[s], y_idx[s], desc[s]) for s in shards]
        self.federation_ = Federation.from_client_data(mcfg, rcfg, data, shards)
        self.history_ = self.federation_.run()
        return self

    @staticmethod
    def _descriptors(X, mcfg: ModelConfig) -> np.ndarray:
        return attach_cell_codes(freqmix_batch(X, mcfg.cutoff, mcfg.bands, mcfg.sectors),
                                 mcfg.bands, mcfg.sectors)

    def predict_proba(self, X):
        check_is_fitted(self, "federation_")
        X = _as_images(X)
        fed = self.federation_
        desc = self._descriptors(X, fed.model_config)
        probs = [softmax_rows(Tensor(fed.predict(c.client_id, X, desc))).data for c in fed.clients]
        return np.mean(probs, axis=0)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]
