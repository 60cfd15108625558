"""scikit-learn compatible classifier over binary-embedded pixel inputs."""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .attack import AttackConfig
from .losses import softmax
from .training import TrainConfig, evaluate, train
from .validation import check_images, check_labels


class BinaryEmbeddingClassifier(ClassifierMixin, BaseEstimator):
    """Encoder + small CNN trained end to end on uint8 images ``[N, 3, H, W]``.

    Hyper-parameters mirror :class:`p2be.training.TrainConfig`; see there for
    their meaning.  ``embedding_table`` imports a pre-trained ``[256, dim]``
    table (combine with ``freeze_embedding=True`` to keep it fixed).

    Examples
    --------
    >>> from p2be.datasets import make_patterns
    >>> X, y = make_patterns(64, 4, 8)
    >>> clf = BinaryEmbeddingClassifier(encoder="thermometer", dim=8, epochs=1).fit(X, y)
    >>> clf.predict(X[:2]).shape
    (2,)
    """

    def __init__(self, encoder="p2be", dim=64, epochs=100, batch_size=64, lr_start=0.05,
                 lr_end=1e-5, net_momentum=0.9, net_weight_decay=5e-4, emb_lr=1e-4,
                 emb_beta1=0.999, emb_beta2=0.999, emb_weight_decay=1e-4, alpha=12.0,
                 smooth_lambda=1.0, mode="clean-consistency", freeze_embedding=False,
                 widths=(16, 32), attack=None, embedding_table=None, random_state=0):
        self.encoder = encoder
        self.dim = dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.net_momentum = net_momentum
        self.net_weight_decay = net_weight_decay
        self.emb_lr = emb_lr
        self.emb_beta1 = emb_beta1
        self.emb_beta2 = emb_beta2
        self.emb_weight_decay = emb_weight_decay
        self.alpha = alpha
        self.smooth_lambda = smooth_lambda
        self.mode = mode
        self.freeze_embedding = freeze_embedding
        self.widths = widths
        self.attack = attack
        self.embedding_table = embedding_table
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)} - {"seed"}
        params = {k: v for k, v in self.get_params().items() if k in names}
        return TrainConfig(seed=0 if self.random_state is None else int(self.random_state), **params)

    def fit(self, X, y):
        X = check_images(X)
        self.classes_, y_idx = np.unique(np.asarray(y), return_inverse=True)
        y_idx = check_labels(y_idx, len(X))
        result = train(self._train_config(), X, y_idx, attack=self.attack,
                       table=self.embedding_table, n_classes=len(self.classes_))
        self.model_ = result.model
        self.checkpoint_ = result.checkpoint
        self.history_ = result.metrics
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.logits(check_images(X))

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def transform(self, X):
        """Encoded bit planes ``[N, 3*dim, H, W]`` (``[N, 3, H, W]`` floats for rgb)."""
        check_is_fitted(self, "model_")
        return self.model_.encode(check_images(X))

    def attack_error(self, X, y, config: AttackConfig | None = None, seed: int = 0) -> float:
        """Test error under the LS-PGA attack."""
        check_is_fitted(self, "model_")
        y_idx = np.searchsorted(self.classes_, np.asarray(y))
        res = evaluate(self.model_, check_images(X), y_idx, attack=config or AttackConfig(), seed=seed)
        return res.attacked_error

    @property
    def embedding_(self):
        check_is_fitted(self, "model_")
        return self.model_.table
