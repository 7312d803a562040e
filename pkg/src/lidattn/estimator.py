"""scikit-learn compatible estimator around the LID block."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .attention import AttentionConfig
from .dataio import EmbeddingSequence
from .training import LidModel, LrSchedule, TrainConfig, embed, predict_proba, train_loop


def check_sequences(X, n_features=None):
    """Validate a collection of (n_frames, n_features) sequences.

    ``X`` may be a list of 2-D arrays (lengths may differ) or a 3-D array.
    Returns a list of float64 arrays.
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = list(X)
    if isinstance(X, np.ndarray) and X.ndim != 3:
        raise ValueError(f"expected a list of 2-D sequences or a 3-D array, got shape {X.shape}")
    seqs = [check_array(x, dtype=np.float64, ensure_min_samples=1) for x in X]
    if not seqs:
        raise ValueError("need at least one sequence")
    widths = {s.shape[1] for s in seqs}
    if len(widths) != 1:
        raise ValueError(f"sequences have differing feature counts {sorted(widths)}")
    width = widths.pop()
    if n_features is not None and width != n_features:
        raise ValueError(f"X has {width} features per frame, estimator was fitted with {n_features}")
    return seqs


class AttentiveLidClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Attention + statistics pooling + softmax classifier over frame sequences.

    Parameters
    ----------
    mechanism : {"self", "performer", "agent"}, default="self"
        Attention used before pooling.
    d_attn : int, default=64
        Total attention width over all heads.
    heads : int, default=4
    r : int, default=128
        Random features for performer attention.
    p : int, default=4
        Pooling layers for agent attention (even, > 1).
    n_cap : int or None, default=None
        Upper bound on the number of agents.
    dwc_width : int, default=3
        Odd width of the depth-wise convolution in agent attention.
    performer_normalized : bool, default=True
    dropout : float, default=0.2
    learning_rate : float, default=1e-4
        Peak Adam learning rate.
    max_steps : int, default=200
    batch_size : int, default=16
    warmup_steps, decay_steps : int or None, default=None
        Schedule lengths; ``None`` scales the 80:100 warmup/decay split to
        ``max_steps``.
    eval_every : int, default=20
        Dev evaluation period when ``fit`` receives dev data.
    epsilon : float, default=1e-8
        Variance floor in the pooling layer.
    random_state : int, RandomState or None, default=0

    Attributes
    ----------
    classes_ : ndarray of shape (n_classes,)
    model_ : LidModel
    train_log_ : TrainLog
    n_features_in_ : int
    """

    def __init__(self, mechanism="self", d_attn=64, heads=4, r=128, p=4, n_cap=None, dwc_width=3,
                 performer_normalized=True, dropout=0.2, learning_rate=1e-4, max_steps=200,
                 batch_size=16, warmup_steps=None, decay_steps=None, eval_every=20,
                 epsilon=1e-8, random_state=0):
        self.mechanism = mechanism
        self.d_attn = d_attn
        self.heads = heads
        self.r = r
        self.p = p
        self.n_cap = n_cap
        self.dwc_width = dwc_width
        self.performer_normalized = performer_normalized
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.warmup_steps = warmup_steps
        self.decay_steps = decay_steps
        self.eval_every = eval_every
        self.epsilon = epsilon
        self.random_state = random_state

    def _seed(self):
        if isinstance(self.random_state, (int, np.integer)):
            return int(self.random_state)
        return int(check_random_state(self.random_state).randint(2**31 - 1))

    def _schedule(self):
        if self.warmup_steps is None and self.decay_steps is None:
            return LrSchedule.scaled(self.max_steps, self.learning_rate)
        warmup = self.warmup_steps if self.warmup_steps is not None else 0
        decay = self.decay_steps if self.decay_steps is not None else max(self.max_steps - warmup, 1)
        return LrSchedule(self.learning_rate, warmup, decay)

    def _encode(self, y):
        y = np.asarray(y)
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.all(self.classes_[idx] == y):
            raise ValueError("y contains labels not seen during fit")
        return idx

    def fit(self, X, y, X_dev=None, y_dev=None):
        """Train on sequences ``X`` with labels ``y``.

        When ``X_dev``/``y_dev`` are given, the parameters with the best dev
        accuracy are kept.
        """
        seqs = check_sequences(X)
        y = np.asarray(y)
        if y.shape != (len(seqs),):
            raise ValueError(f"y has shape {y.shape}, expected ({len(seqs)},)")
        check_classification_targets(y)
        self.classes_ = np.unique(y)
        self.n_features_in_ = seqs[0].shape[1]
        config = AttentionConfig(
            mechanism=self.mechanism, d_model=self.n_features_in_, d_attn=self.d_attn,
            heads=self.heads, r=self.r, p=self.p, n_cap=self.n_cap, dwc_width=self.dwc_width,
            performer_normalized=self.performer_normalized,
        )
        seed = self._seed()
        data = [EmbeddingSequence(str(i), int(c), x) for i, (x, c) in enumerate(zip(seqs, self._encode(y)))]
        dev = None
        if X_dev is not None:
            dev_seqs = check_sequences(X_dev, self.n_features_in_)
            dev = [EmbeddingSequence(str(i), int(c), x)
                   for i, (x, c) in enumerate(zip(dev_seqs, self._encode(y_dev)))]
        cfg = TrainConfig(dropout_rate=self.dropout, batch_size=self.batch_size,
                          max_steps=self.max_steps, seed=seed, eval_every=self.eval_every)
        model = LidModel.init(config, len(self.classes_), seed=seed, epsilon=self.epsilon)
        self.model_, self.train_log_ = train_loop(model, data, cfg, self._schedule(), dev)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return predict_proba(self.model_, check_sequences(X, self.n_features_in_))

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def transform(self, X):
        """Pooled ``[mean; std]`` descriptor of each sequence, shape (n, 2 * d_attn)."""
        check_is_fitted(self, "model_")
        return embed(self.model_, check_sequences(X, self.n_features_in_))
