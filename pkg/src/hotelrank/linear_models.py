"""Class-weighted logistic regression and FTRL-Proximal pairwise ranking.

The weighted cross-entropy loss upweights positive rows by a factor alpha
(default: the negative/positive count ratio of the training data). The
pairwise path reduces ranking to classification on within-query feature
differences and trains them online with FTRL-Proximal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import (
    DivergenceError,
    RankModel,
    group_offsets,
    sigmoid,
    softplus,
    standardize_fit,
)


def weighted_ce_loss(w, X, y, alpha: float) -> float:
    """-sum(alpha*y*log(mu) + (1-y)*log(1-mu)) with mu = sigmoid(X w).

    Stabilized through softplus: -log(mu) = softplus(-z), -log(1-mu) = softplus(z).
    """
    z = np.asarray(X, dtype=float) @ np.asarray(w, dtype=float)
    y = np.asarray(y, dtype=float)
    return float(np.sum(alpha * y * softplus(-z) + (1.0 - y) * softplus(z)))


def weighted_ce_grad(w, X, y, alpha: float) -> np.ndarray:
    """Gradient of weighted_ce_loss with respect to w."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    z = X @ np.asarray(w, dtype=float)
    mu = sigmoid(z)
    # d/dz of the row loss: -alpha*y*(1-mu) + (1-y)*mu
    dz = -alpha * y * (1.0 - mu) + (1.0 - y) * mu
    return X.T @ dz


@dataclass
class WeightedLrConfig:
    alpha: float | None = None  # None: use #negatives / #positives
    learning_rate: float = 0.1
    epochs: int = 300
    l2: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def weighted_lr_fit_arrays(
    X: np.ndarray, y: np.ndarray, cfg: WeightedLrConfig
) -> tuple[np.ndarray, float, float, list[float]]:
    """Full-batch gradient descent on the weighted cross-entropy objective.

    Returns (weights, bias, alpha_used, per-epoch losses). The l2 penalty
    applies to the weights only, never the bias. X is used as given; callers
    standardize beforehand.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    n_pos = float(y.sum())
    n_neg = float(n - n_pos)
    if cfg.alpha is not None:
        alpha = cfg.alpha
    else:
        alpha = n_neg / n_pos if n_pos > 0 else 1.0
    w = np.zeros(d)
    b = 0.0
    lr = cfg.learning_rate / max(n, 1)  # scale-free step across dataset sizes
    losses = []
    for epoch in range(cfg.epochs):
        z = X @ w + b
        mu = sigmoid(z)
        dz = -alpha * y * (1.0 - mu) + (1.0 - y) * mu
        gw = X.T @ dz + cfg.l2 * w
        gb = float(dz.sum())
        w -= lr * gw
        b -= lr * gb
        loss = weighted_ce_loss(np.concatenate([w, [b]]), np.column_stack([X, np.ones(n)]), y, alpha)
        loss += 0.5 * cfg.l2 * float(w @ w)
        if not np.isfinite(loss):
            raise DivergenceError(epoch)
        losses.append(loss)
    return w, b, alpha, losses


class WeightedLogisticRegression(RankModel):
    """Pointwise ranker: clicked-or-booked rows are the positive class."""

    kind = "weighted_lr"

    def __init__(self, config: WeightedLrConfig | None = None):
        self.config = config or WeightedLrConfig()

    def fit(self, features, grades, countries=None):
        X = features.values
        y = (np.asarray(grades) > 0).astype(float)
        self._mean, self._std = standardize_fit(X)
        Xs = (X - self._mean) / self._std
        self.w, self.b, self.alpha_used, self.loss_history = weighted_lr_fit_arrays(
            Xs, y, self.config
        )
        self.feature_columns = list(features.columns)
        self.train_srch_ids = np.unique(features.srch_ids)
        return self

    def score_rows(self, features, countries=None):
        self.check_schema(features)
        Xs = (features.values - self._mean) / self._std
        return Xs @ self.w + self.b

    def state(self):
        meta = self._common_state_meta()
        meta.update(
            kind=self.kind,
            alpha_used=self.alpha_used,
            config={
                "alpha": self.config.alpha,
                "learning_rate": self.config.learning_rate,
                "epochs": self.config.epochs,
                "l2": self.config.l2,
                "seed": self.config.seed,
            },
        )
        arrays = {
            "w": self.w,
            "b": np.array([self.b]),
            "mean": self._mean,
            "std": self._std,
            "train_srch_ids": self.train_srch_ids,
        }
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        model = cls(WeightedLrConfig(**meta["config"]))
        model._restore_common(meta, arrays)
        model.w = arrays["w"]
        model.b = float(arrays["b"][0])
        model._mean = arrays["mean"]
        model._std = arrays["std"]
        model.alpha_used = meta["alpha_used"]
        return model


def pairwise_expand(
    X: np.ndarray,
    grades: np.ndarray,
    offsets: np.ndarray,
    cap: int = 100,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Difference-vector pairwise reduction over query groups.

    For each (higher-grade i, lower-grade j) preference inside a query, emit
    x_i - x_j labeled 1 and x_j - x_i labeled 0. At most `cap` preferences
    per query are kept (seeded subsample), so a query yields <= 2*cap rows.
    """
    X = np.asarray(X, dtype=float)
    grades = np.asarray(grades)
    rng = np.random.default_rng(seed)
    rows = []
    labels = []
    for s, e in zip(offsets[:-1], offsets[1:]):
        g = grades[s:e]
        idx = np.arange(s, e)
        better, worse = np.nonzero(g[:, None] > g[None, :])
        if better.size == 0:
            continue
        if better.size > cap:
            pick = rng.choice(better.size, size=cap, replace=False)
            pick.sort()
            better, worse = better[pick], worse[pick]
        for i, j in zip(idx[better], idx[worse]):
            diff = X[i] - X[j]
            rows.append(diff)
            labels.append(1.0)
            rows.append(-diff)
            labels.append(0.0)
    if not rows:
        return np.zeros((0, X.shape[1])), np.zeros(0)
    return np.vstack(rows), np.asarray(labels)


@dataclass
class FtrlConfig:
    alpha: float = 0.1
    beta: float = 1.0
    l1: float = 1.0
    l2: float = 1.0
    epochs: int = 1
    seed: int = 0
    pair_cap: int = 100
    pointwise: bool = False

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.beta < 0 or self.l1 < 0 or self.l2 < 0:
            raise ValueError("beta, l1, l2 must be non-negative")


class FtrlProximal:
    """Per-coordinate FTRL-Proximal state over dense feature rows.

    Maintains the accumulated-gradient vector z and squared-gradient sums n.
    Weights are derived lazily: zero where |z| <= l1, otherwise
    -(z - sign(z) l1) / ((beta + sqrt(n)) / alpha + l2).
    """

    def __init__(self, dim: int, cfg: FtrlConfig):
        self.cfg = cfg
        self.z = np.zeros(dim)
        self.n = np.zeros(dim)

    def current_weights(self) -> np.ndarray:
        cfg = self.cfg
        w = np.zeros_like(self.z)
        active = np.abs(self.z) > cfg.l1
        if np.any(active):
            za = self.z[active]
            denom = (cfg.beta + np.sqrt(self.n[active])) / cfg.alpha + cfg.l2
            w[active] = -(za - np.sign(za) * cfg.l1) / denom
        return w

    def apply_gradient(self, g: np.ndarray):
        """One FTRL-Proximal step from a raw gradient vector."""
        g = np.asarray(g, dtype=float)
        w = self.current_weights()
        sigma = (np.sqrt(self.n + g * g) - np.sqrt(self.n)) / self.cfg.alpha
        self.z += g - sigma * w
        self.n += g * g

    def update_row(self, x: np.ndarray, y: float):
        p = float(sigmoid(x @ self.current_weights()))
        self.apply_gradient((p - y) * x)


class FtrlRanker(RankModel):
    """FTRL-Proximal logistic ranker, pairwise by default."""

    kind = "ftrl"

    def __init__(self, config: FtrlConfig | None = None):
        self.config = config or FtrlConfig()

    def fit(self, features, grades, countries=None):
        cfg = self.config
        X = features.values
        self._mean, self._std = standardize_fit(X)
        Xs = (X - self._mean) / self._std
        grades = np.asarray(grades)
        if cfg.pointwise:
            rows = np.column_stack([Xs, np.ones(len(Xs))])  # bias column
            labels = (grades > 0).astype(float)
        else:
            offsets = group_offsets(features.srch_ids)
            rows, labels = pairwise_expand(
                Xs, grades, offsets, cap=cfg.pair_cap, seed=cfg.seed
            )
        learner = FtrlProximal(rows.shape[1], cfg)
        rng = np.random.default_rng(cfg.seed)
        for _ in range(cfg.epochs):
            order = rng.permutation(len(rows))
            for i in order:
                learner.update_row(rows[i], labels[i])
        self._learner_w = learner.current_weights()
        self.feature_columns = list(features.columns)
        self.train_srch_ids = np.unique(features.srch_ids)
        return self

    def score_rows(self, features, countries=None):
        self.check_schema(features)
        Xs = (features.values - self._mean) / self._std
        if self.config.pointwise:
            return Xs @ self._learner_w[:-1] + self._learner_w[-1]
        return Xs @ self._learner_w

    def state(self):
        meta = self._common_state_meta()
        meta.update(
            kind=self.kind,
            config={
                "alpha": self.config.alpha,
                "beta": self.config.beta,
                "l1": self.config.l1,
                "l2": self.config.l2,
                "epochs": self.config.epochs,
                "seed": self.config.seed,
                "pair_cap": self.config.pair_cap,
                "pointwise": self.config.pointwise,
            },
        )
        arrays = {
            "w": self._learner_w,
            "mean": self._mean,
            "std": self._std,
            "train_srch_ids": self.train_srch_ids,
        }
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        model = cls(FtrlConfig(**meta["config"]))
        model._restore_common(meta, arrays)
        model._learner_w = arrays["w"]
        model._mean = arrays["mean"]
        model._std = arrays["std"]
        return model
