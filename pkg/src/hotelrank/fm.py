"""Second-order factorization machine trained with plain SGD.

Pairwise interactions are factorized through k-dimensional latent vectors
and evaluated in linear time via the classic sum-of-squares identity:
    sum_{i<j} <v_i, v_j> x_i x_j = 0.5 * sum_f [(sum_i v_if x_i)^2 - sum_i v_if^2 x_i^2]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import DivergenceError, RankModel, sigmoid, softplus, standardize_fit


@dataclass
class FmParams:
    k: int = 8
    init_std: float = 0.01
    learning_rate: float = 0.01
    epochs: int = 10
    l2: float = 1e-4
    seed: int = 0
    loss: str = "logistic"  # or "squared"

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.init_std <= 0:
            raise ValueError("init_std must be positive")
        if self.loss not in ("logistic", "squared"):
            raise ValueError(f"unknown loss: {self.loss}")


@dataclass
class FmModel:
    w0: float
    w: np.ndarray  # (d,)
    V: np.ndarray  # (d, k)


def fm_predict_row(model: FmModel, x: np.ndarray) -> float:
    """Linear-time model equation for a single feature row."""
    x = np.asarray(x, dtype=float)
    if x.shape != model.w.shape:
        raise ValueError(f"dimension mismatch: model d={model.w.shape[0]}, row d={x.shape[0]}")
    s = model.V.T @ x  # (k,)
    interaction = 0.5 * float(np.sum(s * s) - np.sum((model.V * model.V).T @ (x * x)))
    return model.w0 + float(model.w @ x) + interaction


def fm_predict(model: FmModel, X: np.ndarray) -> np.ndarray:
    """Vectorized linear-time prediction over rows of X."""
    X = np.asarray(X, dtype=float)
    if X.shape[1] != model.w.shape[0]:
        raise ValueError(f"dimension mismatch: model d={model.w.shape[0]}, X d={X.shape[1]}")
    S = X @ model.V  # (n, k)
    interaction = 0.5 * (np.sum(S * S, axis=1) - (X * X) @ np.sum(model.V * model.V, axis=1))
    return model.w0 + X @ model.w + interaction


def fm_row_loss(model: FmModel, x: np.ndarray, y: float, loss: str) -> float:
    """Data loss of one row (no regularization)."""
    yhat = fm_predict_row(model, x)
    if loss == "squared":
        return 0.5 * (yhat - y) ** 2
    # logistic with y in {0,1}: softplus form of the cross entropy
    return float(y * softplus(-yhat) + (1.0 - y) * softplus(yhat))


def fm_row_gradients(
    model: FmModel, x: np.ndarray, y: float, loss: str
) -> tuple[float, np.ndarray, np.ndarray]:
    """Analytic (d w0, d w, d V) of the row data loss, no regularization.

    d yhat / d V_if = x_i * (s_f - V_if x_i) with s = V^T x.
    """
    x = np.asarray(x, dtype=float)
    yhat = fm_predict_row(model, x)
    if loss == "squared":
        e = yhat - y
    else:
        e = float(sigmoid(yhat)) - y
    s = model.V.T @ x
    gV = e * (np.outer(x, s) - model.V * (x * x)[:, None])
    return e, e * x, gV


def fm_fit_arrays(X: np.ndarray, y: np.ndarray, params: FmParams) -> tuple[FmModel, list[float]]:
    """Seeded SGD over shuffled rows; returns the model and per-epoch mean loss."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    rng = np.random.default_rng(params.seed)
    model = FmModel(
        w0=0.0,
        w=np.zeros(d),
        V=rng.normal(0.0, params.init_std, size=(d, params.k)),
    )
    lr = params.learning_rate
    losses = []
    for epoch in range(params.epochs):
        order = rng.permutation(n)
        for i in order:
            g0, gw, gV = fm_row_gradients(model, X[i], y[i], params.loss)
            model.w0 -= lr * g0
            model.w -= lr * (gw + params.l2 * model.w)
            if params.k:
                model.V -= lr * (gV + params.l2 * model.V)
        epoch_loss = float(
            np.mean([fm_row_loss(model, X[i], y[i], params.loss) for i in range(n)])
        )
        if not np.isfinite(epoch_loss):
            raise DivergenceError(epoch)
        losses.append(epoch_loss)
    return model, losses


class FactorizationMachineModel(RankModel):
    """Pointwise FM ranker. Logistic head classifies clicked-or-booked rows;
    the squared head regresses the numeric grade."""

    kind = "fm"

    def __init__(self, params: FmParams | None = None):
        self.params = params or FmParams()

    def fit(self, features, grades, countries=None):
        X = features.values
        grades = np.asarray(grades)
        if self.params.loss == "logistic":
            y = (grades > 0).astype(float)
        else:
            y = grades.astype(float)
        self._mean, self._std = standardize_fit(X)
        Xs = (X - self._mean) / self._std
        self.model, self.loss_history = fm_fit_arrays(Xs, y, self.params)
        self.feature_columns = list(features.columns)
        self.train_srch_ids = np.unique(features.srch_ids)
        return self

    def score_rows(self, features, countries=None):
        self.check_schema(features)
        Xs = (features.values - self._mean) / self._std
        return fm_predict(self.model, Xs)

    def state(self):
        meta = self._common_state_meta()
        meta.update(
            kind=self.kind,
            config={
                "k": self.params.k,
                "init_std": self.params.init_std,
                "learning_rate": self.params.learning_rate,
                "epochs": self.params.epochs,
                "l2": self.params.l2,
                "seed": self.params.seed,
                "loss": self.params.loss,
            },
        )
        arrays = {
            "w0": np.array([self.model.w0]),
            "w": self.model.w,
            "V": self.model.V,
            "mean": self._mean,
            "std": self._std,
            "train_srch_ids": self.train_srch_ids,
        }
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        inst = cls(FmParams(**meta["config"]))
        inst._restore_common(meta, arrays)
        inst.model = FmModel(w0=float(arrays["w0"][0]), w=arrays["w"], V=arrays["V"])
        inst._mean = arrays["mean"]
        inst._std = arrays["std"]
        return inst
