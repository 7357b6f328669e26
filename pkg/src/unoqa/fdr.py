"""Feature dimension reduction: PCA by thin SVD and NMF by multiplicative updates."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateError, FormatError

EPS = 1e-12
NMF_TRANSFORM_ITERS = 200


@dataclass
class ReductionModel:
    method: str
    d: int
    p: int
    # PCA
    mean: Optional[np.ndarray] = None
    components: Optional[np.ndarray] = None  # (d, p), orthonormal rows
    singular_values: Optional[np.ndarray] = None
    n_samples: int = 0
    # NMF
    basis: Optional[np.ndarray] = None  # W, (p, d)
    shift: float = 0.0
    # fit diagnostics, not persisted
    scores: Optional[np.ndarray] = field(default=None, repr=False)
    objective: list[float] = field(default_factory=list, repr=False)

    @property
    def explained_variance(self) -> np.ndarray:
        return self.singular_values ** 2 / (self.n_samples - 1)

    def to_bytes(self) -> bytes:
        kind = {"pca": 0, "nmf": 1}[self.method]
        head = struct.pack("<4I", kind, self.d, self.p, self.n_samples)
        if self.method == "pca":
            body = [self.mean, self.components, self.singular_values]
        else:
            body = [np.array([self.shift]), self.basis]
        return head + b"".join(np.asarray(a, "<f8").tobytes() for a in body)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ReductionModel":
        if len(buf) < 16:
            raise FormatError("truncated reduction model", len(buf))
        kind, d, p, n = struct.unpack("<4I", buf[:16])
        vals = np.frombuffer(buf[16:], dtype="<f8").astype(np.float64)
        if kind == 0:
            if len(vals) != p + d * p + d:
                raise FormatError("PCA payload has the wrong length", 16)
            return cls("pca", d, p, mean=vals[:p], components=vals[p:p + d * p].reshape(d, p),
                       singular_values=vals[p + d * p:], n_samples=n)
        if kind == 1:
            if len(vals) != 1 + p * d:
                raise FormatError("NMF payload has the wrong length", 16)
            return cls("nmf", d, p, basis=vals[1:].reshape(p, d), shift=float(vals[0]), n_samples=n)
        raise FormatError(f"unknown reduction method code {kind}", 0)


def fit_pca(X: np.ndarray, d: int) -> ReductionModel:
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    if n < 2:
        raise ValueError("PCA needs at least two samples")
    if not 1 <= d <= min(n - 1, p):
        raise ValueError(f"PCA dimension {d} must lie in 1..{min(n - 1, p)}")
    mean = X.mean(axis=0)
    U, S, Vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = Vt[:d].copy()
    scores = U[:, :d] * S[:d]
    # make the largest-magnitude entry of each component positive
    signs = np.sign(comps[np.arange(d), np.argmax(np.abs(comps), axis=1)])
    signs[signs == 0] = 1.0
    comps *= signs[:, None]
    scores *= signs[None, :]
    return ReductionModel("pca", d, p, mean=mean, components=comps, singular_values=S[:d],
                          n_samples=n, scores=scores)


def _nmf_objective(V, H, W):
    return float(np.linalg.norm(V - H @ W.T))


def fit_nmf(X: np.ndarray, d: int, max_iter: int = 10000, tol: float = 1e-5, seed: int = 0) -> ReductionModel:
    """Factor X + shift ~ H W^T with non-negative H (n x d) and W (p x d).

    Lee-Seung multiplicative updates for the Frobenius loss; the objective
    after every iteration is kept in ``model.objective``.
    """
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    if n < 2:
        raise ValueError("NMF needs at least two samples")
    if not 1 <= d <= min(n, p):
        raise ValueError(f"NMF dimension {d} must lie in 1..{min(n, p)}")
    shift = max(0.0, -float(X.min()))
    V = X + shift
    if not np.any(V > 0):
        raise DegenerateError("NMF input is identically zero after shifting")
    rng = np.random.default_rng(seed)
    avg = np.sqrt(V.mean() / d)
    H = avg * rng.random((n, d))
    W = avg * rng.random((p, d))
    history = [_nmf_objective(V, H, W)]
    for _ in range(max_iter):
        H *= (V @ W) / (H @ (W.T @ W) + EPS)
        W *= (V.T @ H) / (W @ (H.T @ H) + EPS)
        history.append(_nmf_objective(V, H, W))
        prev = history[-2]
        if prev == 0 or abs(prev - history[-1]) / prev < tol:
            break
    return ReductionModel("nmf", d, p, basis=W, shift=shift, n_samples=n, scores=H, objective=history)


def transform(model: ReductionModel, F_H: np.ndarray) -> np.ndarray:
    """Project one vector (or a matrix of row vectors) into the reduced space."""
    F = np.asarray(F_H, dtype=np.float64)
    single = F.ndim == 1
    F = np.atleast_2d(F)
    if F.shape[1] != model.p:
        raise ValueError(f"expected vectors of length {model.p}, got {F.shape[1]}")
    if model.method == "pca":
        out = (F - model.mean) @ model.components.T
    else:
        V = np.maximum(F + model.shift, 0.0)
        W = model.basis
        WtW = W.T @ W
        h0 = np.sqrt(V.mean(axis=1, keepdims=True) / model.d)
        Hm = np.repeat(h0, model.d, axis=1)
        VW = V @ W
        for _ in range(NMF_TRANSFORM_ITERS):
            Hm *= VW / (Hm @ WtW + EPS)
        out = Hm
    return out[0] if single else out


def fit_reduction(X: np.ndarray, method: str, d: int, seed: int = 0, max_iter: int = 10000) -> ReductionModel:
    if method == "pca":
        return fit_pca(X, d)
    if method == "nmf":
        return fit_nmf(X, d, max_iter=max_iter, seed=seed)
    raise ValueError(f"unknown reduction method {method!r}")
