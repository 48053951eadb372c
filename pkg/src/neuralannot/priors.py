"""Pose priors: L2 parameter penalties, a PCA pose embedding, Geman-McClure."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, InsufficientData

EMBEDDING_FORMAT = "neuralannot.embedding"
EMBEDDING_VERSION = 1

DEFAULT_LATENT_DIM = {"body": 32, "hand": 6, "face": 3}


@dataclass(frozen=True)
class PcaEmbedding:
    mean: np.ndarray  # (D,)
    basis: np.ndarray  # (d, D), orthonormal rows
    variances: np.ndarray  # (d,), descending

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[1]

    def to_dict(self) -> dict:
        return {
            "format": EMBEDDING_FORMAT,
            "version": EMBEDDING_VERSION,
            "mean": self.mean.tolist(),
            "basis": self.basis.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> PcaEmbedding:
        if d.get("format") != EMBEDDING_FORMAT or d.get("version") != EMBEDDING_VERSION:
            raise ValueError("not a version-1 embedding record")
        return cls(np.asarray(d["mean"], float), np.asarray(d["basis"], float), np.asarray(d["variances"], float))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> PcaEmbedding:
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_pca(corpus, d: int) -> PcaEmbedding:
    """Principal subspace of a pose corpus (rows are stacked axis-angle poses)."""
    X = np.asarray(corpus, dtype=float)
    if X.ndim != 2:
        raise DimensionMismatch("pose corpus must be a 2-D array (M, D)")
    M, D = X.shape
    if not (1 <= d < M) or d > D:
        raise InsufficientData(f"need M > d >= 1 and d <= D (M={M}, D={D}, d={d})")
    mean = X.mean(axis=0)
    _, S, Vt = np.linalg.svd(X - mean, full_matrices=False)
    var = S[:d] ** 2 / M
    basis = Vt[:d]
    # deterministic sign: largest-magnitude entry of each component positive
    flip = np.sign(basis[np.arange(d), np.argmax(np.abs(basis), axis=1)])
    basis = basis * np.where(flip == 0, 1.0, flip)[:, None]
    return PcaEmbedding(mean, basis, var)


def decode(emb: PcaEmbedding, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != emb.dim:
        raise DimensionMismatch(f"latent has {z.shape[-1]} entries, embedding has {emb.dim}")
    return emb.mean + z @ emb.basis


def encode(emb: PcaEmbedding, pose) -> np.ndarray:
    pose = np.asarray(pose, dtype=float)
    if pose.shape[-1] != emb.ambient_dim:
        raise DimensionMismatch(f"pose has {pose.shape[-1]} entries, embedding expects {emb.ambient_dim}")
    return (pose - emb.mean) @ emb.basis.T


def geman_mcclure(e, sigma: float = 0.1):
    """Bounded robust penalty ``sigma^2 e^2 / (sigma^2 + e^2)``; saturates at sigma^2."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    e2 = np.square(e)
    s2 = sigma * sigma
    return s2 * e2 / (s2 + e2)


def geman_mcclure_grad(e, sigma: float = 0.1):
    e = np.asarray(e, dtype=float)
    s2 = sigma * sigma
    return 2.0 * s2 * s2 * e / (s2 + e * e) ** 2


@dataclass
class LossWeights:
    """Regularizer and term weights. All entries must be non-negative.

    ``ax`` and ``tg`` map parameter groups (``pose``, ``betas``, ``expression``,
    ``latent``, ``global_rot``, ``camera``) to their L2 weights.
    """

    ax: dict = field(default_factory=lambda: {"pose": 0.01, "betas": 0.1, "expression": 0.1})
    tg: dict = field(default_factory=lambda: {"latent": 0.01, "betas": 0.1, "expression": 0.1})
    fit: dict = field(default_factory=lambda: {"pose": 0.01, "latent": 0.01, "betas": 0.1, "expression": 0.1})
    is_target: bool = True
    w_data: float = 1e6
    w_2d: float = 0.01

    def __post_init__(self):
        for group in (self.ax, self.tg, self.fit):
            if any(v < 0 for v in group.values()):
                raise ValueError("loss weights must be non-negative")
        if self.w_data < 0 or self.w_2d < 0:
            raise ValueError("loss weights must be non-negative")


def l2_prior(values: dict, weights: dict) -> float:
    """Sum of ``lambda_g * x^2`` over every entry of every weighted group."""
    total = 0.0
    for name, lam in weights.items():
        if lam and name in values and values[name] is not None:
            x = np.asarray(values[name], dtype=float)
            total += lam * float(np.sum(x * x))
    return total


def l2_prior_grad(values: dict, weights: dict) -> dict:
    return {name: 2.0 * weights.get(name, 0.0) * np.asarray(x, dtype=float)
            for name, x in values.items() if x is not None}
