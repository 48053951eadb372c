"""Dataset samples, the sealed ground-truth block, and the dataset JSON format.

Training and annotation code only ever sees ``Dataset.training_view()``, which
drops the sealed ground truth. Evaluation reads it through
``ground_truth(dataset)`` or ``load_ground_truth(path)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bodymodel import ModelParams

FORMAT_NAME = "neuralannot.dataset"
FORMAT_VERSION = 1


@dataclass
class Sample:
    feature: np.ndarray  # (D_F,) image-feature stand-in
    p2d: np.ndarray  # (K, 2) pixels
    vis2d: np.ndarray  # (K,) bool
    p3d: np.ndarray | None = None  # (K, 3) meters, dataset coordinates
    vis3d: np.ndarray | None = None  # (K,) bool
    params_star: ModelParams | None = None  # pseudo-GT, appended by annotation

    def to_dict(self) -> dict:
        d = {
            "feature": np.asarray(self.feature).tolist(),
            "p2d": np.asarray(self.p2d).tolist(),
            "vis2d": np.asarray(self.vis2d, dtype=int).tolist(),
        }
        if self.p3d is not None:
            d["p3d"] = np.asarray(self.p3d).tolist()
            d["vis3d"] = np.asarray(self.vis3d, dtype=int).tolist()
        if self.params_star is not None:
            d["params_star"] = self.params_star.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Sample:
        p3d = d.get("p3d")
        return cls(
            feature=np.asarray(d["feature"], dtype=float),
            p2d=np.asarray(d["p2d"], dtype=float),
            vis2d=np.asarray(d["vis2d"], dtype=bool),
            p3d=None if p3d is None else np.asarray(p3d, dtype=float),
            vis3d=None if p3d is None else np.asarray(d["vis3d"], dtype=bool),
            params_star=None if d.get("params_star") is None else ModelParams.from_dict(d["params_star"]),
        )


@dataclass
class Dataset:
    kind: str  # "aux" or "target"
    part: str
    samples: list
    header: dict = field(default_factory=dict)
    sealed: list | None = field(default=None, repr=False)  # hidden ground-truth ModelParams

    def __post_init__(self):
        if self.kind not in ("aux", "target"):
            raise ValueError(f"dataset kind must be 'aux' or 'target', got {self.kind!r}")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def training_view(self) -> Dataset:
        """The same samples without the sealed ground-truth block."""
        return Dataset(self.kind, self.part, self.samples, dict(self.header), None)

    def with_params(self, params: list) -> Dataset:
        """Extend every sample with a pseudo-GT; other fields are shared, not copied."""
        if len(params) != len(self.samples):
            raise ValueError("one parameter set per sample is required")
        samples = [replace(s, params_star=p) for s, p in zip(self.samples, params)]
        return Dataset(self.kind, self.part, samples, dict(self.header), self.sealed)

    @property
    def annotated(self) -> bool:
        return bool(self.samples) and all(s.params_star is not None for s in self.samples)

    def to_dict(self) -> dict:
        d = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "kind": self.kind,
            "part": self.part,
            "header": self.header,
            "samples": [s.to_dict() for s in self.samples],
        }
        if self.sealed is not None:
            d["sealed"] = {"theta_true": [p.to_dict() for p in self.sealed]}
        return d


def _read(path) -> dict:
    d = json.loads(Path(path).read_text())
    if d.get("format") != FORMAT_NAME:
        raise ValueError(f"{path}: not a dataset file")
    if d.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {d.get('version')}")
    return d


def save_dataset(dataset: Dataset, path) -> None:
    Path(path).write_text(json.dumps(dataset.to_dict()))


def load_dataset(path) -> Dataset:
    """Training-facing loader: the sealed ground truth is never materialized."""
    d = _read(path)
    return Dataset(d["kind"], d["part"], [Sample.from_dict(s) for s in d["samples"]], d.get("header", {}))


def load_ground_truth(path) -> list | None:
    """Evaluation-only access to the hidden ground-truth parameters."""
    sealed = _read(path).get("sealed")
    if sealed is None:
        return None
    return [ModelParams.from_dict(p) for p in sealed["theta_true"]]


def load_with_ground_truth(path) -> Dataset:
    """Dataset with its sealed block attached, for evaluation and pipelines that
    need to carry the block through to annotated output files."""
    ds = load_dataset(path)
    ds.sealed = load_ground_truth(path)
    return ds


def ground_truth(dataset: Dataset) -> list | None:
    return dataset.sealed
