"""k-nearest-neighbour load regression over flattened, normalised cycles."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError


@dataclass
class KnnModel:
    features: np.ndarray
    targets: np.ndarray
    k: int = 5
    channel_stats: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if not 1 <= self.k <= len(self.targets):
            raise ParameterError(f"k={self.k} must lie in [1, {len(self.targets)}]")
        if not np.all(np.isfinite(self.features)):
            raise DataError("knn training rows must be finite")

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {"k": self.k, "n_rows": int(self.features.shape[0]),
                "n_features": int(self.features.shape[1]),
                "targets": self.targets.tolist()}
        if self.channel_stats is not None:
            meta["channel_stats"] = {"mean": self.channel_stats[0].tolist(),
                                     "std": self.channel_stats[1].tolist()}
        (directory / "knn.json").write_text(json.dumps(meta))
        self.features.astype("<f4").tofile(directory / "knn.f32")
        return directory

    @classmethod
    def load(cls, directory) -> "KnnModel":
        directory = Path(directory)
        meta = json.loads((directory / "knn.json").read_text())
        feats = np.fromfile(directory / "knn.f32", dtype="<f4").astype(float)
        stats = meta.get("channel_stats")
        return cls(feats.reshape(meta["n_rows"], meta["n_features"]),
                   np.array(meta["targets"]), meta["k"],
                   None if stats is None else (np.array(stats["mean"]), np.array(stats["std"])))


def knn_fit(dataset, k: int = 5) -> KnnModel:
    n = len(dataset)
    if n == 0:
        raise ParameterError("cannot fit k-NN on an empty dataset")
    if not 1 <= k <= n:
        raise ParameterError(f"k={k} must lie in [1, {n}]")
    feats = np.asarray(dataset.data, dtype=float).reshape(n, -1)
    return KnnModel(feats, np.asarray(dataset.weights, dtype=float).copy(), k,
                    dataset.channel_stats)


def knn_predict(model: KnnModel, cycles):
    """Mean target of the ``k`` nearest rows; equal distances keep training order."""
    q = np.asarray(cycles, dtype=float)
    single = q.ndim == 2
    q = q.reshape(1 if single else q.shape[0], -1)
    if q.shape[1] != model.features.shape[1]:
        raise DataError("query does not match the stored feature size")
    pred = np.empty(len(q))
    for i, row in enumerate(q):
        d = model.features - row
        sq = np.einsum("ij,ij->i", d, d)
        nearest = np.argsort(sq, kind="stable")[:model.k]
        pred[i] = model.targets[nearest].mean()
    return float(pred[0]) if single else pred
