"""Uniform detector contract over the eight models.

Every detector exposes fit(train, val=None) / score(X) / predict(X) where
score is a continuous anomaly measure (higher = more anomalous) and
predict thresholds it. Models that mix units (knn, lof, rc, dae) fit a
standardizer on their training rows; tree models consume raw features.

The registry maps CLI names (dt, knn, rf, gbt, rc, lof, iforest, dae) to
factories; register_detector() lets tests add stubs.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import autoencoder as ae
from .density import (
    GaussianModel,
    IsoForestModel,
    fit_isolation_forest,
    fit_robust_covariance,
    iso_score,
    mahalanobis_score,
)
from .errors import EmptyData, MissingLabels, UnfitModel
from .features import FeatureMatrix, Standardizer, fit_standardizer
from .model_io import decode_array, decode_float, encode_array, encode_float
from .neighbors import LocalOutlierFactor, NeighborIndex
from .trees import (
    BoostConfig,
    ForestConfig,
    GbtModel,
    RandomForest,
    TreeNode,
    fit_cart,
    fit_gbt,
    fit_random_forest,
)

SUPERVISED_MODELS = ("dt", "knn", "rf", "gbt")
SEMI_SUPERVISED_MODELS = ("rc", "lof", "iforest", "dae")
ALL_MODELS = SUPERVISED_MODELS + SEMI_SUPERVISED_MODELS


def derive_seed(master: int, name: str) -> int:
    """Stable per-task seed: independent of execution order, so serial and
    threaded runs produce identical models."""
    ss = np.random.SeedSequence([master & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def _values(X) -> np.ndarray:
    return np.atleast_2d(np.asarray(getattr(X, "values", X), dtype=np.float64))


def _require_labels(train: FeatureMatrix, name: str) -> np.ndarray:
    if train.labels is None:
        raise MissingLabels(f"{name} is supervised and needs labeled training data")
    return np.asarray(train.labels)


class Detector:
    """Base contract; subclasses set name/supervised and implement _fit and
    score; predict defaults to thresholding score."""

    name = "base"
    supervised = False

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.fitted = False

    def fit(self, train: FeatureMatrix, val: FeatureMatrix | None = None):
        if train.n_rows == 0:
            raise EmptyData(f"{self.name}: empty training matrix")
        self._fit(train, val)
        self.fitted = True
        return self

    def score(self, X) -> np.ndarray:
        raise NotImplementedError

    def decide(self, scores: np.ndarray) -> np.ndarray:
        """Thresholding rule mapping anomaly scores to 0/1 predictions."""
        raise NotImplementedError

    def predict(self, X) -> np.ndarray:
        return self.decide(self.score(X))

    def params(self) -> dict:
        return {}

    def _check_fitted(self):
        if not self.fitted:
            raise UnfitModel(f"{self.name} is not fitted")

    # serialization hooks; detectors that support model files override these
    def to_payload(self) -> dict:
        raise NotImplementedError(f"{self.name} does not serialize")

    def load_payload(self, payload: dict) -> None:
        raise NotImplementedError(f"{self.name} does not serialize")


def _standardizer_payload(s: Standardizer) -> dict:
    return {"mean": encode_array(s.mean), "std": encode_array(s.std)}


def _standardizer_from(obj: dict) -> Standardizer:
    return Standardizer(decode_array(obj["mean"]), decode_array(obj["std"]))


class DecisionTreeDetector(Detector):
    name = "dt"
    supervised = True

    def __init__(self, max_depth: int = 12, min_samples_leaf: int = 1,
                 cutoff: float = 0.5, seed: int = 0):
        super().__init__(seed)
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.cutoff = cutoff
        self.tree: TreeNode | None = None
        self.width = 0

    def _fit(self, train, val=None):
        y = _require_labels(train, self.name)
        self.width = train.n_cols
        self.tree = fit_cart(train.values, y, self.max_depth,
                             self.min_samples_leaf)

    def score(self, X) -> np.ndarray:
        self._check_fitted()
        from .trees import predict_proba_tree
        return np.atleast_1d(predict_proba_tree(self.tree, _values(X)))

    def decide(self, scores: np.ndarray) -> np.ndarray:
        return (scores >= self.cutoff).astype(np.int8)

    def params(self) -> dict:
        return {"max_depth": self.max_depth,
                "min_samples_leaf": self.min_samples_leaf,
                "cutoff": self.cutoff}

    def to_payload(self) -> dict:
        self._check_fitted()
        return {"params": self.params(), "width": self.width,
                "tree": self.tree.to_dict()}

    def load_payload(self, payload: dict) -> None:
        p = payload["params"]
        self.max_depth = p["max_depth"]
        self.min_samples_leaf = p["min_samples_leaf"]
        self.cutoff = p["cutoff"]
        self.width = payload["width"]
        self.tree = TreeNode.from_dict(payload["tree"])
        self.fitted = True


class KnnDetector(Detector):
    name = "knn"
    supervised = True

    def __init__(self, k: int = 5, seed: int = 0):
        super().__init__(seed)
        self.k = k
        self.standardizer: Standardizer | None = None
        self.index: NeighborIndex | None = None
        self.labels: np.ndarray | None = None

    def _fit(self, train, val=None):
        y = _require_labels(train, self.name)
        self.standardizer = fit_standardizer(train)
        self.index = NeighborIndex(self.standardizer.transform(train.values))
        self.labels = y

    def score(self, X) -> np.ndarray:
        self._check_fitted()
        q = self.standardizer.transform(_values(X))
        k = min(self.k, self.index.n)
        _, ids = self.index.query(q, k)
        return self.labels[ids].mean(axis=1)

    def decide(self, scores: np.ndarray) -> np.ndarray:
        # vote ties go to anomaly
        return (scores >= 0.5).astype(np.int8)

    def params(self) -> dict:
        return {"k": self.k}

    def to_payload(self) -> dict:
        self._check_fitted()
        return {
            "params": self.params(),
            "standardizer": _standardizer_payload(self.standardizer),
            "refs": encode_array(self.index.refs),
            "labels": [int(v) for v in self.labels],
        }

    def load_payload(self, payload: dict) -> None:
        self.k = payload["params"]["k"]
        self.standardizer = _standardizer_from(payload["standardizer"])
        self.index = NeighborIndex(decode_array(payload["refs"]))
        self.labels = np.array(payload["labels"], dtype=np.int8)
        self.fitted = True


class RandomForestDetector(Detector):
    name = "rf"
    supervised = True

    def __init__(self, n_trees: int = 50, max_depth: int = 12,
                 features_per_split: int | None = None,
                 bootstrap_fraction: float = 1.0, cutoff: float = 0.5,
                 seed: int = 0):
        super().__init__(seed)
        self.config = ForestConfig(n_trees, max_depth, features_per_split,
                                   bootstrap_fraction, seed)
        self.cutoff = cutoff
        self.model: RandomForest | None = None

    def _fit(self, train, val=None):
        y = _require_labels(train, self.name)
        self.model = fit_random_forest(train.values, y, self.config)

    def score(self, X) -> np.ndarray:
        self._check_fitted()
        return self.model.predict_proba(_values(X))

    def decide(self, scores: np.ndarray) -> np.ndarray:
        return (scores >= self.cutoff).astype(np.int8)

    def params(self) -> dict:
        c = self.config
        return {"n_trees": c.n_trees, "max_depth": c.max_depth,
                "features_per_split": c.features_per_split,
                "bootstrap_fraction": c.bootstrap_fraction,
                "cutoff": self.cutoff}

    def to_payload(self) -> dict:
        self._check_fitted()
        return {"cutoff": encode_float(self.cutoff),
                "model": self.model.to_payload()}

    def load_payload(self, payload: dict) -> None:
        self.cutoff = decode_float(payload["cutoff"])
        self.model = RandomForest.from_payload(payload["model"])
        self.config = self.model.config
        self.fitted = True


class GbtDetector(Detector):
    name = "gbt"
    supervised = True

    def __init__(self, rounds: int = 200, learning_rate: float = 0.3,
                 max_depth: int = 6, lam: float = 1.0,
                 gamma_split: float = 0.0, min_child_weight: float = 1.0,
                 subsample: float = 1.0, colsample: float = 1.0,
                 base_score: float = 0.5, cutoff: float = 0.5, seed: int = 0):
        super().__init__(seed)
        self.config = BoostConfig(rounds, learning_rate, max_depth, lam,
                                  gamma_split, min_child_weight, subsample,
                                  colsample, base_score, seed)
        self.cutoff = cutoff
        self.model: GbtModel | None = None

    def _fit(self, train, val=None):
        y = _require_labels(train, self.name)
        self.model = fit_gbt(train.values, y, self.config)

    def score(self, X) -> np.ndarray:
        self._check_fitted()
        return self.model.predict_proba(_values(X))

    def decide(self, scores: np.ndarray) -> np.ndarray:
        return (scores >= self.cutoff).astype(np.int8)

    def importance(self) -> np.ndarray:
        self._check_fitted()
        from .trees import feature_importance
        return feature_importance(self.model)

    def params(self) -> dict:
        c = self.config
        return {"rounds": c.rounds, "learning_rate": c.learning_rate,
                "max_depth": c.max_depth, "lam": c.lam,
                "gamma_split": c.gamma_split,
                "min_child_weight": c.min_child_weight,
                "subsample": c.subsample, "colsample": c.colsample,
                "base_score": c.base_score, "cutoff": self.cutoff}

    def to_payload(self) -> dict:
        self._check_fitted()
        return {"cutoff": encode_float(self.cutoff),
                "model": self.model.to_payload()}

    def load_payload(self, payload: dict) -> None:
        self.cutoff = decode_float(payload["cutoff"])
        self.model = GbtModel.from_payload(payload["model"])
        self.config = self.model.config
        self.fitted = True


class RcDetector(Detector):
    name = "rc"
    supervised = False

    def __init__(self, support_fraction: float = 0.75,
                 cutoff_level: float = 0.99, seed: int = 0):
        super().__init__(seed)
        self.support_fraction = support_fraction
        self.cutoff_level = cutoff_level
        self.standardizer: Standardizer | None = None
        self.model: GaussianModel | None = None

    def _fit(self, train, val=None):
        self.standardizer = fit_standardizer(train)
        Z = self.standardizer.transform(train.values)
        self.model = fit_robust_covariance(
            Z, self.support_fraction, self.cutoff_level, seed=self.seed
        )

    def score(self, X) -> np.ndarray:
        self._check_fitted()
        return np.atleast_1d(
            mahalanobis_score(self.model, self.standardizer.transform(_values(X)))
        )

    def decide(self, scores: np.ndarray) -> np.ndarray:
        return (scores > self.model.cutoff).astype(np.int8)

    def params(self) -> dict:
        return {"support_fraction": self.support_fraction,
                "cutoff_level": self.cutoff_level}

    def to_payload(self) -> dict:
        self._check_fitted()
        return {
            "params": {"support_fraction": encode_float(self.support_fraction),
                       "cutoff_level": encode_float(self.cutoff_level)},
            "standardizer": _standardizer_payload(self.standardizer),
            "mean": encode_array(self.model.mean),
            "cov": encode_array(self.model.cov),
            "cov_inv": encode_array(self.model.cov_inv),
            "cutoff": encode_float(self.model.cutoff),
        }

    def load_payload(self, payload: dict) -> None:
        p = payload["params"]
        self.support_fraction = decode_float(p["support_fraction"])
        self.cutoff_level = decode_float(p["cutoff_level"])
        self.standardizer = _standardizer_from(payload["standardizer"])
        self.model = GaussianModel(
            decode_array(payload["mean"]), decode_array(payload["cov"]),
            decode_array(payload["cov_inv"]), decode_float(payload["cutoff"]),
            support=np.array([], dtype=np.int64),
        )
        self.fitted = True


class LofDetector(Detector):
    name = "lof"
    supervised = False

    def __init__(self, k: int = 20, threshold: float = 1.5,
                 max_fit_samples: int | None = 16384, seed: int = 0):
        super().__init__(seed)
        self.k = k
        self.threshold = threshold
        self.max_fit_samples = max_fit_samples
        self.standardizer: Standardizer | None = None
        self.lof: LocalOutlierFactor | None = None

    def _fit(self, train, val=None):
        self.standardizer = fit_standardizer(train)
        Z = self.standardizer.transform(train.values)
        if self.max_fit_samples is not None and len(Z) > self.max_fit_samples:
            rng = np.random.default_rng(np.random.SeedSequence(self.seed))
            rows = np.sort(rng.choice(len(Z), self.max_fit_samples,
                                      replace=False))
            Z = Z[rows]
        self.lof = LocalOutlierFactor(self.k).fit(Z)

    def score(self, X) -> np.ndarray:
        self._check_fitted()
        return self.lof.score(self.standardizer.transform(_values(X)))

    def decide(self, scores: np.ndarray) -> np.ndarray:
        return (scores > self.threshold).astype(np.int8)

    def params(self) -> dict:
        return {"k": self.k, "threshold": self.threshold,
                "max_fit_samples": self.max_fit_samples}

    def to_payload(self) -> dict:
        self._check_fitted()
        return {
            "params": {"k": self.k, "threshold": encode_float(self.threshold)},
            "standardizer": _standardizer_payload(self.standardizer),
            "refs": encode_array(self.lof.index.refs),
        }

    def load_payload(self, payload: dict) -> None:
        self.k = payload["params"]["k"]
        self.threshold = decode_float(payload["params"]["threshold"])
        self.standardizer = _standardizer_from(payload["standardizer"])
        self.lof = LocalOutlierFactor(self.k).fit(decode_array(payload["refs"]))
        self.fitted = True


class IsoForestDetector(Detector):
    name = "iforest"
    supervised = False

    def __init__(self, n_trees: int = 100, subsample: int = 256,
                 threshold: float = 0.6, seed: int = 0):
        super().__init__(seed)
        self.n_trees = n_trees
        self.subsample = subsample
        self.threshold = threshold
        self.model: IsoForestModel | None = None

    def _fit(self, train, val=None):
        psi = min(self.subsample, train.n_rows)
        self.model = fit_isolation_forest(train.values, self.n_trees, psi,
                                          self.seed)

    def score(self, X) -> np.ndarray:
        self._check_fitted()
        return np.atleast_1d(iso_score(self.model, _values(X)))

    def decide(self, scores: np.ndarray) -> np.ndarray:
        return (scores > self.threshold).astype(np.int8)

    def params(self) -> dict:
        return {"n_trees": self.n_trees, "subsample": self.subsample,
                "threshold": self.threshold}

    def to_payload(self) -> dict:
        self._check_fitted()
        return {"threshold": encode_float(self.threshold),
                "model": self.model.to_payload()}

    def load_payload(self, payload: dict) -> None:
        self.threshold = decode_float(payload["threshold"])
        self.model = IsoForestModel.from_payload(payload["model"])
        self.n_trees = self.model.n_trees
        self.subsample = self.model.subsample
        self.fitted = True


class DaeDetector(Detector):
    name = "dae"
    supervised = False

    def __init__(self, hidden: tuple[int, ...] = (48, 24), bottleneck: int = 12,
                 epochs: int = 30, batch_size: int = 256,
                 learning_rate: float = 1e-3, optimizer: str = "adam",
                 grid=ae.DEFAULT_THRESHOLD_GRID,
                 fallback=ae.ThresholdConfig(p=95.0, gamma=1.0),
                 seed: int = 0):
        super().__init__(seed)
        self.hidden = tuple(hidden)
        self.bottleneck = bottleneck
        self.train_config = ae.TrainConfig(
            epochs=epochs, batch_size=batch_size, learning_rate=learning_rate,
            optimizer=optimizer, seed=seed,
        )
        self.grid = tuple((float(p), float(g)) for p, g in grid)
        self.fallback = fallback
        self.standardizer: Standardizer | None = None
        self.net: ae.AutoencoderNet | None = None
        self.threshold_config: ae.ThresholdConfig | None = None
        self.threshold: float = 0.0
        self.loss_trace: list[float] = []

    def _fit(self, train, val=None):
        if train.labels is not None and np.any(np.asarray(train.labels) == 1):
            raise ValueError("dae must be fitted on normal rows only")
        self.standardizer = fit_standardizer(train)
        Z = FeatureMatrix(self.standardizer.transform(train.values),
                          train.labels, train.column_ids)
        self.net = ae.make_autoencoder(
            train.n_cols, self.hidden, self.bottleneck, seed=self.seed
        )
        self.net, self.loss_trace = ae.train(self.net, Z, self.train_config)
        val_usable = (
            val is not None and val.labels is not None
            and np.any(np.asarray(val.labels) == 1)
            and np.any(np.asarray(val.labels) == 0)
        )
        if val_usable:
            val_z = FeatureMatrix(self.standardizer.transform(val.values),
                                  val.labels, val.column_ids)
            self.threshold_config, _ = ae.fine_tune_threshold(
                self.net, val_z, self.grid
            )
            normal_losses = ae.reconstruction_losses(
                self.net, val_z.values[np.asarray(val_z.labels) == 0]
            )
        else:
            # no labeled validation: fall back to train-loss percentile
            self.threshold_config = self.fallback
            normal_losses = ae.reconstruction_losses(self.net, Z.values)
        self.threshold = ae.compute_threshold(normal_losses,
                                              self.threshold_config)

    def score(self, X) -> np.ndarray:
        self._check_fitted()
        return ae.reconstruction_losses(
            self.net, self.standardizer.transform(_values(X))
        )

    def decide(self, scores: np.ndarray) -> np.ndarray:
        # strictly beyond the threshold; an exact tie stays normal
        return (scores > self.threshold).astype(np.int8)

    def params(self) -> dict:
        tc = self.threshold_config
        return {
            "hidden": list(self.hidden), "bottleneck": self.bottleneck,
            "epochs": self.train_config.epochs,
            "batch_size": self.train_config.batch_size,
            "learning_rate": self.train_config.learning_rate,
            "optimizer": self.train_config.optimizer,
            "threshold_p": tc.p if tc else None,
            "threshold_gamma": tc.gamma if tc else None,
        }

    def to_payload(self) -> dict:
        self._check_fitted()
        return {
            "hidden": list(self.hidden),
            "bottleneck": self.bottleneck,
            "standardizer": _standardizer_payload(self.standardizer),
            "net": ae.net_to_payload(self.net),
            "threshold": ae.threshold_to_payload(self.threshold_config,
                                                 self.threshold),
        }

    def load_payload(self, payload: dict) -> None:
        self.hidden = tuple(payload["hidden"])
        self.bottleneck = payload["bottleneck"]
        self.standardizer = _standardizer_from(payload["standardizer"])
        self.net = ae.net_from_payload(payload["net"])
        self.threshold_config, self.threshold = ae.threshold_from_payload(
            payload["threshold"]
        )
        self.fitted = True


_REGISTRY: dict[str, type[Detector]] = {
    "dt": DecisionTreeDetector,
    "knn": KnnDetector,
    "rf": RandomForestDetector,
    "gbt": GbtDetector,
    "rc": RcDetector,
    "lof": LofDetector,
    "iforest": IsoForestDetector,
    "dae": DaeDetector,
}


def register_detector(name: str, cls: type[Detector]) -> None:
    _REGISTRY[name] = cls


def detector_names() -> tuple[str, ...]:
    return tuple(_REGISTRY)


def make_detector(name: str, params: dict | None = None, seed: int = 0) -> Detector:
    if name not in _REGISTRY:
        raise KeyError(f"unknown model {name!r}; known: {sorted(_REGISTRY)}")
    kwargs = dict(params or {})
    seed = kwargs.pop("seed", seed)
    if "hidden" in kwargs:
        kwargs["hidden"] = tuple(kwargs["hidden"])
    return _REGISTRY[name](seed=seed, **kwargs)


def save_detector(path, det: Detector) -> None:
    from .model_io import save_model
    save_model(path, det.name, det.to_payload())


def load_detector(path) -> Detector:
    from .model_io import load_model
    kind, payload = load_model(path)
    det = _REGISTRY[kind]()
    det.load_payload(payload)
    return det
