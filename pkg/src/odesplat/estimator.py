"""scikit-learn style wrapper: fit on a dataset, predict images for (camera, t) queries."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autodiff import ContractError
from .config import TrainConfig, desk_config
from .evaluation import evaluate, summarize
from .scenes import Dataset
from .trainer import Trainer


class DynamicSplatModel(BaseEstimator):
    """Dynamic Gaussian scene model with latent ODE dynamics.

    Parameters
    ----------
    config : TrainConfig or None
        Full training configuration; ``None`` uses the desk-scale preset.
    seed : int
        Overrides ``config.seed``.
    warmup_steps, total_steps : int or None
        Optional overrides of the schedule in ``config``.
    """

    def __init__(self, config: TrainConfig | None = None, seed: int = 0, warmup_steps: int | None = None, total_steps: int | None = None):
        self.config = config
        self.seed = seed
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps

    def _resolved_config(self) -> TrainConfig:
        cfg = self.config if self.config is not None else desk_config()
        kw = {"seed": int(self.seed)}
        if self.warmup_steps is not None:
            kw["warmup_steps"] = int(self.warmup_steps)
        if self.total_steps is not None:
            kw["total_steps"] = int(self.total_steps)
        return cfg.replace(**kw)

    def fit(self, X: Dataset, y=None, init_points=None):
        """Train on the frames of ``X``.  ``y`` is unused (images live in the dataset)."""
        if not isinstance(X, Dataset):
            raise ContractError("fit expects a Dataset")
        if len(X) == 0:
            raise ContractError("cannot fit on an empty dataset")
        cfg = self._resolved_config()
        if init_points is None and cfg.init == "points":
            cfg = cfg.replace(init="unit_cube")
        self.trainer_ = Trainer(cfg, X, init_points=init_points)
        self.trainer_.run()
        self.pipeline_ = self.trainer_.pipeline
        self.n_particles_ = len(self.pipeline_)
        return self

    def predict(self, X) -> np.ndarray:
        """Render images for an iterable of ``(camera, t)`` pairs, stacked as (n, H, W, 3)."""
        check_is_fitted(self, "pipeline_")
        imgs = [self.pipeline_.render(cam, float(t)) for cam, t in X]
        if not imgs:
            raise ContractError("predict needs at least one (camera, t) query")
        return np.stack(imgs)

    def score(self, X: Dataset, y=None) -> float:
        """Mean PSNR over the frames of ``X``."""
        check_is_fitted(self, "pipeline_")
        return summarize(evaluate(self.pipeline_.render, X, "score"))["score"]["psnr"]
