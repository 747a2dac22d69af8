"""scikit-learn style wrapper around the concurrent network."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .evaluation import run_model
from .image_model import clamp, nearest_network_resolution, resize
from .metrics import ssim
from .training import TrainConfig, TripletDataset, load_checkpoint, save_checkpoint, train
from .validation import check_images, check_network_images, check_paired


class ReflectionRemover(TransformerMixin, BaseEstimator):
    """Separate a photo taken through glass into background and reflection.

    ``fit`` takes mixture images ``X`` and clean backgrounds ``y``; pass the
    reflection layers as ``reflection=`` when they are known. Without them the
    reflection target falls back to ``clamp(X - y)``. ``transform`` and
    ``predict`` both return the recovered backgrounds.

    Parameters mirror :class:`crrn.training.TrainConfig`; the defaults are the
    full training schedule, which is slow on a CPU.
    """

    def __init__(self, base_channels=16, stage1_epochs=40, stage1_lr=1e-4, joint_epochs_a=30, lr_a=1e-4,
                 joint_epochs_b=20, lr_b=1e-5, batch_size=4, sizes=((96, 160), (224, 288)), gamma=0.8,
                 ablation="full", random_state=0, deterministic=False, auto_resize=False):
        self.base_channels = base_channels
        self.stage1_epochs = stage1_epochs
        self.stage1_lr = stage1_lr
        self.joint_epochs_a = joint_epochs_a
        self.lr_a = lr_a
        self.joint_epochs_b = joint_epochs_b
        self.lr_b = lr_b
        self.batch_size = batch_size
        self.sizes = sizes
        self.gamma = gamma
        self.ablation = ablation
        self.random_state = random_state
        self.deterministic = deterministic
        self.auto_resize = auto_resize

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            stage1_epochs=self.stage1_epochs, stage1_lr=self.stage1_lr, joint_epochs_a=self.joint_epochs_a,
            lr_a=self.lr_a, joint_epochs_b=self.joint_epochs_b, lr_b=self.lr_b, batch_size=self.batch_size,
            sizes=list(self.sizes), seed=int(self.random_state or 0), gamma=self.gamma,
            base_channels=self.base_channels, ablation=self.ablation, deterministic=self.deterministic,
        )

    def fit(self, X, y, reflection=None):
        cfg = self._train_config()
        X = check_images(X, "X")
        Y = check_images(y, "y")
        check_paired(X, Y)
        if reflection is None:
            R = [clamp(x - b) for x, b in zip(X, Y)]
        else:
            R = check_images(reflection, "reflection")
            check_paired(X, R, ("X", "reflection"))
        dataset = TripletDataset(X, Y, R)
        self.model_, self.checkpoint_, self.train_log_ = train(dataset, cfg)
        self.n_samples_seen_ = len(X)
        return self

    def _prepare(self, x):
        h, w = x.shape[:2]
        if self.auto_resize and (h % 32 or w % 32):
            return resize(x, nearest_network_resolution(h, w)), (h, w)
        return x, None

    def predict_layers(self, X) -> list:
        """Per image: dict with ``background``, ``reflection`` and ``gradient`` arrays."""
        check_is_fitted(self, "model_")
        X = check_images(X, "X")
        if not self.auto_resize:
            check_network_images(X)
        guidance = self.ablation != "iin_only"
        out = []
        for x in X:
            work, orig = self._prepare(x)
            pred = run_model(self.model_, work, guidance)
            layers = {k: pred[k] for k in ("background", "reflection", "gradient")}
            if orig is not None:
                layers = {k: resize(v, orig) for k, v in layers.items()}
                layers["gradient"] = layers["gradient"][:, :, 0]
            out.append(layers)
        return out

    def predict(self, X):
        backgrounds = [p["background"] for p in self.predict_layers(X)]
        shapes = {b.shape for b in backgrounds}
        return np.stack(backgrounds) if len(shapes) == 1 else backgrounds

    def transform(self, X):
        return self.predict(X)

    def score(self, X, y):
        """Mean SSIM between the recovered backgrounds and ``y``."""
        pred = self.predict(X)
        Y = check_images(y, "y")
        return float(np.mean([float(ssim(b, p)) for b, p in zip(Y, pred)]))

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(self.checkpoint_, path)

    @classmethod
    def from_checkpoint(cls, path, **params) -> "ReflectionRemover":
        """Rebuild a fitted estimator from a saved joint-stage checkpoint."""
        ckpt = load_checkpoint(path)
        cfg = ckpt.config
        est = cls(base_channels=int(cfg.get("base_channels", 16)), ablation=cfg.get("ablation", "full"), **params)
        est.checkpoint_ = ckpt
        est.model_ = ckpt.build_model()
        est.train_log_ = None
        return est
