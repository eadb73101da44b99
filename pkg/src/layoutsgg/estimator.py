"""Estimator wrapper around the functional pipeline."""
from __future__ import annotations

from dataclasses import asdict

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .bench import corruption_seed, eval_boxes, predict_hits
from .corruptions import CorruptionSpec, corrupt
from .metrics import mean_recall_at_k
from .pipeline import ModelConfig, TrainConfig, forward, init_params, load_model, save_model, train
from .scenes import rasterize
from .validation import check_boxes, check_image, check_scenes


class SceneGraphModel(BaseEstimator):
    """Two-stage scene graph model with optional layout restitution and layout encoders.

    Parameters
    ----------
    task : {"predcls", "sgcls"}
        Training and default inference task.
    enable_nrm, enable_lee : bool
        Switch the feature-map restitution and the gated layout encoders on.
    fusion : {"gate", "concat", "add"}
        How coordinate embeddings are merged into encoder features.
    attention : {"centroid", "bbox"}
        Distance used by the layout attention.
    lr, epochs, random_state
        Plain SGD settings; ``random_state`` seeds both init and visiting order.

    Attributes
    ----------
    params_ : ModelParams
    loss_curve_ : list of float
        Mean training loss per epoch.
    """

    def __init__(
        self,
        task="predcls",
        enable_nrm=False,
        enable_lee=False,
        fusion="gate",
        attention="centroid",
        feature_dim=128,
        channels=(16, 32, 32),
        n_categories=8,
        n_predicates=6,
        lr=0.02,
        epochs=10,
        random_state=0,
    ):
        self.task = task
        self.enable_nrm = enable_nrm
        self.enable_lee = enable_lee
        self.fusion = fusion
        self.attention = attention
        self.feature_dim = feature_dim
        self.channels = channels
        self.n_categories = n_categories
        self.n_predicates = n_predicates
        self.lr = lr
        self.epochs = epochs
        self.random_state = random_state

    def _model_config(self, image_size) -> ModelConfig:
        return ModelConfig(
            image_size=image_size,
            channels=self.channels,
            feature_dim=self.feature_dim,
            n_categories=self.n_categories,
            n_predicates=self.n_predicates,
            enable_nrm=self.enable_nrm,
            enable_lee=self.enable_lee,
            fusion=self.fusion,
            attention=self.attention,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, epochs=self.epochs, seed=self.random_state, task=self.task)

    def fit(self, X, y=None, log=None):
        """Train on clean scenes ``X`` (a sequence of SceneRecord); ``y`` is ignored."""
        scenes = check_scenes(X, self.n_categories, self.n_predicates)
        size = (scenes[0].height, scenes[0].width)
        check_scenes(scenes, image_size=size)
        tcfg = self._train_config()
        self.params_ = init_params(self._model_config(size), self.random_state)
        self.params_, self.loss_curve_ = train(scenes, self.params_, tcfg, log=log)
        return self

    @property
    def method_(self) -> str:
        check_is_fitted(self, "params_")
        return self.params_.config.method

    def predict(self, X, corruption=None, severity=0, perturb_bbox=0.0, seed=0, task=None):
        """One :class:`~layoutsgg.pipeline.Prediction` per scene.

        ``corruption``/``severity`` corrupt the rendered image; ``perturb_bbox``
        jitters the boxes given to the model (ground truth is untouched).
        """
        check_is_fitted(self, "params_")
        cfg = self.params_.config
        scenes = check_scenes(X, cfg.n_categories, cfg.n_predicates, cfg.image_size)
        task = task or self.task
        spec = CorruptionSpec(corruption, severity) if corruption else None
        out = []
        for scene, boxes in zip(scenes, eval_boxes(scenes, perturb_bbox, seed)):
            img = rasterize(scene)
            if spec is not None:
                img = corrupt(img, spec, corruption_seed(seed, scene.id, spec.kind))
            out.append(forward(img, boxes, scene.categories(), self.params_, task))
        return out

    def predict_image(self, image, boxes, labels=None, task=None):
        """Predict for a raw (3, H, W) image and normalized boxes."""
        check_is_fitted(self, "params_")
        img = check_image(image, self.params_.config.image_size)
        b = check_boxes(boxes)
        return forward(img, b, labels, self.params_, task or self.task)

    def score(self, X, y=None, k=50):
        """Clean mR@K on scenes ``X``."""
        check_is_fitted(self, "params_")
        scenes = check_scenes(X, self.n_categories, self.n_predicates)
        hits = predict_hits(self.params_, scenes, [rasterize(s) for s in scenes], eval_boxes(scenes), self.task)
        return mean_recall_at_k(hits, k)

    def save(self, path):
        check_is_fitted(self, "params_")
        save_model(self.params_, path, meta={"train": asdict(self._train_config()), "loss_curve": list(self.loss_curve_)})

    @classmethod
    def load(cls, path) -> "SceneGraphModel":
        params, meta = load_model(path, with_meta=True)
        cfg = params.config
        train_meta = meta.get("train", {})
        est = cls(
            task=train_meta.get("task", "predcls"),
            enable_nrm=cfg.enable_nrm,
            enable_lee=cfg.enable_lee,
            fusion=cfg.fusion,
            attention=cfg.attention,
            feature_dim=cfg.feature_dim,
            channels=cfg.channels,
            n_categories=cfg.n_categories,
            n_predicates=cfg.n_predicates,
            lr=train_meta.get("lr", 0.02),
            epochs=train_meta.get("epochs", 10),
            random_state=train_meta.get("seed", 0),
        )
        est.params_ = params
        est.loss_curve_ = meta.get("loss_curve", [])
        return est
