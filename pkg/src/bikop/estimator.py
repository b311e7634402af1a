"""scikit-learn style facade over pre-training, fine-tuning and few-shot inference.

``fit`` trains on base classes. ``adapt`` stores a labelled support set of
(possibly unseen) classes, after which ``predict`` and friends classify new
images against that support set::

    clf = BiKopClassifier(finetune_episodes=200).fit(dataset)
    clf.adapt(support_images, support_labels, class_tokens)
    clf.predict(query_images)
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_balanced, check_class_tokens, check_images, check_labels
from .backbone import BackboneConfig
from .bkp import BKPConfig
from .data import ClassSpec, DataConfig, Dataset, Episode
from .head import LossConfig
from .model import BiKopModel, ModelConfig
from .sad import SADConfig
from .text import TextConfig
from .training import TrainConfig, finetune, pretrain


def _dataset_from_arrays(X: np.ndarray, y: np.ndarray, tokens: dict[int, tuple[int, ...]]) -> Dataset:
    classes = np.unique(y)
    order = np.argsort(y, kind="stable")
    specs = tuple(ClassSpec(int(c), -1, -1, tokens[int(c)]) for c in classes)
    cfg = DataConfig(image_size=X.shape[1], n_base=len(classes), n_val=0, n_novel=0,
                     images_per_class=int(np.bincount(y - y.min()).max()))
    return Dataset(cfg, specs, {"base": tuple(int(c) for c in classes), "val": (), "novel": ()},
                   X[order], y[order])


class BiKopClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Few-shot image classifier conditioned on class-name tokens."""

    def __init__(self, dim=64, depth=6, split_layer=4, heads=4, patch_size=8,
                 token_dim=32, prompt_length=8, use_prompt=True,
                 mu=0.2, direction="bi", fusion="cross_attention",
                 use_sad=True, n_samples=None, filter_depth=2, gumbel_temperature=1.0,
                 tau=0.2, gamma=0.5,
                 pretrain_epochs=12, finetune_episodes=800, base_lr=1e-4, weight_decay=1e-5,
                 n_way=5, k_shot=1, n_query=15, early_stopping=True, random_state=0):
        self.dim = dim
        self.depth = depth
        self.split_layer = split_layer
        self.heads = heads
        self.patch_size = patch_size
        self.token_dim = token_dim
        self.prompt_length = prompt_length
        self.use_prompt = use_prompt
        self.mu = mu
        self.direction = direction
        self.fusion = fusion
        self.use_sad = use_sad
        self.n_samples = n_samples
        self.filter_depth = filter_depth
        self.gumbel_temperature = gumbel_temperature
        self.tau = tau
        self.gamma = gamma
        self.pretrain_epochs = pretrain_epochs
        self.finetune_episodes = finetune_episodes
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.n_way = n_way
        self.k_shot = k_shot
        self.n_query = n_query
        self.early_stopping = early_stopping
        self.random_state = random_state

    def _model_config(self, image_shape, vocab_size) -> ModelConfig:
        h, w, c = image_shape
        return ModelConfig(
            backbone=BackboneConfig(depth=self.depth, split_layer=self.split_layer, dim=self.dim,
                                    heads=self.heads, patch_size=self.patch_size,
                                    image_size=(h, w), channels=c),
            text=TextConfig(token_dim=self.token_dim, prompt_length=self.prompt_length,
                            use_prompt=self.use_prompt),
            bkp=BKPConfig(mu=self.mu, direction=self.direction, fusion=self.fusion),
            sad=SADConfig(enabled=self.use_sad, n_samples=self.n_samples, depth=self.filter_depth,
                          temperature=self.gumbel_temperature),
            loss=LossConfig(tau=self.tau, gamma=self.gamma),
            vocab_size=vocab_size,
            n_slots=self.n_way,
            seed=self.random_state,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(pretrain_epochs=self.pretrain_epochs, finetune_episodes=self.finetune_episodes,
                           base_lr=self.base_lr, weight_decay=self.weight_decay, n_way=self.n_way,
                           k_shot=self.k_shot, n_query=self.n_query,
                           early_stopping=self.early_stopping, seed=self.random_state)

    def fit(self, X, y=None, class_tokens=None):
        """Pre-train and fine-tune on base classes.

        ``X`` is either a :class:`Dataset` (its base split is used) or an image
        array with integer class labels ``y`` and a ``class_tokens`` mapping
        from class label to name token ids.
        """
        if isinstance(X, Dataset):
            dataset = X
            vocab = dataset.vocab_size
        else:
            X = check_images(X)
            y = check_labels(y, len(X))
            tokens = check_class_tokens(class_tokens, np.unique(y))
            dataset = _dataset_from_arrays(X, y, tokens)
            vocab = max(max(t) for t in tokens.values()) + 1
        image_shape = dataset.images.shape[1:]
        model = BiKopModel(self._model_config(image_shape, vocab))
        cfg = self._train_config()
        if not dataset.splits.get("val") or len(dataset.splits["val"]) < self.n_way:
            cfg = replace(cfg, early_stopping=False)
        self.pretrain_history_ = pretrain(model, dataset, cfg)
        self.finetune_history_ = finetune(model, dataset, cfg)
        model.eval()
        self.model_ = model
        self.image_shape_ = tuple(image_shape)
        self.vocab_size_ = vocab
        return self

    def adapt(self, support_images, support_labels, class_tokens):
        """Store a support set; labels may be any integers, one name-token tuple per class."""
        check_is_fitted(self, "model_")
        Xs = check_images(support_images, self.image_shape_)
        ys = check_labels(support_labels, len(Xs))
        classes = np.unique(ys)
        if len(classes) > self.model_.config.n_slots:
            raise ValueError(f"{len(classes)} classes exceed the {self.model_.config.n_slots} prompt slots")
        tokens = check_class_tokens(class_tokens, classes)
        if max(max(t) for t in tokens.values()) >= self.vocab_size_:
            raise ValueError(f"name token ids must be < {self.vocab_size_}")
        k = check_balanced(ys)
        idx = np.searchsorted(classes, ys)
        order = np.argsort(idx, kind="stable")
        self.classes_ = classes
        self._support = (Xs[order], idx[order], tuple(tokens[int(c)] for c in classes), k)
        return self

    def _episode(self, X) -> Episode:
        if not hasattr(self, "_support"):
            raise ValueError("call adapt() with a support set before predicting")
        Xq = check_images(X, self.image_shape_)
        xs, ys, names, k = self._support
        n = len(names)
        return Episode(
            support_images=xs, support_labels=ys, support_ids=np.arange(len(xs)),
            query_images=Xq, query_labels=np.zeros(len(Xq), dtype=np.int64),
            query_ids=np.arange(len(xs), len(xs) + len(Xq)), class_ids=tuple(range(n)),
            name_tokens=names, slot_assignment=tuple(range(n)), n_way=n, k_shot=k, n_query=len(Xq),
        )

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.predict_episode(self._episode(X)).double().numpy()

    def predict_proba(self, X) -> np.ndarray:
        return torch.softmax(torch.from_numpy(self.decision_function(X)), dim=-1).numpy()

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    @torch.no_grad()
    def transform(self, X) -> np.ndarray:
        """Pooled query-path features, ``(n, dim)``."""
        check_is_fitted(self, "model_")
        return self.model_.encode_query(check_images(X, self.image_shape_)).double().numpy()
