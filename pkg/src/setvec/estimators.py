"""scikit-learn style wrappers around training, embedding, projection and classification."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .corpus import Corpus
from .encoder import EncoderConfig, encode
from .query import EmbeddingMatrix, extract_all, principal_axes
from .tensor import GradientTape, Tensor, backward
from .trainer import Checkpoint, TrainConfig, adam_step, train
from .validation import check_corpus, check_features, check_images


class SetVecEmbedder(TransformerMixin, BaseEstimator):
    """Learn item embeddings from style sets; ``transform`` maps images to vectors.

    ``fit`` takes a :class:`~setvec.corpus.Corpus`. After fitting, the input
    network embeds arbitrary image batches of the configured shape.
    """

    def __init__(
        self,
        embedding_dim=64,
        conv_stages=((16, 2), (32, 2), (64, 2)),
        input_shape=(3, 32, 32),
        batch_norm=True,
        epochs=10,
        batch_size=16,
        learning_rate=1e-3,
        beta1=0.9,
        beta2=0.999,
        eps=1e-8,
        k=5,
        seed=0,
        dtype="float32",
        metric="cosine",
    ):
        self.embedding_dim = embedding_dim
        self.conv_stages = conv_stages
        self.input_shape = input_shape
        self.batch_norm = batch_norm
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.k = k
        self.seed = seed
        self.dtype = dtype
        self.metric = metric

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            input_shape=tuple(self.input_shape), conv_stages=tuple(map(tuple, self.conv_stages)),
            embedding_dim=self.embedding_dim, batch_norm=self.batch_norm,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
            beta1=self.beta1, beta2=self.beta2, eps=self.eps, k=self.k, seed=self.seed, dtype=self.dtype,
        )

    def fit(self, corpus: Corpus, y=None, **train_kwargs):
        corpus = check_corpus(corpus)
        result = train(corpus, self.train_config(), self.encoder_config(), **train_kwargs)
        self._set_checkpoint(result.checkpoint)
        self.loss_log_ = result.loss_log
        self.epoch_losses_ = result.epoch_losses
        return self

    def _set_checkpoint(self, ckpt: Checkpoint) -> None:
        self.checkpoint_ = ckpt
        self.input_params_ = ckpt.input_params
        self.context_params_ = ckpt.context_params
        self.n_features_out_ = ckpt.encoder_config.embedding_dim

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, **params) -> "SetVecEmbedder":
        tc, ec = ckpt.train_config, ckpt.encoder_config
        est = cls(
            embedding_dim=ec.embedding_dim, conv_stages=ec.conv_stages, input_shape=ec.input_shape,
            batch_norm=ec.batch_norm, epochs=tc.epochs, batch_size=tc.batch_size,
            learning_rate=tc.learning_rate, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps, k=tc.k,
            seed=tc.seed, dtype=tc.dtype, **params,
        )
        est._set_checkpoint(ckpt)
        est.loss_log_ = []
        est.epoch_losses_ = []
        return est

    def transform(self, X, batch_size: int = 64) -> np.ndarray:
        check_is_fitted(self, "input_params_")
        cfg = self.input_params_.config
        X = check_images(X, cfg.input_shape, dtype=np.dtype(self.checkpoint_.train_config.dtype))
        out = [encode(self.input_params_, X[s:s + batch_size]).data for s in range(0, len(X), batch_size)]
        return np.concatenate(out).astype(np.float64)

    def embed_corpus(self, corpus: Corpus, batch_size: int = 64) -> EmbeddingMatrix:
        check_is_fitted(self, "input_params_")
        return extract_all(self.input_params_, check_corpus(corpus), batch_size, self.metric)


class StyleSpaceProjector(TransformerMixin, BaseEstimator):
    """Principal-component projection used for plotting the embedding space."""

    def __init__(self, n_components=2):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_features(X.vectors if isinstance(X, EmbeddingMatrix) else X)
        if X.shape[0] < 3:
            raise ValueError("need at least 3 rows to fit a projection")
        self.mean_ = X.mean(axis=0)
        self.components_, self.explained_variance_ = principal_axes(X, self.n_components)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_features(X.vectors if isinstance(X, EmbeddingMatrix) else X)
        return (X - self.mean_) @ self.components_.T


class MLPStyleClassifier(ClassifierMixin, BaseEstimator):
    """Multi-layer perceptron with relu hidden layers and a softmax output.

    Trained full-batch (or in mini-batches) with Adam on mean cross-entropy.
    Inputs are standardized with statistics from the training data.
    """

    def __init__(self, hidden_sizes=(64,), learning_rate=1e-2, epochs=300, batch_size=None, seed=0):
        self.hidden_sizes = hidden_sizes
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def _forward(self, params, X: Tensor) -> Tensor:
        h = X
        n_layers = len(params) // 2
        for layer in range(n_layers):
            h = T.affine(h, params[f"w{layer}"], params[f"b{layer}"])
            if layer < n_layers - 1:
                h = T.relu(h)
        return h

    def fit(self, X, y):
        X = check_features(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} rows but y has {len(y)} labels")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.mean_ = X.mean(axis=0)
        scale = X.std(axis=0)
        self.scale_ = np.where(scale > 0, scale, 1.0)
        Xs = (X - self.mean_) / self.scale_
        rng = np.random.default_rng(self.seed)
        sizes = [X.shape[1], *self.hidden_sizes, len(self.classes_)]
        params = {}
        for layer, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = np.sqrt(6.0 / a)
            params[f"w{layer}"] = Tensor(rng.uniform(-bound, bound, (a, b)))
            params[f"b{layer}"] = Tensor(np.zeros(b))
        cfg = TrainConfig(learning_rate=self.learning_rate)
        moments: dict = {}
        n = len(Xs)
        bs = n if self.batch_size is None else int(self.batch_size)
        step = 0
        self.loss_curve_ = []
        for _ in range(self.epochs):
            order = rng.permutation(n) if bs < n else np.arange(n)
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                with GradientTape() as tape:
                    tape.watch(*params.values())
                    loss = cross_entropy(self._forward(params, Tensor(Xs[idx])), y_idx[idx])
                grads = backward(loss, tape)
                step += 1
                params, moments = adam_step(params, {k: grads[v] for k, v in params.items()}, moments, step, cfg)
                self.loss_curve_.append(loss.item())
        self.params_ = params
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_features(X)
        logits = self._forward(self.params_, Tensor((X - self.mean_) / self.scale_)).data
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-softmax of the target column per row."""
    targets = np.asarray(targets, dtype=np.intp)
    n, c = logits.shape
    picked = T.take(T.reshape(logits, (n * c,)), np.arange(n) * c + targets)
    return T.mean(T.subtract(T.logsumexp(logits, axis=1), picked))
