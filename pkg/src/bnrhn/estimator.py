"""scikit-learn style wrappers around the functional training API."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted, validate_data

from . import capmetrics
from .batchnorm import BnLayer, bn_forward_infer
from .dataio import CaptionSample, build_vocab
from .numkernel import col_stats
from .training import TrainConfig, greedy_decode_batch, train


def _as_references(caption):
    """A caption given as text, a token list, or a list of either."""
    if isinstance(caption, str):
        return (tuple(capmetrics.tokenize(caption)),)
    caption = list(caption)
    if caption and all(isinstance(c, str) for c in caption) and not any(" " in c for c in caption):
        # A single pre-tokenized caption.
        return (tuple(caption),)
    return tuple(
        tuple(capmetrics.tokenize(c)) if isinstance(c, str) else tuple(c) for c in caption
    )


class RHNCaptioner(BaseEstimator):
    """Caption decoder (LSTM, coupled RHN or batch-normalized RHN).

    ``fit(X, y)`` takes a feature matrix and one caption (or list of
    reference captions) per row; ``predict(X)`` returns greedy captions as
    strings. Hyperparameters mirror :class:`bnrhn.training.TrainConfig`.
    """

    def __init__(
        self,
        model="bn_rhn",
        width=64,
        embed=64,
        depth=3,
        lr0=0.1,
        decay=0.5,
        decay_every=8,
        epochs=10,
        batch_size=8,
        max_len=16,
        clip="auto",
        seed=1,
        init_scale=0.04,
        transform_bias=-2.0,
        carry_bias=2.0,
        bn_gamma=0.1,
        bn_every_depth=True,
        bn_shared_over_time=True,
        min_count=1,
    ):
        self.model = model
        self.width = width
        self.embed = embed
        self.depth = depth
        self.lr0 = lr0
        self.decay = decay
        self.decay_every = decay_every
        self.epochs = epochs
        self.batch_size = batch_size
        self.max_len = max_len
        self.clip = clip
        self.seed = seed
        self.init_scale = init_scale
        self.transform_bias = transform_bias
        self.carry_bias = carry_bias
        self.bn_gamma = bn_gamma
        self.bn_every_depth = bn_every_depth
        self.bn_shared_over_time = bn_shared_over_time
        self.min_count = min_count

    def _config(self):
        return TrainConfig(**self.get_params())

    def fit(self, X, y):
        X = validate_data(self, X, dtype=np.float64)
        if len(y) != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {len(y)} captions")
        samples = [
            CaptionSample(id=str(i), feature=X[i], references=_as_references(cap)) for i, cap in enumerate(y)
        ]
        cfg = self._config()
        self.vocab_ = build_vocab(samples, cfg.min_count)
        self.report_ = train(samples, cfg, vocab=self.vocab_)
        self.params_ = self.report_.params
        self.loss_curve_ = self.report_.losses
        return self

    def predict_tokens(self, X):
        check_is_fitted(self, "params_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return greedy_decode_batch(X, self.params_, self.vocab_, self.max_len)

    def predict(self, X):
        return [" ".join(toks) for toks in self.predict_tokens(X)]

    def score(self, X, y):
        """Corpus BLEU-4 of the greedy captions."""
        cands = self.predict_tokens(X)
        refs = [_as_references(cap) for cap in y]
        return capmetrics.bleu(cands, refs)[3]


class BatchNormalizer(TransformerMixin, BaseEstimator):
    """Column-wise batch normalization as a transformer.

    ``fit`` stores the column mean and population variance of X;
    ``transform`` applies ``gamma * (x - mean) / sqrt(var + eps) + beta``.
    """

    def __init__(self, gamma=1.0, beta=0.0, eps=1e-5):
        self.gamma = gamma
        self.beta = beta
        self.eps = eps

    def fit(self, X, y=None):
        X = validate_data(self, X, dtype=np.float64)
        mean, var = col_stats(X)
        F = X.shape[1]
        self.layer_ = BnLayer(
            gamma=np.full((1, F), float(self.gamma)),
            beta=np.full((1, F), float(self.beta)),
            running_mean=mean,
            running_var=var,
            eps=self.eps,
            n_updates=1,
        )
        self.mean_ = mean.ravel()
        self.var_ = var.ravel()
        return self

    def transform(self, X):
        check_is_fitted(self, "layer_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return bn_forward_infer(X, self.layer_)


__all__ = ["RHNCaptioner", "BatchNormalizer"]
