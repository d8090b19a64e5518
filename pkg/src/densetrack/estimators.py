"""scikit-learn style wrappers around the training and tracking stages.

    >>> tracker = DenseTracker(pairwise_iterations=500, crop=64).fit(corpus)
    >>> labels = tracker.predict(sequence)          # one label map per frame
    >>> tracker.score([sequence])                   # mean J&F

Hyperparameters live in ``__init__`` untouched, so ``get_params`` /
``set_params`` / ``sklearn.base.clone`` work as usual. Fitted state carries a
trailing underscore.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from ._validation import check_frames, check_masks, check_odd, check_positive_int, check_sequences, check_unit_interval
from .adapt import AdaptConfig, predict_appearance, train_appearance
from .correspond import BottleneckConfig, EncoderConfig, TrainConfig, encode, train_pairwise
from .memory import MemoryConfig, MomentumPair, finetune_with_memory
from .ingest import MaskProbMap
from .metrics import evaluate_arrays
from .pipeline import ground_truth, has_evaluation_targets
from .track import hard_labels, preprocess, run_tracking


def _check_fitted(est, attr: str) -> None:
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


class DenseTracker(BaseEstimator, TransformerMixin):
    """Self-supervised correspondence encoder plus memory-bank mask propagation.

    ``fit`` runs pairwise reconstruction pretraining and, when
    ``memory_iterations > 0``, momentum-memory fine-tuning. ``transform``
    returns per-frame feature maps; ``predict`` propagates a sequence's
    first-frame mask.
    """

    def __init__(
        self,
        widths=(64, 128, 256),
        blocks=(2, 2, 2),
        crop=384,
        window_side=25,
        pairwise_iterations=120_000,
        batch_size=48,
        lr=1e-3,
        max_gap=4,
        memory_iterations=10_000,
        memory_batch_size=4,
        memory_lr=1e-4,
        momentum=0.999,
        n_references=5,
        policy="first_plus_recent",
        short_side=None,
        jitter_prob=0.3,
        dropout_prob=0.5,
        random_state=0,
    ):
        self.widths = widths
        self.blocks = blocks
        self.crop = crop
        self.window_side = window_side
        self.pairwise_iterations = pairwise_iterations
        self.batch_size = batch_size
        self.lr = lr
        self.max_gap = max_gap
        self.memory_iterations = memory_iterations
        self.memory_batch_size = memory_batch_size
        self.memory_lr = memory_lr
        self.momentum = momentum
        self.n_references = n_references
        self.policy = policy
        self.short_side = short_side
        self.jitter_prob = jitter_prob
        self.dropout_prob = dropout_prob
        self.random_state = random_state

    def _validate_params(self) -> None:
        check_odd(self.window_side, "window_side")
        check_positive_int(self.n_references, "n_references")
        check_positive_int(self.pairwise_iterations, "pairwise_iterations", 0)
        check_positive_int(self.memory_iterations, "memory_iterations", 0)
        check_unit_interval(self.momentum, "momentum")
        check_unit_interval(self.jitter_prob, "jitter_prob", closed_right=True)
        check_unit_interval(self.dropout_prob, "dropout_prob", closed_right=True)

    def fit(self, X, y=None):
        """``X`` is a list of training sequences; masks are not used."""
        self._validate_params()
        seqs = check_sequences(X)
        bottleneck = BottleneckConfig(self.jitter_prob, self.dropout_prob)
        enc_cfg = EncoderConfig(tuple(self.widths), tuple(self.blocks))
        result = train_pairwise(
            seqs,
            TrainConfig(
                iterations=self.pairwise_iterations, batch_size=self.batch_size, lr=self.lr, crop=self.crop,
                window_side=self.window_side, max_gap=self.max_gap, seed=self.random_state, encoder=enc_cfg,
                bottleneck=bottleneck,
            ),
        )
        self.loss_curve_ = list(result.losses)
        if self.memory_iterations:
            tuned = finetune_with_memory(
                result.encoder,
                seqs,
                MemoryConfig(
                    iterations=self.memory_iterations, batch_size=self.memory_batch_size, lr=self.memory_lr,
                    momentum=self.momentum, num_refs=self.n_references, crop=self.crop,
                    window_side=self.window_side, seed=self.random_state, bottleneck=bottleneck,
                ),
            )
            self.pair_ = tuned.pair
            self.memory_loss_curve_ = list(tuned.losses)
        else:
            self.pair_ = MomentumPair.from_encoder(result.encoder, self.momentum)
            self.memory_loss_curve_ = []
        return self

    @classmethod
    def from_pair(cls, pair: MomentumPair, **params) -> "DenseTracker":
        """Wrap already-trained encoders (e.g. loaded from a checkpoint)."""
        est = cls(**params)
        est.pair_ = pair
        est.loss_curve_, est.memory_loss_curve_ = [], []
        return est

    def transform(self, X) -> list[np.ndarray]:
        """Query-encoder features (d, H/4, W/4) for each frame."""
        _check_fitted(self, "pair_")
        frames = check_frames(X)
        return [encode(preprocess(f, self.short_side), self.pair_.theta_q).values.numpy() for f in frames]

    def predict_proba(self, X) -> list[np.ndarray]:
        """Full-resolution class probabilities for every frame of one sequence."""
        _check_fitted(self, "pair_")
        (seq,) = check_sequences(X, require_masks=True)
        torch.manual_seed(self.random_state)
        outs = run_tracking(seq, self.pair_, self.n_references, self.window_side, self.policy, self.short_side)
        return [m.probs for m in outs]

    def predict(self, X) -> list[np.ndarray]:
        """Label maps for every frame of one sequence (frame 0 is its annotation)."""
        return hard_labels([MaskProbMap(p) for p in self.predict_proba(X)])

    def score(self, X, y=None) -> float:
        """Mean J&F over sequences that carry ground truth beyond the first frame."""
        seqs = [s for s in check_sequences(X, require_masks=True) if has_evaluation_targets(s)]
        if not seqs:
            raise ValueError("no sequence carries ground truth beyond the first frame")
        preds = {s.name: self.predict(s) for s in seqs}
        gts = {s.name: ground_truth(s) for s in seqs}
        return evaluate_arrays(preds, gts).summary["JF_mean"]


class OnlineAdapter(BaseEstimator):
    """Per-video appearance model fitted from scratch to (frame, pseudo-mask) pairs."""

    def __init__(
        self,
        iterations=200,
        lr=2e-4,
        lr_step=50,
        lr_gamma=0.5,
        resolution=480,
        batch_size=4,
        decay=0.98,
        w_ce=1.0,
        w_dice=1.0,
        widths=(64, 128, 256),
        curve_every=10,
        random_state=0,
    ):
        self.iterations = iterations
        self.lr = lr
        self.lr_step = lr_step
        self.lr_gamma = lr_gamma
        self.resolution = resolution
        self.batch_size = batch_size
        self.decay = decay
        self.w_ce = w_ce
        self.w_dice = w_dice
        self.widths = widths
        self.curve_every = curve_every
        self.random_state = random_state

    def _config(self) -> AdaptConfig:
        return AdaptConfig(
            iterations=self.iterations, lr=self.lr, lr_step=self.lr_step, lr_gamma=self.lr_gamma,
            resolution=self.resolution, batch_size=self.batch_size, decay=self.decay, w_ce=self.w_ce,
            w_dice=self.w_dice, widths=tuple(self.widths), seed=self.random_state, curve_every=self.curve_every,
        )

    def fit(self, X, y, oracle=None):
        """``X``: frames in temporal order; ``y``: pseudo-masks (label maps or probabilities).

        ``oracle`` optionally holds clean masks used only for the monitoring curve.
        """
        cfg = self._config()
        frames = check_frames(X)
        pseudo = check_masks(y, frames)
        clean = check_masks(oracle, frames, pseudo[0].num_classes - 1) if oracle is not None else None
        result = train_appearance(frames, pseudo, cfg, oracle_masks=clean)
        self.model_ = result.model
        self.n_classes_ = pseudo[0].num_classes
        self.classes_ = np.arange(self.n_classes_)
        self.loss_curve_ = result.losses
        self.curve_ = result.curve
        return self

    def predict_proba(self, X) -> np.ndarray:
        """(n_frames, n_classes, H, W) probabilities at the input resolution."""
        _check_fitted(self, "model_")
        frames = check_frames(X)
        return np.stack([predict_appearance(self.model_, f, self.resolution).probs for f in frames])

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(1).astype(np.uint8)
