"""scikit-learn compatible ranker around :class:`~hscmoe.model.MoENet`.

``X`` holds integer-valued sparse ids in its first ``n_sparse`` columns
(sub-category, top-category, then any extra sparse features) followed by
normalized numeric features. ``groups`` carries the session key.
"""

from __future__ import annotations

import copy
import logging
import time

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import session_batches, session_slices
from .metrics import gate_cluster_separation, session_auc, session_report
from .model import ModelConfig, MoENet
from .numcore import AdamW, NonFiniteGradientError

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Training hit a non-finite loss or gradient; the last good state is kept."""

    def __init__(self, message, step, state):
        super().__init__(message)
        self.step = step
        self.state = state


class MoERanker(ClassifierMixin, BaseEstimator):
    """Category-gated mixture-of-experts purchase-probability ranker.

    Parameters mirror :class:`~hscmoe.model.ModelConfig` plus optimizer and
    loop settings. ``batch_size`` counts sessions, which are never split.
    ``eval_every`` is in optimizer steps; ``None`` evaluates once per epoch.
    The parameters with the best validation AUC are kept after fitting.
    """

    def __init__(self, variant="AdvHSCMoE", n_experts=10, top_k=4, n_disagree=1, embed_dim=16,
                 expert_widths=(32, 16, 8, 1), n_sparse=4, vocab_sizes=None, lambda_hsc=1e-3,
                 lambda_adv=1e-3, noise=True, combine="logit", adv_grad="full", gate_input="sc",
                 lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01, batch_size=256,
                 epochs=1, eval_every=None, validation_fraction=0.1, random_state=0):
        self.variant = variant
        self.n_experts = n_experts
        self.top_k = top_k
        self.n_disagree = n_disagree
        self.embed_dim = embed_dim
        self.expert_widths = expert_widths
        self.n_sparse = n_sparse
        self.vocab_sizes = vocab_sizes
        self.lambda_hsc = lambda_hsc
        self.lambda_adv = lambda_adv
        self.noise = noise
        self.combine = combine
        self.adv_grad = adv_grad
        self.gate_input = gate_input
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.eval_every = eval_every
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    # helpers

    def _split(self, X):
        X = np.asarray(X, dtype=np.float64)
        sparse = np.rint(X[:, : self.n_sparse]).astype(np.int64)
        return sparse, X[:, self.n_sparse:]

    def _model_config(self, vocab_sizes, n_numeric):
        cfg = ModelConfig(
            n_experts=self.n_experts, top_k=self.top_k, n_disagree=self.n_disagree,
            embed_dim=self.embed_dim, expert_widths=tuple(self.expert_widths),
            vocab_sizes=tuple(vocab_sizes), n_numeric=n_numeric, lambda_hsc=self.lambda_hsc,
            lambda_adv=self.lambda_adv, variant=self.variant,
            noise=self.noise, combine=self.combine, adv_grad=self.adv_grad,
            gate_input=self.gate_input, seed=0,
        )
        return cfg.for_variant(self.variant)

    def _seeds(self):
        ss = np.random.SeedSequence(self.random_state)
        # separate streams keep gate noise paired across variants that differ in D
        init, noise, shuffle, split, disagree = ss.spawn(5)
        return (np.random.default_rng(init), np.random.default_rng(noise),
                int(shuffle.generate_state(1)[0]), np.random.default_rng(split),
                np.random.default_rng(disagree))

    def _validation_split(self, groups, rng):
        slices = session_slices(groups)
        n_val = int(round(len(slices) * self.validation_fraction))
        if n_val == 0 or n_val >= len(slices):
            return np.arange(len(groups)), None
        pick = np.zeros(len(slices), dtype=bool)
        pick[rng.permutation(len(slices))[:n_val]] = True
        val = np.concatenate([s for s, p in zip(slices, pick) if p])
        train = np.concatenate([s for s, p in zip(slices, pick) if not p])
        return np.sort(train), np.sort(val)

    # sklearn API

    def fit(self, X, y, groups=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        if groups is None:
            groups = np.arange(len(y))
        groups = np.asarray(groups)
        self.classes_ = np.array([0, 1])
        sparse, numeric = self._split(X)
        if self.vocab_sizes is None:
            vocab = tuple(int(v) for v in sparse.max(axis=0) + 1)
        else:
            vocab = tuple(self.vocab_sizes)
        init_rng, noise_rng, shuffle_seed, split_rng, disagree_rng = self._seeds()
        self.config_ = self._model_config(vocab, numeric.shape[1])
        self.net_ = MoENet(self.config_, init_rng)
        opt = AdamW(self.net_.parameters(), lr=self.lr, betas=self.betas, eps=self.eps,
                    weight_decay=self.weight_decay)
        tr, va = self._validation_split(groups, split_rng)
        self.history_ = []
        self.n_steps_ = 0
        best_auc, best_state = -np.inf, self.net_.state_dict()
        window = []
        t0 = time.perf_counter()

        def evaluate(epoch):
            nonlocal best_auc, best_state, window
            entry = {"step": self.n_steps_, "epoch": epoch}
            if window:
                for key in ("ce", "hsc", "adv", "total"):
                    entry[key] = float(np.mean([getattr(lb, key) for lb in window]))
            val_auc = None
            if va is not None:
                s = self.net_.predict_proba(sparse[va], numeric[va], groups[va])
                val_auc = session_auc(s, y[va], groups[va])
            entry["val_auc"] = val_auc
            self.history_.append(entry)
            window = []
            score = -np.inf if val_auc is None else val_auc
            if va is None or score > best_auc:
                best_auc, best_state = score, self.net_.state_dict()

        for epoch in range(self.epochs):
            for rows in session_batches(groups[tr], self.batch_size, shuffle_seed + epoch):
                rows = tr[rows]
                res = self.net_.forward(sparse[rows], numeric[rows], y[rows], groups[rows],
                                        training=True, rng=noise_rng,
                                        disagree_rng=disagree_rng)
                if not np.isfinite(res.loss.total):
                    self._abort(best_state, f"non-finite loss at step {self.n_steps_}")
                opt.zero_grad()
                self.net_.backward(res)
                try:
                    opt.step()
                except NonFiniteGradientError as exc:
                    self._abort(best_state, f"{exc} at step {self.n_steps_}")
                self.n_steps_ += 1
                window.append(res.loss)
                if self.eval_every and self.n_steps_ % self.eval_every == 0:
                    evaluate(epoch)
            if not self.eval_every or self.n_steps_ % self.eval_every:
                evaluate(epoch)
        if self.epochs:
            self.net_.load_state_dict(best_state)
        self.best_val_auc_ = None if not np.isfinite(best_auc) else float(best_auc)
        self.fit_time_ = time.perf_counter() - t0
        return self

    def _abort(self, state, message):
        self.net_.load_state_dict(state)
        log.error("training diverged: %s", message)
        raise DivergenceError(message, self.n_steps_, copy.deepcopy(state))

    def _forward(self, X, groups):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        sparse, numeric = self._split(X)
        return self.net_.forward(sparse, numeric, session=groups)

    def decision_function(self, X, groups=None):
        return self._forward(X, groups).logits

    def predict_proba(self, X, groups=None):
        p = self._forward(X, groups).yhat
        return np.column_stack([1.0 - p, p])

    def predict(self, X, groups=None):
        return (self.predict_proba(X, groups)[:, 1] >= 0.5).astype(np.int64)

    def score(self, X, y, groups=None, sample_weight=None):
        """Mean per-session AUC (each row its own session when ``groups`` is None)."""
        if groups is None:
            groups = np.zeros(len(y), dtype=np.int64)
        return session_auc(self.predict_proba(X, groups)[:, 1], y, groups)

    def report(self, X, y, groups):
        return session_report(self.predict_proba(X, groups)[:, 1], y, groups)

    def gate_vectors(self, X, groups=None, kind="probs"):
        """Per-session gate vectors and the row index each came from."""
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        sparse, numeric = self._split(X)
        return self.net_.gate_vectors(sparse, numeric, groups, kind)

    def gate_separation(self, X, groups, group_col=1, kind="probs"):
        """Cluster-separation ratio of per-SC gate vectors grouped by ``group_col``."""
        vecs, first = self.gate_vectors(X, groups, kind)
        X = np.asarray(X)
        sc = np.rint(X[first, 0]).astype(int)
        grp = np.rint(X[first, group_col]).astype(int)
        _, idx = np.unique(sc, return_index=True)
        return gate_cluster_separation(vecs[idx], grp[idx])

    def save(self, path):
        check_is_fitted(self, "net_")
        self.net_.save(path, extra={"estimator": _jsonable(self.get_params()),
                                    "history": self.history_})

    @classmethod
    def load(cls, path):
        net = MoENet.load(path)
        extra = getattr(net, "checkpoint_extra", {})
        params = extra.get("estimator", {})
        params = {k: tuple(v) if isinstance(v, list) else v for k, v in params.items()}
        est = cls(**params)
        est.net_ = net
        est.config_ = net.config
        est.classes_ = np.array([0, 1])
        est.history_ = extra.get("history", [])
        return est


def _jsonable(params):
    out = {}
    for k, v in params.items():
        if isinstance(v, tuple):
            v = list(v)
        if isinstance(v, np.integer):
            v = int(v)
        out[k] = v
    return out
