"""Category-gated mixture-of-experts ranker.

The inference gate scores experts from the sub-category embedding, keeps the
top K (after optional learned Gaussian noise) and mixes the selected expert
towers. Two optional regularizers shape training:

* a hierarchical soft constraint pulling the inference gate's softmax toward
  a constraint gate driven by the parent top-category embedding, measured on
  the selected coordinates only;
* an adversarial term rewarding idle, randomly sampled experts for
  disagreeing with the selected ones.

Expert towers never receive gradient from the hierarchical term; the
constraint gate receives nothing else.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .numcore import (
    MLP,
    ConfigurationError,
    Param,
    glorot_uniform,
    sigmoid,
    softmax,
    softmax_backward,
    softplus,
)

SC_COL = 0
TC_COL = 1
CLIP = 1e-7
CHECKPOINT_VERSION = 1

VARIANTS = ("DNN", "MoE", "AdvMoE", "HSCMoE", "AdvHSCMoE")
GATE_INPUTS = ("sc", "tc_sc", "all")


@dataclass(frozen=True)
class ModelConfig:
    n_experts: int = 10
    top_k: int = 4
    n_disagree: int = 1
    embed_dim: int = 16
    expert_widths: tuple = (32, 16, 8, 1)
    vocab_sizes: tuple = (17, 5)
    n_numeric: int = 0
    lambda_hsc: float = 1e-3
    lambda_adv: float = 1e-3
    variant: str = "AdvHSCMoE"
    noise: bool = True
    combine: str = "logit"
    adv_grad: str = "full"
    gate_input: str = "sc"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "expert_widths", tuple(int(w) for w in self.expert_widths))
        object.__setattr__(self, "vocab_sizes", tuple(int(v) for v in self.vocab_sizes))
        self.validate()

    def validate(self):
        N, K, D = self.n_experts, self.top_k, self.n_disagree
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 1 <= K <= N:
            raise ConfigurationError(f"need 1 <= top_k <= n_experts, got K={K}, N={N}")
        if not 0 <= D <= N - K:
            raise ConfigurationError(f"need 0 <= n_disagree <= N - K, got D={D}, N={N}, K={K}")
        if not self.expert_widths or self.expert_widths[-1] != 1:
            raise ConfigurationError("expert_widths must end with output width 1")
        if len(self.vocab_sizes) < 2:
            raise ConfigurationError("need at least the sub-category and top-category features")
        if self.combine not in ("logit", "prob"):
            raise ConfigurationError(f"combine must be 'logit' or 'prob', got {self.combine!r}")
        if self.adv_grad not in ("full", "stop_topk"):
            raise ConfigurationError(f"adv_grad must be 'full' or 'stop_topk', got {self.adv_grad!r}")
        if self.gate_input not in GATE_INPUTS:
            raise ConfigurationError(f"gate_input must be one of {GATE_INPUTS}")

    @property
    def n_sparse(self):
        return len(self.vocab_sizes)

    @property
    def input_width(self):
        return self.n_sparse * self.embed_dim + self.n_numeric

    @property
    def uses_hsc(self):
        return self.variant in ("HSCMoE", "AdvHSCMoE")

    @property
    def uses_adv(self):
        return self.variant in ("AdvMoE", "AdvHSCMoE")

    @property
    def active_disagree(self):
        return self.n_disagree if self.uses_adv else 0

    @property
    def gate_columns(self):
        if self.gate_input == "sc":
            return (SC_COL,)
        if self.gate_input == "tc_sc":
            return (TC_COL, SC_COL)
        return tuple(range(self.n_sparse))

    def for_variant(self, variant):
        """Config for ``variant``; DNN collapses to a single always-on tower."""
        if variant == "DNN":
            return replace(self, variant=variant, n_experts=1, top_k=1, n_disagree=0)
        return replace(self, variant=variant)

    def to_dict(self):
        d = asdict(self)
        d["expert_widths"] = list(self.expert_widths)
        d["vocab_sizes"] = list(self.vocab_sizes)
        return d


@dataclass(frozen=True)
class GateDecision:
    """Gate state for a stack of gate units (sessions), leading axis = unit."""

    raw_scores: np.ndarray
    noisy_scores: np.ndarray
    topk_indices: np.ndarray
    gate_probs: np.ndarray
    p_inference: np.ndarray
    p_constraint: np.ndarray
    disagree_indices: np.ndarray


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    hsc: float
    adv: float
    total: float

    def as_dict(self):
        return asdict(self)


# standalone gate operations --------------------------------------------

def assemble_input(sparse_ids, numeric, tables):
    """Concatenate one embedding row per sparse feature with the numeric block.

    Ids outside a table's range map to the reserved OOV row 0.
    """
    sparse_ids = np.atleast_2d(np.asarray(sparse_ids, dtype=np.int64))
    numeric = np.atleast_2d(np.asarray(numeric, dtype=np.float64))
    if numeric.shape[0] != sparse_ids.shape[0]:
        numeric = numeric.reshape(sparse_ids.shape[0], -1)
    parts = []
    for j, table in enumerate(tables):
        ids = clip_ids(sparse_ids[:, j], len(table))
        parts.append(table[ids])
    parts.append(numeric)
    return np.concatenate(parts, axis=1)


def clip_ids(ids, vocab_size):
    ids = np.asarray(ids, dtype=np.int64)
    return np.where((ids >= 0) & (ids < vocab_size), ids, 0)


def inference_gate_scores(x_gate, W_I, W_noise=None, training=False, noise_enabled=True,
                          rng=None, eps=None):
    """Return ``(raw, noisy)`` gate scores.

    ``noisy = raw + eps * softplus(x @ W_noise)`` while training with noise
    on; otherwise ``noisy`` is ``raw``. ``eps`` may be supplied to freeze the
    draw.
    """
    x_gate = np.atleast_2d(x_gate)
    raw = x_gate @ W_I
    if not (training and noise_enabled) or W_noise is None:
        return raw, raw.copy()
    if eps is None:
        eps = rng.standard_normal(raw.shape)
    return raw, raw + eps * softplus(x_gate @ W_noise)


def top_k_select(scores, k):
    """Keep the K largest scores, others become ``-inf``.

    Returns ``(masked, indices)`` with indices ordered by descending score,
    ties going to the lower index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ConfigurationError(f"need 1 <= K <= N, got K={k}, N={n}")
    order = np.argsort(-scores, axis=-1, kind="stable")
    idx = order[..., :k]
    masked = np.full_like(scores, -np.inf)
    np.put_along_axis(masked, idx, np.take_along_axis(scores, idx, axis=-1), axis=-1)
    return masked, idx


def gate_probs(masked):
    return softmax(masked, axis=-1)


def hsc_loss(p_inference, p_constraint, topk_indices):
    """Squared gap between the two gate distributions on the selected experts."""
    pi = np.take_along_axis(np.atleast_2d(p_inference), np.atleast_2d(topk_indices), axis=-1)
    pc = np.take_along_axis(np.atleast_2d(p_constraint), np.atleast_2d(topk_indices), axis=-1)
    out = np.sum((pi - pc) ** 2, axis=-1)
    return out if np.ndim(p_inference) > 1 else float(out[0])


def sample_disagreeing(topk_indices, n_experts, n_disagree, rng):
    """Draw D idle experts per row uniformly without replacement.

    Each idle expert gets a uniform key and the D smallest keys win, which is
    a uniform draw over D-subsets of the idle set.
    """
    topk = np.atleast_2d(np.asarray(topk_indices, dtype=np.int64))
    k = topk.shape[-1]
    if n_disagree > n_experts - k:
        raise ConfigurationError(
            f"cannot sample D={n_disagree} disagreeing experts from N-K={n_experts - k} idle ones"
        )
    if n_disagree == 0:
        out = np.zeros((topk.shape[0], 0), dtype=np.int64)
    else:
        keys = rng.random((topk.shape[0], n_experts))
        np.put_along_axis(keys, topk, np.inf, axis=-1)
        out = np.argsort(keys, axis=-1, kind="stable")[:, :n_disagree]
    return out if np.ndim(topk_indices) > 1 else out[0]


def adv_loss(top_logits, disagree_logits):
    """Sum over (selected, idle) pairs of squared sigmoid-output gaps."""
    st = sigmoid(np.atleast_2d(top_logits))
    sd = sigmoid(np.atleast_2d(disagree_logits))
    diff = st[:, :, None] - sd[:, None, :]
    out = np.sum(diff**2, axis=(1, 2))
    return out if np.ndim(top_logits) > 1 else float(out[0])


def cross_entropy(yhat, y):
    yc = np.clip(yhat, CLIP, 1.0 - CLIP)
    return -(y * np.log(yc) + (1.0 - y) * np.log(1.0 - yc))


# the network -----------------------------------------------------------

@dataclass
class ForwardResult:
    yhat: np.ndarray
    logits: np.ndarray
    gate: GateDecision
    units: np.ndarray
    expert_evals: np.ndarray
    loss: LossBreakdown | None = None
    cache: dict = field(default_factory=dict, repr=False)


class MoENet:
    """Parameters plus explicit forward/backward for one model variant."""

    def __init__(self, config: ModelConfig, rng=None):
        self.config = config
        rng = np.random.default_rng(config.seed) if rng is None else rng
        q, N = config.embed_dim, config.n_experts
        self.embeddings = [
            Param(glorot_uniform(rng, v, q), f"emb.{j}") for j, v in enumerate(config.vocab_sizes)
        ]
        g_in = q * len(config.gate_columns)
        self.W_I = Param(glorot_uniform(rng, g_in, N), "gate.W_I")
        self.W_noise = Param(glorot_uniform(rng, g_in, N), "gate.W_noise")
        self.W_C = Param(glorot_uniform(rng, q, N), "gate.W_C")
        widths = (config.input_width,) + config.expert_widths
        self.experts = [MLP.init(rng, widths, f"expert{i}") for i in range(N)]

    # parameter access

    def parameters(self):
        yield from self.embeddings
        yield self.W_I
        yield self.W_noise
        yield self.W_C
        for e in self.experts:
            yield from e.parameters()

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for name, p in params.items():
            v = np.asarray(state[name], dtype=np.float64)
            if v.shape != p.shape:
                raise ConfigurationError(f"{name}: shape {v.shape} != {p.shape}")
            p.value[...] = v

    @property
    def tables(self):
        return [e.value for e in self.embeddings]

    # forward

    def _units(self, sparse, session):
        B = len(sparse)
        if session is None or self.config.gate_input == "all":
            return np.arange(B), np.arange(B)
        _, first, units = np.unique(np.asarray(session), return_index=True, return_inverse=True)
        return units.reshape(-1), first

    def gate(self, sparse, first, *, training=False, rng=None, noise=None, disagree=None,
             disagree_rng=None):
        cfg = self.config
        xg = np.concatenate(
            [self.embeddings[c].value[sparse[first, c]] for c in cfg.gate_columns], axis=1
        )
        use_noise = training and cfg.noise
        eps = None
        if use_noise:
            eps = rng.standard_normal((len(first), cfg.n_experts)) if noise is None else noise
        raw, noisy = inference_gate_scores(
            xg, self.W_I.value, self.W_noise.value, training=use_noise, eps=eps
        )
        masked, topk = top_k_select(noisy, cfg.top_k)
        P = gate_probs(masked)
        p_I = softmax(raw)
        xc = self.embeddings[TC_COL].value[sparse[first, TC_COL]]
        p_C = softmax(xc @ self.W_C.value)
        D = cfg.active_disagree if training else 0
        if disagree is None:
            dis = sample_disagreeing(topk, cfg.n_experts, D,
                                     rng if disagree_rng is None else disagree_rng)
        else:
            dis = np.asarray(disagree, dtype=np.int64).reshape(len(first), -1)
            if np.any(dis[:, :, None] == topk[:, None, :]):
                raise ConfigurationError("disagreeing experts overlap the selected ones")
        decision = GateDecision(raw, noisy, topk, P, p_I, p_C, dis)
        return decision, {"xg": xg, "xc": xc, "eps": eps}

    def forward(self, sparse, numeric, y=None, session=None, *, training=False, rng=None,
                noise=None, disagree=None, disagree_rng=None):
        cfg = self.config
        sparse = np.atleast_2d(np.asarray(sparse, dtype=np.int64)).copy()
        for j, v in enumerate(cfg.vocab_sizes):
            sparse[:, j] = clip_ids(sparse[:, j], v)
        numeric = np.asarray(numeric, dtype=np.float64).reshape(len(sparse), cfg.n_numeric)
        B, N = len(sparse), cfg.n_experts
        units, first = self._units(sparse, session)
        S = len(first)

        X = assemble_input(sparse, numeric, self.tables)
        gate, gcache = self.gate(sparse, first, training=training, rng=rng, noise=noise,
                                 disagree=disagree, disagree_rng=disagree_rng)
        topk, dis = gate.topk_indices, gate.disagree_indices

        active = np.zeros((S, N), dtype=bool)
        np.put_along_axis(active, topk, True, axis=1)
        if dis.shape[1]:
            np.put_along_axis(active, dis, True, axis=1)
        active_rows = active[units]
        E = np.zeros((B, N))
        evals = np.zeros(B, dtype=np.int64)
        expert_cache = {}
        for i in range(N):
            rows = np.flatnonzero(active_rows[:, i])
            if rows.size == 0:
                continue
            out, c = self.experts[i].forward(X[rows])
            E[rows, i] = out[:, 0]
            evals[rows] += 1
            expert_cache[i] = (rows, c)

        Pex = gate.gate_probs[units]
        if cfg.combine == "logit":
            z = np.sum(Pex * E, axis=1)
            yhat = sigmoid(z)
        else:
            sE = sigmoid(E)
            yhat = np.sum(Pex * sE, axis=1)
            z = np.log(np.clip(yhat, CLIP, 1 - CLIP)) - np.log1p(-np.clip(yhat, CLIP, 1 - CLIP))

        res = ForwardResult(yhat, z, gate, units, evals)
        res.cache = dict(gcache, X=X, E=E, Pex=Pex, sparse=sparse, first=first,
                         experts=expert_cache, B=B)
        if y is not None:
            res.loss = self._loss(res, np.asarray(y, dtype=np.float64))
        return res

    def _loss(self, res, y):
        cfg = self.config
        c = res.cache
        B = c["B"]
        ce_i = cross_entropy(res.yhat, y)
        ce = float(np.mean(ce_i))
        hsc = adv = 0.0
        lam1 = cfg.lambda_hsc if cfg.uses_hsc else 0.0
        lam2 = cfg.lambda_adv if cfg.uses_adv else 0.0
        if cfg.uses_hsc:
            hsc_u = hsc_loss(res.gate.p_inference, res.gate.p_constraint, res.gate.topk_indices)
            hsc = float(np.mean(hsc_u[res.units]))
        rows = np.arange(B)[:, None]
        top_e = c["E"][rows, res.gate.topk_indices[res.units]]
        dis_e = c["E"][rows, res.gate.disagree_indices[res.units]]
        c["top_e"], c["dis_e"] = top_e, dis_e
        if cfg.uses_adv and dis_e.shape[1]:
            adv = float(np.mean(adv_loss(top_e, dis_e)))
        c["y"] = y
        total = ce + lam1 * hsc - lam2 * adv
        return LossBreakdown(ce, hsc, adv, total)

    # backward

    def backward(self, res: ForwardResult):
        """Accumulate d(total)/d(param) into every ``Param.grad``."""
        cfg = self.config
        c = res.cache
        B, N, q = c["B"], cfg.n_experts, cfg.embed_dim
        y, yhat, units = c["y"], res.yhat, res.units
        gate = res.gate
        E, Pex = c["E"], c["Pex"]
        S = len(c["first"])
        lam1 = cfg.lambda_hsc if cfg.uses_hsc else 0.0
        lam2 = cfg.lambda_adv if cfg.uses_adv else 0.0

        live = ((yhat > CLIP) & (yhat < 1.0 - CLIP)).astype(np.float64)
        if cfg.combine == "logit":
            dz = (yhat - y) * live / B
            dE = Pex * dz[:, None]
            dPex = E * dz[:, None]
        else:
            yc = np.clip(yhat, CLIP, 1 - CLIP)
            dy = (-(y / yc) + (1.0 - y) / (1.0 - yc)) * live / B
            sE = sigmoid(E)
            dPex = sE * dy[:, None]
            dE = Pex * dy[:, None] * sE * (1.0 - sE)

        if cfg.uses_adv and gate.disagree_indices.shape[1] and lam2:
            rows = np.arange(B)[:, None]
            st, sd = sigmoid(c["top_e"]), sigmoid(c["dis_e"])
            g = (-lam2 / B) * 2.0 * (st[:, :, None] - sd[:, None, :])
            if cfg.adv_grad == "full":
                dE[rows, gate.topk_indices[units]] += g.sum(axis=2) * st * (1.0 - st)
            dE[rows, gate.disagree_indices[units]] += -g.sum(axis=1) * sd * (1.0 - sd)

        # gate
        dP = np.zeros((S, N))
        np.add.at(dP, units, dPex)
        draw = softmax_backward(dP, gate.gate_probs)
        dzn = None
        if c["eps"] is not None:
            zn = c["xg"] @ self.W_noise.value
            dzn = draw * c["eps"] * sigmoid(zn)
        dzc = np.zeros((S, N))
        if cfg.uses_hsc and lam1:
            w = lam1 * np.bincount(units, minlength=S) / B
            topk = gate.topk_indices
            gap = np.take_along_axis(gate.p_inference, topk, 1) - np.take_along_axis(
                gate.p_constraint, topk, 1
            )
            dpI = np.zeros((S, N))
            np.put_along_axis(dpI, topk, 2.0 * gap * w[:, None], axis=1)
            draw = draw + softmax_backward(dpI, gate.p_inference)
            dzc = softmax_backward(-dpI, gate.p_constraint)

        xg, xc = c["xg"], c["xc"]
        self.W_I.grad += xg.T @ draw
        dxg = draw @ self.W_I.value.T
        if dzn is not None:
            self.W_noise.grad += xg.T @ dzn
            dxg += dzn @ self.W_noise.value.T
        self.W_C.grad += xc.T @ dzc
        dxc = dzc @ self.W_C.value.T

        sparse, first = c["sparse"], c["first"]
        for slot, col in enumerate(cfg.gate_columns):
            np.add.at(self.embeddings[col].grad, sparse[first, col], dxg[:, slot * q:(slot + 1) * q])
        np.add.at(self.embeddings[TC_COL].grad, sparse[first, TC_COL], dxc)

        # experts
        dX = np.zeros_like(c["X"])
        for i, (rows, ec) in c["experts"].items():
            dX[rows] += self.experts[i].backward(dE[rows, i:i + 1], ec)
        for j in range(cfg.n_sparse):
            np.add.at(self.embeddings[j].grad, sparse[:, j], dX[:, j * q:(j + 1) * q])

    # inference helpers

    def predict_proba(self, sparse, numeric, session=None):
        return self.forward(sparse, numeric, session=session).yhat

    def expert_logit(self, i, X):
        out, _ = self.experts[i].forward(np.atleast_2d(X))
        return out[:, 0]

    def gate_vectors(self, sparse, numeric, session=None, kind="probs"):
        """Noise-free gate output per gate unit: top-K probs or full softmax."""
        res = self.forward(sparse, numeric, session=session)
        vec = res.gate.gate_probs if kind == "probs" else res.gate.p_inference
        return vec, res.cache["first"]

    # checkpoints

    def save(self, path, extra=None):
        arrays = {f"param/{k}": v for k, v in self.state_dict().items()}
        meta = {"version": CHECKPOINT_VERSION, "config": self.config.to_dict(), "extra": extra or {}}
        arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')!r} in {path}")
            state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        net = cls(ModelConfig(**meta["config"]))
        net.load_state_dict(state)
        net.checkpoint_extra = meta.get("extra", {})
        return net


def predict_mixture(X, P, experts):
    """Mix expert logits over the support of ``P`` for a single input row.

    Returns ``(yhat, {expert: logit})``; experts with zero weight never run.
    """
    X = np.atleast_2d(X)
    logits = {}
    z = 0.0
    for i in np.flatnonzero(np.asarray(P) > 0):
        out, _ = experts[i].forward(X)
        logits[int(i)] = float(out[0, 0])
        z += P[i] * logits[int(i)]
    return float(sigmoid(np.array(z))), logits


__all__ = [
    "ModelConfig", "GateDecision", "LossBreakdown", "MoENet", "ForwardResult",
    "assemble_input", "inference_gate_scores", "top_k_select", "gate_probs", "hsc_loss",
    "sample_disagreeing", "adv_loss", "cross_entropy", "predict_mixture",
    "VARIANTS", "GATE_INPUTS",
]
