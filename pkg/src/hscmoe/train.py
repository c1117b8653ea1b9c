"""Training entry points, multi-seed comparisons and hyperparameter sweeps."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .data import Dataset, SynthSpec
from .estimator import DivergenceError, MoERanker
from .metrics import SessionMetricReport, session_auc, session_report
from .model import VARIANTS, ModelConfig
from .numcore import ConfigurationError

log = logging.getLogger(__name__)

METRICS = ("auc", "auc_at_10", "ndcg", "ndcg_at_10")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 256
    epochs: int = 5
    seeds: tuple = (0,)
    eval_every: int | None = None
    validation_fraction: float = 0.1
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    variants: tuple = VARIANTS
    n_buckets: int = 4
    lambda_grid: tuple = ()
    nkd_grid: tuple = ()
    gate_inputs: tuple = ()

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
        self.seeds = tuple(int(s) for s in self.seeds)
        self.variants = tuple(self.variants)
        self.betas = tuple(self.betas)
        self.lambda_grid = tuple(tuple(p) for p in self.lambda_grid)
        self.nkd_grid = tuple(tuple(p) for p in self.nkd_grid)
        self.gate_inputs = tuple(self.gate_inputs)
        bad = set(self.variants) - set(VARIANTS)
        if bad:
            raise ConfigurationError(f"unknown variants {sorted(bad)}")


def make_ranker(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: Dataset, seed=0):
    return MoERanker(
        variant=model_cfg.variant, n_experts=model_cfg.n_experts, top_k=model_cfg.top_k,
        n_disagree=model_cfg.n_disagree, embed_dim=model_cfg.embed_dim,
        expert_widths=model_cfg.expert_widths, n_sparse=dataset.sparse.shape[1],
        vocab_sizes=dataset.vocab_sizes, lambda_hsc=model_cfg.lambda_hsc,
        lambda_adv=model_cfg.lambda_adv, noise=model_cfg.noise, combine=model_cfg.combine,
        adv_grad=model_cfg.adv_grad, gate_input=model_cfg.gate_input, lr=train_cfg.lr,
        betas=train_cfg.betas, eps=train_cfg.eps, weight_decay=train_cfg.weight_decay,
        batch_size=train_cfg.batch_size, epochs=train_cfg.epochs,
        eval_every=train_cfg.eval_every, validation_fraction=train_cfg.validation_fraction,
        random_state=seed,
    )


def train_model(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: Dataset, seed=None):
    """Fit one ranker; returns ``(ranker, history)``."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    seed = train_cfg.seeds[0] if seed is None else seed
    ranker = make_ranker(model_cfg, train_cfg, dataset, seed)
    X, y, g = dataset.to_xy()
    ranker.fit(X, y, g)
    return ranker, ranker.history_


def evaluate(ranker: MoERanker, dataset: Dataset) -> SessionMetricReport:
    X, y, g = dataset.to_xy()
    return ranker.report(X, y, g)


# size buckets -------------------------------------------------------------

def size_buckets(train: Dataset, n_buckets=4):
    """Assign each sub-category to a bucket by training-session count, smallest first."""
    sc_ids, first = np.unique(train.session, return_index=True)
    sess_sc = train.sc[first]
    cats, counts = np.unique(sess_sc, return_counts=True)
    order = np.lexsort((cats, counts))
    parts = np.array_split(order, min(n_buckets, len(cats))) if len(cats) else []
    return {int(cats[i]): b for b, part in enumerate(parts) for i in part}, dict(
        zip(cats.tolist(), counts.tolist())
    )


def bucket_auc(scores, test: Dataset, buckets):
    out = {}
    for b in sorted(set(buckets.values())):
        scs = [sc for sc, bb in buckets.items() if bb == b]
        rows = np.isin(test.sc, scs)
        out[b] = {
            "auc": session_auc(scores[rows], test.y[rows], test.session[rows]),
            "n_sessions": int(len(np.unique(test.session[rows]))),
        }
    return out


# comparisons ---------------------------------------------------------------

@dataclass
class Cell:
    variant: str
    seed: int
    config: dict
    report: SessionMetricReport | None = None
    history: list = field(default_factory=list)
    wall_time: float = 0.0
    buckets: dict = field(default_factory=dict)
    separation: float | None = None
    status: str = "ok"
    error: str | None = None


@dataclass
class ExperimentResult:
    cells: list
    bucket_sizes: dict = field(default_factory=dict)
    bucket_of_sc: dict = field(default_factory=dict)

    def variants(self):
        seen = []
        for c in self.cells:
            if c.variant not in seen:
                seen.append(c.variant)
        return seen

    def metric(self, variant, name="auc"):
        return [getattr(c.report, name) for c in self.cells
                if c.variant == variant and c.status == "ok"]

    def summary(self):
        """Per variant: mean and sample std of each metric over seeds."""
        rows = {}
        for v in self.variants():
            row = {}
            for m in METRICS:
                vals = [x for x in self.metric(v, m) if x is not None]
                row[m] = float(np.mean(vals)) if vals else None
                row[m + "_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            row["n_seeds"] = len(self.metric(v))
            sep = [c.separation for c in self.cells if c.variant == v and c.separation is not None]
            row["separation"] = float(np.mean(sep)) if sep else None
            rows[v] = row
        return rows

    def bucket_gains(self, variant, baseline="DNN"):
        """Per seed and bucket: AUC(variant) - AUC(baseline)."""
        base = {c.seed: c for c in self.cells if c.variant == baseline and c.status == "ok"}
        out = {}
        for c in self.cells:
            if c.variant != variant or c.status != "ok" or c.seed not in base:
                continue
            out[c.seed] = {
                b: c.buckets[b]["auc"] - base[c.seed].buckets[b]["auc"] for b in c.buckets
            }
        return out

    def to_table(self):
        """Tab-separated rows: variant, metric means and stds, seeds."""
        summary = self.summary()
        head = ["variant"] + [x for m in METRICS for x in (m, m + "_std")] + ["separation", "n_seeds"]
        lines = ["\t".join(head)]
        for v, row in summary.items():
            vals = [v] + [_fmt(row[h]) for h in head[1:]]
            lines.append("\t".join(vals))
        return "\n".join(lines)

    def cells_table(self):
        head = ["variant", "seed", "status"] + list(METRICS) + ["separation", "wall_time"]
        lines = ["\t".join(head)]
        for c in self.cells:
            rep = c.report.as_dict() if c.report else {}
            vals = [c.variant, str(c.seed), c.status] + [_fmt(rep.get(m)) for m in METRICS]
            vals += [_fmt(c.separation), f"{c.wall_time:.2f}"]
            lines.append("\t".join(vals))
        return "\n".join(lines)

    def bucket_table(self, baseline="DNN"):
        lines = ["variant\tseed\tbucket\tn_train_sessions\tn_test_sessions\tauc\tgain_vs_" + baseline]
        sizes = {}
        for sc, b in self.bucket_of_sc.items():
            sizes[b] = sizes.get(b, 0) + self.bucket_sizes.get(sc, 0)
        base = {c.seed: c for c in self.cells if c.variant == baseline and c.status == "ok"}
        for c in self.cells:
            if c.status != "ok":
                continue
            for b, info in sorted(c.buckets.items()):
                gain = None
                if c.seed in base:
                    gain = info["auc"] - base[c.seed].buckets[b]["auc"]
                lines.append("\t".join([c.variant, str(c.seed), str(b), str(sizes.get(b, 0)),
                                        str(info["n_sessions"]), _fmt(info["auc"]), _fmt(gain)]))
        return "\n".join(lines)


def _fmt(x):
    if x is None:
        return "NA"
    if isinstance(x, float):
        return "inf" if math.isinf(x) else f"{x:.6f}"
    return str(x)


def run_cell(variant, seed, model_cfg, train_cfg, train, test, buckets):
    cfg = model_cfg.for_variant(variant)
    cell = Cell(variant, seed, cfg.to_dict())
    t0 = time.perf_counter()
    try:
        ranker, history = train_model(cfg, train_cfg, train, seed)
    except (DivergenceError, ConfigurationError) as exc:
        cell.status, cell.error = "failed", str(exc)
        cell.wall_time = time.perf_counter() - t0
        return cell
    Xt, yt, gt = test.to_xy()
    scores = ranker.predict_proba(Xt, gt)[:, 1]
    cell.report = session_report(scores, yt, gt)
    cell.history = history
    cell.buckets = bucket_auc(scores, test, buckets)
    if cfg.n_experts > 1:
        try:
            cell.separation = ranker.gate_separation(Xt, gt)
        except ValueError:
            cell.separation = None
    cell.wall_time = time.perf_counter() - t0
    log.info("%s seed=%d auc=%.4f (%.1fs)", variant, seed, cell.report.auc or float("nan"),
             cell.wall_time)
    return cell


def run_comparison(variants, train: Dataset, test: Dataset, seeds, model_cfg=None,
                   train_cfg=None, n_jobs=1):
    """Train every variant under every seed and evaluate on ``test``."""
    model_cfg = model_cfg or ModelConfig(vocab_sizes=train.vocab_sizes)
    train_cfg = train_cfg or TrainConfig()
    buckets, sizes = size_buckets(train, train_cfg.n_buckets)
    jobs = [(v, s) for v in variants for s in seeds]
    if n_jobs == 1:
        cells = [run_cell(v, s, model_cfg, train_cfg, train, test, buckets) for v, s in jobs]
    else:
        from joblib import Parallel, delayed

        cells = Parallel(n_jobs=n_jobs)(
            delayed(run_cell)(v, s, model_cfg, train_cfg, train, test, buckets) for v, s in jobs
        )
    return ExperimentResult(cells, sizes, buckets)


# sweeps ---------------------------------------------------------------------

@dataclass
class SweepCell:
    point: tuple
    status: str
    result: ExperimentResult | None = None
    error: str | None = None


def _apply_point(axis, point, cfg: ModelConfig):
    if axis == "nkd":
        n, k, d = point
        return replace(cfg, n_experts=int(n), top_k=int(k), n_disagree=int(d))
    if axis == "lambda":
        l1, l2 = point
        return replace(cfg, lambda_hsc=float(l1), lambda_adv=float(l2))
    if axis == "gate_input":
        return replace(cfg, gate_input=point[0] if isinstance(point, tuple) else point)
    raise ConfigurationError(f"unknown sweep axis {axis!r}; expected nkd, lambda or gate_input")


def sweep(axis, grid, base_cfg: ModelConfig, train_cfg: TrainConfig, train: Dataset,
          test: Dataset, variant=None, n_jobs=1):
    """One comparison cell per grid point; invalid points are recorded, not fatal."""
    if not grid:
        raise ConfigurationError("sweep grid is empty")
    variant = variant or base_cfg.variant
    out = []
    for point in grid:
        point = tuple(point) if isinstance(point, (list, tuple)) else (point,)
        try:
            cfg = _apply_point(axis, point, base_cfg)
        except ConfigurationError as exc:
            if "unknown sweep axis" in str(exc):
                raise
            out.append(SweepCell(point, "invalid", error=str(exc)))
            continue
        res = run_comparison([variant], train, test, train_cfg.seeds, cfg, train_cfg, n_jobs)
        out.append(SweepCell(point, "ok", res))
    return out


def sweep_table(cells):
    lines = ["point\tstatus\tauc\tauc_std\tndcg\tseparation\terror"]
    for c in cells:
        if c.status != "ok":
            lines.append(f"{c.point}\t{c.status}\tNA\tNA\tNA\tNA\t{c.error}")
            continue
        row = next(iter(c.result.summary().values()))
        lines.append("\t".join([str(c.point), c.status, _fmt(row["auc"]), _fmt(row["auc_std"]),
                                _fmt(row["ndcg"]), _fmt(row["separation"]), ""]))
    return "\n".join(lines)


# config files ---------------------------------------------------------------

def _coerce(cls, section):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return section


def load_experiment_config(path):
    """Read a YAML file with optional ``model``, ``train`` and ``data`` sections.

    ``model`` feeds :class:`ModelConfig` (vocabulary sizes come from the data),
    ``train`` feeds :class:`TrainConfig`, and ``data`` is either a
    :class:`SynthSpec` mapping or ``{dir: path}`` for a record directory.
    """
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    unknown = set(raw) - {"model", "train", "data"}
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    model = _coerce(ModelConfig, raw.get("model") or {})
    train = TrainConfig(**_coerce(TrainConfig, raw.get("train") or {}))
    data = raw.get("data") or {}
    if "dir" not in data:
        data = SynthSpec(**_coerce(SynthSpec, data))
    return model, train, data
