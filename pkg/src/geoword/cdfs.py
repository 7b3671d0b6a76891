"""Learned per-keyword selectivity models.

Each modeled keyword (or frequent itemset) carries one marginal CDF per axis;
the count of matching objects inside a rectangle is estimated as
count * dFx * dFy, and multi-keyword estimates apply an inclusion-exclusion
correction over mined co-occurrence itemsets.

High-frequency keywords get a small MLP trained on (value, rank/n) pairs;
medium-frequency ones a Gaussian fit; low-frequency ones are skipped.  All
MLPs of a build are trained jointly as one stacked batch, which keeps the
model stage cheap even when every keyword qualifies as high-frequency.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np
from scipy.special import ndtr

from .core import Dataset, FrequencyClass, Rect, keyword_frequency_class
from .itemsets import ItemsetTable, mine_frequent_itemsets
from . import scan

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-9
# Empirical-CDF targets span [1/n, 1], so an n-point MLP tops out at a
# (1 - 1/n)^2 full-range mass fraction; below this n that breaks the
# [0.8, 1.2] * count full-space bound and a Gaussian fits better anyway.
MIN_MLP_POINTS = 16

ModelKey = int | tuple[int, ...]


@dataclass(frozen=True)
class CdfConfig:
    """Knobs for model fitting and itemset mining.

    hidden_layers counts hidden layers only; with the defaults the network is
    1 -> 16 -> 16 -> 1 with ReLU activations and a logistic output.  Training
    is minibatch Adam on MSE against empirical-CDF targets (batch_size = 0
    means full batch).  Samples larger than max_train_points are thinned to
    an evenly spaced quantile subset before training (0 disables thinning).

    Each entry of `restarts` is one full training run per model: a kink
    placement for the initial first-layer ReLU positions ("ends" = fixed grid
    denser near the range ends, "data" = half grid, half data quantiles) and
    a learning-rate multiplier.  The run with the lowest final loss wins per
    model.  Both placements ship by default because neither wins everywhere:
    the fixed grid handles smooth marginals, while multi-modal marginals with
    wide empty stretches need the quantile kinks.  The defaults otherwise
    favor build speed; raise epochs/max_train_points and add restarts when
    fit quality matters more than wall time.
    """

    hidden_units: int = 16
    hidden_layers: int = 2
    epochs: int = 800
    lr: float = 2e-3
    batch_size: int = 0
    max_train_points: int = 256
    restarts: tuple[tuple[str, float], ...] = (("ends", 1.0), ("data", 1.0))
    min_support: float = 1e-5
    max_itemset_size: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.hidden_layers < 1 or self.hidden_units < 1:
            raise ValueError("network must have at least one hidden layer/unit")
        if self.epochs < 1 or self.lr <= 0:
            raise ValueError("epochs must be >= 1 and lr positive")
        if self.max_train_points < 0:
            raise ValueError("max_train_points must be >= 0")
        for mode, mult in self.restarts:
            if mode not in ("ends", "data") or mult <= 0:
                raise ValueError(f"bad restart spec ({mode!r}, {mult!r})")


@dataclass
class MarginalCDF:
    """One-axis CDF approximator: Gaussian (mu, sigma) or a tiny MLP.

    MLP inputs are min-max normalized to [0, 1] over [lo, hi] and clamped
    there at evaluation time; layers are stored input-first.
    """

    kind: str
    mu: float = 0.0
    sigma: float = 1.0
    lo: float = 0.0
    hi: float = 1.0
    layers: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def evaluate(self, v):
        """CDF value(s) in [0, 1] at scalar or array v."""
        if self.kind == "gaussian":
            return ndtr((np.asarray(v, dtype=np.float64) - self.mu) / self.sigma)
        x = np.clip(np.asarray(v, dtype=np.float64), self.lo, self.hi)
        h = ((x - self.lo) / (self.hi - self.lo))[..., None]
        for i, (w, b) in enumerate(self.layers):
            h = h @ w.T + b
            if i < len(self.layers) - 1:
                h = np.maximum(h, 0.0)
        out = 1.0 / (1.0 + np.exp(-h[..., 0]))
        return out if out.ndim else float(out)

    def to_dict(self) -> dict:
        if self.kind == "gaussian":
            return {"kind": "gaussian", "mu": self.mu, "sigma": self.sigma}
        return {
            "kind": "mlp",
            "lo": self.lo,
            "hi": self.hi,
            "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MarginalCDF":
        if d["kind"] == "gaussian":
            return cls("gaussian", mu=float(d["mu"]), sigma=float(d["sigma"]))
        layers = [
            (np.asarray(rec["w"], dtype=np.float64), np.asarray(rec["b"], dtype=np.float64))
            for rec in d["layers"]
        ]
        return cls("mlp", lo=float(d["lo"]), hi=float(d["hi"]), layers=layers)


@dataclass
class KeywordModel:
    """Per-key selectivity model: one marginal CDF per axis plus the count."""

    key: ModelKey
    kind: str
    fx: MarginalCDF
    fy: MarginalCDF
    count: int

    def to_dict(self) -> dict:
        key = list(self.key) if isinstance(self.key, tuple) else self.key
        return {
            "key": key,
            "kind": self.kind,
            "count": self.count,
            "fx": self.fx.to_dict(),
            "fy": self.fy.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KeywordModel":
        key = tuple(d["key"]) if isinstance(d["key"], list) else int(d["key"])
        return cls(
            key, d["kind"],
            MarginalCDF.from_dict(d["fx"]), MarginalCDF.from_dict(d["fy"]),
            int(d["count"]),
        )


def fit_gaussian(values: np.ndarray) -> MarginalCDF:
    """Gaussian CDF with sample mean/std; sigma floored at 1e-9.

    A single value degenerates into a (numerical) step function at it.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot fit a CDF to zero values")
    mu = float(values.mean())
    sigma = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return MarginalCDF("gaussian", mu=mu, sigma=max(sigma, SIGMA_FLOOR))


def _empirical_targets(values: np.ndarray) -> np.ndarray:
    s = np.sort(values)
    return np.searchsorted(s, values, side="right") / values.size


def _thin_quantiles(values: np.ndarray, cap: int) -> tuple[np.ndarray, np.ndarray]:
    """Sorted training points capped to an evenly spaced quantile subset.

    Targets stay ranks within the *full* sample; recomputing ranks inside the
    subset would skew them wherever point spacing is uneven.
    """
    s = np.sort(values)
    n = s.size
    if cap and n > cap:
        idx = ((np.arange(cap) + 0.5) / cap * (n - 1)).round().astype(np.int64)
        idx[0], idx[-1] = 0, n - 1
        pts = s[np.unique(idx)]
    else:
        pts = s
    return pts, np.searchsorted(s, pts, side="right") / n


def _kink_positions(x: np.ndarray, units: int, mode: str) -> np.ndarray:
    grid = 0.5 - 0.5 * np.cos(np.pi * (np.arange(units) + 0.5) / units)
    if mode == "ends":
        return grid
    half = units // 2
    ends = 0.5 - 0.5 * np.cos(np.pi * (np.arange(half) + 0.5) / half)
    quant = np.quantile(x, (np.arange(units - half) + 0.5) / (units - half))
    return np.sort(np.concatenate([ends, quant]))


def _kink_init(x: np.ndarray, t: np.ndarray, units: int, depth: int,
               mode: str, clip: float = 7.0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Closed-form starting point: first layer places one ReLU kink per unit,
    middle layers pass through, and the output layer is least-squares fitted
    to the clamped logit of the targets.  Training then starts near a
    monotone interpolant instead of a flat sigmoid, which is what makes
    short schedules reach the distribution tails.
    """
    kinks = _kink_positions(x, units, mode)
    layers = [(np.ones((units, 1)), -kinks)]
    for _ in range(depth - 1):
        layers.append((np.eye(units), np.zeros(units)))
    feats = np.maximum(x[:, None] - kinks[None, :], 0.0)
    a = np.concatenate([feats, np.ones((x.size, 1))], axis=1)
    tc = np.clip(t, 1e-9, 1.0 - 1e-9)
    tz = np.clip(np.log(tc) - np.log1p(-tc), -clip, clip)
    coef, *_ = np.linalg.lstsq(a, tz, rcond=None)
    layers.append((coef[:units][None, :], coef[units:units + 1]))
    return layers


def _run_training(xs, ts, cfg: "CdfConfig", mode: str, lr: float, gen):
    """One stacked training run; returns (per-model best loss, layer arrays)."""
    import torch

    k = len(xs)
    length = max(len(x) for x in xs)
    x_pad = np.zeros((k, length))
    t_pad = np.zeros((k, length))
    m_pad = np.zeros((k, length))
    for i, (x, t) in enumerate(zip(xs, ts)):
        x_pad[i, : len(x)] = x
        t_pad[i, : len(t)] = t
        m_pad[i, : len(x)] = 1.0

    inits = [_kink_init(x, t, cfg.hidden_units, cfg.hidden_layers, mode)
             for x, t in zip(xs, ts)]
    weights, biases = [], []
    for li in range(cfg.hidden_layers + 1):
        w = np.stack([rows[li][0] for rows in inits])
        b = np.stack([rows[li][1] for rows in inits])
        weights.append(torch.from_numpy(w).requires_grad_(True))
        biases.append(torch.from_numpy(b).requires_grad_(True))

    x_t = torch.from_numpy(x_pad)
    t_t = torch.from_numpy(t_pad)
    m_t = torch.from_numpy(m_pad)
    opt = torch.optim.Adam(weights + biases, lr=lr)

    def forward(x):
        h = x.unsqueeze(-1)
        for i, (w, b) in enumerate(zip(weights, biases)):
            h = torch.einsum("koi,kli->klo", w, h) + b.unsqueeze(1)
            if i < len(weights) - 1:
                h = torch.relu(h)
        return torch.sigmoid(h.squeeze(-1))

    full_batch = not (0 < cfg.batch_size < length)
    m_sum = m_t.sum(dim=1)
    best = torch.full((k,), math.inf, dtype=torch.float64)
    best_w = [w.detach().clone() for w in weights]
    best_b = [b.detach().clone() for b in biases]
    for epoch in range(cfg.epochs):
        if epoch in (int(cfg.epochs * 0.6), int(cfg.epochs * 0.85)):
            for group in opt.param_groups:
                group["lr"] *= 0.2
        if full_batch:
            per_model = (m_t * (forward(x_t) - t_t) ** 2).sum(dim=1) / m_sum
            with torch.no_grad():
                improved = per_model.detach() < best
                if improved.any():
                    best[improved] = per_model.detach()[improved]
                    for li in range(len(weights)):
                        best_w[li][improved] = weights[li].detach()[improved]
                        best_b[li][improved] = biases[li].detach()[improved]
            loss = per_model.sum() / k
        else:
            cols = torch.randint(0, length, (cfg.batch_size,), generator=gen)
            xb, tb, mb = x_t[:, cols], t_t[:, cols], m_t[:, cols]
            loss = (mb * (forward(xb) - tb) ** 2).sum() / mb.sum().clamp(min=1.0)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if not math.isfinite(float(loss.detach())):
            raise RuntimeError(
                f"CDF training diverged at epoch {epoch} (lr={lr}); lower the learning rate"
            )
    if not full_batch:
        with torch.no_grad():
            best = (m_t * (forward(x_t) - t_t) ** 2).sum(dim=1) / m_sum
        best_w = [w.detach() for w in weights]
        best_b = [b.detach() for b in biases]
    layers = [
        [(w[i].numpy().copy(), b[i].numpy().copy()) for w, b in zip(best_w, best_b)]
        for i in range(k)
    ]
    return best.numpy(), layers


def fit_mlp_cdf_batch(value_arrays: Sequence[np.ndarray], cfg: CdfConfig,
                      seed: int | None = None) -> list[MarginalCDF]:
    """Train one MLP CDF per value array, jointly as a stacked batch.

    Each array needs at least two distinct values.  The learning rate drops
    5x at 60% and again at 85% of the epochs; the best-loss parameters seen
    per model across all restarts are the ones returned.  Raises
    RuntimeError with the epoch and learning rate if the loss goes
    non-finite.
    """
    import torch

    if not value_arrays:
        return []
    k = len(value_arrays)
    los, his, xs, ts = [], [], [], []
    for vals in value_arrays:
        vals = np.asarray(vals, dtype=np.float64)
        lo, hi = float(vals.min()), float(vals.max())
        if lo == hi:
            raise ValueError("MLP CDF requires at least two distinct values")
        pts, targets = _thin_quantiles(vals, cfg.max_train_points)
        los.append(lo)
        his.append(hi)
        xs.append((pts - lo) / (hi - lo))
        ts.append(targets)

    gen = torch.Generator().manual_seed(cfg.seed if seed is None else seed)
    best_loss = np.full(k, math.inf)
    best_layers: list[list[tuple[np.ndarray, np.ndarray]] | None] = [None] * k
    for mode, mult in cfg.restarts:
        loss, layers = _run_training(xs, ts, cfg, mode, cfg.lr * mult, gen)
        for i in range(k):
            if loss[i] < best_loss[i]:
                best_loss[i] = loss[i]
                best_layers[i] = layers[i]

    return [
        MarginalCDF("mlp", lo=los[i], hi=his[i], layers=best_layers[i])
        for i in range(k)
    ]


def fit_mlp_cdf(values: np.ndarray, cfg: CdfConfig, seed: int | None = None) -> MarginalCDF:
    return fit_mlp_cdf_batch([values], cfg, seed)[0]


def _itemset_member_ids(ds: Dataset, keys: tuple[int, ...]) -> np.ndarray:
    post = ds.postings()
    ids = post[keys[0]]
    for k in keys[1:]:
        ids = np.intersect1d(ids, post[k], assume_unique=True)
    return ids


def build_keyword_models(ds: Dataset, cfg: CdfConfig,
                         table: ItemsetTable | None = None) -> dict[ModelKey, KeywordModel]:
    """Fit selectivity models for every non-low keyword and mined itemset.

    The model class follows the keyword's frequency class (itemsets inherit
    from their most frequent member); keys with fewer than MIN_MLP_POINTS
    supporting objects or degenerate coordinates on either axis fall back to
    Gaussian fits.  Emits a warning for any model whose full-space estimate
    drifts outside [0.8, 1.2] * count (possible for clusters hugging a space
    edge, where half a Gaussian's mass falls outside; estimates stay
    estimates, so the build continues).
    """
    if table is None:
        table = mine_frequent_itemsets(ds, cfg.min_support, cfg.max_itemset_size)
    post = ds.postings()

    jobs: list[tuple[ModelKey, str, np.ndarray, int]] = []
    for k in sorted(ds.freq):
        cls = keyword_frequency_class(ds, k)
        if cls is FrequencyClass.LOW:
            continue
        kind = "mlp" if cls is FrequencyClass.HIGH else "gaussian"
        jobs.append((k, kind, post[k], ds.freq[k]))
    for s, support in sorted(table.itemsets.items()):
        lead = max(s, key=lambda k: (ds.freq.get(k, 0), -k))
        cls = keyword_frequency_class(ds, lead)
        if cls is FrequencyClass.LOW:
            continue
        kind = "mlp" if cls is FrequencyClass.HIGH else "gaussian"
        jobs.append((s, kind, _itemset_member_ids(ds, s), support))

    models: dict[ModelKey, KeywordModel] = {}
    mlp_rows: list[tuple[ModelKey, np.ndarray, np.ndarray, int]] = []
    for key, kind, ids, count in jobs:
        xv, yv = ds.xs[ids], ds.ys[ids]
        if (kind == "mlp" and len(ids) >= MIN_MLP_POINTS
                and xv.min() < xv.max() and yv.min() < yv.max()):
            mlp_rows.append((key, xv, yv, count))
        else:
            models[key] = KeywordModel(key, "gaussian", fit_gaussian(xv), fit_gaussian(yv), count)

    if mlp_rows:
        fxs = fit_mlp_cdf_batch([r[1] for r in mlp_rows], cfg, seed=cfg.seed)
        fys = fit_mlp_cdf_batch([r[2] for r in mlp_rows], cfg, seed=cfg.seed + 1)
        for (key, _, _, count), fx, fy in zip(mlp_rows, fxs, fys):
            models[key] = KeywordModel(key, "mlp", fx, fy, count)

    for key, m in models.items():
        full = estimate_count_in_rect(m, ds.space)
        if not 0.8 * m.count <= full <= 1.2 * m.count:
            log.warning(
                "model %s full-space estimate %.1f outside [0.8, 1.2] x count=%d",
                key, full, m.count,
            )
    return models


def estimate_count_in_rect(model: KeywordModel, r: Rect) -> float:
    """count * dFx * dFy, clamped into [0, count]."""
    est = model.count * float(
        (model.fx.evaluate(r.xu) - model.fx.evaluate(r.xb))
        * (model.fy.evaluate(r.yu) - model.fy.evaluate(r.yb))
    )
    return min(max(est, 0.0), float(model.count))


def estimate_query_objects(models: Mapping[ModelKey, KeywordModel],
                           table: ItemsetTable | None,
                           keys: frozenset[int], r: Rect) -> float:
    """Estimated objects in r matching >= 1 of `keys`.

    Sum of single-keyword estimates, inclusion-exclusion corrected over mined
    itemsets whose members are all individually modeled; unmodeled (low)
    keywords contribute nothing.  Clamped to [0, uncorrected sum].
    """
    modeled = [k for k in keys if k in models]
    base = sum(estimate_count_in_rect(models[k], r) for k in modeled)
    total = base
    if table is not None and len(modeled) > 1:
        modeled_set = frozenset(modeled)
        for s in table.subsets_of(modeled_set):
            if s in models:
                sign = -1.0 if len(s) % 2 == 0 else 1.0
                total += sign * estimate_count_in_rect(models[s], r)
    return min(max(total, 0.0), base)


class SelectivityEstimator(Protocol):
    """What the partitioner needs: rectangle match-count estimates."""

    differentiable: bool

    def estimate(self, keys: frozenset[int], rect: Rect) -> float: ...


class ExactCountEstimator:
    """Exact scan-based counts; not differentiable (step function in the
    rectangle bounds), so split search falls back to exhaustive scanning."""

    differentiable = False

    def __init__(self, ds: Dataset):
        self.ds = ds

    def estimate(self, keys: frozenset[int], rect: Rect) -> float:
        ds = self.ds
        qk = np.array(sorted(keys), dtype=np.int32)
        return float(scan.count_matching(
            ds.xs, ds.ys, ds.kw_indptr, ds.kw_ids, qk,
            rect.xb, rect.yb, rect.xu, rect.yu,
        ))


class _TorchBank:
    """All models' one-axis CDFs evaluated at a torch scalar in one shot.

    Gaussian rows go through the closed-form normal CDF; MLP rows through a
    stacked batched forward.  Row order matches the owning estimator's key
    order.
    """

    def __init__(self, models: Sequence[MarginalCDF]):
        import torch

        self.n = len(models)
        g_idx, mus, sigmas = [], [], []
        m_idx, los, his = [], [], []
        mlp_layers: list[list[tuple[np.ndarray, np.ndarray]]] = []
        for i, m in enumerate(models):
            if m.kind == "gaussian":
                g_idx.append(i)
                mus.append(m.mu)
                sigmas.append(m.sigma)
            else:
                m_idx.append(i)
                los.append(m.lo)
                his.append(m.hi)
                mlp_layers.append(m.layers)
        self.g_idx = torch.tensor(g_idx, dtype=torch.long)
        self.mu = torch.tensor(mus, dtype=torch.float64)
        self.sigma = torch.tensor(sigmas, dtype=torch.float64)
        self.m_idx = torch.tensor(m_idx, dtype=torch.long)
        self.lo = torch.tensor(los, dtype=torch.float64)
        self.hi = torch.tensor(his, dtype=torch.float64)
        self.weights = []
        self.biases = []
        if mlp_layers:
            n_layers = len(mlp_layers[0])
            for li in range(n_layers):
                w = np.stack([rows[li][0] for rows in mlp_layers])
                b = np.stack([rows[li][1] for rows in mlp_layers])
                self.weights.append(torch.from_numpy(w))
                self.biases.append(torch.from_numpy(b))

    def eval_all(self, v):
        """CDF values of every row at scalar tensor v -> tensor [n]."""
        import torch

        out = torch.zeros(self.n, dtype=torch.float64)
        if len(self.g_idx):
            z = (v - self.mu) / (self.sigma * math.sqrt(2.0))
            out = out.index_add(0, self.g_idx, 0.5 * (1.0 + torch.erf(z)))
        if len(self.m_idx):
            xn = torch.clamp((v - self.lo) / (self.hi - self.lo), 0.0, 1.0)
            h = xn.reshape(-1, 1)
            for i, (w, b) in enumerate(zip(self.weights, self.biases)):
                h = torch.einsum("koi,ki->ko", w, h) + b
                if i < len(self.weights) - 1:
                    h = torch.relu(h)
            out = out.index_add(0, self.m_idx, torch.sigmoid(h[:, 0]))
        return out


class ModelEstimator:
    """Differentiable estimator over fitted keyword models.

    `estimate` serves cost bookkeeping; `terms`, `bank`, and `counts` expose
    the pieces the split optimizer composes into a torch objective.
    """

    differentiable = True

    def __init__(self, models: Mapping[ModelKey, KeywordModel], table: ItemsetTable | None = None):
        self.models = dict(models)
        self.table = table
        self.keys_order: list[ModelKey] = sorted(
            self.models, key=lambda k: (isinstance(k, tuple), k if isinstance(k, tuple) else (k,))
        )
        self.row: dict[ModelKey, int] = {k: i for i, k in enumerate(self.keys_order)}
        self.counts = np.array([self.models[k].count for k in self.keys_order], dtype=np.float64)
        self._banks: dict[str, _TorchBank] = {}
        self._terms_cache: dict[frozenset[int], list[tuple[ModelKey, float]]] = {}

    def estimate(self, keys: frozenset[int], rect: Rect) -> float:
        return estimate_query_objects(self.models, self.table, keys, rect)

    def terms(self, keys: frozenset[int]) -> list[tuple[ModelKey, float]]:
        """Signed inclusion-exclusion terms for a keyword set."""
        got = self._terms_cache.get(keys)
        if got is not None:
            return got
        modeled = [k for k in keys if k in self.models]
        out: list[tuple[ModelKey, float]] = [(k, 1.0) for k in modeled]
        if self.table is not None and len(modeled) > 1:
            modeled_set = frozenset(modeled)
            for s in self.table.subsets_of(modeled_set):
                if s in self.models:
                    out.append((s, -1.0 if len(s) % 2 == 0 else 1.0))
        self._terms_cache[keys] = out
        return out

    def marginal(self, key: ModelKey, dim: int) -> MarginalCDF:
        m = self.models[key]
        return m.fx if dim == 0 else m.fy

    def bank(self, dim: int) -> _TorchBank:
        name = "x" if dim == 0 else "y"
        if name not in self._banks:
            cdfs = [self.marginal(k, dim) for k in self.keys_order]
            self._banks[name] = _TorchBank(cdfs)
        return self._banks[name]


def save_models(models: Mapping[ModelKey, KeywordModel], table: ItemsetTable, path: str) -> None:
    import json

    doc = {
        "version": 1,
        "models": [m.to_dict() for _, m in sorted(models.items(), key=lambda kv: str(kv[0]))],
        "itemsets": table.to_dict(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_models(path: str) -> tuple[dict[ModelKey, KeywordModel], ItemsetTable]:
    import json

    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != 1:
        raise ValueError(f"{path}: unsupported model file version {doc.get('version')!r}")
    models = {}
    for rec in doc["models"]:
        m = KeywordModel.from_dict(rec)
        models[m.key] = m
    return models, ItemsetTable.from_dict(doc["itemsets"])
