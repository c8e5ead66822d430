"""Cyclic-boosted additive risk model with binned shape functions.

Main effects are boosted round-robin, one feature at a time, with a single
Newton split per step on continuous features and a per-category step on
nominal ones. After the mains are frozen the strongest pairwise interactions
(screened by the best 2x2 quadrant split of the residual) are boosted the
same way. Bags are averaged and every term is mean-centred into the
intercept.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
import pandas as pd
from numba import njit

from ..seeding import derive_seed

BUNDLE_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    max_bins: int = 256
    max_interaction_bins: int = 32
    learning_rate: float = 0.01
    n_rounds: int = 3000
    n_bags: int = 8
    n_pairs: int = 10
    early_stopping_rounds: int = 50
    validation_fraction: float = 0.15
    min_samples_leaf: int = 2
    seed: int = 0
    smote_k: int = 5
    k_folds: int = 10
    threshold: float = 0.5


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


# ---------------------------------------------------------------------------
# binning


@dataclass
class Binning:
    """Maps one feature's raw values to bin indices.

    Continuous: ``edges`` are cut points and bin ``i`` holds values in
    ``[edges[i-1], edges[i])``. Nominal: bin 0 is reserved for categories
    not seen in training, bins 1.. follow ``categories``.
    """

    kind: str
    edges: list[float] = field(default_factory=list)
    categories: list[str] = field(default_factory=list)

    @property
    def n_bins(self) -> int:
        return len(self.edges) + 1 if self.kind == "continuous" else len(self.categories) + 1

    @classmethod
    def fit(cls, values, kind: str, max_bins: int) -> "Binning":
        if kind == "continuous":
            x = np.asarray(values, dtype=np.float64)
            uniq = np.unique(x)
            if len(uniq) <= max_bins:
                edges = (uniq[:-1] + uniq[1:]) / 2.0
            else:
                qs = np.quantile(x, np.linspace(0.0, 1.0, max_bins + 1)[1:-1])
                edges = np.unique(qs)
                edges = edges[edges > uniq[0]]
            return cls("continuous", edges=[float(e) for e in edges])
        cats = sorted({str(v) for v in values})
        return cls("categorical", categories=cats)

    def transform(self, values) -> np.ndarray:
        if self.kind == "continuous":
            x = np.asarray(values, dtype=np.float64)
            return np.searchsorted(np.asarray(self.edges), x, side="right").astype(np.int64)
        lookup = {c: i + 1 for i, c in enumerate(self.categories)}
        return np.array([lookup.get(str(v), 0) for v in values], dtype=np.int64)

    def coarsen(self, max_bins: int, values) -> "Binning":
        if self.kind == "categorical" or self.n_bins <= max_bins:
            return self
        return Binning.fit(values, "continuous", max_bins)


# ---------------------------------------------------------------------------
# boosting kernels


@njit(cache=True)
def _logloss(pred, y, mask):
    total = 0.0
    count = 0
    for i in range(pred.shape[0]):
        if mask[i]:
            p = pred[i]
            # log(1 + exp(-|p|)) + max(p, 0) - y p, stable
            if p > 0:
                total += math.log1p(math.exp(-p)) + p - y[i] * p
            else:
                total += math.log1p(math.exp(p)) - y[i] * p
            count += 1
    return total / count if count else 0.0


@njit(cache=True)
def _boost_mains(bins, n_bins, is_cat, offsets, y, w, val, base, lr, n_rounds, patience, min_leaf):
    n, n_feat = bins.shape
    pred = base.copy()
    scores = np.zeros(offsets[-1])
    best = scores.copy()
    max_nb = 1
    for f in range(n_feat):
        if n_bins[f] > max_nb:
            max_nb = n_bins[f]
    G = np.zeros(max_nb)
    H = np.zeros(max_nb)
    C = np.zeros(max_nb)
    upd = np.zeros(max_nb)
    grad = np.zeros(n)
    hess = np.zeros(n)
    has_val = val.any()
    best_loss = _logloss(pred, y, val) if has_val else 0.0
    best_round = 0
    stall = 0
    rounds = 0
    for r in range(n_rounds):
        for f in range(n_feat):
            nb = n_bins[f]
            for b in range(nb):
                G[b] = 0.0
                H[b] = 0.0
                C[b] = 0.0
                upd[b] = 0.0
            for i in range(n):
                if w[i] > 0:
                    p = 1.0 / (1.0 + math.exp(-pred[i]))
                    grad[i] = p - y[i]
                    hess[i] = p * (1.0 - p)
                    b = bins[i, f]
                    G[b] += w[i] * grad[i]
                    H[b] += w[i] * hess[i]
                    C[b] += w[i]
            changed = False
            if is_cat[f]:
                for b in range(nb):
                    if C[b] >= min_leaf and H[b] > 1e-12:
                        upd[b] = -lr * G[b] / H[b]
                        changed = True
            else:
                gt = 0.0
                ht = 0.0
                ct = 0.0
                for b in range(nb):
                    gt += G[b]
                    ht += H[b]
                    ct += C[b]
                gl = 0.0
                hl = 0.0
                cl = 0.0
                best_gain = -1.0
                best_split = -1
                for s in range(nb - 1):
                    gl += G[s]
                    hl += H[s]
                    cl += C[s]
                    gr = gt - gl
                    hr = ht - hl
                    cr = ct - cl
                    if cl < min_leaf or cr < min_leaf or hl <= 1e-12 or hr <= 1e-12:
                        continue
                    gain = gl * gl / hl + gr * gr / hr
                    if gain > best_gain:
                        best_gain = gain
                        best_split = s
                if best_split >= 0:
                    gl = 0.0
                    hl = 0.0
                    for b in range(best_split + 1):
                        gl += G[b]
                        hl += H[b]
                    vl = -lr * gl / hl
                    vr = -lr * (gt - gl) / (ht - hl)
                    for b in range(nb):
                        upd[b] = vl if b <= best_split else vr
                    changed = True
            if changed:
                off = offsets[f]
                for b in range(nb):
                    scores[off + b] += upd[b]
                for i in range(n):
                    pred[i] += upd[bins[i, f]]
        rounds = r + 1
        if has_val:
            loss = _logloss(pred, y, val)
            if loss < best_loss - 1e-12:
                best_loss = loss
                best[:] = scores
                best_round = rounds
                stall = 0
            else:
                stall += 1
                if stall >= patience:
                    break
    if not has_val:
        best[:] = scores
        best_round = rounds
    return best, best_round


@njit(cache=True)
def _best_quadrants(G, H, C, na, nb, min_leaf):
    # 2-D prefix sums; returns (gain, cut_a, cut_b) of the best 2x2 split
    PG = np.zeros((na + 1, nb + 1))
    PH = np.zeros((na + 1, nb + 1))
    PC = np.zeros((na + 1, nb + 1))
    for i in range(na):
        for j in range(nb):
            PG[i + 1, j + 1] = G[i, j] + PG[i, j + 1] + PG[i + 1, j] - PG[i, j]
            PH[i + 1, j + 1] = H[i, j] + PH[i, j + 1] + PH[i + 1, j] - PH[i, j]
            PC[i + 1, j + 1] = C[i, j] + PC[i, j + 1] + PC[i + 1, j] - PC[i, j]
    gt = PG[na, nb]
    ht = PH[na, nb]
    ct = PC[na, nb]
    best_gain = -1.0
    best_a = -1
    best_b = -1
    for ca in range(na - 1):
        for cb in range(nb - 1):
            g00 = PG[ca + 1, cb + 1]
            h00 = PH[ca + 1, cb + 1]
            c00 = PC[ca + 1, cb + 1]
            g01 = PG[ca + 1, nb] - g00
            h01 = PH[ca + 1, nb] - h00
            c01 = PC[ca + 1, nb] - c00
            g10 = PG[na, cb + 1] - g00
            h10 = PH[na, cb + 1] - h00
            c10 = PC[na, cb + 1] - c00
            g11 = gt - g00 - g01 - g10
            h11 = ht - h00 - h01 - h10
            c11 = ct - c00 - c01 - c10
            if c00 < min_leaf or c01 < min_leaf or c10 < min_leaf or c11 < min_leaf:
                continue
            if h00 <= 1e-12 or h01 <= 1e-12 or h10 <= 1e-12 or h11 <= 1e-12:
                continue
            gain = g00 * g00 / h00 + g01 * g01 / h01 + g10 * g10 / h10 + g11 * g11 / h11
            if gain > best_gain:
                best_gain = gain
                best_a = ca
                best_b = cb
    if best_a >= 0 and ht > 1e-12:
        best_gain -= gt * gt / ht
    return best_gain, best_a, best_b


@njit(cache=True)
def _pair_histograms(ba, bb, na, nb, grad, hess, w):
    G = np.zeros((na, nb))
    H = np.zeros((na, nb))
    C = np.zeros((na, nb))
    for i in range(ba.shape[0]):
        if w[i] > 0:
            G[ba[i], bb[i]] += w[i] * grad[i]
            H[ba[i], bb[i]] += w[i] * hess[i]
            C[ba[i], bb[i]] += w[i]
    return G, H, C


@njit(cache=True)
def _boost_pairs(pair_bins, pair_nbins, offsets, y, w, val, base, lr, n_rounds, patience, min_leaf):
    n, n_pairs, _ = pair_bins.shape
    pred = base.copy()
    scores = np.zeros(offsets[-1])
    best = scores.copy()
    grad = np.zeros(n)
    hess = np.zeros(n)
    has_val = val.any()
    best_loss = _logloss(pred, y, val) if has_val else 0.0
    best_round = 0
    stall = 0
    rounds = 0
    for r in range(n_rounds):
        for k in range(n_pairs):
            na = pair_nbins[k, 0]
            nb = pair_nbins[k, 1]
            for i in range(n):
                p = 1.0 / (1.0 + math.exp(-pred[i]))
                grad[i] = p - y[i]
                hess[i] = p * (1.0 - p)
            G, H, C = _pair_histograms(pair_bins[:, k, 0], pair_bins[:, k, 1], na, nb, grad, hess, w)
            gain, ca, cb = _best_quadrants(G, H, C, na, nb, min_leaf)
            if ca < 0:
                continue
            q = np.zeros((2, 2))
            qh = np.zeros((2, 2))
            for a in range(na):
                for b in range(nb):
                    qa = 0 if a <= ca else 1
                    qb = 0 if b <= cb else 1
                    q[qa, qb] += G[a, b]
                    qh[qa, qb] += H[a, b]
            off = offsets[k]
            for a in range(na):
                for b in range(nb):
                    qa = 0 if a <= ca else 1
                    qb = 0 if b <= cb else 1
                    scores[off + a * nb + b] += -lr * q[qa, qb] / qh[qa, qb]
            for i in range(n):
                a = pair_bins[i, k, 0]
                b = pair_bins[i, k, 1]
                qa = 0 if a <= ca else 1
                qb = 0 if b <= cb else 1
                pred[i] += -lr * q[qa, qb] / qh[qa, qb]
        rounds = r + 1
        if has_val:
            loss = _logloss(pred, y, val)
            if loss < best_loss - 1e-12:
                best_loss = loss
                best[:] = scores
                best_round = rounds
                stall = 0
            else:
                stall += 1
                if stall >= patience:
                    break
    if not has_val:
        best[:] = scores
        best_round = rounds
    return best, best_round


def pair_gain(ba, bb, na, nb, residual_grad, hess, min_leaf=2) -> float:
    w = np.ones(len(ba))
    G, H, C = _pair_histograms(ba.astype(np.int64), bb.astype(np.int64), na, nb,
                               residual_grad.astype(np.float64), hess.astype(np.float64), w)
    gain, ca, _ = _best_quadrants(G, H, C, na, nb, float(min_leaf))
    return float(gain) if ca >= 0 else 0.0


# ---------------------------------------------------------------------------
# model


@dataclass
class MainTerm:
    feature: str
    binning: Binning
    scores: np.ndarray

    @property
    def name(self) -> str:
        return self.feature

    def contributions(self, frame: pd.DataFrame) -> np.ndarray:
        return self.scores[self.binning.transform(frame[self.feature])]


@dataclass
class PairTerm:
    features: tuple[str, str]
    binnings: tuple[Binning, Binning]
    scores: np.ndarray  # (n_bins_a, n_bins_b)

    @property
    def name(self) -> str:
        return f"{self.features[0]} x {self.features[1]}"

    def contributions(self, frame: pd.DataFrame) -> np.ndarray:
        a = self.binnings[0].transform(frame[self.features[0]])
        b = self.binnings[1].transform(frame[self.features[1]])
        return self.scores[a, b]


@dataclass
class AdditiveRiskModel:
    intercept: float
    mains: list[MainTerm]
    pairs: list[PairTerm]
    continuous: list[str]
    categorical: list[str]
    n_bags: int = 0
    seed: int = 0
    rounds: list[int] = field(default_factory=list)

    @property
    def features(self) -> list[str]:
        return [t.feature for t in self.mains]

    @property
    def terms(self):
        return list(self.mains) + list(self.pairs)

    def decision_function(self, frame: pd.DataFrame) -> np.ndarray:
        missing = [f for f in self.features if f not in frame.columns]
        if missing:
            raise KeyError(f"missing features: {missing}")
        score = np.full(len(frame), self.intercept)
        for term in self.terms:
            score = score + term.contributions(frame)
        return score

    def predict_proba(self, frame: pd.DataFrame) -> np.ndarray:
        return sigmoid(self.decision_function(frame))

    # bundle (versioned JSON)

    def to_dict(self) -> dict:
        return {
            "format": "trajrisk-additive-model",
            "version": BUNDLE_VERSION,
            "intercept": self.intercept,
            "continuous": self.continuous,
            "categorical": self.categorical,
            "n_bags": self.n_bags,
            "seed": self.seed,
            "rounds": self.rounds,
            "mains": [
                {"feature": t.feature, "binning": asdict(t.binning), "scores": t.scores.tolist()}
                for t in self.mains
            ],
            "pairs": [
                {"features": list(t.features), "binnings": [asdict(b) for b in t.binnings],
                 "scores": t.scores.tolist()}
                for t in self.pairs
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AdditiveRiskModel":
        if data.get("format") != "trajrisk-additive-model" or data.get("version") != BUNDLE_VERSION:
            raise ValueError("unsupported model bundle")
        mains = [MainTerm(m["feature"], Binning(**m["binning"]), np.array(m["scores"], dtype=float))
                 for m in data["mains"]]
        pairs = [PairTerm(tuple(p["features"]), tuple(Binning(**b) for b in p["binnings"]),
                          np.array(p["scores"], dtype=float)) for p in data["pairs"]]
        return cls(data["intercept"], mains, pairs, data["continuous"], data["categorical"],
                   data["n_bags"], data["seed"], data.get("rounds", []))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "AdditiveRiskModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def predict_proba(model: AdditiveRiskModel, features) -> np.ndarray | float:
    """Probability for a frame of rows, or for a single mapping of features."""
    if isinstance(features, pd.DataFrame):
        return model.predict_proba(features)
    return float(model.predict_proba(pd.DataFrame([dict(features)]))[0])


def _bag_split(n: int, y: np.ndarray, cfg: ModelConfig, bag: int):
    rng = np.random.default_rng(derive_seed(cfg.seed, "bag", bag))
    val = np.zeros(n, dtype=bool)
    n_val = int(round(cfg.validation_fraction * n))
    if n_val > 0 and n - n_val >= 2:
        val[rng.permutation(n)[:n_val]] = True
    fit_rows = np.flatnonzero(~val)
    draws = rng.choice(fit_rows, size=len(fit_rows), replace=True)
    w = np.bincount(draws, minlength=n).astype(np.float64)
    return w, val


def fit_additive_model(X: pd.DataFrame, y, categorical=(), config: ModelConfig | None = None,
                       ) -> AdditiveRiskModel:
    """Train the bagged additive model on ``X`` (continuous columns are any
    not listed in ``categorical``)."""
    cfg = config or ModelConfig()
    y = np.asarray(y, dtype=np.float64)
    if len(X.columns) == 0:
        raise ValueError("empty feature set")
    if len(y) != len(X):
        raise ValueError("X and y differ in length")
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2 or counts.min() < 2:
        raise ValueError("need at least two samples of each class")

    categorical = [c for c in X.columns if c in set(categorical)]
    continuous = [c for c in X.columns if c not in set(categorical)]
    features = list(X.columns)
    binnings = [
        Binning.fit(X[f], "categorical" if f in categorical else "continuous", cfg.max_bins)
        for f in features
    ]
    bins = np.column_stack([b.transform(X[f]) for f, b in zip(features, binnings)]).astype(np.int64)
    n_bins = np.array([b.n_bins for b in binnings], dtype=np.int64)
    is_cat = np.array([b.kind == "categorical" for b in binnings])
    offsets = np.zeros(len(features) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(n_bins)

    intercept = float(np.log(y.mean() / (1.0 - y.mean())))
    n = len(y)
    base = np.full(n, intercept)
    n_bags = max(cfg.n_bags, 1)

    bag_main_scores, bag_preds, splits, rounds = [], [], [], []
    for bag in range(n_bags):
        w, val = _bag_split(n, y, cfg, bag)
        splits.append((w, val))
        if cfg.n_rounds > 0:
            scores, used = _boost_mains(bins, n_bins, is_cat, offsets, y, w, val, base,
                                        float(cfg.learning_rate), int(cfg.n_rounds),
                                        int(cfg.early_stopping_rounds), float(cfg.min_samples_leaf))
        else:
            scores, used = np.zeros(offsets[-1]), 0
        rounds.append(int(used))
        bag_main_scores.append(scores)
        contrib = np.zeros(n)
        for f in range(len(features)):
            contrib += scores[offsets[f] + bins[:, f]]
        bag_preds.append(base + contrib)

    main_scores = np.mean(bag_main_scores, axis=0)

    pairs: list[PairTerm] = []
    if cfg.n_pairs > 0 and cfg.n_rounds > 0 and len(features) >= 2:
        avg_pred = base.copy()
        for f in range(len(features)):
            avg_pred += main_scores[offsets[f] + bins[:, f]]
        p = sigmoid(avg_pred)
        grad, hess = p - y, p * (1 - p)
        coarse = [b.coarsen(cfg.max_interaction_bins, X[f]) for f, b in zip(features, binnings)]
        coarse_bins = [c.transform(X[f]) for f, c in zip(features, coarse)]
        ranked = []
        for i, j in combinations(range(len(features)), 2):
            if coarse[i].n_bins < 2 or coarse[j].n_bins < 2:
                continue
            gain = pair_gain(coarse_bins[i], coarse_bins[j], coarse[i].n_bins, coarse[j].n_bins,
                             grad, hess, cfg.min_samples_leaf)
            if gain > 0:
                ranked.append((-gain, i, j))
        ranked.sort()
        chosen = [(i, j) for _, i, j in ranked[:cfg.n_pairs]]
        if chosen:
            pair_bins = np.stack(
                [np.column_stack([coarse_bins[i], coarse_bins[j]]) for i, j in chosen], axis=1,
            ).astype(np.int64)
            pair_nbins = np.array([[coarse[i].n_bins, coarse[j].n_bins] for i, j in chosen], dtype=np.int64)
            pair_offsets = np.zeros(len(chosen) + 1, dtype=np.int64)
            pair_offsets[1:] = np.cumsum(pair_nbins[:, 0] * pair_nbins[:, 1])
            bag_pair_scores = []
            for bag in range(n_bags):
                w, val = splits[bag]
                scores, used = _boost_pairs(pair_bins, pair_nbins, pair_offsets, y, w, val, bag_preds[bag],
                                            float(cfg.learning_rate), int(cfg.n_rounds),
                                            int(cfg.early_stopping_rounds), float(cfg.min_samples_leaf))
                bag_pair_scores.append(scores)
            pair_scores = np.mean(bag_pair_scores, axis=0)
            for k, (i, j) in enumerate(chosen):
                grid = pair_scores[pair_offsets[k]:pair_offsets[k + 1]].reshape(pair_nbins[k])
                pairs.append(PairTerm((features[i], features[j]), (coarse[i], coarse[j]), grid.copy()))

    mains = [
        MainTerm(f, b, main_scores[offsets[k]:offsets[k + 1]].copy())
        for k, (f, b) in enumerate(zip(features, binnings))
    ]
    model = AdditiveRiskModel(intercept, mains, pairs, continuous, categorical, n_bags, cfg.seed, rounds)
    center_terms(model, X)
    return model


def center_terms(model: AdditiveRiskModel, X: pd.DataFrame) -> None:
    """Shift each term to zero mean over ``X`` and fold the shift into the intercept.

    Bins that no training row falls in (e.g. the unseen-category bin) are
    set to 0 after centring.
    """
    n = len(X)
    for term in model.mains:
        idx = term.binning.transform(X[term.feature])
        counts = np.bincount(idx, minlength=len(term.scores))
        mean = float(counts @ term.scores) / n
        term.scores = term.scores - mean
        model.intercept += mean
        empty = counts == 0
        residual = float(counts @ term.scores) / n
        term.scores[empty] = 0.0
        term.scores[~empty] -= residual
        model.intercept += residual
    for term in model.pairs:
        a = term.binnings[0].transform(X[term.features[0]])
        b = term.binnings[1].transform(X[term.features[1]])
        counts = np.zeros(term.scores.shape)
        np.add.at(counts, (a, b), 1.0)
        mean = float((counts * term.scores).sum()) / n
        term.scores = term.scores - mean
        model.intercept += mean
        term.scores[counts == 0] = 0.0


def feature_importance(model: AdditiveRiskModel, X_train: pd.DataFrame) -> list[tuple[str, float]]:
    """Mean absolute log-odds contribution per term, largest first."""
    out = [(t.name, float(np.abs(t.contributions(X_train)).mean())) for t in model.terms]
    return sorted(out, key=lambda kv: (-kv[1], kv[0]))
