"""Nested cross-validation, metrics, temporal windows and feature importance."""

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.ensemble import RandomForestClassifier

from . import __version__
from . import heads as H
from .baselines import threshold_classify
from .datacube import fit_normalizer
from .encoder import encode_cubes
from .errors import DataError

log = logging.getLogger(__name__)


# --- metrics -----------------------------------------------------------------

@dataclass(frozen=True)
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def n(self):
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_labels(cls, y_true, y_pred):
        t = np.asarray(y_true).astype(bool)
        p = np.asarray(y_pred).astype(bool)
        return cls(int(np.sum(t & p)), int(np.sum(~t & ~p)), int(np.sum(~t & p)), int(np.sum(t & ~p)))

    def as_dict(self):
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


def metrics(tp, tn, fp, fn):
    """Accuracy, precision, recall, F1 and Cohen's kappa from a 2x2 confusion."""
    n = tp + tn + fp + fn
    if n <= 0:
        raise ValueError("empty confusion matrix")
    acc = (tp + tn) / n
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    # expected agreement from the marginal products, kept in integers until the end
    pe_num = (tp + fp) * (tp + fn) + (tn + fn) * (tn + fp)
    if pe_num == n * n:
        kappa = 0.0
    else:
        kappa = (n * (tp + tn) - pe_num) / (n * n - pe_num)
    return {"accuracy": acc, "precision": precision, "recall": recall, "f1": f1, "kappa": kappa}


def confusion_metrics(c):
    return metrics(c.tp, c.tn, c.fp, c.fn)


# --- fold plans ----------------------------------------------------------------

@dataclass
class Fold:
    test: np.ndarray
    train: np.ndarray
    validation: np.ndarray


@dataclass
class FoldPlan:
    folds: list
    seed: int
    inner_fraction: float

    @property
    def k(self):
        return len(self.folds)


def make_fold_plan(labels, k=5, inner_fraction=0.8, seed=0):
    """Stratified outer folds, each with a stratified inner train/validation split.

    Each class is shuffled, the shuffled classes are concatenated, and
    position ``p`` goes to fold ``p mod k``; fold sizes and per-fold class
    counts therefore differ by at most one.
    """
    y = np.asarray(labels).astype(int)
    n = len(y)
    if not 2 <= k <= n:
        raise ValueError(f"need 2 <= k <= n (k={k}, n={n})")
    if not 0 < inner_fraction < 1:
        raise ValueError("inner_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    classes = np.unique(y)
    for c in classes:
        if np.sum(y == c) < k:
            raise DataError(f"class {c} has fewer than {k} members")
    order = np.concatenate([rng.permutation(np.flatnonzero(y == c)) for c in classes])
    fold_of = np.empty(n, dtype=int)
    fold_of[order] = np.arange(n) % k
    folds = []
    for f in range(k):
        test = np.flatnonzero(fold_of == f)
        rest = np.flatnonzero(fold_of != f)
        tr, va = [], []
        for c in classes:
            members = rng.permutation(rest[y[rest] == c])
            cut = int(round(inner_fraction * len(members)))
            tr.append(members[:cut])
            va.append(members[cut:])
        folds.append(Fold(test, np.sort(np.concatenate(tr)), np.sort(np.concatenate(va))))
    return FoldPlan(folds, seed, inner_fraction)


# --- temporal windows ---------------------------------------------------------------

WINDOW_MODES = ("All", "pred", "short")


@dataclass(frozen=True)
class WindowSpec:
    """Which cube days a head sees.

    ``pred_k`` keeps the k oldest days (horizon ``T - k``); with
    ``pred_semantics="horizon"`` it instead keeps days ``1..T-k`` so that the
    horizon is k. ``short_k`` keeps the k newest days.
    """

    mode: str = "All"
    k: int | None = None
    pred_semantics: str = "oldest"

    @classmethod
    def parse(cls, text, pred_semantics="oldest"):
        t = text.strip()
        if t.lower() == "all":
            return cls("All", None, pred_semantics)
        mode, _, k = t.partition("_")
        if mode not in ("pred", "short") or not k.isdigit():
            raise ValueError(f"bad window {text!r}; expected All, pred_k or short_k")
        return cls(mode, int(k), pred_semantics)

    @property
    def tag(self):
        return "All" if self.mode == "All" else f"{self.mode}_{self.k}"

    def days(self, n_days):
        """1-based day indices."""
        T = n_days
        if self.mode == "All":
            return list(range(1, T + 1))
        if self.k is None or not 1 <= self.k <= T:
            raise ValueError(f"window {self.tag} invalid for T={T}")
        if self.mode == "short":
            return list(range(T - self.k + 1, T + 1))
        if self.pred_semantics == "horizon":
            if self.k >= T:
                raise ValueError(f"window {self.tag} leaves no days under horizon semantics")
            return list(range(1, T - self.k + 1))
        return list(range(1, self.k + 1))

    def horizon(self, n_days):
        return n_days - self.days(n_days)[-1]

    def select(self, X):
        """Slice ``(N, T, L)`` features to this window."""
        idx = np.asarray(self.days(X.shape[1])) - 1
        return X[:, idx]


# --- reports ----------------------------------------------------------------------

def fingerprint(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class EvalReport:
    head: str
    tag: str
    days: list
    horizon: int
    folds: list  # [{"fold", "confusion", "metrics"}]
    fingerprint: str
    extra: dict = field(default_factory=dict)

    def summary(self):
        out = {}
        for key in ("accuracy", "f1", "kappa"):
            v = np.array([f["metrics"][key] for f in self.folds])
            out[key] = {"mean": float(v.mean()), "sd": float(v.std(ddof=1)) if len(v) > 1 else 0.0}
        return out

    def to_dict(self):
        return {
            "head": self.head,
            "window": self.tag,
            "days": list(self.days),
            "horizon_days": self.horizon,
            "folds": self.folds,
            "summary": self.summary(),
            "config_fingerprint": self.fingerprint,
            "version": __version__,
            **({"extra": self.extra} if self.extra else {}),
        }


def reports_json(reports):
    return json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=2) + "\n"


def reports_table(reports):
    rows = [("Head", "Window", "Horizon", "Accuracy", "F1", "Kappa")]
    for r in reports:
        s = r.summary()
        rows.append((r.head, r.tag, str(r.horizon),
                     *(f"{s[k]['mean']:.3f}±{s[k]['sd']:.3f}" for k in ("accuracy", "f1", "kappa"))))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows) + "\n"


# --- cross-validation ------------------------------------------------------------

class CubeFeatures:
    """Per-fold features: normalise with inner-train statistics, then encode."""

    def __init__(self, cubes, modalities, encoder_spec, encoder_params=None, dtype=np.float32):
        self.cubes = cubes
        self.modalities = tuple(modalities)
        self.spec = encoder_spec
        self.params = encoder_params
        self.dtype = dtype
        self.normalizers = {}

    def __call__(self, fold_index, train_idx):
        norm = fit_normalizer((self.cubes[i] for i in train_idx), self.modalities)
        self.normalizers[fold_index] = norm
        X, _ = encode_cubes(self.cubes, self.modalities, self.spec, self.params, norm, self.dtype)
        return X


def fold_seed(seed, fold):
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def train_fold(spec, X, y, fold, fold_index):
    """Fit one head on a fold's inner split; only train/validation rows are read."""
    s = H.with_overrides(spec, seed=fold_seed(spec.seed, fold_index))
    Xtr, Xva = X[fold.train], X[fold.validation]
    return H.train_head(s, Xtr, y[fold.train], Xva, y[fold.validation])


def test_fold(head, X, y, fold):
    _, pred = H.predict(head, X[fold.test])
    c = Confusion.from_labels(y[fold.test], pred)
    return c


def run_nested_cv(features, labels, head_specs, plan, windows=(WindowSpec(),), config=None, jobs=1, keep_heads=False):
    """Evaluate every (window, head) pair on every outer fold.

    ``features`` is either an ``(N, T, L)`` array or a callable
    ``(fold_index, inner_train_idx) -> (N, T, L)`` that derives features
    using inner-train data only. Returns one report per (window, head).
    """
    y = np.asarray(labels).astype(int)
    config = dict(config or {})
    config.update({
        "heads": [s.to_dict() for s in head_specs],
        "windows": [w.tag for w in windows],
        "folds": plan.k, "plan_seed": plan.seed, "inner_fraction": plan.inner_fraction,
    })
    fp = fingerprint(config)
    results = {}
    trained = {}

    for fi, fold in enumerate(plan.folds):
        X = features(fi, fold.train) if callable(features) else features
        T = X.shape[1]
        jobs_list = [(w, s) for w in windows for s in head_specs]

        def work(item):
            w, s = item
            Xw = w.select(X)
            head = train_fold(s, Xw, y, fold, fi)
            return item, head, test_fold(head, Xw, y, fold)

        if jobs > 1:
            with ThreadPoolExecutor(jobs) as ex:
                outs = list(ex.map(work, jobs_list))
        else:
            outs = [work(it) for it in jobs_list]
        for (w, s), head, c in outs:
            key = (w.tag, s.kind)
            results.setdefault(key, (w, s, T, []))[3].append(
                {"fold": fi, "n_test": int(len(fold.test)), "confusion": c.as_dict(), "metrics": confusion_metrics(c)}
            )
            if keep_heads:
                trained[(w.tag, s.kind, fi)] = head
            log.info("fold %d %s %s acc=%.3f", fi, w.tag, s.kind, confusion_metrics(c)["accuracy"])
    reports = []
    for (tag, kind), (w, s, T, folds) in results.items():
        reports.append(EvalReport(kind, tag, w.days(T), w.horizon(T), folds, fp))
    if keep_heads:
        return reports, trained
    return reports


def temporal_experiment(features, labels, head_spec, windows, plan, config=None, jobs=1):
    """Retrain the head for each window; one report per window, in order."""
    reps = run_nested_cv(features, labels, [head_spec], plan, windows, config, jobs)
    by_tag = {r.tag: r for r in reps}
    return [by_tag[w.tag] for w in windows]


# --- feature importance ----------------------------------------------------------

@dataclass
class Importance:
    per_dim: np.ndarray
    matrix: np.ndarray  # (M_sel, T): mean importance of each (modality, day) block
    modalities: tuple

    def ranking(self):
        """Blocks ``(modality, day)`` by descending importance (days 1-based)."""
        flat = np.argsort(-self.matrix, axis=None, kind="stable")
        rows, cols = np.unravel_index(flat, self.matrix.shape)
        return [(self.modalities[r], int(c) + 1) for r, c in zip(rows, cols)]


def feature_importance(z_all, labels, index_map, seed=0, n_estimators=300, max_depth=None):
    """Random-forest impurity importances averaged per (modality, day) block."""
    X = np.asarray(z_all, dtype=np.float64).reshape(len(z_all), -1)
    if X.shape[1] != index_map.size:
        raise DataError(f"feature length {X.shape[1]} does not match layout size {index_map.size}")
    rf = RandomForestClassifier(n_estimators=n_estimators, max_depth=max_depth, random_state=seed, n_jobs=1)
    rf.fit(X, np.asarray(labels).astype(int))
    imp = rf.feature_importances_
    mat = np.zeros((len(index_map.modalities), index_map.n_days))
    for (t, m), sl in index_map.block_slices().items():
        mat[index_map.modalities.index(m), t] = imp[sl].mean()
    return Importance(imp, mat, tuple(index_map.modalities))


# --- baseline reports -----------------------------------------------------------------

def baseline_report(readings, labels, rules):
    out = []
    for rule in rules:
        o = threshold_classify(readings, labels, rule)
        c = Confusion.from_labels(o.labels, o.predictions)
        entry = {"rule": o.rule, "n_excluded": o.n_excluded, "confusion": c.as_dict()}
        entry["metrics"] = confusion_metrics(c) if c.n else None
        out.append(entry)
    return out


def baseline_table(entries):
    rows = [("Rule", "N", "Excluded", "Accuracy", "F1", "Kappa")]
    for e in entries:
        m = e["metrics"]
        n = sum(e["confusion"].values())
        vals = ("-", "-", "-") if m is None else (f"{m['accuracy']:.3f}", f"{m['f1']:.3f}", f"{m['kappa']:.3f}")
        rows.append((e["rule"], str(n), str(e["n_excluded"]), *vals))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"
