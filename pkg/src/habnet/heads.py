"""Second-stage classifiers over bottleneck feature sequences.

Temporal heads (LSTM0-LSTM4) take ``(N, T, L)`` sequences; flat heads
(RF, SVM, MLP0-MLP2) take the same array reshaped to ``(N, T*L)``, which is
the day-major concatenation of the per-day vectors.
"""

import io
import json
import logging
import pickle
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from sklearn.ensemble import RandomForestClassifier
from sklearn.svm import SVC

from . import nn
from .errors import DataError, FormatError, LayoutError, NumericalError
from .optim import Adam

log = logging.getLogger(__name__)

NETWORK_KINDS = ("MLP0", "MLP1", "MLP2", "LSTM0", "LSTM1", "LSTM2", "LSTM3", "LSTM4")
TEMPORAL_KINDS = ("LSTM0", "LSTM1", "LSTM2", "LSTM3", "LSTM4")
KINDS = ("RF", "SVM") + NETWORK_KINDS

DEFAULT_UNITS = {
    "MLP0": (256, 256),
    "MLP1": (256, 256),
    "MLP2": (256, 256),
    "LSTM0": (512, 512),
    "LSTM1": (128, 128),
    "LSTM2": (512, 512),
    "LSTM3": (256, 256, 256, 128),
    "LSTM4": (256,),
}

DEFAULT_SVM_C = (0.1, 1.0, 10.0, 100.0)
DEFAULT_SVM_GAMMA_SCALES = (0.1, 1.0, 10.0)
DEFAULT_RF_TREES = (100, 300)
DEFAULT_RF_DEPTHS = (None, 20)


def canonical_kind(kind):
    k = kind.upper()
    if k not in KINDS:
        raise ValueError(f"unknown head kind {kind!r}; expected one of {', '.join(KINDS)}")
    return k


@dataclass(frozen=True)
class HeadSpec:
    kind: str
    units: tuple | None = None
    dropout: float = 0.5
    l2: float = 1e-4
    lr: float = 1e-5
    lr_decay: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    grid: tuple | None = None  # RF/SVM hyperparameter points, in order

    def __post_init__(self):
        object.__setattr__(self, "kind", canonical_kind(self.kind))
        if self.units is not None:
            object.__setattr__(self, "units", tuple(self.units))
        if self.grid is not None:
            object.__setattr__(self, "grid", tuple(tuple(sorted(dict(p).items())) for p in self.grid))

    @property
    def temporal(self):
        return self.kind in TEMPORAL_KINDS

    @property
    def network(self):
        return self.kind in NETWORK_KINDS

    def layer_units(self):
        return self.units or DEFAULT_UNITS[self.kind]

    def to_dict(self):
        d = asdict(self)
        d["grid"] = None if self.grid is None else [dict(p) for p in self.grid]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(**d)


def default_grid(kind, n_features):
    if kind == "SVM":
        pts = [{"kernel": "linear", "C": c} for c in DEFAULT_SVM_C]
        pts += [
            {"kernel": "rbf", "C": c, "gamma": s / n_features}
            for c in DEFAULT_SVM_C
            for s in DEFAULT_SVM_GAMMA_SCALES
        ]
        return pts
    if kind == "RF":
        return [{"n_estimators": n, "max_depth": d} for n in DEFAULT_RF_TREES for d in DEFAULT_RF_DEPTHS]
    raise ValueError(f"{kind} has no hyperparameter grid")


def build_network(spec, n_days, feat_len, rng):
    """Instantiate the layer stack for a network head."""
    u = spec.layer_units()
    p = spec.dropout
    L = feat_len
    k = spec.kind
    if k == "MLP0":
        layers = [nn.Dense(n_days * L, u[0], rng), nn.BatchNorm(u[0]), nn.ReLU(),
                  nn.Dense(u[0], u[1], rng), nn.BatchNorm(u[1]), nn.ReLU()]
    elif k == "MLP1":
        layers = [nn.Dense(n_days * L, u[0], rng), nn.ReLU(), nn.Dropout(p),
                  nn.Dense(u[0], u[1], rng), nn.ReLU(), nn.Dropout(p)]
    elif k == "MLP2":
        layers = [nn.Dense(n_days * L, u[0], rng, l2=spec.l2), nn.ReLU(),
                  nn.Dense(u[0], u[1], rng, l2=spec.l2), nn.ReLU()]
    elif k == "LSTM0":
        layers = [nn.LSTM(L, u[0], rng), nn.BatchNorm(u[0]), nn.Dropout(p),
                  nn.Dense(u[0], u[1], rng), nn.BatchNorm(u[1]), nn.ReLU(), nn.Dropout(p)]
    elif k == "LSTM1":
        layers = [nn.LSTM(L, u[0], rng), nn.Dropout(p),
                  nn.Dense(u[0], u[1], rng), nn.ReLU(), nn.Dropout(p)]
    elif k == "LSTM2":
        layers = [nn.LSTM(L, u[0], rng, return_sequences=True), nn.BatchNorm(u[0]),
                  nn.Dense(u[0], u[1], rng), nn.BatchNorm(u[1]), nn.ReLU(), nn.Flatten()]
        u = (u[0], n_days * u[1])
    elif k == "LSTM3":
        layers = [nn.LSTM(L, u[0], rng, return_sequences=True), nn.Dropout(p), nn.BatchNorm(u[0]),
                  nn.LSTM(u[0], u[1], rng, return_sequences=True), nn.Dropout(p), nn.BatchNorm(u[1]),
                  nn.Dense(u[1], u[2], rng), nn.ReLU(), nn.Dropout(p), nn.BatchNorm(u[2]), nn.Flatten(),
                  nn.Dense(n_days * u[2], u[3], rng), nn.ReLU(), nn.Dropout(p), nn.BatchNorm(u[3])]
    elif k == "LSTM4":
        layers = [nn.LSTM(L, u[0], rng, return_sequences=True), nn.Dropout(p), nn.BatchNorm(u[0]),
                  nn.Attention(u[0], u[0], rng), nn.Dropout(p), nn.BatchNorm(u[0])]
    else:
        raise ValueError(f"{k} is not a network head")
    layers.append(nn.Dense(u[-1], 1, rng))
    return nn.Sequential(layers)


@dataclass
class Standardizer:
    """Per-feature z-scoring fitted on training features."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X):
        X2 = X.reshape(-1, X.shape[-1])
        mean = X2.mean(axis=0)
        sd = X2.std(axis=0)
        return cls(mean, np.where(sd > 1e-12, sd, 1.0))

    def __call__(self, X):
        return (X - self.mean) / self.scale


@dataclass
class TrainedHead:
    spec: HeadSpec
    n_days: int
    feat_len: int
    standardizer: Standardizer
    model: object  # nn.Sequential or a fitted sklearn estimator
    chosen: dict | None = None
    log: list = field(default_factory=list)
    best_epoch: int | None = None

    def parameter_arrays(self):
        """Every trained number, for bitwise comparisons."""
        out = {"std.mean": self.standardizer.mean, "std.scale": self.standardizer.scale}
        if isinstance(self.model, nn.Sequential):
            out.update(self.model.state())
        elif isinstance(self.model, SVC):
            out.update(sv=self.model.support_vectors_, dual=self.model.dual_coef_, b=self.model.intercept_)
        else:
            for i, est in enumerate(self.model.estimators_):
                t = est.tree_
                out[f"t{i}.thr"] = t.threshold
                out[f"t{i}.feat"] = t.feature
                out[f"t{i}.val"] = t.value
        return out


def _as_sequences(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise LayoutError("(N, T, L)", X.shape, "feature array shape")
    return X


def _inputs(spec, X):
    return X if spec.temporal else X.reshape(X.shape[0], X.shape[1] * X.shape[2])


def _check_labels(y):
    y = np.asarray(y, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise DataError("training set must contain both classes")
    return y


def _make_estimator(kind, point, seed):
    if kind == "SVM":
        return SVC(kernel=point["kernel"], C=point["C"], gamma=point.get("gamma", "scale"))
    return RandomForestClassifier(
        n_estimators=point["n_estimators"],
        max_depth=point["max_depth"],
        criterion="gini",
        random_state=seed,
        n_jobs=1,
    )


def grid_search(kind, grid, train, validation, seed=0):
    """Exhaustive search by validation accuracy; ties go to the earlier point.

    ``train`` and ``validation`` are ``(X, y)`` pairs of flat features.
    Returns ``(best_point, accuracies)``.
    """
    grid = [dict(p) for p in grid]
    if not grid:
        raise ValueError("empty hyperparameter grid")
    Xt, yt = train
    Xv, yv = validation
    accs = []
    best, best_acc = None, -1.0
    for point in grid:
        est = _make_estimator(kind, point, seed).fit(Xt, yt)
        acc = float(np.mean(est.predict(Xv) == yv))
        accs.append(acc)
        if acc > best_acc:
            best, best_acc = point, acc
    return best, accs


def _train_sklearn(spec, Xt, yt, Xv, yv):
    grid = [dict(p) for p in spec.grid] if spec.grid else default_grid(spec.kind, Xt.shape[1])
    if len(grid) == 1 or len(Xv) == 0:
        if len(grid) > 1:
            log.warning("%s: no validation rows; using the first grid point", spec.kind)
        best = grid[0]
    else:
        best, _ = grid_search(spec.kind, grid, (Xt, yt), (Xv, yv), spec.seed)
    est = _make_estimator(spec.kind, best, spec.seed)
    est.fit(np.concatenate([Xt, Xv]), np.concatenate([yt, yv]))
    return est, best


def _val_loss(model, X, y):
    if len(X) == 0:
        return float("nan")
    loss, _ = nn.bce_with_logits(model.predict_logits(X), y)
    return loss + model.l2_penalty()


def _train_network(spec, Xt, yt, Xv, yv, n_days, feat_len):
    rng = np.random.default_rng(spec.seed)
    model = build_network(spec, n_days, feat_len, rng)
    opt = Adam(lr=spec.lr, decay=spec.lr_decay)
    history = []
    best_state, best_loss, best_epoch = model.state(), np.inf, 0
    stale = 0
    n = len(Xt)
    for epoch in range(1, spec.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, spec.batch_size):
            idx = order[s : s + spec.batch_size]
            if len(idx) < 2 and n >= 2:
                # a single-sample batch breaks batch-norm statistics
                idx = order[max(0, s - 1) : s + 1]
            loss = model.loss_and_grads(Xt[idx], yt[idx], rng)
            if not np.isfinite(loss):
                raise NumericalError(f"{spec.kind}: non-finite training loss at epoch {epoch}")
            opt.step(model.params(), model.grads())
            total += loss * len(idx)
        train_loss = total / n
        val_loss = _val_loss(model, Xv, yv)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        monitor = val_loss if np.isfinite(val_loss) else train_loss
        if monitor < best_loss - 1e-12:
            best_loss, best_state, best_epoch, stale = monitor, model.state(), epoch, 0
        else:
            stale += 1
            if stale >= spec.patience:
                break
    model.load_state(best_state)
    return model, history, best_epoch


def train_head(spec, X_train, y_train, X_val=None, y_val=None):
    """Fit a head on ``(N, T, L)`` features.

    Networks use Adam on binary cross-entropy with early stopping on the
    validation loss; RF/SVM pick hyperparameters by validation accuracy and
    are then refitted on train + validation.
    """
    X_train = _as_sequences(X_train)
    y_train = _check_labels(y_train)
    _, T, L = X_train.shape
    if X_val is None:
        X_val, y_val = X_train[:0], y_train[:0]
    X_val = _as_sequences(X_val)
    y_val = np.asarray(y_val, dtype=np.float64)
    if X_val.shape[1:] != (T, L):
        raise LayoutError((T, L), X_val.shape[1:], "validation layout")
    std = Standardizer.fit(X_train)
    Xt = _inputs(spec, std(X_train))
    Xv = _inputs(spec, std(X_val))
    if spec.network:
        model, history, best_epoch = _train_network(spec, Xt, y_train, Xv, y_val, T, L)
        return TrainedHead(spec, T, L, std, model, log=history, best_epoch=best_epoch)
    est, best = _train_sklearn(spec, Xt, y_train, Xv, y_val)
    return TrainedHead(spec, T, L, std, est, chosen=best)


def decision_values(head, X):
    X = _as_sequences(X)
    if X.shape[1:] != (head.n_days, head.feat_len):
        raise LayoutError((head.n_days, head.feat_len), X.shape[1:], "feature layout")
    Xi = _inputs(head.spec, head.standardizer(X))
    if isinstance(head.model, nn.Sequential):
        return head.model.predict_logits(Xi)
    if isinstance(head.model, SVC):
        return head.model.decision_function(Xi)
    p = head.model.predict_proba(Xi)[:, list(head.model.classes_).index(1.0)]
    return p


def predict(head, X):
    """HAB probabilities and labels (threshold 0.5) for ``(N, T, L)`` features."""
    v = decision_values(head, X)
    if isinstance(head.model, RandomForestClassifier):
        prob = v
    else:
        prob = nn.sigmoid(np.asarray(v, dtype=np.float64))
    return prob, (prob > 0.5).astype(int)


# --- persistence -----------------------------------------------------------

HEAD_MAGIC = b"HABH"
HEAD_VERSION = 1


def head_to_bytes(head):
    meta = {
        "spec": head.spec.to_dict(),
        "n_days": head.n_days,
        "feat_len": head.feat_len,
        "chosen": head.chosen,
        "best_epoch": head.best_epoch,
        "log": head.log,
    }
    if isinstance(head.model, nn.Sequential):
        arrays = dict(head.model.state())
        kind = "network"
    else:
        arrays = {}
        kind = "sklearn"
    arrays["std.mean"] = head.standardizer.mean
    arrays["std.scale"] = head.standardizer.scale
    meta["payload"] = kind
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    payload = buf.getvalue()
    if kind == "sklearn":
        model_bytes = pickle.dumps(head.model, protocol=4)
    else:
        model_bytes = b""
    mj = json.dumps(meta, sort_keys=True).encode()
    return b"".join([
        HEAD_MAGIC, struct.pack("<HI", HEAD_VERSION, len(mj)), mj,
        struct.pack("<Q", len(payload)), payload,
        struct.pack("<Q", len(model_bytes)), model_bytes,
    ])


def head_from_bytes(data):
    if data[:4] != HEAD_MAGIC:
        raise FormatError("not a trained-head file")
    version, n = struct.unpack_from("<HI", data, 4)
    if version != HEAD_VERSION:
        raise FormatError(f"unsupported head file version {version}")
    off = 10
    meta = json.loads(data[off : off + n])
    off += n
    (np_len,) = struct.unpack_from("<Q", data, off)
    off += 8
    arrays = dict(np.load(io.BytesIO(data[off : off + np_len])))
    off += np_len
    (m_len,) = struct.unpack_from("<Q", data, off)
    off += 8
    spec = HeadSpec.from_dict(meta["spec"])
    std = Standardizer(arrays.pop("std.mean"), arrays.pop("std.scale"))
    if meta["payload"] == "network":
        model = build_network(spec, meta["n_days"], meta["feat_len"], np.random.default_rng(0))
        model.load_state(arrays)
    else:
        model = pickle.loads(data[off : off + m_len])
    return TrainedHead(spec, meta["n_days"], meta["feat_len"], std, model, meta["chosen"], meta["log"], meta["best_epoch"])


def save_head(head, path):
    with open(path, "wb") as fh:
        fh.write(head_to_bytes(head))


def load_head(path):
    with open(path, "rb") as fh:
        return head_from_bytes(fh.read())


def with_overrides(spec, **kw):
    kw = {k: v for k, v in kw.items() if v is not None}
    return replace(spec, **kw)
