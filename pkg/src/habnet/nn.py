"""Minimal numpy network layers with hand-written backward passes.

Layers take ``(batch, features)`` or ``(batch, time, features)`` arrays in
float64. ``forward`` caches what ``backward`` needs, so a layer instance
handles one batch at a time.
"""

import numpy as np


def sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits, y):
    """Mean binary cross-entropy and its gradient w.r.t. the logits."""
    z = logits
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    grad = (sigmoid(z) - y) / len(z)
    return float(loss.mean()), grad


def glorot(rng, n_in, n_out):
    lim = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, size=(n_in, n_out))


class Layer:
    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


class Dense(Layer):
    """Affine map on the last axis (time-distributed for 3-D input)."""

    def __init__(self, n_in, n_out, rng, l2=0.0):
        super().__init__()
        self.params["W"] = glorot(rng, n_in, n_out)
        self.params["b"] = np.zeros(n_out)
        self.l2 = l2

    def forward(self, x, training=False, rng=None):
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dy):
        W = self.params["W"]
        x2 = self._x.reshape(-1, W.shape[0])
        dy2 = dy.reshape(-1, W.shape[1])
        self.grads["W"] = x2.T @ dy2
        self.grads["b"] = dy2.sum(axis=0)
        return dy @ W.T


class ReLU(Layer):
    def forward(self, x, training=False, rng=None):
        self._on = x > 0
        return np.where(self._on, x, 0.0)

    def backward(self, dy):
        return np.where(self._on, dy, 0.0)


class Dropout(Layer):
    """Inverted dropout; identity outside training."""

    def __init__(self, rate):
        super().__init__()
        self.rate = rate

    def forward(self, x, training=False, rng=None):
        if not training or self.rate <= 0:
            self._keep = None
            return x
        self._keep = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._keep

    def backward(self, dy):
        return dy if self._keep is None else dy * self._keep


class BatchNorm(Layer):
    """Batch normalisation over every axis but the last.

    Prediction uses running statistics, so outputs never depend on which
    other samples share the batch.
    """

    def __init__(self, n, momentum=0.99, eps=1e-3):
        super().__init__()
        self.params["gamma"] = np.ones(n)
        self.params["beta"] = np.zeros(n)
        self.buffers["mean"] = np.zeros(n)
        self.buffers["var"] = np.ones(n)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, training=False, rng=None):
        n = x.shape[-1]
        x2 = x.reshape(-1, n)
        if training:
            mu = x2.mean(axis=0)
            var = x2.var(axis=0)
            m = self.momentum
            self.buffers["mean"] = m * self.buffers["mean"] + (1 - m) * mu
            self.buffers["var"] = m * self.buffers["var"] + (1 - m) * var
        else:
            mu, var = self.buffers["mean"], self.buffers["var"]
        self._inv = 1.0 / np.sqrt(var + self.eps)
        self._xhat = (x2 - mu) * self._inv
        self._shape = x.shape
        return (self._xhat * self.params["gamma"] + self.params["beta"]).reshape(x.shape)

    def backward(self, dy):
        n = self._shape[-1]
        dy2 = dy.reshape(-1, n)
        xhat = self._xhat
        self.grads["gamma"] = np.sum(dy2 * xhat, axis=0)
        self.grads["beta"] = dy2.sum(axis=0)
        dxhat = dy2 * self.params["gamma"]
        rows = dy2.shape[0]
        dx = (self._inv / rows) * (rows * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        return dx.reshape(self._shape)


class Flatten(Layer):
    def forward(self, x, training=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


def lstm_gates(x, h_prev, W, U, b):
    """Gate activations ``(i, f, o, g)`` for one LSTM step."""
    a = x @ W + h_prev @ U + b
    H = U.shape[0]
    i = sigmoid(a[..., :H])
    f = sigmoid(a[..., H : 2 * H])
    o = sigmoid(a[..., 2 * H : 3 * H])
    g = np.tanh(a[..., 3 * H :])
    return i, f, o, g


def lstm_cell_step(x, h_prev, c_prev, W, U, b):
    """One LSTM update.

    ``W`` is (inputs, 4H), ``U`` is (H, 4H), ``b`` is (4H,), with gate
    blocks ordered input, forget, output, candidate::

        c = f * c_prev + i * g
        h = o * tanh(c)
    """
    if W.shape[1] != 4 * U.shape[0] or U.shape[1] != W.shape[1] or b.shape != (W.shape[1],):
        raise ValueError("inconsistent LSTM weight shapes")
    if x.shape[-1] != W.shape[0] or h_prev.shape[-1] != U.shape[0] or c_prev.shape != h_prev.shape:
        raise ValueError("LSTM input/state shape does not match weights")
    i, f, o, g = lstm_gates(x, h_prev, W, U, b)
    c = f * c_prev + i * g
    return o * np.tanh(c), c


class LSTM(Layer):
    def __init__(self, n_in, n_hidden, rng, return_sequences=False, forget_bias=1.0):
        super().__init__()
        H = n_hidden
        self.params["W"] = glorot(rng, n_in, 4 * H)
        # orthogonal recurrent init
        q, _ = np.linalg.qr(rng.standard_normal((4 * H, H)))
        self.params["U"] = np.ascontiguousarray(q.T)
        b = np.zeros(4 * H)
        b[H : 2 * H] = forget_bias
        self.params["b"] = b
        self.H = H
        self.return_sequences = return_sequences

    def forward(self, x, training=False, rng=None):
        W, U, b = self.params["W"], self.params["U"], self.params["b"]
        B, T, _ = x.shape
        H = self.H
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        self._cache = []
        hs = np.empty((B, T, H))
        for t in range(T):
            i, f, o, g = lstm_gates(x[:, t], h, W, U, b)
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            self._cache.append((h, c, i, f, o, g, tc))
            h = o * tc
            c = c_new
            hs[:, t] = h
        self._x = x
        return hs if self.return_sequences else h

    def backward(self, dy):
        W, U = self.params["W"], self.params["U"]
        x = self._x
        B, T, _ = x.shape
        H = self.H
        dW = np.zeros_like(W)
        dU = np.zeros_like(U)
        db = np.zeros(4 * H)
        dx = np.empty_like(x)
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in reversed(range(T)):
            h_prev, c_prev, i, f, o, g, tc = self._cache[t]
            if self.return_sequences:
                dh = dy[:, t] + dh_next
            else:
                dh = dh_next + (dy if t == T - 1 else 0.0)
            dc = dh * o * (1.0 - tc * tc) + dc_next
            da = np.concatenate(
                [
                    dc * g * i * (1.0 - i),
                    dc * c_prev * f * (1.0 - f),
                    dh * tc * o * (1.0 - o),
                    dc * i * (1.0 - g * g),
                ],
                axis=1,
            )
            dW += x[:, t].T @ da
            dU += h_prev.T @ da
            db += da.sum(axis=0)
            dx[:, t] = da @ W.T
            dh_next = da @ U.T
            dc_next = dc * f
        self.grads.update(W=dW, U=dU, b=db)
        return dx


def attention_pool(sequence, Wa, ba, va):
    """Additive attention over time.

    ``sequence`` is (T, H) or (B, T, H). Scores are
    ``va . tanh(h_t Wa + ba)``, softmax-normalised over t. Returns the
    context ``sum_t alpha_t h_t`` and the weights ``alpha``.
    """
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.shape[-2] < 1:
        raise ValueError("attention needs at least one step")
    u = np.tanh(seq @ Wa + ba)
    s = u @ va
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    alpha = e / e.sum(axis=-1, keepdims=True)
    ctx = np.sum(alpha[..., None] * seq, axis=-2)
    return ctx, alpha


class Attention(Layer):
    def __init__(self, n_hidden, n_att, rng):
        super().__init__()
        self.params["Wa"] = glorot(rng, n_hidden, n_att)
        self.params["ba"] = np.zeros(n_att)
        self.params["va"] = rng.uniform(-1, 1, n_att) * np.sqrt(3.0 / n_att)

    def forward(self, x, training=False, rng=None):
        p = self.params
        self._x = x
        self._u = np.tanh(x @ p["Wa"] + p["ba"])
        ctx, alpha = attention_pool(x, p["Wa"], p["ba"], p["va"])
        self._alpha = alpha
        return ctx

    def backward(self, dy):
        p = self.params
        x, u, alpha = self._x, self._u, self._alpha
        dalpha = np.einsum("bh,bth->bt", dy, x)
        dx = alpha[..., None] * dy[:, None, :]
        ds = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
        self.grads["va"] = np.einsum("bt,bta->a", ds, u)
        dpre = ds[..., None] * p["va"] * (1.0 - u * u)
        self.grads["Wa"] = np.einsum("bth,bta->ha", x, dpre)
        self.grads["ba"] = dpre.sum(axis=(0, 1))
        dx += dpre @ p["Wa"].T
        return dx


class Sequential:
    """Layer stack ending in a single logit per sample."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, training=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, training, rng)
        return x.reshape(x.shape[0])

    def backward(self, dlogits):
        d = dlogits.reshape(-1, 1)
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def l2_penalty(self):
        return sum(l.l2 * float(np.sum(l.params["W"] ** 2)) for l in self.layers if getattr(l, "l2", 0.0))

    def loss_and_grads(self, x, y, rng=None, training=True):
        logits = self.forward(x, training, rng)
        loss, dlogits = bce_with_logits(logits, y)
        self.backward(dlogits)
        loss += self.l2_penalty()
        for l in self.layers:
            if getattr(l, "l2", 0.0):
                l.grads["W"] = l.grads["W"] + 2.0 * l.l2 * l.params["W"]
        return loss

    def named_params(self):
        for k, layer in enumerate(self.layers):
            for name in layer.params:
                yield f"{k}.{name}", layer, name

    def state(self):
        out = {}
        for k, layer in enumerate(self.layers):
            for name, v in layer.params.items():
                out[f"{k}.{name}"] = v.copy()
            for name, v in layer.buffers.items():
                out[f"{k}.buf.{name}"] = np.copy(v)
        return out

    def load_state(self, state):
        for k, layer in enumerate(self.layers):
            for name in layer.params:
                layer.params[name] = np.array(state[f"{k}.{name}"], dtype=np.float64)
            for name in layer.buffers:
                layer.buffers[name] = np.array(state[f"{k}.buf.{name}"], dtype=np.float64)

    def params(self):
        return {key: layer.params[name] for key, layer, name in self.named_params()}

    def grads(self):
        return {key: layer.grads[name] for key, layer, name in self.named_params()}

    def predict_logits(self, x, batch=256):
        out = [self.forward(x[i : i + batch], training=False) for i in range(0, len(x), batch)]
        return np.concatenate(out) if out else np.zeros(0)


def gradient_check(model, x, y, seed=0, h=1e-6, floor=1e-5):
    """Compare backprop gradients with central finite differences.

    Dropout masks are reproduced by reseeding before every forward pass.
    Returns ``{param: normwise relative error}``.
    """

    def loss():
        return model.loss_and_grads(x, y, np.random.default_rng(seed))

    loss()
    analytic = {k: g.copy() for k, g in model.grads().items()}
    errors = {}
    for key, layer, name in model.named_params():
        p = layer.params[name]
        num = np.zeros_like(p)
        for j in np.ndindex(p.shape):
            old = p[j]
            p[j] = old + h
            lp = loss()
            p[j] = old - h
            lm = loss()
            p[j] = old
            num[j] = (lp - lm) / (2 * h)
        a = analytic[key]
        # absolute floor: some gradients are identically zero (bias before batch-norm)
        denom = max(np.linalg.norm(a) + np.linalg.norm(num), floor)
        errors[key] = float(np.linalg.norm(a - num) / denom)
    return errors
