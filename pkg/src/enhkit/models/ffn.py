"""Small fully connected network on numpy.

Supports two training regimes: mini-batch Adam (the default classifier
regime) and recorded full-batch gradient descent (fixed step, trajectory
kept) whose training loop can be reversed exactly for back-gradient
computation. Hessian-vector products are computed analytically with the
R-operator (forward-over-reverse).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, NumericalError

Params = list[np.ndarray]  # interleaved [W1, b1, W2, b2, ...]


def _act(name):
    if name == "relu":
        return (lambda z: np.maximum(z, 0.0),
                lambda z: (z > 0).astype(np.float64),
                lambda z: np.zeros_like(z))
    if name == "sigmoid":
        def f(z):
            out = np.empty_like(z)
            pos = z >= 0
            out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
            e = np.exp(z[~pos])
            out[~pos] = e / (1.0 + e)
            return out

        def fp(z):
            s = f(z)
            return s * (1.0 - s)

        def fpp(z):
            s = f(z)
            return s * (1.0 - s) * (1.0 - 2.0 * s)

        return f, fp, fpp
    raise ConfigError(f"unknown activation {name!r}")


def init_params(layers: tuple[int, ...], seed: int) -> Params:
    """Uniform fan-in-scaled weights, zero biases, seeded."""
    rng = np.random.default_rng(seed)
    params: Params = []
    for fan_in, fan_out in zip(layers[:-1], layers[1:]):
        a = 1.0 / np.sqrt(fan_in)
        params.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return params


def clone(params: Params) -> Params:
    return [p.copy() for p in params]


def _softmax(z):
    s = z - z.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class Network:
    layers: tuple[int, ...]
    activation: str
    params: Params
    trajectory: list[Params] | None = field(default=None, repr=False)
    learning_rate: float | None = None  # step used for the recorded trajectory

    @property
    def n_classes(self) -> int:
        return self.layers[-1]

    # -- forward / prediction ------------------------------------------------

    def _forward(self, X, params=None):
        params = self.params if params is None else params
        f, _, _ = _act(self.activation)
        zs, acts = [], [X]
        a = X
        n_layers = len(params) // 2
        for l in range(n_layers):
            z = a @ params[2 * l] + params[2 * l + 1]
            zs.append(z)
            a = f(z) if l < n_layers - 1 else z
            acts.append(a)
        return zs, acts

    def logits(self, X, params=None) -> np.ndarray:
        return self._forward(X, params)[1][-1]

    def loss(self, X, Y, params=None) -> float:
        """Mean softmax cross-entropy; Y is one-hot."""
        z = self.logits(X, params)
        s = z - z.max(axis=1, keepdims=True)
        logp = s - np.log(np.exp(s).sum(axis=1, keepdims=True))
        return -float(np.sum(Y * logp)) / X.shape[0]

    # -- gradients -----------------------------------------------------------

    def _fp_from_act(self, a):
        """Activation derivative recovered from the activation output."""
        if self.activation == "relu":
            return (a > 0).astype(np.float64)
        return a * (1.0 - a)

    def _backward(self, zs, acts, delta_out, params=None):
        """Backprop from the logits delta; returns (param grads, input delta)."""
        params = self.params if params is None else params
        n_layers = len(params) // 2
        grads: Params = [None] * len(params)
        delta = delta_out
        for l in range(n_layers - 1, -1, -1):
            grads[2 * l] = acts[l].T @ delta
            grads[2 * l + 1] = delta.sum(axis=0)
            if l > 0:
                delta = (delta @ params[2 * l].T) * self._fp_from_act(acts[l])
        return grads, delta @ params[0].T

    def param_grads(self, X, Y, params=None) -> Params:
        """Gradient of the mean cross-entropy with respect to all parameters."""
        zs, acts = self._forward(X, params)
        p = _softmax(acts[-1])
        delta = (p - Y) / X.shape[0]
        grads, _ = self._backward(zs, acts, delta, params)
        return grads

    def input_grads(self, X, Y, params=None, mean=False) -> np.ndarray:
        """Per-row gradient of each sample's own cross-entropy w.r.t. its input.

        With ``mean=True`` rows carry the 1/n weight of the mean loss.
        """
        params = self.params if params is None else params
        zs, acts = self._forward(X, params)
        p = _softmax(acts[-1])
        delta = (p - Y)
        if mean:
            delta = delta / X.shape[0]
        n_layers = len(params) // 2
        for l in range(n_layers - 1, 0, -1):
            delta = (delta @ params[2 * l].T) * self._fp_from_act(acts[l])
        return delta @ params[0].T

    # -- training ------------------------------------------------------------

    def train_adam(self, X, Y, learning_rate, epochs, batch_size, seed,
                   beta1=0.9, beta2=0.999, eps=1e-8) -> None:
        rng = np.random.default_rng(seed)
        m = [np.zeros_like(p) for p in self.params]
        v = [np.zeros_like(p) for p in self.params]
        t = 0
        n = X.shape[0]
        for _ in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                grads = self.param_grads(X[idx], Y[idx])
                t += 1
                for i, g in enumerate(grads):
                    m[i] = beta1 * m[i] + (1 - beta1) * g
                    v[i] = beta2 * v[i] + (1 - beta2) * g * g
                    mh = m[i] / (1 - beta1 ** t)
                    vh = v[i] / (1 - beta2 ** t)
                    self.params[i] -= learning_rate * mh / (np.sqrt(vh) + eps)

    def train_gd(self, X, Y, learning_rate, steps, record=True) -> None:
        """Full-batch gradient descent with fixed step; trajectory recorded
        so the loop can be reversed exactly."""
        traj = [clone(self.params)] if record else None
        for _ in range(steps):
            grads = self.param_grads(X, Y)
            for p, g in zip(self.params, grads):
                p -= learning_rate * g
            if record:
                traj.append(clone(self.params))
        if record:
            self.trajectory = traj
            self.learning_rate = learning_rate
        if not all(np.all(np.isfinite(p)) for p in self.params):
            raise NumericalError("non-finite network weights after training")

    # -- Hessian-vector products ----------------------------------------------

    def _rop_pass(self, X, Y, V, params=None, weight=None):
        """R-operator pass: directional derivative along parameter direction V.

        Returns (R[param grads], R[input delta lowered to the input layer],
        input delta) for the mean-cross-entropy loss with per-row weights
        ``weight`` (default 1/n each). Activation derivatives are derived
        from the cached activations, never recomputed from z.
        """
        params = self.params if params is None else params
        relu = self.activation == "relu"
        n_layers = len(params) // 2
        u = (np.full(X.shape[0], 1.0 / X.shape[0]) if weight is None else weight)[:, None]

        acts, racts, fps, fpps = [X], [np.zeros_like(X)], [None], [None]
        a, ra = X, racts[0]
        z_last = rz_last = None
        for l in range(n_layers):
            W, b = params[2 * l], params[2 * l + 1]
            Vw, vb = V[2 * l], V[2 * l + 1]
            z = a @ W + b
            rz = ra @ W + a @ Vw + vb
            if l < n_layers - 1:
                if relu:
                    a = np.maximum(z, 0.0)
                    fp = (z > 0).astype(np.float64)
                    fpp = None
                else:
                    a = _act("sigmoid")[0](z)
                    fp = a * (1.0 - a)
                    fpp = fp * (1.0 - 2.0 * a)
                ra = fp * rz
            else:
                a, ra = z, rz
                fp = fpp = None
                z_last, rz_last = z, rz
            acts.append(a)
            racts.append(ra)
            fps.append(fp)
            fpps.append(rz if fpp is None else fpp * rz)  # premultiplied by rz

        p = _softmax(z_last)
        rp = p * (rz_last - np.sum(p * rz_last, axis=1, keepdims=True))
        delta = (p - Y) * u
        rdelta = rp * u

        rgrads: Params = [None] * len(params)
        dlt, rdlt = delta, rdelta
        for l in range(n_layers - 1, -1, -1):
            W = params[2 * l]
            Vw = V[2 * l]
            rgrads[2 * l] = racts[l].T @ dlt + acts[l].T @ rdlt
            rgrads[2 * l + 1] = rdlt.sum(axis=0)
            if l > 0:
                back = dlt @ W.T
                rback = rdlt @ W.T + dlt @ Vw.T
                fp_prev = fps[l]
                rdlt = rback * fp_prev
                if not relu:
                    rdlt += back * fpps[l]
                dlt = back * fp_prev
        r_input = rdlt @ params[0].T + dlt @ V[0].T
        return rgrads, r_input, dlt @ params[0].T

    def hvp_params(self, X, Y, V, params=None) -> Params:
        """(d^2/dw^2 of mean CE) . V"""
        return self._rop_pass(X, Y, V, params)[0]

    def hvp_mixed_input(self, x_row, y_row, V, n_total, params=None) -> np.ndarray:
        """d/dx of <grad_w of (1/n_total) * CE(x_row), V> for one sample."""
        X = x_row[None, :]
        Y = y_row[None, :]
        w = np.array([1.0 / n_total])
        _, r_input, _ = self._rop_pass(X, Y, V, params, weight=w)
        return r_input[0]

    def hvp_params_fd(self, X, Y, V, params=None, h=1e-6) -> Params:
        """Central finite-difference Hessian-vector product (oracle mode)."""
        params = self.params if params is None else params
        vnorm = float(np.sqrt(sum(float(np.sum(v * v)) for v in V)))
        if vnorm == 0.0:
            return [np.zeros_like(p) for p in params]
        step = h / vnorm
        plus = [p + step * v for p, v in zip(params, V)]
        minus = [p - step * v for p, v in zip(params, V)]
        gp = self.param_grads(X, Y, plus)
        gm = self.param_grads(X, Y, minus)
        return [(a - b) / (2.0 * step) for a, b in zip(gp, gm)]

    def hvp_mixed_input_fd(self, x_row, y_row, V, n_total, params=None, h=1e-6) -> np.ndarray:
        params = self.params if params is None else params
        vnorm = float(np.sqrt(sum(float(np.sum(v * v)) for v in V)))
        if vnorm == 0.0:
            return np.zeros_like(x_row)
        step = h / vnorm
        plus = [p + step * v for p, v in zip(params, V)]
        minus = [p - step * v for p, v in zip(params, V)]
        X = x_row[None, :]
        Y = y_row[None, :]
        gp = self.input_grads(X, Y, plus, mean=False)[0] / n_total
        gm = self.input_grads(X, Y, minus, mean=False)[0] / n_total
        return (gp - gm) / (2.0 * step)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    Y = np.zeros((len(labels), n_classes))
    Y[np.arange(len(labels)), labels] = 1.0
    return Y
