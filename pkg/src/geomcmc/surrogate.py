"""Reduced-basis MLP surrogate of the parameter-to-observable map.

The network maps encoded parameter coefficients (R^r) to noise-whitened
observable coefficients (R^{d_y}). Everything is plain numpy:

* ``forward`` / ``jacobian`` evaluate the net and its exact input-Jacobian
  (layerwise chain rule, no finite differences);
* ``loss_l2`` is the mean squared output error, ``loss_h1`` adds the mean
  squared Frobenius error of the Jacobian against reference reduced Jacobians;
* ``grad_loss`` differentiates both terms with respect to the weights; the
  Jacobian term needs second derivatives of the activation, accumulated by a
  forward tangent sweep followed by a reverse sweep with injected
  pre-activation sensitivities.

``generate_dataset`` draws prior samples and records encoded inputs, whitened
observables, and (optionally) reduced Jacobians assembled from adjoint
back-substitutions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .models import ForwardModel, SolverError
from .prior import GaussianPrior
from .subspace import ReducedBasis

log = logging.getLogger(__name__)

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu(z):
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def _gelu_d1(z):
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return 0.5 * (1.0 + erf(z / _SQRT2)) + z * pdf


def _gelu_d2(z):
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return (2.0 - z * z) * pdf


_ACTIVATIONS = {
    "gelu": (_gelu, _gelu_d1, _gelu_d2),
    "identity": (lambda z: z, lambda z: np.ones_like(z), lambda z: np.zeros_like(z)),
}


class PoisonedModelError(RuntimeError):
    """Weights contain non-finite entries."""


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


class MLPSurrogate:
    """Dense MLP f: R^r -> R^{d_y} with exact input-Jacobian evaluation.

    Parameters
    ----------
    widths : sequence of int
        Full layer widths [r, hidden..., d_y].
    activation : str
        "gelu" (default) or "identity" (linear debug mode).
    seed : int
        Weight initialization seed (scaled-normal, He-style fan-in gain).
    """

    def __init__(self, widths, activation: str = "gelu", seed: int = 0):
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        self.widths = [int(w) for w in widths]
        self.activation = activation
        self._act, self._act_d1, self._act_d2 = _ACTIVATIONS[activation]
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for n_in, n_out in zip(self.widths[:-1], self.widths[1:]):
            std = np.sqrt(2.0 / n_in)
            self.weights.append(std * rng.standard_normal((n_out, n_in)))
            self.biases.append(np.zeros(n_out))
        # affine output transform set from training data statistics
        self.out_shift = np.zeros(self.widths[-1])
        self.out_scale = np.ones(self.widths[-1])
        self.n_calls = 0

    @property
    def r(self) -> int:
        return self.widths[0]

    @property
    def d_y(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def _check_weights(self):
        for w, b in zip(self.weights, self.biases):
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise PoisonedModelError("non-finite network weights")

    def _forward_pass(self, x: np.ndarray):
        """Activations and pre-activations for a (B, r) batch."""
        xs, zs = [x], []
        a = x
        for l in range(self.n_layers):
            z = a @ self.weights[l].T + self.biases[l]
            zs.append(z)
            a = self._act(z) if l < self.n_layers - 1 else z
            xs.append(a)
        return xs, zs

    def set_output_transform(self, shift: np.ndarray, scale: np.ndarray):
        """Outputs become core(x) * scale + shift; Jacobians scale accordingly."""
        self.out_shift = np.asarray(shift, dtype=float)
        self.out_scale = np.asarray(scale, dtype=float)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._check_weights()
        single = np.asarray(x).ndim == 1
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        self.n_calls += 1
        out = self._forward_pass(xb)[0][-1] * self.out_scale + self.out_shift
        return out[0] if single else out

    def _jacobian_pass(self, xs, zs):
        """Tangent prefixes: that_l = W_l T_{l-1} and T_l = act'(z_l) * that_l."""
        B = xs[0].shape[0]
        T = np.broadcast_to(np.eye(self.r), (B, self.r, self.r))
        thats = []
        for l in range(self.n_layers):
            that = np.matmul(self.weights[l], T)
            thats.append(that)
            if l < self.n_layers - 1:
                T = self._act_d1(zs[l])[:, :, None] * that
        return thats  # thats[-1] is the batched Jacobian

    def evaluate(self, x: np.ndarray):
        """(values, jacobians) in one pass; batched or single input."""
        self._check_weights()
        single = np.asarray(x).ndim == 1
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        self.n_calls += 1
        xs, zs = self._forward_pass(xb)
        out = xs[-1] * self.out_scale + self.out_shift
        jac = self._jacobian_pass(xs, zs)[-1] * self.out_scale[None, :, None]
        if single:
            return out[0], jac[0]
        return out, jac

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return self.evaluate(x)[1]

    # -- weight-space gradient -------------------------------------------------

    def grad_loss(self, x: np.ndarray, y: np.ndarray, jac_ref: np.ndarray | None):
        """Loss and its weight gradient for a batch.

        Returns (loss, grads_w, grads_b). The loss is the batch-mean
        0.5*||f(x)-y||^2, plus 0.5*||J(x)-jac_ref||_F^2 when jac_ref is given.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        B = x.shape[0]
        L = self.n_layers
        xs, zs = self._forward_pass(x)
        grads_w = [np.zeros_like(w) for w in self.weights]
        grads_b = [np.zeros_like(b) for b in self.biases]

        resid = xs[-1] * self.out_scale + self.out_shift - y
        loss = 0.5 * float(np.sum(resid * resid)) / B
        delta = resid * self.out_scale / B  # dloss/dz_L
        inject = [None] * L  # extra dloss/dz_l from the Jacobian term

        if jac_ref is not None:
            thats = self._jacobian_pass(xs, zs)
            jac_err = thats[-1] * self.out_scale[None, :, None] - jac_ref
            E = jac_err * self.out_scale[None, :, None] / B
            loss += 0.5 * float(np.sum(jac_err**2)) / B
            # V = dy/d(layer input), walked from the top down; C = V^T E
            V = np.broadcast_to(self.weights[L - 1], (B, self.d_y, self.widths[L - 1]))
            t_in = self._tangent_in(thats, zs, L - 1)
            grads_w[L - 1] += np.matmul(E, t_in.transpose(0, 2, 1)).sum(axis=0)
            for l in range(L - 2, -1, -1):
                d1 = self._act_d1(zs[l])
                C = np.matmul(V.transpose(0, 2, 1), E)
                t_in = self._tangent_in(thats, zs, l)
                grads_w[l] += np.matmul(d1[:, :, None] * C,
                                        t_in.transpose(0, 2, 1)).sum(axis=0)
                inject[l] = self._act_d2(zs[l]) * np.sum(C * thats[l], axis=2)
                if l > 0:
                    V = np.matmul(V * d1[:, None, :], self.weights[l])

        for l in range(L - 1, -1, -1):
            grads_w[l] += delta.T @ xs[l]
            grads_b[l] += delta.sum(axis=0)
            if l > 0:
                delta = (delta @ self.weights[l]) * self._act_d1(zs[l - 1])
                if inject[l - 1] is not None:
                    delta = delta + inject[l - 1]
        return loss, grads_w, grads_b

    def _tangent_in(self, thats, zs, l):
        """Input tangents T_{l-1} feeding layer l (identity prefix for l=0)."""
        if l == 0:
            B = zs[0].shape[0]
            return np.broadcast_to(np.eye(self.r), (B, self.r, self.r))
        return self._act_d1(zs[l - 1])[:, :, None] * thats[l - 1]

    # -- persistence -------------------------------------------------------------

    def copy_weights(self):
        return [w.copy() for w in self.weights], [b.copy() for b in self.biases]

    def set_weights(self, weights, biases):
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]

    def save(self, path: str | Path, extra_manifest: dict | None = None):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        flat = np.concatenate([w.ravel() for w in self.weights]
                              + [b.ravel() for b in self.biases])
        np.save(path / "weights.npy", flat)
        np.save(path / "out_transform.npy", np.vstack([self.out_shift, self.out_scale]))
        manifest = {"widths": self.widths, "activation": self.activation}
        manifest.update(extra_manifest or {})
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "MLPSurrogate":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        net = cls(manifest["widths"], activation=manifest["activation"])
        flat = np.load(path / "weights.npy")
        pos = 0
        weights, biases = [], []
        for w in net.weights:
            weights.append(flat[pos:pos + w.size].reshape(w.shape))
            pos += w.size
        for b in net.biases:
            biases.append(flat[pos:pos + b.size])
            pos += b.size
        net.set_weights(weights, biases)
        transform = np.load(path / "out_transform.npy")
        net.set_output_transform(transform[0], transform[1])
        return net


class LinearReducedMap:
    """Exact linear surrogate f(x) = J0 x + c with constant Jacobian.

    Stand-in for a trained net when the underlying reduced map is linear
    (exactness oracles, delayed-acceptance ceiling tests).
    """

    def __init__(self, J0: np.ndarray, c: np.ndarray):
        self.J0 = np.asarray(J0, dtype=float)
        self.c = np.asarray(c, dtype=float)
        self.d_y, self.r = self.J0.shape
        self.n_calls = 0

    @classmethod
    def from_toy(cls, toy, basis: ReducedBasis) -> "LinearReducedMap":
        """Conditional-expectation reduced map of a linear model: V* B decode(x)."""
        J0 = (toy.B @ basis.decoder) / np.sqrt(toy.v_n)
        return cls(J0, np.zeros(toy.d_y))

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.n_calls += 1
        return np.asarray(x) @ self.J0.T + self.c

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim == 1:
            return self.J0.copy()
        return np.broadcast_to(self.J0, (x.shape[0],) + self.J0.shape).copy()

    def evaluate(self, x: np.ndarray):
        return self.forward(x), self.jacobian(x)


class SampleAverageReducedMap:
    """Reduced map by averaging the full model over frozen complement samples.

    f(x) = mean_j V* G(decode(x) + (I - P) m_j) with n_anchors prior draws
    m_j frozen at construction; the Jacobian is averaged the same way. Each
    ``evaluate`` costs n_anchors forward solves (plus adjoint back-subs when
    the Jacobian is requested).
    """

    def __init__(self, model: ForwardModel, basis: ReducedBasis, n_anchors: int,
                 rng: np.random.Generator):
        self.model = model
        self.basis = basis
        self.n_anchors = n_anchors
        prior = basis.prior
        anchors = [prior.sample(rng) for _ in range(n_anchors)]
        self.complements = [m - basis.project(m) for m in anchors]
        self.d_y = model.d_y
        self.r = basis.r
        self.n_calls = 0

    def evaluate(self, x: np.ndarray, need_jacobian: bool = True):
        self.n_calls += 1
        base = self.basis.decode(np.asarray(x, dtype=float))
        f = np.zeros(self.d_y)
        J = np.zeros((self.d_y, self.r)) if need_jacobian else None
        scale = np.sqrt(self.model.v_n)
        for comp in self.complements:
            state = self.model.solve_forward(base + comp)
            f += self.model.observe(state) / scale
            if need_jacobian:
                J += (self.model.jacobian_rows(state) @ self.basis.decoder) / scale
        f /= self.n_anchors
        if need_jacobian:
            J /= self.n_anchors
        return (f, J) if need_jacobian else (f, None)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.evaluate(x, need_jacobian=False)[0]

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return self.evaluate(x, need_jacobian=True)[1]


# -- datasets ----------------------------------------------------------------


@dataclass
class Dataset:
    x: np.ndarray                 # (n, r) encoded parameters
    y: np.ndarray                 # (n, d_y) whitened observables
    jac: np.ndarray | None = None  # (n, d_y, r) reduced Jacobians
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return self.x.shape[0]

    @property
    def with_jacobian(self) -> bool:
        return self.jac is not None

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx],
                       self.jac[idx] if self.with_jacobian else None, dict(self.manifest))

    def save(self, path: str | Path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        np.save(path / "x.npy", self.x)
        np.save(path / "y.npy", self.y)
        if self.with_jacobian:
            np.save(path / "jac.npy", self.jac)
        manifest = dict(self.manifest)
        manifest.update({"n": len(self), "r": self.x.shape[1], "d_y": self.y.shape[1],
                         "with_jacobian": self.with_jacobian})
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        jac = np.load(path / "jac.npy") if (path / "jac.npy").exists() else None
        return cls(np.load(path / "x.npy"), np.load(path / "y.npy"), jac, manifest)


def generate_dataset(model: ForwardModel, prior: GaussianPrior, basis: ReducedBasis,
                     n_t: int, rng: np.random.Generator,
                     with_jacobian: bool = True) -> Dataset:
    """Training records (encoded input, whitened observable[, reduced Jacobian]).

    One forward solve per record; the reduced Jacobian adds d_y adjoint
    back-substitutions reusing the cached factorization. Failed solves are
    skipped; more than 25% failing aborts.
    """
    scale = np.sqrt(model.v_n)
    xs, ys, jacs = [], [], []
    failures = 0
    for k in range(n_t):
        m = prior.sample(rng)
        try:
            state = model.solve_forward(m)
        except SolverError as err:
            failures += 1
            log.warning("dataset sample %d skipped: %s", k, err)
            if failures > 0.25 * n_t:
                raise SolverError(
                    f"dataset generation aborted: {failures} failures in "
                    f"{k + 1} draws (> 25% of n_t={n_t})")
            continue
        xs.append(basis.encode(m))
        ys.append(model.observe(state) / scale)
        if with_jacobian:
            jacs.append((model.jacobian_rows(state) @ basis.decoder) / scale)
    return Dataset(np.array(xs), np.array(ys),
                   np.array(jacs) if with_jacobian else None,
                   manifest={"n_requested": n_t, "n_failures": failures,
                             "basis_kind": basis.kind})


# -- losses and training -------------------------------------------------------


def loss_l2(net, batch: Dataset) -> float:
    """Mean over the batch of 0.5*||y - f(x)||^2 in projected coordinates."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    f = net.forward(batch.x)
    return 0.5 * float(np.sum((f - batch.y) ** 2)) / len(batch)


def loss_h1(net, batch: Dataset) -> float:
    """loss_l2 plus the mean 0.5*||J_ref - jacobian(x)||_F^2 term."""
    if not batch.with_jacobian:
        raise ValueError("batch lacks Jacobians; generate the dataset with_jacobian=True")
    f, J = net.evaluate(batch.x)
    return (0.5 * float(np.sum((f - batch.y) ** 2)) / len(batch)
            + 0.5 * float(np.sum((J - batch.jac) ** 2)) / len(batch))


@dataclass
class TrainConfig:
    loss_kind: str = "h1"          # "l2" or "h1"
    epochs: int = 400
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.1
    patience: int = 60
    normalize_outputs: bool = True  # set the net's affine transform from the data
    cosine_decay: bool = True       # anneal lr to lr/20 over the epoch budget


class _Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr: float):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def train(net: MLPSurrogate, dataset: Dataset, cfg: TrainConfig,
          rng: np.random.Generator):
    """Minibatch Adam with a held-out validation split and early stopping.

    The validation loss uses the same kind as training. Returns the net
    (weights updated in place, best-validation weights restored) and a
    history dict. Deterministic given the rng.
    """
    if cfg.loss_kind not in ("l2", "h1"):
        raise ValueError(f"unknown loss kind {cfg.loss_kind!r}")
    if cfg.loss_kind == "h1" and not dataset.with_jacobian:
        raise ValueError("h1 training requires a dataset with Jacobians")
    if len(dataset) < cfg.batch_size:
        raise ValueError(f"n_t={len(dataset)} smaller than batch size {cfg.batch_size}")
    history = {"train_loss": [], "val_loss": [], "best_epoch": 0, "stopped_epoch": 0}
    if cfg.epochs == 0:
        return net, history

    use_jac = cfg.loss_kind == "h1"
    perm = rng.permutation(len(dataset))
    n_val = max(1, int(round(cfg.val_fraction * len(dataset)))) if cfg.val_fraction > 0 else 0
    val = dataset.subset(perm[:n_val]) if n_val else None
    tr = dataset.subset(perm[n_val:])
    loss_fn = loss_h1 if use_jac else loss_l2
    if cfg.normalize_outputs:
        spread = tr.y.std(axis=0)
        net.set_output_transform(tr.y.mean(axis=0),
                                 np.where(spread > 1e-12, spread, 1.0))

    params = net.weights + net.biases
    opt = _Adam(params, cfg)
    best_val = np.inf
    best_state = net.copy_weights()
    since_best = 0
    for epoch in range(cfg.epochs):
        if cfg.cosine_decay:
            floor = cfg.lr / 20.0
            lr = floor + 0.5 * (cfg.lr - floor) * (1.0 + np.cos(np.pi * epoch / cfg.epochs))
        else:
            lr = cfg.lr
        order = rng.permutation(len(tr))
        ep_loss, n_batches = 0.0, 0
        for start in range(0, len(tr), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, gw, gb = net.grad_loss(tr.x[idx], tr.y[idx],
                                         tr.jac[idx] if use_jac else None)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch}", history)
            opt.step(params, gw + gb, lr)
            ep_loss += loss
            n_batches += 1
        history["train_loss"].append(ep_loss / n_batches)
        vloss = loss_fn(net, val) if val is not None else history["train_loss"][-1]
        history["val_loss"].append(vloss)
        if vloss < best_val:
            best_val = vloss
            best_state = net.copy_weights()
            history["best_epoch"] = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best > cfg.patience:
                break
    history["stopped_epoch"] = len(history["train_loss"]) - 1
    net.set_weights(*best_state)
    return net, history


def generalization_errors(net, testset: Dataset) -> tuple[float, float]:
    """Relative errors sqrt(E[||G - f||^2 / ||G||^2]) for values and Jacobians."""
    if len(testset) == 0:
        raise ValueError("empty test set")
    if not testset.with_jacobian:
        raise ValueError("test set lacks Jacobians")
    f, J = net.evaluate(testset.x)
    obs_ratio = np.sum((f - testset.y) ** 2, axis=1) / np.sum(testset.y**2, axis=1)
    jac_ratio = (np.sum((J - testset.jac) ** 2, axis=(1, 2))
                 / np.sum(testset.jac**2, axis=(1, 2)))
    return float(np.sqrt(np.mean(obs_ratio))), float(np.sqrt(np.mean(jac_ratio)))
