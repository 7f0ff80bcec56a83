"""Concrete bilevel problem instances with known analytic structure.

The quadratic family carries a full exact oracle (closed-form inner
solution, outer objective and gradient), which makes every estimator
property checkable without Monte-Carlo.  The hyper-cleaning and linear
meta-learning instances mirror the benchmark problems at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import EmptyDataset, InvalidBatch, NotSPD
from .hypergrad import exact_neumann_expectation
from .oracle import (
    BilevelOracle,
    ExactOracle,
    IteratePair,
    LinearOperator,
    ProblemConstants,
    Vector,
)
from .sampling import SampleToken

_NOISE_TAG = 101  # salt stream for testbed gradient noise


class _TokenCache:
    """Tiny memo of per-token draws; the momentum correction re-evaluates
    the same token immediately, so a handful of slots is enough."""

    def __init__(self, maxsize: int = 16):
        self._data: dict = {}
        self._maxsize = maxsize

    def get_or_compute(self, key, fn):
        if key in self._data:
            return self._data[key]
        value = fn()
        if len(self._data) >= self._maxsize:
            self._data.pop(next(iter(self._data)))
        self._data[key] = value
        return value


# ---------------------------------------------------------------------------
# Stochastic quadratic bilevel family
# ---------------------------------------------------------------------------


@dataclass
class QuadBilevelSpec:
    """Quadratic lower level 0.5 y'Ay - y'(Bx+b); outer tracking objective
    0.5||y - y_target||^2 + 0.5 lam ||x||^2 (+ optional sinusoidal term in x).

    Gradients carry additive Gaussian noise, Hessians are deterministic, so
    the estimator bias has a closed form.
    """

    A: np.ndarray
    B: np.ndarray
    b: np.ndarray
    y_target: np.ndarray
    lam: float = 0.0
    sigma_f: float = 0.0
    sigma_g: float = 0.0
    sin_amp: float = 0.0
    c_fy_bound: float = 10.0  # sup ||y - y_target|| over the operating box

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.y_target = np.asarray(self.y_target, dtype=float)


class QuadraticOracle(BilevelOracle):
    def __init__(self, spec: QuadBilevelSpec, rng_seed: int):
        eigvals = np.linalg.eigvalsh(spec.A)
        if not np.allclose(spec.A, spec.A.T) or eigvals[0] <= 0:
            raise NotSPD("lower-level Hessian A must be symmetric positive-definite")
        self.spec = spec
        self.d_lo, self.d_up = spec.B.shape
        self.salt = int(rng_seed)
        self._cache = _TokenCache()
        bnorm = float(np.linalg.norm(spec.B, 2))
        # without the sinusoidal term the outer objective is a convex
        # quadratic, so its strong-convexity modulus is available
        mu_f = None
        if spec.sin_amp == 0.0:
            A_inv_B = np.linalg.solve(spec.A, spec.B)
            H_ell = spec.lam * np.eye(self.d_up) + A_inv_B.T @ A_inv_B
            mu_f = float(np.linalg.eigvalsh(H_ell)[0])
        self.constants = ProblemConstants(
            mu_g=float(eigvals[0]),
            L_g=float(eigvals[-1]),
            C_gxy=bnorm,
            C_fy=spec.c_fy_bound,
            L_fx=spec.lam + spec.sin_amp,
            L_fy=1.0,
            L_gxy=0.0,
            L_gyy=0.0,
            mu_f=mu_f,
            sigma_f=spec.sigma_f,
            sigma_g=spec.sigma_g,
        )

    # -- deterministic parts -------------------------------------------------
    def _grad_x_f(self, pair: IteratePair) -> Vector:
        g = self.spec.lam * pair.x
        if self.spec.sin_amp:
            g = g + self.spec.sin_amp * np.cos(pair.x)
        return g

    def _grad_y_f(self, pair: IteratePair) -> Vector:
        return pair.y - self.spec.y_target

    def _grad_y_g(self, pair: IteratePair) -> Vector:
        return self.spec.A @ pair.y - self.spec.B @ pair.x - self.spec.b

    # -- sampled capabilities (additive Gaussian noise on the y-gradients) ----
    def grad_x_f_sample(self, pair: IteratePair, token: SampleToken) -> Vector:
        return self._grad_x_f(pair)

    def grad_y_f_sample(self, pair: IteratePair, token: SampleToken) -> Vector:
        g = self._grad_y_f(pair)
        if self.spec.sigma_f:
            noise = self._cache.get_or_compute(
                ("f", token.path),
                lambda: self.spec.sigma_f
                * token.child(_NOISE_TAG, self.salt).rng().standard_normal(self.d_lo),
            )
            g = g + noise
        return g

    def grad_y_g_sample(self, pair: IteratePair, token: SampleToken) -> Vector:
        g = self._grad_y_g(pair)
        if self.spec.sigma_g:
            noise = self._cache.get_or_compute(
                ("g", token.path),
                lambda: self.spec.sigma_g
                * token.child(_NOISE_TAG, self.salt).rng().standard_normal(self.d_lo),
            )
            g = g + noise
        return g

    def hess_yy_g_sample(self, pair: IteratePair, token: SampleToken) -> LinearOperator:
        A = self.spec.A
        return lambda v: A @ v

    def hess_xy_g_sample(self, pair: IteratePair, token: SampleToken) -> LinearOperator:
        Bt = -self.spec.B.T
        return lambda v: Bt @ v

    def upper_loss(self, pair: IteratePair) -> float:
        val = 0.5 * float(np.sum((pair.y - self.spec.y_target) ** 2))
        val += 0.5 * self.spec.lam * float(np.sum(pair.x**2))
        if self.spec.sin_amp:
            val += self.spec.sin_amp * float(np.sum(np.sin(pair.x)))
        return val


class QuadraticExact(ExactOracle):
    """Closed forms for the quadratic family."""

    def __init__(self, oracle: QuadraticOracle):
        self._o = oracle
        s = oracle.spec
        self._A_inv = np.linalg.inv(s.A)
        # Outer Hessian of the quadratic part: lam I + B' A^-2 B.
        self._H_ell = s.lam * np.eye(oracle.d_up) + s.B.T @ self._A_inv @ self._A_inv @ s.B
        self._ell_star: Optional[float] = None
        if s.sin_amp == 0.0 and np.linalg.eigvalsh(self._H_ell)[0] > 1e-12:
            c0 = s.B.T @ self._A_inv @ (self._A_inv @ s.b - s.y_target)
            x_min = np.linalg.solve(self._H_ell, -c0)
            self._ell_star = self.ell(x_min)

    def y_star(self, x: Vector) -> Vector:
        s = self._o.spec
        return self._A_inv @ (s.B @ x + s.b)

    def ell(self, x: Vector) -> float:
        s = self._o.spec
        ys = self.y_star(x)
        val = 0.5 * float(np.sum((ys - s.y_target) ** 2)) + 0.5 * s.lam * float(np.sum(x**2))
        if s.sin_amp:
            val += s.sin_amp * float(np.sum(np.sin(x)))
        return val

    def grad_ell(self, x: Vector) -> Vector:
        s = self._o.spec
        g = s.lam * x + s.B.T @ (self._A_inv @ (self.y_star(x) - s.y_target))
        if s.sin_amp:
            g = g + s.sin_amp * np.cos(x)
        return g

    def surrogate_grad(self, x: Vector, y: Vector) -> Vector:
        s = self._o.spec
        pair = IteratePair(x, y)
        return self._o._grad_x_f(pair) + s.B.T @ (self._A_inv @ self._o._grad_y_f(pair))

    @property
    def ell_star(self) -> Optional[float]:
        return self._ell_star

    @property
    def outer_hessian(self) -> np.ndarray:
        return self._H_ell

    @property
    def mu_f(self) -> float:
        return float(np.linalg.eigvalsh(self._H_ell)[0])

    def grad_y_g_mean(self, pair: IteratePair) -> Vector:
        return self._o._grad_y_g(pair)

    def grad_x_f_mean(self, pair: IteratePair) -> Vector:
        return self._o._grad_x_f(pair)

    def grad_y_f_mean(self, pair: IteratePair) -> Vector:
        return self._o._grad_y_f(pair)

    def neumann_expectation(self, pair: IteratePair, K: int) -> Vector:
        s = self._o.spec
        return exact_neumann_expectation(
            hess_yy=s.A,
            hess_xy=-s.B.T,
            grad_x_f=self._o._grad_x_f(pair),
            grad_y_f=self._o._grad_y_f(pair),
            K=K,
            L_g=self._o.constants.L_g,
        )


def make_quadratic(spec: QuadBilevelSpec, rng_seed: int) -> Tuple[QuadraticOracle, QuadraticExact]:
    oracle = QuadraticOracle(spec, rng_seed)
    return oracle, QuadraticExact(oracle)


def random_quadratic_spec(
    rng: np.random.Generator,
    d_up: int,
    d_lo: int,
    mu_g: float = 1.0,
    L_g: float = 2.0,
    lam: float = 0.5,
    sigma_f: float = 0.0,
    sigma_g: float = 0.0,
    sin_amp: float = 0.0,
) -> QuadBilevelSpec:
    """Random instance with the lower Hessian spectrum pinned to [mu_g, L_g]."""
    Q, _ = np.linalg.qr(rng.standard_normal((d_lo, d_lo)))
    if d_lo == 1:
        eigs = np.array([mu_g])
    else:
        eigs = np.linspace(mu_g, L_g, d_lo)
    A = Q @ np.diag(eigs) @ Q.T
    A = 0.5 * (A + A.T)
    B = rng.standard_normal((d_lo, d_up)) / np.sqrt(d_lo)
    return QuadBilevelSpec(
        A=A,
        B=B,
        b=rng.standard_normal(d_lo) * 0.5,
        y_target=rng.standard_normal(d_lo) * 0.5,
        lam=lam,
        sigma_f=sigma_f,
        sigma_g=sigma_g,
        sin_amp=sin_amp,
    )


# ---------------------------------------------------------------------------
# Data hyper-cleaning (logistic regression with per-sample weights)
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    features: np.ndarray  # (n, d_lo)
    labels: np.ndarray    # (n,), values in {0, 1}

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class HyperCleanSpec:
    train: Dataset
    val: Dataset
    corruption_rate: float
    reg: float = 1e-3          # ridge coefficient c of the lower problem
    batch_size: int = 1


def _sigmoid(z):
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bce_sum(logits: np.ndarray, labels: np.ndarray) -> float:
    # log(1 + e^z) - b z, stably
    return float(np.sum(np.logaddexp(0.0, logits) - labels * logits))


class HyperCleanOracle(BilevelOracle):
    """Sampled oracle for the weighted-training/clean-validation problem.

    The upper variable x holds one weight logit per training point, so the
    upper gradient w.r.t. x is identically zero and the hypergradient flows
    entirely through the cross Hessian.
    """

    def __init__(self, spec: HyperCleanSpec, rng_seed: int):
        if len(spec.train) == 0 or len(spec.val) == 0:
            raise EmptyDataset("train and validation sets must be nonempty")
        if spec.reg <= 0:
            raise ValueError("reg must be positive")
        self.spec = spec
        self.d_up = len(spec.train)
        self.d_lo = spec.train.features.shape[1]
        self.salt = int(rng_seed)
        m = spec.batch_size
        n_tr, n_val = len(spec.train), len(spec.val)
        a_sq = float(np.max(np.sum(spec.train.features**2, axis=1)))
        a_nm = float(np.sqrt(a_sq))
        av_sq = float(np.max(np.sum(spec.val.features**2, axis=1)))
        self.constants = ProblemConstants(
            mu_g=2.0 * spec.reg,
            L_g=2.0 * spec.reg + (n_tr / m) * min(m, n_tr) * 0.25 * a_sq,
            C_gxy=(n_tr / m) * np.sqrt(min(m, n_tr)) * 0.25 * a_nm,
            C_fy=n_val * np.sqrt(av_sq),
            L_fx=0.0,
            L_fy=n_val * 0.25 * av_sq,
            L_gxy=(n_tr / m) * np.sqrt(min(m, n_tr)) * a_sq,
            L_gyy=n_tr * 0.25 * a_sq * a_nm,
        )

    def _batch(self, token: SampleToken, n: int, tag: int) -> np.ndarray:
        m = min(self.spec.batch_size, n)
        rng = token.child(_NOISE_TAG, self.salt, tag).rng()
        return rng.integers(0, n, size=m)

    # Upper-level sample: a validation minibatch shared by both f-gradients.
    def grad_x_f_sample(self, pair: IteratePair, token: SampleToken) -> Vector:
        return np.zeros(self.d_up)

    def grad_y_f_sample(self, pair: IteratePair, token: SampleToken) -> Vector:
        val = self.spec.val
        idx = self._batch(token, len(val), 0)
        a = val.features[idx]
        resid = _sigmoid(a @ pair.y) - val.labels[idx]
        return (len(val) / len(idx)) * (resid @ a)

    def grad_y_g_sample(self, pair: IteratePair, token: SampleToken) -> Vector:
        tr = self.spec.train
        idx = self._batch(token, len(tr), 1)
        a = tr.features[idx]
        w = _sigmoid(pair.x[idx])
        resid = _sigmoid(a @ pair.y) - tr.labels[idx]
        scale = len(tr) / len(idx)
        return 2.0 * self.spec.reg * pair.y + scale * ((w * resid) @ a)

    def hess_yy_g_sample(self, pair: IteratePair, token: SampleToken) -> LinearOperator:
        tr = self.spec.train
        idx = self._batch(token, len(tr), 2)
        a = tr.features[idx]
        w = _sigmoid(pair.x[idx])
        s = _sigmoid(a @ pair.y)
        coef = w * s * (1.0 - s) * (len(tr) / len(idx))

        def action(v: Vector) -> Vector:
            return 2.0 * self.spec.reg * v + (coef * (a @ v)) @ a

        return action

    def hess_xy_g_sample(self, pair: IteratePair, token: SampleToken) -> LinearOperator:
        tr = self.spec.train
        idx = self._batch(token, len(tr), 3)
        a = tr.features[idx]
        w = _sigmoid(pair.x[idx])
        dw = w * (1.0 - w)  # derivative of the sigmoid weight
        resid = _sigmoid(a @ pair.y) - tr.labels[idx]
        scale = len(tr) / len(idx)

        def action(v: Vector) -> Vector:
            out = np.zeros(self.d_up)
            # rows are nonzero only for the sampled training points
            np.add.at(out, idx, scale * dw * resid * (a @ v))
            return out

        return action

    def full_lower_hessian(self, pair: IteratePair) -> np.ndarray:
        """Explicit full-batch lower Hessian; small-d diagnostics only."""
        tr = self.spec.train
        a = tr.features
        w = _sigmoid(pair.x)
        s = _sigmoid(a @ pair.y)
        coef = w * s * (1.0 - s)
        return 2.0 * self.spec.reg * np.eye(self.d_lo) + (a.T * coef) @ a

    def upper_loss(self, pair: IteratePair) -> float:
        """Full-batch validation loss at the current inner iterate."""
        return _bce_sum(self.spec.val.features @ pair.y, self.spec.val.labels)


def make_hyperclean(spec: HyperCleanSpec, rng_seed: int) -> HyperCleanOracle:
    return HyperCleanOracle(spec, rng_seed)


def generate_corrupted_dataset(
    n_train: int, n_val: int, d_lo: int, p: float, rng_seed: int
) -> Tuple[Dataset, Dataset]:
    """Synthetic hyper-cleaning data: Gaussian features, planted logistic
    labels, train labels flipped independently with probability p."""
    if not (0.0 <= p <= 1.0):
        raise ValueError("corruption rate p must lie in [0, 1]")
    rng = np.random.default_rng(rng_seed)
    w_true = rng.standard_normal(d_lo) * (2.0 / np.sqrt(d_lo))
    datasets = []
    for n, corrupt in ((n_train, True), (n_val, False)):
        feats = rng.standard_normal((n, d_lo))
        labels = (rng.random(n) < _sigmoid(feats @ w_true)).astype(float)
        if corrupt:
            # always consume the flip draws so the validation stream does
            # not depend on p
            flip = rng.random(n) < p
            labels[flip] = 1.0 - labels[flip]
        datasets.append(Dataset(feats, labels))
    return datasets[0], datasets[1]


def load_dataset_csv(path: str) -> Dataset:
    """Read a dataset from CSV with header ``f1,...,fd,label``."""
    import csv

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[-1].strip() != "label":
            raise EmptyDataset(f"{path}: expected a header ending in 'label'")
        rows = [[float(cell) for cell in row] for row in reader if row]
    if not rows:
        raise EmptyDataset(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=float)
    return Dataset(arr[:, :-1], arr[:, -1])


# ---------------------------------------------------------------------------
# Linear least-squares meta-learning
# ---------------------------------------------------------------------------


@dataclass
class MetaLinearSpec:
    """M tasks with per-task quadratic losses 0.5||Z_i (x + y_i) - v_i||^2,
    ridge-regularized task parameters, and task subsampling of size m."""

    Z: list = field(default_factory=list)   # per-task train design matrices
    v: list = field(default_factory=list)   # per-task train targets
    D: list = field(default_factory=list)   # per-task held-out designs
    u: list = field(default_factory=list)   # per-task held-out targets
    rho: float = 1.0
    m: int = 1

    @property
    def M(self) -> int:
        return len(self.Z)

    @property
    def p(self) -> int:
        return self.Z[0].shape[1]


class MetaLinearOracle(BilevelOracle):
    """Task-subsampled oracle; the stacked inner variable is block-separable.

    With m < M a sampled lower objective touches only the drawn blocks, so
    strong convexity holds per drawn block (the full-expectation problem is
    rho/M strongly convex).
    """

    def __init__(self, spec: MetaLinearSpec, rng_seed: int):
        if spec.m > spec.M:
            raise InvalidBatch(f"m = {spec.m} exceeds the task count M = {spec.M}")
        if spec.rho <= 0:
            raise ValueError("rho must be positive")
        self.spec = spec
        self.d_up = spec.p
        self.d_lo = spec.M * spec.p
        self.salt = int(rng_seed)
        eig_lo, eig_hi = [], []
        for Z in spec.Z:
            ev = np.linalg.eigvalsh(Z.T @ Z)
            eig_lo.append(ev[0])
            eig_hi.append(ev[-1])
        self.constants = ProblemConstants(
            mu_g=(min(eig_lo) + spec.rho) / spec.M,
            L_g=(max(eig_hi) + spec.rho) / spec.m,
            C_gxy=max(eig_hi) / spec.m,
            C_fy=100.0,  # operating-box bound for the quadratic upper gradient
            L_fx=max(float(np.linalg.eigvalsh(D.T @ D)[-1]) for D in spec.D) / spec.m,
            L_fy=max(float(np.linalg.eigvalsh(D.T @ D)[-1]) for D in spec.D) / spec.m,
            L_gxy=0.0,
            L_gyy=0.0,
        )

    def _tasks(self, token: SampleToken, tag: int) -> np.ndarray:
        if self.spec.m == self.spec.M:
            return np.arange(self.spec.M)
        rng = token.child(_NOISE_TAG, self.salt, tag).rng()
        return rng.choice(self.spec.M, size=self.spec.m, replace=False)

    def _blocks(self, y: Vector) -> np.ndarray:
        return y.reshape(self.spec.M, self.spec.p)

    def grad_x_f_sample(self, pair: IteratePair, token: SampleToken) -> Vector:
        s, tasks = self.spec, self._tasks(token, 0)
        blocks = self._blocks(pair.y)
        out = np.zeros(self.d_up)
        for i in tasks:
            out += s.D[i].T @ (s.D[i] @ (pair.x + blocks[i]) - s.u[i])
        return out / len(tasks)

    def grad_y_f_sample(self, pair: IteratePair, token: SampleToken) -> Vector:
        s, tasks = self.spec, self._tasks(token, 0)
        blocks = self._blocks(pair.y)
        out = np.zeros((s.M, s.p))
        for i in tasks:
            out[i] = s.D[i].T @ (s.D[i] @ (pair.x + blocks[i]) - s.u[i])
        return out.ravel() / len(tasks)

    def grad_y_g_sample(self, pair: IteratePair, token: SampleToken) -> Vector:
        s, tasks = self.spec, self._tasks(token, 1)
        blocks = self._blocks(pair.y)
        out = np.zeros((s.M, s.p))
        for i in tasks:
            out[i] = s.Z[i].T @ (s.Z[i] @ (pair.x + blocks[i]) - s.v[i]) + s.rho * blocks[i]
        return out.ravel() / len(tasks)

    def hess_yy_g_sample(self, pair: IteratePair, token: SampleToken) -> LinearOperator:
        s, tasks = self.spec, self._tasks(token, 2)

        def action(v: Vector) -> Vector:
            blocks = v.reshape(s.M, s.p)
            out = np.zeros((s.M, s.p))
            for i in tasks:
                out[i] = s.Z[i].T @ (s.Z[i] @ blocks[i]) + s.rho * blocks[i]
            return out.ravel() / len(tasks)

        return action

    def hess_xy_g_sample(self, pair: IteratePair, token: SampleToken) -> LinearOperator:
        s, tasks = self.spec, self._tasks(token, 3)

        def action(v: Vector) -> Vector:
            blocks = v.reshape(s.M, s.p)
            out = np.zeros(self.d_up)
            for i in tasks:
                out += s.Z[i].T @ (s.Z[i] @ blocks[i])
            return out / len(tasks)

        return action

    def upper_loss(self, pair: IteratePair) -> float:
        s = self.spec
        blocks = self._blocks(pair.y)
        total = 0.0
        for i in range(s.M):
            total += 0.5 * float(np.sum((s.D[i] @ (pair.x + blocks[i]) - s.u[i]) ** 2))
        return total / s.M


def make_meta_linear(spec: MetaLinearSpec, rng_seed: int) -> MetaLinearOracle:
    return MetaLinearOracle(spec, rng_seed)
