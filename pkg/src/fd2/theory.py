"""Numerical checks of the margin bound, prototype-score identity and attention-diversity bounds.

Every verifier evaluates both sides of a statement on a concrete instance with
plain numpy (no shared code with the training path beyond the two constraint
functions whose identity is under test) and reports the slack.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .cal import PrototypeBank
from .constraints import fg_constraint, prototype_score
from .errors import ValidationError

TOL = 1e-9
COR1_TOL = 1e-12


# -- instances ---------------------------------------------------------------

@dataclass
class GeometryInstance:
    centers: np.ndarray  # (K, d)
    z: np.ndarray  # (d,)
    y: int

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.centers.shape[0] < 2:
            raise ValidationError("geometry instance needs K >= 2 centers")
        if not (np.isfinite(self.centers).all() and np.isfinite(self.z).all()):
            raise ValidationError("geometry instance must be finite")

    @property
    def r(self):
        return float(np.linalg.norm(self.z - self.centers[self.y]))

    @property
    def d(self):
        others = np.delete(self.centers, self.y, axis=0)
        return np.linalg.norm(others - self.centers[self.y], axis=1)


@dataclass
class AttentionEnsemble:
    vectors: np.ndarray  # (N_S, P)
    pooling: np.ndarray | None = None  # G_y, (P, D)
    jacobian: np.ndarray | None = None  # linear generation map, (P, Q)
    inits: np.ndarray | None = None  # (N_S, Q)

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))

    @classmethod
    def from_linear_map(cls, jacobian, inits, pooling=None):
        jacobian = np.asarray(jacobian, dtype=np.float64)
        inits = np.atleast_2d(np.asarray(inits, dtype=np.float64))
        return cls(vectors=inits @ jacobian.T, pooling=pooling, jacobian=jacobian, inits=inits)

    @property
    def lipschitz(self):
        if self.jacobian is None:
            raise ValidationError("ensemble has no generation map")
        return float(np.linalg.norm(self.jacobian, 2))


def covariance_trace(vectors):
    a = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    c = a - a.mean(0)
    cov = c.T @ c / a.shape[0]
    return float(np.trace(cov))


def pairwise_sum(vectors):
    """``sum_{i,j} |v_i - v_j|^2`` by explicit double loop."""
    a = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    total = 0.0
    for i in range(a.shape[0]):
        for j in range(a.shape[0]):
            diff = a[i] - a[j]
            total += float(diff @ diff)
    return total


def _l2metric(u, v, eps):
    den = np.linalg.norm(u) + np.linalg.norm(v) + eps
    return float(np.linalg.norm(u - v) / den)


# -- verifiers ---------------------------------------------------------------

@dataclass
class Check:
    name: str
    lhs: float
    rhs: float
    holds: bool

    @property
    def gap(self):
        return self.lhs - self.rhs


@dataclass
class Report:
    statement: str
    checks: list = field(default_factory=list)

    @property
    def ok(self):
        return all(c.holds for c in self.checks)

    @property
    def violation(self):
        """Largest amount by which any check fails (0 if all hold)."""
        worst = 0.0
        for c in self.checks:
            if not c.holds:
                worst = max(worst, abs(c.gap))
        return worst

    def tight(self, tol=TOL):
        return any(abs(c.gap) <= tol * max(1.0, abs(c.rhs)) for c in self.checks)


def verify_prop1(inst, tol=TOL):
    """Average center margin vs its Cauchy-Schwarz lower bound."""
    y = inst.y
    others = np.delete(np.arange(inst.centers.shape[0]), y)
    margin = float(np.mean([np.sum((inst.z - inst.centers[j]) ** 2) - np.sum((inst.z - inst.centers[y]) ** 2)
                            for j in others]))
    r, d = inst.r, inst.d
    bound = float(np.mean(d ** 2 - 2.0 * r * d))
    rep = Report("prop1", [Check("margin >= bound", margin, bound, margin >= bound - tol)])
    d_sum = d.sum()
    condition = d_sum > 0 and r < (d ** 2).sum() / (2.0 * d_sum)
    if condition:
        rep.checks.append(Check("margin > 0 under radius condition", margin, 0.0, margin > 0.0))
    rep.condition_holds = condition
    rep.margin, rep.bound = margin, bound
    return rep


def _bank_from(prototypes):
    protos = torch.as_tensor(np.asarray(prototypes, dtype=np.float64))
    bank = PrototypeBank(protos.shape[0], protos.shape[1], dtype=torch.float64)
    bank.prototypes = protos.clone()
    bank.initialized[:] = True
    return bank


def verify_cor1(z, bank, y, beta, eps=1e-8, tol=COR1_TOL):
    """Residual of ``L_F + score - (1 - beta)``; ``bank`` may be a bank or a (K, D) array."""
    if not isinstance(bank, PrototypeBank):
        bank = _bank_from(bank)
    else:
        bank = bank.to(torch.float64)
    zt = torch.as_tensor(np.asarray(z, dtype=np.float64))
    lf = float(fg_constraint(zt, bank, y, beta, eps))
    score = float(prototype_score(zt, bank, y, beta, eps))
    residual = abs(lf + score - (1.0 - beta))
    rep = Report("cor1", [Check("L_F + score == 1 - beta", lf + score, 1.0 - beta, residual < tol)])
    rep.residual = residual
    return rep


def verify_trace_identity(ens, tol=TOL):
    n = ens.vectors.shape[0]
    if n < 1:
        raise ValidationError("ensemble needs at least one vector")
    trace = covariance_trace(ens.vectors)
    pair = pairwise_sum(ens.vectors) / (2.0 * n * n)
    residual = abs(trace - pair)
    rep = Report("trace_identity", [Check("tr(Sigma_A) == pairwise form", trace, pair, residual < tol * max(1.0, abs(pair)))])
    rep.residual = residual
    return rep


def verify_sandwich(ens, tol=TOL):
    """``s_min(G)^2 tr(S_A) <= tr(S_h) <= |G|_2^2 tr(S_A)`` with ``h = G^T A``.

    ``s_min`` is the P-th singular value of ``G`` (0 when ``G`` has fewer
    than P columns), i.e. the smallest gain of ``G^T`` on the attention space.
    """
    g = ens.pooling
    if g is None:
        raise ValidationError("ensemble has no pooling matrix")
    g = np.asarray(g, dtype=np.float64)
    p = ens.vectors.shape[1]
    if g.shape[0] != p:
        raise ValidationError(f"pooling matrix has {g.shape[0]} rows, attention dim is {p}")
    s = np.linalg.svd(g, compute_uv=False)
    s_min = s[p - 1] if len(s) >= p else 0.0
    s_max = s[0] if len(s) else 0.0
    t_a = covariance_trace(ens.vectors)
    t_h = covariance_trace(ens.vectors @ g)
    lower, upper = s_min ** 2 * t_a, s_max ** 2 * t_a
    scale = max(1.0, abs(upper))
    rep = Report("sandwich", [
        Check("lower <= tr(S_h)", t_h, lower, t_h >= lower - tol * scale),
        Check("tr(S_h) <= upper", upper, t_h, t_h <= upper + tol * scale),
    ])
    return rep


def verify_prop2(ens, tol=TOL):
    if ens.jacobian is None or ens.inits is None:
        raise ValidationError("prop2 needs a linear generation map and its initializations")
    n = ens.vectors.shape[0]
    lhs = covariance_trace(ens.vectors)
    bound = ens.lipschitz ** 2 / (2.0 * n * n) * pairwise_sum(ens.inits)
    return Report("prop2", [Check("tr(S_A) <= Lipschitz bound", bound, lhs, lhs <= bound + tol * max(1.0, bound))])


def eta_range(vectors, i, eps=0.0):
    """Exact ``(eta_lower, eta_upper)`` over pairs ``(i, j < i)``; ``i`` is 1-based."""
    a = np.atleast_2d(vectors)
    sums = [np.linalg.norm(a[i - 1]) + np.linalg.norm(a[j]) + eps for j in range(i - 1)]
    return float(min(sums)), float(max(sums))


def verify_cor2(ens, i, eps=0.0, eta_lower=None, eta_upper=None, tol=TOL):
    """Lower bound on attention diversity from the similarity metric, with every step of the chain."""
    a = ens.vectors
    n = a.shape[0]
    if not 1 < i <= n:
        raise ValidationError(f"need 1 < i <= N_S, got i={i}, N_S={n}")
    lo, hi = eta_range(a, i, eps)
    eta_lower = lo if eta_lower is None else eta_lower
    eta_upper = hi if eta_upper is None else eta_upper
    if not 0 < eta_lower <= lo or eta_upper < hi:
        raise ValidationError(f"eta bounds ({eta_lower}, {eta_upper}) do not bracket [{lo}, {hi}]")
    ai = a[i - 1]
    dists = np.array([np.linalg.norm(ai - a[j]) for j in range(i - 1)])
    metrics = np.array([_l2metric(ai, a[j], eps) for j in range(i - 1)])
    checks = []

    def le(name, small, big):
        checks.append(Check(name, big, small, small <= big + tol * max(1.0, abs(big))))

    for j in range(i - 1):
        le(f"|A_i - A_{j + 1}| / eta_upper <= l2", dists[j] / eta_upper, metrics[j])
        le(f"l2 <= |A_i - A_{j + 1}| / eta_lower", metrics[j], dists[j] / eta_lower)
    mean_sq = float(np.mean(dists ** 2))
    mean_d = float(np.mean(dists))
    mean_m = float(np.mean(metrics))
    le("Jensen: (E|d|)^2 <= E|d|^2", mean_d ** 2, mean_sq)
    le("eta_lower^2 (E l2)^2 <= (E|d|)^2", eta_lower ** 2 * mean_m ** 2, mean_d ** 2)
    trace = covariance_trace(a)
    le("(i-1)/N^2 E|d|^2 <= tr(S_A)", (i - 1) / n ** 2 * mean_sq, trace)
    final = (i - 1) / n ** 2 * eta_lower ** 2 * mean_m ** 2
    le("diversity lower bound", final, trace)
    rep = Report("cor2", checks)
    rep.trace, rep.bound = trace, final
    return rep


# -- randomized suites -------------------------------------------------------

def random_geometry(rng):
    k = int(rng.integers(2, 8))
    d = int(rng.integers(1, 6))
    scale = 10.0 ** rng.uniform(-2, 2)
    centers = rng.normal(size=(k, d)) * scale
    y = int(rng.integers(k))
    if rng.random() < 0.2:
        z = centers[y].copy()
    else:
        z = centers[y] + rng.normal(size=d) * scale * rng.uniform(0, 2)
    return GeometryInstance(centers, z, y)


def random_cor1(rng):
    k = int(rng.integers(2, 8))
    d = int(rng.integers(1, 9))
    protos = rng.normal(size=(k, d))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    protos *= rng.uniform(0.2, 1.0, size=(k, 1))
    z = rng.normal(size=d)
    z /= np.linalg.norm(z)
    beta = float(rng.choice([0.0, 1.0, rng.uniform()])) if rng.random() < 0.2 else float(rng.uniform())
    return z, protos, int(rng.integers(k)), beta


def random_vectors(rng, n=None, p=None):
    n = n or int(rng.integers(1, 7))
    p = p or int(rng.integers(1, 10))
    if rng.random() < 0.1:
        return np.tile(rng.random(p), (n, 1))
    v = rng.random((n, p)) if rng.random() < 0.5 else rng.normal(size=(n, p))
    return v * 10.0 ** rng.uniform(-2, 2)


def _suite(name, trials, seed, make, verify, witnesses):
    rng = np.random.default_rng(seed)
    violations = 0
    worst = 0.0
    for _ in range(trials):
        rep = verify(make(rng))
        if not rep.ok:
            violations += 1
        worst = max(worst, rep.violation, getattr(rep, "residual", 0.0))
    tight = any(w.tight() for w in witnesses())
    return SuiteResult(name, trials, violations, worst, tight)


@dataclass
class SuiteResult:
    statement: str
    trials: int
    violations: int
    max_residual: float
    witness: bool

    @property
    def passed(self):
        return self.violations == 0 and self.witness


def _prop1_witnesses():
    return [verify_prop1(GeometryInstance([[0.0, 0.0], [2.0, 0.0]], [0.5, 0.0], 0))]


def _cor1_witnesses():
    protos = np.array([[1.0, 0.0], [-1.0, 0.0]])
    return [verify_cor1(np.array([1.0, 0.0]), protos, 0, b) for b in (0.0, 0.5, 1.0)]


def _trace_witnesses():
    return [verify_trace_identity(AttentionEnsemble([[0.0, 0.0], [2.0, 0.0]]))]


def _sandwich_witnesses():
    a = np.array([[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]])
    return [verify_sandwich(AttentionEnsemble(a, pooling=np.eye(2))),
            verify_sandwich(AttentionEnsemble(a, pooling=2.0 * np.eye(2)))]


def _prop2_witnesses():
    x = np.array([[0.0, 1.0], [2.0, -1.0], [1.0, 1.0]])
    return [verify_prop2(AttentionEnsemble.from_linear_map(np.eye(2), x))]


def _cor2_witnesses():
    return [verify_cor2(AttentionEnsemble([[1.0, 0.0], [-1.0, 0.0]]), 2, eps=0.0)]


def _make_sandwich(rng):
    a = random_vectors(rng)
    p = a.shape[1]
    d = int(rng.integers(max(1, p - 2), p + 4))
    return AttentionEnsemble(a, pooling=rng.normal(size=(p, d)))


def _make_prop2(rng):
    n = int(rng.integers(1, 7))
    q = int(rng.integers(1, 8))
    p = int(rng.integers(1, 10))
    return AttentionEnsemble.from_linear_map(rng.normal(size=(p, q)), rng.normal(size=(n, q)))


def _make_cor2(rng):
    n = int(rng.integers(2, 7))
    a = random_vectors(rng, n=n)
    if not np.any(a):
        a = a + 1.0
    i = int(rng.integers(2, n + 1))
    eps = 0.0 if rng.random() < 0.5 else 1e-8
    return a, i, eps


def run_all(trials=1000, seed=0):
    """Run every randomized suite and return a list of :class:`SuiteResult`."""
    return [
        _suite("prop1 margin bound", trials, seed, random_geometry, verify_prop1, _prop1_witnesses),
        _suite("cor1 L_F/score identity", trials, seed + 1, random_cor1,
               lambda t: verify_cor1(t[0], t[1], t[2], t[3]), _cor1_witnesses),
        _suite("trace/pairwise identity", trials, seed + 2, lambda r: AttentionEnsemble(random_vectors(r)),
               verify_trace_identity, _trace_witnesses),
        _suite("representation sandwich", trials, seed + 3, _make_sandwich, verify_sandwich, _sandwich_witnesses),
        _suite("prop2 Lipschitz diversity bound", trials, seed + 4, _make_prop2, verify_prop2, _prop2_witnesses),
        _suite("cor2 diversity lower bound", trials, seed + 5, _make_cor2,
               lambda t: verify_cor2(AttentionEnsemble(t[0]), t[1], eps=t[2]), _cor2_witnesses),
    ]


def format_table(results):
    lines = [f"{'statement':34s} {'trials':>6s} {'violations':>10s} {'max_residual':>13s} {'witness':>7s} result"]
    for r in results:
        lines.append(f"{r.statement:34s} {r.trials:6d} {r.violations:10d} {r.max_residual:13.3e} "
                     f"{'yes' if r.witness else 'no':>7s} {'PASS' if r.passed else 'FAIL'}")
    lines.append("note: the Lipschitz bound is checked for linear generation maps only")
    return "\n".join(lines) + "\n"
