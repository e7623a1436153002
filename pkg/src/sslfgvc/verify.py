"""Oracle and property suites shared by the ``verify`` command and the tests.

Each check reports the measured value next to the tolerance it must meet.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import tensor as T
from .diversification import DbConfig, apply_suppression, diversify
from .tensor import Tensor, grad_check
from .transforms import rcm_permutation, stream

__all__ = ["Check", "SUITES", "run_suite", "grad_suite", "perm_suite", "loss_suite", "format_check"]

GRAD_TOL = 1e-4
GRAD_EPS = 1e-5


@dataclass(frozen=True)
class Check:
    suite: str
    name: str
    value: float
    tol: float
    passed: bool
    seconds: float = 0.0


def format_check(c: Check) -> str:
    mark = "PASS" if c.passed else "FAIL"
    return f"[{mark}] {c.suite}/{c.name}: value={c.value:.3e} tol={c.tol:.0e} ({c.seconds:.2f}s)"


def _away_from_zero(rng, shape, margin=0.1):
    u = rng.standard_normal(shape)
    return np.sign(u) * (margin + np.abs(u))


def _distinct(rng, shape):
    """Values with pairwise gaps far above the finite-difference step."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape) - 0.05 * n


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------

def _grad_cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable, np.ndarray]]]:
    def w(rng, *shape):
        return rng.standard_normal(shape)

    def shp(rng):
        return (int(rng.integers(2, 5)), int(rng.integers(2, 5)))

    def conv_case(rng):
        c_in, c_out, k = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.choice([1, 3]))
        kern, bias = w(rng, c_out, c_in, k, k), w(rng, c_out)
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        size = k + stride * int(rng.integers(1, 3)) - 2 * pad
        x = w(rng, 2, c_in, size, size)
        probe = w(rng, *T.conv2d(x, kern, bias, stride, pad).shape)
        return (lambda t: T.sum_(T.conv2d(t, kern, bias, stride, pad) * probe)), x

    def conv_kernel_case(rng):
        x = w(rng, 2, 2, 5, 5)
        probe = w(rng, 2, 3, 5, 5)
        return (lambda t: T.sum_(T.conv2d(x, t, None, 1, 1) * probe)), w(rng, 3, 2, 3, 3)

    def binary(op):
        def case(rng):
            s = shp(rng)
            other = _away_from_zero(rng, s) if op is T.div else w(rng, *s)
            probe = w(rng, *s)
            return (lambda t: T.sum_(op(t, other) * probe)), w(rng, *s)
        return case

    def unary(op, sample=None):
        def case(rng):
            s = shp(rng)
            x = sample(rng, s) if sample else w(rng, *s)
            probe = w(rng, *s)
            return (lambda t: T.sum_(op(t) * probe)), x
        return case

    def reduce_case(op, **kw):
        def case(rng):
            x = _distinct(rng, (3, 4))
            out_shape = op(x, **kw).shape
            probe = w(rng, *out_shape)
            return (lambda t: T.sum_(op(t, **kw) * probe)), x
        return case

    def matmul_case(rng):
        m, k, n = (int(v) for v in rng.integers(1, 5, 3))
        b, probe = w(rng, k, n), w(rng, m, n)
        return (lambda t: T.sum_(T.matmul(t, b) * probe)), w(rng, m, k)

    def maxpool_case(rng):
        x = _distinct(rng, (2, 2, 4, 4))
        probe = w(rng, 2, 2, 2, 2)
        return (lambda t: T.sum_(T.max_pool2(t) * probe)), x

    def avgpool_case(rng):
        probe = w(rng, 2, 2, 2)
        return (lambda t: T.sum_(T.avg_pool(t, (2, 2)) * probe)), w(rng, 2, 4, 6)

    def gap_case(rng):
        probe = w(rng, 2, 3)
        return (lambda t: T.sum_(T.global_avg_pool(t) * probe)), w(rng, 2, 3, 4, 4)

    def shape_case(rng):
        probe = w(rng, 4, 3, 2)
        return (lambda t: T.sum_(T.transpose(T.reshape(t, (2, 3, 4)), (2, 1, 0)) * probe)), w(rng, 6, 4)

    def concat_case(rng):
        other, probe = w(rng, 2, 3), w(rng, 2, 5)
        return (lambda t: T.sum_(T.concat([t, other], axis=1) * probe)), w(rng, 2, 2)

    def getitem_case(rng):
        probe = w(rng, 2, 4)
        return (lambda t: T.sum_(t[1:3] * probe)), w(rng, 4, 4)

    def logsumexp_masked(rng):
        mask = rng.random((3, 5)) < 0.6
        mask[:, 0] = True
        return (lambda t: T.sum_(T.logsumexp(t, axis=1, where=mask) * np.arange(1.0, 4.0))), w(rng, 3, 5)

    def composite(rng):
        kern = w(rng, 4, 3, 3, 3) * 0.5
        head = w(rng, 4, 5)
        labels = rng.integers(0, 5, 2)

        def f(t):
            h = T.max_pool2(T.relu(T.conv2d(t, kern, None, 1, 1)))
            return L.cross_entropy(T.matmul(T.global_avg_pool(h), head), labels)
        return f, w(rng, 2, 3, 4, 4)

    def ce_case(rng):
        labels = rng.integers(0, 6, 4)
        return (lambda t: L.cross_entropy(t, labels)), w(rng, 4, 6)

    def gce_case(rng):
        labels, k = rng.integers(0, 7, 4), int(rng.integers(1, 7))
        return (lambda t: L.gce_loss(t, labels, k)), _distinct(rng, (4, 7)) * 0.2

    def rotation_case(rng):
        labels, rot_labels = rng.integers(0, 5, 3), np.repeat(np.arange(4), 3)
        rot_head, lam = w(rng, 6, 4), float(rng.uniform(0, 1))

        def f(t):
            cls = L.cross_entropy(T.reshape(t[:, :5], (3, 5)), labels)
            rot_in = T.concat([T.reshape(t, (3, 6))] * 4, axis=0)
            rot = L.cross_entropy(T.matmul(rot_in, rot_head) * np.linspace(0.5, 1.5, 12)[:, None], rot_labels)
            return L.rotation_total(cls, rot, lam)
        return f, w(rng, 3, 6)

    def pirl_case(rng):
        v_t = w(rng, 3, 5)
        negs = w(rng, 3, 6, 5)
        return (lambda t: L.pirl_loss(t, v_t, negs, 0.5)), w(rng, 3, 5)

    def pirl_t_case(rng):
        v_i = w(rng, 3, 5)
        negs = w(rng, 3, 6, 5)
        return (lambda t: L.pirl_loss(v_i, t, negs, 0.5)), w(rng, 3, 5)

    def dcl_cls_case(rng):
        other, labels = w(rng, 3, 4), rng.integers(0, 4, 3)
        return (lambda t: L.dcl_cls_loss(t, other, labels)), w(rng, 3, 4)

    def dcl_adv_case(rng):
        other = w(rng, 3, 2)
        return (lambda t: L.dcl_adv_loss(other, t)), w(rng, 3, 2)

    def dcl_loc_case(mode):
        def case(rng):
            k = 3
            perm_t = np.stack([2.0 * rcm_permutation(k, 1, rng).origin_of / (k - 1) - 1.0 for _ in range(2)])
            last = k * k if mode == "bce" else 2
            sample = _away_from_zero if mode == "l1" else (lambda r, s: r.standard_normal(s) * 0.5)
            other = sample(rng, (2, k, k, last))
            x = sample(rng, (2, k, k, last))
            return (lambda t: L.dcl_loc_loss(other, t, perm_t, mode)), x
        return case

    def dcl_total_case(rng):
        labels = rng.integers(0, 4, 2)
        adv = w(rng, 2, 2)
        loc_p, targets = w(rng, 2, 2, 2, 2) * 0.5, np.zeros((2, 2, 2, 2))

        def f(t):
            cls = L.dcl_cls_loss(t[:2], t[2:], labels)
            a = L.dcl_adv_loss(T.matmul(t[:2], np.ones((4, 2)) * 0.1) + adv, adv)
            loc = L.dcl_loc_loss(loc_p, T.reshape(T.tanh(t), (2, 2, 2, 2)), targets, "mse")
            return L.dcl_total(cls, a, loc)
        return f, w(rng, 4, 4)

    def db_case(rng):
        cfg = DbConfig(p_peak=0.5, p_patch=0.5, patch_k=2, alpha=0.3)
        seed = int(rng.integers(1 << 30))
        return (lambda t: T.sum_(diversify(t, cfg, [stream(seed, 0)], True) * np.arange(16.0).reshape(1, 1, 4, 4))), \
            _distinct(rng, (1, 1, 4, 4))

    def l2_case(rng):
        probe = w(rng, 3, 4)
        return (lambda t: T.sum_(T.l2_normalize(t, 1) * probe)), w(rng, 3, 4)

    def softmax_case(rng):
        probe = w(rng, 3, 4)
        return (lambda t: T.sum_(T.softmax(t, axis=1) * probe)), w(rng, 3, 4)

    def log_softmax_case(rng):
        probe = w(rng, 3, 4)
        return (lambda t: T.sum_(T.log_softmax(t, axis=1) * probe)), w(rng, 3, 4)

    return {
        "add": binary(T.add), "sub": binary(T.sub), "mul": binary(T.mul), "div": binary(T.div),
        "scale": unary(lambda t: T.scale(t, -1.7)), "neg": unary(T.neg),
        "relu": unary(T.relu, _away_from_zero), "tanh": unary(T.tanh), "exp": unary(T.exp),
        "log": unary(T.log, lambda r, s: r.uniform(0.2, 3.0, s)), "sigmoid": unary(T.sigmoid),
        "softplus": unary(T.softplus), "square": unary(T.square), "abs": unary(T.abs_, _away_from_zero),
        "matmul": matmul_case, "conv2d": conv_case, "conv2d_kernel": conv_kernel_case,
        "sum": reduce_case(T.sum_, axis=1), "mean": reduce_case(T.mean, axis=0), "max": reduce_case(T.max_, axis=1),
        "softmax": softmax_case, "log_softmax": log_softmax_case, "logsumexp_masked": logsumexp_masked,
        "global_avg_pool": gap_case, "max_pool2": maxpool_case, "avg_pool": avgpool_case,
        "reshape_transpose": shape_case, "concat": concat_case, "getitem": getitem_case,
        "l2_normalize": l2_case, "composite_net": composite,
        "cross_entropy": ce_case, "gce": gce_case, "rotation_total": rotation_case,
        "pirl_image": pirl_case, "pirl_jigsaw": pirl_t_case,
        "dcl_cls": dcl_cls_case, "dcl_adv": dcl_adv_case, "dcl_loc_mse": dcl_loc_case("mse"),
        "dcl_loc_l1": dcl_loc_case("l1"), "dcl_loc_bce": dcl_loc_case("bce"), "dcl_total": dcl_total_case,
        "diversification": db_case,
    }


def grad_suite(seeds: int = 5) -> list[Check]:
    checks = []
    with T.default_dtype(np.float64):
        for i, (name, make) in enumerate(_grad_cases().items()):
            start = time.perf_counter()
            worst = 0.0
            for s in range(seeds):
                f, x = make(np.random.default_rng([1234, i, s]))
                worst = max(worst, grad_check(f, x, GRAD_EPS))
            checks.append(Check("grad", name, worst, GRAD_TOL, worst < GRAD_TOL, time.perf_counter() - start))
    return checks


# ---------------------------------------------------------------------------
# permutation constraints
# ---------------------------------------------------------------------------

def perm_suite(draws: int = 10_000, seed: int = 0) -> list[Check]:
    """RCM draws for k ∈ {4, 7}, D ∈ {1, 2, 3}: bijective and displacement < 2D."""
    start = time.perf_counter()
    bad_bijection = bad_range = 0
    worst_ratio = 0.0
    for n in range(draws):
        rng = stream(seed, n)
        k = int(rng.choice([4, 7]))
        D = int(rng.integers(1, 4))
        perm = rcm_permutation(k, D, rng)
        for perms in (perm.row_perms, perm.col_perms):
            if not (np.sort(perms, axis=1) == np.arange(k)).all():
                bad_bijection += 1
            disp = np.abs(perms - np.arange(k)).max()
            worst_ratio = max(worst_ratio, disp / (2 * D))
            bad_range += disp >= 2 * D
        flat = perm.origin_of[..., 0] * k + perm.origin_of[..., 1]
        if len(np.unique(flat)) != k * k:
            bad_bijection += 1
    elapsed = time.perf_counter() - start
    return [
        Check("perm", "bijective", float(bad_bijection), 0.5, bad_bijection == 0, elapsed),
        Check("perm", "displacement_below_2D", worst_ratio, 1.0, bad_range == 0 and worst_ratio < 1, elapsed),
    ]


# ---------------------------------------------------------------------------
# loss identities
# ---------------------------------------------------------------------------

def _timed(suite, name, tol, fn) -> Check:
    start = time.perf_counter()
    value = float(fn())
    return Check(suite, name, value, tol, value < tol, time.perf_counter() - start)


def _gce_vs_ce(n_vectors: int = 1000) -> float:
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(n_vectors):
        n = int(rng.integers(2, 30))
        s = rng.standard_normal(n) * rng.uniform(0.1, 10)
        y = int(rng.integers(n))
        worst = max(worst, abs(L.gce_loss(s, y, n - 1).item() - L.cross_entropy(s, y).item()))
    return worst


def _loc_perfect() -> float:
    rng = np.random.default_rng(3)
    worst = 0.0
    for k in (2, 3, 4, 7):
        targets = np.stack([2.0 * rcm_permutation(k, min(2, k - 1), rng).origin_of / (k - 1) - 1.0
                            for _ in range(3)])
        ident = np.broadcast_to(L._identity_targets(k), targets.shape)
        for mode in ("mse", "l1"):
            worst = max(worst, abs(L.dcl_loc_loss(ident, targets, targets, mode).item()))
    return worst


def _bank_replay() -> tuple[float, float]:
    """Largest gap to a closed-form EMA replay and largest norm deviation."""
    rng = np.random.default_rng(11)
    ids = np.arange(20)
    bank = L.MemoryBank(ids, 8, beta=0.7, seed=5)
    expected = {int(i): bank.get(i).copy() for i in ids}
    for _ in range(500):
        i = int(rng.integers(20))
        rep = rng.standard_normal(8)
        bank.update(i, rep)
        m = 0.7 * expected[i] + 0.3 * rep
        expected[i] = m / np.linalg.norm(m)
    err = max(np.abs(bank.get(i) - expected[int(i)]).max() for i in ids)
    norms = max(abs(np.linalg.norm(bank.get(i)) - 1) for i in ids)
    return float(err), float(norms)


def _db_identity() -> float:
    rng = np.random.default_rng(9)
    cams = Tensor(rng.standard_normal((2, 3, 4, 4)))
    out = []
    for cfg in (DbConfig(p_peak=0.0, p_patch=0.0), DbConfig(p_peak=1.0, p_patch=1.0, alpha=1.0)):
        res = diversify(cams, cfg, [stream(0, b) for b in range(2)], training=True)
        out.append(0.0 if np.array_equal(res.data, cams.data) else 1.0)
    out.append(0.0 if np.array_equal(apply_suppression(cams.data, np.ones((2, 3, 4, 4), np.uint8), 1.0),
                                     cams.data) else 1.0)
    return max(out)


def _nce_empty() -> float:
    rng = np.random.default_rng(2)
    return abs(L.nce_h(rng.standard_normal(4), rng.standard_normal(4), np.zeros((0, 4)), 0.07).item() - 1.0)


def loss_suite() -> list[Check]:
    with T.default_dtype(np.float64):
        return [
            _timed("loss", "gce_equals_ce_at_k_N-1", 1e-12, _gce_vs_ce),
            _timed("loss", "dcl_loc_zero_when_perfect", 1e-12, _loc_perfect),
            _timed("loss", "memory_bank_ema_closed_form", 1e-10, lambda: _bank_replay()[0]),
            _timed("loss", "memory_bank_unit_norm", 1e-6, lambda: _bank_replay()[1]),
            _timed("loss", "db_identity_when_disabled", 0.5, _db_identity),
            _timed("loss", "nce_without_negatives_is_one", 1e-12, _nce_empty),
        ]


SUITES = {"grad": grad_suite, "perm": perm_suite, "loss": loss_suite}


def run_suite(name: str) -> list[Check]:
    if name == "all":
        return [c for fn in SUITES.values() for c in fn()]
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}")
    return SUITES[name]()
