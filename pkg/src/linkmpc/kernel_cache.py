"""Sliding kernel window with O(m^2)-per-point inverse maintenance.

The cache holds the active training window (inputs, targets, step tags),
the regularized kernel matrix K = gram + noise_var*I, and its inverse.
Removing a row/column uses the Sherman-Morrison rank-one identity; adding
one uses the Schur complement of the bordered matrix, so a whole window
slide costs O(points * m^2) instead of a fresh O(m^3) factorization.

The noise ridge is folded into the stored matrix: posterior queries need
(gram + noise_var*I)^-1 and nothing else, so keeping the ridge inside K
means a single maintained inverse serves every consumer.

K and K_inv are staged inside preallocated capacity buffers ("the arena")
so the steady-state slide loop never allocates: removing the head row is
an offset shift and rank-one corrections are applied in place through a
reusable scratch block. Anything that rebinds K or K_inv (refresh, permute,
dense fallback, outside code) simply detaches the arena; the next
incremental update re-seats at the cost of one copy.
"""

from __future__ import annotations

import ctypes
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .gp import Hyperparameters, kernel_vector, gram

log = logging.getLogger(__name__)

# Schur complement below this rejects the point as a near-duplicate
SCHUR_MIN = 1e-12
# Sherman-Morrison denominator below this falls back to dense inversion
DENOM_MIN = 1e-12


class _CblasGer:
    """A += alpha * outer(x, y), in place, on a row-strided float64 block."""

    _ROW_MAJOR = 101

    def __init__(self, fn, int_type):
        fn.restype = None
        fn.argtypes = [int_type, int_type, int_type, ctypes.c_double,
                       ctypes.c_void_p, int_type, ctypes.c_void_p, int_type,
                       ctypes.c_void_p, int_type]
        self._fn = fn

    def __call__(self, a: np.ndarray, x: np.ndarray, y: np.ndarray,
                 alpha: float = 1.0) -> None:
        m, n = a.shape
        self._fn(self._ROW_MAJOR, m, n, alpha,
                 x.ctypes.data, 1, y.ctypes.data, 1,
                 a.ctypes.data, a.strides[0] // 8)


def _ger_usable(ger: _CblasGer) -> bool:
    base = np.arange(42.0).reshape(6, 7)
    a = base[1:4, 1:5]  # strided view, lda=7
    x = np.array([1.0, 2.0, 3.0])
    y = np.array([1.0, 10.0, 100.0, 1000.0])
    want = a + 0.5 * np.outer(x, y)
    ger(a, x, y, 0.5)
    return bool(np.array_equal(a, want))


def _find_inplace_ger() -> _CblasGer | None:
    """Bind cblas dger from the BLAS already loaded by numpy/scipy.

    numpy has no in-place rank-one update and scipy's wrapper copies any
    non-contiguous operand, which would put an extra full-matrix pass in
    the window-slide hot path. The cblas symbol takes an explicit leading
    dimension, so it updates an arena block directly. Symbol names carry
    the integer ABI (the 64_ suffix marks ILP64 builds); each candidate is
    verified on a small strided case before use. Returns None when no
    usable symbol exists; callers then use a two-pass numpy update.
    """
    paths = []
    try:
        with open("/proc/self/maps") as fh:
            paths.extend(line.split()[-1] for line in fh
                         if "openblas" in line.lower()
                         and line.split()[-1].startswith("/"))
    except OSError:
        pass
    for pkg in (np, __import__("scipy")):
        libdir = Path(pkg.__file__).parent.with_name(pkg.__name__ + ".libs")
        if libdir.is_dir():
            paths.extend(str(p) for p in sorted(libdir.glob("*openblas*")))
    symbols = (("scipy_cblas_dger64_", ctypes.c_int64),
               ("cblas_dger64_", ctypes.c_int64),
               ("scipy_cblas_dger", ctypes.c_int32),
               ("cblas_dger", ctypes.c_int32))
    seen = set()
    for path in dict.fromkeys(paths):
        try:
            lib = ctypes.CDLL(path)
        except OSError:
            continue
        for name, int_type in symbols:
            if (path, name) in seen or not hasattr(lib, name):
                continue
            seen.add((path, name))
            ger = _CblasGer(getattr(lib, name), int_type)
            if _ger_usable(ger):
                return ger
            log.warning("rejected %s from %s (self-test mismatch)", name, path)
    return None


_GER = _find_inplace_ger()


class DegenerateSamplingError(RuntimeError):
    """More than half of a slide's incoming points were near-duplicates."""


def _drop(M: np.ndarray, i: int) -> np.ndarray:
    # basic slicing keeps the head/tail removals (the hot path) at memcpy
    # speed; only interior removals pay for block reassembly
    m = M.shape[0]
    if i == 0:
        return M[1:, 1:].copy()
    if i == m - 1:
        return M[:-1, :-1].copy()
    out = np.empty((m - 1, m - 1))
    out[:i, :i] = M[:i, :i]
    out[:i, i:] = M[:i, i + 1:]
    out[i:, :i] = M[i + 1:, :i]
    out[i:, i:] = M[i + 1:, i + 1:]
    return out


def _drop_vec(v: np.ndarray, i: int) -> np.ndarray:
    if i == 0:
        return v[1:].copy()
    if i == v.shape[0] - 1:
        return v[:-1].copy()
    return np.concatenate([v[:i], v[i + 1:]])


@dataclass
class KernelCache:
    """Windowed (inputs, targets, K, K^-1) tuple plus bookkeeping counters."""

    hyper: Hyperparameters
    inputs: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    targets: np.ndarray = field(default_factory=lambda: np.zeros(0))
    step_tags: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    row_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    K: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    K_inv: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    prior_mean: float | None = None  # None -> mean of window targets
    refresh_every: int = 100  # dense re-inversion cadence, 0 disables
    slides: int = 0
    rejections: int = 0
    fallbacks: int = 0

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @classmethod
    def from_data(cls, inputs, targets, step_tags, hyper: Hyperparameters,
                  row_ids=None, **kw) -> "KernelCache":
        """Build a window densely (used at start-up and for refreshes)."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        if inputs.shape[0] == 0:
            return cls(hyper=hyper, **kw)
        targets = np.asarray(targets, dtype=float)
        step_tags = np.asarray(step_tags, dtype=int)
        if row_ids is None:
            row_ids = np.arange(inputs.shape[0])
        row_ids = np.asarray(row_ids, dtype=int)
        order = np.lexsort((row_ids, step_tags))
        inputs, targets = inputs[order], targets[order]
        step_tags, row_ids = step_tags[order], row_ids[order]
        K = gram(inputs, hyper) + hyper.noise_var * np.eye(inputs.shape[0])
        K_inv = _spd_inverse(K, hyper)
        return cls(hyper=hyper, inputs=inputs, targets=targets,
                   step_tags=step_tags, row_ids=row_ids, K=K, K_inv=K_inv, **kw)

    def prior_mean_value(self) -> float:
        if self.prior_mean is not None:
            return self.prior_mean
        return float(np.mean(self.targets)) if len(self) else 0.0

    def inverse_error(self) -> float:
        """Max-norm of K*K_inv - I over the full window (test/diagnostic use)."""
        m = len(self)
        if m == 0:
            return 0.0
        return float(np.max(np.abs(self.K @ self.K_inv - np.eye(m))))

    def _sampled_check(self) -> None:
        # cheap invariant check on a few rows; a hit means drift -> refresh
        m = len(self)
        if m == 0:
            return
        rows = sorted({0, m // 2, m - 1, self.slides % m})
        E = self.K[rows, :] @ self.K_inv
        E[range(len(rows)), rows] -= 1.0
        err = float(np.max(np.abs(E)))
        if err > 1e-6:
            log.warning("window inverse drifted (err=%.2e); dense refresh", err)
            self.refresh()

    def refresh(self) -> None:
        """Recompute K_inv densely from the stored K."""
        if len(self):
            self.K_inv = _spd_inverse(self.K, self.hyper)

    def permute(self, order: np.ndarray) -> None:
        """Apply one symmetric row/column permutation (exact, no roundoff)."""
        self.inputs = self.inputs[order]
        self.targets = self.targets[order]
        self.step_tags = self.step_tags[order]
        self.row_ids = self.row_ids[order]
        self.K = self.K[np.ix_(order, order)]
        self.K_inv = self.K_inv[np.ix_(order, order)]

    def sort_by_tag(self) -> None:
        order = np.lexsort((self.row_ids, self.step_tags))
        if not np.array_equal(order, np.arange(len(self))):
            self.permute(order)

    # -- arena staging ---------------------------------------------------

    def _seated(self) -> bool:
        v = getattr(self, "_views", None)
        return (v is not None
                and v[0] is self.K and v[1] is self.K_inv
                and v[2] is self.inputs and v[3] is self.targets
                and v[4] is self.step_tags and v[5] is self.row_ids)

    def _rebind(self) -> None:
        lo, hi = self._lo, self._lo + self._m
        self.K = self._bK[lo:hi, lo:hi]
        self.K_inv = self._bKi[lo:hi, lo:hi]
        self.inputs = self._bX[lo:hi]
        self.targets = self._bT[lo:hi]
        self.step_tags = self._bTag[lo:hi]
        self.row_ids = self._bId[lo:hi]
        self._views = (self.K, self.K_inv, self.inputs, self.targets,
                       self.step_tags, self.row_ids)

    def _alloc(self, cap: int, dim: int) -> None:
        self._bK = np.empty((cap, cap))
        self._bKi = np.empty((cap, cap))
        self._bX = np.empty((cap, dim))
        self._bT = np.empty(cap)
        self._bTag = np.empty(cap, dtype=int)
        self._bId = np.empty(cap, dtype=int)
        self._cap = cap

    def _grow(self, extra: int) -> None:
        # slide the live block back to offset 0 in fresh, larger buffers;
        # reads old buffers directly so stale attribute views do not matter
        m, lo = self._m, self._lo
        old = (self._bK, self._bKi, self._bX, self._bT, self._bTag, self._bId)
        self._alloc(max(64, 2 * m + 16, m + extra + 8), old[2].shape[1])
        self._bK[:m, :m] = old[0][lo:lo + m, lo:lo + m]
        self._bKi[:m, :m] = old[1][lo:lo + m, lo:lo + m]
        self._bX[:m] = old[2][lo:lo + m]
        self._bT[:m] = old[3][lo:lo + m]
        self._bTag[:m] = old[4][lo:lo + m]
        self._bId[:m] = old[5][lo:lo + m]
        self._lo = 0
        self._rebind()

    def _seat(self, extra: int = 8) -> None:
        """Stage the window inside arena buffers with append headroom.

        No-op while already seated with room for `extra` appends; otherwise
        imports the window into fresh capacity buffers with one copy.
        """
        if not self._seated():
            m = len(self)
            self._alloc(max(64, 2 * m + 16, m + extra + 8),
                        self.inputs.shape[1])
            self._bK[:m, :m] = self.K
            self._bKi[:m, :m] = self.K_inv
            self._bX[:m] = self.inputs
            self._bT[:m] = self.targets
            self._bTag[:m] = self.step_tags
            self._bId[:m] = self.row_ids
            self._lo, self._m = 0, m
            self._rebind()
        elif self._lo + self._m + extra > self._cap:
            self._grow(extra)

    def _rank_one(self, block: np.ndarray, x: np.ndarray, y: np.ndarray) -> None:
        # fused BLAS update when available, two numpy passes otherwise
        if block.shape[0] == 0:
            return
        if _GER is not None:
            _GER(block, x, y)
            return
        mm = block.shape[0]
        scr = getattr(self, "_scr", None)
        if scr is None or scr.shape[0] < mm:
            self._scr = scr = np.empty((self._cap, self._cap))
        sc = scr[:mm, :mm]
        np.multiply(x[:, None], y[None, :], out=sc)
        block += sc

    def _remove_head_arena(self) -> bool:
        """Shed the head row in place; False means the denominator is unusable
        and the caller must take the materialized dense fallback."""
        lo, m = self._lo, self._m
        hi = lo + m
        Ki = self._bKi[lo:hi, lo:hi]
        p = self._bK[lo, lo:hi].copy()
        p[0] -= 1.0
        u = Ki @ p
        # u[0] is row 0 of K_inv dotted with p, exactly the denominator term
        denom = 1.0 - float(u[0])
        if abs(denom) < DENOM_MIN:
            return False
        if m > 1:
            wk = Ki[0, 1:] / denom
            self._rank_one(self._bKi[lo + 1:hi, lo + 1:hi], u[1:], wk)
        self._lo = lo + 1
        self._m = m - 1
        return True

    def _append_arena(self, x: np.ndarray, target: float, step_tag: int,
                      row_id: int) -> bool:
        """Border the seated window with one point; no view rebinding.
        Caller guarantees one slot of headroom."""
        lo, m = self._lo, self._m
        hi = lo + m
        # zero-distance covariance is exactly signal_var
        diag = self.hyper.signal_var + self.hyper.noise_var
        kv = kernel_vector(self._bX[lo:hi], x, self.hyper)
        Ki = self._bKi[lo:hi, lo:hi]
        v = Ki @ kv
        s = diag - float(kv @ v)
        if s < SCHUR_MIN:
            self.rejections += 1
            return False
        s_inv = 1.0 / s
        bK, bKi = self._bK, self._bKi
        bK[lo:hi, hi] = kv
        bK[hi, lo:hi] = kv
        bK[hi, hi] = diag
        vs = v * s_inv
        self._rank_one(Ki, v, vs)
        bKi[lo:hi, hi] = -vs
        bKi[hi, lo:hi] = -vs
        bKi[hi, hi] = s_inv
        self._bX[hi] = x
        self._bT[hi] = target
        self._bTag[hi] = step_tag
        self._bId[hi] = row_id
        self._m = m + 1
        return True

    # -- incremental updates -------------------------------------------------

    def _drop_rows(self, i: int) -> None:
        if i == 0:
            sel = slice(1, None)
        elif i == len(self) - 1:
            sel = slice(None, -1)
        else:
            sel = np.arange(len(self)) != i
        self.inputs = self.inputs[sel].copy()
        self.targets = self.targets[sel].copy()
        self.step_tags = self.step_tags[sel].copy()
        self.row_ids = self.row_ids[sel].copy()

    def _remove_index(self, i: int) -> None:
        # K - p e_i^T has column i equal to e_i, so the inverse of the minor
        # falls out of one rank-one correction; K is stored bit-symmetric,
        # so row i serves as column i without a strided gather
        if i == 0:
            # hot path: the minors of K and of the row vectors are arena
            # subviews, so only K_inv pays for the rank-one correction
            self._seat()
            if self._remove_head_arena():
                self._rebind()
                return
            self.fallbacks += 1
            log.warning("rank-one removal denominator below %.0e; "
                        "dense fallback", DENOM_MIN)
            self.K = _drop(self.K, 0)
            self._drop_rows(0)
            self.refresh()
            return
        p = self.K[i].copy()
        p[i] -= 1.0
        w = self.K_inv[i, :]
        denom = 1.0 - float(w @ p)
        if abs(denom) < DENOM_MIN:
            self.fallbacks += 1
            log.warning("rank-one removal denominator %.2e; dense fallback", denom)
            self.K = _drop(self.K, i)
            self._drop_rows(i)
            self.refresh()
            return
        u = self.K_inv @ p
        uk = _drop_vec(u, i)
        wk = _drop_vec(w, i)
        wk /= denom
        A = _drop(self.K_inv, i)
        A += uk[:, None] * wk
        self.K_inv = A
        self.K = _drop(self.K, i)
        self._drop_rows(i)

    def _append(self, x: np.ndarray, target: float, step_tag: int,
                row_id: int) -> bool:
        x = np.asarray(x, dtype=float)
        if len(self) == 0:
            # zero-distance covariance is exactly signal_var
            diag = self.hyper.signal_var + self.hyper.noise_var
            self.inputs = x[None, :]
            self.targets = np.array([float(target)])
            self.step_tags = np.array([step_tag], dtype=int)
            self.row_ids = np.array([row_id], dtype=int)
            self.K = np.array([[diag]])
            self.K_inv = np.array([[1.0 / diag]])
            return True
        self._seat()
        if self._append_arena(x, float(target), step_tag, row_id):
            self._rebind()
            return True
        return False


def _spd_inverse(K: np.ndarray, hyper: Hyperparameters) -> np.ndarray:
    """Cholesky inverse with escalating jitter retries."""
    eye = np.eye(K.shape[0])
    jitter = 1e-8 * hyper.signal_var
    A = K
    for attempt in range(4):
        try:
            return cho_solve(cho_factor(A, lower=True), eye)
        except np.linalg.LinAlgError:
            log.warning("Cholesky failed; retry with jitter %.1e", jitter)
            A = K + jitter * eye
            jitter *= 10.0
    raise np.linalg.LinAlgError("kernel matrix not invertible after jitter retries")


def remove_first(c: KernelCache) -> KernelCache:
    """Drop the window's first row/column, updating the inverse in O(m^2)."""
    if len(c) == 0:
        raise ValueError("cannot remove from an empty window")
    c._remove_index(0)
    c._sampled_check()
    return c


def append_point(c: KernelCache, x, target: float, step_tag: int | None = None,
                 row_id: int = -1) -> KernelCache:
    """Border the window with one new point in O(m^2).

    Near-duplicates (Schur complement under threshold) are rejected and
    counted on the cache; the window is then returned unchanged.
    """
    if step_tag is None:
        step_tag = int(c.step_tags.max()) if len(c) else 0
    c._append(x, target, int(step_tag), row_id)
    c._sampled_check()
    return c


def slide_window(c: KernelCache, stale_tag: int,
                 new_points: list[tuple[np.ndarray, float]],
                 new_tag: int | None = None) -> KernelCache:
    """Advance the window one step: shed one tag's rows, absorb new ones.

    Rows tagged `stale_tag` sit at the head (tags are kept sorted) and are
    removed one by one; `new_points` are appended under `new_tag` (defaults
    to one past the current newest tag). Raises DegenerateSamplingError when
    more than half of the incoming points are rejected as duplicates.
    """
    c._seat(extra=len(new_points) + 8)
    while c._m and c._bTag[c._lo] == stale_tag:
        if not c._remove_head_arena():
            # rare dense fallback; rebuilds the window, so seat again
            c._rebind()
            c._remove_index(0)
            c._seat(extra=len(new_points) + 8)
    c._rebind()
    if new_tag is None:
        new_tag = int(c.step_tags.max()) + 1 if len(c) else stale_tag + 1
    rejected = 0
    tag = int(new_tag)
    for x, y in new_points:
        if not c._append_arena(np.asarray(x, dtype=float), float(y), tag, -1):
            rejected += 1
    c._rebind()
    c.slides += 1
    if c.refresh_every and c.slides % c.refresh_every == 0:
        c.refresh()
    c._sampled_check()
    if new_points and rejected > len(new_points) / 2:
        raise DegenerateSamplingError(
            f"{rejected}/{len(new_points)} incoming points rejected as duplicates"
        )
    return c
