"""Recurrent cells: bistable memory units, LRU and minGRU, with scans.

Step functions operate on rank-2 tensors (batch x feature); a single
vector is passed as a 1-row matrix.  All four cells are affine in the
hidden state given the inputs, so sequences can be evaluated either by
sequential stepping or by composing (a, b) scan elements in parallel.
For the bistable cells the scan elements take gate values in {0, 1} and
set values in {0, alpha}, which keeps every float operation exact; the
two evaluation orders therefore agree bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, constant, leaf

__all__ = [
    "FqBmruParams",
    "BmruParams",
    "LruParams",
    "MinGruParams",
    "AffineScanElement",
    "fq_bmru_step",
    "fq_bmru_step_from_candidate",
    "bmru_step",
    "lru_step",
    "min_gru_step",
    "scan_sequential",
    "scan_parallel",
    "init_fq_bmru",
    "init_bmru",
    "init_lru",
    "init_min_gru",
    "TrainableFqBmru",
    "TrainableBmru",
    "TrainableLru",
    "TrainableMinGru",
    "CELL_KINDS",
    "scan_prefixes",
    "ScanUnsupportedError",
]

DEFAULT_SCAN_BLOCK = 64


class ScanUnsupportedError(ValueError):
    """Requested scan form is not available for the given configuration."""


def _as2d(x) -> Tensor:
    t = x if isinstance(x, Tensor) else constant(x)
    if t.data.ndim == 1:
        t = constant(t.data.reshape(1, -1))
    if t.data.ndim != 2:
        raise ad.ShapeError(f"expected a vector or matrix, got shape {t.shape}")
    return t


# ---------------------------------------------------------------------------
# parameter records (effective values; positivity already applied)
# ---------------------------------------------------------------------------


@dataclass
class FqBmruParams:
    """First-quadrant bistable cell: reset below beta_lo, set above beta_hi."""

    w_x: Tensor      # (n, d) input map
    b_x: Tensor      # (d,)
    beta_lo: Tensor  # (d,) > 0
    delta: Tensor    # (d,) > 0; beta_hi = beta_lo + delta
    alpha: Tensor    # (d,) > 0

    @property
    def beta_hi(self) -> Tensor:
        return ad.add(self.beta_lo, self.delta)

    @property
    def d(self) -> int:
        return self.w_x.shape[1]

    @property
    def n_in(self) -> int:
        return self.w_x.shape[0]

    def validate(self) -> None:
        for name in ("beta_lo", "delta", "alpha"):
            if np.any(getattr(self, name).data <= 0):
                raise ValueError(f"{name} must be strictly positive")


@dataclass
class BmruParams:
    """Original bipolar bistable cell with input-dependent thresholds."""

    w_x: Tensor     # (n, d)
    b_x: Tensor     # (d,)
    w_beta: Tensor  # (n, d)
    b_beta: Tensor  # (d,)
    alpha: Tensor   # (d,)

    @property
    def d(self) -> int:
        return self.w_x.shape[1]


@dataclass
class LruParams:
    """Diagonal complex linear recurrence with input normalization."""

    nu: Tensor      # (d,) magnitude parameter, |lambda| = exp(-exp(nu))
    theta: Tensor   # (d,) phase parameter, angle = exp(theta)
    b_re: Tensor    # (m, d)
    b_im: Tensor    # (m, d)
    c_re: Tensor    # (d, d_out)
    c_im: Tensor    # (d, d_out)
    d_mat: Tensor   # (m, d_out)
    lambda_override: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def d(self) -> int:
        return self.b_re.shape[1]

    def lambda_parts(self) -> tuple[Tensor, Tensor]:
        if self.lambda_override is not None:
            lre, lim = self.lambda_override
            return constant(lre), constant(lim)
        mag = ad.exp(ad.neg(ad.exp(self.nu)))
        ang = ad.exp(self.theta)
        return ad.mul(mag, ad.cos(ang)), ad.mul(mag, ad.sin(ang))

    def gamma(self) -> Tensor:
        lre, lim = self.lambda_parts()
        mag2 = ad.add(ad.mul(lre, lre), ad.mul(lim, lim))
        return ad.sqrt(ad.add(ad.neg(mag2), 1.0))


@dataclass
class MinGruParams:
    """Minimal GRU: single input-driven update gate, no reset gate."""

    w_z: Tensor  # (m, d)
    b_z: Tensor  # (d,)
    w_h: Tensor  # (m, d)
    b_h: Tensor  # (d,)

    @property
    def d(self) -> int:
        return self.w_z.shape[1]


# ---------------------------------------------------------------------------
# scan element
# ---------------------------------------------------------------------------


@dataclass
class AffineScanElement:
    """One step of h_t = a * h_{t-1} + b as a composable pair."""

    a: Tensor
    b: Tensor

    def __post_init__(self):
        if not isinstance(self.a, Tensor):
            self.a = constant(self.a)
        if not isinstance(self.b, Tensor):
            self.b = constant(self.b)

    def compose(self, later: "AffineScanElement") -> "AffineScanElement":
        """Apply self first, then `later`: (a, b) o (a', b') = (a*a', a'*b + b')."""
        return AffineScanElement(
            ad.mul(self.a, later.a),
            ad.add(ad.mul(later.a, self.b), later.b),
        )

    @staticmethod
    def identity(like: "AffineScanElement") -> "AffineScanElement":
        return AffineScanElement(
            constant(np.ones_like(like.a.data)),
            constant(np.zeros_like(like.b.data)),
        )

    def apply(self, h0: Tensor) -> Tensor:
        return ad.add(ad.mul(self.a, h0), self.b)


class _ComplexElement:
    """Affine element over complex vectors stored as (re, im) tensor pairs."""

    __slots__ = ("a_re", "a_im", "b_re", "b_im")

    def __init__(self, a_re, a_im, b_re, b_im):
        self.a_re, self.a_im, self.b_re, self.b_im = a_re, a_im, b_re, b_im

    @staticmethod
    def _cmul(xr, xi, yr, yi):
        return (
            ad.sub(ad.mul(xr, yr), ad.mul(xi, yi)),
            ad.add(ad.mul(xr, yi), ad.mul(xi, yr)),
        )

    def compose(self, later: "_ComplexElement") -> "_ComplexElement":
        ar, ai = self._cmul(self.a_re, self.a_im, later.a_re, later.a_im)
        tr, ti = self._cmul(later.a_re, later.a_im, self.b_re, self.b_im)
        return _ComplexElement(ar, ai, ad.add(tr, later.b_re), ad.add(ti, later.b_im))

    @staticmethod
    def identity(like: "_ComplexElement") -> "_ComplexElement":
        one = constant(np.ones_like(like.a_re.data))
        zero = constant(np.zeros_like(like.b_re.data))
        return _ComplexElement(one, constant(np.zeros_like(like.a_re.data)), zero, constant(np.zeros_like(like.b_re.data)))

    def apply(self, h0_re: Tensor, h0_im: Tensor) -> tuple[Tensor, Tensor]:
        xr, xi = self._cmul(self.a_re, self.a_im, h0_re, h0_im)
        return ad.add(xr, self.b_re), ad.add(xi, self.b_im)


def scan_prefixes(elements: list, block_size: int = DEFAULT_SCAN_BLOCK):
    """Inclusive prefix compositions via a blocked up/down-sweep.

    Elements are composed sequentially within blocks; block aggregates go
    through a Blelloch-style exclusive scan, and the resulting offsets are
    composed back onto the within-block prefixes.  Composition order is
    fixed, so results are reproducible run to run.
    """
    n = len(elements)
    if n == 0:
        return []
    if block_size < 1:
        raise ValueError("block_size must be >= 1")

    prefixes = [None] * n
    aggregates = []
    for start in range(0, n, block_size):
        running = elements[start]
        prefixes[start] = running
        for i in range(start + 1, min(start + block_size, n)):
            running = running.compose(elements[i])
            prefixes[i] = running
        aggregates.append(running)

    n_blocks = len(aggregates)
    if n_blocks > 1:
        offsets = _blelloch_exclusive(aggregates)
        for bi in range(1, n_blocks):
            start = bi * block_size
            for i in range(start, min(start + block_size, n)):
                prefixes[i] = offsets[bi].compose(prefixes[i])
    return prefixes


def _blelloch_exclusive(items: list) -> list:
    """Exclusive scan (identity first) with an up-sweep then down-sweep."""
    ident = items[0].identity(items[0])
    n = len(items)
    size = 1
    while size < n:
        size *= 2
    tree = list(items) + [ident] * (size - n)

    depth = size.bit_length() - 1
    for d in range(depth):
        step = 1 << (d + 1)
        half = 1 << d
        for i in range(0, size, step):
            tree[i + step - 1] = tree[i + half - 1].compose(tree[i + step - 1])

    tree[size - 1] = ident
    for d in range(depth - 1, -1, -1):
        step = 1 << (d + 1)
        half = 1 << d
        for i in range(0, size, step):
            left = tree[i + half - 1]
            incoming = tree[i + step - 1]
            tree[i + half - 1] = incoming
            tree[i + step - 1] = incoming.compose(left)
    return tree[:n]


# ---------------------------------------------------------------------------
# step functions
# ---------------------------------------------------------------------------


def _step_fn(smooth: bool):
    return ad.smooth_heaviside if smooth else ad.heaviside


def fq_bmru_gates(p: FqBmruParams, candidate: Tensor, *, smooth: bool = False):
    """Window comparator gates: reset gate below beta_lo, set gate above beta_hi."""
    step = _step_fn(smooth)
    z_lo = step(ad.add(ad.neg(candidate), p.beta_lo))
    z_hi = step(ad.sub(candidate, p.beta_hi))
    return z_lo, z_hi


def fq_bmru_candidate(p: FqBmruParams, x_t, *, dropout_rate: float = 0.0,
                      rng: np.random.Generator | None = None) -> Tensor:
    x_t = _as2d(x_t)
    hhat = ad.relu(ad.add(ad.matmul(x_t, p.w_x), p.b_x))
    if dropout_rate > 0.0:
        hhat = ad.dropout(hhat, dropout_rate, rng)
    return hhat


def fq_bmru_step_from_candidate(p: FqBmruParams, candidate, h_prev, eps: float = 0.0,
                                *, smooth: bool = False) -> Tensor:
    candidate, h_prev = _as2d(candidate), _as2d(h_prev)
    _check_fq_preconditions(h_prev, eps)
    z_lo, z_hi = fq_bmru_gates(p, candidate, smooth=smooth)
    hold = ad.mul(ad.sub(1.0, z_lo), ad.sub(1.0, z_hi))
    h = ad.add(ad.mul(z_hi, p.alpha), ad.mul(hold, h_prev))
    if eps != 0.0:
        h = ad.add(h, ad.mul(h_prev, constant(float(eps))))
    return h


def _check_fq_preconditions(h_prev: Tensor, eps: float) -> None:
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    if eps == 0.0 and np.any(h_prev.data < 0):
        raise ValueError("h_prev must be non-negative at eps=0")


def fq_bmru_step(p: FqBmruParams, x_t, h_prev, eps: float = 0.0, *,
                 dropout_rate: float = 0.0, rng: np.random.Generator | None = None,
                 smooth: bool = False) -> tuple[Tensor, Tensor]:
    """One first-quadrant step; returns (new state, candidate)."""
    hhat = fq_bmru_candidate(p, x_t, dropout_rate=dropout_rate, rng=rng)
    h = fq_bmru_step_from_candidate(p, hhat, h_prev, eps, smooth=smooth)
    return h, hhat


def bmru_step(p: BmruParams, x_t, h_prev, *, eps: float = 0.0,
              unipolar: bool = False, smooth: bool = False) -> Tensor:
    """Bipolar bistable step; `unipolar` maps outputs {-a,+a} -> {0,a}."""
    x_t, h_prev = _as2d(x_t), _as2d(h_prev)
    step = _step_fn(smooth)
    hhat = ad.add(ad.matmul(x_t, p.w_x), p.b_x)
    beta = ad.absolute(ad.add(ad.matmul(x_t, p.w_beta), p.b_beta))
    z = step(ad.sub(ad.absolute(hhat), beta))
    s = ad.sign(hhat)
    if unipolar:
        s = ad.mul(ad.add(s, 1.0), constant(0.5))
    h = ad.add(ad.mul(ad.mul(z, s), p.alpha), ad.mul(ad.sub(1.0, z), h_prev))
    if eps != 0.0:
        h = ad.add(h, ad.mul(h_prev, constant(float(eps))))
    return h


def lru_step(p: LruParams, u_t, x_prev: tuple) -> tuple[tuple[Tensor, Tensor], Tensor]:
    """One linear-recurrence step on the complex state (re, im) pair."""
    u_t = _as2d(u_t)
    xr, xi = (_as2d(x_prev[0]), _as2d(x_prev[1]))
    lre, lim = p.lambda_parts()
    gam = p.gamma()
    bu_re = ad.mul(ad.matmul(u_t, p.b_re), gam)
    bu_im = ad.mul(ad.matmul(u_t, p.b_im), gam)
    nxr = ad.add(ad.sub(ad.mul(xr, lre), ad.mul(xi, lim)), bu_re)
    nxi = ad.add(ad.add(ad.mul(xr, lim), ad.mul(xi, lre)), bu_im)
    y = ad.add(ad.sub(ad.matmul(nxr, p.c_re), ad.matmul(nxi, p.c_im)),
               ad.matmul(u_t, p.d_mat))
    return (nxr, nxi), y


def min_gru_step(p: MinGruParams, x_t, h_prev) -> Tensor:
    x_t, h_prev = _as2d(x_t), _as2d(h_prev)
    z = ad.sigmoid(ad.add(ad.matmul(x_t, p.w_z), p.b_z))
    htilde = ad.add(ad.matmul(x_t, p.w_h), p.b_h)
    return ad.add(ad.mul(ad.sub(1.0, z), h_prev), ad.mul(z, htilde))


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _uniform(rng, lo, hi, shape):
    return rng.uniform(lo, hi, size=shape)


def _uniform_pos_unit(rng, shape):
    # uniform on (0, 1]: flip the half-open side of rng.uniform
    return 1.0 - rng.uniform(0.0, 1.0, size=shape)


def init_fq_bmru(d: int, n: int, rng: np.random.Generator) -> FqBmruParams:
    """Weights uniform within +-1/sqrt(n); positives uniform on (0, 1]."""
    if d < 1 or n < 1:
        raise ValueError("dimensions must be >= 1")
    s = 1.0 / math.sqrt(n)
    return FqBmruParams(
        w_x=constant(_uniform(rng, -s, s, (n, d))),
        b_x=constant(_uniform(rng, -s, s, (d,))),
        beta_lo=constant(_uniform_pos_unit(rng, (d,))),
        delta=constant(_uniform_pos_unit(rng, (d,))),
        alpha=constant(_uniform_pos_unit(rng, (d,))),
    )


def init_bmru(d: int, n: int, rng: np.random.Generator) -> BmruParams:
    s = 1.0 / math.sqrt(n)
    return BmruParams(
        w_x=constant(_uniform(rng, -s, s, (n, d))),
        b_x=constant(_uniform(rng, -s, s, (d,))),
        w_beta=constant(_uniform(rng, -s, s, (n, d))),
        b_beta=constant(_uniform(rng, -s, s, (d,))),
        alpha=constant(_uniform_pos_unit(rng, (d,))),
    )


def init_lru(d: int, m: int, rng: np.random.Generator, d_out: int | None = None,
             r_min: float = 0.9, r_max: float = 0.999) -> LruParams:
    """Eigenvalue magnitudes uniform in [r_min, r_max], phases in [0, 2pi)."""
    d_out = d if d_out is None else d_out
    mag = rng.uniform(r_min, r_max, size=d)
    phase = rng.uniform(1e-4, 2.0 * math.pi, size=d)
    sw = 1.0 / math.sqrt(m)
    sc = 1.0 / math.sqrt(d)
    return LruParams(
        nu=constant(np.log(-np.log(mag))),
        theta=constant(np.log(phase)),
        b_re=constant(_uniform(rng, -sw, sw, (m, d))),
        b_im=constant(_uniform(rng, -sw, sw, (m, d))),
        c_re=constant(_uniform(rng, -sc, sc, (d, d_out))),
        c_im=constant(_uniform(rng, -sc, sc, (d, d_out))),
        d_mat=constant(_uniform(rng, -sw, sw, (m, d_out))),
    )


def init_min_gru(d: int, m: int, rng: np.random.Generator) -> MinGruParams:
    s = 1.0 / math.sqrt(m)
    return MinGruParams(
        w_z=constant(_uniform(rng, -s, s, (m, d))),
        b_z=constant(np.zeros(d)),
        w_h=constant(_uniform(rng, -s, s, (m, d))),
        b_h=constant(np.zeros(d)),
    )


# ---------------------------------------------------------------------------
# trainable containers: raw leaves plus a materialize() view
# ---------------------------------------------------------------------------


class TrainableFqBmru:
    """Raw leaves for an FQ cell; positives pass through softplus at read time."""

    def __init__(self, w_x, b_x, raw_beta_lo, raw_delta, raw_alpha):
        self.w_x = leaf(w_x, "w_x")
        self.b_x = leaf(b_x, "b_x")
        self.raw_beta_lo = leaf(raw_beta_lo, "raw_beta_lo")
        self.raw_delta = leaf(raw_delta, "raw_delta")
        self.raw_alpha = leaf(raw_alpha, "raw_alpha")

    @classmethod
    def init(cls, d: int, n: int, rng: np.random.Generator) -> "TrainableFqBmru":
        return cls.from_params(init_fq_bmru(d, n, rng))

    @classmethod
    def from_params(cls, p: FqBmruParams) -> "TrainableFqBmru":
        inv = ad.softplus_inverse_np
        return cls(p.w_x.data, p.b_x.data, inv(p.beta_lo.data),
                   inv(p.delta.data), inv(p.alpha.data))

    def leaves(self) -> list[tuple[str, Tensor]]:
        return [("w_x", self.w_x), ("b_x", self.b_x),
                ("raw_beta_lo", self.raw_beta_lo),
                ("raw_delta", self.raw_delta), ("raw_alpha", self.raw_alpha)]

    def materialize(self) -> FqBmruParams:
        return FqBmruParams(
            w_x=self.w_x,
            b_x=self.b_x,
            beta_lo=ad.softplus(self.raw_beta_lo),
            delta=ad.softplus(self.raw_delta),
            alpha=ad.softplus(self.raw_alpha),
        )

    def effective(self) -> FqBmruParams:
        """Constant snapshot of the constrained parameters."""
        p = self.materialize()
        return FqBmruParams(
            w_x=constant(p.w_x.data.copy()),
            b_x=constant(p.b_x.data.copy()),
            beta_lo=constant(p.beta_lo.data.copy()),
            delta=constant(p.delta.data.copy()),
            alpha=constant(p.alpha.data.copy()),
        )


class TrainableBmru:
    def __init__(self, p: BmruParams):
        self.w_x = leaf(p.w_x.data, "w_x")
        self.b_x = leaf(p.b_x.data, "b_x")
        self.w_beta = leaf(p.w_beta.data, "w_beta")
        self.b_beta = leaf(p.b_beta.data, "b_beta")
        self.alpha = leaf(p.alpha.data, "alpha")

    @classmethod
    def init(cls, d, n, rng):
        return cls(init_bmru(d, n, rng))

    def leaves(self):
        return [("w_x", self.w_x), ("b_x", self.b_x), ("w_beta", self.w_beta),
                ("b_beta", self.b_beta), ("alpha", self.alpha)]

    def materialize(self) -> BmruParams:
        return BmruParams(self.w_x, self.b_x, self.w_beta, self.b_beta, self.alpha)

    def effective(self) -> BmruParams:
        return BmruParams(*(constant(t.data.copy()) for _, t in self.leaves()))


class TrainableLru:
    def __init__(self, p: LruParams):
        self.nu = leaf(p.nu.data, "nu")
        self.theta = leaf(p.theta.data, "theta")
        self.b_re = leaf(p.b_re.data, "b_re")
        self.b_im = leaf(p.b_im.data, "b_im")
        self.c_re = leaf(p.c_re.data, "c_re")
        self.c_im = leaf(p.c_im.data, "c_im")
        self.d_mat = leaf(p.d_mat.data, "d_mat")

    @classmethod
    def init(cls, d, m, rng, d_out=None):
        return cls(init_lru(d, m, rng, d_out))

    def leaves(self):
        return [("nu", self.nu), ("theta", self.theta), ("b_re", self.b_re),
                ("b_im", self.b_im), ("c_re", self.c_re), ("c_im", self.c_im),
                ("d_mat", self.d_mat)]

    def materialize(self) -> LruParams:
        return LruParams(self.nu, self.theta, self.b_re, self.b_im,
                         self.c_re, self.c_im, self.d_mat)

    def effective(self) -> LruParams:
        return LruParams(*(constant(t.data.copy()) for _, t in self.leaves()))


class TrainableMinGru:
    def __init__(self, p: MinGruParams):
        self.w_z = leaf(p.w_z.data, "w_z")
        self.b_z = leaf(p.b_z.data, "b_z")
        self.w_h = leaf(p.w_h.data, "w_h")
        self.b_h = leaf(p.b_h.data, "b_h")

    @classmethod
    def init(cls, d, m, rng):
        return cls(init_min_gru(d, m, rng))

    def leaves(self):
        return [("w_z", self.w_z), ("b_z", self.b_z),
                ("w_h", self.w_h), ("b_h", self.b_h)]

    def materialize(self) -> MinGruParams:
        return MinGruParams(self.w_z, self.b_z, self.w_h, self.b_h)

    def effective(self) -> MinGruParams:
        return MinGruParams(*(constant(t.data.copy()) for _, t in self.leaves()))


# ---------------------------------------------------------------------------
# cell drivers used by the scans (and by the backbones)
# ---------------------------------------------------------------------------


class _FqBmruCell:
    kind = "fq-bmru"
    bistable = True
    complex_state = False

    def init_params(self, d, n, rng):
        return init_fq_bmru(d, n, rng)

    def init_state(self, p, batch: int) -> Tensor:
        return constant(np.zeros((batch, p.d)))

    def step(self, p, x_t, h_prev, eps=0.0, **kw):
        h, _ = fq_bmru_step(p, x_t, h_prev, eps, **kw)
        return h

    def element(self, p, x_t, *, smooth=False, dropout_rate=0.0, rng=None) -> AffineScanElement:
        hhat = fq_bmru_candidate(p, x_t, dropout_rate=dropout_rate, rng=rng)
        return self.element_from_candidate(p, hhat, smooth=smooth)

    def element_from_candidate(self, p, candidate, *, smooth=False) -> AffineScanElement:
        z_lo, z_hi = fq_bmru_gates(p, candidate, smooth=smooth)
        a = ad.mul(ad.sub(1.0, z_lo), ad.sub(1.0, z_hi))
        b = ad.mul(z_hi, p.alpha)
        return AffineScanElement(a, b)


class _BmruCell:
    kind = "bmru"
    bistable = True
    complex_state = False

    def init_params(self, d, n, rng):
        return init_bmru(d, n, rng)

    def init_state(self, p, batch: int) -> Tensor:
        # hardware-style reset has no bipolar analogue; start at -alpha
        return constant(np.tile(-p.alpha.data, (batch, 1)))

    def step(self, p, x_t, h_prev, eps=0.0, **kw):
        return bmru_step(p, x_t, h_prev, eps=eps, **kw)

    def element(self, p, x_t, *, smooth=False, unipolar=False, **_) -> AffineScanElement:
        x_t = _as2d(x_t)
        step = _step_fn(smooth)
        hhat = ad.add(ad.matmul(x_t, p.w_x), p.b_x)
        beta = ad.absolute(ad.add(ad.matmul(x_t, p.w_beta), p.b_beta))
        z = step(ad.sub(ad.absolute(hhat), beta))
        s = ad.sign(hhat)
        if unipolar:
            s = ad.mul(ad.add(s, 1.0), constant(0.5))
        a = ad.sub(1.0, z)
        b = ad.mul(ad.mul(z, s), p.alpha)
        return AffineScanElement(a, b)


class _LruCell:
    kind = "lru"
    bistable = False
    complex_state = True

    def init_params(self, d, n, rng):
        return init_lru(d, n, rng)

    def init_state(self, p, batch: int):
        z = np.zeros((batch, p.d))
        return (constant(z), constant(z.copy()))

    def step(self, p, u_t, x_prev, eps=0.0, **kw):
        if eps != 0.0:
            raise ValueError("eps annealing applies only to bistable cells")
        x_t, _ = lru_step(p, u_t, x_prev)
        return x_t

    def element(self, p, u_t, **_) -> _ComplexElement:
        u_t = _as2d(u_t)
        lre, lim = p.lambda_parts()
        gam = p.gamma()
        batch = u_t.shape[0]
        ones = constant(np.ones((batch, p.d)))
        return _ComplexElement(
            ad.mul(ones, lre),
            ad.mul(ones, lim),
            ad.mul(ad.matmul(u_t, p.b_re), gam),
            ad.mul(ad.matmul(u_t, p.b_im), gam),
        )

    def output(self, p, x_t, u_t) -> Tensor:
        xr, xi = x_t
        return ad.add(ad.sub(ad.matmul(xr, p.c_re), ad.matmul(xi, p.c_im)),
                      ad.matmul(_as2d(u_t), p.d_mat))


class _MinGruCell:
    kind = "mingru"
    bistable = False
    complex_state = False

    def init_params(self, d, n, rng):
        return init_min_gru(d, n, rng)

    def init_state(self, p, batch: int) -> Tensor:
        return constant(np.zeros((batch, p.d)))

    def step(self, p, x_t, h_prev, eps=0.0, **kw):
        if eps != 0.0:
            raise ValueError("eps annealing applies only to bistable cells")
        return min_gru_step(p, x_t, h_prev)

    def element(self, p, x_t, **_) -> AffineScanElement:
        x_t = _as2d(x_t)
        z = ad.sigmoid(ad.add(ad.matmul(x_t, p.w_z), p.b_z))
        htilde = ad.add(ad.matmul(x_t, p.w_h), p.b_h)
        return AffineScanElement(ad.sub(1.0, z), ad.mul(z, htilde))


CELL_KINDS = {
    "fq-bmru": _FqBmruCell(),
    "bmru": _BmruCell(),
    "lru": _LruCell(),
    "mingru": _MinGruCell(),
}


def _resolve_cell(cell):
    if isinstance(cell, str):
        try:
            return CELL_KINDS[cell]
        except KeyError:
            raise ValueError(f"unknown cell kind {cell!r}") from None
    return cell


def _input_steps(inputs) -> tuple[list, bool]:
    """Normalize inputs to per-timestep (B, n) tensors; flag single sequences."""
    if isinstance(inputs, (list, tuple)):
        return [_as2d(x) for x in inputs], False
    arr = np.asarray(inputs, dtype=np.float64)
    if arr.ndim == 2:          # (T, n) single sequence
        return [constant(arr[t : t + 1]) for t in range(arr.shape[0])], True
    if arr.ndim == 3:          # (T, B, n)
        return [constant(arr[t]) for t in range(arr.shape[0])], False
    raise ad.ShapeError(f"inputs must be (T, n) or (T, B, n), got {arr.shape}")


def _states_to_array(states, single: bool, complex_state: bool):
    if complex_state:
        out = np.stack([s[0].data + 1j * s[1].data for s in states])
    else:
        out = np.stack([s.data for s in states])
    return out[:, 0, :] if single else out


def scan_sequential(cell, params, inputs, h0=None, eps: float = 0.0, **step_kw):
    """states[t] = step(params, inputs[t], states[t-1]); returns (T, [B,] d)."""
    cellobj = _resolve_cell(cell)
    steps, single = _input_steps(inputs)
    batch = steps[0].shape[0]
    state = cellobj.init_state(params, batch) if h0 is None else _promote_state(cellobj, h0, batch)
    states = []
    for x_t in steps:
        state = cellobj.step(params, x_t, state, eps, **step_kw)
        states.append(state)
    return _states_to_array(states, single, cellobj.complex_state)


def scan_parallel(cell, params, inputs, h0=None, eps: float = 0.0,
                  block_size: int = DEFAULT_SCAN_BLOCK, **elem_kw):
    """Associative-scan evaluation; identical to scan_sequential at eps=0."""
    if eps != 0.0:
        raise ScanUnsupportedError(
            "parallel scan supports eps=0 only; fall back to scan_sequential")
    cellobj = _resolve_cell(cell)
    steps, single = _input_steps(inputs)
    batch = steps[0].shape[0]
    state0 = cellobj.init_state(params, batch) if h0 is None else _promote_state(cellobj, h0, batch)
    elements = [cellobj.element(params, x_t, **elem_kw) for x_t in steps]
    prefixes = scan_prefixes(elements, block_size)
    if cellobj.complex_state:
        states = [pre.apply(state0[0], state0[1]) for pre in prefixes]
    else:
        states = [pre.apply(state0) for pre in prefixes]
    return _states_to_array(states, single, cellobj.complex_state)


def _promote_state(cellobj, h0, batch: int):
    if cellobj.complex_state:
        if isinstance(h0, tuple):
            return (_tile_rows(h0[0], batch), _tile_rows(h0[1], batch))
        arr = np.asarray(h0)
        if np.iscomplexobj(arr):
            return (_tile_rows(arr.real, batch), _tile_rows(arr.imag, batch))
        return (_tile_rows(arr, batch), constant(np.zeros((batch, arr.shape[-1]))))
    return _tile_rows(h0, batch)


def _tile_rows(v, batch: int) -> Tensor:
    # 1-D states are tiled as constants; pass a (batch, d) tensor to keep
    # a gradient path into the initial state
    t = v if isinstance(v, Tensor) else constant(np.asarray(v, dtype=np.float64))
    if t.data.ndim == 1:
        return constant(np.tile(t.data, (batch, 1)))
    if t.shape[0] == batch:
        return t
    if t.shape[0] == 1:
        return constant(np.tile(t.data, (batch, 1)))
    raise ad.ShapeError(f"initial state batch {t.shape[0]} does not match inputs batch {batch}")
