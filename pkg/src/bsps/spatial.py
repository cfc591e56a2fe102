"""Sites, exponential correlation, factorizations and nearest-neighbor GPs."""
from dataclasses import dataclass, field
import logging

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from . import _kernels
from .errors import NotPositiveDefinite

logger = logging.getLogger(__name__)

JITTER_START = 1e-8
JITTER_MAX = 1e-4
DEDUP_TOL = 1e-9
DEDUP_VAR = 1e-3


class SiteSet:
    """Ordered 2-D locations.

    Sites closer than ``DEDUP_TOL`` to an earlier site are nudged by
    N(0, 1e-3 I) noise (repeated until all sites are distinct). Pass ``rng``
    or ``seed`` to make the nudge reproducible.
    """

    def __init__(self, coords, rng=None, seed=0):
        coords = np.array(coords, dtype=float)
        if coords.ndim == 1:
            coords = coords.reshape(1, -1)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"coords must have shape (n, 2), got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("site coordinates must be finite")
        dupes = _duplicate_rows(coords)
        if dupes.size:
            rng = np.random.default_rng(seed) if rng is None else rng
            while dupes.size:
                logger.info("jittering %d duplicate site(s)", dupes.size)
                coords[dupes] += rng.normal(0.0, np.sqrt(DEDUP_VAR), size=(dupes.size, 2))
                dupes = _duplicate_rows(coords)
        coords.setflags(write=False)
        self.coords = coords

    @property
    def n(self):
        return self.coords.shape[0]

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"SiteSet(n={self.n})"


def _duplicate_rows(coords):
    if len(coords) < 2:
        return np.empty(0, dtype=int)
    pairs = cKDTree(coords).query_pairs(DEDUP_TOL, output_type="ndarray")
    if len(pairs) == 0:
        return np.empty(0, dtype=int)
    return np.unique(pairs.max(axis=1))


def _as_coords(sites):
    if isinstance(sites, SiteSet):
        return sites.coords
    arr = np.asarray(sites, dtype=float)
    return arr.reshape(1, 2) if arr.ndim == 1 else arr


@dataclass(frozen=True)
class ExpKernel:
    """Exponential correlation exp(-d / g)."""

    g: float

    def __post_init__(self):
        if not self.g > 0:
            raise ValueError(f"range must be positive, got {self.g}")

    def __call__(self, d):
        return np.exp(-np.asarray(d) / self.g)


def pairwise_distances(sites):
    c = _as_coords(sites)
    return cdist(c, c)


def corr_matrix(sites, kernel):
    C = kernel(pairwise_distances(sites))
    np.fill_diagonal(C, 1.0)
    return C


def cross_corr(new_sites, sites, kernel):
    """Correlations between ``new_sites`` (rows) and ``sites`` (columns)."""
    return kernel(cdist(_as_coords(new_sites), _as_coords(sites)))


def chol_factor(M, jitter=JITTER_START):
    """Lower Cholesky factor of ``M + jitter * I``.

    On failure the jitter is multiplied by 10 (starting from at least
    ``JITTER_START``) up to ``JITTER_MAX``; past that
    :class:`NotPositiveDefinite` is raised. ``jitter=0`` tries the exact
    factorization first.
    """
    M = np.asarray(M, dtype=float)
    eye = np.eye(M.shape[0])
    jit = jitter
    while True:
        try:
            L = linalg.cholesky(M + jit * eye, lower=True, check_finite=False)
            if not np.all(np.isfinite(L)):
                raise linalg.LinAlgError("non-finite factor")
            if jit > jitter:
                logger.warning("cholesky needed jitter %.1e", jit)
            return L
        except linalg.LinAlgError:
            jit = JITTER_START if jit < JITTER_START else jit * 10.0
            if jit > JITTER_MAX * (1 + 1e-9):
                raise NotPositiveDefinite(
                    f"matrix of size {M.shape[0]} not positive definite "
                    f"with jitter up to {JITTER_MAX:g}") from None


def chol_solve(L, b):
    return linalg.cho_solve((L, True), b, check_finite=False)


def chol_logdet(L):
    return 2.0 * np.sum(np.log(np.diag(L)))


# ---------------------------------------------------------------------------
# Nearest-neighbor index


@dataclass(frozen=True)
class NeighborIndex:
    """m-nearest previously-ordered neighbors.

    ``neighbors[i, :counts[i]]`` lists the neighbors of site i (original site
    indices), nearest first. ``ordering`` is the visiting order. The child
    arrays invert the relation: for site i, ``child_site[child_ptr[i]:
    child_ptr[i+1]]`` are the sites that use i as a neighbor and
    ``child_pos`` the slot i occupies in their neighbor row.
    """

    ordering: np.ndarray
    neighbors: np.ndarray
    counts: np.ndarray
    m: int
    child_ptr: np.ndarray
    child_site: np.ndarray
    child_pos: np.ndarray
    _dist_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self):
        return len(self.ordering)

    def neighbor_set(self, i):
        return self.neighbors[i, : self.counts[i]]

    def distances(self, coords):
        """Cached (site-to-neighbor, neighbor-block) distance tables."""
        key = id(coords), coords.shape
        cache = self._dist_cache
        if cache.get("key") != key or cache.get("coords") is not coords:
            cache.clear()
            d = _kernels.neighbor_distances(coords, self.neighbors, self.counts)
            cache.update(key=key, coords=coords, d=d)
        return cache["d"]


def build_neighbor_index(sites, m):
    if m < 1:
        raise ValueError("m must be >= 1")
    coords = _as_coords(sites)
    n = len(coords)
    ordering = np.lexsort((coords[:, 1], coords[:, 0]))
    width = max(1, min(m, n - 1))
    neighbors = np.full((n, width), -1, dtype=np.int64)
    counts = np.zeros(n, dtype=np.int64)
    for pos in range(1, n):
        i = ordering[pos]
        prev = ordering[:pos]
        d = np.sqrt(np.sum((coords[prev] - coords[i]) ** 2, axis=1))
        # nearest first, ties to the lower site index
        pick = prev[np.lexsort((prev, d))[:m]]
        neighbors[i, : len(pick)] = pick
        counts[i] = len(pick)

    owner, slot = np.nonzero(neighbors >= 0)
    target = neighbors[owner, slot]
    srt = np.lexsort((slot, owner, target))
    child_site = owner[srt].astype(np.int64)
    child_pos = slot[srt].astype(np.int64)
    child_ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(child_ptr, target + 1, 1)
    child_ptr = np.cumsum(child_ptr)
    return NeighborIndex(ordering.astype(np.int64), neighbors, counts, m,
                         child_ptr, child_site, child_pos)


@dataclass(frozen=True)
class NngpCoeffs:
    """Per-site conditional regression rows ``B`` and variance factors ``F``."""

    B: np.ndarray
    F: np.ndarray


def nngp_coefficients(index, sites, kernel):
    coords = np.ascontiguousarray(_as_coords(sites))
    d_site, d_block = index.distances(coords)
    B, F, ok = _kernels.nngp_coeffs(d_site, d_block, index.counts, float(kernel.g), 0.0)
    if ok:
        return NngpCoeffs(B, F)
    # slow path: escalate jitter per neighbor block
    B = np.zeros(index.neighbors.shape)
    F = np.ones(index.n)
    for i in range(index.n):
        nb = index.neighbor_set(i)
        if len(nb) == 0:
            continue
        C = corr_matrix(coords[nb], kernel)
        c = cross_corr(coords[i], coords[nb], kernel)[0]
        L = chol_factor(C, jitter=0.0)
        b = chol_solve(L, c)
        B[i, : len(nb)] = b
        F[i] = min(1.0, max(1.0 - b @ c, 1e-10))
    return NngpCoeffs(B, F)


def nngp_logdensity(field, index, coeffs, tau, mean_level=0.0):
    """Joint NNGP log-density of ``field`` with scale ``tau``."""
    resid = np.ascontiguousarray(np.asarray(field, dtype=float) - mean_level)
    qf, logF = _kernels.nngp_quadform(resid, index.neighbors, index.counts,
                                      coeffs.B, coeffs.F)
    n = len(resid)
    return -0.5 * (n * np.log(2 * np.pi * tau) + logF + qf / tau)


def nngp_quadform(field, index, coeffs, mean_level=0.0):
    """Sum of (beta_i - B_i beta_N(i))^2 / F_i on the centered field."""
    resid = np.ascontiguousarray(np.asarray(field, dtype=float) - mean_level)
    qf, _ = _kernels.nngp_quadform(resid, index.neighbors, index.counts,
                                   coeffs.B, coeffs.F)
    return qf


# ---------------------------------------------------------------------------
# Kriging and simulation


def gp_conditional(new_site, sites, field, mean_level, tau, kernel, chol=None):
    """Kriging mean and variance of a GP(mean_level, tau * C) at new sites.

    ``chol`` may carry a precomputed factor of the training correlation
    matrix. Scalars come back for a single new site.
    """
    X = _as_coords(sites)
    new = np.asarray(new_site, dtype=float)
    single = new.ndim == 1
    new = new.reshape(-1, 2)
    if chol is None:
        chol = chol_factor(corr_matrix(X, kernel), jitter=0.0)
    k = cross_corr(new, X, kernel)
    alpha = chol_solve(chol, np.asarray(field, dtype=float) - mean_level)
    mean = mean_level + k @ alpha
    v = linalg.solve_triangular(chol, k.T, lower=True, check_finite=False)
    var = tau * np.clip(1.0 - np.sum(v * v, axis=0), 0.0, 1.0)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def sample_gp(sites, sd, kernel, rng):
    X = _as_coords(sites)
    z = rng.standard_normal(len(X))
    if sd == 0:
        return np.zeros(len(X))
    L = chol_factor(corr_matrix(X, kernel), jitter=0.0)
    return sd * (L @ z)
