"""Complex linear algebra and convex-geometry primitives.

Everything here is a pure function of its inputs (randomness always comes
from an explicit seed), so values can be shared freely across threads.
Matrices are dense complex128 ndarrays; most routines accept a leading
batch dimension, i.e. arrays of shape (..., d, d).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HERM_TOL = 1e-10
PSD_TOL = 1e-9
TRACE_TOL = 1e-10


class ConvergenceError(RuntimeError):
    """An iterative routine hit its cap before reaching its tolerance."""

    def __init__(self, message: str, residual: float | None = None, report=None):
        super().__init__(message)
        self.residual = residual
        self.report = report


def as_matrix(mat) -> np.ndarray:
    """Coerce to a complex128 square matrix (with optional batch axes)."""
    a = np.asarray(mat, dtype=np.complex128)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2] or a.shape[-1] < 1:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return a


def dagger(mat: np.ndarray) -> np.ndarray:
    return np.conjugate(np.swapaxes(mat, -1, -2))


def herm_defect(mat) -> float:
    """Max-norm distance from the Hermitian cone, max |m - m^dagger|."""
    a = as_matrix(mat)
    return float(np.max(np.abs(a - dagger(a))))


def require_hermitian(mat, tol: float = HERM_TOL, what: str = "matrix") -> np.ndarray:
    a = as_matrix(mat)
    defect = float(np.max(np.abs(a - dagger(a))))
    if defect > tol:
        raise ValueError(f"{what} is not Hermitian (defect {defect:.3e} > {tol:.1e})")
    return a


def tensor(a, b) -> np.ndarray:
    """Kronecker product; the first factor is the more significant one."""
    a = as_matrix(a)
    b = as_matrix(b)
    da, db = a.shape[-1], b.shape[-1]
    out = np.einsum("...ij,...kl->...ikjl", a, b)
    return out.reshape(*out.shape[:-4], da * db, da * db)


def partial_trace_dims(mat, dims, traced) -> np.ndarray:
    """Trace out the factors at positions `traced` of a product space.

    `dims` lists the factor dimensions in order; the result keeps the
    remaining factors in their original order.  Works on batched input.
    """
    a = as_matrix(mat)
    dims = tuple(int(d) for d in dims)
    total = int(np.prod(dims))
    if a.shape[-1] != total:
        raise ValueError(f"matrix dim {a.shape[-1]} != product of factors {total}")
    traced = sorted(set(int(t) for t in traced))
    if any(t < 0 or t >= len(dims) for t in traced):
        raise ValueError(f"traced positions {traced} out of range for {len(dims)} factors")
    n = len(dims)
    batch = a.shape[:-2]
    t = a.reshape(*batch, *dims, *dims)
    # einsum subscripts: traced row/col axes share a letter and are summed
    letters = iter("abcdefghijklmnopqrstuvwxyz")
    row = [next(letters) for _ in range(n)]
    col = [row[i] if i in traced else next(letters) for i in range(n)]
    keep_row = [row[i] for i in range(n) if i not in traced]
    keep_col = [col[i] for i in range(n) if i not in traced]
    sub = "..." + "".join(row) + "".join(col) + "->..." + "".join(keep_row + keep_col)
    out = np.einsum(sub, t)
    kept = int(np.prod([dims[i] for i in range(n) if i not in traced])) if n > len(traced) else 1
    return out.reshape(*batch, kept, kept)


def _permute_factors(mat: np.ndarray, dims, perm) -> np.ndarray:
    """Reorder the tensor factors of a matrix: new factor i = old factor perm[i]."""
    a = as_matrix(mat)
    dims = tuple(int(d) for d in dims)
    n = len(dims)
    batch = a.shape[:-2]
    nb = len(batch)
    t = a.reshape(*batch, *dims, *dims)
    axes = tuple(range(nb)) + tuple(nb + p for p in perm) + tuple(nb + n + p for p in perm)
    t = np.transpose(t, axes)
    d = int(np.prod(dims))
    return t.reshape(*batch, d, d)


# ---------------------------------------------------------------------------
# eigensolvers
# ---------------------------------------------------------------------------

def eigh_jacobi(mat, tol: float = 1e-10, max_sweeps: int | None = None):
    """Full Hermitian eigendecomposition by cyclic Jacobi rotations.

    Returns (w, v) with eigenvalues `w` ascending and eigenvectors in the
    columns of `v`, so that mat = v @ diag(w) @ v^dagger.  The sweep order
    is fixed, which makes the output deterministic for a given input.
    Accepts batched input of shape (..., d, d).
    """
    a = np.array(require_hermitian(mat, what="eigh_jacobi input"), copy=True)
    d = a.shape[-1]
    batch = a.shape[:-2]
    v = np.zeros_like(a)
    idx = np.arange(d)
    v[..., idx, idx] = 1.0
    if d > 1:
        sweeps = max_sweeps if max_sweeps is not None else 50 * d
        pairs = [(p, q) for p in range(d - 1) for q in range(p + 1, d)]
        for _ in range(sweeps):
            off = 0.0
            for p, q in pairs:
                off = max(off, float(np.max(np.abs(a[..., p, q]))))
            if off <= tol:
                break
            for p, q in pairs:
                apq = a[..., p, q]
                mag = np.abs(apq)
                active = mag > tol * 1e-3
                if not np.any(active):
                    continue
                safe = np.maximum(mag, 1e-300)
                w = np.where(active, apq / safe, 1.0)  # phase e^{i arg(apq)}
                app = a[..., p, p].real
                aqq = a[..., q, q].real
                zeta = np.where(active, (app - aqq) / (2.0 * safe), 0.0)
                sign = np.where(zeta >= 0, 1.0, -1.0)
                tval = sign / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                tval = np.where(active, tval, 0.0)
                c = 1.0 / np.sqrt(1.0 + tval * tval)
                s = tval * c
                sw = (s * w)[..., None]
                swc = (s * np.conjugate(w))[..., None]
                cc = c[..., None]
                # A <- A G, then A <- G^dagger A, with G the (p,q) rotation
                cp = a[..., :, p].copy()
                cq = a[..., :, q].copy()
                a[..., :, p] = cc * cp + swc * cq
                a[..., :, q] = -sw * cp + cc * cq
                rp = a[..., p, :].copy()
                rq = a[..., q, :].copy()
                a[..., p, :] = cc * rp + sw * rq
                a[..., q, :] = -swc * rp + cc * rq
                vp = v[..., :, p].copy()
                vq = v[..., :, q].copy()
                v[..., :, p] = cc * vp + swc * vq
                v[..., :, q] = -sw * vp + cc * vq
    w = a[..., idx, idx].real.copy()
    order = np.argsort(w, axis=-1, kind="stable")
    w = np.take_along_axis(w, order, axis=-1)
    v = np.take_along_axis(v, order[..., None, :], axis=-1)
    return w, v


def eigh_fast(mat):
    """Eigendecomposition for solver hot loops (LAPACK-backed, ascending)."""
    w, v = np.linalg.eigh(mat)
    return w, v


def top_eigpair(h, tol: float = 1e-10, max_iter: int = 200000):
    """Largest eigenvalue and a unit eigenvector of a Hermitian matrix.

    Power iteration on a spectrum-shifted copy, started from the fixed
    uniform vector, so equal inputs give bit-equal outputs.  If the
    iteration stalls (pathologically small spectral gap), falls back to
    the Jacobi decomposition, which is deterministic as well.
    """
    a = require_hermitian(h, what="top_eigpair input")
    if a.ndim != 2:
        raise ValueError("top_eigpair expects a single matrix, not a batch")
    d = a.shape[0]
    shift = 1.0 + float(np.max(np.sum(np.abs(a), axis=1)))
    m = a + shift * np.eye(d)
    v = np.full(d, 1.0 / np.sqrt(d), dtype=np.complex128)
    lam = float(np.real(np.conjugate(v) @ (a @ v)))
    target = tol * max(1.0, float(d))
    for _ in range(max_iter):
        av = a @ v
        res = float(np.linalg.norm(av - lam * v))
        if res <= target:
            return lam, v
        nv = m @ v
        v = nv / np.linalg.norm(nv)
        lam = float(np.real(np.conjugate(v) @ (a @ v)))
    av = a @ v
    if float(np.linalg.norm(av - lam * v)) <= 1e-8 * d:
        return lam, v
    w, vecs = eigh_jacobi(a)
    return float(w[-1]), vecs[:, -1]


def project_psd(h) -> np.ndarray:
    """Frobenius-nearest positive semidefinite matrix (clip eigenvalues at 0)."""
    a = require_hermitian(h, what="project_psd input")
    w, v = eigh_jacobi(a)
    return _psd_reconstruct(w, v)


def _psd_reconstruct(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    wc = np.maximum(w, 0.0)
    out = np.einsum("...ik,...k,...jk->...ij", v, wc, np.conjugate(v))
    return 0.5 * (out + dagger(out))


def _psd_project_fast(x: np.ndarray) -> np.ndarray:
    w, v = eigh_fast(0.5 * (x + dagger(x)))
    return _psd_reconstruct(w, v)


# ---------------------------------------------------------------------------
# partial-trace fiber projections
# ---------------------------------------------------------------------------

def _fiber_affine_core(x: np.ndarray, rho1: np.ndarray, d_keep: int, d_ext: int) -> np.ndarray:
    """Orthogonal projection onto {r : tr_ext(r) = rho1}, extension factor last."""
    cur = partial_trace_dims(x, (d_keep, d_ext), (1,))
    eye = np.eye(d_ext, dtype=np.complex128) / d_ext
    return x + tensor(rho1 - cur, eye)


def _dykstra_fiber_core(
    x: np.ndarray,
    rho1: np.ndarray,
    d_keep: int,
    d_ext: int,
    tol: float = 1e-10,
    max_iter: int = 10000,
    psd_project=_psd_project_fast,
):
    """Dykstra alternating projections onto PSD intersect the marginal fiber.

    Batched; returns (point, converged_mask, residual).  The affine set
    needs no correction term, so only the PSD projection carries one.
    """
    cur = _fiber_affine_core(x, rho1, d_keep, d_ext)
    corr = np.zeros_like(cur)
    converged = np.zeros(cur.shape[:-2], dtype=bool)
    for _ in range(max_iter):
        y = psd_project(cur + corr)
        corr = cur + corr - y
        nxt = _fiber_affine_core(y, rho1, d_keep, d_ext)
        step = np.sqrt(np.sum(np.abs(nxt - cur) ** 2, axis=(-2, -1)))
        cur = nxt
        converged = step <= tol
        if np.all(converged):
            break
    mins, _ = eigh_fast(0.5 * (cur + dagger(cur)))
    residual = np.maximum(np.max(np.abs(_fiber_marginal_defect(cur, rho1, d_keep, d_ext)), axis=(-2, -1)),
                          np.maximum(-mins[..., 0], 0.0))
    return cur, converged, residual


def _fiber_marginal_defect(x, rho1, d_keep, d_ext):
    return partial_trace_dims(x, (d_keep, d_ext), (1,)) - rho1


# ---------------------------------------------------------------------------
# seeded random instances
# ---------------------------------------------------------------------------

def _complex_gaussian(rng: np.random.Generator, dim: int) -> np.ndarray:
    return rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))


def random_density(dim: int, seed) -> "DensityMatrix":
    """Seeded random density matrix via G G^dagger / tr(G G^dagger)."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    g = _complex_gaussian(np.random.default_rng(seed), dim)
    m = g @ dagger(g)
    m = m / np.trace(m).real
    return DensityMatrix(0.5 * (m + dagger(m)))


def random_observable(dim: int, seed) -> "Observable":
    """Seeded random observable with spectrum inside [0, 1].

    Built as (H + ||H|| I) / (2 ||H||) from a Hermitian Gaussian H, where
    ||H|| is the spectral norm, so the extreme eigenvalues touch 0 and 1.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    g = _complex_gaussian(np.random.default_rng(seed), dim)
    h = 0.5 * (g + dagger(g))
    w, _ = eigh_jacobi(h)
    nrm = float(np.max(np.abs(w)))
    if nrm == 0.0:
        return Observable(0.5 * np.eye(dim, dtype=np.complex128))
    m = (h + nrm * np.eye(dim)) / (2.0 * nrm)
    return Observable(0.5 * (m + dagger(m)))


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.complex128, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class DensityMatrix:
    """Hermitian, PSD, unit-trace matrix representing a state."""

    mat: np.ndarray

    def __post_init__(self):
        a = as_matrix(self.mat)
        if a.ndim != 2:
            raise ValueError("DensityMatrix holds a single matrix")
        if herm_defect(a) > HERM_TOL:
            raise ValueError(f"density matrix not Hermitian within {HERM_TOL:.1e}")
        w, _ = eigh_jacobi(a)
        if float(w[0]) < -PSD_TOL:
            raise ValueError(f"density matrix has eigenvalue {float(w[0]):.3e} < -{PSD_TOL:.1e}")
        tr = complex(np.trace(a))
        if abs(tr - 1.0) > TRACE_TOL:
            raise ValueError(f"density matrix trace {tr} != 1 within {TRACE_TOL:.1e}")
        object.__setattr__(self, "mat", _freeze(a))

    @property
    def dim(self) -> int:
        return self.mat.shape[0]


@dataclass(frozen=True)
class Observable:
    """Hermitian matrix with spectrum in [0, 1]; tr(R rho) is an accept probability."""

    mat: np.ndarray

    def __post_init__(self):
        a = as_matrix(self.mat)
        if a.ndim != 2:
            raise ValueError("Observable holds a single matrix")
        if herm_defect(a) > HERM_TOL:
            raise ValueError(f"observable not Hermitian within {HERM_TOL:.1e}")
        w, _ = eigh_jacobi(a)
        if float(w[0]) < -PSD_TOL or float(w[-1]) > 1.0 + PSD_TOL:
            raise ValueError(
                f"observable spectrum [{float(w[0]):.3e}, {float(w[-1]):.3e}] outside [0, 1]"
            )
        object.__setattr__(self, "mat", _freeze(a))

    @property
    def dim(self) -> int:
        return self.mat.shape[0]


MAXIMIZER = "maximizer"
MINIMIZER = "minimizer"


@dataclass(frozen=True)
class Register:
    id: str
    qubits: int
    owner: str
    turn: int


@dataclass(frozen=True)
class RegisterLayout:
    """Ordered quantum registers, one per turn, owners alternating.

    Registers are listed in turn order.  Solvers work in the "grouped"
    basis where all maximizer factors come first (still in turn order),
    then all minimizer factors; the permutation between the two bases is
    precomputed here.
    """

    registers: tuple[Register, ...]

    def __post_init__(self):
        regs = tuple(self.registers)
        if not regs:
            raise ValueError("layout needs at least one register")
        ids = [r.id for r in regs]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate register ids: {ids}")
        turns = [r.turn for r in regs]
        if any(b <= a for a, b in zip(turns, turns[1:])):
            raise ValueError(f"turn indices must be strictly increasing, got {turns}")
        for i, r in enumerate(regs):
            if r.owner not in (MAXIMIZER, MINIMIZER):
                raise ValueError(f"unknown owner {r.owner!r}")
            expect = MAXIMIZER if i % 2 == 0 else MINIMIZER
            if r.owner != expect:
                raise ValueError("owners must alternate starting with the maximizer")
            if r.qubits < 0:
                raise ValueError("qubit count must be >= 0")
        object.__setattr__(self, "registers", regs)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(2 ** r.qubits for r in self.registers)

    @property
    def total_dim(self) -> int:
        return int(np.prod(self.dims))

    @property
    def turns(self) -> int:
        return len(self.registers)

    def owner_positions(self, owner: str) -> tuple[int, ...]:
        return tuple(i for i, r in enumerate(self.registers) if r.owner == owner)

    def owner_dim(self, owner: str) -> int:
        dims = self.dims
        return int(np.prod([dims[i] for i in self.owner_positions(owner)])) if self.owner_positions(owner) else 1

    @property
    def grouped_order(self) -> tuple[int, ...]:
        return self.owner_positions(MAXIMIZER) + self.owner_positions(MINIMIZER)

    def position(self, register_id: str) -> int:
        for i, r in enumerate(self.registers):
            if r.id == register_id:
                return i
        raise ValueError(f"unknown register id {register_id!r}")

    def check_dim(self, mat) -> np.ndarray:
        a = as_matrix(mat)
        if a.shape[-1] != self.total_dim:
            raise ValueError(f"matrix dim {a.shape[-1]} != layout dim {self.total_dim}")
        return a

    def to_grouped(self, mat) -> np.ndarray:
        """Permute a turn-order matrix into the grouped (max factors first) basis."""
        return _permute_factors(self.check_dim(mat), self.dims, self.grouped_order)

    def from_grouped(self, mat) -> np.ndarray:
        order = self.grouped_order
        inverse = [0] * len(order)
        for new, old in enumerate(order):
            inverse[old] = new
        gdims = tuple(self.dims[i] for i in order)
        return _permute_factors(self.check_dim(mat), gdims, inverse)


def partial_trace(mat, layout: RegisterLayout, traced_ids) -> np.ndarray:
    """Trace out the named registers; kept registers stay in turn order."""
    if isinstance(traced_ids, str):
        traced_ids = [traced_ids]
    positions = [layout.position(t) for t in traced_ids]
    return partial_trace_dims(layout.check_dim(mat), layout.dims, positions)


def project_fiber_affine(x, rho1: DensityMatrix, layout: RegisterLayout, extended_id: str) -> np.ndarray:
    """Orthogonal projection onto the affine set {r : tr_extended(r) = rho1}.

    The correction (rho1 - tr_ext(x)) tensor I/d_ext is orthogonal to the
    constraint subspace, so this is the nearest point in Frobenius norm.
    """
    a = require_hermitian(layout.check_dim(x), what="project_fiber_affine input")
    pos = layout.position(extended_id)
    dims = layout.dims
    d_ext = dims[pos]
    d_keep = layout.total_dim // d_ext
    if rho1.dim != d_keep:
        raise ValueError(f"rho1 dim {rho1.dim} != kept dim {d_keep}")
    n = len(dims)
    to_last = [i for i in range(n) if i != pos] + [pos]
    moved = _permute_factors(a, dims, to_last)
    fixed = _fiber_affine_core(moved, rho1.mat, d_keep, d_ext)
    inverse = [0] * n
    for new, old in enumerate(to_last):
        inverse[old] = new
    return _permute_factors(fixed, tuple(dims[i] for i in to_last), inverse)


def project_fiber(
    x,
    rho1: DensityMatrix,
    layout: RegisterLayout,
    extended_id: str,
    tol: float = 1e-10,
    max_iter: int = 10000,
) -> DensityMatrix:
    """Project onto S = {rho PSD : tr_extended(rho) = rho1} by Dykstra iteration.

    Alternates project_psd with project_fiber_affine (with the standard
    Dykstra correction) until successive iterates differ by at most `tol`
    in max norm, cap `max_iter`.  Raises ConvergenceError if the cap is
    hit while the membership residual is still above 1e-6.
    """
    a = require_hermitian(layout.check_dim(x), what="project_fiber input")
    pos = layout.position(extended_id)
    dims = layout.dims
    d_ext = dims[pos]
    d_keep = layout.total_dim // d_ext
    if rho1.dim != d_keep:
        raise ValueError(f"rho1 dim {rho1.dim} != kept dim {d_keep}")
    n = len(dims)
    to_last = [i for i in range(n) if i != pos] + [pos]
    moved = _permute_factors(a, dims, to_last)

    def psd_via_jacobi(m):
        w, v = eigh_jacobi(0.5 * (m + dagger(m)))
        return _psd_reconstruct(w, v)

    point, converged, residual = _dykstra_fiber_core(
        moved, rho1.mat, d_keep, d_ext, tol=tol, max_iter=max_iter, psd_project=psd_via_jacobi
    )
    res = float(residual)
    if not bool(converged) and res > 1e-6:
        raise ConvergenceError(
            f"fiber projection did not converge (residual {res:.3e})", residual=res
        )
    # plain alternating clip-then-restore rounds push the leftover
    # infeasibility from the Dykstra stopping level (~1e-8) down below the
    # DensityMatrix tolerances; one round costs a single small eigh
    for _ in range(500):
        point = psd_via_jacobi(point)
        point = _fiber_affine_core(point, rho1.mat, d_keep, d_ext)
        w, _ = eigh_jacobi(0.5 * (point + dagger(point)))
        if float(np.min(w)) >= -1e-10:
            break
    else:
        raise ConvergenceError(
            "fiber projection cleanup stalled", residual=float(-np.min(w))
        )
    inverse = [0] * n
    for new, old in enumerate(to_last):
        inverse[old] = new
    out = _permute_factors(point, tuple(dims[i] for i in to_last), inverse)
    return DensityMatrix(0.5 * (out + dagger(out)))


# ---------------------------------------------------------------------------
# JSON wire format
# ---------------------------------------------------------------------------

def matrix_to_json(mat) -> dict:
    """{"dim": n, "entries": [[re, im], ...]} in row-major order."""
    a = as_matrix(mat)
    if a.ndim != 2:
        raise ValueError("matrix_to_json expects a single matrix")
    flat = a.reshape(-1)
    return {"dim": int(a.shape[0]), "entries": [[float(z.real), float(z.imag)] for z in flat]}


def matrix_from_json(obj) -> np.ndarray:
    try:
        dim = int(obj["dim"])
        entries = obj["entries"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"bad matrix JSON: {exc}") from exc
    if dim < 1 or len(entries) != dim * dim:
        raise ValueError(f"matrix JSON has {len(entries)} entries for dim {dim}")
    flat = np.array([complex(re, im) for re, im in entries], dtype=np.complex128)
    return flat.reshape(dim, dim)
