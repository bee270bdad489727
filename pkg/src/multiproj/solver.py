"""Pattern solvers.

Two routes from an assembled system to projector patterns:

* epipolar-chain decomposition with box constraints: the bipartite
  variable/constraint graph splits into independent chains, each solved
  exactly by projected gradient with exact line search;
* the global linear-factorization baseline: unconstrained sparse least
  squares followed by an affine rescale of the whole solution into [0, 255],
  which compresses dynamic range.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from numba import njit, prange, set_num_threads, get_num_threads
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import lsmr
from sklearn.base import BaseEstimator

from .scene import SceneDescription, SolverBounds, trace_capture_geometry
from .system import (
    PatternImage,
    SparseSystem,
    TargetImage,
    assemble,
    build_inverse_projection,
)


class SolverError(RuntimeError):
    """The global least-squares solve diverged."""


DEFAULT_MAX_ITERATIONS = 10_000
DEFAULT_TOLERANCE = 1e-9


@dataclass
class EpipolarChain:
    """A closed set of pattern pixels and the constraints coupling them.

    No constraint row outside ``rows`` touches any column in ``cols``; chains
    partition the pattern pixels that appear in at least one row. The local
    system is stored CSR-style with column indices local to ``cols``.
    """

    cols: np.ndarray  # global column ids of the chain variables
    rows: np.ndarray  # global row ids of the chain constraints
    row_ptr: np.ndarray  # (n_rows + 1,) entry ranges per local row
    entry_local: np.ndarray  # local variable index per entry
    entry_weight: np.ndarray
    rhs: np.ndarray  # (n_rows,)

    @property
    def n_variables(self) -> int:
        return len(self.cols)

    def variables(self, col_offsets: np.ndarray) -> list[tuple[int, int]]:
        """Chain variables as (projector id, flat pixel index) pairs."""
        j = np.searchsorted(col_offsets, self.cols, side="right") - 1
        return list(zip(j.tolist(), (self.cols - col_offsets[j]).tolist()))

    def objective(self, x: np.ndarray) -> float:
        res = np.zeros(len(self.rhs))
        for r in range(len(self.rhs)):
            s, e = self.row_ptr[r], self.row_ptr[r + 1]
            res[r] = self.entry_weight[s:e] @ x[self.entry_local[s:e]] - self.rhs[r]
        return float(res @ res)


@dataclass
class ChainSet:
    """All chains of a system packed flat for the parallel kernel."""

    chain_col_ptr: np.ndarray  # (n_chains + 1,)
    cols: np.ndarray  # global column ids grouped by chain
    chain_row_ptr: np.ndarray  # (n_chains + 1,)
    rows: np.ndarray  # global row ids grouped by chain
    entry_ptr: np.ndarray  # (n_rows + 1,) CSR over the grouped rows
    entry_local: np.ndarray
    entry_weight: np.ndarray
    rhs: np.ndarray

    @property
    def n_chains(self) -> int:
        return len(self.chain_col_ptr) - 1

    def chain(self, c: int) -> EpipolarChain:
        r0, r1 = self.chain_row_ptr[c], self.chain_row_ptr[c + 1]
        e0, e1 = self.entry_ptr[r0], self.entry_ptr[r1]
        return EpipolarChain(
            cols=self.cols[self.chain_col_ptr[c] : self.chain_col_ptr[c + 1]],
            rows=self.rows[r0:r1],
            row_ptr=self.entry_ptr[r0 : r1 + 1] - e0,
            entry_local=self.entry_local[e0:e1],
            entry_weight=self.entry_weight[e0:e1],
            rhs=self.rhs[r0:r1],
        )


def pack_chains(system: SparseSystem) -> ChainSet:
    """Group the system's variables and rows into independent chains.

    Connected components of the bipartite variable/constraint graph (the
    transitive closure of the epipolar seed-and-iterate walk). Deterministic:
    chains are ordered by their smallest column id, columns and rows keep
    ascending order within a chain.
    """
    A = system.A
    indptr, indices = A.indptr, A.indices
    n_rows, n_cols = A.shape
    row_nnz = np.diff(indptr)
    if np.any(row_nnz == 0):
        raise ValueError("assembled systems must not contain empty rows")
    first = indices[indptr[:-1]]
    mask = np.ones(indices.size, dtype=bool)
    mask[indptr[:-1]] = False
    others = indices[mask]
    src = np.repeat(first, row_nnz - 1)
    adj = sp.coo_matrix(
        (np.ones(src.size, dtype=np.int8), (src, others)), shape=(n_cols, n_cols)
    )
    _, labels = connected_components(adj, directed=False)

    used_cols = np.unique(indices)
    used_labels, first_idx = np.unique(labels[used_cols], return_index=True)
    # rank components by their smallest member column for a stable order
    rank_order = np.argsort(first_idx, kind="stable")
    rank = np.empty(len(used_labels), dtype=np.int64)
    rank[rank_order] = np.arange(len(used_labels))
    label_rank = np.full(labels.max() + 1, -1, dtype=np.int64)
    label_rank[used_labels] = rank

    col_chain = label_rank[labels[used_cols]]
    order = np.argsort(col_chain, kind="stable")
    cols_grouped = used_cols[order]
    counts = np.bincount(col_chain, minlength=len(used_labels))
    chain_col_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    local_of_col = np.full(n_cols, -1, dtype=np.int64)
    chain_of_col = np.full(n_cols, -1, dtype=np.int64)
    pos = np.arange(len(cols_grouped), dtype=np.int64)
    chain_ids = np.repeat(np.arange(len(used_labels)), counts)
    local_of_col[cols_grouped] = pos - chain_col_ptr[chain_ids]
    chain_of_col[cols_grouped] = chain_ids

    row_chain = chain_of_col[first]
    row_order = np.argsort(row_chain, kind="stable")
    row_counts = np.bincount(row_chain, minlength=len(used_labels))
    chain_row_ptr = np.concatenate([[0], np.cumsum(row_counts)]).astype(np.int64)

    A_perm = A[row_order]
    entry_local = local_of_col[A_perm.indices]
    return ChainSet(
        chain_col_ptr=chain_col_ptr,
        cols=cols_grouped,
        chain_row_ptr=chain_row_ptr,
        rows=row_order.astype(np.int64),
        entry_ptr=A_perm.indptr.astype(np.int64),
        entry_local=entry_local.astype(np.int64),
        entry_weight=A_perm.data.astype(np.float64),
        rhs=system.rhs[row_order].astype(np.float64),
    )


def extract_chains(system: SparseSystem) -> list[EpipolarChain]:
    """The system's independent chains as individual objects."""
    cs = pack_chains(system)
    return [cs.chain(c) for c in range(cs.n_chains)]


# ---------------------------------------------------------------------------
# Box-constrained projected gradient


@njit(cache=True)
def _pg_chain(row_ptr, entry_local, entry_w, rhs, nv, lo, hi, max_iter, tol):
    """Projected gradient with exact line search on one chain.

    Outer iterations classify variables as free or pinned (at a bound the
    gradient pushes against); an inner run then minimizes over the fixed
    free set with conjugate directions, each move an exact quadratic line
    search truncated at the first bound crossing. A boundary hit returns
    control to the outer loop, which re-derives the free set, so the
    objective decreases strictly every cycle and interior phases converge
    at conjugate-gradient speed instead of steepest-descent speed.
    Starts from 0 projected into the box (the minimum-norm tie-break for
    underdetermined chains). Returns (x, iterations, sse, converged).
    """
    nr = len(rhs)
    x = np.empty(nv)
    start = 0.0
    if start < lo:
        start = lo
    elif start > hi:
        start = hi
    for l in range(nv):
        x[l] = start

    scale = 1.0
    for r in range(nr):
        if abs(rhs[r]) > scale:
            scale = abs(rhs[r])
    tol_eff = tol * scale
    # snap radius: rounding can leave a coordinate a few ulps inside a bound,
    # where the distance-to-bound step underflows to zero and freezes the
    # iteration; landing exactly on the bound keeps the classification honest
    eps_b = 1e-12 * (hi - lo)

    g = np.empty(nv)
    r_red = np.empty(nv)
    p = np.empty(nv)
    q = np.empty(nv)
    free = np.zeros(nv, dtype=np.bool_)
    it = 0
    converged = False
    while it < max_iter:
        for l in range(nv):
            g[l] = 0.0
        for r in range(nr):
            res = -rhs[r]
            for e in range(row_ptr[r], row_ptr[r + 1]):
                res += entry_w[e] * x[entry_local[e]]
            for e in range(row_ptr[r], row_ptr[r + 1]):
                g[entry_local[e]] += entry_w[e] * res

        # stopping test on the unit-step projected gradient
        pg2 = 0.0
        for l in range(nv):
            xl = x[l] - g[l]
            if xl < lo:
                xl = lo
            elif xl > hi:
                xl = hi
            pg2 += (xl - x[l]) ** 2
        if np.sqrt(pg2) < tol_eff:
            converged = True
            break

        # free variables: not pinned at a bound the gradient pushes against
        rr = 0.0
        for l in range(nv):
            free[l] = not (
                (x[l] <= lo and g[l] > 0.0) or (x[l] >= hi and g[l] < 0.0)
            )
            r_red[l] = -g[l] if free[l] else 0.0
            p[l] = r_red[l]
            rr += r_red[l] * r_red[l]
        if rr <= 0.0:
            converged = True
            break

        # inner conjugate-direction run over the fixed free set
        while it < max_iter:
            it += 1
            denom = 0.0
            for l in range(nv):
                q[l] = 0.0
            for r in range(nr):
                ap = 0.0
                for e in range(row_ptr[r], row_ptr[r + 1]):
                    ap += entry_w[e] * p[entry_local[e]]
                denom += ap * ap
                for e in range(row_ptr[r], row_ptr[r + 1]):
                    q[entry_local[e]] += entry_w[e] * ap
            if denom <= 0.0:
                break
            alpha = rr / denom

            # truncate at the first bound crossing to stay feasible
            alpha_max = np.inf
            for l in range(nv):
                if p[l] > 0.0:
                    am = (hi - x[l]) / p[l]
                elif p[l] < 0.0:
                    am = (lo - x[l]) / p[l]
                else:
                    continue
                if am < alpha_max:
                    alpha_max = am
            hit = alpha >= alpha_max
            if hit:
                alpha = alpha_max
            for l in range(nv):
                xl = x[l] + alpha * p[l]
                if xl - lo < eps_b:
                    xl = lo
                elif hi - xl < eps_b:
                    xl = hi
                x[l] = xl
            if hit:
                break  # the free set changed: re-derive it outside

            rr_new = 0.0
            for l in range(nv):
                if free[l]:
                    r_red[l] -= alpha * q[l]
                    rr_new += r_red[l] * r_red[l]
            if np.sqrt(rr_new) < tol_eff:
                break  # free subproblem solved; recheck globally outside
            beta = rr_new / rr
            rr = rr_new
            for l in range(nv):
                p[l] = r_red[l] + beta * p[l] if free[l] else 0.0
    sse = 0.0
    for r in range(nr):
        res = -rhs[r]
        for e in range(row_ptr[r], row_ptr[r + 1]):
            res += entry_w[e] * x[entry_local[e]]
        sse += res * res
    return x, it, sse, converged


@njit(parallel=True, cache=True)
def _solve_all_chains(
    chain_col_ptr,
    chain_row_ptr,
    entry_ptr,
    entry_local,
    entry_w,
    rhs,
    lo,
    hi,
    max_iter,
    tol,
):
    nc = len(chain_col_ptr) - 1
    x_out = np.zeros(chain_col_ptr[nc])
    iters = np.zeros(nc, dtype=np.int64)
    sse = np.zeros(nc)
    converged = np.zeros(nc, dtype=np.bool_)
    for c in prange(nc):
        r0 = chain_row_ptr[c]
        r1 = chain_row_ptr[c + 1]
        e0 = entry_ptr[r0]
        nv = chain_col_ptr[c + 1] - chain_col_ptr[c]
        x, it, s, conv = _pg_chain(
            entry_ptr[r0 : r1 + 1] - e0,
            entry_local[e0 : entry_ptr[r1]],
            entry_w[e0 : entry_ptr[r1]],
            rhs[r0:r1],
            nv,
            lo,
            hi,
            max_iter,
            tol,
        )
        x_out[chain_col_ptr[c] : chain_col_ptr[c + 1]] = x
        iters[c] = it
        sse[c] = s
        converged[c] = conv
    return x_out, iters, sse, converged


def solve_chain(
    chain: EpipolarChain,
    bounds: SolverBounds,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    tol: float = DEFAULT_TOLERANCE,
) -> np.ndarray:
    """Box-constrained least-squares values for one chain's variables.

    Warns (and returns the best iterate) if the iteration cap is reached
    before the projected-gradient norm drops below tolerance.
    """
    x, iters, sse, converged = _pg_chain(
        chain.row_ptr.astype(np.int64),
        chain.entry_local.astype(np.int64),
        chain.entry_weight.astype(np.float64),
        chain.rhs.astype(np.float64),
        chain.n_variables,
        float(bounds.lower),
        float(bounds.upper),
        max_iterations,
        tol,
    )
    if not converged:
        warnings.warn(
            f"chain with {chain.n_variables} variables did not converge in "
            f"{iters} iterations (sse={sse:.3g})",
            RuntimeWarning,
            stacklevel=2,
        )
    return x


@dataclass
class ChainSolveReport:
    """Per-chain diagnostics of an epipolar solve."""

    n_chains: int
    iterations: np.ndarray
    residual_sse: np.ndarray
    converged: np.ndarray
    chain_sizes: np.ndarray
    infeasible_rows: int

    def to_dict(self) -> dict:
        return {
            "n_chains": int(self.n_chains),
            "iterations_total": int(self.iterations.sum()),
            "iterations_max": int(self.iterations.max()) if len(self.iterations) else 0,
            "residual_sse_total": float(self.residual_sse.sum()),
            "unconverged_chains": int((~self.converged).sum()),
            "chain_size_min": int(self.chain_sizes.min()) if len(self.chain_sizes) else 0,
            "chain_size_max": int(self.chain_sizes.max()) if len(self.chain_sizes) else 0,
            "chain_size_mean": float(self.chain_sizes.mean())
            if len(self.chain_sizes)
            else 0.0,
            "infeasible_rows": int(self.infeasible_rows),
        }


def solve_eo(
    system: SparseSystem,
    bounds: Optional[SolverBounds] = None,
    n_threads: int = 1,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    tol: float = DEFAULT_TOLERANCE,
    chains: Optional[ChainSet] = None,
    with_report: bool = False,
):
    """Solve every chain independently and scatter into pattern rasters.

    Pattern pixels appearing in no constraint are set to 0 (they emit no
    light). Chains are independent work items; results are keyed by chain,
    so the outcome does not depend on scheduling order.
    """
    if bounds is None:
        bounds = SolverBounds()
    if chains is None:
        chains = pack_chains(system)

    from numba import config as _numba_config

    old = get_num_threads()
    try:
        set_num_threads(min(max(1, n_threads), _numba_config.NUMBA_NUM_THREADS))
        x_packed, iters, sse, converged = _solve_all_chains(
            chains.chain_col_ptr,
            chains.chain_row_ptr,
            chains.entry_ptr,
            chains.entry_local,
            chains.entry_weight,
            chains.rhs,
            float(bounds.lower),
            float(bounds.upper),
            max_iterations,
            tol,
        )
    finally:
        set_num_threads(old)

    if not converged.all():
        bad = np.flatnonzero(~converged)
        warnings.warn(
            f"{len(bad)} chains hit the iteration cap (ids {bad[:10].tolist()}...)",
            RuntimeWarning,
            stacklevel=2,
        )

    p = np.zeros(system.A.shape[1])
    p[chains.cols] = x_packed
    patterns = system.split_columns(p)
    if not with_report:
        return patterns
    report = ChainSolveReport(
        n_chains=chains.n_chains,
        iterations=iters,
        residual_sse=sse,
        converged=converged,
        chain_sizes=np.diff(chains.chain_col_ptr),
        infeasible_rows=len(system.infeasible_pixels),
    )
    return patterns, report


def solve_lf(
    system: SparseSystem,
    rel_tol: float = 1e-8,
    max_iterations: int = 5_000,
    with_raw: bool = False,
):
    """Global unconstrained least squares plus the range-compressing rescale.

    The full stacked solution vector is affinely mapped so its minimum lands
    on 0 and its maximum on 255.
    """
    result = lsmr(
        system.A,
        system.rhs,
        atol=rel_tol,
        btol=rel_tol,
        maxiter=max_iterations,
    )
    p_raw, istop = result[0], result[1]
    if istop == 7 and not np.all(np.isfinite(p_raw)):
        raise SolverError(f"sparse least squares diverged (istop={istop})")
    span = p_raw.max() - p_raw.min()
    if span > 0:
        p = (p_raw - p_raw.min()) * (255.0 / span)
    else:
        p = p_raw - p_raw.min()
    patterns = system.split_columns(p)
    if with_raw:
        return patterns, p_raw
    return patterns


# ---------------------------------------------------------------------------
# Estimator-style wrappers


def _as_target_images(scene: SceneDescription, targets) -> list[list[TargetImage]]:
    """Normalize target input to one TargetImage list per color channel."""
    imgs = []
    for si, t in enumerate(targets):
        img = t.image if isinstance(t, TargetImage) else np.asarray(t, dtype=float)
        sid = t.surface if isinstance(t, TargetImage) else si
        imgs.append((sid, img))
    channels = {img.ndim for _, img in imgs}
    if channels == {2}:
        return [[TargetImage(sid, img) for sid, img in imgs]]
    if channels == {3}:
        nch = imgs[0][1].shape[2]
        return [
            [TargetImage(sid, img[..., ch]) for sid, img in imgs]
            for ch in range(nch)
        ]
    raise ValueError("targets must be all 2-D or all 3-D rasters")


class _ScenePatternSolver(BaseEstimator):
    """Shared fit stage: calibrate the scene and build the q lookup."""

    def fit(self, scene: SceneDescription, y=None):
        from .calib import decode_correspondences, fill_holes

        self.scene_ = scene
        self.geometry_ = trace_capture_geometry(scene)
        maps = []
        for j in range(len(scene.projectors)):
            cmap = decode_correspondences(
                scene, j, self.geometry_, contrast_floor=self.contrast_floor
            )
            if self.fill_map_holes:
                cmap = fill_holes(cmap)
            maps.append(cmap)
        self.maps_ = maps
        self.qmap_ = build_inverse_projection(scene, maps, self.geometry_)
        return self

    def _check_fitted(self):
        if not hasattr(self, "qmap_"):
            raise RuntimeError("solver must be fitted with a scene first")

    def _systems(self, targets) -> list[SparseSystem]:
        from .system import replace_targets

        per_channel = _as_target_images(self.scene_, targets)
        base = assemble(self.scene_, self.qmap_, per_channel[0])
        systems = [base]
        for chan in per_channel[1:]:
            systems.append(replace_targets(self.scene_, base, chan))
        return systems

    @staticmethod
    def _merge_channels(per_channel: list[list[PatternImage]]) -> list[PatternImage]:
        if len(per_channel) == 1:
            return per_channel[0]
        out = []
        for j in range(len(per_channel[0])):
            stacked = np.stack([pc[j].values for pc in per_channel], axis=-1)
            out.append(PatternImage(projector=j, values=stacked))
        return out

    def score(self, targets, patterns: Optional[list[PatternImage]] = None) -> float:
        """Mean PSNR (dB) of the rendered recombination over all surfaces."""
        from .render import evaluate_patterns

        self._check_fitted()
        if patterns is None:
            patterns = self.transform(targets)
        per_channel = _as_target_images(self.scene_, targets)
        reports = evaluate_patterns(
            self.scene_, self.qmap_, patterns, per_channel
        )
        vals = [r.psnr for r in reports if np.isfinite(r.psnr)]
        return float(np.mean(vals)) if vals else float("inf")


class EpipolarPatternSolver(_ScenePatternSolver):
    """Epipolar-chain box-constrained pattern generation.

    fit() calibrates against the scene (Gray-code decode + hole filling) and
    caches the inverse projection lookup; transform() turns target images
    into per-projector patterns.
    """

    def __init__(
        self,
        lower: float = 0.0,
        upper: float = 255.0,
        n_threads: int = 1,
        max_iterations: int = DEFAULT_MAX_ITERATIONS,
        tol: float = DEFAULT_TOLERANCE,
        fill_map_holes: bool = True,
        contrast_floor: float = 0.02,
    ):
        self.lower = lower
        self.upper = upper
        self.n_threads = n_threads
        self.max_iterations = max_iterations
        self.tol = tol
        self.fill_map_holes = fill_map_holes
        self.contrast_floor = contrast_floor

    def transform(self, targets) -> list[PatternImage]:
        self._check_fitted()
        bounds = SolverBounds(self.lower, self.upper)
        systems = self._systems(targets)
        chains = pack_chains(systems[0])
        per_channel = []
        reports = []
        for system in systems:
            chans = ChainSet(
                chains.chain_col_ptr,
                chains.cols,
                chains.chain_row_ptr,
                chains.rows,
                chains.entry_ptr,
                chains.entry_local,
                chains.entry_weight,
                system.rhs[chains.rows],
            )
            patterns, report = solve_eo(
                system,
                bounds,
                n_threads=self.n_threads,
                max_iterations=self.max_iterations,
                tol=self.tol,
                chains=chans,
                with_report=True,
            )
            per_channel.append(patterns)
            reports.append(report)
        self.system_ = systems[0]
        self.chain_report_ = reports
        return self._merge_channels(per_channel)


class LinearFactorizationSolver(_ScenePatternSolver):
    """Global least-squares baseline with range normalization."""

    def __init__(
        self,
        rel_tol: float = 1e-8,
        max_iterations: int = 5_000,
        fill_map_holes: bool = True,
        contrast_floor: float = 0.02,
    ):
        self.rel_tol = rel_tol
        self.max_iterations = max_iterations
        self.fill_map_holes = fill_map_holes
        self.contrast_floor = contrast_floor

    def transform(self, targets) -> list[PatternImage]:
        self._check_fitted()
        systems = self._systems(targets)
        per_channel = []
        raws = []
        for system in systems:
            patterns, raw = solve_lf(
                system,
                rel_tol=self.rel_tol,
                max_iterations=self.max_iterations,
                with_raw=True,
            )
            per_channel.append(patterns)
            raws.append(raw)
        self.system_ = systems[0]
        self.raw_solution_ = raws if len(raws) > 1 else raws[0]
        return self._merge_channels(per_channel)
