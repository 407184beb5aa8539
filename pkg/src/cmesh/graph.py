"""Graph Laplacians of mesh topologies and their spectral scaling."""

from __future__ import annotations

import numpy as np
from scipy.sparse import csr_matrix, diags, identity

from .mesh import MeshError, build_adjacency, degrees

COMBINATORIAL = "combinatorial"
NORMALIZED = "normalized"


class LaplacianError(ValueError):
    pass


class GraphLaplacian:
    """Sparse Laplacian with its kind and cached largest eigenvalue.

    Combinatorial: L = D - E.  Normalized: L = I - D^{-1/2} E D^{-1/2},
    whose spectrum lies in [0, 2].
    """

    __slots__ = ("matrix", "kind", "lambda_max")

    def __init__(self, matrix: csr_matrix, kind: str, lambda_max: float):
        self.matrix = matrix
        self.kind = kind
        self.lambda_max = lambda_max

    @property
    def shape(self):
        return self.matrix.shape

    def scaled(self, dtype=np.float64) -> csr_matrix:
        """2 L / lambda_max - I, the operator Chebyshev filters act on."""
        return scale_laplacian(self.matrix, self.lambda_max).astype(dtype)


def build_laplacian(adj, kind=NORMALIZED) -> GraphLaplacian:
    """Assemble a Laplacian from a binary adjacency matrix.

    The normalized kind requires every vertex to have at least one
    neighbour; the largest eigenvalue is estimated by power iteration
    and cached on the result.
    """
    n = adj.shape[0]
    d = degrees(adj)
    if kind == COMBINATORIAL:
        lap = (diags(d) - adj).tocsr()
    elif kind == NORMALIZED:
        if (d == 0).any():
            raise LaplacianError(
                f"vertex {int(np.argmax(d == 0))} is isolated; "
                "normalized Laplacian undefined")
        dm = diags(1.0 / np.sqrt(d))
        lap = (identity(n) - dm @ adj @ dm).tocsr()
    else:
        raise LaplacianError(f"unknown Laplacian kind {kind!r}")
    lap.sort_indices()
    lam = estimate_lambda_max(lap)
    return GraphLaplacian(lap, kind, lam)


def laplacian_for_mesh(triangles, n, kind=NORMALIZED) -> GraphLaplacian:
    return build_laplacian(build_adjacency(triangles, n), kind)


def estimate_lambda_max(lap, tol=1e-6, max_iter=10000, seed=7) -> float:
    """Largest eigenvalue of a symmetric PSD matrix.

    Small operators go through a dense solve.  Larger ones use seeded
    Lanczos iteration: plain power iteration stalls on mesh Laplacians
    because their top eigenvalues cluster, while Lanczos converges well
    inside the ``max_iter`` cap and honours the ``tol`` contract.  The
    fixed start vector keeps repeated hierarchy builds bitwise identical.
    """
    from scipy.sparse.linalg import ArpackNoConvergence, eigsh

    n = lap.shape[0]
    if n <= 32:
        dense = lap.toarray() if hasattr(lap, "toarray") else np.asarray(lap)
        return float(np.linalg.eigvalsh(dense)[-1])
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(n)
    try:
        vals = eigsh(lap, k=1, which="LA", v0=v0, maxiter=max_iter,
                     tol=tol * 1e-2, return_eigenvectors=False)
    except ArpackNoConvergence as exc:
        partial = exc.eigenvalues
        last = float(partial[-1]) if len(partial) else float("nan")
        raise LaplacianError(
            f"Lanczos did not converge in {max_iter} steps "
            f"(last estimate {last:.9g})") from exc
    return float(vals[0])


def scale_laplacian(lap, lambda_max) -> csr_matrix:
    """2 L / lambda_max - I; maps the spectrum into [-1, 1]."""
    if lambda_max <= 0:
        raise LaplacianError(f"lambda_max must be positive, got {lambda_max}")
    n = lap.shape[0]
    out = ((2.0 / lambda_max) * lap - identity(n, format="csr")).tocsr()
    out.sort_indices()
    return out
