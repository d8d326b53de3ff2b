"""Compiled inner loops of the flow/transport solver.

Flow arrays use a member-innermost layout ``(n_cells, ..., n_members)`` so
the banded Cholesky factor/solve loops vectorize across the ensemble.
Cell ``c = j * nx + i``.  The matrix bandwidth equals ``nx``.
"""
import numba as nb
import numpy as np

_JIT = dict(cache=True, nogil=True, fastmath=False, boundscheck=False, error_model="numpy")


@nb.njit(**_JIT)
def transmissibilities(K, nx, ny, dx, dy, bc_fixed):
    """Face transmissibilities per unit thickness, harmonic interface means.

    K: (N, E).  bc_fixed: (4,) booleans for south, north, west, east.
    Returns Tx (N, E) for the face between c and c+1 (zero on the last
    column), Ty (N, E) for the face between c and c+nx, and Tb (N, 4, E)
    boundary-face transmissibilities (zero for no-flow edges).
    """
    N, E = K.shape
    Tx = np.zeros((N, E))
    Ty = np.zeros((N, E))
    Tb = np.zeros((N, 4, E))
    ax = dy / dx
    ay = dx / dy
    for j in range(ny):
        for i in range(nx):
            c = j * nx + i
            for e in range(E):
                k0 = K[c, e]
                if i < nx - 1:
                    k1 = K[c + 1, e]
                    Tx[c, e] = 2.0 * k0 * k1 / (k0 + k1) * ax
                if j < ny - 1:
                    k1 = K[c + nx, e]
                    Ty[c, e] = 2.0 * k0 * k1 / (k0 + k1) * ay
                if j == 0 and bc_fixed[0]:
                    Tb[c, 0, e] = 2.0 * k0 * ay
                if j == ny - 1 and bc_fixed[1]:
                    Tb[c, 1, e] = 2.0 * k0 * ay
                if i == 0 and bc_fixed[2]:
                    Tb[c, 2, e] = 2.0 * k0 * ax
                if i == nx - 1 and bc_fixed[3]:
                    Tb[c, 3, e] = 2.0 * k0 * ax
    return Tx, Ty, Tb


@nb.njit(**_JIT)
def assemble(Tx, Ty, Tb, nx, storage, bc_head, pinned, pin_head):
    """Lower-band matrix (N, nx+1, E) and constant rhs (N, E).

    storage: S_s * cell volume / dt.  bc_head: (4,) edge heads.
    Pinned cells get an identity row; their couplings move to the rhs.
    """
    N, E = Tx.shape
    bw = nx
    A = np.zeros((N, bw + 1, E))
    b = np.zeros((N, E))
    for c in range(N):
        for e in range(E):
            d = storage
            for s in range(4):
                d += Tb[c, s, e]
                b[c, e] += Tb[c, s, e] * bc_head[s]
            A[c, 0, e] = d
    for c in range(N):
        for e in range(E):
            t = Tx[c, e]
            if t > 0.0:
                A[c, 0, e] += t
                A[c + 1, 0, e] += t
                A[c + 1, 1, e] = -t
            t = Ty[c, e]
            if t > 0.0:
                A[c, 0, e] += t
                A[c + nx, 0, e] += t
                A[c + nx, bw, e] = -t
    for c in range(N):
        if not pinned[c]:
            continue
        for e in range(E):
            # move couplings to neighbors' rhs, then make the row trivial
            if c >= 1 and A[c, 1, e] != 0.0:
                b[c - 1, e] -= A[c, 1, e] * pin_head[c]
                A[c, 1, e] = 0.0
            if c >= nx and A[c, bw, e] != 0.0:
                b[c - nx, e] -= A[c, bw, e] * pin_head[c]
                A[c, bw, e] = 0.0
            if c + 1 < N and A[c + 1, 1, e] != 0.0:
                b[c + 1, e] -= A[c + 1, 1, e] * pin_head[c]
                A[c + 1, 1, e] = 0.0
            if c + nx < N and A[c + nx, bw, e] != 0.0:
                b[c + nx, e] -= A[c + nx, bw, e] * pin_head[c]
                A[c + nx, bw, e] = 0.0
            A[c, 0, e] = 1.0
            b[c, e] = pin_head[c]
    return A, b


@nb.njit(**_JIT)
def band_cholesky(A, bw):
    """In-place-free lower banded Cholesky; L[i, k] = L(i, i-k)."""
    N, _, E = A.shape
    L = np.zeros_like(A)
    acc = np.empty(E)
    for i in range(N):
        kmax = min(bw, i)
        for k in range(kmax, -1, -1):
            j = i - k
            for e in range(E):
                acc[e] = A[i, k, e]
            m0 = max(i - kmax, j - min(bw, j))
            for m in range(m0, j):
                ki = i - m
                kj = j - m
                for e in range(E):
                    acc[e] -= L[i, ki, e] * L[j, kj, e]
            if k == 0:
                for e in range(E):
                    if acc[e] <= 0.0:
                        return L, False
                    L[i, 0, e] = np.sqrt(acc[e])
            else:
                for e in range(E):
                    L[i, k, e] = acc[e] / L[j, 0, e]
    return L, True


@nb.njit(**_JIT)
def band_solve(L, rhs, bw, out):
    N, _, E = L.shape
    acc = np.empty(E)
    for i in range(N):
        for e in range(E):
            acc[e] = rhs[i, e]
        for k in range(1, min(bw, i) + 1):
            for e in range(E):
                acc[e] -= L[i, k, e] * out[i - k, e]
        for e in range(E):
            out[i, e] = acc[e] / L[i, 0, e]
    for i in range(N - 1, -1, -1):
        for e in range(E):
            acc[e] = out[i, e]
        for k in range(1, min(bw, N - 1 - i) + 1):
            for e in range(E):
                acc[e] -= L[i + k, k, e] * out[i + k, e]
        for e in range(E):
            out[i, e] = acc[e] / L[i, 0, e]


@nb.njit(**_JIT)
def upwind_transport(conc, head, Tx, Ty, Tb, nx, bc_head, bc_conc, pore_volume, dt, cfl_max,
                     max_substeps):
    """Advance concentration over ``dt`` with first-order upwinding.

    Advective (non-conservative) form: each cell relaxes towards the
    concentrations of its inflow neighbors, which keeps the update a convex
    combination under CFL <= 1.  Returns the number of substeps used per
    member, -1 for a member with non-finite fluxes, or -2 if more than
    ``max_substeps`` would be needed.
    """
    N, E = conc.shape
    nsub_used = np.zeros(E, dtype=np.int64)
    qin = np.zeros(N)
    c = np.empty(N)
    cn = np.empty(N)
    for e in range(E):
        # total inflow per cell to size the substep
        for i in range(N):
            qin[i] = 0.0
        finite = True
        for i in range(N):
            h = head[i, e]
            t = Tx[i, e]
            if t > 0.0:
                q = t * (h - head[i + 1, e])
                if q > 0.0:
                    qin[i + 1] += q
                else:
                    qin[i] -= q
            t = Ty[i, e]
            if t > 0.0:
                q = t * (h - head[i + nx, e])
                if q > 0.0:
                    qin[i + nx] += q
                else:
                    qin[i] -= q
            for s in range(4):
                t = Tb[i, s, e]
                if t > 0.0:
                    q = t * (bc_head[s] - h)
                    if q > 0.0:
                        qin[i] += q
        cfl = 0.0
        for i in range(N):
            if not np.isfinite(qin[i]):
                finite = False
            v = qin[i] * dt / pore_volume
            if v > cfl:
                cfl = v
        if not finite:
            nsub_used[e] = -1
            continue
        if cfl / cfl_max > max_substeps:
            nsub_used[e] = -2
            continue
        nsub = max(1, int(np.ceil(cfl / cfl_max)))
        nsub_used[e] = nsub
        if cfl == 0.0:
            continue
        tau = dt / nsub / pore_volume
        for i in range(N):
            c[i] = conc[i, e]
        for _ in range(nsub):
            for i in range(N):
                cn[i] = 0.0
            for i in range(N):
                h = head[i, e]
                t = Tx[i, e]
                if t > 0.0:
                    q = t * (h - head[i + 1, e])
                    if q > 0.0:
                        cn[i + 1] += q * (c[i] - c[i + 1])
                    else:
                        cn[i] -= q * (c[i + 1] - c[i])
                t = Ty[i, e]
                if t > 0.0:
                    q = t * (h - head[i + nx, e])
                    if q > 0.0:
                        cn[i + nx] += q * (c[i] - c[i + nx])
                    else:
                        cn[i] -= q * (c[i + nx] - c[i])
                for s in range(4):
                    t = Tb[i, s, e]
                    if t > 0.0:
                        q = t * (bc_head[s] - h)
                        if q > 0.0:
                            cn[i] += q * (bc_conc[s] - c[i])
            for i in range(N):
                c[i] = c[i] + tau * cn[i]
        for i in range(N):
            conc[i, e] = c[i]
    return nsub_used


@nb.njit(**_JIT)
def advance(K, head, conc, n_steps, nx, ny, dx, dy, storage, bc_fixed, bc_head,
            bc_conc, pinned, pin_head, transport, pore_volume, dt, cfl_max, max_substeps):
    """Advance heads (and concentrations) of all members by ``n_steps``.

    K, head, conc: (N, E), modified in place.  Returns (ok, max substeps);
    ok is 0 on success, 1 if the flow matrix is not positive definite,
    2 if a transport flux is not finite, 3 if the substep limit is hit.
    """
    Tx, Ty, Tb = transmissibilities(K, nx, ny, dx, dy, bc_fixed)
    A, b = assemble(Tx, Ty, Tb, nx, storage, bc_head, pinned, pin_head)
    L, ok = band_cholesky(A, nx)
    if not ok:
        return 1, 0
    N, E = head.shape
    rhs = np.empty((N, E))
    max_sub = 0
    for _ in range(n_steps):
        for c in range(N):
            if pinned[c]:
                for e in range(E):
                    rhs[c, e] = b[c, e]
            else:
                for e in range(E):
                    rhs[c, e] = storage * head[c, e] + b[c, e]
        band_solve(L, rhs, nx, head)
        if transport:
            used = upwind_transport(conc, head, Tx, Ty, Tb, nx, bc_head, bc_conc,
                                    pore_volume, dt, cfl_max, max_substeps)
            for e in range(E):
                if used[e] == -1:
                    return 2, max_sub
                if used[e] == -2:
                    return 3, max_sub
                if used[e] > max_sub:
                    max_sub = used[e]
    return 0, max_sub
