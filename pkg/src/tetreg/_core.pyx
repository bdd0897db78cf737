# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-element kernels: stiffness triplets, volumes, deformation Jacobians.

Mirrors tetreg._core_np; the active backend is picked in tetreg.kernels.
"""

import numpy as np

cimport numpy as cnp

ctypedef double vec3[3]


cdef inline double _det3(double a00, double a01, double a02,
                         double a10, double a11, double a12,
                         double a20, double a21, double a22) nogil:
    return (a00 * (a11 * a22 - a12 * a21)
            - a01 * (a10 * a22 - a12 * a20)
            + a02 * (a10 * a21 - a11 * a20))


cdef inline double _shape_gradients(const double[:, ::1] nodes,
                                    const cnp.int64_t[:, ::1] tets,
                                    Py_ssize_t e, vec3 *grad) nogil:
    """Constant shape-function gradients of tet e; returns signed volume."""
    cdef vec3 e1, e2, e3
    cdef Py_ssize_t n0 = tets[e, 0]
    cdef Py_ssize_t k
    for k in range(3):
        e1[k] = nodes[tets[e, 1], k] - nodes[n0, k]
        e2[k] = nodes[tets[e, 2], k] - nodes[n0, k]
        e3[k] = nodes[tets[e, 3], k] - nodes[n0, k]
    cdef double det = _det3(e1[0], e1[1], e1[2], e2[0], e2[1], e2[2], e3[0], e3[1], e3[2])
    # Rows of the inverse edge matrix are the gradients of shape functions
    # 1..3; gradient 0 closes the partition of unity.
    grad[1][0] = (e2[1] * e3[2] - e2[2] * e3[1]) / det
    grad[1][1] = (e2[2] * e3[0] - e2[0] * e3[2]) / det
    grad[1][2] = (e2[0] * e3[1] - e2[1] * e3[0]) / det
    grad[2][0] = (e3[1] * e1[2] - e3[2] * e1[1]) / det
    grad[2][1] = (e3[2] * e1[0] - e3[0] * e1[2]) / det
    grad[2][2] = (e3[0] * e1[1] - e3[1] * e1[0]) / det
    grad[3][0] = (e1[1] * e2[2] - e1[2] * e2[1]) / det
    grad[3][1] = (e1[2] * e2[0] - e1[0] * e2[2]) / det
    grad[3][2] = (e1[0] * e2[1] - e1[1] * e2[0]) / det
    for k in range(3):
        grad[0][k] = -(grad[1][k] + grad[2][k] + grad[3][k])
    return det / 6.0


def tet_volumes(const double[:, ::1] nodes, const cnp.int64_t[:, ::1] tets):
    cdef Py_ssize_t n = tets.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] v = out
    cdef vec3 e1, e2, e3
    cdef Py_ssize_t e, k, n0
    for e in range(n):
        n0 = tets[e, 0]
        for k in range(3):
            e1[k] = nodes[tets[e, 1], k] - nodes[n0, k]
            e2[k] = nodes[tets[e, 2], k] - nodes[n0, k]
            e3[k] = nodes[tets[e, 3], k] - nodes[n0, k]
        v[e] = _det3(e1[0], e1[1], e1[2], e2[0], e2[1], e2[2], e3[0], e3[1], e3[2]) / 6.0
    return out


def assembly_triplets(const double[:, ::1] nodes, const cnp.int64_t[:, ::1] tets,
                      double lam, double mu):
    """COO triplets of the assembled linear-elastic stiffness matrix.

    Entry (3a+r, 3b+s) of each element block is
    V * (lam * g_a[r] g_b[s] + mu * g_a[s] g_b[r] + mu * (g_a . g_b) [r == s]),
    the closed form of the constant-strain tetrahedron.
    """
    cdef Py_ssize_t n_t = tets.shape[0]
    rows_arr = np.empty(n_t * 144, dtype=np.int64)
    cols_arr = np.empty(n_t * 144, dtype=np.int64)
    vals_arr = np.empty(n_t * 144, dtype=np.float64)
    cdef cnp.int64_t[::1] rows = rows_arr
    cdef cnp.int64_t[::1] cols = cols_arr
    cdef double[::1] vals = vals_arr
    cdef vec3 grad[4]
    cdef double vol, dot, val
    cdef Py_ssize_t e, a, b, r, s, idx
    idx = 0
    for e in range(n_t):
        vol = _shape_gradients(nodes, tets, e, grad)
        for a in range(4):
            for b in range(4):
                dot = (grad[a][0] * grad[b][0] + grad[a][1] * grad[b][1]
                       + grad[a][2] * grad[b][2])
                for r in range(3):
                    for s in range(3):
                        val = lam * grad[a][r] * grad[b][s] + mu * grad[a][s] * grad[b][r]
                        if r == s:
                            val += mu * dot
                        rows[idx] = 3 * tets[e, a] + r
                        cols[idx] = 3 * tets[e, b] + s
                        vals[idx] = vol * val
                        idx += 1
    return rows_arr, cols_arr, vals_arr


def jacobian_dets(const double[:, ::1] nodes, const cnp.int64_t[:, ::1] tets,
                  const double[:, ::1] u):
    """det(I + grad u) per tet for a nodal displacement field u of shape (n_nodes, 3)."""
    cdef Py_ssize_t n_t = tets.shape[0]
    out = np.empty(n_t, dtype=np.float64)
    cdef double[::1] dets = out
    cdef vec3 grad[4]
    cdef double f[3][3]
    cdef Py_ssize_t e, a, i, j, node
    for e in range(n_t):
        _shape_gradients(nodes, tets, e, grad)
        for i in range(3):
            for j in range(3):
                f[i][j] = 1.0 if i == j else 0.0
        for a in range(4):
            node = tets[e, a]
            for i in range(3):
                for j in range(3):
                    f[i][j] += u[node, i] * grad[a][j]
        dets[e] = _det3(f[0][0], f[0][1], f[0][2],
                        f[1][0], f[1][1], f[1][2],
                        f[2][0], f[2][1], f[2][2])
    return out
