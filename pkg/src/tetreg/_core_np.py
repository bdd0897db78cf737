"""Vectorized numpy fallback for the compiled element kernels in tetreg._core."""

from __future__ import annotations

import numpy as np


def _shape_gradient_table(nodes: np.ndarray, tets: np.ndarray):
    """Per-tet shape-function gradients (n_t, 4, 3) and signed volumes (n_t,)."""
    p0 = nodes[tets[:, 0]]
    edges = np.stack(
        [nodes[tets[:, 1]] - p0, nodes[tets[:, 2]] - p0, nodes[tets[:, 3]] - p0], axis=1
    )  # (n_t, 3, 3), row k = edge to vertex k+1
    det = np.linalg.det(edges)
    inv = np.linalg.inv(edges)  # columns of inv are gradients of N1..N3
    grads = np.empty((len(tets), 4, 3))
    grads[:, 1:, :] = np.swapaxes(inv, 1, 2)
    grads[:, 0, :] = -grads[:, 1:, :].sum(axis=1)
    return grads, det / 6.0


def tet_volumes(nodes: np.ndarray, tets: np.ndarray) -> np.ndarray:
    p0 = nodes[tets[:, 0]]
    e1 = nodes[tets[:, 1]] - p0
    e2 = nodes[tets[:, 2]] - p0
    e3 = nodes[tets[:, 3]] - p0
    return np.einsum("ij,ij->i", np.cross(e1, e2), e3) / 6.0


def assembly_triplets(nodes: np.ndarray, tets: np.ndarray, lam: float, mu: float):
    grads, vols = _shape_gradient_table(nodes, tets)
    dots = np.einsum("ear,ebr->eab", grads, grads)  # (n_t, 4, 4)
    blocks = lam * np.einsum("ear,ebs->eabrs", grads, grads)
    blocks += mu * np.einsum("eas,ebr->eabrs", grads, grads)
    blocks += mu * dots[:, :, :, None, None] * np.eye(3)[None, None, None]
    blocks *= vols[:, None, None, None, None]

    dof = 3 * tets[:, :, None] + np.arange(3)[None, None, :]  # (n_t, 4, 3)
    rows = np.broadcast_to(dof[:, :, None, :, None], blocks.shape)
    cols = np.broadcast_to(dof[:, None, :, None, :], blocks.shape)
    return rows.ravel().astype(np.int64), cols.ravel().astype(np.int64), blocks.ravel()


def jacobian_dets(nodes: np.ndarray, tets: np.ndarray, u: np.ndarray) -> np.ndarray:
    grads, _ = _shape_gradient_table(nodes, tets)
    grad_u = np.einsum("eai,eaj->eij", u[tets], grads)
    return np.linalg.det(np.eye(3)[None] + grad_u)
