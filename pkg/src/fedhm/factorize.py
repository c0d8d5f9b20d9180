"""Low-rank factorization of dense and conv weights.

Conv weights (n, m, k, k) are unrolled to an (m*k, n*k) matrix with
``M[i*k + ky, o*k + kx] = W[o, i, ky, kx]``. With this ordering a rank-r
factor pair reshapes to a (k x 1) conv with r filters followed by a (1 x k)
conv with n filters, and the composition equals the full conv exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class SvdResult:
    U: np.ndarray  # (rows, r)
    S: np.ndarray  # (r,), non-increasing
    Vt: np.ndarray  # (r, cols)

    @property
    def rank(self) -> int:
        return self.S.shape[0]


@dataclass
class FactorizedPair:
    """U/V factors of one layer. Dense: U (m, r), V (n, r). Conv: U (r, m, k, 1), V (n, r, 1, k)."""

    U: np.ndarray
    V: np.ndarray
    rank: int

    @property
    def is_conv(self) -> bool:
        return self.U.ndim == 4


def unroll_conv(W: np.ndarray) -> np.ndarray:
    if W.ndim != 4 or W.shape[2] != W.shape[3]:
        raise ValueError(f"unroll_conv expects (n, m, k, k), got {W.shape}")
    n, m, k, _ = W.shape
    return np.ascontiguousarray(W.transpose(1, 2, 0, 3)).reshape(m * k, n * k)


def fold_conv(M: np.ndarray, n: int, m: int, k: int) -> np.ndarray:
    if M.shape != (m * k, n * k):
        raise ValueError(f"fold_conv: matrix {M.shape} is not ({m * k}, {n * k})")
    return np.ascontiguousarray(M.reshape(m, k, n, k).transpose(2, 0, 1, 3))


def _fix_signs(U, Vt):
    # largest-magnitude entry of each left vector made non-negative; argmax picks the lowest index on ties
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs, Vt * signs[:, None]


def truncated_svd(M: np.ndarray, r: int) -> SvdResult:
    """Rank-r truncated SVD with a deterministic sign convention."""
    M = np.asarray(M)
    if M.ndim != 2 or M.size == 0:
        raise ValueError(f"truncated_svd needs a non-empty matrix, got shape {M.shape}")
    if r < 1:
        raise ValueError("rank must be >= 1")
    r = min(r, *M.shape)
    U, S, Vt = np.linalg.svd(M, full_matrices=False)
    U, Vt = _fix_signs(U[:, :r], Vt[:r])
    return SvdResult(U=U, S=S[:r].copy(), Vt=Vt)


def max_rank(shape: tuple) -> int:
    """Largest meaningful rank: min(m*k, n*k) for conv (n, m, k, k), min(m, n) for dense (m, n)."""
    if len(shape) == 4:
        n, m, k, _ = shape
        return min(m * k, n * k)
    if len(shape) == 2:
        return min(shape)
    raise ValueError(f"not a dense or conv weight shape: {shape}")


def layer_rank(full_shape: tuple, ratio: float) -> int:
    if not ratio > 0 or ratio > 1:
        raise ValueError(f"rank ratio must be in (0, 1], got {ratio}")
    # tiny slack so e.g. 0.29 * 100 lands on 29, not 28
    return max(1, math.floor(ratio * max_rank(full_shape) + 1e-9))


def _as_matrix(W):
    return unroll_conv(W) if W.ndim == 4 else W


def spectral_factorize(W: np.ndarray, r: int) -> FactorizedPair:
    """Balanced spectral split: U = U_r sqrt(S_r), V = V_r sqrt(S_r).

    Ranks above the layer maximum are clamped; ``pair.rank`` is the effective rank.
    """
    svd = truncated_svd(_as_matrix(W).astype(np.float64, copy=False), r)
    root = np.sqrt(svd.S)
    Um = svd.U * root
    Vm = svd.Vt.T * root
    r = svd.rank
    if W.ndim == 2:
        return FactorizedPair(U=Um.astype(W.dtype), V=Vm.astype(W.dtype), rank=r)
    n, m, k, _ = W.shape
    U = Um.reshape(m, k, r).transpose(2, 0, 1)[..., None]
    V = Vm.reshape(n, k, r).transpose(0, 2, 1)[:, :, None, :]
    return FactorizedPair(U=np.ascontiguousarray(U, dtype=W.dtype), V=np.ascontiguousarray(V, dtype=W.dtype), rank=r)


def unrolled_factors(U: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Matrix forms (rows, r) of a factor pair; identity for dense factors."""
    if U.ndim == 2:
        return U, V
    r, m, k, _ = U.shape
    n = V.shape[0]
    Um = U[..., 0].transpose(1, 2, 0).reshape(m * k, r)
    Vm = V[:, :, 0, :].transpose(0, 2, 1).reshape(n * k, r)
    return Um, Vm


def _factor_shapes_back(gUm, gVm, U, V):
    if U.ndim == 2:
        return gUm, gVm
    r, m, k, _ = U.shape
    n = V.shape[0]
    gU = gUm.reshape(m, k, r).transpose(2, 0, 1)[..., None]
    gV = gVm.reshape(n, k, r).transpose(0, 2, 1)[:, :, None, :]
    return np.ascontiguousarray(gU), np.ascontiguousarray(gV)


def recover_weight(U: np.ndarray, V: np.ndarray) -> np.ndarray:
    Um, Vm = unrolled_factors(U, V)
    if Um.shape[1] != Vm.shape[1]:
        raise ValueError(f"factor ranks disagree: {U.shape} vs {V.shape}")
    M = Um @ Vm.T
    if U.ndim == 2:
        return M
    r, m, k, _ = U.shape
    return fold_conv(M, V.shape[0], m, k)


def recover_layer(pair: FactorizedPair) -> np.ndarray:
    return recover_weight(pair.U, pair.V)


def frobenius_penalty(U: np.ndarray, V: np.ndarray, lam: float) -> float:
    Um, Vm = unrolled_factors(U, V)
    return 0.5 * lam * float(np.sum((Um @ Vm.T) ** 2))


def frobenius_decay_grad(U: np.ndarray, V: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of (lam/2)||U V^T||_F^2: (lam U V^T V, lam V U^T U), in the factors' own shapes."""
    if lam == 0:
        return np.zeros_like(U), np.zeros_like(V)
    Um, Vm = unrolled_factors(U, V)
    gUm = lam * (Um @ (Vm.T @ Vm))
    gVm = lam * (Vm @ (Um.T @ Um))
    return _factor_shapes_back(gUm, gVm, U, V)
