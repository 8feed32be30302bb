"""Common spatial patterns fitted on training windows only."""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from darnet.preprocess import DecisionWindow

CSP_MAGIC = b"CSPT"
CSP_VERSION = 1
_CSP_HEADER = struct.Struct("<4sHHHHd")


class CspError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CspTransform:
    projection: np.ndarray  # N x c_in, columns are spatial filters
    class_covariances: tuple[np.ndarray, np.ndarray]
    regularization: float
    eigenvalues: np.ndarray  # generalized eigenvalue of each selected column

    @property
    def n_channels(self) -> int:
        return self.projection.shape[0]

    @property
    def n_components(self) -> int:
        return self.projection.shape[1]

    def composite(self) -> np.ndarray:
        c0, c1 = self.class_covariances
        return c0 + c1 + 2 * self.regularization * np.eye(self.n_channels)


def normalized_covariance(x: np.ndarray) -> np.ndarray:
    """``X^T X / trace(X^T X)`` for one ``T x N`` window."""
    x = np.asarray(x, dtype=np.float64)
    c = x.T @ x
    tr = np.trace(c)
    if not tr > 0:
        raise CspError("window has zero energy; its normalized covariance is undefined")
    return c / tr


def estimate_covariance(windows: Sequence[DecisionWindow] | Sequence[np.ndarray]) -> np.ndarray:
    """Average normalized covariance over the windows of one class."""
    if len(windows) == 0:
        raise CspError("cannot estimate a class covariance from zero windows")
    arrays = [w.data if isinstance(w, DecisionWindow) else w for w in windows]
    n = arrays[0].shape[1]
    acc = np.zeros((n, n))
    for x in arrays:
        if x.shape[1] != n:
            raise CspError(f"windows disagree on channel count ({x.shape[1]} vs {n})")
        acc += normalized_covariance(x)
    acc /= len(arrays)
    return 0.5 * (acc + acc.T)


def default_regularization(c0: np.ndarray, c1: np.ndarray) -> float:
    n = c0.shape[0]
    return 1e-6 * float(np.trace(c0 + c1)) / (2 * n)


def solve_generalized(c0: np.ndarray, c1: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Solve ``(C0 + eps I) w = lam (C0 + C1 + 2 eps I) w`` by whitening.

    Returns eigenvalues (descending) and eigenvectors normalized to unit
    norm under the composite matrix.
    """
    n = c0.shape[0]
    a = c0 + eps * np.eye(n)
    b = a + c1 + eps * np.eye(n)
    d, u = np.linalg.eigh(b)
    if d[0] <= 1e-12 * max(d[-1], 1e-300):
        raise CspError(
            "composite covariance is singular; pass a positive regularization epsilon"
        )
    whiten = u / np.sqrt(d)  # B^{-1/2} up to a rotation
    s = whiten.T @ a @ whiten
    lam, v = np.linalg.eigh(0.5 * (s + s.T))
    w = whiten @ v
    order = np.argsort(-lam, kind="stable")
    return lam[order], w[:, order]


def _fix_signs(w: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(w), axis=0)
    signs = np.sign(w[idx, np.arange(w.shape[1])])
    signs[signs == 0] = 1.0
    return w * signs


def fit_from_covariances(
    c0: np.ndarray, c1: np.ndarray, n_components: int | None = None, epsilon: float | None = None
) -> CspTransform:
    n = c0.shape[0]
    if c0.shape != (n, n) or c1.shape != (n, n):
        raise CspError("class covariances must be square and of equal size")
    if n_components is None:
        n_components = n - n % 2
    if n_components < 2 or n_components % 2 or n_components > n:
        raise CspError(f"n_components must be even and in [2, {n}], got {n_components}")
    eps = default_regularization(c0, c1) if epsilon is None else float(epsilon)
    if eps < 0:
        raise CspError("regularization epsilon must be non-negative")
    lam, w = solve_generalized(c0, c1, eps)
    half = n_components // 2
    pick = list(range(half)) + list(range(n - 1, n - 1 - half, -1))
    proj = _fix_signs(w[:, pick])
    return CspTransform(proj, (c0.copy(), c1.copy()), eps, lam[pick].copy())


def fit(
    train_windows: Sequence[DecisionWindow],
    n_components: int | None = None,
    epsilon: float | None = None,
) -> CspTransform:
    """Fit CSP on labelled training windows.

    Keeps the ``n_components // 2`` filters with the largest class-0
    eigenvalue (descending) followed by the same number with the smallest
    (ascending). Each filter is signed so its largest-magnitude entry is
    positive.
    """
    by_class = {0: [], 1: []}
    for w in train_windows:
        by_class[w.label].append(w)
    if not by_class[0] or not by_class[1]:
        raise CspError("CSP needs training windows from both classes")
    c0 = estimate_covariance(by_class[0])
    c1 = estimate_covariance(by_class[1])
    return fit_from_covariances(c0, c1, n_components, epsilon)


def transform(csp: CspTransform, window: DecisionWindow | np.ndarray) -> np.ndarray:
    """Project one ``T x N`` window to ``c_in x T`` features."""
    x = window.data if isinstance(window, DecisionWindow) else np.asarray(window)
    if x.ndim != 2 or x.shape[1] != csp.n_channels:
        raise CspError(f"window shape {x.shape} does not match {csp.n_channels} CSP channels")
    return csp.projection.T @ x.T


def transform_batch(csp: CspTransform, x: np.ndarray) -> np.ndarray:
    """``n x T x N`` windows to ``n x c_in x T`` features."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != csp.n_channels:
        raise CspError(f"batch shape {x.shape} does not match {csp.n_channels} CSP channels")
    return np.einsum("nc,btn->bct", csp.projection, x)


# --- serialization -----------------------------------------------------------


def encode_csp(csp: CspTransform) -> bytes:
    n, k = csp.projection.shape
    header = _CSP_HEADER.pack(CSP_MAGIC, CSP_VERSION, n, k, 0, csp.regularization)
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes()
        for a in (csp.projection, csp.eigenvalues, *csp.class_covariances)
    )
    blob = header + body
    return blob + struct.pack("<I", zlib.crc32(blob))


def decode_csp(raw: bytes, source: str = "<bytes>") -> CspTransform:
    if len(raw) < _CSP_HEADER.size + 4:
        raise CspError(f"{source}: too short for a CSP file")
    blob, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(blob) != crc:
        raise CspError(f"{source}: checksum mismatch (file corrupted)")
    magic, version, n, k, _, eps = _CSP_HEADER.unpack_from(blob)
    if magic != CSP_MAGIC or version != CSP_VERSION:
        raise CspError(f"{source}: not a CSP file (magic {magic!r}, version {version})")
    sizes = [n * k, k, n * n, n * n]
    expected = _CSP_HEADER.size + 8 * sum(sizes)
    if len(blob) != expected:
        raise CspError(f"{source}: payload holds {len(blob)} bytes, expected {expected}")
    flat = np.frombuffer(blob, dtype="<f8", offset=_CSP_HEADER.size).astype(np.float64)
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    return CspTransform(
        parts[0].reshape(n, k), (parts[2].reshape(n, n), parts[3].reshape(n, n)), eps, parts[1]
    )


def save_csp(csp: CspTransform, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_csp(csp))


def load_csp(path: str | os.PathLike) -> CspTransform:
    return decode_csp(Path(path).read_bytes(), source=str(path))
