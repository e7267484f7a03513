"""Planar homographies, bilinear resampling and the geometric augmentations.

Images are float arrays of shape (C, H, W). Pixel ``(x, y)`` means column
``x``, row ``y``, with integer coordinates at pixel centres. The four corners
of a crop are mapped onto the centres of the four corner pixels of the
output, so a full-image crop at the same size is an exact identity.
"""

from __future__ import annotations

import math

import numpy as np


class DegenerateQuadError(ValueError):
    pass


def solve_homography(src, dst) -> np.ndarray:
    """3x3 ``H`` with ``H @ [x, y, 1] ~ [u, v, 1]`` for four point pairs.

    Solves the 8x8 linear system obtained by fixing ``H[2, 2] = 1``.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != (4, 2) or dst.shape != (4, 2):
        raise ValueError(f"need four (x, y) pairs, got {src.shape} and {dst.shape}")
    A = np.zeros((8, 8))
    rhs = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        A[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        A[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        rhs[2 * i] = u
        rhs[2 * i + 1] = v
    try:
        h = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        raise DegenerateQuadError("degenerate point configuration: homography is singular") from None
    return np.append(h, 1.0).reshape(3, 3)


def apply_homography(H: np.ndarray, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    hom = np.c_[pts, np.ones(len(pts))] @ H.T
    return hom[:, :2] / hom[:, 2:3]


def check_convex(corners) -> None:
    """Raise unless the four corners form a strictly convex quadrilateral."""
    c = np.asarray(corners, dtype=np.float64)
    if c.shape != (4, 2):
        raise DegenerateQuadError(f"need 4 corners, got shape {c.shape}")
    cross = []
    for i in range(4):
        p, q, r = c[i], c[(i + 1) % 4], c[(i + 2) % 4]
        cross.append((q[0] - p[0]) * (r[1] - q[1]) - (q[1] - p[1]) * (r[0] - q[0]))
    cross = np.array(cross)
    scale = max(1.0, float(np.abs(c).max())) ** 2
    if np.any(np.abs(cross) <= 1e-9 * scale) or not (np.all(cross > 0) or np.all(cross < 0)):
        raise DegenerateQuadError(f"corners {c.tolist()} do not form a convex quadrilateral")


def square_corners(size: int) -> np.ndarray:
    s = size - 1
    return np.array([[0, 0], [s, 0], [s, s], [0, s]], dtype=np.float64)


def bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample (C, H, W) at real coordinates; out-of-range points take the nearest edge pixel."""
    c, h, w = image.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xs).astype(np.int64), w - 2) if w > 1 else np.zeros(xs.shape, np.int64)
    y0 = np.minimum(np.floor(ys).astype(np.int64), h - 2) if h > 1 else np.zeros(ys.shape, np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = image[:, y0, x0] * (1 - fx) + image[:, y0, x1] * fx
    bot = image[:, y1, x0] * (1 - fx) + image[:, y1, x1] * fx
    return top * (1 - fy) + bot * fy


def warp_quad(image: np.ndarray, corners, size: int) -> np.ndarray:
    """Map the quadrilateral ``corners`` (TL, TR, BR, BL) onto a ``size`` x ``size`` square."""
    if size < 2:
        raise ValueError(f"output size must be >= 2, got {size}")
    check_convex(corners)
    H = solve_homography(corners, square_corners(size))
    H_inv = np.linalg.inv(H)
    v, u = np.mgrid[0:size, 0:size].astype(np.float64)
    src = apply_homography(H_inv, np.c_[u.ravel(), v.ravel()])
    out = bilinear_sample(np.asarray(image, dtype=np.float64), src[:, 0], src[:, 1])
    return out.reshape(image.shape[0], size, size)


def resize(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize to ``size`` x ``size`` (corner pixel centres aligned)."""
    c, h, w = image.shape
    if h == size and w == size:
        return np.asarray(image, dtype=np.float64)
    full = [[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]]
    return warp_quad(image, full, size)


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image centre; uncovered pixels take the nearest edge value."""
    if degrees == 0.0:
        return image.copy()
    c, h, w = image.shape
    th = math.radians(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    # inverse mapping: rotate output coordinates by -theta
    sx = math.cos(th) * dx + math.sin(th) * dy + cx
    sy = -math.sin(th) * dx + math.cos(th) * dy + cy
    return bilinear_sample(image, sx.ravel(), sy.ravel()).reshape(c, h, w).astype(image.dtype)


def rotate_batch(images: np.ndarray, degrees: np.ndarray) -> np.ndarray:
    """Per-image rotation of an (N, C, H, W) batch, same sampling as :func:`rotate`."""
    n, c, h, w = images.shape
    th = np.radians(np.asarray(degrees, dtype=np.float64)).reshape(n, 1, 1)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    sx = np.clip(np.cos(th) * dx + np.sin(th) * dy + cx, 0.0, w - 1.0)
    sy = np.clip(-np.sin(th) * dx + np.cos(th) * dy + cy, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(sx).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(sy).astype(np.int64), h - 2)
    fx = (sx - x0)[:, None]
    fy = (sy - y0)[:, None]
    idx = np.arange(n)[:, None, None]

    def at(yi, xi):
        return images[idx, :, yi, xi].transpose(0, 3, 1, 2)

    top = at(y0, x0) * (1 - fx) + at(y0, x0 + 1) * fx
    bot = at(y0 + 1, x0) * (1 - fx) + at(y0 + 1, x0 + 1) * fx
    out = top * (1 - fy) + bot * fy
    keep = np.asarray(degrees).reshape(n) == 0.0
    if np.any(keep):
        out[keep] = images[keep]
    return out.astype(images.dtype)
