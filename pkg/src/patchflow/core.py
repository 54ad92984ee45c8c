"""Patch encoders, motion matrices, vector fields, and the forward losses.

Conventions used throughout the package:

* Images are 2-D float arrays indexed ``image[row, col]`` with grayscale
  values nominally in [0, 1].
* A position ``x`` is an integer ``(row, col)`` pair.  The p x p patch at
  ``x`` covers rows ``[row - p//2, row + p - p//2)`` and the same for
  columns, so a 16 x 16 patch spans offsets -8..+7 around its center.
* Displacements are ``(d_row, d_col)`` pairs in pixels.  A pair of frames
  related by a displacement field satisfies
  ``frame2[x] = frame1[x - delta(x)]`` (backward warping).
* Patches are flattened row-major; the rows of an encoder block are
  filters of length ``p*p``.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .errors import BoundsError, GridLookupError, ShapeError


def as_image(a) -> np.ndarray:
    """Validate and convert an array to a float64 grayscale image."""
    img = np.asarray(a, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        # luminance conversion for color input
        img = 0.299 * img[:, :, 0] + 0.587 * img[:, :, 1] + 0.114 * img[:, :, 2]
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ShapeError(f"expected a 2-D image, got shape {np.shape(a)}")
    if not np.all(np.isfinite(img)):
        raise ShapeError("image contains non-finite samples")
    return np.ascontiguousarray(img)


# ---------------------------------------------------------------------------
# sampling grids


@dataclass(frozen=True)
class GridSpec:
    """Patch size and stride defining the sub-sampled evaluation lattice."""

    patch_size: int = 16
    stride: int = 8

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError("patch_size must be positive")
        if not 0 < self.stride <= self.patch_size:
            raise ValueError("stride must be in (0, patch_size]")

    def center_range(self, length: int) -> tuple[int, int]:
        """Inclusive range of valid patch centers along one axis."""
        p = self.patch_size
        return p // 2, length - (p - p // 2)

    def positions(self, height: int, width: int, inset: int = 0) -> np.ndarray:
        """All lattice positions whose patch (plus ``inset``) fits, as (N, 2) ints."""
        rows = self._axis(height, inset)
        cols = self._axis(width, inset)
        if rows.size == 0 or cols.size == 0:
            raise BoundsError(
                f"no valid patch centers for image {height}x{width} "
                f"(patch {self.patch_size}, inset {inset})"
            )
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        return np.stack([rr.ravel(), cc.ravel()], axis=1)

    def grid_shape(self, height: int, width: int, inset: int = 0) -> tuple[int, int]:
        return len(self._axis(height, inset)), len(self._axis(width, inset))

    def _axis(self, length: int, inset: int) -> np.ndarray:
        lo, hi = self.center_range(length)
        pts = np.arange(lo, hi + 1, self.stride)
        return pts[(pts >= lo + inset) & (pts <= hi - inset)]


def border_filter(positions: np.ndarray, shape: tuple[int, int], margin: int) -> np.ndarray:
    """Boolean mask of positions at least ``margin`` pixels from every border."""
    r, c = positions[:, 0], positions[:, 1]
    h, w = shape
    return (r >= margin) & (c >= margin) & (r <= h - 1 - margin) & (c <= w - 1 - margin)


# ---------------------------------------------------------------------------
# patch extraction and the linear encoder


def _patch_indices(shape: tuple[int, int], positions: np.ndarray, p: int) -> np.ndarray:
    """Flat image indices of every patch pixel, shape (N, p*p)."""
    h, w = shape
    pos = np.asarray(positions, dtype=np.int64)
    if pos.ndim == 1:
        pos = pos[None, :]
    half = p // 2
    top, left = pos[:, 0] - half, pos[:, 1] - half
    if np.any(top < 0) or np.any(left < 0) or np.any(top + p > h) or np.any(left + p > w):
        raise BoundsError(f"patch of size {p} out of bounds for image {h}x{w}")
    dr = np.arange(p)
    rows = top[:, None, None] + dr[None, :, None]
    cols = left[:, None, None] + dr[None, None, :]
    return (rows * w + cols).reshape(len(pos), p * p)


def extract_patch(image: np.ndarray, position, patch_size: int) -> np.ndarray:
    """Row-major flattening of the patch centered at ``position``."""
    image = np.asarray(image, dtype=np.float64)
    idx = _patch_indices(image.shape, np.asarray([position]), patch_size)
    return image.ravel()[idx[0]]


def extract_patches(image: np.ndarray, positions: np.ndarray, patch_size: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    idx = _patch_indices(image.shape, positions, patch_size)
    return image.ravel()[idx]


@dataclass(frozen=True)
class Encoder:
    """Linear patch encoder split into K blocks of d filters each.

    ``weights`` has shape (K, d, p*p); stacking the blocks gives the full
    (K*d) x p*p encoding matrix.  The transposed blocks double as the
    synthesis basis for decoding.
    """

    weights: np.ndarray
    patch_size: int = 16
    stride: int = 8

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 3:
            raise ShapeError(f"encoder weights must be (K, d, p*p), got {w.shape}")
        if w.shape[2] != self.patch_size * self.patch_size:
            raise ShapeError(
                f"filter length {w.shape[2]} != patch_size^2 = {self.patch_size ** 2}"
            )
        if not np.all(np.isfinite(w)):
            raise ShapeError("encoder weights contain non-finite entries")
        object.__setattr__(self, "weights", w)

    @property
    def num_blocks(self) -> int:
        return self.weights.shape[0]

    @property
    def block_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.patch_size, self.stride)

    def matrix(self) -> np.ndarray:
        """The stacked (K*d) x p*p encoding matrix."""
        k, d, q = self.weights.shape
        return self.weights.reshape(k * d, q)

    @classmethod
    def random(cls, num_blocks, block_dim, patch_size=16, stride=8, rng=None, scale=None):
        """Gaussian init; scale defaults to 1/patch_size."""
        rng = np.random.default_rng(rng)
        if scale is None:
            scale = 1.0 / patch_size
        w = scale * rng.standard_normal((num_blocks, block_dim, patch_size * patch_size))
        return cls(w, patch_size, stride)


@dataclass(frozen=True)
class VectorField:
    """Encoded vectors, one (K, d) block stack per position."""

    positions: np.ndarray  # (N, 2) int
    vectors: np.ndarray  # (N, K, d) float

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.int64)
        vec = np.asarray(self.vectors, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 2:
            raise ShapeError(f"positions must be (N, 2), got {pos.shape}")
        if vec.ndim != 3 or vec.shape[0] != pos.shape[0]:
            raise ShapeError(f"vectors must be (N, K, d) matching positions, got {vec.shape}")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "vectors", vec)


def apply_encoder(weights: np.ndarray, patches: np.ndarray) -> np.ndarray:
    """Encode flattened patches (N, p*p) into (N, K, d) block vectors."""
    k, d, q = weights.shape
    return (patches @ weights.reshape(k * d, q).T).reshape(len(patches), k, d)


def encode(encoder: Encoder, image: np.ndarray, positions: np.ndarray | None = None) -> VectorField:
    """v^(k)(x) = W^(k) patch(x) at each position (default: the full lattice)."""
    image = np.asarray(image, dtype=np.float64)
    if positions is None:
        positions = encoder.grid.positions(*image.shape)
    patches = extract_patches(image, positions, encoder.patch_size)
    return VectorField(positions, apply_encoder(encoder.weights, patches))


def decode(encoder: Encoder, field: VectorField, shape: tuple[int, int]) -> np.ndarray:
    """Overlap-add of W^(k)T v^(k)(x) patches; uncovered pixels stay zero."""
    k, d, q = encoder.weights.shape
    if field.vectors.shape[1:] != (k, d):
        raise ShapeError(
            f"field blocks {field.vectors.shape[1:]} do not match encoder ({k}, {d})"
        )
    patches = field.vectors.reshape(-1, k * d) @ encoder.weights.reshape(k * d, q)
    canvas = np.zeros(shape[0] * shape[1], dtype=np.float64)
    idx = _patch_indices(shape, field.positions, encoder.patch_size)
    np.add.at(canvas, idx.ravel(), patches.ravel())
    return canvas.reshape(shape)


# ---------------------------------------------------------------------------
# displacement candidates and fields


@dataclass(frozen=True)
class DisplacementGrid:
    """Square grid of displacement candidates on [lo, hi]^2 with fixed step."""

    lo: float = -6.0
    hi: float = 6.0
    step: float = 0.5

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")
        if self.step <= 0:
            raise ValueError("step must be positive")
        n = (self.hi - self.lo) / self.step
        if abs(n - round(n)) > 1e-9:
            raise ValueError("step must evenly divide hi - lo")

    @property
    def side(self) -> int:
        return int(round((self.hi - self.lo) / self.step)) + 1

    @property
    def values(self) -> np.ndarray:
        return self.lo + self.step * np.arange(self.side)

    @property
    def num_candidates(self) -> int:
        return self.side * self.side

    def candidates(self) -> np.ndarray:
        """All (d_row, d_col) candidates, d_row-major, shape (n, 2)."""
        v = self.values
        a, b = np.meshgrid(v, v, indexing="ij")
        return np.stack([a.ravel(), b.ravel()], axis=1)

    def index_of(self, delta) -> int:
        """Exact lookup; raises if ``delta`` is not on the grid."""
        d = np.asarray(delta, dtype=np.float64)
        i = np.round((d - self.lo) / self.step).astype(np.int64)
        if np.any(i < 0) or np.any(i >= self.side):
            raise GridLookupError(f"displacement {tuple(d)} outside grid [{self.lo}, {self.hi}]")
        if np.max(np.abs(self.lo + i * self.step - d)) > 1e-9:
            raise GridLookupError(f"displacement {tuple(d)} not on the {self.step}-step grid")
        return int(i[0] * self.side + i[1])

    def round_indices(self, deltas: np.ndarray) -> np.ndarray:
        """Nearest-candidate index per row of ``deltas``; raises if out of range.

        Ties round half-up so rounding is independent of candidate parity.
        """
        d = np.asarray(deltas, dtype=np.float64)
        i = np.floor((d - self.lo) / self.step + 0.5).astype(np.int64)
        if np.any(i < 0) or np.any(i >= self.side):
            raise GridLookupError("displacement outside candidate range")
        return i[..., 0] * self.side + i[..., 1]


@dataclass(frozen=True)
class DisplacementField:
    """Displacement vectors attached to a set of positions."""

    positions: np.ndarray  # (N, 2) int
    vectors: np.ndarray  # (N, 2) float

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.int64)
        vec = np.asarray(self.vectors, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 2 or vec.shape != pos.shape:
            raise ShapeError(f"positions {pos.shape} / vectors {vec.shape} mismatch")
        if not np.all(np.isfinite(vec)):
            raise ShapeError("displacement field contains non-finite components")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "vectors", vec)

    @classmethod
    def from_dense(cls, dense: np.ndarray, positions: np.ndarray) -> "DisplacementField":
        """Sample a per-pixel (H, W, 2) field at integer positions."""
        dense = np.asarray(dense, dtype=np.float64)
        positions = np.asarray(positions, dtype=np.int64)
        return cls(positions, dense[positions[:, 0], positions[:, 1]])


# ---------------------------------------------------------------------------
# motion models


def support_offsets(radius: int = 4, step: int = 2) -> np.ndarray:
    """Integer offsets of the local mixing support, shape (m, 2)."""
    v = np.arange(-radius, radius + 1, step)
    a, b = np.meshgrid(v, v, indexing="ij")
    return np.stack([a.ravel(), b.ravel()], axis=1)


@dataclass(frozen=True)
class NonParametricMotion:
    """One learned d x d matrix per block per displacement candidate."""

    grid: DisplacementGrid
    matrices: np.ndarray  # (n_candidates, K, d, d)

    def __post_init__(self):
        m = np.asarray(self.matrices, dtype=np.float64)
        if m.ndim != 4 or m.shape[0] != self.grid.num_candidates or m.shape[2] != m.shape[3]:
            raise ShapeError(f"matrices must be (n_cand, K, d, d), got {m.shape}")
        object.__setattr__(self, "matrices", m)

    @property
    def num_blocks(self):
        return self.matrices.shape[1]

    @property
    def block_dim(self):
        return self.matrices.shape[2]

    @classmethod
    def identity(cls, grid, num_blocks, block_dim):
        m = np.zeros((grid.num_candidates, num_blocks, block_dim, block_dim))
        m[...] = np.eye(block_dim)
        return cls(grid, m)


@dataclass(frozen=True)
class MixedMotion:
    """Candidate matrices additionally indexed by mixing offset dx."""

    grid: DisplacementGrid
    offsets: np.ndarray  # (m, 2) int
    matrices: np.ndarray  # (n_candidates, m, K, d, d)

    def __post_init__(self):
        off = np.asarray(self.offsets, dtype=np.int64)
        m = np.asarray(self.matrices, dtype=np.float64)
        if off.ndim != 2 or off.shape[1] != 2:
            raise ShapeError(f"offsets must be (m, 2), got {off.shape}")
        if m.ndim != 5 or m.shape[0] != self.grid.num_candidates or m.shape[1] != len(off):
            raise ShapeError(f"matrices must be (n_cand, m, K, d, d), got {m.shape}")
        object.__setattr__(self, "offsets", off)
        object.__setattr__(self, "matrices", m)

    @property
    def num_blocks(self):
        return self.matrices.shape[2]

    @property
    def block_dim(self):
        return self.matrices.shape[3]

    @property
    def max_offset(self) -> int:
        return int(np.max(np.abs(self.offsets))) if len(self.offsets) else 0

    def offset_index(self, dx) -> int:
        hit = np.nonzero((self.offsets == np.asarray(dx)).all(axis=1))[0]
        if len(hit) == 0:
            raise GridLookupError(f"offset {tuple(dx)} not in mixing support")
        return int(hit[0])

    @classmethod
    def identity(cls, grid, offsets, num_blocks, block_dim):
        """Identity at dx = 0, zero elsewhere: the no-motion model."""
        offsets = np.asarray(offsets, dtype=np.int64)
        m = np.zeros((grid.num_candidates, len(offsets), num_blocks, block_dim, block_dim))
        center = np.nonzero((offsets == 0).all(axis=1))[0]
        if len(center) == 0:
            raise ValueError("mixing support must contain the zero offset")
        m[:, center[0]] = np.eye(block_dim)
        return cls(grid, offsets, m)


# order of the parametric coefficient matrices along axis 0
PARAM_TERMS = ("b1", "b2", "b11", "b22", "b12")


@dataclass(frozen=True)
class ParametricMotion:
    """Second-order polynomial motion: M(delta) = I + B1 d1 + B2 d2 + ...

    ``coeffs`` stacks the five coefficient tensors (B1, B2, B11, B22, B12),
    each (K, d, d), so M(0) is exactly the identity by construction.
    """

    coeffs: np.ndarray  # (5, K, d, d)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.ndim != 4 or c.shape[0] != 5 or c.shape[2] != c.shape[3]:
            raise ShapeError(f"coeffs must be (5, K, d, d), got {c.shape}")
        object.__setattr__(self, "coeffs", c)

    @property
    def num_blocks(self):
        return self.coeffs.shape[1]

    @property
    def block_dim(self):
        return self.coeffs.shape[2]

    @classmethod
    def zeros(cls, num_blocks, block_dim):
        return cls(np.zeros((5, num_blocks, block_dim, block_dim)))


MotionModel = NonParametricMotion | MixedMotion | ParametricMotion


def delta_basis(deltas: np.ndarray) -> np.ndarray:
    """Polynomial features (d1, d2, d1^2, d2^2, d1*d2), shape (..., 5)."""
    d = np.asarray(deltas, dtype=np.float64)
    d1, d2 = d[..., 0], d[..., 1]
    return np.stack([d1, d2, d1 * d1, d2 * d2, d1 * d2], axis=-1)


def motion_matrices(model, deltas: np.ndarray) -> np.ndarray:
    """Per-position block matrices M^(k)(delta), shape (N, K, d, d)."""
    deltas = np.atleast_2d(np.asarray(deltas, dtype=np.float64))
    if isinstance(model, NonParametricMotion):
        idx = np.array([model.grid.index_of(d) for d in deltas])
        return model.matrices[idx]
    if isinstance(model, ParametricMotion):
        basis = delta_basis(deltas)  # (N, 5)
        m = np.einsum("nj,jkde->nkde", basis, model.coeffs, optimize=True)
        m += np.eye(model.block_dim)
        return m
    raise ShapeError("mixed models have no per-delta matrix; index by offset too")


def motion_matrix(model, k: int, delta, dx=None) -> np.ndarray:
    """Single block matrix; mixed models require the offset ``dx``."""
    if isinstance(model, MixedMotion):
        if dx is None:
            raise ShapeError("mixed motion matrix lookup needs an offset dx")
        return model.matrices[model.grid.index_of(delta), model.offset_index(dx), k]
    return motion_matrices(model, np.asarray([delta]))[0, k]


def apply_motion(model, v: np.ndarray, delta) -> np.ndarray:
    """Block-diagonal action: each sub-vector multiplied by its M^(k)(delta)."""
    v = np.asarray(v, dtype=np.float64)
    m = motion_matrices(model, np.asarray([delta]))[0]
    if v.shape != (m.shape[0], m.shape[1]):
        raise ShapeError(f"vector shape {v.shape} does not match model blocks {m.shape[:2]}")
    return np.einsum("kde,ke->kd", m, v)


def offset_encodings(encoder, image, positions, offsets, clamp=False):
    """Encodings and patches at every position + offset of the mixing support.

    Returns (vectors (N, m, K, d), patches (N, m, p*p)).  Duplicate centers
    are encoded once.  With ``clamp`` the offset centers are clipped into the
    valid patch range (border fallback for full-canvas decoding); otherwise
    an out-of-bounds center raises BoundsError.
    """
    image = np.asarray(image, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.int64)
    centers = positions[:, None, :] + np.asarray(offsets, dtype=np.int64)[None, :, :]
    n, m, _ = centers.shape
    grid = GridSpec(encoder.patch_size, encoder.stride)
    lo_r, hi_r = grid.center_range(image.shape[0])
    lo_c, hi_c = grid.center_range(image.shape[1])
    if clamp:
        centers = centers.copy()
        centers[..., 0] = np.clip(centers[..., 0], lo_r, hi_r)
        centers[..., 1] = np.clip(centers[..., 1], lo_c, hi_c)
    flat = centers.reshape(n * m, 2)
    uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
    patches_u = extract_patches(image, uniq, encoder.patch_size)
    vectors_u = apply_encoder(encoder.weights, patches_u)
    k, d = encoder.num_blocks, encoder.block_dim
    q = encoder.patch_size ** 2
    return (
        vectors_u[inverse].reshape(n, m, k, d),
        patches_u[inverse].reshape(n, m, q),
    )


def mixed_predict(model: MixedMotion, encoder, image, positions, deltas, clamp=False):
    """Mixing prediction sum_dx M^(k)(delta, dx) W^(k) patch(x + dx), (N, K, d)."""
    vec_off, _ = offset_encodings(encoder, image, positions, model.offsets, clamp=clamp)
    idx = model.grid.round_indices(np.asarray(deltas, dtype=np.float64))
    mats = model.matrices[idx]  # (N, m, K, d, d)
    return np.einsum("nmkde,nmke->nkd", mats, vec_off, optimize=True)


def apply_motion_mixed(model: MixedMotion, encoder, image, position, delta) -> np.ndarray:
    """Single-position mixing prediction; raises if the support exits the image."""
    i = model.grid.index_of(delta)  # exact-candidate contract
    pred = mixed_predict(model, encoder, image, np.asarray([position]), np.asarray([model.grid.candidates()[i]]))
    return pred[0]


# ---------------------------------------------------------------------------
# losses


def predicted_vectors(encoder, model, image_t, positions, deltas, clamp=False):
    """Next-frame vector prediction at each position for given displacements."""
    if isinstance(model, MixedMotion):
        return mixed_predict(model, encoder, image_t, positions, deltas, clamp=clamp)
    v = encode(encoder, image_t, positions).vectors
    m = motion_matrices(model, deltas)
    return np.einsum("nkde,nke->nkd", m, v, optimize=True)


def rotation_loss(encoder, model, image_t, image_t1, field: DisplacementField) -> float:
    """Squared residual between next-frame encodings and motion-transformed ones."""
    v1 = encode(encoder, image_t1, field.positions).vectors
    pred = predicted_vectors(encoder, model, image_t, field.positions, field.vectors)
    return float(np.sum((v1 - pred) ** 2))


def reconstruction_loss(encoder, image_t, image_t1) -> float:
    """Tight-frame residual of both frames under encode-then-decode."""
    total = 0.0
    for img in (image_t, image_t1):
        img = np.asarray(img, dtype=np.float64)
        rec = decode(encoder, encode(encoder, img), img.shape)
        total += float(np.sum((img - rec) ** 2))
    return total


def complex_cell_response(v) -> float:
    """Squared norm of a sub-vector."""
    v = np.asarray(v, dtype=np.float64)
    return float(np.dot(v.ravel(), v.ravel()))
