"""Forward-model tests: patch extraction, encoding, decoding, motion, losses."""

import numpy as np
import pytest

from patchflow.core import (
    DisplacementField,
    DisplacementGrid,
    Encoder,
    GridSpec,
    MixedMotion,
    NonParametricMotion,
    ParametricMotion,
    VectorField,
    apply_motion,
    apply_motion_mixed,
    complex_cell_response,
    decode,
    encode,
    extract_patch,
    motion_matrix,
    motion_matrices,
    reconstruction_loss,
    rotation_loss,
    support_offsets,
)
from patchflow.errors import BoundsError, GridLookupError, ShapeError


def naive_patch(image, pos, p):
    # independent double-loop oracle
    out = []
    r0, c0 = pos[0] - p // 2, pos[1] - p // 2
    for i in range(p):
        for j in range(p):
            out.append(image[r0 + i, c0 + j])
    return np.array(out)


def orthonormal_encoder(p, stride, rng):
    # square W via QR: K*d = p*p, d = 2
    q, _ = np.linalg.qr(rng.standard_normal((p * p, p * p)))
    return Encoder(q.T.reshape(p * p // 2, 2, p * p), p, stride)


class TestExtractPatch:
    def test_zero_image(self):
        img = np.zeros((32, 32))
        assert extract_patch(img, (16, 16), 16).shape == (256,)
        assert np.all(extract_patch(img, (16, 16), 16) == 0)

    def test_single_pixel(self):
        img = np.arange(16.0).reshape(4, 4)
        assert extract_patch(img, (2, 3), 1) == np.array([img[2, 3]])

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        img = rng.random((8, 8))
        got = extract_patch(img, (4, 4), 4)
        assert np.array_equal(got, naive_patch(img, (4, 4), 4))

    def test_out_of_bounds(self):
        img = np.zeros((16, 16))
        with pytest.raises(BoundsError):
            extract_patch(img, (3, 8), 16)
        with pytest.raises(BoundsError):
            extract_patch(img, (8, 9), 16)

    def test_window_convention(self):
        # 16x16 patch at x spans offsets -8..+7
        img = np.zeros((32, 32))
        img[8, 8] = 1.0  # top-left of window for center (16, 16)
        img[23, 23] = 2.0  # bottom-right
        patch = extract_patch(img, (16, 16), 16)
        assert patch[0] == 1.0 and patch[-1] == 2.0


class TestGridSpec:
    def test_positions_fit(self):
        g = GridSpec(16, 8)
        pos = g.positions(64, 64)
        assert pos.shape == (49, 2)
        assert pos[:, 0].min() == 8 and pos[:, 0].max() == 56
        # every position admits a full patch
        for p in pos:
            extract_patch(np.zeros((64, 64)), p, 16)

    def test_full_cover_at_stride_eq_patch(self):
        g = GridSpec(16, 16)
        pos = g.positions(64, 64)
        cover = np.zeros((64, 64), dtype=int)
        for r, c in pos:
            cover[r - 8 : r + 8, c - 8 : c + 8] += 1
        assert np.all(cover == 1)

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            GridSpec(0, 1)
        with pytest.raises(ValueError):
            GridSpec(8, 9)


class TestEncodeDecode:
    def test_one_hot_rows_select_entries(self):
        p = 4
        w = np.zeros((2, 2, p * p))
        w[0, 0, 5] = 1.0
        w[0, 1, 6] = 1.0
        w[1, 0, 0] = 1.0
        w[1, 1, 15] = 1.0
        enc = Encoder(w, p, p)
        rng = np.random.default_rng(0)
        img = rng.random((8, 8))
        vf = encode(enc, img, np.array([[4, 4]]))
        patch = extract_patch(img, (4, 4), p)
        assert vf.vectors[0, 0, 0] == patch[5]
        assert vf.vectors[0, 0, 1] == patch[6]
        assert vf.vectors[0, 1, 0] == patch[0]
        assert vf.vectors[0, 1, 1] == patch[15]

    def test_zero_image_zero_field(self):
        enc = Encoder.random(5, 2, 8, 4, rng=1)
        vf = encode(enc, np.zeros((32, 32)))
        assert np.all(vf.vectors == 0)

    def test_encode_matches_naive_matmul(self):
        rng = np.random.default_rng(3)
        enc = Encoder.random(6, 2, 8, 4, rng=rng)
        img = rng.random((24, 24))
        vf = encode(enc, img)
        for n, pos in enumerate(vf.positions):
            patch = naive_patch(img, pos, 8)
            for k in range(6):
                want = enc.weights[k] @ patch
                np.testing.assert_allclose(vf.vectors[n, k], want, rtol=1e-12)

    def test_encode_accepts_arbitrary_positions(self):
        enc = Encoder.random(3, 2, 8, 4, rng=5)
        img = np.random.default_rng(5).random((32, 32))
        pos = np.array([[5, 9], [11, 17]])
        vf = encode(enc, img, pos)
        assert np.array_equal(vf.positions, pos)

    def test_decode_zero_field(self):
        enc = Encoder.random(4, 2, 8, 4, rng=2)
        pos = enc.grid.positions(24, 24)
        vf = VectorField(pos, np.zeros((len(pos), 4, 2)))
        assert np.all(decode(enc, vf, (24, 24)) == 0)

    def test_orthonormal_tiling_roundtrip(self):
        rng = np.random.default_rng(11)
        enc = orthonormal_encoder(8, 8, rng)
        img = rng.random((32, 32))
        rec = decode(enc, encode(enc, img), img.shape)
        np.testing.assert_allclose(rec, img, atol=1e-10)

    def test_decode_matches_accumulation_oracle(self):
        rng = np.random.default_rng(13)
        enc = Encoder.random(5, 3, 8, 4, rng=rng)  # overlapping s = p/2
        img = rng.random((24, 24))
        vf = encode(enc, img)
        got = decode(enc, vf, img.shape)
        want = np.zeros((24, 24))
        for n, (r, c) in enumerate(vf.positions):
            patch = np.zeros(64)
            for k in range(5):
                patch += enc.weights[k].T @ vf.vectors[n, k]
            want[r - 4 : r + 4, c - 4 : c + 4] += patch.reshape(8, 8)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-15)

    def test_decode_is_linear(self):
        rng = np.random.default_rng(17)
        enc = Encoder.random(4, 2, 8, 4, rng=rng)
        pos = enc.grid.positions(24, 24)
        v1 = rng.standard_normal((len(pos), 4, 2))
        v2 = rng.standard_normal((len(pos), 4, 2))
        a, b = 0.7, -1.3
        lhs = decode(enc, VectorField(pos, a * v1 + b * v2), (24, 24))
        rhs = a * decode(enc, VectorField(pos, v1), (24, 24)) + b * decode(
            enc, VectorField(pos, v2), (24, 24)
        )
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_isometry_with_orthonormal_frame(self):
        # constructive tight-frame check: <WI, WJ> = <I, J>
        rng = np.random.default_rng(19)
        enc = orthonormal_encoder(8, 8, rng)
        img_a = rng.random((16, 16))
        img_b = rng.random((16, 16))
        va = encode(enc, img_a).vectors.ravel()
        vb = encode(enc, img_b).vectors.ravel()
        want = float(np.sum(img_a * img_b))
        assert abs(np.dot(va, vb) - want) <= 1e-8 * abs(want)

    def test_shape_mismatch(self):
        enc = Encoder.random(4, 2, 8, 4, rng=2)
        pos = enc.grid.positions(24, 24)
        bad = VectorField(pos, np.zeros((len(pos), 4, 3)))
        with pytest.raises(ShapeError):
            decode(enc, bad, (24, 24))

    def test_deterministic(self):
        rng = np.random.default_rng(23)
        enc = Encoder.random(4, 2, 8, 4, rng=rng)
        img = rng.random((24, 24))
        a = decode(enc, encode(enc, img), img.shape)
        b = decode(enc, encode(enc, img), img.shape)
        assert np.array_equal(a, b)


class TestDisplacementGrid:
    def test_candidate_count(self):
        g = DisplacementGrid(-6, 6, 0.5)
        assert g.num_candidates == 25 * 25

    def test_exact_lookup(self):
        g = DisplacementGrid(-2, 2, 0.5)
        i = g.index_of((1.0, -0.5))
        np.testing.assert_array_equal(g.candidates()[i], [1.0, -0.5])

    def test_off_grid_rejected(self):
        g = DisplacementGrid(-2, 2, 0.5)
        with pytest.raises(GridLookupError):
            g.index_of((0.3, 0.0))
        with pytest.raises(GridLookupError):
            g.index_of((2.5, 0.0))

    def test_round_indices(self):
        g = DisplacementGrid(-2, 2, 0.5)
        idx = g.round_indices(np.array([[0.25, -0.2], [1.9, 1.4]]))
        got = g.candidates()[idx]
        np.testing.assert_array_equal(got, [[0.5, 0.0], [2.0, 1.5]])


class TestMotion:
    def test_parametric_zero_delta_identity(self):
        rng = np.random.default_rng(29)
        m = ParametricMotion(rng.standard_normal((5, 4, 2, 2)))
        np.testing.assert_array_equal(motion_matrix(m, 2, (0.0, 0.0)), np.eye(2))

    def test_parametric_all_zero_coeffs(self):
        m = ParametricMotion.zeros(3, 2)
        np.testing.assert_array_equal(motion_matrix(m, 1, (1.7, -2.3)), np.eye(2))

    def test_parametric_direct_substitution(self):
        c = np.zeros((5, 1, 2, 2))
        c[0, 0] = [[0.0, -1.0], [1.0, 0.0]]  # B1 only
        m = ParametricMotion(c)
        np.testing.assert_allclose(
            motion_matrix(m, 0, (0.5, 0.0)), [[1.0, -0.5], [0.5, 1.0]]
        )

    def test_identity_model_keeps_vector(self):
        g = DisplacementGrid(-1, 1, 0.5)
        m = NonParametricMotion.identity(g, 3, 2)
        v = np.random.default_rng(0).standard_normal((3, 2))
        np.testing.assert_array_equal(apply_motion(m, v, (0.5, -1.0)), v)

    def test_zero_vector(self):
        g = DisplacementGrid(-1, 1, 1.0)
        m = NonParametricMotion(g, np.random.default_rng(1).standard_normal((9, 3, 2, 2)))
        assert np.all(apply_motion(m, np.zeros((3, 2)), (1.0, 0.0)) == 0)

    def test_apply_matches_per_block_oracle(self):
        rng = np.random.default_rng(31)
        g = DisplacementGrid(-1, 1, 1.0)
        m = NonParametricMotion(g, rng.standard_normal((9, 4, 3, 3)))
        v = rng.standard_normal((4, 3))
        got = apply_motion(m, v, (-1.0, 1.0))
        i = g.index_of((-1.0, 1.0))
        for k in range(4):
            np.testing.assert_allclose(got[k], m.matrices[i, k] @ v[k], rtol=1e-14)

    def test_nonparametric_off_grid_error(self):
        g = DisplacementGrid(-1, 1, 1.0)
        m = NonParametricMotion.identity(g, 2, 2)
        with pytest.raises(GridLookupError):
            apply_motion(m, np.zeros((2, 2)), (0.5, 0.0))


class TestMixedMotion:
    def setup_method(self):
        self.rng = np.random.default_rng(37)
        self.enc = Encoder.random(3, 2, 8, 4, rng=self.rng)
        self.img = self.rng.random((32, 32))
        self.grid = DisplacementGrid(-1, 1, 0.5)

    def test_singleton_support_reduces_to_plain(self):
        off = np.array([[0, 0]])
        mats = self.rng.standard_normal((self.grid.num_candidates, 1, 3, 2, 2))
        mixed = MixedMotion(self.grid, off, mats)
        plain = NonParametricMotion(self.grid, mats[:, 0])
        pos = (16, 16)
        delta = (0.5, -1.0)
        v = encode(self.enc, self.img, np.array([pos])).vectors[0]
        np.testing.assert_allclose(
            apply_motion_mixed(mixed, self.enc, self.img, pos, delta),
            apply_motion(plain, v, delta),
            rtol=1e-12,
        )

    def test_zero_matrices_zero_output(self):
        off = support_offsets(2, 2)
        mixed = MixedMotion(self.grid, off, np.zeros((self.grid.num_candidates, len(off), 3, 2, 2)))
        out = apply_motion_mixed(mixed, self.enc, self.img, (16, 16), (0.0, 0.0))
        assert np.all(out == 0)

    def test_matches_triple_loop_oracle(self):
        off = support_offsets(2, 2)
        mats = self.rng.standard_normal((self.grid.num_candidates, len(off), 3, 2, 2))
        mixed = MixedMotion(self.grid, off, mats)
        pos, delta = (16, 12), (1.0, -0.5)
        got = apply_motion_mixed(mixed, self.enc, self.img, pos, delta)
        ci = self.grid.index_of(delta)
        want = np.zeros((3, 2))
        for m, (dr, dc) in enumerate(off):
            patch = naive_patch(self.img, (pos[0] + dr, pos[1] + dc), 8)
            for k in range(3):
                want[k] += mats[ci, m, k] @ (self.enc.weights[k] @ patch)
        np.testing.assert_allclose(got, want, rtol=1e-10)

    def test_boundary_support_raises(self):
        off = support_offsets(4, 2)
        mixed = MixedMotion.identity(self.grid, off, 3, 2)
        with pytest.raises(BoundsError):
            apply_motion_mixed(mixed, self.enc, self.img, (4, 16), (0.0, 0.0))


class TestLosses:
    def test_rotation_loss_zero_for_exact_model(self):
        # build I_{t+1} encodings equal to the transformed ones via identity + same image
        rng = np.random.default_rng(41)
        enc = Encoder.random(4, 2, 8, 4, rng=rng)
        img = rng.random((24, 24))
        g = DisplacementGrid(-1, 1, 0.5)
        model = NonParametricMotion.identity(g, 4, 2)
        pos = enc.grid.positions(24, 24)
        fld = DisplacementField(pos, np.zeros((len(pos), 2)))
        assert rotation_loss(enc, model, img, img, fld) == 0.0

    def test_rotation_loss_matches_summation_oracle(self):
        rng = np.random.default_rng(43)
        enc = Encoder.random(3, 2, 8, 4, rng=rng)
        img_t = rng.random((16, 16))
        img_t1 = rng.random((16, 16))
        g = DisplacementGrid(-1, 1, 1.0)
        model = NonParametricMotion(g, rng.standard_normal((9, 3, 2, 2)))
        pos = enc.grid.positions(16, 16)
        deltas = g.candidates()[rng.integers(0, 9, len(pos))]
        fld = DisplacementField(pos, deltas)
        got = rotation_loss(enc, model, img_t, img_t1, fld)
        want = 0.0
        for n, x in enumerate(pos):
            a = naive_patch(img_t, x, 8)
            b = naive_patch(img_t1, x, 8)
            i = g.index_of(deltas[n])
            for k in range(3):
                r = enc.weights[k] @ b - model.matrices[i, k] @ (enc.weights[k] @ a)
                want += float(r @ r)
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_rotation_loss_nonnegative_random(self):
        rng = np.random.default_rng(47)
        for _ in range(5):
            enc = Encoder.random(2, 2, 8, 8, rng=rng)
            img_t = rng.random((16, 16))
            img_t1 = rng.random((16, 16))
            model = ParametricMotion(0.1 * rng.standard_normal((5, 2, 2, 2)))
            pos = enc.grid.positions(16, 16)
            fld = DisplacementField(pos, rng.uniform(-1, 1, (len(pos), 2)))
            assert rotation_loss(enc, model, img_t, img_t1, fld) >= 0.0

    def test_reconstruction_loss_zero_images(self):
        enc = Encoder.random(4, 2, 8, 4, rng=0)
        assert reconstruction_loss(enc, np.zeros((16, 16)), np.zeros((16, 16))) == 0.0

    def test_reconstruction_loss_orthonormal_tiling(self):
        rng = np.random.default_rng(53)
        enc = orthonormal_encoder(8, 8, rng)
        img = rng.random((32, 32))
        assert reconstruction_loss(enc, img, img) < 1e-10

    def test_reconstruction_loss_matches_naive(self):
        rng = np.random.default_rng(59)
        enc = Encoder.random(3, 2, 8, 4, rng=rng)
        img_t = rng.random((16, 16))
        img_t1 = rng.random((16, 16))
        got = reconstruction_loss(enc, img_t, img_t1)
        want = 0.0
        for img in (img_t, img_t1):
            rec = np.zeros_like(img)
            for x in enc.grid.positions(16, 16):
                patch = naive_patch(img, x, 8)
                out = np.zeros(64)
                for k in range(3):
                    out += enc.weights[k].T @ (enc.weights[k] @ patch)
                rec[x[0] - 4 : x[0] + 4, x[1] - 4 : x[1] + 4] += out.reshape(8, 8)
            want += float(np.sum((img - rec) ** 2))
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_complex_cell_response(self):
        assert complex_cell_response(np.zeros(2)) == 0.0
        assert complex_cell_response(np.array([1.0, 0.0])) == 1.0
        assert complex_cell_response(np.array([3.0, 4.0])) == 25.0

    def test_mixed_rotation_loss_dispatch(self):
        rng = np.random.default_rng(61)
        enc = Encoder.random(3, 2, 8, 4, rng=rng)
        img = rng.random((32, 32))
        g = DisplacementGrid(-1, 1, 0.5)
        mixed = MixedMotion.identity(g, np.array([[0, 0]]), 3, 2)
        pos = enc.grid.positions(32, 32)
        fld = DisplacementField(pos, np.zeros((len(pos), 2)))
        assert rotation_loss(enc, mixed, img, img, fld) < 1e-22
