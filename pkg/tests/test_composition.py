import json

import numpy as np
import pytest
from scipy.signal import convolve2d

from tpsstitch.composition import (CompositionInputs, CompositionWeights, SeamEnergy, SeamMask,
                                   blend, boundary_loss, boundary_masks, derive_target_mask,
                                   difference_map, masks_from_logits, optimize_seam,
                                   smoothness_loss, sobel_edges, stitch_composition)
from tpsstitch.errors import EmptyRegionError
from tpsstitch.geometry import Homography, make_control_grid, mesh_from_homography
from tpsstitch.imagecore import load_image
from tpsstitch.synth_bench import gen_texture


def sobel_oracle(m):
    kx = np.array([[1, 0, -1], [2, 0, -2], [1, 0, -1]], float)
    p = np.pad(m, 1, mode="edge")
    gx = convolve2d(p, kx, mode="valid")
    gy = convolve2d(p, kx.T, mode="valid")
    return (np.hypot(gx, gy) > 0.1).astype(float)


def rect(shape, y0, y1, x0, x1):
    m = np.zeros(shape)
    m[y0:y1, x0:x1] = 1.0
    return m


def offset_inputs(rng, h=24, w=32):
    m_r = rect((h, w), 0, h, 0, 20)
    m_t = rect((h, w), 0, h, 12, w)
    i_wr = rng.random((h, w, 3)) * m_r[..., None]
    i_wt = rng.random((h, w, 3)) * m_t[..., None]
    return CompositionInputs(i_wr, i_wt, m_r, m_t)


class TestSobel:
    def test_constant(self):
        assert not sobel_edges(np.ones((10, 10))).any()

    def test_step_band(self):
        e = sobel_edges(rect((10, 10), 0, 10, 5, 10))
        np.testing.assert_array_equal(np.nonzero(e.any(axis=0))[0], [4, 5])
        assert e[:, 4].all() and e[:, 5].all()

    def test_disk_matches_convolution(self):
        yy, xx = np.mgrid[0:60, 0:60]
        disk = ((yy - 30) ** 2 + (xx - 30) ** 2 <= 400).astype(float)
        e = sobel_edges(disk)
        np.testing.assert_array_equal(e, sobel_oracle(disk))
        assert e[30, 30] == 0 and e[0, 0] == 0 and e.sum() > 0


class TestBoundaryMasks:
    def test_disjoint(self):
        a = rect((16, 16), 0, 16, 0, 5)
        b = rect((16, 16), 0, 16, 10, 16)
        br, bt = boundary_masks(a, b)
        assert not br.any() and not bt.any()

    def test_identical_footprints(self):
        a = rect((16, 16), 3, 12, 3, 12)
        br, bt = boundary_masks(a, a)
        np.testing.assert_array_equal(br, bt)
        np.testing.assert_array_equal(br, a * sobel_oracle(a))

    def test_offset_rectangles_hand_case(self):
        m_r = rect((16, 16), 0, 10, 0, 10)
        m_t = rect((16, 16), 4, 16, 4, 16)
        br, bt = boundary_masks(m_r, m_t)
        # m_br: reference pixels next to the target's top/left edges (rows/cols 3..4)
        exp_br = np.zeros((16, 16))
        exp_bt = np.zeros((16, 16))
        for i in range(16):
            for j in range(16):
                near_t = (i in (3, 4) and j >= 3) or (j in (3, 4) and i >= 3)
                near_r = (i in (9, 10) and j <= 10) or (j in (9, 10) and i <= 10)
                exp_br[i, j] = float(m_r[i, j] and near_t)
                exp_bt[i, j] = float(m_t[i, j] and near_r)
        np.testing.assert_array_equal(br, exp_br)
        np.testing.assert_array_equal(bt, exp_bt)
        both = (br > 0) & (bt > 0)
        assert both.any() and (np.argwhere(both).min(axis=0) >= 3).all()


class TestLosses:
    def test_boundary_zero_cases(self, rng):
        img = rng.random((8, 8, 3))
        m = rng.random((8, 8)) > 0.5
        assert boundary_loss(img, img, img, m * 1.0, m * 1.0) == 0.0
        assert boundary_loss(img, img, rng.random((8, 8, 3)), m * 1.0, np.zeros((8, 8))) == 0.0

    def test_boundary_loop_oracle(self, rng):
        s, a, b = (rng.random((9, 11, 3)) for _ in range(3))
        br = (rng.random((9, 11)) > 0.7) * 1.0
        bt = (rng.random((9, 11)) > 0.6) * 1.0
        total = 0.0
        for img, m in ((a, br), (b, bt)):
            acc, n = 0.0, 0
            for i in range(9):
                for j in range(11):
                    if m[i, j]:
                        n += 1
                        acc += sum(abs(s[i, j, c] - img[i, j, c]) for c in range(3)) / 3
            total += acc / n
        assert boundary_loss(s, a, b, br, bt) == pytest.approx(total, abs=1e-9)

    def test_smoothness_two_by_two(self):
        m = np.array([[1.0, 0.0], [1.0, 0.0]])
        d = np.array([[0.0, 1.0], [0.0, 1.0]])
        s = np.full((2, 2, 3), 0.4)
        assert smoothness_loss(m, d, s) * 4 == pytest.approx(2.0)

    def test_smoothness_zero_cases(self, rng):
        s = rng.random((6, 6, 3))
        assert smoothness_loss(np.full((6, 6), 0.3), rng.random((6, 6)), s) == 0.0
        assert smoothness_loss(rng.random((6, 6)), np.zeros((6, 6)), np.full((6, 6, 3), 0.2)) == 0.0

    def test_smoothness_loop_oracle(self, rng):
        m, d = rng.random((5, 7)), rng.random((5, 7))
        s = rng.random((5, 7, 3))
        total = 0.0
        for i in range(5):
            for j in range(7):
                for di, dj in ((1, 0), (0, 1)):
                    if i + di < 5 and j + dj < 7:
                        dm = abs(m[i, j] - m[i + di, j + dj])
                        ds = np.abs(s[i, j] - s[i + di, j + dj]).mean()
                        total += dm * (d[i, j] + d[i + di, j + dj] + ds)
        assert smoothness_loss(m, d, s) == pytest.approx(total / 35, abs=1e-12)

    def test_difference_map(self):
        a = np.zeros((2, 2, 3))
        b = np.ones((2, 2, 3)) * [0.0, 0.3, 0.6]
        np.testing.assert_allclose(difference_map(a, b), (0.09 + 0.36) / 3)

    @pytest.mark.parametrize("weights", [CompositionWeights(1.0, 0.0), CompositionWeights(0.0, 1.0),
                                         CompositionWeights()])
    def test_energy_gradient_finite_differences(self, rng, weights):
        inp = offset_inputs(rng)
        en = SeamEnergy(inp, weights)
        logits = rng.normal(0, 1, inp.m_r.shape) * inp.overlap
        _, g = en(logits)
        sel = np.argwhere(inp.overlap > 0)[::7]
        e = 1e-3
        fd, an = [], []
        for i, j in sel:
            a, b = logits.copy(), logits.copy()
            a[i, j] += e
            b[i, j] -= e
            fd.append((en(a, False)[0] - en(b, False)[0]) / (2 * e))
            an.append(g[i, j])
        fd, an = np.array(fd), np.array(an)
        assert np.linalg.norm(an - fd) / np.linalg.norm(fd) < 1e-3

    def test_parts_match_call(self, rng):
        inp = offset_inputs(rng)
        en = SeamEnergy(inp)
        logits = rng.normal(0, 1, inp.m_r.shape)
        b, s = en.parts(logits)
        assert en(logits, False)[0] == pytest.approx(1e4 * b + 1e3 * s)


class TestMasks:
    def test_partition_of_unity(self, rng):
        for _ in range(25):
            m_r = (rng.random((12, 12)) > 0.4) * 1.0
            m_t = (rng.random((12, 12)) > 0.4) * 1.0
            m_cr, m_ct = masks_from_logits(rng.normal(0, 3, (12, 12)), m_r, m_t)
            np.testing.assert_allclose(m_cr + m_ct, np.maximum(m_r, m_t), atol=1e-12)
            only_r = (m_r > 0) & (m_t == 0)
            only_t = (m_t > 0) & (m_r == 0)
            assert np.all(m_cr[only_r] == 1) and np.all(m_ct[only_r] == 0)
            assert np.all(m_cr[only_t] == 0) and np.all(m_ct[only_t] == 1)

    def test_derive_target_mask(self):
        a = rect((6, 6), 0, 6, 0, 3)
        b = rect((6, 6), 0, 6, 3, 6)
        np.testing.assert_array_equal(derive_target_mask(a, a, b), b)
        full = np.ones((6, 6))
        np.testing.assert_array_equal(derive_target_mask(full * 0.5, full, full), full * 0.5)

    def test_blend_loop_oracle(self, rng):
        a, b = rng.random((5, 6, 3)), rng.random((5, 6, 3))
        mc, mt = rng.random((5, 6)), rng.random((5, 6))
        out = blend(a, b, mc, mt)
        for i in range(5):
            for j in range(6):
                for c in range(3):
                    v = mc[i, j] * a[i, j, c] + mt[i, j] * b[i, j, c]
                    assert out[i, j, c] == min(max(v, 0.0), 1.0)

    def test_blend_trivial(self, rng):
        a, b = rng.random((5, 6, 3)), rng.random((5, 6, 3))
        np.testing.assert_array_equal(blend(a, b, np.ones((5, 6)), np.zeros((5, 6))), a)
        half = np.full((5, 6), 0.5)
        np.testing.assert_allclose(blend(a, a, half, half), a)
        conv = rng.random((5, 6))
        out = blend(a, b, conv, 1 - conv)
        assert np.all(out >= np.minimum(a, b) - 1e-12) and np.all(out <= np.maximum(a, b) + 1e-12)


class TestOptimizeSeam:
    def test_empty_overlap(self, rng):
        m_r = rect((8, 8), 0, 8, 0, 4)
        inp = CompositionInputs(rng.random((8, 8, 3)), rng.random((8, 8, 3)), m_r, 1 - m_r)
        with pytest.raises(EmptyRegionError):
            optimize_seam(inp)

    def test_identical_images(self):
        img = gen_texture(1, 40, 30)
        m_r = rect((30, 40), 0, 30, 0, 28)
        m_t = rect((30, 40), 0, 30, 10, 40)
        inp = CompositionInputs(img * m_r[..., None], img * m_t[..., None], m_r, m_t)
        seam = optimize_seam(inp)
        b, _ = SeamEnergy(inp).parts(seam.logits)
        assert b < 1e-12
        assert seam.energy <= seam.initial_energy
        np.testing.assert_allclose(blend(inp.i_wr, inp.i_wt, seam.m_cr, seam.m_ct), img, atol=1e-12)

    def test_disagreement_strip_halves_energy(self):
        img = gen_texture(2, 48, 32)
        other = img.copy()
        other[:, 22:26] = 1.0 - other[:, 22:26]
        m_r = rect((32, 48), 0, 32, 0, 34)
        m_t = rect((32, 48), 0, 32, 14, 48)
        inp = CompositionInputs(img * m_r[..., None], other * m_t[..., None], m_r, m_t)
        seam = optimize_seam(inp)
        assert seam.energy <= 0.5 * seam.initial_energy
        np.testing.assert_allclose(seam.m_cr + seam.m_ct, inp.union, atol=1e-6)
        only = (m_r > 0) & (m_t == 0)
        assert np.all(seam.m_cr[only] == 1)
        _, s0 = SeamEnergy(inp).parts(np.zeros((32, 48)))
        _, s1 = SeamEnergy(inp).parts(seam.logits)
        assert s1 <= s0

    def test_exports(self, tmp_path, rng):
        inp = offset_inputs(rng)
        seam = optimize_seam(inp)
        seam.save_masks(str(tmp_path / "m"))
        back = load_image(tmp_path / "m_ref.png")
        assert back.shape[:2] == inp.m_r.shape
        seam.save_seam(tmp_path / "seam.json", inp.overlap)
        doc = json.loads((tmp_path / "seam.json").read_text())
        assert doc["level"] == 0.5 and isinstance(doc["polylines"], list)

    def test_seam_polyline_hand_mask(self):
        m_cr = np.zeros((10, 10))
        m_cr[:, :5] = 1.0
        lines = SeamMask(np.zeros((10, 10)), m_cr, 1 - m_cr).seam_polyline(np.ones((10, 10)))
        assert len(lines) == 1
        np.testing.assert_allclose(lines[0][:, 1], 4.5)


def test_stitch_composition_translated_pair():
    img = gen_texture(3, 80, 40)
    ref, tgt = img[:, :56], img[:, 24:]
    mesh = mesh_from_homography(make_control_grid(3, 3, 56, 40), Homography.translation(24, 0))
    res = stitch_composition(ref, tgt, mesh)
    assert res.panorama.shape == (40, 80, 3)
    inner = res.inputs.union > 0
    assert np.abs(res.panorama - img)[inner].max() < 1e-6
