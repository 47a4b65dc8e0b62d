import math

import numpy as np
import pytest

from odssd import model as M
from odssd import tensor as T
from odssd.model import ModelConfig
from odssd.tensor import Tensor

FULL = ModelConfig()
HALF = ModelConfig(view_size=(320, 160))
TOY = ModelConfig(view_size=(160, 80), num_classes=2, channel_scale=0.25)


def conv_params(in_ch, out_ch, k, groups=1):
    return out_ch * (in_ch // groups) * k * k + out_ch


def fire_params(in_ch, s, e1, e3):
    return (conv_params(in_ch, s, 1) + conv_params(s, e1, 1)
            + conv_params(s, e3, 3))


def sep_params(in_ch, out_ch):
    return conv_params(in_ch, in_ch, 3, groups=in_ch) + conv_params(in_ch, out_ch, 1)


def expected_param_count(num_classes):
    """Layer-by-layer summation oracle, independent of the registry."""
    n = conv_params(3, 64, 3)
    n += fire_params(64, 16, 64, 64) + fire_params(128, 16, 64, 64)
    n += fire_params(128, 32, 128, 128) + fire_params(256, 32, 128, 128)
    n += fire_params(256, 48, 192, 192) + fire_params(384, 48, 192, 192)
    n += fire_params(384, 64, 128, 128) + fire_params(256, 64, 128, 128)
    n += conv_params(512, 256, 1) + sep_params(256, 512)
    n += conv_params(512, 256, 1) + sep_params(256, 512)
    n += conv_params(512, 128, 1) + sep_params(128, 256)
    for cin in (512, 512, 512, 256):
        n += sep_params(cin, 6 * 6) + sep_params(cin, 6 * num_classes)
    return n


class TestGrids:
    def test_full_resolution(self):
        assert M.head_grids(FULL) == [(20, 40), (10, 20), (5, 10), (3, 5)]
        assert M.num_priors(FULL) == 6390

    def test_half_resolution(self):
        assert M.head_grids(HALF) == [(10, 20), (5, 10), (3, 5), (2, 3)]
        assert M.num_priors(HALF) == 1626

    def test_toy_resolution(self):
        assert M.head_grids(TOY) == [(5, 10), (3, 5), (2, 3), (1, 2)]
        assert M.num_priors(TOY) == 438

    def test_num_priors_consistent_with_grids(self):
        for cfg in (FULL, HALF, TOY):
            assert M.num_priors(cfg) == 6 * sum(h * w for h, w in M.head_grids(cfg))


class TestPriors:
    def test_shape_and_range(self):
        p = M.generate_priors(FULL)
        assert p.shape == (6390, 4)
        assert p.dtype == np.float64
        assert (p >= 0).all() and (p <= 1).all()

    def test_first_cell_centers(self):
        p = M.generate_priors(FULL)
        # head 0 is 20x40; cell (0,0) center at half a cell
        assert p[0, 0] == pytest.approx(0.5 / 40)
        assert p[0, 1] == pytest.approx(0.5 / 20)

    def test_first_cell_shapes(self):
        p = M.generate_priors(FULL)
        scales = np.linspace(0.1, 0.9, 4)
        assert p[0, 2] == pytest.approx(0.1) and p[0, 3] == pytest.approx(0.1)
        big = math.sqrt(scales[0] * scales[1])
        assert p[1, 2] == pytest.approx(big) and p[1, 3] == pytest.approx(big)
        r2 = math.sqrt(2.0)
        assert p[2, 2] == pytest.approx(0.1 * r2)
        assert p[2, 3] == pytest.approx(0.1 / r2)
        assert p[3, 2] == pytest.approx(0.1 / r2)
        assert p[3, 3] == pytest.approx(0.1 * r2)
        r3 = math.sqrt(3.0)
        assert p[4, 2] == pytest.approx(0.1 * r3)
        assert p[5, 3] == pytest.approx(0.1 * r3)

    def test_matches_brute_force_regeneration(self):
        # independent loop over (head, row, col, shape) index arithmetic
        got = M.generate_priors(TOY)
        grids = [(5, 10), (3, 5), (2, 3), (1, 2)]
        scales = list(np.linspace(0.1, 0.9, 4)) + [0.9 + 0.8 / 3]
        rows = []
        for k, (gh, gw) in enumerate(grids):
            sk = scales[k]
            shapes = [(sk, sk),
                      (math.sqrt(sk * scales[k + 1]),) * 2,
                      (sk * math.sqrt(2), sk / math.sqrt(2)),
                      (sk / math.sqrt(2), sk * math.sqrt(2)),
                      (sk * math.sqrt(3), sk / math.sqrt(3)),
                      (sk / math.sqrt(3), sk * math.sqrt(3))]
            for i in range(gh):
                for j in range(gw):
                    for pw, ph in shapes:
                        rows.append(((j + 0.5) / gw, (i + 0.5) / gh, pw, ph))
        want = np.clip(np.array(rows), 0, 1)
        assert np.allclose(got, want)

    def test_aspect_pairs_multiply_to_square(self):
        p = M.generate_priors(HALF)
        per = 6
        # before clipping, w*h of each ratio prior equals the square scale^2;
        # verify on interior cells where no clipping occurs
        cell = p[per * 25: per * 26]  # head 0, some interior cell
        if (cell[2:] < 1.0).all():
            s2 = cell[0, 2] * cell[0, 3]
            for row in cell[2:]:
                assert row[2] * row[3] == pytest.approx(s2)


class TestBuild:
    def test_param_count_full(self):
        model = M.build_model(FULL)
        n, nbytes = M.param_count(model)
        assert n == expected_param_count(21)
        assert nbytes == 4 * n
        assert 1_250_000 <= n <= 1_600_000

    def test_base_net_param_subtotal(self):
        model = M.build_model(FULL)
        base_n = sum(p.data.size for layer in model.base for p in layer.params())
        want = conv_params(3, 64, 3)
        for args in [(64, 16, 64, 64), (128, 16, 64, 64), (128, 32, 128, 128),
                     (256, 32, 128, 128), (256, 48, 192, 192), (384, 48, 192, 192),
                     (384, 64, 128, 128), (256, 64, 128, 128)]:
            want += fire_params(*args)
        assert base_n == want == 541760

    def test_fire_layer_param_formula(self):
        rng = np.random.default_rng(0)
        f = M.FireLayer(rng, "f", 64, 16, 64, 64)
        assert sum(p.data.size for p in f.params()) == 11408

    def test_tap_layer_channels(self):
        model = M.build_model(FULL)
        assert model.base[M.TAP_AFTER_ENTRY].out_ch == 256
        assert model.base[-1].out_ch == 256

    def test_deterministic_build(self):
        a = M.build_model(FULL, seed=3)
        b = M.build_model(FULL, seed=3)
        for name, p in a.parameters().items():
            assert np.array_equal(p.data, b.parameters()[name].data)

    def test_params_are_float32(self):
        model = M.build_model(TOY)
        assert all(p.data.dtype == np.float32 for p in model.parameters().values())

    def test_config_json_round_trip(self):
        for cfg in (FULL, HALF, TOY):
            assert ModelConfig.from_json(cfg.to_json()) == cfg


class TestForward:
    def test_toy_shapes(self):
        model = M.build_model(TOY, seed=1)
        x = Tensor(np.zeros((2, 3, 160, 160), np.float32))
        conf, loc = model.forward(x)
        assert conf.shape == (2, 438, 2)
        assert loc.shape == (2, 438, 6)

    def test_half_resolution_shapes(self):
        model = M.build_model(HALF, seed=1)
        conf, loc = model.forward(Tensor(np.zeros((1, 3, 320, 320), np.float32)))
        assert conf.shape == (1, 1626, 21)
        assert loc.shape == (1, 1626, 6)

    def test_wrong_input_shape(self):
        model = M.build_model(TOY)
        with pytest.raises(T.ShapeError, match="stacked"):
            model.forward(Tensor(np.zeros((1, 3, 80, 160), np.float32)))

    def test_zero_weights_give_zero_outputs(self):
        model = M.build_model(TOY, seed=2)
        for p in model.parameters().values():
            p.data = np.zeros_like(p.data)
        conf, loc = model.forward(Tensor(np.ones((1, 3, 160, 160), np.float32)))
        assert (conf.data == 0).all() and (loc.data == 0).all()

    def test_forward_deterministic(self):
        model = M.build_model(TOY, seed=4)
        x = Tensor(np.random.default_rng(0).standard_normal(
            (1, 3, 160, 160)).astype(np.float32))
        a, b = model.forward(x), model.forward(x)
        assert np.array_equal(a[0].data, b[0].data)
        assert np.array_equal(a[1].data, b[1].data)


class TestWeights:
    def test_fp32_round_trip_bit_exact(self, tmp_path):
        model = M.build_model(TOY, seed=5)
        p = tmp_path / "w.odw"
        M.save_weights(model, p, precision="fp32")
        back = M.load_weights(p)
        assert back.config == TOY
        for name, t in model.parameters().items():
            assert np.array_equal(t.data, back.parameters()[name].data)

    def test_fp32_round_trip_preserves_outputs(self, tmp_path):
        model = M.build_model(TOY, seed=6)
        p = tmp_path / "w.odw"
        M.save_weights(model, p)
        back = M.load_weights(p)
        x = Tensor(np.random.default_rng(1).standard_normal(
            (1, 3, 160, 160)).astype(np.float32))
        assert np.array_equal(model.forward(x)[1].data, back.forward(x)[1].data)

    def test_int8_error_bound(self, tmp_path):
        model = M.build_model(TOY, seed=7)
        p = tmp_path / "w.odw"
        M.save_weights(model, p, precision="int8")
        back = M.load_weights(p)
        for name, t in model.parameters().items():
            amax = np.max(np.abs(t.data))
            err = np.max(np.abs(t.data - back.parameters()[name].data))
            assert err <= amax / 127.0 / 2 + 1e-7  # half a quantization step

    def test_int8_size_ratio(self, tmp_path):
        model = M.build_model(TOY, seed=8)
        f32, i8 = tmp_path / "a.odw", tmp_path / "b.odw"
        M.save_weights(model, f32, "fp32")
        M.save_weights(model, i8, "int8")
        n, _ = M.param_count(model)
        # file = header + blob + 64-char digest; blob dominates
        assert f32.stat().st_size - i8.stat().st_size == pytest.approx(3 * n, abs=2000)

    def test_checksum_detects_corruption(self, tmp_path):
        model = M.build_model(TOY, seed=9)
        p = tmp_path / "w.odw"
        M.save_weights(model, p)
        raw = bytearray(p.read_bytes())
        raw[-100] ^= 0xFF  # flip a blob byte
        p.write_bytes(bytes(raw))
        with pytest.raises(M.WeightsFormatError, match="checksum"):
            M.load_weights(p)

    def test_rejects_foreign_file(self, tmp_path):
        p = tmp_path / "w.odw"
        p.write_bytes(b"not a weights file at all")
        with pytest.raises(M.WeightsFormatError):
            M.load_weights(p)
