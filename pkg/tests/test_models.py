import numpy as np
import pytest

from modewise.models import (
    Ensemble,
    ModelError,
    Network,
    bootstrap_resample,
    build_config,
    config_names,
    forward_full,
    load_network,
    member_seeds,
    num_params_closed_form,
    save_network,
    shape_after,
)
from modewise.nn import softmax
from modewise.pipeline import ChannelStack, Dataset


def batch(n=3, m=200, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 4, m))


class TestBuildConfig:
    def test_config_a_minimal(self):
        spec = build_config("A")
        assert spec.layers == (("conv", 32), ("conv", 32), ("flatten",),
                               ("dense", 5))

    def test_config_g_structure(self):
        spec = build_config("G", M=200)
        assert spec.layers == (
            ("conv", 32), ("conv", 32), ("pool",),
            ("conv", 64), ("conv", 64), ("pool",),
            ("conv", 128), ("conv", 128), ("pool",), ("dropout", 0.5),
            ("flatten",), ("dense", 800), ("dropout", 0.5), ("dense", 5))

    def test_config_h_adds_256_pair(self):
        g = build_config("G").layers
        h = build_config("H").layers
        # same prefix through the third pool + dropout, then the 256 pair
        assert h[:10] == g[:10]
        assert h[10:12] == (("conv", 256), ("conv", 256))
        # hidden FC width follows the larger flattened size: 25*256 / 4
        assert ("dense", 1600) in h

    def test_config_i_two_hidden_fcs(self):
        spec = build_config("I")
        dense = [d for d in spec.layers if d[0] == "dense"]
        assert dense == [("dense", 800), ("dense", 200), ("dense", 5)]
        drops = [d for d in spec.layers if d[0] == "dropout"]
        assert len(drops) == 3

    def test_dropout_counts(self):
        for name, expect in [("A", 0), ("B", 0), ("C", 0), ("D", 0), ("E", 0),
                             ("F", 4), ("G", 2), ("H", 2), ("I", 3)]:
            spec = build_config(name)
            assert sum(1 for d in spec.layers if d[0] == "dropout") == expect, name

    def test_per_layer_dropout_values(self):
        spec = build_config("G", dropout=(0.3, 0.6))
        drops = [d[1] for d in spec.layers if d[0] == "dropout"]
        assert drops == [0.3, 0.6]
        with pytest.raises(ModelError):
            build_config("G", dropout=(0.3, 0.4, 0.5))

    def test_unknown_name_lists_valid(self):
        with pytest.raises(ModelError, match="A, B, C"):
            build_config("Z")

    def test_all_configs_shape_check(self):
        for name in config_names():
            spec = build_config(name, M=200)
            assert shape_after(spec.layers, 200) == (5,)

    def test_scaled_down_filters(self):
        spec = build_config("G", filters=(8, 16, 32))
        convs = [d[1] for d in spec.layers if d[0] == "conv"]
        assert convs == [8, 8, 16, 16, 32, 32]
        assert ("dense", 200) in spec.layers  # 25*32/4


class TestNetwork:
    def test_forward_shapes_all_configs(self):
        x = batch(2, m=40)
        for name in config_names():
            net = Network.build(build_config(name, M=40), seed=1)
            logits = net.forward(x)
            assert logits.shape == (2, 5), name

    def test_zero_weights_uniform_probabilities(self):
        net = Network.build(build_config("B", M=24), seed=0)
        for p in net.named_params()[1]:
            p[...] = 0.0
        probs = forward_full(net, batch(4, m=24))
        np.testing.assert_allclose(probs, 0.2, atol=1e-12)

    def test_single_sample_shape(self):
        net = Network.build(build_config("A", M=16), seed=0)
        assert net.predict_proba(batch(1, m=16)).shape == (1, 5)

    def test_rows_sum_to_one(self):
        net = Network.build(build_config("G", M=40), seed=3)
        probs = net.predict_proba(batch(5, m=40))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_m_mismatch_raises(self):
        net = Network.build(build_config("A", M=32), seed=0)
        with pytest.raises(ModelError):
            net.forward(batch(1, m=16))

    def test_layerwise_replay_matches(self):
        # slow reference path: apply each layer separately in eval mode
        net = Network.build(build_config("E", M=32), seed=7)
        x = batch(3, m=32)
        out = x.astype(np.float64)
        for layer in net.layers:
            out = layer.forward(out, train=False)
        np.testing.assert_allclose(softmax(out), net.predict_proba(x),
                                   rtol=0, atol=1e-12)

    def test_param_count_two_ways(self):
        for name in ("A", "G", "H", "I"):
            spec = build_config(name)
            net = Network.build(spec, seed=0)
            assert net.num_params() == num_params_closed_form(spec), name

    def test_g_param_count_closed_form(self):
        # hand sum: convs 416+3104+6208+12352+24704+49280, denses 2560800+4005
        assert num_params_closed_form(build_config("G")) == 2_660_869

    def test_g_hidden_width_800(self):
        assert ("dense", 800) in build_config("G", M=200).layers

    def test_same_seed_same_weights(self):
        a = Network.build(build_config("B", M=16), seed=9)
        b = Network.build(build_config("B", M=16), seed=9)
        for p, q in zip(a.named_params()[1], b.named_params()[1]):
            np.testing.assert_array_equal(p, q)

    def test_get_set_weights_round_trip(self):
        net = Network.build(build_config("D", M=16), seed=2)
        x = batch(2, m=16)
        before = net.forward(x)
        weights = net.get_weights()
        for p in net.named_params()[1]:
            p += 1.0
        assert not np.allclose(net.forward(x), before)
        net.set_weights(weights)
        np.testing.assert_array_equal(net.forward(x), before)


class TestShapeAlgebra:
    def test_pool_composition_200_to_25(self):
        shape = shape_after((("conv", 32), ("pool",), ("conv", 64), ("pool",),
                             ("conv", 128), ("pool",)), 200)
        assert shape == (128, 25)

    def test_stride_one_pool_variant(self):
        shape = shape_after((("pool",),), 200, pool_stride=1)
        assert shape == (4, 199)


def tiny_dataset(n=40, m=8, seed=0):
    rng = np.random.default_rng(seed)
    samples = [ChannelStack(rng.normal(size=(4, m)).astype(np.float32),
                            int(rng.integers(0, 5)), m) for _ in range(n)]
    return Dataset(samples, M=m)


class TestBootstrap:
    def test_single_sample(self):
        ds = tiny_dataset(1)
        out = bootstrap_resample(ds, seed=0)
        assert len(out) == 1
        assert out.samples[0] == ds.samples[0]

    def test_same_seed_identical(self):
        ds = tiny_dataset(30)
        a = bootstrap_resample(ds, seed=4)
        b = bootstrap_resample(ds, seed=4)
        for s, t in zip(a.samples, b.samples):
            assert s == t

    def test_unique_fraction(self):
        n = 10_000
        rng = np.random.default_rng(0)
        idx = rng.integers(0, n, size=n)  # what resampling draws
        ds = tiny_dataset(200)
        out = bootstrap_resample(ds, seed=1)
        assert len(out) == 200
        frac = len(np.unique(idx)) / n
        assert abs(frac - 0.632) < 0.02


class TestEnsemble:
    def make_members(self, k, m=16, name="A"):
        return [Network.build(build_config(name, M=m), seed=s) for s in range(k)]

    def test_single_member_identity(self):
        (net,) = self.make_members(1)
        ens = Ensemble([net])
        x = batch(3, m=16)
        np.testing.assert_array_equal(ens.predict_proba(x), net.predict_proba(x))

    def test_average_of_two_onehot_members(self):
        class Fixed:
            def __init__(self, row, spec):
                self.row = np.array(row, dtype=float)
                self.spec = spec

            def predict_proba(self, x, batch_size=256):
                return np.tile(self.row, (len(x), 1))

        spec = build_config("A", M=16)
        ens = Ensemble.__new__(Ensemble)
        ens.members = [Fixed([1, 0, 0, 0, 0], spec), Fixed([0, 1, 0, 0, 0], spec)]
        out = ens.predict_proba(np.zeros((2, 4, 16)))
        np.testing.assert_allclose(out, [[0.5, 0.5, 0, 0, 0]] * 2)

    def test_rows_sum_to_one(self):
        ens = Ensemble(self.make_members(3))
        probs = ens.predict_proba(batch(4, m=16))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_permutation_invariant(self):
        members = self.make_members(3)
        x = batch(4, m=16)
        a = Ensemble(members).predict_proba(x)
        b = Ensemble(members[::-1]).predict_proba(x)
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_spec_mismatch_rejected(self):
        nets = [Network.build(build_config("A", M=16), seed=0),
                Network.build(build_config("B", M=16), seed=0)]
        with pytest.raises(ModelError, match="differing"):
            Ensemble(nets)

    def test_member_seeds_reproducible(self):
        a = member_seeds(42, 7)
        b = member_seeds(42, 7)
        assert len(a) == 7
        for s, t in zip(a, b):
            assert s.entropy == t.entropy and s.spawn_key == t.spawn_key


class TestTmmd:
    def test_round_trip_predictions(self, tmp_path):
        net = Network.build(build_config("G", M=24), seed=5)
        # f32 storage: quantize reference weights the same way
        net.set_weights([w.astype(np.float32).astype(np.float64)
                         for w in net.get_weights()])
        x = batch(3, m=24)
        path = str(tmp_path / "g.tmmd")
        save_network(net, path)
        back = load_network(path)
        assert back.spec.name == "G"
        assert back.spec.m == 24
        assert back.spec.layers == net.spec.layers
        np.testing.assert_array_equal(back.predict_proba(x), net.predict_proba(x))

    def test_save_load_save_byte_identical(self, tmp_path):
        net = Network.build(build_config("E", M=16), seed=1)
        p1, p2 = str(tmp_path / "a.tmmd"), str(tmp_path / "b.tmmd")
        save_network(net, p1)
        save_network(load_network(p1), p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.tmmd"
        p.write_bytes(b"XXXX" + b"\0" * 16)
        with pytest.raises(ModelError, match="magic"):
            load_network(str(p))

    def test_crc_detects_corruption(self, tmp_path):
        net = Network.build(build_config("A", M=16), seed=0)
        p = tmp_path / "n.tmmd"
        save_network(net, str(p))
        raw = bytearray(p.read_bytes())
        raw[30] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(ModelError, match="CRC"):
            load_network(str(p))
