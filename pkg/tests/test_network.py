import json

import numpy as np
import pytest

from conftest import random_image
from netlens.errors import GraphError, NumericError, ShapeError, SpecError
from netlens.network import (
    INPUT,
    LayerSpec,
    build_network,
    conv2d,
    conv_out,
    forward,
    load_network,
    make_synthetic_network,
    run_layer,
    softmax,
)
from netlens.npyio import write_npy


def write_manifest(tmp_path, layers, input_shape, classes, arrays):
    for name, arr in arrays.items():
        write_npy(arr, tmp_path / name)
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"input_shape": input_shape, "classes": classes, "layers": layers}))
    return path


def identity_conv_manifest(tmp_path, out_channels=3, kernel=None):
    kernel = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1) if kernel is None else kernel
    return write_manifest(
        tmp_path,
        [{"name": "conv1", "kind": "conv2d", "params": {"out_channels": out_channels, "kernel": [1, 1]},
          "weights": "k.npy", "bias": "b.npy"},
         {"name": "gap", "kind": "avgpool_global"}],
        [3, 4, 4], 3, {"k.npy": kernel, "b.npy": np.zeros(3, np.float32)},
    )


class TestLoad:
    def test_identity_network(self, tmp_path):
        net = load_network(identity_conv_manifest(tmp_path))
        assert [l.kind for l in net.layers] == ["conv2d", "avgpool_global"]
        x = random_image(3, (2, 3, 4, 4))
        _, trace = forward(net, x, trace=True)
        np.testing.assert_array_equal(trace["conv1"], x)

    def test_out_channel_mismatch(self, tmp_path):
        kernel = np.zeros((3, 3, 1, 1), np.float32)
        with pytest.raises(SpecError, match="conv1: out_channels mismatch"):
            load_network(identity_conv_manifest(tmp_path, out_channels=4, kernel=kernel))

    def test_missing_weight_file(self, tmp_path):
        path = identity_conv_manifest(tmp_path)
        (tmp_path / "k.npy").unlink()
        with pytest.raises(FileNotFoundError, match="k.npy"):
            load_network(path)

    def test_cycle_detected(self):
        w = np.ones((2, 2))
        layers = [
            LayerSpec("a", "relu", ("b",)),
            LayerSpec("b", "relu", ("a",)),
            LayerSpec("c", "flatten", (INPUT,)),
        ]
        with pytest.raises(GraphError, match="cycle"):
            build_network(layers, (1, 1, 2), 2)

    def test_two_sinks_rejected(self):
        layers = [LayerSpec("a", "avgpool_global", (INPUT,)), LayerSpec("b", "avgpool_global", (INPUT,))]
        with pytest.raises(GraphError, match="single output"):
            build_network(layers, (2, 2, 2), 2)

    def test_add_shape_mismatch(self):
        layers = [
            LayerSpec("p", "maxpool", (INPUT,), {"window": 2}),
            LayerSpec("s", "add", (INPUT, "p")),
            LayerSpec("g", "avgpool_global", ("s",)),
        ]
        with pytest.raises(ShapeError):
            build_network(layers, (2, 4, 4), 2)

    def test_class_count_checked(self, tmp_path):
        with pytest.raises(SpecError, match="classes"):
            build_network([LayerSpec("g", "avgpool_global", (INPUT,))], (3, 2, 2), 5)

    def test_out_of_order_manifest_is_sorted(self):
        layers = [
            LayerSpec("g", "avgpool_global", ("r",)),
            LayerSpec("r", "relu", (INPUT,)),
        ]
        net = build_network(layers, (2, 3, 3), 2)
        assert [l.name for l in net.layers] == ["r", "g"]

    def test_batchnorm_folded(self, tmp_path):
        rng = np.random.default_rng(0)
        k = rng.uniform(-1, 1, (4, 3, 3, 3)).astype(np.float32)
        b = rng.uniform(-1, 1, 4).astype(np.float32)
        gamma, beta = rng.uniform(0.5, 2, 4).astype(np.float32), rng.uniform(-1, 1, 4).astype(np.float32)
        mean, var = rng.uniform(-1, 1, 4).astype(np.float32), rng.uniform(0.1, 2, 4).astype(np.float32)
        eps = 1e-3
        path = write_manifest(
            tmp_path,
            [{"name": "conv1", "kind": "conv2d", "params": {"out_channels": 4, "kernel": [3, 3], "padding": 1},
              "weights": "k.npy", "bias": "b.npy"},
             {"name": "bn1", "kind": "batchnorm", "params": {"eps": eps},
              "gamma": "g.npy", "beta": "be.npy", "mean": "m.npy", "var": "v.npy"},
             {"name": "relu1", "kind": "relu"},
             {"name": "gap", "kind": "avgpool_global"}],
            [3, 6, 6], 4,
            {"k.npy": k, "b.npy": b, "g.npy": gamma, "be.npy": beta, "m.npy": mean, "v.npy": var},
        )
        net = load_network(path)
        assert [l.kind for l in net.layers] == ["conv2d", "relu", "avgpool_global"]
        x = random_image(5, (2, 3, 6, 6))
        _, trace = forward(net, x, trace=True)
        # unfolded reference: convolution, then inference-mode batchnorm
        f64 = lambda a: a.astype(np.float64)
        z = conv2d(x, f64(k), 1, 1) + f64(b)[None, :, None, None]
        ref = (z - f64(mean)[None, :, None, None]) / np.sqrt(f64(var) + eps)[None, :, None, None]
        ref = ref * f64(gamma)[None, :, None, None] + f64(beta)[None, :, None, None]
        np.testing.assert_allclose(trace["conv1"], ref, rtol=1e-5, atol=1e-5)


class TestForward:
    def test_dense_convention(self):
        w = np.array([[1.0, 2.0], [3.0, 4.0]])
        layer = LayerSpec("fc", "dense", (INPUT,), weight=w, bias=np.zeros(2))
        # output k is row k of W dotted with x
        np.testing.assert_array_equal(run_layer(layer, [np.array([[1.0, 1.0]])]), [[3.0, 7.0]])

    def test_relu(self):
        layer = LayerSpec("r", "relu", (INPUT,))
        np.testing.assert_array_equal(run_layer(layer, [np.array([-1.0, 2.0])]), [0.0, 2.0])

    def test_conv_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x, w = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 2))
        stride, pad = 2, 1
        out = conv2d(x, w, stride, pad)
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho, wo = conv_out(7, 3, stride, pad), conv_out(6, 2, stride, pad)
        ref = np.zeros((2, 4, ho, wo))
        for n in range(2):
            for o in range(4):
                for y in range(ho):
                    for xx in range(wo):
                        ref[n, o, y, xx] = np.sum(xp[n, :, y * stride:y * stride + 3, xx * stride:xx * stride + 2] * w[o])
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_shape_algebra_holds_for_every_layer(self, synthetic_net):
        net = synthetic_net(seed=2, depth=3, channels=(4, 8, 5), residual=True)
        _, trace = forward(net, random_image(0, (2, 3, 16, 16)), trace=True)
        for layer in net.layers:
            assert trace[layer.name].shape[1:] == net.shapes[layer.name]
            assert trace[layer.name].shape[0] == 2
            if layer.kind == "relu":
                assert trace[layer.name].min() >= 0

    def test_batch_shape_checked(self, synthetic_net):
        net = synthetic_net()
        with pytest.raises(ShapeError):
            forward(net, np.zeros((1, 3, 8, 8)))

    def test_deterministic(self, synthetic_net):
        net = synthetic_net(seed=4)
        x = random_image(1, (3, 3, 16, 16))
        a, _ = forward(net, x)
        b, _ = forward(net, x)
        assert a.tobytes() == b.tobytes()

    def test_trace_replay_from_any_layer(self, synthetic_net):
        net = synthetic_net(seed=5, depth=3, channels=(4, 8, 5), residual=True)
        _, trace = forward(net, random_image(2, (2, 3, 16, 16)), trace=True)
        for start in range(len(net.layers)):
            values = {INPUT: trace.input}
            values.update({l.name: trace[l.name] for l in net.layers[:start]})
            for layer in net.layers[start:]:
                values[layer.name] = run_layer(layer, [values[s] for s in layer.inputs])
                assert values[layer.name].tobytes() == trace[layer.name].tobytes()


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(np.zeros(5)), [0.2] * 5, atol=1e-15)

    def test_stable_for_large_logits(self):
        p = softmax(np.array([1000.0, 0.0]))
        assert abs(p[0] - 1.0) <= 1e-7 and p[1] <= 1e-7

    def test_closed_form(self):
        np.testing.assert_allclose(softmax(np.log([2.0, 1.0])), [2 / 3, 1 / 3], rtol=1e-12)

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            softmax(np.array([0.0, np.nan]))


class TestSynthetic:
    def test_same_seed_same_bytes(self, tmp_path):
        _, fa = make_synthetic_network(7, 3, [4, 8, 5], tmp_path / "a")
        _, fb = make_synthetic_network(7, 3, [4, 8, 5], tmp_path / "b")
        assert [f.name for f in fa] == [f.name for f in fb]
        for a, b in zip(fa, fb):
            assert a.read_bytes() == b.read_bytes()

    def test_layout(self, synthetic_net):
        net = synthetic_net(seed=1, depth=3, channels=(4, 8, 5))
        convs = [l for l in net.layers if l.kind == "conv2d"]
        assert [c.weight.shape[0] for c in convs] == [4, 8, 5]
        assert [l.kind for l in net.layers[-3:]] == ["avgpool_global", "dense", "softmax_head"]
        assert net.classes == 5

    def test_weights_in_range(self, synthetic_net):
        net = synthetic_net(seed=3)
        for l in net.layers:
            if l.weight is not None:
                assert l.weight.min() >= -0.5 and l.weight.max() < 0.5

    def test_zero_bias(self, synthetic_net):
        net = synthetic_net(seed=3, zero_bias=True)
        assert all(not l.bias.any() for l in net.layers if l.bias is not None)

    @pytest.mark.parametrize("seed", range(20))
    def test_smoke_finite_logits(self, synthetic_net, seed):
        net = synthetic_net(seed=seed, depth=3, channels=(4, 8, 5), residual=seed % 2 == 0)
        logits, _ = forward(net, random_image(seed, (2, 3, 16, 16)))
        assert logits.shape == (2, 5) and np.all(np.isfinite(logits))
