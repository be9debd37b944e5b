import numpy as np
import pytest

from conftest import check_model_gradients
from sedetect.errors import (
    ConfigError,
    CorruptionError,
    FormatError,
    IncompatibleArchiveError,
    ShapeError,
    StaleCacheError,
)
from sedetect.model import (
    DESK_CONFIG,
    REFERENCE_CONFIG,
    ModelConfig,
    build_baseline_model,
    build_reference_model,
    build_scaled_model,
    load_weights,
    read_archive,
    save_weights,
)
from sedetect.training import cce_loss, one_hot

TINY = ModelConfig(input_size=8, widths=(4, 8, 8), se_stages=(1, 2), ratio=2, dense_units=6)


def closed_form_count(cfg: ModelConfig) -> int:
    """Parameter arithmetic from layer shapes, independent of the model code."""
    total, cin = 0, cfg.input_channels
    for stage, c in enumerate(cfg.widths):
        total += 9 * cin * c + c        # conv kernel + bias
        total += 4 * c                  # gamma, beta, moving mean, moving variance
        if stage in cfg.se_stages:
            h = c // cfg.ratio
            total += c * h + h + h * c + c
        cin = c
    flat = (cfg.input_size // 2 ** len(cfg.widths)) ** 2 * cin
    total += flat * cfg.dense_units + cfg.dense_units
    total += cfg.dense_units * cfg.num_classes + cfg.num_classes
    return total


@pytest.fixture(scope="module")
def reference():
    return build_reference_model(seed=0)


class TestArchitecture:
    def test_reference_count(self, reference):
        assert closed_form_count(REFERENCE_CONFIG) == 14_463_678
        assert reference.param_count() == 14_463_678

    def test_reference_payload_vs_table(self, reference):
        payload = 4 * reference.param_count()
        assert payload == 57_854_712
        for megabyte in (1e6, 2**20):
            assert abs(payload / megabyte - 56.18) / 56.18 < 0.05

    def test_spatial_halving(self, reference):
        sizes = [shape[1] for _, kind, shape, _ in reference.layer_table() if kind == "maxpool"]
        assert sizes == [112, 56, 28, 14, 7]
        assert reference.config.flatten_width == 7 * 7 * 512

    def test_layer_order(self, reference):
        kinds = [kind for _, kind, _, _ in reference.layer_table()]
        assert kinds[:4] == ["conv", "relu", "batchnorm", "maxpool"]
        assert kinds[4:9] == ["conv", "relu", "batchnorm", "se", "maxpool"]
        assert kinds[-5:] == ["flatten", "dense", "relu", "dense", "softmax"]

    def test_baseline_delta(self, reference):
        baseline = build_baseline_model(seed=0)
        assert reference.param_count() - baseline.param_count() == 44_540
        assert closed_form_count(REFERENCE_CONFIG.without_se()) == baseline.param_count()
        se_shapes = [(s, k) for _, k, s, _ in reference.layer_table() if k != "se"]
        base_shapes = [(s, k) for _, k, s, _ in baseline.layer_table()]
        assert se_shapes == base_shapes
        assert not any(k == "se" for _, k, _, _ in baseline.layer_table())

    def test_deterministic_init(self):
        a, b = build_scaled_model(DESK_CONFIG, seed=3), build_scaled_model(DESK_CONFIG, seed=3)
        for (na, ta), (nb, tb) in zip(a.state().items(), b.state().items()):
            assert na == nb
            assert ta.tobytes() == tb.tobytes()
        c = build_scaled_model(DESK_CONFIG, seed=4)
        assert c.parameters()["conv1.kernel"].tobytes() != a.parameters()["conv1.kernel"].tobytes()

    def test_init_values(self):
        m = build_scaled_model(DESK_CONFIG, seed=0)
        k = m.parameters()["conv2.kernel"]
        assert np.abs(k).max() <= 2 * np.sqrt(2 / (9 * 8)) + 1e-6
        assert not m.parameters()["conv2.bias"].any()

    def test_reference_forward_one_image(self, reference):
        p = reference.forward(np.random.default_rng(0).random((1, 224, 224, 3), dtype=np.float32))
        assert p.shape == (1, 2)
        assert abs(p.sum() - 1) < 1e-6

    @pytest.mark.parametrize("cfg", [DESK_CONFIG, DESK_CONFIG.without_se(),
                                     ModelConfig(input_size=32, widths=(8, 16), se_stages=(0,), ratio=8, dense_units=10)])
    def test_scaled_count(self, cfg):
        assert build_scaled_model(cfg).param_count() == closed_form_count(cfg)

    def test_zero_se_stages(self):
        table = build_scaled_model(DESK_CONFIG.without_se()).layer_table()
        assert sum(c for _, k, _, c in table if k == "se") == 0

    @pytest.mark.parametrize("kw, field", [
        (dict(widths=()), "widths"),
        (dict(input_size=30), "input_size"),
        (dict(se_stages=(7,)), "se_stages"),
        (dict(ratio=3), "ratio"),
        (dict(order="sideways"), "order"),
        (dict(num_classes=1), "num_classes"),
    ])
    def test_config_errors(self, kw, field):
        with pytest.raises(ConfigError, match=field):
            build_scaled_model(ModelConfig(**{**DESK_CONFIG.__dict__, **kw}))


def oracle_forward(model, x):
    """Straight-line 64-bit re-evaluation of the chain from the raw tensors."""
    s = {k: v.astype(np.float64) for k, v in model.state().items()}
    cfg = model.config
    h = x.astype(np.float64)
    for i, width in enumerate(cfg.widths, start=1):
        k, b = s[f"conv{i}.kernel"], s[f"conv{i}.bias"]
        n, hh, ww, _ = h.shape
        padded = np.zeros((n, hh + 2, ww + 2, h.shape[3]))
        padded[:, 1:-1, 1:-1] = h
        out = np.zeros((n, hh, ww, width)) + b
        for di in range(3):
            for dj in range(3):
                out += np.einsum("nhwc,cd->nhwd", padded[:, di:di + hh, dj:dj + ww], k[di, dj])
        mean, var = s[f"bn{i}.moving_mean"], s[f"bn{i}.moving_variance"]
        gamma, beta = s[f"bn{i}.gamma"], s[f"bn{i}.beta"]

        def bn(t):
            return gamma * (t - mean) / np.sqrt(var + 1e-3) + beta

        out = bn(np.maximum(out, 0)) if cfg.order == "relu_bn" else np.maximum(bn(out), 0)
        if f"se{i}.w1" in s:
            z = out.mean(axis=(1, 2))
            hidden = np.maximum(z @ s[f"se{i}.w1"] + s[f"se{i}.b1"], 0)
            gate = 1 / (1 + np.exp(-(hidden @ s[f"se{i}.w2"] + s[f"se{i}.b2"])))
            out = out * gate[:, None, None, :]
        h = np.maximum.reduce([out[:, a::2, c::2] for a in (0, 1) for c in (0, 1)])
    h = h.reshape(len(h), -1)
    h = np.maximum(h @ s["dense.kernel"] + s["dense.bias"], 0)
    logits = h @ s["head.kernel"] + s["head.bias"]
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def randomize_norm_stats(model, rng):
    for name, t in model.state().items():
        if name.endswith(("gamma", "moving_variance")):
            t[...] = rng.uniform(0.5, 1.5, t.shape)
        elif name.endswith(("beta", "moving_mean")) or ".b" in name or name.endswith("bias"):
            t[...] = rng.normal(0, 0.2, t.shape)


class TestForward:
    @pytest.mark.parametrize("order", ["relu_bn", "bn_relu"])
    def test_matches_oracle(self, rng, order):
        cfg = ModelConfig(**{**DESK_CONFIG.__dict__, "order": order})
        model = build_scaled_model(cfg, seed=1, dtype=np.float64)
        randomize_norm_stats(model, rng)
        x = rng.random((2, 32, 32, 3))
        np.testing.assert_allclose(model.forward(x, "infer"), oracle_forward(model, x), rtol=0, atol=1e-5)

    def test_float32_close_to_oracle(self, rng):
        model = build_scaled_model(DESK_CONFIG, seed=1)
        x = rng.random((2, 32, 32, 3)).astype(np.float32)
        np.testing.assert_allclose(model.forward(x), oracle_forward(model, x), atol=1e-5)

    def test_rows_sum_to_one(self, rng):
        model = build_scaled_model(DESK_CONFIG, seed=0)
        for mode in ("train", "infer"):
            p = model.forward(rng.random((5, 32, 32, 3)).astype(np.float32), mode)
            np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)

    def test_duplicate_sample_identical_rows(self, rng):
        model = build_scaled_model(DESK_CONFIG, seed=0)
        x = rng.random((3, 32, 32, 3)).astype(np.float32)
        x[2] = x[0]
        p = model.forward(x, "infer")
        assert p[0].tobytes() == p[2].tobytes()

    def test_infer_is_pure(self, rng):
        model = build_scaled_model(DESK_CONFIG, seed=0)
        x = rng.random((2, 32, 32, 3)).astype(np.float32)
        before = {k: v.copy() for k, v in model.state().items()}
        assert model.forward(x).tobytes() == model.forward(x).tobytes()
        assert all(np.array_equal(before[k], v) for k, v in model.state().items())
        assert all(layer.cache is None for layer in model.layers)

    def test_train_updates_running_stats(self, rng):
        model = build_scaled_model(DESK_CONFIG, seed=0)
        model.forward(rng.random((4, 32, 32, 3)).astype(np.float32), "train")
        assert model.state()["bn1.moving_mean"].any()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            build_scaled_model(DESK_CONFIG).forward(np.zeros((1, 16, 16, 3)))


class TestBackprop:
    def test_requires_train_forward(self, rng):
        model = build_scaled_model(TINY, dtype=np.float64)
        p = model.forward(rng.random((2, 8, 8, 3)), "infer")
        with pytest.raises(StaleCacheError):
            model.backprop(p, one_hot(np.array([0, 1]), dtype=np.float64))

    def test_cannot_reuse_caches(self, rng):
        model = build_scaled_model(TINY, dtype=np.float64)
        p = model.forward(rng.random((2, 8, 8, 3)), "train")
        y = one_hot(np.array([0, 1]), dtype=np.float64)
        model.backprop(p, y)
        with pytest.raises(StaleCacheError):
            model.backprop(p, y)

    def test_perfect_prediction_zero_head_gradient(self, rng):
        model = build_scaled_model(TINY, dtype=np.float64)
        model.parameters()["head.kernel"][...] = 0
        model.parameters()["head.bias"][...] = [500.0, -500.0]
        p = model.forward(rng.random((3, 8, 8, 3)), "train")
        y = one_hot(np.zeros(3, int), dtype=np.float64)
        np.testing.assert_array_equal(p, y)
        grads = model.backprop(p, y)
        assert not grads["head.kernel"].any() and not grads["head.bias"].any()

    def test_duplicated_batch_same_gradients(self, rng):
        model = build_scaled_model(TINY, dtype=np.float64)
        x = rng.random((3, 8, 8, 3))
        y = one_hot(np.array([0, 1, 1]), dtype=np.float64)
        g1 = {k: v.copy() for k, v in model.backprop(model.forward(x, "train"), y).items()}
        g2 = model.backprop(model.forward(np.concatenate([x, x]), "train"), np.concatenate([y, y]))
        for name in g1:
            np.testing.assert_allclose(g2[name], g1[name], rtol=1e-9, atol=1e-14, err_msg=name)

    @pytest.mark.parametrize("seed", [0, 1])
    @pytest.mark.parametrize("order", ["relu_bn", "bn_relu"])
    def test_end_to_end_finite_differences(self, order, seed):
        # Coordinates whose +/- step flips a ReLU or pooling decision retry
        # with a smaller step; see numerical_gradient.
        cfg = ModelConfig(**{**TINY.__dict__, "order": order})
        model = build_scaled_model(cfg, seed=seed, dtype=np.float64)
        x = np.random.default_rng(100 + seed).random((3, 8, 8, 3))
        y = one_hot(np.array([0, 1, 0]), dtype=np.float64)
        for name, (err, _, _) in check_model_gradients(model, x, y, cce_loss).items():
            assert err < 1e-4, (name, err)

    def test_finite_difference_error_shrinks_with_step(self):
        import conftest
        errors = []
        for step in (1e-4, 1e-5):
            conftest.FD_STEP, saved = step, conftest.FD_STEP
            try:
                model = build_scaled_model(TINY, seed=2, dtype=np.float64)
                x = np.random.default_rng(1234).random((3, 8, 8, 3))
                res = check_model_gradients(model, x, one_hot(np.array([0, 1, 0]), dtype=np.float64), cce_loss)
            finally:
                conftest.FD_STEP = saved
            errors.append(max(e for e, _, _ in res.values()))
        assert errors[1] < errors[0] / 20 and errors[1] < 1e-7

    def test_small_step_does_not_increase_loss(self, rng):
        model = build_scaled_model(TINY, seed=5, dtype=np.float64)
        x = rng.random((4, 8, 8, 3))
        y = one_hot(np.array([0, 1, 1, 0]), dtype=np.float64)
        p = model.forward(x, "train")
        before = cce_loss(p, y)
        grads = model.backprop(p, y)
        for name, param in model.parameters().items():
            param -= 1e-4 * grads[name]
        assert cce_loss(model.forward(x, "train"), y) <= before


class TestWeightArchive:
    def test_round_trip_reference(self, reference, tmp_path):
        path = tmp_path / "ref.sew"
        save_weights(reference, path)
        assert path.stat().st_size == reference.serialized_size_bytes()
        other = build_reference_model(seed=9)
        load_weights(other, path)
        for name, t in reference.state().items():
            assert other.state()[name].tobytes() == t.tobytes(), name

    def test_header_layout(self, tmp_path):
        model = build_scaled_model(TINY)
        save_weights(model, tmp_path / "w")
        raw = (tmp_path / "w").read_bytes()
        assert raw[:4] == b"SEW1"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:12], "little") == len(model.state())
        name_len = int.from_bytes(raw[12:14], "little")
        assert raw[14:14 + name_len] == b"conv1.kernel"
        assert raw[14 + name_len] == 4
        archive = read_archive(tmp_path / "w")
        assert archive.manifest == model.manifest()
        payload = raw[len(raw) - 4 * model.param_count():]
        assert payload[:4] == model.state()["conv1.kernel"].ravel()[:1].astype("<f4").tobytes()

    def test_truncated(self, tmp_path):
        save_weights(build_scaled_model(TINY), tmp_path / "w")
        raw = (tmp_path / "w").read_bytes()
        (tmp_path / "w").write_bytes(raw[:-1])
        with pytest.raises(CorruptionError):
            load_weights(build_scaled_model(TINY), tmp_path / "w")
        (tmp_path / "w").write_bytes(raw[:20])
        with pytest.raises(CorruptionError):
            read_archive(tmp_path / "w")

    def test_bad_magic_and_version(self, tmp_path):
        save_weights(build_scaled_model(TINY), tmp_path / "w")
        raw = bytearray((tmp_path / "w").read_bytes())
        (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(FormatError):
            read_archive(tmp_path / "bad")
        raw[4] = 2
        (tmp_path / "v2").write_bytes(raw)
        with pytest.raises(FormatError, match="version"):
            read_archive(tmp_path / "v2")

    def test_incompatible(self, tmp_path):
        save_weights(build_scaled_model(TINY), tmp_path / "w")
        with pytest.raises(IncompatibleArchiveError):
            load_weights(build_scaled_model(TINY.without_se()), tmp_path / "w")
        with pytest.raises(IncompatibleArchiveError):
            load_weights(build_scaled_model(ModelConfig(**{**TINY.__dict__, "dense_units": 7})), tmp_path / "w")
