import numpy as np
import pytest

from jlu.autodiff import DimensionError, backward, constant, finite_diff_grad, mean_all, sgd_step, softmax_rows
from jlu.model import (
    CHECKPOINT_MAGIC,
    Architecture,
    CheckpointFormatError,
    ConfigurationError,
    TaskSpec,
    checksum,
    forward_features,
    forward_head,
    init_bundle,
    load_bundle,
    params_of,
    save_bundle,
)


def arch(m=3, **kw):
    secondary = [TaskSpec(f"s{i}", 2 + i) for i in range(m)]
    return Architecture(input_dim=5, primary=TaskSpec("p", 4), hidden=(7,), embedding_dim=6, secondary=secondary, **kw)


def test_init_is_deterministic_per_seed():
    a, b, c = init_bundle(arch(), 1), init_bundle(arch(), 1), init_bundle(arch(), 2)
    assert checksum(a.all_params()) == checksum(b.all_params())
    assert checksum(a.all_params()) != checksum(c.all_params())


def test_init_scheme():
    bundle = init_bundle(arch(), 0)
    for layer in bundle.extractor.layers:
        assert not layer.bias.values.any()
        bound = 1 / np.sqrt(layer.spec.in_dim)
        assert np.abs(layer.weight.values).max() <= bound
    assert not bundle.primary_head.bias.values.any()


def test_secondary_heads_do_not_shift_shared_init():
    with_heads, without = init_bundle(arch(3), 4), init_bundle(arch(0), 4)
    assert checksum(params_of(with_heads, "repr") + params_of(with_heads, "primary")) == checksum(
        params_of(without, "repr") + params_of(without, "primary")
    )


def test_invalid_architectures():
    with pytest.raises(ConfigurationError):
        init_bundle(Architecture(input_dim=0, primary=TaskSpec("p", 2)), 0)
    with pytest.raises(ConfigurationError):
        init_bundle(Architecture(input_dim=3, primary=TaskSpec("p", 1)), 0)
    with pytest.raises(ConfigurationError):
        init_bundle(arch(frozen_layers=(5,)), 0)
    with pytest.raises(ConfigurationError):
        init_bundle(Architecture(input_dim=3, primary=TaskSpec("p", 2), secondary=[TaskSpec("p", 2)]), 0)


def test_identity_linear_layer_passes_input_through():
    bundle = init_bundle(Architecture(input_dim=3, primary=TaskSpec("p", 2), hidden=(), embedding_dim=3), 0)
    bundle.extractor.layers[0].weight.values = np.eye(3)
    x = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_array_equal(forward_features(bundle, x).values, x)


def test_zero_weights_give_zero_embedding_and_uniform_head():
    bundle = init_bundle(arch(), 0)
    for p in bundle.all_params():
        p.values[:] = 0.0
    emb = forward_features(bundle, np.ones((3, 5)))
    assert emb.shape == (3, 6) and not emb.values.any()
    np.testing.assert_allclose(softmax_rows(forward_head(bundle.primary_head, emb)).values, 0.25)


def test_head_identity_case():
    bundle = init_bundle(Architecture(input_dim=3, primary=TaskSpec("p", 2), hidden=(), embedding_dim=3), 0)
    head = bundle.primary_head
    head.weight.values = np.eye(3)[:, :2]
    emb = constant([[0.3, -1.2, 7.0]])
    np.testing.assert_array_equal(forward_head(head, emb).values, [[0.3, -1.2]])


def test_head_rows_sum_to_one_and_shape_checks():
    bundle = init_bundle(arch(), 3)
    x = np.random.default_rng(1).standard_normal((8, 5))
    p = softmax_rows(forward_head(bundle.secondary_heads[2], forward_features(bundle, x))).values
    assert p.shape == (8, 4)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(DimensionError):
        forward_features(bundle, np.zeros((2, 4)))
    with pytest.raises(DimensionError):
        forward_head(bundle.primary_head, constant(np.zeros((2, 5))))


def test_embedding_gradient_matches_fd():
    bundle = init_bundle(arch(), 5)
    x = np.random.default_rng(2).standard_normal((9, 5))
    w = bundle.extractor.layers[0].weight
    w0 = w.values.copy()
    backward(mean_all(forward_features(bundle, x)))
    analytic = w.grad.copy()

    def f(v):
        w.values = v
        return mean_all(forward_features(bundle, x)).item()

    numeric = finite_diff_grad(f, w0)
    w.values = w0
    err = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-3)
    assert err.max() < 1e-4


def test_params_of_partition():
    bundle = init_bundle(arch(3), 0)
    assert len(params_of(bundle, "primary")) == 2
    groups = [params_of(bundle, s) for s in ("repr", "primary", "all_secondary")]
    ids = [id(p) for g in groups for p in g]
    assert len(ids) == len(set(ids))
    assert set(ids) == {id(p) for p in bundle.all_params()}
    per_head = [params_of(bundle, f"secondary:{i}") for i in range(3)]
    assert [id(p) for g in per_head for p in g] == [id(p) for p in params_of(bundle, "all_secondary")]
    assert params_of(bundle, "secondary:s1") == per_head[1]
    with pytest.raises(ConfigurationError):
        params_of(bundle, "secondary:9")
    with pytest.raises(ConfigurationError):
        params_of(bundle, "everything")


def test_frozen_layers_are_excluded_and_never_move():
    bundle = init_bundle(arch(frozen_layers=(0, 1)), 0)
    assert params_of(bundle, "repr") == []
    partly = init_bundle(arch(frozen_layers=(0,)), 0)
    before = checksum(partly.extractor.layers[0].params())
    x = np.random.default_rng(0).standard_normal((4, 5))
    for _ in range(5):
        backward(mean_all(forward_features(partly, x)))
        sgd_step(partly.all_params(), 0.5)
    assert checksum(partly.extractor.layers[0].params()) == before
    assert len(params_of(partly, "repr")) == 2


def test_checkpoint_round_trip(tmp_path):
    bundle = init_bundle(arch(2, frozen_layers=(0,)), 7)
    x = np.random.default_rng(3).standard_normal((4, 5))
    logits = forward_head(bundle.primary_head, forward_features(bundle, x)).values
    first, second = tmp_path / "a.bin", tmp_path / "b.bin"
    save_bundle(bundle, first)
    loaded = load_bundle(first)
    save_bundle(loaded, second)
    assert first.read_bytes() == second.read_bytes()
    assert first.read_bytes().startswith(CHECKPOINT_MAGIC)
    assert loaded.arch == bundle.arch
    np.testing.assert_array_equal(forward_head(loaded.primary_head, forward_features(loaded, x)).values, logits)
    assert loaded.extractor.layers[0].weight.frozen


def test_checkpoint_format_errors(tmp_path):
    path = tmp_path / "c.bin"
    save_bundle(init_bundle(arch(), 0), path)
    data = path.read_bytes()

    bad = tmp_path / "bad.bin"
    for blob, pattern in [
        (data[:-9], "truncated"),
        (data[:12], "truncated"),
        (b"NOTACKPT" + data[8:], "magic"),
        (data[:8] + (2).to_bytes(4, "little") + data[12:], "version"),
        (data + b"\x00", "trailing"),
    ]:
        bad.write_bytes(blob)
        with pytest.raises(CheckpointFormatError, match=pattern):
            load_bundle(bad)


def test_architecture_dict_round_trip():
    a = arch(2, frozen_layers=(1,))
    assert Architecture.from_dict(a.to_dict()) == a
