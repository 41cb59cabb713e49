import numpy as np
import pytest
from hypothesis import given, strategies as st

from mtcae import checkpoint
from mtcae.checkpoint import CheckpointError
from mtcae.experiment import TOY_ARCH, joint_gradcheck, run_gradcheck, toy_problem
from mtcae.model import (
    Architecture,
    ConfigError,
    MtcAeModel,
    Split,
    TrainConfig,
    backward,
    build_model,
    forward,
    fuse,
    joint_loss,
    loss_terms,
    predict,
    predict_scores,
    train,
)
from mtcae.nn_core import NumericError, ShapeError
from mtcae.sdae import SdaeConfig, pretrain_channels

SMALL = TrainConfig(bottleneck=3, local_hidden=5, global_hidden=7, epochs=5, lr=1e-2,
                    batch_size=16)


def _small_model(dims=(4, 3, 5), seed=0, hidden=6):
    return build_model(dims, None, SMALL, np.random.default_rng(seed), sdae_hidden=hidden)


def _separable(n_per_class=30, dims=(4, 3, 5), seed=0, sep=4.0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(4), n_per_class)
    means = [rng.normal(size=(4, d)) * sep for d in dims]
    xs = [m[labels] + rng.normal(size=(len(labels), d)) for m, d in zip(means, dims)]
    return Split(xs, labels)


# --- construction -----------------------------------------------------------


def test_default_widths_and_global_input():
    arch = Architecture(tuple([5] * 38))
    assert arch.global_shapes()[0] == (1000, 1140)
    assert arch.local_shapes(5) == [(400, 5), (400, 400), (30, 400), (100, 30), (4, 100)]


def test_build_copies_encoders_bit_equal():
    rng = np.random.default_rng(0)
    channels = [rng.normal(size=(20, d)) for d in (4, 3)]
    stacks = pretrain_channels(channels, SdaeConfig(hidden=6, epochs=1), seed=0)
    model = build_model((4, 3), stacks, SMALL, np.random.default_rng(1))
    for local, stack in zip(model.locals, stacks):
        assert np.array_equal(local.layer1.weights, stack.stages[0].encoder.weights)
        assert np.array_equal(local.layer1.biases, stack.stages[0].encoder.biases)
        assert np.array_equal(local.layer2.weights, stack.stages[1].encoder.weights)
    other = build_model((4, 3), stacks, SMALL, np.random.default_rng(1))
    assert np.array_equal(model.params, other.params)
    # random top layers: zero biases, glorot-bounded weights
    assert not model.locals[0].bottleneck.biases.any()
    assert np.abs(model.global_clf.hidden.weights).max() <= np.sqrt(6 / (6 + 7))


def test_build_rejects_mismatched_stacks():
    rng = np.random.default_rng(0)
    stacks = pretrain_channels([rng.normal(size=(10, 4))], SdaeConfig(hidden=6, epochs=1), 0)
    with pytest.raises(ConfigError):
        build_model((4, 3), stacks, SMALL, rng)
    with pytest.raises(ConfigError):
        build_model((5,), stacks, SMALL, rng)


def test_config_validates():
    with pytest.raises(ConfigError):
        TrainConfig(lam=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(gamma=-0.1)


def test_params_are_views():
    model = _small_model()
    model.params[:] = 0.0
    assert not model.locals[1].hidden.weights.any()
    model.blocks["global.output.bias"][:] = 3.0
    assert np.all(model.global_clf.output.biases == 3.0)
    assert model.params.size == model.arch.n_params


# --- forward ----------------------------------------------------------------


def test_zero_model_is_uniform():
    model = MtcAeModel(Architecture((3,), 4, 4, 2, 3, global_hidden=5))
    cache = forward(model, [np.random.default_rng(0).normal(size=(6, 3))])
    assert np.array_equal(cache.global_probs, np.full((6, 4), 0.25))
    assert np.array_equal(cache.local_probs[0], np.full((6, 4), 0.25))


def test_forward_shapes_and_row_sums():
    model = _small_model()
    data = _separable(16)
    cache = forward(model, data.channels)
    assert cache.global_probs.shape == (64, 4)
    assert cache.bottleneck.shape == (64, 9)
    for p in [cache.global_probs, *cache.local_probs]:
        assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-12)


def test_forward_shape_errors():
    model = _small_model()
    with pytest.raises(ShapeError):
        forward(model, [np.zeros((2, 4)), np.zeros((2, 3))])
    with pytest.raises(ShapeError):
        forward(model, [np.zeros((2, 4)), np.zeros((2, 3)), np.zeros((2, 6))])
    with pytest.raises(ShapeError):
        forward(model, [np.zeros((2, 4)), np.zeros((3, 3)), np.zeros((2, 5))])


def test_forward_does_not_mutate():
    model = _small_model()
    before = model.params.copy()
    cache = forward(model, _separable(4).channels)
    backward(model, cache, np.zeros(16, dtype=int), 0.3)
    assert np.array_equal(model.params, before)


def test_channel_permutation_consistency():
    """Reordering channels, with the global weight columns moved to match, is invisible."""
    dims = (4, 3, 5)
    model = _small_model(dims)
    data = _separable(4, dims)
    perm = [2, 0, 1]
    pdims = tuple(dims[i] for i in perm)
    other = build_model(pdims, None, SMALL, np.random.default_rng(9), sdae_hidden=6)
    for j, i in enumerate(perm):
        for name in ("layer1", "layer2", "bottleneck", "hidden", "output"):
            for kind in ("weight", "bias"):
                other.blocks[f"local{j:02d}.{name}.{kind}"][...] = \
                    model.blocks[f"local{i:02d}.{name}.{kind}"]
    B = model.arch.bottleneck
    cols = np.concatenate([np.arange(i * B, (i + 1) * B) for i in perm])
    other.blocks["global.hidden.weight"][...] = model.blocks["global.hidden.weight"][:, cols]
    for name in ("global.hidden.bias", "global.output.weight", "global.output.bias"):
        other.blocks[name][...] = model.blocks[name]
    a = forward(model, data.channels)
    b = forward(other, [data.channels[i] for i in perm])
    assert np.allclose(a.global_probs, b.global_probs, rtol=0, atol=1e-14)


# --- loss and gradients -----------------------------------------------------


class _FakeCache:
    def __init__(self, global_probs, local_probs):
        self.global_probs = global_probs
        self.local_probs = local_probs


def test_joint_loss_example():
    y = np.array([0])
    q = lambda ce: np.array([[np.exp(-ce), 1 - np.exp(-ce), 0, 0]])
    cache = _FakeCache(q(1.0), [q(2.0), q(3.0)])
    assert joint_loss(cache, y, 0.1) == pytest.approx(4.6, abs=1e-12)
    assert joint_loss(cache, y, 1.0) == pytest.approx(1.0, abs=1e-12)
    assert joint_loss(cache, y, 0.0) == pytest.approx(5.0, abs=1e-12)


@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_joint_loss_matches_recomputation(seed, lam):
    model = _small_model(seed=seed % 1000)
    rng = np.random.default_rng(seed)
    x = [rng.normal(size=(5, d)) for d in (4, 3, 5)]
    y = rng.integers(0, 4, 5)
    cache = forward(model, x)
    pick = lambda p: -np.log(p[np.arange(5), y]).mean()
    expected = lam * pick(cache.global_probs) + (1 - lam) * sum(map(pick, cache.local_probs))
    assert abs(joint_loss(cache, y, lam) - expected) <= 1e-12
    g, ls = loss_terms(cache, y)
    assert g == pick(cache.global_probs)


def test_degenerate_lambda_gradients_are_exactly_zero():
    model, x, y = toy_problem(0)
    g0 = model.grad_views(backward(model, forward(model, x), y, 0.0))
    g1 = model.grad_views(backward(model, forward(model, x), y, 1.0))
    for name in g0:
        if name.startswith("global."):
            assert not g0[name].any(), name
        elif ".hidden." in name or ".output." in name:
            assert not g1[name].any(), name
            assert g0[name].any(), name
        else:
            # layer1/layer2/bottleneck are reached from the global loss as well
            assert g1[name].any(), name


def test_backward_reuses_buffer():
    model, x, y = toy_problem(1)
    cache = forward(model, x)
    fresh = backward(model, cache, y, 0.0)
    buf = np.full(model.arch.n_params, 7.0)
    backward(model, cache, y, 0.0, out=buf)
    assert np.array_equal(buf, fresh)


@pytest.mark.parametrize("seed", range(20))
def test_joint_gradient_matches_differences(seed):
    lam = [0.0, 0.1, 0.5, 1.0][seed % 4]
    model, x, y = toy_problem(seed)
    per_block, _, _ = joint_gradcheck(model, x, y, lam)
    assert max(per_block.values()) < 1e-5


def test_gradcheck_report_shape():
    report = run_gradcheck(seed=0, lambdas=(0.0, 1.0))
    assert report["passed"]
    zero = report["cases"][0]
    assert zero["lambda"] == 0.0 and zero["global_grad_max_abs"] == 0.0
    assert report["cases"][1]["local_head_grad_max_abs"] == 0.0
    assert len(zero["per_block"]) == len(TOY_ARCH.layout())


# --- fusion and prediction --------------------------------------------------


def test_fuse_example():
    cache = _FakeCache(np.array([[0.7, 0.1, 0.1, 0.1]]), [np.full((1, 4), 0.25)] * 2)
    fused = fuse(cache, 0.95)
    assert np.allclose(fused, [[0.69, 0.12, 0.12, 0.12]], rtol=0, atol=1e-15)
    assert np.array_equal(fuse(cache, 1.0), cache.global_probs)
    assert np.allclose(fuse(cache, 0.5, local_mean=True), [[0.475, 0.175, 0.175, 0.175]])


@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_fuse_row_sums(seed, gamma):
    model = _small_model(seed=seed % 1000)
    rng = np.random.default_rng(seed)
    cache = forward(model, [rng.normal(size=(7, d)) for d in (4, 3, 5)])
    sums = fuse(cache, gamma).sum(axis=1)
    assert np.all(np.abs(sums - (gamma + (1 - gamma) * 3)) <= 1e-12)


def test_predict_examples():
    scores = np.array([[0.69, 0.12, 0.12, 0.12], [0.2, 0.3, 0.3, 0.2]])
    assert list(np.argmax(scores, axis=1)) == [0, 1]
    model = _small_model()
    x = _separable(8).channels
    cache = forward(model, x)
    assert np.array_equal(predict(model, x, 1.0), np.argmax(cache.global_probs, axis=1))


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_predict_invariant_to_monotone_transform(seed, scale):
    model = _small_model(seed=seed % 1000)
    rng = np.random.default_rng(seed)
    x = [rng.normal(size=(9, d)) for d in (4, 3, 5)]
    scores = predict_scores(model, x, 0.95)
    pred = predict(model, x, 0.95)
    assert np.array_equal(np.argmax(scores * scale, axis=1), pred)
    assert np.array_equal(np.argmax(np.log(scores) + 2.0, axis=1), pred)


def test_predict_chunks_agree():
    model = _small_model()
    x = _separable(10).channels
    whole = predict_scores(model, x, 0.9, chunk=1024)
    pieces = predict_scores(model, x, 0.9, chunk=7)
    assert np.allclose(whole, pieces, rtol=0, atol=1e-15)


# --- training ---------------------------------------------------------------


def test_train_improves_loss():
    model = _small_model()
    data = _separable(30)
    _, hist = train(model, data, data, SMALL, np.random.default_rng(0))
    assert hist.loss[-1] < hist.loss[0]
    assert hist.best_val_ua == max(hist.val_ua)
    assert hist.best_epoch == hist.val_ua.index(max(hist.val_ua))


def test_train_zero_epochs_returns_initial():
    model = _small_model()
    init = model.params.copy()
    cfg = TrainConfig(3, 5, 7, epochs=0)
    best, hist = train(model, _separable(5), _separable(5), cfg)
    assert np.array_equal(best.params, init)
    assert hist.loss == [] and hist.best_epoch is None


def test_train_deterministic():
    data = _separable(10)
    runs = []
    for _ in range(2):
        model = _small_model()
        best, hist = train(model, data, data, SMALL, np.random.default_rng(4))
        runs.append((best.params, hist.to_dict()))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert runs[0][1] == runs[1][1]


def test_train_returns_best_snapshot():
    data = _separable(10)
    model = _small_model()
    best, hist = train(model, data, data, SMALL, np.random.default_rng(4))
    pred = predict(best, data.channels, SMALL.gamma)
    ua = np.mean([np.mean(pred[data.labels == c] == c) for c in range(4)])
    assert ua == pytest.approx(hist.best_val_ua, abs=1e-15)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_non_finite_reports_epoch_and_batch():
    data = _separable(4)
    data.channels[0][:] = np.inf
    with pytest.raises(NumericError, match="epoch 0, batch 0"):
        train(_small_model(), data, None, SMALL)


# --- checkpoints ------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    model, _, _ = toy_problem(3)
    path = tmp_path / "m.mtca"
    checkpoint.save_checkpoint(model, path)
    loaded = checkpoint.load_checkpoint(path)
    assert loaded.arch == model.arch
    assert loaded.params.tobytes() == model.params.tobytes()


def test_checkpoint_header_for_default_model(tmp_path):
    model = MtcAeModel(Architecture(tuple([5] * 38)))
    path = tmp_path / "big.mtca"
    checkpoint.save_checkpoint(model, path)
    head = checkpoint.read_header(path)
    assert head["n_channels"] == 38 and head["bottleneck"] == 30
    assert path.read_bytes()[:4] == b"MTCA"


def test_checkpoint_rejects_damage(tmp_path):
    model, _, _ = toy_problem(0)
    data = checkpoint.to_bytes(model)
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.from_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.from_bytes(data[:4] + (2).to_bytes(4, "little") + data[8:])
    with pytest.raises(CheckpointError):
        checkpoint.from_bytes(data[:-10])
    flipped = bytearray(data)
    flipped[200] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        checkpoint.from_bytes(bytes(flipped))
    with pytest.raises(CheckpointError):
        checkpoint.from_bytes(data[:10])
