import numpy as np
import numpy.testing as npt
import pytest

from helpers import TINY_CONFIG, blob_dataset, max_rel_err
from qusecnets import nn
from qusecnets.errors import ShapeMismatchError
from qusecnets.model import ModelConfig, build_model, clone_config, train
from qusecnets.quantize import quantize

# Closed-form parameter count for the default 28x28x1 stack:
#   conv 8x8x1x64 + 64 = 4,160
#   conv 6x6x64x128 + 128 = 295,040
#   conv 5x5x128x128 + 128 = 409,728
#   dense 10x18432 + 10 = 184,330
DEFAULT_PARAM_COUNT = 893_258

# Untrained seed-123 default model on a fixed ramp image (regression pin).
GOLDEN_RAMP_PROBS = [
    0.09181815287614586, 0.09724671025368847, 0.10289595369717901,
    0.10330802753856684, 0.1005391230682076, 0.09725707144430873,
    0.10005931118364171, 0.10229890001716688, 0.10654747841602141,
    0.09802927150507335,
]


def ramp_image():
    return (np.arange(28 * 28, dtype=np.float64) / (28 * 28 - 1)).reshape(28, 28, 1)


# ---------------------------------------------------------------------------
# build_model
# ---------------------------------------------------------------------------

def test_default_parameter_count():
    model = build_model(ModelConfig(seed=0))
    assert model.parameter_count() == DEFAULT_PARAM_COUNT


def test_same_seed_bit_identical_weights():
    a = build_model(ModelConfig(seed=9))
    b = build_model(ModelConfig(seed=9))
    assert a.params.keys() == b.params.keys()
    for name in a.params:
        npt.assert_array_equal(a.params[name], b.params[name])


def test_different_seed_differs():
    a = build_model(TINY_CONFIG)
    b = build_model(clone_config(TINY_CONFIG, seed=TINY_CONFIG.seed + 1))
    assert any(not np.array_equal(a.params[n], b.params[n]) for n in a.params)


def test_defense_prepends_quantizer():
    assert build_model(TINY_CONFIG).quantizer is None
    cq = build_model(clone_config(TINY_CONFIG, defense="cq", levels=2))
    assert cq.quantizer is not None and not cq.quantizer.trainable
    tq = build_model(clone_config(TINY_CONFIG, defense="tq", levels=3, steepness=5.0))
    assert tq.quantizer is not None and tq.quantizer.trainable


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(defense="maybe")
    with pytest.raises(ValueError):
        ModelConfig(defense="cq", levels=1)
    with pytest.raises(ValueError):
        ModelConfig(defense="cq", steepness=0.0)
    with pytest.raises(ValueError):
        ModelConfig(loss="hinge")
    with pytest.raises(ValueError, match="does not fit"):
        ModelConfig(input_shape=(4, 4, 1))  # 8x8 kernel cannot fit
    with pytest.raises(ValueError, match="dense"):
        ModelConfig(input_shape=(8, 8, 1), architecture=(("conv", 2, 3),))


def test_config_canonical_text_round_trip():
    cfg = clone_config(TINY_CONFIG, defense="tq", levels=4, steepness=5.0)
    assert ModelConfig.from_canonical_text(cfg.canonical_text()) == cfg
    # canonical: byte-stable across round trips
    again = ModelConfig.from_canonical_text(cfg.canonical_text())
    assert again.canonical_text() == cfg.canonical_text()


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

def test_predict_golden_regression():
    model = build_model(ModelConfig(seed=123, loss="mse"))
    npt.assert_allclose(model.predict(ramp_image()), GOLDEN_RAMP_PROBS, atol=1e-14)


def test_predict_sums_to_one():
    model = build_model(TINY_CONFIG)
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = model.predict(rng.random((8, 8, 1)))
        assert abs(p.sum() - 1.0) < 1e-9
        assert np.all(p >= 0.0)


def test_defended_predict_is_composition():
    rng = np.random.default_rng(1)
    plain = build_model(TINY_CONFIG)
    defended = build_model(clone_config(TINY_CONFIG, defense="cq", levels=2))
    for name in plain.params:
        npt.assert_array_equal(plain.params[name], defended.params[name])
    for _ in range(5):
        x = rng.random((8, 8, 1))
        npt.assert_allclose(defended.predict(x),
                            plain.predict(quantize(x, defended.quantizer)),
                            atol=1e-12)


def test_predict_shape_mismatch():
    model = build_model(TINY_CONFIG)
    with pytest.raises(ShapeMismatchError):
        model.predict(np.zeros((9, 9, 1)))


def test_binarized_input_passes_through_sharp_quantizer():
    """A staircase-valued input is (numerically) a fixed point of n=2 quantization."""
    defended = build_model(clone_config(TINY_CONFIG, defense="cq", levels=2,
                                        steepness=1e6))
    plain = build_model(TINY_CONFIG)
    x = np.zeros((8, 8, 1))
    x[:4] = 1.0
    npt.assert_allclose(defended.predict(x), plain.predict(quantize(x, defended.quantizer)),
                        atol=1e-9)


# ---------------------------------------------------------------------------
# gradients through the whole model
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("loss", ["mse", "cross_entropy"])
@pytest.mark.parametrize("defense", ["none", "cq"])
def test_input_gradient_matches_finite_differences(loss, defense):
    cfg = clone_config(TINY_CONFIG, loss=loss, defense=defense, levels=3,
                       steepness=4.0)
    model = build_model(cfg)
    rng = np.random.default_rng(2)
    x = rng.random((6, 8, 8, 1)) * 0.8 + 0.1
    labels = rng.integers(0, 10, 6)
    analytic = model.input_gradient_batch(x, labels)

    def f(img, label):
        # one image's share of the batch-mean loss
        probs = model.predict(img)
        if loss == "mse":
            truth = np.zeros(10)
            truth[label] = 1.0
            return nn.mse_cost(probs, truth)[0] / 6
        return nn.cross_entropy(probs, label)[0] / 6

    for i in range(3):
        fd = nn.finite_difference_gradient(lambda v: f(v, labels[i]), x[i])
        assert max_rel_err(analytic[i], fd, floor=1e-3) < 1e-4


def test_param_gradients_match_finite_differences():
    cfg = clone_config(TINY_CONFIG, loss="cross_entropy")
    model = build_model(cfg)
    rng = np.random.default_rng(3)
    x = rng.random((4, 8, 8, 1))
    labels = rng.integers(0, 10, 4)
    probs, cache = model.forward_batch(x, keep_cache=True)
    _, d_logits = model.loss_and_grad_batch(probs, labels)
    grads, _ = model.backward_batch(cache, d_logits)

    def total_loss():
        p = model.forward_batch(x)
        return model.loss_and_grad_batch(p, labels)[0]

    for name in ("conv0.bias", "dense1.b"):
        param = model.params[name]
        fd = np.zeros_like(param)
        h = 1e-5
        flat, fdflat = param.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = total_loss()
            flat[i] = orig - h
            down = total_loss()
            flat[i] = orig
            fdflat[i] = (up - down) / (2 * h)
        assert max_rel_err(grads[name], fd, floor=1e-3) < 1e-4


def test_probability_jacobian_matches_per_class_fd():
    model = build_model(TINY_CONFIG)
    rng = np.random.default_rng(4)
    x = rng.random((8, 8, 1))
    jac = model.probability_jacobian(x)
    assert jac.shape == (10, 8, 8, 1)
    for cls in (0, 7):
        fd = nn.finite_difference_gradient(lambda v: float(model.predict(v)[cls]), x)
        assert max_rel_err(jac[cls], fd, floor=1e-3) < 1e-4


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_overfit_two_images():
    cfg = clone_config(TINY_CONFIG, loss="mse")
    model = build_model(cfg)
    rng = np.random.default_rng(5)
    ds = blob_dataset(n_per_class=1, seed=5)
    two = type(ds)(ds.images[:2], ds.labels[:2], ds.name, ds.split)
    model, trace = train(model, two, epochs=200, batch_size=2, lr=0.5, seed=0)
    assert trace[-1].loss < trace[0].loss


def test_training_is_deterministic():
    ds = blob_dataset(n_per_class=4, seed=1)
    runs = []
    for _ in range(2):
        model = build_model(TINY_CONFIG)
        model, trace = train(model, ds, epochs=3, batch_size=16, lr=0.05, seed=3)
        runs.append((model, trace))
    a, b = runs
    for name in a[0].params:
        npt.assert_array_equal(a[0].params[name], b[0].params[name])
    assert [t.loss for t in a[1]] == [t.loss for t in b[1]]


def test_constant_quantizer_frozen_and_tq_thresholds_move_in_bounds():
    ds = blob_dataset(n_per_class=4, seed=2)
    cq = build_model(clone_config(TINY_CONFIG, defense="cq", levels=3,
                                  steepness=5.0))
    before = cq.quantizer.thresholds.copy()
    train(cq, ds, epochs=2, batch_size=16, lr=0.05, seed=0)
    npt.assert_array_equal(cq.quantizer.thresholds, before)

    tq = build_model(clone_config(TINY_CONFIG, defense="tq", levels=3,
                                  steepness=5.0))
    init = tq.quantizer.thresholds.copy()
    moved = []

    def check(stats):
        t = tq.quantizer.thresholds
        assert np.all(t >= 0.0) and np.all(t <= 1.0)
        moved.append(not np.array_equal(t, init))

    train(tq, ds, epochs=3, batch_size=16, lr=0.5, seed=0, log=check)
    assert any(moved), "trainable thresholds never moved"


def test_train_rejects_empty_and_bad_lr():
    from types import SimpleNamespace

    model = build_model(TINY_CONFIG)
    ds = blob_dataset(n_per_class=1)
    empty = SimpleNamespace(images=np.zeros((0, 8, 8, 1)), labels=np.zeros(0, dtype=int))
    with pytest.raises(ValueError, match="empty"):
        train(model, empty, epochs=1)
    with pytest.raises(ValueError, match="learning rate"):
        train(model, ds, epochs=1, lr=0.0)


def test_train_aborts_on_nan_loss_naming_batch():
    model = build_model(TINY_CONFIG)
    model.params["dense1.W"][:] = np.nan
    ds = blob_dataset(n_per_class=2)
    with pytest.raises(RuntimeError, match="batch 0"):
        train(model, ds, epochs=1, batch_size=8, lr=0.01)
