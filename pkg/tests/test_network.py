import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ares.network import (
    GradientTape,
    MlpNetwork,
    cross_entropy_batch,
    cross_entropy_loss,
    energy_score,
    energy_score_batch,
    load_checkpoint,
    save_checkpoint,
)
from ares.rng import Rng
from ares.training import TrainConfig, compute_batch_gradients, compute_batch_loss, sgd_step
from gradcheck import finite_difference_grads, max_relative_error


def small_net(seed=0, input_dim=3, hidden=(5,), feature_dim=4, k=3):
    return MlpNetwork(input_dim, hidden, feature_dim, k, Rng(seed))


# ---- forward -------------------------------------------------------------------

def test_zero_weights_zero_features():
    net = small_net()
    for w, b in zip(net.ext_w, net.ext_b):
        w[...] = 0.0
        b[...] = 0.0
    assert np.array_equal(net.forward_features(np.ones(3)), np.zeros(4))


def test_identity_layer_passthrough():
    net = MlpNetwork(3, (), 3, 2, Rng(0))
    net.ext_w[0][...] = np.eye(3)
    net.ext_b[0][...] = 0.0
    x = np.array([0.5, 1.0, 2.0])  # nonnegative, so the ReLU is inactive
    assert np.array_equal(net.forward_features(x), x)


def test_forward_finite_on_random_input():
    net = small_net(1)
    out = net.forward(Rng(2).standard_normal((20, 3)))
    assert np.all(np.isfinite(out.feats)) and np.all(np.isfinite(out.logits))


def test_classify_zero_weights_gives_bias():
    net = small_net()
    net.cls_w[...] = 0.0
    net.cls_b[...] = np.array([0.3, -0.1, 2.0])
    assert np.allclose(net.classify(np.ones(4)), [0.3, -0.1, 2.0])


def test_prediction_tie_breaks_low_index():
    net = small_net(k=2)
    net.cls_w[...] = 0.0
    net.cls_b[...] = np.array([1.5, 1.5])
    pred = net.predict(np.zeros((1, 3)))
    assert pred[0] == 0


def test_dimension_mismatch_errors():
    net = small_net()
    with pytest.raises(ValueError):
        net.forward(np.zeros((2, 4)))
    with pytest.raises(ValueError):
        net.classify(np.zeros(5))


# ---- energy score ---------------------------------------------------------------

def test_energy_single_class_zero():
    net = MlpNetwork(2, (), 2, 1, Rng(0))
    assert energy_score(net, np.array([0.0])) == 0.0


def test_energy_two_equal_logits():
    net = MlpNetwork(2, (), 2, 2, Rng(0))
    assert abs(energy_score(net, np.array([0.0, 0.0])) + np.log(2.0)) < 1e-15


@given(a=st.floats(-700, 700))
@settings(max_examples=50, deadline=None)
def test_energy_shift_identity(a):
    net = MlpNetwork(2, (), 2, 2, Rng(0))
    assert abs(energy_score(net, np.array([a, a])) - (-a - np.log(2.0))) < 1e-9


def test_energy_constant_shift_property():
    net = small_net()
    rng = Rng(3)
    z = rng.standard_normal(3)
    net.energy_u[...] = rng.standard_normal(3) * 0.3
    c = 2.7
    base = energy_score(net, z)
    shifted = energy_score(net, z + c)
    assert abs(shifted - (base - c)) < 1e-12


def test_energy_joint_permutation_invariance():
    net = small_net()
    rng = Rng(4)
    z = rng.standard_normal(3)
    net.energy_u[...] = rng.standard_normal(3)
    perm = np.array([2, 0, 1])
    base = energy_score(net, z)
    net.energy_u[...] = net.energy_u[perm]
    assert abs(energy_score(net, z[perm]) - base) < 1e-12


def test_energy_batch_matches_single():
    net = small_net(5)
    zs = Rng(6).standard_normal((8, 3))
    batch = energy_score_batch(net, zs)
    singles = [energy_score(net, z) for z in zs]
    assert np.allclose(batch, singles, rtol=0, atol=0)


# ---- cross entropy -----------------------------------------------------------------

def test_ce_confident_correct_near_zero():
    assert cross_entropy_loss(np.array([100.0, -100.0]), 0) < 1e-12


def test_ce_uniform_is_log_k():
    for k in (2, 5, 10):
        assert abs(cross_entropy_loss(np.zeros(k), 0) - np.log(k)) < 1e-12


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6))
@settings(max_examples=100, deadline=None)
def test_ce_nonnegative(logits):
    assert cross_entropy_loss(np.array(logits), 0) >= 0.0


def test_ce_label_out_of_range():
    with pytest.raises(ValueError):
        cross_entropy_loss(np.zeros(3), 3)
    with pytest.raises(ValueError):
        cross_entropy_batch(np.zeros((2, 3)), np.array([0, 5]))


# ---- gradients ----------------------------------------------------------------------

def test_gradcheck_cross_entropy_only():
    net = small_net(seed=7, input_dim=3, hidden=(5,), feature_dim=4, k=3)
    rng = Rng(8)
    xb = rng.standard_normal((8, 3))
    yb = rng.integers(0, 3, 8)
    cfg = TrainConfig()

    _, _, _, tape = compute_batch_gradients(net, xb, yb, cfg, v_pts=None)
    numeric = finite_difference_grads(net, lambda: compute_batch_loss(net, xb, yb, cfg))
    # energy and head parameters take no part in the classification loss
    for name in ("energy_u", "head_w", "head_b"):
        assert np.all(tape.grads[name] == 0.0)
        numeric.pop(name)
    analytic = {k: v for k, v in tape.grads.items() if k in numeric}
    assert max_relative_error(analytic, numeric) <= 1e-4


@pytest.mark.parametrize("loss_kind", ["jsd", "ce", "nce"])
def test_gradcheck_composite(loss_kind):
    net = small_net(seed=9, input_dim=3, hidden=(5,), feature_dim=4, k=3)
    rng = Rng(10)
    net.energy_u[...] = 0.2 * rng.standard_normal(3)
    xb = rng.standard_normal((8, 3))
    yb = rng.integers(0, 3, 8)
    v_pts = rng.standard_normal((8, 4)) * 2.0
    cfg = TrainConfig(beta=0.1, loss_kind=loss_kind)

    _, _, _, tape = compute_batch_gradients(net, xb, yb, cfg, v_pts=v_pts)
    numeric = finite_difference_grads(
        net, lambda: compute_batch_loss(net, xb, yb, cfg, v_pts=v_pts)
    )
    if loss_kind == "jsd":  # the head is untouched by the jsd path
        numeric.pop("head_w")
        numeric.pop("head_b")
    analytic = {k: v for k, v in tape.grads.items() if k in numeric}
    assert max_relative_error(analytic, numeric) <= 1e-3


def test_zero_beta_means_zero_energy_gradient():
    net = small_net(11)
    rng = Rng(12)
    xb = rng.standard_normal((6, 3))
    yb = rng.integers(0, 3, 6)
    cfg = TrainConfig(beta=0.0, loss_kind="jsd")
    v_pts = rng.standard_normal((6, 4))
    _, _, _, tape = compute_batch_gradients(net, xb, yb, cfg, v_pts=v_pts)
    assert np.all(tape.grads["energy_u"] == 0.0)


def test_stale_cache_rejected():
    net = small_net(13)
    cache = net.forward(np.zeros((2, 3)))
    tape = GradientTape(net)
    sgd_step(net, tape, 0.1)
    with pytest.raises(RuntimeError):
        net.backward(cache, tape, np.zeros((2, 3)))


def test_tape_shape_validation():
    net = small_net()
    tape = GradientTape(net)
    with pytest.raises(ValueError):
        tape.add("cls_b", np.zeros(7))


# ---- checkpointing ----------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = small_net(14)
    net.energy_u[...] = Rng(15).standard_normal(3)
    path = tmp_path / "ckpt.json"
    save_checkpoint(net, path, epoch=17)
    loaded, epoch = load_checkpoint(path)
    assert epoch == 17
    for name, p in net.params().items():
        assert np.array_equal(p, loaded.params()[name])
    path2 = tmp_path / "ckpt2.json"
    save_checkpoint(loaded, path2, epoch=17)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_shape_mismatch(tmp_path):
    net = small_net()
    path = tmp_path / "ckpt.json"
    save_checkpoint(net, path)
    import json

    doc = json.loads(path.read_text())
    doc["params"]["cls_b"] = {"shape": [1], "data": [0.0]}
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        load_checkpoint(path)
