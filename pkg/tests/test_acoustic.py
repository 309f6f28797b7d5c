import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from oracles import fd_gradient, max_relative_error, naive_ce, naive_posteriors
from qeadapt.acoustic import (AcousticModel, Priors, TrainSchedule, TrainingDiverged,
                              ce_loss_and_grad, estimate_priors, forward, forward_spliced,
                              init_model, load_model, one_hot, save_model, scaled_loglik, splice,
                              train)


def random_targets(rng, T, I):
    return rng.dirichlet(np.ones(I), size=T)


def small_model(rng, odlr=False):
    layout = [int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(2, 5))]
    if rng.random() < 0.5:
        layout.insert(2, int(rng.integers(2, 5)))
    model = init_model(int(rng.integers(1 << 30)), layout, context=0)
    for b in model.biases:
        b[:] = rng.normal(0, 0.5, b.shape)
    if odlr:
        k = model.sizes[-2]
        model.odlr = (np.eye(k) + rng.normal(0, 0.3, (k, k)), rng.normal(0, 0.3, k))
    return model


# --- forward ------------------------------------------------------------------------------

def test_init_deterministic_and_validated():
    a, b = init_model(7, (24, 32, 10)), init_model(7, (24, 32, 10))
    assert a.digest() == b.digest()
    assert a.sizes == [24, 32, 10]
    with pytest.raises(ValueError):
        init_model(7, (24, 0, 10))
    with pytest.raises(ValueError):
        init_model(7, (24, 10))


def test_posteriors_match_naive_oracle(rng):
    for odlr in (False, True):
        model = small_model(rng, odlr)
        x = rng.normal(size=(5, model.sizes[0]))
        assert_allclose(forward_spliced(model, x), naive_posteriors(model, x), atol=1e-12)


def test_rows_sum_to_one(rng):
    model = init_model(3, (40, 16, 12), context=2)
    post = forward(model, rng.normal(0, 5, (30, 8)))
    assert_allclose(post.sum(axis=1), 1.0, atol=1e-9)


def test_zero_model_is_uniform():
    model = init_model(0, (6, 4, 5), context=0)
    for w in model.weights:
        w[:] = 0
    assert_allclose(forward(model, np.ones((3, 6))), 0.2, atol=1e-15)


def test_output_bias_shift_invariance(rng):
    model = init_model(1, (6, 4, 5), context=0)
    x = rng.normal(size=(4, 6))
    before = forward(model, x)
    model.biases[-1] += 3.7
    assert_allclose(forward(model, x), before, atol=1e-12)


def test_dimension_mismatch():
    model = init_model(1, (10, 4, 5), context=2)
    with pytest.raises(ValueError):
        forward(model, np.zeros((4, 3)))


def test_splice_replicates_edges():
    frames = np.arange(6.0).reshape(3, 2)
    out = splice(frames, 1)
    assert_array_equal(out[0], [0, 1, 0, 1, 2, 3])
    assert_array_equal(out[2], [2, 3, 4, 5, 4, 5])


# --- loss and gradient --------------------------------------------------------------------

def test_loss_matches_naive_oracle(rng):
    model = small_model(rng, odlr=True)
    x = rng.normal(size=(6, model.sizes[0]))
    t = random_targets(rng, 6, model.n_outputs)
    assert_allclose(ce_loss_and_grad(model, x, t)[0], naive_ce(model, x, t), rtol=1e-10)


@pytest.mark.parametrize("odlr", [False, True])
def test_gradient_finite_differences(odlr):
    rng = np.random.default_rng(10 + odlr)
    for _ in range(5):
        model = small_model(rng, odlr)
        x = rng.normal(size=(7, model.sizes[0]))
        t = random_targets(rng, 7, model.n_outputs)
        analytic = ce_loss_and_grad(model, x, t)[1]
        numeric = fd_gradient(lambda: ce_loss_and_grad(model, x, t)[0], model.params())
        assert max_relative_error(analytic, numeric) < 1e-4


def test_targets_equal_posteriors_zero_output_gradient(rng):
    model = small_model(rng)
    x = rng.normal(size=(5, model.sizes[0]))
    post = forward_spliced(model, x)
    grads = ce_loss_and_grad(model, x, post)[1]
    assert np.max(np.abs(grads[-1])) < 1e-15  # output bias gradient = pre-activation delta sum
    assert all(np.max(np.abs(g)) < 1e-14 for g in grads)


def test_loss_lower_on_argmax_target(rng):
    model = small_model(rng)
    x = rng.normal(size=(1, model.sizes[0]))
    post = forward_spliced(model, x)[0]
    I = model.n_outputs
    hi = ce_loss_and_grad(model, x, one_hot([post.argmax()], I))[0]
    lo = ce_loss_and_grad(model, x, one_hot([post.argmin()], I))[0]
    assert hi < lo


def test_blended_gradient_is_linear(rng):
    model = small_model(rng)
    x = rng.normal(size=(8, model.sizes[0]))
    p_hat = one_hot(rng.integers(0, model.n_outputs, 8), model.n_outputs)
    p_star = random_targets(rng, 8, model.n_outputs)
    for alpha in (0.0, 0.3, 1.0):
        blended = ce_loss_and_grad(model, x, (1 - alpha) * p_hat + alpha * p_star)[1]
        g_hat = ce_loss_and_grad(model, x, p_hat)[1]
        g_star = ce_loss_and_grad(model, x, p_star)[1]
        for g, a, b in zip(blended, g_hat, g_star):
            assert np.max(np.abs(g - ((1 - alpha) * a + alpha * b))) < 1e-10


# --- training -----------------------------------------------------------------------------

def _toy_data(rng, n_utts=6, T=20, dim=3, I=4):
    means = rng.normal(0, 2, (I, dim))
    data = []
    for _ in range(n_utts):
        states = rng.integers(0, I, T)
        data.append((means[states] + rng.normal(0, 0.3, (T, dim)), one_hot(states, I)))
    return data


def test_single_utterance_reaches_perfect_accuracy():
    rng = np.random.default_rng(0)
    data = _toy_data(rng, n_utts=1)
    model = init_model(0, (9, 32, 4), context=1)
    sched = TrainSchedule(learning_rate=0.5, max_epochs=50, batch_size=1)
    trained, log = train(model, data, sched, data)
    x, y = data[0]
    assert log.epochs[log.best_epoch].cv_accuracy == 1.0
    assert np.all(forward(trained, x).argmax(axis=1) == y.argmax(axis=1))


def test_gradient_steps_overfit_single_utterance():
    # once cv accuracy is perfect the schedule stops, so confidence is checked
    # with plain full-batch steps on the same loss
    rng = np.random.default_rng(0)
    x, y = _toy_data(rng, n_utts=1)[0]
    model = init_model(0, (9, 32, 4), context=1)
    xs = splice(x, 1)
    for _ in range(2000):
        for p, g in zip(model.params(), ce_loss_and_grad(model, xs, y)[1]):
            p -= 2.0 * g
    post = forward(model, x)
    assert np.min(np.sum(post * y, axis=1)) >= 0.99


def test_zero_epochs_returns_copy():
    rng = np.random.default_rng(1)
    data = _toy_data(rng)
    model = init_model(0, (9, 8, 4), context=1)
    out, log = train(model, data, TrainSchedule(max_epochs=0), data)
    assert out is not model
    assert out.digest() == model.digest()
    assert len(log.epochs) == 1


def test_training_deterministic_and_pure():
    rng = np.random.default_rng(2)
    data = _toy_data(rng)
    model = init_model(0, (9, 8, 4), context=1)
    digest = model.digest()
    a, _ = train(model, data[:4], TrainSchedule(max_epochs=5, seed=3), data[4:])
    b, _ = train(model, data[:4], TrainSchedule(max_epochs=5, seed=3), data[4:])
    assert a.digest() == b.digest()
    assert model.digest() == digest


def test_training_improves_cv_accuracy():
    rng = np.random.default_rng(3)
    data = _toy_data(rng, n_utts=10)
    model = init_model(0, (9, 16, 4), context=1)
    _, log = train(model, data[:8], TrainSchedule(max_epochs=10), data[8:])
    accs = [e.cv_accuracy for e in log.epochs]
    assert accs[log.best_epoch] == max(accs)
    assert max(accs) > accs[0]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.001, 0.2), st.integers(1, 12))
def test_learning_rate_trace(seed, lr, max_epochs):
    rng = np.random.default_rng(seed)
    data = _toy_data(rng, n_utts=4, T=10)
    model = init_model(seed, (9, 6, 4), context=1)
    sched = TrainSchedule(learning_rate=lr, max_epochs=max_epochs, seed=seed)
    _, log = train(model, data[:3], sched, data[3:])
    e = log.epochs
    rates = [x.learning_rate for x in e]
    assert all(b <= a for a, b in zip(rates, rates[1:]))
    best = e[0].cv_accuracy
    halved = False
    for prev, cur, nxt in zip(e, e[1:], e[2:] + [None]):
        rel = (cur.cv_accuracy - best) / max(best, 1e-12)
        best = max(best, cur.cv_accuracy)
        if nxt is None:
            break
        # a logged next epoch means training did not stop here
        assert not (rel < sched.stop_threshold and halved)
        if rel < sched.halve_threshold:
            assert nxt.learning_rate == cur.learning_rate / 2
            halved = True
        else:
            assert nxt.learning_rate == cur.learning_rate


def test_divergence_is_reported():
    rng = np.random.default_rng(4)
    data = _toy_data(rng)
    data[0][0][3, 1] = np.nan
    model = init_model(0, (9, 8, 4), context=1)
    with pytest.raises(TrainingDiverged):
        with np.errstate(all="ignore"):
            train(model, data, TrainSchedule(max_epochs=3), data)


def test_empty_dataset_rejected():
    model = init_model(0, (9, 8, 4), context=1)
    with pytest.raises(ValueError):
        train(model, [], TrainSchedule(), [(np.zeros((2, 3)), one_hot([0, 1], 4))])


def test_schedule_validation():
    with pytest.raises(ValueError):
        TrainSchedule(halve_threshold=0.001, stop_threshold=0.005)


def test_trainable_odlr_freezes_network():
    rng = np.random.default_rng(5)
    data = _toy_data(rng)
    model = init_model(0, (9, 8, 4), context=1)
    model.odlr = (np.eye(8), np.zeros(8))
    out, _ = train(model, data[:4], TrainSchedule(learning_rate=0.01, max_epochs=4),
                   data[4:], trainable="odlr")
    for a, b in zip(out.params()[:-2], model.params()[:-2]):
        assert_array_equal(a, b)


# --- priors -------------------------------------------------------------------------------

def test_priors_flooring_by_hand():
    p = estimate_priors([np.zeros(50, dtype=int)], 3, floor=1e-4)
    assert_allclose(p.values, [1 - 2e-4, 1e-4, 1e-4], rtol=1e-12)
    assert abs(p.values.sum() - 1) < 1e-9


def test_priors_are_frequencies():
    p = estimate_priors([np.array([0, 0, 1]), np.array([2, 1, 1, 0, 0])], 3)
    assert_allclose(p.values, [4 / 8, 3 / 8, 1 / 8])


def test_priors_errors():
    with pytest.raises(ValueError):
        estimate_priors([], 3)
    with pytest.raises(ValueError):
        Priors(np.array([0.5, 0.4]), 1e-4)


def test_scaled_loglik_uniform_priors(rng):
    post = rng.dirichlet(np.ones(5), size=4)
    uniform = Priors(np.full(5, 0.2), 1e-4)
    ll = scaled_loglik(post, uniform)
    assert_allclose(ll, np.log(post) + np.log(5))
    assert_array_equal(ll.argmax(axis=1), post.argmax(axis=1))


# --- model file ---------------------------------------------------------------------------

def test_model_file_roundtrip(tmp_path):
    model = init_model(3, (10, 7, 6, 4), context=2)
    model.odlr = (np.eye(6) * 1.5, np.arange(6.0))
    save_model(model, tmp_path / "m.mdl")
    head = (tmp_path / "m.mdl").read_bytes().split(b"\n", 1)[0].decode()
    assert head.startswith("MLP 3 10 7 6 4 2")
    back = load_model(tmp_path / "m.mdl")
    assert back.digest() == model.digest()
    assert back.context == 2


def test_model_without_transform_roundtrip(tmp_path):
    model = init_model(3, (10, 7, 4), context=1)
    save_model(model, tmp_path / "m.mdl")
    back = load_model(tmp_path / "m.mdl")
    assert back.odlr is None and back.digest() == model.digest()
    assert isinstance(back, AcousticModel)
