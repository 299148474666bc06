import numpy as np
import pytest
from scipy.special import expit, logit, logsumexp, softmax

from models.sbn import (
    SbnGrad,
    SbnParams,
    SigmoidBeliefNet,
    sbn_exact_loglik,
    sbn_generate,
    sbn_grad,
    sbn_init,
    sbn_log_joint,
    sbn_m_step,
)
from services.engine import TvsConfig, VariationalState, all_states, free_energy, init_ksets
from services.errors import ContractError, DimensionError, DivergenceError


def naive_log_joint(s, y, p):
    g = expit(p.W @ s + p.b)
    prior = np.sum(s * np.log(p.pi) + (1 - s) * np.log(1 - p.pi))
    return prior + np.sum(y * np.log(g) + (1 - y) * np.log(1 - g))


def test_log_joint_matches_naive_formula(rng, random_sbn):
    model = random_sbn(rng, H=3, D=5)
    Y, _ = sbn_generate(model.params, 4, rng)
    states = all_states(3)
    got = model.log_joint(states, Y)
    for n in range(4):
        expected = [naive_log_joint(s, Y[n], model.params) for s in states]
        np.testing.assert_allclose(got[n], expected, rtol=1e-12)
    assert sbn_log_joint(states[3], Y[0], model.params) == pytest.approx(got[0, 3], rel=1e-14)


def test_log_joint_is_finite_for_saturated_activations():
    p = SbnParams(pi=np.array([0.5]), W=np.array([[800.0]]), b=np.array([-400.0]))
    values = sbn_log_joint(all_states(1), np.array([[0.0], [1.0]]), p)
    assert np.all(np.isfinite(values))
    assert values[0, 1] == pytest.approx(np.log(0.5) - 400.0)


def test_gradient_matches_central_differences(rng, random_sbn):
    model = random_sbn(rng, H=3, D=4)
    Y, _ = sbn_generate(model.params, 10, rng)
    vstate = init_ksets(model, TvsConfig.uniform(4, 1, 1, 1, rng_seed=2), Y)
    grad = sbn_grad(Y, vstate, model.params)
    step = 1e-6

    def energy(W, b):
        return free_energy(vstate, SigmoidBeliefNet(SbnParams(model.params.pi, W, b)), Y)

    for name, analytic in (("W", grad.dW), ("b", grad.db)):
        base = getattr(model.params, name)
        numeric = np.zeros_like(base)
        for index in np.ndindex(base.shape):
            up, down = base.copy(), base.copy()
            up[index] += step
            down[index] -= step
            args_up = (up, model.params.b) if name == "W" else (model.params.W, up)
            args_down = (down, model.params.b) if name == "W" else (model.params.W, down)
            numeric[index] = (energy(*args_up) - energy(*args_down)) / (2 * step)
        rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(analytic + numeric)
        assert rel < 1e-5, name


def test_pi_update_equals_exact_em_update(rng, random_sbn, exhaustive_vstate):
    model = random_sbn(rng, H=4, D=6)
    Y, _ = sbn_generate(model.params, 25, rng)
    grad = sbn_grad(Y, exhaustive_vstate(model, Y), model.params)
    post = softmax(model.log_joint(all_states(4), Y), axis=1)
    expected = (post @ all_states(4).astype(float)).mean(axis=0)
    np.testing.assert_allclose(grad.new_pi, expected, rtol=1e-10, atol=1e-10)


def test_m_step_scales_by_learning_rate_over_n():
    p = SbnParams(pi=np.full(2, 0.5), W=np.zeros((3, 2)), b=np.zeros(3))
    grad = SbnGrad(dW=np.ones((3, 2)), db=np.full(3, 2.0), new_pi=np.array([0.1, 0.2]), count=4)
    new = sbn_m_step(p, grad, lr=0.5)
    np.testing.assert_allclose(new.W, 0.125)
    np.testing.assert_allclose(new.b, 0.25)
    np.testing.assert_array_equal(new.pi, [0.1, 0.2])

    frozen = sbn_m_step(p, grad, lr=0.0)
    np.testing.assert_array_equal(frozen.W, p.W)
    with pytest.raises(ContractError):
        sbn_m_step(p, grad, lr=-1.0)


def test_m_step_reports_non_finite_updates():
    p = SbnParams(pi=np.full(1, 0.5), W=np.zeros((1, 1)), b=np.zeros(1))
    grad = SbnGrad(dW=np.array([[np.inf]]), db=np.zeros(1), new_pi=np.full(1, 0.5), count=1)
    with pytest.raises(DivergenceError):
        sbn_m_step(p, grad, lr=1.0)


def test_learning_rate_decays_per_iteration(rng, random_sbn):
    model = random_sbn(rng)
    model.lr, model.lr_decay = 0.5, 0.999
    assert model.learning_rate(0) == 0.5
    assert model.learning_rate(1000) == pytest.approx(0.5 * 0.999 ** 1000)


def test_model_rejects_non_binary_data(rng, random_sbn):
    model = random_sbn(rng, H=2, D=3)
    with pytest.raises(DimensionError):
        model.check_data(np.array([[0.0, 0.5, 1.0]]))


def test_exact_loglik_matches_enumeration(rng, random_sbn):
    model = random_sbn(rng, H=3, D=4)
    Y, _ = sbn_generate(model.params, 5, rng)
    per_point = [logsumexp([naive_log_joint(s, y, model.params) for s in all_states(3)]) for y in Y]
    assert sbn_exact_loglik(model.params, Y) == pytest.approx(sum(per_point), rel=1e-12)


def test_init_biases_follow_pixel_means(rng):
    Y = (rng.random((200, 5)) < np.array([0.1, 0.5, 0.9, 0.0, 1.0])).astype(float)
    p = sbn_init(Y, 4, rng)
    means = np.clip(Y.mean(axis=0), 1e-3, 1 - 1e-3)
    np.testing.assert_allclose(p.b, logit(means))
    np.testing.assert_allclose(p.pi, 0.25)
    assert p.W.shape == (5, 4) and np.abs(p.W).max() < 0.1


def test_m_step_returns_new_model_with_same_options(rng, random_sbn):
    model = random_sbn(rng, H=3, D=4)
    Y, _ = sbn_generate(model.params, 20, rng)
    vstate = init_ksets(model, TvsConfig.uniform(4, 1, 1, 1), Y)
    new = model.m_step(Y, vstate, iteration=3)
    assert new is not model and new.options() == model.options()
    rebuilt = SigmoidBeliefNet.from_arrays(new.to_arrays(), **new.options())
    np.testing.assert_array_equal(rebuilt.params.W, new.params.W)
    assert new.options()["grad_steps"] == model.options()["grad_steps"]


def single_state_vstate(model, Y, states):
    states = np.asarray(states, dtype=np.uint8)[:, None, :]
    return VariationalState(states, model.log_joint(states, Y))


def test_small_step_increases_free_energy(rng, random_sbn):
    model = random_sbn(rng, H=3, D=5)
    Y, _ = sbn_generate(model.params, 40, rng)
    vstate = init_ksets(model, TvsConfig.uniform(4, 1, 1, 1, rng_seed=5), Y)
    before = free_energy(vstate, model, Y)
    params = sbn_m_step(model.params, sbn_grad(Y, vstate, model.params), lr=1e-3)
    assert free_energy(vstate, SigmoidBeliefNet(params), Y) > before


def test_gradient_vanishes_when_the_net_reconstructs_the_data(rng, random_sbn):
    model = random_sbn(rng, H=3, D=4)
    S = (rng.random((6, 3)) < 0.5).astype(np.uint8)
    Y = expit(S @ model.params.W.T + model.params.b)
    grad = sbn_grad(Y, single_state_vstate(model, Y, S), model.params)
    np.testing.assert_allclose(grad.dW, 0.0, atol=1e-12)
    np.testing.assert_allclose(grad.db, 0.0, atol=1e-12)


def test_gradient_for_single_state_sets_is_exact(rng, random_sbn):
    model = random_sbn(rng, H=3, D=4)
    Y, S = sbn_generate(model.params, 7, rng)
    grad = sbn_grad(Y, single_state_vstate(model, Y, S), model.params)
    p = model.params
    dW, db = np.zeros_like(p.W), np.zeros_like(p.b)
    for y, s in zip(Y, S.astype(float)):
        resid = y - expit(p.W @ s + p.b)
        dW += np.outer(resid, s)
        db += resid
    np.testing.assert_allclose(grad.dW, dW, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(grad.db, db, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(grad.new_pi, np.clip(S.mean(axis=0), 1e-4, 1 - 1e-4))


def test_several_gradient_steps_reuse_the_same_sets(rng, random_sbn):
    base = random_sbn(rng, H=3, D=5)
    Y, _ = sbn_generate(base.params, 30, rng)
    vstate = init_ksets(base, TvsConfig.uniform(4, 1, 1, 1, rng_seed=1), Y)
    model = SigmoidBeliefNet(base.params, lr=0.3, grad_steps=2)
    new = model.m_step(Y, vstate, iteration=0)

    expected = base.params
    for _ in range(2):
        expected = sbn_m_step(expected, sbn_grad(Y, vstate, expected), 0.3)
    np.testing.assert_array_equal(new.params.W, expected.W)
    np.testing.assert_array_equal(new.params.b, expected.b)
    np.testing.assert_array_equal(new.params.pi, expected.pi)


def test_prior_is_held_during_warmup(rng, random_sbn):
    base = random_sbn(rng, H=3, D=5)
    Y, _ = sbn_generate(base.params, 30, rng)
    vstate = init_ksets(base, TvsConfig.uniform(4, 1, 1, 1, rng_seed=1), Y)
    model = SigmoidBeliefNet(base.params, lr_decay=1.0, pi_warmup=5)
    grad = sbn_grad(Y, vstate, base.params)

    held = model.m_step(Y, vstate, iteration=4)
    np.testing.assert_array_equal(held.params.pi, base.params.pi)
    assert not np.array_equal(held.params.W, base.params.W)
    assert held.params.pi is not base.params.pi

    released = model.m_step(Y, vstate, iteration=5)
    np.testing.assert_array_equal(released.params.pi, grad.new_pi)
    np.testing.assert_array_equal(released.params.W, held.params.W)


def test_grad_steps_must_be_positive(rng, random_sbn):
    with pytest.raises(ContractError):
        SigmoidBeliefNet(random_sbn(rng).params, grad_steps=0)
