import json

import numpy as np
import pytest

from conftest import random_example
from gdig.errors import DivergenceError, InputError
from gdig.finetune import LLM_PRESET, TrainConfig, mean_loss, train
from gdig.toylm import Params, backward, loss


def test_presets():
    assert (LLM_PRESET.learning_rate, LLM_PRESET.epochs, LLM_PRESET.batch_size,
            LLM_PRESET.eval_every_steps) == (1e-5, 3, 64, 10)
    assert TrainConfig().optimizer == "sgd"
    with pytest.raises(InputError):
        TrainConfig(batch_size=0)
    with pytest.raises(InputError):
        TrainConfig(optimizer="rmsprop")


def test_zero_lr_identity(small_params, gen):
    data = [random_example(gen, k) for k in range(5)]
    out, _ = train(small_params, data, data, TrainConfig(learning_rate=0.0, epochs=2, batch_size=2))
    assert out == small_params


def test_memorization(gen):
    from gdig.toylm import ModelConfig, init_params
    small_params = init_params(ModelConfig(), 0)
    ex = [random_example(gen, 0, resp_len=3)]
    cfg = TrainConfig(learning_rate=0.05, epochs=500, batch_size=1, eval_every_steps=50)
    out, hist = train(small_params, ex, ex, cfg, checkpoint="last")
    assert loss(out, ex[0]) < 0.01
    assert hist.valid_losses[-1] < hist.valid_losses[0]


def test_full_batch_sgd_matches_hand_loop(small_params, gen):
    data = [random_example(gen, k, resp_len=k + 1) for k in range(4)]
    eta, steps = 0.1, 5
    out, _ = train(small_params, data, data,
                   TrainConfig(learning_rate=eta, epochs=steps, batch_size=4), checkpoint="last")
    theta = small_params.theta.copy()
    for _ in range(steps):
        p = Params(small_params.config, theta)
        grad = sum(backward(p, ex)[0].flat for ex in data) / len(data)
        theta = theta - eta * grad
    np.testing.assert_allclose(out.theta, theta, rtol=1e-12, atol=1e-13)


def test_mean_loss(small_params, gen):
    ex = random_example(gen)
    assert mean_loss(small_params, [ex]) == pytest.approx(loss(small_params, ex), rel=1e-14)
    assert mean_loss(small_params, [ex] * 3) == pytest.approx(loss(small_params, ex), rel=1e-14)
    five = [random_example(gen, k) for k in range(5)]
    assert mean_loss(small_params, five) == pytest.approx(sum(loss(small_params, e) for e in five) / 5, rel=1e-13)


def test_best_checkpoint_and_schedule(small_params, gen):
    train_set = [random_example(gen, k) for k in range(10)]
    valid = [random_example(gen, 100 + k) for k in range(3)]
    cfg = TrainConfig(learning_rate=0.5, epochs=3, batch_size=4, eval_every_steps=2)
    out, hist = train(small_params, train_set, valid, cfg)
    assert hist.eval_steps == [0, 2, 4, 6, 8, 9]
    assert hist.best_valid_loss == min(hist.valid_losses)
    assert hist.best_valid_loss <= hist.valid_losses[-1]
    assert mean_loss(out, valid) == pytest.approx(hist.best_valid_loss, rel=1e-12)
    assert json.loads(hist.to_json())["best_step"] == hist.best_step


def test_deterministic(small_params, gen):
    data = [random_example(gen, k) for k in range(7)]
    cfg = TrainConfig(learning_rate=0.05, epochs=2, batch_size=3, optimizer="adam", seed=5)
    a, _ = train(small_params, data, data, cfg)
    b, _ = train(small_params, data, data, cfg)
    assert a == b


def test_upweighted_objective_full_batch(small_params, gen):
    data = [random_example(gen, k) for k in range(3)]
    eps = np.array([0.0, 0.2, 0.0])
    out, _ = train(small_params, data, data, TrainConfig(learning_rate=0.1, epochs=1, batch_size=3),
                   extra_weights=eps, checkpoint="last")
    g = sum(backward(small_params, ex)[0].flat for ex in data) / 3 + 0.2 * backward(small_params, data[1])[0].flat
    np.testing.assert_allclose(out.theta, small_params.theta - 0.1 * g, atol=1e-13)


def test_divergence(small_params, gen):
    data = [random_example(gen, k) for k in range(2)]
    bad = small_params.copy()
    bad.bias(bad.config.head_index)[0] = np.nan
    with pytest.raises(DivergenceError), np.errstate(invalid="ignore"):
        train(bad, data, data, TrainConfig(learning_rate=0.1, epochs=1, batch_size=2))


def test_empty_sets(small_params, gen):
    with pytest.raises(InputError):
        train(small_params, [], [random_example(gen)], TrainConfig())
