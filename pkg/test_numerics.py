import math

import pytest
import torch

import numerics
from errors import (
    ConfigError,
    DuplicateParameter,
    EmptyInput,
    InvalidTemperature,
    NonFiniteValue,
    ShapeMismatch,
    StaleGraph,
    StateUninitialized,
)
from numerics import AdamW, RandomStream, TrainableSet, adamw_step, backward, mse, softmax


def test_softmax_sums_to_one():
    v = numerics.as_tensor([0.3, -1.2, 2.5, 0.0])
    for tau in (0.01, 0.5, 1.0, 10.0):
        out = softmax(v, tau)
        assert float(out.sum()) == pytest.approx(1.0, abs=1e-15)
        assert bool((out >= 0).all())


def test_softmax_large_inputs_do_not_overflow():
    out = softmax(numerics.as_tensor([1000.0, 1001.0, 999.0]), 0.01)
    assert bool(torch.isfinite(out).all())
    assert int(out.argmax()) == 1


def test_softmax_is_exactly_permutation_equivariant():
    rng = RandomStream(3)
    for trial in range(50):
        v = rng.child(trial).normal((7,))
        perm = torch.randperm(7, generator=torch.Generator().manual_seed(trial))
        assert torch.equal(softmax(v[perm], 0.2), softmax(v, 0.2)[perm])


def test_softmax_shift_invariance():
    v = numerics.as_tensor([0.1, 0.7, -0.4])
    assert torch.allclose(softmax(v + 5.0, 0.3), softmax(v, 0.3), atol=1e-15)


def test_softmax_rejects_bad_temperature_and_empty_input():
    with pytest.raises(InvalidTemperature):
        softmax(numerics.as_tensor([1.0, 2.0]), 0.0)
    with pytest.raises(InvalidTemperature):
        softmax(numerics.as_tensor([1.0, 2.0]), -1.0)
    with pytest.raises(EmptyInput):
        softmax(torch.zeros(0, dtype=numerics.DTYPE))


def test_mse():
    a = numerics.as_tensor([[1.0, 2.0], [3.0, 4.0]])
    b = numerics.as_tensor([[1.0, 0.0], [3.0, 5.0]])
    assert float(mse(a, b)) == pytest.approx(5.0 / 4.0)
    assert float(mse(a, a)) == 0.0
    with pytest.raises(ShapeMismatch):
        mse(a, b.reshape(4))


def test_as_tensor_rejects_non_finite():
    with pytest.raises(NonFiniteValue):
        numerics.as_tensor([1.0, math.nan], checked=True)
    t = numerics.as_tensor([1.0, math.inf], checked=False)
    assert t.dtype == torch.float64


def test_trainable_registration():
    trainables = TrainableSet()
    p = trainables.register('w', [[1.0, 2.0]])
    assert p.requires_grad
    assert p.param_id == 'w'
    assert torch.equal(p.grad, torch.zeros((1, 2), dtype=torch.float64))
    assert trainables.names() == ['w']
    assert trainables.numel() == 2
    with pytest.raises(DuplicateParameter):
        trainables.register('w', [0.0])


def test_track_trainables_counts_constructions():
    with numerics.track_trainables() as created:
        trainables = TrainableSet()
        trainables.register('a', [0.0])
        trainables.register('b', [0.0, 1.0])
    assert [p.param_id for p in created] == ['a', 'b']
    with numerics.track_trainables() as created:
        pass
    assert created == []


def test_backward_gradients_and_unused_params():
    trainables = TrainableSet()
    p = trainables.register('p', [1.0, -2.0, 3.0])
    unused = trainables.register('unused', [5.0])
    loss = (p ** 2).sum()
    backward(loss, trainables)
    assert torch.equal(p.grad, 2 * p.detach())
    assert torch.equal(unused.grad, torch.zeros(1, dtype=torch.float64))


def test_backward_twice_is_stale():
    trainables = TrainableSet()
    p = trainables.register('p', [1.0])
    loss = (3 * p).sum()
    backward(loss, trainables)
    with pytest.raises(StaleGraph):
        backward(loss, trainables)


def test_adamw_single_step_by_hand():
    trainables = TrainableSet()
    p = trainables.register('p', [1.0])
    p.grad = numerics.as_tensor([0.5])
    opt = AdamW(list(trainables), lr=0.1, weight_decay=0.01)
    opt.step()
    # decay 1 -> 0.999, m_hat = 0.5, v_hat = 0.25
    expected = 0.999 - 0.1 * 0.5 / (0.5 + 1e-8)
    assert float(p.detach()[0]) == pytest.approx(expected, rel=1e-14)
    assert opt.state[p]['step'] == 1


def test_adamw_matches_torch_reference():
    init = RandomStream(11).normal((4, 3))
    grads = [RandomStream(12).child(t).normal((4, 3)) for t in range(3)]

    trainables = TrainableSet()
    ours = trainables.register('w', init)
    opt = AdamW([ours], lr=1e-2, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05)

    ref = torch.nn.Parameter(init.clone())
    ref_opt = torch.optim.AdamW([ref], lr=1e-2, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05)

    for g in grads:
        ours.grad = g.clone()
        opt.step()
        ref.grad = g.clone()
        ref_opt.step()
    assert torch.allclose(ours.detach(), ref.detach(), rtol=0, atol=1e-12)


def test_adamw_zero_learning_rate_leaves_values_unchanged():
    trainables = TrainableSet()
    p = trainables.register('p', [0.25, -4.0])
    before = p.detach().clone()
    p.grad = numerics.as_tensor([1.0, -3.0])
    AdamW([p], lr=0.0, weight_decay=0.01).step()
    assert torch.equal(p.detach(), before)


def test_adamw_errors():
    trainables = TrainableSet()
    p = trainables.register('p', [1.0])
    q = trainables.register('q', [1.0])
    with pytest.raises(ConfigError):
        AdamW([p], lr=-1.0)
    with pytest.raises(ConfigError):
        AdamW([p], betas=(1.0, 0.999))
    opt = AdamW([p])
    with pytest.raises(StateUninitialized):
        adamw_step(opt, q)
    p.grad = None
    with pytest.raises(StateUninitialized):
        adamw_step(opt, p)


def test_random_streams_are_deterministic_and_independent():
    a = RandomStream(42).child('weights').normal((5,))
    b = RandomStream(42).child('weights').normal((5,))
    c = RandomStream(42).child('scenes').normal((5,))
    d = RandomStream(43).child('weights').normal((5,))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)
    assert not torch.equal(a, d)
    assert RandomStream(1).child(3).integers(0, 10) == RandomStream(1).child(3).integers(0, 10)


def test_mse_examples_and_symmetry():
    assert float(mse(numerics.as_tensor([1.0, 0.0]), numerics.as_tensor([0.0, 0.0]))) == 0.5
    assert float(mse(numerics.as_tensor([2.0, -2.0]), numerics.as_tensor([0.0, 0.0]))) == 4.0
    rng = numerics.seeded_rng(11)
    for trial in range(20):
        a = rng.child(f"a{trial}").normal((3, 5, 2))
        b = rng.child(f"b{trial}").normal((3, 5, 2))
        assert torch.equal(mse(a, b), mse(b, a))


def test_backward_of_mse_against_zero():
    trainables = TrainableSet()
    p = trainables.register('p', [3.0])
    backward(mse(p, torch.zeros(1, dtype=torch.float64)), trainables)
    assert float(p.grad[0]) == 6.0


def test_adamw_without_gradient_or_decay_is_the_identity():
    trainables = TrainableSet()
    p = trainables.register('p', [0.5, -1.5, 2.0])
    before = p.detach().clone()
    optimizer = AdamW([p], lr=3e-4, weight_decay=0.0)
    for _ in range(3):
        p.grad = torch.zeros(3, dtype=torch.float64)
        optimizer.step()
    assert torch.equal(p.detach(), before)


def test_first_adamw_step_moves_by_the_learning_rate():
    trainables = TrainableSet()
    p = trainables.register('p', [0.0])
    p.grad = numerics.as_tensor([1.0])
    AdamW([p], lr=3e-4, weight_decay=0.0).step()
    assert float(p.detach()[0]) == pytest.approx(-3e-4, rel=1e-6)


def test_random_stream_repeats_its_first_thousand_draws():
    first = RandomStream(1).child('draws')
    again = RandomStream(1).child('draws')
    assert [first.random() for _ in range(1000)] == [again.random() for _ in range(1000)]
    assert not torch.equal(RandomStream(1).normal((1000,)), RandomStream(2).normal((1000,)))


def test_normal_moments_over_a_million_draws():
    draws = RandomStream(2024).child('moments').normal((1_000_000,))
    assert abs(float(draws.mean())) < 0.01
    assert abs(float(draws.var()) - 1.0) < 0.02
