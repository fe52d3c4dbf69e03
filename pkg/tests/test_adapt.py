import numpy as np
import pytest

from fvp import adapt, data, prompt, pseudo, segnet
from fvp.errors import DomainError
from fvp.optim import AdamState, adam_step

import oracles


def make_label(y, mask):
    return pseudo.ReliableLabel(y=np.asarray(y, dtype=np.int64),
                                mask=np.asarray(mask, dtype=np.uint8))


def test_seg_loss_empty_selection():
    probs = np.full((4, 4, 2), 0.5)
    label = make_label(np.zeros((4, 4)), np.zeros((4, 4)))
    loss, grad = adapt.seg_loss(probs, label)
    assert loss == 0.0
    assert np.all(grad == 0.0)


def test_seg_loss_single_pixel_analytic():
    probs = np.full((1, 1, 2), 0.5)
    label = make_label(np.zeros((1, 1)), np.ones((1, 1)))
    loss, _ = adapt.seg_loss(probs, label)
    assert abs(loss - 0.6931471805599453) < 1e-12


def test_seg_loss_nonnegative_and_zero_at_certainty():
    probs = np.zeros((2, 2, 3))
    probs[:, :, 1] = 1.0
    label = make_label(np.ones((2, 2)), np.ones((2, 2)))
    loss, grad = adapt.seg_loss(probs, label)
    assert loss == 0.0
    assert np.max(np.abs(grad)) < 1e-12


def test_seg_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((4, 4, 3))
    label = make_label(rng.integers(0, 3, (4, 4)), rng.integers(0, 2, (4, 4)))

    def scalar(flat):
        probs = segnet.softmax(flat.reshape(4, 4, 3))
        loss, _ = adapt.seg_loss(probs, label)
        return loss

    fd = oracles.central_difference(scalar, logits.ravel(), step=1e-6)
    probs = segnet.softmax(logits)
    _, analytic = adapt.seg_loss(probs, label)
    analytic = analytic.ravel()
    denom = np.maximum(np.abs(fd), np.abs(analytic))
    denom[denom < 1e-9] = 1.0
    assert np.max(np.abs(fd - analytic) / denom) < 1e-6


def test_seg_loss_batch_average():
    rng = np.random.default_rng(1)
    probs = segnet.softmax(rng.standard_normal((2, 4, 4, 3)))
    labels = [make_label(rng.integers(0, 3, (4, 4)), np.ones((4, 4))) for _ in range(2)]
    loss_b, grad_b = adapt.seg_loss(probs, labels)
    l0, g0 = adapt.seg_loss(probs[0], labels[0])
    l1, g1 = adapt.seg_loss(probs[1], labels[1])
    assert abs(loss_b - (l0 + l1) / 2) < 1e-12
    assert np.max(np.abs(grad_b[0] - g0 / 2)) < 1e-15


def test_adam_first_step_sign():
    w = [np.array([1.0])]
    st = AdamState.for_params(w)
    adam_step(st, w, [np.array([2.0])], lr=0.1)
    assert abs(w[0][0] - (1.0 - 0.1)) < 1e-6  # within eps of -lr * sign(g)


def test_adam_zero_gradient_no_move():
    w = [np.array([1.5, -2.0])]
    st = AdamState.for_params(w)
    adam_step(st, w, [np.zeros(2)], lr=0.5)
    assert np.array_equal(w[0], [1.5, -2.0])


def test_adam_matches_reference_trace():
    # f(w) = w^2, grad = 2w, 10 steps
    w = [np.array([1.0])]
    st = AdamState.for_params(w)
    grads = []
    cur = 1.0
    expected = None
    trace = []
    for _ in range(10):
        g = 2.0 * w[0][0]
        grads.append(g)
        adam_step(st, w, [np.array([g])], lr=0.05)
        trace.append(w[0][0])
    expected = oracles.reference_adam(grads, lr=0.05, w0=1.0)
    assert np.max(np.abs(np.array(trace) - np.array(expected))) < 1e-12


def test_adam_weight_decay_enters_gradient():
    w = [np.array([2.0])]
    st = AdamState.for_params(w)
    adam_step(st, w, [np.array([0.0])], lr=0.1, weight_decay=0.5)
    # g = 0 + 0.5*2 = 1 -> first step moves by about -lr
    assert abs(w[0][0] - (2.0 - 0.1)) < 1e-6


def _toy_setup(n_imgs=4, size=16, seed=0):
    rng = np.random.default_rng(seed)
    model = segnet.init_model(seed, 3).eval()
    targets = [rng.standard_normal((size, size, 1)) for _ in range(n_imgs)]
    return model, targets


def test_adapt_epochs_zero_is_source_only():
    model, targets = _toy_setup()
    cfg = adapt.AdaptConfig(variant="complex", box_size=4, epochs=0, batch_size=2)
    p, report = adapt.adapt(model, targets, cfg)
    assert np.all(p.real_part == 0.0) and np.all(p.imag_part == 0.0)
    z_prompted = adapt.model_input(targets[0], p)
    z_plain = adapt.model_input(targets[0], None)
    assert np.array_equal(z_prompted, z_plain)
    assert report.checksum_before == report.checksum_after


def test_adapt_deterministic():
    model, targets = _toy_setup()
    cfg = adapt.AdaptConfig(variant="complex", box_size=4, epochs=2, batch_size=2, lr=0.1)
    p1, r1 = adapt.adapt(model, targets, cfg)
    p2, r2 = adapt.adapt(model, targets, cfg)
    assert r1.epoch_loss == r2.epoch_loss
    assert np.array_equal(p1.real_part, p2.real_part)
    assert np.array_equal(p1.imag_part, p2.imag_part)


def test_adapt_frozen_model_and_param_count():
    model, targets = _toy_setup()
    before = model.checksum()
    cfg = adapt.AdaptConfig(variant="complex", box_size=4, epochs=1, batch_size=2)
    p, report = adapt.adapt(model, targets, cfg)
    assert model.checksum() == before
    state = AdamState.for_params(adapt._prompt_params(p))
    assert state.param_count == p.param_count == 2 * 4 * 4


def test_adapt_loss_decreases_on_toy_problem():
    model, targets = _toy_setup(n_imgs=6)
    cfg = adapt.AdaptConfig(variant="complex", box_size=8, epochs=8,
                            batch_size=3, lr=0.1, use_prototype=False)
    _, report = adapt.adapt(model, targets, cfg)
    assert report.epoch_loss[-1] < report.epoch_loss[0]
    assert all(l >= 0.0 for l in report.epoch_loss)


@pytest.mark.parametrize("variant", ["complex", "amplitude", "phase", "svp"])
def test_end_to_end_prompt_gradient(variant):
    model, targets = _toy_setup(n_imgs=2, size=16, seed=3)
    cfg = adapt.AdaptConfig(variant=variant, box_size=4, pad_width=2)
    labels = adapt.cache_reliable_labels(model, targets, cfg)
    x_stds = [data.standardize(x)[0] for x in targets]
    p = adapt.new_prompt_for(cfg, 16, 16, 1)
    rng = np.random.default_rng(4)
    params = adapt._prompt_params(p)
    for arr in params:
        arr[:] = 0.05 * rng.standard_normal(arr.shape)
    if variant == "svp":
        p.values[p.interior_slices] = 0.0

    loss0, grads = adapt.prompt_loss_and_grads(model, p, x_stds, labels)

    flat0 = np.concatenate([a.ravel() for a in params])

    def scalar(flat):
        offset = 0
        for arr in params:
            arr.flat[:] = flat[offset : offset + arr.size]
            offset += arr.size
        loss, _ = adapt.prompt_loss_and_grads(model, p, x_stds, labels)
        return loss

    fd = oracles.central_difference(scalar, flat0, step=1e-5)
    scalar(flat0)  # restore
    analytic = np.concatenate([g.ravel() for g in grads])
    if variant == "svp":
        # only the border is learnable; interior analytic grads are hard zeros
        learnable = np.repeat(p.border_mask[:, :, None], p.channels, axis=2).ravel()
        assert np.all(analytic[~learnable] == 0.0)
        fd, analytic = fd[learnable], analytic[learnable]
    denom = np.maximum(np.abs(fd), np.abs(analytic))
    mask = denom > 1e-7
    if mask.any():
        assert np.max(np.abs(fd[mask] - analytic[mask]) / denom[mask]) < 1e-4
    if (~mask).any():
        assert np.max(np.abs(fd[~mask] - analytic[~mask])) < 1e-7

    if variant in ("complex", "amplitude", "phase"):
        di, dj = adapt._dc_index(p, 16, 16)
        assert grads[0][di, dj, 0] == 0.0
        if variant == "complex":
            assert grads[1][di, dj, 0] == 0.0


def test_adapt_requires_eval_mode_and_data():
    model, targets = _toy_setup()
    model.train()
    cfg = adapt.AdaptConfig(epochs=1)
    with pytest.raises(DomainError):
        adapt.adapt(model, targets, cfg)
    model.eval()
    with pytest.raises(DomainError):
        adapt.adapt(model, [], cfg)


def test_adapt_sweep_selects_by_pseudo_loss():
    model, targets = _toy_setup(n_imgs=4)
    cfg = adapt.AdaptConfig(variant="complex", box_size=4, epochs=2, batch_size=2)
    p, report = adapt.adapt_sweep(model, targets, cfg, lrs=(0.01, 0.1))
    losses = report.config["grid_final_losses"]
    assert set(losses) == {"0.01", "0.1"}
    assert report.config["chosen_lr"] in (0.01, 0.1)
    assert min(losses.values()) == report.epoch_loss[-1]


def test_adapt_config_validation():
    with pytest.raises(DomainError):
        adapt.AdaptConfig(variant="complex", box_size=0)
    with pytest.raises(DomainError):
        adapt.AdaptConfig(lr=0.0)
    with pytest.raises(DomainError):
        adapt.AdaptConfig(variant="nope")


def test_zero_selection_warning():
    model, targets = _toy_setup(n_imgs=2)
    cfg = adapt.AdaptConfig(variant="complex", box_size=4, epochs=1,
                            batch_size=2, lam=1.0, use_intra=False,
                            use_prototype=False)
    with pytest.warns(UserWarning):
        p, report = adapt.adapt(model, targets, cfg)
    assert report.warnings
    assert report.selected_fraction == 0.0
    assert np.all(p.real_part == 0.0)
