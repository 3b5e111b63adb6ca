import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from eend_m2f.assignment import LossWeights, pairwise_dice_loss
from eend_m2f.losses import (
    bce,
    class_target,
    classification_loss,
    dice_loss,
    dice_pair_loss,
    diarization_loss,
    total_loss,
)

T64 = torch.float64


def t(x):
    return torch.tensor(x, dtype=T64)


def test_bce_values():
    assert float(bce(t(0.5), 1.0)) == pytest.approx(math.log(2))
    assert float(bce(t(1 - 1e-7), 1.0)) == pytest.approx(1e-7, rel=1e-3)
    assert float(bce(t(0.25), 0.0)) == pytest.approx(-math.log(0.75))
    assert float(bce(t(0.25), 0.0)) == pytest.approx(0.287682, abs=1e-6)
    # clamping keeps saturated probabilities finite
    assert math.isfinite(float(bce(t(0.0), 1.0))) and math.isfinite(float(bce(t(1.0), 0.0)))


def test_bce_logit_gradient_is_sigmoid_minus_target():
    x = t([-2.0, 0.3, 1.7]).requires_grad_()
    q = t([1.0, 0.0, 1.0])
    bce(torch.sigmoid(x), q).sum().backward()
    torch.testing.assert_close(x.grad, torch.sigmoid(x.detach()) - q)


def test_diarization_loss_examples():
    v, w = diarization_loss(t([[0.5], [0.5]]), np.array([[1], [0]], bool), [0])
    assert float(v) == pytest.approx(2 * math.log(2)) and w == 2
    ref = np.array([[1, 0], [0, 1], [1, 1]], bool)
    perfect = torch.where(torch.from_numpy(ref), 1.0, 0.0).to(T64)
    v, w = diarization_loss(perfect, ref, [0, 1])
    assert float(v) < 1e-5 and w == 6
    v, w = diarization_loss(t(np.full((3, 4), 0.3)), np.zeros((3, 0), bool), np.zeros(0, int))
    assert float(v) == 0 and w == 0


def test_diarization_loss_errors():
    with pytest.raises(ValueError):
        diarization_loss(t(np.zeros((3, 2))), np.zeros((4, 1), bool), [0])
    with pytest.raises(ValueError):
        diarization_loss(t(np.zeros((3, 2))), np.zeros((3, 2), bool), [0, 0])


def test_dice_pair_examples():
    ref = t([1.0, 1.0, 0.0, 0.0])
    assert float(dice_pair_loss(ref, ref)) == 0
    assert float(dice_pair_loss(t([0.0] * 4), ref)) == 1
    assert float(dice_pair_loss(t([0.5] * 4), ref)) == pytest.approx(0.5)
    assert float(dice_pair_loss(t([0.0] * 4), t([0.0] * 4))) == 0


def test_dice_loss_examples():
    ref = np.array([[1, 1], [1, 0], [0, 1]], bool)
    pred = t([[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    v, w = dice_loss(pred, ref, [0, 1])
    assert float(v) == pytest.approx(1.0) and w == 2
    v, w = dice_loss(pred, np.zeros((3, 0), bool), np.zeros(0, int))
    assert float(v) == 0 and w == 0


def test_classification_examples():
    v, w = classification_loss(t([1.0, 0.0]), t([1.0, 0.0]))
    assert float(v) < 1e-5
    v, w = classification_loss(t([0.5, 0.5]), t([1.0, 0.0]))
    assert float(v) == pytest.approx(1.2 * math.log(2)) and float(v) == pytest.approx(0.831777, abs=1e-6)
    assert float(w) == pytest.approx(1.2)
    v, _ = classification_loss(t([0.9]), t([1.0]), label_smoothing=0.1)
    assert float(v) == pytest.approx(-0.9 * math.log(0.9) - 0.1 * math.log(0.1))
    assert float(v) == pytest.approx(0.325083, abs=1e-6)
    with pytest.raises(ValueError):
        classification_loss(t([0.5, 0.5]), t([1.0]))


def test_classification_reduces_to_plain_bce():
    rng = np.random.default_rng(0)
    p = t(rng.random(7))
    target = class_target([1, 4], 7)
    v, w = classification_loss(p, target, neg_weight=1.0, label_smoothing=0.0)
    assert float(w) == 7
    assert float(v) == pytest.approx(float(bce(p, target).sum()))


def test_class_target_sum_equals_speakers():
    assert class_target([4, 0, 2], 5).tolist() == [1, 0, 1, 0, 1]


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 30), st.data())
def test_dice_in_unit_interval(n_frames, data):
    seed = data.draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    p = t(rng.random(n_frames) * rng.integers(0, 2))
    y = t((rng.random(n_frames) < 0.5).astype(float))
    value = float(dice_pair_loss(p, y))
    assert 0.0 <= value <= 1.0


def test_dice_and_bce_scale_with_frame_duplication():
    rng = np.random.default_rng(1)
    p = t(rng.random((12, 3)))
    ref = rng.random((12, 2)) < 0.5
    phi = [2, 0]
    dup_p = p.repeat_interleave(2, dim=0)
    dup_ref = np.repeat(ref, 2, axis=0)
    d1, w1 = dice_loss(p, ref, phi)
    d2, w2 = dice_loss(dup_p, dup_ref, phi)
    assert float(d1) == pytest.approx(float(d2), rel=1e-12) and w1 == w2
    b1, v1 = diarization_loss(p, ref, phi)
    b2, v2 = diarization_loss(dup_p, dup_ref, phi)
    assert float(b1) / v1 == pytest.approx(float(b2) / v2, rel=1e-12)


def test_matching_dice_equals_training_dice():
    rng = np.random.default_rng(2)
    p = rng.random((15, 4))
    ref = rng.random((15, 3)) < 0.4
    ref[:, 2] = False
    p[:, 1] = 0.0
    pair = pairwise_dice_loss(p, ref)
    for j in range(4):
        for i in range(3):
            assert pair[j, i] == pytest.approx(float(dice_pair_loss(t(p[:, j]), t(ref[:, i].astype(float)))))


def _layers(rng, n_layers, n_frames, n_queries, requires_grad=False):
    out = []
    for _ in range(n_layers):
        x = t(rng.normal(size=(n_frames, n_queries)) * 2).requires_grad_(requires_grad)
        c = t(rng.normal(size=n_queries)).requires_grad_(requires_grad)
        out.append((x, c))
    return out


def _with_probs(layers):
    return [(x, torch.sigmoid(c)) for x, c in layers]


def _ref(rng, n_frames, n_spk):
    ref = rng.random((n_frames, n_spk)) < 0.4
    ref[rng.integers(n_frames, size=n_spk), np.arange(n_spk)] = True
    return ref


def test_total_loss_single_layer_is_weighted_sum():
    rng = np.random.default_rng(3)
    layers = _with_probs(_layers(rng, 1, 20, 5))
    ref = _ref(rng, 20, 2)
    w = LossWeights(5, 5, 2)
    out = total_loss(layers, ref, w, 0.1)
    phi = out.matchings[0][0]
    probs = torch.sigmoid(layers[0][0])
    dv, dw = diarization_loss(probs, ref, phi)
    cv, cw = dice_loss(probs, ref, phi)
    kv, kw = classification_loss(layers[0][1], class_target(phi, 5), label_smoothing=0.1)
    expected = 5 * dv / dw + 5 * cv / cw + 2 * kv / kw
    assert float(out.total) == pytest.approx(float(expected), rel=1e-12)


def test_total_loss_duplicated_layer_doubles():
    rng = np.random.default_rng(4)
    layers = _with_probs(_layers(rng, 1, 20, 5))
    ref = _ref(rng, 20, 3)
    single = float(total_loss(layers, ref).total)
    assert float(total_loss(layers * 2, ref).total) == pytest.approx(2 * single, rel=1e-12)


def test_total_loss_empty_raises():
    with pytest.raises(ValueError):
        total_loss([], np.zeros((3, 1), bool))


def test_total_loss_permutation_invariance():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n_frames = int(rng.integers(5, 30))
        n_queries = int(rng.integers(3, 7))
        n_spk = int(rng.integers(1, 4))
        layers = _with_probs(_layers(rng, 3, n_frames, n_queries))
        ref = _ref(rng, n_frames, n_spk)
        base = float(total_loss(layers, ref, LossWeights(5, 5, 2), 0.1).total)
        perm = rng.permutation(n_spk)
        permuted = float(total_loss(layers, ref[:, perm], LossWeights(5, 5, 2), 0.1).total)
        assert permuted == pytest.approx(base, rel=1e-9)


def test_batched_matches_per_recording_weighting():
    rng = np.random.default_rng(6)
    refs = [_ref(rng, 12, 2), _ref(rng, 9, 1)]
    logits = t(rng.normal(size=(2, 12, 4)))
    probs = torch.sigmoid(t(rng.normal(size=(2, 4))))
    out = total_loss([(logits, probs)], refs, LossWeights(1, 0, 0), 0.0, lengths=[12, 9])
    values = []
    for b, n in enumerate([12, 9]):
        phi = out.matchings[0][b]
        v, _ = diarization_loss(torch.sigmoid(logits[b, :n]), refs[b], phi)
        values.append(float(v))
    assert float(out.total) == pytest.approx(sum(values) / (12 * 2 + 9 * 1), rel=1e-12)


def _central_diff(f, x, h=1e-4):
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    for k in range(flat.numel()):
        orig = flat[k].item()
        flat[k] = orig + h
        up = f()
        flat[k] = orig - h
        down = f()
        flat[k] = orig
        grad.view(-1)[k] = (up - down) / (2 * h)
    return grad


@pytest.mark.parametrize("component", ["dia", "dice", "cls", "total"])
def test_gradients_match_finite_differences(component):
    rng = np.random.default_rng(7)
    for _ in range(5):
        n_frames = int(rng.integers(2, 17))
        n_queries = int(rng.integers(3, 7))
        n_spk = int(rng.integers(1, 4))
        layers = _layers(rng, 2, n_frames, n_queries, requires_grad=True)
        ref = _ref(rng, n_frames, n_spk)
        w = LossWeights(5, 5, 2)
        matchings = total_loss(_with_probs(layers), ref, w, 0.1).matchings
        fixed = [m[0] for m in matchings]

        def value():
            out = total_loss(_with_probs(layers), ref, w, 0.1, matchings=fixed)
            if component == "total":
                return out.total
            return sum(getattr(out, component))

        loss = value()
        params = [p for pair in layers for p in pair]
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
        with torch.no_grad():
            for p, g in zip(params, grads):
                numeric = _central_diff(lambda: float(value()), p)
                scale = max(float(g.norm()), float(numeric.norm()))
                if scale < 1e-10:
                    continue
                assert float((g - numeric).norm()) / scale <= 1e-4
