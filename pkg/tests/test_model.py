import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sefusion.data import Dataset, LabelPrior, make_record, synth_dataset
from sefusion.errors import DataFormatError, PriorError, ShapeError, UsageError
from sefusion.model import (
    FusionConfig,
    HeadConfig,
    TrainConfig,
    build_model,
    default_layers,
    head_forward,
    init_head,
    load_checkpoint,
    logit_adjusted_loss,
    predict,
    save_checkpoint,
    train,
)
from sefusion.numerics import Parameter, backward, finite_diff_check

TABLE_A = LabelPrior((2275, 2970, 1755))


def random_head(rng, width=5, n_layers=2, classes=3, hidden=4, **kw):
    head = init_head(HeadConfig(n_layers, hidden, classes, **kw), width, rng, "float64")
    for p in head.parameters():
        p.value[...] = rng.normal(size=p.shape)
    return head


# --- head -----------------------------------------------------------------


def test_default_layers():
    assert [default_layers(t) for t in ("A", "B1", "B4", "C1", "C4")] == [2, 2, 2, 5, 2]


def test_zero_head_gives_zero_logits(rng):
    head = random_head(rng)
    for p in head.parameters():
        p.value[...] = 0
    np.testing.assert_array_equal(head_forward(rng.normal(size=(4, 5)), head).value, np.zeros((4, 3)))


def test_single_layer_head_is_affine(rng):
    head = random_head(rng, n_layers=1)
    x = rng.normal(size=(3, 5))
    expected = x @ head.weights[0].value + head.biases[0].value
    np.testing.assert_allclose(head_forward(x, head).value, expected, rtol=1e-14)


def test_head_matches_composition(rng):
    head = random_head(rng, n_layers=4)
    x = rng.normal(size=(2, 5))
    h = x
    for k, (w, b) in enumerate(zip(head.weights, head.biases)):
        h = h @ w.value + b.value
        if k < 3:
            h = np.maximum(h, 0)
    np.testing.assert_allclose(head_forward(x, head).value, h, rtol=1e-13)
    assert [w.shape for w in head.weights] == [(5, 4), (4, 4), (4, 4), (4, 3)]


def test_head_width_guard(rng):
    with pytest.raises(ShapeError):
        head_forward(np.ones((1, 6)), random_head(rng))


def test_sigmoid_head_matches_two_way_softmax(rng):
    head = random_head(rng, classes=2, final_activation="sigmoid")
    assert head.weights[-1].shape == (4, 1)
    x = rng.normal(size=(6, 5))
    logits = head_forward(x, head).value
    l = logits[:, 1]
    assert np.all(logits[:, 0] == 0)
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(probs[:, 1], 1 / (1 + np.exp(-l)), rtol=1e-12)
    with pytest.raises(UsageError):
        HeadConfig(2, 4, 3, "sigmoid")


# --- loss -----------------------------------------------------------------


def test_uniform_prior_is_plain_cross_entropy(rng):
    logits_a = Parameter(rng.normal(size=(5, 3)), "a")
    logits_b = Parameter(logits_a.value.copy(), "b")
    y = rng.integers(0, 3, 5)
    uniform = logit_adjusted_loss(logits_a, y, LabelPrior((4, 4, 4)), tau=1.0)
    plain = logit_adjusted_loss(logits_b, y, TABLE_A, tau=0.0)
    lv = logits_a.value
    expected = np.mean(np.log(np.exp(lv).sum(axis=1)) - lv[np.arange(5), y])
    assert plain.item() == pytest.approx(expected, rel=1e-13)
    # log(1/3) shifts every logit equally, so loss and gradients are unchanged
    assert uniform.item() == pytest.approx(plain.item(), rel=1e-13)
    ga, gb = backward(uniform)["a"], backward(plain)["b"]
    np.testing.assert_allclose(ga, gb, atol=1e-15)


def test_loss_adds_tau_log_prior(rng):
    logits = rng.normal(size=(4, 3))
    y = rng.integers(0, 3, 4)
    shifted = logits + 0.5 * np.log(TABLE_A.probabilities)
    assert logit_adjusted_loss(logits, y, TABLE_A, 0.5).item() == pytest.approx(
        logit_adjusted_loss(shifted, y, TABLE_A, 0.0).item(), rel=1e-13
    )


def test_loss_rejects_zero_prior_and_bad_width():
    with pytest.raises(PriorError):
        logit_adjusted_loss(np.zeros((1, 3)), [0], LabelPrior((0, 5, 5)), 1.0)
    assert logit_adjusted_loss(np.zeros((1, 3)), [0], LabelPrior((0, 5, 5)), 0.0).item() == pytest.approx(np.log(3))
    with pytest.raises(ShapeError):
        logit_adjusted_loss(np.zeros((1, 2)), [0], TABLE_A)


def test_full_model_gradients():
    for seed in range(3):
        r = np.random.default_rng(seed)
        model = build_model("A", TABLE_A, FusionConfig(dims=(6, 4)), HeadConfig(2, 5, 3), precision="float64", seed=seed)
        for p in model.parameters():
            p.value[...] = r.normal(scale=0.5, size=p.shape)
        xt, xi, y = r.normal(size=(4, 6)), r.normal(size=(4, 4)), r.integers(0, 3, 4)
        report = finite_diff_check(lambda: model.loss(xt, xi, y), model.parameters())
        assert report.max_rel_error < 1e-5, report


# --- prediction -----------------------------------------------------------


def zero_model(task="A", prior=TABLE_A, dims=(6, 4)):
    model = build_model(task, prior, FusionConfig(dims=dims), precision="float64")
    for p in model.parameters():
        p.value[...] = 0
    return model


def test_zero_model_predicts_majority(rng):
    model = zero_model()
    pred, probs = predict(model, rng.normal(size=(10, 6)), rng.normal(size=(10, 4)))
    assert np.all(pred == 1)  # neutral
    np.testing.assert_allclose(probs, np.tile(TABLE_A.probabilities, (10, 1)), rtol=1e-12)
    raw_pred, raw_probs = predict(model, rng.normal(size=(2, 6)), rng.normal(size=(2, 4)), adjusted=False)
    np.testing.assert_allclose(raw_probs, np.full((2, 3), 1 / 3))
    assert np.all(raw_pred == 0)  # ties go to the lowest index


@given(arrays(np.float64, (3, 6), elements=st.floats(-5, 5)), arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), st.floats(-50, 50))
@settings(max_examples=30, deadline=None)
def test_probabilities_sum_to_one_and_shift_invariant(xt, xi, c):
    model = build_model("C1", LabelPrior((5, 3, 2, 1)), FusionConfig(dims=(6, 4)), HeadConfig(2, 4, 4), precision="float64", seed=1)
    pred, probs = predict(model, xt, xi)
    np.testing.assert_allclose(probs.sum(axis=1), 1, rtol=1e-12)
    model.head.biases[-1].value[...] += c
    pred2, probs2 = predict(model, xt, xi)
    np.testing.assert_array_equal(pred, pred2)
    np.testing.assert_allclose(probs, probs2, atol=1e-9)


def test_concat_baseline_width():
    model = build_model("A", TABLE_A, FusionConfig(kind="concat"), seed=0)
    assert model.fusion is None
    assert model.head.weights[0].shape == (1280, 64)
    sefusion = build_model("A", TABLE_A, seed=0)
    assert sefusion.head.weights[0].shape == (640, 64)


def test_build_model_guards():
    with pytest.raises(UsageError):
        build_model("A", TABLE_A, head_cfg=HeadConfig(2, 4, 2))
    with pytest.raises(UsageError):
        FusionConfig(kind="attention")


# --- training -------------------------------------------------------------


def small_data(seed=0, n=64, task="A", dims=(12, 8), **kw):
    return synth_dataset(seed, {"train": n, "validation": 30}, task, dims=dims, **kw)


def test_fits_separable_training_set():
    ds = small_data(n=64, dims=(768, 512))
    model = train(ds, "A", train_cfg=TrainConfig(epochs=500), seed=0)
    xt, xi = ds.split("train").features()
    pred, _ = predict(model, xt, xi)
    assert np.mean(pred == ds.split("train").labels("A")) >= 0.95


def test_zero_epochs_keeps_initialisation():
    ds = small_data()
    model = train(ds, "A", train_cfg=TrainConfig(epochs=0), seed=3)
    fresh = build_model("A", model.prior, FusionConfig(dims=(12, 8)), seed=3)
    assert model.history == [] and model.selected_epoch is None
    for a, b in zip(model.parameters(), fresh.parameters()):
        assert np.array_equal(a.value, b.value)


def test_training_is_deterministic():
    ds = small_data()
    cfg = TrainConfig(epochs=5, batch_size=16)
    a, b = train(ds, "A", train_cfg=cfg, seed=11), train(ds, "A", train_cfg=cfg, seed=11)
    assert a.history == b.history
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.value.tobytes() == q.value.tobytes()
    c = train(ds, "A", train_cfg=cfg, seed=12)
    assert any(not np.array_equal(p.value, q.value) for p, q in zip(a.parameters(), c.parameters()))


def test_full_batch_loss_mostly_decreases():
    ds = small_data(n=64, separability=0.3)
    model = train(ds, "A", train_cfg=TrainConfig(epochs=11, lr=1e-3), seed=0)
    losses = [r.train_loss for r in model.history]
    assert sum(b < a for a, b in zip(losses, losses[1:])) >= 8


def test_restores_best_epoch():
    ds = small_data(separability=0.2, seed=2)
    cfg = TrainConfig(epochs=30, batch_size=16, lr=1e-3)
    model = train(ds, "A", train_cfg=cfg, seed=4)
    best = max(r.val_accuracy for r in model.history)
    first_best = next(r.epoch for r in model.history if r.val_accuracy == best)
    assert model.selected_epoch == first_best
    # shuffling is reproducible, so retraining for exactly that many epochs ends at the same weights
    shorter = train(ds, "A", train_cfg=TrainConfig(epochs=first_best, batch_size=16, lr=1e-3), seed=4)
    for p, q in zip(model.parameters(), shorter.parameters()):
        assert np.array_equal(p.value, q.value)


def test_degenerate_prior_and_missing_labels():
    ds = synth_dataset(0, {"train": 12, "validation": 6}, "A", dims=(4, 4), proportions=(1, 1, 1))
    no_neg = Dataset([r for r in ds if not (r.split == "train" and r.labels["A"] == 2)])
    with pytest.raises(PriorError):
        train(no_neg, "A", train_cfg=TrainConfig(epochs=1))
    smooth = train(no_neg, "A", train_cfg=TrainConfig(epochs=1, smooth_prior=True))
    assert smooth.prior.counts == (5, 5, 1)
    unlabelled = Dataset([make_record(r.id, r.split, r.text_features, r.image_features) for r in ds])
    with pytest.raises(DataFormatError, match="A"):
        train(unlabelled, "A", train_cfg=TrainConfig(epochs=1))
    with pytest.raises(UsageError):
        train(ds.split("train"), "A", train_cfg=TrainConfig(epochs=1))


def test_sigmoid_head_trains():
    ds = small_data(task="B2", n=40)
    head = HeadConfig(2, 8, 2, "sigmoid")
    model = train(ds, "B2", head_cfg=head, train_cfg=TrainConfig(epochs=50, lr=1e-2), seed=0)
    assert model.history[model.selected_epoch - 1].val_accuracy >= 0.9


# --- checkpoints ----------------------------------------------------------


@pytest.mark.parametrize("precision", ["float32", "float64"])
@pytest.mark.parametrize("kind", ["sefusion", "concat"])
def test_checkpoint_round_trip(tmp_path, precision, kind):
    ds = small_data(task="C2")
    model = train(ds, "C2", FusionConfig(kind, dims=(12, 8)), train_cfg=TrainConfig(epochs=2, precision=precision), seed=5)
    save_checkpoint(model, tmp_path / "ck.json")
    back = load_checkpoint(tmp_path / "ck.json")
    assert back.task.id == "C2" and back.head.config == model.head.config and back.selected_epoch == model.selected_epoch
    for p, q in zip(model.parameters(), back.parameters()):
        assert p.name == q.name and p.dtype == q.dtype
        assert p.value.tobytes() == q.value.tobytes()
    xt, xi = ds.features()
    np.testing.assert_array_equal(predict(model, xt, xi)[1], predict(back, xt, xi)[1])


def test_checkpoint_errors(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(DataFormatError):
        load_checkpoint(tmp_path / "x.json")
    with pytest.raises(DataFormatError):
        load_checkpoint(tmp_path / "missing.json")
