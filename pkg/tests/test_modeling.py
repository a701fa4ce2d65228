import itertools

import numpy as np
import pytest
import torch

from gliomapred import cohort as co
from gliomapred import defaults
from gliomapred.metrics import evaluate
from gliomapred.modeling import (
    BackboneSpec,
    FeatureCache,
    HeadConfig,
    InputTooSmallError,
    TrainConfig,
    UnknownBackboneError,
    argmax_labels,
    build_model,
    gradient_check,
    load_checkpoint,
    predict,
    sample_tensors,
    save_checkpoint,
    train,
)

TINY = BackboneSpec.of("tiny_test")


def grid_heads():
    g = defaults.SEARCH_GRID
    for bn, (n1, n2), drop, act in itertools.product(
        g["bn_layers"], g["neurons"], g["dropout_rate"], g["activation"]
    ):
        yield HeadConfig(bn, n1, n2, drop, act)


def batch(n=5, size=32, width=2, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=gen), torch.rand(n, width, generator=gen)


def test_every_grid_head_gives_softmax_rows():
    images, tab = batch()
    heads = list(grid_heads())
    assert len(heads) == 96
    for head in heads:
        for k in (2, 3):
            model = build_model(TINY, head, k, 2, seed=1).eval()
            probs = model.predict_proba(images, tab)
            assert probs.shape == (5, k)
            assert torch.all(torch.isfinite(probs))
            assert torch.allclose(probs.sum(1), torch.ones(5), atol=1e-5)


def test_head_layout():
    head = build_model(TINY, HeadConfig(bn_layers=2, neurons_1=8, neurons_2=4), 3, 2).head
    kinds = [type(m).__name__ for m in head]
    assert kinds == ["Linear", "ReLU", "BatchNorm1d", "Linear", "ReLU", "BatchNorm1d", "Dropout", "Linear"]
    head = build_model(TINY, HeadConfig(bn_layers=1, activation="tanh"), 2, 2).head
    assert [type(m).__name__ for m in head].count("BatchNorm1d") == 1
    assert type(head[2]).__name__ == "BatchNorm1d"
    assert head[-1].out_features == 2


def test_densenet121_fused_width():
    model = build_model(BackboneSpec.of("densenet121"), HeadConfig(), 2, tabular_width=2)
    assert model.fused_width == 1024 + 2
    assert model.head[0].in_features == 1026
    assert model.frozen and not any(p.requires_grad for p in model.trunk.parameters())


def test_build_errors():
    with pytest.raises(UnknownBackboneError):
        BackboneSpec.of("alexnet")
    with pytest.raises(ValueError):
        BackboneSpec("tiny_test", 64)
    with pytest.raises(ValueError):
        build_model(TINY, HeadConfig(), 2, tabular_width=0)
    with pytest.raises(ValueError):
        HeadConfig(bn_layers=3)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(InputTooSmallError):
        build_model(BackboneSpec.of("inception_v3"), HeadConfig(), 2, 2).features(torch.rand(1, 3, 64, 64))


def test_same_seed_same_outputs():
    images, tab = batch()
    a = build_model(TINY, HeadConfig(), 2, 2, seed=7).eval()
    b = build_model(TINY, HeadConfig(), 2, 2, seed=7).eval()
    c = build_model(TINY, HeadConfig(), 2, 2, seed=8).eval()
    with torch.no_grad():
        assert torch.equal(a(images, tab), b(images, tab))
        assert not torch.equal(a(images, tab), c(images, tab))


def test_duplicate_inputs_and_tie_break():
    images, tab = batch(3)
    images[1], tab[1] = images[0], tab[0]
    model = build_model(TINY, HeadConfig(), 3, 2).eval()
    with torch.no_grad():
        p = model.predict_proba(images, tab)
    assert torch.equal(p[0], p[1])
    assert argmax_labels([[0.5, 0.5]]).tolist() == [0]
    assert argmax_labels([[0.2, 0.4, 0.4]]).tolist() == [1]


def _split(cohort, seed=0):
    return co.make_split(cohort.samples, co.SplitPlan(seed=seed))


def test_training_keeps_frozen_trunk(small_cohort):
    sp = _split(small_cohort)
    model = build_model(TINY, HeadConfig(), 2, small_cohort.tabular_width, seed=0)
    before = {k: v.clone() for k, v in model.trunk.state_dict().items()}
    head_before = [p.clone() for p in model.head.parameters()]
    model, hist = train(model, sp.train, sp.val, TrainConfig(epochs=2), small_cohort.stacks)
    after = model.trunk.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert any(not torch.equal(a, b) for a, b in zip(head_before, model.head.parameters()))
    assert len(hist) == 2
    assert all(np.isfinite(v) for vals in hist.to_dict().values() for v in vals)


def test_history_length_and_seed_determinism(small_cohort):
    sp = _split(small_cohort)

    def run(seed):
        m = build_model(TINY, HeadConfig(), 3, small_cohort.tabular_width, seed=seed)
        return train(m, sp.train, sp.val, TrainConfig(seed=seed), small_cohort.stacks)

    m1, h1 = run(3)
    m2, h2 = run(3)
    assert len(h1) == defaults.EPOCHS
    assert h1 == h2
    for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
        assert torch.equal(a, b)


def test_cache_matches_direct_forward(small_cohort):
    sp = _split(small_cohort)
    model = build_model(TINY, HeadConfig(), 2, small_cohort.tabular_width, seed=2)
    model, _ = train(model, sp.train, sp.val, TrainConfig(epochs=1), small_cohort.stacks)
    cached = predict(model, sp.test, small_cohort.stacks, FeatureCache())
    direct = predict(model, sp.test, small_cohort.stacks)
    np.testing.assert_allclose(cached.probabilities, direct.probabilities, atol=1e-6)
    np.testing.assert_allclose(cached.probabilities.sum(1), 1.0, atol=1e-5)


def test_label_out_of_range(small_cohort):
    sp = _split(small_cohort)
    bad_labels = co.LabelCodes(1, 0)
    object.__setattr__(bad_labels, "grade_code", 5)  # bypass the dataclass guard
    first = sp.train[0]
    bad = [co.Sample(first.slice_stack_ref, first.tabular, bad_labels, first.patient_id,
                     first.modality)] + sp.train[1:]
    with pytest.raises(ValueError, match="labels"):
        train(build_model(TINY, HeadConfig(), 2, 2), bad, sp.val, TrainConfig(), small_cohort.stacks)


def test_unfrozen_training_moves_trunk(small_cohort):
    sp = _split(small_cohort)
    spec = BackboneSpec.of("tiny_test", trainable=True)
    model = build_model(spec, HeadConfig(), 2, small_cohort.tabular_width)
    before = [p.clone() for p in model.trunk.parameters()]
    train(model, sp.train[:32], sp.val, TrainConfig(epochs=1), small_cohort.stacks)
    assert any(not torch.equal(a, b) for a, b in zip(before, model.trunk.parameters()))


@pytest.mark.parametrize("head", [HeadConfig(), HeadConfig(bn_layers=2, activation="tanh"),
                                  HeadConfig(bn_layers=0, neurons_1=32, neurons_2=64)])
def test_gradient_check(small_cohort, head):
    images, tab, labels = sample_tensors(small_cohort.samples[:4], small_cohort.stacks, "survival")
    model = build_model(TINY, head, 3, small_cohort.tabular_width, seed=4)
    gc = gradient_check(model, (images, tab, labels), n_params=60)
    assert gc.max_rel_error < 1e-3
    assert gc.backbone_grad_max == 0.0


def test_output_bias_gradient_closed_form():
    images, tab = batch(6)
    labels = torch.tensor([0, 1, 2, 0, 1, 2])
    model = build_model(TINY, HeadConfig(), 3, 2).eval()
    last = model.head[-1]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.zero_()
    loss = torch.nn.functional.cross_entropy(model(images, tab), labels)
    loss.backward()
    p = torch.full((6, 3), 1 / 3)
    y = torch.nn.functional.one_hot(labels, 3).float()
    assert torch.allclose(last.bias.grad, (p - y).mean(0), atol=1e-7)
    assert all(p.grad is None for p in model.trunk.parameters())


def test_checkpoint_round_trip(small_cohort, tmp_path):
    sp = _split(small_cohort)
    model = build_model(TINY, HeadConfig(neurons_1=32, neurons_2=64), 3, small_cohort.tabular_width, seed=5)
    cfg = TrainConfig(epochs=1)
    model, _ = train(model, sp.train, sp.val, cfg, small_cohort.stacks)
    path = save_checkpoint(model, tmp_path / "m.pt", cfg, small_cohort.normalizer, {"task": "survival"})
    back, payload = load_checkpoint(path)
    assert payload["train_config"]["epochs"] == 1 and payload["extra"] == {"task": "survival"}
    a = predict(model, sp.test, small_cohort.stacks).probabilities
    b = predict(back, sp.test, small_cohort.stacks).probabilities
    assert np.array_equal(a, b)


def test_separable_cohort_is_learned(small_cohort):
    sp = _split(small_cohort)
    model = build_model(TINY, HeadConfig(), 2, small_cohort.tabular_width, seed=0)
    cache = FeatureCache()
    model, hist = train(model, sp.train, sp.val, TrainConfig(), small_cohort.stacks, cache)
    pred = predict(model, sp.train, small_cohort.stacks, cache)
    acc = evaluate([s.labels.grade_code for s in sp.train], pred.labels, 2).accuracy
    assert acc >= 0.9
