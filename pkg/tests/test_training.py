import math

import numpy as np
import pytest

from focusface.autodiff import Tape
from focusface.data import build_splits, train_batch
from focusface.losses import LossConfig
from focusface.model import ToyBackboneConfig, ToyModel
from focusface.training import (
    LOG_FIELDS,
    TrainConfig,
    best_model,
    build_losses,
    fit,
    init_state,
    lr_at,
    parse_log_mse,
    sgd_step,
    train_iteration,
)


def tiny_model(seed=0, num_classes=12):
    return ToyModel.init(ToyBackboneConfig(num_classes=num_classes), seed=seed)


# -- sgd_step ----------------------------------------------------------------

def test_sgd_vanilla_step():
    params = {"w": np.array([1.0, -2.0])}
    grads = {"w": np.array([0.5, 0.25])}
    velocities = {"w": np.zeros(2)}
    sgd_step(params, grads, velocities, lr=0.1, momentum=0.0, weight_decay=0.0)
    assert np.allclose(params["w"], [1.0 - 0.05, -2.0 - 0.025], atol=0, rtol=0)


def test_sgd_zero_grad_decays_buffer_only():
    params = {"w": np.array([3.0])}
    velocities = {"w": np.array([0.0])}
    sgd_step(params, {}, velocities, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert params["w"][0] == 3.0 and velocities["w"][0] == 0.0
    velocities = {"w": np.array([2.0])}
    sgd_step(params, {}, velocities, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert velocities["w"][0] == pytest.approx(1.8, abs=0)
    assert params["w"][0] == pytest.approx(3.0 - 0.1 * 1.8, abs=0)


def test_sgd_two_step_hand_recurrence():
    # v1 = 1, p1 = -0.1; v2 = 0.9 + 1 = 1.9, p2 = -0.1 - 0.19 = -0.29
    params = {"w": np.array([0.0])}
    velocities = {"w": np.array([0.0])}
    for _ in range(2):
        sgd_step(params, {"w": np.array([1.0])}, velocities,
                 lr=0.1, momentum=0.9, weight_decay=0.0)
    assert params["w"][0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_weight_decay_single_step():
    p0, g, lr, wd = 2.0, 0.3, 0.05, 0.01
    params = {"w": np.array([p0])}
    velocities = {"w": np.array([0.0])}
    sgd_step(params, {"w": np.array([g])}, velocities, lr, 0.0, wd)
    assert params["w"][0] == pytest.approx(p0 - lr * (g + wd * p0), abs=1e-15)


def test_sgd_missing_grad_still_sees_weight_decay():
    p0, lr, wd = 4.0, 0.1, 0.5
    params = {"w": np.array([p0])}
    velocities = {"w": np.array([0.0])}
    sgd_step(params, {}, velocities, lr, 0.9, wd)
    assert params["w"][0] == pytest.approx(p0 - lr * wd * p0, abs=1e-15)


def test_sgd_nonfinite_grad_aborts_with_diagnostics():
    params = {"w": np.array([1.0, 1.0])}
    velocities = {"w": np.zeros(2)}
    bad = {"w": np.array([np.nan, 3.0])}
    with pytest.raises(RuntimeError, match=r"iteration 7.*\bw\b"):
        sgd_step(params, bad, velocities, 0.1, 0.9, 0.0, iteration=7)


# -- schedule and config -----------------------------------------------------

def test_lr_schedule_drops_by_factor_ten():
    config = TrainConfig(milestones=(34000, 64000), max_iterations=100000)
    assert lr_at(0, config) == 0.1
    assert lr_at(33999, config) == 0.1
    assert lr_at(34000, config) == pytest.approx(0.01)
    assert lr_at(64000, config) == pytest.approx(0.001)
    assert lr_at(99999, config) == pytest.approx(0.001)


def test_lr_schedule_toy_defaults():
    config = TrainConfig()
    assert [lr_at(i, config) for i in (0, 599, 600, 959, 960, 1199)] == \
        pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001, 0.001])


def test_config_validation():
    with pytest.raises(ValueError, match="lr"):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError, match="milestones"):
        TrainConfig(milestones=(600, 600))
    with pytest.raises(ValueError, match="selection_mode"):
        TrainConfig(selection_mode="nearest")
    with pytest.raises(ValueError, match="batch_size"):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError, match="LossConfig"):
        TrainConfig(loss={"s": 64.0})


def test_effective_loss_baseline_zeroes_aux_terms():
    config = TrainConfig(baseline=True, loss=LossConfig(s=30.0, beta=0.7))
    eff = config.effective_loss()
    assert eff.lambda_ == 0.0 and eff.alpha == 0.0
    assert eff.s == 30.0 and eff.beta == 0.7
    assert TrainConfig().effective_loss() == LossConfig()


# -- loss graph --------------------------------------------------------------

def small_batch(corpus, it=0, n=8, seed=0):
    return train_batch(corpus, it, n, seed=seed)


@pytest.fixture(scope="module")
def corpus():
    return build_splits(20, 8, dataset_seed=7)


def test_baseline_path_matches_zeroed_full_path(corpus):
    # margin-only weights: the dedicated baseline graph and the full graph
    # with lambda = alpha = 0 must produce identical parameter updates
    batch = small_batch(corpus)
    zeroed = LossConfig(lambda_=0.0, alpha=0.0)
    results = []
    for baseline in (False, True):
        model = tiny_model(seed=3, num_classes=corpus.num_classes)
        state = init_state(model)
        tape = Tape()
        comb, _, leaves = build_losses(model, tape, batch, zeroed,
                                       baseline=baseline)
        grads = tape.backward(comb)
        named = {n: grads[t.node_id] for n, t in leaves.items()
                 if t.node_id in grads}
        sgd_step(model.params, named, state.velocities, 0.1, 0.9, 5e-4)
        results.append(model.params)
    for name in results[0]:
        diff = np.max(np.abs(results[0][name] - results[1][name]))
        assert diff < 1e-12, f"{name} differs by {diff}"


def test_breakdown_recombines_to_combined_value(corpus):
    batch = small_batch(corpus)
    config = TrainConfig(batch_size=8)
    model = tiny_model(seed=1, num_classes=corpus.num_classes)
    state = init_state(model)
    b = train_iteration(state, batch, config)
    lc = config.loss
    rebuilt = lc.alpha * b["mse"] + lc.beta * (
        (b["arc_m"] + lc.lambda_ * b["ce_m"]) + (b["arc_u"] + lc.lambda_ * b["ce_u"]))
    assert b["comb"] == pytest.approx(rebuilt, abs=1e-12 * max(1.0, abs(b["comb"])))
    assert state.iteration == 1


def test_combined_backward_equals_summed_branch_backwards(corpus):
    # grads of the single combined scalar vs three separate graphs summed
    batch = small_batch(corpus, n=4)
    lc = LossConfig()
    model = tiny_model(seed=5, num_classes=corpus.num_classes)

    tape = Tape()
    comb, _, leaves = build_losses(model, tape, batch, lc)
    grads = tape.backward(comb)
    combined = {n: grads[t.node_id] for n, t in leaves.items()
                if t.node_id in grads}

    from focusface.losses import (arcface_loss, branch_loss, contrastive_mse,
                                  cross_entropy)

    def branch_grads(scale_mse, scale_branches):
        tape = Tape()
        leaves = model.leaves(tape)
        out_u = model.forward(tape, batch.unmasked, leaves=leaves)
        out_m = model.forward(tape, batch.masked, leaves=leaves)
        arc_w = leaves["arcface.weight"]
        targets = batch.identity_labels
        terms = []
        if scale_branches:
            for out, ce_labels in ((out_u, batch.mask_labels_unmasked),
                                   (out_m, batch.mask_labels_masked)):
                arc = arcface_loss(tape, out.recognition_embedding, arc_w,
                                   targets, lc.s, lc.m)
                ce = cross_entropy(tape, out.mask_logits, ce_labels)
                terms.append(branch_loss(tape, arc, ce, lc.lambda_))
            total = tape.scale(tape.add(terms[0], terms[1]), lc.beta)
        else:
            mse = contrastive_mse(tape, out_u.recognition_embedding,
                                  out_m.recognition_embedding)
            total = tape.scale(mse, lc.alpha)
        g = tape.backward(total)
        return {n: g[t.node_id] for n, t in leaves.items() if t.node_id in g}

    summed = branch_grads(True, False)
    for name, g in branch_grads(False, True).items():
        summed[name] = summed.get(name, 0.0) + g
    assert set(summed) == set(combined)
    for name in combined:
        scale = max(1.0, np.max(np.abs(combined[name])))
        assert np.max(np.abs(combined[name] - summed[name])) / scale < 1e-12


# -- fit ---------------------------------------------------------------------

def short_config(**kw):
    defaults = dict(max_iterations=20, eval_interval=10, batch_size=8, seed=2)
    defaults.update(kw)
    return TrainConfig(**defaults)


def test_fit_is_deterministic(corpus):
    runs = [fit(short_config(), corpus) for _ in range(2)]
    assert runs[0][1] == runs[1][1]
    for name, value in runs[0][0].best_params.items():
        assert np.array_equal(value, runs[1][0].best_params[name])


def test_fit_log_shape_and_fields(corpus):
    state, log = fit(short_config(), corpus)
    plain = [l for l in log if not l.startswith("eval")]
    evals = [l for l in log if l.startswith("eval")]
    assert len(plain) == 20 and len(evals) == 2
    first = plain[0].split("\t")
    assert len(first) == len(LOG_FIELDS) and first[0] == "0"
    assert float(first[1]) == 0.1
    # eval record: tag, iteration, then the four metric columns
    assert len(evals[0].split("\t")) == 6
    assert evals[0].split("\t")[1] == "9"


def test_fit_best_selection_minimizes_logged_fmr100(corpus):
    state, log = fit(short_config(max_iterations=40, seed=4), corpus)
    fmr100s = [float(l.split("\t")[3]) for l in log if l.startswith("eval")]
    # log lines carry 10 significant digits; compare at that precision
    assert state.best_fmr100 == pytest.approx(min(fmr100s), abs=1e-9)
    best_positions = [9 + 10 * i for i, v in enumerate(fmr100s)
                      if v == min(fmr100s)]
    assert state.best_iteration == best_positions[0]
    assert best_model(state).config.num_classes == corpus.num_classes


def test_fit_frozen_backbone_bit_identical(corpus):
    model = tiny_model(seed=9, num_classes=corpus.num_classes)
    before = {k: v.copy() for k, v in model.params.items()
              if k.startswith("conv")}
    state, _ = fit(short_config(freeze_backbone=True), corpus, model=model)
    assert set(state.velocities) == set(model.trainable_names())
    for name, value in before.items():
        assert np.array_equal(state.model.params[name], value)
    assert not np.array_equal(state.model.params["recognition.weight"],
                              tiny_model(seed=9).params["recognition.weight"])


def test_fit_without_enough_val_identities_skips_eval():
    tiny = build_splits(5, 6, dataset_seed=3)
    config = TrainConfig(max_iterations=6, eval_interval=2, batch_size=4, seed=0)
    state, log = fit(config, tiny)
    assert not any(l.startswith("eval") for l in log)
    assert math.isnan(state.best_fmr100) and state.best_iteration == 5
    for name, value in state.best_params.items():
        assert np.array_equal(value, state.model.params[name])


def test_fit_rejects_class_count_mismatch(corpus):
    model = ToyModel.init(ToyBackboneConfig(num_classes=4), seed=0)
    with pytest.raises(ValueError, match="classes"):
        fit(short_config(), corpus, model=model)


def test_parse_log_mse_reads_iteration_records_only():
    lines = [
        "0\t0.1\t5\t1\t1\t0.5\t0.5\t2.25",
        "eval\t0\t0.5\t1\t1\t0.5",
        "1\t0.1\t4\t1\t1\t0.5\t0.5\t1.75",
    ]
    assert np.array_equal(parse_log_mse(lines), [2.25, 1.75])
