import csv
import logging

import numpy as np
import pytest

from disalign import backbone as bb
from disalign import disentangle as dis
from disalign import training as tr
from disalign.evaluation import evaluate_embeddings

QUICK = tr.TrainConfig(epochs=3, d=8, K=3, n_hat=64, uni_sample=32, bpr_batch=64)


# ---------------------------------------------------------------- config


def test_config_json_keys_round_trip():
    cfg = tr.TrainConfig.from_dict({"lambda": 0.5, "K": 4, "disabled_terms": ["glo"]})
    assert cfg.lambda_ == 0.5 and cfg.disabled_terms == ("glo",)
    assert tr.TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize(
    "raw, key",
    [({"lamda": 1.0}, "lamda"), ({"epochs": 2.5}, "epochs"), ({"lr": -1.0}, "lr"), ({"disabled_terms": ["x"]}, "disabled_terms")],
)
def test_config_errors_name_the_key(raw, key):
    with pytest.raises(tr.ConfigError, match=repr(key)):
        tr.TrainConfig.from_dict(raw)


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_keeps_parameters():
    p = {"w": np.array([1.0, -2.0])}
    tr.adam_step(p, {"w": np.zeros(2)}, tr.AdamState(), 0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_constant_gradient_steps_approach_lr():
    p = {"w": np.zeros(3)}
    state = tr.AdamState()
    g = np.array([0.3, -5.0, 1e-3])
    for _ in range(2000):
        before = p["w"].copy()
        tr.adam_step(p, {"w": g}, state, 0.01)
    np.testing.assert_allclose(before - p["w"], 0.01 * np.sign(g), rtol=1e-4)


def test_adam_three_step_trace():
    # frozen from a direct evaluation of the bias-corrected recurrence (g = 1, lr = 0.1)
    p = {"w": np.array([1.0])}
    state = tr.AdamState()
    trace = []
    for _ in range(3):
        tr.adam_step(p, {"w": np.array([1.0])}, state, 0.1)
        trace.append(float(p["w"][0]))
    np.testing.assert_allclose(trace, [0.900000001, 0.8000000020000007, 0.7000000030000006], rtol=0, atol=1e-15)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        tr.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, tr.AdamState(), 0.1)


# ---------------------------------------------------------------- sampling


def test_alignment_sample_examples(caplog):
    np.testing.assert_array_equal(tr.sample_alignment_indices(6, 6, np.random.default_rng(0)), np.arange(6))
    a = tr.sample_alignment_indices(50, 10, np.random.default_rng(4))
    b = tr.sample_alignment_indices(50, 10, np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)
    assert np.all(np.diff(a) > 0)
    with caplog.at_level(logging.WARNING):
        c = tr.sample_alignment_indices(5, 9, np.random.default_rng(0))
    assert len(c) == 5 and "clamping" in caplog.text


def test_alignment_sample_inclusion_frequency():
    n_total, n_hat, trials = 30, 7, 10_000
    r = np.random.default_rng(8)
    counts = np.zeros(n_total)
    for _ in range(trials):
        counts[tr.sample_alignment_indices(n_total, n_hat, r)] += 1
    p = n_hat / n_total
    assert np.all(np.abs(counts - trials * p) <= 3 * np.sqrt(trials * p * (1 - p)))


# ---------------------------------------------------------------- joint objective


def setup_instance(split, ul, il, cfg):
    e_l = tr.stack_llm(ul, il)
    state, streams = tr.init_state(split, e_l, cfg)
    graph = bb.graph_from_split(split)
    structure = tr.epoch_structure(state.backbone, state.encoders, e_l, graph, cfg, streams["kmeans"])
    sample = tr.draw_sample(bb.BprSampler(split), split.n_users + split.n_items, cfg, streams["bpr"], streams["align"])
    return state, e_l, graph, structure, sample


def test_lambda_zero_total_is_base(small_synth):
    split, ul, il, _ = small_synth
    cfg = QUICK.replace(lambda_=0.0)
    state, e_l, graph, structure, sample = setup_instance(split, ul, il, cfg)
    total, values, _ = tr.evaluate_terms(state.backbone, state.encoders, e_l, graph, structure, sample, cfg)
    assert total == values["base"]


def test_all_terms_at_analytic_zero(small_synth):
    split, ul, il, _ = small_synth
    cfg = QUICK.replace(K=1)
    state, e_l, graph, structure, sample = setup_instance(split, ul, il, cfg)
    # constant outputs: every specific row is e0, every shared row is e1
    for name, net in state.encoders.nets.items():
        for key in ("W1", "b1", "W2", "b2"):
            net[key][...] = 0.0
        net["b2"][0 if name.startswith("sp") else 1] = 1.0
    structure = tr.epoch_structure(state.backbone, state.encoders, e_l, graph, cfg, np.random.default_rng(0))
    total, values, _ = tr.evaluate_terms(state.backbone, state.encoders, e_l, graph, structure, sample, cfg)
    for term in tr.TERMS:
        assert abs(values[term]) <= 1e-9, term
    assert total == pytest.approx(values["base"], abs=1e-9)


def test_total_gradient_is_weighted_sum_of_terms(small_synth):
    split, ul, il, _ = small_synth
    cfg = QUICK.replace(lambda_=0.3)
    state, e_l, graph, structure, sample = setup_instance(split, ul, il, cfg)
    args = (state.backbone, state.encoders, e_l, graph, structure, sample, cfg)
    _, _, total = tr.evaluate_terms(*args)
    _, _, per = tr.evaluate_terms(*args, per_term_grads=True)
    for name in total:
        combined = per["base"][name] + sum(cfg.lambda_ * per[t][name] for t in tr.TERMS)
        np.testing.assert_allclose(total[name], combined, atol=1e-12)


def test_disabled_term_contributes_nothing(small_synth):
    split, ul, il, _ = small_synth
    cfg = QUICK.replace(disabled_terms=("glo",))
    state, e_l, graph, structure, sample = setup_instance(split, ul, il, cfg)
    total, values, _ = tr.evaluate_terms(state.backbone, state.encoders, e_l, graph, structure, sample, cfg)
    assert values["glo"] == 0.0
    assert total == pytest.approx(values["base"] + cfg.lambda_ * (values["or"] + values["uni"] + values["loc"]))


def test_joint_loss_draws_from_rng(small_synth):
    split, ul, il, _ = small_synth
    state, e_l, graph, structure, _ = setup_instance(split, ul, il, QUICK)
    a = tr.joint_loss(state.backbone, state.encoders, e_l, split, structure, QUICK, np.random.default_rng(3))
    b = tr.joint_loss(state.backbone, state.encoders, e_l, split, structure, QUICK, np.random.default_rng(3))
    assert a[0] == b[0]


# ---------------------------------------------------------------- gradient checking


def test_grad_check_on_quadratic(rng):
    params = {"x": rng.standard_normal(10)}
    assert tr.grad_check(lambda: 0.5 * float(params["x"] @ params["x"]), params, {"x": params["x"].copy()}) < 1e-9


def test_grad_check_flags_corrupted_coordinate(rng):
    params = {"x": rng.standard_normal(4)}
    bad = params["x"].copy()
    bad[2] *= 2.0
    assert tr.grad_check(lambda: 0.5 * float(params["x"] @ params["x"]), params, {"x": bad}) > 0.3


def test_gradient_suite_passes_and_detects_injection():
    clean = tr.gradient_suite(seed=1)
    assert set(clean) == {"base", *tr.TERMS}
    assert max(clean.values()) < tr.GRADCHECK_TOL
    assert tr.gradient_suite(seed=1, inject="uni")["uni"] > 0.3


# ---------------------------------------------------------------- training loop


def test_zero_epochs_returns_initialization(small_synth):
    split, ul, il, _ = small_synth
    cfg = QUICK.replace(epochs=0)
    state = tr.train(split, ul, il, cfg)
    init, _ = tr.init_state(split, tr.stack_llm(ul, il), cfg)
    np.testing.assert_array_equal(state.backbone.user_emb, init.backbone.user_emb)
    for k, v in state.encoders.params().items():
        np.testing.assert_array_equal(v, init.encoders.params()[k])
    assert state.epochs == 0 and all(len(h) == 0 for h in state.history.values())


def test_training_is_bit_deterministic(small_synth):
    split, ul, il, _ = small_synth
    a = tr.train(split, ul, il, QUICK)
    b = tr.train(split, ul, il, QUICK)
    assert a.step_log == b.step_log
    np.testing.assert_array_equal(a.backbone.item_emb, b.backbone.item_emb)


def test_history_and_term_ranges(small_synth):
    split, ul, il, _ = small_synth
    state = tr.train(split, ul, il, QUICK)
    assert all(len(h) == QUICK.epochs for h in state.history.values())
    for row in state.step_log:
        _, _, base, l_or, l_uni, l_glo, l_loc, total = row
        assert l_or >= 0 and l_glo >= 0 and l_loc >= 0
        assert -16.0 <= l_uni <= 0.0
        assert np.isfinite(total)


def standalone_mf_bpr(split, cfg):
    """Plain MF with BPR and Adam, drawing from the same seeded streams as the trainer."""
    streams = tr.seed_streams(cfg.seed)
    model = bb.init_backbone(split.n_users, split.n_items, cfg.d, 0, seed=streams["backbone"])
    graph = bb.graph_from_split(split)
    sampler = bb.BprSampler(split)
    params, state = model.params(), tr.AdamState()
    steps = int(np.ceil(len(split.train) / cfg.bpr_batch))
    for _ in range(cfg.epochs * steps):
        batch = sampler.sample(cfg.bpr_batch, streams["bpr"])
        _, grads = bb.bpr_loss(model, graph, batch, cfg.l2)
        tr.adam_step(params, grads, state, cfg.lr)
    return model


def test_lambda_zero_mf_is_plain_bpr(small_synth):
    split, ul, il, _ = small_synth
    cfg = QUICK.replace(lambda_=0.0, n_layers=0, epochs=4)
    state = tr.train(split, ul, il, cfg)
    ref = standalone_mf_bpr(split, cfg)
    np.testing.assert_array_equal(state.backbone.user_emb, ref.user_emb)
    ours = evaluate_embeddings(state.embeddings(split), split, part="val").recall_at[20]
    theirs = evaluate_embeddings(ref.stacked(), split, part="val").recall_at[20]
    assert ours == theirs


def test_smoothed_base_loss_decreases_early():
    from disalign import dataio

    split, ul, il, _ = dataio.synth_dataset(dataio.SynthSpec())
    cfg = tr.TrainConfig(epochs=20, n_layers=0)
    state = tr.train(split, ul, il, cfg)
    base = np.array([row[2] for row in state.step_log[:200]])
    smooth = np.convolve(base, np.ones(20) / 20, mode="valid")
    assert np.all(np.diff(smooth) <= 1e-3)
    assert smooth[-1] < smooth[0]


def test_divergence_is_reported(small_synth):
    split, ul, il, _ = small_synth
    with pytest.raises(tr.TrainingDivergedError, match="epoch"):
        tr.train(split, ul, il, QUICK.replace(lr=1e4, l2=10.0, epochs=5))


def test_row_mismatch_is_rejected(small_synth):
    split, ul, il, _ = small_synth
    with pytest.raises(ValueError, match="do not match"):
        tr.train(split, ul[:-1], il, QUICK)


def test_evaluator_hook(small_synth):
    split, ul, il, _ = small_synth
    seen = []
    tr.train(split, ul, il, QUICK.replace(eval_every=1), evaluator=lambda s, ep: seen.append(ep) or ep)
    assert seen == [1, 2, 3]


# ---------------------------------------------------------------- persistence


def test_loss_log_and_checkpoint_round_trip(tmp_path, small_synth):
    split, ul, il, _ = small_synth
    state = tr.train(split, ul, il, QUICK)
    tr.write_loss_log(state, tmp_path / "loss.csv")
    with open(tmp_path / "loss.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == tr.LOG_COLUMNS
    assert len(rows) == 1 + len(state.step_log)

    tr.save_checkpoint(state, tmp_path / "ckpt")
    back = tr.load_checkpoint(tmp_path / "ckpt")
    assert back.cfg == state.cfg and back.epochs == state.epochs
    np.testing.assert_array_equal(back.backbone.user_emb, state.backbone.user_emb.astype(np.float32))
    for k, v in state.encoders.params().items():
        np.testing.assert_array_equal(back.encoders.params()[k], v)
    assert isinstance(back.encoders, dis.EncoderSet)
