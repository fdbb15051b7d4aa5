import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from disalign import dataio
from disalign import evaluation as ev
from disalign import training as tr

QUICK = tr.TrainConfig(epochs=2, d=8, K=3, n_hat=64, uni_sample=32, bpr_batch=64, n_layers=0)


def stacked(user_rows, item_rows):
    return np.vstack([np.atleast_2d(user_rows), np.atleast_2d(item_rows)]).astype(float)


def test_rank_two_items():
    e = stacked([[1.0]], [[1.0], [2.0]])
    np.testing.assert_array_equal(ev.rank_items(e, 1, 0), [1, 0])


def test_ties_fall_back_to_item_id():
    e = stacked([[1.0]], [[3.0], [5.0], [3.0], [5.0]])
    np.testing.assert_array_equal(ev.rank_items(e, 1, 0), [1, 3, 0, 2])


def test_rank_excludes_train_items_and_matches_full_sort(rng):
    e = rng.standard_normal((33, 4))
    train = [4, 7, 20]
    got = ev.rank_items(e, 3, 1, train)
    scores = [(-(e[3 + i] @ e[1]), i) for i in range(30) if i not in train]
    np.testing.assert_array_equal(got, [i for _, i in sorted(scores)])


def test_recall_examples():
    assert ev.recall_at_k([0, 1, 2], [0], 5) == 1.0
    assert ev.recall_at_k(list(range(10)), [42], 5) == 0.0
    assert ev.recall_at_k(list(range(20)), [3, 9, 15], 10) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        ev.recall_at_k([0], [], 5)


def test_ndcg_examples():
    assert ev.ndcg_at_k([5, 6, 7], [5, 6, 7], 3) == pytest.approx(1.0)
    assert ev.ndcg_at_k([0, 1, 2, 3, 4], [2], 5) == pytest.approx(0.5)
    assert ev.ndcg_at_k([0, 1, 2], [9], 3) == 0.0


@given(st.permutations(list(range(12))), st.sets(st.integers(0, 11), min_size=1), st.integers(1, 12))
def test_metric_ranges(ranking, test, k):
    assert 0.0 <= ev.recall_at_k(ranking, test, k) <= 1.0
    assert 0.0 <= ev.ndcg_at_k(ranking, test, k) <= 1.0 + 1e-12


def one_user_split(n_items, train_items, test_items):
    items = list(train_items) + list(test_items)
    ds = dataio.Dataset(1, n_items, np.zeros(len(items), int), np.array(items), np.ones(len(items)))
    n_tr = len(train_items)
    return dataio.SplitDataset(ds, np.arange(n_tr), np.zeros(0, int), np.arange(n_tr, len(items)), 0)


def test_perfect_embeddings():
    split = one_user_split(10, [0, 1], [4, 7, 8])
    items = np.zeros((10, 1))
    items[[4, 7, 8]] = 1.0
    rep = ev.evaluate_embeddings(stacked([[1.0]], items), split, ks=(2, 5))
    assert rep.recall_at[2] == pytest.approx(2 / 3)
    assert rep.recall_at[5] == 1.0
    assert rep.ndcg_at[2] == pytest.approx(1.0) and rep.ndcg_at[5] == pytest.approx(1.0)


def test_single_user_equals_per_user_ops(rng):
    split = one_user_split(15, [3], [1, 5, 9])
    e = rng.standard_normal((16, 3))
    rep = ev.evaluate_embeddings(e, split, ks=(5,))
    ranking = ev.rank_items(e, 1, 0, [3])
    assert rep.recall_at[5] == ev.recall_at_k(ranking, [1, 5, 9], 5)
    assert rep.ndcg_at[5] == ev.ndcg_at_k(ranking, [1, 5, 9], 5)


def test_random_embeddings_match_hypergeometric_expectation(small_synth):
    split = small_synth[0]
    k = 20
    means = []
    for seed in range(20):
        e = np.random.default_rng(seed).standard_normal((split.n_users + split.n_items, 8))
        means.append(ev.evaluate_embeddings(e, split, ks=(k,)).recall_at[k])
    # each user ranks n_items - |train_u| candidates; expected recall is k / candidates
    train = split.user_items("train")
    test = split.user_items("test")
    users = [u for u in range(split.n_users) if len(test[u])]
    expect = np.mean([ev.random_recall_expectation(split.n_items - len(train[u]), len(test[u]), k) for u in users])
    sd = np.std(means, ddof=1)
    assert abs(np.mean(means) - expect) <= 3 * sd / math.sqrt(len(means)) + 1e-3


def test_metrics_invariant_to_global_rotation(small_synth, rng):
    split = small_synth[0]
    e = rng.standard_normal((split.n_users + split.n_items, 6))
    q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    a = ev.evaluate_embeddings(e, split)
    b = ev.evaluate_embeddings(e @ q, split)
    for k in ev.DEFAULT_KS:
        assert abs(a.recall_at[k] - b.recall_at[k]) <= 1e-6
        assert abs(a.ndcg_at[k] - b.ndcg_at[k]) <= 1e-6


# ---------------------------------------------------------------- harnesses


def test_ablation_bookkeeping(small_synth, tmp_path):
    split, ul, il, _ = small_synth
    report = ev.run_ablation(QUICK, split, ul, il, seeds=(0, 1))
    assert len(report.entries) == 10
    assert report.variants() == list(ev.ABLATION_VARIANTS)
    for e in report.entries:
        if e.variant == "w/o glo":
            assert all(v == 0.0 for v in e.history["glo"])
    ev.write_sweep_report(report, tmp_path / "abl.csv")
    with open(tmp_path / "abl.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["variant", "seed", "K", "recall", "ndcg"]
    assert len(rows) == 1 + 10 * len(ev.DEFAULT_KS)


def test_sensitivity_grid_and_curve(small_synth, tmp_path):
    split, ul, il, _ = small_synth
    report = ev.run_sensitivity(QUICK, {"K": [2, 4], "n_hat": [16]}, split, ul, il, seeds=(0,))
    assert report.variants() == ["K=2", "K=4", "n_hat=16"]
    assert all(e.seconds > 0 for e in report.entries)
    curve = ev.sweep_curve(report, "K")
    assert [c[0] for c in curve] == [2.0, 4.0]
    ev.write_sweep_curve(report, "K", tmp_path / "curve.csv")
    assert (tmp_path / "curve.csv").read_text().splitlines()[0] == "x,mean,stderr"


def test_lambda_zero_sweep_equals_baseline(small_synth):
    split, ul, il, _ = small_synth
    report = ev.run_sensitivity(QUICK, {"lambda": [0.0]}, split, ul, il, seeds=(3,))
    base = ev.evaluate(tr.train(split, ul, il, QUICK.replace(lambda_=0.0, seed=3)), split, part="val")
    assert report.entries[0].val.recall_at == base.recall_at


def test_unknown_sweep_key(small_synth):
    split, ul, il, _ = small_synth
    with pytest.raises(ValueError, match="sweep key"):
        ev.run_sensitivity(QUICK, {"epochs": [1]}, split, ul, il)
