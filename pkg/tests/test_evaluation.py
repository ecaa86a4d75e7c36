import importlib
import math

import numpy as np
import pytest


def _evaluation():
    return importlib.import_module("evaluation")


def _ten_item_store():
    hg = importlib.import_module("hin_graph")
    records = [("solo", f"item{v}") for v in range(10)] + [("pair_a", "item0"), ("pair_b", "item1")]
    groups = [("g_big", "solo"), ("g_small", "pair_a"), ("g_small", "pair_b")]
    return hg.build_store(records, [("item0", "item1")], groups)


def _trained(store, epochs=2, **overrides):
    tr = importlib.import_module("training")
    cfg = tr.TrainConfig(embedding_dim=5, batch_size=2, epochs=epochs, seed=4, **overrides)
    trainer = tr.Trainer(store, cfg)
    trainer.fit()
    return trainer


def test_ten_interaction_group_splits_seven_one_two():
    ev = _evaluation()
    store = _ten_item_store()
    split = ev.split_dataset(store, ev.SplitSpec(seed=5))
    big = store.group_ids.index("g_big")
    small = store.group_ids.index("g_small")

    assert len(split.pairs["test"]) == 2 and len(split.pairs["val"]) == 1
    assert set(split.pairs["test"][:, 0]) == {big}
    assert len(split.train_store.group_items(big)) == 7
    assert split.excluded_groups == [small]
    assert len(split.train_store.group_items(small)) == 2


def test_split_is_a_deterministic_partition():
    ev = _evaluation()
    store = _ten_item_store()
    a = ev.split_dataset(store, ev.SplitSpec(seed=8))
    b = ev.split_dataset(store, ev.SplitSpec(seed=8))
    assert all(np.array_equal(a.pairs[p], b.pairs[p]) for p in ("val", "test"))

    for g in range(store.n_groups):
        train = set(a.train_store.group_items(g).tolist())
        val = {int(v) for gg, v in a.pairs["val"] if gg == g}
        test = {int(v) for gg, v in a.pairs["test"] if gg == g}
        assert not (train & val) and not (train & test) and not (val & test)
        assert train | val | test == set(store.group_items(g).tolist())


def test_held_out_items_leave_member_rows():
    ev = _evaluation()
    store = _ten_item_store()
    split = ev.split_dataset(store, ev.SplitSpec(seed=1))
    solo = store.user_ids.index("solo")
    held = {int(v) for p in ("val", "test") for _, v in split.pairs[p]}
    assert not held & set(split.train_store.user_items(solo).tolist())
    assert split.train_store.y_uv.nnz == store.y_uv.nnz - 3
    # multi-hop matrices follow the train side
    assert (split.train_store.y_uvv > store.y_uvv).nnz == 0


def test_instances_rank_against_non_training_items():
    ev = _evaluation()
    store = _ten_item_store()
    split = ev.split_dataset(store, ev.SplitSpec(seed=2))
    instances = split.instances("test")
    assert len(instances) == 2
    for inst in instances:
        assert inst.item in inst.candidates
        assert len(inst.candidates) == store.n_items - 7


def test_rank_items_breaks_ties_by_item_id():
    ev = _evaluation()
    errors = importlib.import_module("errors")
    scores = np.array([0.5, 0.9, 0.5, 0.1, 0.7])
    assert list(ev.rank_items(scores, np.array([3, 2, 0, 1]))) == [1, 0, 2, 3]
    with pytest.raises(errors.EvaluationError):
        ev.rank_items(np.array([np.nan, 1.0]), np.array([0, 1]))


def test_single_relevant_item_at_rank_three():
    ev = _evaluation()
    inst = ev.EvalInstance(group=0, item=7, candidates=np.arange(10))
    ranking = np.array([2, 4, 7, 1, 0, 3, 5, 6, 8, 9])
    assert ev.hr_at_n([inst], [ranking], 5) == 1.0
    assert ev.ndcg_at_n([inst], [ranking], 5) == 0.5
    assert ev.hr_at_n([inst], [ranking], 2) == 0.0
    assert ev.ndcg_at_n([inst], [ranking], 2) == 0.0


def test_metrics_match_brute_force_on_random_instance_sets():
    ev = _evaluation()
    rng = np.random.default_rng(77)
    for _ in range(200):
        k = int(rng.integers(1, 12))
        m = int(rng.integers(2, 40))
        instances, rankings = [], []
        for _ in range(k):
            ranking = rng.permutation(m)
            instances.append(ev.EvalInstance(group=0, item=int(rng.integers(m)), candidates=ranking))
            rankings.append(ranking)
        for n in ev.CUTOFFS:
            hits = [inst.item in list(r[:n]) for inst, r in zip(instances, rankings)]
            gains = []
            for inst, r in zip(instances, rankings):
                pos = list(r).index(inst.item) + 1
                gains.append(1 / math.log2(pos + 1) if pos <= n else 0.0)
            assert abs(ev.hr_at_n(instances, rankings, n) - sum(hits) / k) < 1e-12
            assert abs(ev.ndcg_at_n(instances, rankings, n) - sum(gains) / k) < 1e-12
            assert all(g <= h for g, h in zip(gains, hits))


def test_empty_instance_sets_and_bad_cutoffs_are_rejected(micro_trainer):
    ev = _evaluation()
    errors = importlib.import_module("errors")
    with pytest.raises(errors.EvaluationError):
        ev.hr_at_n([], [], 5)
    with pytest.raises(errors.EvaluationError):
        ev.evaluate_groups(micro_trainer.group_model, [])
    with pytest.raises(errors.ConfigError, match="7"):
        ev.validate_cutoffs([5, 7])
    assert ev.validate_cutoffs([20, 5]) == (5, 20)


def test_evaluation_is_read_only_and_thread_invariant(small_synthetic):
    ev = _evaluation()
    store = small_synthetic.store
    split = ev.split_dataset(store, ev.SplitSpec(seed=3))
    trainer = _trained(split.train_store)
    named = trainer.state.named_parameters()
    before = {k: p.value.copy() for k, p in named.items()}

    instances = split.instances("test")
    single = ev.evaluate_groups(trainer.group_model, instances, threads=1)
    parallel = ev.evaluate_groups(trainer.group_model, instances, threads=4)
    assert np.array_equal(single.ranks, parallel.ranks)
    assert single.hr == parallel.hr and single.ndcg == parallel.ndcg
    assert all(np.array_equal(before[k], p.value) for k, p in named.items())

    hr = [single.hr[n] for n in ev.CUTOFFS]
    ndcg = [single.ndcg[n] for n in ev.CUTOFFS]
    assert hr == sorted(hr) and ndcg == sorted(ndcg)
    assert all(0.0 <= x <= 1.0 for x in hr + ndcg)
    assert single.n_instances == len(instances)
    assert [row[1:3] for row in single.rows()] == [("HR", 5), ("HR", 10), ("HR", 20),
                                                    ("NDCG", 5), ("NDCG", 10), ("NDCG", 20)]


def test_paired_hit_test_counts_discordant_instances():
    ev = _evaluation()
    a = [True] * 8 + [False] * 2
    b = [False] * 8 + [True] * 2
    result = ev.paired_hit_test(a, b)
    assert result["only_a"] == 8 and result["only_b"] == 2
    assert result["p_value"] == pytest.approx(112 / 1024)
    assert ev.paired_hit_test(a, a)["p_value"] == 1.0


def test_variants_configure_the_trainer(micro_store):
    ev = _evaluation()
    tr = importlib.import_module("training")
    cfg = tr.TrainConfig(embedding_dim=5, batch_size=2, epochs=1, seed=0)

    raa = ev.trainer_for_variant(micro_store, cfg, ev.Variant.RAA)
    assert raa.group_model.aggregator.value == "meanpool"
    rmp = ev.trainer_for_variant(micro_store, cfg, "RMP")
    assert rmp.user_model.explicit == [] and [p.label for p in rmp.user_model.implicit] == ["PP1"]
    rdmp = ev.trainer_for_variant(micro_store, cfg, "RDMP")
    assert rdmp.user_model.implicit == []
    assert rdmp.targets.users.nnz == micro_store.y_uv.nnz

    rpt = ev.trainer_for_variant(micro_store, cfg, "RPT")
    ev.train_variant(rpt, "RPT")
    assert rpt.state.history["user"] == [] and len(rpt.state.history["group"]) == 1


def test_full_variant_equals_the_default_pipeline(small_synthetic):
    ev = _evaluation()
    tr = importlib.import_module("training")
    cfg = tr.TrainConfig(embedding_dim=5, batch_size=8, epochs=2, seed=6)
    split = ev.split_dataset(small_synthetic.store, ev.SplitSpec(seed=6))

    report = ev.run_ablation(small_synthetic.store, ev.Variant.FULL, cfg, split=split)
    trainer = tr.Trainer(split.train_store, cfg)
    trainer.fit()
    direct = ev.evaluate_groups(trainer.group_model, split.instances("test"))
    assert np.array_equal(report.ranks, direct.ranks)
    assert report.config["variant"] == "full"


def test_planted_holdouts_define_the_split(small_synthetic):
    ev = _evaluation()
    errors = importlib.import_module("errors")
    store = small_synthetic.store
    planted = small_synthetic.planted_holdout()
    split = ev.split_dataset(store, ev.SplitSpec(), planted)
    assert len(split.pairs["val"]) == sum(1 for *_, p in planted if p == "val")
    assert len(split.pairs["test"]) == sum(1 for *_, p in planted if p == "test")
    for g, v, _ in planted:
        assert split.train_store.y_gv[g, v] == 0
        for u in store.groups.members(g):
            assert split.train_store.y_uv[u, v] == 0

    g, v, _ = planted[0]
    free = int(np.flatnonzero(store.y_gv[g].toarray().ravel() == 0)[0])
    with pytest.raises(errors.EvaluationError):
        ev.split_dataset(store, ev.SplitSpec(), [(g, free, "test")])


@pytest.mark.slow
def test_planted_dependency_signal_needs_the_implicit_branch():
    ev = _evaluation()
    tr = importlib.import_module("training")
    data_io = importlib.import_module("data_io")
    bundle = data_io.generate_synthetic(data_io.SyntheticSpec(seed=0))
    cfg = tr.TrainConfig(embedding_dim=32, batch_size=32, epochs=50, learning_rate=0.005, seed=0)
    split = ev.split_dataset(bundle.store, ev.SplitSpec(), bundle.planted_holdout())
    full = ev.run_ablation(bundle.store, "full", cfg, split=split)
    rdmp = ev.run_ablation(bundle.store, "RDMP", cfg, split=split)
    assert full.hr[5] >= 0.8
    assert rdmp.hr[5] <= 0.4


@pytest.mark.slow
def test_mixed_signal_is_best_served_by_both_branches():
    ev = _evaluation()
    tr = importlib.import_module("training")
    data_io = importlib.import_module("data_io")
    bundle = data_io.generate_synthetic(data_io.SyntheticSpec(mode="mixed", seed=0))
    cfg = tr.TrainConfig(embedding_dim=32, batch_size=32, epochs=50, learning_rate=0.005, seed=0)
    split = ev.split_dataset(bundle.store, ev.SplitSpec(), bundle.planted_holdout())
    hr = {variant: ev.run_ablation(bundle.store, variant, cfg, split=split).hr[5]
          for variant in ("full", "RDMP", "RMP")}
    assert hr["full"] >= max(hr["RDMP"], hr["RMP"]), hr
