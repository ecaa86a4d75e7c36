import importlib

import numpy as np
import pytest


def _module(name):
    return importlib.import_module(name)


def _model(store, dim=4, seed=0, **kwargs):
    return _module("preference_model").create_preference_model(store, embedding_dim=dim, seed=seed, **kwargs)


def _randomize(model, rng, scale=0.5):
    for p in model.parameters():
        p.value[...] = rng.normal(scale=scale, size=p.shape)


def _relu(x):
    return np.maximum(x, 0.0)


def _softmax(v):
    ex = np.exp(v - v.max())
    return ex / ex.sum()


def _reference_user(model, store, u):
    """Loop-by-loop recomputation of one user's forward pass"""
    F = model.F
    y = store.y_uv.toarray().astype(float)
    p_u = _relu(model["W_u"] @ y[u] + model["b_u"])
    q = np.stack([_relu(model["W_v"] @ y[:, v] + model["b_v"]) for v in range(store.n_items)])

    def attend(label, targets):
        if not targets:
            return np.zeros(F)
        W, b, h = model[f"W_{label}"], model[f"b_{label}"], model[f"h_{label}"]
        scores = np.array([h @ _relu(W @ np.concatenate([p_u, q[j]]) + b) for j in targets])
        weights = _softmax(scores)
        return sum(w * q[j] for w, j in zip(weights, targets))

    closure = store.dependency_closure().toarray()
    items = [int(v) for v in np.flatnonzero(y[u])]
    p_P = attend("P1", items)
    pairs = [j for i in items for j in range(store.n_items) if closure[i, j]]
    p_PP = attend("PP1", pairs)

    def mlp(branch, x):
        hidden = _relu(model[f"mlp_{branch}.W1"] @ x + model[f"mlp_{branch}.b1"])
        return model[f"mlp_{branch}.W2"] @ hidden + model[f"mlp_{branch}.b2"]

    hat_P = mlp("P", np.concatenate([p_u, p_P]))
    hat_PP = mlp("PP", np.concatenate([p_u, p_PP]))
    eta = 1.0 / (1.0 + np.exp(-(model["W_fusion"] @ (hat_P + hat_PP) + model["b_fusion"])))
    p_hat = eta * hat_P + (1 - eta) * hat_PP
    logits = model["W_out"] @ (model["W_vu"] @ p_hat) + model["b_out"]
    return p_u, p_P, p_PP, p_hat, _softmax(logits)


def test_forward_matches_loop_reference(micro_store, rng):
    model = _model(micro_store, dim=4)
    _randomize(model, rng)
    for u in range(micro_store.n_users):
        p_u, p_P, p_PP, p_hat, scores = _reference_user(model, micro_store, u)
        state = model.state(u)
        assert np.allclose(state.p_u, p_u, atol=1e-10)
        assert np.allclose(state.p_P, p_P, atol=1e-10)
        assert np.allclose(state.p_PP, p_PP, atol=1e-10)
        assert np.allclose(state.p_hat, p_hat, atol=1e-10)
        assert np.allclose(model.user_scores(u), scores, atol=1e-10)


def test_single_neighbor_gets_full_attention():
    hg = _module("hin_graph")
    store = hg.build_store([("a", "x"), ("b", "x"), ("b", "y")], [("x", "y")], [("g", "a"), ("g", "b")])
    model = _model(store, dim=3)
    _randomize(model, np.random.default_rng(1))
    q_x, q_y = model.embed_item(0), model.embed_item(1)

    p_P, alpha = model.explicit_preference(0, "P1")
    assert np.allclose(alpha, [1.0])
    assert np.allclose(p_P, q_x)

    p_PP, beta = model.implicit_preference(0, "PP1")
    assert np.allclose(beta, [1.0])
    assert np.allclose(p_PP, q_y)


def test_identical_items_share_attention_equally():
    hg = _module("hin_graph")
    store = hg.build_store([("a", "x"), ("a", "y"), ("b", "x"), ("b", "y")], [], [("g", "a")])
    model = _model(store, dim=3)
    _randomize(model, np.random.default_rng(2))
    _, alpha = model.explicit_preference(0, "P1")
    assert np.allclose(alpha, [0.5, 0.5])


def test_dependency_attention_is_normalized_over_all_pairs():
    hg = _module("hin_graph")
    records = [("a", "i1"), ("a", "i2"), ("b", "j"), ("b", "k")]
    edges = [("i1", "j"), ("i2", "j"), ("i1", "k")]
    store = hg.build_store(records, edges, [("g", "a"), ("g", "b")])
    model = _model(store, dim=3)
    _randomize(model, np.random.default_rng(3))

    p_PP, beta = model.implicit_preference(0, "PP1")
    sources, targets = model.path("PP1").entries(0)
    assert list(sources) == [0, 0, 1]
    assert list(targets) == [2, 3, 2]
    # j and k have identical columns, so every pair scores the same
    assert np.allclose(beta, [1 / 3] * 3)
    assert beta[targets == 2].sum() == pytest.approx(2 / 3)
    assert abs(beta.sum() - 1.0) < 1e-12
    assert np.allclose(p_PP, model.embed_item(2))

    state = model.state(0)
    src, items, weights = state.beta["PP1"]
    assert list(src) == [0, 0, 1] and np.allclose(weights, beta)


def test_gate_blends_the_two_branches(micro_store, rng):
    model = _model(micro_store, dim=4)
    _randomize(model, rng, scale=0.2)
    model.params["W_fusion"].value[...] = 0.0
    model.params["b_fusion"].value[...] = 0.0
    state = model.state(0)
    assert np.allclose(state.eta, 0.5)
    assert np.allclose(state.p_hat, 0.5 * (state.p_hat_P + state.p_hat_PP))

    model.params["b_fusion"].value[...] = 20.0
    state = model.state(0)
    assert np.allclose(state.p_hat, state.p_hat_P, rtol=0, atol=1e-8)
    assert np.allclose(model.fuse(0), state.p_hat)


def test_user_scores_are_a_distribution(micro_store, rng):
    model = _model(micro_store, dim=4)
    _randomize(model, rng)
    for u in range(micro_store.n_users):
        scores = model.user_scores(u)
        assert scores.shape == (micro_store.n_items,)
        assert abs(scores.sum() - 1.0) < 1e-9 and np.all(scores > 0)

    model.params["W_out"].value[...] = 0.0
    model.params["b_out"].value[...] = 0.0
    assert np.allclose(model.user_scores(1), np.full(micro_store.n_items, 1 / micro_store.n_items))


def test_branch_switches_remove_path_parameters(micro_store):
    no_implicit = _model(micro_store, use_implicit=False)
    status = no_implicit.get_model_status()
    assert status["implicit_paths"] == [] and status["explicit_paths"] == ["P1"]
    assert "W_PP1" not in no_implicit.params
    assert np.allclose(no_implicit.sum_implicit(0), 0.0)

    no_explicit = _model(micro_store, use_explicit=False)
    assert no_explicit.get_model_status()["explicit_paths"] == []
    assert np.allclose(no_explicit.sum_explicit(0), 0.0)


def test_initialization_is_seeded_and_biases_start_at_zero(micro_store):
    a, b = _model(micro_store, seed=11), _model(micro_store, seed=11)
    for name, p in a.params.items():
        assert np.array_equal(p.value, b[name])
    assert not np.any(a["b_u"]) and not np.any(a["b_out"])
    assert np.any(a["W_u"])


def test_out_of_range_ids_raise_data_error(micro_store):
    errors = _module("errors")
    model = _model(micro_store)
    with pytest.raises(errors.DataError, match="user id 7"):
        model.state(7)
    with pytest.raises(errors.DataError, match="item id -1"):
        model.embed_item(-1)
    with pytest.raises(KeyError):
        model.explicit_preference(0, "PP1")


def test_backward_matches_finite_differences(micro_store, rng):
    nn = _module("nn_core")
    model = _model(micro_store, dim=3)
    _randomize(model, rng)
    users = np.arange(micro_store.n_users)
    targets = micro_store.y_uv.toarray().astype(float)

    def loss_fn(compute_grads):
        fwd = model.forward(users)
        loss, d_logits = nn.target_cross_entropy(fwd.logits, targets)
        if compute_grads:
            model.zero_grad()
            model.backward(fwd, d_logits)
        return loss

    report = nn.grad_check(loss_fn, model.parameters(), scale_floor=1e-5)
    assert report.passed, f"worst relative error {report.worst}"


def _random_store(rng, item_names, n_users=6):
    hg = _module("hin_graph")
    n_items = len(item_names)
    held = set()
    for u in range(n_users):
        for v in rng.choice(n_items, size=int(rng.integers(1, 4)), replace=False):
            held.add((u, int(v)))
    for v in set(range(n_items)) - {v for _, v in held}:
        held.add((int(rng.integers(n_users)), v))
    edges = {(a, b) for a in range(n_items) for b in range(a + 1, n_items) if rng.random() < 0.25}
    return hg.build_store(
        [(f"u{u}", item_names[v]) for u, v in sorted(held)],
        [(item_names[a], item_names[b]) for a, b in sorted(edges)],
        [("g", "u0"), ("g", "u1")],
    )


def test_item_relabeling_leaves_path_preferences_unchanged():
    for seed in range(10):
        n_items = 7
        perm = np.random.default_rng(100 + seed).permutation(n_items)
        store_a = _random_store(np.random.default_rng(seed), [f"i{k:02d}" for k in range(n_items)])
        store_b = _random_store(np.random.default_rng(seed), [f"i{perm[k]:02d}" for k in range(n_items)])
        model_a, model_b = _model(store_a, dim=3), _model(store_b, dim=3)
        _randomize(model_a, np.random.default_rng(seed))
        for name, p in model_a.params.items():
            target = model_b.params[name].value
            if name == "W_u":
                target[:, perm] = p.value
            elif name in ("W_out", "b_out"):
                target[perm] = p.value
            else:
                target[...] = p.value

        for u in range(store_a.n_users):
            for label in ("P1", "PP1"):
                pref = model_a.explicit_preference if label == "P1" else model_a.implicit_preference
                relabeled = model_b.explicit_preference if label == "P1" else model_b.implicit_preference
                assert np.allclose(pref(u, label)[0], relabeled(u, label)[0], atol=1e-12), (seed, u, label)
            alpha_a = dict(zip(perm[model_a.state(u).alpha["P1"][0]], model_a.state(u).alpha["P1"][1]))
            items_b, weights_b = model_b.state(u).alpha["P1"]
            assert alpha_a == pytest.approx(dict(zip(items_b, weights_b)), abs=1e-12)
            assert np.allclose(model_b.user_scores(u)[perm], model_a.user_scores(u), atol=1e-12)


def test_path_preference_is_a_convex_combination_of_item_embeddings():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        store = _random_store(rng, [f"i{k}" for k in range(6)])
        model = _model(store, dim=4)
        _randomize(model, rng, scale=1.0)
        for u in range(store.n_users):
            p_P, alpha = model.explicit_preference(u, "P1")
            items, _ = model.state(u).alpha["P1"]
            q = np.stack([model.embed_item(int(j)) for j in items])
            assert np.all(alpha >= 0) and abs(alpha.sum() - 1.0) < 1e-12
            assert np.allclose(alpha @ q, p_P, atol=1e-12)
            assert np.all(p_P >= q.min(axis=0) - 1e-12) and np.all(p_P <= q.max(axis=0) + 1e-12)


def test_fused_preference_lies_between_the_branches():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        store = _random_store(rng, [f"i{k}" for k in range(6)])
        model = _model(store, dim=4)
        _randomize(model, rng)
        for u in range(store.n_users):
            state = model.state(u)
            assert np.all(state.eta > 0) and np.all(state.eta < 1)
            low = np.minimum(state.p_hat_P, state.p_hat_PP) - 1e-12
            high = np.maximum(state.p_hat_P, state.p_hat_PP) + 1e-12
            assert np.all(low <= state.p_hat) and np.all(state.p_hat <= high)
