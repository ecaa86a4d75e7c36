"""
DREAGR - User Preference Model

User-level half of the recommender (the parameter set Theta_u). A user's
preference starts from the embedding of the user's interaction row, is
enriched by path-aware attention over the items reachable on meta-paths
(explicit preference) and dependency meta-paths (implicit preference), and
the two branches are blended by an elementwise sigmoid gate.

This module implements:
- Inherent user/item embeddings from binary interaction rows/columns
- Path-aware attention per meta-path and dependency meta-path type
- Branch MLPs and gated fusion of explicit and implicit preferences
- The user-level predictor (F x F transform + output layer over all items)
- Batched forward and closed-form backward passes over a set of users
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from errors import DataError
from hin_graph import InteractionStore, PathKind, PathSpec, enumerate_path_incidence
from nn_core import (
    Parameter,
    affine,
    glorot_uniform,
    relu,
    relu_backward,
    segment_softmax,
    segment_softmax_backward,
    segment_sum,
    sigmoid,
    softmax,
)


@dataclass
class PathIndex:
    """
    Flat incidence of one path type: entries indptr[u]:indptr[u+1] belong to user u.

    Meta-paths hold one entry per reachable central item. Dependency meta-paths
    hold one entry per (source item i, target item j) pair, so `items` carries
    j once for every source it is reached from.
    """
    label: str
    kind: PathKind
    indptr: np.ndarray
    items: np.ndarray
    sources: np.ndarray

    @classmethod
    def from_incidence(cls, spec: PathSpec, incidence: Dict, n_users: int) -> "PathIndex":
        counts = np.zeros(n_users + 1, dtype=np.int64)
        items: List[int] = []
        sources: List[int] = []
        if spec.is_dependency:
            for (u, i) in sorted(incidence):
                targets = sorted(incidence[(u, i)])
                items.extend(targets)
                sources.extend([i] * len(targets))
                counts[u + 1] += len(targets)
        else:
            for u in range(n_users):
                reached = sorted(incidence.get(u, ()))
                items.extend(reached)
                sources.extend(reached)
                counts[u + 1] = len(reached)
        return cls(
            label=spec.label,
            kind=spec.kind,
            indptr=np.cumsum(counts),
            items=np.asarray(items, dtype=np.int64),
            sources=np.asarray(sources, dtype=np.int64),
        )

    def gather(self, users: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Batch-position segment ids and target items for `users`"""
        starts, stops = self.indptr[users], self.indptr[users + 1]
        segments = np.repeat(np.arange(len(users)), stops - starts)
        if segments.size == 0:
            return segments, np.zeros(0, dtype=np.int64)
        positions = np.concatenate([np.arange(a, b) for a, b in zip(starts, stops)])
        return segments, self.items[positions]

    def entries(self, u: int) -> Tuple[np.ndarray, np.ndarray]:
        span = slice(self.indptr[u], self.indptr[u + 1])
        return self.sources[span], self.items[span]


@dataclass
class PathCache:
    label: str
    segments: np.ndarray
    items: np.ndarray
    pre: np.ndarray
    act: np.ndarray
    weights: np.ndarray
    output: np.ndarray


@dataclass
class MlpCache:
    inputs: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    output: np.ndarray


@dataclass
class UserForward:
    """Intermediates of one batched forward pass, kept for the backward pass"""
    users: np.ndarray
    rows: sp.csr_matrix
    user_pre: np.ndarray
    p_u: np.ndarray
    item_pre: np.ndarray
    q: np.ndarray
    explicit: List[PathCache]
    implicit: List[PathCache]
    p_P: np.ndarray
    p_PP: np.ndarray
    mlp_P: MlpCache
    mlp_PP: MlpCache
    gate_in: np.ndarray
    eta: np.ndarray
    p_hat: np.ndarray
    transformed: np.ndarray
    logits: np.ndarray


@dataclass
class UserPreferenceState:
    """Every intermediate representation of one user"""
    user: int
    p_u: np.ndarray
    p_P: np.ndarray
    p_PP: np.ndarray
    p_hat_P: np.ndarray
    p_hat_PP: np.ndarray
    p_hat: np.ndarray
    eta: np.ndarray
    alpha: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    beta: Dict[str, Tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=dict)


class PreferenceModel:
    """
    Theta_u: embeddings, per-path attention, branch MLPs, gate and user predictor.

    The output layer (W_out, b_out) scores all m items and is shared with the
    group predictor.
    """

    def __init__(self, store: InteractionStore, embedding_dim: int,
                 paths: Sequence[PathSpec], rng: np.random.Generator,
                 use_explicit: bool = True, use_implicit: bool = True):
        self.logger = logging.getLogger("PreferenceModel")
        if embedding_dim < 1:
            raise ValueError(f"embedding dimension must be positive, got {embedding_dim}")
        self.F = embedding_dim
        self.n_users = store.n_users
        self.n_items = store.n_items
        self.use_explicit = use_explicit
        self.use_implicit = use_implicit

        self.user_rows = sp.csr_matrix(store.y_uv, dtype=np.float64)
        self.item_columns = sp.csr_matrix(store.y_uv.T, dtype=np.float64)

        self.explicit: List[PathIndex] = []
        self.implicit: List[PathIndex] = []
        for spec in paths:
            if spec.is_dependency and not use_implicit:
                continue
            if not spec.is_dependency and not use_explicit:
                continue
            incidence = store.per_path_incidence.get(spec.label)
            if incidence is None:
                incidence = enumerate_path_incidence(store, spec)
            index = PathIndex.from_incidence(spec, incidence, store.n_users)
            (self.implicit if spec.is_dependency else self.explicit).append(index)

        F, m, n = self.F, self.n_items, self.n_users
        shapes: List[Tuple[str, Tuple[int, ...], bool]] = [
            ("W_u", (F, m), True), ("b_u", (F,), False),
            ("W_v", (F, n), True), ("b_v", (F,), False),
        ]
        for index in self.explicit + self.implicit:
            shapes += [
                (f"W_{index.label}", (F, 2 * F), True),
                (f"b_{index.label}", (F,), False),
                (f"h_{index.label}", (F,), True),
            ]
        for branch in ("P", "PP"):
            shapes += [
                (f"mlp_{branch}.W1", (F, 2 * F), True), (f"mlp_{branch}.b1", (F,), False),
                (f"mlp_{branch}.W2", (F, F), True), (f"mlp_{branch}.b2", (F,), False),
            ]
        shapes += [
            ("W_fusion", (F, F), True), ("b_fusion", (F,), False),
            ("W_vu", (F, F), True),
            ("W_out", (m, F), True), ("b_out", (m,), False),
        ]
        self.params: Dict[str, Parameter] = {}
        for name, shape, decay in shapes:
            value = glorot_uniform(rng, shape) if decay else np.zeros(shape)
            self.params[name] = Parameter(name=name, value=value, decay=decay)

        self.logger.info(
            f"Preference model: F={F}, explicit paths {[p.label for p in self.explicit]}, "
            f"implicit paths {[p.label for p in self.implicit]}, "
            f"{sum(p.value.size for p in self.params.values())} parameters"
        )

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].value

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def _check_user(self, u: int):
        if not 0 <= u < self.n_users:
            raise DataError(f"user id {u} out of range [0, {self.n_users})")

    def _check_item(self, v: int):
        if not 0 <= v < self.n_items:
            raise DataError(f"item id {v} out of range [0, {self.n_items})")

    def path(self, label: str) -> PathIndex:
        for index in self.explicit + self.implicit:
            if index.label == label:
                return index
        raise KeyError(f"path '{label}' is not active in this model")

    # ------------------------------------------------------------------ forward

    def item_embeddings(self) -> Tuple[np.ndarray, np.ndarray]:
        pre = np.asarray(self.item_columns @ self["W_v"].T) + self["b_v"]
        return pre, relu(pre)

    def embed_user(self, u: int) -> np.ndarray:
        self._check_user(u)
        row = self.user_rows[u].toarray().ravel()
        return relu(affine(self["W_u"], row, self["b_u"]))

    def embed_item(self, v: int) -> np.ndarray:
        self._check_item(v)
        column = self.item_columns[v].toarray().ravel()
        return relu(affine(self["W_v"], column, self["b_v"]))

    def _attend(self, index: PathIndex, p_u: np.ndarray, q: np.ndarray,
                segments: np.ndarray, items: np.ndarray) -> PathCache:
        F = self.F
        W = self[f"W_{index.label}"]
        batch = p_u.shape[0]
        if items.size == 0:
            empty = np.zeros((0, F))
            return PathCache(index.label, segments, items, empty, empty, np.zeros(0), np.zeros((batch, F)))
        pre = p_u[segments] @ W[:, :F].T + q[items] @ W[:, F:].T + self[f"b_{index.label}"]
        act = relu(pre)
        scores = act @ self[f"h_{index.label}"]
        weights = segment_softmax(scores, segments, batch)
        output = segment_sum(weights[:, None] * q[items], segments, batch)
        return PathCache(index.label, segments, items, pre, act, weights, output)

    def _mlp(self, branch: str, inputs: np.ndarray) -> MlpCache:
        pre = affine(self[f"mlp_{branch}.W1"], inputs, self[f"mlp_{branch}.b1"])
        hidden = relu(pre)
        output = affine(self[f"mlp_{branch}.W2"], hidden, self[f"mlp_{branch}.b2"])
        return MlpCache(inputs, pre, hidden, output)

    def forward(self, users: Sequence[int]) -> UserForward:
        """Batched forward pass from interaction rows to item logits"""
        users = np.asarray(users, dtype=np.int64)
        batch = len(users)
        rows = self.user_rows[users]
        user_pre = np.asarray(rows @ self["W_u"].T) + self["b_u"]
        p_u = relu(user_pre)
        item_pre, q = self.item_embeddings()

        explicit = [self._attend(idx, p_u, q, *idx.gather(users)) for idx in self.explicit]
        implicit = [self._attend(idx, p_u, q, *idx.gather(users)) for idx in self.implicit]
        p_P = sum((c.output for c in explicit), np.zeros((batch, self.F)))
        p_PP = sum((c.output for c in implicit), np.zeros((batch, self.F)))

        mlp_P = self._mlp("P", np.concatenate([p_u, p_P], axis=1))
        mlp_PP = self._mlp("PP", np.concatenate([p_u, p_PP], axis=1))
        gate_in = mlp_P.output + mlp_PP.output
        eta = sigmoid(affine(self["W_fusion"], gate_in, self["b_fusion"]))
        p_hat = eta * mlp_P.output + (1.0 - eta) * mlp_PP.output

        transformed = p_hat @ self["W_vu"].T
        logits = self.output_logits(transformed)
        return UserForward(
            users=users, rows=rows, user_pre=user_pre, p_u=p_u, item_pre=item_pre, q=q,
            explicit=explicit, implicit=implicit, p_P=p_P, p_PP=p_PP,
            mlp_P=mlp_P, mlp_PP=mlp_PP, gate_in=gate_in, eta=eta, p_hat=p_hat,
            transformed=transformed, logits=logits,
        )

    def output_logits(self, transformed: np.ndarray) -> np.ndarray:
        """Shared output layer over all m items"""
        return affine(self["W_out"], transformed, self["b_out"])

    # ----------------------------------------------------------- single user

    def state(self, u: int) -> UserPreferenceState:
        self._check_user(u)
        fwd = self.forward([u])
        alpha = {c.label: (c.items, c.weights) for c in fwd.explicit}
        beta = {}
        for idx, c in zip(self.implicit, fwd.implicit):
            sources, _ = idx.entries(u)
            beta[c.label] = (sources, c.items, c.weights)
        return UserPreferenceState(
            user=u, p_u=fwd.p_u[0], p_P=fwd.p_P[0], p_PP=fwd.p_PP[0],
            p_hat_P=fwd.mlp_P.output[0], p_hat_PP=fwd.mlp_PP.output[0],
            p_hat=fwd.p_hat[0], eta=fwd.eta[0], alpha=alpha, beta=beta,
        )

    def explicit_preference(self, u: int, label: str) -> Tuple[np.ndarray, np.ndarray]:
        """p_u^{P_l} and its attention weights alpha over Y_V(u)"""
        return self._single_path(u, label, PathKind.META_PATH)

    def implicit_preference(self, u: int, label: str) -> Tuple[np.ndarray, np.ndarray]:
        """p_u^{PP_l} and its attention weights beta over all (i, j) pairs"""
        return self._single_path(u, label, PathKind.DEPENDENCY_META_PATH)

    def _single_path(self, u: int, label: str, kind: PathKind) -> Tuple[np.ndarray, np.ndarray]:
        self._check_user(u)
        index = self.path(label)
        if index.kind != kind:
            raise KeyError(f"path '{label}' is a {index.kind.value}")
        users = np.asarray([u])
        p_u = self.embed_user(u)[None, :]
        _, q = self.item_embeddings()
        cache = self._attend(index, p_u, q, *index.gather(users))
        return cache.output[0], cache.weights

    def sum_explicit(self, u: int) -> np.ndarray:
        return self.state(u).p_P

    def sum_implicit(self, u: int) -> np.ndarray:
        return self.state(u).p_PP

    def fuse(self, u: int) -> np.ndarray:
        return self.state(u).p_hat

    def user_scores(self, u: int) -> np.ndarray:
        """pi(p_hat_u): probability vector over all items"""
        self._check_user(u)
        return softmax(self.forward([u]).logits[0])

    # ----------------------------------------------------------------- backward

    def _attend_backward(self, cache: PathCache, d_output: np.ndarray, p_u: np.ndarray,
                         q: np.ndarray, d_p_u: np.ndarray, d_q: np.ndarray):
        if cache.items.size == 0:
            return
        F = self.F
        label = cache.label
        segs, items, w = cache.segments, cache.items, cache.weights
        W = self[f"W_{label}"]
        h = self[f"h_{label}"]
        batch = p_u.shape[0]

        d_rows = d_output[segs]
        d_w = np.einsum("kf,kf->k", d_rows, q[items])
        np.add.at(d_q, items, w[:, None] * d_rows)
        d_scores = segment_softmax_backward(w, d_w, segs, batch)
        self.params[f"h_{label}"].grad += cache.act.T @ d_scores
        d_pre = relu_backward(cache.pre, np.outer(d_scores, h))
        grad_W = self.params[f"W_{label}"].grad
        grad_W[:, :F] += d_pre.T @ p_u[segs]
        grad_W[:, F:] += d_pre.T @ q[items]
        self.params[f"b_{label}"].grad += d_pre.sum(axis=0)
        d_p_u += segment_sum(d_pre @ W[:, :F], segs, batch)
        np.add.at(d_q, items, d_pre @ W[:, F:])

    def _mlp_backward(self, branch: str, cache: MlpCache, d_out: np.ndarray) -> np.ndarray:
        W1, W2 = self[f"mlp_{branch}.W1"], self[f"mlp_{branch}.W2"]
        self.params[f"mlp_{branch}.W2"].grad += d_out.T @ cache.hidden
        self.params[f"mlp_{branch}.b2"].grad += d_out.sum(axis=0)
        d_pre = relu_backward(cache.pre, d_out @ W2)
        self.params[f"mlp_{branch}.W1"].grad += d_pre.T @ cache.inputs
        self.params[f"mlp_{branch}.b1"].grad += d_pre.sum(axis=0)
        return d_pre @ W1

    def output_backward(self, transformed: np.ndarray, d_logits: np.ndarray) -> np.ndarray:
        """Accumulate output-layer gradients; returns d transformed"""
        self.params["W_out"].grad += d_logits.T @ transformed
        self.params["b_out"].grad += d_logits.sum(axis=0)
        return d_logits @ self["W_out"]

    def backward(self, fwd: UserForward, d_logits: Optional[np.ndarray] = None,
                 d_p_hat: Optional[np.ndarray] = None):
        """
        Accumulate gradients of every Theta_u tensor.

        `d_logits` is the loss gradient w.r.t. the user logits, `d_p_hat` an
        extra upstream gradient on p_hat (from the group level). Either may be None.
        """
        F = self.F
        d_hat = np.zeros_like(fwd.p_hat) if d_p_hat is None else d_p_hat.copy()
        if d_logits is not None:
            d_transformed = self.output_backward(fwd.transformed, d_logits)
            self.params["W_vu"].grad += d_transformed.T @ fwd.p_hat
            d_hat += d_transformed @ self["W_vu"]

        hat_P, hat_PP, eta = fwd.mlp_P.output, fwd.mlp_PP.output, fwd.eta
        d_hat_P = d_hat * eta
        d_hat_PP = d_hat * (1.0 - eta)
        d_gate = d_hat * (hat_P - hat_PP) * eta * (1.0 - eta)
        self.params["W_fusion"].grad += d_gate.T @ fwd.gate_in
        self.params["b_fusion"].grad += d_gate.sum(axis=0)
        d_gate_in = d_gate @ self["W_fusion"]
        d_hat_P += d_gate_in
        d_hat_PP += d_gate_in

        d_in_P = self._mlp_backward("P", fwd.mlp_P, d_hat_P)
        d_in_PP = self._mlp_backward("PP", fwd.mlp_PP, d_hat_PP)
        d_p_u = d_in_P[:, :F] + d_in_PP[:, :F]
        d_p_P, d_p_PP = d_in_P[:, F:], d_in_PP[:, F:]

        d_q = np.zeros_like(fwd.q)
        for cache in fwd.explicit:
            self._attend_backward(cache, d_p_P, fwd.p_u, fwd.q, d_p_u, d_q)
        for cache in fwd.implicit:
            self._attend_backward(cache, d_p_PP, fwd.p_u, fwd.q, d_p_u, d_q)

        d_user_pre = relu_backward(fwd.user_pre, d_p_u)
        self.params["W_u"].grad += np.asarray(fwd.rows.T @ d_user_pre).T
        self.params["b_u"].grad += d_user_pre.sum(axis=0)
        d_item_pre = relu_backward(fwd.item_pre, d_q)
        self.params["W_v"].grad += np.asarray(self.item_columns.T @ d_item_pre).T
        self.params["b_v"].grad += d_item_pre.sum(axis=0)

    def get_model_status(self) -> Dict[str, object]:
        return {
            "embedding_dim": self.F,
            "users": self.n_users,
            "items": self.n_items,
            "explicit_paths": [p.label for p in self.explicit],
            "implicit_paths": [p.label for p in self.implicit],
            "parameter_count": int(sum(p.value.size for p in self.params.values())),
        }


def create_preference_model(store: InteractionStore, embedding_dim: int = 64,
                            paths: Optional[Sequence[PathSpec]] = None, seed: int = 0,
                            use_explicit: bool = True, use_implicit: bool = True,
                            rng: Optional[np.random.Generator] = None) -> PreferenceModel:
    """Factory: a preference model over the store's active path specs"""
    if paths is None:
        paths = store.path_specs
    if rng is None:
        rng = np.random.default_rng(seed)
    return PreferenceModel(store, embedding_dim, paths, rng,
                           use_explicit=use_explicit, use_implicit=use_implicit)
