"""
DREAGR - Preference Aggregation

Group-level half of the recommender (the parameter set Theta_g). Member
preferences p_hat_u are pooled into a group preference r_g, either by the
attention aggregator or by the Meanpool heuristic, and scored over all items
through W_vg and the output layer shared with the user predictor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from errors import DataError
from hin_graph import InteractionStore
from nn_core import (
    Parameter,
    affine,
    glorot_uniform,
    relu,
    relu_backward,
    segment_softmax,
    segment_softmax_backward,
    segment_sum,
    softmax,
)
from preference_model import PreferenceModel, UserForward

AGGREGATOR_PARAMETERS = ("W_agg", "b_agg", "agg_mlp.W1", "agg_mlp.b1", "agg_mlp.W2", "agg_mlp.b2", "h_agg")


class AggregatorKind(Enum):
    ATTENTION = "attention"
    MEANPOOL = "meanpool"


@dataclass
class GroupPreference:
    """r_g and the member weights gamma_u (user id -> weight)"""
    group: int
    r_g: np.ndarray
    member_weights: Dict[int, float] = field(default_factory=dict)


def _member_matrix(group: int, member_states: Mapping[int, np.ndarray]):
    if not member_states:
        raise DataError(f"group {group} has no members to aggregate")
    members = sorted(member_states)
    return members, np.stack([np.asarray(member_states[u], dtype=np.float64) for u in members])


def attention_scores(p_hat: np.ndarray, params: Mapping[str, np.ndarray]) -> np.ndarray:
    """o_u = h^T MLP(W_agg p_hat_u + b) for each row of p_hat"""
    x = affine(params["W_agg"], p_hat, params["b_agg"])
    hidden = relu(affine(params["agg_mlp.W1"], x, params["agg_mlp.b1"]))
    return affine(params["agg_mlp.W2"], hidden, params["agg_mlp.b2"]) @ params["h_agg"]


def attention_aggregate(group: int, member_states: Mapping[int, np.ndarray],
                        params: Mapping[str, np.ndarray]) -> GroupPreference:
    members, p_hat = _member_matrix(group, member_states)
    gamma = softmax(attention_scores(p_hat, params))
    return GroupPreference(
        group=group,
        r_g=gamma @ p_hat,
        member_weights={u: float(w) for u, w in zip(members, gamma)},
    )


def meanpool_aggregate(group: int, member_states: Mapping[int, np.ndarray]) -> GroupPreference:
    members, p_hat = _member_matrix(group, member_states)
    weight = 1.0 / len(members)
    return GroupPreference(
        group=group,
        r_g=p_hat.mean(axis=0),
        member_weights={u: weight for u in members},
    )


@dataclass
class GroupForward:
    groups: np.ndarray
    user_fwd: UserForward
    segments: np.ndarray
    positions: np.ndarray
    member_p_hat: np.ndarray
    agg_x: Optional[np.ndarray]
    agg_pre: Optional[np.ndarray]
    agg_hidden: Optional[np.ndarray]
    agg_out: Optional[np.ndarray]
    gamma: np.ndarray
    r_g: np.ndarray
    transformed: np.ndarray
    logits: np.ndarray


class GroupRecommender:
    """
    Theta_g: aggregator parameters (attention only) and the F x F group transform W_vg.

    The output layer over items belongs to the user model and is reused here.
    """

    def __init__(self, user_model: PreferenceModel, store: InteractionStore,
                 aggregator: AggregatorKind, rng: np.random.Generator):
        self.logger = logging.getLogger("GroupRecommender")
        self.user_model = user_model
        self.aggregator = AggregatorKind(aggregator)
        self.groups = store.groups
        self.n_groups = store.n_groups
        F = user_model.F

        shapes = []
        if self.aggregator == AggregatorKind.ATTENTION:
            shapes += [
                ("W_agg", (F, F), True), ("b_agg", (F,), False),
                ("agg_mlp.W1", (F, F), True), ("agg_mlp.b1", (F,), False),
                ("agg_mlp.W2", (F, F), True), ("agg_mlp.b2", (F,), False),
                ("h_agg", (F,), True),
            ]
        shapes.append(("W_vg", (F, F), True))
        self.params: Dict[str, Parameter] = {}
        for name, shape, decay in shapes:
            value = glorot_uniform(rng, shape) if decay else np.zeros(shape)
            self.params[name] = Parameter(name=name, value=value, decay=decay)

        self.logger.info(
            f"Group recommender: {self.aggregator.value} aggregator, "
            f"{self.aggregator_parameter_count()} aggregator parameters"
        )

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].value

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def aggregator_parameter_count(self) -> int:
        return int(sum(self.params[n].value.size for n in AGGREGATOR_PARAMETERS if n in self.params))

    def _check_group(self, g: int):
        if not 0 <= g < self.n_groups:
            raise DataError(f"group id {g} out of range [0, {self.n_groups})")

    def aggregate(self, group: int, member_states: Mapping[int, np.ndarray]) -> GroupPreference:
        if self.aggregator == AggregatorKind.MEANPOOL:
            return meanpool_aggregate(group, member_states)
        return attention_aggregate(group, member_states, {n: p.value for n, p in self.params.items()})

    def forward(self, groups: Sequence[int]) -> GroupForward:
        """Batched pass: member preferences, pooling, group logits over all items"""
        groups = np.asarray(groups, dtype=np.int64)
        members = [self.groups.members(int(g)) for g in groups]
        for g, m in zip(groups, members):
            if not m:
                raise DataError(f"group {int(g)} has no members to aggregate")
        users = np.unique(np.concatenate([np.asarray(m, dtype=np.int64) for m in members]))
        user_fwd = self.user_model.forward(users)

        segments = np.repeat(np.arange(len(groups)), [len(m) for m in members])
        positions = np.searchsorted(users, np.concatenate(members))
        member_p_hat = user_fwd.p_hat[positions]
        batch = len(groups)

        x = pre = hidden = out = None
        if self.aggregator == AggregatorKind.ATTENTION:
            x = affine(self["W_agg"], member_p_hat, self["b_agg"])
            pre = affine(self["agg_mlp.W1"], x, self["agg_mlp.b1"])
            hidden = relu(pre)
            out = affine(self["agg_mlp.W2"], hidden, self["agg_mlp.b2"])
            gamma = segment_softmax(out @ self["h_agg"], segments, batch)
        else:
            sizes = np.asarray([len(m) for m in members], dtype=np.float64)
            gamma = 1.0 / sizes[segments]

        r_g = segment_sum(gamma[:, None] * member_p_hat, segments, batch)
        transformed = r_g @ self["W_vg"].T
        logits = self.user_model.output_logits(transformed)
        return GroupForward(
            groups=groups, user_fwd=user_fwd, segments=segments, positions=positions,
            member_p_hat=member_p_hat, agg_x=x, agg_pre=pre, agg_hidden=hidden, agg_out=out,
            gamma=gamma, r_g=r_g, transformed=transformed, logits=logits,
        )

    def backward(self, fwd: GroupForward, d_logits: np.ndarray, propagate_to_users: bool = False):
        """
        Accumulate Theta_g gradients (and the shared output layer's).

        With `propagate_to_users` the gradient continues into every Theta_u
        tensor through the member preferences.
        """
        d_transformed = self.user_model.output_backward(fwd.transformed, d_logits)
        self.params["W_vg"].grad += d_transformed.T @ fwd.r_g
        d_r = d_transformed @ self["W_vg"]

        segs = fwd.segments
        d_member = fwd.gamma[:, None] * d_r[segs]
        if self.aggregator == AggregatorKind.ATTENTION:
            d_gamma = np.einsum("kf,kf->k", d_r[segs], fwd.member_p_hat)
            d_scores = segment_softmax_backward(fwd.gamma, d_gamma, segs, len(fwd.groups))
            h = self["h_agg"]
            self.params["h_agg"].grad += fwd.agg_out.T @ d_scores
            d_out = np.outer(d_scores, h)
            self.params["agg_mlp.W2"].grad += d_out.T @ fwd.agg_hidden
            self.params["agg_mlp.b2"].grad += d_out.sum(axis=0)
            d_pre = relu_backward(fwd.agg_pre, d_out @ self["agg_mlp.W2"])
            self.params["agg_mlp.W1"].grad += d_pre.T @ fwd.agg_x
            self.params["agg_mlp.b1"].grad += d_pre.sum(axis=0)
            d_x = d_pre @ self["agg_mlp.W1"]
            self.params["W_agg"].grad += d_x.T @ fwd.member_p_hat
            self.params["b_agg"].grad += d_x.sum(axis=0)
            d_member += d_x @ self["W_agg"]

        if propagate_to_users:
            d_p_hat = np.zeros_like(fwd.user_fwd.p_hat)
            np.add.at(d_p_hat, fwd.positions, d_member)
            self.user_model.backward(fwd.user_fwd, d_p_hat=d_p_hat)

    def group_preference(self, g: int) -> GroupPreference:
        self._check_group(g)
        fwd = self.forward([g])
        members = self.groups.members(g)
        return GroupPreference(
            group=g,
            r_g=fwd.r_g[0],
            member_weights={u: float(w) for u, w in zip(members, fwd.gamma)},
        )

    def group_scores(self, g: int) -> np.ndarray:
        """pi(r_g): probability vector over all items"""
        self._check_group(g)
        return softmax(self.forward([g]).logits[0])

    def get_model_status(self) -> Dict[str, object]:
        return {
            "aggregator": self.aggregator.value,
            "groups": self.n_groups,
            "aggregator_parameters": self.aggregator_parameter_count(),
            "parameter_count": int(sum(p.value.size for p in self.params.values())),
        }


def create_group_recommender(user_model: PreferenceModel, store: InteractionStore,
                             aggregator: str = "attention", seed: int = 0,
                             rng: Optional[np.random.Generator] = None) -> GroupRecommender:
    """Factory: a group recommender on top of an existing preference model"""
    if rng is None:
        rng = np.random.default_rng(seed)
    return GroupRecommender(user_model, store, AggregatorKind(aggregator), rng)
