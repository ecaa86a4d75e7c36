"""
DREAGR - Two-Stage Training

Stage 1 fits the user-level parameters Theta_u on the user loss; stage 2 takes
the learned Theta_u and fits the group-level parameters Theta_g on the group
loss. Both losses are the cross-entropy between the model's item distribution
and the uniform distribution over a row's merged targets.

This module implements:
- TrainConfig with the hyperparameter grids
- user_loss / group_loss evaluation
- Trainer: seeded per-stage streams, Adam updates, loss stream, status
- Full-model gradient verification against finite differences
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field, field_validator

from aggregation import AggregatorKind, GroupRecommender
from errors import NumericalError
from hin_graph import InteractionStore, merged_targets
from nn_core import AdamConfig, GradCheckReport, Parameter, adam_step, grad_check, target_cross_entropy
from preference_model import PreferenceModel

LR_GRID = (0.00005, 0.0001, 0.0005, 0.001, 0.005, 0.01, 0.05)
DIM_GRID = (32, 64, 128, 256, 512, 1024)
BATCH_GRID = (32, 64, 128, 256, 512, 1024)
DECAY_GRID = (0.0, 0.001, 0.005, 0.01, 0.05)

GRIDS = {
    "lr": ("learning_rate", LR_GRID),
    "dim": ("embedding_dim", DIM_GRID),
    "batch": ("batch_size", BATCH_GRID),
    "decay": ("weight_decay", DECAY_GRID),
}

STAGE_USER = "user"
STAGE_GROUP = "group"
MODEL_GRADCHECK_FLOOR = 1e-5

logger = logging.getLogger("Trainer")


def _warn_off_grid(name: str, value, grid):
    if value not in grid:
        logger.warning(f"{name}={value} is outside the tuning grid {list(grid)}")


class TrainConfig(BaseModel):
    """Optimization settings for both stages"""
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(0.001, gt=0)
    pretrain_lr: float = Field(0.01, gt=0)
    embedding_dim: int = Field(64, ge=1)
    batch_size: int = Field(64, ge=1)
    weight_decay: float = Field(0.001, ge=0)
    epochs: int = Field(50, ge=1)
    seed: int = 0
    freeze_user_in_stage2: bool = True
    aggregator: AggregatorKind = AggregatorKind.ATTENTION
    depth: int = Field(1, ge=1)

    @field_validator("learning_rate", "pretrain_lr")
    @classmethod
    def _lr_grid(cls, v, info):
        _warn_off_grid(info.field_name, v, LR_GRID)
        return v

    @field_validator("embedding_dim")
    @classmethod
    def _dim_grid(cls, v):
        _warn_off_grid("embedding_dim", v, DIM_GRID)
        return v

    @field_validator("batch_size")
    @classmethod
    def _batch_grid(cls, v):
        _warn_off_grid("batch_size", v, BATCH_GRID)
        return v

    @field_validator("weight_decay")
    @classmethod
    def _decay_grid(cls, v):
        _warn_off_grid("weight_decay", v, DECAY_GRID)
        return v


@dataclass
class LossRecord:
    stage: str
    epoch: int
    loss: float
    wall_time: float


@dataclass
class TrainState:
    """
    Theta = Theta_u (user_model) and Theta_g (group_model) with the progress
    markers a checkpoint needs to resume.
    """
    user_model: PreferenceModel
    group_model: GroupRecommender
    config: TrainConfig
    stage: int = 0
    history: Dict[str, List[float]] = field(default_factory=lambda: {STAGE_USER: [], STAGE_GROUP: []})
    steps: Dict[str, int] = field(default_factory=lambda: {STAGE_USER: 0, STAGE_GROUP: 0})

    def named_parameters(self) -> Dict[str, Parameter]:
        named = {f"user/{p.name}": p for p in self.user_model.parameters()}
        named.update({f"group/{p.name}": p for p in self.group_model.parameters()})
        return named


def user_loss(model: PreferenceModel, targets: sp.csr_matrix, users: Sequence[int]) -> float:
    """L_u over `users`; rows without targets are skipped"""
    users = np.asarray([u for u in users if targets.indptr[u + 1] > targets.indptr[u]], dtype=np.int64)
    if users.size == 0:
        return 0.0
    loss, _ = target_cross_entropy(model.forward(users).logits, targets[users].toarray().astype(np.float64))
    return loss


def group_loss(recommender: GroupRecommender, targets: sp.csr_matrix, groups: Sequence[int]) -> float:
    """L_g over `groups`; rows without targets are skipped"""
    groups = np.asarray([g for g in groups if targets.indptr[g + 1] > targets.indptr[g]], dtype=np.int64)
    if groups.size == 0:
        return 0.0
    loss, _ = target_cross_entropy(recommender.forward(groups).logits, _dense_rows(targets, groups))
    return loss


def _dense_rows(targets: sp.csr_matrix, rows: np.ndarray) -> np.ndarray:
    return targets[rows].toarray().astype(np.float64)


def smoothed(history: Sequence[float], window: int = 5) -> List[float]:
    """Means over consecutive non-overlapping windows; a short tail forms its own window"""
    if window < 1:
        raise ValueError(f"window must be positive, got {window}")
    values = np.asarray(history, dtype=np.float64)
    return [float(values[i:i + window].mean()) for i in range(0, len(values), window)]


def _batches(order: np.ndarray, batch_size: int) -> Iterator[np.ndarray]:
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


class Trainer:
    """
    Two-stage optimizer over one interaction store.

    Random streams: one seed sequence per run spawns independent generators for
    initialization, stage 1 shuffling and stage 2 shuffling, so a stage never
    depends on how many draws another stage made.
    """

    def __init__(self, store: InteractionStore, config: TrainConfig,
                 use_explicit: bool = True, use_implicit: bool = True,
                 paths=None):
        self.logger = logging.getLogger("Trainer")
        self.store = store
        self.config = config
        self.use_explicit = use_explicit
        self.use_implicit = use_implicit
        self._lock = threading.Lock()
        self.records: List[LossRecord] = []

        init_seq, stage1_seq, stage2_seq = np.random.SeedSequence(config.seed).spawn(3)
        self._stage_seeds = {STAGE_USER: stage1_seq, STAGE_GROUP: stage2_seq}
        init_rng = np.random.default_rng(init_seq)

        user_model = PreferenceModel(
            store, config.embedding_dim, store.path_specs if paths is None else paths, init_rng,
            use_explicit=use_explicit, use_implicit=use_implicit,
        )
        group_model = GroupRecommender(user_model, store, config.aggregator, init_rng)
        self.state = TrainState(user_model=user_model, group_model=group_model, config=config)

        # targets without the multi-hop part when dependency meta-paths are removed
        self.targets = merged_targets(store, include_multi_hop=use_implicit)
        self.logger.info(
            f"Trainer ready: {len(self.targets.trainable_users)} trainable users, "
            f"{len(self.targets.trainable_groups)} trainable groups, seed {config.seed}"
        )

    @property
    def user_model(self) -> PreferenceModel:
        return self.state.user_model

    @property
    def group_model(self) -> GroupRecommender:
        return self.state.group_model

    def user_loss(self, users: Optional[Sequence[int]] = None) -> float:
        users = self.targets.trainable_users if users is None else users
        return user_loss(self.user_model, self.targets.users, users)

    def group_loss(self, groups: Optional[Sequence[int]] = None) -> float:
        groups = self.targets.trainable_groups if groups is None else groups
        return group_loss(self.group_model, self.targets.groups, groups)

    def _record(self, stage: str, epoch: int, loss: float, started: float):
        record = LossRecord(stage=stage, epoch=epoch, loss=loss, wall_time=time.perf_counter() - started)
        with self._lock:
            self.records.append(record)
            self.state.history[stage].append(loss)

    @staticmethod
    def _reset_moments(params: Sequence[Parameter]):
        for p in params:
            p.adam_m.fill(0.0)
            p.adam_v.fill(0.0)

    def _check_finite(self, loss: float, stage: str, epoch: int, batch: int):
        if not np.isfinite(loss):
            self.logger.error(f"Non-finite {stage} loss at epoch {epoch}, batch {batch}")
            raise NumericalError(f"non-finite {stage} loss {loss} at epoch {epoch}, batch {batch}")

    def train_stage1(self, epochs: Optional[int] = None) -> TrainState:
        """Fit Theta_u on L_u over shuffled user batches at pretrain_lr"""
        cfg = self.config
        epochs = cfg.epochs if epochs is None else epochs
        rng = np.random.default_rng(self._stage_seeds[STAGE_USER])
        adam = AdamConfig(learning_rate=cfg.pretrain_lr, weight_decay=cfg.weight_decay)
        params = self.user_model.parameters()
        self._reset_moments(params)
        users = self.targets.trainable_users
        started = time.perf_counter()

        for epoch in range(1, epochs + 1):
            total = 0.0
            for b, batch in enumerate(_batches(rng.permutation(users), cfg.batch_size)):
                self.user_model.zero_grad()
                fwd = self.user_model.forward(batch)
                loss, d_logits = target_cross_entropy(fwd.logits, _dense_rows(self.targets.users, batch))
                self._check_finite(loss, STAGE_USER, epoch, b)
                self.user_model.backward(fwd, d_logits=d_logits)
                self.state.steps[STAGE_USER] += 1
                for p in params:
                    adam_step(p, adam, self.state.steps[STAGE_USER])
                total += loss
            mean = total / max(len(users), 1)
            self._record(STAGE_USER, epoch, mean, started)
            self.logger.info(f"Stage 1 epoch {epoch}/{epochs}: mean user loss {mean:.6f}")

        self.state.stage = max(self.state.stage, 1)
        return self.state

    def train_stage2(self, epochs: Optional[int] = None) -> TrainState:
        """Fit Theta_g on L_g; Theta_u is frozen unless freeze_user_in_stage2 is off"""
        cfg = self.config
        epochs = cfg.epochs if epochs is None else epochs
        rng = np.random.default_rng(self._stage_seeds[STAGE_GROUP])
        adam = AdamConfig(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
        fine_tune = not cfg.freeze_user_in_stage2
        params = self.group_model.parameters()
        if fine_tune:
            params = params + self.user_model.parameters()
        self._reset_moments(params)
        groups = self.targets.trainable_groups
        started = time.perf_counter()

        for epoch in range(1, epochs + 1):
            total = 0.0
            for b, batch in enumerate(_batches(rng.permutation(groups), cfg.batch_size)):
                self.group_model.zero_grad()
                self.user_model.zero_grad()
                fwd = self.group_model.forward(batch)
                loss, d_logits = target_cross_entropy(fwd.logits, _dense_rows(self.targets.groups, batch))
                self._check_finite(loss, STAGE_GROUP, epoch, b)
                self.group_model.backward(fwd, d_logits, propagate_to_users=fine_tune)
                self.state.steps[STAGE_GROUP] += 1
                for p in params:
                    adam_step(p, adam, self.state.steps[STAGE_GROUP])
                total += loss
            mean = total / max(len(groups), 1)
            self._record(STAGE_GROUP, epoch, mean, started)
            self.logger.info(f"Stage 2 epoch {epoch}/{epochs}: mean group loss {mean:.6f}")

        self.state.stage = 2
        return self.state

    def fit(self, pretrain: bool = True) -> TrainState:
        """Both stages in order; `pretrain=False` feeds the initial Theta_u to stage 2"""
        if pretrain:
            self.train_stage1()
        else:
            self.logger.info("Skipping user pre-training")
        return self.train_stage2()

    def get_training_status(self) -> Dict[str, object]:
        with self._lock:
            history = {k: list(v) for k, v in self.state.history.items()}
        return {
            "stage": self.state.stage,
            "epochs_completed": {k: len(v) for k, v in history.items()},
            "last_loss": {k: (v[-1] if v else None) for k, v in history.items()},
            "steps": dict(self.state.steps),
            "freeze_user_in_stage2": self.config.freeze_user_in_stage2,
            "aggregator": self.config.aggregator.value,
            "branches": {"explicit": self.use_explicit, "implicit": self.use_implicit},
            "user_model": self.user_model.get_model_status(),
            "group_model": self.group_model.get_model_status(),
        }

    def gradient_check(self, h: float = 1e-5, tol: float = 1e-4, corrupt=None,
                       scale_floor: float = MODEL_GRADCHECK_FLOOR) -> GradCheckReport:
        """
        Finite-difference check of L_u + L_g over every Theta_u and Theta_g tensor,
        with the group loss back-propagated into Theta_u. Gradients below
        `scale_floor` are compared on an absolute scale: central differences of
        the summed loss carry about 1e-11 of rounding noise.
        """
        users = self.targets.trainable_users
        groups = self.targets.trainable_groups
        user_t = _dense_rows(self.targets.users, users)
        group_t = _dense_rows(self.targets.groups, groups)

        def loss_fn(compute_grads: bool) -> float:
            if compute_grads:
                self.user_model.zero_grad()
                self.group_model.zero_grad()
            total = 0.0
            if users.size:
                fwd = self.user_model.forward(users)
                loss, d_logits = target_cross_entropy(fwd.logits, user_t)
                total += loss
                if compute_grads:
                    self.user_model.backward(fwd, d_logits=d_logits)
            if groups.size:
                gfwd = self.group_model.forward(groups)
                loss, d_logits = target_cross_entropy(gfwd.logits, group_t)
                total += loss
                if compute_grads:
                    self.group_model.backward(gfwd, d_logits, propagate_to_users=True)
            return total

        params = self.user_model.parameters() + self.group_model.parameters()
        return grad_check(loss_fn, params, h=h, tol=tol, scale_floor=scale_floor, corrupt=corrupt)


def create_trainer(store: InteractionStore, config: Optional[TrainConfig] = None, **overrides) -> Trainer:
    """Factory: Trainer with a default config, fields overridden by keyword"""
    base = {} if config is None else config.model_dump()
    config = TrainConfig(**{**base, **overrides})
    return Trainer(store, config)
