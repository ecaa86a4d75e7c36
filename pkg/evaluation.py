"""
DREAGR - Evaluation

Leave-out evaluation of group recommendations: group-item interactions are
split 7:1:2, the model is trained on the train side only, and every held-out
(group, item) pair becomes an instance ranked against all items the group did
not interact with in training.

This module implements:
- SplitSpec / split_dataset (random or planted holdouts)
- rank_items, hr_at_n, ndcg_at_n
- evaluate_groups with optional thread parallelism
- paired_hit_test on per-instance hits
- The ablation variants and run_ablation
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.stats import binomtest

from aggregation import AggregatorKind, GroupRecommender
from errors import ConfigError, EvaluationError
from hin_graph import InteractionStore, with_interactions
from training import TrainConfig, Trainer

CUTOFFS = (5, 10, 20)
PARTITIONS = ("train", "val", "test")

logger = logging.getLogger("Evaluator")


class Variant(Enum):
    FULL = "full"
    RPT = "RPT"
    RDMP = "RDMP"
    RMP = "RMP"
    RAA = "RAA"


class SplitSpec(BaseModel):
    """Train/validation/test ratios over per-group interaction instances"""
    model_config = ConfigDict(extra="forbid")

    train: float = Field(0.7, ge=0, le=1)
    validation: float = Field(0.1, ge=0, le=1)
    test: float = Field(0.2, ge=0, le=1)
    seed: int = 0
    min_interactions: int = Field(3, ge=1)

    @model_validator(mode="after")
    def _ratios_sum_to_one(self):
        total = self.train + self.validation + self.test
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {total}")
        return self


@dataclass
class DataSplit:
    """Train-side store plus held-out (group, item) pairs per partition"""
    train_store: InteractionStore
    pairs: Dict[str, np.ndarray]
    excluded_groups: List[int] = field(default_factory=list)

    def instances(self, partition: str = "test") -> List["EvalInstance"]:
        return build_instances(self.train_store, self.pairs[partition])


@dataclass
class EvalInstance:
    group: int
    item: int
    candidates: np.ndarray


@dataclass
class EvalReport:
    variant: str
    hr: Dict[int, float]
    ndcg: Dict[int, float]
    n_instances: int
    ranks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    config: Dict = field(default_factory=dict)

    def hits(self, n: int) -> np.ndarray:
        return self.ranks <= n

    def rows(self) -> List[Tuple[str, str, int, float]]:
        """(variant, metric, N, value) in the fixed table order"""
        out = [(self.variant, "HR", n, self.hr[n]) for n in sorted(self.hr)]
        out += [(self.variant, "NDCG", n, self.ndcg[n]) for n in sorted(self.ndcg)]
        return out


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def validate_cutoffs(cutoffs: Sequence[int]) -> Tuple[int, ...]:
    bad = [n for n in cutoffs if n not in CUTOFFS]
    if bad or not cutoffs:
        raise ConfigError(f"unsupported cutoffs {list(bad) or list(cutoffs)}; choose from {list(CUTOFFS)}")
    return tuple(sorted(set(int(n) for n in cutoffs)))


def split_dataset(store: InteractionStore, spec: SplitSpec,
                  planted: Optional[Sequence[Tuple[int, int, str]]] = None) -> DataSplit:
    """
    Partition every group's Y^GV row into train/val/test.

    Held-out pairs leave Y^GV and the rows of every member in Y^UV; the
    multi-hop matrices and path incidence are re-derived from the train side.
    `planted` (group, item, partition) triples replace the random draw.
    """
    rng = np.random.default_rng(spec.seed)
    held: Dict[str, List[Tuple[int, int]]] = {"val": [], "test": []}
    excluded: List[int] = []

    if planted is not None:
        for g, v, partition in planted:
            if partition not in held:
                raise ConfigError(f"holdout partition must be 'val' or 'test', got '{partition}'")
            if store.y_gv[g, v] == 0:
                raise EvaluationError(f"planted holdout ({g}, {v}) is not a group interaction")
            held[partition].append((int(g), int(v)))
    else:
        for g in range(store.n_groups):
            items = store.group_items(g)
            n = len(items)
            if n < spec.min_interactions:
                if n:
                    excluded.append(g)
                continue
            order = rng.permutation(items)
            n_test = max(1, _round_half_up(spec.test * n))
            n_val = _round_half_up(spec.validation * n)
            n_val = min(n_val, n - n_test - 1)
            held["test"].extend((g, int(v)) for v in order[:n_test])
            held["val"].extend((g, int(v)) for v in order[n_test:n_test + n_val])
        if excluded:
            logger.warning(
                f"{len(excluded)} groups have fewer than {spec.min_interactions} interactions; "
                f"kept entirely in train and excluded from evaluation"
            )

    y_gv = store.y_gv.tolil()
    y_uv = store.y_uv.tolil()
    for pairs in held.values():
        for g, v in pairs:
            y_gv[g, v] = 0
            for u in store.groups.members(g):
                y_uv[u, v] = 0
    train_store = with_interactions(store, y_uv.tocsr(), y_gv.tocsr())

    empty = [g for g in range(store.n_groups) if train_store.y_gv.indptr[g + 1] == train_store.y_gv.indptr[g]]
    if empty and planted is None:
        logger.warning(f"{len(empty)} groups have no train interactions left")

    result = {p: np.asarray(sorted(held[p]), dtype=np.int64).reshape(-1, 2) for p in ("val", "test")}
    logger.info(
        f"Split: {train_store.y_gv.nnz} train, {len(result['val'])} validation, "
        f"{len(result['test'])} test group interactions"
    )
    return DataSplit(train_store=train_store, pairs=result, excluded_groups=excluded)


def build_instances(train_store: InteractionStore, pairs: np.ndarray) -> List[EvalInstance]:
    """Candidates: all items minus the group's train positives"""
    all_items = np.arange(train_store.n_items)
    instances = []
    for g, v in pairs:
        positives = train_store.group_items(int(g))
        candidates = np.setdiff1d(all_items, positives, assume_unique=True)
        instances.append(EvalInstance(group=int(g), item=int(v), candidates=candidates))
    return instances


def rank_items(scores: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Candidates by descending score, ties by ascending item id"""
    candidates = np.asarray(candidates, dtype=np.int64)
    if not np.all(np.isfinite(scores[candidates])):
        raise EvaluationError("cannot rank non-finite scores")
    order = np.lexsort((candidates, -scores[candidates]))
    return candidates[order]


def _rank_of(item: int, ranking: np.ndarray) -> int:
    where = np.flatnonzero(ranking == item)
    return int(where[0]) + 1 if where.size else len(ranking) + 1


def _check_rankings(instances: Sequence[EvalInstance], rankings: Sequence[np.ndarray]):
    if not instances:
        raise EvaluationError("empty instance set")
    if len(instances) != len(rankings):
        raise EvaluationError(f"{len(instances)} instances but {len(rankings)} rankings")


def hr_at_n(instances: Sequence[EvalInstance], rankings: Sequence[np.ndarray], n: int) -> float:
    _check_rankings(instances, rankings)
    hits = sum(1 for inst, ranking in zip(instances, rankings) if inst.item in ranking[:n])
    return hits / len(instances)


def ndcg_at_n(instances: Sequence[EvalInstance], rankings: Sequence[np.ndarray], n: int) -> float:
    """Mean DCG@N with one relevant item per instance, so IDCG = 1"""
    _check_rankings(instances, rankings)
    total = 0.0
    for inst, ranking in zip(instances, rankings):
        r = _rank_of(inst.item, ranking)
        if r <= n:
            total += 1.0 / math.log2(r + 1)
    return total / len(instances)


def _metrics_from_ranks(ranks: np.ndarray, cutoffs: Sequence[int]) -> Tuple[Dict[int, float], Dict[int, float]]:
    hr, ndcg = {}, {}
    gains = 1.0 / np.log2(ranks + 1.0)
    for n in cutoffs:
        hit = ranks <= n
        hr[n] = float(hit.mean())
        ndcg[n] = float(np.where(hit, gains, 0.0).mean())
    return hr, ndcg


def evaluate_groups(recommender: GroupRecommender, instances: Sequence[EvalInstance],
                    cutoffs: Sequence[int] = CUTOFFS, variant: str = Variant.FULL.value,
                    threads: int = 1, config: Optional[Dict] = None) -> EvalReport:
    """
    Rank every instance's candidates by the group's item scores.

    Scores come from one batched forward over the distinct groups; only the
    ranking fans out over `threads` workers, merged back in instance order.
    """
    cutoffs = validate_cutoffs(cutoffs)
    if not instances:
        raise EvaluationError("no evaluation instances: the held-out partition is empty")
    groups = np.unique([inst.group for inst in instances])
    logits = recommender.forward(groups).logits
    row_of = {int(g): i for i, g in enumerate(groups)}

    def rank_chunk(chunk: Sequence[EvalInstance]) -> List[int]:
        return [_rank_of(inst.item, rank_items(logits[row_of[inst.group]], inst.candidates)) for inst in chunk]

    if threads <= 1:
        ranks = rank_chunk(instances)
    else:
        size = math.ceil(len(instances) / threads)
        chunks = [instances[i:i + size] for i in range(0, len(instances), size)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            ranks = [r for part in pool.map(rank_chunk, chunks) for r in part]

    ranks = np.asarray(ranks, dtype=np.int64)
    hr, ndcg = _metrics_from_ranks(ranks, cutoffs)
    summary = ", ".join(f"HR@{n}={hr[n]:.4f} NDCG@{n}={ndcg[n]:.4f}" for n in cutoffs)
    logger.info(f"[{variant}] {len(instances)} instances: {summary}")
    return EvalReport(variant=variant, hr=hr, ndcg=ndcg, n_instances=len(instances),
                      ranks=ranks, config=dict(config or {}))


def paired_hit_test(hits_a: Sequence[bool], hits_b: Sequence[bool]) -> Dict[str, float]:
    """Exact two-sided sign test on the discordant per-instance hits"""
    a = np.asarray(hits_a, dtype=bool)
    b = np.asarray(hits_b, dtype=bool)
    if a.shape != b.shape:
        raise EvaluationError(f"paired test over {a.size} vs {b.size} instances")
    only_a = int(np.sum(a & ~b))
    only_b = int(np.sum(~a & b))
    discordant = only_a + only_b
    p_value = binomtest(only_a, discordant, 0.5).pvalue if discordant else 1.0
    return {"only_a": only_a, "only_b": only_b, "p_value": float(p_value)}


def trainer_for_variant(store: InteractionStore, config: TrainConfig, variant: Variant,
                        paths=None) -> Trainer:
    """Trainer configured for an ablation variant (FULL is the default pipeline)"""
    variant = Variant(variant)
    if variant == Variant.RAA:
        config = config.model_copy(update={"aggregator": AggregatorKind.MEANPOOL})
    return Trainer(
        store, config,
        use_explicit=variant != Variant.RMP,
        use_implicit=variant != Variant.RDMP,
        paths=paths,
    )


def train_variant(trainer: Trainer, variant: Variant):
    return trainer.fit(pretrain=Variant(variant) != Variant.RPT)


def run_ablation(store: InteractionStore, variant: Variant, config: TrainConfig,
                 split_spec: Optional[SplitSpec] = None,
                 planted: Optional[Sequence[Tuple[int, int, str]]] = None,
                 cutoffs: Sequence[int] = CUTOFFS, partition: str = "test",
                 threads: int = 1, paths=None, split: Optional[DataSplit] = None) -> EvalReport:
    """Full train + evaluate cycle under one variant"""
    variant = Variant(variant)
    if split is None:
        split = split_dataset(store, split_spec or SplitSpec(seed=config.seed), planted)
    trainer = trainer_for_variant(split.train_store, config, variant, paths)
    train_variant(trainer, variant)
    report = evaluate_groups(trainer.group_model, split.instances(partition), cutoffs,
                             variant=variant.value, threads=threads)
    report.config = {"train": config.model_dump(mode="json"), "variant": variant.value}
    return report
