"""
DREAGR - Data Input/Output

Dataset directories, synthetic planted-signal datasets, checkpoints and metric
files.

Dataset directory grammar (UTF-8, tab-separated, `#` lines and blank lines skipped):
- user_item.tsv      user_id <TAB> item_id
- item_item.tsv      src_item <TAB> dst_item   (dependency src -> dst)
- groups.tsv         group_id <TAB> user_id
- group_item.tsv     group_id <TAB> item_id    (optional, explicit Y^GV)
- aux_<a>_<b>.tsv    a_id <TAB> b_id           (optional, e.g. aux_user_video.tsv)
- holdout.tsv        group_id <TAB> item_id <TAB> val|test   (optional, planted split)

Checkpoint container:
    b"DRGR" | version (1 byte) | header length (uint32 LE) | JSON header | float64 LE payload
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import CheckpointError, ConfigError, DataError, DatasetFormatError
from evaluation import EvalReport
from hin_graph import (
    InteractionStore,
    Record,
    RelationKey,
    active_paths,
    attach_path_incidence,
    build_aux_relations,
    build_store,
    interaction_statistics,
    item_histograms,
)
from training import LossRecord, TrainConfig, Trainer, TrainState

CHECKPOINT_MAGIC = b"DRGR"
CHECKPOINT_VERSION = 1
CSV_HEADER = ("variant", "metric", "N", "value")
LOSS_HEADER = ("stage", "epoch", "loss", "wall_time")

USER_ITEM_FILE = "user_item.tsv"
ITEM_ITEM_FILE = "item_item.tsv"
GROUPS_FILE = "groups.tsv"
GROUP_ITEM_FILE = "group_item.tsv"
HOLDOUT_FILE = "holdout.tsv"

logger = logging.getLogger("DatasetLoader")


class SignalMode(Enum):
    EXPLICIT = "explicit"
    IMPLICIT = "implicit"
    MIXED = "mixed"


@dataclass
class DatasetBundle:
    """Raw records of one dataset and the interaction store built from them"""
    user_item: List[Record]
    item_item: List[Record]
    groups: List[Record]
    group_item: Optional[List[Record]] = None
    aux: Dict[RelationKey, List[Record]] = field(default_factory=dict)
    holdout: List[Tuple[str, str, str]] = field(default_factory=list)
    store: Optional[InteractionStore] = None

    def build(self, depth: int = 1, path_labels: Optional[Sequence[str]] = None) -> InteractionStore:
        store = build_store(self.user_item, self.item_item, self.groups, self.group_item, depth=depth)
        relations, _ = build_aux_relations(store, self.aux)
        store = attach_path_incidence(store, active_paths(relations, path_labels), relations)
        self.store = store
        return store

    def planted_holdout(self) -> Optional[List[Tuple[int, int, str]]]:
        """Holdout records in dense ids, or None without a holdout file"""
        if not self.holdout:
            return None
        if self.store is None:
            raise DataError("bundle has no store; call build() first")
        groups = {gid: i for i, gid in enumerate(self.store.group_ids)}
        items = {iid: i for i, iid in enumerate(self.store.item_ids)}
        resolved = []
        for idx, (g, v, partition) in enumerate(self.holdout):
            if g not in groups or v not in items:
                raise DataError(f"{HOLDOUT_FILE} record #{idx}: unknown group '{g}' or item '{v}'")
            resolved.append((groups[g], items[v], partition))
        return resolved

    def remap_tables(self) -> Dict[str, pd.DataFrame]:
        store = self.store
        return {
            "users": pd.DataFrame({"dense_id": range(store.n_users), "raw_id": store.user_ids}),
            "items": pd.DataFrame({"dense_id": range(store.n_items), "raw_id": store.item_ids}),
            "groups": pd.DataFrame({"dense_id": range(store.n_groups), "raw_id": store.group_ids}),
        }


def _read_tsv(path: Path, n_fields: int) -> List[Tuple[str, ...]]:
    records = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            text = line.rstrip("\r\n")
            if not text.strip() or text.lstrip().startswith("#"):
                continue
            fields = text.split("\t")
            if len(fields) != n_fields or any(not f.strip() for f in fields):
                raise DatasetFormatError(
                    f"{path.name}:{lineno}: expected {n_fields} non-empty tab-separated fields, got {text!r}"
                )
            records.append(tuple(f.strip() for f in fields))
    return records


def load_dataset(directory: Union[str, Path], depth: int = 1,
                 path_labels: Optional[Sequence[str]] = None) -> DatasetBundle:
    """Read a dataset directory and build its interaction store"""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory not found: {directory}")
    for required in (USER_ITEM_FILE, ITEM_ITEM_FILE, GROUPS_FILE):
        if not (directory / required).exists():
            raise DataError(f"{directory}: missing {required}")

    aux = {}
    for path in sorted(directory.glob("aux_*.tsv")):
        parts = path.stem.split("_")
        if len(parts) != 3:
            raise DatasetFormatError(f"{path.name}: auxiliary files are named aux_<type>_<type>.tsv")
        aux[(parts[1], parts[2])] = _read_tsv(path, 2)

    group_item_path = directory / GROUP_ITEM_FILE
    holdout_path = directory / HOLDOUT_FILE
    bundle = DatasetBundle(
        user_item=_read_tsv(directory / USER_ITEM_FILE, 2),
        item_item=_read_tsv(directory / ITEM_ITEM_FILE, 2),
        groups=_read_tsv(directory / GROUPS_FILE, 2),
        group_item=_read_tsv(group_item_path, 2) if group_item_path.exists() else None,
        aux=aux,
        holdout=_read_tsv(holdout_path, 3) if holdout_path.exists() else [],
    )
    store = bundle.build(depth, path_labels)
    stats = interaction_statistics(store)
    logger.info(
        f"Loaded {directory}: {stats['users']} users, {stats['items']} items, {stats['groups']} groups, "
        f"{stats['vv_dependencies']} V-V, {stats['uv_interactions']} U-V, {stats['uvv_interactions']} U-V-V, "
        f"{stats['gv_interactions']} G-V, {stats['gvv_interactions']} G-V-V, "
        f"avg items/group {stats['avg_items_per_group']:.2f}"
    )
    return bundle


def _write_tsv(path: Path, header: str, records: Sequence[Tuple[str, ...]]):
    lines = [f"# {header}"] + ["\t".join(r) for r in sorted(set(tuple(r) for r in records))]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_dataset(bundle: DatasetBundle, directory: Union[str, Path]) -> Path:
    """Write the bundle in the directory grammar; records sorted and de-duplicated"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_tsv(directory / USER_ITEM_FILE, "user_id\titem_id", bundle.user_item)
    _write_tsv(directory / ITEM_ITEM_FILE, "src_item\tdst_item", bundle.item_item)
    _write_tsv(directory / GROUPS_FILE, "group_id\tuser_id", bundle.groups)
    if bundle.group_item is not None:
        _write_tsv(directory / GROUP_ITEM_FILE, "group_id\titem_id", bundle.group_item)
    for (a, b), records in sorted(bundle.aux.items()):
        _write_tsv(directory / f"aux_{a}_{b}.tsv", f"{a}_id\t{b}_id", records)
    if bundle.holdout:
        _write_tsv(directory / HOLDOUT_FILE, "group_id\titem_id\tpartition", bundle.holdout)
    return directory


def save_prepared(bundle: DatasetBundle, out_dir: Union[str, Path], config_echo: Optional[Dict] = None) -> Dict:
    """Persist a built bundle with its statistics, histograms and remap tables"""
    out_dir = Path(out_dir)
    save_dataset(bundle, out_dir / "dataset")
    stats = interaction_statistics(bundle.store)
    stats["paths"] = [spec.label for spec in bundle.store.path_specs]
    document = {"statistics": stats, "config": config_echo or {"depth": bundle.store.depth}}
    (out_dir / "stats.json").write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    item_histograms(bundle.store).to_csv(out_dir / "item_histogram.csv", index=False)
    for name, table in bundle.remap_tables().items():
        table.to_csv(out_dir / f"{name}.tsv", sep="\t", index=False)
    logger.info(f"Prepared store written to {out_dir}")
    return stats


def load_prepared(out_dir: Union[str, Path], depth: Optional[int] = None,
                  path_labels: Optional[Sequence[str]] = None) -> DatasetBundle:
    """Reload a prepared store; `depth` and `path_labels` default to the prepared ones"""
    out_dir = Path(out_dir)
    stats_path = out_dir / "stats.json"
    if not stats_path.exists():
        raise DataError(f"{out_dir}: not a prepared store (stats.json missing)")
    stats = json.loads(stats_path.read_text(encoding="utf-8"))["statistics"]
    return load_dataset(
        out_dir / "dataset",
        depth=int(stats["depth"]) if depth is None else depth,
        path_labels=stats.get("paths") if path_labels is None else path_labels,
    )


def is_prepared(directory: Union[str, Path]) -> bool:
    return (Path(directory) / "stats.json").exists()


# ---------------------------------------------------------------- synthetic


class SyntheticSpec(BaseModel):
    """Planted-signal dataset: held-out items are reachable only through `mode`"""
    model_config = ConfigDict(extra="forbid")

    n_users: int = Field(200, ge=1)
    n_items: int = Field(60, ge=2)
    n_groups: int = Field(40, ge=1)
    min_group_size: int = Field(2, ge=1)
    max_group_size: int = Field(6, ge=1)
    chain_length: int = Field(3, ge=2)
    chains_per_group: int = Field(3, ge=1)
    mode: SignalMode = SignalMode.IMPLICIT
    noise: float = Field(0.05, ge=0, le=1)
    member_rate: float = Field(0.8, gt=0, le=1)
    background_per_item: int = Field(2, ge=1)
    explicit_holdouts_per_chain: int = Field(2, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _group_sizes(self):
        if self.min_group_size > self.max_group_size:
            raise ValueError(f"min_group_size {self.min_group_size} exceeds max_group_size {self.max_group_size}")
        return self


def generate_synthetic(spec: SyntheticSpec) -> DatasetBundle:
    """
    Dependency chains c_0 -> c_1 -> ... -> tail, one set of chains per group.

    Members interact with the non-tail items of their group's chains and with
    the tails; the tails form the planted holdout (each group's first planted
    chain to validation, the others to test). Implicit chains carry Y^VV edges and their tails never
    co-occur with the predecessors in any user row; explicit chains carry no
    edges; background users hold the whole chain and so do the members of
    every group past the first `explicit_holdouts_per_chain` pickers, whose
    tails stay training positives.
    """
    if spec.chain_length > spec.n_items:
        raise ConfigError(f"infeasible synthetic spec: chain length {spec.chain_length} exceeds {spec.n_items} items")
    rng = np.random.default_rng(spec.seed)
    L = spec.chain_length
    n_chains = max(1, spec.n_items // (2 * L))
    per_group = min(spec.chains_per_group, n_chains)

    sizes = rng.integers(spec.min_group_size, spec.max_group_size + 1, size=spec.n_groups)
    if sizes.sum() > spec.n_users:
        raise ConfigError(
            f"infeasible synthetic spec: groups need {int(sizes.sum())} distinct members, only {spec.n_users} users"
        )

    user = [f"u{i:05d}" for i in range(spec.n_users)]
    item = [f"i{i:05d}" for i in range(spec.n_items)]
    group = [f"g{i:05d}" for i in range(spec.n_groups)]

    order = rng.permutation(spec.n_items)
    chains = [order[c * L:(c + 1) * L] for c in range(n_chains)]
    free = order[n_chains * L:]
    implicit = []
    for c in range(n_chains):
        if spec.mode == SignalMode.IMPLICIT:
            implicit.append(True)
        elif spec.mode == SignalMode.EXPLICIT:
            implicit.append(False)
        else:
            implicit.append(c % 2 == 0)

    users = rng.permutation(spec.n_users)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    background = users[offsets[-1]:]
    half = max(1, len(background) // 2)
    head_pool, tail_pool = background[:half], background[half:]
    if len(tail_pool) == 0:
        tail_pool = head_pool

    user_item: set = set()
    groups: List[Record] = []
    holdout: List[Tuple[str, str, str]] = []
    planted_per_chain = np.zeros(n_chains, dtype=int)
    for g in range(spec.n_groups):
        members = np.sort(users[offsets[g]:offsets[g + 1]])
        groups.extend((group[g], user[u]) for u in members)
        picked = rng.choice(n_chains, size=per_group, replace=False)
        planted = 0
        for c in picked:
            chain = chains[c]
            for v in chain[:-1]:
                chosen = members[rng.random(len(members)) < spec.member_rate]
                if chosen.size == 0:
                    chosen = members[[rng.integers(len(members))]]
                user_item.update((user[u], item[v]) for u in chosen)
            user_item.update((user[u], item[chain[-1]]) for u in members)
            if not implicit[c] and planted_per_chain[c] >= spec.explicit_holdouts_per_chain:
                continue
            planted_per_chain[c] += 1
            holdout.append((group[g], item[chain[-1]], "val" if planted == 0 else "test"))
            planted += 1
        if spec.noise and free.size:
            for u in members:
                noisy = free[rng.random(free.size) < spec.noise]
                user_item.update((user[u], item[v]) for v in noisy)

    def assign(pool: np.ndarray, v: int):
        if pool.size == 0:
            return
        take = min(spec.background_per_item, pool.size)
        return pool[rng.choice(pool.size, size=take, replace=False)]

    item_item: List[Record] = []
    for c, chain in enumerate(chains):
        if implicit[c]:
            item_item.extend((item[a], item[b]) for a, b in zip(chain[:-1], chain[1:]))
            for v in chain[:-1]:
                holders = assign(head_pool, v)
                if holders is not None:
                    user_item.update((user[u], item[v]) for u in holders)
            holders = assign(tail_pool, chain[-1])
            if holders is not None:
                user_item.update((user[u], item[chain[-1]]) for u in holders)
        else:
            holders = assign(head_pool, chain[0])
            if holders is not None:
                user_item.update((user[u], item[v]) for u in holders for v in chain)
    for v in free:
        holders = assign(background if background.size else users, v)
        user_item.update((user[u], item[v]) for u in holders)

    if spec.mode == SignalMode.EXPLICIT and free.size > 1:
        n_edges = n_chains * (L - 1)
        edges = set()
        for _ in range(n_edges):
            a, b = rng.choice(free, size=2, replace=False)
            edges.add((item[a], item[b]))
        item_item.extend(sorted(edges))

    # chains no group picked may have unheld items; their edges would dangle
    held = {v for _, v in user_item}
    item_item = [(a, b) for a, b in item_item if a in held and b in held]

    bundle = DatasetBundle(
        user_item=sorted(user_item),
        item_item=sorted(set(item_item)),
        groups=sorted(groups),
        holdout=sorted(holdout),
    )
    bundle.build()
    logger.info(
        f"Synthetic {spec.mode.value} bundle: {len(bundle.user_item)} U-V records, "
        f"{len(bundle.item_item)} dependencies, {len(holdout)} planted holdouts"
    )
    return bundle


def micro_bundle() -> DatasetBundle:
    """3 users, 4 items, 2 groups; one meta-path and one dependency meta-path active"""
    bundle = DatasetBundle(
        user_item=[("u0", "i0"), ("u0", "i1"), ("u1", "i1"), ("u1", "i2"), ("u2", "i2"), ("u2", "i3"), ("u0", "i3")],
        item_item=[("i0", "i2"), ("i1", "i3"), ("i2", "i3")],
        groups=[("g0", "u0"), ("g0", "u1"), ("g1", "u1"), ("g1", "u2")],
    )
    bundle.build()
    return bundle


# -------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    version: int
    header: Dict
    tensors: Dict[str, np.ndarray]

    @property
    def stage(self) -> int:
        return int(self.header["stage"])

    @property
    def run_config(self) -> Dict:
        return self.header.get("run_config", {})


def _checkpoint_tensors(state: TrainState) -> Dict[str, np.ndarray]:
    tensors = {}
    for name, p in sorted(state.named_parameters().items()):
        tensors[name] = p.value
        tensors[f"{name}#adam_m"] = p.adam_m
        tensors[f"{name}#adam_v"] = p.adam_v
    return tensors


def checkpoint_bytes(state: TrainState, run_config: Optional[Dict] = None,
                     variant: str = "full") -> bytes:
    tensors = _checkpoint_tensors(state)
    directory, chunks, offset = [], [], 0
    for name, value in tensors.items():
        data = np.ascontiguousarray(value, dtype="<f8").tobytes()
        directory.append({"name": name, "shape": list(value.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {
        "format": "dreagr-checkpoint",
        "stage": state.stage,
        "variant": variant,
        "train_config": state.config.model_dump(mode="json"),
        "run_config": run_config or {},
        "history": state.history,
        "steps": state.steps,
        "rng": {"seed": state.config.seed, "streams": ["init", "stage1", "stage2"]},
        "tensors": directory,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CHECKPOINT_MAGIC + bytes([CHECKPOINT_VERSION]) + struct.pack("<I", len(header_bytes)) + header_bytes + payload


def save_checkpoint(state: TrainState, path: Union[str, Path], run_config: Optional[Dict] = None,
                    variant: str = "full", mirror: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(state, run_config, variant))
    if mirror:
        checkpoint = load_checkpoint(path)
        document = dict(checkpoint.header)
        document["values"] = {name: value.tolist() for name, value in checkpoint.tensors.items()}
        path.with_suffix(".json").write_text(json.dumps(document, indent=1, sort_keys=True), encoding="utf-8")
    logger.info(f"Checkpoint (stage {state.stage}) written to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if len(blob) < 9 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = blob[4]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (header_len,) = struct.unpack("<I", blob[5:9])
    try:
        header = json.loads(blob[9:9 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    payload = blob[9 + header_len:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    tensors = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor '{entry['name']}' runs past the payload")
        data = np.frombuffer(payload[start:start + nbytes], dtype="<f8").astype(np.float64)
        tensors[entry["name"]] = data.reshape(entry["shape"])
    return Checkpoint(version=version, header=header, tensors=tensors)


def restore_state(checkpoint: Checkpoint, trainer: Trainer) -> TrainState:
    """Copy checkpointed tensors and progress into a freshly built trainer"""
    state = trainer.state
    for name, p in state.named_parameters().items():
        for suffix, target in (("", p.value), ("#adam_m", p.adam_m), ("#adam_v", p.adam_v)):
            key = name + suffix
            if key not in checkpoint.tensors:
                raise CheckpointError(f"checkpoint lacks tensor '{key}'")
            value = checkpoint.tensors[key]
            if value.shape != target.shape:
                raise CheckpointError(f"tensor '{key}' has shape {value.shape}, model expects {target.shape}")
            target[...] = value
    state.stage = checkpoint.stage
    state.history = {k: list(v) for k, v in checkpoint.header["history"].items()}
    state.steps = {k: int(v) for k, v in checkpoint.header["steps"].items()}
    return state


def train_config_of(checkpoint: Checkpoint) -> TrainConfig:
    return TrainConfig(**checkpoint.header["train_config"])


# ------------------------------------------------------------------ metrics


def write_metrics(obj, path: Union[str, Path], fmt: str = "json") -> Path:
    """
    Write an EvalReport, a list of reports or a loss stream (list of LossRecord).

    CSV numbers use 6 significant digits; JSON keeps full precision so a
    report read back compares equal.
    """
    path = Path(path)
    if fmt not in ("json", "csv"):
        raise ConfigError(f"unknown metrics format '{fmt}'")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        items = obj if isinstance(obj, list) else [obj]
        is_loss = not items or isinstance(items[0], LossRecord)
        if fmt == "csv":
            if is_loss:
                frame = pd.DataFrame([(r.stage, r.epoch, r.loss, r.wall_time) for r in items], columns=list(LOSS_HEADER))
            else:
                frame = pd.DataFrame([row for report in items for row in report.rows()], columns=list(CSV_HEADER))
            frame.to_csv(path, index=False, float_format="%.6g", lineterminator="\n")
        else:
            if is_loss:
                document = [{"stage": r.stage, "epoch": r.epoch, "loss": r.loss, "wall_time": r.wall_time} for r in items]
            else:
                document = [report_to_dict(report) for report in items]
                document = document[0] if not isinstance(obj, list) else document
            path.write_text(json.dumps(document, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write metrics to {path}: {exc}") from exc
    return path


def report_to_dict(report: EvalReport) -> Dict:
    return {
        "variant": report.variant,
        "instances": report.n_instances,
        "HR": {str(n): report.hr[n] for n in sorted(report.hr)},
        "NDCG": {str(n): report.ndcg[n] for n in sorted(report.ndcg)},
        "ranks": [int(r) for r in report.ranks],
        "config": report.config,
    }


def read_report(path: Union[str, Path]) -> EvalReport:
    document = json.loads(Path(path).read_text(encoding="utf-8"))
    return EvalReport(
        variant=document["variant"],
        hr={int(n): v for n, v in document["HR"].items()},
        ndcg={int(n): v for n, v in document["NDCG"].items()},
        n_instances=document["instances"],
        ranks=np.asarray(document["ranks"], dtype=np.int64),
        config=document["config"],
    )
