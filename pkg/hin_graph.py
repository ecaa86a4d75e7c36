"""
DREAGR - Heterogeneous Information Network

Models users, items, groups and the auxiliary entity types (videos, courses)
as a heterogeneous information network and turns the raw records into the
binary interaction matrices the preference model consumes.

This module implements:
- Network schema with entity/relation type mappings
- Meta-paths and dependency meta-paths as declarative PathSpec objects
- InteractionStore construction (Y^UV, Y^GV, Y^VV) with dense id spaces
- Multi-hop derivation (Y^UVV, Y^GVV) through the dependency closure
- Per-path user-item incidence enumeration
- Merged training targets and the interaction statistics of a dataset
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp

from errors import DanglingReferenceError, DataError, PathSpecError, SchemaError

USER = "user"
ITEM = "item"
GROUP = "group"

Record = Tuple[str, str]
RelationKey = Tuple[str, str]

logger = logging.getLogger("InteractionStore")


class PathKind(Enum):
    """Kinds of user-to-user connection paths"""
    META_PATH = "meta_path"
    DEPENDENCY_META_PATH = "dependency_meta_path"


@dataclass(frozen=True)
class PathSpec:
    """
    Typed path T_1 -> ... -> T_{l+1} over the network schema.

    For dependency meta-paths `dependency_position` is the index k such that
    the dependency step runs from type_sequence[k] to type_sequence[k + 1].
    """
    label: str
    kind: PathKind
    type_sequence: Tuple[str, ...]
    dependency_position: Optional[int] = None

    def __post_init__(self):
        seq = self.type_sequence
        if len(seq) < 3:
            raise PathSpecError(f"{self.label}: a path needs at least three entity types")
        if seq[0] != USER or seq[-1] != USER:
            raise PathSpecError(f"{self.label}: paths must start and end at the '{USER}' type")

        if self.kind == PathKind.DEPENDENCY_META_PATH:
            pos = self.dependency_position
            if pos is None or not 0 < pos < len(seq) - 2:
                raise PathSpecError(f"{self.label}: dependency position {pos} is outside the path")
            if seq[pos] != ITEM or seq[pos + 1] != ITEM:
                raise PathSpecError(f"{self.label}: the dependency step must join two '{ITEM}' positions")
            if seq.count(ITEM) != 2:
                raise PathSpecError(f"{self.label}: a dependency meta-path has exactly two item positions")
        else:
            if self.dependency_position is not None:
                raise PathSpecError(f"{self.label}: meta-paths carry no dependency position")
            if seq.count(ITEM) != 1:
                raise PathSpecError(f"{self.label}: a meta-path has exactly one central item")

    @property
    def is_dependency(self) -> bool:
        return self.kind == PathKind.DEPENDENCY_META_PATH

    @property
    def source_position(self) -> int:
        """Index of the item the walk from the user arrives at"""
        if self.is_dependency:
            return self.dependency_position
        return self.type_sequence.index(ITEM)

    @property
    def target_position(self) -> int:
        """Index of the item the walk continues from towards the other user"""
        if self.is_dependency:
            return self.dependency_position + 1
        return self.source_position

    @property
    def intermediate_types(self) -> Set[str]:
        return set(self.type_sequence) - {USER, ITEM}


def standard_paths() -> Dict[str, PathSpec]:
    """The three meta-paths and three dependency meta-paths of the MOOC network"""
    meta, dep = PathKind.META_PATH, PathKind.DEPENDENCY_META_PATH
    specs = [
        PathSpec("P1", meta, (USER, ITEM, USER)),
        PathSpec("P2", meta, (USER, "video", ITEM, "video", USER)),
        PathSpec("P3", meta, (USER, "course", ITEM, "course", USER)),
        PathSpec("PP1", dep, (USER, ITEM, ITEM, USER), 1),
        PathSpec("PP2", dep, (USER, "video", ITEM, ITEM, "video", USER), 2),
        PathSpec("PP3", dep, (USER, "course", ITEM, ITEM, "course", USER), 2),
    ]
    return {spec.label: spec for spec in specs}


def active_paths(aux_relations: Optional[Mapping[RelationKey, sp.csr_matrix]] = None,
                 labels: Optional[Sequence[str]] = None) -> List[PathSpec]:
    """Standard paths whose intermediate entity types are all available"""
    available = set()
    for a, b in (aux_relations or {}):
        available.update((a, b))
    paths = standard_paths()
    if labels is not None:
        unknown = [label for label in labels if label not in paths]
        if unknown:
            raise PathSpecError(f"unknown path labels: {', '.join(unknown)}")
        chosen = [paths[label] for label in labels]
    else:
        chosen = list(paths.values())
    return [spec for spec in chosen if spec.intermediate_types <= available]


@dataclass
class NetworkSchema:
    """Meta template of the HIN: entity/relation types and the phi/psi mappings"""
    entity_types: Set[str]
    relation_types: Set[str]
    entity_map: Dict[str, str]
    relation_map: Dict[RelationKey, str]

    def validate(self):
        if len(self.entity_types) + len(self.relation_types) <= 2:
            raise SchemaError(
                f"not a heterogeneous network: {len(self.entity_types)} entity types "
                f"and {len(self.relation_types)} relation types"
            )
        unknown = set(self.entity_map.values()) - self.entity_types
        if unknown:
            raise SchemaError(f"nodes mapped to undeclared entity types: {sorted(unknown)}")
        for (a, b), relation in self.relation_map.items():
            if relation not in self.relation_types:
                raise SchemaError(f"edge type {a}->{b} maps to undeclared relation '{relation}'")

    def entity_type(self, node: str) -> str:
        return self.entity_map[node]

    def relation_of(self, src: str, dst: str) -> str:
        """psi for a concrete edge, resolved through the endpoint types"""
        key = (self.entity_map[src], self.entity_map[dst])
        if key in self.relation_map:
            return self.relation_map[key]
        return self.relation_map[(key[1], key[0])]


@dataclass
class GroupTable:
    """Group id -> members, members sorted by dense user id and de-duplicated"""
    groups: Dict[int, List[int]]

    def validate(self, n_users: int):
        for g, members in self.groups.items():
            if not members:
                raise DataError(f"group {g} has no members")
            bad = [u for u in members if not 0 <= u < n_users]
            if bad:
                raise DanglingReferenceError(f"group {g} references unknown users {bad}")

    def members(self, g: int) -> List[int]:
        return self.groups[g]

    def size(self, g: int) -> int:
        return len(self.groups[g])

    def membership_matrix(self, n_users: int) -> sp.csr_matrix:
        rows, cols = [], []
        for g, members in self.groups.items():
            rows.extend([g] * len(members))
            cols.extend(members)
        data = np.ones(len(rows), dtype=np.int8)
        return sp.csr_matrix((data, (rows, cols)), shape=(len(self.groups), n_users))

    def __len__(self) -> int:
        return len(self.groups)


@dataclass
class InteractionStore:
    """
    Binary interaction matrices over dense id spaces.

    Immutable by convention after construction: every operation that changes
    interactions returns a new store via dataclasses.replace.
    """
    n_users: int
    n_items: int
    n_groups: int
    y_uv: sp.csr_matrix
    y_gv: sp.csr_matrix
    y_vv: sp.csr_matrix
    y_uvv: sp.csr_matrix
    y_gvv: sp.csr_matrix
    groups: GroupTable
    user_ids: List[str]
    item_ids: List[str]
    group_ids: List[str]
    depth: int = 1
    group_items_explicit: bool = False
    path_specs: Tuple[PathSpec, ...] = ()
    per_path_incidence: Dict[str, Dict] = field(default_factory=dict)
    aux_relations: Dict[RelationKey, sp.csr_matrix] = field(default_factory=dict)

    def dependency_closure(self, depth: Optional[int] = None) -> sp.csr_matrix:
        return dependency_closure(self.y_vv, self.depth if depth is None else depth)

    def user_items(self, u: int) -> np.ndarray:
        return _row(self.y_uv, u)

    def group_items(self, g: int) -> np.ndarray:
        return _row(self.y_gv, g)


@dataclass
class MergedTargets:
    """Merged targets: explicit OR multi-hop, rows with zero sum flagged"""
    users: sp.csr_matrix
    groups: sp.csr_matrix
    empty_users: np.ndarray
    empty_groups: np.ndarray

    @property
    def trainable_users(self) -> np.ndarray:
        return np.flatnonzero(~self.empty_users)

    @property
    def trainable_groups(self) -> np.ndarray:
        return np.flatnonzero(~self.empty_groups)


def binarize(matrix) -> sp.csr_matrix:
    """Sparse int8 matrix with every stored nonzero set to 1"""
    out = sp.csr_matrix(matrix, copy=True)
    out.data = (out.data != 0).astype(np.int8)
    out = out.astype(np.int8)
    out.eliminate_zeros()
    out.sort_indices()
    return out


def boolean_product(a: sp.spmatrix, b: sp.spmatrix) -> sp.csr_matrix:
    # int32 operands: an int8 product would wrap around on dense rows
    return binarize(sp.csr_matrix(a, dtype=np.int32) @ sp.csr_matrix(b, dtype=np.int32))


def _row(matrix: sp.csr_matrix, i: int) -> np.ndarray:
    return matrix.indices[matrix.indptr[i]:matrix.indptr[i + 1]].copy()


def _empty(rows: int, cols: int) -> sp.csr_matrix:
    return sp.csr_matrix((rows, cols), dtype=np.int8)


def _sorted_ids(values) -> List[str]:
    return sorted(set(str(v) for v in values))


def _codes(frame: pd.DataFrame, column: str, ids: List[str], what: str) -> np.ndarray:
    codes = pd.Categorical(frame[column], categories=ids).codes.astype(np.int64)
    missing = np.flatnonzero(codes < 0)
    if missing.size:
        idx = int(missing[0])
        raise DanglingReferenceError(
            f"{what} record #{idx}: unknown {column} '{frame[column].iloc[idx]}'"
        )
    return codes


def _frame(records: Sequence[Record], columns: Tuple[str, str]) -> pd.DataFrame:
    frame = pd.DataFrame(list(records), columns=list(columns))
    return frame.astype(str)


def dependency_closure(y_vv: sp.csr_matrix, depth: int = 1) -> sp.csr_matrix:
    """Items reachable along 1..depth dependency steps, self-reachability removed"""
    if depth < 1:
        raise ValueError(f"dependency depth must be >= 1, got {depth}")
    reach = binarize(y_vv)
    power = reach
    for _ in range(depth - 1):
        power = boolean_product(power, y_vv)
        reach = binarize(reach + power)
    reach = reach.tolil()
    reach.setdiag(0)
    return binarize(reach.tocsr())


def build_store(user_item_records: Sequence[Record],
                item_item_records: Sequence[Record],
                group_records: Sequence[Record],
                group_item_records: Optional[Sequence[Record]] = None,
                depth: int = 1) -> InteractionStore:
    """
    Assign dense ids and populate Y^UV, Y^VV, Y^GV and the multi-hop matrices.

    Dense ids follow the sorted raw identifiers, so the result does not depend
    on record order. Duplicated records collapse and Y^VV self-loops are dropped.
    """
    ui = _frame(user_item_records, (USER, ITEM))
    if ui.empty:
        raise DataError("no user-item records: the user set is empty")
    user_ids = _sorted_ids(ui[USER])
    item_ids = _sorted_ids(ui[ITEM])
    n_users, n_items = len(user_ids), len(item_ids)

    y_uv = binarize(sp.csr_matrix(
        (np.ones(len(ui)), (_codes(ui, USER, user_ids, "user_item"), _codes(ui, ITEM, item_ids, "user_item"))),
        shape=(n_users, n_items),
    ))

    vv = _frame(item_item_records, ("src", "dst"))
    src = pd.Categorical(vv["src"], categories=item_ids).codes.astype(np.int64)
    dst = pd.Categorical(vv["dst"], categories=item_ids).codes.astype(np.int64)
    bad = np.flatnonzero((src < 0) | (dst < 0))
    if bad.size:
        idx = int(bad[0])
        raise DanglingReferenceError(
            f"item_item record #{idx}: unknown item in dependency "
            f"'{vv['src'].iloc[idx]}' -> '{vv['dst'].iloc[idx]}'"
        )
    keep = src != dst
    dropped = int((~keep).sum())
    if dropped:
        logger.warning(f"Dropped {dropped} dependency self-loops")
    y_vv = binarize(sp.csr_matrix((np.ones(int(keep.sum())), (src[keep], dst[keep])), shape=(n_items, n_items)))

    gu = _frame(group_records, (GROUP, USER))
    group_ids = _sorted_ids(gu[GROUP])
    members: Dict[int, List[int]] = {g: [] for g in range(len(group_ids))}
    if not gu.empty:
        g_codes = pd.Categorical(gu[GROUP], categories=group_ids).codes
        u_codes = _codes(gu, USER, user_ids, "group")
        for g, u in zip(g_codes, u_codes):
            members[int(g)].append(int(u))
    groups = GroupTable({g: sorted(set(m)) for g, m in members.items()})
    groups.validate(n_users)

    if group_item_records is not None:
        gv = _frame(group_item_records, (GROUP, ITEM))
        y_gv = binarize(sp.csr_matrix(
            (np.ones(len(gv)), (_codes(gv, GROUP, group_ids, "group_item"), _codes(gv, ITEM, item_ids, "group_item"))),
            shape=(len(group_ids), n_items),
        ))
    else:
        y_gv = boolean_product(groups.membership_matrix(n_users), y_uv)

    store = InteractionStore(
        n_users=n_users,
        n_items=n_items,
        n_groups=len(group_ids),
        y_uv=y_uv,
        y_gv=y_gv,
        y_vv=y_vv,
        y_uvv=_empty(n_users, n_items),
        y_gvv=_empty(len(group_ids), n_items),
        groups=groups,
        user_ids=user_ids,
        item_ids=item_ids,
        group_ids=group_ids,
        group_items_explicit=group_item_records is not None,
    )
    store = derive_multi_hop(store, depth)
    store = attach_path_incidence(store, active_paths())
    logger.info(
        f"Store built: {n_users} users, {n_items} items, {store.n_groups} groups, "
        f"{y_uv.nnz} U-V, {y_vv.nnz} V-V, {y_gv.nnz} G-V interactions"
    )
    return store


def derive_multi_hop(store: InteractionStore, depth: int = 1) -> InteractionStore:
    """Y^UVV and Y^GVV as boolean products with the depth-step dependency closure"""
    closure = dependency_closure(store.y_vv, depth)
    y_uvv = boolean_product(store.y_uv, closure)
    y_gvv = boolean_product(store.y_gv, closure)
    updated = replace(store, y_uvv=y_uvv, y_gvv=y_gvv, depth=depth)
    if store.path_specs:
        updated = attach_path_incidence(updated, store.path_specs, store.aux_relations)
    return updated


def _relation(store: InteractionStore, aux: Mapping[RelationKey, sp.csr_matrix],
              a: str, b: str, label: str) -> sp.csr_matrix:
    if (a, b) == (USER, ITEM):
        return store.y_uv
    if (a, b) == (ITEM, USER):
        return store.y_uv.T.tocsr()
    if (a, b) in aux:
        return aux[(a, b)]
    if (b, a) in aux:
        return aux[(b, a)].T.tocsr()
    raise PathSpecError(f"{label}: no relation between '{a}' and '{b}' in the auxiliary relations")


def _walk(store: InteractionStore, aux: Mapping[RelationKey, sp.csr_matrix],
          types: Sequence[str], label: str) -> sp.csr_matrix:
    reach = _relation(store, aux, types[0], types[1], label)
    for a, b in zip(types[1:-1], types[2:]):
        reach = boolean_product(reach, _relation(store, aux, a, b, label))
    return binarize(reach)


def enumerate_path_incidence(store: InteractionStore, spec: PathSpec,
                             aux_relations: Optional[Mapping[RelationKey, sp.csr_matrix]] = None) -> Dict:
    """
    User-item incidence along a path spec.

    Meta-paths map every user id to the set of central items reachable from it
    on a walk that completes back to some user. Dependency meta-paths map each
    (user, source item i) to the set of items j with a dependency i -> j that
    complete the walk.
    """
    aux = dict(aux_relations if aux_relations is not None else store.aux_relations)
    present = {USER, ITEM}
    for a, b in aux:
        present.update((a, b))
    missing = spec.intermediate_types - present
    if missing:
        raise PathSpecError(f"{spec.label}: entity types {sorted(missing)} absent from the auxiliary relations")

    seq = spec.type_sequence
    prefix = _walk(store, aux, seq[:spec.source_position + 1], spec.label)
    suffix = _walk(store, aux, seq[spec.target_position:], spec.label)
    completes = np.asarray(suffix.getnnz(axis=1) > 0)

    if not spec.is_dependency:
        incidence: Dict[int, Set[int]] = {}
        for u in range(store.n_users):
            items = _row(prefix, u)
            incidence[u] = {int(j) for j in items if completes[j]}
        return incidence

    closure = store.dependency_closure()
    pairs: Dict[Tuple[int, int], Set[int]] = {}
    for u in range(store.n_users):
        for i in _row(prefix, u):
            pairs[(u, int(i))] = {int(j) for j in _row(closure, i) if completes[j]}
    return pairs


def attach_path_incidence(store: InteractionStore, specs: Sequence[PathSpec],
                          aux_relations: Optional[Mapping[RelationKey, sp.csr_matrix]] = None) -> InteractionStore:
    aux = dict(aux_relations if aux_relations is not None else store.aux_relations)
    incidence = {spec.label: enumerate_path_incidence(store, spec, aux) for spec in specs}
    return replace(store, path_specs=tuple(specs), per_path_incidence=incidence, aux_relations=aux)


def build_aux_relations(store: InteractionStore,
                        aux_records: Mapping[RelationKey, Sequence[Record]]
                        ) -> Tuple[Dict[RelationKey, sp.csr_matrix], Dict[str, List[str]]]:
    """
    Sparse matrices for auxiliary bipartite relations (user-video, video-item, ...).

    Users and items resolve against the store; every other entity type gets its
    own dense id space from the sorted raw ids across all relations it appears in.
    """
    known = {USER: store.user_ids, ITEM: store.item_ids}
    raw: Dict[str, set] = {}
    frames = {}
    for (a, b), records in aux_records.items():
        frame = _frame(records, (a, b) if a != b else (a, f"{b}_dst"))
        frames[(a, b)] = frame
        for t, column in ((a, frame.columns[0]), (b, frame.columns[1])):
            if t not in known:
                raw.setdefault(t, set()).update(frame[column])
    ids = dict(known)
    ids.update({t: sorted(values) for t, values in raw.items()})

    relations: Dict[RelationKey, sp.csr_matrix] = {}
    for (a, b), frame in frames.items():
        ca, cb = frame.columns
        rows = _codes(frame, ca, ids[a], f"aux_{a}_{b}")
        cols = _codes(frame, cb, ids[b], f"aux_{a}_{b}")
        relations[(a, b)] = binarize(sp.csr_matrix(
            (np.ones(len(frame)), (rows, cols)), shape=(len(ids[a]), len(ids[b]))
        ))
    return relations, {t: ids[t] for t in raw}


def build_schema(store: InteractionStore,
                 aux_relations: Optional[Mapping[RelationKey, sp.csr_matrix]] = None) -> NetworkSchema:
    """Schema with phi over namespaced node ids (`type:dense_id`) and psi over edge types"""
    aux = dict(aux_relations if aux_relations is not None else store.aux_relations)
    sizes = {USER: store.n_users, ITEM: store.n_items}
    relation_map = {(USER, ITEM): "interacts", (ITEM, ITEM): "depends_on"}
    if store.n_groups:
        sizes[GROUP] = store.n_groups
        relation_map[(USER, GROUP)] = "member_of"
    for (a, b), matrix in aux.items():
        sizes.setdefault(a, matrix.shape[0])
        sizes.setdefault(b, matrix.shape[1])
        relation_map[(a, b)] = f"{a}_{b}"
    entity_map = {f"{t}:{i}": t for t, n in sizes.items() for i in range(n)}
    schema = NetworkSchema(
        entity_types=set(sizes),
        relation_types=set(relation_map.values()),
        entity_map=entity_map,
        relation_map=relation_map,
    )
    schema.validate()
    return schema


def merged_targets(store: InteractionStore, include_multi_hop: bool = True) -> MergedTargets:
    """
    Merged targets: Y^UV OR Y^UVV and Y^GV OR Y^GVV.

    `include_multi_hop=False` keeps the explicit interactions only, which is how
    a model without dependency meta-paths sees its targets.
    """
    if include_multi_hop:
        users = binarize(store.y_uv + store.y_uvv)
        groups = binarize(store.y_gv + store.y_gvv)
    else:
        users, groups = binarize(store.y_uv), binarize(store.y_gv)
    empty_users = np.asarray(users.getnnz(axis=1) == 0)
    empty_groups = np.asarray(groups.getnnz(axis=1) == 0)
    if empty_users.any() or empty_groups.any():
        logger.warning(
            f"{int(empty_users.sum())} users and {int(empty_groups.sum())} groups have no targets "
            f"and are excluded from the losses"
        )
    return MergedTargets(users=users, groups=groups, empty_users=empty_users, empty_groups=empty_groups)


def interaction_statistics(store: InteractionStore) -> Dict[str, float]:
    """Count rows of the dataset summary table"""
    closure = store.dependency_closure()
    instances = sp.csr_matrix(store.y_uv, dtype=np.int64) @ sp.csr_matrix(closure, dtype=np.int64)
    n_members = sum(len(m) for m in store.groups.groups.values())

    def ratio(a, b):
        return float(a) / b if b else 0.0

    return {
        "users": store.n_users,
        "items": store.n_items,
        "groups": store.n_groups,
        "vv_dependencies": int(store.y_vv.nnz),
        "uv_interactions": int(store.y_uv.nnz),
        "uvv_interactions": int(store.y_uvv.nnz),
        "uvv_path_instances": int(instances.sum()),
        "gv_interactions": int(store.y_gv.nnz),
        "gvv_interactions": int(store.y_gvv.nnz),
        "avg_items_per_user": ratio(store.y_uv.nnz, store.n_users),
        "avg_item_items_per_user": ratio(store.y_uvv.nnz, store.n_users),
        "avg_items_per_group": ratio(store.y_gv.nnz, store.n_groups),
        "avg_item_items_per_group": ratio(store.y_gvv.nnz, store.n_groups),
        "avg_group_size": ratio(n_members, store.n_groups),
        "depth": store.depth,
    }


def item_histograms(store: InteractionStore) -> pd.DataFrame:
    """Per-item explicit vs implicit interaction counts (long-tail comparison)"""
    def column_counts(matrix):
        return np.asarray(matrix.getnnz(axis=0)).ravel()

    return pd.DataFrame({
        "item": np.arange(store.n_items),
        "item_id": store.item_ids,
        "explicit_users": column_counts(store.y_uv),
        "implicit_users": column_counts(store.y_uvv),
        "explicit_groups": column_counts(store.y_gv),
        "implicit_groups": column_counts(store.y_gvv),
    })


def with_interactions(store: InteractionStore, y_uv: sp.csr_matrix, y_gv: sp.csr_matrix) -> InteractionStore:
    """Same ids and relations, new explicit interactions, derived matrices recomputed"""
    updated = replace(store, y_uv=binarize(y_uv), y_gv=binarize(y_gv))
    return derive_multi_hop(updated, store.depth)
