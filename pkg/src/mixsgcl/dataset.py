"""Interaction loading, k-core filtering, ID mapping and train/valid/test splits."""

from __future__ import annotations

import json
import struct
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

CACHE_MAGIC = b"MXSG"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")


class DatasetError(ValueError):
    """Raised for malformed input files and degenerate datasets."""


@dataclass
class RawInteractions:
    # (user_token, item_token, timestamp or None), deduplicated on (user, item)
    records: list[tuple[str, str, int | None]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def users(self) -> set[str]:
        return {r[0] for r in self.records}

    @property
    def items(self) -> set[str]:
        return {r[1] for r in self.records}

    def pairs(self) -> set[tuple[str, str]]:
        return {(u, i) for u, i, _ in self.records}


@dataclass(frozen=True)
class SplitConfig:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 2024
    train_keep_ratio: float = 1.0

    def validate(self) -> list[str]:
        errors = []
        if len(self.ratios) != 3:
            errors.append(f"ratios must have 3 entries, got {len(self.ratios)}")
        elif any(r <= 0 for r in self.ratios):
            errors.append(f"ratios must be strictly positive, got {self.ratios}")
        elif abs(sum(self.ratios) - 1.0) > 1e-9:
            errors.append(f"ratios must sum to 1, got {sum(self.ratios)!r}")
        if not 0.0 < self.train_keep_ratio <= 1.0:
            errors.append(f"train_keep_ratio must lie in (0, 1], got {self.train_keep_ratio}")
        return errors


@dataclass(frozen=True)
class InteractionDataset:
    n_users: int
    n_items: int
    user_map: dict[str, int]
    item_map: dict[str, int]
    train_edges: np.ndarray  # (n, 2) int64 of (user_index, item_index)
    valid_edges: np.ndarray
    test_edges: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    @property
    def train_adjacency_lists(self) -> list[np.ndarray]:
        """Sorted train item indices of every user."""
        return _adjacency_lists(self.train_edges, self.n_users)

    def split(self, name: str) -> np.ndarray:
        try:
            return {"train": self.train_edges, "valid": self.valid_edges, "test": self.test_edges}[name]
        except KeyError:
            raise DatasetError(f"unknown split {name!r}; expected train, valid or test") from None

    def stats(self) -> dict:
        n_inter = len(self.train_edges) + len(self.valid_edges) + len(self.test_edges)
        return {
            "users": self.n_users,
            "items": self.n_items,
            "interactions": n_inter,
            "train": len(self.train_edges),
            "valid": len(self.valid_edges),
            "test": len(self.test_edges),
            "sparsity": 1.0 - n_inter / (self.n_users * self.n_items),
        }


def _adjacency_lists(edges: np.ndarray, n_users: int) -> list[np.ndarray]:
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    users, items = edges[order, 0], edges[order, 1]
    bounds = np.searchsorted(users, np.arange(n_users + 1))
    return [items[bounds[u]:bounds[u + 1]] for u in range(n_users)]


def load_interactions(path, delimiter: str = "\t", timestamp_col: int | None = 2) -> RawInteractions:
    """Read a delimited interaction file (user, item, [timestamp]) and drop duplicate pairs.

    Lines starting with ``#`` and blank lines are skipped. The first occurrence of
    a (user, item) pair wins.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc

    seen: set[tuple[str, str]] = set()
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = [f.strip() for f in line.rstrip("\r\n").split(delimiter)]
        if len(fields) < 2 or not fields[0] or not fields[1]:
            raise DatasetError(f"{path}:{lineno}: expected at least 2 {delimiter!r}-delimited fields")
        ts = None
        if timestamp_col is not None and len(fields) > timestamp_col and fields[timestamp_col]:
            try:
                ts = int(float(fields[timestamp_col]))
            except ValueError:
                raise DatasetError(
                    f"{path}:{lineno}: timestamp {fields[timestamp_col]!r} is not a number"
                ) from None
        key = (fields[0], fields[1])
        if key in seen:
            continue
        seen.add(key)
        records.append((fields[0], fields[1], ts))

    if not records:
        raise DatasetError(f"{path}: no interactions found")
    return RawInteractions(records)


def apply_k_core(raw: RawInteractions, k: int) -> RawInteractions:
    """Keep the maximal sub-dataset in which every user and item has degree >= k."""
    if k < 1:
        raise DatasetError(f"k must be >= 1, got {k}")
    user_adj: dict[str, set[str]] = {}
    item_adj: dict[str, set[str]] = {}
    for u, i, _ in raw.records:
        user_adj.setdefault(u, set()).add(i)
        item_adj.setdefault(i, set()).add(u)

    # peel: each removal can only lower neighbours' degrees
    queue = deque([("u", u) for u, nb in user_adj.items() if len(nb) < k])
    queue.extend(("i", i) for i, nb in item_adj.items() if len(nb) < k)
    removed_users: set[str] = set()
    removed_items: set[str] = set()
    while queue:
        side, node = queue.popleft()
        if side == "u":
            if node in removed_users:
                continue
            removed_users.add(node)
            for i in user_adj[node]:
                nb = item_adj[i]
                nb.discard(node)
                if len(nb) < k and i not in removed_items:
                    queue.append(("i", i))
        else:
            if node in removed_items:
                continue
            removed_items.add(node)
            for u in item_adj[node]:
                nb = user_adj[u]
                nb.discard(node)
                if len(nb) < k and u not in removed_users:
                    queue.append(("u", u))

    kept = [r for r in raw.records if r[0] not in removed_users and r[1] not in removed_items]
    if not kept:
        raise DatasetError(f"{k}-core filtering removed every interaction; dataset too sparse for k={k}")
    return RawInteractions(kept)


def build_dataset(raw: RawInteractions, cfg: SplitConfig) -> InteractionDataset:
    """Map tokens to contiguous indices and split edges with a global seeded shuffle."""
    errors = cfg.validate()
    if errors:
        raise DatasetError("; ".join(errors))
    if not raw.records:
        raise DatasetError("cannot build a dataset from zero interactions")

    user_map: dict[str, int] = {}
    item_map: dict[str, int] = {}
    edges = np.empty((len(raw.records), 2), dtype=np.int64)
    for n, (u, i, _) in enumerate(raw.records):
        edges[n, 0] = user_map.setdefault(u, len(user_map))
        edges[n, 1] = item_map.setdefault(i, len(item_map))

    n = len(edges)
    n_train = int(round(cfg.ratios[0] * n))
    n_valid = int(round(cfg.ratios[1] * n))
    n_test = n - n_train - n_valid
    if min(n_train, n_valid, n_test) <= 0:
        raise DatasetError(
            f"{n} interactions cannot fill splits {cfg.ratios}: sizes {n_train}/{n_valid}/{n_test}"
        )
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    train = edges[perm[:n_train]]
    valid = edges[perm[n_train:n_train + n_valid]]
    test = edges[perm[n_train + n_valid:]]

    if cfg.train_keep_ratio < 1.0:
        train = _keep_fraction(train, cfg.train_keep_ratio, cfg.seed)

    return InteractionDataset(
        n_users=len(user_map),
        n_items=len(item_map),
        user_map=user_map,
        item_map=item_map,
        train_edges=train,
        valid_edges=valid,
        test_edges=test,
    )


def _keep_fraction(train: np.ndarray, ratio: float, seed: int) -> np.ndarray:
    keep_rng = np.random.default_rng([seed, 1])
    n_keep = int(round(ratio * len(train)))
    if n_keep == 0:
        raise DatasetError(f"train_keep_ratio={ratio} leaves no train edges")
    keep = np.sort(keep_rng.permutation(len(train))[:n_keep])
    return train[keep]


def subsample_train(dataset: InteractionDataset, ratio: float, seed: int) -> InteractionDataset:
    """Drop a seeded random (1 - ratio) share of train edges; valid/test stay as they are."""
    if not 0.0 < ratio <= 1.0:
        raise DatasetError(f"train_keep_ratio must lie in (0, 1], got {ratio}")
    if ratio == 1.0:
        return dataset
    return replace(dataset, train_edges=_keep_fraction(dataset.train_edges, ratio, seed))


def dataset_from_edges(n_users: int, n_items: int, train, valid, test) -> InteractionDataset:
    """Wrap already-indexed edge arrays, naming tokens after their indices."""
    as_arr = lambda e: np.asarray(e, dtype=np.int64).reshape(-1, 2)  # noqa: E731
    return InteractionDataset(
        n_users=n_users,
        n_items=n_items,
        user_map={str(u): u for u in range(n_users)},
        item_map={str(i): i for i in range(n_items)},
        train_edges=as_arr(train),
        valid_edges=as_arr(valid),
        test_edges=as_arr(test),
    )


def save_cache(dataset: InteractionDataset, path) -> None:
    """Write the binary cache plus ``.stats.json`` and ``.maps.json`` sidecars."""
    path = Path(path)
    header = _HEADER.pack(
        CACHE_MAGIC, CACHE_VERSION, dataset.n_users, dataset.n_items,
        len(dataset.train_edges), len(dataset.valid_edges), len(dataset.test_edges),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for edges in (dataset.train_edges, dataset.valid_edges, dataset.test_edges):
            fh.write(edges.astype("<u4").tobytes())
    Path(f"{path}.stats.json").write_text(json.dumps(dataset.stats(), indent=2, sort_keys=True) + "\n")
    maps = {"users": list(dataset.user_map), "items": list(dataset.item_map)}
    Path(f"{path}.maps.json").write_text(json.dumps(maps) + "\n")


def load_cache(path) -> InteractionDataset:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read dataset cache {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise DatasetError(f"{path}: truncated dataset cache")
    magic, version, n_users, n_items, n_tr, n_va, n_te = _HEADER.unpack_from(blob)
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        raise DatasetError(f"{path}: not a dataset cache (magic={magic!r}, version={version})")
    expected = _HEADER.size + 8 * (n_tr + n_va + n_te)
    if len(blob) != expected:
        raise DatasetError(f"{path}: size {len(blob)} does not match header ({expected} bytes)")
    pairs = np.frombuffer(blob, dtype="<u4", offset=_HEADER.size).astype(np.int64).reshape(-1, 2)

    maps_path = Path(f"{path}.maps.json")
    if maps_path.exists():
        maps = json.loads(maps_path.read_text())
        user_map = {tok: n for n, tok in enumerate(maps["users"])}
        item_map = {tok: n for n, tok in enumerate(maps["items"])}
    else:
        user_map = {str(u): u for u in range(n_users)}
        item_map = {str(i): i for i in range(n_items)}
    return InteractionDataset(
        n_users=n_users,
        n_items=n_items,
        user_map=user_map,
        item_map=item_map,
        train_edges=pairs[:n_tr],
        valid_edges=pairs[n_tr:n_tr + n_va],
        test_edges=pairs[n_tr + n_va:],
    )


def two_block_dataset(
    n_users: int = 200,
    n_items: int = 200,
    density: float = 0.9,
    ratios=(0.8, 0.1, 0.1),
    seed: int = 0,
) -> InteractionDataset:
    """Synthetic dataset with two user/item clusters and edges only inside clusters."""
    rng = np.random.default_rng(seed)
    users = np.arange(n_users)
    items = np.arange(n_items)
    u_block = users >= n_users // 2
    i_block = items >= n_items // 2
    mask = (u_block[:, None] == i_block[None, :]) & (rng.random((n_users, n_items)) < density)
    uu, ii = np.nonzero(mask)
    raw = RawInteractions([(f"u{u}", f"i{i}", None) for u, i in zip(uu, ii)])
    return build_dataset(raw, SplitConfig(ratios=tuple(ratios), seed=seed))



def clustered_dataset(
    n_users: int = 22_364,
    n_items: int = 12_102,
    n_interactions: int = 198_502,
    n_clusters: int = 50,
    in_cluster: float = 0.8,
    min_degree: int = 5,
    ratios=(0.8, 0.1, 0.1),
    seed: int = 0,
) -> InteractionDataset:
    """Sparse synthetic dataset with skewed item popularity and latent user/item clusters.

    User activity is ``min_degree`` plus a geometric tail scaled to hit roughly
    ``n_interactions``; each pick stays inside the user's cluster with
    probability ``in_cluster`` and otherwise follows global popularity.
    """
    rng = np.random.default_rng(seed)
    extra = max(n_interactions / n_users - min_degree, 1e-9)
    degree = min_degree + rng.geometric(1.0 / (1.0 + extra), size=n_users) - 1
    degree = np.minimum(degree, n_items // 2)
    user_cluster = rng.integers(n_clusters, size=n_users)
    item_cluster = rng.integers(n_clusters, size=n_items)
    popularity = 1.0 / np.arange(1, n_items + 1) ** 0.8
    popularity = popularity[rng.permutation(n_items)]
    members = [np.flatnonzero(item_cluster == c) for c in range(n_clusters)]
    member_p = [popularity[m] / popularity[m].sum() for m in members]
    global_p = popularity / popularity.sum()

    records = []
    for u in range(n_users):
        c = user_cluster[u]
        n_in = rng.binomial(degree[u], in_cluster)
        picks = set()
        if len(members[c]):
            picks.update(rng.choice(members[c], size=min(n_in, len(members[c])), replace=False, p=member_p[c]))
        while len(picks) < degree[u]:
            picks.update(rng.choice(n_items, size=degree[u] - len(picks), p=global_p))
        records += [(f"u{u}", f"i{i}", None) for i in sorted(picks)]
    return build_dataset(RawInteractions(records), SplitConfig(ratios=tuple(ratios), seed=seed))
