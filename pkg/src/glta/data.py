"""Interaction/description file formats and planted synthetic datasets.

Interactions: UTF-8, tab separated ``user_id<TAB>item_id[<TAB>timestamp]``
with an optional header row. Items: one JSON object per line with
``item_id`` and ``description``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import InteractionGraph

log = logging.getLogger(__name__)


class DatasetParseError(ValueError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.path = str(path)
        self.line_no = line_no


class UnknownItemError(KeyError):
    pass


@dataclass
class Catalog:
    descriptions: list[str]
    user_ids: list[str]
    item_ids: list[str]
    duplicates_collapsed: int = 0
    user_index: dict[str, int] = field(init=False, repr=False)
    item_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.descriptions) != len(self.item_ids):
            raise ValueError("one description per item required")
        self.user_index = {u: i for i, u in enumerate(self.user_ids)}
        self.item_index = {it: i for i, it in enumerate(self.item_ids)}
        if len(self.user_index) != len(self.user_ids) or len(self.item_index) != len(self.item_ids):
            raise ValueError("external ids must be unique")

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Catalog):
            return NotImplemented
        return (self.descriptions == other.descriptions and self.user_ids == other.user_ids
                and self.item_ids == other.item_ids)


def load_items(path) -> tuple[list[str], list[str]]:
    ids, descs = [], []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                item_id, desc = str(rec["item_id"]), str(rec["description"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetParseError(path, no, f"bad item record ({exc})") from None
            if item_id in seen:
                raise DatasetParseError(path, no, f"duplicate item_id {item_id!r}")
            seen.add(item_id)
            ids.append(item_id)
            descs.append(desc)
    if not ids:
        raise DatasetParseError(path, 0, "items file has no records")
    return ids, descs


def load_dataset(interactions_path, items_path) -> tuple[InteractionGraph, Catalog]:
    """Parse both files into a graph over dense ids and its catalog.

    Users get dense ids in order of first appearance; items follow the items
    file order. Repeated (user, item) pairs are collapsed to one edge, keeping
    the earliest timestamp.
    """
    item_ids, descs = load_items(items_path)
    item_index = {it: i for i, it in enumerate(item_ids)}
    user_ids: list[str] = []
    user_index: dict[str, int] = {}
    pairs: dict[tuple[int, int], float | None] = {}
    has_ts = None
    dup = 0
    with open(interactions_path, encoding="utf-8") as fh:
        for no, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if no == 1 and parts[0].strip().lower() in ("user_id", "user"):
                continue
            if len(parts) not in (2, 3):
                raise DatasetParseError(interactions_path, no, f"expected 2 or 3 tab-separated fields, got {len(parts)}")
            u_ext, i_ext = parts[0].strip(), parts[1].strip()
            if not u_ext or not i_ext:
                raise DatasetParseError(interactions_path, no, "empty id field")
            ts = None
            if len(parts) == 3:
                try:
                    ts = float(parts[2])
                except ValueError:
                    raise DatasetParseError(interactions_path, no, f"bad timestamp {parts[2]!r}") from None
            line_has_ts = ts is not None
            if has_ts is None:
                has_ts = line_has_ts
            elif has_ts != line_has_ts:
                raise DatasetParseError(interactions_path, no, "timestamp column present on some lines only")
            if i_ext not in item_index:
                raise UnknownItemError(f"{interactions_path}:{no}: unknown item id {i_ext!r}")
            if u_ext not in user_index:
                user_index[u_ext] = len(user_ids)
                user_ids.append(u_ext)
            key = (user_index[u_ext], item_index[i_ext])
            if key in pairs:
                dup += 1
                if ts is not None and ts < pairs[key]:
                    pairs[key] = ts
            else:
                pairs[key] = ts
    if dup:
        log.info("collapsed %d duplicate interactions", dup)
    edges = np.array(list(pairs), dtype=np.int64).reshape(-1, 2)
    ts = np.array(list(pairs.values()), dtype=np.float64) if has_ts else None
    graph = InteractionGraph(len(user_ids), len(item_ids), edges, ts)
    return graph, Catalog(descs, user_ids, item_ids, dup)


def write_dataset(graph: InteractionGraph, catalog: Catalog, interactions_path, items_path) -> None:
    with open(items_path, "w", encoding="utf-8") as fh:
        for it, desc in zip(catalog.item_ids, catalog.descriptions):
            fh.write(json.dumps({"item_id": it, "description": desc}) + "\n")
    with open(interactions_path, "w", encoding="utf-8") as fh:
        fh.write("user_id\titem_id" + ("\ttimestamp" if graph.timestamps is not None else "") + "\n")
        for j, (u, i) in enumerate(graph.edges):
            row = f"{catalog.user_ids[u]}\t{catalog.item_ids[i]}"
            if graph.timestamps is not None:
                row += f"\t{float(graph.timestamps[j])!r}"
            fh.write(row + "\n")


def dataset_stats(graph: InteractionGraph) -> dict:
    denom = graph.num_users * graph.num_items
    return {
        "users": graph.num_users,
        "items": graph.num_items,
        "interactions": graph.num_edges,
        "density": graph.num_edges / denom if denom else 0.0,
    }


@dataclass
class SyntheticConfig:
    users: int = 40
    items: int = 60
    clusters: int = 2
    in_cluster_p: float = 0.3
    noise_p: float = 0.02
    vocab_per_cluster: int = 12
    words_per_item: int = 5
    seed: int = 0


_SYLLABLES = ("ka", "lo", "mi", "ru", "te", "va", "zo", "ne", "pi", "su", "da", "fe", "go", "hu", "ji", "yo")


def _pseudo_word(n: int) -> str:
    # bijective base-16 spelling, at least two syllables
    out = []
    n += len(_SYLLABLES)
    while n:
        n, r = divmod(n, len(_SYLLABLES))
        out.append(_SYLLABLES[r])
    return "".join(reversed(out))


def generate_synthetic(config: SyntheticConfig | None = None) -> tuple[InteractionGraph, Catalog]:
    """Clustered users and items with cluster-specific description words.

    Cluster of user u is ``u % clusters`` (likewise for items). Each
    (user, item) pair interacts with probability ``in_cluster_p`` when they
    share a cluster and ``noise_p`` otherwise. A user left without any edge
    receives one uniformly chosen in-cluster item.
    """
    cfg = config or SyntheticConfig()
    rng = np.random.default_rng(cfg.seed)
    uc = np.arange(cfg.users) % cfg.clusters
    ic = np.arange(cfg.items) % cfg.clusters
    same = uc[:, None] == ic[None, :]
    prob = np.where(same, cfg.in_cluster_p, cfg.noise_p)
    adj = rng.random((cfg.users, cfg.items)) < prob
    for u in np.flatnonzero(~adj.any(axis=1)):
        pool = np.flatnonzero(ic == uc[u])
        adj[u, rng.choice(pool)] = True
    pools = [[_pseudo_word(c * cfg.vocab_per_cluster + j) for j in range(cfg.vocab_per_cluster)]
             for c in range(cfg.clusters)]
    descs = []
    for i in range(cfg.items):
        words = rng.choice(pools[ic[i]], size=cfg.words_per_item, replace=True)
        descs.append(" ".join(words))
    u_idx, i_idx = np.nonzero(adj)
    graph = InteractionGraph(cfg.users, cfg.items, np.column_stack([u_idx, i_idx]))
    catalog = Catalog(descs, [f"u{u}" for u in range(cfg.users)], [f"i{i}" for i in range(cfg.items)])
    return graph, catalog


def user_clusters(config: SyntheticConfig) -> np.ndarray:
    return np.arange(config.users) % config.clusters


def item_clusters(config: SyntheticConfig) -> np.ndarray:
    return np.arange(config.items) % config.clusters


def save_synthetic(config: SyntheticConfig, directory) -> tuple[Path, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    graph, catalog = generate_synthetic(config)
    ip, tp = d / "interactions.tsv", d / "items.jsonl"
    write_dataset(graph, catalog, ip, tp)
    return ip, tp
