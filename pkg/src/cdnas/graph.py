"""Cross-domain interaction graph: records, ingestion, synthesis, splits and samplers."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
TSV_HEADER = ("user_id", "item_id", "domain", "label", "split")


class GraphError(ValueError):
    """Raised for malformed interaction data."""


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    domain: str
    label: int
    split: str = "train"

    def __post_init__(self):
        if self.label not in (0, 1):
            raise GraphError(f"label must be 0 or 1, got {self.label!r} in {self}")
        if self.split not in SPLITS:
            raise GraphError(f"unknown split {self.split!r} in {self}")

    def with_split(self, split: str) -> Interaction:
        return Interaction(self.user, self.item, self.domain, self.label, split)


@dataclass(frozen=True)
class DomainSpec:
    target: str
    sources: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        if self.target in self.sources:
            raise GraphError(f"target domain {self.target!r} also listed as a source")
        if len(set(self.sources)) != len(self.sources):
            raise GraphError(f"duplicate source domains: {self.sources}")

    @property
    def domains(self) -> tuple[str, ...]:
        """Target first, then sources in declared order."""
        return (self.target, *self.sources)


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 200
    n_items_per_domain: int = 60
    n_domains: int = 2
    latent_dim: int = 4
    shared_factor_strength: float = 1.0
    source_noise_fraction: float = 0.0
    positives_per_user: int = 10
    seed: int = 0
    # sharpness of the click model: p = logistic(logit_scale * <user, item>)
    logit_scale: float = 6.0

    def __post_init__(self):
        for name in ("n_users", "n_items_per_domain", "n_domains", "latent_dim", "positives_per_user"):
            if getattr(self, name) < 1:
                raise GraphError(f"{name} must be >= 1")
        for name in ("shared_factor_strength", "source_noise_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise GraphError(f"{name} must lie in [0, 1]")
        if self.logit_scale <= 0:
            raise GraphError("logit_scale must be positive")

    @property
    def domain_spec(self) -> DomainSpec:
        names = synth_domain_names(self.n_domains)
        return DomainSpec(target=names[0], sources=tuple(names[1:]))


def synth_domain_names(n_domains: int) -> list[str]:
    return [f"d{k}" for k in range(n_domains)]


class InteractionGraph:
    """Immutable bipartite user-item graph with domain-labelled, split-tagged edges.

    Users are shared across domains; each item node belongs to exactly one domain
    (item nodes are keyed by ``(domain, item_id)``). Node indices follow first
    appearance in the input order, so they are deterministic.
    """

    def __init__(self, edges: Sequence[Interaction], domain_spec: DomainSpec):
        self.domain_spec = domain_spec
        self.domain_set = domain_spec.domains
        self.edges = tuple(edges)

        users: dict[str, int] = {}
        items: dict[tuple[str, str], int] = {}
        dom_index = {d: k for k, d in enumerate(self.domain_set)}
        n = len(self.edges)
        eu = np.empty(n, dtype=np.int64)
        ei = np.empty(n, dtype=np.int64)
        ed = np.empty(n, dtype=np.int64)
        lab = np.empty(n, dtype=np.int64)
        spl = np.empty(n, dtype=np.int64)
        seen: set[tuple[str, str, str, str]] = set()
        for k, e in enumerate(self.edges):
            if e.domain not in dom_index:
                raise GraphError(f"unknown domain {e.domain!r} in record {e}")
            key = (e.user, e.item, e.domain, e.split)
            if key in seen:
                raise GraphError(f"duplicate interaction {e}")
            seen.add(key)
            eu[k] = users.setdefault(e.user, len(users))
            ei[k] = items.setdefault((e.domain, e.item), len(items))
            ed[k] = dom_index[e.domain]
            lab[k] = e.label
            spl[k] = SPLITS.index(e.split)

        self.user_index = users
        self.item_index = items
        self.users = tuple(users)
        self.items = tuple(items)
        item_dom = np.array([dom_index[d] for d, _ in items], dtype=np.int64)
        self.item_domain = item_dom
        self.edge_user = eu
        self.edge_item = ei
        self.edge_domain = ed
        self.edge_label = lab
        self.edge_split = spl
        for arr in (item_dom, eu, ei, ed, lab, spl):
            arr.setflags(write=False)

    def __setattr__(self, name, value):
        if name in self.__dict__:
            raise AttributeError(f"InteractionGraph is immutable (tried to set {name!r})")
        super().__setattr__(name, value)

    def __len__(self) -> int:
        return len(self.edges)

    def __repr__(self) -> str:
        return (f"InteractionGraph(users={self.n_users}, items={self.n_items}, "
                f"edges={len(self.edges)}, domains={self.domain_set})")

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    def domain_id(self, domain: str) -> int:
        return self.domain_set.index(domain)

    def select(self, split: str | None = None, label: int | None = None,
               domain: str | int | None = None) -> np.ndarray:
        """Indices of edges matching all given filters."""
        mask = np.ones(len(self.edges), dtype=bool)
        if split is not None:
            mask &= self.edge_split == SPLITS.index(split)
        if label is not None:
            mask &= self.edge_label == label
        if domain is not None:
            d = domain if isinstance(domain, (int, np.integer)) else self.domain_id(domain)
            mask &= self.edge_domain == d
        return np.flatnonzero(mask)

    def message_edges(self, domain: int) -> tuple[np.ndarray, np.ndarray]:
        """(user, item) index pairs of train-split clicks in ``domain``.

        These positive training edges form the propagation graph of the GNNs.
        """
        idx = self.select(split="train", label=1, domain=int(domain))
        return self.edge_user[idx], self.edge_item[idx]

    def items_in_domain(self, domain: int) -> np.ndarray:
        return np.flatnonzero(self.item_domain == domain)

    def density(self, domain: str | int) -> float:
        """|E_d| / (|U| * |I_d|) as a fraction."""
        d = domain if isinstance(domain, int) else self.domain_id(domain)
        n_items = int((self.item_domain == d).sum())
        if self.n_users == 0 or n_items == 0:
            return 0.0
        return float((self.edge_domain == d).sum()) / (self.n_users * n_items)


def build_graph(interactions: Iterable[Interaction], domain_spec: DomainSpec) -> InteractionGraph:
    return InteractionGraph(list(interactions), domain_spec)


def density_percent(n_edges: int, n_users: int, n_items: int) -> float:
    return 100.0 * n_edges / (n_users * n_items)


# ---------------------------------------------------------------------------
# TSV I/O


def ingest_tsv(path: str | Path) -> list[Interaction]:
    """Read ``user_id, item_id, domain, label[, split]`` rows (header optional)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    out: list[Interaction] = []
    with path.open(encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if lineno == 1 and cols[0] == TSV_HEADER[0]:
                continue
            if len(cols) not in (4, 5):
                raise GraphError(f"{path}:{lineno}: expected 4 or 5 tab-separated columns, got {len(cols)}")
            user, item, domain, label = cols[:4]
            if label not in ("0", "1"):
                raise GraphError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
            split = cols[4] if len(cols) == 5 and cols[4] else "train"
            if split not in SPLITS:
                raise GraphError(f"{path}:{lineno}: unknown split {split!r}")
            out.append(Interaction(user, item, domain, int(label), split))
    return out


def write_tsv(path: str | Path, interactions: Iterable[Interaction]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(TSV_HEADER)
        for e in interactions:
            w.writerow((e.user, e.item, e.domain, e.label, e.split))


def write_synth_metadata(path: str | Path, config: SynthConfig, **extra) -> None:
    meta = {"synth_config": asdict(config), **extra}
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# sampling


def negative_sample(graph: InteractionGraph, ratio: float, rng: np.random.Generator,
                    split: str = "train") -> list[Interaction]:
    """Uniform same-domain negatives for the positive edges of ``split``.

    Emits ``round(ratio * n_pos)`` negatives in total; each is a (user, item)
    pair that is not a positive anywhere in the graph, and pairs are not repeated.
    """
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    pos_idx = graph.select(split=split, label=1)
    n_pos = len(pos_idx)
    if n_pos == 0:
        return []
    base = int(math.floor(ratio))
    n_extra = int(round((ratio - base) * n_pos))
    counts = np.full(n_pos, base, dtype=np.int64)
    if n_extra:
        counts[rng.choice(n_pos, size=n_extra, replace=False)] += 1

    positives = set(zip(graph.edge_user[graph.edge_label == 1].tolist(),
                        graph.edge_item[graph.edge_label == 1].tolist()))
    taken: set[tuple[int, int]] = set()
    domain_items = {d: graph.items_in_domain(d) for d in range(len(graph.domain_set))}
    exhausted: set[tuple[int, int]] = set()
    out: list[Interaction] = []
    for e_idx, c in zip(pos_idx, counts):
        if c == 0:
            continue
        u = int(graph.edge_user[e_idx])
        d = int(graph.edge_domain[e_idx])
        if (u, d) in exhausted:
            continue
        pool = domain_items[d]
        for _ in range(c):
            pick = None
            for _attempt in range(32):
                cand = int(pool[rng.integers(len(pool))])
                if (u, cand) not in positives and (u, cand) not in taken:
                    pick = cand
                    break
            if pick is None:
                free = [int(i) for i in pool if (u, int(i)) not in positives and (u, int(i)) not in taken]
                if not free:
                    logger.warning("no negative candidates left for user %s in domain %s; skipping",
                                   graph.users[u], graph.domain_set[d])
                    exhausted.add((u, d))
                    break
                pick = free[rng.integers(len(free))]
            taken.add((u, pick))
            dom, item = graph.items[pick]
            out.append(Interaction(graph.users[u], item, dom, 0, split))
    return out


def make_splits(interactions: Sequence[Interaction], ratios: tuple[float, float, float],
                seed: int, target_domain: str | None = None) -> list[Interaction]:
    """Per-user stratified random train/valid/test assignment.

    Groups are (user, domain, label); a group of n >= 3 gets at least one
    record in every split. With ``target_domain`` set, only that domain is
    split and every other interaction stays in train.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"split ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")
    rng = np.random.default_rng(seed)

    groups: dict[tuple[str, str, int], list[int]] = {}
    for k, e in enumerate(interactions):
        if target_domain is not None and e.domain != target_domain:
            continue
        groups.setdefault((e.user, e.domain, e.label), []).append(k)

    assign = ["train"] * len(interactions)
    for members in groups.values():
        n = len(members)
        order = [members[j] for j in rng.permutation(n)]
        if n >= 3:
            counts = _apportion(n, ratios)
            labels = ["train"] * counts[0] + ["valid"] * counts[1] + ["test"] * counts[2]
        else:
            labels = [SPLITS[j] for j in rng.choice(3, size=n, p=ratios)]
        for k, s in zip(order, labels):
            assign[k] = s
    return [e.with_split(s) for e, s in zip(interactions, assign)]


def _apportion(n: int, ratios: tuple[float, float, float]) -> list[int]:
    # largest remainder with a floor of one per split
    raw = [n * r for r in ratios]
    counts = [max(1, int(math.floor(x))) for x in raw]
    while sum(counts) > n:
        j = max((i for i in range(3) if counts[i] > 1), key=lambda i: counts[i] - raw[i])
        counts[j] -= 1
    rem = sorted(range(3), key=lambda i: raw[i] - counts[i], reverse=True)
    i = 0
    while sum(counts) < n:
        counts[rem[i % 3]] += 1
        i += 1
    return counts


def sample_disjoint_batches(train_pool: Sequence, batch_size: int, rng: np.random.Generator,
                            is_target: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Draw an inner batch and a disjoint dev batch from ``train_pool``.

    Returns positions into the pool. The dev batch only holds positions where
    ``is_target`` is true (all positions if it is None).
    """
    n = len(train_pool)
    if n < 2 * batch_size:
        raise ValueError(f"train pool of {n} is smaller than two batches of {batch_size}")
    is_target = np.ones(n, dtype=bool) if is_target is None else np.asarray(is_target, dtype=bool)
    target_pos = np.flatnonzero(is_target)
    if len(target_pos) < batch_size:
        raise ValueError(f"only {len(target_pos)} target interactions for a dev batch of {batch_size}")
    dev = np.sort(rng.choice(target_pos, size=batch_size, replace=False))
    rest = np.setdiff1d(np.arange(n), dev, assume_unique=True)
    inner = np.sort(rng.choice(rest, size=batch_size, replace=False))
    return inner, dev


class Variant(str, Enum):
    FULL = "FULL"
    MANUAL = "MANUAL"
    MIX = "MIX"
    DISCRETE = "DISCRETE"
    NO_SOURCE = "NO-SOURCE"
    NO_IMPO = "NO-IMPO"


def apply_ablation_filter(graph: InteractionGraph, variant: Variant | str) -> InteractionGraph:
    variant = Variant(variant)
    if variant is not Variant.NO_SOURCE:
        return graph
    spec = DomainSpec(target=graph.domain_spec.target)
    keep = [e for e in graph.edges if e.domain == spec.target]
    return InteractionGraph(keep, spec)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthOracle:
    """Ground truth behind a synthetic dataset, aligned with the emitted interactions."""

    scores: np.ndarray          # clean click probability of each emitted pair
    clean_labels: np.ndarray    # label before source-noise flipping
    user_factors: np.ndarray    # [n_domains, n_users, latent_dim]
    item_factors: np.ndarray    # [n_domains, n_items_per_domain, latent_dim]
    flipped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def synth_generate(config: SynthConfig) -> tuple[list[Interaction], SynthOracle]:
    """Latent-factor click simulator.

    Each user has a shared factor and a per-domain factor, mixed by
    ``shared_factor_strength``. For every (user, domain) the items are shown in
    random order and clicked with probability logistic(scale * <u, v>) until
    ``positives_per_user`` clicks occur; the shown-but-unclicked items become
    label-0 interactions. A uniformly drawn ``source_noise_fraction`` share of
    source-domain labels is then flipped.
    """
    c = config
    rng = np.random.default_rng(c.seed)
    names = synth_domain_names(c.n_domains)
    s = c.shared_factor_strength
    shared = rng.standard_normal((c.n_users, c.latent_dim))
    specific = rng.standard_normal((c.n_domains, c.n_users, c.latent_dim))
    user_f = math.sqrt(s) * shared[None] + math.sqrt(1.0 - s) * specific
    item_f = rng.standard_normal((c.n_domains, c.n_items_per_domain, c.latent_dim)) / math.sqrt(c.latent_dim)

    out: list[Interaction] = []
    scores: list[float] = []
    for d, dname in enumerate(names):
        probs = _sigmoid(c.logit_scale * user_f[d] @ item_f[d].T)
        for u in range(c.n_users):
            order = rng.permutation(c.n_items_per_domain)
            draws = rng.random(c.n_items_per_domain)
            clicks = 0
            for j, r in zip(order, draws):
                p = probs[u, j]
                y = int(r < p)
                out.append(Interaction(f"u{u}", f"{dname}_i{j}", dname, y))
                scores.append(float(p))
                clicks += y
                if clicks == c.positives_per_user:
                    break
            if clicks < c.positives_per_user:
                logger.warning("user u%d reached only %d clicks in %s", u, clicks, dname)

    clean = np.array([e.label for e in out], dtype=np.int64)
    flipped = np.zeros(len(out), dtype=bool)
    src = np.flatnonzero(np.array([e.domain != names[0] for e in out], dtype=bool))
    n_flip = int(round(c.source_noise_fraction * len(src)))
    if n_flip:
        flipped[rng.choice(src, size=n_flip, replace=False)] = True
        out = [Interaction(e.user, e.item, e.domain, 1 - e.label, e.split) if f else e
               for e, f in zip(out, flipped)]
    return out, SynthOracle(np.array(scores), clean, user_f, item_f, flipped)
