"""Dataset loading, splitting, negative sampling and synthetic generation.

The on-disk format is three TSV files (UTF-8, `#` comment lines and blank
lines skipped):

    user_item.tsv    user_id <TAB> item_id          (extra columns ignored)
    groups.tsv       group_id <TAB> u1,u2,...
    group_items.tsv  group_id <TAB> item_id

External ids are arbitrary tokens; they are remapped to contiguous
internal indices sorted by external id (numerically when every id of a
kind parses as an integer, else lexicographically).  Users that appear
only as group members are registered with empty interaction histories.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, SamplingError, UsageError

USER_ITEM_FILE = "user_item.tsv"
GROUPS_FILE = "groups.tsv"
GROUP_ITEMS_FILE = "group_items.tsv"
META_FILE = "meta.json"


@dataclass
class Instance:
    """One labeled group-item training example."""
    group: int
    item: int
    label: int


@dataclass
class Dataset:
    """Remapped users, items, groups and their interactions.

    Immutable after construction; all member/item lists are sorted by
    internal index and duplicate-free.
    """
    n_users: int
    n_items: int
    n_groups: int
    user_items: list  # per user: sorted item indices
    groups: list      # per group: sorted member user indices
    group_pos: list   # per group: sorted positive item indices
    user_ids: list    # internal index -> external id (str)
    item_ids: list
    group_ids: list
    user_index: dict = field(default_factory=dict)
    item_index: dict = field(default_factory=dict)
    group_index: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.user_index:
            self.user_index = {e: i for i, e in enumerate(self.user_ids)}
        if not self.item_index:
            self.item_index = {e: i for i, e in enumerate(self.item_ids)}
        if not self.group_index:
            self.group_index = {e: i for i, e in enumerate(self.group_ids)}


@dataclass
class Split:
    """Leave-one-out split: train keeps positives, test holds one per group."""
    train: list  # of Instance (label 1)
    test: list   # of (group, held_out_item)


# ---------------------------------------------------------------------------
# parsing

def _iter_rows(path, n_fields_min: int):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"{path}: cannot read ({e})") from e
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.rstrip("\n").split("\t")
        if len(fields) < n_fields_min or any(not f.strip() for f in fields[:n_fields_min]):
            raise DataError(f"{path}: line {lineno}: expected at least "
                            f"{n_fields_min} tab-separated fields, got {line!r}")
        rows.append((lineno, [f.strip() for f in fields]))
    return rows


def _sorted_ids(ids) -> list:
    ids = set(ids)
    try:
        return sorted(ids, key=lambda s: (0, int(s)))
    except ValueError:
        return sorted(ids)


def _parse_user_item(path):
    rows = _iter_rows(path, 2)
    if not rows:
        raise DataError(f"{path}: no interaction records")
    return [(lineno, f[0], f[1]) for lineno, f in rows]


def _parse_groups(path):
    rows = _iter_rows(path, 2)
    if not rows:
        raise DataError(f"{path}: no group records")
    parsed = []
    seen = {}
    for lineno, f in rows:
        gid = f[0]
        members = [m.strip() for m in f[1].split(",") if m.strip()]
        if not members:
            raise DataError(f"{path}: line {lineno}: group {gid!r} has an empty member list")
        if gid in seen:
            raise DataError(f"{path}: line {lineno}: group {gid!r} already defined "
                            f"on line {seen[gid]}")
        seen[gid] = lineno
        parsed.append((lineno, gid, members))
    return parsed


def _parse_group_items(path):
    rows = _iter_rows(path, 2)
    if not rows:
        raise DataError(f"{path}: no group-item records")
    return [(lineno, f[0], f[1]) for lineno, f in rows]


@dataclass
class UserItemTable:
    """Standalone remapped user-item interactions (no group information)."""
    n_users: int
    n_items: int
    user_items: list
    user_ids: list
    item_ids: list


def load_user_item(path) -> UserItemTable:
    """Load `user<TAB>item` interactions, dedup, and remap to indices."""
    parsed = _parse_user_item(path)
    user_ids = _sorted_ids(u for _, u, _ in parsed)
    item_ids = _sorted_ids(i for _, _, i in parsed)
    uidx = {e: k for k, e in enumerate(user_ids)}
    iidx = {e: k for k, e in enumerate(item_ids)}
    per_user = [set() for _ in user_ids]
    for _, u, i in parsed:
        per_user[uidx[u]].add(iidx[i])
    return UserItemTable(
        n_users=len(user_ids), n_items=len(item_ids),
        user_items=[sorted(s) for s in per_user],
        user_ids=user_ids, item_ids=item_ids,
    )


def load_dataset(directory) -> Dataset:
    """Load the three-file dataset from a directory."""
    directory = Path(directory)
    ui_path = directory / USER_ITEM_FILE
    g_path = directory / GROUPS_FILE
    gi_path = directory / GROUP_ITEMS_FILE

    interactions = _parse_user_item(ui_path)
    group_defs = _parse_groups(g_path)
    group_items = _parse_group_items(gi_path)

    user_ids = _sorted_ids([u for _, u, _ in interactions]
                           + [m for _, _, ms in group_defs for m in ms])
    item_ids = _sorted_ids([i for _, _, i in interactions]
                           + [i for _, _, i in group_items])
    group_ids = _sorted_ids(g for _, g, _ in group_defs)
    uidx = {e: k for k, e in enumerate(user_ids)}
    iidx = {e: k for k, e in enumerate(item_ids)}
    gidx = {e: k for k, e in enumerate(group_ids)}

    per_user = [set() for _ in user_ids]
    for _, u, i in interactions:
        per_user[uidx[u]].add(iidx[i])

    members = [None] * len(group_ids)
    for _, g, ms in group_defs:
        members[gidx[g]] = sorted({uidx[m] for m in ms})

    positives = [set() for _ in group_ids]
    for lineno, g, i in group_items:
        if g not in gidx:
            raise DataError(f"{gi_path}: line {lineno}: unknown group id {g!r}")
        positives[gidx[g]].add(iidx[i])

    return Dataset(
        n_users=len(user_ids), n_items=len(item_ids), n_groups=len(group_ids),
        user_items=[sorted(s) for s in per_user],
        groups=members,
        group_pos=[sorted(s) for s in positives],
        user_ids=user_ids, item_ids=item_ids, group_ids=group_ids,
    )


def write_dataset(dataset: Dataset, directory, meta: dict | None = None) -> None:
    """Write a dataset back to the three-file format (plus optional meta.json)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / USER_ITEM_FILE, "w", encoding="utf-8") as f:
        for u in range(dataset.n_users):
            for i in dataset.user_items[u]:
                f.write(f"{dataset.user_ids[u]}\t{dataset.item_ids[i]}\n")
    with open(directory / GROUPS_FILE, "w", encoding="utf-8") as f:
        for g in range(dataset.n_groups):
            members = ",".join(dataset.user_ids[u] for u in dataset.groups[g])
            f.write(f"{dataset.group_ids[g]}\t{members}\n")
    with open(directory / GROUP_ITEMS_FILE, "w", encoding="utf-8") as f:
        for g in range(dataset.n_groups):
            for i in dataset.group_pos[g]:
                f.write(f"{dataset.group_ids[g]}\t{dataset.item_ids[i]}\n")
    if meta is not None:
        with open(directory / META_FILE, "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")


# ---------------------------------------------------------------------------
# splitting and sampling

def split_leave_one_out(dataset: Dataset, seed) -> Split:
    """Move one uniformly chosen positive per multi-positive group to test.

    Groups with a single positive keep it in train and are not evaluated.
    """
    rng = np.random.default_rng(seed)
    train, test = [], []
    for g in range(dataset.n_groups):
        pos = dataset.group_pos[g]
        if len(pos) >= 2:
            held = pos[int(rng.integers(len(pos)))]
            test.append((g, held))
            train.extend(Instance(g, i, 1) for i in pos if i != held)
        else:
            train.extend(Instance(g, i, 1) for i in pos)
    return Split(train=train, test=test)


def sample_negatives(dataset: Dataset, group: int, n: int, exclude=(),
                     rng: np.random.Generator | None = None) -> list:
    """Draw n distinct items uniformly from those the group never interacted
    with (group positives and `exclude` are both off limits)."""
    if rng is None:
        raise UsageError("sample_negatives requires an explicit rng stream")
    if n < 0:
        raise UsageError("cannot sample a negative number of items")
    blocked = set(dataset.group_pos[group]) | set(exclude)
    eligible_count = dataset.n_items - len(blocked)
    if n > eligible_count:
        raise SamplingError(
            f"group {dataset.group_ids[group]}: requested {n} negatives but only "
            f"{eligible_count} of {dataset.n_items} items are eligible")
    if n == 0:
        return []
    if n <= eligible_count // 2:
        out: list = []
        chosen: set = set()
        while len(out) < n:
            cand = int(rng.integers(dataset.n_items))
            if cand in blocked or cand in chosen:
                continue
            chosen.add(cand)
            out.append(cand)
        return out
    eligible = np.array([i for i in range(dataset.n_items) if i not in blocked])
    return [int(i) for i in rng.choice(eligible, size=n, replace=False)]


# ---------------------------------------------------------------------------
# synthetic data

@dataclass
class SyntheticParams:
    """Knobs for the planted-cohort generator.

    Users belong to one of `n_cohorts` taste cohorts; their latent vector
    is the cohort vector plus `noise`-scaled jitter.  Interactions are the
    top `items_per_user` items by (noisy) latent utility.  Groups draw
    most members from one cohort, with a `cross_rate` fraction from the
    others, and their positives are the top `positives_per_group` items by
    noisy mean-member utility.
    """
    n_users: int = 200
    n_items: int = 500
    n_groups: int = 60
    group_size_range: tuple = (4, 8)
    n_cohorts: int = 3
    latent_dim: int = 8
    noise: float = 0.1
    positives_per_group: int = 10
    cross_rate: float = 0.2
    items_per_user: int | None = None  # default: max(10, n_items // 25)

    def resolved_items_per_user(self) -> int:
        if self.items_per_user is not None:
            return self.items_per_user
        return max(10, self.n_items // 25)

    def validate(self) -> None:
        if min(self.n_users, self.n_items, self.n_groups,
               self.n_cohorts, self.latent_dim) < 1:
            raise UsageError("all synthetic counts must be positive")
        lo, hi = self.group_size_range
        if not (1 <= lo <= hi <= self.n_users):
            raise UsageError(f"bad group_size_range {self.group_size_range}")
        if not (1 <= self.positives_per_group <= self.n_items):
            raise UsageError(f"positives_per_group={self.positives_per_group} "
                             f"not in [1, n_items={self.n_items}]")
        if not (1 <= self.resolved_items_per_user() <= self.n_items):
            raise UsageError(f"items_per_user={self.items_per_user} out of range")
        if self.n_cohorts > self.n_users:
            raise UsageError("more cohorts than users")
        if not 0.0 <= self.cross_rate <= 1.0:
            raise UsageError("cross_rate must be in [0, 1]")
        if self.noise < 0:
            raise UsageError("noise must be non-negative")

    def as_dict(self) -> dict:
        return {
            "n_users": self.n_users, "n_items": self.n_items,
            "n_groups": self.n_groups,
            "group_size_range": list(self.group_size_range),
            "n_cohorts": self.n_cohorts, "latent_dim": self.latent_dim,
            "noise": self.noise, "positives_per_group": self.positives_per_group,
            "cross_rate": self.cross_rate,
            "items_per_user": self.resolved_items_per_user(),
        }


@dataclass
class PlantedTruth:
    """Ground truth behind a synthetic dataset, for oracle scoring."""
    cohort_of: np.ndarray      # (n_users,)
    user_vecs: np.ndarray      # (n_users, latent_dim)
    item_vecs: np.ndarray      # (n_items, latent_dim)
    group_utility: np.ndarray  # (n_groups, n_items), noiseless mean member utility


def generate_synthetic(params: SyntheticParams, seed) -> tuple:
    """Generate a planted-cohort dataset; returns (Dataset, PlantedTruth).

    Deterministic for a given (params, seed).
    """
    params.validate()
    rng = np.random.default_rng(seed)
    nu, ni, ng = params.n_users, params.n_items, params.n_groups
    k = params.latent_dim

    cohort_vecs = rng.normal(0.0, 1.0, size=(params.n_cohorts, k))
    item_vecs = rng.normal(0.0, 1.0, size=(ni, k)) / np.sqrt(k)
    cohort_of = (np.arange(nu) * params.n_cohorts) // nu
    user_vecs = cohort_vecs[cohort_of] + params.noise * rng.normal(size=(nu, k))
    utility = user_vecs @ item_vecs.T  # (nu, ni)

    n_take = params.resolved_items_per_user()
    user_sets = []
    for u in range(nu):
        noisy = utility[u] + params.noise * rng.normal(size=ni)
        top = np.argpartition(-noisy, n_take - 1)[:n_take]
        user_sets.append({int(i) for i in top})
    # hand every never-interacted item to a random user so the written
    # dataset keeps the full item universe
    mentioned = set().union(*user_sets)
    for v in range(ni):
        if v not in mentioned:
            user_sets[int(rng.integers(nu))].add(v)
    user_items = [sorted(s) for s in user_sets]

    cohort_pools = [np.flatnonzero(cohort_of == c) for c in range(params.n_cohorts)]
    lo, hi = params.group_size_range
    groups = []
    for _ in range(ng):
        size = int(rng.integers(lo, hi + 1))
        c = int(rng.integers(params.n_cohorts))
        pool_in = cohort_pools[c]
        pool_out = np.flatnonzero(cohort_of != c)
        n_cross = int((rng.random(size) < params.cross_rate).sum())
        n_cross = min(n_cross, len(pool_out), size - 1 if len(pool_in) else size)
        n_in = min(size - n_cross, len(pool_in))
        members = []
        if n_in:
            members.extend(rng.choice(pool_in, size=n_in, replace=False))
        if n_cross:
            members.extend(rng.choice(pool_out, size=n_cross, replace=False))
        groups.append(sorted(int(u) for u in members))

    group_utility = np.stack([
        item_vecs @ user_vecs[members].mean(axis=0) for members in groups
    ])
    group_pos = []
    for g in range(ng):
        noisy = group_utility[g] + params.noise * rng.normal(size=ni)
        top = np.argpartition(-noisy, params.positives_per_group - 1)[:params.positives_per_group]
        group_pos.append(sorted(int(i) for i in top))

    dataset = Dataset(
        n_users=nu, n_items=ni, n_groups=ng,
        user_items=user_items, groups=groups, group_pos=group_pos,
        user_ids=[str(u) for u in range(nu)],
        item_ids=[str(i) for i in range(ni)],
        group_ids=[str(g) for g in range(ng)],
    )
    truth = PlantedTruth(cohort_of=cohort_of, user_vecs=user_vecs,
                         item_vecs=item_vecs, group_utility=group_utility)
    return dataset, truth
