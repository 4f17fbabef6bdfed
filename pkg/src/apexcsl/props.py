"""Synthon feature hashing, synthetic ground-truth oracle, and label file I/O.

The oracle stands in for expensive per-compound scoring: every task value is
a deterministic function of the multi-index and the oracle seed. Additive
tasks are exactly representable as a per-(R-group, synthon) sum; the
nonlinear and pairwise terms add bounded, controllable hardness.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .csl import CslLibrary, LibraryError, MultiIndex, decode_index, product_count

DEFAULT_FEATURE_DIM = 64
DEFAULT_CROSS_TERMS = 16

_NGRAM_SIZES = (1, 2, 3)
_FEATURE_SCALE = 0.25

# 64-bit mixing constants (splitmix64 family)
_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)
_M3 = np.uint64(0x94D049BB133111EB)


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    p: int = DEFAULT_FEATURE_DIM   # hashed n-gram buckets
    q: int = DEFAULT_CROSS_TERMS   # random-projection cross terms
    seed: int = 0                  # seeds the hash salt and projection matrix


def _bucket(ngram: str, salt: int, p: int) -> int:
    digest = hashlib.blake2b(f"{salt}:{ngram}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % p


@lru_cache(maxsize=None)
def _cross_projection(p: int, q: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed + 1)
    return rng.standard_normal((q, p)) / np.sqrt(p)


def synthon_features(token: str, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Hash token n-grams into p count buckets, with fixed scaling."""
    if not token:
        raise ValueError("empty synthon token")
    counts = np.zeros(config.p)
    for n in _NGRAM_SIZES:
        for i in range(len(token) - n + 1):
            counts[_bucket(token[i : i + n], config.seed, config.p)] += 1.0
    return counts * _FEATURE_SCALE


def library_synthon_features(library: CslLibrary, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Feature matrix indexed by synthon id, shape (|S|, p)."""
    return np.stack([synthon_features(s.token, config) for s in library.synthons])


def product_features(
    library: CslLibrary,
    chi: MultiIndex,
    config: FeatureConfig = FeatureConfig(),
    synthon_matrix: np.ndarray | None = None,
) -> np.ndarray:
    """Summed synthon features plus q cross terms, total dimension p + q.

    The cross terms are fixed random projections of the elementwise product of
    the two largest-norm constituent synthon vectors (ties broken by position;
    a single-component assignment crosses its vector with itself).
    """
    if synthon_matrix is None:
        synthon_matrix = library_synthon_features(library, config)
    vecs = [synthon_matrix[s] for _, s in chi.assignment]
    summed = np.zeros(config.p)
    for v in vecs:
        summed = summed + v
    norms = [float(np.linalg.norm(v)) for v in vecs]
    order = sorted(range(len(vecs)), key=lambda i: (-norms[i], i))
    a = vecs[order[0]]
    b = vecs[order[1]] if len(vecs) > 1 else a
    cross = _cross_projection(config.p, config.q, config.seed) @ (a * b)
    return np.concatenate([summed, cross])


def product_feature_matrix(
    library: CslLibrary,
    chis: list[MultiIndex],
    config: FeatureConfig = FeatureConfig(),
) -> np.ndarray:
    synthon_matrix = library_synthon_features(library, config)
    return np.stack([product_features(library, chi, config, synthon_matrix) for chi in chis])


# ---------------------------------------------------------------------------
# ground-truth oracle
# ---------------------------------------------------------------------------

@dataclass
class TaskDef:
    name: str
    mode: str  # "additive" optionally suffixed with "+nonlinear" and/or "+pairwise"
    latent: np.ndarray  # per-synthon-id contribution, shape (|S|,)
    nonlinear_scale: float = 0.0
    nonlinear_alpha: float = 0.05
    pair_scale: float = 0.0
    pair_density: float = 0.05

    def __post_init__(self):
        parts = set(self.mode.split("+"))
        if "additive" not in parts or not parts <= {"additive", "nonlinear", "pairwise"}:
            raise OracleError(f"bad task mode {self.mode!r}")

    @property
    def has_nonlinear(self) -> bool:
        return "nonlinear" in self.mode.split("+")

    @property
    def has_pairwise(self) -> bool:
        return "pairwise" in self.mode.split("+")


@dataclass
class GroundTruthOracle:
    tasks: list[TaskDef]
    seed: int
    _by_name: dict[str, tuple[int, TaskDef]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise OracleError("task names must be unique")
        self._by_name = {t.name: (i, t) for i, t in enumerate(self.tasks)}

    def task(self, name: str) -> TaskDef:
        try:
            return self._by_name[name][1]
        except KeyError:
            raise OracleError(f"unknown task {name!r}") from None

    def task_index(self, name: str) -> int:
        try:
            return self._by_name[name][0]
        except KeyError:
            raise OracleError(f"unknown task {name!r}") from None

    @property
    def task_names(self) -> list[str]:
        return [t.name for t in self.tasks]


def _splitmix(x: np.ndarray) -> np.ndarray:
    # deliberate modular uint64 arithmetic
    with np.errstate(over="ignore"):
        x = (x + _M1).astype(np.uint64)
        x ^= x >> np.uint64(30)
        x = (x * _M2).astype(np.uint64)
        x ^= x >> np.uint64(27)
        x = (x * _M3).astype(np.uint64)
        x ^= x >> np.uint64(31)
    return x


def _pair_uniform(sa, sb, salt: int) -> np.ndarray:
    """Deterministic uniforms in [0,1) keyed by an unordered synthon id pair."""
    a = np.asarray(sa, dtype=np.uint64)
    b = np.asarray(sb, dtype=np.uint64)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    with np.errstate(over="ignore"):
        h = _splitmix(_splitmix(lo * _M1 + np.uint64(salt)) ^ (hi * _M3))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def pair_coefficient(task: TaskDef, task_salt: int, sa, sb) -> np.ndarray:
    """Sparse symmetric pairwise term; zero unless the pair's gate draw fires."""
    gate = _pair_uniform(sa, sb, task_salt)
    value = _pair_uniform(sa, sb, task_salt + 0x51ED)
    coeff = np.where(gate < task.pair_density, task.pair_scale * (2.0 * value - 1.0), 0.0)
    return coeff


def _task_salt(oracle: GroundTruthOracle, task: TaskDef) -> int:
    return (oracle.seed * 1000003 + oracle.task_index(task.name) * 8191) & 0xFFFFFFFF


def ground_truth(oracle: GroundTruthOracle, library: CslLibrary, chi: MultiIndex, task_name: str) -> float:
    """Scalar oracle value; additive base, then tanh term, then pairwise terms.

    Accumulation order is fixed (R-group order, then lexicographic R-group
    pairs) so scalar and vectorized evaluation agree bit-for-bit.
    """
    task = oracle.task(task_name)
    base = 0.0
    for _, s in chi.assignment:
        base = base + float(task.latent[s])
    value = base
    if task.has_nonlinear:
        value = value + task.nonlinear_scale * np.tanh(task.nonlinear_alpha * base)
    if task.has_pairwise:
        salt = _task_salt(oracle, task)
        sids = chi.synthon_ids()
        for a in range(len(sids)):
            for b in range(a + 1, len(sids)):
                value = value + float(pair_coefficient(task, salt, sids[a], sids[b]))
    return float(value)


def oracle_block_values(
    oracle: GroundTruthOracle,
    library: CslLibrary,
    task_name: str,
    reaction_id: int,
    first_digit: int,
) -> np.ndarray:
    """Vectorized oracle values for one (reaction, first-R-group digit) block.

    Returns the flat array over the block's products in canonical order;
    bit-identical to per-compound ground_truth.
    """
    task = oracle.task(task_name)
    rx = library.reaction(reaction_id)
    ids = [np.asarray(rg.synthon_ids) for rg in rx.rgroups]
    lats = [task.latent[i] for i in ids]
    c = len(ids)
    first_id = int(ids[0][first_digit])
    inner_shape = [len(i) for i in ids[1:]]

    def along(axis: int, arr: np.ndarray) -> np.ndarray:
        shape = [1] * (c - 1)
        shape[axis] = len(arr)
        return arr.reshape(shape)

    # additive base, summed left to right with broadcasting
    base = np.float64(lats[0][first_digit])
    for j in range(1, c):
        base = base + along(j - 1, lats[j])
    base = np.ascontiguousarray(np.broadcast_to(base, inner_shape))
    value = base.copy()
    if task.has_nonlinear:
        value = value + task.nonlinear_scale * np.tanh(task.nonlinear_alpha * base)
    if task.has_pairwise:
        salt = _task_salt(oracle, task)
        for a in range(c):
            for b in range(a + 1, c):
                if a == 0:
                    coeff = along(b - 1, pair_coefficient(task, salt, first_id, ids[b]))
                else:
                    mat = pair_coefficient(task, salt, ids[a][:, None], ids[b][None, :])
                    shape = [1] * (c - 1)
                    shape[a - 1] = len(ids[a])
                    shape[b - 1] = len(ids[b])
                    coeff = mat.reshape(shape)
                value = value + coeff
    return value.reshape(-1)


def save_oracle(oracle: GroundTruthOracle, path) -> None:
    payload = {
        "version": 1,
        "seed": oracle.seed,
        "tasks": [
            {
                "name": t.name,
                "mode": t.mode,
                "latent": t.latent.tolist(),
                "nonlinear_scale": t.nonlinear_scale,
                "nonlinear_alpha": t.nonlinear_alpha,
                "pair_scale": t.pair_scale,
                "pair_density": t.pair_density,
            }
            for t in oracle.tasks
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_oracle(path) -> GroundTruthOracle:
    with open(path) as fh:
        payload = json.load(fh)
    tasks = [
        TaskDef(
            name=t["name"],
            mode=t["mode"],
            latent=np.asarray(t["latent"], dtype=np.float64),
            nonlinear_scale=t["nonlinear_scale"],
            nonlinear_alpha=t["nonlinear_alpha"],
            pair_scale=t["pair_scale"],
            pair_density=t["pair_density"],
        )
        for t in payload["tasks"]
    ]
    return GroundTruthOracle(tasks=tasks, seed=payload["seed"])


DOCKING_TASKS = ["dock_a", "dock_b", "dock_c", "dock_d", "dock_e"]
PROPERTY_TASKS = ["mw", "logp", "hbd", "hba", "rotb", "tpsa"]


def make_default_oracle(
    library: CslLibrary,
    seed: int,
    feature_config: FeatureConfig = FeatureConfig(),
    latent_kind: str = "feature_linear",
    hardness: float = 1.0,
) -> GroundTruthOracle:
    """Five docking-like tasks (nonlinear + pairwise) and six additive property tasks.

    latent_kind "feature_linear" draws each task's per-synthon contribution as a
    random linear functional of the hashed synthon features, which makes the
    additive tasks exactly realizable by a linear model over product features;
    "random" draws i.i.d. normals instead.
    """
    rng = np.random.default_rng(seed)
    feats = library_synthon_features(library, feature_config)
    tasks = []

    def draw_latent():
        if latent_kind == "feature_linear":
            beta = rng.standard_normal(feature_config.p) / np.sqrt(feature_config.p)
            return feats @ beta
        if latent_kind == "random":
            return rng.standard_normal(len(library.synthons))
        raise OracleError(f"unknown latent kind {latent_kind!r}")

    for name in DOCKING_TASKS:
        tasks.append(
            TaskDef(
                name=name,
                mode="additive+nonlinear+pairwise",
                latent=draw_latent(),
                nonlinear_scale=0.5 * hardness,
                nonlinear_alpha=0.5,
                pair_scale=0.2 * hardness,
                pair_density=0.05,
            )
        )
    for name in PROPERTY_TASKS:
        tasks.append(TaskDef(name=name, mode="additive", latent=draw_latent()))
    return GroundTruthOracle(tasks=tasks, seed=seed)


def make_additive_oracle(
    library: CslLibrary,
    seed: int,
    task_names: list[str] | None = None,
    feature_config: FeatureConfig = FeatureConfig(),
) -> GroundTruthOracle:
    """Purely additive, feature-linear tasks; the exactly-factorizable benchmark."""
    rng = np.random.default_rng(seed)
    feats = library_synthon_features(library, feature_config)
    names = task_names if task_names is not None else ["objective", "prop_a", "prop_b"]
    tasks = []
    for name in names:
        beta = rng.standard_normal(feature_config.p) / np.sqrt(feature_config.p)
        tasks.append(TaskDef(name=name, mode="additive", latent=feats @ beta))
    return GroundTruthOracle(tasks=tasks, seed=seed)


# ---------------------------------------------------------------------------
# labeled datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabelRow:
    chi: MultiIndex
    task: str
    value: float


@dataclass
class LabeledDataset:
    rows: list[LabelRow]

    def __len__(self) -> int:
        return len(self.rows)

    def tasks(self) -> list[str]:
        seen: dict[str, None] = {}
        for row in self.rows:
            seen.setdefault(row.task, None)
        return list(seen)


@dataclass(frozen=True)
class SampleSpec:
    """Full enumeration when size is None, else a seeded uniform sample."""

    size: int | None = None
    seed: int = 0


def label_library(
    oracle: GroundTruthOracle,
    library: CslLibrary,
    task_names: list[str],
    sample: SampleSpec = SampleSpec(),
) -> LabeledDataset:
    total = product_count(library)
    if sample.size is None:
        gidxs = range(total)
    else:
        rng = np.random.default_rng(sample.seed)
        n = min(sample.size, total)
        gidxs = np.sort(rng.choice(total, size=n, replace=False)) if n else []
    rows = []
    for g in gidxs:
        chi = decode_index(library, int(g))
        for task in task_names:
            rows.append(LabelRow(chi, task, ground_truth(oracle, library, chi, task)))
    return LabeledDataset(rows=rows)


LABEL_HEADER = "reaction_id\tsynthon_ids\ttask\tvalue"


def save_labels(dataset: LabeledDataset, path) -> None:
    with open(path, "w") as fh:
        fh.write(LABEL_HEADER + "\n")
        for row in dataset.rows:
            sids = ",".join(map(str, row.chi.synthon_ids()))
            fh.write(f"{row.chi.reaction_id}\t{sids}\t{row.task}\t{row.value!r}\n")


def load_labels(path, library: CslLibrary) -> LabeledDataset:
    rows = []
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != LABEL_HEADER:
            raise OracleError(f"bad label file header: {header!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise OracleError(f"line {lineno}: expected 4 fields, got {len(parts)}")
            try:
                reaction_id = int(parts[0])
                sids = tuple(int(x) for x in parts[1].split(","))
                value = float(parts[3])
            except ValueError as exc:
                raise OracleError(f"line {lineno}: malformed field: {exc}") from None
            try:
                rx = library.reaction(reaction_id)
            except IndexError:
                raise OracleError(f"line {lineno}: unknown reaction {reaction_id}") from None
            if len(sids) != len(rx.rgroups):
                raise OracleError(f"line {lineno}: expected {len(rx.rgroups)} synthons")
            assignment = tuple((rg.rgroup_id, s) for rg, s in zip(rx.rgroups, sids))
            chi = MultiIndex(reaction_id, assignment)
            for rg, s in zip(rx.rgroups, sids):
                library.synthon_digit(rg.rgroup_id, s)  # raises on ineligible synthon
            rows.append(LabelRow(chi, parts[2], value))
    return LabeledDataset(rows=rows)
