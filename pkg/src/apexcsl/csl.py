"""Combinatorial synthesis library data model, canonical enumeration, and index codec.

A library is a hierarchy: reactions at the top, R-groups in the middle,
synthons at the bottom. A product is identified by a multi-index (reaction +
one synthon per R-group). The canonical enumeration order is: reactions in
declaration order; within a reaction, mixed-radix with the first R-group as
the most significant digit, so (reaction, first-R-group) batches are
contiguous in global index.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

MAX_COUNT = 2**64 - 1

LIBRARY_FORMAT_VERSION = "cslv1"


class LibraryError(ValueError):
    """Structural problem in a library definition or an index out of range."""


@dataclass(frozen=True)
class SynthonRecord:
    synthon_id: int
    token: str  # fragment token string, may contain '*' attachment markers


@dataclass(frozen=True)
class RgroupSpec:
    rgroup_id: int
    synthon_ids: tuple[int, ...]  # eligible synthons, order fixes the digit values


@dataclass(frozen=True)
class ReactionSpec:
    reaction_id: int
    rgroups: tuple[RgroupSpec, ...]  # order is significant: digit order of the codec


@dataclass(frozen=True)
class MultiIndex:
    """One product: a reaction plus an (rgroup_id, synthon_id) pair per R-group."""

    reaction_id: int
    assignment: tuple[tuple[int, int], ...]

    def synthon_ids(self) -> tuple[int, ...]:
        return tuple(s for _, s in self.assignment)


@dataclass
class CslLibrary:
    reactions: tuple[ReactionSpec, ...]
    synthons: tuple[SynthonRecord, ...]

    # derived lookups, built once; the library is immutable after construction
    _reaction_sizes: tuple[int, ...] = field(init=False, repr=False, compare=False)
    _reaction_offsets: tuple[int, ...] = field(init=False, repr=False, compare=False)  # len = n+1
    _digit_of: dict[int, dict[int, int]] = field(init=False, repr=False, compare=False)
    _rgroup_to_reaction: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sizes = []
        offsets = [0]
        digit_of: dict[int, dict[int, int]] = {}
        r2t: dict[int, int] = {}
        for rx in self.reactions:
            size = 1
            for rg in rx.rgroups:
                size *= len(rg.synthon_ids)
                digit_of[rg.rgroup_id] = {s: i for i, s in enumerate(rg.synthon_ids)}
                r2t[rg.rgroup_id] = rx.reaction_id
            sizes.append(size)
            offsets.append(offsets[-1] + size)
        self._reaction_sizes = tuple(sizes)
        self._reaction_offsets = tuple(offsets)
        self._digit_of = digit_of
        self._rgroup_to_reaction = r2t

    @property
    def synthon_token(self) -> dict[int, str]:
        return {s.synthon_id: s.token for s in self.synthons}

    def reaction(self, reaction_id: int) -> ReactionSpec:
        return self.reactions[reaction_id]

    def reaction_size(self, reaction_id: int) -> int:
        return self._reaction_sizes[reaction_id]

    def reaction_offset(self, reaction_id: int) -> int:
        return self._reaction_offsets[reaction_id]

    def rgroup_reaction(self, rgroup_id: int) -> int:
        return self._rgroup_to_reaction[rgroup_id]

    def synthon_digit(self, rgroup_id: int, synthon_id: int) -> int:
        try:
            return self._digit_of[rgroup_id][synthon_id]
        except KeyError:
            raise LibraryError(
                f"synthon {synthon_id} is not eligible for R-group {rgroup_id}"
            ) from None

    def iter_rgroups(self) -> Iterator[RgroupSpec]:
        for rx in self.reactions:
            yield from rx.rgroups


def check_library(library: CslLibrary) -> None:
    """Raise LibraryError on any violated structural invariant."""
    known = {s.synthon_id for s in library.synthons}
    if len(known) != len(library.synthons):
        raise LibraryError("duplicate synthon ids")
    seen_rgroups: set[int] = set()
    for rx in library.reactions:
        if len(rx.rgroups) < 2:
            raise LibraryError(f"reaction {rx.reaction_id} has fewer than 2 R-groups")
        for rg in rx.rgroups:
            if rg.rgroup_id in seen_rgroups:
                raise LibraryError(f"R-group {rg.rgroup_id} appears in more than one reaction")
            seen_rgroups.add(rg.rgroup_id)
            if not rg.synthon_ids:
                raise LibraryError(f"R-group {rg.rgroup_id} has no eligible synthons")
            if len(set(rg.synthon_ids)) != len(rg.synthon_ids):
                raise LibraryError(f"R-group {rg.rgroup_id} synthon list has duplicates")
            missing = set(rg.synthon_ids) - known
            if missing:
                raise LibraryError(f"R-group {rg.rgroup_id} references unknown synthons {sorted(missing)}")
    product_count(library)  # raises on 64-bit overflow


def product_count(library: CslLibrary) -> int:
    """Total number of products; sum over reactions of the product of R-group sizes."""
    total = 0
    for rx in library.reactions:
        size = 1
        for rg in rx.rgroups:
            size *= len(rg.synthon_ids)
        total += size
    if total > MAX_COUNT:
        raise LibraryError(f"product count {total} exceeds unsigned 64-bit range")
    return total


def encode_index(library: CslLibrary, chi: MultiIndex) -> int:
    """Map a multi-index to its global position in the canonical enumeration."""
    rx = library.reaction(chi.reaction_id)
    if len(chi.assignment) != len(rx.rgroups):
        raise LibraryError(
            f"assignment covers {len(chi.assignment)} R-groups, reaction has {len(rx.rgroups)}"
        )
    idx = 0
    for rg, (rgroup_id, synthon_id) in zip(rx.rgroups, chi.assignment):
        if rgroup_id != rg.rgroup_id:
            raise LibraryError(f"assignment R-group {rgroup_id} does not match {rg.rgroup_id}")
        idx = idx * len(rg.synthon_ids) + library.synthon_digit(rgroup_id, synthon_id)
    return library.reaction_offset(chi.reaction_id) + idx


def decode_index(library: CslLibrary, gidx: int) -> MultiIndex:
    """Exact inverse of encode_index."""
    total = library._reaction_offsets[-1]
    if not 0 <= gidx < total:
        raise LibraryError(f"global index {gidx} out of range [0, {total})")
    # reactions are few; linear scan over cumulative offsets
    t = 0
    while library._reaction_offsets[t + 1] <= gidx:
        t += 1
    rx = library.reactions[t]
    rem = gidx - library._reaction_offsets[t]
    digits = [0] * len(rx.rgroups)
    for j in range(len(rx.rgroups) - 1, -1, -1):
        n = len(rx.rgroups[j].synthon_ids)
        rem, digits[j] = divmod(rem, n)
    assignment = tuple(
        (rg.rgroup_id, rg.synthon_ids[d]) for rg, d in zip(rx.rgroups, digits)
    )
    return MultiIndex(reaction_id=rx.reaction_id, assignment=assignment)


def enumerate_products(library: CslLibrary, start: int, end: int) -> Iterator[MultiIndex]:
    """Yield decode_index(g) for g in [start, end), ascending, without materializing."""
    total = library._reaction_offsets[-1]
    if not 0 <= start <= end <= total:
        raise LibraryError(f"range [{start}, {end}) invalid for product count {total}")
    g = start
    while g < end:
        chi = decode_index(library, g)
        yield chi
        # odometer increment while we stay inside the current reaction
        rx = library.reactions[chi.reaction_id]
        digits = [library.synthon_digit(r, s) for r, s in chi.assignment]
        g += 1
        reaction_end = library.reaction_offset(chi.reaction_id) + library.reaction_size(chi.reaction_id)
        while g < min(end, reaction_end):
            j = len(digits) - 1
            while True:
                digits[j] += 1
                if digits[j] < len(rx.rgroups[j].synthon_ids):
                    break
                digits[j] = 0
                j -= 1
            yield MultiIndex(
                reaction_id=rx.reaction_id,
                assignment=tuple(
                    (rg.rgroup_id, rg.synthon_ids[d]) for rg, d in zip(rx.rgroups, digits)
                ),
            )
            g += 1


def assemble(library: CslLibrary, chi: MultiIndex) -> str:
    """Canonical product token string.

    Attachment markers are resolved positionally by dropping the '*' markers at
    join time; fragments are joined in sorted order so any two assignments with
    the same synthon multiset under the same reaction assemble identically.
    """
    tokens = library.synthon_token
    fragments = sorted(tokens[s].replace("*", "") for _, s in chi.assignment)
    return f"t{chi.reaction_id}|" + ".".join(fragments)


def downsample(library: CslLibrary, per_reaction_fraction: float, seed: int) -> CslLibrary:
    """Uniformly subsample each reaction's synthon lists.

    Uses a per-R-group keep rate of fraction**(1/c) for a c-component reaction
    so the reaction's product count scales by roughly the requested fraction.
    At least one synthon is retained per R-group.
    """
    if not 0.0 < per_reaction_fraction <= 1.0:
        raise LibraryError(f"fraction must be in (0, 1], got {per_reaction_fraction}")
    if per_reaction_fraction == 1.0:
        return library
    rng = np.random.default_rng(seed)
    new_reactions = []
    for rx in library.reactions:
        rate = per_reaction_fraction ** (1.0 / len(rx.rgroups))
        new_rgroups = []
        for rg in rx.rgroups:
            n = len(rg.synthon_ids)
            n_keep = max(1, round(rate * n))
            if n_keep >= n:
                new_rgroups.append(rg)
                continue
            keep = np.sort(rng.choice(n, size=n_keep, replace=False))
            new_rgroups.append(
                RgroupSpec(rg.rgroup_id, tuple(rg.synthon_ids[i] for i in keep))
            )
        new_reactions.append(ReactionSpec(rx.reaction_id, tuple(new_rgroups)))
    return CslLibrary(reactions=tuple(new_reactions), synthons=library.synthons)


@dataclass(frozen=True)
class SyntheticConfig:
    n_reactions: int = 4
    components: tuple[int, ...] = (2, 3)  # cycled across reactions (even 2-/3-way split)
    synthons_per_rgroup: int = 8
    alphabet_size: int = 8
    token_length: int = 6
    share_rate: float = 0.0  # probability an R-group slot reuses an existing synthon


def generate_synthetic(config: SyntheticConfig, seed: int) -> CslLibrary:
    """Deterministic random library; tokens are random strings with one '*' marker."""
    if config.n_reactions < 1 or config.synthons_per_rgroup < 1:
        raise LibraryError("all synthetic config counts must be >= 1")
    rng = np.random.default_rng(seed)
    alphabet = "abcdefghijklmnopqrstuvwxyz"[: config.alphabet_size]
    synthons: list[SynthonRecord] = []
    reactions: list[ReactionSpec] = []
    next_rgroup = 0

    def new_synthon() -> int:
        letters = rng.integers(0, len(alphabet), size=config.token_length)
        body = "".join(alphabet[i] for i in letters)
        cut = int(rng.integers(1, max(2, config.token_length)))
        token = body[:cut] + "*" + body[cut:]
        sid = len(synthons)
        synthons.append(SynthonRecord(sid, token))
        return sid

    for t in range(config.n_reactions):
        c = config.components[t % len(config.components)]
        rgroups = []
        for _ in range(c):
            ids: list[int] = []
            taken: set[int] = set()
            for _ in range(config.synthons_per_rgroup):
                if synthons and rng.random() < config.share_rate:
                    sid = int(rng.integers(0, len(synthons)))
                    if sid in taken:
                        sid = new_synthon()
                else:
                    sid = new_synthon()
                taken.add(sid)
                ids.append(sid)
            rgroups.append(RgroupSpec(next_rgroup, tuple(ids)))
            next_rgroup += 1
        reactions.append(ReactionSpec(t, tuple(rgroups)))
    library = CslLibrary(reactions=tuple(reactions), synthons=tuple(synthons))
    check_library(library)
    return library


# ---------------------------------------------------------------------------
# serialization: line-oriented text format
#
#   cslv1 <n_synthons> <n_rgroups> <n_reactions>
#   S <synthon_id> <token>
#   R <rgroup_id> <synthon_id>...
#   T <reaction_id> <rgroup_id>...
#
# All ids are 0-based. Line order within each record type is id order.
# ---------------------------------------------------------------------------

def serialize_library(library: CslLibrary) -> str:
    n_rgroups = sum(len(rx.rgroups) for rx in library.reactions)
    lines = [f"{LIBRARY_FORMAT_VERSION} {len(library.synthons)} {n_rgroups} {len(library.reactions)}"]
    for s in library.synthons:
        lines.append(f"S {s.synthon_id} {s.token}")
    for rx in library.reactions:
        for rg in rx.rgroups:
            lines.append("R " + str(rg.rgroup_id) + " " + " ".join(map(str, rg.synthon_ids)))
    for rx in library.reactions:
        lines.append(
            "T " + str(rx.reaction_id) + " " + " ".join(str(rg.rgroup_id) for rg in rx.rgroups)
        )
    return "\n".join(lines) + "\n"


def deserialize_library(text: str) -> CslLibrary:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise LibraryError("empty library file")
    header = lines[0].split()
    if len(header) != 4 or header[0] != LIBRARY_FORMAT_VERSION:
        raise LibraryError(f"bad header: {lines[0]!r}")
    n_s, n_r, n_t = map(int, header[1:])
    synthons: list[SynthonRecord] = []
    rgroups: dict[int, RgroupSpec] = {}
    reactions: list[ReactionSpec] = []
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split()
        try:
            if parts[0] == "S":
                synthons.append(SynthonRecord(int(parts[1]), parts[2]))
            elif parts[0] == "R":
                rgroups[int(parts[1])] = RgroupSpec(int(parts[1]), tuple(map(int, parts[2:])))
            elif parts[0] == "T":
                rids = list(map(int, parts[2:]))
                reactions.append(ReactionSpec(int(parts[1]), tuple(rgroups[r] for r in rids)))
            else:
                raise LibraryError(f"line {lineno}: unknown record type {parts[0]!r}")
        except (IndexError, ValueError, KeyError) as exc:
            raise LibraryError(f"line {lineno}: malformed record: {ln!r}") from exc
    if len(synthons) != n_s or len(rgroups) != n_r or len(reactions) != n_t:
        raise LibraryError("header counts do not match record counts")
    library = CslLibrary(reactions=tuple(reactions), synthons=tuple(synthons))
    check_library(library)
    return library


def save_library(library: CslLibrary, path) -> None:
    with open(path, "w") as fh:
        fh.write(serialize_library(library))


def load_library(path) -> CslLibrary:
    with open(path) as fh:
        return deserialize_library(fh.read())


def library_fingerprint(library: CslLibrary) -> str:
    """SHA-256 of the canonical serialization; used to pin downstream artifacts."""
    return hashlib.sha256(serialize_library(library).encode()).hexdigest()
