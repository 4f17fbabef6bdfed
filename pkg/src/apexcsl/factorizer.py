"""Hierarchy encoders that reconstruct surrogate embeddings from multi-indices.

Synthons are encoded once each; deep-set encoders summarize R-groups and
reactions; a per-R-group key matrix times a per-synthon value vector yields
one associative embedding per eligible (R-group, synthon) pair. A product's
reconstructed embedding is just the sum of its pairs' associative embeddings,
which is what makes exhaustive scoring cheap downstream.

Deep-set pooling is a sequential mean over members, so permutation invariance
holds to ~1e-6 relative tolerance (float summation order), not bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blobio import load_blob, save_blob
from .csl import CslLibrary, MultiIndex, decode_index, library_fingerprint, product_count
from .nn import MLP, Adam
from .props import FeatureConfig, library_synthon_features, product_feature_matrix
from .surrogate import SurrogateModel


class FactorizerError(RuntimeError):
    pass


@dataclass(frozen=True)
class FactorizerDims:
    d_s: int = 64
    d_r: int = 64
    d_t: int = 64
    d_u: int = 32
    d: int = 64


class DeepSet:
    """Elementwise feature map, mean pooling, post-pooling network."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, mode: str, hidden: int = 64):
        if mode == "linear":
            self.phi = MLP([d_in, d_out], rng)
            self.rho = MLP([d_out, d_out], rng)
        else:
            self.phi = MLP([d_in, hidden, d_out], rng)
            self.rho = MLP([d_out, hidden, d_out], rng)

    @property
    def params(self) -> list[np.ndarray]:
        return self.phi.params + self.rho.params

    def forward_cache(self, rows: np.ndarray, offsets: np.ndarray):
        """rows: concatenated member features; offsets: (n_groups+1,) slice bounds."""
        sizes = np.diff(offsets).astype(np.float64)
        phi_out, phi_cache = self.phi.forward_cache(rows)
        pooled = np.add.reduceat(phi_out, offsets[:-1], axis=0) / sizes[:, None]
        out, rho_cache = self.rho.forward_cache(pooled)
        return out, (phi_cache, rho_cache, sizes)

    def backward(self, cache, dout: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        phi_cache, rho_cache, sizes = cache
        rho_grads, dpool = self.rho.backward(rho_cache, dout)
        drows = np.repeat(dpool / sizes[:, None], sizes.astype(int), axis=0)
        phi_grads, din = self.phi.backward(phi_cache, drows)
        return phi_grads + rho_grads, din


@dataclass
class LibraryContext:
    """Flat array view of a library's hierarchy, shared by forward and backward."""

    features: np.ndarray          # (|S|, p) hashed synthon features
    member_ids: np.ndarray        # concatenated synthon ids per R-group (pair-row order)
    rg_offsets: np.ndarray        # (n_rg+1,) offsets into member_ids / pair rows
    rg_parent: np.ndarray         # (n_rg,) positional reaction index per R-group
    rx_offsets: np.ndarray        # (n_rx+1,) offsets into the R-group axis
    rg_pos: dict[int, int]        # rgroup_id -> positional index
    fingerprint: str

    @property
    def n_pairs(self) -> int:
        return len(self.member_ids)


def build_context(library: CslLibrary, feature_config: FeatureConfig) -> LibraryContext:
    features = library_synthon_features(library, feature_config)
    member_ids, rg_offsets, rg_parent, rx_offsets = [], [0], [], [0]
    rg_pos: dict[int, int] = {}
    for ti, rx in enumerate(library.reactions):
        for rg in rx.rgroups:
            rg_pos[rg.rgroup_id] = len(rg_parent)
            member_ids.extend(rg.synthon_ids)
            rg_offsets.append(len(member_ids))
            rg_parent.append(ti)
        rx_offsets.append(len(rg_parent))
    return LibraryContext(
        features=features,
        member_ids=np.asarray(member_ids),
        rg_offsets=np.asarray(rg_offsets),
        rg_parent=np.asarray(rg_parent),
        rx_offsets=np.asarray(rx_offsets),
        rg_pos=rg_pos,
        fingerprint=library_fingerprint(library),
    )


class Factorizer:
    def __init__(
        self,
        feature_dim: int,
        dims: FactorizerDims,
        rng: np.random.Generator,
        mode: str = "mlp",
        feature_config: FeatureConfig = FeatureConfig(),
    ):
        if mode not in ("mlp", "linear"):
            raise ValueError(f"unknown factorizer mode {mode!r}")
        self.dims = dims
        self.mode = mode
        self.feature_config = feature_config
        if mode == "linear":
            self.synthon_encoder = MLP([feature_dim, dims.d_s], rng)
            self.value_encoder = MLP([dims.d_s, dims.d_u], rng)
            self.key_encoder = MLP([dims.d_r + dims.d_t, dims.d * dims.d_u], rng)
        else:
            self.synthon_encoder = MLP([feature_dim, 128, dims.d_s], rng)
            self.value_encoder = MLP([dims.d_s, 64, dims.d_u], rng)
            self.key_encoder = MLP([dims.d_r + dims.d_t, 64, dims.d * dims.d_u], rng)
        self.rgroup_encoder = DeepSet(dims.d_s, dims.d_r, rng, mode)
        self.reaction_encoder = DeepSet(dims.d_r, dims.d_t, rng, mode)

    @property
    def param_groups(self) -> list[list[np.ndarray]]:
        return [
            self.synthon_encoder.params,
            self.rgroup_encoder.params,
            self.reaction_encoder.params,
            self.value_encoder.params,
            self.key_encoder.params,
        ]

    @property
    def params(self) -> list[np.ndarray]:
        return [p for group in self.param_groups for p in group]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.reshape(-1) for p in self.params])

    def set_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for p in self.params:
            p[...] = flat[pos : pos + p.size].reshape(p.shape)
            pos += p.size

    def forward_cache(self, ctx: LibraryContext):
        """Full-hierarchy forward; returns the pair-row matrix u and all caches."""
        h_s, c_syn = self.synthon_encoder.forward_cache(ctx.features)
        h_r, c_rg = self.rgroup_encoder.forward_cache(h_s[ctx.member_ids], ctx.rg_offsets)
        h_t, c_rx = self.reaction_encoder.forward_cache(h_r, ctx.rx_offsets)
        v, c_val = self.value_encoder.forward_cache(h_s)
        key_in = np.concatenate([h_r, h_t[ctx.rg_parent]], axis=1)
        k_flat, c_key = self.key_encoder.forward_cache(key_in)
        K = k_flat.reshape(len(h_r), self.dims.d, self.dims.d_u)
        u = np.empty((ctx.n_pairs, self.dims.d))
        for j in range(len(h_r)):
            lo, hi = ctx.rg_offsets[j], ctx.rg_offsets[j + 1]
            u[lo:hi] = v[ctx.member_ids[lo:hi]] @ K[j].T
        cache = (h_s, h_r, h_t, v, K, c_syn, c_rg, c_rx, c_val, c_key)
        return u, cache

    def backward(self, ctx: LibraryContext, cache, du: np.ndarray) -> list[np.ndarray]:
        """Gradients of a scalar loss given its cotangent on the pair rows u."""
        h_s, h_r, h_t, v, K, c_syn, c_rg, c_rx, c_val, c_key = cache
        n_rg = len(h_r)
        dK = np.zeros_like(K)
        dv = np.zeros_like(v)
        for j in range(n_rg):
            lo, hi = ctx.rg_offsets[j], ctx.rg_offsets[j + 1]
            members = ctx.member_ids[lo:hi]
            du_block = du[lo:hi]
            dK[j] = du_block.T @ v[members]
            np.add.at(dv, members, du_block @ K[j])
        g_key, dkey_in = self.key_encoder.backward(c_key, dK.reshape(n_rg, -1))
        dh_r = dkey_in[:, : self.dims.d_r].copy()
        dh_t = np.zeros_like(h_t)
        np.add.at(dh_t, ctx.rg_parent, dkey_in[:, self.dims.d_r :])
        g_val, dh_s_val = self.value_encoder.backward(c_val, dv)
        g_rx, dh_r_from_rx = self.reaction_encoder.backward(c_rx, dh_t)
        dh_r += dh_r_from_rx
        g_rg, dmember = self.rgroup_encoder.backward(c_rg, dh_r)
        dh_s = dh_s_val
        np.add.at(dh_s, ctx.member_ids, dmember)
        g_syn, _ = self.synthon_encoder.backward(c_syn, dh_s)
        return g_syn + g_rg + g_rx + g_val + g_key


@dataclass
class HierarchyCache:
    h_s: np.ndarray               # (|S|, d_s)
    h_r: np.ndarray               # (n_rg, d_r)
    h_t: np.ndarray               # (n_rx, d_t)
    u: np.ndarray                 # (n_pairs, d) associative embeddings, pair-row order
    member_ids: np.ndarray
    rg_offsets: np.ndarray
    rg_pos: dict[int, int]
    fingerprint: str
    synthon_encoder_evals: int

    def pair_row(self, library: CslLibrary, rgroup_id: int, synthon_id: int) -> int:
        j = self.rg_pos.get(rgroup_id)
        if j is None:
            raise FactorizerError(f"R-group {rgroup_id} not in cache")
        return int(self.rg_offsets[j]) + library.synthon_digit(rgroup_id, synthon_id)


def encode_hierarchy(factorizer: Factorizer, library: CslLibrary) -> HierarchyCache:
    """One synthon-encoder pass per synthon, then R-group, reaction, and pair stages."""
    ctx = build_context(library, factorizer.feature_config)
    u, cache = factorizer.forward_cache(ctx)
    h_s, h_r, h_t = cache[0], cache[1], cache[2]
    return HierarchyCache(
        h_s=h_s,
        h_r=h_r,
        h_t=h_t,
        u=u,
        member_ids=ctx.member_ids,
        rg_offsets=ctx.rg_offsets,
        rg_pos=ctx.rg_pos,
        fingerprint=ctx.fingerprint,
        synthon_encoder_evals=len(library.synthons),
    )


def reconstruct(cache: HierarchyCache, library: CslLibrary, chi: MultiIndex) -> np.ndarray:
    """Sum of the assignment's associative embeddings, in R-group order."""
    out = np.zeros(cache.u.shape[1])
    for rgroup_id, synthon_id in chi.assignment:
        out = out + cache.u[cache.pair_row(library, rgroup_id, synthon_id)]
    return out


@dataclass(frozen=True)
class FactorizerTrainConfig:
    steps: int = 2000
    batch_size: int = 256
    lr: float = 1e-3
    lr_decay: float = 1.0
    seed: int = 0
    dims: FactorizerDims = FactorizerDims()
    mode: str = "mlp"
    sampling: str = "global_uniform"  # or "per_reaction" (reactions weighted equally)

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")


def _sample_chis(
    library: CslLibrary, n: int, rng: np.random.Generator, sampling: str
) -> list[MultiIndex]:
    total = product_count(library)
    if sampling == "global_uniform":
        gidxs = rng.integers(0, total, size=n)
    elif sampling == "per_reaction":
        ts = rng.integers(0, len(library.reactions), size=n)
        gidxs = [
            library.reaction_offset(int(t)) + int(rng.integers(0, library.reaction_size(int(t))))
            for t in ts
        ]
    else:
        raise ValueError(f"unknown sampling {sampling!r}")
    return [decode_index(library, int(g)) for g in gidxs]


def reconstruction_loss_and_grads(
    factorizer: Factorizer,
    ctx: LibraryContext,
    library: CslLibrary,
    chis: list[MultiIndex],
    targets: np.ndarray,
) -> tuple[float, list[np.ndarray]]:
    """Mean squared embedding reconstruction error over a fixed multi-index batch."""
    u, cache = factorizer.forward_cache(ctx)
    flat_rows, flat_chi = [], []
    for i, chi in enumerate(chis):
        for r, s in chi.assignment:
            flat_rows.append(int(ctx.rg_offsets[ctx.rg_pos[r]]) + library.synthon_digit(r, s))
            flat_chi.append(i)
    flat_rows = np.asarray(flat_rows)
    flat_chi = np.asarray(flat_chi)
    n = len(chis)
    pred = np.zeros((n, u.shape[1]))
    np.add.at(pred, flat_chi, u[flat_rows])
    resid = pred - targets
    loss = float(np.sum(resid * resid)) / n
    du = np.zeros_like(u)
    np.add.at(du, flat_rows, (2.0 / n) * resid[flat_chi])
    grads = factorizer.backward(ctx, cache, du)
    return loss, grads


def train_factorizer(
    library: CslLibrary,
    surrogate: SurrogateModel,
    config: FactorizerTrainConfig,
) -> Factorizer:
    """Distill the frozen surrogate's embedding map into the hierarchy encoders."""
    checksum_before = surrogate.checksum()
    rng = np.random.default_rng(config.seed)
    fc = surrogate.feature_config
    dims = config.dims
    if dims.d != surrogate.d:
        dims = FactorizerDims(dims.d_s, dims.d_r, dims.d_t, dims.d_u, surrogate.d)
    factorizer = Factorizer(fc.p, dims, rng, mode=config.mode, feature_config=fc)
    ctx = build_context(library, fc)
    syn_feats = ctx.features
    opt = Adam(factorizer.params, lr=config.lr)

    for step in range(config.steps):
        opt.lr = config.lr * (config.lr_decay ** (step / max(1, config.steps)))
        chis = _sample_chis(library, config.batch_size, rng, config.sampling)
        feats = product_feature_matrix_cached(library, chis, fc, syn_feats)
        targets = surrogate.encoder.forward(feats)
        loss, grads = reconstruction_loss_and_grads(factorizer, ctx, library, chis, targets)
        if not np.isfinite(loss):
            raise FactorizerError(f"non-finite reconstruction loss at step {step}: {loss}")
        opt.step(factorizer.params, grads)

    if surrogate.checksum() != checksum_before:
        raise FactorizerError("surrogate parameters changed during factorizer training")
    return factorizer


def product_feature_matrix_cached(
    library: CslLibrary,
    chis: list[MultiIndex],
    feature_config: FeatureConfig,
    synthon_matrix: np.ndarray,
) -> np.ndarray:
    from .props import product_features

    return np.stack(
        [product_features(library, chi, feature_config, synthon_matrix) for chi in chis]
    )


def factorization_gap(
    factorizer: Factorizer,
    surrogate: SurrogateModel,
    library: CslLibrary,
    sample_size: int,
    seed: int,
) -> dict[str, float]:
    """Mean and p95 of the embedding reconstruction distance on a uniform sample."""
    rng = np.random.default_rng(seed)
    chis = _sample_chis(library, sample_size, rng, "global_uniform")
    cache = encode_hierarchy(factorizer, library)
    feats = product_feature_matrix_cached(
        library, chis, surrogate.feature_config, library_synthon_features(library, surrogate.feature_config)
    )
    target = surrogate.encoder.forward(feats)
    recon = np.stack([reconstruct(cache, library, chi) for chi in chis])
    dist = np.linalg.norm(target - recon, axis=1)
    emb_rms = float(np.sqrt(np.mean(target * target)))
    return {
        "mean": float(dist.mean()),
        "p95": float(np.quantile(dist, 0.95)),
        "embedding_rms": emb_rms,
    }


CHECKPOINT_VERSION = 1


def save_factorizer(factorizer: Factorizer, path) -> None:
    d = factorizer.dims
    meta = {
        "kind": "factorizer",
        "version": CHECKPOINT_VERSION,
        "mode": factorizer.mode,
        "dims": [d.d_s, d.d_r, d.d_t, d.d_u, d.d],
        "feature_dim": factorizer.synthon_encoder.dims[0],
        "feature_config": {
            "p": factorizer.feature_config.p,
            "q": factorizer.feature_config.q,
            "seed": factorizer.feature_config.seed,
        },
    }
    arrays = {f"p_{i}": p for i, p in enumerate(factorizer.params)}
    save_blob(path, meta, arrays)


def load_factorizer(path) -> Factorizer:
    meta, arrays = load_blob(path)
    if meta.get("kind") != "factorizer" or meta.get("version") != CHECKPOINT_VERSION:
        raise FactorizerError(f"{path}: not a version-{CHECKPOINT_VERSION} factorizer checkpoint")
    fc = meta["feature_config"]
    factorizer = Factorizer(
        meta["feature_dim"],
        FactorizerDims(*meta["dims"]),
        np.random.default_rng(0),
        mode=meta["mode"],
        feature_config=FeatureConfig(p=fc["p"], q=fc["q"], seed=fc["seed"]),
    )
    params = factorizer.params
    for i, p in enumerate(params):
        p[...] = arrays[f"p_{i}"]
    return factorizer


def save_cache(cache: HierarchyCache, path) -> None:
    """Dense export of the associative embeddings with a pair-row index header."""
    rg_ids = np.asarray(sorted(cache.rg_pos, key=cache.rg_pos.get))
    meta = {
        "kind": "hierarchy_cache",
        "version": CHECKPOINT_VERSION,
        "fingerprint": cache.fingerprint,
        "synthon_encoder_evals": cache.synthon_encoder_evals,
    }
    save_blob(
        path,
        meta,
        {
            "u": cache.u,
            "h_s": cache.h_s,
            "h_r": cache.h_r,
            "h_t": cache.h_t,
            "member_ids": cache.member_ids,
            "rg_offsets": cache.rg_offsets,
            "rg_ids": rg_ids,
        },
    )


def load_cache(path) -> HierarchyCache:
    meta, arrays = load_blob(path)
    if meta.get("kind") != "hierarchy_cache":
        raise FactorizerError(f"{path}: not a hierarchy cache")
    rg_pos = {int(r): i for i, r in enumerate(arrays["rg_ids"])}
    return HierarchyCache(
        h_s=arrays["h_s"],
        h_r=arrays["h_r"],
        h_t=arrays["h_t"],
        u=arrays["u"],
        member_ids=arrays["member_ids"],
        rg_offsets=arrays["rg_offsets"],
        rg_pos=rg_pos,
        fingerprint=meta["fingerprint"],
        synthon_encoder_evals=meta["synthon_encoder_evals"],
    )
