"""Multi-task surrogate: a feedforward encoder with per-task linear heads.

Training perturbs each example's embedding with fresh isotropic noise before
the linear head, so the learned embedding space tolerates the reconstruction
error later introduced when the factorizer replaces the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .blobio import load_blob, save_blob
from .csl import CslLibrary
from .nn import MLP, Adam, params_checksum
from .props import FeatureConfig, LabeledDataset, product_feature_matrix

DEFAULT_EMBEDDING_DIM = 64


class SurrogateError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    # None resolves to 0.1 * embedding RMS, measured on a warmup pass
    sigma: float | None = None


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 256
    lr: float = 3e-3
    lr_decay: float = 1.0  # multiplicative per-epoch step size schedule
    seed: int = 0
    noise: NoiseConfig = NoiseConfig()
    val_split: float = 0.1
    noise_draws: int = 1
    encoder: str = "mlp"  # "mlp" or "linear" (single affine map, no bias)
    hidden: tuple[int, ...] = (128, 128)
    embedding_dim: int = DEFAULT_EMBEDDING_DIM

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.noise_draws < 1:
            raise ValueError("epochs, batch_size, noise_draws must be positive")
        if not 0.0 < self.val_split < 1.0:
            raise ValueError("val_split must be in (0, 1)")


@dataclass
class SurrogateModel:
    encoder: MLP
    head_w: np.ndarray  # (n_tasks, d)
    head_b: np.ndarray  # (n_tasks,)
    task_names: list[str]
    feature_config: FeatureConfig = FeatureConfig()

    @property
    def d(self) -> int:
        return self.encoder.dims[-1]

    @property
    def feature_dim(self) -> int:
        return self.encoder.dims[0]

    def task_index(self, name: str) -> int:
        try:
            return self.task_names.index(name)
        except ValueError:
            raise SurrogateError(f"unknown task {name!r}") from None

    def checksum(self) -> str:
        return params_checksum([self.encoder.params, [self.head_w, self.head_b]])


def encode(model: SurrogateModel, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    single = features.ndim == 1
    if single:
        features = features[None, :]
    if features.shape[1] != model.feature_dim:
        raise SurrogateError(
            f"feature dimension {features.shape[1]} != model input {model.feature_dim}"
        )
    out = model.encoder.forward(features)
    return out[0] if single else out


def predict(model: SurrogateModel, features: np.ndarray, task: str) -> float | np.ndarray:
    i = model.task_index(task)
    emb = encode(model, features)
    return emb @ model.head_w[i] + model.head_b[i]


def surrogate_loss_and_grads(
    encoder: MLP,
    head_w: np.ndarray,
    head_b: np.ndarray,
    X: np.ndarray,
    task_idx: np.ndarray,
    y: np.ndarray,
    eps: np.ndarray,
) -> tuple[float, list[np.ndarray], np.ndarray, np.ndarray]:
    """Mean squared error of the noisy-embedding objective for one fixed noise draw.

    Returns (loss, encoder grads, head weight grads, head bias grads). Shared
    by the trainer and the finite-difference gradient check.
    """
    n = X.shape[0]
    emb, cache = encoder.forward_cache(X)
    noisy = emb + eps
    w = head_w[task_idx]
    pred = np.einsum("nd,nd->n", noisy, w) + head_b[task_idx]
    err = pred - y
    loss = float(err @ err) / n

    dpred = 2.0 * err / n
    dW = np.zeros_like(head_w)
    db = np.zeros_like(head_b)
    np.add.at(dW, task_idx, dpred[:, None] * noisy)
    np.add.at(db, task_idx, dpred)
    demb = dpred[:, None] * w
    enc_grads, _ = encoder.backward(cache, demb)
    return loss, enc_grads, dW, db


def _build_examples(dataset: LabeledDataset, library: CslLibrary, feature_config: FeatureConfig):
    """Deduplicate multi-indices into a feature matrix plus per-example rows."""
    chis = []
    chi_row: dict = {}
    task_names: list[str] = []
    task_of: dict[str, int] = {}
    rows, tasks, ys = [], [], []
    for row in dataset.rows:
        key = (row.chi.reaction_id, row.chi.synthon_ids())
        if key not in chi_row:
            chi_row[key] = len(chis)
            chis.append(row.chi)
        if row.task not in task_of:
            task_of[row.task] = len(task_names)
            task_names.append(row.task)
        rows.append(chi_row[key])
        tasks.append(task_of[row.task])
        ys.append(row.value)
    X = product_feature_matrix(library, chis, feature_config)
    return X, np.asarray(rows), np.asarray(tasks), np.asarray(ys, dtype=np.float64), task_names


def _make_encoder(config: TrainConfig, feature_dim: int, rng: np.random.Generator) -> MLP:
    if config.encoder == "linear":
        return MLP([feature_dim, config.embedding_dim], rng, bias=False)
    if config.encoder == "mlp":
        dims = [feature_dim, *config.hidden, config.embedding_dim]
        return MLP(dims, rng, bias=True)
    raise ValueError(f"unknown encoder kind {config.encoder!r}")


def train_surrogate(
    dataset: LabeledDataset,
    library: CslLibrary,
    config: TrainConfig,
    feature_config: FeatureConfig = FeatureConfig(),
) -> SurrogateModel:
    if not dataset.rows:
        raise SurrogateError("empty dataset")
    X, feat_rows, task_idx, y, task_names = _build_examples(dataset, library, feature_config)
    n_tasks = len(task_names)
    n = len(task_idx)
    for t in range(n_tasks):
        if not np.any(task_idx == t):
            raise SurrogateError(f"no examples for task {task_names[t]!r}")

    rng = np.random.default_rng(config.seed)
    encoder = _make_encoder(config, X.shape[1], rng)
    head_w = rng.standard_normal((n_tasks, config.embedding_dim)) * 0.01
    head_b = np.zeros(n_tasks)

    # standardize targets per task; heads are unstandardized on export
    mean = np.zeros(n_tasks)
    std = np.ones(n_tasks)
    for t in range(n_tasks):
        sel = task_idx == t
        mean[t] = y[sel].mean()
        s = y[sel].std()
        std[t] = s if s > 0 else 1.0
    y_std = (y - mean[task_idx]) / std[task_idx]

    perm = rng.permutation(n)
    n_val = max(1, int(round(config.val_split * n))) if n > 1 else 0
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        train_idx, val_idx = perm, perm

    sigma = config.noise.sigma
    if sigma is None:
        warm = encoder.forward(X[feat_rows[train_idx[: min(len(train_idx), 1024)]]])
        sigma = 0.1 * float(np.sqrt(np.mean(warm * warm)))

    params = encoder.params + [head_w, head_b]
    opt = Adam(params, lr=config.lr)
    best_val = np.inf
    best = [p.copy() for p in params]

    for epoch in range(config.epochs):
        opt.lr = config.lr * (config.lr_decay**epoch)
        order = rng.permutation(len(train_idx))
        for start in range(0, len(order), config.batch_size):
            batch = train_idx[order[start : start + config.batch_size]]
            bx = X[feat_rows[batch]]
            bt = task_idx[batch]
            by = y_std[batch]
            agg = None
            loss = 0.0
            for _ in range(config.noise_draws):
                eps = sigma * rng.standard_normal((len(batch), config.embedding_dim)) if sigma > 0 else np.zeros((len(batch), config.embedding_dim))
                l, eg, dW, db = surrogate_loss_and_grads(encoder, head_w, head_b, bx, bt, by, eps)
                loss += l
                draws = eg + [dW, db]
                if agg is None:
                    agg = draws
                else:
                    for a, g in zip(agg, draws):
                        a += g
            loss /= config.noise_draws
            if not np.isfinite(loss):
                raise SurrogateError(f"non-finite training loss at epoch {epoch}: {loss}")
            grads = [g / config.noise_draws for g in agg]
            opt.step(params, grads)

        vx = X[feat_rows[val_idx]]
        vemb = encoder.forward(vx)
        vpred = np.einsum("nd,nd->n", vemb, head_w[task_idx[val_idx]]) + head_b[task_idx[val_idx]]
        verr = vpred - y_std[val_idx]
        val_loss = float(verr @ verr) / max(1, len(val_idx))
        if val_loss < best_val:
            best_val = val_loss
            best = [p.copy() for p in params]

    for p, b in zip(params, best):
        p[...] = b

    # fold per-task standardization back into the heads
    head_w_out = head_w * std[:, None]
    head_b_out = head_b * std + mean
    return SurrogateModel(
        encoder=encoder,
        head_w=head_w_out,
        head_b=head_b_out,
        task_names=task_names,
        feature_config=feature_config,
    )


def evaluate_r2(model: SurrogateModel, dataset: LabeledDataset, library: CslLibrary) -> dict[str, float | None]:
    """Coefficient of determination per task; None when the target has zero variance."""
    if not dataset.rows:
        raise SurrogateError("empty dataset")
    X, feat_rows, task_idx, y, task_names = _build_examples(dataset, library, model.feature_config)
    emb = encode(model, X)
    out: dict[str, float | None] = {}
    for t, name in enumerate(task_names):
        i = model.task_index(name)
        sel = task_idx == t
        pred = emb[feat_rows[sel]] @ model.head_w[i] + model.head_b[i]
        truth = y[sel]
        ss_tot = float(np.sum((truth - truth.mean()) ** 2))
        if ss_tot == 0.0:
            out[name] = None
            continue
        ss_res = float(np.sum((truth - pred) ** 2))
        out[name] = 1.0 - ss_res / ss_tot
    return out


CHECKPOINT_VERSION = 1


def save_surrogate(model: SurrogateModel, path) -> None:
    meta = {
        "kind": "surrogate",
        "version": CHECKPOINT_VERSION,
        "dims": model.encoder.dims,
        "bias": model.encoder.bias,
        "task_names": model.task_names,
        "feature_config": {
            "p": model.feature_config.p,
            "q": model.feature_config.q,
            "seed": model.feature_config.seed,
        },
    }
    arrays = {f"enc_{i}": p for i, p in enumerate(model.encoder.params)}
    arrays["head_w"] = model.head_w
    arrays["head_b"] = model.head_b
    save_blob(path, meta, arrays)


def load_surrogate(path) -> SurrogateModel:
    meta, arrays = load_blob(path)
    if meta.get("kind") != "surrogate" or meta.get("version") != CHECKPOINT_VERSION:
        raise SurrogateError(f"{path}: not a version-{CHECKPOINT_VERSION} surrogate checkpoint")
    encoder = MLP(meta["dims"], np.random.default_rng(0), bias=meta["bias"])
    encoder.params = [arrays[f"enc_{i}"] for i in range(len(encoder.params))]
    fc = meta["feature_config"]
    return SurrogateModel(
        encoder=encoder,
        head_w=arrays["head_w"],
        head_b=arrays["head_b"],
        task_names=list(meta["task_names"]),
        feature_config=FeatureConfig(p=fc["p"], q=fc["q"], seed=fc["seed"]),
    )
