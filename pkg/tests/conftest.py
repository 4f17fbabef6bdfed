import numpy as np
import pytest

from apexcsl import csl, props


@pytest.fixture(scope="session")
def small_library():
    # 2 reactions (2- and 3-component), 150 products
    return csl.generate_synthetic(
        csl.SyntheticConfig(n_reactions=2, components=(2, 3), synthons_per_rgroup=5), seed=11
    )


@pytest.fixture(scope="session")
def medium_library():
    # mixed 2-/3-component, ~20k products
    return csl.generate_synthetic(
        csl.SyntheticConfig(n_reactions=4, components=(2, 3), synthons_per_rgroup=12), seed=7
    )


@pytest.fixture(scope="session")
def small_oracle(small_library):
    return props.make_default_oracle(small_library, seed=3)


def f32_round_latents(oracle):
    """Make oracle latents exactly float32-representable so a perfect
    contribution table reproduces oracle sums bit-for-bit."""
    for task in oracle.tasks:
        task.latent = task.latent.astype(np.float32).astype(np.float64)
    return oracle


def perfect_additive_table(oracle, library, task_names):
    """Contribution table whose rows are the oracle's per-synthon latents;
    exact for additive tasks (latents must be f32-representable)."""
    from apexcsl import engine

    member_ids, rg_offsets, rg_ids = [], [0], []
    for rg in library.iter_rgroups():
        rg_ids.append(rg.rgroup_id)
        member_ids.extend(rg.synthon_ids)
        rg_offsets.append(len(member_ids))
    member_ids = np.asarray(member_ids)
    values = np.stack([oracle.task(t).latent[member_ids] for t in task_names]).astype(np.float32)
    return engine.ContributionTable(
        values=values,
        biases=np.zeros(len(task_names)),
        task_names=list(task_names),
        member_ids=member_ids,
        rg_offsets=np.asarray(rg_offsets),
        rg_ids=np.asarray(rg_ids),
        fingerprint=csl.library_fingerprint(library),
    )
