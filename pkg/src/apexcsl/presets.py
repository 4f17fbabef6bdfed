"""Named constraint bundles shipped as query fragments.

The task names (mw, logp, ...) are labels the user's dataset or oracle must
define; the bundles only carry bounds.
"""

from __future__ import annotations

from .engine import Constraint

PRESET_CONSTRAINTS: dict[str, tuple[Constraint, ...]] = {
    "lipinski": (
        Constraint("mw", upper=500.0),
        Constraint("logp", upper=5.0),
        Constraint("hbd", upper=5.0),
        Constraint("hba", upper=10.0),
    ),
    "veber": (
        Constraint("rotb", upper=10.0),
        Constraint("tpsa", upper=140.0),
    ),
    "pfizer_3_75": (
        Constraint("logp", upper=3.0),
        Constraint("tpsa", lower=75.0),
    ),
    "astex_ro3": (
        Constraint("mw", upper=300.0),
        Constraint("logp", upper=3.0),
        Constraint("hbd", upper=3.0),
        Constraint("hba", upper=3.0),
        Constraint("rotb", upper=3.0),
        Constraint("tpsa", upper=60.0),
    ),
}
