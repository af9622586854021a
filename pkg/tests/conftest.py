"""
Shared fixtures for mgprnn tests.
"""

import json

import numpy as np
import pytest

from mgprnn.config import RunConfig, SyntheticSpec, TrainConfig
from mgprnn.data import EncounterRecord
from mgprnn.mgp import MgpHyperparams, MgpMode


# =============================================================================
# Test Vectors - Deterministic values for reproducible tests
# =============================================================================

TEST_SEED = 20240917

# exp(-1) and exp(-1.5): OU correlations at |dt| = 1, l = 1 and |dt| = 3, l = 2
OU_UNIT_STEP = 0.36787944117144233
OU_THREE_OVER_TWO = 0.22313016014842982

# [[1, 1], [1, 1]] (x) I_2 applied to [1, 2, 3, 4]
KRON_ONES_EYE_RESULT = [4.0, 6.0, 4.0, 6.0]

# Brute-force AU-ROC reference: positives {0.9, 0.4}, negatives {0.8, 0.3, 0.1}
TOY_SCORES = [0.9, 0.8, 0.4, 0.3, 0.1]
TOY_LABELS = [1, 0, 1, 0, 0]
TOY_AUROC = 5.0 / 6.0
TOY_AUPR = 0.5 * 1.0 + 0.5 * (2.0 / 3.0)

TOY_ENCOUNTER_JSON = {
    "id": "toy-001",
    "baseline": [0.5, -1.0],
    "obs": [[0.0, 0, 0.3], [1.5, 1, -0.2], [2.25, 0, 0.1], [4.0, 1, 0.4], [4.5, 0, -0.5]],
    "meds": [[0.0, [1, 0]], [1.5, [0, 1]], [2.0, [1, 1]]],
    "label": 1,
    "event_time": 5.0,
}


def make_encounter(
    enc_id="enc",
    obs=(),
    event_time=4.0,
    label=0,
    baseline=(0.0,),
    meds=(),
    cutoff=None,
):
    """Build a canonical record directly, skipping JSON validation."""
    return EncounterRecord(
        id=enc_id,
        baseline=tuple(float(b) for b in baseline),
        obs=tuple(sorted((float(t), int(m), float(v)) for t, m, v in obs)),
        meds=tuple((float(t), tuple(bits)) for t, bits in meds),
        label=label,
        event_time=float(event_time),
        cutoff=cutoff,
    )


def random_spd(rng, n, shift=None):
    """G G^T + shift * I with G standard normal."""
    g = rng.standard_normal((n, n))
    return g @ g.T + (n if shift is None else shift) * np.eye(n)


# =============================================================================
# Encounter Fixtures
# =============================================================================

@pytest.fixture
def toy_encounter() -> EncounterRecord:
    """Return the parsed toy encounter (two variables, two medication classes)."""
    from mgprnn.data import parse_record

    return parse_record(TOY_ENCOUNTER_JSON)


@pytest.fixture
def toy_encounters() -> list:
    """Return five small seeded encounters over two variables."""
    rng = np.random.default_rng(TEST_SEED)
    records = []
    for i in range(5):
        event_time = float(rng.uniform(3.0, 6.0))
        times = np.sort(rng.uniform(0.0, event_time, 5))
        obs = [(t, int(rng.integers(2)), float(rng.standard_normal())) for t in times]
        meds = [(float(rng.uniform(0.0, event_time)), (1, 0))]
        records.append(
            make_encounter(f"toy{i}", obs, event_time, label=i % 2, baseline=(float(rng.standard_normal()),), meds=meds)
        )
    return records


# =============================================================================
# Model Fixtures
# =============================================================================

@pytest.fixture
def multitask_hyperparams() -> MgpHyperparams:
    """Return two-variable multitask hyperparameters with correlated tasks."""
    hp = MgpHyperparams.initial(2, MgpMode.MULTITASK, lengthscale=2.0, noise=0.1)
    hp.task_factor = np.array([[0.3, 0.0], [0.7, 0.2]])
    return hp


@pytest.fixture
def tiny_train_config() -> TrainConfig:
    """Return a training configuration small enough for unit tests."""
    return TrainConfig(
        learning_rate=0.01,
        minibatch_size=4,
        mc_samples_train=2,
        mc_samples_test=3,
        max_epochs=2,
        patience=2,
        krylov_k=8,
        rnn_hidden=4,
        rnn_layers=1,
        init_lengthscale=2.0,
        seed=TEST_SEED,
    )


# =============================================================================
# Cohort and Run Fixtures
# =============================================================================

@pytest.fixture
def small_synthetic_spec() -> SyntheticSpec:
    """Return a quick-to-generate synthetic cohort spec."""
    return SyntheticSpec(
        num_vars=3,
        num_baseline=2,
        num_meds=2,
        num_encounters=60,
        mean_los_hours=10.0,
        los_dispersion=0.3,
        min_los_hours=2.0,
        obs_intensity=[1.0, 0.5, 0.3],
        med_intensity=0.2,
        summary_window_hours=4.0,
        prevalence=0.3,
        seed=7,
    )


@pytest.fixture
def run_config_path(tmp_path, small_synthetic_spec, tiny_train_config):
    """Write a resolved run configuration for the small cohort and return its path."""
    cfg = RunConfig(train=tiny_train_config, synthetic=small_synthetic_spec)
    cfg.paths.output_dir = str(tmp_path / "run")
    cfg.bench.sizes = [10, 20]
    cfg.bench.krylov_dims = [4]
    cfg.bench.num_vars = 2
    cfg.bench.dense_cap = 15
    cfg.bench.full_rank_max = 10
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg.to_dict()), encoding="utf-8")
    return path
