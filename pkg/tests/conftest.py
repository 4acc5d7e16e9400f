from pathlib import Path
import sys

import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from gmmt.tensor import set_finite_checks, set_precision  # noqa: E402

GOLDEN_DIR = ROOT / "tests" / "goldens"


@pytest.fixture
def golden():
    """Compare bytes against tests/goldens/<name>; a missing file is recorded and the test skipped.

    With ``exact=False`` the caller compares the returned stored bytes itself.
    """

    def check(name: str, payload: bytes, *, exact: bool = True) -> bytes:
        path = GOLDEN_DIR / name
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(payload)
            pytest.skip(f"Recorded new golden file {path}; commit it.")
        stored = path.read_bytes()
        if exact:
            assert payload == stored, f"{name} no longer matches its golden file"
        return stored

    return check


@pytest.fixture(autouse=True)
def float64_with_finite_checks():
    set_precision("float64")
    set_finite_checks(True)
    yield
    set_precision("float64")
    set_finite_checks(False)


@pytest.fixture
def tiny_config():
    """Factory for a run small enough to train inside a unit test."""
    from gmmt.config import RunConfig, ScheduleConfig
    from gmmt.fusion import Mode, ScenarioConfig
    from gmmt.networks import DenoiserConfig
    from gmmt.trainers import TrainConfig

    def build(mode: Mode = Mode.DM, *, size: int = 8, eval_count: int = 6, **run_fields) -> RunConfig:
        denoiser = DenoiserConfig(
            n=1,
            base_channels=4,
            feature_channels=2,
            height=size,
            width=size,
            time_embed_dim=4,
            num_timesteps=50,
            disc_channels=4,
            head_channels=4,
        )
        return RunConfig(
            schedule=ScheduleConfig(num_timesteps=50),
            denoiser=denoiser,
            trainer=TrainConfig(mode=mode, epochs=1, steps_per_epoch=2, batch_size=2, warmup_epochs=1),
            scenario=ScenarioConfig(eval_count=eval_count),
            **run_fields,
        )

    return build
