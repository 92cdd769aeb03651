import pytest
from hypothesis import HealthCheck, settings

from sparsecast.cohort import CohortConfig, gen_adherence_events, gen_cohort, gen_sensor_stream
from sparsecast.features import ALL_COLUMNS
from sparsecast.ingest import merge_streams
from tests.helpers import ACCEPTANCE_LINES, make_windows

settings.register_profile("repo", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def windows_factory():
    return make_windows


@pytest.fixture(scope="session")
def small_cohort():
    return gen_cohort(CohortConfig(n_participants=2, days_per_participant=4, doses_per_day=2, seed=11))


@pytest.fixture(scope="session")
def small_stream(small_cohort):
    profile = small_cohort.profiles[0]
    cfg = small_cohort.config
    sensor = gen_sensor_stream(profile, cfg.days_per_participant, cfg.seed, first_date=cfg.first_date,
                               utc_offset=cfg.utc_offset)
    events = gen_adherence_events(profile, sensor, cfg)
    return sensor, events


@pytest.fixture(scope="session")
def small_merged(small_stream):
    sensor, events = small_stream
    return merge_streams(sensor, events).decimate(10)


@pytest.fixture
def all_columns():
    return list(ALL_COLUMNS)


@pytest.fixture(scope="session")
def tiny_prepared(tmp_path_factory):
    """Three participants, three days each, prepared at a short window length."""
    from sparsecast.balance import AdasynConfig
    from sparsecast.pipeline import PrepareConfig, generated_source, prepare

    cohort = gen_cohort(CohortConfig(n_participants=3, days_per_participant=3, doses_per_day=2, seed=8))
    sources = {p.participant_id: generated_source(cohort, p) for p in cohort.profiles}
    cfg = PrepareConfig(window_len=20, sample_stride=30, leakage_probes=20)
    return prepare(sources, tmp_path_factory.mktemp("prepared"), cfg, AdasynConfig(k=3, seed=8))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
