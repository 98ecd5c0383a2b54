import math

import numpy as np
import pandas as pd
import pytest

from retention_risk.events import ENTITY_COLUMNS, EVENT_COLUMNS, NO_DAY, EventLog, to_day
from retention_risk.synthetic import SyntheticConfig, generate_synthetic_cohort


def make_log(entities, events, date_range=("2015-01-01", "2017-12-31")) -> EventLog:
    """Build a log from terse tuples.

    entities: (entity_id, birth, gender, race, zip, transmission, diagnosis); dates as ISO text or None
    events:   (entity_id, event_type, date, numeric_value or None, category or None)
    """
    ent = pd.DataFrame(
        [[e[0], NO_DAY if e[1] is None else to_day(e[1]), *e[2:6], NO_DAY if e[6] is None else to_day(e[6])]
         for e in entities],
        columns=list(ENTITY_COLUMNS),
    )
    ev = pd.DataFrame(
        [[e[0], e[1], to_day(e[2]), math.nan if e[3] is None else float(e[3]), e[4]] for e in events],
        columns=list(EVENT_COLUMNS),
    )
    return EventLog.build(ent, ev, date_range)


def person(eid, birth="1980-01-01", gender="male", race="Black", zip_code="60601", tc="MSM", dx="2010-01-01"):
    return (eid, birth, gender, race, zip_code, tc, dx)


@pytest.fixture(scope="session")
def small_cohort():
    cfg = SyntheticConfig(n_entities=300, date_range=("2012-01-01", "2015-12-31"), seed=3)
    return generate_synthetic_cohort(cfg)


@pytest.fixture(scope="session")
def small_log(small_cohort):
    return small_cohort[0]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# (criterion, line) pairs appended by test_acceptance
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
