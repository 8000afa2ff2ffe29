import sys
from datetime import datetime, timedelta

import pytest

from oudrisk import codes
from oudrisk.codes import MedOrder
from oudrisk.cohort import Cohort, Encounter, LabeledPatient, PatientRecord


@pytest.fixture(scope="session")
def tables():
    return codes.load_tables()


def make_encounter(i, dx=(), meds=(), labs=(), events=()):
    return Encounter(f"E{i}", datetime(2012, 1, 1) + timedelta(days=i), tuple(dx),
                     tuple(MedOrder(**m) if isinstance(m, dict) else m for m in meds),
                     tuple(labs), tuple(events))


def make_patient(pid, encounters, label=0, age=40, gender="F", race="white"):
    """LabeledPatient whose feature encounters are exactly ``encounters``."""
    index_enc = make_encounter(len(encounters), dx=("F11.20",) if label else ())
    rec = PatientRecord(pid, gender, race, 2012 - age, tuple(encounters) + (index_enc,))
    return LabeledPatient(rec, label, len(encounters), age)


def make_cohort(patients):
    return Cohort([p for p in patients if p.label == 1], [p for p in patients if p.label == 0])


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance PASS/FAIL lines after the run, whatever the capture mode."""
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
