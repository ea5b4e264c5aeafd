import os
from pathlib import Path

import numpy as np
import pytest

from fcbma.data import ColumnRoles, Dataset, ingest
from fcbma.partition import Partition

MOTORINS_LEVELS = {
    "Kilometres": tuple(str(i) for i in range(1, 6)),
    "Zone": tuple(str(i) for i in range(1, 8)),
    "Bonus": tuple(str(i) for i in range(1, 8)),
    "Make": tuple(str(i) for i in range(1, 10)),
}


def motorins_path() -> Path | None:
    """Location of the Swedish third-party motor file (faraway ``motorins`` layout)."""
    env = os.environ.get("FCBMA_MOTORINS")
    candidates = [Path(env)] if env else []
    candidates.append(Path(__file__).resolve().parents[1] / "data" / "motorins.csv")
    for c in candidates:
        if c.is_file():
            return c
    return None


def load_motorins(severity: bool = False) -> Dataset:
    path = motorins_path()
    if path is None:
        raise FileNotFoundError(
            "Swedish motor data not found: set FCBMA_MOTORINS or place data/motorins.csv "
            "(columns Kilometres, Zone, Bonus, Make, Insured, Claims, Payments)"
        )
    roles = ColumnRoles(
        factors=tuple(MOTORINS_LEVELS), numeric=("Claims", "Payments"), exposure="Insured",
        vocabularies=MOTORINS_LEVELS, severity_from=("Payments", "Claims") if severity else None,
        severity_name="Severity",
    )
    return ingest(path, roles)


# log-scale effects per level, shaped like a four-factor motor tariff
TRUE_MAKE = Partition.parse("(1,8)(2)(3)(4)(5)(6)(7,9)")
TRUE_KM = Partition.parse("(1)(2,3)(4,5)")


def swedish_like(seed: int = 0, drop: float = 0.185, exposure_scale: float = 1.0) -> Dataset:
    """Grouped data on the 5 x 7 x 7 x 9 grid with ~1,797 populated cells.

    Make's true partition is (1,8)(2)(3)(4)(5)(6)(7,9) and Kilometres'
    severity partition is (1)(2,3)(4,5); Zone and Bonus keep all levels.
    """
    rng = np.random.default_rng(seed)
    grid = np.array(np.meshgrid(*(np.arange(len(v)) for v in MOTORINS_LEVELS.values()), indexing="ij"))
    grid = grid.reshape(4, -1).T
    grid = grid[rng.random(len(grid)) > drop]
    km, zone, bonus, make = grid.T
    make_fx = np.array([0.0, 0.25, -0.2, -0.45, 0.1, -0.3, 0.45, 0.0, 0.45])
    km_f = np.array([0.0, 0.15, 0.3, 0.4, 0.5])
    zone_f = np.array([0.0, -0.15, -0.3, -0.45, -0.6, -0.5, -0.9])
    bonus_f = np.array([0.0, -0.35, -0.5, -0.65, -0.75, -0.85, -1.25])
    eta = -2.0 + make_fx[make] + km_f[km] + zone_f[zone] + bonus_f[bonus]
    insured = np.round(rng.lognormal(5.0, 1.4, len(grid)) * exposure_scale, 2) + 0.01
    claims = rng.poisson(insured * np.exp(eta))
    km_s = np.array([0.0, 0.12, 0.12, 0.25, 0.25])
    sev_mean = np.exp(8.3 + km_s[km] + 0.05 * (zone == 6) - 0.05 * (make == 3))
    payments = np.zeros(len(grid))
    pos = claims > 0
    payments[pos] = rng.gamma(1.3 * claims[pos], sev_mean[pos] / 1.3)
    codes = {"Kilometres": km, "Zone": zone, "Bonus": bonus, "Make": make}
    return Dataset({"Insured": insured, "Claims": claims.astype(float), "Payments": payments},
                   codes, dict(MOTORINS_LEVELS))


@pytest.fixture(scope="session")
def swedish_synthetic() -> Dataset:
    return swedish_like(0)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[tuple[str, bool, str]] = []


def record_acceptance(label: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append((label, bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in sorted(ACCEPTANCE, key=lambda r: _label_key(r[0])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")


def _label_key(label: str):
    head = label.split()[0]
    return (0, int(head), label) if head.isdigit() else (1, 0, label)
