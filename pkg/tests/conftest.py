import csv

import numpy as np
import pytest

from hetiv import soft_hard_taxonomy

SUBSTANCES = soft_hard_taxonomy().substances()


def make_survey_rows(n=25_000, seed=0):
    """Synthetic survey microdata with the column layout the estimation grid
    expects: demographics, per-substance indicators, labour outcomes, a
    religiosity instrument and sampling weights.

    Drug use is heteroskedastic in age (noise scale grows with standardized
    age), which is what the generated instruments feed on.
    """
    rng = np.random.default_rng(seed)
    age = rng.integers(18, 61, size=n).astype(float)
    activity = rng.choice(
        ["working", "working", "working", "working", "working",
         "working", "working", "working", "in education", "retired"],
        size=n,
    )
    activity[rng.random(n) < 0.03] = "disabled"
    indigenous = (rng.random(n) < 0.07).astype(float)
    married = (rng.random(n) < 0.7).astype(float)
    education = rng.choice(
        ["less than primary", "primary", "lower secondary", "upper secondary", "higher"],
        size=n,
        p=[0.10, 0.21, 0.33, 0.22, 0.14],
    )
    area = rng.choice(["urban", "rural"], size=n, p=[0.79, 0.21])
    state = rng.choice([f"S{i}" for i in range(1, 7)], size=n)
    year = rng.choice(["2008", "2011", "2016"], size=n)
    religious = (rng.random(n) < 0.9).astype(float)

    z_age = (age - age.mean()) / age.std()
    latent = np.exp(0.8 * z_age) * rng.standard_normal(n) - 0.6 * religious
    in_window = (age >= 22) & (age <= 50)
    threshold = np.quantile(latent[in_window], 0.96)
    any_use = (latent > threshold).astype(float)

    sub_cols = {s: np.zeros(n) for s in SUBSTANCES}
    users = np.flatnonzero(any_use == 1.0)
    primary = rng.choice(["cannabis", "cocaine", "inhalants", "stimulants"], size=len(users))
    for idx, sub in zip(users, primary):
        sub_cols[sub][idx] = 1.0
    for s in SUBSTANCES:
        extra = users[rng.random(len(users)) < 0.15]
        sub_cols[s][extra] = 1.0

    p_emp = 0.93 + 0.01 * z_age - 0.03 * any_use - 0.02 * indigenous
    employed = (rng.random(n) < np.clip(p_emp, 0.02, 0.98)).astype(float)
    unemployed = 1.0 - employed
    unemployed[rng.random(n) < 0.01] = np.nan
    formal = (rng.random(n) < np.clip(0.45 + 0.05 * z_age - 0.05 * any_use, 0.02, 0.98)).astype(float)
    formal[year == "2011"] = np.nan  # outcome not collected in that wave
    weight = np.round(rng.lognormal(mean=0.0, sigma=0.4, size=n), 4)

    header = (
        ["age", "activity", "indigenous", "married", "education", "area", "state",
         "year", "religious", "employed", "unemployed", "formal", "weight"]
        + list(SUBSTANCES)
    )
    rows = []
    for i in range(n):
        def cell(value):
            if isinstance(value, float) and np.isnan(value):
                return ""
            if isinstance(value, float) and value == int(value):
                return str(int(value))
            return str(value)

        row = [
            cell(age[i]), activity[i], cell(indigenous[i]), cell(married[i]),
            education[i], area[i], state[i], year[i], cell(religious[i]),
            cell(employed[i]), cell(unemployed[i]), cell(formal[i]), str(weight[i]),
        ] + [cell(sub_cols[s][i]) for s in SUBSTANCES]
        rows.append(row)
    return header, rows


@pytest.fixture(scope="session")
def survey_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "survey.csv"
    header, rows = make_survey_rows()
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)
    return path


REPLICATE_CONFIG = """\
[run]
mode = replicate
seed = 7
output = {out}

[data]
input = {input}
weight = weight

[restrictions]
min_age = 22
max_age = 50

[model]
outcomes = employed, unemployed, formal
taxonomy = soft_hard
treatment = any
controls = age, indigenous, married
square = age
factors = education, area
fixed_effects = state, year
instrument_mode = both
external_instrument = religious

[subgroups]
age_bands = 22-35, 36-50
education_split = low: less than primary, primary, lower secondary; high: upper secondary, higher
drug_pairs = soft, hard
exclusion_variants = married; married, education
"""


@pytest.fixture(scope="session")
def replicate_config(tmp_path_factory, survey_csv):
    out = tmp_path_factory.mktemp("out")
    path = tmp_path_factory.mktemp("cfg") / "replicate.ini"
    path.write_text(REPLICATE_CONFIG.format(out=out, input=survey_csv), encoding="utf-8")
    return path, out
