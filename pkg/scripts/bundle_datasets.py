"""Rebuild the gzipped CSVs shipped in ``fairfed/datasets``.

Usage::

    python scripts/bundle_datasets.py RAW_DIR

``RAW_DIR`` must contain the original UCI files ``adult.data`` and
``adult.test`` and ProPublica's ``compas-scores-two-years.csv``.
"""

import sys
from pathlib import Path

import pandas as pd

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num",
    "marital-status", "occupation", "relationship", "race", "sex",
    "capital-gain", "capital-loss", "hours-per-week", "native-country",
    "income",
]

COMPAS_COLUMNS = [
    "sex", "age", "age_cat", "race", "juv_fel_count", "juv_misd_count",
    "juv_other_count", "priors_count", "c_charge_degree", "two_year_recid",
]

OUT = Path(__file__).resolve().parent.parent / "src" / "fairfed" / "datasets"


def bundle_adult(raw: Path) -> pd.DataFrame:
    parts = []
    for name, skip in (("adult.data", 0), ("adult.test", 1)):
        df = pd.read_csv(raw / name, header=None, names=ADULT_COLUMNS,
                         skiprows=skip, dtype=str, skipinitialspace=True)
        parts.append(df.dropna(how="all"))
    df = pd.concat(parts, ignore_index=True)
    df = df.apply(lambda col: col.str.strip())
    # adult.test writes labels as ">50K." / "<=50K."
    df["income"] = df["income"].str.rstrip(".")
    return df


def bundle_compas(raw: Path) -> pd.DataFrame:
    df = pd.read_csv(raw / "compas-scores-two-years.csv")
    # ProPublica's published screening filter
    keep = (
        df["days_b_screening_arrest"].between(-30, 30)
        & (df["is_recid"] != -1)
        & (df["c_charge_degree"] != "O")
        & (df["score_text"] != "N/A")
    )
    return df.loc[keep, COMPAS_COLUMNS].reset_index(drop=True)


def main(raw_dir: str) -> None:
    raw = Path(raw_dir)
    OUT.mkdir(parents=True, exist_ok=True)
    for name, frame in (("adult", bundle_adult(raw)), ("compas", bundle_compas(raw))):
        path = OUT / f"{name}.csv.gz"
        frame.to_csv(path, index=False, compression={"method": "gzip", "mtime": 0})
        print(f"{path}: {len(frame)} rows")


if __name__ == "__main__":
    main(sys.argv[1])
