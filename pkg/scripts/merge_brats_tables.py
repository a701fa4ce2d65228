"""Join BraTS 2020 ``name_mapping.csv`` and ``survival_info.csv`` into one clinical table.

The grade comes from the name mapping; age, survival and resection from the
survival table (present for a subset of HGG patients only). Everything else
is left blank for the imputation step.

    python3 scripts/merge_brats_tables.py <BraTS training dir> <out.csv>
"""
import argparse
import csv
from pathlib import Path

FIELDS = ["patient_id", "grade", "age", "survival_days", "resection"]


def read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("root", type=Path)
    ap.add_argument("out", type=Path)
    args = ap.parse_args(argv)

    names = read(args.root / "name_mapping.csv")
    survival = {r["Brats20ID"]: r for r in read(args.root / "survival_info.csv")}
    rows = []
    for r in names:
        pid = r["BraTS_2020_subject_ID"]
        s = survival.get(pid, {})
        rows.append([pid, r["Grade"], s.get("Age", ""), s.get("Survival_days", ""),
                     s.get("Extent_of_Resection", "")])
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FIELDS)
        w.writerows(rows)
    print(f"{len(rows)} patients, {len(survival)} with survival data -> {args.out}")


if __name__ == "__main__":
    main()
