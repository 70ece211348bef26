"""Regenerate src/citypulse/data/roads.csv, the simulated road directory.

Sections 1-10 belong to Douala, 11-20 to Yaounde; every section is one
numbered avenue and lanes share their section's avenue.
"""
import csv
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "citypulse" / "data" / "roads.csv"
LANES = range(1, 9)
SECTIONS = range(1, 21)


def city(section: int) -> str:
    return "Douala" if section <= 10 else "Yaounde"


def main() -> None:
    rows = []
    for lane in (-1, *LANES):
        for section in (-1, *SECTIONS):
            if section == -1:
                rows.append((lane, section, "Unknown", "Unknown Road"))
            else:
                rows.append((lane, section, city(section), f"Avenue {section}"))
    with open(OUT, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["Lane_ID", "Section_ID", "City", "Road"])
        w.writerows(rows)
    print(f"wrote {len(rows)} roads to {OUT}")


if __name__ == "__main__":
    main()
