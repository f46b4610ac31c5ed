"""Print before/after attention onto the soft profile slots for one user.

    userip case-study --out runs/default
    python demos/attention_heatmap.py runs/default/attention.csv 3
"""

import csv
import sys
from collections import defaultdict

SHADES = " .:-=+*#%@"


def main(path, user="0"):
    cells = defaultdict(dict)
    with open(path) as fh:
        for r in csv.DictReader(fh):
            if r["user"] == user:
                cells[(r["stage"], int(r["position"]), r["token"])][int(r["profile_index"])] = \
                    float(r["weight"])
    for stage in ("before", "after"):
        print(f"--- {stage} (columns: profile slots, shade ~ normalized weight)")
        for (s, pos, token), row in sorted(cells.items(), key=lambda kv: kv[0][1]):
            if s != stage:
                continue
            shades = "".join(SHADES[min(int(w * len(SHADES)), len(SHADES) - 1)] * 3
                             for _, w in sorted(row.items()))
            print(f"{pos:>3} {token:>14} |{shades}|")


if __name__ == "__main__":
    main(*sys.argv[1:])
