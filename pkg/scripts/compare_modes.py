#!/usr/bin/env python3
"""Run every shipped scenario in both platform modes and tabulate the outcomes.

Usage: python3 scripts/compare_modes.py [scenario.yaml ...]
Without arguments, runs everything under scenarios/.
"""

import glob
import sys

from symplat.harness import run_scenario
from symplat.scenario import load_scenario


def main(argv):
    paths = argv or sorted(glob.glob("scenarios/*.yaml"))
    header = (f"{'scenario':<16} {'app':<12} {'sym outcome':<20} {'sym dur':>8} "
              f"{'asym outcome':<20} {'asym dur':>8}")
    print(header)
    print("-" * len(header))
    for path in paths:
        sym = run_scenario(load_scenario(path), mode_override="symmetric")
        asym = run_scenario(load_scenario(path), mode_override="asymmetric")
        for app_id in sorted(sym.summary):
            s, a = sym.summary[app_id], asym.summary[app_id]
            print(f"{sym.scenario:<16} {app_id:<12} "
                  f"{s['outcome']:<20} {s['duration_s'] if s['duration_s'] is not None else '-':>8} "
                  f"{a['outcome']:<20} {a['duration_s'] if a['duration_s'] is not None else '-':>8}")
        print(f"{'':<16} hollow core-seconds: "
              f"sym={sym.utilization['hollow_core_seconds'] if sym.utilization else 0} "
              f"asym={asym.utilization['hollow_core_seconds'] if asym.utilization else 0}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
