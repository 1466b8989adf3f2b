"""Regenerate the five-Gamma correlation fixtures from a seeded shape sweep.

The same document is written to the package (read by ``bblstm check``) and
to tests/fixtures (read by the test suite).
"""

import shutil
from pathlib import Path

from bblstm.diagnostics import five_gamma_sweep, persist_sweep_extremes

ROOT = Path(__file__).resolve().parents[1]
SEED, N_CONFIGS, N_DRAWS = 0, 200, 10000

if __name__ == "__main__":
    shapes, rhos = five_gamma_sweep(N_CONFIGS, N_DRAWS, SEED)
    package_copy = ROOT / "src" / "bblstm" / "fixtures" / "five_gamma_extremes.json"
    doc = persist_sweep_extremes(package_copy, shapes, rhos, SEED, N_DRAWS)
    (ROOT / "tests" / "fixtures").mkdir(parents=True, exist_ok=True)
    shutil.copyfile(package_copy, ROOT / "tests" / "fixtures" / "five_gamma_extremes.json")
    print(f"rho range [{doc['negative']['rho']:.3f}, {doc['positive']['rho']:.3f}] over {N_CONFIGS} configs")
