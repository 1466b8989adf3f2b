"""Run the desk-scale training sanity runs and record their outcomes.

Each run writes the usual outputs (metadata, metrics.jsonl, timing.jsonl,
checkpoints) under ``<out>/<name>/`` and a ``summary.json`` with the total
wall time and, for classification runs, the test accuracy of the best
checkpoint.  The acceptance tests read these summaries.

    python3 tools/run_acceptance.py                 # every run
    python3 tools/run_acceptance.py synthetic music # a subset by group
"""

import argparse
import json
import sys
import time
from pathlib import Path

from bblstm import cells
from bblstm.training import RunConfig, evaluate, load_for_eval, train

ROOT = Path(__file__).resolve().parents[1]
DEFAULT_OUT = ROOT / "acceptance_runs"
MNIST_DIR = ROOT / "data" / "mnist01"

# Opt-in initialisation for 784-step pixel sequences: a small recurrent matrix
# keeps the state from saturating and a large forget bias keeps the early
# pixels in memory until the last step.
MNIST_INIT = dict(forget_bias=10.0, recurrent_scale=0.25, clip_norm=1.0)


def synthetic_runs() -> dict[str, RunConfig]:
    return {
        "synthetic_bblstm5g": RunConfig(
            variant="bblstm5g", task="synthetic", hidden=32, lr=1e-2, batch_size=20, epochs=50, eval_train=True
        )
    }


def music_runs() -> dict[str, RunConfig]:
    return {
        f"music_{v}": RunConfig(variant=v, task="music", synthetic_sequences=120, hidden=32, lr=1e-2, batch_size=16, epochs=8)
        for v in cells.VARIANTS
    }


def mnist_runs() -> dict[str, RunConfig]:
    common = dict(task="mnist", mnist_dir=str(MNIST_DIR), digits=[0, 1], hidden=64, batch_size=16, **MNIST_INIT)
    return {
        "mnist_lstm": RunConfig(variant="lstm", lr=5e-4, epochs=15, **common),
        "mnist_bblstm5g": RunConfig(variant="bblstm5g", shape_forget_bias=10.0, lr=5e-4, epochs=5, **common),
    }


GROUPS = {"synthetic": synthetic_runs, "music": music_runs, "mnist": mnist_runs}


def run_one(name: str, config: RunConfig, out_root: Path) -> dict:
    out = out_root / name
    t0 = time.perf_counter()
    result = train(config, out_dir=out, log=None)
    summary = {"name": name, "best_epoch": result.best_epoch, "best_valid": result.best_metric}
    if config.task != "music":
        model, params, data = load_for_eval(config, out / "best.json")
        summary["test_metric"] = evaluate(model, params, data.test, config)["metric"]
    summary["wall_time"] = time.perf_counter() - t0
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("groups", nargs="*", help=f"subset of {', '.join(GROUPS)}")
    ap.add_argument("--out", default=str(DEFAULT_OUT))
    args = ap.parse_args(argv)
    unknown = set(args.groups) - set(GROUPS)
    if unknown:
        ap.error(f"unknown group(s): {', '.join(sorted(unknown))}")
    out_root = Path(args.out)
    for group in args.groups or GROUPS:
        for name, config in GROUPS[group]().items():
            s = run_one(name, config, out_root)
            print(json.dumps(s), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
