#!/usr/bin/env python3
"""Run a small private-vs-nonprivate comparison on the built-in toy dataset.

This is a fast desk-scale demo of the full pipeline: it trains an
autoregressive generator on synthetic two-label data at eps=inf and eps=8,
generates labeled corpora, scores them with the downstream classifier, and
prints where the artifacts landed. Expect a few minutes on one core.

Usage:
    python scripts/run_toy_experiment.py [--out runs/toy-demo] [--steps 300]
"""

import argparse
import json
from pathlib import Path

from dpsynth import cli


def build_config(out_dir: Path, epsilon, steps: int, seeds: list[int]) -> dict:
    return {
        "name": f"toy-demo-eps-{epsilon}",
        "dataset": {"kind": "toy", "labels": ["pos", "neg"], "n_per_label": 1250, "seed": 0},
        "template": {
            "pattern": "write a {} review:",
            "label_phrases": {"pos": "positive", "neg": "negative"},
        },
        "model": "autoregressive",
        "epsilon": epsilon,
        "delta": "auto",
        "output_dir": str(out_dir),
        "dpsgd": {
            "clip_norm": 1.0,
            "sample_rate": 0.064,
            "num_steps": steps,
            "learning_rate": 0.5,
        },
        "generation": {"n_per_label": 500, "max_new_tokens": 16, "top_k": 16},
        "reference": {"num_steps": 300, "learning_rate": 1.0, "batch_size": 64},
        "seeds": seeds,
    }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/toy-demo", help="output root directory")
    parser.add_argument("--steps", type=int, default=300, help="DP-SGD steps per run")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = parser.parse_args()

    root = Path(args.out)
    for epsilon in ("inf", 8):
        out_dir = root / f"eps-{epsilon}"
        config = cli.ExperimentConfig.from_dict(
            build_config(out_dir, epsilon, args.steps, args.seeds)
        )
        print(f"== epsilon = {epsilon} -> {out_dir}")
        run_dir = cli.run_experiment(config)
        metrics = json.loads((run_dir / "metrics.json").read_text())
        mf1 = metrics["macro_f1"]
        ppl = metrics["perplexity"]
        print(f"   macro-F1   {mf1['mean']:.4f} +/- {mf1['std']:.4f}")
        mean = ppl["mean"]
        print(f"   perplexity {mean if isinstance(mean, str) else f'{mean:.2f}'}")
        print(f"   realized epsilon {metrics['provenance']['epsilon']}")
    print(f"\nartifacts under {root}/ (manifest.json, seed-*/corpus.jsonl, metrics.json)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
