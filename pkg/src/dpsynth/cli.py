"""End-to-end experiment orchestration and command-line entry points.

One experiment runs: load data -> author audit -> (optional public span
pretraining) -> budget-calibrated training per seed -> label-balanced
synthesis -> downstream evaluation -> aggregate report. Every artifact
lands in one run directory and is listed in its manifest; reruns with the
same config and seeds reproduce metrics.json byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import math
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from dpsynth import evaluation as ev
from dpsynth.data import (
    BUILTIN_TEMPLATES,
    Corpus,
    DatasetSplit,
    LabeledText,
    PromptTemplate,
    ToyDatasetSpec,
    balance_labels,
    load_jsonl,
    load_template,
    make_toy_dataset,
    render_prompt,
    split,
)
from dpsynth.dpsgd import run_sgd_loop, save_checkpoint, train, trained_sigma
from dpsynth.models import autoregressive as ar
from dpsynth.models import diffusion as df
from dpsynth.models import nn
from dpsynth.models.vocab import Vocabulary, encode, pad_batch
from dpsynth.privacy import (
    DpSgdConfig,
    PrivacyBudget,
    UnsatisfiableBudgetError,
    audit_author_contributions,
    audit_document,
    calibrate_noise,
    default_delta,
    dp_sgd_epsilon,
    effective_budget,
    group_privacy,
)
from dpsynth.rng import child_rng

SPLIT_RATIOS = (0.8, 0.1, 0.1)
PUBLIC_SEED_OFFSET = 7919  # toy public pool drawn far away from the private seed

DEFAULT_DPSGD = {"clip_norm": 1.0, "sample_rate": 0.064, "num_steps": 200, "learning_rate": 0.5}
DEFAULT_GENERATION = {"n_per_label": 500, "max_new_tokens": 16, "temperature": 1.0, "top_k": 16}
DEFAULT_REFERENCE = {"num_steps": 300, "learning_rate": 1.0, "batch_size": 64}
DEFAULT_AR_MODEL = {"embedding_dim": 32, "num_layers": 2, "num_heads": 4, "max_sequence_length": 24}
DEFAULT_DIFFUSION_MODEL = {
    "embedding_dim": 32, "num_layers": 2, "num_heads": 4, "max_sequence_length": 32,
    "target_length": 16, "num_diffusion_steps": 32,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of one experiment cell."""

    name: str
    dataset: dict
    template: dict
    model: str
    epsilon: float
    delta: float | str
    seeds: tuple[int, ...]
    output_dir: str
    dpsgd: dict
    generation: dict
    model_overrides: dict
    pretrain: dict | None
    require_unique_authors: bool
    reference: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {
            "name", "dataset", "template", "model", "epsilon", "delta", "seeds",
            "output_dir", "dpsgd", "generation", "model_overrides", "pretrain",
            "require_unique_authors", "reference",
        }
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key in ("dataset", "template", "model", "output_dir"):
            if key not in raw:
                raise ValueError(f"config requires {key!r}")
        model = raw["model"]
        if model not in ev.GENERATOR_KINDS:
            raise ValueError(f"model must be one of {ev.GENERATOR_KINDS}")
        epsilon = raw.get("epsilon", "inf")
        epsilon = math.inf if epsilon in ("inf", math.inf) else float(epsilon)
        if epsilon <= 0:
            raise ValueError("epsilon must be positive or 'inf'")
        delta = raw.get("delta", "auto")
        if delta != "auto":
            delta = float(delta)
        seeds = tuple(int(s) for s in raw.get("seeds", [0]))
        if not seeds or len(set(seeds)) != len(seeds):
            raise ValueError("seeds must be a non-empty list of distinct integers")
        return cls(
            name=raw.get("name", "experiment"),
            dataset=dict(raw["dataset"]),
            template=dict(raw["template"]),
            model=model,
            epsilon=epsilon,
            delta=delta,
            seeds=seeds,
            output_dir=raw["output_dir"],
            dpsgd={**DEFAULT_DPSGD, **raw.get("dpsgd", {})},
            generation={**DEFAULT_GENERATION, **raw.get("generation", {})},
            model_overrides=dict(raw.get("model_overrides", {})),
            pretrain=dict(raw["pretrain"]) if raw.get("pretrain") else None,
            require_unique_authors=bool(raw.get("require_unique_authors", False)),
            reference={**DEFAULT_REFERENCE, **raw.get("reference", {})},
        )

    def canonical(self) -> dict:
        out = {
            "name": self.name, "dataset": self.dataset, "template": self.template,
            "model": self.model,
            "epsilon": "inf" if math.isinf(self.epsilon) else self.epsilon,
            "delta": self.delta, "seeds": list(self.seeds), "output_dir": self.output_dir,
            "dpsgd": self.dpsgd, "generation": self.generation,
            "model_overrides": self.model_overrides, "pretrain": self.pretrain,
            "require_unique_authors": self.require_unique_authors,
            "reference": self.reference,
        }
        return out

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _jsonify(value):
    """JSON-safe copy: non-finite floats become their string names."""
    if isinstance(value, dict):
        return {k: _jsonify(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonify(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return "inf" if value > 0 else ("-inf" if value < 0 else "nan")
    return value


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_jsonify(payload), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _toy_spec(dataset: dict) -> ToyDatasetSpec:
    fields = {
        k: dataset[k]
        for k in (
            "n_per_label", "vocab_per_label", "shared_vocab", "length_range",
            "author_policy", "label_token_rate",
        )
        if k in dataset
    }
    if "length_range" in fields:
        fields["length_range"] = tuple(fields["length_range"])
    return ToyDatasetSpec(labels=tuple(dataset["labels"]), **fields)


def _load_records(dataset: dict) -> list[LabeledText]:
    kind = dataset.get("kind")
    if kind == "toy":
        return make_toy_dataset(_toy_spec(dataset), seed=int(dataset.get("seed", 0)))
    if kind == "jsonl":
        records = load_jsonl(dataset["path"])
        if dataset.get("balance", False):
            records = balance_labels(records, seed=int(dataset.get("seed", 0)))
        return records
    raise ValueError("dataset.kind must be 'toy' or 'jsonl'")


def _public_records(dataset: dict) -> list[LabeledText]:
    """Budget-free pool for pretraining and the perplexity reference.

    For the toy generator this is an independent draw from the same
    process; for file datasets, records listed under 'public_path' (there
    is no safe default for real data).
    """
    kind = dataset.get("kind")
    if kind == "toy":
        return make_toy_dataset(
            _toy_spec(dataset), seed=int(dataset.get("seed", 0)) + PUBLIC_SEED_OFFSET
        )
    if "public_path" not in dataset:
        raise ValueError("file datasets need dataset.public_path for public stages")
    return load_jsonl(dataset["public_path"])


def _resolve_template(template: dict) -> PromptTemplate:
    if "builtin" in template:
        return BUILTIN_TEMPLATES[template["builtin"]]
    if "path" in template:
        return load_template(template["path"])
    return PromptTemplate(
        pattern=template["pattern"], label_phrases=dict(template["label_phrases"])
    )


def _resolve_delta(delta: float | str, train_size: int) -> float:
    return default_delta(train_size) if delta == "auto" else float(delta)


def _build_vocab(train: Sequence[LabeledText], template: PromptTemplate) -> Vocabulary:
    texts = [r.text for r in train]
    texts.extend(render_prompt(template, label) for label in template.labels)
    return Vocabulary.from_texts(texts)


def _dpsgd_config(config: ExperimentConfig, train_size: int) -> DpSgdConfig:
    raw = config.dpsgd
    sample_rate = float(raw["sample_rate"])
    return DpSgdConfig(
        clip_norm=float(raw["clip_norm"]),
        noise_multiplier=0.0,
        sample_rate=sample_rate,
        num_steps=int(raw["num_steps"]),
        expected_lot_size=sample_rate * train_size,
    )


def _train_autoregressive(
    config: ExperimentConfig,
    train_records: Sequence[LabeledText],
    vocab: Vocabulary,
    template: PromptTemplate,
    budget: PrivacyBudget,
    seed: int,
    log_path: Path,
):
    model_cfg = ar.ArConfig(
        vocab_size=vocab.size, **{**DEFAULT_AR_MODEL, **config.model_overrides}
    )
    sequences = [
        encode(vocab, render_prompt(template, r.label), r.text, model_cfg.max_sequence_length)
        for r in train_records
    ]
    ids, lengths, instruction_lengths = pad_batch(sequences)
    params = ar.init_ar_params(model_cfg, seed=seed)
    names = ar.trainable_names(model_cfg, params, private=budget.is_private)
    grad_fn = ar.make_grad_fn(model_cfg, params, names, ids, lengths, instruction_lengths)
    result = train(
        grad_fn, nn.params_to_vector(params, names), len(train_records),
        _dpsgd_config(config, len(train_records)), budget,
        learning_rate=float(config.dpsgd["learning_rate"]), seed=seed, log_path=log_path,
    )
    return nn.vector_to_params(result.parameters, params, names), model_cfg, result


def _train_diffusion(
    config: ExperimentConfig,
    train_records: Sequence[LabeledText],
    vocab: Vocabulary,
    template: PromptTemplate,
    budget: PrivacyBudget,
    seed: int,
    log_path: Path,
    initial_params: nn.Params | None,
):
    model_cfg = df.DiffusionConfig(
        vocab_size=vocab.size, **{**DEFAULT_DIFFUSION_MODEL, **config.model_overrides}
    )
    encoded = [
        df.encode_for_diffusion(
            vocab, render_prompt(template, r.label), r.text, model_cfg.target_length
        )
        for r in train_records
    ]
    ids, target_mask, valid = df.pad_diffusion_batch(encoded)
    if ids.shape[1] > model_cfg.max_sequence_length:
        raise ValueError("encoded sequences exceed max_sequence_length")
    params = initial_params if initial_params is not None else df.init_diffusion_params(model_cfg, seed=seed)
    names = df.trainable_names(model_cfg, params, private=budget.is_private)
    grad_fn = df.make_grad_fn(
        model_cfg, params, names, ids, target_mask, valid, model_cfg.schedule(), seed=seed
    )
    result = train(
        grad_fn, nn.params_to_vector(params, names), len(train_records),
        _dpsgd_config(config, len(train_records)), budget,
        learning_rate=float(config.dpsgd["learning_rate"]), seed=seed, log_path=log_path,
    )
    return nn.vector_to_params(result.parameters, params, names), model_cfg, result


def _train_reference(
    config: ExperimentConfig, vocab: Vocabulary, public: Sequence[LabeledText]
) -> ev.TrainedGenerator:
    """Small non-private language model used only as the perplexity judge."""
    # always autoregressive, whatever the experiment's generator is
    model_cfg = ar.ArConfig(
        vocab_size=vocab.size, **{**DEFAULT_AR_MODEL, **config.reference.get("model", {})}
    )
    sequences = [encode(vocab, "", r.text, model_cfg.max_sequence_length) for r in public]
    ids, lengths, instruction_lengths = pad_batch(sequences)
    params = ar.init_ar_params(model_cfg, seed=0)
    names = ar.trainable_names(model_cfg, params, private=False)
    grad_fn = ar.make_grad_fn(model_cfg, params, names, ids, lengths, instruction_lengths)
    result = run_sgd_loop(
        grad_fn, nn.params_to_vector(params, names), len(public),
        batch_size=int(config.reference["batch_size"]),
        num_steps=int(config.reference["num_steps"]),
        learning_rate=float(config.reference["learning_rate"]), seed=0,
    )
    return ev.TrainedGenerator(
        kind="autoregressive",
        params=nn.vector_to_params(result.parameters, params, names),
        config=model_cfg, vocab=vocab,
        budget=PrivacyBudget(epsilon=math.inf, delta=0.0), name="reference",
    )


def _pretrain_diffusion(
    config: ExperimentConfig, vocab: Vocabulary, run_dir: Path
) -> nn.Params:
    options = config.pretrain or {}
    public = _public_records(config.dataset)
    corpus = Corpus(records=tuple(public), name="public-pool", private=False)
    model_cfg = df.DiffusionConfig(
        vocab_size=vocab.size, **{**DEFAULT_DIFFUSION_MODEL, **config.model_overrides}
    )
    params, meta = df.span_pretrain(
        corpus, vocab, model_cfg,
        span_fraction=float(options.get("span_fraction", 0.5)),
        num_steps=int(options.get("num_steps", 400)),
        batch_size=int(options.get("batch_size", 32)),
        learning_rate=float(options.get("learning_rate", 0.05)),
        seed=int(options.get("seed", 0)),
    )
    save_checkpoint(run_dir / "pretrained.npz", params, meta)
    return params


def run_experiment(config: ExperimentConfig) -> Path:
    """Execute one experiment; returns the populated run directory."""
    run_dir = Path(config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    records = _load_records(config.dataset)
    splits: DatasetSplit = split(records, SPLIT_RATIOS, seed=int(config.dataset.get("seed", 0)))
    template = _resolve_template(config.template)
    delta = _resolve_delta(config.delta, len(splits.train))
    requested = PrivacyBudget(epsilon=config.epsilon, delta=delta if config.epsilon != math.inf else 0.0)

    # the audit must come first: it tells us what the budget actually means
    audit = audit_author_contributions(splits.train)
    effective = effective_budget(requested, audit)
    _write_json(run_dir / "audit.json", audit_document(effective, audit))
    if audit.k_max > 1 or not audit.authors_known:
        message = (
            f"author audit: k_max={audit.k_max}, authors_known={audit.authors_known}; "
            f"effective budget epsilon={effective.epsilon}"
        )
        if config.require_unique_authors:
            raise RuntimeError(f"aborting (require_unique_authors): {message}")
        warnings.warn(message, stacklevel=2)

    # fail fast before any training when the budget is unattainable
    dp_config = _dpsgd_config(config, len(splits.train))
    if requested.is_private:
        calibrate_noise(requested, dp_config.sample_rate, dp_config.num_steps)

    vocab = _build_vocab(splits.train, template)
    public = _public_records(config.dataset)
    reference = _train_reference(config, vocab, public)

    pretrained: nn.Params | None = None
    if config.model == "diffusion" and config.pretrain is not None:
        pretrained = _pretrain_diffusion(config, vocab, run_dir)

    results = []
    realized: PrivacyBudget | None = None
    sigma_used = 0.0
    for seed in config.seeds:
        seed_dir = run_dir / f"seed-{seed}"
        seed_dir.mkdir(exist_ok=True)
        log_path = seed_dir / "training_log.jsonl"
        if config.model == "autoregressive":
            params, model_cfg, result = _train_autoregressive(
                config, splits.train, vocab, template, requested, seed, log_path
            )
        else:
            params, model_cfg, result = _train_diffusion(
                config, splits.train, vocab, template, requested, seed, log_path,
                initial_params=pretrained,
            )
        realized = result.realized_budget
        sigma_used = trained_sigma(result)
        save_checkpoint(
            seed_dir / "checkpoint.npz", params,
            {
                "model": config.model, "seed": seed, "config_hash": config.hash(),
                "epsilon": "inf" if math.isinf(realized.epsilon) else realized.epsilon,
                "delta": realized.delta,
            },
        )
        if requested.is_private:
            _write_json(
                seed_dir / "accountant.json",
                {
                    "sigma": sigma_used,
                    "sample_rate": dp_config.sample_rate,
                    "num_steps": dp_config.num_steps,
                    "delta": delta,
                    "epsilon": realized.epsilon,
                },
            )

        generator = ev.TrainedGenerator(
            kind=config.model, params=params, config=model_cfg, vocab=vocab,
            budget=realized, name=f"{config.name}-{config.model}-seed{seed}",
        )
        corpus = ev.generate_corpus(
            generator, template,
            ev.GenerationSpec(
                n_per_label=int(config.generation["n_per_label"]),
                max_new_tokens=int(config.generation["max_new_tokens"]),
                temperature=float(config.generation["temperature"]),
                top_k=int(config.generation["top_k"]),
                seed=seed,
            ),
        )
        corpus.save(seed_dir / "corpus.jsonl")
        results.append(
            ev.evaluate_synthetic(corpus, splits.validation, splits.test, reference, seed)
        )

    assert realized is not None
    report = ev.multi_seed_report(results)
    metrics = report.as_dict()
    metrics["provenance"] = {
        "epsilon": realized.epsilon,
        "delta": realized.delta,
        "k_max": audit.k_max,
        "authors_known": audit.authors_known,
    }
    _write_json(run_dir / "metrics.json", metrics)

    files = sorted(
        str(p.relative_to(run_dir))
        for p in run_dir.rglob("*")
        if p.is_file() and p.name != "manifest.json"
    )
    manifest = {
        "name": config.name,
        "config_hash": config.hash(),
        "config": config.canonical(),
        "seeds": list(config.seeds),
        "requested_epsilon": config.epsilon,
        "realized_epsilon": realized.epsilon,
        "delta": realized.delta,
        "dpsgd_realized": (
            {
                "sigma": sigma_used,
                "sample_rate": dp_config.sample_rate,
                "num_steps": dp_config.num_steps,
                "delta": delta,
            }
            if requested.is_private
            else None
        ),
        "audit": {"k_max": audit.k_max, "authors_known": audit.authors_known},
        "files": files,
    }
    _write_json(run_dir / "manifest.json", manifest)
    return run_dir


# ---------------------------------------------------------------------------
# sweeps


def _format_metric(block: dict) -> str:
    mean, std = block["mean"], block["std"]
    if isinstance(mean, str):  # non-finite serialized as a string
        return mean
    return f"{mean:.3f} ± {std:.3f}"


def _dataset_label(dataset: dict) -> str:
    if dataset.get("kind") == "toy":
        return dataset.get("name", "toy")
    return Path(dataset.get("path", "dataset")).stem


def sweep(configs: Sequence[ExperimentConfig], output_dir: str | Path) -> Path:
    """Run each cell, tolerating failures, and write one comparison table."""
    output = Path(output_dir)
    output.mkdir(parents=True, exist_ok=True)
    rows = []
    for config in configs:
        label = (
            _dataset_label(config.dataset), config.model,
            "inf" if math.isinf(config.epsilon) else f"{config.epsilon:g}",
        )
        try:
            run_dir = run_experiment(config)
            metrics = json.loads((run_dir / "metrics.json").read_text())
            rows.append(label + (
                _format_metric(metrics["accuracy"]),
                _format_metric(metrics["macro_f1"]),
                _format_metric(metrics["perplexity"]),
            ))
        except UnsatisfiableBudgetError:
            rows.append(label + ("failed: calibration", "", ""))
        except Exception as error:  # noqa: BLE001 - cells must not sink the sweep
            rows.append(label + (f"failed: {type(error).__name__}", "", ""))
    lines = [
        "| dataset | model | epsilon | Acc | MF1 | PPL |",
        "| --- | --- | --- | --- | --- | --- |",
    ]
    lines.extend("| " + " | ".join(row) + " |" for row in rows)
    table = output / "table.md"
    table.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return table


def expand_sweep(raw: dict) -> list[ExperimentConfig]:
    """A sweep file is either an explicit experiment list or base + grid."""
    base = dict(raw.get("base", {}))
    # A base-level output_dir is the sweep root, not a per-cell directory;
    # each cell gets its own subdirectory unless it names one explicitly.
    output_dir = raw.get("output_dir", base.pop("output_dir", "sweep"))
    cells: list[dict] = []
    if "experiments" in raw:
        cells = [{**base, **cell} for cell in raw["experiments"]]
    elif "grid" in raw:
        grid = raw["grid"]
        keys = list(grid)
        for combo in itertools.product(*(grid[k] for k in keys)):
            cells.append({**base, **dict(zip(keys, combo))})
    else:
        raise ValueError("sweep config needs 'experiments' or 'grid'")
    configs = []
    for cell in cells:
        cell = dict(cell)
        suffix = "-".join(
            str(cell.get(k, "")) for k in ("model", "epsilon") if k in cell
        ) or f"cell{len(configs)}"
        cell.setdefault("output_dir", str(Path(output_dir) / f"run-{suffix}"))
        configs.append(ExperimentConfig.from_dict(cell))
    return configs


# ---------------------------------------------------------------------------
# command line


def _cmd_run(args: argparse.Namespace) -> int:
    raw = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        raw["seeds"] = [args.seed]
    if args.out is not None:
        raw["output_dir"] = args.out
    if args.epsilon_override is not None:
        raw["epsilon"] = args.epsilon_override
    run_dir = run_experiment(ExperimentConfig.from_dict(raw))
    print(run_dir)
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    raw = json.loads(Path(args.config).read_text())
    if args.out is not None:
        raw["output_dir"] = args.out
    table = sweep(expand_sweep(raw), raw.get("output_dir", "sweep"))
    print(table)
    return 0


def _cmd_audit(args: argparse.Namespace) -> int:
    records = load_jsonl(args.data)
    audit = audit_author_contributions(records)
    budget = PrivacyBudget(epsilon=args.epsilon, delta=args.delta)
    if args.k is not None:
        effective = group_privacy(budget, args.k)
    else:
        effective = effective_budget(budget, audit)
    print(json.dumps(_jsonify(audit_document(effective, audit)), sort_keys=True, indent=2))
    return 0


def _cmd_accountant(args: argparse.Namespace) -> int:
    epsilon, order = dp_sgd_epsilon(args.q, args.sigma, args.steps, args.delta)
    print(json.dumps({"epsilon": epsilon, "best_order": order, "delta": args.delta}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpsynth",
        description="Differentially private synthetic text experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment from a JSON config")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--seed", type=int, default=None, help="replace the config's seed list")
    run_p.add_argument("--out", default=None, help="override the output directory")
    run_p.add_argument("--epsilon-override", default=None, help="replace epsilon (number or 'inf')")
    run_p.set_defaults(func=_cmd_run)

    sweep_p = sub.add_parser("sweep", help="run a grid of experiments and tabulate")
    sweep_p.add_argument("--config", required=True)
    sweep_p.add_argument("--out", default=None)
    sweep_p.set_defaults(func=_cmd_sweep)

    audit_p = sub.add_parser("audit", help="author-contribution audit of a JSONL dataset")
    audit_p.add_argument("--data", required=True)
    audit_p.add_argument("--epsilon", type=float, required=True)
    audit_p.add_argument("--delta", type=float, required=True)
    audit_p.add_argument("--k", type=int, default=None, help="assume k contributions per author")
    audit_p.set_defaults(func=_cmd_audit)

    acct_p = sub.add_parser("accountant", help="epsilon for (sigma, q, steps) at delta")
    acct_p.add_argument("--sigma", type=float, required=True)
    acct_p.add_argument("--q", type=float, required=True)
    acct_p.add_argument("--steps", type=int, required=True)
    acct_p.add_argument("--delta", type=float, required=True)
    acct_p.set_defaults(func=_cmd_accountant)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv if argv is not None else sys.argv[1:])
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
