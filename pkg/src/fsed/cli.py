"""Command-line entry point tying the modules into reproducible runs."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import scm
from .data import (
    SyntheticConfig,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_by_types,
    trigger_coverage,
)
from .evaluate import Detector, episode_protocol, mean_micro_f1, test_protocol
from .intervene import CandidateMode, InterventionConfig, Side, mask_trigger
from .model import SimilarityKind, load_params, save_params
from .predictor import (
    ExternalCandidateSource,
    count_candidate_fn,
    fit_counts,
    load_external_logits,
    load_predictor,
    save_predictor,
    write_masked_instances,
)
from .report import (
    plot_history,
    plot_per_type_f1,
    write_reports_csv,
    write_reports_json,
)
from .train import TrainConfig, train_loop

SIDE_CHOICES = ("none", "support", "query", "both")


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON file with flag defaults")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--k-shot", type=int, default=None)
    parser.add_argument("--lambda", dest="lam", type=float, default=None)
    parser.add_argument("--top-n", type=int, default=None)
    parser.add_argument("--side", choices=SIDE_CHOICES, default=None)
    parser.add_argument("--similarity", choices=("proto", "relation"), default=None)
    parser.add_argument(
        "--candidate-mode", choices=("per-instance", "pooled"), default=None
    )
    parser.add_argument("--logits", type=Path, default=None,
                        help="external logits file; overrides the count predictor")
    parser.add_argument("--predictor", type=Path, default=None,
                        help="serialized count predictor; otherwise one is fit in-run")
    parser.add_argument("--workers", type=int, default=None)


DEFAULTS = {
    "seed": 0,
    "k_shot": 5,
    "lam": 0.5,
    "top_n": 10,
    "side": "support",
    "similarity": "proto",
    "candidate_mode": "per-instance",
    "workers": 1,
    "repeats": 4,
    "lr": 1e-2,
    "weight_decay": 0.0,
    "epochs": 80,
    "patience": 15,
    "batches_per_epoch": 40,
    "n_pos": 2,
    "n_neg": 10,
    "eval_positives": 10,
    "eval_negatives": 100,
    "ambiguous": 0,
    "d_emb": 32,
    "d_rep": 32,
    "d_hid": 64,
    "window": 2,
    "encoder_init": "uniform",
    "pretrained_embeddings": False,
    "smoothing_k": 1.0,
}


def effective_config(args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    merged = dict(DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            file_values = json.load(fh)
        unknown = set(file_values) - set(merged)
        if unknown:
            raise SystemExit(f"unknown config fields: {sorted(unknown)}")
        merged.update(file_values)
    for key in merged:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _intervention(config: dict) -> InterventionConfig | None:
    side = Side(config["side"])
    if side == Side.NONE:
        return None
    return InterventionConfig(
        lam=config["lam"],
        top_n=config["top_n"],
        side=side,
        candidate_mode=CandidateMode(config["candidate_mode"]),
    )


def _candidate_source(
    config: dict,
    logits: Path | None,
    predictor_path: Path | None,
    fallback_corpus,
) -> object:
    if logits is not None:
        return ExternalCandidateSource(load_external_logits(logits))
    if predictor_path is not None:
        return count_candidate_fn(load_predictor(predictor_path))
    predictor = fit_counts([inst.tokens for inst in fallback_corpus], k=config["smoothing_k"])
    return count_candidate_fn(predictor)


def _echo_config(config: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {k: (str(v) if isinstance(v, Path) else v) for k, v in config.items()}
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def cmd_verify_scm(args: argparse.Namespace) -> int:
    graph = scm.fsed_graph()
    report = scm.verify_backdoor_proof(graph)
    print(report.describe())
    verified = sum(step.verdict for step in report.steps)
    print(f"{verified}/5 steps verified")

    rng = np.random.default_rng(args.seed or 0)
    worst = 0.0
    for _ in range(args.scms):
        model = scm.random_fsed_scm(rng)
        c = int(rng.integers(model.cardinality["C"]))
        e = int(rng.integers(model.cardinality["E"]))
        q = int(rng.integers(model.cardinality["Q"]))
        estimate = scm.backdoor_estimate(model, c, e, q)
        oracle = scm.interventional_distribution(model, {"C": c}, {"E": e, "Q": q}, "Y")
        worst = max(worst, float(np.max(np.abs(estimate - oracle))))
    print(f"backdoor vs interventional over {args.scms} random models: "
          f"max |diff| = {worst:.2e} (tol {args.tol})")

    violations = 0
    checked = 0
    for _ in range(args.dsep_dags):
        dag = scm.random_dag(rng, n_nodes=int(rng.integers(3, 7)), edge_prob=0.45)
        model = scm.random_scm(rng, dag)
        names = list(dag.nodes)
        for _ in range(10):
            x, y = rng.choice(names, size=2, replace=False)
            rest = [n for n in names if n not in (x, y)]
            z = {n for n in rest if rng.random() < 0.4}
            if scm.d_separated(dag, {x}, {y}, z):
                checked += 1
                if not scm.ci_brute_force(model, {x}, {y}, z, tol=1e-9):
                    violations += 1
    print(f"d-separation soundness: {checked} separated triples checked, "
          f"{violations} violations")
    ok = report.all_verified and worst < args.tol and violations == 0
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = SyntheticConfig(
        n_types=args.n_types,
        instances_per_type=args.instances_per_type,
        dominance=args.dominance,
        ambiguity_rate=args.ambiguity_rate,
        decoy_rate=args.decoy_rate,
        min_len=args.min_len,
        max_len=args.max_len,
    )
    corpus = generate_synthetic(config, seed=args.seed or 0)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(corpus, out / "corpus.jsonl")
    train, dev, test = split_by_types(
        corpus, (args.train_frac, args.dev_frac, 1.0 - args.train_frac - args.dev_frac),
        seed=args.seed or 0,
    )
    save_dataset(train, out / "train.jsonl")
    save_dataset(dev, out / "dev.jsonl")
    save_dataset(test, out / "test.jsonl")
    coverage = trigger_coverage(corpus)
    with open(out / "coverage.json", "w", encoding="utf-8") as fh:
        json.dump(coverage, fh, indent=2, sort_keys=True)
    payload = dataclasses.asdict(config)
    payload["seed"] = args.seed or 0
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    print(f"wrote {len(corpus)} instances "
          f"({len(train)}/{len(dev)}/{len(test)} train/dev/test) to {out}")
    print(f"top-5 trigger coverage: min {min(coverage.values()):.3f} "
          f"max {max(coverage.values()):.3f}")
    return 0


def cmd_fit_predictor(args: argparse.Namespace) -> int:
    corpus = load_dataset(args.train)
    predictor = fit_counts([inst.tokens for inst in corpus], k=args.k_smoothing)
    save_predictor(predictor, args.out)
    print(f"fitted on {len(corpus)} sentences, vocabulary {len(predictor.vocabulary)}; "
          f"wrote {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = effective_config(args)
    out_dir = Path(args.out_dir)
    _echo_config(config, out_dir)
    train_pool = load_dataset(args.train)
    dev_pool = load_dataset(args.dev)
    vocab_pool = list(train_pool) + list(dev_pool)
    if args.test:
        # unlabeled token coverage only: unseen-type words keep their own
        # embedding rows instead of collapsing to [UNK]
        vocab_pool += load_dataset(args.test)

    train_config = TrainConfig(
        k_shot=config["k_shot"], n_pos=config["n_pos"], n_neg=config["n_neg"],
        dev_pos=config["eval_positives"], dev_neg=config["eval_negatives"],
        dev_ambiguous=config["ambiguous"],
        batches_per_epoch=config["batches_per_epoch"],
        max_epochs=config["epochs"], patience=config["patience"],
        lr=config["lr"], weight_decay=config["weight_decay"],
        kind=SimilarityKind(config["similarity"]),
        d_emb=config["d_emb"], d_rep=config["d_rep"], d_hid=config["d_hid"],
        window=config["window"], smoothing_k=config["smoothing_k"],
        encoder_init=config["encoder_init"],
        pretrained_embeddings=config["pretrained_embeddings"],
    )
    intervention = _intervention(config)
    candidate_fn = None
    if intervention is not None:
        candidate_fn = _candidate_source(config, args.logits, args.predictor, train_pool)

    started = time.time()
    params, history = train_loop(
        train_pool, dev_pool, train_config, intervention,
        seed=config["seed"], candidate_fn=candidate_fn, vocab_pool=vocab_pool,
    )
    history["wall_seconds"] = round(time.time() - started, 2)
    save_params(params, out_dir / "params.txt")
    with open(out_dir / "history.json", "w", encoding="utf-8") as fh:
        json.dump(history, fh, indent=2, sort_keys=True)
    plot_history(history, out_dir / "history.png")
    print(f"best dev micro-F1 {history['best_dev_micro_f1']:.4f} "
          f"at epoch {history['best_epoch']} (stopped {history['stopped_epoch']}); "
          f"artifacts in {out_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = effective_config(args)
    out_dir = Path(args.out_dir)
    _echo_config(config, out_dir)
    params = load_params(args.params)
    pool = load_dataset(args.test)
    intervention = _intervention(config)
    candidate_fn = None
    if intervention is not None:
        candidate_fn = _candidate_source(config, args.logits, args.predictor, pool)
    detector = Detector(
        params, SimilarityKind(config["similarity"]), intervention, candidate_fn
    )
    rng = np.random.default_rng(config["seed"])
    if args.protocol == "full":
        reports = test_protocol(
            detector, pool, config["k_shot"], repeats=config["repeats"],
            rng=rng, seed=config["seed"], workers=config["workers"],
        )
    else:
        n_amb = config["ambiguous"]
        if n_amb < 0:
            n_amb = config["eval_negatives"]
        reports = episode_protocol(
            detector, pool, config["k_shot"],
            config["eval_positives"], config["eval_negatives"],
            n_ambiguous=n_amb, repeats=config["repeats"],
            rng=rng, seed=config["seed"], workers=config["workers"],
        )
    write_reports_json(reports, out_dir / "reports.json")
    write_reports_csv(reports, out_dir / "reports.csv")
    plot_per_type_f1(reports, out_dir / "f1_by_type.png")
    print(f"mean micro-F1 {mean_micro_f1(reports):.4f} over {len(reports)} repeats; "
          f"reports in {out_dir}")
    return 0


def cmd_export_masks(args: argparse.Namespace) -> int:
    from .intervene import MaskedContext

    pool = load_dataset(args.data)
    contexts = []
    skipped = 0
    for inst in pool:
        eligible = [
            etype
            for etype in sorted({ev.type for ev in inst.events})
            if len(inst.spans_of(etype)) == 1
        ]
        if len(eligible) == 1:
            # record ids are plain instance ids so eval-time lookups match
            contexts.append(mask_trigger(inst, eligible[0]))
        elif len(eligible) > 1:
            skipped += 1
        if args.positions:
            for position in range(len(inst.tokens)):
                tokens = (
                    inst.tokens[:position] + ("[MASK]",) + inst.tokens[position + 1 :]
                )
                contexts.append(
                    MaskedContext(
                        tokens=tokens,
                        mask_index=position,
                        original_trigger=(inst.tokens[position],),
                        source_id=f"{inst.id}@{position}",
                    )
                )
    count = write_masked_instances(contexts, args.out)
    note = f" ({skipped} multi-type instances skipped)" if skipped else ""
    print(f"wrote {count} masked instances to {args.out}{note}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsed",
        description="Few-shot event detection with causal intervention",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify-scm", help="check the five-step backdoor proof and run the SCM oracle batch")
    p.add_argument("--scms", type=int, default=100)
    p.add_argument("--dsep-dags", type=int, default=25)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify_scm)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus and type-disjoint splits")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-types", type=int, default=SyntheticConfig.n_types)
    p.add_argument("--instances-per-type", type=int, default=SyntheticConfig.instances_per_type)
    p.add_argument("--dominance", type=float, default=SyntheticConfig.dominance)
    p.add_argument("--ambiguity-rate", type=float, default=SyntheticConfig.ambiguity_rate)
    p.add_argument("--decoy-rate", type=float, default=None)
    p.add_argument("--min-len", type=int, default=SyntheticConfig.min_len)
    p.add_argument("--max-len", type=int, default=SyntheticConfig.max_len)
    p.add_argument("--train-frac", type=float, default=0.6)
    p.add_argument("--dev-frac", type=float, default=0.2)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit-predictor", help="fit and serialize the count-based candidate predictor")
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--k-smoothing", type=float, default=1.0)
    p.set_defaults(func=cmd_fit_predictor)

    p = sub.add_parser("train", help="episodic training with early stopping")
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--dev", type=Path, required=True)
    p.add_argument("--test", type=Path, default=None,
                   help="optional: include this split's tokens in the vocabulary")
    p.add_argument("--out-dir", type=Path, required=True)
    _add_common_flags(p)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--batches-per-epoch", type=int, default=None)
    p.add_argument("--n-pos", type=int, default=None)
    p.add_argument("--n-neg", type=int, default=None)
    p.add_argument("--eval-positives", type=int, default=None)
    p.add_argument("--eval-negatives", type=int, default=None)
    p.add_argument("--ambiguous", type=int, default=None)
    p.add_argument("--d-emb", type=int, default=None)
    p.add_argument("--d-rep", type=int, default=None)
    p.add_argument("--d-hid", type=int, default=None)
    p.add_argument("--encoder-init", choices=("uniform", "slots"), default=None)
    p.add_argument("--pretrained-embeddings", action="store_const", const=True, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model on a test split")
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--params", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--protocol", choices=("full", "episode"), default="full")
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--eval-positives", type=int, default=None)
    p.add_argument("--eval-negatives", type=int, default=None)
    p.add_argument("--ambiguous", type=int, default=None,
                   help="episode protocol: ambiguous negatives per episode "
                        "(-1 means as many as ordinary negatives)")
    _add_common_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-masks", help="write masked instances for an external logits producer")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--positions", action="store_true",
                   help="also mask every token position (query-side adjustment)")
    p.set_defaults(func=cmd_export_masks)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
