"""Pipeline command line: corpus | train | extract | subspace | evaluate | report.

Every stage reads one JSON config file and writes its artifacts under the
configured output directory, so stages can be rerun independently.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from . import builtin_data_path
from .corpus import (
    CorpusSplit, SyntheticCorpusSpec, TokenizerModel, build_vocab, chunk,
    generate_synthetic, load_split_manifest, read_corpus_dir,
    save_split_manifest, split, tokenize_document,
)
from .embed import (
    CorpusIndex, build_dataset, load_anchor_lexicon, load_corpus_index,
    load_dataset, save_corpus_index, save_dataset,
)
from .model import (
    Checkpoint, MaskingPolicy, ModelConfig, load_checkpoint, save_checkpoint,
    train,
)
from .report import (
    build_manifest, emit_accuracy_curve, emit_bias_tables,
    emit_dimension_report, emit_recall_heatmaps, file_sha256, write_csv,
    write_manifest,
)
from .stats import significance_table
from .subspace import (
    ablate_dimension, cluster_recalls, fit_svm, load_probe_results,
    load_subspace, per_dimension_probe, save_clustering, save_probe_results,
    save_subspace,
)
from .templates import (
    accuracy_breakdown, evaluate, generate_sentences, generation_summary,
    load_eval_rows, load_lexicons, save_eval_records,
)

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "out",
    "corpus": {
        "input_dir": None,
        "synthetic": None,
    },
    "tokenizer": {"max_vocab": 30000, "min_freq": 3, "charset_limit": 1000},
    "chunking": {"max_len": 510, "stride": 384},
    "split": {"proportions": [0.8, 0.1, 0.1]},
    "model": {"num_layers": 2, "hidden_dim": 64, "num_heads": 4,
              "ffn_dim": 256, "max_len": 512, "dropout": 0.0},
    "masking": {"mask_fraction": 0.15, "mask_prob": 0.8, "random_prob": 0.1,
                "keep_prob": 0.1},
    "training": {"num_epochs": 10, "batch_size": 32, "learning_rate": 1e-3,
                 "checkpoint_every": 1},
    "anchors": {"pairs": "builtin:anchor_pairs.csv",
                "exclusions": "builtin:anchor_exclusions.csv"},
    "templates": {"targets": "builtin:targets.csv",
                  "attributes": "builtin:attributes.csv"},
    "subspace": {"cap": 200, "folds": 5, "regularization": 1.0,
                 "gap_tol": 1e-4, "probe_epochs": "final",
                 "clusters_k": 30, "eval_epoch": "final"},
    "report": {"top_k_dimensions": 5},
}

# fixed offsets from the master seed, one per randomized stage
SEED_OFFSETS = {"synthetic": 0, "split": 1, "model": 2, "masking": 3,
                "sampling": 4, "folds": 5, "clustering": 6}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | Path, seed_override: int | None = None) -> dict:
    user = json.loads(Path(path).read_text(encoding="utf-8"))
    cfg = _merge(DEFAULT_CONFIG, user)
    if seed_override is not None:
        cfg["seed"] = seed_override
    cfg["_seeds"] = {name: cfg["seed"] + off for name, off in SEED_OFFSETS.items()}
    return cfg


def _resolve_path(value: str) -> Path:
    if value.startswith("builtin:"):
        return builtin_data_path(value[len("builtin:"):])
    return Path(value)


def _out(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _tokenizer_path(cfg) -> Path:
    return _out(cfg) / "vocab.txt"


def _load_tokenizer(cfg) -> TokenizerModel:
    t = cfg["tokenizer"]
    return TokenizerModel.load(_tokenizer_path(cfg), max_vocab=t["max_vocab"],
                               min_freq=t["min_freq"], charset_limit=t["charset_limit"])


def stage_corpus(cfg: dict) -> None:
    out = _out(cfg)
    corpus_cfg = cfg["corpus"]
    if corpus_cfg.get("synthetic"):
        synth = dict(corpus_cfg["synthetic"])
        synth.setdefault("seed", cfg["_seeds"]["synthetic"])
        synth["male_words"] = tuple(synth["male_words"])
        synth["female_words"] = tuple(synth["female_words"])
        synth["professions"] = tuple((name, float(p)) for name, p in synth["professions"])
        docs = generate_synthetic(SyntheticCorpusSpec(**synth))
    elif corpus_cfg.get("input_dir"):
        docs = read_corpus_dir(corpus_cfg["input_dir"])
    else:
        raise ValueError("config.corpus needs either synthetic settings or input_dir")

    t = cfg["tokenizer"]
    tokenizer = build_vocab(docs, max_vocab=t["max_vocab"], min_freq=t["min_freq"],
                            charset_limit=t["charset_limit"])
    tokenizer.save(_tokenizer_path(cfg))

    ch = cfg["chunking"]
    tokenized = [tokenize_document(tokenizer, d) for d in docs]
    chunks_by_doc = {td.doc_id: chunk(td, max_len=ch["max_len"], stride=ch["stride"])
                     for td in tokenized}
    index = CorpusIndex(tokenized, chunks_by_doc)
    save_corpus_index(index, out / "corpus_index.json")

    all_chunks = [c for td in tokenized for c in chunks_by_doc[td.doc_id]]
    s = split(all_chunks, tuple(cfg["split"]["proportions"]), seed=cfg["_seeds"]["split"])
    save_split_manifest(s, out / "split_manifest.csv")
    print(f"corpus: {len(docs)} documents, vocab {tokenizer.vocab_size}, "
          f"{len(all_chunks)} chunks, shares {tuple(round(x, 3) for x in s.token_shares())}")


def _rebuild_split(cfg: dict, index: CorpusIndex) -> CorpusSplit:
    assignment = load_split_manifest(_out(cfg) / "split_manifest.csv")
    parts = {"train": [], "validation": [], "test": []}
    for doc_id, chunks in index.chunks_by_doc.items():
        parts[assignment[doc_id]].extend(chunks)
    return CorpusSplit(parts["train"], parts["validation"], parts["test"],
                       tuple(cfg["split"]["proportions"]), assignment)


def _checkpoint_dir(cfg) -> Path:
    p = _out(cfg) / "checkpoints"
    p.mkdir(parents=True, exist_ok=True)
    return p


def _list_checkpoints(cfg) -> list[Path]:
    return sorted(_checkpoint_dir(cfg).glob("epoch_*.ckpt"))


def stage_train(cfg: dict) -> None:
    out = _out(cfg)
    tokenizer = _load_tokenizer(cfg)
    index = load_corpus_index(out / "corpus_index.json")
    s = _rebuild_split(cfg, index)
    m = cfg["model"]
    config = ModelConfig(vocab_size=tokenizer.vocab_size, num_layers=m["num_layers"],
                         hidden_dim=m["hidden_dim"], num_heads=m["num_heads"],
                         ffn_dim=m["ffn_dim"], max_len=m["max_len"],
                         dropout=m["dropout"], seed=cfg["_seeds"]["model"])
    if cfg["chunking"]["max_len"] + 2 > config.max_len:
        raise ValueError("chunking.max_len must leave room for [CLS]/[SEP] "
                         f"within model.max_len ({config.max_len})")
    policy = MaskingPolicy(**cfg["masking"], seed=cfg["_seeds"]["masking"])
    tr = cfg["training"]
    log_path = out / "training_log.csv"
    log_path.unlink(missing_ok=True)
    checkpoints = train(s, config, policy, tr["num_epochs"],
                        checkpoint_every=tr["checkpoint_every"],
                        batch_size=tr["batch_size"],
                        learning_rate=tr["learning_rate"], log_path=log_path)
    for ckpt in checkpoints:
        save_checkpoint(ckpt, _checkpoint_dir(cfg) / f"epoch_{ckpt.epoch:05d}.ckpt")
    final = checkpoints[-1]
    print(f"train: {len(checkpoints)} checkpoints, final train loss "
          f"{final.train_loss:.4f}, val loss {final.val_loss:.4f}")


def _anchor_lexicon(cfg):
    return load_anchor_lexicon(_resolve_path(cfg["anchors"]["pairs"]),
                               _resolve_path(cfg["anchors"]["exclusions"]))


def stage_extract(cfg: dict) -> None:
    out = _out(cfg)
    index = load_corpus_index(out / "corpus_index.json")
    lexicon = _anchor_lexicon(cfg)
    dataset_dir = out / "datasets"
    dataset_dir.mkdir(parents=True, exist_ok=True)
    sub = cfg["subspace"]
    for path in _list_checkpoints(cfg):
        ckpt = load_checkpoint(path)
        dataset = build_dataset(ckpt, index, lexicon, cap=sub["cap"],
                                seed=cfg["_seeds"]["sampling"])
        save_dataset(dataset, dataset_dir / f"epoch_{ckpt.epoch:05d}.csv")
        print(f"extract: epoch {ckpt.epoch}, {len(dataset)} embeddings")


def _resolve_epochs(selector, available: list[int]) -> list[int]:
    if selector == "final":
        return [max(available)]
    if selector == "all":
        return list(available)
    chosen = [int(e) for e in selector]
    missing = sorted(set(chosen) - set(available))
    if missing:
        raise ValueError(f"no artifacts for requested epochs {missing}")
    return chosen


def stage_subspace(cfg: dict) -> None:
    out = _out(cfg)
    sub = cfg["subspace"]
    dataset_paths = sorted((out / "datasets").glob("epoch_*.csv"))
    if not dataset_paths:
        raise ValueError("no extracted datasets; run the extract stage first")
    subspace_dir = out / "subspaces"
    subspace_dir.mkdir(parents=True, exist_ok=True)

    datasets = {}
    for path in dataset_paths:
        dataset = load_dataset(path)
        datasets[dataset[0].checkpoint] = dataset
    epochs = sorted(datasets)

    for epoch in epochs:
        fitted = fit_svm(datasets[epoch], folds=sub["folds"], C=sub["regularization"],
                         seed=cfg["_seeds"]["folds"], gap_tol=sub["gap_tol"])
        save_subspace(fitted, subspace_dir / f"epoch_{epoch:05d}.txt")
        print(f"subspace: epoch {epoch}, cv accuracy {fitted.cv_accuracy:.3f}")

    probe_epochs = _resolve_epochs(sub["probe_epochs"], epochs)
    probes = []
    ablation_rows = []
    clusterings = []
    for epoch in probe_epochs:
        results = per_dimension_probe(datasets[epoch], folds=sub["folds"],
                                      seed=cfg["_seeds"]["folds"],
                                      C=sub["regularization"], gap_tol=sub["gap_tol"])
        probes.extend(results)
        best = max(results, key=lambda r: (r.cv_accuracy, -r.dimension))
        ablated = ablate_dimension(datasets[epoch], best.dimension, folds=sub["folds"],
                                   seed=cfg["_seeds"]["folds"], C=sub["regularization"],
                                   gap_tol=sub["gap_tol"])
        ablation_rows.append((epoch, best.dimension, ablated.cv_accuracy,
                              ablated.train_accuracy))
        print(f"subspace: epoch {epoch} probes done, best dim {best.dimension} "
              f"({best.cv_accuracy:.3f}), all-but-best {ablated.cv_accuracy:.3f}")
    save_probe_results(probes, out / "probes.csv")
    write_csv(out / "ablations.csv",
              ["epoch", "ablated_dimension", "cv_accuracy", "train_accuracy"],
              ablation_rows)

    cluster_epoch = max(probe_epochs)
    epoch_probes = [p for p in probes if p.checkpoint == cluster_epoch]
    for cls in ("female", "male"):
        clusterings.append(cluster_recalls(epoch_probes, cls, k=sub["clusters_k"],
                                           seed=cfg["_seeds"]["clustering"]))
    save_clustering(clusterings, out / "clusters.csv")


def stage_evaluate(cfg: dict) -> None:
    out = _out(cfg)
    tokenizer = _load_tokenizer(cfg)
    targets, attributes = load_lexicons(_resolve_path(cfg["templates"]["targets"]),
                                        _resolve_path(cfg["templates"]["attributes"]))
    sentences = generate_sentences(targets, attributes)
    summary = generation_summary(sentences)
    (out / "generation_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    available = [int(p.stem.split("_")[1]) for p in _list_checkpoints(cfg)]
    epoch = _resolve_epochs(cfg["subspace"]["eval_epoch"], available)[0]
    ckpt = load_checkpoint(_checkpoint_dir(cfg) / f"epoch_{epoch:05d}.ckpt")
    subspace = load_subspace(out / "subspaces" / f"epoch_{epoch:05d}.txt")
    records = evaluate(ckpt, subspace, sentences, tokenizer)
    save_eval_records(records, out / "eval_records.csv")
    usable = [r for r in records if not r.flagged]
    acc = float(np.mean([r.correct for r in usable])) if usable else float("nan")
    print(f"evaluate: {summary['generated']} sentences "
          f"(reference total {summary['paper_reference_total']}), epoch {epoch}, "
          f"accuracy {acc:.3f}, {len(records) - len(usable)} flagged")


def stage_report(cfg: dict) -> None:
    out = _out(cfg)
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)

    subspaces = [load_subspace(p) for p in sorted((out / "subspaces").glob("epoch_*.txt"))]
    emit_accuracy_curve(subspaces, reports / "accuracy_curve.csv",
                        reports / "accuracy_curve.svg")

    probes = load_probe_results(out / "probes.csv")
    ablations = {}
    for line in (out / "ablations.csv").read_text(encoding="utf-8").splitlines()[1:]:
        if line:
            epoch, _, acc, _ = line.split(",")
            ablations[int(epoch)] = float(acc)
    emit_dimension_report(probes, ablations, subspaces, reports / "dimensions.csv",
                          reports / "dimensions.svg", k=cfg["report"]["top_k_dimensions"])

    clusterings = _load_clusterings(out / "clusters.csv")
    emit_recall_heatmaps(clusterings, reports / "recall_clusters.csv",
                         reports / "recall_heatmap", reports / "recall_summary.csv")

    rows = load_eval_rows(out / "eval_records.csv")
    breakdown = accuracy_breakdown(rows, ("alignment", "target_gender", "attribute_form"))
    ztests = significance_table(rows)
    emit_bias_tables(breakdown, ztests, reports / "bias_accuracy.csv",
                     reports / "significance.csv")

    output_files = sorted(p for p in reports.iterdir() if p.is_file())
    checkpoints = []
    for path in _list_checkpoints(cfg):
        ckpt = load_checkpoint(path)
        checkpoints.append((ckpt.epoch, ckpt.checksum()))
    public_cfg = {k: v for k, v in cfg.items() if not k.startswith("_")}
    manifest = build_manifest(public_cfg, cfg["_seeds"],
                              file_sha256(out / "corpus_index.json"),
                              checkpoints, output_files)
    write_manifest(manifest, reports / "manifest.json")
    print(f"report: {len(output_files)} report files, "
          f"{len(checkpoints)} checkpoints in manifest")


def _load_clusterings(path: Path):
    from .subspace import RecallClustering
    per_class: dict[str, dict[int, tuple[int, float]]] = {}
    for line in path.read_text(encoding="utf-8").splitlines()[1:]:
        if not line:
            continue
        cls, dim, cid, mean = line.split(",")
        per_class.setdefault(cls, {})[int(dim)] = (int(cid), float(mean))
    out = []
    for cls, dims in per_class.items():
        assignments = tuple(dims[d][0] for d in sorted(dims))
        k = max(cid for cid, _ in dims.values()) + 1
        means = [0.0] * k
        for cid, mean in dims.values():
            means[cid] = mean
        out.append(RecallClustering(cls, k, assignments, tuple(means)))
    return out


STAGES = {
    "corpus": stage_corpus,
    "train": stage_train,
    "extract": stage_extract,
    "subspace": stage_subspace,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="biasprobe",
        description="Train a small masked language model and probe how its "
                    "gender subspace forms and responds to context.")
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config's master seed")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in STAGES.items():
        sub.add_parser(name, help=fn.__doc__)
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, seed_override=args.seed)
        STAGES[args.command](cfg)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"biasprobe {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
