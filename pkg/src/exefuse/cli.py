"""Command-line entry point: ``exefuse <command> [options]``.

Stages share one work directory (``--out``).  ``prepare`` copies the graphs
there and writes the splits; later stages read only from that directory and
each leaves a ``<command>.manifest`` with the resolved config, the seed and
sha256 digests of everything it read and wrote.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .dataset import (
    SyntheticConfig,
    benchmark_manifest,
    build_distant_supervision,
    generate_synthetic_benchmark,
    load_benchmark,
    load_graphs,
    read_candidates,
    read_pairs,
    split_dataset,
    split_with_entity_holdout,
    write_benchmark,
    write_candidates,
    write_pairs,
)
from .embed import PretrainConfig, load_table, save_table
from .evaluator import (
    Metrics,
    candidate_arrays,
    classify_triples,
    evaluate_ref,
    measure_scaling,
    ref_labels,
    rule_usage,
    run_ablation,
    split_seen_unseen,
    write_metrics,
    write_predictions,
    write_rule_usage,
)
from .gradcheck import check_joint_gradient
from .kg import KGFormatError
from .manifest import file_digest, read_manifest, write_manifest
from .model import VARIANTS, ModelConfig, load_model, save_model
from .numkit import make_rng
from .pipeline import SEED_TRAIN, PipelineConfig, prepare_model, pretrain
from .trainer import DomainEncoderConfig, TrainConfig, fuse, train

log = logging.getLogger("exefuse")

GRADCHECK_TOLERANCE = 1e-4

SECTIONS = {
    "synth": SyntheticConfig,
    "pretrain": PretrainConfig,
    "model": ModelConfig,
    "domain": DomainEncoderConfig,
    "train": TrainConfig,
}
# derived elsewhere: embedding width follows model.d_emb, the train seed follows --seed
DERIVED_KEYS = {"pretrain.d_emb", "train.seed"}
TOP_LEVEL = {"seed": 0, "scheme": "s1", "warm_start": True, "holdout": 0.0, "top_m": 1}

FLAG_KEYS = {
    "seed": "seed",
    "scheme": "scheme",
    "rules": "model.n_rules",
    "protos": "model.n_protos",
    "tau": "model.tau",
    "delta": "train.delta",
    "lam": "train.lam",
    "variant": "model.variant",
    "holdout": "holdout",
    "top_m": "top_m",
}

# stage whose manifest seeds the config of a later stage in the same work directory
UPSTREAM = {"pretrain": "prepare", "train": "pretrain", "evaluate": "train", "fuse": "train", "scale": "train"}

GRAPH_FILES = ("dkg.tsv", "gkg.tsv", "alignment.tsv")
SPLIT_FILES = ("train.tsv", "valid.tsv", "test.tsv", "pairs.tsv")
EMBEDDINGS = "embeddings.ckpt"
MODEL = "model.ckpt"


class CliError(Exception):
    """Reported as ``error: <message>`` with exit status 2."""


# --- configuration ------------------------------------------------------------

def default_config() -> dict[str, object]:
    cfg: dict[str, object] = dict(TOP_LEVEL)
    for name, cls in SECTIONS.items():
        for f in fields(cls):
            key = f"{name}.{f.name}"
            if key not in DERIVED_KEYS:
                cfg[key] = f.default
    return cfg


def _coerce(key: str, raw, like):
    if isinstance(raw, type(like)) and not (isinstance(like, float) and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise CliError(f"{key}: expected {type(like).__name__}, got {text!r}") from None
    return text


def resolve_config(config_file: Optional[str], overrides: dict[str, object],
                   inherited: Optional[dict[str, str]] = None) -> dict[str, object]:
    """Defaults, then the upstream stage's config, then the ``key = value`` file, then flags.

    A config file carrying a ``command`` entry is a run manifest; only its
    config keys are used and the digests and counts are ignored.
    """
    cfg = default_config()
    layers = []
    if inherited:
        layers.append({k: v for k, v in inherited.items() if k in cfg})
    if config_file:
        try:
            entries = read_manifest(config_file)
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read config file: {exc}") from None
        if "command" in entries:
            entries = {k: v for k, v in entries.items() if k in cfg}
        layers.append(entries)
    layers.append(overrides)
    for layer in layers:
        for key, raw in layer.items():
            if key not in cfg:
                raise CliError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, raw, cfg[key])
    if cfg["scheme"] not in ("s1", "s2"):
        raise CliError(f"scheme: expected s1 or s2, got {cfg['scheme']!r}")
    if not 0.0 <= float(cfg["holdout"]) < 1.0:
        raise CliError("holdout: must lie in [0, 1)")
    if int(cfg["top_m"]) < 1:
        raise CliError("top_m: must be at least 1")
    if cfg["model.variant"] == "single_affine":
        cfg["model.n_rules"] = 1
    for name in SECTIONS:
        section_config(cfg, name)
    return cfg


def section_config(cfg: dict[str, object], name: str):
    cls = SECTIONS[name]
    kw = {f.name: cfg[f"{name}.{f.name}"] for f in fields(cls) if f"{name}.{f.name}" in cfg}
    if name == "pretrain":
        kw["d_emb"] = cfg["model.d_emb"]
    if name == "train":
        kw["seed"] = int(cfg["seed"]) + SEED_TRAIN
    try:
        obj = cls(**kw)
        if hasattr(obj, "validate"):
            obj.validate()
    except ValueError as exc:
        raise CliError(f"invalid {name} config: {exc}") from None
    return obj


def pipeline_config(cfg: dict[str, object]) -> PipelineConfig:
    return PipelineConfig(
        pretrain=section_config(cfg, "pretrain"),
        model=section_config(cfg, "model"),
        domain=section_config(cfg, "domain"),
        train=replace(section_config(cfg, "train"), seed=0),
        scheme=str(cfg["scheme"]),
        seed=int(cfg["seed"]),
        warm_start=bool(cfg["warm_start"]),
    )


def config_entries(cfg: dict[str, object]) -> dict[str, object]:
    return {key: cfg[key] for key in sorted(cfg)}


# --- artifacts ----------------------------------------------------------------

def require(out: Path, names: Sequence[str], producer: str) -> None:
    for name in names:
        path = out / name
        if not path.is_file():
            raise CliError(f"missing required file {path} (run `{producer}` first)")


def copy_atomic(src, dst: Path) -> None:
    tmp = Path(f"{dst}.tmp")
    shutil.copyfile(src, tmp)
    os.replace(tmp, dst)


def write_text_atomic(path: Path, text: str) -> None:
    tmp = Path(f"{path}.tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def stage_manifest(out: Path, command: str, cfg: dict[str, object], inputs: Sequence[str],
                   outputs: Sequence[str], extra: Optional[dict] = None) -> None:
    entries: dict[str, object] = {"command": command, "version": __version__}
    entries.update(config_entries(cfg))
    for name in inputs:
        entries[f"input.{name}"] = file_digest(out / name)
    for name in outputs:
        entries[f"output.{name}"] = file_digest(out / name)
    entries.update(extra or {})
    write_manifest(out / f"{command}.manifest", entries)


def load_work_vocab(out: Path):
    require(out, GRAPH_FILES, "prepare")
    return load_graphs(out / "dkg.tsv", out / "gkg.tsv", out / "alignment.tsv")


# --- commands -----------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench = generate_synthetic_benchmark(section_config(cfg, "synth"), int(cfg["seed"]))
    write_benchmark(bench, out)
    entries = benchmark_manifest(bench)
    entries["command"] = "synth"
    entries["version"] = __version__
    entries.update(config_entries(cfg))
    for name in GRAPH_FILES + ("gold.tsv", "rules.tsv"):
        entries[f"output.{name}"] = file_digest(out / name)
    write_manifest(out / "manifest", entries)
    log.info("synth: %d positives, %d candidates", len(bench.positives), len(bench.gold))
    return 0


def cmd_prepare(args, cfg) -> int:
    out = Path(args.out)
    bench = Path(args.bench) if args.bench else None
    paths = {
        "dkg.tsv": args.dkg or (bench / "dkg.tsv" if bench else None),
        "gkg.tsv": args.gkg or (bench / "gkg.tsv" if bench else None),
        "alignment.tsv": args.alignment or (bench / "alignment.tsv" if bench else None),
        "candidates.tsv": args.candidates or (bench / "gold.tsv" if bench else None),
    }
    for name, p in paths.items():
        flag = "--" + name.split(".")[0]
        if p is None:
            raise CliError(f"{flag} is required (or pass --bench)")
        if not Path(p).is_file():
            raise CliError(f"{flag}: no such file {p}")
    vocab = load_graphs(paths["dkg.tsv"], paths["gkg.tsv"], paths["alignment.tsv"])
    cands = read_candidates(paths["candidates.tsv"], vocab)
    seed, scheme = int(cfg["seed"]), str(cfg["scheme"])
    holdout = float(cfg["holdout"])
    if holdout > 0:
        split, held = split_with_entity_holdout(cands, scheme, seed, holdout)
    else:
        split, held = split_dataset(cands, scheme, seed), set()
    pairs = build_distant_supervision(vocab)
    out.mkdir(parents=True, exist_ok=True)
    for name in GRAPH_FILES + ("candidates.tsv",):
        copy_atomic(paths[name], out / name)
    write_candidates(split.train, vocab, out / "train.tsv")
    write_candidates(split.valid, vocab, out / "valid.tsv")
    write_candidates(split.test, vocab, out / "test.tsv")
    write_pairs(pairs, vocab, out / "pairs.tsv")
    stage_manifest(out, "prepare", cfg, [], GRAPH_FILES + ("candidates.tsv",) + SPLIT_FILES,
                   {"n_train": len(split.train), "n_valid": len(split.valid), "n_test": len(split.test),
                    "n_pairs": len(pairs), "n_held_entities": len(held)})
    log.info("prepare: %d/%d/%d candidates, %d distant pairs", len(split.train), len(split.valid),
             len(split.test), len(pairs))
    return 0


def cmd_pretrain(args, cfg) -> int:
    out = Path(args.out)
    vocab = load_work_vocab(out)
    pc = pipeline_config(cfg)
    tab = pretrain(vocab, pc)
    save_table(tab, out / EMBEDDINGS, {"seed": pc.seed})
    stage_manifest(out, "pretrain", cfg, GRAPH_FILES, (EMBEDDINGS,),
                   {"final_loss": repr(tab.loss_history[-1]) if tab.loss_history else "nan"})
    log.info("pretrain: %d entities, %d relations", *tab.entity_rows.shape[:1], tab.relation_rows.shape[0])
    return 0


def cmd_train(args, cfg) -> int:
    out = Path(args.out)
    require(out, GRAPH_FILES + SPLIT_FILES, "prepare")
    require(out, (EMBEDDINGS,), "pretrain")
    vocab = load_work_vocab(out)
    tab = load_table(out / EMBEDDINGS)
    if tab.d_emb != int(cfg["model.d_emb"]):
        raise CliError(f"model.d_emb: embeddings have width {tab.d_emb}, config asks for {cfg['model.d_emb']}")
    split = split_dataset_from_files(out, vocab)
    pairs = read_pairs(out / "pairs.tsv", vocab)
    pc = pipeline_config(cfg)
    model = prepare_model(vocab, tab, pc)
    model, report = train(model, tab, split, pairs, replace(pc.train, seed=pc.seed + SEED_TRAIN), vocab)
    save_model(model, out / MODEL)
    write_text_atomic(out / "train_report.tsv", report.to_tsv())
    inputs = GRAPH_FILES + SPLIT_FILES + (EMBEDDINGS,)
    stage_manifest(out, "train", cfg, inputs,
                   (MODEL, "train_report.tsv"),
                   {"best_epoch": report.best_epoch, "best_val_f1": f"{report.best_f1:.6f}"})
    log.info("train: best validation F1 %.4f at epoch %d", report.best_f1, report.best_epoch)
    return 0


def split_dataset_from_files(out: Path, vocab):
    from .dataset import DatasetSplit

    parts = [read_candidates(out / name, vocab) for name in ("train.tsv", "valid.tsv", "test.tsv")]
    return DatasetSplit(*parts, scheme="file", seed=-1)


def _trained(out: Path):
    require(out, GRAPH_FILES + SPLIT_FILES, "prepare")
    require(out, (EMBEDDINGS,), "pretrain")
    require(out, (MODEL,), "train")
    vocab = load_work_vocab(out)
    return vocab, load_table(out / EMBEDDINGS), load_model(out / MODEL)


def cmd_evaluate(args, cfg) -> int:
    out = Path(args.out)
    vocab, tab, model = _trained(out)
    split = split_dataset_from_files(out, vocab)
    delta = float(cfg["train.delta"])
    rows: list[tuple[str, Metrics]] = [("test", classify_triples(model, tab, split.test, delta))]
    seen, unseen = split_seen_unseen(split.test, split.train)
    for name, part in (("test_seen", seen), ("test_unseen", unseen)):
        if part:
            rows.append((name, classify_triples(model, tab, part, delta)))
    rows.append(("valid", classify_triples(model, tab, split.valid, delta)))
    positives = [c for c in split.train + split.valid + split.test if c.label == 1]
    ref = None
    if any(c.source_fact is not None for c in positives):
        ref = evaluate_ref(model, tab, ref_labels(positives, vocab), vocab, delta)
        rows.append(("ref", ref.metrics))
    write_metrics(rows, out / "metrics.tsv")
    trip, _ = candidate_arrays(split.test)
    write_predictions(split.test, model.predict(tab, trip), vocab, out / "predictions.tsv")
    outputs = ["metrics.tsv", "predictions.tsv"]
    if model.uses_rules:
        write_rule_usage(rule_usage(model, tab, trip), out / "rule_usage.tsv")
        outputs.append("rule_usage.tsv")
    extra = {"n_seen": len(seen), "n_unseen": len(unseen),
             "ref_pool": "gkg entities with >=1 fact; relevant iff source of a labelled positive",
             "ref_rule": "max fusion probability over incident candidates > delta"}
    if ref is not None:
        extra["ref_isolated"] = ref.isolated
    stage_manifest(out, "evaluate", cfg, GRAPH_FILES + SPLIT_FILES + (EMBEDDINGS, MODEL),
                   outputs, extra)
    for name, m in rows:
        print(f"{name}\tacc={m.acc:.4f}\tp={m.precision:.4f}\tr={m.recall:.4f}\tf1={m.f1:.4f}")
    return 0


def cmd_fuse(args, cfg) -> int:
    out = Path(args.out)
    vocab, tab, model = _trained(out)
    fused = fuse(model, tab, vocab, float(cfg["train.delta"]), int(cfg["top_m"]))
    lines = ["head\trel\ttail\tp\tsrc_head\tsrc_rel\tsrc_tail\tgeneral_only"]
    for f in fused:
        lines.append("\t".join(list(vocab.named(f.triple)) + [f"{f.p:.6f}"] + list(vocab.named(f.source))
                               + [str(int(f.general_only))]))
    write_text_atomic(out / "fused.tsv", "\n".join(lines) + "\n")
    stage_manifest(out, "fuse", cfg, GRAPH_FILES + (EMBEDDINGS, MODEL), ("fused.tsv",),
                   {"n_fused": len(fused)})
    print(f"fused {len(fused)} triples")
    return 0


def cmd_ablate(args, cfg) -> int:
    out = Path(args.out)
    if not args.bench:
        raise CliError("--bench is required")
    bench = load_benchmark(args.bench)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise CliError(f"unknown ablation variant {unknown[0]!r}; expected one of {', '.join(VARIANTS)}")
    seeds = [int(s) for s in args.seeds.split(",")]
    rows: list[tuple[str, Metrics]] = []
    summary = ["variant\tmean_f1\t" + "\t".join(f"seed{s}" for s in seeds)]
    for v in variants:
        f1s = []
        for s in seeds:
            pc = replace(pipeline_config(cfg), seed=s)
            m = run_ablation(v, bench, pc)
            rows.append((f"{v}@{s}", m))
            f1s.append(m.f1)
            log.info("ablate: %s seed %d F1 %.4f", v, s, m.f1)
        summary.append(f"{v}\t{np.mean(f1s):.6f}\t" + "\t".join(f"{f:.6f}" for f in f1s))
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(rows, out / "ablation.tsv")
    write_text_atomic(out / "ablation_summary.tsv", "\n".join(summary) + "\n")
    stage_manifest(out, "ablate", cfg, [],
                   ("ablation.tsv", "ablation_summary.tsv"),
                   {"bench_manifest": file_digest(Path(args.bench) / "manifest"), "variants": ",".join(variants),
                    "seeds": ",".join(map(str, seeds))})
    print("\n".join(summary))
    return 0


def scaling_facts(vocab, n: int, seed: int) -> np.ndarray:
    """GKG facts, topped up with random GKG-vocabulary triples when the graph is smaller than ``n``."""
    facts = np.asarray(vocab.gkg_facts(), dtype=np.int64).reshape(-1, 3)
    if len(facts) >= n:
        return facts[:n]
    rng = make_rng(seed, stream=61)
    ents = np.arange(vocab.n_dkg_entities, vocab.num_entities)
    rels = np.arange(vocab.n_dkg_relations, vocab.num_relations - 1)
    m = n - len(facts)
    extra = np.stack([rng.choice(ents, m), rng.choice(rels, m), rng.choice(ents, m)], axis=1)
    return np.concatenate([facts, extra])


def cmd_scale(args, cfg) -> int:
    out = Path(args.out)
    vocab, tab, model = _trained(out)
    sizes = [int(s) for s in args.sizes.split(",")]
    facts = scaling_facts(vocab, max(sizes), int(cfg["seed"]))
    try:
        points = measure_scaling(model, tab, vocab, facts, sizes, args.repetitions)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    lines = ["size\tmean_s\tmedian_s\tstd_s\tratio"]
    prev = None
    for p in points:
        ratio = "" if prev is None else f"{p.median / prev.median:.4f}"
        lines.append(f"{p.size}\t{p.mean:.6f}\t{p.median:.6f}\t{p.std:.6f}\t{ratio}")
        prev = p
    write_text_atomic(out / "scaling.tsv", "\n".join(lines) + "\n")
    stage_manifest(out, "scale", cfg, GRAPH_FILES + (EMBEDDINGS, MODEL), (),
                   {"sizes": args.sizes, "repetitions": args.repetitions})
    print("\n".join(lines))
    return 0


def cmd_gradcheck(args, cfg) -> int:
    res = check_joint_gradient(int(cfg["seed"]), str(cfg["model.variant"]), lam=float(cfg["train.lam"]))
    err = res.max_error
    for steps, e in sorted(res.errors.items()):
        print(f"after {steps} steps: max relative error {e:.3e}")
    print(f"max relative error: {err:.3e}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["steps\tparam\tmax_rel_err"]
        for steps, rep in sorted(res.per_param.items()):
            lines += [f"{steps}\t{k}\t{v:.6e}" for k, v in rep.items()]
        write_text_atomic(out / "gradcheck.tsv", "\n".join(lines) + "\n")
        stage_manifest(out, "gradcheck", cfg, (), ("gradcheck.tsv",),
                       {"max_rel_err": f"{err:.6e}"})
    return 0 if err < GRADCHECK_TOLERANCE else 1


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic benchmark directory"),
    "prepare": (cmd_prepare, "ingest graphs, split candidates, build distant-supervision pairs"),
    "pretrain": (cmd_pretrain, "pretrain translational embeddings"),
    "train": (cmd_train, "fit the domain side and train the fusion model"),
    "evaluate": (cmd_evaluate, "triple classification, seen/unseen and entity-relevance metrics"),
    "fuse": (cmd_fuse, "emit fused facts above the threshold"),
    "ablate": (cmd_ablate, "train and test model variants over several seeds"),
    "scale": (cmd_scale, "time the fusion scoring pass at growing GKG sizes"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of the joint objective"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' file; flags take precedence")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--scheme", choices=("s1", "s2"))
    common.add_argument("--rules", type=int, help="number of rules")
    common.add_argument("--protos", type=int, help="number of prototypes")
    common.add_argument("--tau", type=float, help="kernel bandwidth")
    common.add_argument("--delta", type=float, help="decision threshold")
    common.add_argument("--lambda", dest="lam", type=float, help="rule-consistency weight")
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="exefuse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--out", required=name != "gradcheck", help="work/output directory")
        if name == "prepare":
            p.add_argument("--dkg")
            p.add_argument("--gkg")
            p.add_argument("--alignment")
            p.add_argument("--candidates", help="labelled candidates (head rel tail label ...)")
            p.add_argument("--bench", help="synthetic benchmark directory supplying all four inputs")
            p.add_argument("--holdout", type=float, help="fraction of entities kept out of training")
        if name == "fuse":
            p.add_argument("--top-m", dest="top_m", type=int)
        if name == "ablate":
            p.add_argument("--bench", help="synthetic benchmark directory")
            p.add_argument("--variants", help="comma-separated variant names (default: all)")
            p.add_argument("--seeds", default="0,1,2")
        if name == "scale":
            p.add_argument("--sizes", default="10000,20000,40000")
            p.add_argument("--repetitions", type=int, default=5)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides: dict[str, object] = {}
    for item in args.set:
        if "=" not in item:
            parser.error(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for attr, key in FLAG_KEYS.items():
        val = getattr(args, attr, None)
        if val is not None:
            overrides[key] = val
    inherited = None
    if args.command in UPSTREAM:
        upstream = Path(args.out) / f"{UPSTREAM[args.command]}.manifest"
        if upstream.is_file():
            inherited = read_manifest(upstream)
    try:
        cfg = resolve_config(args.config, overrides, inherited)
        return COMMANDS[args.command][0](args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (KGFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
