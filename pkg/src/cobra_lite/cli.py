"""Command-line entry point.

Subcommands: generate, pretrain, embed, eval-mlp, eval-fewshot,
attn-export, dump-embeddings. Each accepts --config (TOML or JSON) plus
flag overrides, writes a run.json capturing the resolved configuration,
and exits 0 on success / 2 on bad config / 3 on missing files /
4 on numerical divergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .bags import ExtractorSpec
from .checkpoint import code_version
from .config import (load_config_file, merge_config, resolve_seed,
                     write_run_json)
from .corpus import SyntheticGenConfig, generate_corpus, load_manifest
from .encoder import MODES, EncoderConfig
from .errors import ConfigError, MissingArtifactError, TrainingDivergedError
from .evaluation import (MlpEvalConfig, ProbeConfig, cv_result_rows,
                         extract_embeddings, linear_probe_fewshot,
                         mean_std_table, mlp_cv, probe_result_rows,
                         read_dataset_tsv, results_csv, write_dataset_tsv)
from .interpret import export_attention

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4

_ENCODER_SCHEMA = {
    "d_model": int, "embed_hidden": int, "attn_heads": int, "attn_hidden": int,
    "ssd_heads": int, "d_state": int, "dropout": float,
}

DEFAULT_EXTRACTORS = [
    {"id": "fm0", "dim": 768, "seed": 1},
    {"id": "fm1", "dim": 1024, "seed": 2},
]


def _file_config(args) -> dict:
    return load_config_file(args.config) if args.config else {}


def _load_encoder(path: str):
    from .contrastive import load_model

    model, header = load_model(path)
    return model.encoder, header


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    schema = {
        "out_dir": str, "seed": int, "mixing_seed": int,
        "n_classes": int, "patients_per_class": int, "tiles_per_bag": list,
        "signal_tile_fraction": float, "class_separation": float,
        "noise_scale": float, "slides_per_patient": int,
        "extractors": list, "magnifications": list,
    }
    resolved = merge_config(schema, _file_config(args), {
        "out_dir": args.out, "seed": args.seed,
    })
    if "out_dir" not in resolved:
        raise ConfigError("generate: out_dir is required (flag --out or config)")
    seed = resolve_seed(resolved)

    gen_kwargs = {k: resolved[k] for k in (
        "n_classes", "patients_per_class", "signal_tile_fraction",
        "class_separation", "noise_scale", "mixing_seed", "slides_per_patient",
    ) if k in resolved}
    if "tiles_per_bag" in resolved:
        lo, hi = resolved["tiles_per_bag"]
        gen_kwargs["tiles_per_bag"] = (int(lo), int(hi))
    cfg = SyntheticGenConfig(seed=seed, **gen_kwargs)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"generate: {exc}") from exc

    try:
        extractors = [
            ExtractorSpec(id=str(e["id"]), dim=int(e["dim"]),
                          seed=int(e.get("seed", 0)))
            for e in resolved.get("extractors", DEFAULT_EXTRACTORS)
        ]
        mags = [float(m) for m in resolved.get("magnifications", [0.5, 2.0])]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"generate: bad extractors/magnifications: {exc}") from exc

    out_dir = Path(resolved["out_dir"])
    try:
        manifest = generate_corpus(cfg, extractors, mags, out_dir)
    except ValueError as exc:
        raise ConfigError(f"generate: {exc}") from exc
    write_run_json(out_dir, "generate", resolved, seed, code_version())
    print(f"generated {len(manifest.patients)} patients x "
          f"{len(extractors)} extractors x {len(mags)} magnifications "
          f"-> {out_dir}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .contrastive import TrainConfig, train

    schema = {
        "corpus": str, "out_dir": str, "seed": int,
        "batch_size": int, "epochs": int, "lr": float, "weight_decay": float,
        "warmup_epochs": int, "momentum": float, "temperature": float,
        "max_tiles_per_view": int, "symmetric": bool, "proj_hidden": int,
        "proj_dim": int, "checkpoint_every": int, "dtype": str,
        "key_init": str, "freeze_keys": bool, "encoder": dict,
    }
    resolved = merge_config(schema, _file_config(args), {
        "corpus": args.corpus, "out_dir": args.out, "seed": args.seed,
        "batch_size": args.batch_size, "epochs": args.epochs,
    })
    for key in ("corpus", "out_dir"):
        if key not in resolved:
            raise ConfigError(f"pretrain: {key} is required")
    seed = resolve_seed(resolved)

    enc_section = merge_config(_ENCODER_SCHEMA, resolved.get("encoder", {}), {})
    enc_cfg = EncoderConfig(**enc_section)
    tc_kwargs = {k: resolved[k] for k in schema
                 if k in resolved and k not in ("corpus", "out_dir", "seed", "encoder")}
    cfg = TrainConfig(seed=seed, encoder=enc_cfg, **tc_kwargs)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"pretrain: {exc}") from exc

    manifest = load_manifest(resolved["corpus"])
    out_dir = Path(resolved["out_dir"])
    write_run_json(out_dir, "pretrain", resolved, seed, code_version())
    result = train(manifest, cfg, out_dir)
    print(f"pretrained {result.epochs} epochs: "
          f"loss {result.first_epoch_loss:.4f} -> {result.final_epoch_loss:.4f}; "
          f"checkpoint {result.checkpoint_path}")
    return EXIT_OK


_EMBED_SCHEMA = {
    "corpus": str, "checkpoint": str, "mode": str, "payload_extractor": str,
    "magnification": float, "out": str, "seed": int, "n_folds": int,
}


def _embed_common(args, subcommand: str) -> int:
    resolved = merge_config(_EMBED_SCHEMA, _file_config(args), {
        "corpus": args.corpus, "checkpoint": args.checkpoint,
        "mode": args.mode, "payload_extractor": args.payload_extractor,
        "magnification": args.magnification, "out": args.out,
        "seed": args.seed,
    })
    for key in ("corpus", "checkpoint", "out"):
        if key not in resolved:
            raise ConfigError(f"{subcommand}: {key} is required")
    mode = resolved.get("mode", "ENC")
    if mode not in MODES:
        raise ConfigError(f"{subcommand}: mode must be one of {MODES}, got {mode!r}")
    seed = resolve_seed(resolved)

    manifest = load_manifest(resolved["corpus"])
    encoder, _header = _load_encoder(resolved["checkpoint"])
    try:
        dataset = extract_embeddings(
            manifest, encoder, mode,
            payload_extractor=resolved.get("payload_extractor"),
            magnification=resolved.get("magnification"),
            n_folds=resolved.get("n_folds", 5), fold_seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(f"{subcommand}: {exc}") from exc
    except KeyError as exc:
        raise MissingArtifactError(f"{subcommand}: {exc}") from exc
    out = Path(resolved["out"])
    write_dataset_tsv(dataset, out)
    write_run_json(out.parent, subcommand, resolved, seed, code_version())
    print(f"wrote {len(dataset.patient_ids)} x {dataset.dim} embeddings ({mode}) "
          f"-> {out}")
    return EXIT_OK


def cmd_embed(args) -> int:
    return _embed_common(args, "embed")


def cmd_dump_embeddings(args) -> int:
    return _embed_common(args, "dump-embeddings")


def cmd_eval_mlp(args) -> int:
    schema = {
        "embeddings": str, "external": str, "out_dir": str, "task": str,
        "hidden": int, "dropout": float, "lr": float, "weight_decay": float,
        "epochs": int, "batch_size": int, "patience": int, "pct_start": float,
        "n_folds": int, "seed": int,
    }
    resolved = merge_config(schema, _file_config(args), {
        "embeddings": args.embeddings, "external": args.external,
        "out_dir": args.out, "seed": args.seed,
    })
    for key in ("embeddings", "out_dir"):
        if key not in resolved:
            raise ConfigError(f"eval-mlp: {key} is required")
    seed = resolve_seed(resolved)

    cfg_kwargs = {k: resolved[k] for k in (
        "hidden", "dropout", "lr", "weight_decay", "epochs", "batch_size",
        "patience", "pct_start", "n_folds",
    ) if k in resolved}
    cfg = MlpEvalConfig(seed=seed, **cfg_kwargs)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"eval-mlp: {exc}") from exc

    if not Path(resolved["embeddings"]).exists():
        raise MissingArtifactError(f"embeddings file not found: {resolved['embeddings']}")
    dataset = read_dataset_tsv(resolved["embeddings"], n_folds=cfg.n_folds,
                               fold_seed=seed)
    external = None
    if resolved.get("external"):
        if not Path(resolved["external"]).exists():
            raise MissingArtifactError(
                f"external embeddings file not found: {resolved['external']}"
            )
        external = read_dataset_tsv(resolved["external"])

    result = mlp_cv(dataset, cfg, test_dataset=external)
    task = resolved.get("task", "task")
    out_dir = Path(resolved["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "mlp_results.csv").write_text(
        results_csv(task, "mlp-cv", cv_result_rows(result)), encoding="utf-8"
    )
    write_run_json(out_dir, "eval-mlp", resolved, seed, code_version())
    print(mean_std_table(
        f"{task}: MLP {cfg.n_folds}-fold",
        {m: (result.mean[m], result.std[m]) for m in result.mean},
    ))
    return EXIT_OK


def cmd_eval_fewshot(args) -> int:
    schema = {
        "embeddings": str, "out_dir": str, "task": str, "shots": list,
        "runs": int, "c": float, "max_iter": int, "seed": int,
    }
    resolved = merge_config(schema, _file_config(args), {
        "embeddings": args.embeddings, "out_dir": args.out, "seed": args.seed,
        "shots": [int(k) for k in args.shots.split(",")] if args.shots else None,
        "runs": args.runs,
    })
    for key in ("embeddings", "out_dir"):
        if key not in resolved:
            raise ConfigError(f"eval-fewshot: {key} is required")
    seed = resolve_seed(resolved)

    cfg_kwargs = {}
    if "shots" in resolved:
        cfg_kwargs["shots"] = tuple(int(k) for k in resolved["shots"])
    for k in ("runs", "c", "max_iter"):
        if k in resolved:
            cfg_kwargs[k] = resolved[k]
    cfg = ProbeConfig(seed=seed, **cfg_kwargs)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"eval-fewshot: {exc}") from exc

    if not Path(resolved["embeddings"]).exists():
        raise MissingArtifactError(f"embeddings file not found: {resolved['embeddings']}")
    dataset = read_dataset_tsv(resolved["embeddings"])

    result = linear_probe_fewshot(dataset, cfg)
    task = resolved.get("task", "task")
    out_dir = Path(resolved["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "fewshot_results.csv").write_text(
        results_csv(task, "linear-probe", probe_result_rows(result)),
        encoding="utf-8",
    )
    write_run_json(out_dir, "eval-fewshot", resolved, seed, code_version())
    for k, agg in result.aggregate.items():
        print(mean_std_table(f"{task}: {k}-shot probe", agg))
    return EXIT_OK


def cmd_attn_export(args) -> int:
    schema = {
        "corpus": str, "checkpoint": str, "patient": str, "extractor": str,
        "magnification": float, "out_csv": str, "out_pgm": str, "seed": int,
    }
    resolved = merge_config(schema, _file_config(args), {
        "corpus": args.corpus, "checkpoint": args.checkpoint,
        "patient": args.patient, "extractor": args.extractor,
        "magnification": args.magnification, "out_csv": args.out_csv,
        "out_pgm": args.out_pgm, "seed": args.seed,
    })
    for key in ("corpus", "checkpoint", "patient", "extractor", "out_csv"):
        if key not in resolved:
            raise ConfigError(f"attn-export: {key} is required")
    seed = resolve_seed(resolved)

    manifest = load_manifest(resolved["corpus"])
    encoder, _ = _load_encoder(resolved["checkpoint"])
    mpp = resolved.get("magnification", manifest.magnifications[0])
    try:
        att = export_attention(
            manifest, encoder, resolved["patient"], resolved["extractor"],
            mpp, resolved["out_csv"], resolved.get("out_pgm"),
        )
    except KeyError as exc:
        raise MissingArtifactError(f"attn-export: {exc}") from exc
    write_run_json(Path(resolved["out_csv"]).parent, "attn-export", resolved,
                   seed, code_version())
    print(f"exported {len(att.weight)} tile weights "
          f"(sum {att.weight.sum():.6f}) -> {resolved['out_csv']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cobra-lite",
        description="Contrastively pretrained patient-level slide embeddings "
                    "from patch-embedding bags.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--config", help="TOML or JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help=f"global seed (fallback: $COBRA_LITE_SEED)")

    p = sub.add_parser("generate", help="write a synthetic planted-structure corpus")
    common(p)
    p.add_argument("--out", default=None, help="corpus output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="momentum contrastive pretraining")
    common(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--out", default=None, help="run output directory")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    for name, fn in (("embed", cmd_embed), ("dump-embeddings", cmd_dump_embeddings)):
        p = sub.add_parser(name, help="extract per-patient embeddings to TSV")
        common(p)
        p.add_argument("--corpus", default=None)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--mode", default=None, choices=list(MODES))
        p.add_argument("--payload-extractor", dest="payload_extractor", default=None)
        p.add_argument("--magnification", type=float, default=None)
        p.add_argument("--out", default=None, help="output TSV path")
        p.set_defaults(func=fn)

    p = sub.add_parser("eval-mlp", help="5-fold MLP protocol on embeddings")
    common(p)
    p.add_argument("--embeddings", default=None, help="training-cohort TSV")
    p.add_argument("--external", default=None, help="external-cohort TSV")
    p.add_argument("--out", default=None, help="results directory")
    p.set_defaults(func=cmd_eval_mlp)

    p = sub.add_parser("eval-fewshot", help="k-shot linear probing on embeddings")
    common(p)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--out", default=None, help="results directory")
    p.add_argument("--shots", default=None, help="comma-separated k values")
    p.add_argument("--runs", type=int, default=None)
    p.set_defaults(func=cmd_eval_fewshot)

    p = sub.add_parser("attn-export", help="export per-tile attention weights")
    common(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--patient", default=None)
    p.add_argument("--extractor", default=None)
    p.add_argument("--magnification", type=float, default=None)
    p.add_argument("--out-csv", dest="out_csv", default=None)
    p.add_argument("--out-pgm", dest="out_pgm", default=None)
    p.set_defaults(func=cmd_attn_export)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, FileNotFoundError) as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingDivergedError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
