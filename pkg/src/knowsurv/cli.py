"""Command-line interface.

Subcommands: synth-data, pbk-gen, refine-reports, train, cv, ablate,
km-plot, inspect-attn. Exit code 0 only on full success.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .config import MODALITIES, RunConfig
from .data import load_cohort
from .knowledge import (
    FixtureBackend,
    HttpBackend,
    ResponseCache,
    generate_pbk,
    refine_report,
)
from .model import SurvivalModel, prepare_record
from .plotting import km_report
from .synthetic import PRESETS, SyntheticConfig, generate_synthetic_cohort, preset_config
from .training import (
    cross_validate,
    make_embedder,
    read_results,
    resolve_config,
    run_ablation_suite,
    train_fold,
    write_results,
)


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr-pathology-adapter", type=float, default=2e-4)
    p.add_argument("--lr-other", type=float, default=2e-5)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--d-know", type=int, default=48)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--kecm-norm", choices=["layernorm", "off"], default="layernorm")
    p.add_argument("--max-tokens", type=int, default=512)
    p.add_argument("--drop", action="append", choices=list(MODALITIES), default=[],
                   help="drop a modality (repeatable)")
    p.add_argument("--allow-knowledge-free", action="store_true",
                   help="permit training with both texts dropped (fallback path)")
    p.add_argument("--workers", type=int, default=1)


def _config_from_args(args) -> RunConfig:
    return RunConfig(
        seed=args.seed,
        epochs=args.epochs,
        lr_pathology_adapter=args.lr_pathology_adapter,
        lr_other=args.lr_other,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        d=args.d,
        d_know=args.d_know,
        heads=args.heads,
        kecm_norm=args.kecm_norm,
        max_tokens=args.max_tokens,
        drop=tuple(args.drop),
        allow_knowledge_free=args.allow_knowledge_free,
        workers=args.workers,
    )


def _backend_from_args(args):
    if args.backend == "fixture":
        return FixtureBackend()
    if not args.url:
        raise SystemExit("--url is required for the http backend")
    return HttpBackend(url=args.url, model=args.model)


def cmd_synth_data(args):
    if args.preset:
        cfg = preset_config(args.preset, n_patients=args.n, seed=args.seed)
    else:
        cfg = SyntheticConfig(n_patients=args.n, seed=args.seed)
    overrides = {}
    for name in ("signal_patch", "signal_gene", "signal_text", "hazard_scale",
                 "censor_rate", "n_bins"):
        v = getattr(args, name)
        if v is not None:
            overrides[name] = v
    if overrides:
        cfg = cfg.replace(**overrides)
    manifest, truth = generate_synthetic_cohort(cfg, args.out)
    print(f"wrote cohort of {len(manifest.entries)} patients to {args.out}")
    return 0


def cmd_pbk_gen(args):
    backend = _backend_from_args(args)
    cache = ResponseCache(args.cache_dir) if args.cache_dir else None
    path_text, gen_text = generate_pbk(args.cancer_type, backend, cache)
    out = {"cancer_type": args.cancer_type, "backend": backend.backend_id,
           "pathology": path_text, "genomic": gen_text}
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def cmd_refine_reports(args):
    backend = _backend_from_args(args)
    cache = ResponseCache(args.cache_dir) if args.cache_dir else None
    raw = Path(args.infile).read_text(encoding="utf-8")
    refined = refine_report(raw, backend, cache)
    if args.out:
        Path(args.out).write_text(refined + "\n", encoding="utf-8")
    else:
        print(refined)
    return 0


def cmd_train(args):
    cohort = load_cohort(args.manifest)
    config = resolve_config(_config_from_args(args), cohort)
    result = train_fold(cohort, args.fold, config, out_dir=args.out)
    print(f"fold {args.fold}: c-index {result.c_index:.4f} "
          f"({result.n_train} train / {result.n_eval} eval, "
          f"{result.wall_time_s:.1f}s)")
    if args.out:
        out = Path(args.out)
        with open(out / f"fold{args.fold}_result.json", "w", encoding="utf-8") as fh:
            json.dump({"config": config.to_dict(), **result.to_dict()}, fh,
                      sort_keys=True)
            fh.write("\n")
    return 0


def cmd_cv(args):
    cohort = load_cohort(args.manifest)
    config = resolve_config(_config_from_args(args), cohort)
    cv = cross_validate(cohort, config, out_dir=args.out, workers=args.workers)
    print(f"c-index {cv.mean_c_index:.4f} +/- {cv.std_c_index:.4f} over "
          f"{len(cv.folds)} folds")
    return 0


def cmd_ablate(args):
    cohort = load_cohort(args.manifest)
    config = resolve_config(_config_from_args(args), cohort)
    results = run_ablation_suite(cohort, config, out_dir=args.out)
    for mask, cv in results.items():
        print(f"{mask:>8}  {cv.mean_c_index:.4f} +/- {cv.std_c_index:.4f}")
    return 0


def cmd_km_plot(args):
    cohort = load_cohort(args.manifest)
    res = read_results(args.results)
    risks, labels = [], []
    for fold in res["folds"]:
        if args.fold is not None and fold["fold"] != args.fold:
            continue
        for pid, risk in fold["risks"].items():
            risks.append(risk)
            labels.append(cohort.label(pid))
    if not risks:
        raise SystemExit("no risks found for the requested fold(s)")
    chi2, p = km_report(risks, labels, args.out)
    print(f"log-rank chi2 {chi2:.4f}, p {p:.4g} -> {args.out}")
    return 0


def cmd_inspect_attn(args):
    cohort = load_cohort(args.manifest)
    config = resolve_config(_config_from_args(args), cohort)
    model = SurvivalModel(config, np.random.default_rng(config.seed))
    if args.checkpoint:
        model.load(args.checkpoint)
    embedder = make_embedder(config)
    record = cohort.record(args.patient_id)
    prep = prepare_record(record, cohort.table, embedder, config)
    maps = model.attention_maps(prep)
    out = {}
    for branch, weights in maps.items():
        out[f"{branch}_weights"] = weights
    out["knowledge_tokens"] = np.array(prep.knowledge.tokens)
    np.savez(args.out, **out)
    for branch, weights in maps.items():
        heads, n_k, n_x = weights.shape
        print(f"{branch}: {heads} heads x {n_k} knowledge tokens x {n_x} "
              f"modality tokens; row sums ~ {float(weights.sum(axis=2).mean()):.6f}")
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="knowsurv",
        description="Knowledge-guided multimodal survival prediction toolkit",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    for name in ("signal-patch", "signal-gene", "signal-text", "hazard-scale",
                 "censor-rate"):
        p.add_argument(f"--{name}", type=float, default=None,
                       dest=name.replace("-", "_"))
    p.add_argument("--n-bins", type=int, default=None, dest="n_bins")
    p.set_defaults(func=cmd_synth_data)

    for cmd, fn, extra in (
        ("pbk-gen", cmd_pbk_gen, "cancer_type"),
        ("refine-reports", cmd_refine_reports, "infile"),
    ):
        p = sub.add_parser(cmd, help=f"run {cmd} through an LLM backend")
        if extra == "cancer_type":
            p.add_argument("--cancer-type", required=True)
        else:
            p.add_argument("--in", dest="infile", required=True)
        p.add_argument("--backend", choices=["fixture", "http"], default="fixture")
        p.add_argument("--url", default="")
        p.add_argument("--model", default="")
        p.add_argument("--cache-dir", default=None)
        p.add_argument("--out", default=None)
        p.set_defaults(func=fn)

    p = sub.add_parser("train", help="train one fold")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--out", default=None)
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="cross-validate over all folds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None)
    _add_config_args(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("ablate", help="run the modality-mask ablation suite")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None)
    _add_config_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("km-plot", help="median-split KM curves from a results file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--results", required=True)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_km_plot)

    p = sub.add_parser("inspect-attn", help="dump cross-attention weights for a patient")
    p.add_argument("--manifest", required=True)
    p.add_argument("--patient-id", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_inspect_attn)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
