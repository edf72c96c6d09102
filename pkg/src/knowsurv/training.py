"""Training loop, cross-validation, ablation runner and result files.

Results are line-delimited JSON: a header line embedding the full run
config, one line per fold, and an aggregate line; a human-readable
summary table sits next to them. Checkpoints are float32 named-tensor
containers, and held-out risks are always computed from the quantized
(checkpoint-identical) parameters so that reloading config + checkpoint
reproduces them bit-for-bit.
"""

from __future__ import annotations

import json
import multiprocessing
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import MODALITIES, RunConfig
from .data import Cohort
from .knowledge import HashedTextEmbedder
from .model import PreparedRecord, SurvivalModel, prepare_record
from .optim import Adam
from .survival import HazardCurve, concordance_index, nll_surv_loss_and_grad, risk_score


@dataclass
class FoldResult:
    fold: int
    c_index: float
    risks: dict[str, float]
    loss_curve: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0
    n_train: int = 0
    n_eval: int = 0
    c_index_defined: bool = True

    def to_dict(self):
        return {
            "fold": self.fold,
            "c_index": self.c_index,
            "c_index_defined": self.c_index_defined,
            "risks": self.risks,
            "loss_curve": self.loss_curve,
            "wall_time_s": self.wall_time_s,
            "n_train": self.n_train,
            "n_eval": self.n_eval,
        }


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


def make_embedder(config: RunConfig) -> HashedTextEmbedder:
    return HashedTextEmbedder(d_k=config.d_know, seed=config.text_embed_seed)


def resolve_config(config: RunConfig, cohort: Cohort) -> RunConfig:
    """Pin data-dependent widths (d_patch, d_gene, T, fold count) to the cohort."""
    return config.replace(
        d_patch=cohort.manifest.d_patch,
        d_gene=cohort.table.d_gene,
        n_bins=cohort.manifest.n_bins,
        n_folds=cohort.manifest.n_folds,
    )


def prepare_cohort(cohort: Cohort, config: RunConfig, patient_ids=None
                   ) -> dict[str, PreparedRecord]:
    embedder = make_embedder(config)
    ids = cohort.patient_ids if patient_ids is None else patient_ids
    return {
        pid: prepare_record(cohort.record(pid), cohort.table, embedder, config)
        for pid in ids
    }


def evaluate_risks(model: SurvivalModel, preps: dict[str, PreparedRecord],
                   patient_ids) -> dict[str, float]:
    out = {}
    for pid in patient_ids:
        logits, _ = model.forward(preps[pid])
        out[pid] = risk_score(HazardCurve.from_logits(logits))
    return out


def train_fold(cohort: Cohort, fold: int, config: RunConfig,
               out_dir=None) -> FoldResult:
    """Train on the other folds, evaluate C-index on the held-out fold.

    Deterministic under a fixed config: the model seed and the epoch
    shuffles derive from (config.seed, fold) only.
    """
    config = resolve_config(config, cohort)
    t0 = time.perf_counter()
    train_ids, eval_ids = cohort.fold_split(fold)
    model = SurvivalModel(config, np.random.default_rng(config.seed))
    optimizer = Adam(
        model.parameters(),
        lr_pathology_adapter=config.lr_pathology_adapter,
        lr_other=config.lr_other,
        weight_decay=config.weight_decay,
    )
    preps = prepare_cohort(cohort, config, train_ids)
    shuffle_rng = np.random.default_rng((config.seed, fold))
    loss_curve = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(train_ids))
        epoch_loss = 0.0
        optimizer.zero_grads()
        pending = 0
        for step, idx in enumerate(order):
            prep = preps[train_ids[idx]]
            logits, cache = model.forward(prep)
            loss, dlogits = nll_surv_loss_and_grad(logits[None, :], [prep.label])
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at fold {fold} epoch {epoch} step {step} "
                    f"(patient {prep.patient_id})"
                )
            model.backward(cache, dlogits[0])
            epoch_loss += loss
            pending += 1
            if pending >= config.batch_size or step == len(order) - 1:
                optimizer.step()
                optimizer.zero_grads()
                pending = 0
        loss_curve.append(epoch_loss / len(train_ids))
    # evaluate the float32 checkpoint view of the parameters
    model.quantize_f32()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        model.save(out_dir / f"fold{fold}.ckpt")
    eval_preps = prepare_cohort(cohort, config, eval_ids)
    risks = evaluate_risks(model, eval_preps, eval_ids)
    labels = [cohort.label(pid) for pid in eval_ids]
    try:
        c = concordance_index([risks[p] for p in eval_ids], labels)
        defined = True
    except ValueError:
        c, defined = 0.5, False
    return FoldResult(
        fold=fold,
        c_index=float(c),
        risks=risks,
        loss_curve=loss_curve,
        wall_time_s=time.perf_counter() - t0,
        n_train=len(train_ids),
        n_eval=len(eval_ids),
        c_index_defined=defined,
    )


def _train_fold_worker(args):
    cohort, fold, config, out_dir = args
    try:
        return fold, train_fold(cohort, fold, config, out_dir), None
    except Exception as err:  # propagated with the fold id by cross_validate
        return fold, None, f"{type(err).__name__}: {err}"


@dataclass
class CvResult:
    folds: list
    mean_c_index: float
    std_c_index: float

    def to_dict(self):
        return {
            "mean_c_index": self.mean_c_index,
            "std_c_index": self.std_c_index,
            "fold_c_indices": [f.c_index for f in self.folds],
        }


def cross_validate(cohort: Cohort, config: RunConfig, out_dir=None,
                   workers=None) -> CvResult:
    """5-fold (or manifest-defined) cross-validation with per-fold metrics."""
    config = resolve_config(config, cohort)
    n_folds = cohort.manifest.n_folds
    workers = config.workers if workers is None else workers
    jobs = [(cohort, f, config, out_dir) for f in range(n_folds)]
    if workers > 1 and os.name == "posix":
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(min(workers, n_folds)) as pool:
            outcomes = pool.map(_train_fold_worker, jobs)
    else:
        outcomes = [_train_fold_worker(j) for j in jobs]
    results = []
    for fold, res, err in sorted(outcomes, key=lambda o: o[0]):
        if err is not None:
            raise RuntimeError(f"fold {fold} failed: {err}")
        results.append(res)
    cs = np.array([r.c_index for r in results])
    cv = CvResult(folds=results, mean_c_index=float(cs.mean()),
                  std_c_index=float(cs.std()))
    if out_dir is not None:
        write_results(Path(out_dir), config, cv)
    return cv


def write_results(out_dir: Path, config: RunConfig, cv: CvResult,
                  name="results.jsonl"):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        fh.write(config.to_json() + "\n")
    with open(out_dir / name, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"type": "header", "config": config.to_dict()},
                            sort_keys=True) + "\n")
        for r in cv.folds:
            fh.write(json.dumps({"type": "fold", **r.to_dict()}, sort_keys=True) + "\n")
        fh.write(json.dumps({"type": "aggregate", **cv.to_dict()}, sort_keys=True) + "\n")
    undefined = [r.fold for r in cv.folds if not r.c_index_defined]
    with open(out_dir / "summary.txt", "w", encoding="utf-8") as fh:
        fh.write("fold  c-index  n_eval  wall_s\n")
        for r in cv.folds:
            flag = "" if r.c_index_defined else "  [C-index undefined, reported 0.5]"
            fh.write(f"{r.fold:>4}  {r.c_index:.4f}  {r.n_eval:>6}  "
                     f"{r.wall_time_s:8.1f}{flag}\n")
        fh.write(f"mean  {cv.mean_c_index:.4f} +/- {cv.std_c_index:.4f}\n")
        if undefined:
            fh.write(f"warning: C-index undefined on folds {undefined} "
                     "(constant risks or no admissible pairs)\n")


def read_results(path) -> dict:
    """Reload a results file into {config, folds, aggregate}."""
    out = {"folds": []}
    with open(path, encoding="utf-8") as fh:
        for ln in fh:
            rec = json.loads(ln)
            kind = rec.pop("type")
            if kind == "header":
                out["config"] = RunConfig.from_dict(rec["config"])
            elif kind == "fold":
                out["folds"].append(rec)
            else:
                out["aggregate"] = rec
    return out


ABLATION_MASKS = (
    ("full", ()),
    ("-P", ("P",)),
    ("-G", ("G",)),
    ("-R", ("R",)),
    ("-PBK", ("PBK",)),
    ("-R-PBK", ("R", "PBK")),
)


def run_ablation_suite(cohort: Cohort, config: RunConfig, out_dir=None,
                       masks=ABLATION_MASKS) -> dict[str, CvResult]:
    """Cross-validate one run per modality mask; emits a table-shaped report."""
    results = {}
    for name, drop in masks:
        run_cfg = config.replace(
            drop=tuple(drop),
            allow_knowledge_free={"R", "PBK"} <= set(drop),
        )
        sub_dir = None
        if out_dir is not None:
            sub_dir = Path(out_dir) / f"mask_{name.replace('-', 'no')}"
        results[name] = cross_validate(cohort, run_cfg, out_dir=sub_dir)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "ablation.jsonl", "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"type": "header", "config": config.to_dict(),
                                 "masks": [m[0] for m in masks]}, sort_keys=True) + "\n")
            for name, _ in masks:
                fh.write(json.dumps({"type": "mask", "mask": name,
                                     **results[name].to_dict()}, sort_keys=True) + "\n")
        with open(out_dir / "ablation.txt", "w", encoding="utf-8") as fh:
            fh.write(f"{'mask':>8}  mean-c  std\n")
            for name, _ in masks:
                r = results[name]
                fh.write(f"{name:>8}  {r.mean_c_index:.4f}  {r.std_c_index:.4f}\n")
    return results
