"""Synthetic desk-scale cohorts with a planted linear risk model.

A latent risk z per patient drives (a) the mean of the first
`informative_patch_dims` patch-feature columns, (b) the expression of a
designated gene subset and (c) the mix of high- vs low-risk marker words
in the report text. Event times are exponential with rate
exp(hazard_scale * z) under independent exponential censoring, so the
generator's own z is an oracle risk score with a known concordance
ceiling. Everything is a pure function of the config seed; identical
configs produce byte-identical files.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    CohortManifest,
    GeneEmbeddingTable,
    ManifestEntry,
    PatientRecord,
    make_folds,
    write_manifest,
    write_patient,
)
from .survival import SurvivalLabel, bin_times

HIGH_MARKERS = (
    "necrosis", "invasive", "pleomorphic", "anaplastic", "metastatic",
    "infiltrative", "ulcerated", "undifferentiated", "angioinvasion", "desmoplasia",
)
LOW_MARKERS = (
    "indolent", "encapsulated", "circumscribed", "bland", "organoid",
    "mature", "quiescent", "noninvasive", "papillary", "tubular",
)
FILLER = (
    "specimen", "shows", "tumor", "cells", "with", "focal", "areas", "of",
    "architecture", "stroma", "margins", "examined", "sections", "tissue",
    "glandular", "moderate", "present", "noted", "pattern", "regions",
)

PBK_PATHOLOGY_SYNT = (
    "High risk tumors show necrosis, invasive growth, pleomorphic nuclei and "
    "infiltrative borders. Low risk tumors appear encapsulated, bland and "
    "circumscribed with indolent architecture."
)
PBK_GENOMIC_SYNT = (
    "High risk profiles show elevated expression of proliferation driver genes "
    "and checkpoint loss. Low risk profiles show quiescent expression with "
    "balanced regulatory programs."
)


@dataclass(frozen=True)
class SyntheticConfig:
    n_patients: int = 500
    seed: int = 0
    n_bins: int = 4
    n_folds: int = 5
    cancer_type: str = "SYNT"
    d_patch: int = 64
    patch_count_min: int = 16
    patch_count_max: int = 32
    d_gene: int = 32
    gene_vocab_size: int = 48
    genes_per_patient_min: int = 24
    genes_per_patient_max: int = 36
    informative_patch_dims: int = 8
    informative_genes: int = 6
    hazard_scale: float = 2.5
    censor_rate: float = 0.5
    signal_patch: float = 0.0
    signal_gene: float = 0.0
    signal_text: float = 0.0
    report_marker_words: int = 12
    report_filler_words: int = 16

    def validate(self):
        if self.n_patients < max(self.n_folds, 2):
            raise ValueError("too few patients")
        if self.n_bins < 1:
            raise ValueError("need at least one time bin")
        if self.gene_vocab_size < 1:
            raise ValueError("empty gene vocabulary")
        if not (1 <= self.patch_count_min <= self.patch_count_max):
            raise ValueError("bad patch count range")
        if not (1 <= self.genes_per_patient_min <= self.genes_per_patient_max
                <= self.gene_vocab_size):
            raise ValueError("bad genes-per-patient range")
        if self.informative_genes > self.gene_vocab_size:
            raise ValueError("more informative genes than vocabulary")
        if self.informative_patch_dims > self.d_patch:
            raise ValueError("more informative patch dims than d_patch")
        if self.censor_rate < 0 or self.hazard_scale < 0:
            raise ValueError("rates must be nonnegative")

    def replace(self, **kw) -> "SyntheticConfig":
        return dataclasses.replace(self, **kw)


PRESETS = {
    "strong": dict(signal_patch=1.0, signal_gene=1.5, signal_text=2.0),
    "null": dict(hazard_scale=0.0),
    "text-only": dict(signal_text=2.0),
    "patch-only": dict(signal_patch=1.0),
}


def preset_config(name: str, **overrides) -> SyntheticConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    return SyntheticConfig(**{**PRESETS[name], **overrides})


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _gene_names(n):
    return [f"GENE{i:04d}" for i in range(n)]


def _make_report(rng, cfg: SyntheticConfig, z: float) -> str:
    p_high = _sigmoid(cfg.signal_text * z)
    markers = [
        (HIGH_MARKERS if rng.random() < p_high else LOW_MARKERS)[
            rng.integers(len(HIGH_MARKERS))
        ]
        for _ in range(cfg.report_marker_words)
    ]
    filler = [FILLER[rng.integers(len(FILLER))] for _ in range(cfg.report_filler_words)]
    return (
        f"Diagnosis: {cfg.cancer_type} tumor specimen.\n"
        f"Histology: {' '.join(markers)}.\n"
        f"Comments: {' '.join(filler)}."
    )


def generate_synthetic_cohort(cfg: SyntheticConfig, out_dir):
    """Write a complete cohort (patient files, gene table, manifest,
    ground-truth risks) under out_dir. Returns (manifest, truth dict)."""
    cfg.validate()
    out_dir = Path(out_dir)
    patients_dir = out_dir / "patients"
    patients_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_patients
    ids = [f"P{i:05d}" for i in range(n)]
    z = rng.standard_normal(n)
    event_rate = np.exp(cfg.hazard_scale * z)
    event_times = rng.exponential(1.0 / event_rate)
    if cfg.censor_rate > 0:
        censor_times = rng.exponential(1.0 / cfg.censor_rate, size=n)
    else:
        censor_times = np.full(n, np.inf)
    raw_times = np.minimum(event_times, censor_times)
    censorships = (censor_times < event_times).astype(int)

    scheme = bin_times(raw_times, censorships, cfg.n_bins)
    folds = make_folds(ids, cfg.seed, cfg.n_folds)
    vocab = _gene_names(cfg.gene_vocab_size)
    informative = vocab[: cfg.informative_genes]
    table = GeneEmbeddingTable.random(vocab, cfg.d_gene, seed=cfg.seed)
    table.save(out_dir / "gene_table.knt")

    entries = []
    truth = {}
    for i, pid in enumerate(ids):
        n_p = int(rng.integers(cfg.patch_count_min, cfg.patch_count_max + 1))
        patches = rng.standard_normal((n_p, cfg.d_patch))
        patches[:, : cfg.informative_patch_dims] += cfg.signal_patch * z[i]
        n_g = int(rng.integers(cfg.genes_per_patient_min, cfg.genes_per_patient_max + 1))
        others = [g for g in vocab if g not in informative]
        extra = list(rng.choice(others, size=max(n_g - len(informative), 0), replace=False))
        names = informative + extra
        order = rng.permutation(len(names))
        genes = []
        for j in order:
            g = names[j]
            noise = rng.standard_normal()
            value = cfg.signal_gene * z[i] + noise if g in informative else noise
            genes.append((g, float(np.float32(value))))
        label = SurvivalLabel(
            event_bin=int(scheme.assign(raw_times[i])),
            censorship=int(censorships[i]),
            raw_time=float(raw_times[i]),
        )
        record = PatientRecord(
            patient_id=pid,
            cancer_type=cfg.cancer_type,
            patch_features=patches.astype(np.float32),
            genes=genes,
            report_text=_make_report(rng, cfg, z[i]),
            pbk_pathology=PBK_PATHOLOGY_SYNT,
            pbk_genomic=PBK_GENOMIC_SYNT,
            label=label,
        )
        rel = f"patients/{pid}.kpf"
        write_patient(out_dir / rel, record)
        entries.append(
            ManifestEntry(
                patient_id=pid,
                path=rel,
                raw_time=label.raw_time,
                censorship=label.censorship,
                event_bin=label.event_bin,
                fold=folds[pid],
            )
        )
        truth[pid] = float(z[i])

    manifest = CohortManifest(
        entries=entries,
        n_bins=cfg.n_bins,
        bin_scheme=scheme,
        n_folds=cfg.n_folds,
        gene_table="gene_table.knt",
        d_patch=cfg.d_patch,
        base_dir=out_dir,
    )
    write_manifest(manifest, out_dir / "manifest.jsonl")
    with open(out_dir / "truth.jsonl", "w", encoding="utf-8") as fh:
        json.dump({"config": dataclasses.asdict(cfg)}, fh, sort_keys=True)
        fh.write("\n")
        for pid in ids:
            fh.write(json.dumps({"patient_id": pid, "z": truth[pid]}) + "\n")
    return manifest, truth


def load_truth(path) -> dict[str, float]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for ln in fh:
            rec = json.loads(ln)
            if "patient_id" in rec:
                out[rec["patient_id"]] = rec["z"]
    return out
