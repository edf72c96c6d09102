"""Patient records, gene embedding table, cohort manifest and fold logic.

The manifest is line-delimited JSON with an explicit schema version:
a header line carrying cohort-level fields (bin edges, fold count,
gene-table path) followed by one entry per patient. Paths are relative
to the manifest's directory so cohorts are relocatable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .container import DataFormatError
from .survival import BinScheme, SurvivalLabel

MANIFEST_SCHEMA = "knowsurv-manifest"
MANIFEST_VERSION = 1


@dataclass
class PatientRecord:
    """One patient's multimodal inputs plus survival label."""

    patient_id: str
    cancer_type: str
    patch_features: np.ndarray  # (n_p, d_patch) float32
    genes: list  # [(name, expression), ...], names unique
    report_text: str
    pbk_pathology: str
    pbk_genomic: str
    label: SurvivalLabel | None = None

    @property
    def pbk_text(self) -> str:
        """The merged background-knowledge text (pathology then genomic)."""
        return "\n\n".join(t for t in (self.pbk_pathology, self.pbk_genomic) if t)

    def validate(self, allow_empty_texts=False):
        if self.patch_features.ndim != 2 or self.patch_features.shape[0] < 1:
            raise DataFormatError(f"{self.patient_id}: need at least one patch row")
        if not np.all(np.isfinite(self.patch_features)):
            raise DataFormatError(f"{self.patient_id}: non-finite patch features")
        names = [g for g, _ in self.genes]
        if len(set(names)) != len(names):
            raise DataFormatError(f"{self.patient_id}: duplicate gene names")
        for g, v in self.genes:
            if not np.isfinite(v):
                raise DataFormatError(f"{self.patient_id}: non-finite value for {g}")
        if not allow_empty_texts and not (
            self.report_text or self.pbk_pathology or self.pbk_genomic
        ):
            raise DataFormatError(
                f"{self.patient_id}: all texts empty (only valid under ablation)"
            )


class GeneEmbeddingTable:
    """Frozen gene-name embedding lookup (stand-in for a pretrained model).

    Vectors are unit-norm and fully determined by (names, d_gene, seed).
    """

    def __init__(self, vectors: dict[str, np.ndarray]):
        if not vectors:
            raise ValueError("empty gene table")
        dims = {v.shape for v in vectors.values()}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ValueError("gene vectors must share one 1-D shape")
        self.vectors = vectors
        self.d_gene = next(iter(vectors.values())).shape[0]

    def __contains__(self, name):
        return name in self.vectors

    def __len__(self):
        return len(self.vectors)

    @classmethod
    def random(cls, names, d_gene: int, seed: int) -> "GeneEmbeddingTable":
        rng = np.random.default_rng(seed)
        vectors = {}
        for name in names:
            v = rng.standard_normal(d_gene)
            vectors[name] = (v / np.linalg.norm(v)).astype(np.float32)
        return cls(vectors)

    def save(self, path):
        container.write_tensors(path, self.vectors)

    @classmethod
    def load(cls, path) -> "GeneEmbeddingTable":
        return cls(container.read_tensors(path))


def write_patient(path, record: PatientRecord):
    if record.label is None:
        raise ValueError("record needs a label to be written")
    container.write_patient_file(
        path,
        patient_id=record.patient_id,
        cancer_type=record.cancer_type,
        raw_time=record.label.raw_time,
        censorship=record.label.censorship,
        patch_features=record.patch_features,
        genes=record.genes,
        report_text=record.report_text,
        pbk_pathology=record.pbk_pathology,
        pbk_genomic=record.pbk_genomic,
    )


def load_patient(path, table: GeneEmbeddingTable,
                 bin_scheme: BinScheme | None = None,
                 allow_empty_texts=False) -> PatientRecord:
    """Load and validate one patient file.

    Genes missing from the embedding table are dropped (order preserved);
    a record whose genes all miss the table is an error. event_bin is
    derived from bin_scheme when given, else left at 0.
    """
    raw = container.read_patient_file(path)
    genes = [(g, v) for g, v in raw["genes"] if g in table]
    if raw["genes"] and not genes:
        raise DataFormatError(f"{raw['patient_id']}: zero surviving genes after "
                              "table filtering")
    event_bin = int(bin_scheme.assign(raw["raw_time"])) if bin_scheme else 0
    record = PatientRecord(
        patient_id=raw["patient_id"],
        cancer_type=raw["cancer_type"],
        patch_features=raw["patch_features"],
        genes=genes,
        report_text=raw["report_text"],
        pbk_pathology=raw["pbk_pathology"],
        pbk_genomic=raw["pbk_genomic"],
        label=SurvivalLabel(
            event_bin=event_bin,
            censorship=int(raw["censorship"]),
            raw_time=float(raw["raw_time"]),
        ),
    )
    record.validate(allow_empty_texts=allow_empty_texts)
    return record


@dataclass
class ManifestEntry:
    patient_id: str
    path: str  # relative to the manifest directory
    raw_time: float
    censorship: int
    event_bin: int
    fold: int

    def to_dict(self):
        return {
            "patient_id": self.patient_id,
            "path": self.path,
            "raw_time": self.raw_time,
            "censorship": self.censorship,
            "event_bin": self.event_bin,
            "fold": self.fold,
        }


@dataclass
class CohortManifest:
    entries: list
    n_bins: int
    bin_scheme: BinScheme
    n_folds: int
    gene_table: str
    d_patch: int
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.entries:
            raise DataFormatError("empty cohort")
        seen = set()
        for e in self.entries:
            if e.patient_id in seen:
                raise DataFormatError(f"duplicate patient_id {e.patient_id!r}")
            seen.add(e.patient_id)
            if not (0 <= e.fold < self.n_folds):
                raise DataFormatError(
                    f"{e.patient_id}: fold {e.fold} out of range 0..{self.n_folds - 1}"
                )
            if not (0 <= e.event_bin < self.n_bins):
                raise DataFormatError(
                    f"{e.patient_id}: event_bin {e.event_bin} out of range for "
                    f"T={self.n_bins}"
                )
            if e.censorship not in (0, 1):
                raise DataFormatError(f"{e.patient_id}: bad censorship {e.censorship}")
            if e.raw_time < 0:
                raise DataFormatError(f"{e.patient_id}: negative raw_time")
        if len(self.bin_scheme.edges) != self.n_bins - 1:
            raise DataFormatError(
                f"bin_scheme has {len(self.bin_scheme.edges)} edges, expected "
                f"{self.n_bins - 1}"
            )

    @property
    def patient_ids(self):
        return [e.patient_id for e in self.entries]

    def folds(self) -> dict[str, int]:
        return {e.patient_id: e.fold for e in self.entries}

    def patient_path(self, entry: ManifestEntry) -> Path:
        return self.base_dir / entry.path

    def gene_table_path(self) -> Path:
        return self.base_dir / self.gene_table

    def header_dict(self):
        return {
            "schema": MANIFEST_SCHEMA,
            "version": MANIFEST_VERSION,
            "T": self.n_bins,
            "bin_edges": list(self.bin_scheme.edges),
            "n_folds": self.n_folds,
            "gene_table": self.gene_table,
            "d_patch": self.d_patch,
        }

    def equivalent(self, other: "CohortManifest") -> bool:
        return self.header_dict() == other.header_dict() and [
            e.to_dict() for e in self.entries
        ] == [e.to_dict() for e in other.entries]


def write_manifest(manifest: CohortManifest, path):
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest.header_dict(), sort_keys=True) + "\n")
        for e in manifest.entries:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


def load_manifest(path, check_files=True) -> CohortManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise DataFormatError("empty cohort")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise DataFormatError(f"malformed manifest header: {err}") from err
    if header.get("schema") != MANIFEST_SCHEMA:
        raise DataFormatError(f"not a cohort manifest: schema={header.get('schema')!r}")
    if header.get("version") != MANIFEST_VERSION:
        raise DataFormatError(f"unsupported manifest version {header.get('version')!r}")
    entries = []
    for i, ln in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(ln)
            entries.append(
                ManifestEntry(
                    patient_id=rec["patient_id"],
                    path=rec["path"],
                    raw_time=float(rec["raw_time"]),
                    censorship=int(rec["censorship"]),
                    event_bin=int(rec["event_bin"]),
                    fold=int(rec["fold"]),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
            raise DataFormatError(f"{path}:{i}: malformed entry: {err}") from err
    if not entries:
        raise DataFormatError("empty cohort")
    manifest = CohortManifest(
        entries=entries,
        n_bins=int(header["T"]),
        bin_scheme=BinScheme(edges=tuple(header["bin_edges"])),
        n_folds=int(header["n_folds"]),
        gene_table=header["gene_table"],
        d_patch=int(header["d_patch"]),
        base_dir=path.parent,
    )
    if check_files:
        for e in manifest.entries:
            p = manifest.patient_path(e)
            if not p.exists():
                raise DataFormatError(f"{e.patient_id}: missing feature file {p}")
        if not manifest.gene_table_path().exists():
            raise DataFormatError(f"missing gene table {manifest.gene_table_path()}")
    return manifest


def make_folds(patient_ids, seed: int, n_folds: int = 5) -> dict[str, int]:
    """Deterministic shuffle-and-deal fold assignment; sizes differ by <= 1."""
    patient_ids = list(patient_ids)
    if len(patient_ids) < n_folds:
        raise ValueError(
            f"need at least {n_folds} patients for {n_folds} folds, got "
            f"{len(patient_ids)}"
        )
    order = np.random.default_rng(seed).permutation(len(patient_ids))
    return {patient_ids[idx]: i % n_folds for i, idx in enumerate(order)}


class Cohort:
    """Fully loaded cohort: manifest plus parsed records, keyed by id."""

    def __init__(self, manifest: CohortManifest, records: dict, table: GeneEmbeddingTable):
        self.manifest = manifest
        self.records = records
        self.table = table

    @property
    def patient_ids(self):
        return self.manifest.patient_ids

    def record(self, patient_id: str) -> PatientRecord:
        return self.records[patient_id]

    def label(self, patient_id: str) -> SurvivalLabel:
        return self.records[patient_id].label

    def fold_split(self, fold: int):
        folds = self.manifest.folds()
        train = [p for p in self.patient_ids if folds[p] != fold]
        held_out = [p for p in self.patient_ids if folds[p] == fold]
        if not held_out:
            raise ValueError(f"fold {fold} has no patients")
        return train, held_out


def load_cohort(manifest_path, allow_empty_texts=False) -> Cohort:
    """Load manifest, gene table and every patient file, cross-checking
    the label fields stored in both places."""
    manifest = load_manifest(manifest_path)
    table = GeneEmbeddingTable.load(manifest.gene_table_path())
    records = {}
    for e in manifest.entries:
        rec = load_patient(
            manifest.patient_path(e), table, manifest.bin_scheme,
            allow_empty_texts=allow_empty_texts,
        )
        if rec.patient_id != e.patient_id:
            raise DataFormatError(
                f"{e.patient_id}: file holds patient_id {rec.patient_id!r}"
            )
        if rec.patch_features.shape[1] != manifest.d_patch:
            raise DataFormatError(
                f"{e.patient_id}: d_patch {rec.patch_features.shape[1]} != manifest "
                f"{manifest.d_patch}"
            )
        if (rec.label.censorship != e.censorship
                or abs(rec.label.raw_time - e.raw_time) > 1e-9
                or rec.label.event_bin != e.event_bin):
            raise DataFormatError(f"{e.patient_id}: label mismatch between manifest "
                                  "and feature file")
        records[e.patient_id] = rec
    return Cohort(manifest, records, table)
