"""Containers, manifests, fold logic and patient loading."""

import numpy as np
import pytest

from knowsurv import container
from knowsurv.container import DataFormatError
from knowsurv.data import (
    Cohort,
    GeneEmbeddingTable,
    PatientRecord,
    load_cohort,
    load_manifest,
    load_patient,
    make_folds,
    write_manifest,
    write_patient,
)
from knowsurv.survival import BinScheme, SurvivalLabel


def make_record(pid="P1", genes=None, label=None, patches=None):
    rng = np.random.default_rng(0)
    return PatientRecord(
        patient_id=pid,
        cancer_type="SYNT",
        patch_features=(patches if patches is not None
                        else rng.standard_normal((3, 4)).astype(np.float32)),
        genes=genes if genes is not None else [("GENE0001", 0.5), ("GENE0002", -1.25)],
        report_text="Diagnosis: tumor.",
        pbk_pathology="high risk necrosis",
        pbk_genomic="checkpoint loss",
        label=label or SurvivalLabel(event_bin=1, censorship=0, raw_time=2.5),
    )


# ----------------------------------------------------------------- container


def test_patient_file_round_trip_bit_exact(tmp_path):
    rec = make_record()
    path = tmp_path / "p.kpf"
    write_patient(path, rec)
    raw = container.read_patient_file(path)
    assert raw["patient_id"] == "P1"
    assert raw["patch_features"].dtype == np.float32
    assert np.array_equal(raw["patch_features"], rec.patch_features)
    assert raw["genes"] == [(g, np.float32(v)) for g, v in rec.genes]
    assert raw["report_text"] == rec.report_text
    # second write is byte-identical
    path2 = tmp_path / "p2.kpf"
    write_patient(path2, rec)
    assert path.read_bytes() == path2.read_bytes()


def test_patient_file_rejects_garbage(tmp_path):
    path = tmp_path / "x.kpf"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(DataFormatError):
        container.read_patient_file(path)
    good = tmp_path / "good.kpf"
    write_patient(good, make_record())
    truncated = good.read_bytes()[:-5]
    bad = tmp_path / "trunc.kpf"
    bad.write_bytes(truncated)
    with pytest.raises(DataFormatError):
        container.read_patient_file(bad)
    extra = tmp_path / "extra.kpf"
    extra.write_bytes(good.read_bytes() + b"!")
    with pytest.raises(DataFormatError):
        container.read_patient_file(extra)


def test_named_tensor_round_trip(tmp_path):
    tensors = {
        "a.W": np.arange(6, dtype=np.float32).reshape(2, 3),
        "scalar": np.array(1.5, dtype=np.float32),
        "vec": np.array([1.0, 2.0], dtype=np.float32),
    }
    path = tmp_path / "t.knt"
    container.write_tensors(path, tensors)
    out = container.read_tensors(path)
    assert set(out) == set(tensors)
    for k in tensors:
        assert out[k].shape == tensors[k].shape
        assert np.array_equal(out[k], tensors[k])


# ------------------------------------------------------------------ gene table


def test_gene_table_deterministic_unit_norm():
    names = [f"GENE{i:04d}" for i in range(5)]
    t1 = GeneEmbeddingTable.random(names, 8, seed=3)
    t2 = GeneEmbeddingTable.random(names, 8, seed=3)
    for n in names:
        assert np.array_equal(t1.vectors[n], t2.vectors[n])
        assert abs(np.linalg.norm(t1.vectors[n].astype(np.float64)) - 1.0) < 1e-6
    t3 = GeneEmbeddingTable.random(names, 8, seed=4)
    assert not np.array_equal(t1.vectors[names[0]], t3.vectors[names[0]])


def test_gene_table_save_load(tmp_path):
    t = GeneEmbeddingTable.random(["A", "B"], 4, seed=0)
    t.save(tmp_path / "g.knt")
    t2 = GeneEmbeddingTable.load(tmp_path / "g.knt")
    assert t2.d_gene == 4
    assert np.array_equal(t.vectors["A"], t2.vectors["A"])


# ---------------------------------------------------------------- load_patient


def test_load_patient_filters_to_table(tmp_path):
    genes = [(f"G{i}", float(i)) for i in range(5)]
    rec = make_record(genes=genes)
    path = tmp_path / "p.kpf"
    write_patient(path, rec)
    table = GeneEmbeddingTable.random(["G0", "G2", "G4"], 4, seed=0)
    out = load_patient(path, table)
    assert [g for g, _ in out.genes] == ["G0", "G2", "G4"]  # order preserved


def test_load_patient_zero_surviving_genes(tmp_path):
    rec = make_record(genes=[("GX", 1.0)])
    path = tmp_path / "p.kpf"
    write_patient(path, rec)
    table = GeneEmbeddingTable.random(["OTHER"], 4, seed=0)
    with pytest.raises(DataFormatError, match="zero surviving genes"):
        load_patient(path, table)


def test_load_patient_rejects_nonfinite(tmp_path):
    patches = np.ones((2, 3), dtype=np.float32)
    patches[0, 1] = np.nan
    rec = make_record(patches=patches)
    path = tmp_path / "p.kpf"
    write_patient(path, rec)
    table = GeneEmbeddingTable.random(["GENE0001", "GENE0002"], 4, seed=0)
    with pytest.raises(DataFormatError, match="non-finite"):
        load_patient(path, table)


def test_load_patient_assigns_bins(tmp_path):
    rec = make_record()
    path = tmp_path / "p.kpf"
    write_patient(path, rec)
    table = GeneEmbeddingTable.random(["GENE0001", "GENE0002"], 4, seed=0)
    scheme = BinScheme(edges=(1.0, 2.0, 3.0))
    out = load_patient(path, table, scheme)
    assert out.label.event_bin == scheme.assign(rec.label.raw_time)


# ------------------------------------------------------------------- manifest


def test_manifest_round_trip(small_cohort_dir, tmp_path):
    m = load_manifest(small_cohort_dir / "manifest.jsonl")
    out = tmp_path / "copy.jsonl"
    write_manifest(m, out)
    m2 = load_manifest(out, check_files=False)
    assert m.equivalent(m2)


def test_manifest_missing_and_empty(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "none.jsonl")
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(DataFormatError, match="empty cohort"):
        load_manifest(empty)


def test_manifest_validation_errors(small_cohort_dir, tmp_path):
    lines = (small_cohort_dir / "manifest.jsonl").read_text().splitlines()
    # duplicate patient id
    dup = tmp_path / "dup.jsonl"
    dup.write_text("\n".join([lines[0], lines[1], lines[1]]) + "\n")
    with pytest.raises(DataFormatError, match="duplicate"):
        load_manifest(dup, check_files=False)
    # fold out of range
    import json
    rec = json.loads(lines[1])
    rec["fold"] = 99
    bad = tmp_path / "fold.jsonl"
    bad.write_text(lines[0] + "\n" + json.dumps(rec) + "\n")
    with pytest.raises(DataFormatError, match="fold"):
        load_manifest(bad, check_files=False)
    # missing feature file
    moved = tmp_path / "moved.jsonl"
    moved.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataFormatError, match="missing feature file"):
        load_manifest(moved)


def test_manifest_single_record(small_cohort_dir, tmp_path):
    import json
    lines = (small_cohort_dir / "manifest.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    entry = json.loads(lines[1])
    entry["fold"] = 3
    single = tmp_path / "one.jsonl"
    single.write_text(json.dumps(header) + "\n" + json.dumps(entry) + "\n")
    m = load_manifest(single, check_files=False)
    assert len(m.entries) == 1
    assert set(m.folds().values()) == {3}


# ---------------------------------------------------------------------- folds


def test_make_folds_balanced():
    ids = [f"p{i}" for i in range(10)]
    folds = make_folds(ids, seed=0)
    sizes = [sum(1 for f in folds.values() if f == k) for k in range(5)]
    assert sizes == [2, 2, 2, 2, 2]


def test_make_folds_deterministic():
    ids = [f"p{i}" for i in range(23)]
    assert make_folds(ids, seed=5) == make_folds(ids, seed=5)
    assert make_folds(ids, seed=5) != make_folds(ids, seed=6)


def test_make_folds_large_cohort_partition():
    ids = [f"p{i}" for i in range(1007)]
    folds = make_folds(ids, seed=1)
    assert set(folds) == set(ids)  # every patient in exactly one fold
    sizes = [sum(1 for f in folds.values() if f == k) for k in range(5)]
    assert sum(sizes) == 1007
    assert max(sizes) - min(sizes) <= 1


def test_make_folds_too_few():
    with pytest.raises(ValueError):
        make_folds(["a", "b"], seed=0)


# --------------------------------------------------------------------- cohort


def test_load_cohort_and_split(small_cohort_dir):
    cohort = load_cohort(small_cohort_dir / "manifest.jsonl")
    assert len(cohort.patient_ids) == 30
    train, held = cohort.fold_split(0)
    assert sorted(train + held) == sorted(cohort.patient_ids)
    assert not set(train) & set(held)
    pid = cohort.patient_ids[0]
    assert cohort.label(pid) == cohort.record(pid).label


def test_load_cohort_detects_label_mismatch(small_cohort_dir, tmp_path):
    import json
    import shutil

    shutil.copytree(small_cohort_dir, tmp_path / "c", dirs_exist_ok=True)
    man = tmp_path / "c" / "manifest.jsonl"
    lines = man.read_text().splitlines()
    rec = json.loads(lines[1])
    rec["censorship"] = 1 - rec["censorship"]
    lines[1] = json.dumps(rec)
    man.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataFormatError, match="label mismatch"):
        load_cohort(man)
