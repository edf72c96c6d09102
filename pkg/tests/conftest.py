import numpy as np
import pytest

from knowsurv.config import RunConfig
from knowsurv.knowledge import HashedTextEmbedder, encode_knowledge
from knowsurv.model import PreparedRecord, SurvivalModel
from knowsurv.survival import SurvivalLabel
from knowsurv.synthetic import SyntheticConfig, generate_synthetic_cohort

GRAD_RTOL = 1e-4
GRAD_ATOL = 1e-7


def fd_gradient(loss_fn, arr):
    """Central finite differences of a scalar loss w.r.t. arr, in place."""
    flat = arr.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        h = 1e-6 * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_fn()
        flat[i] = orig - h
        lm = loss_fn()
        flat[i] = orig
        grad[i] = (lp - lm) / (2.0 * h)
    return grad.reshape(arr.shape)


def assert_grads_close(analytic, numeric, context=""):
    analytic = np.asarray(analytic, dtype=float).reshape(-1)
    numeric = np.asarray(numeric, dtype=float).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    err = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(err))
    assert err.max() < GRAD_RTOL, (
        f"{context}: rel err {err.max():.3g} at coord {worst} "
        f"(analytic {analytic[worst]:.6g}, fd {numeric[worst]:.6g})"
    )


def check_module_grads(model, loss_fn, params=None, context=""):
    """Compare every parameter's accumulated grad against finite differences.

    Caller must have run the analytic backward already.
    """
    for p in params if params is not None else model.parameters():
        fd = fd_gradient(loss_fn, p.value)
        assert_grads_close(p.grad, fd, context=f"{context}:{p.name}")


def tiny_config(**overrides) -> RunConfig:
    base = dict(
        d_patch=6, d_gene=4, d_know=5, d=4, heads=2, pathology_hidden=5,
        gene_value_hidden=3, gene_set_layers=1, fusion_layers=1, n_bins=4,
        epochs=1,
    )
    base.update(overrides)
    return RunConfig(**base)


def tiny_prep(seed=0, n_p=4, n_g=5, label=None, config=None) -> PreparedRecord:
    config = config or tiny_config()
    rng = np.random.default_rng(seed)
    embedder = HashedTextEmbedder(d_k=config.d_know, seed=config.text_embed_seed)
    know = encode_knowledge(
        "tumor shows focal necrosis", "invasive growth markers", "checkpoint loss",
        max_tokens=config.max_tokens, embedder=embedder,
    )
    return PreparedRecord(
        patient_id=f"T{seed}",
        label=label or SurvivalLabel(event_bin=2, censorship=0, raw_time=1.5),
        patches=rng.standard_normal((n_p, config.d_patch)),
        gene_name_emb=rng.standard_normal((n_g, config.d_gene)),
        gene_values=rng.standard_normal(n_g),
        knowledge=know,
    )


def tiny_model(config=None, seed=0) -> SurvivalModel:
    return SurvivalModel(config or tiny_config(), np.random.default_rng(seed))


def random_labels(rng, n, T=4, censor_frac=0.4):
    labels = []
    for _ in range(n):
        t = float(rng.exponential(2.0))
        labels.append(
            SurvivalLabel(
                event_bin=int(rng.integers(0, T)),
                censorship=int(rng.random() < censor_frac),
                raw_time=t,
            )
        )
    return labels


@pytest.fixture(scope="session")
def small_cohort_dir(tmp_path_factory):
    """A 30-patient strong-signal cohort shared across data/training tests."""
    out = tmp_path_factory.mktemp("cohort30")
    cfg = SyntheticConfig(
        n_patients=30, seed=7, signal_patch=1.0, signal_gene=1.5, signal_text=2.0,
        patch_count_min=6, patch_count_max=10, gene_vocab_size=20,
        genes_per_patient_min=10, genes_per_patient_max=14, d_patch=12, d_gene=8,
    )
    generate_synthetic_cohort(cfg, out)
    return out
