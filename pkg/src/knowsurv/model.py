"""The assembled multimodal survival model.

Data flow for a full-modality record:

    patches --f_P--> F_P ----\
                              >-- guided cross-attention --> F_PK --T_P--\
    knowledge --f_K--> F_K --+--------------------------------------------+--> concat
                              >-- guided cross-attention --> F_GK --T_G--/      |
    genes ---E_G/f_G--> F_G -/                                             mean pool
                                                                                |
                                                                       affine -> hazard logits

Dropped modalities reroute the graph: removing P or G removes that
branch (the classifier consumes the matching column slice), dropping R
or PBK removes those tokens from the knowledge text, and dropping both
texts switches to a knowledge-free fallback where each remaining
modality runs through its transformer alone and pooled outputs are
concatenated. The parameter set is identical for every mask, so any
checkpoint can be evaluated under any mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container
from .config import RunConfig
from .encoders import Dimensions, GeneEncoder, KnowledgeAdapter, PathologyEncoder
from .knowledge import HashedTextEmbedder, KnowledgeSequence, encode_knowledge
from .nn import Affine, GuidedCrossAttention, Module, TransformerLayer, sinusoidal_positions

KNOWLEDGE_FREE_FLAG = "allow_knowledge_free"


@dataclass
class PreparedRecord:
    """Per-patient tensors after masking, ready for the model."""

    patient_id: str
    label: object
    patches: np.ndarray | None
    gene_name_emb: np.ndarray | None
    gene_values: np.ndarray | None
    knowledge: KnowledgeSequence | None


def prepare_record(record, table, embedder: HashedTextEmbedder, config: RunConfig,
                   drop=None) -> PreparedRecord:
    """Apply a modality mask to one record and assemble model inputs."""
    drop = set(config.drop if drop is None else drop)
    use_p = "P" not in drop
    use_g = "G" not in drop
    report = record.report_text if "R" not in drop else ""
    pbk_p = record.pbk_pathology if "PBK" not in drop else ""
    pbk_g = record.pbk_genomic if "PBK" not in drop else ""
    knowledge = None
    if report or pbk_p or pbk_g:
        knowledge = encode_knowledge(
            report, pbk_p, pbk_g, max_tokens=config.max_tokens, embedder=embedder
        )
    else:
        if not config.allow_knowledge_free:
            raise ValueError(
                "no knowledge text left after masking; set "
                f"{KNOWLEDGE_FREE_FLAG}=True (--allow-knowledge-free) to train "
                "the knowledge-free fallback"
            )
        if not (use_p or use_g):
            raise ValueError("mask drops every modality")
    patches = None
    if use_p:
        patches = np.asarray(record.patch_features, dtype=np.float64)
    gene_emb = gene_values = None
    if use_g:
        names = [g for g, _ in record.genes]
        gene_emb = np.stack([np.asarray(table.vectors[n], dtype=np.float64) for n in names])
        gene_values = np.array([v for _, v in record.genes], dtype=np.float64)
    return PreparedRecord(
        patient_id=record.patient_id,
        label=record.label,
        patches=patches,
        gene_name_emb=gene_emb,
        gene_values=gene_values,
        knowledge=knowledge,
    )


class SurvivalModel(Module):
    """Full parameter set plus mask-aware routing.

    Classifier weight rows are laid out as three d-wide blocks in the
    fixed order [pathology, knowledge, genomic]; masked forwards use the
    row slice matching the surviving blocks.
    """

    def __init__(self, config: RunConfig, rng=None):
        if rng is None:
            rng = np.random.default_rng(config.seed)
        self.config = config
        d = config.d
        self.dims = Dimensions(
            d_patch=config.d_patch, d_gene=config.d_gene, d_know=config.d_know, d=d
        )
        self.pathology = PathologyEncoder(self.dims, config.pathology_hidden, rng)
        self.genes = GeneEncoder(
            self.dims, config.gene_value_hidden, config.gene_set_layers, config.heads, rng
        )
        self.knowledge = KnowledgeAdapter(self.dims, rng)
        self.kecm_path = GuidedCrossAttention(
            "kecm_path", d, config.heads, rng, norm_mode=config.kecm_norm
        )
        self.kecm_gene = GuidedCrossAttention(
            "kecm_gene", d, config.heads, rng, norm_mode=config.kecm_norm
        )
        self.path_transformer = [
            TransformerLayer(f"path_transformer.layer{i}", d, config.heads, rng)
            for i in range(config.fusion_layers)
        ]
        self.gene_transformer = [
            TransformerLayer(f"gene_transformer.layer{i}", d, config.heads, rng)
            for i in range(config.fusion_layers)
        ]
        self.classifier = Affine("classifier", 3 * d, config.n_bins, rng)

    # ------------------------------------------------------------------
    # fusion-head building blocks

    def _run_stack(self, layers, x):
        caches = []
        for layer in layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def _back_stack(self, layers, caches, dy):
        for layer, c in zip(reversed(layers), reversed(caches)):
            dy = layer.backward(c, dy)
        return dy

    def fuse(self, f_pk, f_k, f_gk):
        """Concatenate [T_P(f_pk), f_k, T_G(f_gk)] feature-wise per token."""
        if not (f_pk.shape[0] == f_k.shape[0] == f_gk.shape[0]):
            raise ValueError("token-count mismatch between fusion inputs")
        p_out, p_caches = self._run_stack(self.path_transformer, f_pk)
        g_out, g_caches = self._run_stack(self.gene_transformer, f_gk)
        f_final = np.concatenate([p_out, f_k, g_out], axis=1)
        return f_final, (p_caches, g_caches)

    def fuse_backward(self, cache, d_final):
        p_caches, g_caches = cache
        d = self.config.d
        d_pk = self._back_stack(self.path_transformer, p_caches, d_final[:, :d])
        d_k = d_final[:, d : 2 * d]
        d_gk = self._back_stack(self.gene_transformer, g_caches, d_final[:, 2 * d :])
        return d_pk, d_k, d_gk

    def pool_and_classify(self, f_final):
        """Mean over tokens then the full-width affine classifier."""
        if f_final.ndim != 2 or f_final.shape[0] < 1:
            raise ValueError("fused features must have at least one token row")
        pooled = f_final.mean(axis=0)
        logits = pooled @ self.classifier.W.value + self.classifier.b.value
        return logits, (pooled, f_final.shape[0])

    def pool_and_classify_backward(self, cache, dlogits):
        pooled, n_tokens = cache
        self.classifier.W.grad += np.outer(pooled, dlogits)
        self.classifier.b.grad += dlogits
        dpooled = self.classifier.W.value @ dlogits
        return np.repeat(dpooled[None, :] / n_tokens, n_tokens, axis=0)

    # ------------------------------------------------------------------
    # mask-aware forward/backward

    def forward(self, prep: PreparedRecord):
        d = self.config.d
        blocks = []  # (kind, tokens, branch_cache)
        know = prep.knowledge
        if know is not None and know.n_tokens > 0:
            f_k_raw, c_know = self.knowledge.forward(
                np.asarray(know.embeddings, dtype=np.float64)
            )
            pe = sinusoidal_positions(f_k_raw.shape[0], d)
            if prep.patches is not None:
                f_p, c_path = self.pathology.forward(prep.patches)
                f_pk, c_kp = self.kecm_path.forward(f_k_raw, f_p)
                x, t_caches = self._run_stack(self.path_transformer, f_pk + pe)
                blocks.append(("P", x, (c_path, c_kp, t_caches)))
            blocks.append(("K", f_k_raw + pe, None))
            if prep.gene_name_emb is not None:
                f_g, c_gene = self.genes.forward(prep.gene_name_emb, prep.gene_values)
                f_gk, c_kg = self.kecm_gene.forward(f_k_raw, f_g)
                x, t_caches = self._run_stack(self.gene_transformer, f_gk + pe)
                blocks.append(("G", x, (c_gene, c_kg, t_caches)))
            f_final = np.concatenate([b[1] for b in blocks], axis=1)
            pooled = f_final.mean(axis=0)
            mode = "knowledge"
            extra = (c_know, f_final.shape[0])
        else:
            # knowledge-free fallback: per-branch transformer + pooled concat
            pooled_parts = []
            if prep.patches is not None:
                f_p, c_path = self.pathology.forward(prep.patches)
                x, t_caches = self._run_stack(self.path_transformer, f_p)
                blocks.append(("P", x, (c_path, None, t_caches)))
                pooled_parts.append(x.mean(axis=0))
            if prep.gene_name_emb is not None:
                f_g, c_gene = self.genes.forward(prep.gene_name_emb, prep.gene_values)
                x, t_caches = self._run_stack(self.gene_transformer, f_g)
                blocks.append(("G", x, (c_gene, None, t_caches)))
                pooled_parts.append(x.mean(axis=0))
            if not blocks:
                raise ValueError("mask drops every modality")
            pooled = np.concatenate(pooled_parts)
            mode = "fallback"
            extra = None
        w = self._sliced_weight(blocks)
        logits = pooled @ w + self.classifier.b.value
        cache = (blocks, pooled, mode, extra, w)
        return logits, cache

    def _row_ranges(self, blocks):
        d = self.config.d
        offset = {"P": 0, "K": d, "G": 2 * d}
        return [slice(offset[kind], offset[kind] + d) for kind, _, _ in blocks]

    def _class_rows(self, kind):
        d = self.config.d
        offset = {"P": 0, "K": d, "G": 2 * d}[kind]
        return self.classifier.W.value[offset : offset + d]

    def _sliced_weight(self, blocks):
        return np.concatenate([self._class_rows(kind) for kind, _, _ in blocks], axis=0)

    def backward(self, cache, dlogits):
        """Accumulate parameter gradients; returns input gradients."""
        blocks, pooled, mode, extra, w = cache
        d = self.config.d
        self.classifier.b.grad += dlogits
        d_pooled = w @ dlogits
        d_w = np.outer(pooled, dlogits)
        for i, r in enumerate(self._row_ranges(blocks)):
            self.classifier.W.grad[r] += d_w[i * d : (i + 1) * d]
        grads = {}
        if mode == "knowledge":
            c_know, n_tokens = extra
            d_f_k_total = np.zeros((n_tokens, d))
            for i, (kind, tokens, branch_cache) in enumerate(blocks):
                d_block = np.repeat(
                    d_pooled[None, i * d : (i + 1) * d] / n_tokens, n_tokens, axis=0
                )
                if kind == "K":
                    d_f_k_total += d_block
                elif kind == "P":
                    c_path, c_kp, t_caches = branch_cache
                    d_x = self._back_stack(self.path_transformer, t_caches, d_block)
                    d_fk, d_fp = self.kecm_path.backward(c_kp, d_x)
                    d_f_k_total += d_fk
                    grads["patches"] = self.pathology.backward(c_path, d_fp)
                else:
                    c_gene, c_kg, t_caches = branch_cache
                    d_x = self._back_stack(self.gene_transformer, t_caches, d_block)
                    d_fk, d_fg = self.kecm_gene.backward(c_kg, d_x)
                    d_f_k_total += d_fk
                    g_emb, g_val = self.genes.backward(c_gene, d_fg)
                    grads["gene_name_emb"], grads["gene_values"] = g_emb, g_val
            grads["know_emb"] = self.knowledge.backward(c_know, d_f_k_total)
        else:
            i = 0
            for kind, tokens, branch_cache in blocks:
                n = tokens.shape[0]
                d_block = np.repeat(d_pooled[None, i * d : (i + 1) * d] / n, n, axis=0)
                if kind == "P":
                    c_path, _, t_caches = branch_cache
                    d_x = self._back_stack(self.path_transformer, t_caches, d_block)
                    grads["patches"] = self.pathology.backward(c_path, d_x)
                else:
                    c_gene, _, t_caches = branch_cache
                    d_x = self._back_stack(self.gene_transformer, t_caches, d_block)
                    g_emb, g_val = self.genes.backward(c_gene, d_x)
                    grads["gene_name_emb"], grads["gene_values"] = g_emb, g_val
                i += 1
        return grads

    # ------------------------------------------------------------------

    def attention_maps(self, prep: PreparedRecord) -> dict[str, np.ndarray]:
        """Pre-norm cross-attention weights per branch, (heads, n_k, n_x)."""
        if prep.knowledge is None or prep.knowledge.n_tokens == 0:
            raise ValueError("attention maps need knowledge tokens")
        f_k_raw, _ = self.knowledge.forward(
            np.asarray(prep.knowledge.embeddings, dtype=np.float64)
        )
        out = {}
        if prep.patches is not None:
            f_p, _ = self.pathology.forward(prep.patches)
            out["pathology"] = self.kecm_path.attention_weights(f_k_raw, f_p)
        if prep.gene_name_emb is not None:
            f_g, _ = self.genes.forward(prep.gene_name_emb, prep.gene_values)
            out["genomic"] = self.kecm_gene.attention_weights(f_k_raw, f_g)
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.parameters()}

    def save(self, path):
        container.write_tensors(path, self.state_dict())

    def load(self, path):
        tensors = container.read_tensors(path)
        self.load_state_dict(tensors)

    def load_state_dict(self, tensors: dict[str, np.ndarray]):
        params = {p.name: p for p in self.parameters()}
        missing = set(params) - set(tensors)
        extra = set(tensors) - set(params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing={sorted(missing)[:3]} "
                             f"extra={sorted(extra)[:3]}")
        for name, p in params.items():
            arr = np.asarray(tensors[name], dtype=np.float64).reshape(p.value.shape)
            p.value[...] = arr

    def quantize_f32(self):
        """Round every parameter through float32.

        Makes the in-memory model identical to its saved checkpoint, so
        held-out risks computed now are reproduced bit-for-bit after a
        reload.
        """
        for p in self.parameters():
            p.value[...] = p.value.astype(np.float32).astype(np.float64)
