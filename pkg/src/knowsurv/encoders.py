"""Trainable unimodal encoders projecting each modality into the shared
d-dimensional latent space.

* pathology: row-wise MLP adapter over pre-extracted patch features;
* genes: name embedding + value encoding added elementwise, passed
  through a small self-attention set encoder (no positional encoding,
  genes are a set) and a linear adapter;
* knowledge: linear adapter over frozen hashed token embeddings (the
  only trainable piece of the text path).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import MLP, Affine, Module, TransformerLayer


@dataclass(frozen=True)
class Dimensions:
    """Static widths shared across the model."""

    d_patch: int
    d_gene: int
    d_know: int
    d: int

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 1:
                raise ValueError(f"dimension {name} must be positive, got {v}")


class PathologyEncoder(Module):
    """Row-wise MLP adapter: (n_p, d_patch) -> (n_p, d)."""

    def __init__(self, dims: Dimensions, hidden: int, rng):
        self.adapter = MLP("pathology_adapter", [dims.d_patch, hidden, dims.d], rng)

    def forward(self, patches, check=True):
        if check:
            if patches.ndim != 2 or patches.shape[0] < 1:
                raise ValueError("patch features must be a nonempty 2-D matrix")
            if not np.all(np.isfinite(patches)):
                raise ValueError("non-finite patch features")
        return self.adapter.forward(patches)

    def backward(self, cache, dy):
        return self.adapter.backward(cache, dy)


class GeneEncoder(Module):
    """Set encoder over gene tokens: name embedding plus encoded value.

    Each token is name_emb + value_mlp(expression); tokens then pass
    through self-attention layers and a linear adapter to width d.
    Permutation-equivariant over genes by construction.
    """

    def __init__(self, dims: Dimensions, value_hidden: int, layers: int, heads: int, rng):
        self.value_encoder = MLP(
            "gene_value_encoder", [1, value_hidden, dims.d_gene], rng
        )
        self.set_layers = [
            TransformerLayer(f"gene_set_encoder.layer{i}", dims.d_gene, heads, rng)
            for i in range(layers)
        ]
        self.adapter = Affine("gene_adapter", dims.d_gene, dims.d, rng)

    def forward(self, name_emb, values):
        if name_emb.shape[0] != values.shape[0]:
            raise ValueError("gene name/value count mismatch")
        if not np.all(np.isfinite(values)):
            raise ValueError("non-finite gene expression value")
        ve, c_val = self.value_encoder.forward(values[:, None])
        x = name_emb + ve
        layer_caches = []
        for layer in self.set_layers:
            x, c = layer.forward(x)
            layer_caches.append(c)
        out, c_adapt = self.adapter.forward(x)
        return out, (c_val, layer_caches, c_adapt)

    def backward(self, cache, dy):
        c_val, layer_caches, c_adapt = cache
        dx = self.adapter.backward(c_adapt, dy)
        for layer, c in zip(reversed(self.set_layers), reversed(layer_caches)):
            dx = layer.backward(c, dx)
        d_name_emb = dx
        dve = self.value_encoder.backward(c_val, dx)
        d_values = dve[:, 0]
        return d_name_emb, d_values


class KnowledgeAdapter(Module):
    """Linear adapter over token embeddings: (n_k, d_know) -> (n_k, d)."""

    def __init__(self, dims: Dimensions, rng):
        self.adapter = Affine("knowledge_adapter", dims.d_know, dims.d, rng)

    def forward(self, token_emb):
        if token_emb.ndim != 2 or token_emb.shape[0] < 1:
            raise ValueError("token embeddings must be a nonempty 2-D matrix")
        return self.adapter.forward(token_emb)

    def backward(self, cache, dy):
        return self.adapter.backward(cache, dy)
