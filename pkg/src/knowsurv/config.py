"""Run configuration: one flat record serialized into every results file."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

MODALITIES = ("P", "G", "R", "PBK")


@dataclass
class RunConfig:
    seed: int = 0
    epochs: int = 30
    optimizer: str = "adam"
    lr_pathology_adapter: float = 2e-4
    lr_other: float = 2e-5
    weight_decay: float = 1e-5
    batch_size: int = 1  # gradient-accumulation count; stepping is per patient
    # widths
    d_patch: int = 64
    d_gene: int = 32
    d_know: int = 48
    d: int = 32
    heads: int = 2
    pathology_hidden: int = 64
    gene_value_hidden: int = 16
    gene_set_layers: int = 2
    fusion_layers: int = 1
    n_bins: int = 4
    # attention-weight normalization inside the cross-modal blocks
    kecm_norm: str = "layernorm"
    # modalities to drop, subset of MODALITIES
    drop: tuple = ()
    allow_knowledge_free: bool = False
    max_tokens: int = 512
    text_embed_seed: int = 0
    # LLM backend selection (Table-style model swaps)
    llm_backend: str = "fixture"
    llm_model: str = ""
    llm_url: str = ""
    n_folds: int = 5
    workers: int = 1

    def __post_init__(self):
        self.drop = tuple(self.drop)
        self.validate()

    def validate(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("lr_pathology_adapter", "lr_other"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.kecm_norm not in ("layernorm", "off"):
            raise ValueError(f"kecm_norm must be layernorm|off, got {self.kecm_norm!r}")
        unknown = set(self.drop) - set(MODALITIES)
        if unknown:
            raise ValueError(f"unknown modalities in drop: {sorted(unknown)}")
        if set(self.drop) == set(MODALITIES):
            raise ValueError("cannot drop every modality")
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        if self.n_folds < 2:
            raise ValueError("n_folds must be >= 2")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.d_gene % self.heads:
            raise ValueError(f"d_gene={self.d_gene} not divisible by heads={self.heads}")

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["drop"] = list(self.drop)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        kw = dict(d)
        if "drop" in kw:
            kw["drop"] = tuple(kw["drop"])
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "RunConfig":
        return cls.from_dict(json.loads(s))
