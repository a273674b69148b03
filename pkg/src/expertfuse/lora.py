"""Low-rank adapters: ``W_eff = W + (alpha / r) * B @ A`` per target matrix."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import NamedTensorMap, SeededRng, TensorError

A_SUFFIX = ".lora_A"
B_SUFFIX = ".lora_B"


class AdapterShapeError(TensorError):
    pass


EMBEDDING_TARGET = "tok_emb"


def default_targets(base, include_embeddings: bool = False) -> list[str]:
    """Every 2-D linear weight, plus the token embedding when asked.

    Norm parameters and the positional embedding are never targeted.
    """
    names = [n for n in base if n.endswith(".weight") and np.ndim(base[n]) == 2]
    if include_embeddings and EMBEDDING_TARGET in base:
        names.append(EMBEDDING_TARGET)
    return sorted(names)


@dataclass(frozen=True)
class LoraAdapter:
    rank: int
    alpha: float
    pairs: dict[str, tuple[np.ndarray, np.ndarray]]
    domain: str | None = None
    base_fingerprint: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def targets(self) -> list[str]:
        return sorted(self.pairs)

    @classmethod
    def init(
        cls,
        base: NamedTensorMap,
        rank: int,
        alpha: float,
        rng: SeededRng,
        targets=None,
        domain: str | None = None,
    ) -> LoraAdapter:
        """A ~ N(0, 1/r), B = 0, so the adapter starts as an exact no-op."""
        if rank < 1:
            raise AdapterShapeError("rank must be >= 1")
        targets = sorted(default_targets(base) if targets is None else targets)
        pairs = {}
        for name in targets:
            if name not in base:
                raise AdapterShapeError(f"target {name!r} not in base")
            if base[name].ndim != 2:
                raise AdapterShapeError(f"target {name!r} is not a matrix")
            out_dim, in_dim = base[name].shape
            A = rng.normal(0.0, 1.0 / np.sqrt(rank), size=(rank, in_dim))
            B = np.zeros((out_dim, rank))
            pairs[name] = (A, B)
        return cls(rank, float(alpha), pairs, domain, base.fingerprint)

    def validate(self, base) -> None:
        for name, (A, B) in self.pairs.items():
            if name not in base:
                raise AdapterShapeError(f"adapter target {name!r} missing from base")
            out_dim, in_dim = np.shape(base[name])
            if A.shape != (self.rank, in_dim) or B.shape != (out_dim, self.rank):
                raise AdapterShapeError(
                    f"adapter for {name!r}: A{A.shape} B{B.shape} incompatible with W{(out_dim, in_dim)}"
                )

    def tensors(self) -> NamedTensorMap:
        out = {}
        for name, (A, B) in self.pairs.items():
            out[name + A_SUFFIX] = A
            out[name + B_SUFFIX] = B
        return NamedTensorMap(out)

    def with_tensors(self, tensors) -> LoraAdapter:
        pairs = {n: (np.asarray(tensors[n + A_SUFFIX]), np.asarray(tensors[n + B_SUFFIX])) for n in self.pairs}
        return LoraAdapter(self.rank, self.alpha, pairs, self.domain, self.base_fingerprint, self.meta)

    @classmethod
    def from_tensors(cls, tensors, rank: int, alpha: float, domain=None, base_fingerprint: int = 0) -> LoraAdapter:
        names = sorted({n[: -len(A_SUFFIX)] for n in tensors if n.endswith(A_SUFFIX)})
        pairs = {n: (np.asarray(tensors[n + A_SUFFIX]), np.asarray(tensors[n + B_SUFFIX])) for n in names}
        return cls(rank, float(alpha), pairs, domain, base_fingerprint)

    def delta(self, name: str) -> np.ndarray:
        A, B = self.pairs[name]
        return self.scale * (B @ A)

    def materialize(self, base: NamedTensorMap) -> NamedTensorMap:
        """Fold the adapter into a standalone checkpoint ``base + delta``."""
        self.validate(base)
        return base.updated({n: base[n] + self.delta(n) for n in self.pairs})

    @property
    def fingerprint(self) -> int:
        return self.tensors().fingerprint
