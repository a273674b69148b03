"""Task vectors and parameter-space merging (TIES, task arithmetic, SLERP, averaging)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint_store import Manifest
from .tensor_core import (
    KeyMismatchError,
    NamedTensorMap,
    check_finite,
    check_same_keys,
    magnitude_threshold,
)

METHODS = ("ties", "task_arithmetic", "slerp", "naive_average")
SOURCE_ROLES = ("AM", "CAH", "BS", "CSI", "RL")


class MergeError(ValueError):
    pass


class FingerprintMismatch(MergeError):
    pass


@dataclass(frozen=True)
class TaskVector:
    entries: NamedTensorMap
    source_role: str
    base_fingerprint: int

    def __post_init__(self):
        if self.source_role not in SOURCE_ROLES + ("merged",):
            raise MergeError(f"unknown source role {self.source_role!r}")

    def nonzero_names(self) -> list[str]:
        return [k for k, v in self.entries.items() if np.any(v != 0)]


@dataclass(frozen=True)
class MergeConfig:
    method: str = "ties"
    density: float = 0.5
    eta: float = 1.0
    ta_lambda: float = 1.0
    slerp_t: float = 0.5
    trim_scope: str = "per_tensor"

    def __post_init__(self):
        if self.method not in METHODS:
            raise MergeError(f"method must be one of {METHODS}")
        if not 0.0 < self.density <= 1.0:
            raise MergeError("density must lie in (0, 1]")
        if self.eta <= 0:
            raise MergeError("eta must be > 0")
        if not 0.0 <= self.slerp_t <= 1.0:
            raise MergeError("slerp_t must lie in [0, 1]")
        if self.trim_scope not in ("per_tensor", "global"):
            raise MergeError("trim_scope must be 'per_tensor' or 'global'")

    def to_dict(self) -> dict:
        return asdict(self)


def extract_task_vector(theta_k: NamedTensorMap, theta_base: NamedTensorMap, role: str, strict: bool = False,
                        recorded_base: int | None = None) -> TaskVector:
    """``theta_k - theta_base`` over an identical key set.

    ``recorded_base`` is the base fingerprint stored in the expert's manifest;
    a mismatch raises under ``strict`` and is otherwise ignored.
    """
    check_same_keys(theta_k, theta_base)
    for k in theta_k:
        if theta_k[k].dtype != theta_base[k].dtype:
            raise MergeError(f"dtype mismatch for {k!r}")
    if strict and recorded_base is not None and recorded_base != theta_base.fingerprint:
        raise FingerprintMismatch(
            f"{role}: expert was trained from {recorded_base:016x}, base is {theta_base.fingerprint:016x}"
        )
    diff = {k: check_finite(theta_k[k] - theta_base[k], k) for k in theta_k}
    return TaskVector(NamedTensorMap(diff), role, theta_base.fingerprint)


def _check_vectors(taus: list[TaskVector]) -> None:
    if not taus:
        raise MergeError("no task vectors to merge")
    for tau in taus[1:]:
        check_same_keys(taus[0].entries, tau.entries)
        if tau.base_fingerprint != taus[0].base_fingerprint:
            raise FingerprintMismatch("task vectors were extracted from different bases")


def trim(values: np.ndarray, density: float, threshold: float | None = None) -> np.ndarray:
    """Zero every entry whose magnitude falls below the keep-``density`` threshold."""
    if threshold is None:
        threshold = magnitude_threshold(values, density)
    return np.where(np.abs(values) >= threshold, values, 0.0)


def elect_sign(stack: np.ndarray) -> np.ndarray:
    """Per-coordinate sign of the summed trimmed values (axis 0 = experts).

    A zero sum falls back to the sign of the single largest-magnitude value;
    if that is itself tied between signs (or all values are zero) the result
    is 0 and the coordinate outputs 0.
    """
    total = stack.sum(axis=0, dtype=np.float64)
    sign = np.sign(total)
    tied = sign == 0
    if np.any(tied):
        mags = np.abs(stack)
        peak = mags.max(axis=0)
        is_peak = (mags == peak) & (peak > 0)
        pos = np.any(is_peak & (stack > 0), axis=0)
        neg = np.any(is_peak & (stack < 0), axis=0)
        fallback = np.where(pos & ~neg, 1.0, np.where(neg & ~pos, -1.0, 0.0))
        sign = np.where(tied, fallback, sign)
    return sign


def disjoint_mean(stack: np.ndarray, sign: np.ndarray) -> np.ndarray:
    """Mean of the values agreeing with the elected sign, accumulated in expert order.

    Uses the running-mean update ``m += (x - m) / n`` so identical inputs
    reproduce themselves exactly.
    """
    mean = np.zeros(stack.shape[1:], dtype=np.float64)
    count = np.zeros(stack.shape[1:], dtype=np.int64)
    for row in stack:
        agree = (np.sign(row) == sign) & (row != 0) & (sign != 0)
        count = count + agree
        mean = np.where(agree, mean + (row - mean) / np.maximum(count, 1), mean)
    return mean


def ties_merge(taus: list[TaskVector], density: float = 0.5, trim_scope: str = "per_tensor",
               report: dict | None = None) -> TaskVector:
    """Trim each vector to its top-``density`` magnitudes, elect signs, average agreeing survivors."""
    _check_vectors(taus)
    if not 0.0 < density <= 1.0:
        raise MergeError("density must lie in (0, 1]")
    names = list(taus[0].entries)
    thresholds = [None] * len(taus)
    if trim_scope == "global":
        thresholds = [
            magnitude_threshold(np.concatenate([t.entries[n].reshape(-1) for n in names]), density) for t in taus
        ]
    out = {}
    for name in names:
        dtype = taus[0].entries[name].dtype
        stack = np.stack(
            [trim(t.entries[name].astype(np.float64), density, thr) for t, thr in zip(taus, thresholds)]
        )
        sign = elect_sign(stack)
        merged = disjoint_mean(stack, sign)
        out[name] = merged.astype(dtype)
        if report is not None:
            nz = stack != 0
            conflict = np.any(stack > 0, axis=0) & np.any(stack < 0, axis=0)
            report[name] = {
                "survivors": int(nz.sum()),
                "size": int(sign.size),
                "sign_conflict_rate": float(conflict.mean()),
            }
    return TaskVector(NamedTensorMap(out), "merged", taus[0].base_fingerprint)


def task_arithmetic(taus: list[TaskVector], ta_lambda: float = 1.0) -> TaskVector:
    _check_vectors(taus)
    out = {}
    for name in taus[0].entries:
        total = np.sum([t.entries[name].astype(np.float64) for t in taus], axis=0)
        out[name] = (ta_lambda * total).astype(taus[0].entries[name].dtype)
    return TaskVector(NamedTensorMap(out), "merged", taus[0].base_fingerprint)


def _slerp_vec(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return (1.0 - t) * a + t * b
    cos = float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
    if cos > 1.0 - 1e-6:
        return (1.0 - t) * a + t * b
    omega = math.acos(cos)
    so = math.sin(omega)
    return (math.sin((1.0 - t) * omega) / so) * a + (math.sin(t * omega) / so) * b


def slerp(theta_a, theta_b, t: float) -> NamedTensorMap:
    """Per-tensor spherical interpolation; (near-)parallel or zero tensors fall back to lerp."""
    if not 0.0 <= t <= 1.0:
        raise MergeError("t must lie in [0, 1]")
    check_same_keys(theta_a, theta_b)
    out = {}
    for name in theta_a:
        a = np.asarray(theta_a[name], dtype=np.float64)
        b = np.asarray(theta_b[name], dtype=np.float64)
        v = _slerp_vec(a.reshape(-1), b.reshape(-1), t).reshape(a.shape)
        out[name] = v.astype(theta_a[name].dtype)
    return NamedTensorMap(out)


def slerp_many(models: list[NamedTensorMap]) -> NamedTensorMap:
    """Fold ``k`` models with successive weights ``1/(i+1)`` so each contributes equally."""
    acc = models[0]
    for i, m in enumerate(models[1:], start=1):
        acc = slerp(acc, m, 1.0 / (i + 1))
    return acc


def naive_average(models: list[NamedTensorMap]) -> NamedTensorMap:
    if not models:
        raise MergeError("nothing to average")
    for m in models[1:]:
        check_same_keys(models[0], m)
    return NamedTensorMap(
        {n: (np.sum([m[n] for m in models], axis=0) / len(models)).astype(models[0][n].dtype) for n in models[0]}
    )


def reconstruct(theta_base: NamedTensorMap, tau_merged: TaskVector, eta: float = 1.0) -> NamedTensorMap:
    """``theta_base + eta * tau``."""
    if set(theta_base) != set(tau_merged.entries):
        raise KeyMismatchError(set(theta_base) ^ set(tau_merged.entries))
    check_same_keys(theta_base, tau_merged.entries)
    return NamedTensorMap({k: theta_base[k] + eta * tau_merged.entries[k] for k in theta_base})


@dataclass
class MergeResult:
    params: NamedTensorMap
    manifest: Manifest
    report: dict = field(default_factory=dict)


def merge_models(
    theta_base: NamedTensorMap,
    experts: dict[str, NamedTensorMap],
    cfg: MergeConfig,
    recorded_bases: dict[str, int] | None = None,
    strict: bool = False,
) -> MergeResult:
    """Merge role-keyed expert checkpoints into one model with a ``merged`` manifest."""
    if not experts:
        raise MergeError("no experts given")
    roles = sorted(experts, key=lambda r: SOURCE_ROLES.index(r) if r in SOURCE_ROLES else len(SOURCE_ROLES))
    recorded_bases = recorded_bases or {}
    report: dict = {}
    if cfg.method in ("ties", "task_arithmetic"):
        taus = [
            extract_task_vector(experts[r], theta_base, r, strict=strict, recorded_base=recorded_bases.get(r))
            for r in roles
        ]
        if cfg.method == "ties":
            tau = ties_merge(taus, cfg.density, cfg.trim_scope, report)
        else:
            tau = task_arithmetic(taus, cfg.ta_lambda)
        params = reconstruct(theta_base, tau, cfg.eta)
    elif cfg.method == "slerp":
        # interpolate task vectors, not raw weights: raw experts are nearly parallel
        taus = [extract_task_vector(experts[r], theta_base, r).entries for r in roles]
        tau = TaskVector(slerp_many(taus), "merged", theta_base.fingerprint)
        params = reconstruct(theta_base, tau, cfg.eta)
    else:
        params = naive_average([experts[r] for r in roles])
    manifest = Manifest(
        role="merged",
        base_fingerprint=theta_base.fingerprint,
        extra={
            "method": cfg.method,
            "density": cfg.density,
            "eta": cfg.eta,
            "ta_lambda": cfg.ta_lambda,
            "slerp_t": cfg.slerp_t,
            "sources": [{"role": r, "fingerprint": f"{experts[r].fingerprint:016x}"} for r in roles],
        },
    )
    return MergeResult(params, manifest, report)
