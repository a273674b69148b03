"""Per-domain LoRA supervised fine-tuning (one adapter per specialty)."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .clinicsim import DOMAINS, ClinicTask, Vocab, infer_vocab
from .gba import build_guideline_prompt
from .lora import LoraAdapter
from .optim import make_optimizer
from .tensor_core import NamedTensorMap, SeededRng
from .toy_policy import ToyTransformer, attach_lora, log_softmax

log = logging.getLogger(__name__)

__all__ = [
    "LoraAdapter",
    "SftConfig",
    "MixedDomainBatch",
    "TrainingDiverged",
    "sft_loss",
    "train_domain_expert",
    "train_all_experts",
]


class DsaError(ValueError):
    pass


class MixedDomainBatch(DsaError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class SftConfig:
    """LoRA SFT hyperparameters.

    The defaults are sized for the toy policy. :meth:`reference` returns the
    large-model recipe (lr 1e-6, r=16, alpha=32), which barely moves a model
    this small in three epochs.
    """

    learning_rate: float = 5e-3
    epochs: int = 3
    batch_size: int = 1
    grad_accum_steps: int = 8
    optimizer: str = "adam"
    rank: int = 4
    alpha: float = 8.0
    targets: tuple[str, ...] | None = None
    divergence_factor: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.grad_accum_steps < 1 or self.rank < 1:
            raise DsaError("learning_rate, batch_size, grad_accum_steps and rank must be positive")
        if self.epochs < 0:
            raise DsaError("epochs must be >= 0")

    @classmethod
    def reference(cls, **overrides) -> SftConfig:
        base = dict(learning_rate=1e-6, epochs=3, batch_size=1, grad_accum_steps=8, rank=16, alpha=32.0)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = list(self.targets) if self.targets is not None else None
        return d


def sft_batch(tasks: list[ClinicTask], vocab: Vocab):
    """Padded (prompt ++ trace) rows and a mask over positions that predict trace tokens."""
    rows, starts = [], []
    for t in tasks:
        prompt = build_guideline_prompt(t, t.paradigm, vocab).tokens
        rows.append(list(prompt) + list(t.trace))
        starts.append(len(prompt))
    T = max(map(len, rows))
    seqs = np.zeros((len(rows), T), dtype=np.int64)
    mask = np.zeros((len(rows), T), dtype=bool)
    for i, (r, s) in enumerate(zip(rows, starts)):
        seqs[i, : len(r)] = r
        mask[i, s - 1 : len(r) - 1] = True
    return seqs, mask


def sft_loss(
    model: ToyTransformer,
    theta,
    tasks: list[ClinicTask],
    vocab: Vocab | None = None,
    require_single_domain: bool = True,
    with_grad: bool = True,
) -> tuple[float, NamedTensorMap | None]:
    """Mean over tasks of the per-token cross-entropy on trace tokens.

    ``theta`` is normally a :class:`LoraView`, in which case gradients cover
    only the adapter tensors.
    """
    if not tasks:
        raise DsaError("empty batch")
    if require_single_domain and len({t.domain for t in tasks}) > 1:
        raise MixedDomainBatch(f"batch mixes domains {sorted({t.domain for t in tasks})}")
    vocab = vocab or infer_vocab(tasks)
    seqs, mask = sft_batch(tasks, vocab)
    trace = model.forward(theta, seqs, cache=with_grad)
    logp = log_softmax(trace.logits)
    targets = np.zeros_like(seqs)
    targets[:, :-1] = seqs[:, 1:]
    tok_lp = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    n_tok = mask.sum(1, keepdims=True)
    w = mask / (n_tok * len(tasks))
    loss = -math.fsum((w * tok_lp)[mask])
    if not with_grad:
        return loss, None
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, targets[..., None], np.take_along_axis(dlogits, targets[..., None], -1) - 1.0, -1)
    dlogits *= w[..., None]
    return loss, model.backward(trace, dlogits)


def train_domain_expert(
    model: ToyTransformer,
    base: NamedTensorMap,
    tasks: list[ClinicTask],
    cfg: SftConfig,
    vocab: Vocab | None = None,
    domain: str | None = None,
    pooled: bool = False,
) -> LoraAdapter:
    """Fit one LoRA adapter on a single-domain subset; the base stays frozen.

    ``pooled=True`` lifts the single-domain check (mixed-SFT baseline).
    Epoch-average training losses are stored in ``adapter.meta["epoch_loss"]``.
    """
    if not tasks:
        raise DsaError("no training tasks")
    domains = sorted({t.domain for t in tasks})
    if not pooled and len(domains) > 1:
        raise MixedDomainBatch(f"training set mixes domains {domains}")
    domain = domain if domain is not None else (domains[0] if len(domains) == 1 else None)
    vocab = vocab or infer_vocab(tasks)
    # every domain starts from the same adapter init; only the data order differs
    adapter = LoraAdapter.init(base, cfg.rank, cfg.alpha, SeededRng(cfg.seed), cfg.targets, domain)
    rng = SeededRng(cfg.seed).spawn(DOMAINS.index(domain) + 1 if domain in DOMAINS else 0)
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
    params = adapter.tensors()
    step_size = cfg.batch_size * cfg.grad_accum_steps
    epoch_loss = []
    initial = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(tasks))
        losses = []
        for start in range(0, len(tasks), step_size):
            batch = [tasks[int(i)] for i in order[start : start + step_size]]
            view = attach_lora(base, adapter.with_tensors(params))
            loss, grads = sft_loss(model, view, batch, vocab, require_single_domain=not pooled)
            if initial is None:
                initial = loss
            if not math.isfinite(loss) or loss > cfg.divergence_factor * initial:
                raise TrainingDiverged(
                    f"domain={domain} epoch={epoch} step={start // step_size}: loss {loss:.4g} "
                    f"exceeds {cfg.divergence_factor}x initial {initial:.4g}"
                )
            params = params.updated(opt.step(params, grads))
            losses.append(loss * len(batch))
        epoch_loss.append(math.fsum(losses) / len(tasks))
        log.info("dsa domain=%s epoch=%d loss=%.4f", domain, epoch, epoch_loss[-1])
    trained = adapter.with_tensors(params)
    trained.meta["epoch_loss"] = epoch_loss
    return trained


def train_all_experts(
    model: ToyTransformer,
    base: NamedTensorMap,
    by_domain: dict[str, list[ClinicTask]],
    cfg: SftConfig,
    vocab: Vocab | None = None,
    workers: int = 1,
) -> dict[str, LoraAdapter]:
    """Independent per-domain runs; ``workers > 1`` runs them concurrently."""
    domains = [d for d in DOMAINS if by_domain.get(d)]

    def job(d):
        return train_domain_expert(model, base, by_domain[d], cfg, vocab, d)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, domains))
    else:
        results = [job(d) for d in domains]
    return dict(zip(domains, results))
