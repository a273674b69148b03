"""Guideline-conditioned group-relative policy optimisation.

Prompts carry one of four reasoning-paradigm prefixes. For each prompt a
group of ``G`` rollouts is scored (accuracy + format), rewards are z-scored
within the group, and the policy is pushed along the advantage-weighted,
length-normalised log-likelihood. ``clipped_kl`` mode swaps the raw
log-likelihood for a ratio-clipped surrogate and subtracts an exact per-token
KL penalty against a frozen reference policy.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .clinicsim import PARADIGMS, ClinicTask, StratifiedDataset, Vocab, infer_vocab
from .optim import Adam, apply_update
from .tensor_core import NamedTensorMap, SeededRng
from .toy_policy import ToyTransformer, log_softmax

log = logging.getLogger(__name__)

MODES = ("paper_reinforce", "clipped_kl")
ASSIGNMENTS = ("per_group_uniform", "stratified_within_group")


class GbaError(RuntimeError):
    pass


class RewardCollapse(GbaError):
    pass


@dataclass(frozen=True)
class GuidelinePrompt:
    paradigm: str | None
    prefix: tuple[int, ...]
    context: tuple[int, ...]

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.prefix + self.context


def task_vocab(task: ClinicTask) -> Vocab:
    return infer_vocab([task])


def build_guideline_prompt(task: ClinicTask, paradigm: str, vocab: Vocab | None = None) -> GuidelinePrompt:
    """Paradigm prefix token followed by the task's symptom context."""
    if paradigm not in PARADIGMS:
        raise GbaError(f"unknown paradigm {paradigm!r}")
    vocab = vocab or task_vocab(task)
    return GuidelinePrompt(paradigm, (vocab.paradigm_token(paradigm),), tuple(task.context))


def plain_prompt(task: ClinicTask) -> GuidelinePrompt:
    """Context-only prompt used by the guideline-free GRPO baseline."""
    return GuidelinePrompt(None, (), tuple(task.context))


@dataclass(frozen=True)
class GbaConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_beta: float = 0.001
    eps_std: float = 1e-8
    mode: str = "clipped_kl"
    w_acc: float = 1.0
    w_fmt: float = 0.5
    assignment: str = "per_group_uniform"
    guidelines: bool = True
    max_new: int = 32
    temperature: float = 1.0
    iterations: int = 500
    queries_per_iter: int = 4
    learning_rate: float = 3e-4
    collapse_patience: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise GbaError("group_size must be >= 2")
        if self.eps_std <= 0:
            raise GbaError("eps_std must be > 0")
        if self.w_acc < 0 or self.w_fmt < 0:
            raise GbaError("reward weights must be >= 0")
        if self.mode not in MODES:
            raise GbaError(f"mode must be one of {MODES}")
        if self.assignment not in ASSIGNMENTS:
            raise GbaError(f"assignment must be one of {ASSIGNMENTS}")
        if self.assignment == "stratified_within_group" and self.group_size % len(PARADIGMS):
            raise GbaError("stratified_within_group needs group_size divisible by 4")

    def to_dict(self) -> dict:
        return asdict(self)


def parse_completion(y, vocab: Vocab) -> tuple[bool, int | None]:
    """(format_valid, label token) for ``reasoning+ ANSWER label``."""
    y = list(y)
    if y.count(vocab.answer) != 1 or len(y) < 3:
        return False, None
    if y[-2] != vocab.answer or vocab.label_index(y[-1]) is None:
        return False, None
    if any(vocab.label_index(t) is not None for t in y[:-2]):
        return False, None
    return True, y[-1]


def reward(p: GuidelinePrompt | None, y, task: ClinicTask, cfg: GbaConfig | None = None, vocab: Vocab | None = None) -> float:
    cfg = cfg or GbaConfig()
    vocab = vocab or task_vocab(task)
    valid, label = parse_completion(y, vocab)
    if not valid:
        return 0.0
    return cfg.w_fmt + (cfg.w_acc if label == task.gold_token else 0.0)


def group_advantages(rewards, eps_std: float = 1e-8) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise GbaError("a group needs at least two rewards")
    mu = math.fsum(r) / r.size
    sigma = math.sqrt(math.fsum((r - mu) ** 2) / r.size)
    return (r - mu) / (sigma + eps_std)


@dataclass
class TrajectoryGroup:
    prompts: list[tuple[int, ...]]
    trajectories: list[list[int]]
    rewards: np.ndarray
    advantages: np.ndarray
    mu: float = 0.0
    sigma: float = 0.0
    old_logprobs: list[np.ndarray] | None = None
    ref_logprobs: list[np.ndarray] | None = None

    @classmethod
    def build(cls, prompts, trajectories, rewards, eps_std: float = 1e-8) -> TrajectoryGroup:
        if len(prompts) == 1:
            prompts = list(prompts) * len(trajectories)
        r = np.asarray(rewards, dtype=np.float64)
        adv = group_advantages(r, eps_std)
        mu = math.fsum(r) / r.size
        sigma = math.sqrt(math.fsum((r - mu) ** 2) / r.size)
        return cls([tuple(p) for p in prompts], [list(y) for y in trajectories], r, adv, mu, sigma)

    def __len__(self) -> int:
        return len(self.trajectories)


def _pack(groups: list[TrajectoryGroup]):
    rows, plen, ylen, adv, gsize = [], [], [], [], []
    for g in groups:
        for p, y, a in zip(g.prompts, g.trajectories, g.advantages):
            if not y:
                raise GbaError("empty trajectory")
            rows.append(list(p) + list(y))
            plen.append(len(p))
            ylen.append(len(y))
            adv.append(a)
            gsize.append(len(g))
    T = max(map(len, rows))
    seqs = np.zeros((len(rows), T), dtype=np.int64)
    for i, r in enumerate(rows):
        seqs[i, : len(r)] = r
    return seqs, np.array(plen), np.array(ylen), np.array(adv, dtype=np.float64), np.array(gsize)


def _gather(seqs, plen, ylen):
    """Indices (row, predicting position, target token) for every generated token."""
    rows, pos, tgt, tok_row = [], [], [], []
    for i in range(seqs.shape[0]):
        for t in range(ylen[i]):
            rows.append(i)
            pos.append(plen[i] + t - 1)
            tgt.append(seqs[i, plen[i] + t])
    return np.array(rows), np.array(pos), np.array(tgt)


def gba_objective(
    model: ToyTransformer,
    groups: list[TrajectoryGroup],
    theta,
    theta_ref=None,
    cfg: GbaConfig | None = None,
    with_grad: bool = True,
) -> tuple[float, NamedTensorMap | None, dict]:
    """Objective (to maximise), its gradient w.r.t. ``theta`` and diagnostics."""
    cfg = cfg or GbaConfig()
    if not groups:
        raise GbaError("no trajectory groups")
    if cfg.mode == "clipped_kl":
        if theta_ref is None:
            raise GbaError("clipped_kl mode requires a reference policy")
        if any(g.old_logprobs is None for g in groups):
            raise GbaError("clipped_kl mode requires stored old-policy log-probs")
    seqs, plen, ylen, adv, gsize = _pack(groups)
    rows, pos, tgt = _gather(seqs, plen, ylen)
    n_groups = len(groups)
    # weight per generated token: 1 / (|y_i| * G * n_groups)
    wtok = 1.0 / (ylen[rows] * gsize[rows] * n_groups)

    trace = model.forward(theta, seqs, cache=with_grad)
    logp_all = log_softmax(trace.logits)
    logp_pos = logp_all[rows, pos]  # (N, V)
    lp = logp_pos[np.arange(len(tgt)), tgt]
    probs = np.exp(logp_pos)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(tgt)), tgt] = 1.0
    A = adv[rows]
    info = {}

    if cfg.mode == "paper_reinforce":
        J = math.fsum(wtok * A * lp)
        coef = wtok * A
        dz_pos = coef[:, None] * (onehot - probs)
    else:
        old = np.concatenate([np.asarray(g.old_logprobs[i], dtype=np.float64) for g in groups for i in range(len(g))])
        ratio = np.exp(lp - old)
        clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
        s1, s2 = ratio * A, clipped * A
        surr = np.minimum(s1, s2)
        active = s1 <= s2
        ref_logits = model.forward(theta_ref, seqs).logits
        logq_pos = log_softmax(ref_logits)[rows, pos]
        kl = np.sum(probs * (logp_pos - logq_pos), axis=-1)
        J = math.fsum(wtok * (surr - cfg.kl_beta * kl))
        dsurr_dlp = np.where(active, ratio * A, 0.0)
        dz_pos = (wtok * dsurr_dlp)[:, None] * (onehot - probs)
        dz_pos -= (wtok * cfg.kl_beta)[:, None] * probs * (logp_pos - logq_pos - kl[:, None])
        info["kl"] = float(np.mean(kl))
        info["clip_frac"] = float(np.mean(~active))
    info["logprob"] = lp

    grads = None
    if with_grad:
        dlogits = np.zeros_like(trace.logits)
        np.add.at(dlogits, (rows, pos), dz_pos)
        grads = model.backward(trace, dlogits, lora_only=False)
    return J, grads, info


def kl_penalty(model: ToyTransformer, theta, theta_ref, seqs, plen, ylen) -> tuple[float, NamedTensorMap]:
    """Mean exact per-token KL(pi_theta || pi_ref) along given sequences, with gradient."""
    seqs = np.asarray(seqs)
    rows, pos, _ = _gather(seqs, np.asarray(plen), np.asarray(ylen))
    trace = model.forward(theta, seqs, cache=True)
    logp = log_softmax(trace.logits)[rows, pos]
    logq = log_softmax(model.forward(theta_ref, seqs).logits)[rows, pos]
    p = np.exp(logp)
    kl = np.sum(p * (logp - logq), axis=-1)
    n = len(kl)
    dz = p * (logp - logq - kl[:, None]) / n
    dlogits = np.zeros_like(trace.logits)
    np.add.at(dlogits, (rows, pos), dz)
    return float(math.fsum(kl) / n), model.backward(trace, dlogits, lora_only=False)


def mean_kl(model: ToyTransformer, theta, theta_ref, tasks, vocab: Vocab, max_new: int = 32) -> float:
    """Exact per-token KL to the reference along greedy completions of ``theta``."""
    prompts = [build_guideline_prompt(t, t.paradigm, vocab).tokens for t in tasks]
    outs = model.sample_batch(theta, prompts, max_new, greedy=True, stop_token=vocab.answer)
    seqs, plen, ylen = _pad(prompts, outs)
    value, _ = kl_penalty(model, theta, theta_ref, seqs, plen, ylen)
    return value


def _pad(prompts, outs):
    rows = [list(p) + list(y) for p, y in zip(prompts, outs)]
    T = max(map(len, rows))
    seqs = np.zeros((len(rows), T), dtype=np.int64)
    for i, r in enumerate(rows):
        seqs[i, : len(r)] = r
    return seqs, np.array([len(p) for p in prompts]), np.array([len(y) for y in outs])


@dataclass
class GbaLog:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration", "mean_reward", "kl", "format_rate"])
        for r in self.rows:
            writer.writerow([r["iteration"], repr(r["mean_reward"]), repr(r["kl"]), repr(r["format_rate"])])
        return buf.getvalue()


def rollout_groups(
    model: ToyTransformer,
    theta,
    tasks: list[ClinicTask],
    cfg: GbaConfig,
    rng: SeededRng,
    vocab: Vocab,
) -> list[TrajectoryGroup]:
    G = cfg.group_size
    all_prompts = []
    for task in tasks:
        if not cfg.guidelines:
            prompts = [plain_prompt(task).tokens] * G
        elif cfg.assignment == "per_group_uniform":
            paradigm = PARADIGMS[int(rng.integers(0, len(PARADIGMS)))]
            prompts = [build_guideline_prompt(task, paradigm, vocab).tokens] * G
        else:
            per = G // len(PARADIGMS)
            prompts = [build_guideline_prompt(task, par, vocab).tokens for par in PARADIGMS for _ in range(per)]
        all_prompts.append(prompts)
    flat = [p for ps in all_prompts for p in ps]
    outs = model.sample_batch(theta, flat, cfg.max_new, cfg.temperature, rng, stop_token=vocab.answer)
    groups = []
    for j, task in enumerate(tasks):
        ys = outs[j * G : (j + 1) * G]
        rs = [reward(None, y, task, cfg, vocab) for y in ys]
        groups.append(TrajectoryGroup.build(all_prompts[j], ys, rs, cfg.eps_std))
    return groups


def attach_old_logprobs(model: ToyTransformer, theta, groups: list[TrajectoryGroup]) -> None:
    seqs, plen, ylen, _, _ = _pack(groups)
    rows, pos, tgt = _gather(seqs, plen, ylen)
    lp = log_softmax(model.forward(theta, seqs).logits)[rows, pos, tgt]
    k = 0
    for g in groups:
        g.old_logprobs = []
        for y in g.trajectories:
            g.old_logprobs.append(lp[k : k + len(y)])
            k += len(y)


def train_gba(
    model: ToyTransformer,
    theta_init: NamedTensorMap,
    dataset: StratifiedDataset,
    cfg: GbaConfig,
    theta_ref: NamedTensorMap | None = None,
    history: GbaLog | None = None,
) -> NamedTensorMap:
    """Run ``cfg.iterations`` GBA updates from ``theta_init``; the reference is fixed."""
    theta_ref = theta_init if theta_ref is None else theta_ref
    train = dataset.subset(split="train")
    if not train:
        raise GbaError("dataset has no train split")
    eval_ids = {t.id for t in dataset.subset(split="eval")}
    if eval_ids & {t.id for t in train}:
        raise GbaError("eval split overlaps train split")
    vocab = dataset.vocab
    rng = SeededRng(cfg.seed)
    opt = Adam(cfg.learning_rate)
    theta = theta_init
    history = history if history is not None else GbaLog()
    zero_streak = 0
    for it in range(cfg.iterations):
        idx = rng.integers(0, len(train), size=cfg.queries_per_iter)
        tasks = [train[int(i)] for i in idx]
        groups = rollout_groups(model, theta, tasks, cfg, rng, vocab)
        if cfg.mode == "clipped_kl":
            attach_old_logprobs(model, theta, groups)
        J, grads, info = gba_objective(model, groups, theta, theta_ref, cfg)
        theta = apply_update(theta, opt.step(theta, grads, ascent=True))

        rewards = np.concatenate([g.rewards for g in groups])
        fmt = float(np.mean([parse_completion(y, vocab)[0] for g in groups for y in g.trajectories]))
        row = {
            "iteration": it,
            "mean_reward": float(np.mean(rewards)),
            "kl": info.get("kl", 0.0),
            "format_rate": fmt,
        }
        history.rows.append(row)
        if it % 50 == 0:
            log.info("gba it=%d reward=%.4f kl=%.5f fmt=%.3f", it, row["mean_reward"], row["kl"], fmt)
        zero_streak = zero_streak + 1 if row["mean_reward"] == 0.0 else 0
        if zero_streak >= cfg.collapse_patience:
            raise RewardCollapse(
                f"mean reward was 0 for {zero_streak} consecutive iterations (last iteration {it})"
            )
    return theta
