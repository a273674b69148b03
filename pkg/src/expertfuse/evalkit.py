"""Per-domain accuracy evaluation, ablation matrices and report rendering."""

from __future__ import annotations

import csv
import io
import logging
import math
from collections.abc import Callable, Iterable, Mapping
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal

from .clinicsim import DOMAINS, ClinicTask, StratifiedDataset, Vocab, infer_vocab
from .gba import GbaConfig, build_guideline_prompt, parse_completion, plain_prompt, reward
from .toy_policy import ToyTransformer

log = logging.getLogger(__name__)

COLUMNS = ("config", "seed", "AM", "CAH", "BS", "CSI", "overall", "mean_reward")


class EvalError(ValueError):
    pass


class SplitContamination(EvalError):
    pass


@dataclass(frozen=True)
class EvalReport:
    per_domain: dict[str, float]
    counts: dict[str, int]
    overall: float
    mean_reward: float
    format_rate: float
    model_fingerprint: int = 0
    dataset_fingerprint: int = 0
    seed: int | None = None
    config: str = ""

    def consistent(self, tol: float = 1e-12) -> bool:
        if not self.per_domain:
            return True
        n = sum(self.counts[d] for d in self.per_domain)
        weighted = math.fsum(self.per_domain[d] * self.counts[d] for d in self.per_domain) / n
        return abs(weighted - self.overall) <= tol

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model_fingerprint"] = f"{self.model_fingerprint:016x}"
        d["dataset_fingerprint"] = f"{self.dataset_fingerprint:016x}"
        return d


Decoder = Callable[[list[ClinicTask]], list[list[int]]]


def policy_decoder(
    model: ToyTransformer, theta, vocab: Vocab, max_new: int = 32, batch: int = 400, guidelines: bool = True
) -> Decoder:
    """Greedy decoding from each task's own guideline prompt (or the bare context)."""

    def decode(tasks: list[ClinicTask]) -> list[list[int]]:
        out: list[list[int]] = []
        for i in range(0, len(tasks), batch):
            chunk = tasks[i : i + batch]
            if guidelines:
                prompts = [build_guideline_prompt(t, t.paradigm, vocab).tokens for t in chunk]
            else:
                prompts = [plain_prompt(t).tokens for t in chunk]
            out.extend(model.sample_batch(theta, prompts, max_new, greedy=True, stop_token=vocab.answer))
        return out

    return decode


def rule_oracle_decoder(rules: Mapping, vocab: Vocab) -> Decoder:
    """Decoder that answers with the noiseless rule-table label (the Bayes-optimal guess)."""

    def decode(tasks):
        return [
            [vocab.paradigm_token(t.paradigm), vocab.answer, vocab.labels[rules[t.domain].label_for(t.context)]]
            for t in tasks
        ]

    return decode


def evaluate(
    model: ToyTransformer | None,
    theta,
    dataset: StratifiedDataset,
    split: str = "eval",
    *,
    decoder: Decoder | None = None,
    trained_on: Iterable[int] = (),
    gba_cfg: GbaConfig | None = None,
    seed: int | None = None,
    config: str = "",
    max_new: int = 32,
) -> EvalReport:
    """Greedy-decode every task of ``split`` and score label accuracy and reward.

    ``trained_on`` holds fingerprints of datasets used to train ``theta``;
    evaluating on a split with one of those fingerprints is refused.
    ``gba_cfg`` supplies the reward weights and, via ``guidelines``, the prompt style.
    """
    tasks = dataset.subset(split=split)
    if not tasks:
        raise EvalError(f"dataset has no {split!r} tasks")
    split_fp = StratifiedDataset(tuple(tasks), dataset.vocab).fingerprint
    if split_fp in set(trained_on):
        raise SplitContamination(f"{split} split {split_fp:016x} was used for training")
    vocab = dataset.vocab or infer_vocab(tasks)
    cfg = gba_cfg or GbaConfig()
    if decoder is None:
        if model is None:
            raise EvalError("evaluate needs a model or a decoder")
        decoder = policy_decoder(model, theta, vocab, max_new, guidelines=cfg.guidelines)
    outs = decoder(tasks)
    correct = {d: 0 for d in DOMAINS}
    counts = {d: 0 for d in DOMAINS}
    rewards, valid = [], 0
    for t, y in zip(tasks, outs):
        ok, label = parse_completion(y, vocab)
        valid += ok
        counts[t.domain] += 1
        correct[t.domain] += int(ok and label == t.gold_token)
        rewards.append(reward(None, y, t, cfg, vocab))
    present = [d for d in DOMAINS if counts[d]]
    per_domain = {d: correct[d] / counts[d] for d in present}
    return EvalReport(
        per_domain=per_domain,
        counts={d: counts[d] for d in present},
        overall=sum(correct.values()) / len(tasks),
        mean_reward=math.fsum(rewards) / len(rewards),
        format_rate=valid / len(tasks),
        model_fingerprint=getattr(theta, "fingerprint", 0) or 0,
        dataset_fingerprint=dataset.fingerprint,
        seed=seed,
        config=config,
    )


# --------------------------------------------------------------------- ablation
@dataclass
class AblationTable:
    rows: list[EvalReport] = field(default_factory=list)
    failures: dict[tuple[str, int], str] = field(default_factory=dict)

    def means(self) -> list[EvalReport]:
        order = list(dict.fromkeys(r.config for r in self.rows))
        out = []
        for name in order:
            rs = [r for r in self.rows if r.config == name]
            doms = [d for d in DOMAINS if all(d in r.per_domain for r in rs)]
            out.append(
                EvalReport(
                    per_domain={d: math.fsum(r.per_domain[d] for r in rs) / len(rs) for d in doms},
                    counts=dict(rs[0].counts),
                    overall=math.fsum(r.overall for r in rs) / len(rs),
                    mean_reward=math.fsum(r.mean_reward for r in rs) / len(rs),
                    format_rate=math.fsum(r.format_rate for r in rs) / len(rs),
                    seed=None,
                    config=name,
                )
            )
        return out


def run_ablation(
    configs: Iterable[str],
    seeds: Iterable[int],
    cell: Callable[[str, int], EvalReport],
) -> AblationTable:
    """Evaluate every (config, seed) cell; a failing cell is recorded and skipped."""
    table = AblationTable()
    for name in configs:
        for seed in seeds:
            try:
                rep = cell(name, seed)
            except Exception as exc:  # noqa: BLE001 - a cell failure must not abort the matrix
                log.error("ablation cell %s/seed=%s failed: %s", name, seed, exc)
                table.failures[(name, seed)] = f"{type(exc).__name__}: {exc}"
                continue
            if rep.config != name or rep.seed != seed:
                rep = EvalReport(**{**asdict(rep), "config": name, "seed": seed})
            table.rows.append(rep)
    return table


# ---------------------------------------------------------------------- render
def fmt2(x: float | None) -> str:
    """Two decimals, round-half-even on the shortest decimal repr."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "-"
    return str(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


def _row_cells(r: EvalReport) -> list[str]:
    seed = "mean" if r.seed is None else str(r.seed)
    cells = [r.config, seed]
    cells += [fmt2(100 * r.per_domain[d]) if d in r.per_domain else "-" for d in DOMAINS]
    cells += [fmt2(100 * r.overall), fmt2(r.mean_reward)]
    return cells


def emit_report(reports: list[EvalReport], format: str = "markdown_table") -> str:
    if not reports:
        raise EvalError("no reports to emit")
    rows = [_row_cells(r) for r in reports]
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(COLUMNS)
        w.writerows(rows)
        return buf.getvalue()
    if format == "markdown_table":
        lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "|".join("---" for _ in COLUMNS) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    raise EvalError(f"unknown report format {format!r}")
