"""Synthetic multi-specialty diagnosis tasks.

Each domain owns a disjoint block of symptom tokens. A per-domain rule table
assigns every symptom a diagnosis label and a severity weight; the gold label
of a context is the label with the largest summed weight (ties broken by a
fixed per-domain label priority). Reasoning traces cite the symptoms that
support the rule label, ordered according to the task's reasoning paradigm.

Token layout for ``n_domains=4``, ``vocab_per_domain=V`` and ``C`` options::

    [0, V)            AM symptoms
    [V, 2V)           CAH symptoms
    [2V, 3V)          BS symptoms
    [3V, 4V)          CSI symptoms
    4V .. 4V+3        paradigm tokens (Differential, Intuitive, Analytical, Bayesian)
    4V+4              ANSWER marker
    4V+5 .. 4V+4+C    label tokens
"""

from __future__ import annotations

import itertools
import json
import os
from collections import Counter
from dataclasses import dataclass, field

from .tensor_core import SeededRng, fnv1a64

DOMAINS = ("AM", "CAH", "BS", "CSI")
PARADIGMS = ("Differential", "Intuitive", "Analytical", "Bayesian")
SPLITS = ("train", "eval")
FIELDS = ("id", "domain", "context", "options", "gold", "trace", "paradigm", "split")


class DatasetError(ValueError):
    pass


class MalformedLine(DatasetError):
    def __init__(self, lineno: int, reason: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {reason}")


@dataclass(frozen=True)
class Vocab:
    per_domain: int = 12
    n_options: int = 4

    @property
    def control_base(self) -> int:
        return len(DOMAINS) * self.per_domain

    @property
    def answer(self) -> int:
        return self.control_base + len(PARADIGMS)

    @property
    def labels(self) -> tuple[int, ...]:
        return tuple(range(self.answer + 1, self.answer + 1 + self.n_options))

    @property
    def size(self) -> int:
        return self.answer + 1 + self.n_options

    def paradigm_token(self, paradigm: str) -> int:
        return self.control_base + PARADIGMS.index(paradigm)

    def domain_tokens(self, domain: str) -> range:
        k = DOMAINS.index(domain)
        return range(k * self.per_domain, (k + 1) * self.per_domain)

    def domain_of(self, token: int) -> str | None:
        if 0 <= token < self.control_base:
            return DOMAINS[token // self.per_domain]
        return None

    def label_index(self, token: int) -> int | None:
        lo = self.answer + 1
        return token - lo if lo <= token < lo + self.n_options else None

    def is_control(self, token: int) -> bool:
        return token >= self.control_base


@dataclass(frozen=True)
class DomainRuleTable:
    domain: str
    token_label: dict[int, int]
    token_weight: dict[int, int]
    priority: tuple[int, ...]
    noise_rate: float = 0.0

    def scores(self, context) -> list[int]:
        totals = [0] * len(self.priority)
        for tok in context:
            if tok in self.token_label:
                totals[self.token_label[tok]] += self.token_weight[tok]
        return totals

    def label_for(self, context) -> int:
        totals = self.scores(context)
        best = max(totals)
        return min((lab for lab, s in enumerate(totals) if s == best), key=self.priority.index)

    def supporting(self, context, label: int) -> list[int]:
        return [t for t in context if self.token_label.get(t) == label]

    def table(self, context_len: int) -> dict[tuple[int, ...], int]:
        """Explicit pattern -> label map over every ``context_len``-multiset."""
        toks = sorted(self.token_label)
        return {
            combo: self.label_for(combo)
            for combo in itertools.combinations_with_replacement(toks, context_len)
        }


@dataclass(frozen=True)
class ClinicTask:
    id: str
    domain: str
    context: tuple[int, ...]
    options: tuple[int, ...]
    gold: int
    trace: tuple[int, ...]
    paradigm: str
    split: str = "train"

    def to_json(self) -> str:
        d = {
            "id": self.id,
            "domain": self.domain,
            "context": list(self.context),
            "options": list(self.options),
            "gold": self.gold,
            "trace": list(self.trace),
            "paradigm": self.paradigm,
            "split": self.split,
        }
        return json.dumps(d, separators=(",", ":"))

    @property
    def gold_token(self) -> int:
        return self.options[self.gold]


@dataclass(frozen=True)
class StratifiedDataset:
    tasks: tuple[ClinicTask, ...]
    vocab: Vocab = field(default_factory=Vocab)
    rules: dict[str, DomainRuleTable] | None = field(default=None, compare=False)

    def __post_init__(self):
        ids = [t.id for t in self.tasks]
        if len(set(ids)) != len(ids):
            dup = [k for k, n in Counter(ids).items() if n > 1]
            raise DatasetError(f"duplicate task ids: {dup[:5]}")

    def __len__(self) -> int:
        return len(self.tasks)

    def subset(self, domain: str | None = None, split: str | None = None) -> list[ClinicTask]:
        return [
            t
            for t in self.tasks
            if (domain is None or t.domain == domain) and (split is None or t.split == split)
        ]

    def by_domain(self, split: str | None = None) -> dict[str, list[ClinicTask]]:
        return {d: self.subset(d, split) for d in DOMAINS}

    def split(self, split: str) -> StratifiedDataset:
        return StratifiedDataset(tuple(self.subset(split=split)), self.vocab, self.rules)

    def to_jsonl(self) -> str:
        return "".join(t.to_json() + "\n" for t in self.tasks)

    @property
    def fingerprint(self) -> int:
        return fnv1a64(self.to_jsonl().encode("utf-8"))


def make_rule_table(domain: str, vocab: Vocab, rng: SeededRng, noise_rate: float) -> DomainRuleTable:
    toks = list(vocab.domain_tokens(domain))
    order = [toks[i] for i in rng.permutation(len(toks))]
    C = vocab.n_options
    token_label = {tok: i % C for i, tok in enumerate(order)}
    token_weight = {tok: 1 + i // C for i, tok in enumerate(order)}
    priority = tuple(int(x) for x in rng.permutation(C))
    return DomainRuleTable(domain, token_label, token_weight, priority, noise_rate)


def build_trace(rules: DomainRuleTable, vocab: Vocab, context, paradigm: str, gold_token: int) -> tuple[int, ...]:
    """Paradigm opener, cited symptoms, ANSWER, label."""
    support = rules.supporting(context, rules.label_for(context))
    if paradigm == "Differential":
        cited = support
    elif paradigm == "Intuitive":
        cited = [max(support, key=lambda t: (rules.token_weight[t], -t))]
    elif paradigm == "Analytical":
        cited = sorted(support)
    elif paradigm == "Bayesian":
        cited = sorted(support, key=lambda t: (rules.token_weight[t], t))
    else:
        raise DatasetError(f"unknown paradigm {paradigm!r}")
    return (vocab.paradigm_token(paradigm), *cited, vocab.answer, gold_token)


def generate(
    seed: int,
    per_domain_count: int = 700,
    vocab_size_per_domain: int = 12,
    context_len: int = 5,
    noise_rate: float = 0.05,
    *,
    n_options: int = 4,
    eval_count: int | None = None,
) -> StratifiedDataset:
    """Generate the four disjoint domain subsets.

    ``eval_count`` tasks per domain (default ``2/7`` of ``per_domain_count``,
    i.e. 200 of 700) are marked ``eval``; the rest are ``train``.
    """
    if per_domain_count < 1:
        raise DatasetError("per_domain_count must be >= 1")
    if not vocab_size_per_domain >= context_len >= 1:
        raise DatasetError("need vocab_size_per_domain >= context_len >= 1")
    if vocab_size_per_domain < n_options:
        raise DatasetError("each label needs at least one symptom token")
    if n_options < 2:
        raise DatasetError("n_options must be >= 2")
    if not 0.0 <= noise_rate <= 1.0:
        raise DatasetError("noise_rate must lie in [0, 1]")
    if eval_count is None:
        eval_count = per_domain_count * 2 // 7
    if not 0 <= eval_count <= per_domain_count:
        raise DatasetError("eval_count must lie in [0, per_domain_count]")

    vocab = Vocab(vocab_size_per_domain, n_options)
    root = SeededRng(seed)
    rules = {}
    tasks = []
    for k, domain in enumerate(DOMAINS):
        rng = root.spawn(0x9E3779B97F4A7C15 * (k + 1))
        table = make_rule_table(domain, vocab, rng, noise_rate)
        rules[domain] = table
        toks = list(vocab.domain_tokens(domain))
        for i in range(per_domain_count):
            context = tuple(int(toks[j]) for j in rng.integers(0, len(toks), size=context_len))
            gold = table.label_for(context)
            if rng.random() < noise_rate:
                gold = int(rng.integers(0, n_options))
            paradigm = PARADIGMS[int(rng.integers(0, len(PARADIGMS)))]
            split = "eval" if i >= per_domain_count - eval_count else "train"
            trace = build_trace(table, vocab, context, paradigm, vocab.labels[gold])
            tasks.append(
                ClinicTask(
                    id=f"{domain}-{i:05d}",
                    domain=domain,
                    context=context,
                    options=vocab.labels,
                    gold=gold,
                    trace=trace,
                    paradigm=paradigm,
                    split=split,
                )
            )
    return StratifiedDataset(tuple(tasks), vocab, rules)


def _parse_task(obj, lineno: int) -> ClinicTask:
    if not isinstance(obj, dict):
        raise MalformedLine(lineno, "expected a JSON object")
    missing = [f for f in FIELDS if f not in obj]
    if missing:
        raise MalformedLine(lineno, f"missing field(s) {missing}")
    extra = sorted(set(obj) - set(FIELDS))
    if extra:
        raise MalformedLine(lineno, f"unexpected field(s) {extra}")
    if obj["domain"] not in DOMAINS:
        raise MalformedLine(lineno, f"unknown domain {obj['domain']!r}")
    if obj["paradigm"] not in PARADIGMS:
        raise MalformedLine(lineno, f"unknown paradigm {obj['paradigm']!r}")
    if obj["split"] not in SPLITS:
        raise MalformedLine(lineno, f"unknown split {obj['split']!r}")
    try:
        task = ClinicTask(
            id=str(obj["id"]),
            domain=obj["domain"],
            context=tuple(int(x) for x in obj["context"]),
            options=tuple(int(x) for x in obj["options"]),
            gold=int(obj["gold"]),
            trace=tuple(int(x) for x in obj["trace"]),
            paradigm=obj["paradigm"],
            split=obj["split"],
        )
    except (TypeError, ValueError) as exc:
        raise MalformedLine(lineno, str(exc)) from exc
    if not 0 <= task.gold < len(task.options):
        raise MalformedLine(lineno, "gold index out of range")
    return task


def export_jsonl(ds: StratifiedDataset, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(ds.to_jsonl())


def import_jsonl(path: str | os.PathLike, vocab: Vocab | None = None) -> StratifiedDataset:
    tasks = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(lineno, f"invalid JSON ({exc.msg})") from exc
            tasks.append(_parse_task(obj, lineno))
    if vocab is None:
        vocab = infer_vocab(tasks)
    return StratifiedDataset(tuple(tasks), vocab)


def infer_vocab(tasks) -> Vocab:
    if not tasks:
        return Vocab()
    n_options = len(tasks[0].options)
    # labels sit at the top of the vocabulary: answer = 4V + 4
    answer = tasks[0].options[0] - 1
    per_domain = (answer - len(PARADIGMS)) // len(DOMAINS)
    return Vocab(per_domain, n_options)
