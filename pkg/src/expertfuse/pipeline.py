"""End-to-end orchestration: data → per-domain experts → merge → RL → merge → eval.

Every stage writes its artifact under ``out`` with a manifest whose
``extra["stage_digest"]`` is a digest of the stage's configuration and the
fingerprints of its inputs. With ``resume_from`` set, an existing artifact
whose digest matches is loaded instead of recomputed.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint_store import Manifest, config_digest, read_archive, write_archive
from .clinicsim import DOMAINS, StratifiedDataset, export_jsonl, generate, import_jsonl
from .dsa import SftConfig, train_domain_expert
from .evalkit import EvalReport, evaluate
from .gba import GbaConfig, GbaLog, train_gba
from .merge import MergeConfig, merge_models
from .tensor_core import NamedTensorMap, SeededRng
from .toy_policy import PolicyConfig, ToyTransformer

log = logging.getLogger(__name__)

SCHEDULES = ("ours", "dsa_gba", "mixed_sft_gba")


class PipelineError(RuntimeError):
    """A stage failed; carries the stage name and the artifact it was producing."""

    def __init__(self, stage: str, path: str | os.PathLike, cause: BaseException):
        self.stage, self.path, self.cause = stage, str(path), cause
        super().__init__(f"stage {stage} failed ({path}): {type(cause).__name__}: {cause}")


@dataclass(frozen=True)
class DataConfig:
    per_domain_count: int = 700
    vocab_size_per_domain: int = 12
    context_len: int = 5
    noise_rate: float = 0.05


@dataclass(frozen=True)
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    policy: PolicyConfig | None = None  # vocab_size is filled in from the dataset
    sft: SftConfig = field(default_factory=SftConfig)
    gba: GbaConfig = field(default_factory=GbaConfig)
    merge_dsa: MergeConfig = field(default_factory=MergeConfig)
    merge_final: MergeConfig = field(default_factory=MergeConfig)
    schedule: str = "ours"
    out: str = "run"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")

    # stage seeds are derived from the global seed so one number fixes the run
    def stage_seed(self, stage: int) -> int:
        return SeededRng(self.seed).spawn(stage).seed

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sft"] = self.sft.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        d = dict(d)
        kinds = {"data": DataConfig, "sft": SftConfig, "gba": GbaConfig, "merge_dsa": MergeConfig,
                 "merge_final": MergeConfig, "policy": PolicyConfig}
        for key, kind in kinds.items():
            if isinstance(d.get(key), dict):
                sub = dict(d[key])
                if key == "sft" and sub.get("targets") is not None:
                    sub["targets"] = tuple(sub["targets"])
                d[key] = kind(**sub)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike, overrides: dict | None = None) -> PipelineConfig:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls.from_dict(deep_update(d, overrides or {}))


def deep_update(d: dict, overrides: dict) -> dict:
    out = dict(d)
    for k, v in overrides.items():
        out[k] = deep_update(out.get(k) or {}, v) if isinstance(v, dict) else v
    return out


def parse_override(text: str) -> dict:
    """``"gba.iterations=100"`` → ``{"gba": {"iterations": 100}}`` (value parsed as JSON when possible)."""
    key, sep, raw = text.partition("=")
    if not sep:
        raise ValueError(f"override {text!r} is not key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    for part in reversed(key.split(".")):
        value = {part: value}
    return value


@dataclass
class PipelineResult:
    out: Path
    report: EvalReport
    final: NamedTensorMap
    artifacts: dict[str, str]
    skipped: list[str]


def _fp(x: int) -> str:
    return f"{x:016x}"


class _Run:
    """Stage bookkeeping shared by :func:`run_pipeline`."""

    def __init__(self, out: Path, resume_from: Path | None):
        self.out = out
        self.policy: dict = {}
        self.resume_from = resume_from
        self.artifacts: dict[str, str] = {}
        self.skipped: list[str] = []
        self.provenance: dict[str, dict] = {}

    def checkpoint(self, stage, name, digest, inputs, build):
        """Load ``name`` from the resume directory if its digest matches, else build and write it."""
        path = self.out / name
        if self.resume_from is not None:
            cached = self.resume_from / name
            if cached.exists():
                try:
                    tensors, manifest = read_archive(cached)
                except Exception as exc:  # noqa: BLE001 - unreadable cache means rebuild
                    log.warning("ignoring unreadable %s: %s", cached, exc)
                else:
                    if manifest.extra.get("stage_digest") == _fp(digest):
                        if cached.resolve() != path.resolve():
                            shutil.copyfile(cached, path)
                        self.skipped.append(name)
                        self._record(stage, name, tensors, inputs)
                        log.info("stage %s: reusing %s", stage, cached)
                        return tensors, manifest
        try:
            tensors, manifest = build()
            manifest = dataclasses.replace(
                manifest, extra={**manifest.extra, "policy": self.policy, "stage": stage, "stage_digest": _fp(digest),
                       "inputs": inputs}
            )
            write_archive(tensors, manifest, path)
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(stage, path, exc) from exc
        self._record(stage, name, tensors, inputs)
        return tensors, manifest

    def _record(self, stage, name, tensors, inputs):
        self.artifacts[name] = _fp(tensors.fingerprint)
        self.provenance[name] = {"stage": stage, "fingerprint": _fp(tensors.fingerprint), "inputs": inputs}


def _train_fp(ds: StratifiedDataset) -> int:
    return StratifiedDataset(tuple(ds.subset(split="train")), ds.vocab).fingerprint


def run_pipeline(cfg: PipelineConfig, resume_from: str | os.PathLike | None = None) -> PipelineResult:
    """Run the configured schedule and return the final evaluation.

    ``ours``: experts → TIES → RL → TIES(experts + RL).
    ``dsa_gba``: experts → TIES → RL (single merge).
    ``mixed_sft_gba``: one pooled-data adapter → RL.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(out, Path(resume_from) if resume_from is not None else None)

    # -- gen
    data_path = out / "data.jsonl"
    try:
        ds = generate(cfg.stage_seed(0), **dataclasses.asdict(cfg.data))
        export_jsonl(ds, data_path)
    except Exception as exc:
        raise PipelineError("gen", data_path, exc) from exc
    run.artifacts["data.jsonl"] = _fp(ds.fingerprint)
    run.provenance["data.jsonl"] = {"stage": "gen", "fingerprint": _fp(ds.fingerprint), "inputs": {}}
    vocab = ds.vocab
    data_fp = _fp(ds.fingerprint)

    pcfg = cfg.policy or PolicyConfig(vocab_size=vocab.size)
    if pcfg.vocab_size < vocab.size:
        raise PipelineError("base", out / "base.xfus", ValueError("policy vocab smaller than dataset vocab"))
    model = ToyTransformer(pcfg)
    run.policy = pcfg.to_dict()
    base_seed = cfg.stage_seed(1)

    base, _ = run.checkpoint(
        "base", "base.xfus", config_digest(["base", pcfg.to_dict(), base_seed]), {},
        lambda: (model.init_base(base_seed), Manifest("base", training_config_digest=config_digest(pcfg.to_dict()))),
    )
    base_fp = _fp(base.fingerprint)
    sft = dataclasses.replace(cfg.sft, seed=cfg.stage_seed(2))
    by_domain = ds.by_domain("train")

    # -- dsa
    def expert_stage(domain, tasks, pooled):
        name = "mixed_sft.xfus" if pooled else f"expert_{domain}.xfus"
        inputs = {"base": base_fp, "data": data_fp}
        digest = config_digest(["dsa", name, sft.to_dict(), inputs])

        def build():
            adapter = train_domain_expert(model, base, tasks, sft, vocab, domain, pooled=pooled)
            extra = {"lora_rank": sft.rank, "lora_alpha": sft.alpha, "epoch_loss": adapter.meta["epoch_loss"]}
            if pooled:
                extra["method"] = "pooled_sft"
                man = Manifest("merged", None, base.fingerprint, config_digest(sft.to_dict()), extra)
            else:
                man = Manifest("dsa_expert", domain, base.fingerprint, config_digest(sft.to_dict()), extra)
            return adapter.materialize(base), man

        return run.checkpoint("dsa", name, digest, inputs, build)[0]

    if cfg.schedule == "mixed_sft_gba":
        pooled = [t for d in DOMAINS for t in by_domain.get(d, [])]
        experts = {}
        gba_init = expert_stage(None, pooled, pooled=True)
        init_name = "mixed_sft.xfus"
    else:
        experts = {d: expert_stage(d, by_domain[d], pooled=False) for d in DOMAINS if by_domain.get(d)}
        gba_init = _merge_stage(run, "merge_dsa", "merged_dsa", base, experts, cfg.merge_dsa)
        init_name = "merged_dsa.xfus"

    # -- gba
    gcfg = dataclasses.replace(cfg.gba, seed=cfg.stage_seed(3))
    gba_log = GbaLog()
    gba_inputs = {"init": _fp(gba_init.fingerprint), "data": data_fp}

    def build_rl():
        rl = train_gba(model, gba_init, ds, gcfg, history=gba_log)
        man = Manifest("rl_expert", None, base.fingerprint, config_digest(gcfg.to_dict()), {"init": init_name})
        return rl, man

    rl, _ = run.checkpoint("gba", "rl.xfus", config_digest(["gba", gcfg.to_dict(), gba_inputs]), gba_inputs, build_rl)
    if gba_log.rows:
        (out / "gba_log.csv").write_text(gba_log.to_csv(), encoding="utf-8")
    elif run.resume_from is not None and (run.resume_from / "gba_log.csv").exists():
        if (run.resume_from / "gba_log.csv").resolve() != (out / "gba_log.csv").resolve():
            shutil.copyfile(run.resume_from / "gba_log.csv", out / "gba_log.csv")

    # -- final merge
    if cfg.schedule == "ours":
        final = _merge_stage(run, "merge_final", "final", base, {**experts, "RL": rl}, cfg.merge_final)
    else:
        final = rl
        shutil.copyfile(out / "rl.xfus", out / "final.xfus")
        run.artifacts["final.xfus"] = run.artifacts["rl.xfus"]

    # -- eval
    try:
        report = evaluate(
            model, final, ds, trained_on=[_train_fp(ds)], gba_cfg=gcfg, seed=cfg.seed, config=cfg.schedule
        )
    except Exception as exc:
        raise PipelineError("eval", out / "eval_report.json", exc) from exc
    _write_json(out / "eval_report.json", report.to_dict())
    _write_json(out / "provenance.json", {"config": cfg.to_dict(), "artifacts": run.provenance})
    return PipelineResult(out, report, final, run.artifacts, run.skipped)


def _merge_stage(run: _Run, stage, stem, base, experts, mcfg: MergeConfig) -> NamedTensorMap:
    inputs = {"base": _fp(base.fingerprint), **{r: _fp(m.fingerprint) for r, m in experts.items()}}
    digest = config_digest([stage, mcfg.to_dict(), inputs])
    box = {}

    def build():
        res = merge_models(base, experts, mcfg)
        box["report"] = res.report
        return res.params, res.manifest

    merged, _ = run.checkpoint(stage, f"{stem}.xfus", digest, inputs, build)
    if "report" in box:
        _write_json(run.out / f"{stem}_report.json", box["report"])
    return merged


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_dataset(path: str | os.PathLike) -> StratifiedDataset:
    return import_jsonl(path)


def policy_config_for(params: NamedTensorMap, manifest: Manifest | None = None, n_heads: int = 2) -> PolicyConfig:
    """Recover the architecture of a checkpoint.

    Head count is not visible in tensor shapes, so the manifest's recorded
    ``policy`` entry wins; otherwise ``n_heads`` is assumed.
    """
    if manifest is not None and manifest.extra.get("policy"):
        return PolicyConfig(**manifest.extra["policy"])
    V, d = params["tok_emb"].shape
    n_layers = len({k.split(".")[1] for k in params if k.startswith("layers.")})
    ff = params["layers.0.mlp.up.weight"].shape[0] // d
    return PolicyConfig(V, params["pos_emb"].shape[0], d, n_layers, n_heads, ff)


# ------------------------------------------------------------------- ablation
ABLATION_CONFIGS = (
    "Base", "AM", "CAH", "BS", "CSI", "Mixed SFT", "GRPO", "GBA",
    "Mixed SFT+GBA", "DSA+GBA", "Ours", "Ours/TaskArithmetic", "Ours/SLERP", "Ours/NaiveAverage",
)
_FINAL_VARIANTS = {
    "Ours": "ties",
    "Ours/TaskArithmetic": "task_arithmetic",
    "Ours/SLERP": "slerp",
    "Ours/NaiveAverage": "naive_average",
}


class _SeedContext:
    """In-memory stage cache so ablation cells sharing a seed share their prefixes."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.ds = generate(cfg.stage_seed(0), **dataclasses.asdict(cfg.data))
        self.model = ToyTransformer(cfg.policy or PolicyConfig(vocab_size=self.ds.vocab.size))
        self.base = self.model.init_base(cfg.stage_seed(1))
        self.sft = dataclasses.replace(cfg.sft, seed=cfg.stage_seed(2))
        self.gcfg = dataclasses.replace(cfg.gba, seed=cfg.stage_seed(3))
        self._memo: dict = {}

    def _cached(self, key, fn):
        if key not in self._memo:
            self._memo[key] = fn()
        return self._memo[key]

    def expert(self, domain):
        tasks = self.ds.by_domain("train")[domain]
        return self._cached(("expert", domain), lambda: train_domain_expert(
            self.model, self.base, tasks, self.sft, self.ds.vocab, domain).materialize(self.base))

    def experts(self):
        return {d: self.expert(d) for d in DOMAINS}

    def mixed(self):
        tasks = list(self.ds.subset(split="train"))
        return self._cached("mixed", lambda: train_domain_expert(
            self.model, self.base, tasks, self.sft, self.ds.vocab, None, pooled=True).materialize(self.base))

    def merged_dsa(self):
        return self._cached("merged_dsa", lambda: merge_models(self.base, self.experts(), self.cfg.merge_dsa).params)

    def rl(self, init: str, guidelines: bool = True):
        inits = {"base": lambda: self.base, "mixed": self.mixed, "merged_dsa": self.merged_dsa}
        gcfg = dataclasses.replace(self.gcfg, guidelines=guidelines)
        return self._cached(("rl", init, guidelines), lambda: train_gba(self.model, inits[init](), self.ds, gcfg))

    def final(self, method: str):
        mcfg = dataclasses.replace(self.cfg.merge_final, method=method)
        return self._cached(("final", method), lambda: merge_models(
            self.base, {**self.experts(), "RL": self.rl("merged_dsa")}, mcfg).params)

    def evaluate(self, theta, name: str, guidelines: bool = True) -> EvalReport:
        gcfg = dataclasses.replace(self.gcfg, guidelines=guidelines)
        return evaluate(self.model, theta, self.ds, trained_on=[_train_fp(self.ds)], gba_cfg=gcfg,
                        seed=self.cfg.seed, config=name)

    def cell(self, name: str) -> EvalReport:
        if name == "Base":
            return self.evaluate(self.base, name)
        if name in DOMAINS:
            return self.evaluate(self.expert(name), name)
        if name == "Mixed SFT":
            return self.evaluate(self.mixed(), name)
        if name == "GRPO":
            return self.evaluate(self.rl("base", guidelines=False), name, guidelines=False)
        if name == "GBA":
            return self.evaluate(self.rl("base"), name)
        if name == "Mixed SFT+GBA":
            return self.evaluate(self.rl("mixed"), name)
        if name == "DSA+GBA":
            return self.evaluate(self.rl("merged_dsa"), name)
        if name in _FINAL_VARIANTS:
            return self.evaluate(self.final(_FINAL_VARIANTS[name]), name)
        raise ValueError(f"unknown ablation config {name!r}")


def ablation_cells(cfg: PipelineConfig):
    """A ``cell(name, seed)`` callable for :func:`evalkit.run_ablation`."""
    contexts: dict[int, _SeedContext] = {}

    def cell(name: str, seed: int) -> EvalReport:
        if seed not in contexts:
            contexts[seed] = _SeedContext(dataclasses.replace(cfg, seed=seed))
        return contexts[seed].cell(name)

    return cell
