"""``expertfuse`` command line.

Every subcommand exits 0 on success. On failure it prints one JSON line,
``{"error": <kind>, "message": ..., ...}``, to stderr and exits 1; usage
errors exit 2 (argparse's convention).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .checkpoint_store import FORMAT_VERSION, Manifest, config_digest, read_archive, write_archive
from .clinicsim import DOMAINS, export_jsonl, generate, import_jsonl
from .dsa import SftConfig, train_domain_expert
from .evalkit import emit_report, evaluate, run_ablation
from .gba import MODES, GbaConfig, GbaLog, train_gba
from .merge import METHODS, MergeConfig, merge_models
from .pipeline import (
    ABLATION_CONFIGS,
    SCHEDULES,
    PipelineConfig,
    PipelineError,
    ablation_cells,
    deep_update,
    parse_override,
    policy_config_for,
    run_pipeline,
)
from .toy_policy import PolicyConfig, ToyTransformer

log = logging.getLogger("expertfuse")


def _load_model(path):
    params, manifest = read_archive(path)
    return ToyTransformer(policy_config_for(params, manifest)), params, manifest


def _with_policy(manifest: Manifest, model: ToyTransformer) -> Manifest:
    return dataclasses.replace(manifest, extra={**manifest.extra, "policy": model.config.to_dict()})


# ------------------------------------------------------------------ commands
def cmd_gen(a):
    ds = generate(a.seed, a.per_domain, a.vocab_per_domain, a.context_len, a.noise)
    export_jsonl(ds, a.out)
    return {"out": str(a.out), "tasks": len(ds.tasks), "fingerprint": f"{ds.fingerprint:016x}"}


def cmd_dsa(a):
    ds = import_jsonl(a.data)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    if a.base:
        model, base, _ = _load_model(a.base)
    else:
        model = ToyTransformer(PolicyConfig(vocab_size=ds.vocab.size))
        base = model.init_base(a.seed)
        write_archive(base, _with_policy(Manifest("base"), model), out / "base.xfus")
    cfg = SftConfig(
        learning_rate=a.lr, epochs=a.epochs, rank=a.rank, alpha=a.alpha, grad_accum_steps=a.accum, seed=a.seed
    )
    by_domain = ds.by_domain("train")
    written = {}
    for d in a.domain or DOMAINS:
        adapter = train_domain_expert(model, base, by_domain[d], cfg, ds.vocab, d)
        man = Manifest("dsa_expert", d, base.fingerprint, config_digest(cfg.to_dict()),
                       {"epoch_loss": adapter.meta["epoch_loss"]})
        path = out / f"expert_{d}.xfus"
        write_archive(adapter.materialize(base), _with_policy(man, model), path)
        written[d] = str(path)
    return {"experts": written}


def cmd_gba(a):
    ds = import_jsonl(a.data)
    model, init, man = _load_model(a.init)
    cfg = GbaConfig(mode=a.mode, iterations=a.iters, learning_rate=a.lr, seed=a.seed, guidelines=not a.no_guidelines,
                    kl_beta=a.beta, group_size=a.group_size)
    history = GbaLog()
    rl = train_gba(model, init, ds, cfg, history=history)
    out_man = Manifest("rl_expert", None, man.base_fingerprint, config_digest(cfg.to_dict()))
    write_archive(rl, _with_policy(out_man, model), a.out)
    log_path = Path(a.log) if a.log else Path(a.out).with_suffix(".log.csv")
    log_path.write_text(history.to_csv(), encoding="utf-8")
    last = history.rows[-1] if history.rows else {}
    return {"out": str(a.out), "log": str(log_path), "final_mean_reward": last.get("mean_reward")}


def cmd_merge(a):
    model, base, _ = _load_model(a.base)
    experts, recorded = {}, {}
    for spec in a.experts:
        role, sep, path = spec.partition("=")
        params, man = read_archive(path if sep else role)
        if not sep:  # role taken from the manifest
            role = man.domain if man.role == "dsa_expert" else "RL" if man.role == "rl_expert" else None
            if role is None:
                raise ValueError(f"{spec}: cannot infer role from manifest role {man.role!r}; use ROLE=PATH")
        experts[role] = params
        recorded[role] = man.base_fingerprint
    cfg = MergeConfig(method=a.method, density=a.density, eta=a.eta, ta_lambda=a.ta_lambda,
                      trim_scope=a.trim_scope)
    res = merge_models(base, experts, cfg, recorded_bases=recorded, strict=a.strict)
    write_archive(res.params, _with_policy(res.manifest, model), a.out)
    if a.report:
        Path(a.report).write_text(json.dumps(res.report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"out": str(a.out), "fingerprint": f"{res.params.fingerprint:016x}", "method": a.method}


def cmd_eval(a):
    ds = import_jsonl(a.data)
    model, theta, _ = _load_model(a.model)
    rep = evaluate(model, theta, ds, a.split, gba_cfg=GbaConfig(guidelines=not a.no_guidelines),
                   config=a.name or Path(a.model).stem)
    if a.format == "json":
        text = json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n"
    else:
        text = emit_report([rep], a.format)
    if a.out:
        Path(a.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return None


def _pipeline_config(a) -> PipelineConfig:
    d = {}
    if a.config:
        with open(a.config, encoding="utf-8") as fh:
            d = json.load(fh)
    for item in a.set or []:
        d = deep_update(d, parse_override(item))
    for key in ("seed", "schedule", "out"):
        if getattr(a, key, None) is not None:
            d[key] = getattr(a, key)
    return PipelineConfig.from_dict(d)


def cmd_pipeline(a):
    cfg = _pipeline_config(a)
    res = run_pipeline(cfg, resume_from=a.resume_from)
    return {
        "out": str(res.out),
        "overall": res.report.overall,
        "mean_reward": res.report.mean_reward,
        "per_domain": res.report.per_domain,
        "final_fingerprint": res.artifacts.get("final.xfus"),
        "reused": res.skipped,
    }


def cmd_ablate(a):
    d = {}
    names = list(ABLATION_CONFIGS)
    if a.config:
        with open(a.config, encoding="utf-8") as fh:
            d = json.load(fh)
        names = d.pop("configs", names)
    if a.configs:
        names = [n.strip() for n in a.configs.split(",")]
    for item in a.set or []:
        d = deep_update(d, parse_override(item))
    d.pop("out", None)
    cfg = PipelineConfig.from_dict(d)
    seeds = list(range(a.seed, a.seed + a.seeds))
    table = run_ablation(names, seeds, ablation_cells(cfg))
    reports = table.rows + table.means()
    text = emit_report(reports, a.format) if reports else ""
    if a.out:
        Path(a.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    failures = {f"{n}/seed={s}": msg for (n, s), msg in table.failures.items()}
    return {"cells": len(table.rows), "failures": failures} if a.out else None


# -------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="expertfuse", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version",
                   version=f"expertfuse {__version__} (archive format {FORMAT_VERSION})")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset as JSONL")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--per-domain", type=int, default=700)
    g.add_argument("--vocab-per-domain", type=int, default=12)
    g.add_argument("--context-len", type=int, default=5)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    d = sub.add_parser("dsa", help="train one LoRA expert per domain")
    d.add_argument("--data", required=True)
    d.add_argument("--base", help="base checkpoint (default: fresh init written to OUT/base.xfus)")
    d.add_argument("--domain", action="append", choices=DOMAINS, help="repeatable; default all four")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--lr", type=float, default=SftConfig.learning_rate)
    d.add_argument("--epochs", type=int, default=SftConfig.epochs)
    d.add_argument("--rank", type=int, default=SftConfig.rank)
    d.add_argument("--alpha", type=float, default=SftConfig.alpha)
    d.add_argument("--accum", type=int, default=SftConfig.grad_accum_steps)
    d.add_argument("--out", required=True, help="output directory")
    d.set_defaults(func=cmd_dsa)

    r = sub.add_parser("gba", help="guideline-conditioned RL from an initial checkpoint")
    r.add_argument("--init", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--mode", choices=MODES, default="clipped_kl")
    r.add_argument("--iters", type=int, default=GbaConfig.iterations)
    r.add_argument("--lr", type=float, default=GbaConfig.learning_rate)
    r.add_argument("--beta", type=float, default=GbaConfig.kl_beta)
    r.add_argument("--group-size", type=int, default=GbaConfig.group_size)
    r.add_argument("--no-guidelines", action="store_true", help="plain GRPO: context-only prompts")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--log", help="CSV training log (default: OUT with .log.csv suffix)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_gba)

    m = sub.add_parser("merge", help="merge expert checkpoints")
    m.add_argument("--base", required=True)
    m.add_argument("--method", choices=METHODS, default="ties")
    m.add_argument("--density", type=float, default=0.5)
    m.add_argument("--eta", type=float, default=1.0)
    m.add_argument("--ta-lambda", type=float, default=1.0)
    m.add_argument("--trim-scope", choices=("per_tensor", "global"), default="per_tensor")
    m.add_argument("--strict", action="store_true", help="reject experts whose recorded base differs")
    m.add_argument("--report", help="write per-tensor merge statistics as JSON")
    m.add_argument("--out", required=True)
    m.add_argument("experts", nargs="+", metavar="[ROLE=]PATH")
    m.set_defaults(func=cmd_merge)

    e = sub.add_parser("eval", help="greedy-decode a split and report accuracy")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="eval")
    e.add_argument("--name")
    e.add_argument("--no-guidelines", action="store_true")
    e.add_argument("--format", choices=("json", "markdown_table", "csv"), default="json")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="run the ablation matrix over several seeds")
    ab.add_argument("--config", help="JSON pipeline config; an optional 'configs' list selects rows")
    ab.add_argument("--configs", help="comma-separated row names")
    ab.add_argument("--seeds", type=int, default=3)
    ab.add_argument("--seed", type=int, default=0, help="first seed")
    ab.add_argument("--set", action="append", metavar="KEY=VALUE")
    ab.add_argument("--format", choices=("csv", "markdown_table"), default="csv")
    ab.add_argument("--out")
    ab.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("pipeline", help="run gen → dsa → merge → gba → merge → eval")
    pl.add_argument("--config", help="JSON pipeline config")
    pl.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. gba.iterations=100")
    pl.add_argument("--seed", type=int)
    pl.add_argument("--schedule", choices=SCHEDULES)
    pl.add_argument("--resume-from", help="reuse matching artifacts from this run directory")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_pipeline)
    return p


def _error_line(exc: BaseException) -> str:
    info = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, PipelineError):
        info.update(stage=exc.stage, path=exc.path, error=type(exc.cause).__name__)
    kind = getattr(exc, "kind", None)
    if isinstance(kind, str):
        info["kind"] = kind
    return json.dumps(info, sort_keys=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a machine-readable line
        print(_error_line(exc), file=sys.stderr)
        return 1
    if result is not None:
        print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
