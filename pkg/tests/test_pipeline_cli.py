import json
import subprocess
import sys

import pytest

from expertfuse import __version__
from expertfuse.checkpoint_store import FORMAT_VERSION, read_archive
from expertfuse.cli import main
from expertfuse.dsa import SftConfig
from expertfuse.gba import GbaConfig
from expertfuse.pipeline import DataConfig, PipelineConfig, PipelineError, parse_override, run_pipeline

SMALL = dict(data=DataConfig(per_domain_count=21), sft=SftConfig(epochs=1), gba=GbaConfig(iterations=2, max_new=8))


def test_degenerate_pipeline_equals_base(tmp_path):
    cfg = PipelineConfig(data=DataConfig(per_domain_count=14), sft=SftConfig(epochs=0), gba=GbaConfig(iterations=0),
                         out=str(tmp_path))
    res = run_pipeline(cfg)
    base, man = read_archive(tmp_path / "base.xfus")
    assert res.final == base and man.role == "base"
    assert res.report.overall == 0.0 or res.report.consistent()


@pytest.mark.parametrize("schedule", ["ours", "dsa_gba", "mixed_sft_gba"])
def test_schedules_and_provenance(tmp_path, schedule):
    res = run_pipeline(PipelineConfig(**SMALL, schedule=schedule, out=str(tmp_path)))
    prov = json.loads((tmp_path / "provenance.json").read_text())["artifacts"]
    assert "final.xfus" in res.artifacts and (tmp_path / "gba_log.csv").exists()
    rl_inputs = prov["rl.xfus"]["inputs"]
    init = "mixed_sft.xfus" if schedule == "mixed_sft_gba" else "merged_dsa.xfus"
    assert rl_inputs["init"] == prov[init]["fingerprint"]
    _, man = read_archive(tmp_path / "rl.xfus")
    assert man.role == "rl_expert" and man.extra["policy"]["d_model"] == 32
    if schedule == "ours":
        _, fman = read_archive(tmp_path / "final.xfus")
        assert [s["role"] for s in fman.extra["sources"]] == ["AM", "CAH", "BS", "CSI", "RL"]


def test_resume_skips_completed_stages(tmp_path):
    a = run_pipeline(PipelineConfig(**SMALL, out=str(tmp_path / "a")))
    b = run_pipeline(PipelineConfig(**SMALL, out=str(tmp_path / "b")), resume_from=tmp_path / "a")
    assert {f"expert_{d}.xfus" for d in ("AM", "CAH", "BS", "CSI")} <= set(b.skipped)
    assert (tmp_path / "a" / "final.xfus").read_bytes() == (tmp_path / "b" / "final.xfus").read_bytes()
    # a changed GBA config invalidates only the RL stage and what follows
    c = run_pipeline(PipelineConfig(**{**SMALL, "gba": GbaConfig(iterations=3, max_new=8)}, out=str(tmp_path / "c")),
                     resume_from=tmp_path / "a")
    assert "merged_dsa.xfus" in c.skipped and "rl.xfus" not in c.skipped


def test_stage_failure_names_stage(tmp_path):
    cfg = PipelineConfig(**{**SMALL, "sft": SftConfig(epochs=1, learning_rate=1e3, divergence_factor=1.0001)},
                         out=str(tmp_path))
    with pytest.raises(PipelineError) as ei:
        run_pipeline(cfg)
    assert ei.value.stage == "dsa" and ei.value.path.endswith(".xfus")


def test_config_roundtrip_and_overrides(tmp_path):
    cfg = PipelineConfig(**SMALL, seed=4)
    assert PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert parse_override("gba.iterations=7") == {"gba": {"iterations": 7}}
    assert parse_override("schedule=dsa_gba") == {"schedule": "dsa_gba"}
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"bogus": 1})


def test_cli_version(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["--version"])
    assert ei.value.code == 0
    out = capsys.readouterr().out
    assert __version__ in out and f"archive format {FORMAT_VERSION}" in out


def test_cli_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["gen", "--out", "x.jsonl", "--no-such-flag"])
    assert ei.value.code != 0
    assert "usage" in capsys.readouterr().err


def test_cli_failure_prints_machine_readable_line(tmp_path, capsys):
    bad = tmp_path / "bad.xfus"
    bad.write_bytes(b"JUNK" + bytes(60))
    data = tmp_path / "d.jsonl"
    assert main(["gen", "--per-domain", "3", "--out", str(data)]) == 0
    capsys.readouterr()
    assert main(["eval", "--model", str(bad), "--data", str(data)]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "BadMagic"


def test_cli_end_to_end(tmp_path, capsys):
    d = tmp_path
    assert main(["gen", "--seed", "1", "--per-domain", "14", "--out", str(d / "data.jsonl")]) == 0
    assert main(["dsa", "--data", str(d / "data.jsonl"), "--epochs", "1", "--out", str(d / "dsa")]) == 0
    experts = [str(d / "dsa" / f"expert_{x}.xfus") for x in ("AM", "CAH", "BS", "CSI")]
    assert main(["merge", "--base", str(d / "dsa" / "base.xfus"), "--method", "ties", "--report",
                 str(d / "rep.json"), "--out", str(d / "m.xfus"), *experts]) == 0
    assert json.loads((d / "rep.json").read_text())
    assert main(["gba", "--init", str(d / "m.xfus"), "--data", str(d / "data.jsonl"), "--iters", "2",
                 "--out", str(d / "rl.xfus")]) == 0
    assert (d / "rl.log.csv").read_text().startswith("iteration,mean_reward,kl,format_rate")
    assert main(["merge", "--base", str(d / "dsa" / "base.xfus"), "--out", str(d / "f.xfus"), *experts,
                 str(d / "rl.xfus")]) == 0
    _, man = read_archive(d / "f.xfus")
    assert [s["role"] for s in man.extra["sources"]] == ["AM", "CAH", "BS", "CSI", "RL"]
    capsys.readouterr()
    assert main(["eval", "--model", str(d / "f.xfus"), "--data", str(d / "data.jsonl"), "--format", "csv"]) == 0
    assert capsys.readouterr().out.startswith("config,seed,AM,CAH,BS,CSI,overall,mean_reward")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"data": {"per_domain_count": 14}, "gba": {"iterations": 1, "max_new": 6}}))
    assert main(["pipeline", "--config", str(cfg), "--set", "sft.epochs=1", "--out", str(d / "run")]) == 0
    assert (d / "run" / "eval_report.json").exists()
    assert main(["ablate", "--config", str(cfg), "--configs", "Base,AM", "--seeds", "1",
                 "--out", str(d / "abl.csv")]) == 0
    assert len((d / "abl.csv").read_text().splitlines()) == 5  # header + 2 cells + 2 means


def test_console_script_module_entry():
    out = subprocess.run([sys.executable, "-m", "expertfuse.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "archive format" in out.stdout
