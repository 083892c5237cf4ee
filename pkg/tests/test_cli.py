import json
import shutil
from pathlib import Path

import pytest
import tomli

from compinv import checkpoint, pipeline
from compinv.cli import main
from compinv.config import load_config, partner_pool
from compinv.errors import ConfigError
from compinv.pipeline import file_digest

SMOKE = Path(__file__).resolve().parents[1] / "src" / "compinv" / "profiles" / "smoke.toml"


def _patched(tmp_path, section: str, body: str, name="run.toml") -> Path:
    """Smoke profile with one table replaced."""
    data = tomli.loads(SMOKE.read_text())
    lines, skip = [], False
    for line in SMOKE.read_text().splitlines():
        if line.startswith("["):
            skip = line.strip() == f"[{section}]"
            if skip:
                continue
        if not skip:
            lines.append(line)
    p = tmp_path / name
    p.write_text("\n".join(lines) + f"\n[{section}]\n{body}\n")
    assert section in data
    return p


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert main(["all", "--config", "smoke", "--out", str(out)]) == 0
    return out


def test_profiles_load_and_hash():
    a, b = load_config(None), load_config("smoke")
    assert a.hash != b.hash and len(a.hash) == 16
    assert load_config("default").hash == a.hash
    assert a.with_seed(3).pretrain.seed == 3


def test_unknown_key_is_config_error(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[pretrain]\nstepz = 3\n")
    with pytest.raises(ConfigError, match="pretrain.stepz"):
        load_config(p)


def test_toml_syntax_error_reports_line(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("seed = 0\n[corpus]\ntrain_count = = 4\n")
    assert main(["corpus", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    with pytest.raises(ConfigError, match="line 3"):
        load_config(p)


def test_lambda_out_of_range_exit_code(tmp_path):
    p = _patched(tmp_path, "inversion", "lam = 1.5")
    assert main(["invert", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_bad_flag_exit_code():
    assert main(["compose", "--spatial", "maybe"]) == 2


def test_missing_corpus_is_data_error(tmp_path):
    assert main(["pretrain", "--config", "smoke", "--out", str(tmp_path / "empty")]) == 3


def test_partner_pool_excludes_own_colour():
    for c in ("zebraball", "dicebox", "melon", "cheese"):
        pool = partner_pool(c)
        assert len(pool) == 10 and len(set(pool)) == 10
        assert len({p[:-6] for p in pool[:5]}) == 5


def test_smoke_run_artifacts(smoke_run):
    cfg = load_config("smoke")
    manifest = json.loads((smoke_run / "run_manifest.json").read_text())
    assert {"corpus", "pretrain", "invert:ti", "invert:semantic", "layout-train", "evaluate",
            "sweep-lambda", "compose:ti", "compose:semantic+spatial"} <= set(manifest)
    assert all(v["config_hash"] == cfg.hash for v in manifest.values())
    assert len(list((smoke_run / "corpus" / "train").glob("*.png"))) == cfg.corpus.train_count
    summary = json.loads((smoke_run / "reports" / "summary.json").read_text())
    assert summary["config_hash"] == cfg.hash
    for d in (smoke_run / "compose" / "ti").iterdir():
        if d.is_dir():
            assert len(list(d.glob("seed*.png"))) == cfg.evaluation.seeds
    sweep = (smoke_run / "sweep" / "summary.csv").read_text().splitlines()
    assert len(sweep) == 2 + len(cfg.sweep.lambdas)
    layout = json.loads((smoke_run / "layout" / "report.json").read_text())
    assert 0.0 <= layout["val_iou"] <= 1.0
    assert not {tuple(p) for p in layout["train_pairs"]} & {tuple(p) for p in layout["val_pairs"]}


def test_inversion_log_step_column_is_monotone(smoke_run):
    rows = (smoke_run / "inversions" / "semantic" / "zebraball.csv").read_text().splitlines()
    assert rows[0] == "step,L_rec,L_anc,L_final,delta_support,entropy"
    steps = [int(r.split(",")[0]) for r in rows[1:]]
    assert steps == list(range(len(steps)))


def test_rerun_is_idempotent(smoke_run):
    before = json.loads((smoke_run / "run_manifest.json").read_text())
    assert main(["all", "--config", "smoke", "--out", str(smoke_run)]) == 0
    after = json.loads((smoke_run / "run_manifest.json").read_text())
    assert before == after


def test_fresh_rerun_is_byte_identical(smoke_run, tmp_path):
    out = tmp_path / "again"
    assert main(["all", "--config", "smoke", "--out", str(out)]) == 0
    a = json.loads((smoke_run / "run_manifest.json").read_text())
    b = json.loads((out / "run_manifest.json").read_text())
    assert {k: v["outputs"] for k, v in a.items()} == {k: v["outputs"] for k, v in b.items()}


def test_ti_matches_semantic_at_lambda_zero(smoke_run, tmp_path):
    p = _patched(tmp_path, "inversion", "lam = 0.0\nsteps = 6\nbatch_size = 2\ndelta_refresh_interval = 3")
    out = tmp_path / "lam0"
    for sub in ("corpus", "model.ckpt", "model.ckpt.stamp.json", "gate.json", "gate.json.stamp.json"):
        src = smoke_run / sub
        dst = out / sub
        dst.parent.mkdir(parents=True, exist_ok=True)
        if src.is_dir():
            shutil.copytree(src, dst)
        else:
            dst.write_bytes(src.read_bytes())
    assert main(["invert", "--config", str(p), "--out", str(out)]) == 0
    for name in ("zebraball", "dicebox"):
        ti = (out / "inversions" / "ti" / f"{name}.csv").read_text()
        sem = (out / "inversions" / "semantic" / f"{name}.csv").read_text()
        assert ti == sem


def test_compose_spatial_without_layout_is_data_error(smoke_run, tmp_path):
    out = tmp_path / "nolayout"
    out.mkdir()
    (out / "inversions").mkdir()
    (out / "inversions" / "ti.ckpt").write_bytes((smoke_run / "inversions" / "ti.ckpt").read_bytes())
    assert main(["compose", "--config", "smoke", "--method", "ti", "--spatial", "on", "--out", str(out)]) == 3
    assert main(["compose", "--config", "smoke", "--method", "ti", "--spatial", "off", "--out", str(out)]) == 0


def test_empty_task_list_gives_valid_report(smoke_run, tmp_path):
    p = _patched(tmp_path, "evaluation", "concepts = []\nattention_seeds = 0")
    out = tmp_path / "empty"
    out.mkdir()
    assert main(["evaluate", "--config", str(p), "--out", str(out)]) == 0
    summary = json.loads((out / "reports" / "summary.json").read_text())
    assert summary["n_rows"] == 0 and summary["aggregates"] == {}


def test_pretrain_resume_matches_uninterrupted(smoke_run, tmp_path, monkeypatch):
    out = tmp_path / "resume"
    out.mkdir()
    shutil.copytree(smoke_run / "corpus", out / "corpus")
    cfg = load_config("smoke")
    real = pipeline.save_model
    calls = {"n": 0}

    def crash_after_first(*a, **k):
        real(*a, **k)
        calls["n"] += 1
        if calls["n"] == 1:
            raise KeyboardInterrupt

    monkeypatch.setattr(pipeline, "save_model", crash_after_first)
    with pytest.raises(KeyboardInterrupt):
        pipeline.run_pretrain(cfg, out)
    monkeypatch.setattr(pipeline, "save_model", real)
    assert checkpoint.load(out / "model.ckpt")[1]["step"] == cfg.pretrain.checkpoint_every
    pipeline.run_pretrain(cfg, out)
    assert file_digest(out / "model.ckpt") == file_digest(smoke_run / "model.ckpt")
