import json
import subprocess
import sys

import pytest
from filelock import FileLock

from latentseg import cli
from latentseg.pipeline import ConfigError, PipelineConfig, parse_override, stage_keys

TINY = {
    "seed": 3,
    "generator": {"id": "toy-compositor-v1", "params": {"height": 16, "width": 16}},
    "probe": {"steps": 5, "batch_size": 4},
    "synth": {"n_accepted": 8, "refine": {"max_area_fraction": 1.0, "min_mean_abs_change": 0.0}},
    "train": {"steps": 4, "decay_step": 2, "batch_size": 2, "arch": {"levels": 1, "base_channels": 4}},
    "eval": {"heldout_count": 6},
    "ablate": {"sweeps": [{"axis": "lambda", "values": [0.2, 0.5]}]},
}


def write_config(tmp_path, root_name="run", **extra):
    data = json.loads(json.dumps(TINY))
    data["output_root"] = str(tmp_path / root_name)
    data.update(extra)
    path = tmp_path / f"{root_name}.json"
    path.write_text(json.dumps(data))
    return path


def run(cmd, path, *sets, force=False, workers=1):
    return cli.run(cmd, path, list(sets), workers=workers, force=force)


# -- config ----------------------------------------------------------------------

def test_defaults_and_seed_propagation():
    cfg = PipelineConfig({"seed": 10})
    assert cfg.probe_config().seed == 10
    assert cfg.stage_seed("synth") == 12 and cfg.stage_seed("init") == 13
    assert cfg.train_config().seed == 14 and cfg.stage_seed("heldout") == 15
    assert cfg.probe_config().lambda_edge == 0.2 and cfg.train_config().steps == 1500


def test_overrides():
    assert parse_override("probe.lambda_edge=0.8") == ("probe.lambda_edge", 0.8)
    assert parse_override("synth.mode=light") == ("synth.mode", "light")
    cfg = PipelineConfig().with_overrides({"probe.lambda_edge": 0.8, "train.arch.base_channels": 8})
    assert cfg.probe_config().lambda_edge == 0.8 and cfg.arch_config().base_channels == 8
    with pytest.raises(ConfigError):
        parse_override("novalue")


@pytest.mark.parametrize("data,field", [
    ({"probe": {"lamda": 1}}, "probe.lamda"),
    ({"probe": {"steps": 0}}, "probe"),
    ({"probe": {"steps": "many"}}, "probe.steps"),
    ({"synth": {"mode": "both"}}, "synth.mode"),
    ({"train": {"arch": {"levels": 0}}}, "train.arch"),
    ({"generator": {"id": "unknown"}}, "generator"),
    ({"eval": {"datasets": [{"name": "x"}]}}, "eval.datasets"),
])
def test_invalid_configs_name_the_field(data, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        PipelineConfig(data)


def test_hash_ignores_output_root_only():
    a = PipelineConfig({"output_root": "x"})
    b = PipelineConfig({"output_root": "y"})
    c = PipelineConfig({"seed": 1})
    assert a.hash() == b.hash() != c.hash()


def test_stage_keys_chain():
    base = PipelineConfig()
    gen = base.generator()
    k0 = stage_keys(base, gen)
    k1 = stage_keys(base.with_overrides({"train.steps": 1600}), gen)
    assert k0["probe"] == k1["probe"] and k0["synth"] == k1["synth"]
    assert k0["train"] != k1["train"] and k0["eval"] != k1["eval"]
    k2 = stage_keys(base.with_overrides({"probe.lambda_edge": 0.5}), gen)
    assert all(k2[s] != k0[s] for s in ("probe", "synth", "train", "eval"))
    assert k2["heldout"] == k0["heldout"]


# -- commands --------------------------------------------------------------------

def test_full_chain_with_report(tmp_path, capsys):
    path = write_config(tmp_path)
    for cmd in ("probe", "synth", "train", "eval", "report"):
        assert run(cmd, path) == 0, cmd
    root = tmp_path / "run"
    for rel in ("directions/light.json", "directions/dark.json", "dataset/manifest.json",
                "checkpoints/segnet.ckpt", "reports/eval_toy-heldout.json", "reports/summary.txt"):
        assert (root / rel).exists(), rel
    rep = json.loads((root / "reports/eval_toy-heldout.json").read_text())
    assert len(rep["per_image"]["iou"]) == 6
    summary = (root / "reports/summary.txt").read_text()
    assert "hash chain: consistent" in summary and str(root) not in summary


def test_missing_upstream_names_prerequisite(tmp_path, capsys):
    path = write_config(tmp_path)
    assert run("synth", path) == cli.EXIT_UPSTREAM
    err = capsys.readouterr().err
    assert "direction record" in err and "`probe`" in err
    assert run("train", path) == cli.EXIT_UPSTREAM
    assert run("eval", path) == cli.EXIT_UPSTREAM
    assert run("report", path) == cli.EXIT_UPSTREAM


def test_refuses_to_overwrite_without_force(tmp_path, capsys):
    path = write_config(tmp_path)
    assert run("probe", path) == 0
    before = (tmp_path / "run/directions/light.json").read_bytes()
    assert run("probe", path) == cli.EXIT_EXISTS
    assert "--force" in capsys.readouterr().err
    assert run("probe", path, force=True) == 0
    assert (tmp_path / "run/directions/light.json").read_bytes() == before


def test_stale_upstream_detected(tmp_path, capsys):
    path = write_config(tmp_path)
    assert run("probe", path) == 0
    assert run("synth", path, "probe.lambda_edge=0.5") == cli.EXIT_UPSTREAM
    assert "stale" in capsys.readouterr().err


def test_invalid_config_exit_code(tmp_path, capsys):
    path = write_config(tmp_path)
    assert run("probe", path, "probe.steps=0") == cli.EXIT_CONFIG
    assert "probe" in capsys.readouterr().err
    assert run("probe", tmp_path / "absent.json") == cli.EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("probe", bad) == cli.EXIT_CONFIG
    missing = write_config(tmp_path, "m", eval={"datasets": [{"name": "x", "path": str(tmp_path / "nope")}]})
    for cmd in ("probe", "synth", "train"):
        assert run(cmd, missing) == 0
    assert run("eval", missing) == cli.EXIT_CONFIG


def test_lock_blocks_concurrent_command(tmp_path):
    path = write_config(tmp_path)
    (tmp_path / "run").mkdir()
    with FileLock(str(tmp_path / "run" / ".lock")):
        assert run("probe", path) == cli.EXIT_LOCKED
    assert run("probe", path) == 0


def test_report_flags_inconsistent_chain(tmp_path, capsys):
    path = write_config(tmp_path)
    for cmd in ("probe", "synth", "train"):
        assert run(cmd, path) == 0
    assert run("train", path, "train.steps=6", "train.decay_step=3", force=True) == 0
    assert run("report", path) == cli.EXIT_CHAIN
    assert "INCONSISTENT" in capsys.readouterr().out


def test_runtime_failure_exit_code(tmp_path, capsys):
    path = write_config(tmp_path)
    assert run("probe", path) == 0
    strict = ["synth.refine.min_mean_abs_change=100"]
    assert run("probe", path, *strict, force=True) == 0
    assert run("synth", path, *strict) == cli.EXIT_RUNTIME
    assert "SynthesisError" in capsys.readouterr().err


def test_two_roots_are_byte_identical(tmp_path):
    paths = [write_config(tmp_path, name) for name in ("a", "b")]
    for path in paths:
        for cmd in ("probe", "synth", "train", "eval", "report"):
            assert run(cmd, path) == 0
    files = ["directions/light.json", "directions/dark.json", "dataset/manifest.json",
             "checkpoints/segnet.ckpt", "reports/eval_toy-heldout.json", "reports/summary.txt"]
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_workers_do_not_change_artifacts(tmp_path):
    a, b = write_config(tmp_path, "w1"), write_config(tmp_path, "w3")
    for path, workers in ((a, 1), (b, 3)):
        for cmd in ("probe", "synth"):
            assert run(cmd, path, workers=workers) == 0
    assert (tmp_path / "w1/dataset/manifest.json").read_bytes() == (tmp_path / "w3/dataset/manifest.json").read_bytes()


def test_ablate_writes_table_and_plot(tmp_path, capsys):
    path = write_config(tmp_path, ablate={"sweeps": [
        {"axis": "direction_mode", "values": ["light", "dark", "pair", "ensemble"]},
        {"axis": "epsilon", "values": [2.0, -1.0]},
    ]})
    assert run("ablate", path) == 0
    root = tmp_path / "run"
    modes = json.loads((root / "reports/ablation_direction_mode.json").read_text())
    assert [r["value"] for r in modes["rows"]] == ["light", "dark", "pair", "ensemble"]
    assert all(r["status"] == "ok" for r in modes["rows"])
    assert all(0 <= r["acc"] <= 1 and 0 <= r["iou"] <= 1 for r in modes["rows"])
    # light, dark and pair share one probe
    assert len(list((root / "ablate/store").glob("probe-*"))) == 1
    eps = json.loads((root / "reports/ablation_epsilon.json").read_text())
    assert eps["rows"][0]["status"] == "ok" and eps["rows"][1]["status"] == "failed"
    assert "epsilon" in eps["rows"][1]["error"]
    assert (root / "plots/ablation_direction_mode.png").stat().st_size > 0
    assert run("ablate", path) == cli.EXIT_EXISTS
    assert run("report", path) == 0
    assert "ablation over direction_mode" in capsys.readouterr().out


def test_module_entry_point(tmp_path):
    path = write_config(tmp_path)
    proc = subprocess.run([sys.executable, "-m", "latentseg.cli", "probe", "--config", str(path),
                           "--set", "probe.steps=2"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "latentseg.cli", "launch", "--config", str(path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2
