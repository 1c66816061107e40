import csv
import hashlib
import json

import pytest

from vitbackdoor.cli import build_parser, main
from vitbackdoor.config import ExperimentConfig, derive_seed, load_config, parse_config, serialize
from vitbackdoor.errors import ConfigurationError
from vitbackdoor.evalkit import REPORT_COLUMNS
from vitbackdoor.models import load_checkpoint

TINY = {
    "seed": 5,
    "dataset": {"per_class": 25, "image_size": 8},
    "model": {"patch_size": 4, "embed_dim": 8, "depth": 1, "heads": 2},
    "training": {"epochs": 1, "batch_size": 32},
    "defense": {"trials": 4, "drop": {"grid": 4, "drop_count": 2}, "calibration_size": 10,
                "filter": {"trials": 4, "bootstrap_epochs": 1, "retrain_epochs": 1, "profile": "calibrated"}},
    "sweep": {"drop_grid": 4, "m_values": [0, 2], "shuffle_grids": [1, 2], "seeds": [0], "max_samples": 10},
}


def write_config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def run_cli(*argv):
    return main([str(a) for a in argv])


def digest_tree(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and "stamps" not in p.parts}


# ----------------------------------------------------------------------------
# config
# ----------------------------------------------------------------------------

def test_defaults_and_round_trip():
    cfg = parse_config({})
    assert isinstance(cfg, ExperimentConfig)
    again = parse_config(serialize(cfg))
    assert again == cfg and parse_config(serialize(again)) == again
    assert parse_config(serialize(parse_config(TINY))) == parse_config(TINY)


def test_unknown_keys_named():
    with pytest.raises(ConfigurationError, match="defense.drop.size"):
        parse_config({"defense": {"drop": {"size": 3}}})
    with pytest.raises(ConfigurationError, match="colour"):
        parse_config({"colour": 1})


def test_type_and_range_checks():
    with pytest.raises(ConfigurationError, match="training.epochs"):
        parse_config({"training": {"epochs": "ten"}})
    with pytest.raises(ConfigurationError, match="attack.rate"):
        parse_config({"attack": {"rate": 0.5}})
    with pytest.raises(ConfigurationError, match="dataset.paths.images"):
        parse_config({"dataset": {"source": "idx"}})
    with pytest.raises(ConfigurationError, match="target_label"):
        parse_config({"attack": {"target_label": 7}})


def test_seed_derivation():
    cfg = parse_config({"seed": 3, "attack": {"seed": 99}})
    assert cfg.section_seed("attack") == 99
    assert cfg.section_seed("dataset") == derive_seed(3, "dataset")
    expected = int.from_bytes(hashlib.sha256(b"3:dataset").digest()[:8], "big") % 2 ** 32
    assert derive_seed(3, "dataset") == expected
    assert derive_seed(3, "dataset") != derive_seed(3, "model")


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    with pytest.raises(ConfigurationError, match="line 1"):
        load_config(bad)


def test_output_dir_precedence(monkeypatch, tmp_path):
    cfg = parse_config({})
    monkeypatch.delenv("VITBACKDOOR_OUT", raising=False)
    assert str(cfg.output_dir()) == "runs"
    monkeypatch.setenv("VITBACKDOOR_OUT", str(tmp_path / "env"))
    assert cfg.output_dir() == tmp_path / "env"
    assert parse_config({"output": {"dir": "cfgdir"}}).output_dir().name == "cfgdir"
    assert cfg.output_dir(tmp_path / "flag") == tmp_path / "flag"


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def test_poison_count_and_evaluation_only_manifest(tmp_path):
    cfg = write_config(tmp_path, {"dataset": {"per_class": 250, "splits": [1.0, 0.0, 0.0]}, "attack": {"rate": 0.05}})
    assert run_cli("poison", "--config", cfg, "--out", tmp_path / "run") == 0
    doc = json.loads((tmp_path / "run" / "provenance" / "poison_records.json").read_text())
    assert doc["evaluation_only"] is True
    assert len(doc["records"]) == 50
    assert json.loads((tmp_path / "run" / "config.json").read_text())["attack"]["rate"] == 0.05


def test_poison_rerun_identical_files(tmp_path):
    cfg = write_config(tmp_path, TINY)
    for name in ("a", "b"):
        assert run_cli("poison", "--config", cfg, "--out", tmp_path / name) == 0
    assert digest_tree(tmp_path / "a") == digest_tree(tmp_path / "b")


def test_missing_dataset_path_names_field(tmp_path, capsys):
    cfg = write_config(tmp_path, {"dataset": {"source": "idx", "num_classes": 10,
                                              "paths": {"images": str(tmp_path / "nope"), "labels": "x"}}})
    assert run_cli("poison", "--config", cfg, "--out", tmp_path / "run") == ConfigurationError.exit_code
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "configuration" and "dataset.paths.images" in err["message"]


def test_detect_without_checkpoint_is_dependency_error(tmp_path, capsys):
    cfg = write_config(tmp_path, TINY)
    assert run_cli("poison", "--config", cfg, "--out", tmp_path / "run") == 0
    code = run_cli("detect", "--config", cfg, "--out", tmp_path / "run")
    assert code == 9
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "dependency" and "train" in err["message"]


def test_detect_accepts_no_provenance_argument():
    parser = build_parser()
    with pytest.raises(SystemExit):
        parser.parse_args(["detect", "--records", "provenance/poison_records.json"])
    assert "records" not in " ".join(a.dest for a in parser._subparsers._group_actions[0].choices["detect"]._actions)


def test_unknown_config_key_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path, {"training": {"epoch": 3}})
    assert run_cli("poison", "--config", cfg, "--out", tmp_path / "run") == 3
    assert "training.epoch" in capsys.readouterr().err


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = write_config(root, TINY)
    out = root / "run"
    for cmd in ("poison", "train", "calibrate", "detect", "evaluate", "sweep", "filter-retrain"):
        assert run_cli(cmd, "--config", cfg, "--out", out) == 0, cmd
    return cfg, out


def test_pipeline_artifacts(tiny_run):
    _, out = tiny_run
    for rel in ("models/poisoned.ckpt", "defense/profile.poisoned.json", "defense/verdicts.poisoned.csv",
                "reports/report.csv", "reports/sweep.poisoned.csv", "reports/filter.csv", "reports/removal.json",
                "models/retrained.ckpt", "data/train_filtered.manifest.json"):
        assert (out / rel).exists(), rel
    _, ckpt = load_checkpoint(out / "models" / "poisoned.ckpt")
    assert ckpt.meta["epochs"] == 1 and len(ckpt.meta["dataset_sha256"]) == 64
    removal = json.loads((out / "reports" / "removal.json").read_text())
    assert removal["flagged"] == removal["total"] - removal["kept"]


def test_evaluate_emits_report_schema(tiny_run):
    _, out = tiny_run
    with (out / "reports" / "report.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == REPORT_COLUMNS
    assert {r[3] for r in rows[1:]} == {"none", "detect"}
    meta = json.loads((out / "reports" / "report.meta.json").read_text())
    assert "target-class" in meta["asr_convention"]


def test_commands_idempotent(tiny_run, caplog):
    cfg, out = tiny_run
    before = digest_tree(out)
    caplog.set_level("INFO")
    for cmd in ("poison", "train", "calibrate", "detect", "evaluate", "sweep", "filter-retrain"):
        assert run_cli(cmd, "--config", cfg, "--out", out) == 0
    assert caplog.text.count("up to date") == 7
    assert digest_tree(out) == before


def test_detect_no_clean_data(tiny_run, tmp_path):
    cfg, out = tiny_run
    target = tmp_path / "v.csv"
    assert run_cli("detect", "--config", cfg, "--out", out, "--no-clean-data", "--verdicts", target) == 0
    rows = list(csv.DictReader(target.open()))
    assert rows and all(r["k_d"] == "0" and r["k_s"] == "4" for r in rows)


def test_seed_flag_changes_outputs(tiny_run, tmp_path):
    cfg, _ = tiny_run
    assert run_cli("poison", "--config", cfg, "--out", tmp_path / "s9", "--seed", 9) == 0
    echoed = json.loads((tmp_path / "s9" / "config.json").read_text())
    assert echoed["seed"] == 9
