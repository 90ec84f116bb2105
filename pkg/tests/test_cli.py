import hashlib
import json

import numpy as np
import pytest

from facecloak import cli
from facecloak.config import RunConfig
from facecloak.imaging import load_png, save_png

SUBCOMMANDS = ["synth-data", "train-embedder", "train-attack", "distill", "evaluate", "visualize", "cloak", "pipeline"]


def tiny_config(tmp_path) -> str:
    cfg = RunConfig().model_dump(mode="json")
    cfg["dataset"]["synthetic"].update(num_identities=8, images_per_identity=6)
    cfg["dataset"]["target_images"] = 2
    for key in ("embedder", "blackbox"):
        cfg[key]["train"]["epochs"] = 2
    cfg["embedder"]["widths"] = [8, 16, 16, 16]
    cfg["blackbox"]["widths"] = [8, 16, 16]
    cfg["attack"].update(epochs=1, generator_widths=[16, 8, 8])
    cfg["distill"].update(epochs=1, base_width=4, depth=2)
    cfg["eval"]["thresholds"] = [0.05, 0.1]
    cfg["eval"]["tsne"].update(iterations=30)
    cfg["paths"]["out_dir"] = str(tmp_path / "run")
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([cmd, "--help"])
    assert exc.value.code == 0
    assert "--config" in capsys.readouterr().out


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["synth-data", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    bad.write_text(json.dumps({"nonsense": 1}))
    assert cli.main(["synth-data", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    bad.write_text(json.dumps({"attack": {"threshold": -1}}))
    assert cli.main(["synth-data", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2


def test_missing_upstream(tmp_path):
    assert cli.main(["evaluate", "--out-dir", str(tmp_path / "empty")]) == 3
    assert cli.main(["train-attack", "--out-dir", str(tmp_path / "empty")]) == 3
    assert cli.main(["cloak", "--in", "x.png", "--out", "y.png", "--out-dir", str(tmp_path / "empty")]) == 3


def test_synth_data_is_reproducible(tmp_path):
    cfg = tiny_config(tmp_path)
    digests = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["synth-data", "--config", cfg, "--out-dir", str(out)]) == 0
        digests.append(hashlib.sha256((out / "data" / "manifest.json").read_bytes()).hexdigest())
    assert digests[0] == digests[1]


def test_data_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("FACECLOAK_DATA_ROOT", str(tmp_path / "shared"))
    assert cli.main(["synth-data", "--config", tiny_config(tmp_path), "--out-dir", str(tmp_path / "r")]) == 0
    assert (tmp_path / "shared" / "manifest.json").exists()
    assert not (tmp_path / "r" / "data").exists()


def test_end_to_end(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    run = tmp_path / "run"
    assert cli.main(["pipeline", "--config", cfg]) == 0
    report = json.loads((run / "eval" / "report.json").read_text())
    assert set(report["models"]) == {"identity", "teacher", "student"}
    for name in ("tsne.csv", "tsne.png", "summary.json"):
        assert (run / "viz" / name).exists()
    resolved = json.loads((run / "attack" / "config.resolved.json").read_text())
    assert resolved["attack"]["optimizer"]["lr"] == 1e-3

    src = sorted((run / "data").rglob("*.png"))[0]
    capsys.readouterr()
    for extra in ([], ["--student"]):
        out = tmp_path / f"cloaked{len(extra)}.png"
        assert cli.main(["cloak", "--config", cfg, "--in", str(src), "--out", str(out), *extra]) == 0
        assert float(capsys.readouterr().out.strip()) >= 0
        diff = np.abs(load_png(out) - load_png(src))
        assert diff.max() <= 0.1 + 1 / 255

    odd = tmp_path / "odd.png"
    save_png(odd, np.zeros((16, 16, 3)))
    assert cli.main(["cloak", "--config", cfg, "--in", str(odd), "--out", str(tmp_path / "o.png")]) == 2
    (tmp_path / "junk.png").write_bytes(b"not a png")
    assert cli.main(["cloak", "--config", cfg, "--in", str(tmp_path / "junk.png"), "--out",
                     str(tmp_path / "o.png")]) == 2
