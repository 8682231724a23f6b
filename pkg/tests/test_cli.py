import csv
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from volalign.cip import render_stages
from volalign.cli import main

SMALL = {
    "generator": {"class_pool": 40, "dim": 16, "token_count": 3},
    "train": {"epochs": 2, "episodes_per_epoch": 3, "hidden": 4, "heads": 2, "query_per_class": 3},
    "eval": {"episodes": 4, "val_episodes": 3, "seeds": [0, 1]},
}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


def run(out, *args):
    return main([*args, "--out-dir", str(out)])


def outputs(directory):
    """Every output file's bytes; manifests without their timestamps."""
    found = {}
    for p in sorted(directory.rglob("*")):
        if not p.is_file():
            continue
        rel = str(p.relative_to(directory))
        if p.name == "manifest.json":
            doc = json.loads(p.read_text())
            doc.pop("started")
            doc.pop("finished")
            doc["outputs"] = [o.replace(str(directory), "") for o in doc["outputs"]]
            found[rel] = doc
        else:
            found[rel] = p.read_bytes()
    return found


def trained(tmp_path, config, name="t"):
    assert run(tmp_path / name, "train", "--config", config, "--seed", "3") == 0
    return str(tmp_path / name / "checkpoint.txt")


COMMANDS = {
    "identities": ["identities", "--count", "10"],
    "gradcheck": ["gradcheck", "--count", "1"],
    "train": ["train"],
    "ablate": ["ablate", "--table", "prompt"],
    "gen-data": ["gen-data", "--episodes", "2"],
    "gen-prompt": ["gen-prompt", "--class-name", "owl", "--image", "o.jpg", "--variant", "main"],
}


@pytest.mark.parametrize("name", sorted(COMMANDS))
def test_commands_are_bit_reproducible(tmp_path, config, name):
    args = COMMANDS[name] + ["--config", config, "--seed", "7"]
    assert run(tmp_path / "a", *args) == 0
    assert run(tmp_path / "b", *args) == 0
    a, b = outputs(tmp_path / "a"), outputs(tmp_path / "b")
    assert a == b and len(a) >= 2


@pytest.mark.parametrize("name", ["eval", "sweep-u"])
def test_checkpoint_commands_are_bit_reproducible(tmp_path, config, name):
    ckpt = trained(tmp_path, config)
    args = [name, "--config", config, "--checkpoint", ckpt, "--grid-step", "0.25"]
    assert run(tmp_path / "a", *args) == 0
    assert run(tmp_path / "b", *args) == 0
    assert outputs(tmp_path / "a") == outputs(tmp_path / "b")


def test_manifest_contents_and_replay(tmp_path, config):
    assert run(tmp_path / "a", "train", "--config", config, "--seed", "5", "--tau", "0.1", "--kernel", "poly") == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["seed"] == 5
    assert manifest["config"]["train"]["temperature"] == 0.1
    assert manifest["config"]["train"]["kernel"]["kind"] == "poly"
    assert manifest["config"]["generator"]["class_pool"] == 40
    assert {"started", "finished", "outputs"} <= set(manifest)
    # the manifest alone reproduces the run
    assert run(tmp_path / "b", "train", "--config", str(tmp_path / "a" / "manifest.json")) == 0
    assert (tmp_path / "a" / "checkpoint.txt").read_bytes() == (tmp_path / "b" / "checkpoint.txt").read_bytes()


def test_seed_changes_outputs(tmp_path, config):
    run(tmp_path / "a", "train", "--config", config, "--seed", "1")
    run(tmp_path / "b", "train", "--config", config, "--seed", "2")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()


def test_identities_report(tmp_path, capsys):
    assert run(tmp_path, "identities", "--count", "20") == 0
    report = json.loads((tmp_path / "identities.json").read_text())
    assert {r["name"] for r in report} == {"sine", "det_expansion", "unit_norm", "rank_deficient",
                                           "orthogonal_invariance", "rbf_psd"}
    assert all(r["passed"] and r["max_error"] <= r["tolerance"] for r in report)
    assert "PASS sine" in capsys.readouterr().out


def test_injected_bug_names_identity(tmp_path, capsys):
    assert run(tmp_path, "identities", "--inject-bug", "det_expansion") == 1
    assert "det_expansion" in capsys.readouterr().err
    report = json.loads((tmp_path / "identities.json").read_text())
    assert [r["name"] for r in report if not r["passed"]] == ["det_expansion"]


def test_train_metrics_rows(tmp_path, config):
    trained(tmp_path, config)
    with open(tmp_path / "t" / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    assert all(float(r["align_loss"]) >= 0 for r in rows)


def test_eval_and_sweep_reports(tmp_path, config):
    ckpt = trained(tmp_path, config)
    assert run(tmp_path / "e", "eval", "--config", config, "--checkpoint", ckpt, "--u", "0.3") == 0
    report = json.loads((tmp_path / "e" / "eval.json").read_text())
    assert report["u"] == 0.3 and 0 <= report["accuracy"] <= 100 and report["ci95"] >= 0
    assert run(tmp_path / "s", "sweep-u", "--config", config, "--checkpoint", ckpt) == 0
    sweep = json.loads((tmp_path / "s" / "sweep_u.json").read_text())
    assert len(sweep["u"]) == 11 and sweep["best_u"] in sweep["u"]


def test_ablate_tables(tmp_path, config):
    assert run(tmp_path, "ablate", "--config", config) == 0
    rows = json.loads((tmp_path / "ablation.json").read_text())
    assert [r["name"] for r in rows] == ["none", "infonce", "linear_volume", "kernel_volume"]
    with open(tmp_path / "ablation.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4


def test_gen_prompt_stdout(tmp_path, capsys):
    assert run(tmp_path, "gen-prompt", "--class-name", "owl") == 0
    out = capsys.readouterr().out
    assert "<SUMMARY>" in out and "<CONCLUSION>" in out


def test_validation_failures_exit_nonzero(tmp_path, config):
    assert run(tmp_path, "gen-prompt", "--class-name", " ") != 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"learning_rate": -1}}))
    assert run(tmp_path, "train", "--config", str(bad)) != 0
    bad.write_text(json.dumps({"trainer": {}}))
    assert run(tmp_path, "train", "--config", str(bad)) != 0
    assert run(tmp_path, "eval", "--config", config, "--checkpoint", str(tmp_path / "missing.txt")) != 0
    assert run(tmp_path, "describe", "--class-name", "owl") != 0
    with pytest.raises(SystemExit):
        run(tmp_path, "train", "--kernel", "cosine")


class StagedHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        self.rfile.read(int(self.headers["Content-Length"]))
        text = render_stages({"SUMMARY": "a", "CAPTION": "b", "REASONING": "c", "CONCLUSION": "An owl."})
        data = json.dumps({"choices": [{"message": {"content": text}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


def test_describe_against_local_endpoint(tmp_path, monkeypatch):
    monkeypatch.setenv("VOLALIGN_API_TOKEN", "tok")
    server = ThreadingHTTPServer(("127.0.0.1", 0), StagedHandler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    try:
        url = f"http://127.0.0.1:{server.server_address[1]}/chat"
        assert run(tmp_path, "describe", "--class-name", "owl", "--endpoint", url, "--model", "m") == 0
    finally:
        server.shutdown()
        server.server_close()
    desc = json.loads((tmp_path / "description.json").read_text())
    assert desc["complete"] and desc["conclusion"] == "An owl."
    assert "\"tok\"" not in (tmp_path / "manifest.json").read_text()
