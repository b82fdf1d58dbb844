import csv
import json

import pytest

from dpiprint import cli, prober
from dpiprint.builtin import top40_ids
from dpiprint.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, demo_targets, main
from dpiprint.generate import load_probe_set
from dpiprint.netsim.zoo import noiseless, zoo_default
from dpiprint.probe import dump_targets


@pytest.fixture
def small_campaign(tmp_path):
    """Two noiseless profiles, two targets each, ten probes."""
    zoo = noiseless(zoo_default())[:2]
    targets, world = demo_targets(zoo, 2)
    (tmp_path / "targets.csv").write_text(dump_targets(targets))
    (tmp_path / "world.json").write_text(json.dumps(world))
    (tmp_path / "sel.json").write_text(json.dumps({"probes": top40_ids("http")[:10]}))
    return tmp_path


def run(argv):
    return main([str(a) for a in argv])


def test_no_command_and_bad_flag_are_usage_errors():
    assert main([]) == EXIT_USAGE
    assert main(["select", "--bogus"]) == EXIT_USAGE
    assert main(["zoo", "export"]) == EXIT_USAGE


def test_generate_writes_manifest(tmp_path, capsys):
    assert main(["generate", "--protocol", "https", "--out", str(tmp_path / "g")]) == EXIT_OK
    doc = json.loads((tmp_path / "g" / "manifest.json").read_text())
    assert doc["count"] == 1772
    assert len(load_probe_set(tmp_path / "g")) == 1772
    assert "manifest sha256" in capsys.readouterr().out


def test_select_rejects_empty_matrix(tmp_path):
    (tmp_path / "m.csv").write_text("group\n")
    assert main(["select", "--matrix", str(tmp_path / "m.csv"), "--out", str(tmp_path / "s.json")]) == EXIT_USAGE
    assert not (tmp_path / "s.json").exists()


def test_missing_input_is_runtime_error(tmp_path):
    assert main(["analyze", "--records", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == EXIT_RUNTIME


def test_pipeline_and_refusal_to_overwrite(small_campaign, capsys):
    d = small_campaign
    probe = ["probe", "--targets", d / "targets.csv", "--probes", d / "sel.json", "--out", d, "--campaign-id", "c1",
             "--repetitions", "1", "--world", d / "world.json", "--pcap"]
    assert run(probe) == EXIT_OK
    records = d / "campaign-c1" / "records.jsonl"
    before = records.read_bytes()
    # 4 targets x (10 probes + baseline) x 2 roles
    assert len(before.splitlines()) == 4 * 11 * 2
    assert len(list((d / "campaign-c1" / "pcap").glob("*.pcap"))) == 88
    assert run(probe) == EXIT_USAGE
    assert records.read_bytes() == before

    assert run(["analyze", "--records", records, "--out", d / "an", "--groups", d / "world.json"]) == EXIT_OK
    assert {p.name for p in (d / "an").iterdir()} >= {"verdicts.csv", "fingerprints.json", "targets.json",
                                                      "matrix.csv"}
    assert run(["select", "--matrix", d / "an" / "matrix.csv", "--theta", "1.0", "--cutoff", "0.5",
                "--out", d / "chosen.json", "--curve", d / "an" / "curve.csv"]) == EXIT_OK
    assert json.loads((d / "chosen.json").read_text())["params"]["phi_threshold"] == 1.0
    assert "theta=1.0" in capsys.readouterr().out
    assert run(["cluster", "--fingerprints", d / "an" / "fingerprints.json", "--metadata", d / "targets.csv",
                "--min-cluster-size", "2", "--out", d / "an"]) == EXIT_OK
    with open(d / "an" / "clusters.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and len({r["cluster"] for r in rows}) == 2
    assert run(["report", "--input", d / "an", "--out", d / "rep"]) == EXIT_OK
    assert {p.name for p in (d / "rep").iterdir()} == {"mds.svg", "distances.svg", "curve.svg"}
    assert (d / "rep" / "mds.svg").read_text().lstrip().startswith("<?xml")


def test_report_with_nothing_is_usage_error(tmp_path):
    assert main(["report", "--input", str(tmp_path), "--out", str(tmp_path / "r")]) == EXIT_USAGE


def test_raw_transport_stops_on_failed_preflight(small_campaign, monkeypatch):
    d = small_campaign
    monkeypatch.setattr(prober, "preflight", lambda: [("raw socket", False, "denied")])
    code = run(["probe", "--targets", d / "targets.csv", "--out", d, "--transport", "raw", "--source", "10.0.0.9"])
    assert code == EXIT_RUNTIME
    assert not (d / "campaign-0" / "records.jsonl").exists()


def test_unknown_world_profile(small_campaign):
    d = small_campaign
    argv = ["probe", "--targets", d / "targets.csv", "--out", d, "--world", d / "world.json"]
    (d / "world.json").write_text(json.dumps({"198.18.0.10": ["no-such-dpi"]}))
    assert run(argv) == EXIT_USAGE
    (d / "world.json").write_text(json.dumps({"198.18.0.10:80": ["zeek-like"]}))
    assert run(argv) == EXIT_USAGE


def test_zoo_commands(tmp_path, capsys):
    assert main(["zoo", "list"]) == EXIT_OK
    listed = capsys.readouterr().out.splitlines()
    assert len(listed) == len(zoo_default())
    path = tmp_path / "zoo.yaml"
    assert main(["zoo", "export", str(path)]) == EXIT_OK
    assert main(["zoo", "validate", str(path)]) == EXIT_OK
    path.write_text("- id: broken\n  paws: Sometimes\n")
    capsys.readouterr()
    assert main(["zoo", "validate", str(path)]) == EXIT_RUNTIME
    assert "paws" in capsys.readouterr().err


def test_config_file_supplies_defaults(tmp_path, monkeypatch):
    seen = {}

    def fake_select(args):
        seen.update(vars(args))
        return EXIT_OK

    monkeypatch.setattr(cli, "cmd_select", fake_select)
    (tmp_path / "cfg.yaml").write_text("theta: 0.5\nmax-probes: 7\n")
    assert main(["--config", str(tmp_path / "cfg.yaml"), "select", "--matrix", "m", "--out", "o"]) == EXIT_OK
    assert (seen["theta"], seen["max_probes"]) == (0.5, 7)
    seen.clear()
    assert main(["--config", str(tmp_path / "cfg.yaml"), "select", "--matrix", "m", "--out", "o",
                 "--theta", "0.9"]) == EXIT_OK
    assert seen["theta"] == 0.9
    (tmp_path / "bad.yaml").write_text("- 1\n")
    assert main(["--config", str(tmp_path / "bad.yaml"), "select", "--matrix", "m", "--out", "o"]) == EXIT_USAGE


def test_preflight_exit_code(monkeypatch, capsys):
    monkeypatch.setattr(prober, "preflight", lambda: [("a", True, "x"), ("b", None, "y")])
    assert main(["preflight"]) == EXIT_OK
    monkeypatch.setattr(prober, "preflight", lambda: [("a", False, "x")])
    assert main(["preflight"]) == EXIT_RUNTIME
    assert "[FAIL]" in capsys.readouterr().out
