import json
import os

import pytest

from usbvet import cli, fwkit
from usbvet.cli import RunConfig, run_pipeline


def write_fixture(tmp_path, template, **spec_kw):
    image, man = fwkit.generate_fixture(
        fwkit.FixtureSpec(template=template, **spec_kw))
    path = tmp_path / f"{template}.bin"
    path.write_bytes(image)
    return str(path), man


def small_config(path, **kw):
    base = dict(image_path=path, tau=8, seed=7, state_limit=1200)
    base.update(kw)
    return RunConfig(**base)


def test_pipeline_benign_consistent(tmp_path):
    path, _ = write_fixture(tmp_path, "benign-hid")
    report, code = run_pipeline(small_config(path, expected="hid",
                                             query="both", policy="auto"))
    assert report.verdict["identity"] == "consistent"
    assert report.verdict["behavior"] == "clean"
    assert code == cli.EXIT_CONSISTENT
    assert report.query2["inconsistent_flow"]["ranked"] == []


def test_pipeline_storage_claiming_anomalous(tmp_path):
    path, man = write_fixture(tmp_path, "storage-claiming-hid")
    report, code = run_pipeline(small_config(path, expected="mass-storage",
                                             query="identity", policy="auto"))
    assert report.verdict["identity"] == "anomalous"
    assert code == cli.EXIT_FLAGGED
    target = man.target_sites["hid_report_copy"]
    assert any(f"0x{target:04x}" in r for r in report.verdict["reasons"])


def test_pipeline_injector_behavior_flagged(tmp_path):
    path, man = write_fixture(tmp_path, "injector-hid")
    report, code = run_pipeline(small_config(path, expected="hid",
                                             query="both", policy="auto"))
    assert report.verdict["identity"] == "consistent"
    assert report.verdict["behavior"] == "flagged"
    assert code == cli.EXIT_FLAGGED
    mal = f"0x{man.malicious_store_sites[0]:04x}"
    assert mal in report.verdict["flagged_sites"]


def test_report_deterministic_across_runs(tmp_path):
    path, _ = write_fixture(tmp_path, "branchy", guard_count=2)
    cfg = small_config(path, expected="hid", query="identity", policy="auto")
    r1, _ = run_pipeline(cfg)
    r2, _ = run_pipeline(cfg)
    assert r1.to_json() == r2.to_json()


def test_emit_then_parse_roundtrip(tmp_path):
    path, _ = write_fixture(tmp_path, "straightline")
    report, _ = run_pipeline(small_config(path, query="identity"))
    out = tmp_path / "report.json"
    cli.emit_report(report, str(out))
    parsed = json.loads(out.read_text())
    assert parsed == report.to_dict()


def test_emit_report_missing_directory(tmp_path):
    path, _ = write_fixture(tmp_path, "straightline")
    report, _ = run_pipeline(small_config(path, query="identity"))
    bad = str(tmp_path / "nope" / "report.json")
    with pytest.raises(cli.IoError) as exc:
        cli.emit_report(report, bad)
    assert "nope" in str(exc.value)


def test_no_descriptors_degrades_gracefully(tmp_path):
    path = tmp_path / "empty.bin"
    path.write_bytes(bytes(64))
    report, code = run_pipeline(small_config(str(path), query="both"))
    assert report.status == "completed-with-findings-none"
    assert any("NoDescriptors" in d for d in report.diagnostics)
    assert report.claimed_model["interfaces"] == []
    assert code == cli.EXIT_CONSISTENT


def test_image_too_large(tmp_path):
    path = tmp_path / "big.bin"
    path.write_bytes(bytes(0x10001))
    with pytest.raises(cli.ImageTooLarge):
        run_pipeline(RunConfig(image_path=str(path)))


def test_config_validation():
    with pytest.raises(cli.ConfigInvalid):
        RunConfig(image_path="x", expected="toaster").validate()
    with pytest.raises(cli.ConfigInvalid):
        RunConfig(image_path="x", tau=0).validate()


def test_precondition_parsing():
    p = cli.parse_precondition("XRAM:0x7fe9:==:6")
    assert (p.region, p.addr, p.relation, p.value) == ("XRAM", 0x7FE9, "==", 6)
    with pytest.raises(cli.ConfigInvalid):
        cli.parse_precondition("XRAM:0x7fe9:~:6")
    with pytest.raises(cli.ConfigInvalid):
        cli.parse_precondition("XRAM:0x7fe9:6")


def test_main_usage_error_exit_code(tmp_path, capsys):
    missing = str(tmp_path / "missing.bin")
    code = cli.main(["analyze", missing])
    assert code == cli.EXIT_USAGE
    assert "error:" in capsys.readouterr().err


def test_main_config_file_with_flag_override(tmp_path, capsys):
    path, _ = write_fixture(tmp_path, "straightline")
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({
        "expected": "hid", "query": "identity", "seed": 7, "tau": 4,
        "state_limit": 400,
    }))
    out = tmp_path / "r.json"
    code = cli.main(["analyze", path, "--config", str(cfg_file),
                     "--seed", "9", "--report", str(out)])
    data = json.loads(out.read_text())
    assert data["config"]["seed"] == 9         # flag overrides file
    assert data["config"]["expected"] == "hid"  # file value survives
    assert code in (cli.EXIT_CONSISTENT, cli.EXIT_INCOMPLETE)


def test_main_prints_report_without_outfile(tmp_path, capsys):
    path, _ = write_fixture(tmp_path, "straightline")
    code = cli.main(["analyze", path, "--query", "identity", "--seed", "1",
                     "--state-limit", "200"])
    out = capsys.readouterr().out
    data = json.loads(out)
    assert data["tool"].startswith("usbvet")


def test_custom_signature_file(tmp_path):
    path, _ = write_fixture(tmp_path, "straightline")
    sigs = tmp_path / "sigs.txt"
    sigs.write_text("ZEROS: 00 00 00 00\n")
    report, _ = run_pipeline(small_config(str(path), query="identity",
                                          signatures_path=str(sigs)))
    assert any(h["name"] == "ZEROS" for h in report.descriptor_hits)


def test_custom_ruledb(tmp_path):
    path, _ = write_fixture(tmp_path, "benign-hid")
    db = tmp_path / "rules.txt"
    db.write_text("USB_DEVICE my-widget vid=0x1234 pid=0x5678\n")
    report, _ = run_pipeline(small_config(str(path), expected="hid",
                                          query="identity",
                                          ruledb_path=str(db)))
    assert {"rule": "USB_DEVICE", "driver": "my-widget"} in report.driver_matches


def test_timing_flag_adds_timing_section(tmp_path):
    path, _ = write_fixture(tmp_path, "branchy", guard_count=1)
    cfg = small_config(path, query="identity", policy="auto")
    cfg.include_timing = True
    report, _ = run_pipeline(cfg)
    assert report.timing is not None
    assert "timing" in report.to_dict()
