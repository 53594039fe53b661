import json
import shutil

import pytest

from ora.cli import (
    EXIT_USAGE,
    compare_report,
    derive_seed,
    relative_improvement,
    resolve_config,
    run,
)
from ora.metrics import MetricReport, loads_reports
from ora.synth import TASK_KINDS

from pipeline import OBJECTIVES, run_pipeline, snapshot

PRIMARY = {"classification": "auroc", "time_to_event": "td_cindex", "regression": "r2"}


def usage_error(capsys, argv):
    code = run(argv)
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return code, json.loads(err[0])


def test_relative_improvement_arithmetic():
    assert f"{relative_improvement(0.5, 0.55):+.1f}" == "+10.0"
    assert relative_improvement(0.7, 0.7) == 0.0
    assert f"{relative_improvement(0.808, 0.841):+.2f}" == "+4.08"
    # lower is better for error metrics
    assert relative_improvement(2.0, 1.5, "rmse") == 25.0


def test_compare_report_rejects_task_mismatch():
    ntp = [("cls", MetricReport("auroc", 0.5, 0.01, 10))]
    ora = [("tte", MetricReport("td_cindex", 0.6, 0.01, 10))]
    table = compare_report({"ntp": ntp, "ora": [("cls", MetricReport("auroc", 0.55, 0.01, 10))]})
    assert table.splitlines()[1].split("\t")[-1] == "+10.00"
    with pytest.raises(Exception, match="mismatch"):
        compare_report({"ntp": ntp, "ora": ora})


def test_named_seeds_are_stable_and_distinct():
    assert derive_seed(0, "init") == derive_seed(0, "init")
    assert len({derive_seed(0, "init"), derive_seed(0, "batches"), derive_seed(1, "init")}) == 3


def test_config_rejects_unknown_keys(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("steps=5\n# comment\n")
    c, explicit = resolve_config("pretrain", str(cfg), ["lr=0.01"])
    assert c["steps"] == 5 and c["lr"] == 0.01 and explicit == {"steps", "lr"}
    with pytest.raises(Exception, match="colour"):
        resolve_config("pretrain", None, ["colour=red"])


def test_usage_errors_exit_two(capsys, tmp_path):
    code, err = usage_error(capsys, ["build-vocab", "--bogus", "x", "--out", str(tmp_path / "v")])
    assert code == EXIT_USAGE and err["error"] == "usage"
    code, err = usage_error(capsys, ["build-vocab", "--events", str(tmp_path / "none.jsonl"),
                                     "--out", str(tmp_path / "v")])
    assert code == EXIT_USAGE and "not found" in err["message"]
    code, err = usage_error(capsys, ["synth", "--out", str(tmp_path), "--set", "nonsense=1"])
    assert code == EXIT_USAGE
    code, _ = usage_error(capsys, [])
    assert code == EXIT_USAGE


def test_evaluate_perfect_regression(tmp_path, fixture_dir):
    task = fixture_dir / "task_regression.tsv"
    rows = [line.split("\t") for line in task.read_text().splitlines()[1:]]
    pred = tmp_path / "p.tsv"
    pred.write_text("#task=regression\n" + "".join(f"{r[0]}\t{r[2]}\n" for r in rows))
    out = tmp_path / "m.tsv"
    assert run(["evaluate", "--task", str(task), "--predictions", str(pred), "--out", str(out)]) == 0
    reports = dict((r.name, r) for _, r in loads_reports(out.read_text()))
    assert reports["r2"].estimate == 1.0 and reports["rmse"].estimate == 0.0
    assert (tmp_path / "m.tsv.manifest.json").is_file()


def test_synth_matches_fixture_bytes(tmp_path, fixture_dir):
    out = tmp_path / "cohort"
    assert run(["synth", "--out", str(out), "--set", "n_patients=200", "--set", "seed=7"]) == 0
    for name in ("events.jsonl", "latent.tsv", "parameters.tsv", *(f"task_{k}.tsv" for k in TASK_KINDS)):
        assert (out / name).read_bytes() == (fixture_dir / name).read_bytes(), name


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    from conftest import FIXTURE

    work = tmp_path_factory.mktemp("pipeline")
    metrics = run_pipeline(FIXTURE, work)
    return work, metrics


def test_pipeline_emits_metric_per_objective_and_task(pipeline_run):
    work, metrics = pipeline_run
    assert set(metrics) == {(o, k) for o in OBJECTIVES for k in TASK_KINDS}
    for (obj, kind), path in metrics.items():
        names = [r.name for _, r in loads_reports(path.read_text())]
        assert names.count(PRIMARY[kind]) == 1
    table = (work / "report.tsv").read_text().splitlines()
    assert table[0].split("\t") == ["task", "metric", "ntp", "tpp", "ora", "tpp_vs_ntp_pct", "ora_vs_ntp_pct"]


def test_every_output_has_a_manifest(pipeline_run):
    work, _ = pipeline_run
    for p in work.iterdir():
        if p.suffix in {".features", ".pred", ".ckpt"} or p.name in {"vocab.tsv", "grids.tsv", "report.tsv"}:
            m = json.loads((work / (p.name + ".manifest.json")).read_text())
            assert m["outputs"][p.name] and m["config_hash"] and "numpy" in m["versions"]


def test_rerun_reproduces_bytes(pipeline_run, tmp_path):
    work, _ = pipeline_run
    for name in ("ora.ckpt", "ora_time_to_event.pred"):
        copy = tmp_path / name
        before = (work / name).read_bytes()
        shutil.copy(work / name, copy)
        assert run(["rerun", str(work / f"{name}.manifest.json")]) == 0
        assert (work / name).read_bytes() == before == copy.read_bytes()


def test_inputs_are_not_mutated(pipeline_run, fixture_dir):
    manifest = json.loads((fixture_dir / "synth.manifest.json").read_text())
    before = snapshot(fixture_dir)
    from hashlib import sha256

    for name, digest in manifest["outputs"].items():
        assert sha256(before[name]).hexdigest() == digest
