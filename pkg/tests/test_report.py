import json

import pytest
import yaml

from invariance_audit import cli, report
from invariance_audit.collector import read_log
from invariance_audit.errors import AnalysisError, ConfigError, HeaderMismatchError
from invariance_audit.report import RunConfig
from invariance_audit.synthetic import synthetic_templates

from conftest import design_entries, make_config


def full_pipeline(cfg):
    mlog, status = report.cmd_run(cfg)
    frags = [report.cmd_validate(cfg, mlog), report.cmd_stats(cfg, mlog), report.cmd_cbd(cfg, mlog)]
    return report.cmd_report(frags, cfg.out), status


# --- config -----------------------------------------------------------------

def test_defaults_are_recorded(workspace):
    root, _ = workspace
    cfg = RunConfig.from_dict({"schema": str(root / "schema.csv")})
    d = cfg.to_dict()
    assert d["n_per_cell"] == 110 and d["kl_smoothing"] == 0.5 and d["mi_k"] == 3
    assert d["cbd"] == {"estimator": "mixture", "tol": 0.0, "prime_rate": None, "pooling": "either", "gate": "ci"}
    assert d["backend"]["params"]["temperature"] == 0.5


@pytest.mark.parametrize("data,field", [
    ({}, "schema"),
    ({"schema": "missing.csv"}, "schema"),
    ({"n_per_cell": 0}, "n_per_cell"),
    ({"cbd": {"estimator": "average"}}, "cbd.estimator"),
    ({"bootstrap": 50}, "bootstrap"),
    ({"backend": {"max_in_flight": 0}}, "backend.max_in_flight"),
])
def test_config_errors_name_the_field(workspace, data, field):
    root, _ = workspace
    base = {"schema": str(root / "schema.csv")} if field != "schema" else {}
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({**base, **data})
    assert info.value.field == field


def test_yaml_relative_paths(workspace):
    root, _ = workspace
    (root / "cfg.yaml").write_text(yaml.safe_dump({"schema": "schema.csv", "output_dir": "out"}))
    cfg = RunConfig.load(root / "cfg.yaml")
    assert cfg.schema == str((root / "schema.csv").resolve())
    assert cfg.out == (root / "out").resolve()


def test_collection_hash_ignores_pool_size_and_analysis(workspace):
    root, _ = workspace
    a = make_config(root)
    b = make_config(root, backend={"max_in_flight": 8}, kl_smoothing=1.0)
    c = make_config(root, n_per_cell=21)
    assert a.collection_hash() == b.collection_hash() != c.collection_hash()


# --- plan / run ---------------------------------------------------------------

def test_plan_counts(workspace):
    root, templates = workspace
    assert len(report.cmd_plan(make_config(root, n_per_cell=3))) == 40 * 5 * 2 * 3
    cfg = make_config(root, n_per_cell=3, settings=["unprimed"])
    assert len(report.cmd_plan(cfg)) == 40 * 1 * 2 * 3
    assert (cfg.out / report.PLAN_FILE).exists()


def test_run_resume_and_failures(workspace):
    root, _ = workspace
    cfg = make_config(root, n_per_cell=2, settings=["unprimed"])
    mlog, status = report.cmd_run(cfg)
    assert status == report.EXIT_OK and len(mlog.records) == 160
    _, status = report.cmd_run(cfg)
    assert len(read_log(cfg.out / report.LOG_FILE).records) == 160

    bad = make_config(root, n_per_cell=1, settings=["unprimed"], output_dir=str(root / "bad"),
                      backend={"fail_rate": 1.0, "retry": {"max_attempts": 2, "base_backoff": 0.0}})
    mlog, status = report.cmd_run(bad)
    assert status == report.EXIT_COLLECTION
    assert all(m.error for m in mlog.records)


# --- analyses ---------------------------------------------------------------

def test_uniform_mock_small_kl(workspace):
    root, _ = workspace
    cfg = make_config(root, n_per_cell=100)
    mlog, _ = report.cmd_run(cfg)
    kl = report.cmd_stats(cfg, mlog)["data"]["mean_kl"]
    assert kl["null_1"]["mean_kl_bits"] <= 0.02 and kl["null_2"]["mean_kl_bits"] <= 0.02


def test_stereotype_follower_spearman(workspace):
    root, _ = workspace
    cfg = make_config(root, {"name": "stereotype_follower", "norms_table": str(root / "norms.csv"), "slope": 0.8},
                      n_per_cell=100, settings=["unprimed"])
    mlog, _ = report.cmd_run(cfg)
    sp = report.cmd_stats(cfg, mlog)["data"]["spearman"]["unprimed"]
    assert sp["rho"] >= 0.9 and sp["p_value"] < 0.001


def test_repeater_mi_ranking(workspace):
    root, _ = workspace
    cfg = make_config(root, {"name": "prime_repeater", "repeat_prob": 0.9}, n_per_cell=30)
    mlog, _ = report.cmd_run(cfg)
    ranking = report.cmd_stats(cfg, mlog)["data"]["mi_ranking"]
    assert ranking["primed"][0] == "prime_gender"
    assert "prime_gender" not in ranking["unprimed"]


def test_order_dependent_mock_per_order_fractions_differ(workspace):
    root, templates = workspace
    entries = design_entries(templates, {"masc_fem": (0.05, 0.95, 0.95, 0.05),
                                         "fem_masc": (0.95, 0.05, 0.95, 0.05)})
    cfg = make_config(root, {"name": "fixed_table", "entries": entries}, n_per_cell=100,
                      settings=["primed_feminine", "primed_masculine"])
    mlog, _ = report.cmd_run(cfg)
    summ = report.cmd_cbd(cfg, mlog)["data"]["summary"]
    assert summ["per_order"]["masc_fem"]["fraction"] >= 0.95
    assert summ["per_order"]["fem_masc"]["fraction"] <= 0.05


def test_repetition_only_pooled_fraction_small(workspace):
    root, templates = workspace
    entries = design_entries(templates, {o: (0.95, 0.05, 0.95, 0.05) for o in ("masc_fem", "fem_masc")})
    cfg = make_config(root, {"name": "fixed_table", "entries": entries}, n_per_cell=200,
                      settings=["primed_feminine", "primed_masculine"], bootstrap=500)
    mlog, _ = report.cmd_run(cfg)
    data = report.cmd_cbd(cfg, mlog)["data"]
    assert data["summary"]["pooled"]["fraction"] <= 0.05


def test_two_identical_runs_overlap(workspace):
    root, templates = workspace
    entries = design_entries(templates, {o: (0.3, 0.9, 0.9, 0.2) for o in ("masc_fem", "fem_masc")})
    strategy = {"name": "fixed_table", "entries": entries}
    cfgs = [make_config(root, strategy, n_per_cell=50, settings=["primed_feminine", "primed_masculine"],
                        output_dir=str(root / name), cbd={"gate": "point"}) for name in ("r1", "r2")]
    frags = [report.cmd_cbd(c, report.cmd_run(c)[0]) for c in cfgs]
    other = report.cmd_cbd(cfgs[0], compare={"r2": frags[1]["data"]["results"]})["data"]["summary"]
    assert other["overlap"]["this_run"]["r2"] == other["pooled"]["contextual"]


def test_cbd_needs_primed_settings(workspace):
    root, _ = workspace
    cfg = make_config(root, n_per_cell=2, settings=["unprimed"])
    mlog, _ = report.cmd_run(cfg)
    with pytest.raises(AnalysisError):
        report.cmd_cbd(cfg, mlog)


# --- reports ------------------------------------------------------------------

def test_full_report_tables_and_provenance(workspace):
    root, _ = workspace
    cfg = make_config(root, {"name": "prime_repeater", "repeat_prob": 0.8}, n_per_cell=10)
    rep, status = full_pipeline(cfg)
    for key in ("validity", "estimates", "distributions", "mean_kl", "spearman", "mutual_information", "cbd"):
        assert key in rep and not (isinstance(rep[key], dict) and rep[key].get("absent"))
    assert rep["provenance"]["config"] == json.loads(json.dumps(cfg.to_dict()))
    assert rep["provenance"]["schema_hash"] and rep["provenance"]["log_hash"]
    tables = sorted(p.name for p in (cfg.out / "tables").iterdir())
    assert tables == sorted(["validity.csv", "estimates.csv", "distributions.csv", "mean_kl.csv", "spearman.csv",
                             "mutual_information.csv", "cbd_results.csv", "cbd_summary.csv", "cbd_overlap.csv"])
    series = rep["distributions"]["primed_feminine"]
    assert sum(series["counts"]) == series["n_templates"] == 40


def test_report_is_byte_identical(workspace):
    root, _ = workspace
    cfg = make_config(root, {"name": "prime_repeater", "repeat_prob": 0.8}, n_per_cell=10)
    full_pipeline(cfg)
    first = (cfg.out / report.REPORT_FILE).read_bytes()
    tables = {p.name: p.read_bytes() for p in (cfg.out / "tables").iterdir()}
    mlog = read_log(cfg.out / report.LOG_FILE)
    frags = [report.cmd_validate(cfg, mlog), report.cmd_stats(cfg, mlog), report.cmd_cbd(cfg, mlog)]
    report.cmd_report(frags, cfg.out)
    assert (cfg.out / report.REPORT_FILE).read_bytes() == first
    assert {p.name: p.read_bytes() for p in (cfg.out / "tables").iterdir()} == tables


def test_stats_only_report_marks_cbd_absent(workspace):
    root, _ = workspace
    cfg = make_config(root, n_per_cell=3)
    mlog, _ = report.cmd_run(cfg)
    rep = report.cmd_report([report.cmd_stats(cfg, mlog)], cfg.out)
    assert rep["cbd"] == {"absent": True}
    assert rep["metaprompt"] == {"absent": True}


def test_mixed_run_fragments_rejected(workspace):
    root, _ = workspace
    a = make_config(root, n_per_cell=3, output_dir=str(root / "a"))
    b = make_config(root, n_per_cell=4, output_dir=str(root / "b"))
    fa = report.cmd_stats(a, report.cmd_run(a)[0])
    fb = report.cmd_stats(b, report.cmd_run(b)[0])
    with pytest.raises(HeaderMismatchError):
        report.cmd_report([fa, fb], root / "mixed")


def test_invalid_records_do_not_change_statistics(workspace):
    root, _ = workspace
    cfg = make_config(root, {"name": "prime_repeater", "repeat_prob": 0.8}, n_per_cell=10,
                      backend={"malformed_rate": 0.1})
    mlog, _ = report.cmd_run(cfg)
    full = report.cmd_stats(cfg, mlog)["data"]
    path = cfg.out / report.LOG_FILE
    lines = path.read_text().splitlines()
    kept = [lines[0]] + [ln for ln in lines[1:] if json.loads(ln)["validity"] == "valid"]
    assert len(kept) < len(lines)
    path.write_text("\n".join(kept) + "\n")
    pruned = report.cmd_stats(cfg, read_log(path))["data"]
    assert pruned == full


def test_metaprompt_fragment(workspace):
    root, _ = workspace
    cfg = make_config(root, {"name": "oracle"}, metaprompt_n=1)
    frag = report.cmd_metaprompt(cfg, synthetic_templates(2))
    assert all(row["accuracy"] == 1.0 for row in frag["data"].values())


# --- simulate -----------------------------------------------------------------

def test_simulate_monotone_detection():
    out = report.cmd_simulate(None, "cbd_designed_0.5", (50, 200, 800), seeds=200, bootstrap=200)
    rates = [row["ci_gate"] for row in out["rows"]]
    assert rates == sorted(rates)
    assert out["design_delta_c"] == pytest.approx(0.5)


def test_simulate_null_false_positive_rate():
    out = report.cmd_simulate(None, "cbd_null", (200,), seeds=300, bootstrap=200)
    assert out["rows"][0]["ci_gate"] <= 0.07


def test_simulate_errors():
    with pytest.raises(ValueError):
        report.cmd_simulate(None, "cbd_null", (0,))
    with pytest.raises(ConfigError):
        report.cmd_simulate(None, "bogus")


def test_simulate_other_scenarios():
    st = report.cmd_simulate(None, "stereotype", (50, 400), seeds=30)
    assert st["rows"][-1]["spearman_detect"] >= st["rows"][0]["spearman_detect"]
    rp = report.cmd_simulate(None, "repeater", (50,), seeds=10)
    assert rp["rows"][0]["prime_gender_top"] == 1.0


# --- CLI ------------------------------------------------------------------------

def write_cfg(root, **kw):
    data = {"schema": "schema.csv", "norms": "norms.csv", "output_dir": "cli_run", "n_per_cell": 5,
            "bootstrap": 100, "metaprompt_n": 1,
            "backend": {"strategy": {"name": "prime_repeater", "repeat_prob": 0.9}}}
    data.update(kw)
    (root / "cfg.yaml").write_text(yaml.safe_dump(data))
    return str(root / "cfg.yaml")


def test_cli_end_to_end(workspace, capsys):
    root, _ = workspace
    cfg = write_cfg(root)
    for cmd in ("plan", "run", "validate", "metaprompt", "stats", "cbd", "report"):
        assert cli.main([cmd, cfg]) == 0, cmd
    out = root / "cli_run"
    rep = json.loads((out / "report.json").read_text())
    assert rep["metaprompt"]["gender_tracking"]["total"] > 0
    assert (out / "tables" / "metaprompt.csv").exists()


def test_cli_exit_codes(workspace, capsys):
    root, _ = workspace
    assert cli.main(["plan", str(root / "nope.yaml")]) == report.EXIT_CONFIG
    bad = write_cfg(root, output_dir="bad_run",
                    backend={"fail_rate": 1.0, "retry": {"max_attempts": 1, "base_backoff": 0}})
    assert cli.main(["run", bad]) == report.EXIT_COLLECTION
    empty = write_cfg(root, output_dir="empty_run")
    assert cli.main(["stats", empty]) == report.EXIT_ANALYSIS
    assert "config error" in capsys.readouterr().err


def test_cli_validate_schema(tmp_path, capsys, mechanic_pair):
    from invariance_audit.schema import write_schema
    write_schema([mechanic_pair[0]], tmp_path / "orphan.csv")
    assert cli.main(["validate-schema", str(tmp_path / "orphan.csv")]) == report.EXIT_CONFIG
    assert "mech-occ" in capsys.readouterr().out
    write_schema(mechanic_pair, tmp_path / "ok.csv")
    assert cli.main(["validate-schema", str(tmp_path / "ok.csv")]) == 0


def test_cli_simulate(tmp_path, capsys):
    assert cli.main(["simulate", "cbd_null", "--n", "50", "--seeds", "20", "--bootstrap", "100",
                     "--out", str(tmp_path / "sim.json")]) == 0
    assert json.loads((tmp_path / "sim.json").read_text())["scenario"] == "cbd_null"
