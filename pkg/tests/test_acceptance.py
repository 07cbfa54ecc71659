"""Acceptance criteria 1-10; each test prints one PASS/FAIL line at its stated tolerance.

Criterion 10 runs against the local stub server unless INVARIANCE_AUDIT_ENDPOINT
names a live OpenAI-compatible endpoint (model from INVARIANCE_AUDIT_MODEL,
bearer token from the variable named by INVARIANCE_AUDIT_KEY_ENV).
"""
import json
import os
import random
import time

import numpy as np
import pytest

from invariance_audit import report
from invariance_audit.backend import injected_malformation
from invariance_audit.cbd import CbdSystem, coupling_oracle, delta_c, is_contextual, joint_mixture, joint_product
from invariance_audit.collector import read_log
from invariance_audit.report import CBD_SCENARIOS, designed_delta_c
from invariance_audit.schema import write_schema
from invariance_audit.stats import POOLED, kl_bernoulli, mi_discrete, mi_knn
from invariance_audit.synthetic import synthetic_norms, synthetic_templates

from conftest import design_entries, make_config, write_norms
from stub_server import StubServer
from test_stats import gaussian_two_class_mi


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


def random_system(rng):
    """Random valid cyclic-2 system: each ordering is a random 2x2 distribution."""
    vals = []
    for _ in range(2):
        p = rng.dirichlet(np.ones(4)) if rng.random() < 0.8 else _sparse(rng)
        pp, pm, mp, mm = p
        vals.append((pp + pm - mp - mm, pp - pm + mp - mm, pp - pm - mp + mm))
    (e1a, e2a, ja), (e1b, e2b, jb) = vals
    return CbdSystem(e1a, e2a, e1b, e2b, ja, jb)


def _sparse(rng):
    p = rng.dirichlet(np.ones(4))
    p[rng.random(4) < 0.5] = 0.0
    if p.sum() == 0:
        p[rng.integers(4)] = 1.0
    return p / p.sum()


def pipeline(cfg, plans=None, templates=None):
    mlog, status = report.cmd_run(cfg, plans=plans, templates=templates)
    stats_frag = report.cmd_stats(cfg, mlog, templates)
    cbd_frag = report.cmd_cbd(cfg, mlog, templates)
    rep = report.cmd_report([report.cmd_validate(cfg, mlog, templates), stats_frag, cbd_frag], cfg.out)
    return rep, status


def test_criterion_1_oracle_equivalence(capsys):
    rng = np.random.default_rng(2024)
    systems = [random_system(rng) for _ in range(1000)]
    start = time.perf_counter()
    disagreements = 0
    for s in systems:
        dc = delta_c(s)
        if is_contextual(dc) == coupling_oracle(s) and abs(dc) > 1e-9:
            disagreements += 1
    elapsed = time.perf_counter() - start
    n_ctx = sum(is_contextual(delta_c(s)) for s in systems)
    verdict(capsys, 1, disagreements == 0 and elapsed < 10,
            f"{len(systems)} systems, {n_ctx} contextual, {disagreements} disagreements, {elapsed:.2f}s")


def test_criterion_2_signaling_immunity(capsys):
    rng = np.random.default_rng(7)
    flagged = 0
    for _ in range(500):
        p = rng.dirichlet(np.ones(4))
        e1, e2, j = p[0] + p[1] - p[2] - p[3], p[0] - p[1] + p[2] - p[3], p[0] - p[1] - p[2] + p[3]
        # shift the marginals of the second ordering while keeping the joint
        for _ in range(100):
            d1, d2 = rng.uniform(-1, 1, size=2)
            s = CbdSystem(e1, e2, float(np.clip(e1 + d1, -1, 1)), float(np.clip(e2 + d2, -1, 1)), j, j)
            if min(s.atoms(2).values()) >= 0:
                break
        else:
            s = CbdSystem(e1, e2, e1, e2, j, j)
        flagged += is_contextual(delta_c(s))
    verdict(capsys, 2, flagged == 0, f"{flagged}/500 equal-joint systems flagged")


def test_criterion_3_literal_fixtures(capsys):
    checks = [
        delta_c(CbdSystem(0, 0, 0, 0, 0, 0)) == 0,
        delta_c(CbdSystem(0, 0, 0, 0, 1, -1)) == 2.0,
        delta_c(CbdSystem(1, 0, -1, 0, 0, 0)) == -2.0,
        abs(joint_product(0.5, 0.37) - 0.0) <= 1e-12,
        abs(joint_product(0.9, 0.9) - 0.64) <= 1e-12,
        abs(joint_product(1.0, 1.0) - 1.0) <= 1e-12,
        abs(joint_mixture(0.5, 0.9, 0.1) - 0.8) <= 1e-12,
        abs(joint_mixture(0.5, 0.3, 0.3) - 0.0) <= 1e-12,
        abs(joint_mixture(1.0, 0.9, 0.123) - 0.8) <= 1e-12,
    ]
    verdict(capsys, 3, all(checks), f"{sum(checks)}/{len(checks)} fixtures exact")


def test_criterion_4_kl_and_mi(capsys):
    kl = kl_bernoulli(0.75, 0.5)
    mi = mi_discrete([0] * 30 + [0] * 10 + [1] * 10 + [1] * 30, [0] * 30 + [1] * 10 + [0] * 10 + [1] * 30)
    nulls = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        nulls.append(mi_knn(rng.integers(0, 2, 1000), rng.normal(size=1000), seed=seed))
    q95 = float(np.quantile(nulls, 0.95))
    rng = np.random.default_rng(11)
    x = rng.integers(0, 2, 5000)
    gauss = mi_knn(x, rng.normal(size=5000) + 2.0 * x)
    truth = gaussian_two_class_mi(2.0)
    ok = abs(kl - 0.188722) <= 1e-6 and abs(mi - 0.188722) <= 1e-6 and q95 <= 0.05 and abs(gauss - truth) <= 0.05
    verdict(capsys, 4, ok, f"KL={kl:.6f} MI={mi:.6f} null q95={q95:.4f} knn={gauss:.4f} vs quadrature {truth:.4f}")


def test_criterion_5_repeater_signature(tmp_path, capsys):
    templates = synthetic_templates(20)
    write_schema(templates, tmp_path / "schema.csv")
    write_norms(tmp_path / "norms.csv", synthetic_norms())
    strategy = {"name": "prime_repeater", "repeat_prob": 0.9}
    base = make_config(tmp_path, strategy, n_per_cell=200)
    plans = report.cmd_plan(base, templates, write=False)
    start = time.perf_counter()
    top, gaps = 0, []
    for seed in range(20):
        cfg = make_config(tmp_path, strategy, n_per_cell=200, seed=seed, output_dir=str(tmp_path / f"s{seed}"))
        rep, _ = pipeline(cfg, plans, templates)
        top += rep["mi_ranking"]["primed"][0] == "prime_gender"
        est = {(e["template_id"], e["setting"]): e for e in rep["estimates"] if e["order"] == POOLED}
        cells = [e for e in rep["estimates"] if e["order"] != POOLED]
        assert min(e["n_valid"] for e in cells) >= 200
        gaps.append(np.mean([abs(est[(t.template_id, "primed_feminine")]["p_hat"]
                                 - est[(t.template_id, "primed_masculine")]["p_hat"]) for t in templates]))
    elapsed = time.perf_counter() - start
    gap = float(np.mean(gaps))
    ok = top / 20 >= 0.95 and 0.73 <= gap <= 0.87 and elapsed < 120
    verdict(capsys, 5, ok, f"prime_gender top in {top}/20 seeds, mean gap {gap:.3f}, {elapsed:.1f}s")


def test_criterion_6_stereotype_washout(tmp_path, capsys):
    templates = synthetic_templates(100)
    write_schema(templates, tmp_path / "schema.csv")
    write_norms(tmp_path / "norms.csv", synthetic_norms())
    follower = {"name": "stereotype_follower", "norms_table": str(tmp_path / "norms.csv"), "slope": 0.8}
    cfg = make_config(tmp_path, follower, n_per_cell=50, settings=["unprimed"], output_dir=str(tmp_path / "u"))
    sp = report.cmd_stats(cfg, report.cmd_run(cfg, templates=templates)[0], templates)["data"]["spearman"]
    unprimed = sp["unprimed"]

    repeater = {"name": "prime_repeater", "repeat_prob": 0.95}
    composite = {"name": "composite", "default": follower,
                 "by_setting": {"primed_feminine": repeater, "primed_masculine": repeater}}
    primed = ["primed_feminine", "primed_masculine"]
    washed, rhos = 0, []
    for seed in range(20):
        cfg = make_config(tmp_path, composite, n_per_cell=20, settings=["unprimed"] + primed, seed=seed,
                          output_dir=str(tmp_path / f"c{seed}"))
        sp = report.cmd_stats(cfg, report.cmd_run(cfg, templates=templates)[0], templates)["data"]["spearman"]
        r = [sp[s]["rho"] for s in primed]
        rhos.extend(r)
        washed += all(abs(v) < 0.2 for v in r)
    ok = unprimed["rho"] >= 0.9 and unprimed["p_value"] < 0.001 and washed / 20 >= 0.8
    verdict(capsys, 6, ok, f"unprimed rho={unprimed['rho']:.3f} p={unprimed['p_value']:.2g}; "
                           f"primed |rho|<0.2 in {washed}/20 seeds (max |rho| {max(map(abs, rhos)):.3f})")


def designed_rate(tmp_path, name, cells, seeds):
    templates = synthetic_templates(1)[:2]
    write_schema(templates, tmp_path / "schema.csv")
    write_norms(tmp_path / "norms.csv", synthetic_norms())
    entries = design_entries(templates, {o: cells for o in ("masc_fem", "fem_masc")})
    flagged = 0
    for seed in range(seeds):
        cfg = make_config(tmp_path, {"name": "fixed_table", "entries": entries}, n_per_cell=200, seed=seed,
                          bootstrap=1000, settings=["primed_feminine", "primed_masculine"],
                          output_dir=str(tmp_path / f"{name}{seed}"))
        mlog, _ = report.cmd_run(cfg, templates=templates)
        flagged += report.cmd_cbd(cfg, mlog, templates)["data"]["summary"]["pooled"]["contextual"] > 0
    return flagged / seeds


def test_criterion_7_designed_detection(tmp_path, capsys):
    design = CBD_SCENARIOS["cbd_designed_1.8"]
    repetition = CBD_SCENARIOS["cbd_repetition"]
    assert designed_delta_c(design) == pytest.approx(1.8)
    hit = designed_rate(tmp_path, "d", design, 50)
    false = designed_rate(tmp_path, "r", repetition, 50)
    verdict(capsys, 7, hit >= 0.95 and false <= 0.07,
            f"designed 1.8 flagged {hit:.0%}, repetition-only flagged {false:.0%} (CI gate)")


def test_criterion_8_collection_contract(tmp_path, capsys):
    templates = synthetic_templates(10)
    write_schema(templates, tmp_path / "schema.csv")
    write_norms(tmp_path / "norms.csv", synthetic_norms())
    strategy = {"name": "prime_repeater", "repeat_prob": 0.8}

    # resume: cut the log mid-run, then complete it
    cfg = make_config(tmp_path, strategy, n_per_cell=10, output_dir=str(tmp_path / "full"))
    plans = report.cmd_plan(cfg, templates)
    report.cmd_run(cfg, plans, templates)
    path = cfg.out / report.LOG_FILE
    lines = path.read_text().splitlines()
    keep = lines[: 1 + (len(lines) - 1) * 2 // 5]
    path.write_text("\n".join(keep) + "\n")
    kept = {json.loads(ln)["trial_id"] for ln in keep[1:]}
    report.cmd_run(cfg, plans, templates)
    added = [json.loads(ln)["trial_id"] for ln in path.read_text().splitlines()[len(keep):]]
    missing = {p.trial_id for p in plans} - kept
    resume_ok = sorted(added) == sorted(missing)

    # pool size and shuffled logs
    reference = None
    identical = True
    for workers in (1, 3, 8):
        c = make_config(tmp_path, strategy, n_per_cell=10, output_dir=str(tmp_path / f"w{workers}"),
                        backend={"max_in_flight": workers})
        mlog, _ = report.cmd_run(c, plans, templates)
        data = json.dumps(report.cmd_stats(c, mlog, templates)["data"], sort_keys=True)
        reference = reference or data
        identical &= data == reference
    log_path = tmp_path / "w1" / report.LOG_FILE
    body = log_path.read_text().splitlines()
    shuffled = body[1:]
    random.Random(5).shuffle(shuffled)
    log_path.write_text("\n".join(body[:1] + shuffled) + "\n")
    c = make_config(tmp_path, strategy, n_per_cell=10, output_dir=str(tmp_path / "w1"))
    identical &= json.dumps(report.cmd_stats(c, read_log(log_path), templates)["data"], sort_keys=True) == reference

    # injected malformation
    c = make_config(tmp_path, strategy, n_per_cell=10, output_dir=str(tmp_path / "mal"),
                    backend={"malformed_rate": 0.05})
    mlog, _ = report.cmd_run(c, plans, templates)
    validity = report.cmd_validate(c, mlog, templates)["data"]
    injected = sum(injected_malformation(c.backend.seed, p.trial_id, 0.05) for p in plans)
    counts_ok = validity["total"] == len(plans) and validity["total"] - validity["valid"] == injected
    verdict(capsys, 8, resume_ok and identical and counts_ok,
            f"resume added {len(added)} of {len(missing)} missing, stats identical={identical}, "
            f"invalid {validity['total'] - validity['valid']} vs injected {injected}")


@pytest.mark.slow
def test_criterion_9_scale(tmp_path, capsys):
    templates = synthetic_templates(180)
    write_schema(templates, tmp_path / "schema.csv")
    write_norms(tmp_path / "norms.csv", synthetic_norms())
    entries = design_entries(templates, {o: (0.3, 0.7, 0.6, 0.4) for o in ("masc_fem", "fem_masc")})
    cfg = make_config(tmp_path, {"name": "fixed_table", "entries": entries, "default": 0.5}, n_per_cell=200,
                      bootstrap=200, metaprompt_n=5)
    start = time.perf_counter()
    plans = report.cmd_plan(cfg, templates)
    mlog, status = report.cmd_run(cfg, plans, templates)
    frags = [report.cmd_validate(cfg, mlog, templates), report.cmd_stats(cfg, mlog, templates),
             report.cmd_cbd(cfg, mlog, templates), report.cmd_metaprompt(cfg, templates)]
    report.cmd_report(frags, cfg.out)
    elapsed = time.perf_counter() - start
    tables = sorted(p.name for p in (cfg.out / "tables").iterdir())
    expected = sorted(["validity.csv", "estimates.csv", "distributions.csv", "mean_kl.csv", "spearman.csv",
                       "mutual_information.csv", "cbd_results.csv", "cbd_summary.csv", "cbd_overlap.csv",
                       "metaprompt.csv"])
    ok = len(plans) == 720_000 and status == 0 and tables == expected and elapsed < 300
    verdict(capsys, 9, ok, f"{len(plans)} trials, {len(tables)} tables, {elapsed:.1f}s")


def test_criterion_10_live_endpoint(tmp_path, capsys):
    templates = synthetic_templates(3)
    write_schema(templates, tmp_path / "schema.csv")
    write_norms(tmp_path / "norms.csv", synthetic_norms())
    endpoint = os.environ.get("INVARIANCE_AUDIT_ENDPOINT")

    def go(url, model, key_env):
        cfg = report.RunConfig.from_dict({
            "schema": str(tmp_path / "schema.csv"), "norms": str(tmp_path / "norms.csv"),
            "output_dir": str(tmp_path / "live"), "n_per_cell": 2, "bootstrap": 100, "metaprompt_n": 1,
            "backend": {"kind": "http_chat", "endpoint": url, "model_name": model, "credentials": key_env,
                        "max_in_flight": 4},
        })
        plans = report.cmd_plan(cfg, templates[:5])
        mlog, status = report.cmd_run(cfg, plans)
        frags = [report.cmd_validate(cfg, mlog), report.cmd_stats(cfg, mlog), report.cmd_cbd(cfg, mlog),
                 report.cmd_metaprompt(cfg)]
        return plans, status, frags[0]["data"], report.cmd_report(frags, cfg.out)

    if endpoint:
        target = endpoint
        plans, status, validity, rep = go(endpoint, os.environ.get("INVARIANCE_AUDIT_MODEL", "default"),
                                          os.environ.get("INVARIANCE_AUDIT_KEY_ENV", "OPENAI_API_KEY"))
    else:
        target = "local stub"
        with StubServer() as srv:
            plans, status, validity, rep = go(srv.url, "stub", None)
    complete = all(not (isinstance(rep[k], dict) and rep[k].get("absent"))
                   for k in ("validity", "estimates", "mean_kl", "mutual_information", "cbd", "metaprompt"))
    ok = status == 0 and validity["overall"] >= 0.9 and complete
    verdict(capsys, 10, ok, f"{target}: {len(plans)} trials, validity {validity['overall']:.1%}, report complete={complete}")
