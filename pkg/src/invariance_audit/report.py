"""Run configuration, pipeline commands and report assembly.

Every command reads a :class:`RunConfig` and writes fixed filenames under the
run directory. Reports are deterministic JSON (sorted keys) plus flat CSV
tables, one per figure or table analogue.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import yaml

from . import cbd, collector, stats
from .backend import BackendConfig, Gateway
from .errors import AnalysisError, ConfigError, HeaderMismatchError
from .rng import substream_seed
from .schema import ContextSetting, OptionOrder, Template, load_schema, pair_index, schema_hash

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_COLLECTION = 3
EXIT_ANALYSIS = 4

PLAN_FILE = "plan.jsonl"
LOG_FILE = "log.jsonl"
STATS_FILE = "stats.json"
CBD_FILE = "cbd.json"
VALIDITY_FILE = "validity.json"
METAPROMPT_FILE = "metaprompt.json"
REPORT_FILE = "report.json"
TABLES_DIR = "tables"


@dataclass(frozen=True)
class CbdConfig:
    estimator: str = "mixture"
    tol: float = 0.0
    prime_rate: float | None = None
    pooling: str = "either"
    gate: str = "ci"

    def __post_init__(self):
        if self.estimator not in cbd.ESTIMATORS:
            raise ConfigError(f"must be one of {cbd.ESTIMATORS}", "cbd.estimator")
        if self.tol < 0:
            raise ConfigError("must be >= 0", "cbd.tol")
        if self.pooling not in cbd.POOLING_RULES:
            raise ConfigError(f"must be one of {cbd.POOLING_RULES}", "cbd.pooling")
        if self.gate not in ("point", "ci"):
            raise ConfigError("must be 'point' or 'ci'", "cbd.gate")
        if self.prime_rate is not None and not 0 <= self.prime_rate <= 1:
            raise ConfigError("must lie in [0, 1]", "cbd.prime_rate")


@dataclass(frozen=True)
class RunConfig:
    schema: str
    backend: BackendConfig = BackendConfig()
    norms: str | None = None
    aliases: str | None = None
    settings: tuple[ContextSetting, ...] = tuple(ContextSetting)
    orders: tuple[OptionOrder, ...] = tuple(OptionOrder)
    n_per_cell: int = collector.DEFAULT_N_PER_CELL
    kl_smoothing: float = 0.5
    mi_k: int = 3
    mi_folds: int = 10
    cbd: CbdConfig = CbdConfig()
    bootstrap: int = 1000
    spearman_permutations: int = 0
    metaprompt_n: int = 40
    output_dir: str = "run"
    seed: int = 0

    def __post_init__(self):
        if self.n_per_cell < 1:
            raise ConfigError("must be >= 1", "n_per_cell")
        if self.kl_smoothing < 0:
            raise ConfigError("must be >= 0", "kl_smoothing")
        if self.mi_k < 1:
            raise ConfigError("must be >= 1", "mi_k")
        if self.bootstrap and self.bootstrap < 100:
            raise ConfigError("must be 0 (off) or >= 100", "bootstrap")
        if not self.settings:
            raise ConfigError("must list at least one setting", "settings")

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base: Path | None = None) -> "RunConfig":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "config")
        if not data.get("schema"):
            raise ConfigError("required", "schema")

        def resolve(p):
            if p is None or base is None or Path(p).is_absolute():
                return p
            return str((base / p).resolve())

        for key in ("schema", "norms", "aliases", "output_dir"):
            if key in data:
                data[key] = resolve(data[key])
        for key in ("schema", "norms", "aliases"):
            if data.get(key) and not Path(data[key]).exists():
                raise ConfigError(f"file not found: {data[key]}", key)
        backend = dict(data.get("backend") or {})
        if "seed" not in backend:
            backend["seed"] = substream_seed(int(data.get("seed", 0)), "mocks")
        strategy = backend.get("strategy")
        if isinstance(strategy, dict) and isinstance(strategy.get("norms_table"), str):
            strategy = dict(strategy, norms_table=resolve(strategy["norms_table"]))
            backend["strategy"] = strategy
        data["backend"] = BackendConfig.from_dict(backend)
        try:
            if "settings" in data:
                data["settings"] = tuple(ContextSetting(s) for s in data["settings"])
            if "orders" in data:
                data["orders"] = tuple(OptionOrder(o) for o in data["orders"])
        except ValueError as exc:
            raise ConfigError(str(exc), "settings/orders") from None
        if "cbd" in data:
            data["cbd"] = CbdConfig(**(data["cbd"] or {}))
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        return cls.from_dict(data, base=path.parent)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["backend"] = self.backend.to_dict()
        d["settings"] = [s.value for s in self.settings]
        d["orders"] = [o.value for o in self.orders]
        return d

    def collection_hash(self) -> str:
        """Identity of a collection run: backend behaviour and the trial grid, not pool size or analysis knobs."""
        b = self.backend.to_dict()
        for key in ("max_in_flight", "retry", "timeout", "credentials"):
            b.pop(key, None)
        ident = {"backend": b, "settings": [s.value for s in self.settings],
                 "orders": [o.value for o in self.orders], "n_per_cell": self.n_per_cell}
        return hashlib.sha256(json.dumps(ident, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _dump(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False, default=_jsonable) + "\n"


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (set, frozenset)):
        return sorted(v)
    if hasattr(v, "value"):
        return v.value
    raise TypeError(f"not JSON serialisable: {type(v)}")


# ---------------------------------------------------------------------------
# commands


def cmd_plan(config: RunConfig, templates: list[Template] | None = None, write: bool = True) -> list[collector.TrialPlan]:
    templates = templates if templates is not None else load_schema(config.schema)
    plans = collector.plan_trials(templates, config.settings, config.orders, config.n_per_cell)
    if write:
        config.out.mkdir(parents=True, exist_ok=True)
        collector.write_plan(plans, config.out / PLAN_FILE)
    log.info("planned %d trials: %d templates x %d settings x %d orders x %d",
             len(plans), len(templates), len(config.settings), len(config.orders), config.n_per_cell)
    return plans


def run_header(config: RunConfig, templates: list[Template]) -> collector.RunHeader:
    return collector.RunHeader(schema_hash(templates), config.collection_hash())


def cmd_run(config: RunConfig, plans: list[collector.TrialPlan] | None = None,
            templates: list[Template] | None = None, gateway: Gateway | None = None,
            workers: int | None = None, progress=None) -> tuple[collector.MeasurementLog, int]:
    """Collect every missing trial; exit status is nonzero if any trial is left with a backend error."""
    templates = templates if templates is not None else load_schema(config.schema)
    if plans is None:
        plan_path = config.out / PLAN_FILE
        plans = collector.read_plan(plan_path) if plan_path.exists() else cmd_plan(config, templates)
    own = gateway is None
    gateway = gateway or Gateway(config.backend)
    try:
        result = collector.run(plans, gateway, config.out / LOG_FILE, run_header(config, templates),
                               workers=workers, progress=progress)
    finally:
        if own:
            gateway.close()
    latest = result.latest()
    planned = {p.trial_id for p in plans}
    failed = [m for m in latest if m.trial_id in planned and m.validity is collector.Validity.BACKEND_ERROR]
    rep = collector.validity_report([m for m in latest if m.trial_id in planned])
    log.info("collected %d records, validity %.4f, %d backend errors", rep["total"], rep["overall"] or 0.0,
             len(failed))
    return result, EXIT_COLLECTION if failed else EXIT_OK


def _provenance(config: RunConfig, templates: list[Template], log_path: Path | None) -> dict[str, Any]:
    return {
        "config": config.to_dict(),
        "schema_hash": schema_hash(templates),
        "collection_hash": config.collection_hash(),
        "log_hash": collector.log_digest(log_path) if log_path and log_path.exists() else None,
    }


def _header_json(mlog: collector.MeasurementLog) -> dict[str, Any] | None:
    return asdict(mlog.header) if mlog.header else None


def _fragment(kind: str, mlog: collector.MeasurementLog, provenance: dict[str, Any], data: dict[str, Any]) -> dict:
    return {"kind": kind, "run_header": _header_json(mlog), "provenance": provenance, "data": data}


def cmd_validate(config: RunConfig, mlog: collector.MeasurementLog | None = None,
                 templates: list[Template] | None = None) -> dict[str, Any]:
    templates = templates if templates is not None else load_schema(config.schema)
    mlog = mlog if mlog is not None else collector.read_log(config.out / LOG_FILE)
    frag = _fragment("validity", mlog, _provenance(config, templates, config.out / LOG_FILE),
                     collector.validity_report(mlog))
    _write_json(config.out / VALIDITY_FILE, frag)
    return frag


def distribution_series(estimates: Mapping, template_ids: Iterable[str], settings: Sequence[ContextSetting],
                        bins: int = 20) -> dict[str, Any]:
    """Per-setting p-hat values, a histogram on [0, 1] and the mass at the extremes."""
    out = {}
    ids = sorted(template_ids)
    edges = np.linspace(0.0, 1.0, bins + 1)
    for s in settings:
        vals = [estimates[(t, s.value, stats.POOLED)].p_hat for t in ids if (t, s.value, stats.POOLED) in estimates]
        counts, _ = np.histogram(vals, bins=edges)
        out[s.value] = {
            "p_hat": sorted(vals),
            "bin_edges": [round(float(e), 10) for e in edges],
            "counts": [int(c) for c in counts],
            "at_zero": sum(v == 0.0 for v in vals),
            "at_one": sum(v == 1.0 for v in vals),
            "n_templates": len(vals),
        }
    return out


def cmd_stats(config: RunConfig, mlog: collector.MeasurementLog | None = None,
              templates: list[Template] | None = None) -> dict[str, Any]:
    """Estimates, distributions, mean KL, Spearman and MI over the valid template set."""
    templates = templates if templates is not None else load_schema(config.schema)
    mlog = mlog if mlog is not None else collector.read_log(config.out / LOG_FILE)
    if not mlog.records:
        raise AnalysisError("measurement log is empty")
    ests = stats.estimate(mlog)
    index = stats.index_estimates(ests)
    known = {t.template_id for t in templates}
    valid = stats.valid_template_set(index, config.settings) & known
    if not valid:
        raise AnalysisError("no template has valid measurements in every configured setting")
    norms = stats.load_norms(config.norms, config.aliases) if config.norms else None
    ratings = stats.join_norms(templates, norms) if norms else {}

    kl = {}
    if ContextSetting.UNPRIMED in config.settings:
        for s in config.settings:
            if s is ContextSetting.UNPRIMED:
                continue
            kl[s.value] = {"mean_kl_bits": stats.mean_kl(index, s, ContextSetting.UNPRIMED, valid,
                                                          config.kl_smoothing),
                           "n_templates": len(valid), "smoothing": config.kl_smoothing}
    spearman = {}
    if norms is not None:
        spearman = stats.spearman_by_setting(index, ratings, config.settings, valid,
                                             config.spearman_permutations, substream_seed(config.seed, "spearman"))
    regimes = {name: settings for name, settings in stats.REGIMES.items()
               if all(s in config.settings for s in settings)}
    mi = stats.feature_mi_table([m for m in mlog.latest() if m.template_id in valid], templates, norms, regimes,
                                k=config.mi_k, seed=substream_seed(config.seed, "mi_noise"), n_folds=config.mi_folds)
    data = {
        "valid_template_set": sorted(valid),
        "n_templates": len(templates),
        "n_matched_norms": sum(v is not None for v in ratings.values()),
        "estimates": [e.to_json() for e in ests],
        "distributions": distribution_series(index, valid, config.settings),
        "mean_kl": kl,
        "spearman": spearman,
        "mutual_information": mi,
        "mi_ranking": {regime: stats.rank_features(table) for regime, table in mi.items()},
    }
    frag = _fragment("stats", mlog, _provenance(config, templates, config.out / LOG_FILE), data)
    _write_json(config.out / STATS_FILE, frag)
    return frag


def cbd_results(config: RunConfig, index: Mapping, pairs: Sequence) -> list[cbd.DeltaCResult]:
    results = []
    for pair in pairs:
        for order in config.orders:
            seed = substream_seed(config.seed, f"bootstrap/{pair.pair_id}/{order.value}")
            results.append(cbd.pair_analysis(index, pair, order, config.cbd.estimator, config.cbd.tol,
                                             config.cbd.prime_rate, config.bootstrap or None, seed))
    return results


def cmd_cbd(config: RunConfig, mlog: collector.MeasurementLog | None = None,
            templates: list[Template] | None = None,
            compare: Mapping[str, Sequence[Mapping[str, Any]]] | None = None) -> dict[str, Any]:
    """Per-pair, per-order contextuality plus summaries; ``compare`` adds other runs' results for overlaps."""
    templates = templates if templates is not None else load_schema(config.schema)
    mlog = mlog if mlog is not None else collector.read_log(config.out / LOG_FILE)
    primed = (ContextSetting.PRIMED_FEMININE, ContextSetting.PRIMED_MASCULINE)
    if not all(s in config.settings for s in primed):
        raise AnalysisError("contextuality needs both discourse-primed settings")
    index = stats.index_estimates(stats.estimate(mlog))
    results = cbd_results(config, index, pair_index(templates))
    runs = {"this_run": results}
    for name, rows in (compare or {}).items():
        runs[name] = [_result_from_json(r) for r in rows]
    summary = cbd.contextuality_summary(runs, config.cbd.pooling, config.cbd.gate)
    point = cbd.contextuality_summary({"this_run": results}, config.cbd.pooling, "point")["this_run"]
    data = {
        "estimator": config.cbd.estimator,
        "tol": config.cbd.tol,
        "gate": config.cbd.gate,
        "pooling": config.cbd.pooling,
        "bootstrap": config.bootstrap,
        "results": [r.to_json() for r in results],
        "summary": summary["this_run"].to_json(),
        "summary_point_gate": point.to_json(),
        "overlap": summary["this_run"].overlap,
    }
    frag = _fragment("cbd", mlog, _provenance(config, templates, config.out / LOG_FILE), data)
    _write_json(config.out / CBD_FILE, frag)
    return frag


def _result_from_json(d: Mapping[str, Any]) -> cbd.DeltaCResult:
    ci = tuple(d["ci"]) if d.get("ci") else None
    return cbd.DeltaCResult(d["pair_id"], OptionOrder(d["order"]), d.get("delta_c"), bool(d["contextual"]),
                            d.get("estimator", "mixture"), d.get("tol", 0.0), ci, skipped=d.get("skipped"))


def cmd_metaprompt(config: RunConfig, templates: list[Template] | None = None,
                   gateway: Gateway | None = None, n_per_question: int | None = None) -> dict[str, Any]:
    templates = templates if templates is not None else load_schema(config.schema)
    own = gateway is None
    gateway = gateway or Gateway(config.backend)
    try:
        accuracy, trials = collector.run_metaprompts(templates, gateway, n_per_question or config.metaprompt_n,
                                                     config.settings, config.orders)
    finally:
        if own:
            gateway.close()
    counts = {}
    for kind in collector.QUESTION_KINDS:
        rows = [t for t in trials if t.question_kind == kind]
        counts[kind] = {"correct": sum(t.correct for t in rows), "total": len(rows), "accuracy": accuracy[kind]}
    frag = {"kind": "metaprompt", "run_header": None,
            "provenance": {"config": config.to_dict(), "schema_hash": schema_hash(templates)},
            "data": counts}
    _write_json(config.out / METAPROMPT_FILE, frag)
    return frag


def _write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dump(obj), encoding="utf-8")


# ---------------------------------------------------------------------------
# report assembly

def cmd_report(fragments: Sequence[Mapping[str, Any]], out_dir: str | Path) -> dict[str, Any]:
    """Merge fragments of one run into report.json plus flat CSV tables."""
    if not fragments:
        raise AnalysisError("no fragments to report")
    headers = {json.dumps(f.get("run_header"), sort_keys=True) for f in fragments if f.get("run_header")}
    if len(headers) > 1:
        raise HeaderMismatchError("fragments come from different runs")
    by_kind = {f["kind"]: f for f in fragments}
    base = by_kind.get("stats") or by_kind.get("cbd") or by_kind.get("validity") or fragments[0]
    report: dict[str, Any] = {
        "run_header": base.get("run_header"),
        "provenance": base.get("provenance"),
        "validity": by_kind["validity"]["data"] if "validity" in by_kind else {"absent": True},
    }
    if "stats" in by_kind:
        d = by_kind["stats"]["data"]
        for key in ("valid_template_set", "estimates", "distributions", "mean_kl", "spearman",
                    "mutual_information", "mi_ranking", "n_matched_norms"):
            report[key] = d[key]
    else:
        report["stats"] = {"absent": True}
    report["cbd"] = by_kind["cbd"]["data"] if "cbd" in by_kind else {"absent": True}
    report["metaprompt"] = by_kind["metaprompt"]["data"] if "metaprompt" in by_kind else {"absent": True}
    out_dir = Path(out_dir)
    _write_json(out_dir / REPORT_FILE, report)
    write_tables(report, out_dir / TABLES_DIR)
    return report


def _write_csv(path: Path, fieldnames: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in fieldnames})


def write_tables(report: Mapping[str, Any], tables: Path) -> list[str]:
    """Flat CSV per figure/table analogue; returns the file names written."""
    written = []

    def emit(name, fields, rows):
        _write_csv(tables / name, fields, rows)
        written.append(name)

    v = report.get("validity", {})
    if not v.get("absent"):
        emit("validity.csv", ["setting", "order", "valid", "total", "fraction"], v.get("cells", []))
    if "estimates" in report:
        emit("estimates.csv", ["template_id", "setting", "order", "n_valid", "n_feminine", "p_hat"],
             report["estimates"])
        rows = []
        for setting, series in report["distributions"].items():
            for lo, hi, c in zip(series["bin_edges"], series["bin_edges"][1:], series["counts"]):
                rows.append({"setting": setting, "bin_lo": lo, "bin_hi": hi, "count": c,
                             "at_zero": series["at_zero"], "at_one": series["at_one"]})
        emit("distributions.csv", ["setting", "bin_lo", "bin_hi", "count", "at_zero", "at_one"], rows)
        emit("mean_kl.csv", ["setting", "mean_kl_bits", "n_templates", "smoothing"],
             [{"setting": s, **row} for s, row in report["mean_kl"].items()])
        emit("spearman.csv", ["setting", "rho", "p_value", "p_permutation", "n", "flag"],
             [{"setting": s, **row} for s, row in report["spearman"].items()])
        emit("mutual_information.csv", ["regime", "feature", "mi_bits", "se", "n", "estimator"],
             [{"regime": r, "feature": f, **row} for r, table in report["mutual_information"].items()
              for f, row in table.items()])
    c = report.get("cbd", {})
    if not c.get("absent"):
        emit("cbd_results.csv", ["pair_id", "order", "delta_c", "contextual", "contextual_ci", "ci_lo", "ci_hi",
                                 "estimator", "skipped"],
             [{**r, "ci_lo": r["ci"][0] if r["ci"] else None, "ci_hi": r["ci"][1] if r["ci"] else None}
              for r in c["results"]])
        summ = c["summary"]
        rows = [{"scope": order, **vals} for order, vals in summ["per_order"].items()]
        rows.append({"scope": f"pooled_{summ['pooled']['rule']}", **{k: summ["pooled"][k]
                                                                   for k in ("contextual", "analysed", "fraction")}})
        emit("cbd_summary.csv", ["scope", "contextual", "analysed", "fraction"], rows)
        names = sorted(c["overlap"])
        emit("cbd_overlap.csv", ["run", *names], [{"run": a, **c["overlap"][a]} for a in names])
    m = report.get("metaprompt", {})
    if not m.get("absent"):
        emit("metaprompt.csv", ["question_kind", "correct", "total", "accuracy"],
             [{"question_kind": k, **row} for k, row in m.items()])
    return written


def load_fragment(path: str | Path) -> dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# simulation / power mode

CBD_SCENARIOS: dict[str, tuple[float, float, float, float]] = {
    # (first member p(f|c_f), p(f|c_m), second member p(f|c_f), p(f|c_m))
    "cbd_null": (0.5, 0.5, 0.5, 0.5),
    "cbd_repetition": (0.95, 0.05, 0.95, 0.05),
    "cbd_designed_0.5": (0.95, 0.15, 0.6, 0.6),
    "cbd_designed_1.8": (0.05, 0.95, 0.95, 0.05),
}
SCENARIOS = (*CBD_SCENARIOS, "stereotype", "repeater")


def designed_delta_c(cells: tuple[float, float, float, float], prime_rate: float = 0.5) -> float:
    a_f, a_m, b_f, b_m = cells
    counts = cbd.PairCounts((10**6, round(a_f * 10**6)), (10**6, round(a_m * 10**6)),
                            (10**6, round(b_f * 10**6)), (10**6, round(b_m * 10**6)))
    return cbd.delta_c(cbd.steering_system(counts, prime_rate=prime_rate))


def _simulate_cbd(cells, n, seeds, rng_seed, bootstrap, tol):
    rng = np.random.default_rng(rng_seed)
    point = gated = 0
    for s in range(seeds):
        ks = rng.binomial(n, cells)
        counts = cbd.PairCounts(*((n, int(k)) for k in ks))
        dc = cbd.delta_c(cbd.steering_system(counts))
        hit = cbd.is_contextual(dc, tol)
        point += hit
        if hit:
            lo, _ = cbd.bootstrap_ci(counts, bootstrap, int(rng.integers(2**63 - 1)))
            gated += lo > 0
    return {"point": point / seeds, "ci_gate": gated / seeds}


def _simulate_stereotype(n, seeds, rng_seed, n_pairs=20, slope=0.8):
    from .synthetic import synthetic_norms, synthetic_templates

    templates = synthetic_templates(n_pairs)
    norms = synthetic_norms()
    ratings = np.array([norms[t.target_noun] for t in templates])
    p = np.clip(0.5 + slope * (ratings - 0.5), 0, 1)
    rng = np.random.default_rng(rng_seed)
    hits = 0
    for _ in range(seeds):
        p_hat = rng.binomial(n, p) / n
        res = stats.spearman(ratings, p_hat)
        hits += bool(res.rho > 0 and res.p_value < 0.05)
    return {"spearman_detect": hits / seeds}


def _simulate_repeater(n, seeds, rng_seed, n_pairs=20, repeat_prob=0.9):
    from .synthetic import synthetic_templates

    templates = synthetic_templates(n_pairs)
    rng = np.random.default_rng(rng_seed)
    hits = 0
    n_t = len(templates)
    role = np.repeat([t.target_role_kind.value for t in templates], 2 * n)
    case = np.repeat([t.pronoun_case.value for t in templates], 2 * n)
    prime = np.tile(np.repeat([1, 0], n), n_t)
    order = rng.integers(0, 2, size=prime.size)
    for _ in range(seeds):
        p = np.where(prime == 1, repeat_prob, 1 - repeat_prob)
        x = (rng.random(prime.size) < p).astype(int)
        mi = {"prime_gender": stats.mi_discrete(x, prime), "role_type": stats.mi_discrete(x, role),
              "case": stats.mi_discrete(x, case), "order": stats.mi_discrete(x, order)}
        hits += max(mi, key=mi.get) == "prime_gender"
    return {"prime_gender_top": hits / seeds}


def cmd_simulate(config: RunConfig | None, scenario: str, n_grid: Sequence[int] = (50, 200, 800),
                 seeds: int = 200, bootstrap: int = 200) -> dict[str, Any]:
    """Detection rate of each signature versus trials per cell, by Monte Carlo over seeds."""
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}", "scenario")
    if any(n < 1 for n in n_grid):
        raise ValueError("every n in the grid must be >= 1")
    if seeds < 1:
        raise ValueError("seeds must be >= 1")
    seed = config.seed if config else 0
    tol = config.cbd.tol if config else 0.0
    rows = []
    for n in n_grid:
        sub = substream_seed(seed, f"simulate/{scenario}/{n}")
        if scenario in CBD_SCENARIOS:
            rates = _simulate_cbd(np.array(CBD_SCENARIOS[scenario]), n, seeds, sub, bootstrap, tol)
        elif scenario == "stereotype":
            rates = _simulate_stereotype(n, seeds, sub)
        else:
            rates = _simulate_repeater(n, seeds, sub)
        rows.append({"n_per_cell": n, **rates})
    out = {"scenario": scenario, "seeds": seeds, "bootstrap": bootstrap, "rows": rows}
    if scenario in CBD_SCENARIOS:
        out["design_delta_c"] = designed_delta_c(CBD_SCENARIOS[scenario])
    return out


__all__ = [
    "CbdConfig", "RunConfig", "cmd_cbd", "cmd_metaprompt", "cmd_plan", "cmd_report", "cmd_run",
    "cmd_simulate", "cmd_stats", "cmd_validate", "load_fragment", "write_tables",
]
