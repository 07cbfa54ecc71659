"""Bernoulli estimates and distribution-level statistics over measurement logs."""

from __future__ import annotations

import csv
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy import special
from scipy import stats as sps

from .backend import normalize_noun
from .collector import Measurement, MeasurementLog
from .errors import AnalysisError, DomainError
from .schema import ContextSetting, Gender, OptionOrder, Template

POOLED = "pooled"
LN2 = math.log(2.0)


@dataclass(frozen=True)
class BernoulliEstimate:
    template_id: str
    setting: str
    order: str  # an OptionOrder value or POOLED
    n_valid: int
    n_feminine: int

    @property
    def p_hat(self) -> float:
        return self.n_feminine / self.n_valid

    def to_json(self) -> dict[str, Any]:
        return {"template_id": self.template_id, "setting": self.setting, "order": self.order,
                "n_valid": self.n_valid, "n_feminine": self.n_feminine, "p_hat": self.p_hat}


def _records(log: MeasurementLog | Iterable[Measurement]) -> list[Measurement]:
    return log.latest() if isinstance(log, MeasurementLog) else list(log)


# enum -> value lookups; Enum.value is a descriptor call and dominates tight loops
_VALUE = {e: e.value for kind in (ContextSetting, OptionOrder) for e in kind}
_PRIME = {s: (s.prime_gender.value if s.prime_gender else "none") for s in ContextSetting}


def estimate(log: MeasurementLog | Iterable[Measurement]) -> list[BernoulliEstimate]:
    """Per-order and pooled-order estimates for every cell with valid trials.

    Invalid measurements are ignored. Output is sorted, so it does not depend
    on record order.
    """
    counts: dict[tuple[str, str, str], list[int]] = defaultdict(lambda: [0, 0])
    for m in _records(log):
        if not m.is_valid:
            continue
        fem = m.gender is Gender.FEMININE
        for order in (_VALUE[m.order], POOLED):
            c = counts[(m.template_id, _VALUE[m.setting], order)]
            c[0] += 1
            c[1] += fem
    return [BernoulliEstimate(t, s, o, n, k) for (t, s, o), (n, k) in sorted(counts.items())]


def index_estimates(estimates: Iterable[BernoulliEstimate]) -> dict[tuple[str, str, str], BernoulliEstimate]:
    return {(e.template_id, e.setting, e.order): e for e in estimates}


def valid_template_set(estimates: Mapping[tuple[str, str, str], BernoulliEstimate] | Iterable[BernoulliEstimate],
                       settings: Iterable[ContextSetting | str]) -> set[str]:
    """Templates with at least one valid pooled measurement in every listed setting."""
    if not isinstance(estimates, Mapping):
        estimates = index_estimates(estimates)
    settings = [ContextSetting(s).value for s in settings]
    templates = {t for (t, _, _) in estimates}
    return {t for t in templates
            if all((t, s, POOLED) in estimates and estimates[(t, s, POOLED)].n_valid > 0 for s in settings)}


# ---------------------------------------------------------------------------
# KL divergence

def smoothed_rate(p: float, n: int, eps: float) -> float:
    """Add-eps posterior mean (k + eps) / (n + 2 eps) with k = p n."""
    return (p * n + eps) / (n + 2 * eps)


def kl_bernoulli(p: float, q: float, smoothing: float = 0.0, n_p: int | None = None, n_q: int | None = None,
                 cell: str | None = None) -> float:
    """KL(Bernoulli(p) || Bernoulli(q)) in bits, with 0 log 0 = 0.

    With ``smoothing > 0`` both rates are replaced by their add-smoothing
    posterior means, which needs the trial counts ``n_p`` and ``n_q``.
    """
    if smoothing < 0:
        raise ValueError("smoothing must be >= 0")
    if not (0 <= p <= 1 and 0 <= q <= 1):
        raise DomainError(f"rates must lie in [0, 1], got p={p}, q={q}")
    if smoothing > 0:
        if n_p is None or n_q is None:
            raise ValueError("smoothing needs the counts n_p and n_q")
        p, q = smoothed_rate(p, n_p, smoothing), smoothed_rate(q, n_q, smoothing)
    total = 0.0
    for a, b in ((p, q), (1 - p, 1 - q)):
        if a == 0:
            continue
        if b == 0:
            where = f" for {cell}" if cell else ""
            raise DomainError(f"KL undefined{where}: reference rate {q} with p={p}; use smoothing > 0")
        total += a * math.log2(a / b)
    return max(total, 0.0)


def mean_kl(estimates: Mapping[tuple[str, str, str], BernoulliEstimate], setting: ContextSetting | str,
            baseline: ContextSetting | str = ContextSetting.UNPRIMED, valid_set: Iterable[str] | None = None,
            smoothing: float = 0.5, order: str = POOLED) -> float:
    """Mean over the valid template set of KL(p(f|setting) || p(f|baseline)) in bits."""
    setting = ContextSetting(setting).value
    baseline = ContextSetting(baseline).value
    if valid_set is None:
        valid_set = valid_template_set(estimates, [setting, baseline])
    valid_set = sorted(valid_set)
    if not valid_set:
        raise AnalysisError("empty valid template set")
    values = []
    for t in valid_set:
        a, b = estimates[(t, setting, order)], estimates[(t, baseline, order)]
        values.append(kl_bernoulli(a.p_hat, b.p_hat, smoothing, a.n_valid, b.n_valid, cell=f"{t}/{setting}"))
    return math.fsum(values) / len(values)


# ---------------------------------------------------------------------------
# Spearman

@dataclass(frozen=True)
class SpearmanResult:
    rho: float
    p_value: float
    n: int
    p_permutation: float | None = None
    flag: str | None = None

    def to_json(self) -> dict[str, Any]:
        def clean(v):
            return None if v is None or (isinstance(v, float) and math.isnan(v)) else v

        return {"rho": clean(self.rho), "p_value": clean(self.p_value), "n": self.n,
                "p_permutation": clean(self.p_permutation), "flag": self.flag}


def _rank_corr(rx: np.ndarray, ry: np.ndarray) -> float:
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    return float(np.dot(dx, dy) / math.sqrt(np.dot(dx, dx) * np.dot(dy, dy)))


def spearman(x: Sequence[float], y: Sequence[float], permutations: int = 0, seed: int = 0) -> SpearmanResult:
    """Tie-corrected Spearman correlation with a two-sided t-approximation p-value.

    Ties get average ranks and rho is the Pearson correlation of the ranks.
    ``permutations > 0`` adds a permutation p-value, which should be preferred
    when the two disagree near a significance threshold.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d and of equal length")
    n = len(x)
    if n < 3:
        raise ValueError(f"need at least 3 observations, got {n}")
    rx, ry = sps.rankdata(x), sps.rankdata(y)
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        return SpearmanResult(float("nan"), float("nan"), n, None, "constant_input")
    rho = max(-1.0, min(1.0, _rank_corr(rx, ry)))
    if abs(rho) >= 1.0:
        p = 0.0
    else:
        t = rho * math.sqrt((n - 2) / (1 - rho * rho))
        p = float(2 * sps.t.sf(abs(t), n - 2))
    p_perm = None
    if permutations:
        rng = np.random.default_rng(seed)
        dx = rx - rx.mean()
        perms = np.stack([rng.permutation(ry) for _ in range(permutations)])
        dp = perms - perms.mean(axis=1, keepdims=True)
        null = dp @ dx / np.sqrt(np.dot(dx, dx) * np.einsum("ij,ij->i", dp, dp))
        p_perm = float((1 + np.sum(np.abs(null) >= abs(rho) - 1e-12)) / (1 + permutations))
    return SpearmanResult(rho, p, n, p_perm)


# ---------------------------------------------------------------------------
# stereotype norms

@dataclass
class NormsTable:
    ratings: dict[str, float]
    aliases: dict[str, str] = field(default_factory=dict)
    provenance: str = ""

    def __post_init__(self):
        self.ratings = {normalize_noun(k): float(v) for k, v in self.ratings.items()}
        self.aliases = {normalize_noun(k): normalize_noun(v) for k, v in self.aliases.items()}
        bad = {k: v for k, v in self.ratings.items() if not 0.0 <= v <= 1.0}
        if bad:
            raise ValueError(f"femininity ratings outside [0, 1]: {bad}")

    def lookup(self, noun: str) -> float | None:
        key = normalize_noun(noun)
        if key in self.ratings:
            return self.ratings[key]
        alias = self.aliases.get(key)
        return self.ratings.get(alias) if alias is not None else None


def _read_table(path: str | Path) -> list[dict[str, str]]:
    path = Path(path)
    delimiter = "\t" if path.suffix in {".tsv", ".tab"} else ","
    return list(csv.DictReader(path.read_text(encoding="utf-8").splitlines(), delimiter=delimiter))


def load_norms(path: str | Path, alias_path: str | Path | None = None) -> NormsTable:
    """Norms file with columns (role_noun, femininity_rating); alias file with (alias, role_noun)."""
    ratings = {}
    for i, row in enumerate(_read_table(path), start=1):
        try:
            ratings[row["role_noun"]] = float(row["femininity_rating"])
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path} row {i}: need role_noun and numeric femininity_rating") from exc
    aliases = {}
    if alias_path is not None:
        aliases = {row["alias"]: row["role_noun"] for row in _read_table(alias_path)}
    return NormsTable(ratings, aliases, provenance=str(path))


def join_norms(templates: Iterable[Template], norms: NormsTable) -> dict[str, float | None]:
    """Stereotype rating of each template's target antecedent, or None when unmatched."""
    return {t.template_id: norms.lookup(t.target_noun) for t in templates}


# ---------------------------------------------------------------------------
# mutual information

def _codes(values: Sequence) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype == object:
        # mixed python objects compare unreliably; label by their text
        arr = np.asarray([str(v) for v in values])
    _, inverse = np.unique(arr, return_inverse=True)
    return inverse.ravel()


def mi_discrete(x: Sequence, f: Sequence) -> float:
    """Plug-in mutual information of two categorical samples, in bits."""
    if len(x) != len(f) or len(x) == 0:
        raise ValueError("x and f must be non-empty and of equal length")
    return _mi_codes(_codes(x), _codes(f))


def _mi_codes(cx: np.ndarray, cf: np.ndarray) -> float:
    """Plug-in MI of two arrays of nonnegative integer codes."""
    nx, nf = int(cx.max()) + 1, int(cf.max()) + 1
    table = np.bincount(cx * nf + cf, minlength=nx * nf).reshape(nx, nf)
    return mi_from_counts(table)


def mi_from_counts(table) -> float:
    table = np.asarray(table, dtype=float)
    n = table.sum()
    if n == 0:
        return 0.0
    pxy = table / n
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    value = float(np.sum(pxy[nz] * np.log2(pxy[nz] / (px @ py)[nz])))
    return max(value, 0.0)


class DegenerateClassWarning(UserWarning):
    """A class had too few members for the requested neighbour count."""


TIE_NOISE = 1e-10


def _kth_neighbour_distance(values: np.ndarray, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest other point, 1-d, any order."""
    order = np.argsort(values, kind="stable")
    s = values[order]
    n = len(s)
    pad = np.concatenate([np.full(k, -np.inf), s, np.full(k, np.inf)])
    idx = np.arange(n)[:, None] + k
    offsets = np.concatenate([np.arange(-k, 0), np.arange(1, k + 1)])
    dist = np.abs(pad[idx + offsets] - s[:, None])
    kth = np.partition(dist, k - 1, axis=1)[:, k - 1]
    out = np.empty(n)
    out[order] = kth
    return out


def _count_within(values: np.ndarray, radius: np.ndarray) -> np.ndarray:
    """Number of points strictly closer than ``radius[i]`` to ``values[i]``, itself included."""
    s = np.sort(values)
    n = len(s)
    hi = np.searchsorted(s, values + radius, side="right")
    lo = np.searchsorted(s, values - radius, side="left")
    # v + r can round across a boundary point; settle the window edges with exact distances
    while True:
        under = (hi < n) & (s[np.minimum(hi, n - 1)] - values < radius)
        if not under.any():
            break
        hi[under] += 1
    while True:
        under = (lo > 0) & (values - s[np.maximum(lo - 1, 0)] < radius)
        if not under.any():
            break
        lo[under] -= 1
    while True:
        over = (hi > 0) & (s[np.maximum(hi - 1, 0)] - values >= radius)
        if not over.any():
            break
        hi[over] -= 1
    while True:
        over = (lo < n) & (values - s[np.minimum(lo, n - 1)] >= radius)
        if not over.any():
            break
        lo[over] += 1
    return np.maximum(hi - lo, 1)


def mi_knn(x: Sequence, f: Sequence[float], k: int = 3, seed: int = 0, noise: float = TIE_NOISE) -> float:
    """Nearest-neighbour MI between a discrete target and a 1-d continuous feature, in bits.

    For each point, d is the distance to its k-th nearest neighbour among
    points of the same class, and m counts all points strictly closer than d
    (itself included). The estimate is
    psi(N) + <psi(k)> - <psi(N_class)> - <psi(m)>, clamped at 0. Points in
    singleton classes are dropped. Seeded Gaussian noise of relative size
    ``noise`` breaks distance ties.
    """
    labels = _codes(x)
    values = np.asarray(f, dtype=float).ravel()
    n = len(values)
    if len(labels) != n:
        raise ValueError("x and f must have equal length")
    if n < k + 1:
        raise ValueError(f"need at least k + 1 = {k + 1} samples, got {n}")
    scale = float(np.std(values)) or 1.0
    rng = np.random.default_rng(seed)
    values = values + noise * scale * rng.standard_normal(n)

    radius = np.zeros(n)
    k_used = np.zeros(n)
    class_size = np.zeros(n)
    degenerate = []
    for label in np.unique(labels):
        mask = labels == label
        count = int(mask.sum())
        class_size[mask] = count
        if count < 2:
            continue
        kk = min(k, count - 1)
        if kk < k:
            degenerate.append((int(label), count))
        radius[mask] = _kth_neighbour_distance(values[mask], kk)
        k_used[mask] = kk
    if degenerate:
        warnings.warn(f"classes with fewer than k + 1 members used a smaller k: {degenerate}",
                      DegenerateClassWarning, stacklevel=2)
    keep = class_size > 1
    if keep.sum() == 0:
        return 0.0
    values, radius, k_used, class_size = values[keep], radius[keep], k_used[keep], class_size[keep]
    m = _count_within(values, radius)
    nats = (special.digamma(len(values)) + special.digamma(k_used).mean()
            - special.digamma(class_size).mean() - special.digamma(m).mean())
    return max(float(nats) / LN2, 0.0)


# ---------------------------------------------------------------------------
# feature informativeness

REGIMES: dict[str, tuple[ContextSetting, ...]] = {
    "unprimed": (ContextSetting.UNPRIMED,),
    "primed": (ContextSetting.PRIMED_FEMININE, ContextSetting.PRIMED_MASCULINE),
}
FEATURES = ("prime_gender", "role_type", "stereotype", "stereotype_discrete", "case", "order")


def _feature_columns(records: list[Measurement], templates: Mapping[str, Template],
                     ratings: Mapping[str, float | None]) -> dict[str, np.ndarray]:
    tids, t_index = np.unique(np.array([m.template_id for m in records]), return_inverse=True)
    t_index = t_index.ravel()
    per_template = [templates[t] for t in tids]
    cols = {
        "x": np.array([m.gender is Gender.FEMININE for m in records], dtype=int),
        "template": tids[t_index],
        "prime_gender": np.array([_PRIME[m.setting] for m in records]),
        "role_type": np.array([t.target_role_kind.value for t in per_template])[t_index],
        "case": np.array([t.pronoun_case.value for t in per_template])[t_index],
        "order": np.array([_VALUE[m.order] for m in records]),
    }
    cols["stereotype"] = np.array([ratings.get(t) for t in tids], dtype=float)[t_index]
    cols["codes"] = {name: _codes(cols[name]) for name in ("prime_gender", "role_type", "case", "order")}
    return cols


def _feature_mi(cols: dict[str, np.ndarray], feature: str, mask: np.ndarray, k: int, seed: int) -> float:
    x = cols["x"][mask]
    if feature in cols["codes"]:
        codes = cols["codes"][feature][mask]
        return _mi_codes(x, codes) if len(codes) else float("nan")
    if feature == "stereotype":
        rated = ~np.isnan(cols["stereotype"][mask])
        if rated.sum() < k + 1:
            return float("nan")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateClassWarning)
            return mi_knn(x[rated], cols["stereotype"][mask][rated], k=k, seed=seed)
    if feature == "stereotype_discrete":
        vals = cols["stereotype"][mask]
        rated = ~np.isnan(vals)
        if rated.sum() == 0:
            return float("nan")
        return mi_discrete(x[rated], vals[rated])
    return mi_discrete(x, cols[feature][mask])


def feature_mi_table(log: MeasurementLog | Iterable[Measurement], templates: Iterable[Template],
                     norms: NormsTable | None = None, regimes: Mapping[str, Sequence[ContextSetting]] = REGIMES,
                     k: int = 3, seed: int = 0, n_folds: int = 10) -> dict[str, dict[str, dict[str, Any]]]:
    """MI in bits between each prompt feature and the generated pronoun, per regime.

    Each value uses every valid individual measurement in the regime. The
    standard error is a grouped jackknife over ``n_folds`` folds of templates.
    ``prime_gender`` appears only in regimes made of discourse-primed
    settings. The stereotype feature is estimated with :func:`mi_knn` as a
    continuous variable and, as ``stereotype_discrete``, by plug-in MI over
    distinct rating values.
    """
    templates = {t.template_id: t for t in templates}
    ratings = join_norms(templates.values(), norms) if norms is not None else {}
    # canonical order so tie-breaking noise does not depend on log order
    records = sorted((m for m in _records(log) if m.is_valid and m.template_id in templates),
                     key=lambda m: m.trial_id)
    out: dict[str, dict[str, dict[str, Any]]] = {}
    if not records:
        return out
    cols = _feature_columns(records, templates, ratings)
    settings_col = np.array([_VALUE[m.setting] for m in records])
    template_ids = sorted(templates)
    fold_of = {t: i % n_folds for i, t in enumerate(template_ids)}
    folds = np.array([fold_of[t] for t in cols["template"]])
    for regime, settings in regimes.items():
        settings = [ContextSetting(s) for s in settings]
        in_regime = np.isin(settings_col, [s.value for s in settings])
        if not in_regime.any():
            continue
        primed = all(s.is_discourse_primed for s in settings)
        features = [f for f in FEATURES if f != "prime_gender" or primed]
        if norms is None:
            features = [f for f in features if not f.startswith("stereotype")]
        table = {}
        for feature in features:
            value = _feature_mi(cols, feature, in_regime, k, seed)
            present = sorted(set(folds[in_regime]))
            jack = [_feature_mi(cols, feature, in_regime & (folds != g), k, seed) for g in present]
            jack = np.array([v for v in jack if not math.isnan(v)])
            se = None
            if len(jack) > 1:
                g = len(jack)
                se = float(math.sqrt((g - 1) / g * np.sum((jack - jack.mean()) ** 2)))
            table[feature] = {
                "mi_bits": None if math.isnan(value) else value,
                "se": se,
                "n": int(in_regime.sum()) if not feature.startswith("stereotype")
                else int((in_regime & ~np.isnan(cols["stereotype"])).sum()),
                "estimator": "knn" if feature == "stereotype" else "plug_in",
            }
        out[regime] = table
    return out


def rank_features(table: Mapping[str, Mapping[str, Any]], exclude: Iterable[str] = ("stereotype_discrete",)) -> list[str]:
    """Feature names of one regime sorted by decreasing MI (ties by name)."""
    exclude = set(exclude)
    items = [(f, v["mi_bits"]) for f, v in table.items() if f not in exclude and v["mi_bits"] is not None]
    return [f for f, _ in sorted(items, key=lambda kv: (-kv[1], kv[0]))]


def spearman_by_setting(estimates: Mapping[tuple[str, str, str], BernoulliEstimate], ratings: Mapping[str, float | None],
                        settings: Iterable[ContextSetting | str], valid_set: Iterable[str] | None = None,
                        permutations: int = 0, seed: int = 0) -> dict[str, dict[str, Any]]:
    """Spearman correlation of stereotype rating against pooled p-hat per setting."""
    out = {}
    for s in settings:
        s = ContextSetting(s).value
        tids = sorted(t for t in (valid_set if valid_set is not None else ratings)
                      if ratings.get(t) is not None and (t, s, POOLED) in estimates)
        if len(tids) < 3:
            out[s] = {"rho": None, "p_value": None, "n": len(tids), "p_permutation": None, "flag": "too_few"}
            continue
        res = spearman([ratings[t] for t in tids], [estimates[(t, s, POOLED)].p_hat for t in tids],
                       permutations=permutations, seed=seed)
        out[s] = res.to_json()
    return out


__all__ = [
    "BernoulliEstimate", "NormsTable", "POOLED", "SpearmanResult", "estimate", "feature_mi_table",
    "index_estimates", "join_norms", "kl_bernoulli", "load_norms", "mean_kl", "mi_discrete", "mi_knn",
    "rank_features", "spearman", "spearman_by_setting", "valid_template_set",
]
