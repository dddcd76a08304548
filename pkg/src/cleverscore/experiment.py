"""Experiment driver: manifests, per-instance work units and result tables."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import attacks, oracle
from .attacks import AttackConfig
from .clever import TargetSpec, clever_t, clever_u, score_from_samples, select_target, theoretical_lower_bound
from .fixtures import Dataset
from .net import Network, margin, predict
from .sampling import INF, Ball, GradNormSampleSet, NumericError, SampleConfig, collect_batch_maxima, p_label, parse_p

log = logging.getLogger(__name__)

ORACLE_MAX_UNITS = 12
# seed key standing in for the target class of untargeted rows
UNTARGETED_KEY = 1 << 20


class ManifestError(ValueError):
    """Manifest or its referenced inputs are unusable."""


@dataclass
class RunManifest:
    model_path: str | None = None
    dataset_path: str | None = None
    instances: int | list[int] = 10
    targets: list[str] = field(default_factory=lambda: ["top2", "random", "least"])
    p_list: list[float] = field(default_factory=lambda: [2.0, INF])
    sampling: SampleConfig = field(default_factory=SampleConfig)
    ball_radius: float = 5.0
    attack: AttackConfig | None = None
    output_dir: str = "out"
    workers: int = 1
    seed: int = 0
    slope: bool = False
    oracle: bool = False

    def __post_init__(self):
        self.p_list = [parse_p(p) for p in self.p_list]
        for t in self.targets:
            if t != "untargeted":
                TargetSpec.parse(t)
        if self.workers < 1:
            raise ManifestError("workers must be at least 1")
        if not self.ball_radius > 0:
            raise ManifestError("ball radius must be positive")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["p_list"] = [p_label(p) for p in self.p_list]
        out.pop("workers")
        out.pop("output_dir")
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        aliases = {"model": "model_path", "data": "dataset_path", "dataset": "dataset_path",
                   "p": "p_list", "radius": "ball_radius", "out": "output_dir"}
        for old, new in aliases.items():
            if old in data:
                data[new] = data.pop(old)
        unknown = set(data) - known
        if unknown:
            raise ManifestError(f"unknown manifest fields: {sorted(unknown)}")
        try:
            if isinstance(data.get("sampling"), dict):
                data["sampling"] = SampleConfig(**data["sampling"])
            if isinstance(data.get("attack"), dict):
                att = dict(data["attack"])
                if "input_box" in att and att["input_box"] is not None:
                    att["input_box"] = tuple(att["input_box"])
                if "eps_list" in att:
                    att["eps_list"] = tuple(att["eps_list"])
                data["attack"] = AttackConfig(**att)
            if isinstance(data.get("p_list"), (str, int, float)):
                data["p_list"] = [data["p_list"]]
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise ManifestError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml

            try:
                data = yaml.safe_load(text)
            except yaml.YAMLError as exc:
                raise ManifestError(f"{path}: {exc}") from None
        else:
            try:
                data = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        if data is not None and not isinstance(data, dict):
            raise ManifestError(f"{path}: manifest must be a mapping")
        return cls.from_dict(data or {})


def derive_seed(seed: int, *keys: int) -> int:
    """Stable 63-bit sub-seed for a tuple of non-negative integer keys."""
    state = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


# --- result rows ---------------------------------------------------------


@dataclass
class ResultRow:
    instance_id: int
    true_label: int
    predicted_c: int
    target_kind: str
    target_j: int | None
    p: str
    clever_value: float
    a_hat: float
    ks_D: float
    ks_pvalue: float
    margin: float = math.nan
    slope_value: float | None = None
    slope_lipschitz: float | None = None
    oracle_value: float | None = None
    oracle_lipschitz: float | None = None
    ifgsm_distortion: float | None = None
    l2_attack_distortion: float | None = None
    capped: bool = False
    degenerate: bool = False
    warnings: str = ""

    def key(self) -> tuple:
        return (self.instance_id, self.target_kind, self.p)


COLUMNS = [f.name for f in fields(ResultRow)]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def rows_to_csv(rows: Sequence[ResultRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for row in rows:
        writer.writerow([_fmt(getattr(row, c)) for c in COLUMNS])
    return buf.getvalue()


def _json_value(v):
    # non-finite floats become the same strings the CSV uses; null means "not computed"
    if isinstance(v, float) and not math.isfinite(v):
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def rows_to_json(rows: Sequence[ResultRow], manifest: RunManifest | None = None) -> str:
    payload = {
        "columns": COLUMNS,
        "rows": [{c: _json_value(getattr(r, c)) for c in COLUMNS} for r in rows],
    }
    if manifest is not None:
        payload["manifest"] = manifest.to_dict()
        payload["manifest_hash"] = manifest.digest()
    return json.dumps(payload, indent=1, sort_keys=False, default=str)


_INT_COLUMNS = {"instance_id", "true_label", "predicted_c", "target_j"}
_STR_COLUMNS = {"target_kind", "p", "warnings"}
_BOOL_COLUMNS = {"capped", "degenerate"}


def _parse_cell(column: str, text: str):
    if column in _STR_COLUMNS:
        return text
    if text == "":
        return None
    if column in _BOOL_COLUMNS:
        return text == "true"
    if column in _INT_COLUMNS:
        return int(text)
    return float(text)


def rows_from_csv(text: str) -> list[dict]:
    """Typed rows from :func:`rows_to_csv` output; empty cells read back as ``None``."""
    return [{k: _parse_cell(k, v) for k, v in row.items()} for row in csv.DictReader(io.StringIO(text))]


# --- inputs ----------------------------------------------------------------


def load_inputs(manifest: RunManifest) -> tuple[Network, Dataset]:
    for label, path in (("model", manifest.model_path), ("dataset", manifest.dataset_path)):
        if not path:
            raise ManifestError(f"no {label} path given")
        if not Path(path).exists():
            raise ManifestError(f"{label} file not found: {path}")
    net = Network.load(manifest.model_path)
    data = Dataset.from_csv(manifest.dataset_path, net.num_classes)
    if data.d != net.input_dim:
        raise ManifestError(f"dataset has {data.d} features but the model expects {net.input_dim}")
    return net, data


def provenance_input_box(model_path: str | Path | None) -> tuple[float, float] | None:
    """Attack input box recorded in ``<model>.provenance.json`` beside the model, if any."""
    if not model_path:
        return None
    path = Path(model_path)
    prov = path.with_name(path.stem + ".provenance.json")
    if not prov.exists():
        return None
    try:
        box = json.loads(prov.read_text()).get("input_box")
    except (json.JSONDecodeError, AttributeError):
        log.warning("ignoring unreadable provenance file %s", prov)
        return None
    return tuple(float(v) for v in box) if box else None


def select_instances(net: Network, data: Dataset, instances) -> list[tuple[int, int, int]]:
    """``(index, label, predicted)`` for correctly classified instances.

    An integer picks the first that many correct instances by index; a list
    names indices explicitly. Misclassified instances are skipped and logged.
    """
    preds = predict(net, data.features)
    if isinstance(instances, int):
        chosen = []
        for i in range(data.n):
            if len(chosen) == instances:
                break
            if preds[i] == data.labels[i]:
                chosen.append((i, int(data.labels[i]), int(preds[i])))
            else:
                log.info("instance %d skipped: predicted %d, label %d", i, preds[i], data.labels[i])
        return chosen
    chosen = []
    for i in instances:
        if not 0 <= i < data.n:
            raise ManifestError(f"instance index {i} out of range for {data.n} rows")
        if preds[i] != data.labels[i]:
            log.info("instance %d skipped: predicted %d, label %d", i, preds[i], data.labels[i])
            continue
        chosen.append((int(i), int(data.labels[i]), int(preds[i])))
    return chosen


# --- per-instance work -----------------------------------------------------


@dataclass(frozen=True)
class WorkUnit:
    net: Network
    x0: np.ndarray
    instance_id: int
    true_label: int
    c: int
    manifest: RunManifest


def _resolve_target(unit: WorkUnit, kind: str) -> int | None:
    if kind == "untargeted":
        return None
    spec = TargetSpec.parse(kind)
    rng = np.random.default_rng(derive_seed(unit.manifest.seed, unit.instance_id, 1))
    return select_target(unit.net, unit.x0, spec, rng)


def _oracle_applicable(net: Network) -> bool:
    return (len(net.layers) == 2 and net.layers[0].activation.kind == "relu"
            and net.layers[0].out_dim <= ORACLE_MAX_UNITS)


def run_instance(unit: WorkUnit) -> list[ResultRow]:
    """Every (target, p) row for one instance, plus attacks when configured."""
    m = unit.manifest
    net, x0, c = unit.net, unit.x0, unit.c
    rows = []
    for kind in m.targets:
        j = _resolve_target(unit, kind)
        cfg = replace(m.sampling, seed=derive_seed(m.seed, unit.instance_id, 2, UNTARGETED_KEY if j is None else j))
        ifgsm_dist = l2_dist = None
        attack_notes = []
        if m.attack is not None:
            out = attacks.ifgsm_best_eps(net, x0, c, j, m.attack)
            ifgsm_dist = out.distortion_linf if out.success else None
            if not out.success:
                attack_notes.append("ifgsm-failed")
            out = attacks.margin_descent_l2(net, x0, c, j, m.attack)
            l2_dist = out.distortion_l2 if out.success else None
            if not out.success:
                attack_notes.append("l2-attack-failed")
        for p in m.p_list:
            ball = Ball(x0, m.ball_radius, p)
            row = ResultRow(unit.instance_id, unit.true_label, c, kind, j, p_label(p),
                            math.nan, math.nan, math.nan, math.nan,
                            ifgsm_distortion=ifgsm_dist, l2_attack_distortion=l2_dist)
            notes = list(attack_notes)
            try:
                score = clever_u(net, x0, ball, cfg, c=c) if j is None else clever_t(net, x0, j, ball, cfg, c=c)
                row.clever_value = score.value
                row.a_hat = score.location_estimate
                row.ks_D = score.fit.ks_statistic
                row.ks_pvalue = score.fit.ks_pvalue
                row.margin = score.margin
                row.capped = score.capped
                row.degenerate = score.fit.degenerate
                notes.extend(score.warnings)
                jj = score.target_j if j is not None else next(
                    (int(w.split("=")[1]) for w in score.warnings if w.startswith("argmin-class=")), None)
                if m.slope and jj is not None:
                    est = oracle.slope_estimate(net, x0, c, jj, ball, cfg)
                    row.slope_lipschitz = est.value
                    row.slope_value = theoretical_lower_bound(max(score.margin, 0.0), est.value, m.ball_radius)
                    dist = _attack_distortion(row)
                    if dist is not None and row.slope_value > dist:
                        notes.append("slope-exceeds-attack")
                if m.oracle and jj is not None and _oracle_applicable(net):
                    est = oracle.exact_local_cross_lipschitz(net, x0, c, jj, ball)
                    row.oracle_lipschitz = est.value
                    row.oracle_value = theoretical_lower_bound(max(score.margin, 0.0), est.value, m.ball_radius)
                    if not est.certified:
                        notes.append("oracle-uncertified")
            except NumericError as exc:
                notes.append(f"numeric-failure: {exc}")
            row.warnings = ";".join(notes)
            rows.append(row)
    return rows


def run_rows(manifest: RunManifest, net: Network, data: Dataset) -> list[ResultRow]:
    chosen = select_instances(net, data, manifest.instances)
    units = [WorkUnit(net, data.features[i], i, label, c, manifest) for i, label, c in chosen]
    if manifest.workers > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=manifest.workers) as pool:
            nested = list(pool.map(run_instance, units))
    else:
        nested = [run_instance(u) for u in units]
    order_t = {t: i for i, t in enumerate(manifest.targets)}
    order_p = {p_label(p): i for i, p in enumerate(manifest.p_list)}
    rows = [r for group in nested for r in group]
    rows.sort(key=lambda r: (r.instance_id, order_t[r.target_kind], order_p[r.p]))
    return rows


def has_numeric_failure(rows: Iterable[ResultRow]) -> bool:
    return any("numeric-failure" in r.warnings for r in rows)


# --- summaries --------------------------------------------------------------


def _attack_distortion(row: ResultRow) -> float | None:
    if row.p == "inf":
        return row.ifgsm_distortion
    if row.p == "2":
        return row.l2_attack_distortion
    return None


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.mean(vals)) if vals else None


def bound_validity(rows: Sequence[ResultRow], column: str = "clever_value") -> attacks.BoundReport:
    """Table-4 style check of a score column against the matching attack distortion."""
    scores, outcomes = {}, {}
    for r in rows:
        dist = _attack_distortion(r)
        value = getattr(r, column)
        if value is None or (isinstance(value, float) and math.isnan(value)):
            continue
        key = r.key()
        scores[key] = value
        outcomes[key] = _DistortionOutcome(dist)
    return attacks.verify_bounds(scores, outcomes, p=2.0)


@dataclass
class _DistortionOutcome:
    value: float | None

    @property
    def success(self) -> bool:
        return self.value is not None

    def distortion(self, p) -> float:
        return math.inf if self.value is None else self.value


def comparison_summary(rows: Sequence[ResultRow]) -> dict:
    """Per (target kind, p) means and validity fractions, as in the comparison tables."""
    groups = {}
    for r in rows:
        groups.setdefault((r.target_kind, r.p), []).append(r)
    table = []
    for (kind, p), grp in groups.items():
        entry = {
            "target_kind": kind,
            "p": p,
            "n": len(grp),
            "mean_clever": _mean(r.clever_value for r in grp),
            "mean_slope": _mean(r.slope_value for r in grp),
            "mean_oracle": _mean(r.oracle_value for r in grp),
            "mean_ifgsm_linf": _mean(r.ifgsm_distortion for r in grp),
            "mean_l2_attack": _mean(r.l2_attack_distortion for r in grp),
        }
        succ = [r for r in grp if _attack_distortion(r) is not None]
        entry["mean_attack_distortion"] = _mean(_attack_distortion(r) for r in succ)
        entry["mean_clever_on_successes"] = _mean(r.clever_value for r in succ)
        for column, label in (("clever_value", "clever"), ("slope_value", "slope"), ("oracle_value", "oracle")):
            rep = bound_validity(grp, column)
            entry[f"{label}_violations"] = rep.violations
            entry[f"{label}_fraction_valid"] = rep.fraction_valid
        entry["slope_exceeds_attack"] = sum(
            1 for r in succ if r.slope_value is not None and r.slope_value > _attack_distortion(r))
        table.append(entry)
    overall = bound_validity(rows)
    return {
        "groups": table,
        "fraction_valid": overall.fraction_valid,
        "violations": overall.violations,
        "successful_attacks": overall.total,
        "status": overall.status,
    }


def plot_rows(rows: Sequence[ResultRow]) -> list[tuple[int, str, float]]:
    """``(x, series, y)`` triples: instance id against score and attack distortion."""
    out = []
    for r in rows:
        tag = f"[p={r.p},{r.target_kind}]"
        out.append((r.instance_id, "clever" + tag, r.clever_value))
        dist = _attack_distortion(r)
        if dist is not None:
            out.append((r.instance_id, ("ifgsm" if r.p == "inf" else "l2_attack") + tag, dist))
        if r.slope_value is not None:
            out.append((r.instance_id, "slope" + tag, r.slope_value))
        if r.oracle_value is not None:
            out.append((r.instance_id, "oracle" + tag, r.oracle_value))
    return out


def fit_percentage(rows: Sequence[ResultRow], alpha: float = 0.05) -> dict:
    """Share of non-degenerate cells whose K-S p-value exceeds ``alpha``."""
    live = [r for r in rows if not r.degenerate and not math.isnan(r.ks_pvalue)]
    passed = sum(r.ks_pvalue > alpha for r in live)
    return {
        "cells": len(live),
        "passed": passed,
        "percentage": 100.0 * passed / len(live) if live else None,
        "degenerate": sum(r.degenerate for r in rows),
    }


def sweep_samples(manifest: RunManifest, net: Network, data: Dataset, nb_list: Sequence[int]):
    """Scores per ``N_b`` on shared instances plus wall-clock cost per ``N_b``.

    Batch streams are nested, so each cell is sampled once up to the largest
    ``N_b`` and scored at every checkpoint. ``seconds`` is the cumulative
    sampling time needed to reach each checkpoint; ``fit_seconds`` is the
    time spent fitting at that checkpoint alone.
    """
    nb_sorted = sorted(set(int(v) for v in nb_list))
    if not nb_sorted:
        raise ManifestError("nb_list must not be empty")
    if nb_sorted[0] < 2:
        raise ManifestError("every N_b in nb_list must be at least 2")
    sample_time = dict.fromkeys(nb_sorted, 0.0)
    fit_time = dict.fromkeys(nb_sorted, 0.0)
    table = []
    for i, label, c in select_instances(net, data, manifest.instances):
        unit = WorkUnit(net, data.features[i], i, label, c, manifest)
        for kind in manifest.targets:
            j = _resolve_target(unit, kind)
            targets = [k for k in range(net.num_classes) if k != c] if j is None else [j]
            for p in manifest.p_list:
                ball = Ball(unit.x0, manifest.ball_radius, p)
                best = {nb: math.inf for nb in nb_sorted}
                for jj in targets:
                    g0 = float(margin(net, unit.x0, c, jj))
                    key = UNTARGETED_KEY if j is None else jj
                    cfg = replace(manifest.sampling, seed=derive_seed(manifest.seed, i, 2, key))
                    chunks, done = [], 0
                    for nb in nb_sorted:
                        t0 = time.perf_counter()
                        part = collect_batch_maxima(net, unit.x0, c, jj, ball, replace(cfg, n_batches=nb), start=done)
                        sample_time[nb] += time.perf_counter() - t0
                        chunks.append(part.values)
                        done = nb
                        t0 = time.perf_counter()
                        values = np.concatenate(chunks)
                        score, _ = score_from_samples(g0, GradNormSampleSet(values, ball.q, jj), manifest.ball_radius)
                        fit_time[nb] += time.perf_counter() - t0
                        best[nb] = min(best[nb], score)
                entry = {"instance_id": i, "target_kind": kind, "target_j": j, "p": p_label(p)}
                entry.update({f"score_nb{nb}": best[nb] for nb in nb_list})
                table.append(entry)
    timing, running = [], 0.0
    for nb in nb_sorted:
        running += sample_time[nb]
        n_samples = max(1, len(table)) * nb * manifest.sampling.n_per_batch
        timing.append({"n_batches": nb, "seconds": running, "fit_seconds": fit_time[nb],
                       "seconds_per_sample": running / n_samples, "cells": len(table)})
    return table, timing


def diagnostics_cells(manifest: RunManifest, net: Network, data: Dataset, max_cells: int = 3):
    """Batch-maxima samples and fitted parameters for the first few score cells."""
    from .evt import fit_reverse_weibull_mle

    chosen = select_instances(net, data, manifest.instances)
    out = []
    for i, label, c in chosen:
        unit = WorkUnit(net, data.features[i], i, label, c, manifest)
        for kind in manifest.targets:
            j = _resolve_target(unit, kind)
            if j is None:
                continue
            for p in manifest.p_list:
                if len(out) >= max_cells:
                    return out
                cfg = replace(manifest.sampling, seed=derive_seed(manifest.seed, i, 2, j))
                samples = collect_batch_maxima(net, unit.x0, c, j, Ball(unit.x0, manifest.ball_radius, p), cfg)
                out.append({"instance_id": i, "target_kind": kind, "target_j": j, "p": p_label(p),
                            "samples": samples.values, "fit": fit_reverse_weibull_mle(samples)})
    return out

