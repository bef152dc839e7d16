"""Synthetic EHR cohorts with latent subgroups, shift injection, imputation,
and stratified splitting.

Each patient belongs to a latent subgroup that selects a stable linear
dynamical system for the dynamic features, a Gaussian for the statics, and
a subgroup-specific weight vector for the outcome model. Subgroup-dependent
outcome weights are what give the expert mixture something to specialize
on. Labels follow y ~ Bernoulli(sigmoid(margin * w_k . summary + b)) with
the global bias b calibrated by bisection to hit the target prevalence;
an optional label-flip noise rate is folded into the calibration.

All draws flow through per-patient substreams keyed by (seed, purpose,
patient id), so generation is a pure function of the spec, order- and
parallelism-independent, and a shifted regeneration of the same patient
reuses the same label randomness (an identity shift reproduces the cohort
bit for bit).

Two outcome tasks share the generator: "mortality" uses the primary weight
vectors and "readmission" an independent set; they are structurally
identical.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import sigmoid_values
from .errors import ConfigError, DataError, GenerationError, ShapeError
from .rng import substream

LATENT_DIM = 4
TASKS = ("mortality", "readmission")


@dataclass(frozen=True)
class CohortSpec:
    n_patients: int = 2000
    n_visits: int = 8
    n_dynamic: int = 12
    n_static: int = 2
    n_subgroups: int = 3
    subgroup_prior: Optional[tuple] = None  # default: uniform
    missing_rate: float = 0.2
    label_noise: float = 0.05
    prevalence: float = 0.10
    label_margin: float = 3.0
    task: str = "mortality"
    seed: int = 0

    def validate(self) -> None:
        if self.n_patients < 1 or self.n_visits < 1 or self.n_dynamic < 1 or self.n_static < 0:
            raise ConfigError("cohort dimensions must be positive")
        if self.n_subgroups < 1:
            raise ConfigError("need at least one subgroup")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ConfigError(f"missing_rate must be in [0, 1), got {self.missing_rate}")
        if not 0.0 <= self.label_noise < 0.5:
            raise ConfigError(f"label_noise must be in [0, 0.5), got {self.label_noise}")
        if not 0.0 < self.prevalence < 1.0:
            raise ConfigError(f"invalid prevalence {self.prevalence}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        prior = self.resolved_prior()
        if len(prior) != self.n_subgroups or np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-9:
            raise ConfigError("subgroup_prior must be a simplex vector of length n_subgroups")

    def resolved_prior(self) -> np.ndarray:
        if self.subgroup_prior is None:
            return np.full(self.n_subgroups, 1.0 / self.n_subgroups)
        return np.asarray(self.subgroup_prior, dtype=np.float64)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["subgroup_prior"] is not None:
            d["subgroup_prior"] = list(d["subgroup_prior"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown cohort spec keys: {sorted(unknown)}")
        if d.get("subgroup_prior") is not None:
            d = dict(d, subgroup_prior=tuple(d["subgroup_prior"]))
        spec = cls(**d)
        spec.validate()
        return spec


@dataclass(frozen=True)
class ShiftSpec:
    offset: object = 0.0  # scalar or length-F vector over [dynamic | static]
    scale: object = 1.0
    subgroup_weights: Optional[tuple] = None  # reweights the prior; triggers regeneration
    seed: int = 0

    def resolved(self, n_features: int):
        offset = np.broadcast_to(np.asarray(self.offset, dtype=np.float64), (n_features,)).copy()
        scale = np.broadcast_to(np.asarray(self.scale, dtype=np.float64), (n_features,)).copy()
        if np.any(scale <= 0):
            raise ConfigError("shift scales must be positive")
        return offset, scale

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown shift spec keys: {sorted(unknown)}")
        if d.get("subgroup_weights") is not None:
            d = dict(d, subgroup_weights=tuple(d["subgroup_weights"]))
        for key in ("offset", "scale"):
            if isinstance(d.get(key), list):
                d = dict(d, **{key: tuple(d[key])})
        return cls(**d)


@dataclass
class PatientRecord:
    pid: int
    visits: np.ndarray  # T x F_dyn, NaN marks missing
    statics: np.ndarray  # F_stat
    label: int
    subgroup: int


@dataclass
class _Structure:
    """Subgroup-conditioned generative parameters (the fixed 'concept')."""

    transitions: list  # per subgroup: latent transition, spectral radius < 1
    emissions: list  # latent -> dynamic feature loading
    dyn_means: list
    stat_means: list
    weights: dict  # task -> per-subgroup weight vector over summary features
    bias: float = 0.0  # calibrated per cohort
    margin: float = 1.0
    label_noise: float = 0.0
    task: str = "mortality"


def _build_structure(spec: CohortSpec) -> _Structure:
    rng = substream(spec.seed, "structure")
    transitions, emissions, dyn_means, stat_means = [], [], [], []
    weights = {task: [] for task in TASKS}
    n_summary = spec.n_dynamic + spec.n_static
    for _ in range(spec.n_subgroups):
        raw = rng.normal(size=(LATENT_DIM, LATENT_DIM))
        radius = max(abs(np.linalg.eigvals(raw)))
        transitions.append(0.88 * raw / radius)
        emissions.append(rng.normal(size=(LATENT_DIM, spec.n_dynamic)) / np.sqrt(LATENT_DIM))
        dyn_means.append(rng.normal(scale=1.5, size=spec.n_dynamic))
        stat_means.append(rng.normal(scale=1.0, size=spec.n_static))
        for task in TASKS:
            w = rng.normal(size=n_summary)
            weights[task].append(w / np.linalg.norm(w))
    return _Structure(
        transitions=transitions,
        emissions=emissions,
        dyn_means=dyn_means,
        stat_means=stat_means,
        weights=weights,
        margin=spec.label_margin,
        label_noise=spec.label_noise,
        task=spec.task,
    )


def _simulate_patient(spec: CohortSpec, structure: _Structure, prior: np.ndarray, pid: int, stream_seed: int):
    """Subgroup, true (unmasked) visit matrix, and statics for one patient."""
    rng = substream(stream_seed, "traj", pid)
    subgroup = int(rng.choice(spec.n_subgroups, p=prior))
    state = rng.normal(size=LATENT_DIM)
    visits = np.empty((spec.n_visits, spec.n_dynamic))
    for t in range(spec.n_visits):
        visits[t] = (
            structure.dyn_means[subgroup]
            + state @ structure.emissions[subgroup]
            + 0.2 * rng.normal(size=spec.n_dynamic)
        )
        state = state @ structure.transitions[subgroup] + 0.3 * rng.normal(size=LATENT_DIM)
    statics = structure.stat_means[subgroup] + 0.5 * rng.normal(size=spec.n_static)
    return subgroup, visits, statics


def _summary_of(visits_true: np.ndarray, statics: np.ndarray) -> np.ndarray:
    return np.concatenate([visits_true.mean(axis=0), statics])


def _raw_logits(structure: _Structure, subgroups, summaries) -> np.ndarray:
    w = structure.weights[structure.task]
    return np.array(
        [structure.margin * float(w[k] @ s) for k, s in zip(subgroups, summaries)]
    )


def _calibrate_bias(raw_logits: np.ndarray, prevalence: float, label_noise: float) -> float:
    """Bisection on the intercept so the expected positive rate hits target."""
    target = (prevalence - label_noise) / (1.0 - 2.0 * label_noise)
    if not 0.0 < target < 1.0:
        raise GenerationError(
            f"prevalence {prevalence} unreachable under label noise {label_noise}"
        )
    span = float(np.abs(raw_logits).max()) + 40.0
    lo, hi = -span, span
    rate = lambda b: float(sigmoid_values(raw_logits + b).mean())
    if not rate(lo) <= target <= rate(hi):
        raise GenerationError("prevalence calibration out of range")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if rate(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _draw_labels(structure: _Structure, subgroups, summaries, pids, stream_seed: int) -> np.ndarray:
    logits = _raw_logits(structure, subgroups, summaries) + structure.bias
    probs = sigmoid_values(logits)
    labels = np.empty(len(pids), dtype=np.int64)
    for i, pid in enumerate(pids):
        rng = substream(stream_seed, "label", structure.task, pid)
        y = 1 if rng.random() < probs[i] else 0
        if rng.random() < structure.label_noise:
            y = 1 - y
        labels[i] = y
    return labels


def _apply_missingness(spec: CohortSpec, visits_true, pids, stream_seed: int):
    masked = []
    for i, pid in enumerate(pids):
        rng = substream(stream_seed, "mask", pid)
        x = visits_true[i].copy()
        if spec.missing_rate > 0:
            mask = rng.random(x.shape) < spec.missing_rate
            x[mask] = np.nan
        masked.append(x)
    return masked


class Cohort:
    """A list of patients plus the generation context needed for shifts."""

    def __init__(self, patients, spec, structure=None, summaries=None):
        self.patients: list[PatientRecord] = patients
        self.spec: CohortSpec = spec
        self._structure: Optional[_Structure] = structure
        self._summaries: Optional[dict] = summaries  # pid -> true-summary vector

    def __len__(self):
        return len(self.patients)

    @property
    def n_features(self) -> int:
        return self.spec.n_dynamic + self.spec.n_static

    @property
    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.patients], dtype=np.int64)

    @property
    def prevalence(self) -> float:
        return float(self.labels.mean())

    def feature_names(self) -> dict:
        return {
            "dynamic": [f"dyn_{i}" for i in range(self.spec.n_dynamic)],
            "static": [f"stat_{i}" for i in range(self.spec.n_static)],
        }

    def subset(self, pids) -> "Cohort":
        chosen = set(int(p) for p in pids)
        patients = [p for p in self.patients if p.pid in chosen]
        summaries = None
        if self._summaries is not None:
            summaries = {p.pid: self._summaries[p.pid] for p in patients}
        return Cohort(patients, self.spec, self._structure, summaries)

    def ensure_context(self) -> None:
        """Recover generator context (e.g., after loading from disk)."""
        if self._structure is not None and self._summaries is not None:
            return
        fresh = generate_cohort(self.spec)
        by_pid = {p.pid: p for p in fresh.patients}
        for p in self.patients:
            if p.pid not in by_pid or by_pid[p.pid].label != p.label:
                raise DataError("cohort does not match its spec; cannot recover context")
        self._structure = fresh._structure
        self._summaries = {p.pid: fresh._summaries[p.pid] for p in self.patients}


def generate_cohort(spec: CohortSpec) -> Cohort:
    """Pure function of the spec: identical bytes on re-run."""
    spec.validate()
    structure = _build_structure(spec)
    prior = spec.resolved_prior()
    pids = list(range(spec.n_patients))
    subgroups, visits_true, statics = [], [], []
    for pid in pids:
        k, v, s = _simulate_patient(spec, structure, prior, pid, spec.seed)
        subgroups.append(k)
        visits_true.append(v)
        statics.append(s)
    summaries = [_summary_of(v, s) for v, s in zip(visits_true, statics)]
    structure.bias = _calibrate_bias(
        _raw_logits(structure, subgroups, summaries), spec.prevalence, spec.label_noise
    )
    labels = _draw_labels(structure, subgroups, summaries, pids, spec.seed)
    emp = float(labels.mean())
    tol = max(0.02, 4.0 * np.sqrt(spec.prevalence * (1 - spec.prevalence) / spec.n_patients))
    if abs(emp - spec.prevalence) > tol:
        raise GenerationError(
            f"empirical prevalence {emp:.4f} misses target {spec.prevalence:.4f} (tol {tol:.4f})"
        )
    masked = _apply_missingness(spec, visits_true, pids, spec.seed)
    patients = [
        PatientRecord(pid=pid, visits=masked[i], statics=statics[i], label=int(labels[i]), subgroup=subgroups[i])
        for i, pid in enumerate(pids)
    ]
    return Cohort(patients, spec, structure, {pid: summaries[i] for i, pid in enumerate(pids)})


def apply_shift(cohort: Cohort, shift: ShiftSpec) -> Cohort:
    """Covariate-shift a cohort while preserving the labeling concept.

    Features transform as x' = (x + offset) * scale; labels are redrawn
    from the unchanged structural model on the shifted covariates, using
    each patient's original label randomness (so an identity shift is a
    bit-exact no-op). When subgroup reweighting is requested, patients are
    regenerated from scratch under the new prior (same structural model),
    drawing fresh randomness from the shift seed.
    """
    spec = cohort.spec
    offset, scale = shift.resolved(spec.n_dynamic + spec.n_static)
    off_dyn, off_stat = offset[: spec.n_dynamic], offset[spec.n_dynamic :]
    sc_dyn, sc_stat = scale[: spec.n_dynamic], scale[spec.n_dynamic :]
    cohort.ensure_context()
    structure = cohort._structure

    if shift.subgroup_weights is not None:
        weights = np.asarray(shift.subgroup_weights, dtype=np.float64)
        if weights.shape != (spec.n_subgroups,) or np.any(weights < 0) or weights.sum() <= 0:
            raise ConfigError("subgroup_weights must be nonnegative with positive sum")
        prior = spec.resolved_prior() * weights
        prior = prior / prior.sum()
        pids = [p.pid for p in cohort.patients]
        subgroups, visits_true, statics = [], [], []
        for pid in pids:
            k, v, s = _simulate_patient(spec, structure, prior, pid, shift.seed)
            subgroups.append(k)
            visits_true.append(v)
            statics.append(s)
        stream_seed = shift.seed
        masked = _apply_missingness(spec, visits_true, pids, stream_seed)
    else:
        pids = [p.pid for p in cohort.patients]
        subgroups = [p.subgroup for p in cohort.patients]
        visits_true = None  # transformed summaries are derived, not resimulated
        statics = [(p.statics + off_stat) * sc_stat for p in cohort.patients]
        masked = [(p.visits + off_dyn[None, :]) * sc_dyn[None, :] for p in cohort.patients]
        stream_seed = spec.seed

    if visits_true is not None:
        visits_true = [(v + off_dyn[None, :]) * sc_dyn[None, :] for v in visits_true]
        statics = [(s + off_stat) * sc_stat for s in statics]
        summaries = [_summary_of(v, s) for v, s in zip(visits_true, statics)]
    else:
        summaries = []
        for p, s in zip(cohort.patients, statics):
            old = cohort._summaries[p.pid]
            dyn = (old[: spec.n_dynamic] + off_dyn) * sc_dyn
            summaries.append(np.concatenate([dyn, s]))

    labels = _draw_labels(structure, subgroups, summaries, pids, stream_seed)
    patients = [
        PatientRecord(pid=pid, visits=masked[i], statics=statics[i], label=int(labels[i]), subgroup=subgroups[i])
        for i, pid in enumerate(pids)
    ]
    return Cohort(patients, spec, structure, {pid: summaries[i] for i, pid in enumerate(pids)})


# ---------------------------------------------------------------------------
# imputation and model-input assembly


def locf_impute(x, defaults) -> np.ndarray:
    """Forward-fill each column; leading gaps take the per-feature default."""
    x = np.asarray(x, dtype=np.float64)
    defaults = np.asarray(defaults, dtype=np.float64)
    if x.ndim != 2 or defaults.shape != (x.shape[1],):
        raise ShapeError(f"defaults length {defaults.shape} must match features of {x.shape}")
    observed = ~np.isnan(x)
    rows = np.where(observed, np.arange(x.shape[0])[:, None], -1)
    rows = np.maximum.accumulate(rows, axis=0)
    cols = np.broadcast_to(np.arange(x.shape[1])[None, :], x.shape)
    filled = np.where(rows >= 0, x[np.maximum(rows, 0), cols], defaults[None, :])
    return filled


def dynamic_feature_means(cohort: Cohort) -> np.ndarray:
    """Mean of each dynamic feature over observed cells (imputation defaults)."""
    total = np.zeros(cohort.spec.n_dynamic)
    count = np.zeros(cohort.spec.n_dynamic)
    for p in cohort.patients:
        observed = ~np.isnan(p.visits)
        total += np.where(observed, p.visits, 0.0).sum(axis=0)
        count += observed.sum(axis=0)
    means = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return means


def materialize(cohort: Cohort, defaults) -> tuple[list, np.ndarray]:
    """Imputed T x (F_dyn + F_stat) matrices (statics broadcast) and labels."""
    matrices = []
    for p in cohort.patients:
        dyn = locf_impute(p.visits, defaults)
        stat = np.broadcast_to(p.statics, (dyn.shape[0], p.statics.shape[0]))
        matrices.append(np.ascontiguousarray(np.concatenate([dyn, stat], axis=1)))
    return matrices, cohort.labels


# ---------------------------------------------------------------------------
# stratified splitting


def _largest_remainder(n: int, fractions) -> list[int]:
    raw = [n * f for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    short = n - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in order[:short]:
        counts[i] += 1
    return counts


def stratified_split(cohort: Cohort, fractions=(0.7, 0.1, 0.2), seed: int = 0):
    """Label-stratified partition into len(fractions) disjoint sub-cohorts."""
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f <= 0 for f in fractions):
        raise ConfigError(f"fractions must be positive and sum to 1, got {fractions}")
    labels = cohort.labels
    classes = sorted(set(int(v) for v in labels))
    if len(classes) < 2:
        warnings.warn("single-class cohort: stratification is degenerate")
    buckets: list[list[int]] = [[] for _ in fractions]
    for cls in classes:
        pids = [p.pid for p in cohort.patients if p.label == cls]
        counts = _largest_remainder(len(pids), fractions)
        if any(c == 0 for c in counts):
            raise DataError(
                f"class {cls} has {len(pids)} patients, too few for one per split"
            )
        rng = substream(seed, "split", cls)
        order = rng.permutation(len(pids))
        shuffled = [pids[i] for i in order]
        start = 0
        for i, c in enumerate(counts):
            buckets[i].extend(shuffled[start : start + c])
            start += c
    return tuple(cohort.subset(sorted(b)) for b in buckets)


# ---------------------------------------------------------------------------
# on-disk dataset format


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def save_dataset(cohort: Cohort, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "spec": cohort.spec.to_dict(),
        "feature_names": cohort.feature_names(),
        "n_patients": len(cohort),
        "n_visits": cohort.spec.n_visits,
        "prevalence": cohort.prevalence,
        "subgroup_counts": [
            int(sum(1 for p in cohort.patients if p.subgroup == k))
            for k in range(cohort.spec.n_subgroups)
        ],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    dyn_names = cohort.feature_names()["dynamic"]
    with open(out / "visits.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "visit_index"] + dyn_names)
        for p in cohort.patients:
            for t in range(p.visits.shape[0]):
                row = [p.pid, t] + [
                    "" if np.isnan(v) else _fmt(v) for v in p.visits[t]
                ]
                writer.writerow(row)
    stat_names = cohort.feature_names()["static"]
    with open(out / "patients.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id"] + stat_names + ["label", "subgroup"])
        for p in cohort.patients:
            writer.writerow([p.pid] + [_fmt(v) for v in p.statics] + [p.label, p.subgroup])


def load_dataset(data_dir) -> Cohort:
    root = Path(data_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as err:
        raise DataError(f"no manifest.json under {root}") from err
    spec = CohortSpec.from_dict(manifest["spec"])
    statics, labels, subgroups = {}, {}, {}
    with open(root / "patients.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            pid = int(row["patient_id"])
            statics[pid] = np.array(
                [float(row[f"stat_{i}"]) for i in range(spec.n_static)]
            )
            labels[pid] = int(row["label"])
            subgroups[pid] = int(row["subgroup"])
    visits = {pid: np.full((spec.n_visits, spec.n_dynamic), np.nan) for pid in statics}
    with open(root / "visits.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            pid = int(row["patient_id"])
            t = int(row["visit_index"])
            for i in range(spec.n_dynamic):
                cell = row[f"dyn_{i}"]
                if cell != "":
                    visits[pid][t, i] = float(cell)
    patients = [
        PatientRecord(pid=pid, visits=visits[pid], statics=statics[pid], label=labels[pid], subgroup=subgroups[pid])
        for pid in sorted(statics)
    ]
    return Cohort(patients, spec)
