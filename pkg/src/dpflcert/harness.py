"""Seeded Monte-Carlo ensembles, certification tables and sweeps.

Directory layout under an output root::

    plans/<hash>/plan.json
    plans/<hash>/runs/<o>/model.ckpt
    plans/<hash>/runs/<o>/eval.npz
    plans/<hash>/runs/<o>/record.json      (written last; marks the run complete)
    plans/<hash>/quarantine/<o>.<n>/       (runs whose files failed verification)
    tables/*.csv, figures/*.png            (sweep and report output)

``<hash>`` is the hash of the canonical JSON of everything that determines
the ensemble: data, partition, model, federation config, attack and base
seed.  Two ensembles with the same hash are interchangeable, which is what
makes resuming and sharing clean ensembles across sweeps safe.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import shutil
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attacks import AttackSpec, corner_pattern, format_pattern, parse_pattern, poison_federation, stamp
from .certify import (NONNEGATIVE, certified_accuracy, certified_k, cost_bounds, cost_from_confidences,
                      estimate_expectation, hoeffding_calibrate, largest_certified_k, min_attackers)
from .data import (Dataset, Partition, filter_binary, load_idx, partition_iid, synthesize_blobs,
                   train_test_split)
from .errors import ConfigurationError, FormatError, UsageError
from .fedsim import FederationConfig, accountant_report, accuracy, train
from .models import Model, build_model, save_checkpoint
from .privacy import PrivacyReport

WORKERS_ENV = "DPFLCERT_WORKERS"
COST_KINDS = {"LF": "labelflip", "BKD": "backdoor", "DBA": "backdoor"}


# --------------------------------------------------------------------------
# hashing, seeds and file helpers

def canonical_json(obj) -> str:
    """Key-sorted compact JSON; floats use Python's shortest round-trip repr."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def child_seed(base_seed: int, index: int) -> int:
    """Stable 64-bit seed for run ``index`` of an ensemble."""
    digest = hashlib.blake2b(struct.pack("<QQ", base_seed, index), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.17g" % value
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    _atomic_write(path, buf.getvalue().encode())
    return path


def read_csv(path: Path | str) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# plans

@dataclass(frozen=True)
class DataSpec:
    """Where the federation's data comes from.

    ``kind="blobs"`` synthesizes Gaussian blobs; ``kind="idx"`` reads IDX
    files, optionally reduced to a binary task via ``class_a``/``class_b``.
    """

    kind: str = "blobs"
    n_train: int = 400
    n_test: int = 200
    dim: int = 5
    n_classes: int = 2
    separation: float = 3.0
    seed: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    class_a: int = -1
    class_b: int = -1

    def load(self) -> tuple[Dataset, Dataset]:
        if self.kind == "blobs":
            full = synthesize_blobs(self.n_train + self.n_test, self.dim, self.n_classes,
                                    self.separation, self.seed)
            return train_test_split(full, self.n_test / len(full), self.seed)
        if self.kind == "idx":
            tr = load_idx(self.train_images, self.train_labels)
            te = load_idx(self.test_images, self.test_labels)
            if self.class_a >= 0:
                tr = filter_binary(tr, self.class_a, self.class_b)
                te = filter_binary(te, self.class_a, self.class_b)
            return tr, te
        raise ConfigurationError(f"unknown data kind {self.kind!r}")


@dataclass(frozen=True)
class ExperimentPlan:
    """Everything a sweep needs.  Lists are the sweep axes."""

    federation: FederationConfig
    data: DataSpec = DataSpec()
    model: dict = field(default_factory=lambda: {"arch": "logistic"})
    sigmas: tuple[float, ...] = (1.0,)
    cost_sigmas: tuple[float, ...] | None = None
    kinds: tuple[str, ...] = ("LF", "BKD")
    ks: tuple[int, ...] = (0, 1, 2, 4)
    gammas: tuple[float, ...] = (1.0,)
    fractions: tuple[float, ...] = (1.0,)
    taus: tuple[float, ...] = (1.0, 2.0)
    k_list: tuple[int, ...] = tuple(range(0, 11))
    repetitions: int = 1000
    cost_repetitions: int = 100
    psi: float = 0.01
    base_seed: int = 0
    c_bar: float = 10.0
    pattern: str = ""
    target_label: int = 0
    source_class: int = 1

    def __post_init__(self):
        if self.repetitions < 1 or self.cost_repetitions < 1:
            raise ConfigurationError("repetitions must be >= 1")
        if not 0 < self.psi <= 1:
            raise ConfigurationError("psi must lie in (0, 1]")
        for s in self.sigmas + (self.cost_sigmas or ()):
            self.federation.replace(noise=s)
        for k in self.ks:
            if k < 0 or k > self.federation.n_users:
                raise ConfigurationError(f"k={k} outside [0, {self.federation.n_users}]")

    def trigger(self) -> tuple:
        if self.pattern:
            return parse_pattern(self.pattern)
        return corner_pattern(self.n_features, min(3, self.n_features))

    @property
    def n_features(self) -> int:
        return self.data.dim if self.data.kind == "blobs" else 784

    def model_config(self, n_features: int, n_classes: int) -> dict:
        cfg = {"arch": "logistic", **self.model}
        cfg.setdefault("n_features", n_features)
        cfg.setdefault("n_classes", n_classes)
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["federation"] = self.federation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        d = dict(d)
        fed = d.pop("federation", {})
        data = d.pop("data", {})
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown plan fields: {sorted(unknown)}")
        for key in ("sigmas", "cost_sigmas", "kinds", "ks", "gammas", "fractions", "taus", "k_list"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(federation=FederationConfig(**fed), data=DataSpec(**data), **d)


def load_plan_file(path: Path | str) -> dict:
    """Read a YAML or JSON plan file into a plain dict."""
    import yaml

    text = Path(path).read_text()
    loaded = yaml.safe_load(text) if str(path).endswith((".yml", ".yaml")) else json.loads(text)
    if not isinstance(loaded, dict):
        raise ConfigurationError(f"{path}: expected a mapping at the top level")
    return loaded


# --------------------------------------------------------------------------
# ensembles

@dataclass(frozen=True)
class EnsembleSpec:
    data: DataSpec
    model: dict
    federation: FederationConfig
    attack: AttackSpec | None
    repetitions: int
    base_seed: int
    trigger: tuple = ()

    def identity(self) -> dict:
        """Fields that determine the runs.  ``repetitions`` is excluded so a
        larger ensemble extends a smaller one."""
        return {
            "data": asdict(self.data),
            "model": self.model,
            "federation": self.federation.replace(seed=0).to_dict(),
            "attack": self.attack.to_dict() if self.attack else None,
            "base_seed": self.base_seed,
            "trigger": format_pattern(self.trigger),
        }

    @property
    def hash(self) -> str:
        return config_hash(self.identity())


@dataclass
class Ensemble:
    directory: Path
    spec: EnsembleSpec
    confidences: np.ndarray  # (O, n_test, C)
    triggered: np.ndarray  # (O, n_test, C) confidences on stamped test inputs
    test_labels: np.ndarray
    report: PrivacyReport
    trained: int  # runs executed by this call; 0 when everything resumed

    @property
    def repetitions(self) -> int:
        return self.confidences.shape[0]


_CACHE: dict[tuple, tuple] = {}


def _federation(spec: EnsembleSpec):
    key = (canonical_json(asdict(spec.data)), spec.federation.n_users,
           canonical_json(spec.attack.to_dict() if spec.attack else None))
    if key not in _CACHE:
        tr, te = spec.data.load()
        part = partition_iid(tr, spec.federation.n_users, spec.data.seed)
        _CACHE[key] = (tr, te, part, poison_federation(tr, part, spec.attack))
        if len(_CACHE) > 64:
            _CACHE.pop(next(iter(_CACHE)))
    return _CACHE[key]


def _run_one(spec: EnsembleSpec, run_dir: str, index: int) -> None:
    tr, te, part, view = _federation(spec)
    model = build_model(spec.model)
    config = spec.federation.replace(seed=child_seed(spec.base_seed, index))
    result = train(config, view, model)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt, ev = run_dir / "model.ckpt", run_dir / "eval.npz"
    save_checkpoint(ckpt, result.params, model)
    buf = io.BytesIO()
    np.savez(buf, test=model.predict_confidence(result.params, te.features),
             triggered=model.predict_confidence(result.params, stamp(te.features, spec.trigger)))
    _atomic_write(ev, buf.getvalue())
    record = {
        "config_hash": spec.hash,
        "index": index,
        "seed": config.seed,
        "privacy": result.report.to_dict(),
        "metrics": {"test_accuracy": accuracy(model, result.params, te)},
        "artifacts": {"model.ckpt": _sha256(ckpt), "eval.npz": _sha256(ev)},
    }
    _atomic_write(run_dir / "record.json", (canonical_json(record) + "\n").encode())


def _run_complete(run_dir: Path, spec_hash: str) -> bool:
    try:
        record = json.loads((run_dir / "record.json").read_text())
        if record["config_hash"] != spec_hash:
            return False
        return all(_sha256(run_dir / name) == digest for name, digest in record["artifacts"].items())
    except (OSError, ValueError, KeyError, TypeError):
        return False


def _quarantine(plan_dir: Path, run_dir: Path) -> None:
    qdir = plan_dir / "quarantine"
    qdir.mkdir(exist_ok=True)
    n = 0
    while (qdir / f"{run_dir.name}.{n}").exists():
        n += 1
    shutil.move(str(run_dir), str(qdir / f"{run_dir.name}.{n}"))


def workers_from_env(default: int = 1) -> int:
    value = os.environ.get(WORKERS_ENV, "")
    try:
        return max(1, int(value)) if value else default
    except ValueError:
        raise ConfigurationError(f"{WORKERS_ENV} must be an integer, got {value!r}") from None


def run_ensemble(root: Path | str, spec: EnsembleSpec, workers: int | None = None) -> Ensemble:
    """Train (or resume) ``spec.repetitions`` runs and collect their confidences.

    A run is complete when its ``record.json`` exists and the artifact
    digests it lists match the files on disk.  Anything else found in a run
    directory is moved to ``quarantine/`` and retrained.
    """
    root = Path(root)
    plan_dir = root / "plans" / spec.hash
    runs_dir = plan_dir / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    plan_file = plan_dir / "plan.json"
    if not plan_file.exists():
        _atomic_write(plan_file, (canonical_json(spec.identity()) + "\n").encode())

    todo = []
    for o in range(spec.repetitions):
        run_dir = runs_dir / str(o)
        if _run_complete(run_dir, spec.hash):
            continue
        if run_dir.exists():
            _quarantine(plan_dir, run_dir)
        todo.append(o)

    workers = workers or workers_from_env()
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(workers) as pool:
            list(pool.map(_run_one, [spec] * len(todo), [str(runs_dir / str(o)) for o in todo], todo))
    else:
        for o in todo:
            _run_one(spec, str(runs_dir / str(o)), o)

    conf, trig = [], []
    for o in range(spec.repetitions):
        with np.load(runs_dir / str(o) / "eval.npz") as z:
            conf.append(z["test"])
            trig.append(z["triggered"])
    _, te, _, _ = _federation(spec)
    n_layers = len(build_model(spec.model).layers)
    return Ensemble(plan_dir, spec, np.stack(conf), np.stack(trig), te.labels,
                    accountant_report(spec.federation, n_layers=n_layers), len(todo))


def load_ensemble(root: Path | str, spec: EnsembleSpec) -> Ensemble:
    """Load a finished ensemble without training; raises UsageError if incomplete."""
    runs_dir = Path(root) / "plans" / spec.hash / "runs"
    missing = [o for o in range(spec.repetitions) if not _run_complete(runs_dir / str(o), spec.hash)]
    if missing:
        raise UsageError(f"ensemble {spec.hash} is missing {len(missing)} of {spec.repetitions} runs")
    return run_ensemble(root, spec, workers=1)


# --------------------------------------------------------------------------
# certification tables

PRED_HEADER = ("sample_id", "label", "prediction", "runner_up", "correct", "F_A", "F_B", "K")


@dataclass
class PredictionTable:
    epsilon: float
    delta: float
    psi: float
    rows: list[tuple]
    k_list: tuple[int, ...]
    accuracy_rows: list[tuple]

    @property
    def K(self) -> np.ndarray:
        return np.array([r[7] for r in self.rows])

    @property
    def correct(self) -> np.ndarray:
        return np.array([r[4] for r in self.rows], dtype=bool)

    @property
    def predictions(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])


def certify_prediction(ensemble: Ensemble | None, k_list: Sequence[int], psi: float,
                       epsilon: float | None = None, delta: float | None = None) -> PredictionTable:
    """Per-sample K and certified accuracy at every ``k`` in ``k_list``.

    ``epsilon``/``delta`` default to the ensemble's accountant report.
    """
    if ensemble is None:
        raise UsageError("certify_prediction needs a completed ensemble")
    epsilon = ensemble.report.epsilon if epsilon is None else epsilon
    delta = ensemble.report.delta if delta is None else delta
    est = estimate_expectation(ensemble.confidences)
    if psi < 1:
        est = hoeffding_calibrate(est, psi)
    rows = []
    for i, (a, b, fa, fb) in enumerate(zip(est.top, est.runner_up, est.fa, est.fb)):
        K = certified_k(float(fa), float(fb), epsilon, delta) if math.isfinite(epsilon) else 0.0
        label = int(ensemble.test_labels[i])
        rows.append((i, label, int(a), int(b), int(a) == label, float(fa), float(fb), K))
    table = PredictionTable(epsilon, delta, psi, rows, tuple(k_list), [])
    table.accuracy_rows = [(k, certified_accuracy(table.correct, table.K, k)) for k in k_list]
    return table


def write_prediction_table(table: PredictionTable, directory: Path, stem: str) -> tuple[Path, Path]:
    ks = table.k_list
    header = PRED_HEADER + tuple(f"cert_k{k}" for k in ks)
    rows = [r + tuple(k < r[7] for k in ks) for r in table.rows]
    per_sample = write_csv(directory / f"{stem}_samples.csv", header, rows)
    acc = write_csv(directory / f"{stem}_accuracy.csv",
                    ("epsilon", "delta", "psi", "k", "certified_accuracy"),
                    [(table.epsilon, table.delta, table.psi, k, a) for k, a in table.accuracy_rows])
    return per_sample, acc


def ensemble_cost(ensemble: Ensemble, kind: str, target_label: int, source_class: int,
                  c_bar: float) -> tuple[float, bool]:
    """Empirical expected attack cost: average of per-run clamped costs."""
    cost_kind = COST_KINDS[kind]
    values, clamped = [], False
    for o in range(ensemble.repetitions):
        if cost_kind == "backdoor":
            conf = ensemble.triggered[o]
        else:
            conf = ensemble.confidences[o][ensemble.test_labels == source_class]
        cv = cost_from_confidences(conf, target_label, c_bar)
        values.append(cv.value)
        clamped |= cv.clamped
    return float(np.mean(values)), clamped


COST_HEADER_BASE = ("kind", "k", "gamma", "alpha", "epsilon", "delta", "c_bar", "j_clean",
                    "empirical_j", "lower", "upper", "lower_holds", "lower_nonincreasing",
                    "clamped", "certified_samples", "prediction_violations")


@dataclass(frozen=True)
class AttackCell:
    kind: str
    k: int
    gamma: float
    alpha: float


def certify_cost(root: Path | str, clean: Ensemble, cells: Sequence[AttackCell], plan: ExperimentPlan,
                 prediction: PredictionTable | None = None, workers: int | None = None) -> list[tuple]:
    """Run the poisoned ensembles for every cell and compare with the bounds.

    Columns ``min_k_tau<τ>`` hold the minimum-attacker bound for each τ.
    ``prediction_violations`` counts test samples certified at ``k`` whose
    ensemble prediction changed under the attack.
    """
    if clean is None:
        raise UsageError("certify_cost needs a completed clean ensemble")
    eps, delta = clean.report.epsilon, clean.report.delta
    rows, last_lower = [], {}
    for cell in cells:
        if cell.k == 0:
            poisoned = clean
        else:
            attack = AttackSpec(cell.kind, cell.k, cell.alpha, cell.gamma, clean.spec.trigger,
                                plan.target_label, plan.source_class)
            poisoned = run_ensemble(root, replace(clean.spec, attack=attack), workers)
        j_clean, _ = ensemble_cost(clean, cell.kind, plan.target_label, plan.source_class, plan.c_bar)
        j_att, clamped = ensemble_cost(poisoned, cell.kind, plan.target_label, plan.source_class,
                                       plan.c_bar)
        b = cost_bounds(j_clean, eps, delta, cell.k, plan.c_bar, NONNEGATIVE)
        key = (cell.kind, cell.gamma, cell.alpha)
        nonincreasing = b.lower <= last_lower.get(key, math.inf)
        last_lower[key] = b.lower
        certified = violations = 0
        if prediction is not None:
            attacked_top = estimate_expectation(poisoned.confidences).top
            mask = cell.k < prediction.K
            certified = int(mask.sum())
            violations = int((attacked_top[mask] != prediction.predictions[mask]).sum())
        taus = [_min_k(j_clean, eps, delta, t, plan.c_bar) for t in plan.taus]
        rows.append((cell.kind, cell.k, cell.gamma, cell.alpha, eps, delta, plan.c_bar, j_clean, j_att,
                     b.lower, b.upper, j_att >= b.lower, nonincreasing, clamped, certified,
                     violations, *taus))
    return rows


def _min_k(j, eps, delta, tau, c_bar) -> float:
    try:
        return min_attackers(j, eps, delta, tau, c_bar)
    except (ValueError, ZeroDivisionError):
        return math.nan


def cost_header(taus: Sequence[float]) -> tuple[str, ...]:
    return COST_HEADER_BASE + tuple(f"min_k_tau{fmt(float(t))}" for t in taus)


# --------------------------------------------------------------------------
# sweeps and reports

def _specs(plan: ExperimentPlan, sigma: float, repetitions: int) -> EnsembleSpec:
    tr, te = plan.data.load()
    return EnsembleSpec(plan.data, plan.model_config(tr.dim, tr.num_classes),
                        plan.federation.replace(noise=sigma), None, repetitions, plan.base_seed,
                        plan.trigger())


def cells_for(plan: ExperimentPlan) -> list[AttackCell]:
    return [AttackCell(kind, k, g, a) for kind in plan.kinds for g in plan.gammas
            for a in plan.fractions for k in sorted(plan.ks)]


@dataclass
class SweepResult:
    tables_dir: Path
    tradeoff: list[tuple]
    files: list[Path]


def sweep(root: Path | str, plan: ExperimentPlan, workers: int | None = None,
          with_cost: bool = True) -> SweepResult:
    """For each σ: clean ensemble, prediction certificates, and (for σ in
    ``cost_sigmas``) the attack grid with cost certificates."""
    root = Path(root)
    tables = root / "tables"
    files, tradeoff = [], []
    cost_sigmas = plan.sigmas if plan.cost_sigmas is None else plan.cost_sigmas
    for sigma in plan.sigmas:
        tag = f"sigma{fmt(float(sigma))}"
        ens = run_ensemble(root, _specs(plan, sigma, plan.repetitions), workers)
        table = certify_prediction(ens, plan.k_list, plan.psi)
        files.extend(write_prediction_table(table, tables, f"pred_{tag}"))
        clean_acc = float(np.mean(estimate_expectation(ens.confidences).top == ens.test_labels))
        tradeoff.append((sigma, table.epsilon, clean_acc, largest_certified_k(table.correct, table.K)))
        if with_cost and sigma in cost_sigmas:
            cost_ens = ens if plan.cost_repetitions == plan.repetitions else run_ensemble(
                root, _specs(plan, sigma, plan.cost_repetitions), workers)
            cost_pred = table if cost_ens is ens else certify_prediction(cost_ens, plan.k_list, plan.psi)
            rows = certify_cost(root, cost_ens, cells_for(plan), plan, cost_pred, workers)
            files.append(write_csv(tables / f"cost_{tag}.csv", cost_header(plan.taus), rows))
    files.append(write_csv(tables / "tradeoff.csv",
                           ("sigma", "epsilon", "clean_accuracy", "largest_certified_k"), tradeoff))
    return SweepResult(tables, tradeoff, files)


def report(root: Path | str) -> list[Path]:
    """Merge sweep tables into plot-data CSVs and render the figures."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    root = Path(root)
    tables, figures = root / "tables", root / "figures"
    if not tables.is_dir():
        raise UsageError(f"{tables} does not exist; run a sweep first")
    figures.mkdir(parents=True, exist_ok=True)
    out: list[Path] = []

    acc_rows = []
    for path in sorted(tables.glob("pred_sigma*_accuracy.csv")):
        sigma = path.name[len("pred_sigma"):-len("_accuracy.csv")]
        for r in read_csv(path):
            acc_rows.append((float(sigma), float(r["epsilon"]), int(r["k"]), float(r["certified_accuracy"])))
    acc_rows.sort()
    if acc_rows:
        out.append(write_csv(figures / "certified_accuracy.csv",
                             ("sigma", "epsilon", "k", "certified_accuracy"), acc_rows))
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for sigma in sorted({r[0] for r in acc_rows}):
            pts = [r for r in acc_rows if r[0] == sigma]
            ax.plot([r[2] for r in pts], [r[3] for r in pts], marker="o", label=f"eps={pts[0][1]:.3g}")
        ax.set_xlabel("number of adversarial users k")
        ax.set_ylabel("certified accuracy")
        ax.legend(fontsize=7)
        out.append(_save(fig, figures / "certified_accuracy.png"))

    trade = tables / "tradeoff.csv"
    if trade.exists():
        rows = sorted((float(r["epsilon"]), int(r["largest_certified_k"]), float(r["clean_accuracy"]))
                      for r in read_csv(trade))
        out.append(write_csv(figures / "tradeoff.csv", ("epsilon", "largest_certified_k", "clean_accuracy"),
                             rows))
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot([r[0] for r in rows], [r[1] for r in rows], marker="o")
        ax.set_xscale("log")
        ax.set_xlabel("epsilon")
        ax.set_ylabel("largest certified k")
        out.append(_save(fig, figures / "tradeoff.png"))

    cost_rows = []
    for path in sorted(tables.glob("cost_sigma*.csv")):
        for r in read_csv(path):
            cost_rows.append((r["kind"], float(r["gamma"]), float(r["alpha"]), float(r["epsilon"]),
                              int(r["k"]), float(r["lower"]), float(r["empirical_j"]), float(r["upper"])))
    cost_rows.sort()
    if cost_rows:
        out.append(write_csv(figures / "attack_cost.csv",
                             ("kind", "gamma", "alpha", "epsilon", "k", "lower", "empirical_j", "upper"),
                             cost_rows))
        groups = sorted({r[:4] for r in cost_rows})
        fig, axes = plt.subplots(1, len(groups), figsize=(3 * len(groups), 3), squeeze=False)
        for ax, g in zip(axes[0], groups):
            pts = [r for r in cost_rows if r[:4] == g]
            ks = [r[4] for r in pts]
            ax.fill_between(ks, [r[5] for r in pts], [r[7] for r in pts], alpha=0.3, label="certified range")
            ax.plot(ks, [r[6] for r in pts], marker="o", label="empirical")
            ax.set_title(f"{g[0]} g={g[1]:g} a={g[2]:g} eps={g[3]:.2g}", fontsize=7)
            ax.set_xlabel("k")
        axes[0][0].set_ylabel("attack cost")
        axes[0][0].legend(fontsize=6)
        out.append(_save(fig, figures / "attack_cost.png"))
    return out


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    import matplotlib.pyplot as plt

    plt.close(fig)
    return path
