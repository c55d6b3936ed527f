"""Dice evaluation, paired t-tests and the cross-clinic scenario matrix."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations

import numpy as np
from scipy.stats import t as student_t

from . import pipelines as pl
from .models import ModelParams
from .synthdata import (
    TARGET_LABELED,
    TARGET_TEST,
    TARGET_UNLABELED,
    Dataset,
    DomainSpec,
    Sample,
    generate_domain,
)

log = logging.getLogger(__name__)

L_BOUND = "L-bound"
U_BOUND = "U-bound"
ADA = "ADA"
KD = "KD"
KD_ON_ADA = "KD-on-ADA"
FLY_KD = "on-the-fly-KD"
FLY_ADA = "on-the-fly-ADA"
METHODS = (L_BOUND, U_BOUND, ADA, KD, KD_ON_ADA, FLY_KD, FLY_ADA)
# on-the-fly ADA trains one adversarial model per test subject; it is left
# out of the default matrix and enabled by listing it explicitly
DEFAULT_METHODS = (L_BOUND, U_BOUND, ADA, KD, KD_ON_ADA, FLY_KD)
SUBJECTS_PER_CLINIC = 20
N_FOLDS = 2
CSV_HEADER = ("train", "test", "method", "fold", "seed", "subject", "dice")


class DegenerateTestError(ValueError):
    """Differences have zero spread but a nonzero mean, so t is unbounded."""


class MatrixCellError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def dice(pred_mask, truth_mask) -> float:
    """2|A and B| / (|A| + |B|), with two empty masks scoring 1.0."""
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(truth_mask).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"dice: mask shapes differ, {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def predict_masks(params: ModelParams, images: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over classes; ties go to the lowest class id."""
    return pl.predict_logits(params, images).argmax(axis=1)


def predict_mask(model, sample: Sample) -> np.ndarray:
    params = model.params if isinstance(model, pl.TrainedModel) else model
    return predict_masks(params, Dataset([sample], TARGET_TEST).images())[0]


def subject_dice(params: ModelParams, test: Dataset) -> list[float]:
    masks = predict_masks(params, test.images())
    return [dice(m, s.unseal()) for m, s in zip(masks, test.samples)]


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def t_sf_two_sided(t: float, dof: float) -> float:
    """P(|T| >= |t|) for Student's t with ``dof`` degrees of freedom."""
    return float(2.0 * student_t.sf(abs(t), dof))


@dataclass
class SignificanceReport:
    method_a: str
    method_b: str
    t_statistic: float
    p_value: float
    significant_at_5pct: bool
    n: int = 0
    train: str = ""
    test: str = ""


def paired_t_test(a, b, method_a: str = "a", method_b: str = "b") -> SignificanceReport:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return SignificanceReport(method_a, method_b, 0.0, 1.0, False, n)
        raise DegenerateTestError(f"differences are constant ({mean}); t is undefined")
    t = mean / (sd / math.sqrt(n))
    p = t_sf_two_sided(t, n - 1)
    return SignificanceReport(method_a, method_b, t, p, p < 0.05, n)


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------

@dataclass
class ScenarioResult:
    train_clinic: str
    test_clinic: str
    method: str
    per_subject_dice: list[float]
    seeds: list[int]
    mean: float = field(init=False)
    variance: float = field(init=False)

    def __post_init__(self):
        if any(not 0.0 <= d <= 1.0 for d in self.per_subject_dice):
            raise ValueError("Dice scores must lie in [0, 1]")
        arr = np.asarray(self.per_subject_dice, dtype=np.float64)
        self.mean = float(arr.mean()) if arr.size else float("nan")
        self.variance = float(arr.var()) if arr.size else float("nan")


@dataclass(frozen=True)
class Row:
    train: str
    test: str
    method: str
    fold: int
    seed: int
    subject: int
    dice: float

    def sort_key(self):
        return (self.train, self.test, self.method, self.seed, self.fold, self.subject)


@dataclass
class MatrixRun:
    rows: list[Row]
    results: list[ScenarioResult]
    tests: list[SignificanceReport]
    audit: list[dict]
    models: dict = field(default_factory=dict, repr=False)
    config: dict = field(default_factory=dict)

    def result(self, train: str, test: str, method: str) -> ScenarioResult:
        for r in self.results:
            if (r.train_clinic, r.test_clinic, r.method) == (train, test, method):
                return r
        raise KeyError((train, test, method))

    def seed_means(self) -> dict:
        """Mean Dice per (train, test, method, seed)."""
        groups: dict = {}
        for r in self.rows:
            groups.setdefault((r.train, r.test, r.method, r.seed), []).append(r.dice)
        return {k: float(np.mean(v)) for k, v in sorted(groups.items())}

    def csv_text(self) -> str:
        return rows_to_csv(self.rows)

    def review_flags(self) -> list[dict]:
        """Cells where labelled target data lowered the mean (U-bound < L-bound).

        This should not happen at desk scale; such cells are listed for a
        seed-sensitivity review instead of passing silently.
        """
        flags = []
        means = {(r.train_clinic, r.test_clinic, r.method): r.mean for r in self.results}
        for (train, test, method), mean in sorted(means.items()):
            if method != U_BOUND or (train, test, L_BOUND) not in means:
                continue
            lower = means[(train, test, L_BOUND)]
            if mean < lower:
                flags.append({"train": train, "test": test, "u_bound": mean, "l_bound": lower})
        return flags

    def summary(self) -> dict:
        return {
            "config": self.config,
            "results": [asdict(r) for r in self.results],
            "seed_means": [
                {"train": k[0], "test": k[1], "method": k[2], "seed": k[3], "mean": v}
                for k, v in self.seed_means().items()
            ],
            "t_tests": [asdict(t) for t in self.tests],
            "review": self.review_flags(),
            "audit": self.audit,
        }


def rows_to_csv(rows: list[Row]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in sorted(rows, key=Row.sort_key):
        w.writerow([r.train, r.test, r.method, r.fold, r.seed, r.subject, repr(float(r.dice))])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[Row]:
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader))
    if header != CSV_HEADER:
        raise ValueError(f"unexpected results header {header}")
    return [
        Row(t, s, m, int(f), int(seed), int(subj), float(d))
        for t, s, m, f, seed, subj, d in reader
    ]


def aggregate(rows: list[Row], all_pairs: bool = False, config: dict | None = None,
              audit: list[dict] | None = None, models: dict | None = None) -> MatrixRun:
    """Group rows into ScenarioResults and run the paired comparisons.

    By default only ADA is compared with KD; ``all_pairs`` compares every
    pair of methods present in a cell.
    """
    rows = sorted(rows, key=Row.sort_key)
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.train, r.test, r.method), []).append(r)
    results = [
        ScenarioResult(k[0], k[1], k[2], [r.dice for r in g], sorted({r.seed for r in g}))
        for k, g in sorted(groups.items())
    ]
    tests = []
    pairs = sorted({(r.train, r.test) for r in rows})
    for train, test in pairs:
        present = sorted({m for (t, s, m) in groups if (t, s) == (train, test)}, key=METHODS.index)
        if all_pairs:
            comparisons = list(combinations(present, 2))
        else:
            comparisons = [(ADA, KD)] if ADA in present and KD in present else []
        for ma, mb in comparisons:
            ga = {(r.seed, r.fold, r.subject): r.dice for r in groups[(train, test, ma)]}
            gb = {(r.seed, r.fold, r.subject): r.dice for r in groups[(train, test, mb)]}
            if ga.keys() != gb.keys():
                raise ValueError(f"{ma} and {mb} on {train}->{test} cover different subjects")
            keys = sorted(ga)
            try:
                rep = paired_t_test([ga[k] for k in keys], [gb[k] for k in keys], ma, mb)
            except DegenerateTestError:
                d = ga[keys[0]] - gb[keys[0]]
                rep = SignificanceReport(ma, mb, math.copysign(math.inf, d), 0.0, True, len(keys))
            rep.train, rep.test = train, test
            tests.append(rep)
    return MatrixRun(rows, results, tests, audit or [], models or {}, config or {})


# ---------------------------------------------------------------------------
# scenario matrix
# ---------------------------------------------------------------------------

def fold_split(n: int, fold: int) -> tuple[list[int], list[int]]:
    """(adaptation indices, test indices); fold 1 swaps the two halves."""
    half = n // 2
    first, second = list(range(half)), list(range(half, n))
    return (first, second) if fold == 0 else (second, first)


def cell_data(train: DomainSpec, test: DomainSpec, seed: int, n: int = SUBJECTS_PER_CLINIC):
    """Source set for ``train`` and all subjects of ``test`` for one seed."""
    return generate_domain(train, n, seed), generate_domain(test, n, seed, role=TARGET_TEST)


def _digests(ds: Dataset) -> list[str]:
    return [hashlib.sha256(s.image.tobytes()).hexdigest() for s in ds.samples]


def run_cell(train: DomainSpec, test: DomainSpec, seed: int, methods, cfg: pl.TrainConfig,
             n_subjects: int = SUBJECTS_PER_CLINIC, keep_models: bool = False,
             data: tuple[Dataset, Dataset] | None = None):
    """All requested methods for one (train clinic, test clinic, seed).

    ``data`` overrides the generated (source, target) pair, e.g. with sets
    read from disk. Returns (rows, audit record, models). Target labels are
    only read through ``Sample.unseal`` inside :func:`subject_dice`.
    """
    cfg = replace(cfg, seed=int(seed))
    if data is None:
        source, target = cell_data(train, test, seed, n_subjects)
    else:
        source, target = data[0], data[1].with_role(TARGET_TEST)
        if not source.labeled:
            raise MatrixCellError("source data must carry labels")
    rows: list[Row] = []
    models: dict = {}
    audit = {"train": train.domain_id, "test": test.domain_id, "seed": seed,
             "source": source.checksum(), "folds": []}
    teacher = None

    def record(method, fold, indices, scores):
        for i, d in zip(indices, scores):
            rows.append(Row(train.domain_id, test.domain_id, method, fold, seed, target[i].subject_id, d))

    def keep(method, fold, model):
        if keep_models:
            models[(train.domain_id, test.domain_id, seed, fold, method)] = model

    needs_teacher = {L_BOUND, KD, FLY_KD, FLY_ADA} & set(methods)
    if needs_teacher:
        teacher = pl.train_teacher(source, cfg)
        keep(L_BOUND, None, teacher)
    fly: dict[int, float] = {}
    fly_ada: dict[int, float] = {}
    for fold in range(N_FOLDS):
        adapt_idx, test_idx = fold_split(len(target), fold)
        unlabeled = target.subset(adapt_idx, TARGET_UNLABELED)
        labeled = target.subset(adapt_idx, TARGET_LABELED)
        held_out = target.subset(test_idx, TARGET_TEST)
        trained_on = set(_digests(source)) | set(_digests(unlabeled))
        leaked = trained_on & set(_digests(held_out))
        if leaked:
            raise MatrixCellError(f"{len(leaked)} test subjects appear in training data")
        audit["folds"].append({
            "fold": fold,
            "adapt": unlabeled.checksum(),
            "test": held_out.checksum(),
            "adapt_subjects": [target[i].subject_id for i in adapt_idx],
            "test_subjects": [target[i].subject_id for i in test_idx],
        })
        ada = None
        if L_BOUND in methods:
            record(L_BOUND, fold, test_idx, subject_dice(teacher.params, held_out))
        if U_BOUND in methods:
            m = pl.train_teacher(source, cfg, labeled_target=labeled, scenario=U_BOUND)
            record(U_BOUND, fold, test_idx, subject_dice(m.params, held_out))
            keep(U_BOUND, fold, m)
        if ADA in methods or KD_ON_ADA in methods:
            ada = pl.train_ada(source, unlabeled, cfg)
            keep(ADA, fold, ada)
            if ADA in methods:
                record(ADA, fold, test_idx, subject_dice(ada.params, held_out))
        if KD in methods:
            m = pl.distill_student(pl.make_soft_labels(teacher, source, unlabeled), cfg)
            record(KD, fold, test_idx, subject_dice(m.params, held_out))
            keep(KD, fold, m)
        if KD_ON_ADA in methods:
            m = pl.distill_from_ada(ada, source, unlabeled, cfg)
            record(KD_ON_ADA, fold, test_idx, subject_dice(m.params, held_out))
            keep(KD_ON_ADA, fold, m)
        for method, cache, kind in ((FLY_KD, fly, pl.KD), (FLY_ADA, fly_ada, pl.ADA)):
            if method not in methods:
                continue
            scores = []
            for i in test_idx:
                subject = target.subset([i], TARGET_UNLABELED)
                if i not in cache:
                    m = pl.adapt_on_the_fly(teacher, subject[0], kind, cfg, source)
                    cache[i] = subject_dice(m.params, target.subset([i], TARGET_TEST))[0]
                scores.append(cache[i])
            record(method, fold, test_idx, scores)
    return rows, audit, models


def _run_cell_job(job):
    train, test, seed, methods, cfg, n_subjects, keep_models = job
    try:
        return run_cell(train, test, seed, methods, cfg, n_subjects, keep_models)
    except Exception as exc:
        raise MatrixCellError(f"cell {train.domain_id}->{test.domain_id} seed {seed}: {exc}") from exc


def ordered_pairs(clinics) -> list[tuple[DomainSpec, DomainSpec]]:
    return [(a, b) for a in clinics for b in clinics if a.domain_id != b.domain_id]


def run_matrix(
    clinics,
    methods=DEFAULT_METHODS,
    seeds=(1,),
    cfg: pl.TrainConfig | None = None,
    workers: int = 1,
    pairs=None,
    n_subjects: int = SUBJECTS_PER_CLINIC,
    keep_models: bool = False,
    all_pairs: bool = False,
) -> MatrixRun:
    """Train and evaluate every method on every ordered clinic pair and seed.

    Cells run independently (in worker processes when ``workers > 1``);
    aggregation is sorted by cell key so output does not depend on the
    completion order.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("run_matrix needs at least one seed")
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}; known: {list(METHODS)}")
    methods = tuple(m for m in METHODS if m in methods)
    cfg = cfg or pl.desk_config()
    pairs = ordered_pairs(clinics) if pairs is None else list(pairs)
    jobs = [(a, b, s, methods, cfg, n_subjects, keep_models) for a, b in pairs for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_cell_job, jobs))
    else:
        outputs = []
        for job in jobs:
            log.info("cell %s->%s seed %d", job[0].domain_id, job[1].domain_id, job[2])
            outputs.append(_run_cell_job(job))
    rows = [r for out in outputs for r in out[0]]
    audit = sorted((out[1] for out in outputs), key=lambda a: (a["train"], a["test"], a["seed"]))
    models = {k: v for out in outputs for k, v in out[2].items()}
    config = {
        "clinics": [asdict(c) for c in clinics],
        "methods": list(methods),
        "seeds": seeds,
        "train": cfg.as_dict(),
        "n_subjects": n_subjects,
    }
    return aggregate(rows, all_pairs, config, audit, models)


def write_outputs(run: MatrixRun, out_dir) -> tuple[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "results.csv")
    json_path = os.path.join(out_dir, "summary.json")
    with open(csv_path, "w", newline="") as f:
        f.write(run.csv_text())
    with open(json_path, "w") as f:
        json.dump(run.summary(), f, indent=2, sort_keys=True)
        f.write("\n")
    return csv_path, json_path
