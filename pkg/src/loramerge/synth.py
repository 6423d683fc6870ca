"""Synthetic multi-task benchmark for adapter merging.

Each task is a linear regression ``y = (W0 + B* A*) x`` with a shared base
``W0`` and a low-rank ground-truth update whose singular values are chosen
exactly.  LoRA adapters are fitted by full-batch gradient descent, merged with
each method and scored by relative Frobenius recovery of the true update.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from typing import Sequence

import numpy as np

from .adapter_io import AdapterSet, LoraPair
from .errors import LoraMergeError, NumericError, ValidationError
from .linalg import thin_qr
from .merge import MergeConfig, merge

log = logging.getLogger(__name__)

MODULE = "proj"
SPECTRA = ("flat", "geometric")
RELATIONS = ("shared", "orthogonal", "mixed")
MERGE_METHODS = ("robust", "task_arithmetic", "ties", "dare")
RESULT_COLUMNS = ("scenario", "seed", "method", "task", "rel_err", "mse")


@dataclass(frozen=True)
class ScenarioSpec:
    name: str = "default"
    n_tasks: int = 4
    d_out: int = 64
    d_in: int = 64
    rank: int = 4
    spectrum: str = "geometric"
    gamma: float = 0.5
    relation: str = "orthogonal"
    n_train: int = 256
    n_eval: int = 256
    steps: int = 2000
    lr: float = 20.0
    prune_rate: float = 0.9
    lam: float = 2.0
    drop_prob: float = 0.5

    def __post_init__(self):
        for name in ("n_tasks", "d_out", "d_in", "rank", "n_train", "n_eval"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ValidationError(f"{name}: must be a positive integer")
        if not isinstance(self.steps, int) or self.steps < 0:
            raise ValidationError("steps: must be a non-negative integer")
        if self.spectrum not in SPECTRA:
            raise ValidationError(f"spectrum: must be one of {SPECTRA}")
        if self.relation not in RELATIONS:
            raise ValidationError(f"relation: must be one of {RELATIONS}")
        if not (0 < self.gamma <= 1):
            raise ValidationError("gamma: must lie in (0, 1]")
        if not self.lr > 0:
            raise ValidationError("lr: must be positive")
        if not (0 <= self.prune_rate < 1):
            raise ValidationError("prune_rate: must lie in [0, 1)")
        if not (0 <= self.drop_prob < 1):
            raise ValidationError("drop_prob: must lie in [0, 1)")
        if not self.lam > 0:
            raise ValidationError("lam: must be positive")
        dmin = min(self.d_out, self.d_in)
        if self.rank > dmin:
            raise ValidationError(f"rank: {self.rank} exceeds min(d_out, d_in) = {dmin}")
        if self.relation == "orthogonal" and self.n_tasks * self.rank > dmin:
            raise ValidationError(
                f"n_tasks * rank = {self.n_tasks * self.rank} exceeds min(d_out, d_in) = "
                f"{dmin}, required by the orthogonal relation"
            )
        if self.relation == "mixed":
            shared = self.rank // 2
            if shared + self.n_tasks * (self.rank - shared) > dmin:
                raise ValidationError(
                    "rank: mixed relation needs rank//2 + n_tasks*(rank - rank//2) <= min(d_out, d_in)"
                )

    def sigmas(self) -> np.ndarray:
        if self.spectrum == "flat":
            return np.ones(self.rank)
        return self.gamma ** np.arange(self.rank, dtype=np.float64)

    def merge_config(self, method: str) -> MergeConfig:
        return MergeConfig(
            method=method,
            prune_rate=self.prune_rate if method in ("robust", "ties") else None,
            lam=self.lam,
            drop_prob=self.drop_prob if method == "dare" else None,
        )

    @classmethod
    def from_dict(cls, data: dict, where: str = "scenario") -> "ScenarioSpec":
        if not isinstance(data, dict):
            raise ValidationError(f"{where}: expected an object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"{where}.{unknown[0]}: unknown field")
        try:
            return cls(**data)
        except ValidationError as exc:
            raise ValidationError(f"{where}.{exc}") from None
        except TypeError as exc:
            raise ValidationError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class SyntheticTask:
    task_id: str
    W0: np.ndarray
    target: LoraPair
    sigmas: np.ndarray
    X_train: np.ndarray
    Y_train: np.ndarray
    X_eval: np.ndarray
    Y_eval: np.ndarray

    @property
    def target_delta(self) -> np.ndarray:
        return self.target.B.astype(np.float64) @ self.target.A.astype(np.float64)


def _orthonormal(rng, rows, cols) -> np.ndarray:
    Q, _ = thin_qr(rng.standard_normal((rows, cols)))
    return Q.astype(np.float64)


def generate_tasks(spec: ScenarioSpec, seed: int) -> list[SyntheticTask]:
    """Tasks with exact spectra; row spaces of A* follow ``spec.relation``."""
    root = np.random.SeedSequence([int(seed), 0x5EED])
    structure, *task_seeds = root.spawn(1 + spec.n_tasks)
    rng = np.random.default_rng(structure)
    N, r = spec.n_tasks, spec.rank
    W0 = rng.standard_normal((spec.d_out, spec.d_in)) / np.sqrt(spec.d_in)

    if spec.relation == "shared":
        V = _orthonormal(rng, spec.d_in, r)
        row_spaces = [V] * N
    elif spec.relation == "orthogonal":
        V = _orthonormal(rng, spec.d_in, N * r)
        row_spaces = [V[:, n * r:(n + 1) * r] for n in range(N)]
    else:
        shared = r // 2
        own = r - shared
        V = _orthonormal(rng, spec.d_in, shared + N * own)
        row_spaces = [
            np.hstack([V[:, :shared], V[:, shared + n * own: shared + (n + 1) * own]])
            for n in range(N)
        ]

    sig = spec.sigmas()
    tasks = []
    for n in range(N):
        trng = np.random.default_rng(task_seeds[n])
        train_ss, eval_ss = task_seeds[n].spawn(2)
        U = _orthonormal(trng, spec.d_out, r)
        B_star = U * sig
        A_star = row_spaces[n].T
        target = LoraPair(MODULE, A_star.astype(np.float32), B_star.astype(np.float32))
        W = W0 + B_star @ A_star
        X_tr = np.random.default_rng(train_ss).standard_normal((spec.d_in, spec.n_train))
        X_ev = np.random.default_rng(eval_ss).standard_normal((spec.d_in, spec.n_eval))
        tasks.append(SyntheticTask(
            task_id=f"task{n}", W0=W0, target=target, sigmas=sig,
            X_train=X_tr, Y_train=W @ X_tr, X_eval=X_ev, Y_eval=W @ X_ev,
        ))
    return tasks


def train_adapter(task: SyntheticTask, r: int, steps: int, lr: float, seed: int) -> LoraPair:
    """Fit B @ A to the task residual by full-batch gradient descent on the MSE.

    B starts at zero and A uniform in +-1/sqrt(d_in), the usual LoRA init.
    """
    d_out, d_in = task.W0.shape
    if r > min(d_out, d_in):
        raise ValidationError(f"rank {r} exceeds min(d_out, d_in) = {min(d_out, d_in)}")
    rng = np.random.default_rng([int(seed), 0xADA])
    bound = 1.0 / np.sqrt(d_in)
    A = rng.uniform(-bound, bound, size=(r, d_in))
    B = np.zeros((d_out, r))

    n = task.X_train.shape[1]
    X = task.X_train
    C = X @ X.T / n
    P = (task.Y_train - task.W0 @ X) @ X.T / n
    g = 2.0 / d_out
    # overflow is expected on divergence and reported below
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(steps):
            E = g * (B @ (A @ C) - P)
            grad_B = E @ A.T
            grad_A = B.T @ E
            B -= lr * grad_B
            A -= lr * grad_A
            if not (np.isfinite(B).all() and np.isfinite(A).all()):
                raise NumericError(f"training diverged at step {step}; try a smaller lr than {lr}")
    return LoraPair(MODULE, A.astype(np.float32), B.astype(np.float32))


def _delta(merged) -> np.ndarray:
    pair = merged[MODULE] if isinstance(merged, AdapterSet) else merged
    return pair.B.astype(np.float64) @ pair.A.astype(np.float64)


def evaluate(W0, merged, task: SyntheticTask) -> tuple[float, float]:
    """(relative Frobenius error of the update, held-out MSE)."""
    delta = _delta(merged)
    if delta.shape != task.W0.shape:
        raise ValidationError(f"update shape {delta.shape} does not match W0 {task.W0.shape}")
    target = task.target_delta
    rel = float(np.linalg.norm(delta - target) / np.linalg.norm(target))
    pred = (np.asarray(W0, dtype=np.float64) + delta) @ task.X_eval
    mse = float(np.mean((pred - task.Y_eval) ** 2))
    return rel, mse


def train_all(spec: ScenarioSpec, seed: int, tasks=None):
    tasks = tasks if tasks is not None else generate_tasks(spec, seed)
    adapters = []
    for n, task in enumerate(tasks):
        pair = train_adapter(task, spec.rank, spec.steps, spec.lr, seed=seed * 1000 + n)
        adapters.append(AdapterSet.from_pairs(task.task_id, [pair]))
    return tasks, adapters


@dataclass
class ResultTable:
    rows: list[tuple] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    seconds: dict[str, float] = field(default_factory=dict)

    def means(self) -> list[tuple]:
        groups: dict[tuple, list] = {}
        for scen, _seed, method, _task, rel, mse in self.rows:
            groups.setdefault((scen, method), []).append((rel, mse))
        return [
            (scen, "all", method, "mean",
             float(np.mean([v[0] for v in vals])), float(np.mean([v[1] for v in vals])))
            for (scen, method), vals in groups.items()
        ]

    def mean(self, method: str, scenario: str | None = None) -> float:
        vals = [r[4] for r in self.rows if r[2] == method and (scenario is None or r[0] == scenario)]
        return float(np.mean(vals))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for scen, seed, method, task, rel, mse in self.rows + self.means():
            writer.writerow([scen, seed, method, task, repr(rel), repr(mse)])
        return buf.getvalue()


def run_experiment(specs: Sequence[ScenarioSpec], methods: Sequence[str], seeds: Sequence[int]) -> ResultTable:
    """Every (scenario, seed, method) cell; failing cells are recorded and skipped."""
    for m in methods:
        if m not in MERGE_METHODS + ("individual",):
            raise ValidationError(f"methods: unknown method {m!r}")
    table = ResultTable()
    for spec in specs:
        t0 = time.perf_counter()
        for seed in seeds:
            try:
                tasks, adapters = train_all(spec, seed)
            except LoraMergeError as exc:
                table.failures.append({"scenario": spec.name, "seed": seed, "method": "*", "error": str(exc)})
                continue
            for method in methods:
                try:
                    if method == "individual":
                        scores = [evaluate(t.W0, a, t) for t, a in zip(tasks, adapters)]
                    else:
                        merged, _ = merge(adapters, spec.merge_config(method))
                        scores = [evaluate(t.W0, merged, t) for t in tasks]
                except LoraMergeError as exc:
                    table.failures.append(
                        {"scenario": spec.name, "seed": seed, "method": method, "error": str(exc)}
                    )
                    log.warning("%s seed %s %s failed: %s", spec.name, seed, method, exc)
                    continue
                for task, (rel, mse) in zip(tasks, scores):
                    table.rows.append((spec.name, seed, method, task.task_id, rel, mse))
        table.seconds[spec.name] = time.perf_counter() - t0
    return table


@dataclass
class ExperimentConfig:
    scenarios: list[ScenarioSpec]
    methods: list[str]
    seeds: list[int]

    def to_dict(self):
        return {
            "scenarios": [asdict(s) for s in self.scenarios],
            "methods": list(self.methods),
            "seeds": list(self.seeds),
        }


def parse_config(data) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ValidationError("config: expected a JSON object")
    unknown = sorted(set(data) - {"scenarios", "methods", "seeds"})
    if unknown:
        raise ValidationError(f"config.{unknown[0]}: unknown field")
    raw = data.get("scenarios")
    if not isinstance(raw, list) or not raw:
        raise ValidationError("scenarios: expected a non-empty list")
    scenarios = [ScenarioSpec.from_dict(s, f"scenarios[{i}]") for i, s in enumerate(raw)]
    methods = data.get("methods", ["individual", *MERGE_METHODS])
    if not isinstance(methods, list) or not methods:
        raise ValidationError("methods: expected a non-empty list")
    for i, m in enumerate(methods):
        if m not in MERGE_METHODS + ("individual",):
            raise ValidationError(f"methods[{i}]: unknown method {m!r}")
    seeds = data.get("seeds", [0])
    if not isinstance(seeds, list) or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ValidationError("seeds: expected a list of non-negative integers")
    return ExperimentConfig(scenarios, methods, seeds)


def load_config(path=None) -> ExperimentConfig:
    """Parse a JSON experiment config; ``None`` loads the bundled default."""
    if path is None:
        text = resources.files("loramerge").joinpath("data/default_config.json").read_text()
        where = "<bundled default>"
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        where = str(path)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{where}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_config(data)


def geometric_adapter(d_out, d_in, r, gamma, seed, module=MODULE) -> LoraPair:
    """Adapter whose update has singular values gamma**i in a random gauge.

    ``B = U diag(s) R`` and ``A = R^T V^T`` for orthonormal ``U, V`` and a random
    r x r rotation ``R``, so neither factor lines up with the singular basis.
    """
    rng = np.random.default_rng([int(seed), 0x6E0])
    U = _orthonormal(rng, d_out, r)
    V = _orthonormal(rng, d_in, r)
    R = _orthonormal(rng, r, r)
    s = gamma ** np.arange(r, dtype=np.float64)
    B = (U * s) @ R * np.sqrt(d_in / r)
    A = R.T @ V.T / np.sqrt(d_in / r)
    return LoraPair(module, A.astype(np.float32), B.astype(np.float32))
