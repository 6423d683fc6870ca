"""Singular-value diagnostics for task and merged adapters.

All spectra come from the factored SVD of ``B @ A``; the dense update is never
formed.  Singular vectors of a task adapter and a merged adapter are paired by
their rank in descending singular value.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .adapter_io import AdapterSet, LoraPair
from .errors import ShapeError, ValidationError
from .linalg import lowrank_svd

DEGENERATE_SIGMA = 1e-8
NEAR_DEGENERATE_GAP = 1e-3
ROBUSTNESS_COLUMNS = ("module", "task", "index", "sigma_task", "sigma_merged", "ratio", "sim_v", "sim_u")


def spectrum(pair: LoraPair) -> np.ndarray:
    return lowrank_svd([(pair.B, pair.A)]).sigma


@dataclass
class SpectrumRow:
    module: str
    values: np.ndarray

    @property
    def head(self) -> float:
        return float(self.values[0])

    @property
    def tail_mean(self) -> float:
        tail = self.values[1:]
        return float(tail.mean()) if tail.size else float("nan")

    @property
    def tail_head_ratio(self) -> float:
        return self.tail_mean / self.head if self.head > 0 else float("nan")


@dataclass
class SpectrumReport:
    rows: list[SpectrumRow] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, module):
        for row in self.rows:
            if row.module == module:
                return row
        raise KeyError(module)

    def to_csv(self) -> str:
        width = max((len(r.values) for r in self.rows), default=0)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["module", "rank", "head", "tail_mean", "tail_head_ratio"]
            + [f"sigma_{i + 1}" for i in range(width)]
        )
        for r in self.rows:
            values = [repr(float(v)) for v in r.values] + [""] * (width - len(r.values))
            writer.writerow(
                [r.module, len(r.values), repr(r.head), repr(r.tail_mean), repr(r.tail_head_ratio)]
                + values
            )
        return buf.getvalue()


def select_modules(adapter: AdapterSet, module_filter=None) -> list[str]:
    """Exact name match wins; otherwise every module starting with the filter."""
    names = list(adapter.modules)
    if module_filter is None:
        return names
    if module_filter in adapter.modules:
        return [module_filter]
    hits = [n for n in names if n.startswith(module_filter)]
    if not hits:
        raise ValidationError(
            f"no module matches {module_filter!r}; available: {', '.join(names)}"
        )
    return hits


def spectrum_report(adapter: AdapterSet, module_filter=None) -> SpectrumReport:
    return SpectrumReport(
        [SpectrumRow(m, spectrum(adapter[m])) for m in select_modules(adapter, module_filter)]
    )


def spectrum_sweep(before: AdapterSet, after: AdapterSet, module_filter=None):
    """Aligned before/after spectrum reports over the same modules."""
    if list(before.modules) != list(after.modules):
        raise ValidationError("before/after adapters have different module layouts")
    return spectrum_report(before, module_filter), spectrum_report(after, module_filter)


def _check_pairable(task_pair: LoraPair, merged_pair: LoraPair):
    if (task_pair.d_out, task_pair.d_in) != (merged_pair.d_out, merged_pair.d_in):
        raise ShapeError(
            f"cannot compare {task_pair.d_out}x{task_pair.d_in} task update with "
            f"{merged_pair.d_out}x{merged_pair.d_in} merged update"
        )


def _head_rest(values):
    """Split into (value at index 1, mean of defined values after it)."""
    head = values[0] if values else None
    rest = [v for v in values[1:] if v is not None]
    return head, (float(np.mean(rest)) if rest else None)


@dataclass
class RobustnessRow:
    module: str
    task: str
    sigma_task: list[float]
    sigma_merged: list[float]
    ratio: list[float | None]
    sim_v: list[float | None]
    sim_u: list[float | None]
    near_degenerate: list[int] = field(default_factory=list)

    def summary(self) -> dict:
        out = {"module": self.module, "task": self.task}
        for key in ("sim_v", "sim_u", "ratio"):
            head, rest = _head_rest(getattr(self, key))
            out[f"{key}_head"] = head
            out[f"{key}_rest_mean"] = rest
        out["near_degenerate"] = self.near_degenerate
        return out


def _paired(task_pair, merged_pair):
    _check_pairable(task_pair, merged_pair)
    t = lowrank_svd([(task_pair.B, task_pair.A)])
    m = lowrank_svd([(merged_pair.B, merged_pair.A)])
    q = min(task_pair.rank, merged_pair.rank)
    return t, m, q


def direction_similarity(task_pair: LoraPair, merged_pair: LoraPair):
    """Per-index |cos| between paired right and left singular vectors.

    Returns ``(sim_v, sim_u)``; entries are ``None`` where either singular
    value is degenerate.
    """
    t, m, q = _paired(task_pair, merged_pair)
    return _similarities(t, m, q)


def _similarities(t, m, q):
    sim_v, sim_u = [], []
    for i in range(q):
        if t.sigma[i] < DEGENERATE_SIGMA or m.sigma[i] < DEGENERATE_SIGMA:
            sim_v.append(None)
            sim_u.append(None)
            continue
        cv = abs(float(t.V[:, i].astype(np.float64) @ m.V[:, i].astype(np.float64)))
        cu = abs(float(t.U[:, i].astype(np.float64) @ m.U[:, i].astype(np.float64)))
        sim_v.append(min(cv, 1.0))
        sim_u.append(min(cu, 1.0))
    return sim_v, sim_u


def value_ratio(task_pair: LoraPair, merged_pair: LoraPair):
    """Per-index merged/task singular value ratio with a head/rest summary."""
    t, m, q = _paired(task_pair, merged_pair)
    ratios = _ratios(t, m, q)
    head, rest = _head_rest(ratios)
    return ratios, {"head": head, "rest_mean": rest}


def _ratios(t, m, q):
    return [
        None if t.sigma[i] < DEGENERATE_SIGMA else float(m.sigma[i] / t.sigma[i])
        for i in range(q)
    ]


def robustness_row(task_pair: LoraPair, merged_pair: LoraPair, task: str) -> RobustnessRow:
    t, m, q = _paired(task_pair, merged_pair)
    sim_v, sim_u = _similarities(t, m, q)
    sig = t.sigma
    near = [
        i for i in range(q)
        if sig[i] >= DEGENERATE_SIGMA
        and any(
            0 <= j < len(sig) and abs(sig[i] - sig[j]) <= NEAR_DEGENERATE_GAP * sig[i]
            for j in (i - 1, i + 1)
        )
    ]
    return RobustnessRow(
        module=task_pair.module_name,
        task=task,
        sigma_task=[float(v) for v in t.sigma[:q]],
        sigma_merged=[float(v) for v in m.sigma[:q]],
        ratio=_ratios(t, m, q),
        sim_v=sim_v,
        sim_u=sim_u,
        near_degenerate=near,
    )


def _fmt(v):
    return "" if v is None else repr(float(v))


def _mean_defined(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class RobustnessReport:
    rows: list[RobustnessRow] = field(default_factory=list)

    def summaries(self) -> list[dict]:
        return [r.summary() for r in self.rows]

    def uniform_mean(self) -> dict:
        """Unweighted mean of every per-(task, module) summary statistic."""
        sums = self.summaries()
        keys = [k for k in sums[0] if k.endswith(("_head", "_rest_mean"))] if sums else []
        return {k: _mean_defined([s[k] for s in sums]) for k in keys}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(ROBUSTNESS_COLUMNS)
        for r in self.rows:
            for i in range(len(r.sigma_task)):
                writer.writerow([
                    r.module, r.task, i + 1, _fmt(r.sigma_task[i]), _fmt(r.sigma_merged[i]),
                    _fmt(r.ratio[i]), _fmt(r.sim_v[i]), _fmt(r.sim_u[i]),
                ])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"per_module": self.summaries(), "uniform_mean": self.uniform_mean()}

    def to_json(self, **kwargs) -> str:
        def clean(obj):
            if isinstance(obj, float) and not math.isfinite(obj):
                return None
            if isinstance(obj, dict):
                return {k: clean(v) for k, v in obj.items()}
            if isinstance(obj, list):
                return [clean(v) for v in obj]
            return obj
        return json.dumps(clean(self.to_dict()), **kwargs)


def robustness_report(tasks, merged: AdapterSet, module_filter=None) -> RobustnessReport:
    """Compare every task adapter against the merged adapter, module by module."""
    report = RobustnessReport()
    for task in sorted(tasks, key=lambda s: s.task_name):
        for name in select_modules(merged, module_filter):
            if name not in task.modules:
                raise ValidationError(f"task {task.task_name!r} has no module {name!r}")
            report.rows.append(robustness_row(task[name], merged[name], task.task_name))
    return report
