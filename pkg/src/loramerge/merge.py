"""Training-free merging of LoRA adapters.

``robust_merge`` prunes each task's A and B by magnitude, rescales B's columns
so every row of A regains its lost L1 mass, normalises those scales across
tasks and merges as a product of sums::

    dW = lam * sum_n(B~_n @ diag(S~_n)) @ sum_n(A~_n)

The baselines (task arithmetic, TIES, DARE) act on the A and B stacks
separately so the merged result is again a rank-r adapter.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .adapter_io import AdapterSet, LoraPair, validate_compatibility
from .errors import NumericError, ParameterError, ShapeError
from .linalg import apply_mask, magnitude_mask, matmul, row_l1

log = logging.getLogger(__name__)

METHODS = ("robust", "task_arithmetic", "ties", "dare")
DEAD_ROW_POLICIES = ("error", "unit_scale")
DEFAULT_PRUNE_RATE = 0.9
DEFAULT_DROP_PROB = 0.5
DEFAULT_LAMBDA = 2.0


@dataclass(frozen=True)
class MergeConfig:
    method: str = "robust"
    prune_rate: float | None = None
    lam: float = DEFAULT_LAMBDA
    drop_prob: float | None = None
    seed: int = 0
    dead_row_policy: str = "error"
    strict: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.method in ("robust", "ties"):
            if self.prune_rate is None:
                object.__setattr__(self, "prune_rate", DEFAULT_PRUNE_RATE)
            if not (0.0 <= self.prune_rate < 1.0):
                raise ParameterError(f"prune_rate must lie in [0, 1), got {self.prune_rate}")
        elif self.prune_rate is not None:
            raise ParameterError(f"prune_rate does not apply to method {self.method!r}")
        if self.method == "dare":
            if self.drop_prob is None:
                object.__setattr__(self, "drop_prob", DEFAULT_DROP_PROB)
            if not (0.0 <= self.drop_prob < 1.0):
                raise ParameterError(f"drop_prob must lie in [0, 1), got {self.drop_prob}")
        elif self.drop_prob is not None:
            raise ParameterError("drop_prob only applies to method 'dare'")
        if not (self.lam > 0 and np.isfinite(self.lam)):
            raise ParameterError(f"lambda must be positive, got {self.lam}")
        if not (-(2**63) <= int(self.seed) < 2**64):
            raise ParameterError("seed must fit in 64 bits")
        if self.dead_row_policy not in DEAD_ROW_POLICIES:
            raise ParameterError(
                f"dead_row_policy must be one of {DEAD_ROW_POLICIES}, got {self.dead_row_policy!r}"
            )

    def to_dict(self):
        return asdict(self)


@dataclass
class ModuleReport:
    tasks: list[str]
    pruned_a: list[int] = field(default_factory=list)
    pruned_b: list[int] = field(default_factory=list)
    scaling: list[list[float]] = field(default_factory=list)
    normalized: list[list[float]] = field(default_factory=list)
    dead_rows: list[dict] = field(default_factory=list)
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        out = asdict(self)
        out.update(out.pop("extra"))
        return out


@dataclass
class MergeReport:
    method: str
    modules: dict[str, ModuleReport] = field(default_factory=dict)

    def to_dict(self):
        return {name: rep.to_dict() for name, rep in self.modules.items()}

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


# -- building blocks -------------------------------------------------------

def complementary_scaling(A, mask_A, dead_row_policy="error", incidents=None, task=None):
    """Per-row ratio of A's L1 mass before and after masking.

    A row whose mass is entirely pruned either raises or, under the
    ``unit_scale`` policy, gets scale 1.  An all-zero row always gets 1.
    """
    if dead_row_policy not in DEAD_ROW_POLICIES:
        raise ParameterError(f"unknown dead_row_policy {dead_row_policy!r}")
    full = row_l1(A)
    kept = row_l1(apply_mask(A, mask_A))
    scale = np.ones_like(full)
    live = kept > 0.0
    scale[live] = full[live] / kept[live]
    where = f" of task {task!r}" if task is not None else ""
    for i in np.flatnonzero(~live):
        if full[i] == 0.0:
            log.info("row %d%s of A is all zeros; scale set to 1", i, where)
            kind = "zero_row"
        elif dead_row_policy == "error":
            raise NumericError(
                f"row {i}{where} of A lost all of its L1 mass to pruning; "
                "lower the prune rate or use dead_row_policy='unit_scale'"
            )
        else:
            log.warning("row %d%s of A fully pruned; scale set to 1", i, where)
            kind = "dead_row"
        if incidents is not None:
            incidents.append({"task": task, "row": int(i), "kind": kind})
    return scale


def cross_task_normalize(vectors: Sequence) -> list[np.ndarray]:
    vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
    if not vectors:
        raise ShapeError("need at least one scaling vector")
    r = vectors[0].shape
    for n, v in enumerate(vectors):
        if v.shape != r:
            raise ShapeError(f"scaling vector {n} has length {v.shape}, expected {r}")
    total = np.zeros(r)
    for v in vectors:
        total += v
    if not (total > 0).all():
        raise NumericError("scaling vectors must have positive per-index sums")
    return [v / total for v in vectors]


def prune_and_scale(pair: LoraPair, k: float, dead_row_policy="error") -> LoraPair:
    """Single-adapter transform: prune A and B, fold the raw scales into B."""
    mask_a = magnitude_mask(pair.A, k)
    scale = complementary_scaling(pair.A, mask_a, dead_row_policy)
    A = apply_mask(pair.A, mask_a)
    B = apply_mask(pair.B, magnitude_mask(pair.B, k)).astype(np.float64) * scale
    return LoraPair(pair.module_name, A, B.astype(np.float32), pair.alpha)


def compose_delta(pair: LoraPair) -> np.ndarray:
    return matmul(pair.B, pair.A)


def _sum64(arrays) -> np.ndarray:
    it = iter(arrays)
    acc = np.array(next(it), dtype=np.float64)
    for a in it:
        acc += a
    return acc


def _dare_uniforms(seed, task, tensor_key, size) -> np.ndarray:
    digest = hashlib.blake2b(
        f"{int(seed)}\x00{task}\x00{tensor_key}".encode(), digest_size=16
    ).digest()
    key = np.frombuffer(digest, dtype="<u8")
    return np.random.Generator(np.random.Philox(key=key)).random(size)


def dare_drop(X, p, seed, task, tensor_key):
    """Drop entries with probability p and rescale survivors by 1/(1-p).

    Entry i's fate depends only on (seed, task, tensor_key, i).
    """
    X = np.asarray(X, dtype=np.float32)
    keep = (_dare_uniforms(seed, task, tensor_key, X.size) >= p).reshape(X.shape)
    scaled = (X.astype(np.float64) / (1.0 - p)).astype(np.float32)
    return np.where(keep, scaled, np.float32(0.0)), keep


# -- per-module kernels ----------------------------------------------------

def _robust_module(name, pairs, tasks, cfg):
    k = cfg.prune_rate
    rep = ModuleReport(tasks=tasks)
    A_t, B_t, scales = [], [], []
    for task, p in zip(tasks, pairs):
        mask_a = magnitude_mask(p.A, k)
        mask_b = magnitude_mask(p.B, k)
        rep.pruned_a.append(int(mask_a.size - mask_a.sum()))
        rep.pruned_b.append(int(mask_b.size - mask_b.sum()))
        scales.append(complementary_scaling(p.A, mask_a, cfg.dead_row_policy, rep.dead_rows, task))
        A_t.append(apply_mask(p.A, mask_a))
        B_t.append(apply_mask(p.B, mask_b))
    normed = cross_task_normalize(scales)
    rep.scaling = [s.tolist() for s in scales]
    rep.normalized = [s.tolist() for s in normed]
    A_m = _sum64(A_t)
    B_m = cfg.lam * _sum64(B.astype(np.float64) * s for B, s in zip(B_t, normed))
    return A_m.astype(np.float32), B_m.astype(np.float32), rep


def _ta_combine(As, Bs, lam):
    N = len(As)
    A_m = _sum64(As)
    B_m = lam * _sum64(Bs) / N
    return A_m.astype(np.float32), B_m.astype(np.float32)


def _ta_module(name, pairs, tasks, cfg):
    rep = ModuleReport(tasks=tasks, extra={"ta_scale": 1.0 / len(pairs)})
    A_m, B_m = _ta_combine([p.A for p in pairs], [p.B for p in pairs], cfg.lam)
    return A_m, B_m, rep


def ties_combine(tensors, k):
    """Trim, elect sign, disjoint mean; returns (merged, pruned counts)."""
    trimmed, pruned = [], []
    for X in tensors:
        mask = magnitude_mask(X, k)
        pruned.append(int(mask.size - mask.sum()))
        trimmed.append(apply_mask(X, mask).astype(np.float64))
    T = np.stack(trimmed)
    elected = np.where(_sum64(trimmed) >= 0.0, 1.0, -1.0)
    agree = np.sign(T) == elected
    count = agree.sum(axis=0)
    total = _sum64(np.where(a, t, 0.0) for a, t in zip(agree, T))
    merged = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return merged, pruned


def _ties_module(name, pairs, tasks, cfg):
    rep = ModuleReport(tasks=tasks)
    A_m, rep.pruned_a = ties_combine([p.A for p in pairs], cfg.prune_rate)
    B_m, rep.pruned_b = ties_combine([p.B for p in pairs], cfg.prune_rate)
    return A_m.astype(np.float32), (cfg.lam * B_m).astype(np.float32), rep


def _dare_module(name, pairs, tasks, cfg):
    rep = ModuleReport(tasks=tasks, extra={"ta_scale": 1.0 / len(pairs)})
    As, Bs = [], []
    for task, p in zip(tasks, pairs):
        A, keep_a = dare_drop(p.A, cfg.drop_prob, cfg.seed, task, name + ".lora_A.weight")
        B, keep_b = dare_drop(p.B, cfg.drop_prob, cfg.seed, task, name + ".lora_B.weight")
        rep.pruned_a.append(int(keep_a.size - keep_a.sum()))
        rep.pruned_b.append(int(keep_b.size - keep_b.sum()))
        As.append(A)
        Bs.append(B)
    A_m, B_m = _ta_combine(As, Bs, cfg.lam)
    return A_m, B_m, rep


_MODULE_KERNELS = {
    "robust": _robust_module,
    "task_arithmetic": _ta_module,
    "ties": _ties_module,
    "dare": _dare_module,
}


def merge_threads() -> int:
    raw = os.environ.get("MERGE_THREADS", "").strip()
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ParameterError(f"MERGE_THREADS must be an integer, got {raw!r}") from None
    return min(4, os.cpu_count() or 1)


def _run(sets, cfg: MergeConfig, method: str):
    if cfg.method != method:
        raise ParameterError(f"config selects {cfg.method!r} but {method!r} was called")
    sets = sorted(sets, key=lambda s: s.task_name)
    layout = validate_compatibility(sets, strict=cfg.strict)
    tasks = [s.task_name for s in sets]
    kernel = _MODULE_KERNELS[method]

    def work(name):
        t0 = time.perf_counter()
        A_m, B_m, rep = kernel(name, [s[name] for s in sets], tasks, cfg)
        rep.seconds = time.perf_counter() - t0
        return LoraPair(name, A_m, B_m, layout.alpha), rep

    threads = min(merge_threads(), len(layout.modules))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, layout.modules))
    else:
        results = [work(name) for name in layout.modules]

    report = MergeReport(method)
    pairs = []
    for name, (pair, rep) in zip(layout.modules, results):
        pairs.append(pair)
        report.modules[name] = rep
    meta = {"merge_method": method, "merge_tasks": ",".join(tasks)}
    return AdapterSet.from_pairs("merged", pairs, meta), report


def robust_merge(sets, cfg: MergeConfig):
    return _run(sets, cfg, "robust")


def task_arithmetic_merge(sets, cfg: MergeConfig):
    return _run(sets, cfg, "task_arithmetic")


def ties_merge(sets, cfg: MergeConfig):
    return _run(sets, cfg, "ties")


def dare_merge(sets, cfg: MergeConfig):
    return _run(sets, cfg, "dare")


def merge(sets, cfg: MergeConfig):
    """Dispatch on ``cfg.method``."""
    return _run(sets, cfg, cfg.method)


__all__ = [
    "METHODS",
    "MergeConfig",
    "MergeReport",
    "ModuleReport",
    "complementary_scaling",
    "cross_task_normalize",
    "prune_and_scale",
    "compose_delta",
    "dare_drop",
    "ties_combine",
    "robust_merge",
    "task_arithmetic_merge",
    "ties_merge",
    "dare_merge",
    "merge",
    "merge_threads",
]
