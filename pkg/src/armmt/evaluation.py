"""Ranking evaluation: AUC, the four-variant ablation runner, weight dumps.

AUC is the probability that a random positive outranks a random negative,
ties counting one half, computed by rank-sum in O(n log n).  Conversion AUC
is pooled across sessions by default (one positive in thirty per session
makes per-session AUC noisy); per-session averaging is available behind a
flag.  The ablation runner trains every variant from identical name-seeded
initial conditions per seed and evaluates on the held-out tail of the
session list (final 10%, mirroring a temporal split).
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from multiprocessing import get_context

import numpy as np

from .data import Dataset, SessionExample
from .model import VARIANTS, ModelConfig, ModelParams, forward_batch, init_model
from .training import Checkpoint, TrainConfig, train

EVAL_BATCH = 64
TEST_FRACTION = 0.1


class UndefinedAucError(ValueError):
    """AUC needs at least one positive and one negative label."""


def auc(scores, labels) -> float:
    """Rank-sum AUC with the tie convention of one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ValueError("labels must be binary")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError(
            f"AUC undefined: {n_pos} positive and {n_neg} negative labels"
        )
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * ((i + 1) + (j + 1))  # average 1-based rank
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def split_sessions(
    sessions: list[SessionExample], test_fraction: float = TEST_FRACTION
) -> tuple[list[SessionExample], list[SessionExample]]:
    """Final-fraction-by-index split (stand-in for a temporal holdout)."""
    n_test = max(1, int(len(sessions) * test_fraction))
    return sessions[:-n_test], sessions[-n_test:]


def collect_scores(
    model: ModelParams, sessions: list[SessionExample], batch: int = EVAL_BATCH
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Forward every session; returns (conv scores, conv labels, ctr scores, ctr labels)."""
    y_hat, y, y_hat_ctr, y_ctr = [], [], [], []
    for lo in range(0, len(sessions), batch):
        chunk = sessions[lo : lo + batch]
        trace = forward_batch(chunk, model)
        y_hat.append(trace.y_hat.data.reshape(-1))
        y_hat_ctr.append(trace.y_hat_ctr.data.reshape(-1))
        y.append(np.array([s.conversion_labels for s in chunk]).reshape(-1))
        y_ctr.append(np.array([s.click_labels for s in chunk]).reshape(-1))
    return (
        np.concatenate(y_hat),
        np.concatenate(y),
        np.concatenate(y_hat_ctr),
        np.concatenate(y_ctr),
    )


def conversion_auc(
    model: ModelParams, sessions: list[SessionExample], session_average: bool = False
) -> float:
    scores, labels, _, _ = collect_scores(model, sessions)
    if not session_average:
        return auc(scores, labels)
    n = len(sessions[0].candidates)
    per = [
        auc(scores[i * n : (i + 1) * n], labels[i * n : (i + 1) * n])
        for i in range(len(sessions))
    ]
    return float(np.mean(per))


@dataclass
class EvalReport:
    variant: str
    seed: int
    auc: float
    auc_ctr: float | None
    sessions: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "EvalReport":
        return cls(**json.loads(line))


def evaluate(model: ModelParams, sessions: list[SessionExample], seed: int = 0) -> EvalReport:
    scores, labels, ctr_scores, ctr_labels = collect_scores(model, sessions)
    try:
        ctr = auc(ctr_scores, ctr_labels)
    except UndefinedAucError:
        ctr = None
    return EvalReport(
        variant=model.variant,
        seed=seed,
        auc=auc(scores, labels),
        auc_ctr=ctr,
        sessions=len(sessions),
    )


# ---------------------------------------------------------------------------
# ablation runner
# ---------------------------------------------------------------------------

_WORKER_CTX: tuple | None = None


def _init_worker(dataset, train_config, model_config, test_fraction):
    global _WORKER_CTX
    _WORKER_CTX = (dataset, train_config, model_config, test_fraction)


def _run_worker(task: tuple[str, int]) -> EvalReport:
    dataset, train_config, model_config, test_fraction = _WORKER_CTX
    variant, seed = task
    return _train_and_eval(dataset, train_config, model_config, variant, seed, test_fraction)


def _train_and_eval(
    dataset: Dataset,
    train_config: TrainConfig,
    model_config: ModelConfig,
    variant: str,
    seed: int,
    test_fraction: float,
) -> EvalReport:
    train_sessions, test_sessions = split_sessions(dataset.sessions, test_fraction)
    model = init_model(model_config, dataset.meta, dataset.catalog, variant, seed)
    cfg = dataclasses.replace(train_config, seed=seed)
    train(train_sessions, model, cfg)
    return evaluate(model, test_sessions, seed=seed)


def run_ablation(
    dataset: Dataset,
    train_config: TrainConfig,
    seeds: list[int],
    model_config: ModelConfig | None = None,
    variants: tuple[str, ...] = VARIANTS,
    workers: int | None = None,
    test_fraction: float = TEST_FRACTION,
) -> list[EvalReport]:
    """Train and evaluate every (variant, seed) pair; order is deterministic.

    Runs are independent, so they execute in parallel worker processes when
    ``workers`` allows; results are returned in task order regardless.
    """
    model_config = model_config or ModelConfig()
    tasks = [(variant, seed) for seed in seeds for variant in variants]
    if workers is None:
        import os

        workers = min(len(tasks), os.cpu_count() or 1)
    if workers <= 1:
        return [
            _train_and_eval(dataset, train_config, model_config, v, s, test_fraction)
            for v, s in tasks
        ]
    with ProcessPoolExecutor(
        max_workers=workers,
        mp_context=get_context("spawn"),
        initializer=_init_worker,
        initargs=(dataset, train_config, model_config, test_fraction),
    ) as pool:
        return list(pool.map(_run_worker, tasks))


def mean_aucs(reports: list[EvalReport]) -> dict[str, float]:
    by_variant: dict[str, list[float]] = {}
    for r in reports:
        by_variant.setdefault(r.variant, []).append(r.auc)
    return {v: float(np.mean(a)) for v, a in by_variant.items()}


# ---------------------------------------------------------------------------
# fusion-weight inspection
# ---------------------------------------------------------------------------

FUSION_DUMP_HEADER = "session,item_id,s_item_img,s_item_text,s_pers_img,s_pers_text"


def dump_fusion_weights(
    dataset: Dataset, checkpoint: Checkpoint, path: str, limit: int | None = None
) -> None:
    """One CSV row per (session, item) with both fusion-weight pairs."""
    model = checkpoint.model
    sessions = dataset.sessions[:limit] if limit else dataset.sessions
    with open(path, "w", encoding="utf-8") as f:
        f.write(FUSION_DUMP_HEADER + "\n")
        for lo in range(0, len(sessions), EVAL_BATCH):
            chunk = sessions[lo : lo + EVAL_BATCH]
            trace = forward_batch(chunk, model)
            n = trace.list_size
            s_item = trace.s_item.data
            s_pers = trace.s_pers.data
            for b, session in enumerate(chunk):
                for i, item in enumerate(session.candidates):
                    row = b * n + i
                    f.write(
                        f"{lo + b},{item.item_id},"
                        f"{s_item[row, 0]:.6f},{s_item[row, 1]:.6f},"
                        f"{s_pers[row, 0]:.6f},{s_pers[row, 1]:.6f}\n"
                    )
