"""Episodic sampling and evaluation.

Episodes are n-way k-shot tasks: n classes drawn without replacement,
k support items and q query items per class, drawn without replacement
within the class. Evaluation runs many independent trials and reports
mean accuracy with a normal-approximation 95% confidence interval
(1.96 * sample std / sqrt(trials)).

Randomness uses the counter-based Philox generator keyed by
(seed, trial), so every trial has its own substream and results are
identical no matter how trials are scheduled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import baselines
from .head import FeatureMap, HeadParams, SupportPool, episode_logits
from .linalg import ShapeError


class SamplingError(ValueError):
    """An episode request the dataset cannot satisfy."""


class EvaluationError(RuntimeError):
    """A trial failed; ``completed_trials`` holds the progress made."""

    def __init__(self, message: str, completed_trials: int):
        super().__init__(message)
        self.completed_trials = completed_trials


@dataclass
class Dataset:
    """Labeled feature maps grouped by class, all sharing (r, d)."""

    classes: dict[int, list[FeatureMap]]

    def __post_init__(self):
        if not self.classes:
            raise ValueError("dataset needs at least one class")
        shapes = set()
        for cid, maps in self.classes.items():
            if not maps:
                raise ValueError(f"class {cid} has no items")
            shapes.update((m.r, m.d) for m in maps)
        if len(shapes) != 1:
            raise ShapeError(f"feature maps disagree in shape: {sorted(shapes)}")
        self._r, self._d = shapes.pop()

    @property
    def r(self) -> int:
        return self._r

    @property
    def d(self) -> int:
        return self._d

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def counts(self) -> dict[int, int]:
        return {cid: len(maps) for cid, maps in self.classes.items()}

    @classmethod
    def from_arrays(cls, items: np.ndarray, labels: Sequence[int]) -> "Dataset":
        """Build from an (n_items, r, d) array and per-item class ids."""
        items = np.asarray(items)
        if items.ndim != 3:
            raise ShapeError(f"items must be (n, r, d), got shape {items.shape}")
        if len(labels) != items.shape[0]:
            raise ValueError(f"{len(labels)} labels for {items.shape[0]} items")
        classes: dict[int, list[FeatureMap]] = {}
        for x, y in zip(items, labels):
            classes.setdefault(int(y), []).append(FeatureMap(values=np.array(x)))
        return cls(classes=classes)

    def map_features(self, fn: Callable[[np.ndarray], np.ndarray]) -> "Dataset":
        """New dataset with ``fn`` applied to every feature-map array."""
        return Dataset(
            classes={
                cid: [FeatureMap(values=fn(m.values)) for m in maps]
                for cid, maps in self.classes.items()
            }
        )


@dataclass(frozen=True)
class Episode:
    """One sampled n-way k-shot task with episode-local labels in [0, n)."""

    n: int
    k: int
    q: int
    support: list[SupportPool]
    queries: list[tuple[FeatureMap, int]]
    source_classes: tuple[int, ...] = ()


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    """Independent counter-based substream for one trial of one run."""
    return np.random.Generator(np.random.Philox(key=[int(seed), int(trial)]))


def sample_episode(ds: Dataset, n: int, k: int, q: int, rng: np.random.Generator) -> Episode:
    """Draw an episode uniformly without replacement; deterministic given rng."""
    if n < 2:
        raise SamplingError(f"episodes need at least 2 ways, got n={n}")
    if k < 1 or q < 1:
        raise SamplingError(f"shot and query counts must be >= 1, got k={k}, q={q}")
    if ds.n_classes < n:
        raise SamplingError(f"dataset has {ds.n_classes} classes, episode needs {n}")
    class_ids = sorted(ds.classes)
    chosen = [class_ids[i] for i in rng.choice(len(class_ids), size=n, replace=False)]
    support = []
    queries: list[tuple[FeatureMap, int]] = []
    for local, cid in enumerate(chosen):
        items = ds.classes[cid]
        if len(items) < k + q:
            raise SamplingError(
                f"class {cid} has {len(items)} items, episode needs k+q={k + q}"
            )
        perm = rng.permutation(len(items))
        support.append(SupportPool.from_maps(local, [items[i] for i in perm[:k]]))
        queries.extend((items[i], local) for i in perm[k : k + q])
    return Episode(n=n, k=k, q=q, support=support, queries=queries,
                   source_classes=tuple(chosen))


@dataclass(frozen=True)
class EvalReport:
    """Accuracy summary over independent episode trials."""

    trials: int
    accuracy_mean: float
    ci95_halfwidth: float
    per_trial: np.ndarray
    rng_seed: int

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "accuracy_mean": self.accuracy_mean,
            "ci95_halfwidth": self.ci95_halfwidth,
            "rng_seed": self.rng_seed,
            "per_trial": [float(a) for a in self.per_trial],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_text(self) -> str:
        lines = [
            f"{'trials':<18}{self.trials}",
            f"{'accuracy_mean':<18}{self.accuracy_mean:.6f}",
            f"{'ci95_halfwidth':<18}{self.ci95_halfwidth:.6f}",
            f"{'rng_seed':<18}{self.rng_seed}",
        ]
        return "\n".join(lines)


def evaluate(
    ds: Dataset,
    head_fn: Callable[[Episode], np.ndarray],
    n: int,
    k: int,
    q: int,
    trials: int,
    seed: int,
) -> EvalReport:
    """Run ``trials`` independent episodes and summarize query accuracy.

    ``head_fn`` maps an episode to a (num_queries, n) array of logits
    (any monotone score works; only the argmax matters here).
    """
    if trials < 2:
        raise ValueError(f"need at least 2 trials for a confidence interval, got {trials}")
    accs = np.empty(trials, dtype=np.float64)
    for t in range(trials):
        try:
            episode = sample_episode(ds, n, k, q, trial_rng(seed, t))
            logits = np.asarray(head_fn(episode))
        except Exception as exc:
            raise EvaluationError(
                f"trial {t} failed after {t} complete trials: {exc}", completed_trials=t
            ) from exc
        labels = np.array([y for _, y in episode.queries])
        accs[t] = float(np.mean(np.argmax(logits, axis=1) == labels))
    mean = float(accs.mean())
    ci = float(1.96 * accs.std(ddof=1) / np.sqrt(trials))
    return EvalReport(
        trials=trials,
        accuracy_mean=mean,
        ci95_halfwidth=ci,
        per_trial=accs,
        rng_seed=int(seed),
    )


def make_head_fn(
    kind: str,
    params: HeadParams | None = None,
    *,
    formulation: str = "auto",
    proj_cfg=None,
    ctx_params=None,
    transform: Callable[[np.ndarray], np.ndarray] | None = None,
    normalize_by_dim: bool = True,
) -> Callable[[Episode], np.ndarray]:
    """Build an episode-to-logits function for one of the head kinds.

    ``transform`` is applied to every feature-map array (support and
    query) before scoring; pass an embedding or a feature rescale here.
    """
    params = params or HeadParams()

    def prepared(episode: Episode):
        if transform is None:
            return episode.support, [qm for qm, _ in episode.queries]
        pools = [
            SupportPool(class_id=p.class_id, k=p.k, values=transform(p.values))
            for p in episode.support
        ]
        queries = [FeatureMap(values=transform(qm.values)) for qm, _ in episode.queries]
        return pools, queries

    if kind == "frn":

        def head_fn(episode: Episode) -> np.ndarray:
            pools, queries = prepared(episode)
            return episode_logits(queries, pools, params, formulation)

    elif kind == "proto":

        def head_fn(episode: Episode) -> np.ndarray:
            pools, queries = prepared(episode)
            return np.vstack(
                [
                    baselines.proto_scores(qm, pools, params.gamma, normalize_by_dim).logits
                    for qm in queries
                ]
            )

    elif kind == "dsn":
        cfg = proj_cfg or baselines.ProjectionConfig()

        def head_fn(episode: Episode) -> np.ndarray:
            pools, queries = prepared(episode)
            return np.vstack(
                [
                    baselines.dsn_scores(qm, pools, cfg, params.gamma, normalize_by_dim).logits
                    for qm in queries
                ]
            )

    elif kind == "ctx":
        cparams = ctx_params or baselines.CtxParams.identity()

        def head_fn(episode: Episode) -> np.ndarray:
            pools, queries = prepared(episode)
            return np.vstack(
                [
                    baselines.ctx_scores(qm, pools, cparams, params.gamma, normalize_by_dim).logits
                    for qm in queries
                ]
            )

    else:
        raise ValueError(f"unknown head kind {kind!r}; expected frn, proto, dsn or ctx")

    return head_fn
