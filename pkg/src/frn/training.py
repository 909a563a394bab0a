"""Gradient-based optimization of head parameters and a linear embedding.

The embedding stands in for a feature extractor: a per-location affine map
from raw (r, d_in) inputs to (r, d) feature maps. Training differentiates
the full episode loss (cross-entropy plus optional orthogonality term)
through the closed-form reconstruction using the reverse-mode engine in
``autodiff``; no iterative inner solver is involved.

Two regimes are provided:

* ``meta_train``: episodic training on sampled n-way k-shot tasks with
  periodic validation; returns the best-validation parameters.
* ``pretrain``: non-episodic minibatch classification over all base
  classes, where each class is represented by a learnable dummy feature
  map that acts as its support pool. Alpha and beta stay fixed at zero;
  gamma remains learnable. The dummy maps are discarded afterwards.

Optimization is SGD with Nesterov momentum; weight decay applies to the
embedding weight matrix only, never to the reparameterized head scalars.
"""

from __future__ import annotations

import binascii
import json
import math
import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .baselines import CtxParams, ProjectionConfig
from .episodes import Dataset, Episode, evaluate, make_head_fn, sample_episode, trial_rng
from .head import HeadParams
from .linalg import NumericalError

GAMMA_FLOOR = 1e-6


class GradientError(ArithmeticError):
    """A loss or gradient came out non-finite; ``parameter`` names the culprit."""

    def __init__(self, message: str, parameter: str = "loss"):
        super().__init__(message)
        self.parameter = parameter


def grad(loss_fn: Callable[[dict], ad.Var], params: dict[str, np.ndarray]):
    """Evaluate ``loss_fn`` on Var-wrapped parameters and return its gradients.

    Returns ``(loss_value, grads)`` where grads maps each parameter name to
    an array of the parameter's shape (zeros if the loss does not depend on
    it). Raises GradientError on a non-finite loss or gradient.
    """
    for name, value in params.items():
        if not np.all(np.isfinite(value)):
            raise GradientError(f"parameter {name!r} is non-finite", parameter=name)
    variables = {name: ad.Var(np.asarray(value, dtype=np.float64)) for name, value in params.items()}
    loss = loss_fn(variables)
    value = float(ad.value_of(loss))
    if not math.isfinite(value):
        raise GradientError(f"loss is non-finite ({value!r})", parameter="loss")
    ad.backward(loss)
    grads = {}
    for name, var in variables.items():
        g = var.grad if var.grad is not None else np.zeros_like(var.value)
        if not np.all(np.isfinite(g)):
            raise GradientError(f"gradient of {name!r} is non-finite", parameter=name)
        grads[name] = g
    return value, grads


# ---------------------------------------------------------------------------
# embedding


@dataclass
class EmbeddingModel:
    """Per-location affine map from raw inputs to feature maps."""

    weight: np.ndarray  # (d_in, d)
    bias: np.ndarray  # (d,)

    @classmethod
    def identity(cls, d: int) -> "EmbeddingModel":
        return cls(weight=np.eye(d), bias=np.zeros(d))

    @classmethod
    def random(cls, d_in: int, d: int, rng) -> "EmbeddingModel":
        return cls(
            weight=rng.standard_normal((d_in, d)) / math.sqrt(d_in),
            bias=np.zeros(d),
        )

    @property
    def d(self) -> int:
        return self.weight.shape[1]

    def apply(self, values: np.ndarray) -> np.ndarray:
        return values @ self.weight + self.bias


DOWNSCALE_DIM_THRESHOLD = 256


def resolve_downscale(flag: bool | None, d: int) -> bool:
    """Feature downscaling policy: explicit flag wins, else on iff d >= 256."""
    return (d >= DOWNSCALE_DIM_THRESHOLD) if flag is None else bool(flag)


def feature_transform(embedding: EmbeddingModel, downscale: bool) -> Callable[[np.ndarray], np.ndarray]:
    """Embedding application, optionally rescaled by 1/sqrt(d)."""
    scale = 1.0 / math.sqrt(embedding.d) if downscale else 1.0

    def transform(values: np.ndarray) -> np.ndarray:
        out = embedding.apply(values)
        return out * scale if scale != 1.0 else out

    return transform


# ---------------------------------------------------------------------------
# episode loss graphs


@dataclass
class TrainConfig:
    head: str = "frn"
    way: int = 5
    shot: int = 1
    query: int = 15
    episodes: int = 200
    lr: float = 0.05
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    lr_decay_at: tuple[float, ...] = (0.5, 0.75)
    val_every: int = 50
    val_trials: int = 100
    val_query: int = 16
    val_way: int | None = None  # defaults to the training way
    embed_dim: int | None = None
    # None = automatic: rescale features by 1/sqrt(d) only for wide
    # embeddings (d >= 256), where training is unstable without it
    downscale_features: bool | None = None
    learn_alpha: bool = True
    learn_beta: bool = True
    learn_gamma: bool = True
    formulation: str = "auto"
    use_aux: bool = True
    aux_scale: float = 0.03
    dsn_lambda: float = 0.01
    seed: int = 0


def _episode_arrays(episode: Episode):
    support = [pool.values for pool in episode.support]
    queries = np.vstack([qm.values for qm, _ in episode.queries])
    labels = np.array([y for _, y in episode.queries])
    r = episode.support[0].r
    k = episode.k
    return support, queries, labels, k, r


def _embed(x: np.ndarray, variables: dict, scale: float):
    w = variables.get("embed_weight")
    b = variables.get("embed_bias")
    if w is None:
        return ad.mul(ad.Var(x), scale) if scale != 1.0 else ad.Var(x)
    h = ad.add(ad.matmul(x, w), b if b is not None else 0.0)
    return ad.mul(h, scale) if scale != 1.0 else h


def _scalar(variables: dict, name: str, default: float):
    return variables.get(name, np.float64(default))


def _frn_class_error(q_emb, s_emb, lam, rho, r: int, d: int, kr: int, formulation: str):
    if formulation == "auto":
        formulation = "direct" if d > kr else "woodbury"
    if formulation == "woodbury":
        g = ad.matmul(ad.transpose(s_emb), s_emb)
        hat = ad.spd_solve(ad.add_scaled_identity(g, lam), g)
        q_bar = ad.mul(ad.matmul(q_emb, hat), rho)
    else:
        m = ad.matmul(s_emb, ad.transpose(s_emb))
        a = ad.add_scaled_identity(m, lam)
        t1 = ad.matmul(q_emb, ad.transpose(s_emb))
        t2 = ad.spd_solve(a, ad.transpose(t1))
        q_bar = ad.mul(ad.matmul(ad.transpose(t2), s_emb), rho)
    return ad.mul(ad.block_sqnorm(ad.sub(q_emb, q_bar), r), 1.0 / r)


def _aux_term(support_embs, scale: float):
    normalized = [ad.row_normalize(s) for s in support_embs]
    terms = None
    for i, si in enumerate(normalized):
        for j, sj in enumerate(normalized):
            if i == j:
                continue
            cross = ad.matmul(si, ad.transpose(sj))
            t = ad.vsum(ad.mul(cross, cross))
            terms = t if terms is None else ad.add(terms, t)
    if terms is None:
        return ad.Var(np.float64(0.0))
    return ad.mul(terms, scale)


def episode_loss_graph(variables: dict, episode: Episode, cfg: TrainConfig, d: int):
    """Build the full loss graph for one episode; returns the loss Var.

    ``variables`` holds Vars for the learnable parameters and may omit
    fixed ones (omitted head scalars default to alpha=0, beta=0, gamma
    from the config-independent default 1).
    """
    support, queries, labels, k, r = _episode_arrays(episode)
    scale = 1.0 / math.sqrt(d) if resolve_downscale(cfg.downscale_features, d) else 1.0
    q_emb = _embed(queries, variables, scale)
    s_embs = [_embed(s, variables, scale) for s in support]
    gamma = _scalar(variables, "gamma", 1.0)

    if cfg.head == "frn":
        alpha = _scalar(variables, "alpha", 0.0)
        beta = _scalar(variables, "beta", 0.0)
        lam = ad.mul(ad.exp(alpha), k * r / d)
        rho = ad.exp(beta)
        errs = [
            _frn_class_error(q_emb, s_emb, lam, rho, r, d, k * r, cfg.formulation)
            for s_emb in s_embs
        ]
        logits = ad.mul(ad.mul(ad.column_stack(errs), gamma), -1.0)
    elif cfg.head == "proto":
        protos = [
            ad.block_mean_rows(ad.block_mean_rows(s_emb, r), k) for s_emb in s_embs
        ]
        qp = ad.block_mean_rows(q_emb, r)
        dists = ad.pairwise_sqdist(qp, ad.concat_rows(protos))
        logits = ad.mul(ad.mul(dists, gamma), -1.0 / d)
    elif cfg.head == "dsn":
        qp = ad.block_mean_rows(q_emb, r)
        residuals = []
        for s_emb in s_embs:
            pooled = ad.block_mean_rows(s_emb, r)
            m = ad.matmul(pooled, ad.transpose(pooled))
            a = ad.add_scaled_identity(m, cfg.dsn_lambda)
            t1 = ad.matmul(qp, ad.transpose(pooled))
            t2 = ad.spd_solve(a, ad.transpose(t1))
            proj = ad.matmul(ad.transpose(t2), pooled)
            residuals.append(ad.block_sqnorm(ad.sub(qp, proj), 1))
        logits = ad.mul(ad.mul(ad.column_stack(residuals), gamma), -1.0 / d)
    elif cfg.head == "ctx":
        wk = variables["ctx_key"]
        wv = variables["ctx_value"]
        d_k = ad.value_of(wk).shape[1]
        q1 = ad.matmul(q_emb, wk)
        q2 = ad.matmul(q_emb, wv)
        errs = []
        for s_emb in s_embs:
            s1 = ad.matmul(s_emb, wk)
            s2 = ad.matmul(s_emb, wv)
            attn = ad.row_softmax(ad.mul(ad.matmul(q1, ad.transpose(s1)), 1.0 / math.sqrt(d_k)))
            q2_bar = ad.matmul(attn, s2)
            errs.append(ad.mul(ad.block_sqnorm(ad.sub(q2, q2_bar), r), 1.0 / r))
        logits = ad.mul(ad.mul(ad.column_stack(errs), gamma), -1.0 / d)
    else:
        raise ValueError(f"unknown head kind {cfg.head!r}")

    loss = ad.cross_entropy_logits(logits, labels)
    if cfg.use_aux and len(s_embs) >= 2:
        loss = ad.add(loss, _aux_term(s_embs, cfg.aux_scale))
    return loss


# ---------------------------------------------------------------------------
# SGD


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.9,
    nesterov: bool = True,
    weight_decay: float = 0.0,
    decay_names: frozenset[str] = frozenset({"embed_weight"}),
):
    """One in-place SGD update. Weight decay touches ``decay_names`` only."""
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=True)
        if weight_decay and name in decay_names:
            g += weight_decay * p
        v = velocity.setdefault(name, np.zeros_like(p))
        v *= momentum
        v += g
        step = g + momentum * v if nesterov else v
        params[name] = p - lr * step


def _learnable_names(cfg: TrainConfig) -> list[str]:
    names = ["embed_weight", "embed_bias"]
    if cfg.head == "frn":
        if cfg.learn_alpha:
            names.append("alpha")
        if cfg.learn_beta:
            names.append("beta")
    if cfg.learn_gamma:
        names.append("gamma")
    if cfg.head == "ctx":
        names.extend(["ctx_key", "ctx_value"])
    return names


def init_params(cfg: TrainConfig, d_in: int, rng) -> dict[str, np.ndarray]:
    """Fresh parameter set: zero head scalars, gamma = 1/d, random embedding."""
    d = cfg.embed_dim or d_in
    emb = EmbeddingModel.random(d_in, d, rng)
    params = {
        "embed_weight": emb.weight,
        "embed_bias": emb.bias,
        "alpha": np.float64(0.0),
        "beta": np.float64(0.0),
        "gamma": np.float64(1.0 / d),
    }
    if cfg.head == "ctx":
        params["ctx_key"] = rng.standard_normal((d, d)) / math.sqrt(d)
        params["ctx_value"] = rng.standard_normal((d, d)) / math.sqrt(d)
    return params


def head_params_from(params: dict[str, np.ndarray], cfg: TrainConfig) -> HeadParams:
    return HeadParams(
        alpha=float(params.get("alpha", 0.0)),
        beta=float(params.get("beta", 0.0)),
        gamma=max(float(params.get("gamma", 1.0)), GAMMA_FLOOR),
        learn_alpha=cfg.learn_alpha,
        learn_beta=cfg.learn_beta,
        learn_gamma=cfg.learn_gamma,
    )


def make_eval_head_fn(params: dict[str, np.ndarray], cfg: TrainConfig):
    emb = EmbeddingModel(weight=params["embed_weight"], bias=params["embed_bias"])
    ctx = None
    if cfg.head == "ctx":
        ctx = CtxParams(key_proj=params["ctx_key"], value_proj=params["ctx_value"])
    return make_head_fn(
        cfg.head,
        head_params_from(params, cfg),
        formulation=cfg.formulation,
        proj_cfg=ProjectionConfig(lambda_fixed=cfg.dsn_lambda),
        ctx_params=ctx,
        transform=feature_transform(emb, resolve_downscale(cfg.downscale_features, emb.d)),
    )


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    best_params: dict[str, np.ndarray]
    best_val_accuracy: float
    history: list[dict]
    aborted: bool = False

    @property
    def embedding(self) -> EmbeddingModel:
        p = self.best_params
        return EmbeddingModel(weight=p["embed_weight"], bias=p["embed_bias"])


VAL_SEED_OFFSET = 1000003


def meta_train(
    ds_base: Dataset,
    ds_val: Dataset,
    cfg: TrainConfig,
    init: dict[str, np.ndarray] | None = None,
) -> TrainResult:
    """Episodic SGD on sampled tasks, tracking the best validation accuracy.

    On a non-finite loss or gradient the run aborts and returns the last
    finite parameters. Fixed head scalars (per the learn_* mask) are held
    as constants, so they keep their initial values exactly.
    """
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg, ds_base.d, rng)
    if init:
        for name, value in init.items():
            params[name] = np.array(value, dtype=np.float64)
    learnable = _learnable_names(cfg)
    constants = {n: v for n, v in params.items() if n not in learnable}
    state = {n: np.array(params[n], dtype=np.float64) for n in learnable}
    velocity: dict[str, np.ndarray] = {}
    d = state["embed_weight"].shape[1]

    decay_steps = {int(f * cfg.episodes) for f in cfg.lr_decay_at}
    lr = cfg.lr
    history: list[dict] = []
    best_val = -1.0
    best_params = {**constants, **{n: v.copy() for n, v in state.items()}}
    last_finite = {n: v.copy() for n, v in state.items()}
    aborted = False

    for step in range(cfg.episodes):
        if step in decay_steps and step > 0:
            lr /= 10.0
        episode = sample_episode(
            ds_base, cfg.way, cfg.shot, cfg.query, trial_rng(cfg.seed, step)
        )

        def loss_fn(variables):
            merged = dict(variables)
            for n, v in constants.items():
                merged.setdefault(n, v)
            return episode_loss_graph(merged, episode, cfg, d)

        try:
            with np.errstate(all="ignore"):
                loss_value, grads = grad(loss_fn, state)
        except (GradientError, NumericalError):
            aborted = True
            state = last_finite
            history.append({"step": step, "event": "aborted_non_finite", "lr": lr})
            break
        last_finite = {n: v.copy() for n, v in state.items()}
        sgd_step(
            state,
            grads,
            velocity,
            lr,
            momentum=cfg.momentum,
            nesterov=cfg.nesterov,
            weight_decay=cfg.weight_decay,
        )
        if "gamma" in state:
            state["gamma"] = np.maximum(state["gamma"], GAMMA_FLOOR)
        entry = {"step": step, "loss": loss_value, "lr": lr}

        if cfg.val_every and (step + 1) % cfg.val_every == 0:
            current = {**constants, **state}
            report = evaluate(
                ds_val,
                make_eval_head_fn(current, cfg),
                n=cfg.val_way or cfg.way,
                k=cfg.shot,
                q=cfg.val_query,
                trials=cfg.val_trials,
                seed=cfg.seed + VAL_SEED_OFFSET,
            )
            entry["val_accuracy"] = report.accuracy_mean
            if report.accuracy_mean > best_val:
                best_val = report.accuracy_mean
                best_params = {**constants, **{n: v.copy() for n, v in state.items()}}
        history.append(entry)

    final = {**constants, **state}
    if best_val < 0:
        best_params = final
        best_val = float("nan")
    return TrainResult(
        params=final,
        best_params=best_params,
        best_val_accuracy=best_val,
        history=history,
        aborted=aborted,
    )


# ---------------------------------------------------------------------------
# pre-training with dummy class maps


@dataclass
class PretrainConfig:
    steps: int = 300
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    lr_decay_at: tuple[float, ...] = (0.6, 0.85)
    embed_dim: int | None = None
    downscale_features: bool | None = None
    dummy_init_scale: float = 0.1
    seed: int = 0


@dataclass
class PretrainResult:
    embedding: EmbeddingModel
    gamma: float
    dummy_maps: np.ndarray  # (n_classes, r, d); discarded by downstream training
    class_ids: tuple[int, ...]
    history: list[dict]
    aborted: bool = False

    def as_init(self) -> dict[str, np.ndarray]:
        """Initial parameters for episodic fine-tuning (dummy maps dropped)."""
        return {
            "embed_weight": self.embedding.weight.copy(),
            "embed_bias": self.embedding.bias.copy(),
            "alpha": np.float64(0.0),
            "beta": np.float64(0.0),
            "gamma": np.float64(self.gamma),
        }


def _pretrain_logits_graph(variables: dict, batch: np.ndarray, r: int, d: int, n_classes: int, scale: float):
    q_emb = _embed(batch, variables, scale)
    gamma = variables["gamma"]
    lam = r / d  # one dummy map per class: the shot factor is 1
    errs = []
    for c in range(n_classes):
        mc = variables[f"dummy_{c}"]
        g = ad.matmul(ad.transpose(mc), mc)
        hat = ad.spd_solve(ad.add_scaled_identity(g, lam), g)
        q_bar = ad.matmul(q_emb, hat)
        errs.append(ad.mul(ad.block_sqnorm(ad.sub(q_emb, q_bar), r), 1.0 / r))
    return ad.mul(ad.mul(ad.column_stack(errs), gamma), -1.0)


def pretrain(ds_base: Dataset, cfg: PretrainConfig) -> PretrainResult:
    """Non-episodic classification against learnable dummy feature maps.

    Every base class gets a learnable (r, d) matrix acting as its support
    pool; logits are reconstruction errors against it. alpha and beta are
    fixed at zero (so rho = 1 and lam = r/d); gamma is learned.
    """
    rng = np.random.default_rng(cfg.seed)
    class_ids = tuple(sorted(ds_base.classes))
    items: list[tuple[np.ndarray, int]] = []
    for idx, cid in enumerate(class_ids):
        for m in ds_base.classes[cid]:
            items.append((m.values, idx))
    d_in = ds_base.d
    d = cfg.embed_dim or d_in
    r = ds_base.r
    scale = 1.0 / math.sqrt(d) if resolve_downscale(cfg.downscale_features, d) else 1.0

    emb = EmbeddingModel.random(d_in, d, rng)
    state: dict[str, np.ndarray] = {
        "embed_weight": emb.weight,
        "embed_bias": emb.bias,
        "gamma": np.float64(1.0 / d),
    }
    for c in range(len(class_ids)):
        state[f"dummy_{c}"] = cfg.dummy_init_scale * rng.standard_normal((r, d)) / math.sqrt(d)

    velocity: dict[str, np.ndarray] = {}
    decay_steps = {int(f * cfg.steps) for f in cfg.lr_decay_at}
    lr = cfg.lr
    history: list[dict] = []
    aborted = False
    last_finite = {n: v.copy() for n, v in state.items()}

    for step in range(cfg.steps):
        if step in decay_steps and step > 0:
            lr /= 10.0
        srng = trial_rng(cfg.seed, step)
        idx = srng.choice(len(items), size=min(cfg.batch_size, len(items)), replace=False)
        batch = np.vstack([items[i][0] for i in idx])
        labels = np.array([items[i][1] for i in idx])

        def loss_fn(variables):
            logits = _pretrain_logits_graph(variables, batch, r, d, len(class_ids), scale)
            return ad.cross_entropy_logits(logits, labels)

        try:
            with np.errstate(all="ignore"):
                loss_value, grads = grad(loss_fn, state)
        except (GradientError, NumericalError):
            aborted = True
            state = last_finite
            history.append({"step": step, "event": "aborted_non_finite", "lr": lr})
            break
        last_finite = {n: v.copy() for n, v in state.items()}
        # batch accuracy from the same forward values, for the history trace
        with_vars = {n: ad.Var(v) for n, v in state.items()}
        logits_now = ad.value_of(
            _pretrain_logits_graph(with_vars, batch, r, d, len(class_ids), scale)
        )
        acc = float(np.mean(np.argmax(logits_now, axis=1) == labels))
        sgd_step(
            state,
            grads,
            velocity,
            lr,
            momentum=cfg.momentum,
            nesterov=cfg.nesterov,
            weight_decay=cfg.weight_decay,
        )
        state["gamma"] = np.maximum(state["gamma"], GAMMA_FLOOR)
        history.append({"step": step, "loss": loss_value, "lr": lr, "batch_accuracy": acc})

    dummy = np.stack([state[f"dummy_{c}"] for c in range(len(class_ids))])
    return PretrainResult(
        embedding=EmbeddingModel(weight=state["embed_weight"], bias=state["embed_bias"]),
        gamma=float(state["gamma"]),
        dummy_maps=dummy,
        class_ids=class_ids,
        history=history,
        aborted=aborted,
    )


def pretrain_accuracy(result: PretrainResult, ds: Dataset, downscale: bool = False) -> float:
    """Top-1 accuracy of the dummy-map classifier over a dataset."""
    transform = feature_transform(result.embedding, downscale)
    idx_of = {cid: i for i, cid in enumerate(result.class_ids)}
    r = ds.r
    d = result.embedding.d
    lam = r / d
    hats = []
    for mc in result.dummy_maps:
        g = mc.T @ mc
        from .linalg import add_ridge, spd_solve

        hats.append(spd_solve(add_ridge((g + g.T) / 2, lam), g))
    correct = 0
    total = 0
    for cid, maps in ds.classes.items():
        for m in maps:
            q = transform(m.values)
            errs = [float(np.sum((q - q @ hat) ** 2) / r) for hat in hats]
            correct += int(np.argmin(errs) == idx_of[cid])
            total += 1
    return correct / total


# ---------------------------------------------------------------------------
# checkpoint container

CHECKPOINT_MAGIC = b"FRNCKPT1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or corrupt checkpoint file."""


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None):
    """Write a versioned binary container with tensors, rng state and config hash."""
    meta = dict(meta or {})
    tensors = []
    payloads = []
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64)
        tensors.append({"name": name, "dtype": "f64", "shape": list(arr.shape)})
        payloads.append(arr.tobytes())  # tobytes always emits C order
    header = {
        "precision": meta.pop("precision", "f64"),
        "config_hash": meta.pop("config_hash", ""),
        "rng_state": meta.pop("rng_state", None),
        "extra": meta,
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)) + header_bytes + b"".join(payloads)
    crc = binascii.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + body + struct.pack("<I", crc))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 12 or blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    body, crc_stored = blob[8:-4], struct.unpack("<I", blob[-4:])[0]
    if binascii.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path} failed its checksum")
    version, header_len = struct.unpack("<II", body[:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(body[8 : 8 + header_len].decode("utf-8"))
    offset = 8 + header_len
    params = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        arr = np.frombuffer(body[offset : offset + nbytes], dtype=np.float64).reshape(shape)
        params[spec["name"]] = arr.copy()
        offset += nbytes
    meta = {
        "precision": header.get("precision", "f64"),
        "config_hash": header.get("config_hash", ""),
        "rng_state": header.get("rng_state"),
        **header.get("extra", {}),
    }
    return params, meta
