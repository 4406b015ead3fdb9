"""Encoder-free MIL classifiers and their SGD training loop."""
from __future__ import annotations

import csv
import logging
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from . import pooling
from .errors import ConfigError, ParameterError, UndefinedMetricError
from .metrics import auroc
from .numerics import SeededRng
from .pooling import AbmilParams, SmapConfig, TransmilParams

log = logging.getLogger(__name__)

ORDERINGS = ("embedding", "prediction")
PROB_CLAMP = 1e-12
# parameters excluded from the L1/L2 penalty
BIAS_NAMES = frozenset({"clf.b", "tm.pos_bias"})
EVAL_BATCH = 256


@dataclass(frozen=True)
class ModelConfig:
    ordering: str = "embedding"
    pooling: str = "mean"
    reg_kind: str = "l2"
    reg_strength: float = 0.0
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 100
    init_seed: int = 0
    attn_hidden: int = 32
    smap_alpha: float = 0.5
    smap_neighbors: int = 1
    tm_width: Optional[int] = None
    tm_layers: int = 1
    tm_heads: int = 2
    tm_max_offset: int = 8
    eval_every: Optional[int] = None  # None: every epoch up to 1,000 train bags, else every 5

    def __post_init__(self):
        if self.ordering not in ORDERINGS:
            raise ConfigError(f"ordering must be one of {ORDERINGS}")
        if self.pooling not in pooling.KINDS:
            raise ConfigError(f"pooling must be one of {pooling.KINDS}")
        if self.pooling == "transmil" and self.ordering == "prediction":
            raise ConfigError("transmil has no prediction-aggregation variant")
        if self.reg_kind not in ("l1", "l2"):
            raise ConfigError("reg_kind must be 'l1' or 'l2'")
        if self.reg_strength < 0 or not self.lr > 0:
            raise ConfigError("need reg_strength >= 0 and lr > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("need batch_size >= 1 and epochs >= 0")

    @property
    def name(self) -> str:
        return f"{self.pooling}-{self.ordering[:3]}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


VALID_METHODS = tuple((o, p) for o in ORDERINGS for p in pooling.KINDS
                      if not (o == "prediction" and p == "transmil"))


@dataclass
class TrainState:
    params: dict
    velocity: dict
    epoch: int = 0

    @classmethod
    def fresh(cls, params: dict) -> TrainState:
        return cls(params, {k: np.zeros_like(v) for k, v in params.items()})


@dataclass
class Checkpoint:
    params: dict
    epoch: int
    train_auroc: float
    val_auroc: float
    constrained: bool = True  # False when no epoch met val < train
    history: list = field(default_factory=list)


def init_params(config: ModelConfig, m: int) -> dict:
    """Weights ~ N(0, 1/fan_in), biases zero."""
    rng = SeededRng(config.init_seed, stream=11)
    params = {}
    width = m
    if config.pooling in ("abmil", "smap"):
        params.update(AbmilParams.init(m, config.attn_hidden, rng).named())
    elif config.pooling == "transmil":
        tm = TransmilParams.init(m, rng, width=config.tm_width, n_layers=config.tm_layers,
                                 n_heads=config.tm_heads, max_offset=config.tm_max_offset)
        params.update(tm.named())
        width = tm.width
    params["clf.w"] = rng.normal(width) / math.sqrt(width)
    params["clf.b"] = np.zeros(1)
    return params


def _pool_params(config: ModelConfig, params: dict):
    if config.pooling == "abmil":
        return AbmilParams.from_named(params)
    if config.pooling == "smap":
        return SmapConfig(config.smap_alpha, config.smap_neighbors, AbmilParams.from_named(params))
    if config.pooling == "transmil":
        return TransmilParams.from_named(params)
    return None


# --- forward / backward on padded batches ----------------------------------

def _forward(config: ModelConfig, params: dict, H, mask):
    """Returns (prob, logit or None, attention or None, cache)."""
    w, b = params["clf.w"], params["clf.b"][0]
    kind = config.pooling
    pp = _pool_params(config, params)
    if config.ordering == "embedding":
        res, pc = pooling.pool_forward_batch(kind, H, mask, pp)
        logit = res.z @ w + b
        return expit(logit), logit, res.attention, (res.z, pc)
    if kind in ("mean", "max"):
        inst = np.where(mask, H @ w + b, 0.0)
        if kind == "mean":
            logit = inst.sum(axis=1) / mask.sum(axis=1)
            idx = None
        else:
            idx = np.argmax(np.where(mask, inst, -np.inf), axis=1)
            logit = inst[np.arange(len(idx)), idx]
        return expit(logit), logit, None, idx
    # attention-weighted average of per-instance probabilities
    inst = H @ w
    if kind == "abmil":
        a, T = pooling._abmil_attn_fwd(H, mask, pp)
    else:
        a, T = pooling._smap_attn_fwd(H, mask, pp)
        inst = pooling._smap_smooth(inst[..., None], mask, pp.alpha, pp.n_neighbors)[..., 0]
    p_inst = expit(inst + b) * mask
    return np.sum(a * p_inst, axis=1), None, a, (T, a, p_inst)


def _backward(config: ModelConfig, params: dict, H, mask, fwd, dlogit, dprob):
    """Parameter gradients given dL/dlogit (logit paths) or dL/dprob."""
    kind = config.pooling
    pp = _pool_params(config, params)
    w = params["clf.w"]
    if config.ordering == "embedding":
        z, pc = fwd
        grads = {"clf.w": z.T @ dlogit, "clf.b": np.array([dlogit.sum()])}
        if kind not in ("mean", "max"):
            _, g = pooling.pool_backward_batch(kind, H, mask, pp, pc, dlogit[:, None] * w, need_dH=False)
            grads.update(g)
        return grads
    if kind in ("mean", "max"):
        if kind == "mean":
            dinst = mask * (dlogit / mask.sum(axis=1))[:, None]
        else:
            dinst = np.zeros(mask.shape)
            dinst[np.arange(len(fwd)), fwd] = dlogit
        return {"clf.w": np.einsum("bs,bsm->m", dinst, H), "clf.b": np.array([dinst.sum()])}
    T, a, p_inst = fwd
    dinst = dprob[:, None] * a * p_inst * (1.0 - p_inst)
    da = dprob[:, None] * p_inst
    if kind == "abmil":
        _, grads = pooling._abmil_attn_bwd(H, T, a, pp, da, need_dX=False)
        dproj = dinst
    else:
        _, grads = pooling._smap_attn_bwd(H, mask, pp, T, a, da, need_dH=False)
        dproj = pooling._smap_smooth(dinst[..., None], mask, pp.alpha, pp.n_neighbors)[..., 0]
    grads["clf.w"] = np.einsum("bs,bsm->m", dproj, H)
    grads["clf.b"] = np.array([dinst.sum()])
    return grads


def regularization(params: dict, reg_kind: str, reg_strength: float) -> float:
    if reg_strength == 0.0:
        return 0.0
    weights = [v for k, v in params.items() if k not in BIAS_NAMES]
    if reg_kind == "l1":
        return reg_strength * sum(float(np.abs(v).sum()) for v in weights)
    return reg_strength * sum(float((v * v).sum()) for v in weights)


def _reg_grad(params: dict, reg_kind: str, reg_strength: float) -> dict:
    out = {}
    for k, v in params.items():
        if k in BIAS_NAMES or reg_strength == 0.0:
            continue
        out[k] = reg_strength * (np.sign(v) if reg_kind == "l1" else 2.0 * v)
    return out


def bce_loss(prob, y, params: Optional[dict] = None, reg_kind: str = "l2", reg_strength: float = 0.0) -> float:
    """Binary cross entropy on a clamped probability plus the weight penalty."""
    p = min(max(float(prob), PROB_CLAMP), 1.0 - PROB_CLAMP)
    ce = -(y * math.log(p) + (1 - y) * math.log(1.0 - p))
    return ce + (regularization(params, reg_kind, reg_strength) if params else 0.0)


def _bce_terms(prob, y):
    pc = np.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ce = -(y * np.log(pc) + (1 - y) * np.log1p(-pc))
    inside = (prob > PROB_CLAMP) & (prob < 1.0 - PROB_CLAMP)
    return ce, pc, inside


def loss_and_grad(config: ModelConfig, params: dict, H, mask, y):
    """Mean BCE over the batch plus penalty, and its gradient."""
    y = np.asarray(y, dtype=float)
    n = len(y)
    prob, logit, _, fwd = _forward(config, params, H, mask)
    ce, pc, inside = _bce_terms(prob, y)
    if logit is not None:
        dlogit, dprob = np.where(inside, prob - y, 0.0) / n, None
    else:
        dlogit, dprob = None, np.where(inside, (pc - y) / (pc * (1.0 - pc)), 0.0) / n
    grads = _backward(config, params, H, mask, fwd, dlogit, dprob)
    for k, g in _reg_grad(params, config.reg_kind, config.reg_strength).items():
        grads[k] = grads[k] + g
    loss = float(ce.mean()) + regularization(params, config.reg_kind, config.reg_strength)
    return loss, grads


def forward(config: ModelConfig, params: dict, bag) -> tuple[float, Optional[np.ndarray]]:
    """Bag probability and per-instance attention (None where undefined)."""
    H = bag.embeddings if hasattr(bag, "embeddings") else np.asarray(bag, dtype=float)
    Hb, mask = pooling.pack([H])
    prob, _, attn, _ = _forward(config, params, Hb, mask)
    return float(prob[0]), (None if attn is None else attn[0])


def _embeddings(bags) -> list:
    return [b.embeddings if hasattr(b, "embeddings") else b for b in bags]


def predict(config: ModelConfig, params: dict, bags, with_attention: bool = False):
    mats = _embeddings(bags)
    probs, attns = [], []
    for i in range(0, len(mats), EVAL_BATCH):
        H, mask = pooling.pack(mats[i:i + EVAL_BATCH])
        prob, _, attn, _ = _forward(config, params, H, mask)
        probs.append(prob)
        if with_attention and attn is not None:
            attns.extend(attn[j, :mask[j].sum()] for j in range(len(prob)))
    probs = np.concatenate(probs)
    if with_attention:
        return probs, (attns if attns else None)
    return probs


def sgd_step(state: TrainState, grads: dict, lr: float, momentum: float = 0.9) -> TrainState:
    """Classic momentum: v <- momentum * v + g; theta <- theta - lr * v."""
    if set(grads) != set(state.params):
        raise RuntimeError(f"gradient keys {sorted(grads)} do not match parameters {sorted(state.params)}")
    params, velocity = {}, {}
    for k, theta in state.params.items():
        if grads[k].shape != theta.shape:
            raise RuntimeError(f"shape mismatch for {k}: {grads[k].shape} vs {theta.shape}")
        v = momentum * state.velocity[k] + grads[k]
        velocity[k] = v
        params[k] = theta - lr * v
    return TrainState(params, velocity, state.epoch)


# --- training --------------------------------------------------------------

def _prepooled(config: ModelConfig, bags):
    """Parameter-free embedding pooling is fixed, so compute it once; each bag
    becomes a single-instance bag whose mean is its pooled vector."""
    if config.ordering == "embedding" and config.pooling in ("mean", "max"):
        out = []
        for i in range(0, len(bags), EVAL_BATCH):
            H, mask = pooling.pack(_embeddings(bags[i:i + EVAL_BATCH]))
            z = pooling.pool_forward_batch(config.pooling, H, mask)[0].z
            out.extend(row[None, :] for row in z)
        return replace(config, pooling="mean"), out
    return config, _embeddings(bags)


def _safe_auroc(scores, labels) -> float:
    try:
        return auroc(scores, labels)
    except UndefinedMetricError:
        return math.nan


def select_checkpoint(history: Sequence[dict]) -> tuple[int, bool]:
    """Index of the entry maximizing val AUROC subject to val < train.

    Falls back to the unconstrained maximum (flag False) when no entry
    qualifies. Ties go to the earliest entry."""
    best, best_val = None, -math.inf
    for i, h in enumerate(history):
        if h["val_auroc"] < h["train_auroc"] and h["val_auroc"] > best_val:
            best, best_val = i, h["val_auroc"]
    if best is not None:
        return best, True
    vals = [h["val_auroc"] if not math.isnan(h["val_auroc"]) else -math.inf for h in history]
    return int(np.argmax(vals)), False


def train(train_set, val_set, config: ModelConfig, log_path=None) -> Checkpoint:
    if len(train_set) == 0 or len(val_set) == 0:
        raise ParameterError("train and validation splits must be non-empty")
    y_tr = np.array([b.label for b in train_set], dtype=float)
    y_va = np.array([b.label for b in val_set], dtype=float)
    m = train_set[0].embeddings.shape[1]
    state = TrainState.fresh(init_params(config, m))
    run_cfg, X_tr = _prepooled(config, train_set)
    _, X_va = _prepooled(config, val_set)
    every = config.eval_every or (1 if len(train_set) <= 1000 else 5)
    shuffler = SeededRng(config.init_seed, stream=12)

    history, snapshots = [], []

    def evaluate(epoch):
        p_tr = predict(run_cfg, state.params, X_tr)
        p_va = predict(run_cfg, state.params, X_va)
        ce, _, _ = _bce_terms(p_tr, y_tr)
        row = {"epoch": epoch,
               "train_loss": float(ce.mean()) + regularization(state.params, config.reg_kind, config.reg_strength),
               "train_auroc": _safe_auroc(p_tr, y_tr), "val_auroc": _safe_auroc(p_va, y_va)}
        history.append(row)
        snapshots.append({k: v.copy() for k, v in state.params.items()})

    evaluate(0)
    n = len(X_tr)
    for epoch in range(1, config.epochs + 1):
        order = shuffler.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            H, mask = pooling.pack([X_tr[i] for i in idx])
            _, grads = loss_and_grad(run_cfg, state.params, H, mask, y_tr[idx])
            state = sgd_step(state, grads, config.lr, config.momentum)
        state.epoch = epoch
        if epoch % every == 0 or epoch == config.epochs:
            evaluate(epoch)

    best, constrained = select_checkpoint(history)
    if not constrained:
        log.warning("no evaluated epoch had val AUROC < train AUROC; using unconstrained maximum")
    if log_path is not None:
        write_train_log(log_path, history)
    h = history[best]
    return Checkpoint(snapshots[best], h["epoch"], h["train_auroc"], h["val_auroc"], constrained, history)


def write_train_log(path, history: Sequence[dict]) -> None:
    cols = ("epoch", "train_loss", "train_auroc", "val_auroc")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for h in history:
            w.writerow([h["epoch"]] + [repr(float(h[c])) for c in cols[1:]])


# --- grid search -----------------------------------------------------------

_GRID_DATA: tuple = ()


def _grid_run(cfg: ModelConfig) -> Checkpoint:
    train_set, val_set = _GRID_DATA
    return train(train_set, val_set, cfg)


def grid_search(lrs: Sequence[float], regs: Sequence[float], train_set, val_set, config: ModelConfig,
                workers: int = 1) -> tuple[ModelConfig, Checkpoint]:
    """Train every (lr, reg) pair; keep the best validation AUROC.

    Ties prefer the smaller reg strength, then the smaller learning rate.
    """
    if not lrs or not regs:
        raise ParameterError("grids must be non-empty")
    configs = [replace(config, lr=lr, reg_strength=reg) for lr in lrs for reg in regs]
    global _GRID_DATA
    _GRID_DATA = (train_set, val_set)
    try:
        if workers > 1 and len(configs) > 1:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
                ckpts = list(ex.map(_grid_run, configs))
        else:
            ckpts = [_grid_run(c) for c in configs]
    finally:
        _GRID_DATA = ()

    def key(i):
        v = ckpts[i].val_auroc
        return (-(v if not math.isnan(v) else -math.inf), configs[i].reg_strength, configs[i].lr)

    best = min(range(len(configs)), key=key)
    return configs[best], ckpts[best]
