"""Outcome models: a joint covariate/treatment representation network with
per-treatment heads, and a treatment-blind baseline.

The "joint" variant encodes user covariates with one network and the
observed treatment's embedding with another, concatenates the two
representations, and routes the result through one scalar head per
treatment. Its loss is

    L = alpha * L1 + beta * L2,

where L1 is the factual mean squared error through the observed heads and
L2 is the mean squared MMD between the per-treatment groups of joint
representations (a distribution-balancing regularizer). L2 gradients flow
into the two representation networks only, never into the heads.

The "tarnet" variant drops the treatment network: heads consume the
covariate representation alone, and L2 is identically zero. It cannot use
treatment embeddings, so it serves as the no-treatment-information
baseline.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, TrainingDiverged
from .mmd import KernelSpec, treatment_regularization_loss
from .nn import (
    ACTIVATIONS,
    Gradients,
    MlpParams,
    OptimState,
    init_mlp,
    lr_at,
    mlp_backward,
    mlp_forward,
    params_from_dict,
    params_to_dict,
    sgd_step,
)
from .simulate import Dataset

CHECKPOINT_SCHEMA_VERSION = "1"
VARIANTS = ("joint", "tarnet")


@dataclass(frozen=True)
class ModelShape:
    """Layer counts and widths for the three sub-networks.

    *_layers counts weight matrices (so 1 means a single affine map);
    *_width is the hidden width; cov_out/treat_out are the representation
    dimensions fed to the heads.
    """

    cov_layers: int = 2
    cov_width: int = 48
    cov_out: int = 24
    treat_layers: int = 2
    treat_width: int = 32
    treat_out: int = 12
    head_layers: int = 2
    head_width: int = 32
    activation: str = "elu"
    dropout_rate: float = 0.1
    init: str = "glorot"  # "glorot" | "zeros"

    def validate(self) -> "ModelShape":
        for name in (
            "cov_layers",
            "cov_width",
            "cov_out",
            "treat_layers",
            "treat_width",
            "treat_out",
            "head_layers",
            "head_width",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.init not in ("glorot", "zeros"):
            raise ConfigError(f"init must be 'glorot' or 'zeros', got {self.init!r}")
        return self

    def _dims(self, n_layers: int, width: int, d_in: int, d_out: int) -> list[int]:
        return [d_in] + [width] * (n_layers - 1) + [d_out]

    def cov_dims(self, d: int) -> list[int]:
        return self._dims(self.cov_layers, self.cov_width, d, self.cov_out)

    def treat_dims(self, m: int) -> list[int]:
        return self._dims(self.treat_layers, self.treat_width, m, self.treat_out)

    def head_dims(self, head_input: int) -> list[int]:
        return self._dims(self.head_layers, self.head_width, head_input, 1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(doc: dict, path: str = "model") -> "ModelShape":
        known = {f.name for f in dataclasses.fields(ModelShape)}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"{path}: unknown fields {sorted(extra)}")
        try:
            shape = ModelShape(**doc)
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return shape.validate()


@dataclass(eq=False)
class OutcomeModel:
    cov_net: MlpParams
    treat_net: MlpParams | None
    heads: tuple[MlpParams, ...]
    variant: str = "joint"

    @property
    def k(self) -> int:
        return len(self.heads)

    @property
    def head_input_dim(self) -> int:
        return self.cov_net.output_dim + (
            self.treat_net.output_dim if self.treat_net is not None else 0
        )

    def validate(self) -> "OutcomeModel":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "joint" and self.treat_net is None:
            raise ConfigError("joint variant requires a treatment network")
        if self.variant == "tarnet" and self.treat_net is not None:
            raise ConfigError("tarnet variant must not carry a treatment network")
        if not self.heads:
            raise ConfigError("model needs at least one head")
        self.cov_net.validate()
        if self.treat_net is not None:
            self.treat_net.validate()
        expect = self.head_input_dim
        for t, head in enumerate(self.heads):
            head.validate()
            if head.input_dim != expect:
                raise ShapeError(
                    f"head {t} expects input {head.input_dim}, representations emit {expect}"
                )
            if head.output_dim != 1:
                raise ShapeError(f"head {t} must emit a scalar")
        return self


def build_model(
    input_dim: int,
    k: int,
    shape: ModelShape,
    variant: str = "joint",
    *,
    treat_input_dim: int | None = None,
    rng: np.random.Generator | int | None = None,
    scheme: str = "glorot",
) -> OutcomeModel:
    """Initialize all sub-networks. treat_input_dim defaults to input_dim
    because the simulator's treatment embeddings live in covariate space."""
    shape.validate()
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if k < 1:
        raise ConfigError("k must be >= 1")
    gen = np.random.default_rng(rng)
    cov_net = init_mlp(
        shape.cov_dims(input_dim), shape.activation, shape.dropout_rate,
        rng=gen, scheme=scheme,
    )
    treat_net = None
    if variant == "joint":
        treat_net = init_mlp(
            shape.treat_dims(treat_input_dim or input_dim),
            shape.activation, shape.dropout_rate, rng=gen, scheme=scheme,
        )
    head_input = shape.cov_out + (shape.treat_out if variant == "joint" else 0)
    heads = tuple(
        init_mlp(
            shape.head_dims(head_input), shape.activation, shape.dropout_rate,
            rng=gen, scheme=scheme,
        )
        for _ in range(k)
    )
    return OutcomeModel(cov_net, treat_net, heads, variant).validate()


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.5
    batch_size: int = 128
    epochs_max: int = 100
    patience: int = 10
    base_lr: float = 0.1
    lr_decay: float = 0.1
    scheduler_step: int = 10
    weight_decay: float = 1e-4
    bandwidth: float | None = None  # None -> per-batch median heuristic
    seed: int = 0

    @property
    def kernel(self) -> KernelSpec:
        return KernelSpec(self.bandwidth)

    def optim_state(self) -> OptimState:
        return OptimState(
            self.base_lr, self.lr_decay, self.scheduler_step, self.weight_decay
        )

    def validate(self) -> "TrainConfig":
        if self.alpha < 0.0 or self.beta < 0.0:
            raise ConfigError("alpha and beta must be >= 0")
        if self.alpha + self.beta <= 0.0:
            raise ConfigError("alpha + beta must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs_max < 0:
            raise ConfigError("epochs_max must be >= 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        self.optim_state().validate()
        self.kernel.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(doc: dict, path: str = "train") -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"{path}: unknown fields {sorted(extra)}")
        try:
            cfg = TrainConfig(**doc)
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cfg.validate()


class Batch(NamedTuple):
    x: np.ndarray  # (B, d)
    t: np.ndarray  # (B,) ints
    t_features: np.ndarray  # (B, m) feature vector of the observed treatment
    y: np.ndarray  # (B,)


@dataclass
class BatchLossResult:
    total: float
    mse: float
    balance: float
    cov_grads: Gradients
    treat_grads: Gradients | None
    head_grads: tuple[Gradients | None, ...]
    n_balance_groups: int
    predictions: np.ndarray


def _spawn_rngs(dropout_seed: int | None, count: int) -> list[np.random.Generator | None]:
    if dropout_seed is None:
        return [None] * count
    children = np.random.SeedSequence(dropout_seed).spawn(count)
    return [np.random.default_rng(c) for c in children]


def predict_outcome(
    model: OutcomeModel,
    x: np.ndarray,
    t_feature: np.ndarray,
    t: int,
    rng: np.random.Generator | None = None,
) -> float | np.ndarray:
    """Predicted outcome under treatment t for one user or a batch.

    The baseline variant ignores t_feature entirely. rng enables dropout
    (train-mode prediction); None is deterministic eval mode.
    """
    if not 0 <= t < model.k:
        raise ConfigError(f"treatment index {t} out of range 0..{model.k - 1}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    cov_out, _ = mlp_forward(model.cov_net, xb, rng)
    if model.variant == "joint":
        feat = np.asarray(t_feature, dtype=np.float64)
        if feat.ndim == 1:
            feat = np.broadcast_to(feat, (xb.shape[0], feat.shape[0]))
        treat_out, _ = mlp_forward(model.treat_net, feat, rng)
        head_in = np.concatenate([cov_out, treat_out], axis=1)
    else:
        head_in = cov_out
    out, _ = mlp_forward(model.heads[t], head_in, rng)
    return float(out[0, 0]) if single else out[:, 0]


def batch_loss(
    model: OutcomeModel,
    batch: Batch,
    cfg: TrainConfig,
    *,
    dropout_seed: int | None = None,
) -> BatchLossResult:
    """Loss and exact parameter gradients for one mini-batch.

    dropout_seed=None disables dropout; the same seed reproduces the same
    masks, which is what makes finite-difference checks of this function
    possible with dropout active.
    """
    xb = np.asarray(batch.x, dtype=np.float64)
    tb = np.asarray(batch.t)
    yb = np.asarray(batch.y, dtype=np.float64)
    n = xb.shape[0]
    if n == 0:
        raise ShapeError("empty batch")
    if tb.shape != (n,) or yb.shape != (n,):
        raise ShapeError("batch arrays disagree on length")
    if tb.min() < 0 or tb.max() >= model.k:
        raise ShapeError(f"batch treatments must lie in 0..{model.k - 1}")

    joint = model.variant == "joint"
    rngs = _spawn_rngs(dropout_seed, 2 + model.k)
    cov_out, cov_cache = mlp_forward(model.cov_net, xb, rngs[0])
    if joint:
        treat_out, treat_cache = mlp_forward(model.treat_net, batch.t_features, rngs[1])
        head_in = np.concatenate([cov_out, treat_out], axis=1)
    else:
        treat_out, treat_cache = None, None
        head_in = cov_out

    yhat = np.empty(n)
    rows_by_t = [np.flatnonzero(tb == t) for t in range(model.k)]
    head_caches: dict[int, object] = {}
    for t, rows in enumerate(rows_by_t):
        if rows.size == 0:
            continue
        out, cache = mlp_forward(model.heads[t], head_in[rows], rngs[2 + t])
        head_caches[t] = cache
        yhat[rows] = out[:, 0]

    resid = yhat - yb
    mse = float(np.mean(resid * resid))
    d_yhat = (2.0 / n) * resid

    # factual loss path: alpha * L1 through the observed heads only
    d_head_in = np.zeros_like(head_in)
    head_grads: list[Gradients | None] = [None] * model.k
    for t, rows in enumerate(rows_by_t):
        if rows.size == 0:
            continue
        upstream = (cfg.alpha * d_yhat[rows])[:, None]
        g = mlp_backward(model.heads[t], head_caches[t], upstream)
        head_grads[t] = g
        d_head_in[rows] += g.input_gradient

    # balancing path: beta * L2 into the representations, never the heads
    balance = 0.0
    n_groups = 0
    if joint:
        groups = {t: head_in[rows] for t, rows in enumerate(rows_by_t) if rows.size > 0}
        n_groups = len(groups)
        balance, bal_grads = treatment_regularization_loss(groups, cfg.kernel)
        for t, rows in enumerate(rows_by_t):
            if rows.size > 0:
                d_head_in[rows] += cfg.beta * bal_grads[t]

    d_cov = d_head_in[:, : cov_out.shape[1]]
    cov_grads = mlp_backward(model.cov_net, cov_cache, d_cov)
    treat_grads = None
    if joint:
        d_treat = d_head_in[:, cov_out.shape[1] :]
        treat_grads = mlp_backward(model.treat_net, treat_cache, d_treat)

    total = cfg.alpha * mse + cfg.beta * balance
    if not np.isfinite(total):
        raise NumericError("non-finite batch loss")
    return BatchLossResult(
        total=total,
        mse=mse,
        balance=balance,
        cov_grads=cov_grads,
        treat_grads=treat_grads,
        head_grads=tuple(head_grads),
        n_balance_groups=n_groups,
        predictions=yhat,
    )


@dataclass
class TrainHistory:
    """Per-epoch means over batches, plus validation error and diagnostics."""

    loss: list[float] = field(default_factory=list)
    mse: list[float] = field(default_factory=list)
    balance: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    head_grad_norms: list[list[float]] = field(default_factory=list)
    degenerate_batches: list[int] = field(default_factory=list)

    def n_epochs(self) -> int:
        return len(self.loss)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainedModel:
    model: OutcomeModel
    history: TrainHistory
    best_epoch: int | None
    best_val_mse: float | None
    config: TrainConfig
    shape: ModelShape
    variant: str


def _grad_norm(g: Gradients) -> float:
    return float(
        np.sqrt(sum(float((gw * gw).sum() + (gb * gb).sum()) for gw, gb in g.layers))
    )


def predict_all_outcomes(
    model: OutcomeModel, x: np.ndarray, t_emb: np.ndarray
) -> np.ndarray:
    """Eval-mode predictions for every user under every treatment, (n, k)."""
    x = np.asarray(x, dtype=np.float64)
    t_emb = np.asarray(t_emb, dtype=np.float64)
    if t_emb.shape[0] != model.k:
        raise ShapeError(
            f"t_emb provides {t_emb.shape[0]} treatments, model has {model.k} heads"
        )
    cov_out, _ = mlp_forward(model.cov_net, x)
    cols = []
    for t in range(model.k):
        if model.variant == "joint":
            treat_vec, _ = mlp_forward(model.treat_net, t_emb[t])
            head_in = np.concatenate(
                [cov_out, np.broadcast_to(treat_vec, (x.shape[0], treat_vec.shape[0]))],
                axis=1,
            )
        else:
            head_in = cov_out
        out, _ = mlp_forward(model.heads[t], head_in)
        cols.append(out[:, 0])
    return np.column_stack(cols)


def factual_predictions(
    model: OutcomeModel, x: np.ndarray, t_obs: np.ndarray, t_emb: np.ndarray
) -> np.ndarray:
    """Eval-mode prediction at each user's observed treatment.

    Gathered from predict_all_outcomes so the two are bit-identical.
    """
    yhat = predict_all_outcomes(model, x, t_emb)
    return yhat[np.arange(yhat.shape[0]), np.asarray(t_obs)]


def _apply_step(
    model: OutcomeModel, res: BatchLossResult, lr: float, weight_decay: float
) -> OutcomeModel:
    cov_net = sgd_step(model.cov_net, res.cov_grads, lr, weight_decay)
    treat_net = model.treat_net
    if res.treat_grads is not None:
        treat_net = sgd_step(model.treat_net, res.treat_grads, lr, weight_decay)
    heads = tuple(
        sgd_step(head, g, lr, weight_decay) if g is not None else head
        for head, g in zip(model.heads, res.head_grads)
    )
    return OutcomeModel(cov_net, treat_net, heads, model.variant)


def train(
    dataset: Dataset,
    shape: ModelShape,
    cfg: TrainConfig,
    variant: str = "joint",
) -> TrainedModel:
    """Mini-batch SGD with per-epoch validation and early stopping.

    Every epoch reshuffles the training split (the last short batch is
    kept), steps with the scheduled learning rate, then measures factual
    MSE on the validation split in eval mode. The returned model is the
    best-validation snapshot; ties keep the earliest epoch. Heads that
    receive no samples in a batch are left untouched by that step.
    """
    cfg.validate()
    shape.validate()
    x_tr, t_tr, y_tr = dataset.observed("train")
    x_val, t_val, y_val = dataset.observed("val")
    if x_tr.shape[0] == 0:
        raise ShapeError("training split is empty")
    t_emb = dataset.T_emb

    ss = np.random.SeedSequence(cfg.seed)
    s_init, s_order, s_drop = ss.spawn(3)
    model = build_model(
        dataset.d, dataset.k, shape, variant,
        treat_input_dim=t_emb.shape[1], rng=np.random.default_rng(s_init),
        scheme=shape.init,
    )
    order_rng = np.random.default_rng(s_order)
    drop_rng = np.random.default_rng(s_drop)
    optim = cfg.optim_state()

    history = TrainHistory()
    best_model = model
    best_epoch: int | None = None
    best_val = np.inf
    epochs_since_best = 0
    n_tr = x_tr.shape[0]

    for epoch in range(cfg.epochs_max):
        lr = lr_at(optim, epoch)
        order = order_rng.permutation(n_tr)
        sums = np.zeros(3)
        head_norms = np.zeros(dataset.k)
        degenerate = 0
        n_batches = 0
        for batch_index, start in enumerate(range(0, n_tr, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            batch = Batch(x_tr[idx], t_tr[idx], t_emb[t_tr[idx]], y_tr[idx])
            seed = int(drop_rng.integers(2**63))
            try:
                res = batch_loss(model, batch, cfg, dropout_seed=seed)
                model = _apply_step(model, res, lr, cfg.weight_decay)
            except TrainingDiverged:
                raise
            except NumericError as exc:
                raise TrainingDiverged(epoch, batch_index, history) from exc
            sums += (res.total, res.mse, res.balance)
            for t, g in enumerate(res.head_grads):
                if g is not None:
                    head_norms[t] += _grad_norm(g)
            if variant == "joint" and res.n_balance_groups < 2:
                degenerate += 1
            n_batches += 1

        val_hat = factual_predictions(model, x_val, t_val, t_emb)
        val_mse = float(np.mean((val_hat - y_val) ** 2)) if y_val.size else np.inf
        history.loss.append(float(sums[0] / n_batches))
        history.mse.append(float(sums[1] / n_batches))
        history.balance.append(float(sums[2] / n_batches))
        history.val_mse.append(val_mse)
        history.lr.append(lr)
        history.head_grad_norms.append([float(v) for v in head_norms])
        history.degenerate_batches.append(degenerate)

        if val_mse < best_val:
            best_val = val_mse
            best_model = model
            best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                break

    return TrainedModel(
        model=best_model,
        history=history,
        best_epoch=best_epoch,
        best_val_mse=None if best_epoch is None else float(best_val),
        config=cfg,
        shape=shape,
        variant=variant,
    )


def checkpoint_dict(trained: TrainedModel) -> dict:
    model = trained.model
    return {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "variant": model.variant,
        "k": model.k,
        "input_dim": model.cov_net.input_dim,
        "treat_input_dim": (
            model.treat_net.input_dim if model.treat_net is not None else None
        ),
        "cov_net": params_to_dict(model.cov_net),
        "treat_net": (
            params_to_dict(model.treat_net) if model.treat_net is not None else None
        ),
        "heads": [params_to_dict(h) for h in model.heads],
        "train_config": trained.config.to_dict(),
        "shape": trained.shape.to_dict(),
        "best_epoch": trained.best_epoch,
        "best_val_mse": trained.best_val_mse,
    }


def save_checkpoint(path, trained: TrainedModel) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(trained), fh, indent=2, sort_keys=True)


def load_checkpoint(path) -> TrainedModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported checkpoint schema_version {doc.get('schema_version')!r}"
        )
    try:
        model = OutcomeModel(
            cov_net=params_from_dict(doc["cov_net"]),
            treat_net=(
                params_from_dict(doc["treat_net"])
                if doc.get("treat_net") is not None
                else None
            ),
            heads=tuple(params_from_dict(h) for h in doc["heads"]),
            variant=doc["variant"],
        ).validate()
        cfg = TrainConfig.from_dict(doc["train_config"], path="checkpoint.train_config")
        shape = ModelShape.from_dict(doc["shape"], path="checkpoint.shape")
    except KeyError as exc:
        raise ConfigError(f"malformed checkpoint: missing {exc}") from exc
    return TrainedModel(
        model=model,
        history=TrainHistory(),
        best_epoch=doc.get("best_epoch"),
        best_val_mse=doc.get("best_val_mse"),
        config=cfg,
        shape=shape,
        variant=model.variant,
    )


def clone_model(model: OutcomeModel) -> OutcomeModel:
    return copy.deepcopy(model)
