"""Three-encoder weighted representation learner with Pareto-smoothed weights.

Encoders gamma, delta, upsilon map features to representations; the
propensity head sees (gamma, delta) and the outcome heads h0/h1 see
(delta, upsilon). Training alternates between the propensity
cross-entropy (propensity head only) and the weighted outcome objective
(everything else), with weights recomputed per minibatch under ``mode``.
"""

import enum
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigurationError, DegenerateFitError, NumericalAbort, ShapeError
from .nnet import autodiff as ad
from .nnet.adam import Adam
from .nnet.checkpoint import load_checkpoint, save_checkpoint
from .nnet.mlp import MLP, init_params, mlp_forward, weight_penalty, weight_penalty_np
from .nnet.mmd import median_bandwidth, mmd_rbf_t
from .smoothing import (
    crump_thresholds,
    ignore_mask,
    ipw_weights_t,
    marginal_ratio,
    pareto_smooth_diff_t,
    pareto_smooth_hard,
    self_normalize_t,
)

log = logging.getLogger(__name__)

PI_CLAMP = 1e-7
MIN_BATCH = 3


class Mode(str, enum.Enum):
    DPSW = "dpsw"
    DPSW_NORM = "dpsw_norm"
    DRCFR_RAW = "drcfr_raw"
    DRCFR_NORM = "drcfr_norm"
    DRCFR_TRUNC = "drcfr_trunc"
    DRCFR_IGNORE = "drcfr_ignore"
    PSW_SEPARATE = "psw_separate"
    SINGLE_ENCODER = "single_encoder"

    @property
    def smoothed(self):
        return self in (Mode.DPSW, Mode.DPSW_NORM)

    @property
    def three_encoder(self):
        return self not in (Mode.PSW_SEPARATE, Mode.SINGLE_ENCODER)


def parse_mode(mode):
    try:
        return Mode(mode)
    except ValueError:
        raise ConfigurationError(f"unknown mode {mode!r}; choose from {[m.value for m in Mode]}") from None


@dataclass
class Hyperparams:
    lambda_pi: float = 1e-4
    lambda_upsilon: float = 1.0
    lambda_minus_pi: float = 1e-4
    epsilon: float = 1e-3
    kappa: float = 1.0
    batch_size: int = 100
    lr: float = 1e-3
    lr_pi: float = 1e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs_pi: int = 1
    epochs_outcome: int = 1
    max_rounds: int = 100
    patience: int = 10
    rep_dim: int = 0  # 0 -> d // 3
    hidden: int = 0  # 0 -> max(32, rep_dim)
    seed: int = 0
    weights_differentiable: bool = None  # None -> True for dpsw modes only
    pwm_coefficient: str = "survival"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        for name in ("lambda_pi", "lambda_upsilon", "lambda_minus_pi"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        for name in ("epsilon", "kappa", "lr", "lr_pi"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("batch_size", "epochs_pi", "epochs_outcome", "max_rounds", "patience"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be at least 1")
        if self.batch_size < MIN_BATCH:
            raise ConfigurationError(f"batch_size must be at least {MIN_BATCH}")

    @classmethod
    def from_dict(cls, cfg):
        known = {f.name for f in fields(cls)}
        unknown = set(cfg) - known
        if unknown:
            raise ConfigurationError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**cfg)

    def to_dict(self):
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out

    def differentiable_for(self, mode):
        return mode.smoothed if self.weights_differentiable is None else bool(self.weights_differentiable)


@dataclass
class Batch:
    a: np.ndarray
    x: np.ndarray
    y: np.ndarray
    idx: np.ndarray = None

    @classmethod
    def of(cls, data, idx=None):
        if idx is None:
            return cls(data.a, data.x, data.y, np.arange(data.n))
        return cls(data.a[idx], data.x[idx], data.y[idx], idx)

    def __len__(self):
        return len(self.a)


@dataclass
class DPSWModel:
    mode: Mode
    hp: Hyperparams
    d: int
    nets: dict
    p_treated: float = 0.5
    bandwidth: float = None
    fixed_weights: np.ndarray = None  # psw_separate: smoothed weights per training row

    @classmethod
    def build(cls, d, mode, hp, p_treated=0.5):
        mode = parse_mode(mode)
        rep = hp.rep_dim or max(1, d // 3)
        hid = hp.hidden or max(32, rep)
        rng = np.random.default_rng(hp.seed)
        elu3 = ["elu", "elu", "elu"]
        nets = {}
        if mode is Mode.SINGLE_ENCODER:
            nets["phi"] = init_params([d, hid, hid, 2 * rep], rng, elu3, "phi")
        else:
            if mode.three_encoder:
                nets["gamma"] = init_params([d, hid, hid, rep], rng, elu3, "gamma")
            nets["delta"] = init_params([d, hid, hid, rep], rng, elu3, "delta")
            nets["upsilon"] = init_params([d, hid, hid, rep], rng, elu3, "upsilon")
            if mode.three_encoder:
                nets["pi"] = init_params([2 * rep, hid, hid, 1], rng, ["elu", "elu", "sigmoid"], "pi")
            else:
                nets["pi"] = init_params([d, hid, hid, 1], rng, ["elu", "elu", "sigmoid"], "pi")
        for head in ("h0", "h1"):
            nets[head] = init_params([2 * rep, hid, hid, 1], rng, ["elu", "elu", "identity"], head)
        return cls(mode, hp, d, nets, p_treated)

    # parameter groups ------------------------------------------------------
    def outcome_nets(self):
        if self.mode is Mode.SINGLE_ENCODER:
            names = ("phi", "h0", "h1")
        elif self.mode.three_encoder:
            names = ("gamma", "delta", "upsilon", "h0", "h1")
        else:
            names = ("delta", "upsilon", "h0", "h1")
        return [self.nets[k] for k in names]

    def params_of(self, nets):
        out = {}
        for m in nets:
            out.update(m.parameters())
        return out

    def outcome_params(self):
        return self.params_of(self.outcome_nets())

    def pi_params(self):
        return self.nets["pi"].parameters() if "pi" in self.nets else {}

    def state_dict(self):
        return {k: t.data.copy() for m in self.nets.values() for k, t in m.parameters().items()}

    def load_state_dict(self, state):
        for m in self.nets.values():
            for k, t in m.parameters().items():
                if k not in state:
                    raise ShapeError(f"missing parameter {k}")
                if state[k].shape != t.data.shape:
                    raise ShapeError(f"parameter {k}: shape {state[k].shape} != {t.data.shape}")
                t.data = np.array(state[k], dtype=np.float64)

    # numeric evaluation ----------------------------------------------------
    def _check_x(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.d:
            raise ShapeError(f"model expects {self.d} features, got {x.shape[1]}")
        return x

    def head_input(self, x):
        x = self._check_x(x)
        if self.mode is Mode.SINGLE_ENCODER:
            return mlp_forward(self.nets["phi"], x)
        return np.concatenate([mlp_forward(self.nets["delta"], x), mlp_forward(self.nets["upsilon"], x)], axis=1)

    def propensity(self, x):
        """Treated-propensity pi(x); None for the single-encoder mode."""
        x = self._check_x(x)
        if "pi" not in self.nets:
            return None
        if self.mode.three_encoder:
            z = np.concatenate([mlp_forward(self.nets["gamma"], x), mlp_forward(self.nets["delta"], x)], axis=1)
        else:
            z = x
        return mlp_forward(self.nets["pi"], z)[:, 0]

    def first_layer(self, name):
        return self.nets[name].first_layer

    # checkpoint I/O ---------------------------------------------------------
    def save(self, path, extra_meta=None):
        meta = {
            "mode": self.mode.value,
            "d": self.d,
            "hyperparams": self.hp.to_dict(),
            "p_treated": self.p_treated,
            "bandwidth": self.bandwidth,
        }
        meta.update(extra_meta or {})
        save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path):
        params, meta = load_checkpoint(path)
        try:
            hp = Hyperparams.from_dict(meta["hyperparams"])
            model = cls.build(int(meta["d"]), meta["mode"], hp, float(meta["p_treated"]))
        except KeyError as exc:
            raise ConfigurationError(f"checkpoint metadata lacks {exc}") from None
        model.bandwidth = meta.get("bandwidth")
        model.load_state_dict(params)
        return model, meta


def predict_cate(model, x):
    """h1 - h0 on the outcome-head input of each row."""
    z = model.head_input(x)
    return mlp_forward(model.nets["h1"], z)[:, 0] - mlp_forward(model.nets["h0"], z)[:, 0]


# objectives ----------------------------------------------------------------


def _clamped_pi(pi):
    clamped = int(np.sum((pi.data <= PI_CLAMP) | (pi.data >= 1 - PI_CLAMP)))
    return ad.clip(pi, PI_CLAMP, 1 - PI_CLAMP), clamped


def _pi_inputs(model, x):
    if model.mode.three_encoder:
        return np.concatenate([mlp_forward(model.nets["gamma"], x), mlp_forward(model.nets["delta"], x)], axis=1)
    return x


def propensity_loss(model, batch):
    """Cross-entropy of the propensity head plus lambda_pi * Omega(pi).

    Encoder outputs enter as constants, so only the head receives gradients.
    Returns ``(loss, n_clamped)``.
    """
    if "pi" not in model.nets:
        raise ConfigurationError(f"mode {model.mode.value} has no propensity model")
    pi = model.nets["pi"](ad.Tensor(_pi_inputs(model, batch.x)))
    pi, clamped = _clamped_pi(pi.reshape(-1))
    a = batch.a.astype(np.float64)
    ll = ad.log(pi) * a + ad.log(1.0 - pi) * (1.0 - a)
    loss = -ll.mean()
    if model.hp.lambda_pi:
        loss = loss + weight_penalty([model.nets["pi"]]) * model.hp.lambda_pi
    return loss, clamped


def _encode(model, x):
    """Graph forward through the encoders; returns dict of representation Tensors."""
    xt = ad.Tensor(x)
    if model.mode is Mode.SINGLE_ENCODER:
        phi = model.nets["phi"](xt)
        return {"head_in": phi, "upsilon": None}
    reps = {name: model.nets[name](xt) for name in ("gamma", "delta", "upsilon") if name in model.nets}
    reps["head_in"] = ad.concat([reps["delta"], reps["upsilon"]], axis=1)
    return reps


def _mode_weights(model, batch, reps, diag):
    """Per-instance weights for the outcome loss (Tensor, possibly constant)."""
    mode, hp = model.mode, model.hp
    n = len(batch)
    if mode is Mode.SINGLE_ENCODER:
        return ad.Tensor(np.ones(n))
    if mode is Mode.PSW_SEPARATE:
        if model.fixed_weights is None or batch.idx is None:
            # evaluation outside the training split: smooth on the fly
            pi = model.propensity(batch.x)
            pi_a = np.clip(np.where(batch.a == 1, pi, 1 - pi), PI_CLAMP, 1 - PI_CLAMP)
            raw = 1.0 + marginal_ratio(batch.a, model.p_treated) * (1.0 / pi_a - 1.0)
            return ad.Tensor(_hard_smooth(raw, diag, hp.pwm_coefficient))
        return ad.Tensor(model.fixed_weights[batch.idx])

    differentiable = hp.differentiable_for(mode)
    pi_net = model.nets["pi"]
    z = ad.concat([reps["gamma"], reps["delta"]], axis=1)
    if not differentiable:
        z = z.detach()
    pi, clamped = _clamped_pi(pi_net(z).reshape(-1))
    diag["clamped"] = diag.get("clamped", 0) + clamped
    a = batch.a
    pi_a = ad.where(a == 1, pi, 1.0 - pi)
    w = ipw_weights_t(pi_a, a, model.p_treated)

    if mode is Mode.DRCFR_NORM:
        w = self_normalize_t(w, a)
    elif mode is Mode.DRCFR_TRUNC:
        L, U = crump_thresholds(a, model.p_treated)
        w = ad.where(w.data < L, ad.Tensor(L), ad.where(w.data >= U, ad.Tensor(U), w))
    elif mode is Mode.DRCFR_IGNORE:
        w = w * ignore_mask(pi.data)
    elif mode.smoothed:
        w, info = pareto_smooth_diff_t(w, hp.epsilon, hp.kappa, hp.pwm_coefficient)
        _record_fit(diag, info)
        if mode is Mode.DPSW_NORM:
            w = self_normalize_t(w, a)
    return w if differentiable else w.detach()


def _record_fit(diag, info):
    diag["fits"] = diag.get("fits", 0) + 1
    if info["fallback"]:
        diag["fallbacks"] = diag.get("fallbacks", 0) + 1
    else:
        diag.setdefault("xi", []).append(info["gpd"].xi)
        if not info["gpd"].reliable:
            diag["unreliable"] = diag.get("unreliable", 0) + 1


def _hard_smooth(raw, diag, coefficient="survival"):
    if raw.size < MIN_BATCH:
        return raw
    out = pareto_smooth_hard(raw, coefficient)
    _record_fit(diag, out.diagnostics)
    return out.values


def _outcome_terms(model, batch, reps, w, diag):
    hp = model.hp
    z = reps["head_in"]
    p0 = model.nets["h0"](z).reshape(-1)
    p1 = model.nets["h1"](z).reshape(-1)
    pred = ad.where(batch.a == 1, p1, p0)
    resid = pred - batch.y
    loss = (ad.as_tensor(w) * ad.square(resid)).mean()
    if model.mode is not Mode.SINGLE_ENCODER and hp.lambda_upsilon:
        treated = batch.a == 1
        if treated.all() or not treated.any():
            diag["mmd_skipped"] = diag.get("mmd_skipped", 0) + 1
        else:
            u = reps["upsilon"]
            if model.bandwidth is None:
                model.bandwidth = median_bandwidth(u.data)
            mmd = mmd_rbf_t(u[np.flatnonzero(~treated)], u[np.flatnonzero(treated)], model.bandwidth)
            loss = loss + mmd * hp.lambda_upsilon
    if hp.lambda_minus_pi:
        loss = loss + weight_penalty(model.outcome_nets()) * hp.lambda_minus_pi
    return loss


def outcome_loss(model, batch, weights):
    """Weighted objective for externally supplied weights (array, WeightVector or Tensor)."""
    reps = _encode(model, batch.x)
    w = weights if isinstance(weights, ad.Tensor) else ad.Tensor(np.asarray(weights, dtype=np.float64))
    if w.shape != (len(batch),):
        raise ShapeError(f"expected {len(batch)} weights, got {w.shape}")
    return _outcome_terms(model, batch, reps, w, {})


def outcome_objective(model, batch, diag=None):
    """Weighted objective with weights computed under the model's mode."""
    diag = {} if diag is None else diag
    reps = _encode(model, batch.x)
    w = _mode_weights(model, batch, reps, diag)
    diag["last_weights"] = w.data
    return _outcome_terms(model, batch, reps, w, diag)


# training ------------------------------------------------------------------


@dataclass
class TrainLog:
    rounds: list = field(default_factory=list)
    best_round: int = -1
    best_val: float = math.inf
    fits: int = 0
    fallbacks: int = 0
    stopped_early: bool = False


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    if n <= batch_size:
        return [perm] if n >= MIN_BATCH else []
    out = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(out[-1]) < MIN_BATCH:
        out.pop()
    return out


def _eval_batches(n, batch_size):
    idx = np.arange(n)
    out = [idx[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < MIN_BATCH:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


def _check_finite(loss, batch, diag, phase):
    if not np.isfinite(loss.data):
        raise NumericalAbort(
            f"non-finite {phase} loss",
            dump={"batch_idx": None if batch.idx is None else batch.idx.tolist(),
                  "weights": None if diag.get("last_weights") is None else diag["last_weights"].tolist()},
        )


def _freeze(params, flag):
    for t in params.values():
        t.requires_grad = flag


def validation_objective(model, data, diag=None):
    """Mean outcome objective over fixed-order validation batches (no gradients)."""
    diag = {} if diag is None else diag
    total, count = 0.0, 0
    params = {**model.outcome_params(), **model.pi_params()}
    _freeze(params, False)
    try:
        for idx in _eval_batches(data.n, model.hp.batch_size):
            batch = Batch(data.a[idx], data.x[idx], data.y[idx], None)
            loss = outcome_objective(model, batch, diag)
            total += float(loss.data) * len(idx)
            count += len(idx)
    finally:
        _freeze(params, True)
    return total / max(count, 1)


def _propensity_epoch(model, data, opt, rng, diag):
    pi_params = model.pi_params()
    out_params = model.outcome_params()
    _freeze(out_params, False)
    total = 0.0
    try:
        for idx in _batches(data.n, model.hp.batch_size, rng):
            batch = Batch.of(data, idx)
            loss, clamped = propensity_loss(model, batch)
            diag["clamped"] = diag.get("clamped", 0) + clamped
            _check_finite(loss, batch, diag, "propensity")
            tape = ad.backward(loss, pi_params)
            opt.step(tape.grads)
            total += tape.loss
    finally:
        _freeze(out_params, True)
    return total


def _outcome_epoch(model, data, opt, rng, diag):
    params = model.outcome_params()
    pi_params = model.pi_params()
    _freeze(pi_params, False)
    total = 0.0
    try:
        for idx in _batches(data.n, model.hp.batch_size, rng):
            batch = Batch.of(data, idx)
            loss = outcome_objective(model, batch, diag)
            _check_finite(loss, batch, diag, "outcome")
            tape = ad.backward(loss, params)
            opt.step(tape.grads)
            total += tape.loss
    finally:
        _freeze(pi_params, True)
    return total


def _fit_separate_propensity(model, train, val, rng):
    """psw_separate: fit pi on raw features with early stopping on validation CE."""
    hp = model.hp
    opt = Adam(model.pi_params(), hp.lr_pi, hp.betas, hp.adam_eps)
    best, best_state, stale = math.inf, None, 0
    for _ in range(hp.max_rounds):
        for _ in range(hp.epochs_pi):
            _propensity_epoch(model, train, opt, rng, {})
        with_grad = model.pi_params()
        _freeze(with_grad, False)
        loss, _ = propensity_loss(model, Batch.of(val))
        _freeze(with_grad, True)
        if float(loss.data) < best - 1e-12:
            best, best_state, stale = float(loss.data), {k: t.data.copy() for k, t in with_grad.items()}, 0
        else:
            stale += 1
            if stale >= hp.patience:
                break
    for k, t in model.pi_params().items():
        t.data = best_state[k]
    pi = model.propensity(train.x)
    pi_a = np.clip(np.where(train.a == 1, pi, 1 - pi), PI_CLAMP, 1 - PI_CLAMP)
    raw = 1.0 + marginal_ratio(train.a, model.p_treated) * (1.0 / pi_a - 1.0)
    diag = {}
    model.fixed_weights = _hard_smooth(raw, diag, hp.pwm_coefficient)
    return diag


def train(train_data, val_data, hp=None, mode="dpsw", on_round=None):
    """Alternating optimization; returns ``(model, TrainLog)``.

    Each outer round runs ``epochs_pi`` epochs on the propensity loss and
    ``epochs_outcome`` epochs on the weighted outcome objective. Training
    stops after ``patience`` rounds without validation improvement (or
    ``max_rounds``) and restores the best snapshot.
    """
    hp = hp or Hyperparams()
    mode = parse_mode(mode)
    if train_data.n < MIN_BATCH or val_data.n < 1:
        raise ConfigurationError("training split needs at least 3 rows and validation at least 1")
    if train_data.d != val_data.d:
        raise ShapeError("train and validation feature dimensions differ")
    p_treated = float(train_data.a.mean())
    if not 0 < p_treated < 1 and mode is not Mode.SINGLE_ENCODER:
        raise ConfigurationError("training split contains a single treatment group")
    model = DPSWModel.build(train_data.d, mode, hp, p_treated if 0 < p_treated < 1 else 0.5)
    rng = np.random.default_rng([hp.seed, 1])
    tlog = TrainLog()

    if mode is Mode.PSW_SEPARATE:
        diag = _fit_separate_propensity(model, train_data, val_data, rng)
        tlog.fits += diag.get("fits", 0)
        tlog.fallbacks += diag.get("fallbacks", 0)
        _freeze(model.pi_params(), False)

    out_opt = Adam(model.outcome_params(), hp.lr, hp.betas, hp.adam_eps)
    pi_opt = Adam(model.pi_params(), hp.lr_pi, hp.betas, hp.adam_eps) if mode.three_encoder else None
    best_state, stale = None, 0
    for rnd in range(hp.max_rounds):
        diag = {}
        pi_loss = 0.0
        if pi_opt is not None:
            for _ in range(hp.epochs_pi):
                pi_loss += _propensity_epoch(model, train_data, pi_opt, rng, diag)
        train_obj = 0.0
        for _ in range(hp.epochs_outcome):
            train_obj += _outcome_epoch(model, train_data, out_opt, rng, diag)
        vdiag = {}
        val = validation_objective(model, val_data, vdiag)
        if not np.isfinite(val):
            raise NumericalAbort("non-finite validation objective", dump={"round": rnd})
        xi = diag.get("xi", [])
        record = {
            "round": rnd,
            "pi_loss": pi_loss,
            "train_objective": train_obj,
            "val_objective": val,
            "fits": diag.get("fits", 0),
            "fallbacks": diag.get("fallbacks", 0),
            "unreliable_fits": diag.get("unreliable", 0),
            "xi_mean": float(np.mean(xi)) if xi else None,
            "clamped": diag.get("clamped", 0),
            "mmd_skipped": diag.get("mmd_skipped", 0),
        }
        tlog.rounds.append(record)
        tlog.fits += record["fits"]
        tlog.fallbacks += record["fallbacks"]
        if on_round is not None:
            on_round(record)
        log.debug("round %d val=%.6f fallbacks=%d", rnd, val, record["fallbacks"])
        if val < tlog.best_val - 1e-12:
            tlog.best_val, tlog.best_round, stale = val, rnd, 0
            best_state = (model.state_dict(), model.bandwidth)
        else:
            stale += 1
            if stale >= hp.patience:
                tlog.stopped_early = True
                break
    if best_state is not None:
        model.load_state_dict(best_state[0])
        model.bandwidth = best_state[1]
    _freeze(model.pi_params(), True)
    return model, tlog


__all__ = [
    "Batch",
    "DPSWModel",
    "Hyperparams",
    "Mode",
    "TrainLog",
    "outcome_loss",
    "outcome_objective",
    "predict_cate",
    "propensity_loss",
    "train",
    "validation_objective",
]
