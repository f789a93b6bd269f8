"""Training loops for the invariant models and their baselines.

Three loops share one skeleton: per optimization step, draw one minibatch per
seen environment, take the max (or pooled mean) of the per-environment task
losses, and add the scaled dependence penalty between prediction residuals
and (features, environment). Runs are single-threaded and fully determined
by the config seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import rng as rngmod
from .autodiff import Tensor, concat, stack_scalars, zero_grad
from .dataio import ClassBase, ColoredEnv, make_colored_env
from .flow import MtaFlowStack
from .losses import (
    KernelSpec,
    complexity_loss,
    cross_entropy,
    flow_nll,
    hsic,
    wasserstein1d,
)
from .models import GateVector, Mlp, classification_residual, gate_apply, onehot_labels
from .optim import AdamState, adam_step, lr_schedule
from .scm import SettingData

MODEL_KINDS = ("flow", "flowg", "anm", "anmg", "erm", "cerm", "classifier")
GATED_KINDS = ("flowg", "anmg")
POOLED_KINDS = ("erm", "cerm")  # plain risk minimization: no env max, no penalty


@dataclass
class TrainConfig:
    model: str = "anm"
    lambda_invariance: float = 1.0
    epochs: int = 1000
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-5
    lr_schedule: str = "synthetic"
    gate_warmup_epochs: int = 200
    gate_complexity_weight: float = 5.0
    hsic_sigma: float = 1.0
    wasserstein_weight: float = 10.0
    prediction_draws: int = 512
    hidden_width: int = 256
    flow_layers: int = 2
    flow_width: int = 32
    cond_width: int = 64
    feature_dim: int = 1
    class_feature_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model!r}")
        if self.lambda_invariance < 0:
            raise ValueError("lambda_invariance must be nonnegative")
        if self.model in POOLED_KINDS:
            self.lambda_invariance = 0.0


@dataclass
class RunReport:
    model: str
    seed: int
    setting_id: str = ""
    target: int | None = None  # 1-based variable number
    mechanism: str = ""
    truth: list[int] | None = None  # 1-based ground-truth parent set
    selected: list[int] | None = None  # gating / ICP selection, 1-based
    metrics: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: str | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "RunReport":
        return RunReport(**d)


# -- shared pieces ----------------------------------------------------------------


def _input_columns(data: SettingData, cfg: TrainConfig) -> tuple[int, ...]:
    target = data.setting.target
    if cfg.model == "cerm":
        return tuple(data.setting.parents)
    return tuple(i for i in range(data.train[0].x.shape[1]) if i != target)


def _env_onehot(n_per_env: int, n_envs: int) -> np.ndarray:
    out = np.zeros((n_per_env * n_envs, n_envs))
    for e in range(n_envs):
        out[e * n_per_env : (e + 1) * n_per_env, e] = 1.0
    return out


def _mse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((pred - target) ** 2))


@dataclass
class TrainedRegressor:
    """Direct regression head, optionally behind an evaluation-time gate mask."""

    mlp: Mlp
    gate: GateVector | None
    input_cols: tuple[int, ...]

    def predict(self, x: np.ndarray) -> np.ndarray:
        h = x[:, self.input_cols]
        if self.gate is not None:
            h = h * self.gate.eval_mask()
        return self.mlp(Tensor(h)).data[:, 0]

    def params(self) -> list[Tensor]:
        out = self.mlp.params()
        if self.gate is not None:
            out += self.gate.params()
        return out


@dataclass
class TrainedFlowRegressor:
    """Conditional flow predictor: the mean over inverse-flow draws."""

    stack: MtaFlowStack
    net: Mlp | None
    gate: GateVector | None
    input_cols: tuple[int, ...]
    draws: int
    seed: int

    def features(self, x: np.ndarray) -> np.ndarray:
        h = x[:, self.input_cols]
        if self.gate is not None:
            return h * self.gate.eval_mask()
        return self.net(Tensor(h)).data

    def predict(self, x: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        rng = rng or rngmod.stream(self.seed, "predict")
        return self.stack.predict_mean(self.features(x), self.draws, rng)

    def params(self) -> list[Tensor]:
        out = self.stack.params()
        if self.net is not None:
            out += self.net.params()
        if self.gate is not None:
            out += self.gate.params()
        return out


@dataclass
class TrainedClassifier:
    feature_net: Mlp
    head: Mlp

    def logits(self, x: np.ndarray) -> np.ndarray:
        feats = self.feature_net(Tensor(x))
        return self.head(feats.relu()).data

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def params(self) -> list[Tensor]:
        return self.feature_net.params() + self.head.params()


def predict(model, x: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Dispatch prediction for any trained model object."""
    if isinstance(model, TrainedFlowRegressor):
        return model.predict(x, rng)
    return model.predict(x)


def _selected_vars(gate: GateVector, input_cols: tuple[int, ...]) -> list[int]:
    return [input_cols[i] + 1 for i in gate.selected()]


def _regression_metrics(model, data: SettingData, cfg: TrainConfig) -> dict:
    target = data.setting.target
    preds = {}
    for split, envs in (("train", data.train), ("test", data.test), ("dg", [data.dg])):
        x = np.concatenate([ds.x for ds in envs], axis=0)
        y = x[:, target]
        rng = rngmod.stream(cfg.seed, "predict", split)
        preds[split] = _mse(predict(model, x, rng), y)
    return {
        "train_mse": preds["train"],
        "test_mse": preds["test"],
        "dg_mse": preds["dg"],
    }


def _finish_report(
    model, data: SettingData, cfg: TrainConfig, history: list, t0: float
) -> RunReport:
    gate = getattr(model, "gate", None)
    selected = _selected_vars(gate, model.input_cols) if gate is not None else None
    return RunReport(
        model=cfg.model,
        seed=cfg.seed,
        setting_id=data.setting.setting_id,
        target=data.setting.target + 1,
        mechanism=data.setting.mechanism,
        truth=[p + 1 for p in data.setting.parents],
        selected=selected,
        metrics=_regression_metrics(model, data, cfg),
        history=history,
        wall_clock=time.perf_counter() - t0,
        config=asdict(cfg),
    )


def _minibatch_plan(n: int, batch: int) -> tuple[int, int]:
    b = min(batch, n)
    return b, max(1, n // b)


# -- additive-noise / ERM / CERM loop ------------------------------------------------


def train_anm(data: SettingData, cfg: TrainConfig) -> tuple[RunReport, TrainedRegressor]:
    """L2 regression with the env max and the residual dependence penalty.

    `erm` and `cerm` run through the same loop with the penalty off and the
    per-environment losses pooled instead of maxed; `cerm` additionally
    restricts the inputs to the ground-truth parents.
    """
    if cfg.model not in ("anm", "anmg", "erm", "cerm"):
        raise ValueError(f"train_anm got model kind {cfg.model!r}")
    t0 = time.perf_counter()
    cols = _input_columns(data, cfg)
    target = data.setting.target
    init_rng = rngmod.stream(cfg.seed, "init")
    mlp = Mlp([len(cols), cfg.hidden_width, cfg.hidden_width, 1], init_rng)
    gate = GateVector(len(cols)) if cfg.model == "anmg" else None

    params = mlp.params() + (gate.params() if gate else [])
    state = AdamState(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    shuffle_rng = rngmod.stream(cfg.seed, "shuffle")
    gate_rng = rngmod.stream(cfg.seed, "gate")
    kernel = KernelSpec(sigma=cfg.hsic_sigma)
    pooled = cfg.model in POOLED_KINDS

    envs_x = [ds.x[:, cols] for ds in data.train]
    envs_y = [ds.x[:, target] for ds in data.train]
    n = min(x.shape[0] for x in envs_x)
    batch, steps = _minibatch_plan(n, cfg.batch_size)
    onehot = _env_onehot(batch, len(envs_x))

    history = []
    for epoch in range(cfg.epochs):
        state.lr = lr_schedule(epoch, cfg.lr, cfg.lr_schedule)
        perms = [shuffle_rng.permutation(x.shape[0]) for x in envs_x]
        epoch_losses = []
        for step in range(steps):
            sl = slice(step * batch, (step + 1) * batch)
            xb = np.concatenate([x[p[sl]] for x, p in zip(envs_x, perms)], axis=0)
            yb = np.concatenate([y[p[sl]] for y, p in zip(envs_y, perms)], axis=0)
            x_t = Tensor(xb)
            y_t = Tensor(yb[:, None])

            h = gate_apply(x_t, gate, "train", gate_rng) if gate else x_t
            pred = mlp(h)
            resid = y_t - pred
            rsq = resid * resid
            env_losses = [
                rsq[e * batch : (e + 1) * batch].mean() for e in range(len(envs_x))
            ]
            stacked = stack_scalars(env_losses)
            loss = stacked.mean() if pooled else stacked.max(axis=0)
            if cfg.lambda_invariance > 0.0:
                pair = h if cfg.model == "anmg" else pred
                joint = concat([pair, Tensor(onehot)], axis=1)
                loss = loss + cfg.lambda_invariance * hsic(resid, joint, kernel, kernel)
            if gate is not None and epoch >= cfg.gate_warmup_epochs:
                loss = loss + cfg.gate_complexity_weight * complexity_loss(gate.probs())

            zero_grad(params)
            loss.backward()
            adam_step(state)
            epoch_losses.append(loss.item())
        history.append(float(np.mean(epoch_losses)))

    model = TrainedRegressor(mlp=mlp, gate=gate, input_cols=cols)
    return _finish_report(model, data, cfg, history, t0), model


# -- normalizing-flow loop -------------------------------------------------------------


def train_flow(data: SettingData, cfg: TrainConfig) -> tuple[RunReport, TrainedFlowRegressor]:
    """Conditional-flow NLL with the env max and the dependence penalty."""
    if cfg.model not in ("flow", "flowg"):
        raise ValueError(f"train_flow got model kind {cfg.model!r}")
    t0 = time.perf_counter()
    cols = _input_columns(data, cfg)
    target = data.setting.target
    init_rng = rngmod.stream(cfg.seed, "init")
    if cfg.model == "flowg":
        net, gate = None, GateVector(len(cols))
        cond_dim = len(cols)
    else:
        net = Mlp([len(cols), cfg.hidden_width, cfg.hidden_width, cfg.feature_dim], init_rng)
        gate = None
        cond_dim = cfg.feature_dim
    stack = MtaFlowStack(
        cond_dim,
        n_layers=cfg.flow_layers,
        width=cfg.flow_width,
        cond_hidden=cfg.cond_width,
        rng=init_rng,
    )

    params = stack.params() + (net.params() if net else []) + (gate.params() if gate else [])
    state = AdamState(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    shuffle_rng = rngmod.stream(cfg.seed, "shuffle")
    gate_rng = rngmod.stream(cfg.seed, "gate")
    kernel = KernelSpec(sigma=cfg.hsic_sigma)

    envs_x = [ds.x[:, cols] for ds in data.train]
    envs_y = [ds.x[:, target] for ds in data.train]
    n = min(x.shape[0] for x in envs_x)
    batch, steps = _minibatch_plan(n, cfg.batch_size)
    onehot = _env_onehot(batch, len(envs_x))

    history = []
    for epoch in range(cfg.epochs):
        state.lr = lr_schedule(epoch, cfg.lr, cfg.lr_schedule)
        perms = [shuffle_rng.permutation(x.shape[0]) for x in envs_x]
        epoch_losses = []
        for step in range(steps):
            sl = slice(step * batch, (step + 1) * batch)
            xb = np.concatenate([x[p[sl]] for x, p in zip(envs_x, perms)], axis=0)
            yb = np.concatenate([y[p[sl]] for y, p in zip(envs_y, perms)], axis=0)
            x_t = Tensor(xb)
            y_t = Tensor(yb[:, None])

            h = gate_apply(x_t, gate, "train", gate_rng) if gate else net(x_t)
            z, logdet = stack.forward(y_t, h)
            env_losses = [
                flow_nll(z[e * batch : (e + 1) * batch], logdet[e * batch : (e + 1) * batch])
                for e in range(len(envs_x))
            ]
            loss = stack_scalars(env_losses).max(axis=0)
            if cfg.lambda_invariance > 0.0:
                joint = concat([h, Tensor(onehot)], axis=1)
                loss = loss + cfg.lambda_invariance * hsic(z, joint, kernel, kernel)
            if gate is not None and epoch >= cfg.gate_warmup_epochs:
                loss = loss + cfg.gate_complexity_weight * complexity_loss(gate.probs())

            zero_grad(params)
            loss.backward()
            adam_step(state)
            epoch_losses.append(loss.item())
        history.append(float(np.mean(epoch_losses)))

    model = TrainedFlowRegressor(
        stack=stack,
        net=net,
        gate=gate,
        input_cols=cols,
        draws=cfg.prediction_draws,
        seed=cfg.seed,
    )
    return _finish_report(model, data, cfg, history, t0), model


# -- classification loop -----------------------------------------------------------------


@dataclass
class ClassificationData:
    """Two seen training environments (re-colorable per epoch) plus fixed
    per-environment test sets; environment 3 is never trained on."""

    train_bases: dict[int, ClassBase]
    test_envs: dict[int, ColoredEnv]

    @property
    def feature_dim(self) -> int:
        env = next(iter(self.test_envs.values()))
        return env.x.shape[1]


def train_classifier(
    data: ClassificationData, cfg: TrainConfig
) -> tuple[RunReport, TrainedClassifier]:
    """Cross-entropy with env max plus HSIC and the scaled sorted-Wasserstein
    term between the two seen environments' residuals."""
    if cfg.model != "classifier":
        raise ValueError(f"train_classifier got model kind {cfg.model!r}")
    seen = sorted(data.train_bases)
    if len(seen) != 2:
        raise ValueError(f"classification needs exactly 2 seen environments, got {seen}")
    t0 = time.perf_counter()
    d = data.feature_dim
    init_rng = rngmod.stream(cfg.seed, "init")
    feature_net = Mlp([d, cfg.hidden_width, cfg.class_feature_dim], init_rng, name="feat")
    head = Mlp([cfg.class_feature_dim, 2], init_rng, name="head")
    params = feature_net.params() + head.params()
    state = AdamState(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    kernel = KernelSpec(sigma=cfg.hsic_sigma)

    history = []
    for epoch in range(cfg.epochs):
        state.lr = lr_schedule(epoch, cfg.lr, cfg.lr_schedule)
        envs = [
            make_colored_env(
                data.train_bases[e], e, rngmod.stream(cfg.seed, "recolor", epoch, e)
            )
            for e in seen
        ]
        n = min(env.x.shape[0] for env in envs)
        batch, steps = _minibatch_plan(n, cfg.batch_size)
        onehot_env = _env_onehot(batch, len(envs))
        shuffle_rng = rngmod.stream(cfg.seed, "shuffle", epoch)
        perms = [shuffle_rng.permutation(env.x.shape[0]) for env in envs]
        epoch_losses = []
        for step in range(steps):
            sl = slice(step * batch, (step + 1) * batch)
            xb = np.concatenate([env.x[p[sl]] for env, p in zip(envs, perms)], axis=0)
            yb = np.concatenate([env.y[p[sl]] for env, p in zip(envs, perms)], axis=0)

            feats = feature_net(Tensor(xb))
            logits = head(feats.relu())
            env_ce = []
            for e in range(len(envs)):
                seg = slice(e * batch, (e + 1) * batch)
                env_ce.append(cross_entropy(logits[seg], yb[seg]))
            loss = stack_scalars(env_ce).max(axis=0)
            if cfg.lambda_invariance > 0.0:
                residual = classification_residual(onehot_labels(yb, 2), logits)
                true_prob = residual.sum(axis=1, keepdims=True)
                joint = concat([feats, Tensor(onehot_env)], axis=1)
                li = hsic(true_prob, joint, kernel, kernel)
                w = wasserstein1d(residual[:batch], residual[batch : 2 * batch])
                loss = loss + cfg.lambda_invariance * (li + cfg.wasserstein_weight * w)

            zero_grad(params)
            loss.backward()
            adam_step(state)
            epoch_losses.append(loss.item())
        history.append(float(np.mean(epoch_losses)))

    model = TrainedClassifier(feature_net=feature_net, head=head)
    metrics = {}
    for env_id, env in sorted(data.test_envs.items()):
        acc = float(np.mean(model.predict(env.x) == env.y))
        metrics[f"acc_env{env_id}"] = acc
    report = RunReport(
        model=cfg.model,
        seed=cfg.seed,
        setting_id="classification",
        metrics=metrics,
        history=history,
        wall_clock=time.perf_counter() - t0,
        config=asdict(cfg),
    )
    return report, model
