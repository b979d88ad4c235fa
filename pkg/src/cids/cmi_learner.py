"""Learning structure masks from logged transitions.

Two families of conditional density models estimate conditional mutual
information as a difference of cross-entropies:

* DAIS models predict ``s_{t+1}`` from the gated state ``s_t * g_a`` without
  (``theta_D1``) and with (``theta_D2``) the action. The per-dimension NLL gap is
  the score ``I(s^j_{t+1}; a_t | DAIS_t)``.
* AIA models predict ``s_{t-1}`` from one current dimension ``s^j_t`` together
  with its own past ``s^j_{t-1}`` (placed in a one-hot slot), without
  (``theta_A1``) and with (``theta_A2``) the previous action. The gap for source
  ``i`` and conditioning dim ``j`` scores the edge ``s^i -> s^j``: it is positive
  when ``j`` is action-influenced and ``i`` causes it (a collider at ``s^j_t``).
  Conditioning on ``s^j_{t-1}`` blocks the path through ``j``'s self-edge along
  which older actions would otherwise leak into the score.

The models are fit by maximum likelihood (Adam) on training minibatches. The
gate logits follow the CMI-minus-L1 objectives evaluated on held-out
minibatches, by plain gradient descent so that gates the objective does not
depend on stay where they are.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_states, transitions_from
from .exceptions import ConfigError, DataError
from .nn import Adam, DenseNet, head_size, init_mlp, mixture_nll
from .structures import StructureMasks, compose_cids_mask

HISTORY_COLUMNS = ("step", "loss_dais", "loss_aia", "cmi_dais", "cmi_aia", "active_gates_a", "active_gates_s")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass
class TransitionBatch:
    """Rows of ``(s_t, a_t, s_{t+1})``; the same rows serve as ``(s_{t-1}, a_{t-1}, s_t)``."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray

    def __post_init__(self):
        if len(self.states) == 0:
            raise DataError("empty batch")

    def __len__(self):
        return len(self.states)

    def take(self, idx) -> "TransitionBatch":
        return TransitionBatch(self.states[idx], self.actions[idx], self.next_states[idx])


@dataclass
class GateParams:
    a_to_s_logits: np.ndarray
    s_to_s_logits: np.ndarray
    temperature: float = 1.0

    @classmethod
    def constant(cls, d: int, logit: float = 0.0, temperature: float = 1.0) -> "GateParams":
        return cls(np.full(d, float(logit)), np.full((d, d), float(logit)), temperature)

    @property
    def d(self) -> int:
        return self.a_to_s_logits.shape[0]

    def soft_a(self) -> np.ndarray:
        return sigmoid(self.a_to_s_logits / self.temperature)

    def soft_s(self) -> np.ndarray:
        """Soft ``m_s_to_s`` with the diagonal pinned to 1."""
        s = sigmoid(self.s_to_s_logits / self.temperature)
        np.fill_diagonal(s, 1.0)
        return s

    def edge_weights(self) -> np.ndarray:
        """AIA weight of edge ``i -> j``: soft edge, ``j`` in DAIS, ``i`` not in DAIS."""
        ga = self.soft_a()
        w = self.soft_s() * ga[None, :] * (1.0 - ga)[:, None]
        np.fill_diagonal(w, 0.0)
        return w

    def aia_gate(self) -> np.ndarray:
        """Per-source AIA membership: strongest soft edge into a soft DAIS dim."""
        return self.edge_weights().max(axis=1)


@dataclass
class PredictiveModels:
    theta_D1: DenseNet
    theta_D2: DenseNet
    theta_A1: DenseNet
    theta_A2: DenseNet
    d: int
    action_dim: int
    n_components: int = 3

    @classmethod
    def init(cls, d, action_dim, hidden=128, hidden_layers=3, n_components=3, seed=0) -> "PredictiveModels":
        out = head_size(d, n_components)
        ss = np.random.SeedSequence(seed).spawn(4)
        seeds = [int(s.generate_state(1)[0]) for s in ss]
        return cls(
            init_mlp(d, out, hidden, hidden_layers, seeds[0]),
            init_mlp(d + action_dim, out, hidden, hidden_layers, seeds[1]),
            init_mlp(3 * d, out, hidden, hidden_layers, seeds[2]),
            init_mlp(3 * d + action_dim, out, hidden, hidden_layers, seeds[3]),
            d,
            action_dim,
            n_components,
        )

    def nets(self) -> Dict[str, DenseNet]:
        return {"theta_D1": self.theta_D1, "theta_D2": self.theta_D2, "theta_A1": self.theta_A1, "theta_A2": self.theta_A2}


@dataclass
class LearnerConfig:
    lambda1: float = 5e-4
    lambda2: float = 1e-4
    lr: float = 1e-3
    gate_lr: float = 1.0
    batch_size: int = 256
    epochs: int = 6
    threshold: float = 0.5
    hidden: int = 128
    hidden_layers: int = 3
    n_components: int = 3
    validation_fraction: float = 0.2
    warmup_epochs: int = 1
    gate_init: float = -2.0
    seed: int = 0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("sparsity weights must be non-negative")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in (0, 1)")


@dataclass
class LossOutput:
    """Objective value plus gradients; ``cmi`` and ``scores`` are the estimates behind it."""

    loss: float
    cmi: float
    scores: np.ndarray
    model_grads: Dict[str, List[np.ndarray]] = field(default_factory=dict)
    gate_grad: Optional[np.ndarray] = None


# -- DAIS objective -------------------------------------------------------------


def _dais_nll(models: PredictiveModels, gates: GateParams, batch: TransitionBatch, zero_action=False):
    x = batch.states * gates.soft_a()[None, :]
    a = np.zeros_like(batch.actions) if zero_action else batch.actions
    out1 = models.theta_D1.forward(x)
    out2 = models.theta_D2.forward(np.concatenate([x, a], axis=1))
    nll1, jac1 = mixture_nll(batch.next_states, out1, models.n_components)
    nll2, jac2 = mixture_nll(batch.next_states, out2, models.n_components)
    return nll1, jac1, nll2, jac2


def dais_scores(models: PredictiveModels, gates: GateParams, batch: TransitionBatch) -> np.ndarray:
    """Per-dimension ``H(s^j_{t+1}|DAIS_t) - H(s^j_{t+1}|a_t, DAIS_t)`` estimates."""
    nll1, _, nll2, _ = _dais_nll(models, gates, batch)
    return (nll1 - nll2).mean(axis=0)


def cmi_dais_batch(models: PredictiveModels, gates: GateParams, batch: TransitionBatch) -> float:
    """Gate-weighted DAIS conditional mutual information estimate (nats)."""
    return float(gates.soft_a() @ dais_scores(models, gates, batch))


def loss_dais_model(models, gates, batch, lambda1, *, model_grads=True, gate_grads=True) -> LossOutput:
    """``-cmi_dais + lambda1 * sum(sigmoid(a_to_s_logits))``.

    Gate gradients differentiate this objective through the membership weights
    (the gated model input is held fixed). Model gradients are those of the
    per-model negative log-likelihood, which is what makes each NLL an entropy
    estimate in the first place.
    """
    n = len(batch)
    nll1, jac1, nll2, jac2 = _dais_nll(models, gates, batch)
    scores = (nll1 - nll2).mean(axis=0)
    g = gates.soft_a()
    cmi = float(g @ scores)
    loss = -cmi + lambda1 * float(g.sum())
    out = LossOutput(loss, cmi, scores)
    if model_grads:
        w = np.full_like(nll1, 1.0 / n)
        out.model_grads["theta_D2"] = models.theta_D2.backward(jac2(w))[0]
        out.model_grads["theta_D1"] = models.theta_D1.backward(jac1(w))[0]
    if gate_grads:
        out.gate_grad = (lambda1 - scores) * g * (1.0 - g) / gates.temperature
    return out


# -- AIA objective --------------------------------------------------------------


def _aia_inputs(batch: TransitionBatch, dest: np.ndarray, d: int, zero_action=False):
    """Condition on ``s^j_t`` and ``s^j_{t-1}`` for each row's ``j``, tagged one-hot."""
    n = len(batch)
    onehot = np.zeros((n, d))
    onehot[np.arange(n), dest] = 1.0
    x1 = np.concatenate([batch.next_states * onehot, batch.states * onehot, onehot], axis=1)
    a = np.zeros_like(batch.actions) if zero_action else batch.actions
    x2 = np.concatenate([x1, a], axis=1)
    return x1, x2, onehot


def aia_scores(models: PredictiveModels, batch: TransitionBatch) -> np.ndarray:
    """Matrix ``e[i, j]`` estimating ``I(s^i_{t-1}; a_{t-1} | s^j_t, s^j_{t-1})``; zero diagonal."""
    d = models.d
    n = len(batch)
    rep = batch.take(np.tile(np.arange(n), d))
    dest = np.repeat(np.arange(d), n)
    x1, x2, _ = _aia_inputs(rep, dest, d)
    nll1, _ = mixture_nll(rep.states, models.theta_A1.forward(x1), models.n_components)
    nll2, _ = mixture_nll(rep.states, models.theta_A2.forward(x2), models.n_components)
    gap = (nll1 - nll2).reshape(d, n, d).mean(axis=1)  # [dest, source]
    e = gap.T.copy()
    np.fill_diagonal(e, 0.0)
    return e


def cmi_aia_batch(models: PredictiveModels, gates: GateParams, batch: TransitionBatch) -> float:
    """Edge-weighted AIA conditional mutual information estimate (nats)."""
    return float((gates.edge_weights() * aia_scores(models, batch)).sum())


def loss_aia_model(models, gates, batch, lambda2, *, model_grads=True, gate_grads=True, rng=None) -> LossOutput:
    """``-cmi_aia + lambda2 * sum_{i != j} sigmoid(s_to_s_logits[i, j])``.

    Model gradients fit ``theta_A1``/``theta_A2`` by likelihood, conditioning each
    row on one randomly drawn current dimension (whose own past is an input and
    therefore left out of the likelihood).
    """
    d = models.d
    out = LossOutput(0.0, 0.0, np.zeros((d, d)))
    soft = sigmoid(gates.s_to_s_logits / gates.temperature)
    off = ~np.eye(d, dtype=bool)
    if gate_grads:
        e = aia_scores(models, batch)
        w = gates.edge_weights()
        out.scores = e
        out.cmi = float((w * e).sum())
        out.loss = -out.cmi + lambda2 * float(soft[off].sum())
        ga = gates.soft_a()
        membership = (1.0 - ga)[:, None] * ga[None, :]
        grad = (lambda2 - membership * e) * soft * (1.0 - soft) / gates.temperature
        grad[~off] = 0.0
        out.gate_grad = grad
    if model_grads:
        rng = np.random.default_rng(0) if rng is None else rng
        n = len(batch)
        dest = rng.integers(0, d, size=n)
        x1, x2, onehot = _aia_inputs(batch, dest, d)
        w_row = (1.0 - onehot) / n
        nll1, jac1 = mixture_nll(batch.states, models.theta_A1.forward(x1), models.n_components)
        out.model_grads["theta_A1"] = models.theta_A1.backward(jac1(w_row))[0]
        nll2, jac2 = mixture_nll(batch.states, models.theta_A2.forward(x2), models.n_components)
        out.model_grads["theta_A2"] = models.theta_A2.backward(jac2(w_row))[0]
        if not gate_grads:
            out.loss = float(((nll1 - nll2) * w_row).sum())
    return out


# -- masks and metrics ----------------------------------------------------------


def extract_binary_masks(gates: GateParams, threshold: float = 0.5) -> StructureMasks:
    """Entry is 1 iff its soft gate is ``>= threshold``; diagonal forced to 1."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError("threshold must lie in (0, 1)")
    a = (gates.soft_a() >= threshold).astype(np.int64)
    s = (sigmoid(gates.s_to_s_logits / gates.temperature) >= threshold).astype(np.int64)
    np.fill_diagonal(s, 1)
    return StructureMasks(s, a)


def _prf(pred: np.ndarray, truth: np.ndarray) -> Dict[str, float]:
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1, "tp": tp, "fp": fp, "fn": fn}


def mask_metrics(learned: StructureMasks, truth: StructureMasks) -> Dict[str, Dict[str, float]]:
    """Precision/recall/F1 of mask entries; ``s_to_s`` scored off the diagonal.

    With no predicted positives precision is 1; with no true positives recall is 1.
    """
    if learned.d != truth.d:
        raise ValueError("mask shapes differ")
    off = ~np.eye(truth.d, dtype=bool)
    return {
        "a_to_s": _prf(learned.m_a_to_s.astype(bool), truth.m_a_to_s.astype(bool)),
        "s_to_s": _prf(learned.m_s_to_s.astype(bool)[off], truth.m_s_to_s.astype(bool)[off]),
    }


# -- training -------------------------------------------------------------------


@dataclass
class MaskReport:
    soft_a_to_s: np.ndarray
    soft_s_to_s: np.ndarray
    masks: StructureMasks
    dais_scores: np.ndarray
    aia_scores: np.ndarray
    history: np.ndarray
    threshold: float
    metrics: Optional[dict] = None

    @property
    def active_gates_a(self) -> int:
        return int(self.masks.m_a_to_s.sum())

    def history_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(HISTORY_COLUMNS) + "\n")
        for row in self.history:
            buf.write(
                f"{int(row[0])},{row[1]!r},{row[2]!r},{row[3]!r},{row[4]!r},{int(row[5])},{int(row[6])}\n"
            )
        return buf.getvalue()

    def to_dict(self) -> dict:
        out = {
            "threshold": self.threshold,
            "soft_masks": {"a_to_s": self.soft_a_to_s.tolist(), "s_to_s": self.soft_s_to_s.tolist()},
            "binary_masks": self.masks.to_dict(),
            "scores": {"dais": self.dais_scores.tolist(), "aia": self.aia_scores.tolist()},
        }
        if self.metrics is not None:
            out["metrics"] = self.metrics
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict, history=None) -> "MaskReport":
        return cls(
            np.array(data["soft_masks"]["a_to_s"]),
            np.array(data["soft_masks"]["s_to_s"]),
            StructureMasks.from_dict(data["binary_masks"]),
            np.array(data["scores"]["dais"]),
            np.array(data["scores"]["aia"]),
            np.zeros((0, len(HISTORY_COLUMNS))) if history is None else history,
            data["threshold"],
            data.get("metrics"),
        )


def _split(log_or_batch, fraction: float, rng: np.random.Generator):
    """Split by episode when episode ids are known, otherwise by row."""
    S, A, S1, episodes = transitions_from(log_or_batch)
    if episodes is not None and len(np.unique(episodes)) >= 5:
        ids = np.unique(episodes)
        n_val = max(1, int(round(fraction * len(ids))))
        val_ids = rng.choice(ids, size=n_val, replace=False)
        val = np.isin(episodes, val_ids)
    else:
        val = np.zeros(len(S), dtype=bool)
        val[rng.choice(len(S), size=max(1, int(round(fraction * len(S)))), replace=False)] = True
    full = TransitionBatch(S, A, S1)
    return full.take(np.flatnonzero(~val)), full.take(np.flatnonzero(val))


def train_masks(dataset, config: LearnerConfig, truth: Optional[StructureMasks] = None, callback=None):
    """Fit the four predictive models and the gates; return ``(MaskReport, models, gates)``.

    Each inner iteration draws one training and one held-out minibatch, then
    updates the DAIS side (models, then ``a_to_s`` gates) followed by the AIA side
    (models, then ``s_to_s`` gates).
    """
    S, A, S1, _ = transitions_from(dataset)
    if len(S) < 10 * config.batch_size:
        raise DataError(f"need at least {10 * config.batch_size} transitions, got {len(S)}")
    rng = np.random.default_rng(config.seed)
    train, val = _split(dataset, config.validation_fraction, rng)
    d, k = S.shape[1], A.shape[1]
    models = PredictiveModels.init(d, k, config.hidden, config.hidden_layers, config.n_components, config.seed)
    gates = GateParams.constant(d, config.gate_init)
    opts = {name: Adam(net.params, config.lr) for name, net in models.nets().items()}

    bs = config.batch_size
    n_batches = len(train) // bs
    history = np.zeros((config.epochs * n_batches, len(HISTORY_COLUMNS)))
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        # s_to_s gates are judged relative to the DAIS gates, so they start one
        # epoch after the a_to_s gates have begun to separate.
        update_gates_a = epoch >= config.warmup_epochs
        update_gates_s = epoch >= config.warmup_epochs + 1
        for b in range(n_batches):
            tb = train.take(order[b * bs : (b + 1) * bs])
            vb = val.take(rng.integers(0, len(val), size=bs))

            fit = loss_dais_model(models, gates, tb, config.lambda1, gate_grads=False)
            opts["theta_D1"].step(fit.model_grads["theta_D1"])
            opts["theta_D2"].step(fit.model_grads["theta_D2"])
            dais = loss_dais_model(models, gates, vb, config.lambda1, model_grads=False)
            if update_gates_a:
                gates.a_to_s_logits -= config.gate_lr * dais.gate_grad

            fit = loss_aia_model(models, gates, tb, config.lambda2, gate_grads=False, rng=rng)
            opts["theta_A1"].step(fit.model_grads["theta_A1"])
            opts["theta_A2"].step(fit.model_grads["theta_A2"])
            aia = loss_aia_model(models, gates, vb, config.lambda2, model_grads=False)
            if update_gates_s:
                gates.s_to_s_logits -= config.gate_lr * aia.gate_grad

            binary = extract_binary_masks(gates, config.threshold)
            history[step] = (
                step,
                dais.loss,
                aia.loss,
                dais.cmi,
                aia.cmi,
                binary.m_a_to_s.sum(),
                len(binary.cross_edges()),
            )
            step += 1
        if callback is not None:
            callback(epoch, models, gates)

    masks = extract_binary_masks(gates, config.threshold)
    report = MaskReport(
        gates.soft_a(),
        gates.soft_s(),
        masks,
        dais_scores(models, gates, val),
        aia_scores(models, val),
        history,
        config.threshold,
        None if truth is None else mask_metrics(masks, truth),
    )
    return report, models, gates


class CIDSMaskLearner(TransformerMixin, BaseEstimator):
    """Estimator wrapper around ``train_masks``.

    ``fit`` accepts a ``TrajectoryLog`` or a tuple ``(states, actions,
    next_states)``; ``transform`` zeroes the state dims outside the learned
    causal-indispensable set.
    """

    def __init__(
        self,
        lambda1=5e-4,
        lambda2=1e-4,
        lr=1e-3,
        gate_lr=1.0,
        batch_size=256,
        epochs=6,
        threshold=0.5,
        hidden=128,
        hidden_layers=3,
        n_components=3,
        validation_fraction=0.2,
        warmup_epochs=1,
        gate_init=-2.0,
        seed=0,
    ):
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lr = lr
        self.gate_lr = gate_lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.threshold = threshold
        self.hidden = hidden
        self.hidden_layers = hidden_layers
        self.n_components = n_components
        self.validation_fraction = validation_fraction
        self.warmup_epochs = warmup_epochs
        self.gate_init = gate_init
        self.seed = seed

    def to_config(self) -> LearnerConfig:
        return LearnerConfig(**self.get_params())

    def fit(self, X, y=None, truth: Optional[StructureMasks] = None):
        report, models, gates = train_masks(X, self.to_config(), truth=truth)
        self.report_ = report
        self.models_ = models
        self.gates_ = gates
        self.masks_ = report.masks
        self.cids_mask_ = compose_cids_mask(report.masks)
        self.n_features_in_ = report.masks.d
        return self

    def transform(self, X):
        check_is_fitted(self, "masks_")
        X = check_states(X, self.n_features_in_)
        return X * self.cids_mask_[None, :]
