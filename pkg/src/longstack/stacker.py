"""Sequence-to-sequence LSTM stacking model with exact analytic gradients.

A multi-layer LSTM consumes per-time-point feature rows and emits a class
distribution at every step; the output at step t targets the label one
visit later.  Three classification heads sit on the top layer's hidden
states:

- time_distributed_mlp: one shared single-hidden-layer tanh MLP applied
  to each step's hidden state, softmax output.
- longitudinal_softmax: softmax applied directly to the final layer's
  hidden state, which therefore must have width equal to the class count.
  The recurrence itself carries all classification capacity.
- time_dependent_per_step: a distinct linear softmax classifier per step.

Gradients are computed by backpropagation through time, no autodiff.
Training is full-batch with Adam-style adaptive updates and a seeded
initialization, so results are reproducible bit for bit.
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses as losses_mod
from .losses import LossSpec
from .util import derive_seed, softmax

HEADS = ("time_distributed_mlp", "longitudinal_softmax", "time_dependent_per_step")

STACKER_FORMAT_VERSION = 1


class StackerError(ValueError):
    pass


@dataclass(frozen=True)
class StackerConfig:
    input_width: int
    class_count: int
    hidden_sizes: tuple = (32,)
    head: str = "time_distributed_mlp"
    mlp_hidden: int = 32
    epochs: int = 300
    learning_rate: float = 1e-3
    seed: int = 0
    # required for the per-step head, whose parameter count depends on it
    time_steps: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.input_width < 1 or self.class_count < 2:
            raise StackerError("need input_width >= 1 and class_count >= 2")
        if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise StackerError("hidden_sizes must be a non-empty list of positive widths")
        if self.head not in HEADS:
            raise StackerError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if self.head == "longitudinal_softmax" and self.hidden_sizes[-1] != self.class_count:
            raise StackerError("longitudinal_softmax head requires final hidden size == class count")
        if self.mlp_hidden < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise StackerError("invalid optimization settings")
        if self.time_steps is not None and self.time_steps < 1:
            raise StackerError("time_steps must be positive when given")

    def to_dict(self) -> dict:
        return {"input_width": self.input_width, "class_count": self.class_count,
                "hidden_sizes": list(self.hidden_sizes), "head": self.head,
                "mlp_hidden": self.mlp_hidden, "epochs": self.epochs,
                "learning_rate": self.learning_rate, "seed": self.seed,
                "time_steps": self.time_steps}

    @classmethod
    def from_dict(cls, d: dict) -> "StackerConfig":
        return cls(input_width=d["input_width"], class_count=d["class_count"],
                   hidden_sizes=tuple(d.get("hidden_sizes", (32,))),
                   head=d.get("head", "time_distributed_mlp"),
                   mlp_hidden=d.get("mlp_hidden", 32), epochs=d.get("epochs", 300),
                   learning_rate=d.get("learning_rate", 1e-3), seed=d.get("seed", 0),
                   time_steps=d.get("time_steps"))


def default_stacker_config(input_width: int, class_count: int, head: str,
                           seed: int = 0, epochs: int = 300, learning_rate: float = 1e-3,
                           time_steps: int | None = None) -> StackerConfig:
    """Architecture defaults: one 32-unit layer, except the longitudinal
    head which stacks a class-width layer on top."""
    hidden = (32, class_count) if head == "longitudinal_softmax" else (32,)
    return StackerConfig(input_width=input_width, class_count=class_count,
                         hidden_sizes=hidden, head=head, seed=seed, epochs=epochs,
                         learning_rate=learning_rate, time_steps=time_steps)


@dataclass
class StackerModel:
    config: StackerConfig
    lstm_weights: list  # per layer (W, b); W stacks [input; hidden] rows x 4*h gate columns
    head_params: dict
    training_curve: list = field(default_factory=list)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp overflow for very negative z saturates to inf and 1/inf -> 0,
    # which is the exact limit; suppress the spurious warning
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def init_model(config: StackerConfig) -> StackerModel:
    """Uniform +-1/sqrt(fan-in) weights, zero biases except forget gate at +1."""
    rng = np.random.default_rng(derive_seed(config.seed, "stacker-init"))
    weights = []
    in_width = config.input_width
    for h in config.hidden_sizes:
        fan = in_width + h
        bound = 1.0 / np.sqrt(fan)
        w = rng.uniform(-bound, bound, size=(fan, 4 * h))
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0
        weights.append((w, b))
        in_width = h
    top = config.hidden_sizes[-1]
    head: dict = {}
    if config.head == "time_distributed_mlp":
        b1 = 1.0 / np.sqrt(top)
        b2 = 1.0 / np.sqrt(config.mlp_hidden)
        head = {"W1": rng.uniform(-b1, b1, size=(top, config.mlp_hidden)),
                "b1": np.zeros(config.mlp_hidden),
                "W2": rng.uniform(-b2, b2, size=(config.mlp_hidden, config.class_count)),
                "b2": np.zeros(config.class_count)}
    elif config.head == "time_dependent_per_step":
        if config.time_steps is None:
            raise StackerError("time_dependent_per_step head needs time_steps in the config")
        b1 = 1.0 / np.sqrt(top)
        head = {"W": [rng.uniform(-b1, b1, size=(top, config.class_count))
                      for _ in range(config.time_steps)],
                "b": [np.zeros(config.class_count) for _ in range(config.time_steps)]}
    return StackerModel(config=config, lstm_weights=weights, head_params=head)


def named_parameters(model: StackerModel) -> list[tuple[str, np.ndarray]]:
    """All trainable arrays in a fixed order; the arrays are the live ones."""
    out = []
    for layer, (w, b) in enumerate(model.lstm_weights):
        out.append((f"lstm.{layer}.W", w))
        out.append((f"lstm.{layer}.b", b))
    hp = model.head_params
    if model.config.head == "time_distributed_mlp":
        out += [("head.W1", hp["W1"]), ("head.b1", hp["b1"]),
                ("head.W2", hp["W2"]), ("head.b2", hp["b2"])]
    elif model.config.head == "time_dependent_per_step":
        for t, (w, b) in enumerate(zip(hp["W"], hp["b"])):
            out.append((f"head.W.{t}", w))
            out.append((f"head.b.{t}", b))
    return out


def _as_array(tensor) -> np.ndarray:
    values = getattr(tensor, "values", tensor)
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 3:
        raise StackerError("input must have shape (samples, time points, features)")
    return x


def _check_width(model: StackerModel, x: np.ndarray) -> None:
    if x.shape[2] != model.config.input_width:
        raise StackerError(f"input width {x.shape[2]} != configured {model.config.input_width}")
    if model.config.head == "time_dependent_per_step" and x.shape[1] != len(model.head_params["W"]):
        raise StackerError("sequence length does not match the per-step head")


def _forward_cached(model: StackerModel, x: np.ndarray):
    n, t_count, _ = x.shape
    layers = []
    inp = x
    for (w, b), h_size in zip(model.lstm_weights, model.config.hidden_sizes):
        h = np.zeros((n, h_size))
        c = np.zeros((n, h_size))
        steps = []
        hs = np.empty((n, t_count, h_size))
        for t in range(t_count):
            zin = np.concatenate([inp[:, t, :], h], axis=1)
            z = zin @ w + b
            gi = _sigmoid(z[:, :h_size])
            gf = _sigmoid(z[:, h_size:2 * h_size])
            go = _sigmoid(z[:, 2 * h_size:3 * h_size])
            gg = np.tanh(z[:, 3 * h_size:])
            c_new = gf * c + gi * gg
            tc = np.tanh(c_new)
            steps.append((zin, gi, gf, go, gg, c, tc))
            h = go * tc
            c = c_new
            hs[:, t, :] = h
        layers.append((w, steps))
        inp = hs
    h_top = inp
    head_hidden = None
    cfg = model.config
    if cfg.head == "longitudinal_softmax":
        probs = softmax(h_top)
    elif cfg.head == "time_distributed_mlp":
        hp = model.head_params
        head_hidden = np.tanh(h_top @ hp["W1"] + hp["b1"])
        probs = softmax(head_hidden @ hp["W2"] + hp["b2"])
    else:
        hp = model.head_params
        logits = np.empty((n, t_count, cfg.class_count))
        for t in range(t_count):
            logits[:, t, :] = h_top[:, t, :] @ hp["W"][t] + hp["b"][t]
        probs = softmax(logits)
    return probs, {"layers": layers, "h_top": h_top, "head_hidden": head_hidden, "probs": probs}


def forward(model: StackerModel, tensor) -> np.ndarray:
    """Class probabilities (sample, time, C); step t is causal in inputs 1..t."""
    x = _as_array(tensor)
    _check_width(model, x)
    probs, _ = _forward_cached(model, x)
    return probs


def _backward_cached(model: StackerModel, cache: dict, dprobs: np.ndarray) -> dict:
    cfg = model.config
    probs = cache["probs"]
    # softmax jacobian applied to the incoming probability gradient
    dlogits = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
    grads: dict = {}
    h_top = cache["h_top"]
    n, t_count, top = h_top.shape
    if cfg.head == "longitudinal_softmax":
        dh_top = dlogits
    elif cfg.head == "time_distributed_mlp":
        hp = model.head_params
        hidden = cache["head_hidden"]
        flat_h = hidden.reshape(-1, hidden.shape[-1])
        flat_dl = dlogits.reshape(-1, cfg.class_count)
        grads["head.W2"] = flat_h.T @ flat_dl
        grads["head.b2"] = flat_dl.sum(axis=0)
        da = (dlogits @ hp["W2"].T) * (1.0 - hidden ** 2)
        flat_da = da.reshape(-1, da.shape[-1])
        grads["head.W1"] = h_top.reshape(-1, top).T @ flat_da
        grads["head.b1"] = flat_da.sum(axis=0)
        dh_top = da @ hp["W1"].T
    else:
        hp = model.head_params
        dh_top = np.empty_like(h_top)
        for t in range(t_count):
            grads[f"head.W.{t}"] = h_top[:, t, :].T @ dlogits[:, t, :]
            grads[f"head.b.{t}"] = dlogits[:, t, :].sum(axis=0)
            dh_top[:, t, :] = dlogits[:, t, :] @ hp["W"][t].T
    dtop = dh_top
    for layer in reversed(range(len(model.lstm_weights))):
        w, steps = cache["layers"][layer]
        h_size = cfg.hidden_sizes[layer]
        in_size = w.shape[0] - h_size
        dw = np.zeros_like(w)
        db = np.zeros(4 * h_size)
        dx_seq = np.empty((n, t_count, in_size))
        dh_next = np.zeros((n, h_size))
        dc_next = np.zeros((n, h_size))
        for t in reversed(range(t_count)):
            zin, gi, gf, go, gg, c_prev, tc = steps[t]
            dh = dtop[:, t, :] + dh_next
            do = dh * tc
            dc = dh * go * (1.0 - tc ** 2) + dc_next
            di = dc * gg
            dg = dc * gi
            df = dc * c_prev
            dc_next = dc * gf
            dz = np.concatenate([di * gi * (1.0 - gi), df * gf * (1.0 - gf),
                                 do * go * (1.0 - go), dg * (1.0 - gg ** 2)], axis=1)
            dw += zin.T @ dz
            db += dz.sum(axis=0)
            dzin = dz @ w.T
            dx_seq[:, t, :] = dzin[:, :in_size]
            dh_next = dzin[:, in_size:]
        grads[f"lstm.{layer}.W"] = dw
        grads[f"lstm.{layer}.b"] = db
        dtop = dx_seq
    return grads


def backward(model: StackerModel, tensor, labels: np.ndarray, loss_spec: LossSpec,
             class_weight_table: np.ndarray | None = None,
             ordinal_override: np.ndarray | None = None) -> dict:
    """Analytic gradient of the loss for every parameter, keyed like
    named_parameters().  Ordinal factors are constants during differentiation."""
    x = _as_array(tensor)
    _check_width(model, x)
    probs, cache = _forward_cached(model, x)
    dprobs = losses_mod.loss_grad(loss_spec, probs, np.asarray(labels, dtype=np.int64),
                                  class_weight_table, ordinal_override)
    return _backward_cached(model, cache, dprobs)


def train(config: StackerConfig, tensor, labels: np.ndarray,
          loss_spec: LossSpec = LossSpec("cce")) -> StackerModel:
    """Full-batch Adam from a seeded initialization.

    labels[:, t] is the target for output step t (the caller applies the
    one-visit shift).  The recorded curve holds the loss before every
    update plus the final value, so epochs=0 leaves the model at its
    initialization with a single curve entry.
    """
    x = _as_array(tensor)
    labels = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise StackerError("empty training set")
    if labels.shape != x.shape[:2]:
        raise StackerError("labels must align with (samples, time points)")
    if config.head == "time_dependent_per_step" and config.time_steps is None:
        config = replace(config, time_steps=x.shape[1])
    model = init_model(config)
    _check_width(model, x)
    weight_table = None
    if loss_spec.kind != "cce":
        weight_table = losses_mod.class_weights(labels, config.class_count)
    params = named_parameters(model)
    mom = {name: np.zeros_like(p) for name, p in params}
    vel = {name: np.zeros_like(p) for name, p in params}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    curve = []
    for epoch in range(config.epochs):
        probs, cache = _forward_cached(model, x)
        value = losses_mod.loss(loss_spec, probs, labels, weight_table)
        if not np.isfinite(value):
            raise StackerError(f"non-finite loss {value!r} at epoch {epoch}")
        curve.append(value)
        dprobs = losses_mod.loss_grad(loss_spec, probs, labels, weight_table)
        grads = _backward_cached(model, cache, dprobs)
        step = epoch + 1
        scale = config.learning_rate * np.sqrt(1.0 - beta2 ** step) / (1.0 - beta1 ** step)
        for name, p in params:
            g = grads[name]
            mom[name] = beta1 * mom[name] + (1.0 - beta1) * g
            vel[name] = beta2 * vel[name] + (1.0 - beta2) * g * g
            p -= scale * mom[name] / (np.sqrt(vel[name]) + eps)
    probs, _ = _forward_cached(model, x)
    final = losses_mod.loss(loss_spec, probs, labels, weight_table)
    if not np.isfinite(final):
        raise StackerError(f"non-finite loss {final!r} at epoch {config.epochs}")
    curve.append(final)
    model.training_curve = curve
    return model


def write_training_curve(curve, path) -> None:
    lines = ["epoch,loss"] + [f"{i},{value!r}" for i, value in enumerate(curve)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_stacker(model: StackerModel, path) -> None:
    payload = {"format_version": STACKER_FORMAT_VERSION, "model": model}
    Path(path).write_bytes(pickle.dumps(payload))


def load_stacker(path) -> StackerModel:
    payload = pickle.loads(Path(path).read_bytes())
    version = payload.get("format_version")
    if version != STACKER_FORMAT_VERSION:
        raise StackerError(f"unsupported stacker container version {version!r}")
    return payload["model"]
