"""A small numpy PointNet regressor with hand-written backpropagation.

Layout::

    points (B, N, 3)
      -> [dense -> batchnorm -> relu] x len(encoder_widths)   shared per point
      -> channelwise max over the N points                    global feature
      -> [dense -> batchnorm -> relu -> dropout] x hidden head layers
      -> dense -> 6 raw outputs

Everything is float64. Gradients are exact; ``tests/test_tinynn.py`` checks
them against central finite differences.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from applegrasp.errors import CheckpointError, EmptyDataset
from applegrasp.geometry import activate_array

CHECKPOINT_FORMAT = "applegrasp.regressor/1"


@dataclass(frozen=True)
class ModelConfig:
    encoder_widths: tuple[int, ...] = (64, 128, 256)
    head_widths: tuple[int, ...] = (128, 64, 6)
    dropout: float = 0.3
    batchnorm: bool = True
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        if not self.encoder_widths or not self.head_widths:
            raise ValueError("encoder and head need at least one layer each")
        if self.head_widths[-1] != 6:
            raise ValueError("the regression head must end in 6 outputs")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout probability must be in [0, 1)")


def _layer_names(cfg: ModelConfig) -> list[tuple[str, int, int, bool]]:
    """(name, fan_in, fan_out, normalized) for every dense layer in order."""
    layers = []
    c = cfg.in_channels
    for i, w in enumerate(cfg.encoder_widths):
        layers.append((f"enc{i}", c, w, cfg.batchnorm))
        c = w
    for j, w in enumerate(cfg.head_widths):
        last = j == len(cfg.head_widths) - 1
        layers.append((f"head{j}", c, w, cfg.batchnorm and not last))
        c = w
    return layers


class RegressorModel:
    """Parameters, batch-norm buffers and the train/inference switch."""

    def __init__(self, config: ModelConfig = ModelConfig(), rng: np.random.Generator | None = None):
        self.config = config
        self.training = False
        rng = np.random.default_rng(0) if rng is None else rng
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        for name, fan_in, fan_out, bn in _layer_names(config):
            self.params[f"{name}.W"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            # a bias in front of batch-norm is cancelled by the mean subtraction
            if not bn:
                self.params[f"{name}.b"] = np.zeros(fan_out)
            else:
                self.params[f"{name}.gamma"] = np.ones(fan_out)
                self.params[f"{name}.beta"] = np.zeros(fan_out)
                self.buffers[f"{name}.mean"] = np.zeros(fan_out)
                self.buffers[f"{name}.var"] = np.ones(fan_out)

    def copy(self) -> "RegressorModel":
        other = RegressorModel.__new__(RegressorModel)
        other.config = self.config
        other.training = self.training
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other

    def train(self) -> "RegressorModel":
        self.training = True
        return self

    def eval(self) -> "RegressorModel":
        self.training = False
        return self


# -- forward / backward -----------------------------------------------------


def _dense_bn_relu(model, name, x, bn, relu, cache):
    """One dense layer on a 2-D ``(rows, channels)`` input."""
    cfg = model.config
    z = x @ model.params[f"{name}.W"]
    if not bn:
        z += model.params[f"{name}.b"]
    entry = {"x": x}
    if bn:
        gamma, beta = model.params[f"{name}.gamma"], model.params[f"{name}.beta"]
        if model.training:
            mu = z.mean(axis=0)
            z -= mu
            var = np.einsum("ij,ij->j", z, z) / len(z)
            m = cfg.bn_momentum
            model.buffers[f"{name}.mean"] = m * model.buffers[f"{name}.mean"] + (1 - m) * mu
            model.buffers[f"{name}.var"] = m * model.buffers[f"{name}.var"] + (1 - m) * var
        else:
            z -= model.buffers[f"{name}.mean"]
            var = model.buffers[f"{name}.var"]
        inv_std = 1.0 / np.sqrt(var + cfg.bn_eps)
        z *= inv_std
        entry.update(z_hat=z, inv_std=inv_std)
        z = z * gamma
        z += beta
    if relu:
        np.maximum(z, 0.0, out=z)
        entry["out"] = z
    cache[name] = entry
    return z


def forward(model: RegressorModel, batch, rng: np.random.Generator | None = None):
    """Run the network on a ``(B, N, 3)`` batch of centered clouds.

    Returns ``(raw, cache)`` where ``raw`` is ``(B, 6)``. In training mode
    dropout draws from ``rng`` (dropout is skipped when ``rng`` is None).
    """
    cfg = model.config
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != cfg.in_channels or x.shape[1] < 1:
        raise ValueError(f"expected (B, N>=1, {cfg.in_channels}) input, got {x.shape}")
    B, N, _ = x.shape
    cache: dict = {"shape": (B, N)}
    layers = _layer_names(cfg)
    n_enc = len(cfg.encoder_widths)

    h = x.reshape(B * N, -1)
    for name, _, _, bn in layers[:n_enc]:
        h = _dense_bn_relu(model, name, h, bn, True, cache)
    feats = h.reshape(B, N, -1)
    # np.argmax returns the first index on ties, which routes the gradient
    argmax = feats.argmax(axis=1)
    cache["argmax"] = argmax
    h = np.take_along_axis(feats, argmax[:, None, :], axis=1)[:, 0, :]

    for name, _, _, bn in layers[n_enc:-1]:
        h = _dense_bn_relu(model, name, h, bn, True, cache)
        if model.training and cfg.dropout > 0 and rng is not None:
            keep = (rng.random(h.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
            cache[name]["dropout"] = keep
            h = h * keep
    name = layers[-1][0]
    raw = _dense_bn_relu(model, name, h, False, False, cache)
    return raw, cache


def _dense_backward(model, name, grad, bn, grads, cache):
    entry = cache[name]
    if "dropout" in entry:
        grad = grad * entry["dropout"]
    if "out" in entry:
        grad = grad * (entry["out"] > 0)
    if bn:
        z_hat, inv_std = entry["z_hat"], entry["inv_std"]
        gamma = model.params[f"{name}.gamma"]
        d_gamma = np.einsum("ij,ij->j", grad, z_hat)
        d_beta = grad.sum(axis=0)
        grads[f"{name}.gamma"] = d_gamma
        grads[f"{name}.beta"] = d_beta
        if model.training:
            # d z = inv_std / m * (m g - sum(g) - z_hat * sum(g * z_hat)), g = grad * gamma
            m = grad.shape[0]
            grad = grad * (gamma * m)
            grad -= d_beta * gamma
            grad -= z_hat * (d_gamma * gamma)
            grad *= inv_std / m
        else:
            grad = grad * (gamma * inv_std)
    x = entry["x"]
    grads[f"{name}.W"] = x.T @ grad
    if not bn:
        grads[f"{name}.b"] = grad.sum(axis=0)
    return grad @ model.params[f"{name}.W"].T


def backward(model: RegressorModel, cache, d_raw) -> dict[str, np.ndarray]:
    """Gradients of every parameter given ``dLoss/d raw`` of shape (B, 6)."""
    cfg = model.config
    layers = _layer_names(cfg)
    n_enc = len(cfg.encoder_widths)
    grads: dict[str, np.ndarray] = {}
    grad = np.asarray(d_raw, dtype=np.float64)
    for name, _, _, bn in reversed(layers[n_enc:]):
        grad = _dense_backward(model, name, grad, bn, grads, cache)

    B, N = cache["shape"]
    argmax = cache["argmax"]
    d_feats = np.zeros((B, N, grad.shape[1]))
    np.put_along_axis(d_feats, argmax[:, None, :], grad[:, None, :], axis=1)
    grad = d_feats.reshape(B * N, -1)
    for name, _, _, bn in reversed(layers[:n_enc]):
        grad = _dense_backward(model, name, grad, bn, grads, cache)
    return grads


def squared_error(raw: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean summed squared error after activation, and its raw gradient."""
    pred = activate_array(raw)
    diff = pred - targets
    B = raw.shape[0]
    loss = float((diff**2).sum() / B)
    d_pred = 2.0 * diff / B
    d_raw = d_pred.copy()
    d_raw[:, 3] *= pred[:, 3]
    d_raw[:, 4:] *= 1.0 - pred[:, 4:] ** 2
    return loss, d_raw


def loss_and_gradients(model: RegressorModel, batch, targets, rng: np.random.Generator | None = None):
    targets = np.asarray(targets, dtype=np.float64)
    if not np.all(np.isfinite(targets)):
        raise ValueError("targets must be finite")
    raw, cache = forward(model, batch, rng)
    loss, d_raw = squared_error(raw, targets)
    return loss, backward(model, cache, d_raw)


def predict(model: RegressorModel, batch) -> np.ndarray:
    """Inference-mode raw outputs; the model's mode flag is restored afterwards."""
    was_training = model.training
    model.eval()
    try:
        raw, _ = forward(model, batch)
    finally:
        model.training = was_training
    return raw


# -- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    decay: float = 0.6
    decay_every: int = 1  # epochs between learning-rate decays
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    epoch: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @property
    def effective_lr(self) -> float:
        return self.lr * self.decay ** (self.epoch // self.decay_every)

    def end_epoch(self) -> None:
        self.epoch += 1


def adam_step(model: RegressorModel, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """In-place Adam update with bias correction."""
    state.step += 1
    t = state.step
    lr = state.effective_lr
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = model.params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- training ---------------------------------------------------------------


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)


def evaluate_loss(model: RegressorModel, x, y, batch_size: int = 64) -> float:
    total = 0.0
    for start in range(0, len(x), batch_size):
        raw = predict(model, x[start:start + batch_size])
        loss, _ = squared_error(raw, y[start:start + batch_size])
        total += loss * len(raw)
    return total / len(x)


def init_output_bias(model: RegressorModel, targets) -> None:
    """Start the output layer at the mean target (in pre-activation space)."""
    y = np.asarray(targets, dtype=np.float64)
    name = _layer_names(model.config)[-1][0]
    bias = y.mean(axis=0).copy()
    bias[3] = math.log(max(bias[3], 1e-12))
    bias[4:] = np.arctanh(np.clip(bias[4:], -0.999, 0.999))
    model.params[f"{name}.b"] = bias


def train(
    model: RegressorModel,
    train_x,
    train_y,
    val_x=None,
    val_y=None,
    *,
    epochs: int = 100,
    batch_size: int = 32,
    rng: np.random.Generator | None = None,
    state: AdamState | None = None,
    epoch_data=None,
    log_every: int = 0,
):
    """Mini-batch training with per-epoch shuffling.

    ``epoch_data(rng)``, when given, is called at the start of every epoch
    and returns fresh ``(x, y)`` arrays of the same length (used for
    resampling and augmentation). Returns ``(model, history)``; the model is
    trained in place.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.float64)
    if len(train_x) == 0:
        raise EmptyDataset("training set is empty")
    if len(train_x) != len(train_y):
        raise ValueError("inputs and targets differ in length")
    rng = np.random.default_rng(0) if rng is None else rng
    state = AdamState() if state is None else state
    history = History()
    min_batch = 2 if model.config.batchnorm else 1
    for epoch in range(epochs):
        if epoch_data is not None:
            train_x, train_y = (np.asarray(a, dtype=np.float64) for a in epoch_data(rng))
        model.train()
        order = rng.permutation(len(train_x))
        seen, total = 0, 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < min_batch:
                continue
            loss, grads = loss_and_gradients(model, train_x[idx], train_y[idx], rng)
            adam_step(model, grads, state)
            total += loss * len(idx)
            seen += len(idx)
        state.end_epoch()
        model.eval()
        history.train_loss.append(total / max(seen, 1))
        if val_x is not None and len(val_x):
            history.val_loss.append(evaluate_loss(model, np.asarray(val_x), np.asarray(val_y)))
        if log_every and (epoch + 1) % log_every == 0:
            val = history.val_loss[-1] if history.val_loss else float("nan")
            print(f"epoch {epoch + 1:4d}  train {history.train_loss[-1]:.6f}  val {val:.6f}  lr {state.effective_lr:.2e}")
    model.eval()
    return model, history


# -- checkpoints ------------------------------------------------------------


def _pack(arrays: dict[str, np.ndarray]) -> dict:
    return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in sorted(arrays.items())}


def save_checkpoint(model: RegressorModel, path, extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "params": _pack(model.params),
        "buffers": _pack(model.buffers),
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def _unpack(section: dict, expected: dict[str, np.ndarray], what: str) -> dict[str, np.ndarray]:
    if set(section) != set(expected):
        raise CheckpointError(
            f"{what} names differ: missing {sorted(set(expected) - set(section))}, "
            f"unexpected {sorted(set(section) - set(expected))}"
        )
    out = {}
    for name, ref in expected.items():
        shape = tuple(section[name]["shape"])
        if shape != ref.shape:
            raise CheckpointError(f"{what} {name}: checkpoint shape {shape}, model expects {ref.shape}")
        data = np.asarray(section[name]["data"], dtype=np.float64)
        if data.size != ref.size:
            raise CheckpointError(f"{what} {name}: {data.size} values for shape {shape}")
        out[name] = data.reshape(shape)
    return out


def load_checkpoint(path) -> tuple[RegressorModel, dict]:
    """Load a model saved by :func:`save_checkpoint`; returns (model, extra)."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc.msg})") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {doc.get('format')!r}")
    cfg = ModelConfig(**doc["config"])
    model = RegressorModel(cfg)
    model.params = _unpack(doc["params"], model.params, "parameter")
    model.buffers = _unpack(doc["buffers"], model.buffers, "buffer")
    return model.eval(), doc.get("extra", {})


# -- finite-difference oracle -----------------------------------------------


def _pattern(cache) -> bytes:
    """Fingerprint of every ReLU mask and max-pool winner in a forward pass."""
    parts = [cache["argmax"].tobytes()]
    for key in sorted(k for k in cache if isinstance(cache[k], dict)):
        if "out" in cache[key]:
            parts.append(np.packbits(cache[key]["out"] > 0).tobytes())
    return b"".join(parts)


def numeric_gradients(model: RegressorModel, batch, targets, step: float = 1e-5):
    """Central-difference gradients of the loss, independent of :func:`backward`.

    Returns ``(grads, smooth)`` where ``smooth[name]`` flags the entries whose
    +/- ``step`` evaluations kept the same ReLU/max-pool pattern as the base
    point; at the others the difference quotient straddles a kink and does
    not estimate the derivative.
    """
    def loss_at():
        raw, cache = forward(model, batch)
        return squared_error(raw, targets)[0], _pattern(cache)

    _, base = loss_at()
    grads, smooth = {}, {}
    for name, p in model.params.items():
        g = np.zeros_like(p)
        ok = np.ones(p.shape, dtype=bool)
        for i in np.ndindex(p.shape):
            orig = p[i]
            p[i] = orig + step
            lp, pat_p = loss_at()
            p[i] = orig - step
            lm, pat_m = loss_at()
            p[i] = orig
            g[i] = (lp - lm) / (2 * step)
            ok[i] = pat_p == base and pat_m == base
        grads[name], smooth[name] = g, ok
    return grads, smooth


@dataclass
class GradientCheck:
    max_rel_error: float  # over entries with magnitude above ``floor``
    failures: int
    checked: int
    kinks: int

    @property
    def ok(self) -> bool:
        return self.failures == 0


def gradient_check(model: RegressorModel, batch, targets, *, step: float = 1e-5,
                   rtol: float = 1e-4, atol: float = 1e-8, floor: float = 1e-4) -> GradientCheck:
    """Compare :func:`backward` with central differences (dropout must be off).

    An entry fails when ``|a - n| > rtol * max(|a|, |n|) + atol``. Entries whose
    finite-difference stencil crosses a ReLU or max-pool switch are skipped
    and counted as kinks.
    """
    analytic = loss_and_gradients(model, batch, targets)[1]
    numeric, smooth = numeric_gradients(model, batch, targets, step)
    worst, failures, checked, kinks = 0.0, 0, 0, 0
    for name, a in analytic.items():
        ok = smooth[name]
        a, n = a[ok], numeric[name][ok]
        kinks += int((~ok).sum())
        checked += a.size
        big = np.maximum(np.abs(a), np.abs(n))
        failures += int((np.abs(a - n) > rtol * big + atol).sum())
        sel = big > floor
        if sel.any():
            worst = max(worst, float((np.abs(a - n)[sel] / big[sel]).max()))
    return GradientCheck(worst, failures, checked, kinks)
