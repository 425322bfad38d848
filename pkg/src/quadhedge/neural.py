"""Dense feed-forward networks on top of :mod:`quadhedge.autodiff`, plus ADAM."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

CHECKPOINT_FORMAT = "quadhedge.mlp"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Raised when optimisation produces non-finite values or diverges."""


class DivergenceError(TrainingError):
    pass


class DivergenceMonitor:
    """Flags a run whose loss stays above ``factor`` x its first value for ``patience`` epochs."""

    def __init__(self, factor: float = 1e3, patience: int = 5):
        self.factor = factor
        self.patience = patience
        self.initial = None
        self.strikes = 0

    def update(self, loss: float, what: str = "loss") -> None:
        if not math.isfinite(loss):
            raise TrainingError(f"{what} became non-finite ({loss}); try a lower learning rate")
        if self.initial is None:
            self.initial = max(abs(loss), 1e-12)
            return
        self.strikes = self.strikes + 1 if loss > self.factor * self.initial else 0
        if self.strikes >= self.patience:
            raise DivergenceError(
                f"{what} {loss:.4g} exceeded {self.factor:g} x initial {self.initial:.4g} "
                f"for {self.patience} consecutive epochs"
            )


class TrainingLog:
    """Row-oriented training log; ``wall_ms`` is the only non-deterministic column."""

    def __init__(self, columns):
        self.columns = tuple(columns)
        self.rows: list[tuple] = []

    def append(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError("row length does not match columns")
        self.rows.append(tuple(values))

    def column(self, name) -> np.ndarray:
        j = self.columns.index(name)
        return np.array([r[j] for r in self.rows], dtype=float)

    def write_csv(self, fh, include_wall: bool = True) -> None:
        keep = [j for j, c in enumerate(self.columns) if include_wall or c != "wall_ms"]
        fh.write(",".join(self.columns[j] for j in keep) + "\n")
        for r in self.rows:
            fh.write(",".join(_fmt(r[j]) for j in keep) + "\n")

    def __len__(self):
        return len(self.rows)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int = 1
    activation: str = "relu"
    output_activation: str = "identity"
    dropout_p: float = 0.0
    layer_norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("all layer widths must be >= 1")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.output_activation not in ("identity", "sigmoid"):
            raise ValueError(f"unsupported output activation {self.output_activation!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")


class Mlp:
    """Feed-forward network ``x -> [linear -> (layer norm) -> relu -> (dropout)]* -> linear``.

    Parameters are kept in ``self.params`` as a flat list in layer order:
    ``W, b`` per layer, with ``gain, shift`` after ``W, b`` for hidden layers
    when layer normalisation is enabled.
    """

    def __init__(self, spec: MlpSpec, seed: int | None = 0, params=None):
        self.spec = spec
        self.rng = np.random.default_rng(seed)
        self.training = False
        params = params if params is not None else self._init_params()
        # parameters live as views into one flat buffer so optimisers work on a single vector
        self.flat = np.concatenate([np.asarray(p, dtype=float).ravel() for p in params])
        self.params = []
        offset = 0
        for p in params:
            size = np.size(p)
            self.params.append(self.flat[offset:offset + size].reshape(np.shape(p)))
            offset += size
        self._layout = self._make_layout()

    def _make_layout(self):
        layout = []
        i = 0
        for _ in self.spec.hidden_dims:
            if self.spec.layer_norm:
                layout.append((i, i + 1, i + 2, i + 3))
                i += 4
            else:
                layout.append((i, i + 1, None, None))
                i += 2
        layout.append((i, i + 1, None, None))
        return layout

    def _init_params(self):
        dims = [self.spec.input_dim, *self.spec.hidden_dims, self.spec.output_dim]
        params = []
        for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = k == len(dims) - 2
            # He-uniform for relu layers, Xavier-uniform for the output layer
            limit = math.sqrt(6.0 / (fan_in + fan_out)) if last else math.sqrt(6.0 / fan_in)
            params.append(self.rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            params.append(np.zeros(fan_out))
            if not last and self.spec.layer_norm:
                params.append(np.ones(fan_out))
                params.append(np.zeros(fan_out))
        return params

    @property
    def n_params(self) -> int:
        return len(self.params)

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def __call__(self, x) -> np.ndarray:
        """Plain numpy forward pass (no tape). Dropout applies in train mode."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[-1] != self.spec.input_dim:
            raise ValueError(f"expected input dim {self.spec.input_dim}, got {h.shape[-1]}")
        p = self.params
        for iw, ib, ig, ibeta in self._layout[:-1]:
            h = h @ p[iw] + p[ib]
            if ig is not None:
                inv_n = 1.0 / h.shape[-1]
                hc = h - h.sum(axis=-1, keepdims=True) * inv_n
                h = hc / np.sqrt((hc * hc).sum(axis=-1, keepdims=True) * inv_n + 1e-5) * p[ig] + p[ibeta]
            h = np.maximum(h, 0.0)
            if self.training and self.spec.dropout_p > 0:
                h = h * self._dropout_mask(h.shape)
        iw, ib, _, _ = self._layout[-1]
        h = h @ p[iw] + p[ib]
        if self.spec.output_activation == "sigmoid":
            h = ad._sigmoid(h)
        return h[0] if single else h

    def _dropout_mask(self, shape):
        keep = 1.0 - self.spec.dropout_p
        return (self.rng.random(shape) < keep) / keep

    def forward(self, x, tape: ad.Tape | None = None, trainable: bool = True):
        """Forward pass recorded on ``tape``.

        ``x`` may be an array or a :class:`~quadhedge.autodiff.Node`. With
        ``trainable=False`` the parameters enter as constants, so gradients
        flow to the input only.
        """
        if tape is None:
            if isinstance(x, ad.Node):
                raise ValueError("a tape is required for node inputs")
            return self(x)
        h = x if isinstance(x, ad.Node) else tape.constant(x)
        if h.shape[-1] != self.spec.input_dim:
            raise ValueError(f"expected input dim {self.spec.input_dim}, got {h.shape[-1]}")
        if trainable:
            p = [tape.param(self, i, v) for i, v in enumerate(self.params)]
        else:
            p = [ad.Node(v) for v in self.params]
        with ad.recording(tape):
            for iw, ib, ig, ibeta in self._layout[:-1]:
                h = ad.linear(h, p[iw], p[ib])
                if ig is not None:
                    h = ad.layer_norm(h, p[ig], p[ibeta])
                h = ad.relu(h)
                if self.training and self.spec.dropout_p > 0:
                    h = ad.scale_by(h, self._dropout_mask(h.shape))
            iw, ib, _, _ = self._layout[-1]
            h = ad.linear(h, p[iw], p[ib])
            if self.spec.output_activation == "sigmoid":
                h = ad.sigmoid(h)
        return h

    def gradients(self, grads: ad.Gradients) -> list[np.ndarray]:
        out = grads.for_owner(self, self.n_params)
        return [np.zeros_like(v) if g is None else g for v, g in zip(self.params, out)]

    def copy(self) -> "Mlp":
        clone = Mlp(self.spec, params=[v.copy() for v in self.params])
        clone.rng.bit_generator.state = self.rng.bit_generator.state
        clone.training = self.training
        return clone

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.flat).all())


@dataclass
class AdamState:
    """ADAM hyper-parameters and moment accumulators (flat, in parameter order)."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))


class Adam:
    """Bias-corrected ADAM bound to one network's parameters."""

    def __init__(self, net: Mlp, lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 state: AdamState | None = None):
        self.net = net
        if state is None:
            state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                              m=np.zeros_like(net.flat), v=np.zeros_like(net.flat))
        if state.m.shape != net.flat.shape or state.v.shape != net.flat.shape:
            raise ValueError("ADAM state does not match the network")
        self.state = state

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = value

    def step(self, grads) -> None:
        adam_step(self.net, grads, self.state)


def flatten_grads(grads) -> np.ndarray:
    return np.concatenate([np.asarray(g, dtype=float).ravel() for g in grads])


def adam_step(net: Mlp, grads, state: AdamState) -> None:
    """In-place ADAM update. ``grads`` is a per-parameter list or a flat vector."""
    g = grads if isinstance(grads, np.ndarray) and grads.ndim == 1 else flatten_grads(grads)
    if g.shape != net.flat.shape:
        raise ValueError("gradient size does not match the network")
    if not np.isfinite(g).all():
        raise TrainingError("non-finite gradient passed to ADAM")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    m, v = state.m, state.v
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    step = (state.lr / (1.0 - b1**t)) * m / (np.sqrt(v / (1.0 - b2**t)) + state.eps)
    net.flat -= step
    if not np.isfinite(net.flat).all():
        raise TrainingError("non-finite parameters after ADAM step")


def soft_update(target: Mlp, online: Mlp, rho_smooth: float) -> Mlp:
    """``target <- rho_smooth * target + (1 - rho_smooth) * online`` in place."""
    if target.spec != online.spec:
        raise ValueError("soft_update requires identical network specs")
    if rho_smooth == 0.0:
        target.flat[...] = online.flat
    elif rho_smooth != 1.0:
        target.flat *= rho_smooth
        target.flat += (1.0 - rho_smooth) * online.flat
    return target


# -- checkpoints -------------------------------------------------------------

def net_to_dict(net: Mlp, adam: Adam | None = None) -> dict:
    out = {
        "spec": asdict(net.spec),
        "params": [p.tolist() for p in net.params],
        "rng_state": net.rng.bit_generator.state,
    }
    if adam is not None:
        s = adam.state
        out["adam"] = {
            "lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps,
            "step_count": s.step_count,
            "m": s.m.tolist(),
            "v": s.v.tolist(),
        }
    return out


def net_from_dict(data: dict) -> tuple[Mlp, AdamState | None]:
    spec_d = dict(data["spec"])
    spec_d["hidden_dims"] = tuple(spec_d["hidden_dims"])
    spec = MlpSpec(**spec_d)
    params = [np.array(p, dtype=float).reshape(s) for p, s in
              zip(data["params"], _param_shapes(spec))]
    net = Mlp(spec, params=params)
    net.rng.bit_generator.state = data["rng_state"]
    adam_state = None
    if "adam" in data:
        a = data["adam"]
        adam_state = AdamState(
            lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"],
            step_count=a["step_count"],
            m=np.array(a["m"], dtype=float),
            v=np.array(a["v"], dtype=float),
        )
    return net, adam_state


def _param_shapes(spec: MlpSpec):
    dims = [spec.input_dim, *spec.hidden_dims, spec.output_dim]
    shapes = []
    for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        shapes += [(a, b), (b,)]
        if k < len(dims) - 2 and spec.layer_norm:
            shapes += [(b,), (b,)]
    return shapes


def save_checkpoint(path, payload: dict, kind: str) -> None:
    """Write a versioned JSON checkpoint. ``payload`` holds the trainer's own fields."""
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "kind": kind, **payload}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path, kind: str | None = None) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    if kind is not None and doc.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind!r} checkpoint, found {doc.get('kind')!r}")
    return doc
