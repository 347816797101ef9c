"""Prognosis CNN with a linear outcome head and the collider-aware loss.

Trunk: 4 x (conv3x3 same -> ReLU -> maxpool 2x2) with 16 channels, flatten
(144 for 51x51 input), three dense+ReLU+dropout layers (144, 144, 12), and a
dense layer to N_k activations a_1..a_N.  The treatment indicator is appended
and an affine head gives

    y_hat = b0 + b_t * t + sum_j b_j * a_j

Modes
-----
causal     L = L_y + L_x + L_reg; a_1 tracks the collider x and a_2..a_N are
           pushed to be linearly unpredictive of x within each minibatch
biased     L = L_y (plain supervised fit)
calibrate  L = MSE(a_1, x) + MSE(a_2, z); used to size the measurement noise
           of the regression baselines
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import ols, streams

MODES = ("causal", "biased", "calibrate")
MIN_CAUSAL_BATCH = 8


class BatchSizeError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    conv_layers: int = 4
    conv_channels: int = 16
    fc_sizes: tuple[int, ...] = (144, 144, 12)
    head_width: int = 6
    dropout_p: float = 0.25
    input_size: int = 51
    mode: str = "causal"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "causal" and self.head_width < 2:
            raise ValueError("causal mode needs head_width >= 2")
        if self.mode == "calibrate" and self.head_width < 2:
            raise ValueError("calibrate mode needs head_width >= 2")
        if self.spatial_chain()[self.conv_layers - 1] < 3:
            raise ValueError(f"input_size {self.input_size} leaves a conv layer with fewer than 3x3 pixels")
        object.__setattr__(self, "fc_sizes", tuple(int(s) for s in self.fc_sizes))

    def spatial_chain(self) -> list[int]:
        sizes = [self.input_size]
        for _ in range(self.conv_layers):
            sizes.append(sizes[-1] // 2)
        return sizes

    def spatial_after_trunk(self) -> int:
        return self.spatial_chain()[-1]

    @property
    def flatten_dim(self) -> int:
        return self.conv_channels * self.spatial_after_trunk() ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fc_sizes"] = list(self.fc_sizes)
        return d


@dataclass
class ForwardOutput:
    y_hat: ad.Tensor
    activations: ad.Tensor
    head_coeffs: np.ndarray  # (b0, b_t, b_1..b_N)
    masks: list[np.ndarray] = field(default_factory=list)


@dataclass
class LossBreakdown:
    l_y: float
    l_x: float
    l_reg: float
    total: float
    tensor: ad.Tensor | None = None

    def row(self) -> dict[str, float]:
        return {"l_y": self.l_y, "l_x": self.l_x, "l_reg": self.l_reg, "total": self.total}


class CausalNet:
    def __init__(self, config: NetConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, ad.Tensor] = {}
        self._init(seed)

    # ------------------------------------------------------------ parameters
    def _init(self, seed: int) -> None:
        cfg = self.config
        bg = streams.philox(seed, streams.INIT)

        def he(shape, fan_in):
            w = streams.normals(bg, int(np.prod(shape))).reshape(shape) * np.sqrt(2.0 / fan_in)
            return ad.Tensor(w.astype(self.dtype), requires_grad=True)

        def zeros(n):
            return ad.Tensor(np.zeros(n, dtype=self.dtype), requires_grad=True)

        c_in = 1
        for i in range(cfg.conv_layers):
            self.params[f"conv{i}.w"] = he((cfg.conv_channels, c_in, 3, 3), c_in * 9)
            self.params[f"conv{i}.b"] = zeros(cfg.conv_channels)
            c_in = cfg.conv_channels
        n_in = cfg.flatten_dim
        for i, n_out in enumerate(cfg.fc_sizes):
            self.params[f"fc{i}.w"] = he((n_in, n_out), n_in)
            self.params[f"fc{i}.b"] = zeros(n_out)
            n_in = n_out
        self.params["act.w"] = he((n_in, cfg.head_width), n_in)
        self.params["act.b"] = zeros(cfg.head_width)
        self.params["head.w"] = he((cfg.head_width + 1, 1), cfg.head_width + 1)
        self.params["head.b"] = zeros(1)

    def parameters(self) -> list[ad.Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise ad.ShapeError(f"{k}: checkpoint shape {v.shape} vs model {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.dtype)

    def astype(self, dtype) -> "CausalNet":
        other = CausalNet.__new__(CausalNet)
        other.config = self.config
        other.dtype = np.dtype(dtype)
        other.params = {k: ad.Tensor(v.data.astype(dtype), requires_grad=True)
                        for k, v in self.params.items()}
        return other

    def head_coeffs(self) -> np.ndarray:
        w = self.params["head.w"].data[:, 0]
        # head.w rows: a_1..a_N, then t
        return np.concatenate([self.params["head.b"].data, w[-1:], w[:-1]]).astype(np.float64)

    def save(self, directory, stem: str = "model") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        ad.save_tensors(d / f"{stem}.ckpt", self.state_dict())
        (d / f"{stem}.json").write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory, stem: str = "model") -> "CausalNet":
        d = Path(directory)
        cfg = NetConfig(**json.loads((d / f"{stem}.json").read_text()))
        state = ad.load_tensors(d / f"{stem}.ckpt")
        net = cls(cfg, dtype=next(iter(state.values())).dtype)
        net.load_state_dict(state)
        return net

    # --------------------------------------------------------------- forward
    def forward(self, images, t, training: bool = False, rng: np.random.Generator | None = None,
                masks: list[np.ndarray] | None = None) -> ForwardOutput:
        """``images``: (m, S, S) or (m, 1, S, S) normalized crops; ``t``: (m,) in {0, 1}."""
        cfg = self.config
        x = np.asarray(images.data if isinstance(images, ad.Tensor) else images)
        if x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (cfg.input_size, cfg.input_size):
            raise ad.ShapeError(f"expected (m, 1, {cfg.input_size}, {cfg.input_size}) images, got {x.shape}")
        m = x.shape[0]
        if m < 1:
            raise ad.ShapeError("empty batch")
        tt = np.asarray(t, dtype=self.dtype).reshape(m, 1)
        h = ad.Tensor(x.astype(self.dtype, copy=False))
        p = self.params
        for i in range(cfg.conv_layers):
            # relu and max-pooling commute exactly; pooling first touches 4x fewer values
            h = ad.relu(ad.maxpool2x2(ad.conv2d_3x3(h, p[f"conv{i}.w"], p[f"conv{i}.b"])))
        h = ad.flatten(h)
        used: list[np.ndarray] = []
        for i in range(len(cfg.fc_sizes)):
            h = ad.relu(ad.dense(h, p[f"fc{i}.w"], p[f"fc{i}.b"]))
            if training and cfg.dropout_p > 0:
                mask = masks[i] if masks is not None else ad.dropout_mask(h.shape, cfg.dropout_p, rng, self.dtype)
                used.append(mask)
                h = ad.dropout(h, cfg.dropout_p, mask=mask)
        acts = ad.dense(h, p["act.w"], p["act.b"])
        y_hat = ad.dense(ad.concat([acts, ad.Tensor(tt)], axis=1), p["head.w"], p["head.b"])
        return ForwardOutput(ad.reshape(y_hat, (m,)), acts, self.head_coeffs(), used)

    __call__ = forward


def regression_loss(acts: ad.Tensor, x: np.ndarray, reg_fit: ols.OLSFit | None = None) -> ad.Tensor:
    """max(0, MSE(mean(x), x) - MSE(x_reg, x)) with x_reg the in-batch OLS of x on a_2..a_N.

    The OLS coefficients are refitted on every call and treated as constants
    for backpropagation; the gradient reaches a_2..a_N through x_reg only.
    Passing ``reg_fit`` pins the coefficients (finite-difference checks).
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    rest = ad.columns(acts, 1, acts.shape[1])
    f = reg_fit if reg_fit is not None else ols.fit(rest.data.astype(np.float64), x)
    x_reg = ad.affine_const(rest, f.slopes, f.intercept)
    baseline = float(np.mean((x - x.mean()) ** 2))
    gap = ad.sub(ad.Tensor(np.asarray(baseline, dtype=acts.dtype)), ad.mse(x_reg, x.astype(acts.dtype)))
    return ad.maximum0(gap)


def regression_fit(acts, x) -> ols.OLSFit:
    a = acts.data if isinstance(acts, ad.Tensor) else np.asarray(acts)
    return ols.fit(a[:, 1:].astype(np.float64), np.asarray(x, dtype=np.float64).reshape(-1))


def loss_total(out: ForwardOutput, y, x, mode: str, z=None,
               reg_fit: ols.OLSFit | None = None) -> LossBreakdown:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    acts = out.activations
    dt = acts.dtype
    m = acts.shape[0]
    x = np.asarray(x, dtype=dt).reshape(-1)
    if mode == "calibrate":
        if z is None:
            raise ValueError("calibrate mode needs z targets")
        lx = ad.mse(ad.reshape(ad.columns(acts, 0, 1), (m,)), x)
        lz = ad.mse(ad.reshape(ad.columns(acts, 1, 2), (m,)), np.asarray(z, dtype=dt).reshape(-1))
        total = ad.add(lx, lz)
        # the outcome slot carries the z-target loss in this mode
        return LossBreakdown(float(lz.data), float(lx.data), 0.0, float(lz.data) + float(lx.data), total)
    ly = ad.mse(out.y_hat, np.asarray(y, dtype=dt).reshape(-1))
    if mode == "biased":
        return LossBreakdown(float(ly.data), 0.0, 0.0, float(ly.data), ly)
    if m < MIN_CAUSAL_BATCH:
        raise BatchSizeError(f"causal loss needs a batch of at least {MIN_CAUSAL_BATCH}, got {m}")
    lx = ad.mse(ad.reshape(ad.columns(acts, 0, 1), (m,)), x)
    lreg = regression_loss(acts, x, reg_fit)
    total = ad.add(ad.add(ly, lx), lreg)
    parts = float(ly.data), float(lx.data), float(lreg.data)
    return LossBreakdown(*parts, parts[0] + parts[1] + parts[2], total)
