"""Sliding-window dataset assembly and the Adam training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Parameter, Tape
from .data import PresenceTensor
from .model import GraphInputs, ModelConfig, batched_forward, forward_window, init_params

logger = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class Window:
    input_years: tuple[int, ...]
    target_year: int
    input_start: int   # index of the first input year in the years list
    target_index: int


@dataclass(frozen=True)
class WindowSet:
    train: tuple[Window, ...]
    test: tuple[Window, ...]


def make_windows(years: Sequence[int], window: int, train_end_year: int) -> WindowSet:
    """Every contiguous window of ``window`` input years plus a target year.

    Windows whose target year is <= train_end_year are training windows;
    later targets are test windows (their inputs may overlap the training
    period).
    """
    years = tuple(years)
    if len(years) < window + 1:
        raise ValueError(
            f"need at least {window + 1} years of data, got {len(years)}"
        )
    train, test = [], []
    for s in range(len(years) - window):
        w = Window(
            input_years=years[s:s + window],
            target_year=years[s + window],
            input_start=s,
            target_index=s + window,
        )
        (train if w.target_year <= train_end_year else test).append(w)
    return WindowSet(train=tuple(train), test=tuple(test))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    max_iters: int = 500
    lam: float = 0.7
    gamma: float = 2.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_windows: int | None = None  # None = all windows per step
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0.0 < self.lam < 1.0:
            raise ValueError("lam must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


@dataclass
class TrainResult:
    params: dict[str, Parameter]
    loss_curve: list[float]
    model_cfg: ModelConfig
    train_cfg: TrainConfig


class Adam:
    def __init__(self, params: Sequence[Parameter], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p.value -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def train(
    presence: PresenceTensor,
    graphs: GraphInputs,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    windows: WindowSet,
) -> TrainResult:
    """Full-batch Adam on focal loss over all training windows.

    The forward pass only ever reads presence rows that training windows
    touch, so test years cannot leak in.  Deterministic for a fixed seed.
    """
    if not windows.train:
        raise ValueError("no training windows")
    t = model_cfg.window
    last_needed = max(w.input_start for w in windows.train) + t
    q_train = presence.q[:, :last_needed, :].astype(np.float64)
    starts = [w.input_start for w in windows.train]
    targets = np.stack(
        [presence.q[:, w.target_index, :].T for w in windows.train]
    ).astype(np.float64)  # (W, N, K)

    params = init_params(model_cfg, seed=train_cfg.seed)
    opt = Adam(list(params.values()), train_cfg)
    dtype = np.float32 if train_cfg.dtype == "float32" else np.float64
    n_win = len(starts)
    per_step = train_cfg.batch_windows or n_win
    per_step = min(per_step, n_win)
    loss_curve: list[float] = []
    for it in range(train_cfg.max_iters):
        if per_step == n_win:
            sel = range(n_win)
        else:
            first = (it * per_step) % n_win
            sel = [(first + j) % n_win for j in range(per_step)]
        for p in params.values():
            p.zero_grad()
        tape = Tape(dtype=dtype)
        yhat = batched_forward(tape, q_train, [starts[j] for j in sel],
                               graphs, params, model_cfg)
        loss = tape.focal_loss_mean(yhat, targets[list(sel)],
                                    train_cfg.lam, train_cfg.gamma)
        value = float(loss.value)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss {value} at iteration {it}")
        loss_curve.append(value)
        if train_cfg.lr > 0.0:
            tape.backward(loss)
            opt.step()
    return TrainResult(params=params, loss_curve=loss_curve,
                       model_cfg=model_cfg, train_cfg=train_cfg)


def predict(
    params: Mapping[str, Parameter],
    model_cfg: ModelConfig,
    presence: PresenceTensor,
    window: Window,
    graphs: GraphInputs,
    dtype=np.float64,
) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities and thresholded presence calls for one window.

    Returns (probs, preds), both (K, N); a pattern is called present only
    when its probability strictly exceeds 0.5.
    """
    q = presence.q[:, window.input_start:window.input_start + model_cfg.window, :]
    probs = forward_window(q.astype(np.float64), graphs, params, model_cfg, dtype=dtype)
    return probs, probs > 0.5
