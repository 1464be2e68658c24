"""Prediction network: per-region pattern graph convolution, temporal
self-attention over the input window, inter-region graph convolution, and a
sigmoid classifier, trained with focal loss.

Two call styles are provided.  The single-instance functions
(:func:`pattern_gcn`, :func:`temporal_attention`, ...) mirror the math one
region/pattern at a time and are the reference surface for tests.  The
batched builder (:func:`batched_forward`) stacks all (pattern, region,
window) triples onto one tape so a training step runs as a handful of large
matrix products; both styles share the same tape ops and parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .autodiff import Node, Parameter, ShapeError, Tape
from .data import read_container, write_container


@dataclass(frozen=True)
class ModelConfig:
    n_patterns: int
    n_regions: int
    n_antibiotics: int
    window: int
    d1: int = 16
    d_qk: int = 16      # query/key width across heads
    d2: int = 16        # value width across heads (residual requires d2 == d1)
    d3: int = 256
    d4: int = 64
    d5: int = 16
    gcn_hidden: int = 16
    heads: int = 4

    def __post_init__(self):
        if self.d2 != self.d1:
            raise ValueError("residual connection requires d2 == d1")
        if self.d_qk % self.heads or self.d2 % self.heads:
            raise ValueError("d_qk and d2 must be divisible by the head count")
        if min(self.n_patterns, self.n_regions, self.n_antibiotics, self.window) < 1:
            raise ValueError("data dimensions must be positive")


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Parameter]:
    """Seeded parameter set; weights uniform in +-1/sqrt(fan_in).

    Layernorm starts at identity and the classifier weight at zero, so the
    first predictions sit at 0.5.
    """
    rng = np.random.default_rng(seed)

    def uniform(name, fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return Parameter(name, rng.uniform(-bound, bound, size=shape))

    params: dict[str, Parameter] = {}

    def put(p):
        params[p.name] = p

    put(uniform("pattern_gcn.w1", cfg.n_antibiotics + 1,
                (cfg.n_antibiotics + 1, cfg.gcn_hidden)))
    put(uniform("pattern_gcn.w2", cfg.gcn_hidden, (cfg.gcn_hidden, cfg.d1)))
    dh_qk = cfg.d_qk // cfg.heads
    dh_v = cfg.d2 // cfg.heads
    for i in range(cfg.heads):
        put(uniform(f"attn.h{i}.wq", cfg.d1, (cfg.d1, dh_qk)))
        put(uniform(f"attn.h{i}.wk", cfg.d1, (cfg.d1, dh_qk)))
        put(uniform(f"attn.h{i}.wv", cfg.d1, (cfg.d1, dh_v)))
    put(uniform("attn.wo", cfg.d2, (cfg.d2, cfg.d2)))
    put(Parameter("attn.ln_gamma", np.ones(cfg.d2)))
    put(Parameter("attn.ln_beta", np.zeros(cfg.d2)))
    put(uniform("ffn.w1", cfg.window * cfg.d2, (cfg.window * cfg.d2, cfg.d3)))
    put(uniform("ffn.w2", cfg.d3, (cfg.d3, cfg.d4)))
    put(uniform("spatial_gcn.w1", cfg.d4, (cfg.d4, cfg.gcn_hidden)))
    put(uniform("spatial_gcn.w2", cfg.gcn_hidden, (cfg.gcn_hidden, cfg.d5)))
    put(Parameter("classifier.w", np.zeros((cfg.d5, 1))))
    return params


def positional_encoding(length: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal encodings over window positions 0..length-1."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * (i // 2) / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angles[:, 0::2])
    pe[:, 1::2] = np.cos(angles[:, 1::2])
    return pe


def normalized_adjacency(adjacency: np.ndarray) -> np.ndarray:
    """Symmetric degree normalization D^-1/2 (A or A+I) D^-1/2.

    Self-loops are added only when the adjacency carries an all-zero
    diagonal; a zero-degree node after augmentation is an error.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"adjacency must be square, got {a.shape}")
    if np.all(np.diag(a) == 0.0):
        a = a + np.eye(a.shape[0])
    deg = a.sum(axis=1)
    if np.any(deg <= 0.0):
        raise ValueError("isolated node with zero degree after augmentation")
    dinv = 1.0 / np.sqrt(deg)
    return a * dinv[:, None] * dinv[None, :]


# ---------------------------------------------------------------------------
# single-instance reference surface (plain arrays in, plain arrays out)
# ---------------------------------------------------------------------------


def gcn_layer(h: np.ndarray, adjacency: np.ndarray, w: np.ndarray,
              activate: bool) -> np.ndarray:
    """One graph convolution: optional ReLU of (normalized A) H W."""
    h = np.asarray(h, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if h.shape[-1] != w.shape[0]:
        raise ShapeError(f"gcn_layer: H {h.shape} @ W {w.shape}")
    s = normalized_adjacency(adjacency)
    if s.shape[0] != h.shape[-2]:
        raise ShapeError(f"gcn_layer: A {s.shape} vs H {h.shape}")
    out = s @ (h @ w)
    return np.maximum(out, 0.0) if activate else out


def pattern_gcn(x: np.ndarray, adjacency: np.ndarray,
                params: Mapping[str, Parameter]) -> np.ndarray:
    """Two-layer pattern graph convolution (ReLU then linear): (N, M+1) -> (N, d1)."""
    h = gcn_layer(x, adjacency, params["pattern_gcn.w1"].value, True)
    return gcn_layer(h, adjacency, params["pattern_gcn.w2"].value, False)


def spatial_gcn(e: np.ndarray, adjacency: np.ndarray,
                params: Mapping[str, Parameter]) -> np.ndarray:
    """Two-layer inter-region graph convolution: (K, d4) -> (K, d5)."""
    h = gcn_layer(e, adjacency, params["spatial_gcn.w1"].value, True)
    return gcn_layer(h, adjacency, params["spatial_gcn.w2"].value, False)


def temporal_attention(z: np.ndarray, params: Mapping[str, Parameter],
                       cfg: ModelConfig) -> np.ndarray:
    """Reference single-sequence path: (T, d1) -> (d4,)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (cfg.window, cfg.d1):
        raise ShapeError(f"expected ({cfg.window}, {cfg.d1}) input, got {z.shape}")
    tape = Tape()
    pnode = {name: tape.param(p) for name, p in params.items()}
    out = attention_stack(tape, tape.const(z[None, :, :]), pnode, cfg)
    return out.value[0]


def classify(h: np.ndarray, params: Mapping[str, Parameter]) -> float:
    """Sigmoid of the final embedding's dot product with the classifier weight."""
    logit = float(np.asarray(h, dtype=np.float64) @ params["classifier.w"].value[:, 0])
    return float(1.0 / (1.0 + np.exp(-logit)))


def focal_loss(yhat: np.ndarray, y: np.ndarray, lam: float, gamma: float,
               clamp: float = 1e-7) -> float:
    """Mean focal loss, the plain-numpy twin of the tape op."""
    p = np.clip(np.asarray(yhat, dtype=np.float64), clamp, 1.0 - clamp)
    yv = np.asarray(y, dtype=np.float64)
    terms = -lam * yv * (1.0 - p) ** gamma * np.log(p) - (1.0 - lam) * (
        1.0 - yv
    ) * p ** gamma * np.log1p(-p)
    return float(terms.mean())


# ---------------------------------------------------------------------------
# batched forward
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GraphInputs:
    """Constant per-run tensors: normalized adjacencies and base encodings."""

    pattern_norm: tuple            # per region, csr (N, N)
    region_norm: np.ndarray        # (K, K)
    base_enc: np.ndarray           # (N, M) signed one-hots

    @classmethod
    def build(cls, pattern_adjs: Sequence[np.ndarray], region_adj: np.ndarray,
              base_enc: np.ndarray) -> "GraphInputs":
        norm = tuple(sp.csr_matrix(normalized_adjacency(a)) for a in pattern_adjs)
        return cls(norm, normalized_adjacency(region_adj), np.asarray(base_enc, float))


def _encode_years(base_enc: np.ndarray, presence: np.ndarray) -> np.ndarray:
    """(Ty, N, M+1) encodings from (Ty, N) presence bits."""
    ty, n = presence.shape
    x = np.empty((ty, n, base_enc.shape[1] + 1))
    x[:, :, :-1] = base_enc[None, :, :]
    x[:, :, -1] = presence
    return x


def attention_stack(tape: Tape, z: Node, pnode: Mapping[str, Node],
                    cfg: ModelConfig) -> Node:
    """Temporal attention + FFN over batched (B, T, d1) sequences -> (B, d4).

    Pipeline: sinusoidal positions, per-head scaled dot-product attention,
    head concat + output mix, residual from the post-position input, row
    layernorm, flatten to T*d2, two-layer FFN with ReLU.
    """
    b, t, d1 = z.value.shape
    if t != cfg.window or d1 != cfg.d1:
        raise ShapeError(
            f"attention input {z.value.shape} vs window={cfg.window}, d1={cfg.d1}"
        )
    zt = tape.add(z, tape.const(positional_encoding(t, d1)))
    dh = cfg.d_qk // cfg.heads
    heads = []
    for i in range(cfg.heads):
        q = tape.matmul(zt, pnode[f"attn.h{i}.wq"])
        k = tape.matmul(zt, pnode[f"attn.h{i}.wk"])
        v = tape.matmul(zt, pnode[f"attn.h{i}.wv"])
        scores = tape.scale(tape.matmul(q, k, transpose_b=True), 1.0 / np.sqrt(dh))
        heads.append(tape.matmul(tape.softmax_rows(scores), v))
    cat = heads[0] if len(heads) == 1 else tape.concat_last_axis(heads)
    mixed = tape.matmul(cat, pnode["attn.wo"])
    res = tape.add(mixed, zt)
    normed = tape.layernorm_rows(res, pnode["attn.ln_gamma"], pnode["attn.ln_beta"])
    flat = tape.reshape(normed, (b, t * cfg.d2))
    hidden = tape.relu(tape.matmul(flat, pnode["ffn.w1"]))
    return tape.matmul(hidden, pnode["ffn.w2"])


def batched_forward(
    tape: Tape,
    presence_by_region: np.ndarray,
    window_starts: Sequence[int],
    graphs: GraphInputs,
    params: Mapping[str, Parameter],
    cfg: ModelConfig,
) -> Node:
    """Predicted probabilities for every (window, pattern, region).

    ``presence_by_region`` is (K, Ty, N) presence bits covering every year
    any window touches; window w reads rows [start_w, start_w + T).
    Returns a node of shape (W, N, K) with values in (0, 1).
    """
    k_regions, _, n = presence_by_region.shape
    t = cfg.window
    w = len(window_starts)
    if k_regions != cfg.n_regions or n != cfg.n_patterns:
        raise ShapeError(
            f"presence {presence_by_region.shape} vs config K={cfg.n_regions}, "
            f"N={cfg.n_patterns}"
        )
    pnode = {name: tape.param(p) for name, p in params.items()}

    seqs = []
    for k in range(k_regions):
        x = tape.const(_encode_years(graphs.base_enc, presence_by_region[k]))
        h1 = tape.relu(tape.spmm(graphs.pattern_norm[k],
                                 tape.matmul(x, pnode["pattern_gcn.w1"])))
        zk = tape.spmm(graphs.pattern_norm[k], tape.matmul(h1, pnode["pattern_gcn.w2"]))
        for s in window_starts:
            zw = tape.slice_rows(zk, s, s + t)
            seqs.append(tape.transpose_axes(zw, (1, 0, 2)))  # (N, T, d1)
    big = tape.stack(seqs)                                   # (K*W, N, T, d1)
    flat = tape.reshape(big, (k_regions * w * n, t, cfg.d1))

    e = attention_stack(tape, flat, pnode, cfg)              # (B, d4)
    e = tape.reshape(e, (k_regions, w, n, cfg.d4))
    e = tape.transpose_axes(e, (1, 2, 0, 3))                 # (W, N, K, d4)
    e = tape.reshape(e, (w * n, k_regions, cfg.d4))

    s_reg = tape.const(graphs.region_norm)
    sp1 = tape.relu(tape.matmul(s_reg, tape.matmul(e, pnode["spatial_gcn.w1"])))
    sp2 = tape.matmul(s_reg, tape.matmul(sp1, pnode["spatial_gcn.w2"]))

    logits = tape.matmul(tape.reshape(sp2, (w * n * k_regions, cfg.d5)),
                         pnode["classifier.w"])
    yhat = tape.sigmoid(logits)
    return tape.reshape(yhat, (w, n, k_regions))


def forward_window(
    window_presence: np.ndarray,
    graphs: GraphInputs,
    params: Mapping[str, Parameter],
    cfg: ModelConfig,
    dtype=np.float64,
) -> np.ndarray:
    """Probabilities for one window: (K, T, N) presence bits -> (K, N)."""
    q = np.asarray(window_presence)
    if q.ndim != 3 or q.shape[1] != cfg.window:
        raise ShapeError(f"window presence must be (K, T, N), got {q.shape}")
    tape = Tape(dtype=dtype)
    out = batched_forward(tape, q, [0], graphs, params, cfg)
    return out.value[0].T.astype(np.float64)  # (K, N)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"ABGCKPT1"
_CKPT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, Parameter], cfg: ModelConfig) -> None:
    names = sorted(params)
    header = {
        "version": _CKPT_VERSION,
        "config": asdict(cfg),
        "params": [{"name": n, "shape": list(params[n].value.shape)} for n in names],
    }
    write_container(path, _CKPT_MAGIC, header,
                    [params[n].value.astype(np.float64) for n in names])


def load_checkpoint(path) -> tuple[dict[str, Parameter], ModelConfig]:
    def specs(header):
        if header.get("version") != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        return [(tuple(p["shape"]), np.float64) for p in header["params"]]

    header, arrays = read_container(path, _CKPT_MAGIC, specs)
    cfg = ModelConfig(**header["config"])
    params = {
        meta["name"]: Parameter(meta["name"], arr)
        for meta, arr in zip(header["params"], arrays)
    }
    return params, cfg
