"""Gated-attention MIL network over a bag of patch embeddings.

Architecture, for a bag E of shape (N, D):

* compression: h_k = act(W1 e_k + b1), act is relu by default
* gate: g_k = tanh(Va h_k) * sigm(Ua h_k), elementwise
* two branch scores: raw_{k,m} = Wa_m . g_k, softmaxed over k per branch
* per-branch aggregate: h_slide_m = sum_k a_{k,m} h_k
* classifier: logit_m = Wc_m . h_slide_m + bc_m (or a single shared
  head Wc_0 applied to both aggregates), probs = softmax(logits)

Everything runs in float64; checkpoint files store float32. ``backward``
returns gradients that are exact differentials of the traced forward
computation, dropout masks included, which is what the finite-difference
tests check.

Hidden widths default to 512/256 but are plain config fields so tests
can shrink the model.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .datamodel import SlideBag
from .errors import CorruptionError, FileFormatError, ValidationError

CHECKPOINT_MAGIC = b"MILP"
CHECKPOINT_VERSION = 1

ACTIVATIONS = ("relu", "identity")
CLASSIFIER_MODES = ("per_class", "shared")

N_CLASSES = 2

# (name, fan-in selector) in serialization order
_TENSOR_NAMES = ("W1", "b1", "Ua", "Va", "Wa", "Wc", "bc")


@dataclass(frozen=True)
class MilConfig:
    dim_hidden: int = 512
    dim_attn: int = 256
    compress_activation: str = "relu"
    classifier_mode: str = "per_class"
    dropout: float = 0.1

    def __post_init__(self) -> None:
        if self.dim_hidden < 1 or self.dim_attn < 1:
            raise ValidationError("layer widths must be >= 1")
        if self.compress_activation not in ACTIVATIONS:
            raise ValidationError(f"compress_activation must be one of {ACTIVATIONS}")
        if self.classifier_mode not in CLASSIFIER_MODES:
            raise ValidationError(f"classifier_mode must be one of {CLASSIFIER_MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must be in [0, 1)")


@dataclass
class MilParams:
    """All trainable tensors. Shapes for input width D and config (H, A):

    W1 (H, D), b1 (H,), Ua (A, H), Va (A, H), Wa (2, A), Wc (2, H), bc (2,).
    """

    W1: np.ndarray
    b1: np.ndarray
    Ua: np.ndarray
    Va: np.ndarray
    Wa: np.ndarray
    Wc: np.ndarray
    bc: np.ndarray

    def tensors(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in _TENSOR_NAMES]

    def copy(self) -> "MilParams":
        return MilParams(*(t.copy() for t in self.tensors()))

    @property
    def dim_in(self) -> int:
        return int(self.W1.shape[1])

    @property
    def dim_hidden(self) -> int:
        return int(self.W1.shape[0])

    @property
    def dim_attn(self) -> int:
        return int(self.Ua.shape[0])

    def validate(self) -> None:
        h, a = self.dim_hidden, self.dim_attn
        expected = {
            "W1": (h, self.dim_in),
            "b1": (h,),
            "Ua": (a, h),
            "Va": (a, h),
            "Wa": (N_CLASSES, a),
            "Wc": (N_CLASSES, h),
            "bc": (N_CLASSES,),
        }
        for name, shape in expected.items():
            t = getattr(self, name)
            if t.shape != shape:
                raise ValidationError(f"parameter {name} has shape {t.shape}, expected {shape}")
            if not np.isfinite(t).all():
                raise ValidationError(f"parameter {name} contains non-finite entries")


# Gradients share the container; the distinction is semantic only.
MilGrads = MilParams


@dataclass
class ForwardTrace:
    """Every intermediate needed to backpropagate exactly."""

    E: np.ndarray  # (N, D) float64 input
    H_pre: np.ndarray  # (N, H) pre-activation
    H: np.ndarray  # (N, H) after activation and dropout
    T: np.ndarray  # (N, A) tanh branch
    S: np.ndarray  # (N, A) sigmoid branch
    G: np.ndarray  # (N, A) gated product after dropout
    raw: np.ndarray  # (N, 2) branch scores before softmax
    A: np.ndarray  # (N, 2) attention, columns sum to 1
    h_slide: np.ndarray  # (2, H)
    logits: np.ndarray  # (2,)
    probs: np.ndarray  # (2,)
    mask_h: Optional[np.ndarray] = None  # dropout mask on H, already scaled
    mask_g: Optional[np.ndarray] = None  # dropout mask on G, already scaled
    train_mode: bool = False


def init_params(D: int, seed: int, cfg: MilConfig = MilConfig()) -> MilParams:
    """Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) weights, zero biases."""
    if D < 1:
        raise ValidationError(f"input width must be >= 1, got {D}")
    h, a = cfg.dim_hidden, cfg.dim_attn
    rng = np.random.default_rng(seed)

    def uniform(shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        bound = np.sqrt(1.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return MilParams(
        W1=uniform((h, D), D),
        b1=np.zeros(h),
        Ua=uniform((a, h), h),
        Va=uniform((a, h), h),
        Wa=uniform((N_CLASSES, a), a),
        Wc=uniform((N_CLASSES, h), h),
        bc=np.zeros(N_CLASSES),
    )


def compress(E: np.ndarray, params: MilParams, cfg: MilConfig = MilConfig()) -> np.ndarray:
    """Per-patch compression to the hidden width."""
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.shape[1] != params.dim_in:
        raise ValidationError(
            f"embeddings have shape {E.shape}, expected (N, {params.dim_in})"
        )
    if not np.isfinite(E).all():
        raise ValidationError("embeddings contain non-finite entries")
    H_pre = E @ params.W1.T + params.b1
    if cfg.compress_activation == "relu":
        return np.maximum(H_pre, 0.0)
    return H_pre


def column_softmax(raw: np.ndarray) -> np.ndarray:
    """Softmax over axis 0, stabilized by subtracting each column's max."""
    shifted = raw - raw.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def attention_scores(H: np.ndarray, params: MilParams) -> np.ndarray:
    """Gated branch scores softmaxed over the bag, one column per class."""
    if H.ndim != 2 or H.shape[0] < 1:
        raise ValidationError("H must be a non-empty (N, hidden) matrix")
    T = np.tanh(H @ params.Va.T)
    S = _sigmoid(H @ params.Ua.T)
    raw = (T * S) @ params.Wa.T
    return column_softmax(raw)


def aggregate(H: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Attention-weighted sums of the compressed rows, one row per class."""
    if H.shape[0] != A.shape[0]:
        raise ValidationError(f"H has {H.shape[0]} rows but A has {A.shape[0]}")
    col_sums = A.sum(axis=0)
    if not np.allclose(col_sums, 1.0, atol=1e-6):
        raise ValidationError(f"attention columns must sum to 1, got {col_sums}")
    return A.T @ H


def classify(
    h_slide: np.ndarray, params: MilParams, cfg: MilConfig = MilConfig()
) -> tuple[np.ndarray, np.ndarray]:
    """Per-class logits from the per-class aggregates, then softmax."""
    if cfg.classifier_mode == "per_class":
        logits = np.einsum("mh,mh->m", params.Wc, h_slide) + params.bc
    else:
        logits = h_slide @ params.Wc[0] + params.bc
    shifted = logits - logits.max()
    e = np.exp(shifted)
    probs = e / e.sum()
    return logits, probs


def _dropout_masks(
    rng: np.random.Generator, shape_h: tuple[int, int], shape_g: tuple[int, int], rate: float
) -> tuple[np.ndarray, np.ndarray]:
    # Inverted dropout: masks carry the 1/(1-p) rescale so eval needs none.
    keep = 1.0 - rate
    mask_h = (rng.random(shape_h) >= rate) / keep
    mask_g = (rng.random(shape_g) >= rate) / keep
    return mask_h, mask_g


def forward(
    bag: SlideBag | np.ndarray,
    params: MilParams,
    cfg: MilConfig = MilConfig(),
    dropout_seed: Optional[int] = None,
) -> ForwardTrace:
    """Run the whole network on one bag.

    Train mode is selected by passing ``dropout_seed``; dropout is applied
    after compression and after the gated product, and the scaled masks
    are recorded so ``backward`` differentiates the exact traced function.
    """
    if isinstance(bag, SlideBag):
        bag.validate()
        E = bag.embeddings
    else:
        E = bag
    E = np.asarray(E, dtype=np.float64)
    train_mode = dropout_seed is not None

    if E.ndim != 2 or E.shape[0] < 1:
        raise ValidationError("bag must hold at least one embedding row")
    if E.shape[1] != params.dim_in:
        raise ValidationError(f"bag width {E.shape[1]} does not match model width {params.dim_in}")
    if not np.isfinite(E).all():
        raise ValidationError("embeddings contain non-finite entries")

    H_pre = E @ params.W1.T + params.b1
    Z = np.maximum(H_pre, 0.0) if cfg.compress_activation == "relu" else H_pre

    mask_h = mask_g = None
    if train_mode and cfg.dropout > 0.0:
        rng = np.random.default_rng(dropout_seed)
        mask_h, mask_g = _dropout_masks(
            rng, Z.shape, (Z.shape[0], params.dim_attn), cfg.dropout
        )
    H = Z * mask_h if mask_h is not None else Z

    T = np.tanh(H @ params.Va.T)
    S = _sigmoid(H @ params.Ua.T)
    G0 = T * S
    G = G0 * mask_g if mask_g is not None else G0

    raw = G @ params.Wa.T
    A = column_softmax(raw)
    h_slide = A.T @ H
    logits, probs = classify(h_slide, params, cfg)

    trace = ForwardTrace(
        E=E, H_pre=H_pre, H=H, T=T, S=S, G=G, raw=raw, A=A,
        h_slide=h_slide, logits=logits, probs=probs,
        mask_h=mask_h, mask_g=mask_g, train_mode=train_mode,
    )
    if not (np.isfinite(probs).all() and np.isfinite(A).all()):
        raise ValidationError("forward pass produced non-finite values")
    return trace


def backward(
    trace: ForwardTrace,
    params: MilParams,
    true_label: int,
    cfg: MilConfig = MilConfig(),
) -> tuple[float, MilGrads]:
    """Cross-entropy loss and exact gradients for the traced computation."""
    if true_label not in (0, 1):
        raise ValidationError(f"true_label must be 0 or 1, got {true_label}")
    n = trace.E.shape[0]
    if trace.H.shape[0] != n or trace.A.shape[0] != n:
        raise ValidationError("trace is inconsistent with its bag")

    probs = trace.probs
    loss = -float(np.log(probs[true_label]))

    dlogits = probs.copy()
    dlogits[true_label] -= 1.0

    dbc = dlogits.copy()
    if cfg.classifier_mode == "per_class":
        dWc = dlogits[:, None] * trace.h_slide
        dh_slide = dlogits[:, None] * params.Wc
    else:
        dWc = np.zeros_like(params.Wc)
        dWc[0] = dlogits @ trace.h_slide
        dh_slide = dlogits[:, None] * params.Wc[0][None, :]

    # h_slide = A.T @ H: gradient splits into the attention path and a
    # direct path into H.
    dA = trace.H @ dh_slide.T  # (N, 2)
    dH = trace.A @ dh_slide  # (N, hidden)

    # Per-column softmax Jacobian.
    inner = np.sum(trace.A * dA, axis=0, keepdims=True)
    draw = trace.A * (dA - inner)  # (N, 2)

    dWa = draw.T @ trace.G
    dG = draw @ params.Wa  # (N, attn)
    dG0 = dG * trace.mask_g if trace.mask_g is not None else dG

    dT = dG0 * trace.S
    dS = dG0 * trace.T
    dpre_v = dT * (1.0 - trace.T**2)  # through tanh
    dpre_u = dS * trace.S * (1.0 - trace.S)  # through sigmoid

    dVa = dpre_v.T @ trace.H
    dUa = dpre_u.T @ trace.H
    dH += dpre_v @ params.Va + dpre_u @ params.Ua

    dZ = dH * trace.mask_h if trace.mask_h is not None else dH
    if cfg.compress_activation == "relu":
        dH_pre = dZ * (trace.H_pre > 0.0)
    else:
        dH_pre = dZ

    dW1 = dH_pre.T @ trace.E
    db1 = dH_pre.sum(axis=0)

    grads = MilGrads(W1=dW1, b1=db1, Ua=dUa, Va=dVa, Wa=dWa, Wc=dWc, bc=dbc)
    return loss, grads


def predict_proba(
    bag: SlideBag | np.ndarray, params: MilParams, cfg: MilConfig = MilConfig()
) -> np.ndarray:
    """Eval-mode class probabilities for one bag."""
    return forward(bag, params, cfg).probs


def save_checkpoint(path: str | Path, params: MilParams, cfg: MilConfig = MilConfig()) -> None:
    """Binary tensor file plus a JSON sidecar describing the architecture.

    Layout: magic, u32 version, u32 D, then each tensor in declaration
    order as u32 ndim, u32 dims, float32 little-endian data.
    """
    params.validate()
    path = Path(path)
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, params.dim_in)]
    for t in params.tensors():
        parts.append(struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))
    sidecar = {
        "compress_activation": cfg.compress_activation,
        "classifier_mode": cfg.classifier_mode,
        "dim_hidden": cfg.dim_hidden,
        "dim_attn": cfg.dim_attn,
        "dropout": cfg.dropout,
    }
    with open(path.with_suffix(path.suffix + ".json"), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(path: str | Path) -> tuple[MilParams, MilConfig]:
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise FileFormatError(f"{path.name}: not a parameter checkpoint")
    version, _dim_in = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FileFormatError(f"{path.name}: unsupported checkpoint version {version}")
    offset = 12
    tensors = []
    for name in _TENSOR_NAMES:
        if offset + 4 > len(data):
            raise CorruptionError(f"{path.name}: truncated before tensor {name}")
        (ndim,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if ndim > 2 or offset + 4 * ndim > len(data):
            raise CorruptionError(f"{path.name}: bad dimension record for tensor {name}")
        dims = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        count = int(np.prod(dims)) if ndim else 1
        end = offset + 4 * count
        if end > len(data):
            raise CorruptionError(f"{path.name}: truncated data for tensor {name}")
        t = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(dims)
        tensors.append(t.astype(np.float64))
        offset = end

    sidecar_path = path.with_suffix(path.suffix + ".json")
    if sidecar_path.is_file():
        with open(sidecar_path, encoding="utf-8") as f:
            meta = json.load(f)
        cfg = MilConfig(
            dim_hidden=int(meta["dim_hidden"]),
            dim_attn=int(meta["dim_attn"]),
            compress_activation=str(meta["compress_activation"]),
            classifier_mode=str(meta["classifier_mode"]),
            dropout=float(meta["dropout"]),
        )
    else:
        cfg = MilConfig(dim_hidden=int(tensors[0].shape[0]), dim_attn=int(tensors[2].shape[0]))
    params = MilParams(*tensors)
    params.validate()
    return params, cfg


def with_dropout(cfg: MilConfig, rate: float) -> MilConfig:
    return replace(cfg, dropout=rate)
