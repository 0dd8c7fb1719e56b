"""Small CNN trunk, classification heads, class activation maps and losses.

Everything is plain numpy with hand-written gradients so the whole training
stack stays dependency-free and finite-difference checkable. The trunk is
three 3x3 stride-2 conv+ReLU blocks, giving an overall spatial stride of 8
(a 64x64 input yields an 8x8xD feature map).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

PROB_EPS = 1e-7  # clamp inside cross-entropy terms
STRIDE = 8  # fixed trunk stride: three stride-2 blocks


class TrainingDiverged(RuntimeError):
    """Raised when a gradient or loss turns non-finite."""


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    channels: tuple[int, int, int] = (8, 16, 32)
    num_classes: int = 6
    dtype: str = "float32"

    def __post_init__(self):
        if self.input_size <= 0 or self.input_size % STRIDE != 0:
            raise ValueError(f"input_size must be a positive multiple of {STRIDE}")
        if len(self.channels) != 3 or any(c <= 0 for c in self.channels):
            raise ValueError("channels must be three positive widths")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]

    @property
    def heatmap_size(self) -> int:
        return self.input_size // STRIDE

    def num_params(self) -> int:
        total, cin = 0, 1
        for cout in self.channels:
            total += cout * cin * 9 + cout
            cin = cout
        return total


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    lr_decay_every: int = 10  # divide lr by 10 every this many epochs
    reg_weight: float = 0.005  # weight of the heatmap-regression term
    seed_threshold: float = 0.8  # probability cutoff for confidence-harvested seeds
    batch_size: int = 32
    baseline_epochs: int = 12
    stage_epochs: tuple[int, int, int] = (5, 5, 10)
    refine_epochs: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be non-negative")
        if not 0.0 < self.seed_threshold < 1.0:
            raise ValueError("seed_threshold must lie in (0, 1)")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * 10.0 ** (-(epoch // self.lr_decay_every))


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------

def init_trunk(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-initialized conv stack; biases start at zero."""
    dt = np.dtype(config.dtype)
    params, cin = {}, 1
    for i, cout in enumerate(config.channels, start=1):
        fan_in = cin * 9
        params[f"conv{i}_w"] = (rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / fan_in)).astype(dt)
        params[f"conv{i}_b"] = np.zeros(cout, dtype=dt)
        cin = cout
    return params


def init_multilabel_head(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    dt = np.dtype(config.dtype)
    return {
        "w": (rng.standard_normal((config.num_classes, config.feature_channels)) * 0.01).astype(dt),
        "b": np.zeros(config.num_classes, dtype=dt),
    }


def init_binary_head(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    dt = np.dtype(config.dtype)
    return {
        "w": (rng.standard_normal((2, config.feature_channels)) * 0.01).astype(dt),
        "b": np.zeros(2, dtype=dt),
    }


# ---------------------------------------------------------------------------
# convolution plumbing (im2col)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """(N,C,H,W) -> (N*Ho*Wo, C*9) patch matrix for a 3x3 kernel."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - 3) // stride + 1
    wo = (w + 2 * pad - 3) // stride + 1
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ho, wo, c, 3, 3),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return view.reshape(n * ho * wo, c * 9), ho, wo


def _col2im(dcols: np.ndarray, xshape: tuple, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = xshape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d6 = dcols.reshape(n, ho, wo, c, 3, 3).transpose(0, 3, 4, 5, 1, 2)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d6[:, :, i, j]
    return dxp[:, :, pad : pad + h, pad : pad + w]


def _conv_forward(x, w, b, stride=2, pad=1):
    n = x.shape[0]
    cols, ho, wo = _im2col(x, stride, pad)
    wmat = w.reshape(w.shape[0], -1)
    out = cols @ wmat.T + b
    out = out.reshape(n, ho, wo, w.shape[0]).transpose(0, 3, 1, 2)
    return out, (cols, x.shape, ho, wo)


def _conv_backward(dout, w, cache, stride=2, pad=1):
    cols, xshape, ho, wo = cache
    n, cout = dout.shape[0], dout.shape[1]
    dout2 = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    wmat = w.reshape(cout, -1)
    dw = (dout2.T @ cols).reshape(w.shape)
    db = dout2.sum(axis=0)
    dcols = dout2 @ wmat
    dx = _col2im(dcols, xshape, stride, pad, ho, wo)
    return dx, dw, db


# ---------------------------------------------------------------------------
# trunk forward / backward
# ---------------------------------------------------------------------------

def _as_batch(pixels: np.ndarray, input_size: int, dtype) -> tuple[np.ndarray, bool]:
    x = np.asarray(pixels, dtype=dtype)
    single = x.ndim == 2
    if single:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    elif x.ndim != 4:
        raise ValueError(f"expected 2-D, 3-D or 4-D pixels, got shape {x.shape}")
    if x.shape[-2:] != (input_size, input_size) or x.shape[1] != 1:
        raise ValueError(
            f"pixel shape {x.shape} does not match configured input size {input_size}"
        )
    return x, single


def _trunk_forward(params: dict, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Returns the feature map as (N, X, Y, D) plus caches for backprop."""
    caches = []
    h = x
    n_blocks = len(params) // 2
    for i in range(1, n_blocks + 1):
        h, cache = _conv_forward(h, params[f"conv{i}_w"], params[f"conv{i}_b"])
        mask = h > 0
        h = h * mask
        caches.append((cache, mask))
    return h.transpose(0, 2, 3, 1), caches


def _trunk_backward(params: dict, caches: list, dfm: np.ndarray) -> dict[str, np.ndarray]:
    grads = {}
    dh = dfm.transpose(0, 3, 1, 2)
    for i in range(len(caches), 0, -1):
        cache, mask = caches[i - 1]
        dh = dh * mask
        dh, dw, db = _conv_backward(dh, params[f"conv{i}_w"], cache)
        grads[f"conv{i}_w"] = dw
        grads[f"conv{i}_b"] = db
    return grads


def forward_features(params: dict, pixels: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Feature map of the conv trunk: (X, Y, D) for one image, (N, X, Y, D) for a batch."""
    x, single = _as_batch(pixels, config.input_size, params["conv1_w"].dtype)
    fm, _ = _trunk_forward(params, x)
    return fm[0] if single else fm


# ---------------------------------------------------------------------------
# heads and heatmaps
# ---------------------------------------------------------------------------

def _sigmoid(z):
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def global_average_pool(fm: np.ndarray) -> np.ndarray:
    """Mean over the spatial axes of an (..., X, Y, D) feature map."""
    return fm.mean(axis=(-3, -2))


def classify_multilabel(fm: np.ndarray, head: dict) -> np.ndarray:
    """Per-class sigmoid probabilities from pooled features."""
    g = global_average_pool(fm)
    if head["w"].shape[1] != g.shape[-1]:
        raise ValueError("feature channels do not match head width")
    return _sigmoid(g @ head["w"].T + head["b"])


def classify_binary(fm: np.ndarray, head: dict) -> np.ndarray:
    """(p_negative, p_positive) from a 2-way softmax head."""
    g = global_average_pool(fm)
    if head["w"].shape != (2, g.shape[-1]):
        raise ValueError("binary head must be 2 x feature-channels")
    logits = g @ head["w"].T + head["b"]
    return _softmax(logits)


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def compute_cam(fm: np.ndarray, w_c: np.ndarray) -> np.ndarray:
    """Class activation map: channel-weighted sum of the feature map.

    No bias, no normalization; `fm` is (X, Y, D) or (N, X, Y, D) and the
    result drops the channel axis.
    """
    w_c = np.asarray(w_c)
    if fm.shape[-1] != w_c.shape[0]:
        raise ValueError("weight vector length does not match feature channels")
    return fm @ w_c


def compute_cams(fm: np.ndarray, w: np.ndarray) -> np.ndarray:
    """All-class activation maps: (N, X, Y, D) x (C, D) -> (N, C, X, Y)."""
    return np.einsum("nxyd,cd->ncxy", fm, w, optimize=True)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def smooth_l1(z):
    """0.5 z^2 inside |z| < 1, |z| - 0.5 outside; elementwise on arrays."""
    z = np.asarray(z, dtype=float)
    a = np.abs(z)
    return np.where(a < 1.0, 0.5 * z * z, a - 0.5)


def smooth_l1_grad(z):
    z = np.asarray(z, dtype=float)
    return np.where(np.abs(z) < 1.0, z, np.sign(z))


def regression_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Spatial sum of smooth-L1 differences between two heatmaps."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"heatmap shapes differ: {pred.shape} vs {target.shape}")
    return float(smooth_l1(pred - target).sum())


def sigmoid_cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Multi-label loss: mean over classes of the per-class binary cross-entropy."""
    p = np.clip(np.asarray(probs, dtype=float), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(labels, dtype=float)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def softmax_cross_entropy(probs: np.ndarray, label: int) -> float:
    """Binary-head loss: negative log-probability of the true class."""
    p = np.clip(np.asarray(probs, dtype=float), PROB_EPS, 1.0 - PROB_EPS)
    return float(-np.log(p[..., int(label)]))


def classification_loss(probs, labels) -> float:
    """Dispatch: multi-hot label vector -> sigmoid CE; integer label -> softmax CE."""
    if np.isscalar(labels) or np.asarray(labels).ndim == 0:
        return softmax_cross_entropy(probs, int(labels))
    return sigmoid_cross_entropy(probs, labels)


def total_loss(probs, labels, cams, seed_targets: dict[int, np.ndarray], reg_weight: float) -> float:
    """Joint objective for one sample: classification plus gated heatmap regression.

    `seed_targets` maps class index -> stored attention map; classes absent
    from it contribute no regression term.
    """
    loss = sigmoid_cross_entropy(probs, labels)
    for c, target in seed_targets.items():
        if target is None:
            raise ValueError(f"sample is flagged as a seed for class {c} but has no stored attention map")
        loss += reg_weight * regression_loss(cams[c], target)
    return loss


# ---------------------------------------------------------------------------
# joint loss + analytic gradients (training path)
# ---------------------------------------------------------------------------

def multilabel_loss_and_grads(
    params: dict,
    head: dict,
    x: np.ndarray,
    y: np.ndarray,
    reg_weight: float = 0.0,
    seed_mask: np.ndarray | None = None,
    seed_targets: np.ndarray | None = None,
):
    """Batch-mean joint loss and gradients for the two-path multi-label network.

    seed_mask: (N, C) booleans gating the regression path per (sample, class);
    seed_targets: (N, C, X, Y) stored attention maps (ignored where mask is 0).
    Returns (loss, parts, grads) with parts = (classification, regression).
    """
    n = x.shape[0]
    fm, caches = _trunk_forward(params, x)
    g = fm.mean(axis=(1, 2))
    logits = g @ head["w"].T + head["b"]
    p = _sigmoid(logits)
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y, dtype=p.dtype)
    cls_loss = float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))))

    num_classes = head["w"].shape[0]
    dlogits = (p - y) / (num_classes * n)
    dg = dlogits @ head["w"]
    dhead_w = dlogits.T @ g
    dhead_b = dlogits.sum(axis=0)
    cells = fm.shape[1] * fm.shape[2]
    dfm = np.broadcast_to(dg[:, None, None, :] / cells, fm.shape).astype(fm.dtype).copy()

    reg_loss = 0.0
    if reg_weight > 0.0 and seed_mask is not None and seed_mask.any():
        cams = compute_cams(fm, head["w"])
        m = seed_mask.astype(fm.dtype)[:, :, None, None]
        # smooth_l1(0) = 0, so masked-out entries add nothing to the sum
        diff = (cams - seed_targets) * m
        reg_loss = float(smooth_l1(diff).sum()) * reg_weight / n
        gdiff = smooth_l1_grad(diff).astype(fm.dtype) * m * (reg_weight / n)
        dfm += np.einsum("ncxy,cd->nxyd", gdiff, head["w"], optimize=True)
        dhead_w += np.einsum("ncxy,nxyd->cd", gdiff, fm, optimize=True)

    grads = _trunk_backward(params, caches, dfm)
    grads["head_w"] = dhead_w
    grads["head_b"] = dhead_b
    loss = cls_loss + reg_loss
    return loss, (cls_loss, reg_loss), grads


def binary_loss_and_grads(params: dict, head: dict, x: np.ndarray, y: np.ndarray):
    """Batch-mean softmax cross-entropy and gradients for a 2-way head."""
    n = x.shape[0]
    fm, caches = _trunk_forward(params, x)
    g = fm.mean(axis=(1, 2))
    logits = g @ head["w"].T + head["b"]
    p = _softmax(logits)
    idx = np.arange(n)
    loss = float(np.mean(-np.log(np.clip(p[idx, y.astype(int)], PROB_EPS, None))))

    dlogits = p.copy()
    dlogits[idx, y.astype(int)] -= 1.0
    dlogits /= n
    dg = dlogits @ head["w"]
    cells = fm.shape[1] * fm.shape[2]
    dfm = np.broadcast_to(dg[:, None, None, :] / cells, fm.shape).astype(fm.dtype).copy()
    grads = _trunk_backward(params, caches, dfm)
    grads["head_w"] = dlogits.T @ g
    grads["head_b"] = dlogits.sum(axis=0)
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_step(
    params: dict,
    grads: dict,
    velocity: dict,
    config: TrainConfig,
    epoch: int,
    head: dict | None = None,
) -> None:
    """In-place SGD with momentum; lr follows the divide-by-10 epoch schedule."""
    lr = config.lr_at(epoch)
    targets = dict(params)
    if head is not None:
        targets["head_w"] = head["w"]
        targets["head_b"] = head["b"]
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in '{key}' at epoch {epoch}")
        v = velocity.setdefault(key, np.zeros_like(targets[key]))
        v *= config.momentum
        v -= lr * g.astype(v.dtype)
        targets[key] += v


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: dict, head: dict, config: ModelConfig, *,
                    epoch: int = 0, rng: np.random.Generator | None = None,
                    extra: dict | None = None) -> None:
    """Self-describing .npz: named tensors + JSON metadata (config echo, epoch, RNG state)."""
    arrays = {f"trunk/{k}": v for k, v in params.items()}
    arrays.update({f"head/{k}": v for k, v in head.items()})
    meta = {
        "model_config": asdict(config),
        "epoch": int(epoch),
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "extra": extra or {},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns (params, head, config, meta); meta carries epoch and RNG state."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        params = {k.split("/", 1)[1]: data[k] for k in data.files if k.startswith("trunk/")}
        head = {k.split("/", 1)[1]: data[k] for k in data.files if k.startswith("head/")}
    cfg = meta["model_config"]
    cfg["channels"] = tuple(cfg["channels"])
    config = ModelConfig(**cfg)
    return params, head, config, meta


def restore_rng(meta: dict) -> np.random.Generator:
    state = meta.get("rng_state")
    if state is None:
        raise ValueError("checkpoint carries no RNG state")
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = state
    return gen
