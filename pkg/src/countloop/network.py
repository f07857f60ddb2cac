"""The classifier and auto-encoder graphs, their losses, and training routines.

The classifier is a four-layer fully-convolutional net (c_in -> N -> 2N -> N
-> 1): two encoding layers of conv+bias+ReLU with a single 2x2 max-pool after
the second conv, channel L2 normalization of the pooled activations (the
latent field consumed by clustering and the sub-space loss), then an unpool
and two decoding conv layers, the last one linear so the classification map
can go negative.

The auto-encoder used for capacity selection shares this architecture with an
extra max-pool after the first layer, a matching unpool in the last decoding
layer, and c_in output channels.

Label coordinates are (x, y) int arrays of shape (K, 2); maps index [y, x].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .matching import SUPPRESSION_WINDOW, max_suppress
from .tensor_ops import (
    AdamState,
    PoolSwitches,
    adam_step,
    conv2d,
    conv2d_backward,
    l2_normalize_channels,
    l2_normalize_channels_backward,
    max_pool_2x2,
    max_pool_2x2_backward,
    relu,
    relu_backward,
    unpool_2x2,
    unpool_2x2_backward,
)


@dataclass
class NetworkConfig:
    c_in: int
    n_filters: int = 8
    kernel_size: int = 5
    alpha: float = 1.0
    lr: float = 1e-3
    margin: float = 0.95
    max_train_steps: int = 20_000
    ae_rec_threshold: float = 1e-2
    ae_train_steps: int = 3_000
    capacity_start: int = 8
    capacity_step: int = 8
    capacity_cap: int = 64

    def __post_init__(self) -> None:
        if self.n_filters < 8 or self.n_filters % 8:
            raise ValueError(f"n_filters must be a positive multiple of 8, got {self.n_filters}")
        if not 0.0 < self.margin < 1.0:
            raise ValueError(f"margin must be in (0, 1), got {self.margin}")
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    @property
    def m_split(self) -> int:
        # Sub-space split index; the ablation-backed choice is m = N.
        return self.n_filters

    @property
    def latent_channels(self) -> int:
        return 2 * self.n_filters


@dataclass
class ClassifierState:
    config: NetworkConfig
    params: dict[str, np.ndarray]
    adam: AdamState


@dataclass
class ForwardPass:
    c: np.ndarray  # (H, W) classification map
    c2: np.ndarray  # (ceil(H/2), ceil(W/2), 2N) unit-norm latent field
    switches: PoolSwitches
    cache: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


class ConvergenceFailure(RuntimeError):
    def __init__(self, steps: int, worst_pos, worst_neg):
        self.steps = steps
        self.worst_pos = worst_pos
        self.worst_neg = worst_neg
        super().__init__(
            f"labels not satisfied after {steps} steps "
            f"(worst positive {worst_pos}, worst negative {worst_neg})"
        )


def _glorot(rng: np.random.Generator, kh: int, kw: int, cin: int, cout: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (kh * kw * cin + kh * kw * cout))
    return rng.uniform(-limit, limit, size=(kh, kw, cin, cout))


def _layer_plan(c_in: int, n: int) -> list[tuple[str, int, int]]:
    return [("enc1", c_in, n), ("enc2", n, 2 * n), ("dec1", 2 * n, n), ("dec2", n, 1)]


def init_classifier(config: NetworkConfig, seed: int) -> ClassifierState:
    rng = np.random.default_rng(seed)
    k = config.kernel_size
    params: dict[str, np.ndarray] = {}
    for name, cin, cout in _layer_plan(config.c_in, config.n_filters):
        params[f"{name}_w"] = _glorot(rng, k, k, cin, cout)
        params[f"{name}_b"] = np.zeros(cout)
    return ClassifierState(config, params, AdamState(lr=config.lr))


def preprocess(pixels: np.ndarray) -> np.ndarray:
    """Classifier input: [0,1] pixels with the per-channel mean removed."""
    return pixels - pixels.mean(axis=(0, 1))


def classify(state: ClassifierState, pixels: np.ndarray) -> ForwardPass:
    """Full-image forward pass producing the classification map and latent field."""
    cfg = state.config
    if pixels.ndim != 3 or pixels.shape[2] != cfg.c_in:
        raise ValueError(f"expected (H, W, {cfg.c_in}) image, got {pixels.shape}")
    p = state.params
    x0 = preprocess(pixels)
    z1 = conv2d(x0, p["enc1_w"], p["enc1_b"])
    a1 = relu(z1)
    z2 = conv2d(a1, p["enc2_w"], p["enc2_b"])
    a2 = relu(z2)
    pooled, switches = max_pool_2x2(a2)
    c2 = l2_normalize_channels(pooled)
    up = unpool_2x2(c2, switches)
    z3 = conv2d(up, p["dec1_w"], p["dec1_b"])
    a3 = relu(z3)
    z4 = conv2d(a3, p["dec2_w"], p["dec2_b"])
    cache = {"x0": x0, "z1": z1, "a1": a1, "z2": z2, "a2": a2, "pooled": pooled, "up": up, "z3": z3, "a3": a3}
    return ForwardPass(c=z4[:, :, 0], c2=c2, switches=switches, cache=cache)


def classifier_backward(
    state: ClassifierState, fp: ForwardPass, grad_c: np.ndarray, grad_c2: np.ndarray | None
) -> dict[str, np.ndarray]:
    """Backprop d(loss)/d(C) and d(loss)/d(C2) to every parameter."""
    p, cache = state.params, fp.cache
    if not cache:
        raise ValueError("forward pass carries no cache; rerun classify()")
    grads: dict[str, np.ndarray] = {}
    d4 = grad_c[:, :, None]
    da3, grads["dec2_w"], grads["dec2_b"] = conv2d_backward(cache["a3"], p["dec2_w"], d4)
    d3 = relu_backward(cache["z3"], da3)
    dup, grads["dec1_w"], grads["dec1_b"] = conv2d_backward(cache["up"], p["dec1_w"], d3)
    dc2 = unpool_2x2_backward(fp.switches, dup)
    if grad_c2 is not None:
        dc2 = dc2 + grad_c2
    dpooled = l2_normalize_channels_backward(cache["pooled"], dc2)
    da2 = max_pool_2x2_backward(fp.switches, dpooled)
    d2 = relu_backward(cache["z2"], da2)
    da1, grads["enc2_w"], grads["enc2_b"] = conv2d_backward(cache["a1"], p["enc2_w"], d2)
    d1 = relu_backward(cache["z1"], da1)
    _, grads["enc1_w"], grads["enc1_b"] = conv2d_backward(
        cache["x0"], p["enc1_w"], d1, need_input_grad=False
    )
    return grads


# ---------------------------------------------------------------------------
# losses


def _check_coords(coords: np.ndarray, h: int, w: int, what: str) -> None:
    if len(coords) == 0:
        return
    if coords[:, 0].min() < 0 or coords[:, 0].max() >= w or coords[:, 1].min() < 0 or coords[:, 1].max() >= h:
        raise ValueError(f"{what} contains out-of-bounds coordinates for {h}x{w} map")


def _check_disjoint(pos: np.ndarray, neg: np.ndarray) -> None:
    if len(pos) == 0 or len(neg) == 0:
        return
    both = set(map(tuple, pos.tolist())) & set(map(tuple, neg.tolist()))
    if both:
        raise ValueError(f"label sets overlap at {sorted(both)[:5]}")


def label_loss(c: np.ndarray, pos: np.ndarray, neg: np.ndarray) -> float:
    """Mean squared distance of C to +1 on positives and -1 on negatives."""
    _check_coords(pos, *c.shape, "positives")
    _check_coords(neg, *c.shape, "negatives")
    _check_disjoint(pos, neg)
    return _label_loss_fast(c, pos, neg)


def _label_loss_fast(c: np.ndarray, pos: np.ndarray, neg: np.ndarray) -> float:
    loss = 0.0
    if len(pos):
        loss += float(((c[pos[:, 1], pos[:, 0]] - 1.0) ** 2).mean())
    if len(neg):
        loss += float(((c[neg[:, 1], neg[:, 0]] + 1.0) ** 2).mean())
    return loss


def label_loss_grad(c: np.ndarray, pos: np.ndarray, neg: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(c)
    if len(pos):
        grad[pos[:, 1], pos[:, 0]] += 2.0 * (c[pos[:, 1], pos[:, 0]] - 1.0) / len(pos)
    if len(neg):
        grad[neg[:, 1], neg[:, 0]] += 2.0 * (c[neg[:, 1], neg[:, 0]] + 1.0) / len(neg)
    return grad


def to_latent_coords(coords: np.ndarray) -> np.ndarray:
    """Image coordinate -> latent cell by floor-halving (one 2x2 pool)."""
    return coords // 2


def subspace_loss(c2: np.ndarray, pos: np.ndarray, neg: np.ndarray, m: int) -> float:
    """Energy of positives on the first m latent channels plus energy of
    negatives on the remaining ones; zero when the sub-spaces are disjoint."""
    if not 1 <= m < c2.shape[2]:
        raise ValueError(f"split index {m} out of range for {c2.shape[2]} channels")
    loss = 0.0
    if len(pos):
        cells = to_latent_coords(pos)
        loss += float((c2[cells[:, 1], cells[:, 0], :m] ** 2).sum())
    if len(neg):
        cells = to_latent_coords(neg)
        loss += float((c2[cells[:, 1], cells[:, 0], m:] ** 2).sum())
    return loss


def subspace_loss_grad(c2: np.ndarray, pos: np.ndarray, neg: np.ndarray, m: int) -> np.ndarray:
    grad = np.zeros_like(c2)
    if len(pos):
        cells = to_latent_coords(pos)
        vals = np.zeros((len(cells), c2.shape[2]))
        vals[:, :m] = 2.0 * c2[cells[:, 1], cells[:, 0], :m]
        np.add.at(grad, (cells[:, 1], cells[:, 0]), vals)
    if len(neg):
        cells = to_latent_coords(neg)
        vals = np.zeros((len(cells), c2.shape[2]))
        vals[:, m:] = 2.0 * c2[cells[:, 1], cells[:, 0], m:]
        np.add.at(grad, (cells[:, 1], cells[:, 0]), vals)
    return grad


def total_loss(fp: ForwardPass, pos: np.ndarray, neg: np.ndarray, cfg: NetworkConfig) -> float:
    return _label_loss_fast(fp.c, pos, neg) + cfg.alpha * subspace_loss(
        fp.c2, pos, neg, cfg.m_split
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    state: ClassifierState
    steps: int
    forward: ForwardPass
    final_loss: float


def margins_satisfied(c: np.ndarray, pos: np.ndarray, neg: np.ndarray, margin: float) -> bool:
    if len(pos) and float(c[pos[:, 1], pos[:, 0]].min()) < margin:
        return False
    if len(neg) and float(c[neg[:, 1], neg[:, 0]].max()) > -margin:
        return False
    return True


def train_to_labels(
    state: ClassifierState,
    pixels: np.ndarray,
    pos: np.ndarray,
    neg: np.ndarray,
    max_steps: int | None = None,
    progress=None,
) -> TrainResult:
    """ADAM on L_total until C clears +/-margin on every label.

    The whole image is the batch. Raises ConvergenceFailure with the worst
    violating coordinates if the step budget runs out.
    """
    if len(pos) < 1:
        raise ValueError("at least one positive label is required")
    cfg = state.config
    h, w = pixels.shape[:2]
    _check_coords(pos, h, w, "positives")
    _check_coords(neg, h, w, "negatives")
    _check_disjoint(pos, neg)
    budget = cfg.max_train_steps if max_steps is None else max_steps

    fp = classify(state, pixels)
    for step in range(budget):
        if margins_satisfied(fp.c, pos, neg, cfg.margin):
            return TrainResult(state, step, fp, total_loss(fp, pos, neg, cfg))
        grad_c = label_loss_grad(fp.c, pos, neg)
        grad_c2 = None
        if cfg.alpha > 0.0:
            grad_c2 = cfg.alpha * subspace_loss_grad(fp.c2, pos, neg, cfg.m_split)
        grads = classifier_backward(state, fp, grad_c, grad_c2)
        adam_step(state.params, grads, state.adam)
        fp = classify(state, pixels)
        if progress is not None and (step + 1) % 50 == 0:
            progress(step + 1, total_loss(fp, pos, neg, cfg))
    if margins_satisfied(fp.c, pos, neg, cfg.margin):
        return TrainResult(state, budget, fp, total_loss(fp, pos, neg, cfg))

    cp = fp.c[pos[:, 1], pos[:, 0]]
    worst_pos = (tuple(pos[int(np.argmin(cp))]), float(cp.min()))
    worst_neg = None
    if len(neg):
        cn = fp.c[neg[:, 1], neg[:, 0]]
        worst_neg = (tuple(neg[int(np.argmax(cn))]), float(cn.max()))
    raise ConvergenceFailure(budget, worst_pos, worst_neg)


# ---------------------------------------------------------------------------
# auto-encoder capacity search


def init_autoencoder(c_in: int, n: int, kernel_size: int, seed: int, lr: float) -> ClassifierState:
    cfg = NetworkConfig(c_in=c_in, n_filters=n, kernel_size=kernel_size, lr=lr)
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, cin, cout in [("enc1", c_in, n), ("enc2", n, 2 * n), ("dec1", 2 * n, n), ("dec2", n, c_in)]:
        params[f"{name}_w"] = _glorot(rng, kernel_size, kernel_size, cin, cout)
        params[f"{name}_b"] = np.zeros(cout)
    return ClassifierState(cfg, params, AdamState(lr=lr))


def ae_forward(state: ClassifierState, pixels: np.ndarray):
    """Auto-encoder pass: classifier graph plus an extra pool/unpool pair."""
    p = state.params
    z1 = conv2d(pixels, p["enc1_w"], p["enc1_b"])
    a1 = relu(z1)
    p1, sw1 = max_pool_2x2(a1)
    z2 = conv2d(p1, p["enc2_w"], p["enc2_b"])
    a2 = relu(z2)
    p2, sw2 = max_pool_2x2(a2)
    c2 = l2_normalize_channels(p2)
    u2 = unpool_2x2(c2, sw2)
    z3 = conv2d(u2, p["dec1_w"], p["dec1_b"])
    a3 = relu(z3)
    u1 = unpool_2x2(a3, sw1)
    z4 = conv2d(u1, p["dec2_w"], p["dec2_b"])
    cache = {"x0": pixels, "z1": z1, "a1": a1, "p1": p1, "z2": z2, "a2": a2, "p2": p2,
             "c2": c2, "u2": u2, "z3": z3, "a3": a3, "u1": u1, "sw1": sw1, "sw2": sw2}
    return z4, cache


def ae_backward(state: ClassifierState, cache, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    p = state.params
    grads: dict[str, np.ndarray] = {}
    du1, grads["dec2_w"], grads["dec2_b"] = conv2d_backward(cache["u1"], p["dec2_w"], grad_out)
    da3 = unpool_2x2_backward(cache["sw1"], du1)
    d3 = relu_backward(cache["z3"], da3)
    du2, grads["dec1_w"], grads["dec1_b"] = conv2d_backward(cache["u2"], p["dec1_w"], d3)
    dc2 = unpool_2x2_backward(cache["sw2"], du2)
    dp2 = l2_normalize_channels_backward(cache["p2"], dc2)
    da2 = max_pool_2x2_backward(cache["sw2"], dp2)
    d2 = relu_backward(cache["z2"], da2)
    dp1, grads["enc2_w"], grads["enc2_b"] = conv2d_backward(cache["p1"], p["enc2_w"], d2)
    da1 = max_pool_2x2_backward(cache["sw1"], dp1)
    d1 = relu_backward(cache["z1"], da1)
    _, grads["enc1_w"], grads["enc1_b"] = conv2d_backward(
        cache["x0"], p["enc1_w"], d1, need_input_grad=False
    )
    return grads


def reconstruction_error(out: np.ndarray, pixels: np.ndarray) -> float:
    """Mean squared reconstruction error over all pixel-channels.

    The per-pixel mean keeps the capacity threshold resolution-independent;
    the squared form puts the 1e-2 cutoff at 10% RMS, a reachable bar for the
    pooled architecture (plain RMS <= 1e-2 is not, at any allowed capacity).
    """
    return float(np.mean((out - pixels) ** 2))


@dataclass
class CapacityResult:
    n_filters: int
    errors: dict[int, float]  # candidate N -> best E_rec reached
    steps: dict[int, int]


def select_capacity(
    pixels: np.ndarray, config: NetworkConfig, seed: int = 0, progress=None
) -> CapacityResult:
    """Smallest N (multiples of capacity_step) whose auto-encoder reconstructs
    the [0,1] image to RMS error <= ae_rec_threshold within the step budget."""
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise ValueError("capacity search expects pixels normalized to [0, 1]")
    errors: dict[int, float] = {}
    steps_taken: dict[int, int] = {}
    n = config.capacity_start
    while True:
        ae = init_autoencoder(pixels.shape[2], n, config.kernel_size, seed + n, config.lr)
        best = np.inf
        step = 0
        for step in range(1, config.ae_train_steps + 1):
            out, cache = ae_forward(ae, pixels)
            err = reconstruction_error(out, pixels)
            best = min(best, err)
            if err <= config.ae_rec_threshold:
                break
            grad = 2.0 * (out - pixels) / out.size
            adam_step(ae.params, ae_backward(ae, cache, grad), ae.adam)
        errors[n] = best
        steps_taken[n] = step
        if progress is not None:
            progress(n, best, step)
        if best <= config.ae_rec_threshold or n >= config.capacity_cap:
            return CapacityResult(n, errors, steps_taken)
        n += config.capacity_step


# ---------------------------------------------------------------------------
# inference & persistence


def detect(fp: ForwardPass) -> np.ndarray:
    """Positive suppressed pixels of the classification map, (K, 2) coords."""
    peaks = max_suppress(fp.c, SUPPRESSION_WINDOW)
    if not len(peaks):
        return peaks
    return peaks[fp.c[peaks[:, 1], peaks[:, 0]] > 0.0]


def apply_model(state: ClassifierState, pixels: np.ndarray, transform=None) -> np.ndarray:
    """Detect on an image rescaled with the training transform's scale factors.

    Returns (K, 2) float coordinates, mapped back through the transform when
    one is given (original image space), otherwise in map space.
    """
    fp = classify(state, pixels)
    pts = detect(fp).astype(np.float64)
    if transform is not None and len(pts):
        ox, oy = transform.to_original(pts[:, 0], pts[:, 1])
        pts = np.column_stack([ox, oy])
    return pts


MODEL_FORMAT = "countloop-model"
MODEL_VERSION = 1


def model_to_dict(state: ClassifierState) -> dict:
    cfg = state.config
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "config": {
            "c_in": cfg.c_in,
            "n_filters": cfg.n_filters,
            "kernel_size": cfg.kernel_size,
            "alpha": cfg.alpha,
            "lr": cfg.lr,
            "margin": cfg.margin,
            "max_train_steps": cfg.max_train_steps,
        },
        "layers": {
            name: {"shape": list(arr.shape), "values": arr.ravel().tolist()}
            for name, arr in state.params.items()
        },
    }


def model_from_dict(doc: dict) -> ClassifierState:
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a {MODEL_FORMAT} document")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')}")
    cfg = NetworkConfig(**doc["config"])
    params = {
        name: np.asarray(spec["values"], dtype=np.float64).reshape(spec["shape"])
        for name, spec in doc["layers"].items()
    }
    expected = {f"{n}_{s}" for n, _, _ in _layer_plan(cfg.c_in, cfg.n_filters) for s in ("w", "b")}
    if set(params) != expected:
        raise ValueError(f"layer set {sorted(params)} does not match architecture")
    return ClassifierState(cfg, params, AdamState(lr=cfg.lr))
