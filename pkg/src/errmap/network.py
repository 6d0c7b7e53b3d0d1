"""Twin-head depth completion network and its losses.

The network is a residual encoder (4 stride-2 stages) and a transpose-conv
decoder (4 stride-2 stages with concatenation skip connections) ending in a
shared trunk, from which two independent conv stacks predict the dense depth
and the per-pixel error. The error head is trained against a frozen copy of
the live residual |Y - gt| (recomputed every step, never backpropagated), and
the two losses are combined by dividing each through its own frozen value, so
every task contributes gradient at the same scale regardless of magnitude.

An alternative single-loss mode treats the second head as a noise scale sigma
and minimizes the classic heteroscedastic regression objective
residual^2 / (2 sigma^2) + log(sigma^2) / 2 (or its absolute-error variant).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .depthio import DepthMap, ErrorMap
from .preproc import DEFAULT_INPUT_SCALE_M, DEFAULT_POOL_KERNEL, fgbg_pool, assemble_input

MODES = ("error-prediction", "aleatoric", "depth-only")

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 8
    encoder_stages: int = 4
    decoder_stages: int = 4
    trunk_channels: int = 32
    head_depth: int = 2
    mode: str = "error-prediction"
    channel_cap: int = 8  # per-stage channels capped at base * cap

    def __post_init__(self):
        if self.encoder_stages != 4 or self.decoder_stages != 4:
            raise ValueError("the architecture is fixed at 4 encoder and 4 decoder stages")
        if self.base_channels < 1 or self.trunk_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.head_depth < 1:
            raise ValueError("head_depth must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def has_error_head(self) -> bool:
        return self.mode != "depth-only"

    def stage_channels(self) -> list[int]:
        cap = self.base_channels * self.channel_cap
        return [min(self.base_channels * 2 ** i, cap) for i in range(self.encoder_stages)]


class Parameters:
    """Ordered named weight/bias tensors plus the config that shaped them."""

    def __init__(self, config: NetworkConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        for name, t in tensors.items():
            if not np.all(np.isfinite(t.data)):
                raise ValueError(f"parameter {name!r} contains non-finite values")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


@dataclass
class PredictionBundle:
    depth: Tensor              # (B, 1, H, W)
    error: Tensor | None       # (B, 1, H, W), softplus-activated, or None


@dataclass
class LossBundle:
    loss_depth: Tensor | None
    loss_error: Tensor | None
    baseline_depth: float | None
    baseline_error: float | None
    loss_total: Tensor


@dataclass(frozen=True)
class FilterSpec:
    threshold_mm: float

    def __post_init__(self):
        if self.threshold_mm <= 0:
            raise ValueError(f"threshold must be positive, got {self.threshold_mm} mm")

    @property
    def threshold_m(self) -> float:
        return self.threshold_mm / 1000.0


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def _he_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int) -> np.ndarray:
    std = np.sqrt(2.0 / (in_ch * k * k))
    return rng.normal(0.0, std, size=(out_ch, in_ch, k, k))


def build(config: NetworkConfig, seed: int = 0) -> Parameters:
    """He-initialized parameters, deterministic per seed.

    The error head is drawn last, so depth-path parameters are bit-identical
    between depth-only and twin-head configs sharing a seed.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}

    def add_conv(name: str, out_ch: int, in_ch: int, k: int):
        tensors[f"{name}.w"] = Tensor(_he_conv(rng, out_ch, in_ch, k), requires_grad=True)
        tensors[f"{name}.b"] = Tensor(np.zeros((1, out_ch, 1, 1)), requires_grad=True)

    def add_tconv(name: str, in_ch: int, out_ch: int, k: int):
        std = np.sqrt(2.0 / (in_ch * k * k))
        tensors[f"{name}.w"] = Tensor(rng.normal(0.0, std, size=(in_ch, out_ch, k, k)),
                                      requires_grad=True)
        tensors[f"{name}.b"] = Tensor(np.zeros((1, out_ch, 1, 1)), requires_grad=True)

    chans = config.stage_channels()
    in_ch = 3
    for i, out_ch in enumerate(chans):
        add_conv(f"enc{i}.conv1", out_ch, in_ch, 3)
        add_conv(f"enc{i}.conv2", out_ch, out_ch, 3)
        add_conv(f"enc{i}.proj", out_ch, in_ch, 1)
        in_ch = out_ch

    # decoder mirrors the encoder; stage j upsamples and then concatenates the
    # matching encoder feature (the raw 3-channel input at full resolution)
    cur = chans[-1]
    skip_src = [chans[2], chans[1], chans[0], 3]
    dec_out = [chans[2], chans[1], chans[0], chans[0]]
    for j in range(config.decoder_stages):
        add_tconv(f"dec{j}.tconv", cur, dec_out[j], 2)
        cur = dec_out[j] + skip_src[j]

    add_conv("trunk", config.trunk_channels, cur, 3)

    def add_head(name: str):
        for layer in range(config.head_depth - 1):
            add_conv(f"{name}.{layer}", config.trunk_channels, config.trunk_channels, 3)
        add_conv(f"{name}.{config.head_depth - 1}", 1, config.trunk_channels, 3)

    add_head("depth_head")
    if config.has_error_head:
        add_head("error_head")
    return Parameters(config, tensors)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def _enc_block(params: Parameters, name: str, x: Tensor) -> Tensor:
    h = ag.relu(ag.conv2d(x, params[f"{name}.conv1.w"], params[f"{name}.conv1.b"],
                          stride=2, padding=1))
    h = ag.conv2d(h, params[f"{name}.conv2.w"], params[f"{name}.conv2.b"],
                  stride=1, padding=1)
    s = ag.conv2d(x, params[f"{name}.proj.w"], params[f"{name}.proj.b"],
                  stride=2, padding=0)
    return ag.relu(ag.add(h, s))


def _head(params: Parameters, name: str, x: Tensor, depth: int) -> Tensor:
    h = x
    for layer in range(depth - 1):
        h = ag.relu(ag.conv2d(h, params[f"{name}.{layer}.w"], params[f"{name}.{layer}.b"],
                              stride=1, padding=1))
    return ag.conv2d(h, params[f"{name}.{depth - 1}.w"], params[f"{name}.{depth - 1}.b"],
                     stride=1, padding=1)


def forward(params: Parameters, x: Tensor) -> PredictionBundle:
    """Run the network on a (B, 3, H, W) input; H and W divisible by 16."""
    config = params.config
    b, c, h, w = x.shape
    if c != 3:
        raise ValueError(f"network input must have 3 channels, got {c}")
    if h % 16 != 0 or w % 16 != 0:
        raise ValueError(f"input dims must be divisible by 16, got {h}x{w}")

    skips = []
    cur = x
    for i in range(config.encoder_stages):
        cur = _enc_block(params, f"enc{i}", cur)
        skips.append(cur)

    # matching features per decoder stage: enc2, enc1, enc0, the input itself
    skip_feats = [skips[2], skips[1], skips[0], x]
    for j in range(config.decoder_stages):
        cur = ag.relu(ag.transpose_conv2d(cur, params[f"dec{j}.tconv.w"],
                                          params[f"dec{j}.tconv.b"], stride=2, padding=0))
        cur = ag.concat_channels([cur, skip_feats[j]])

    trunk = ag.relu(ag.conv2d(cur, params["trunk.w"], params["trunk.b"],
                              stride=1, padding=1))

    depth = _head(params, "depth_head", trunk, config.head_depth)
    error = None
    if config.has_error_head:
        error = ag.softplus(_head(params, "error_head", trunk, config.head_depth))
    return PredictionBundle(depth=depth, error=error)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def loss_depth(pred: PredictionBundle, gt: Tensor, mask: Tensor) -> Tensor:
    """Mean squared depth error over valid ground-truth pixels."""
    return ag.masked_mse(pred.depth, gt, mask)


def error_ground_truth(pred_depth: Tensor, gt: Tensor, mask: Tensor) -> Tensor:
    """The error head's training label: |Y - gt| on valid pixels, frozen.

    The copy carries no backward path, so the label is a constant for the
    current step and is recomputed from the live residual at the next one.
    """
    residual = ag.absolute(ag.sub(pred_depth, gt))
    return ag.stop_gradient(ag.mul(residual, mask))


def loss_error(pred: PredictionBundle, gt_error: Tensor, mask: Tensor) -> Tensor:
    """Mean squared difference between the error head and its frozen label."""
    if pred.error is None:
        raise ValueError("this configuration has no error head")
    return ag.masked_mse(pred.error, gt_error, mask)


def ratio_combine(losses: list[Tensor]) -> tuple[Tensor, list[float]]:
    """total = sum_i loss_i / frozen(loss_i); returns (total, baseline values).

    Each baseline is the loss's own current value detached from the graph, so
    every ratio is exactly 1 in value while its gradient is grad(loss)/value.
    Baselines below 1e-12 are clamped to 1e-12; negative losses are rejected.
    """
    if not losses:
        raise ValueError("ratio_combine: need at least one loss")
    baselines: list[float] = []
    total: Tensor | None = None
    for loss in losses:
        if not loss.is_scalar():
            raise ValueError(f"ratio_combine: losses must be scalar-shaped, got {loss.shape}")
        value = loss.item()
        if value < 0:
            raise ValueError(f"ratio_combine: loss must be non-negative, got {value}")
        baseline = max(value, 1e-12)
        baselines.append(baseline)
        term = ag.mul(loss, ag.scalar(1.0 / baseline))
        total = term if total is None else ag.add(total, term)
    return total, baselines


def aleatoric_loss(pred: PredictionBundle, gt: Tensor, mask: Tensor,
                   variant: str = "mae") -> Tensor:
    """Heteroscedastic regression objective with the error head as sigma.

    mse variant: mean over valid pixels of r^2/(2 sigma^2) + log(sigma^2)/2.
    mae variant: mean of |r|/sigma + log(sigma), which trades the quadratic
    data term for an absolute one; both have their per-pixel optimum at
    sigma^2 = r^2. Divisions and logs are guarded at 1e-12.
    """
    if pred.error is None:
        raise ValueError("aleatoric loss needs the sigma (error) head")
    if variant not in ("mse", "mae"):
        raise ValueError(f"variant must be 'mse' or 'mae', got {variant!r}")
    md = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    count = md.sum()
    if count == 0:
        raise ValueError("aleatoric loss: mask has no valid pixels")
    mask_t = mask if isinstance(mask, Tensor) else Tensor(mask)
    residual = ag.sub(pred.depth, gt)
    sigma = pred.error
    if variant == "mse":
        var = ag.square(sigma)
        data_term = ag.div(ag.square(residual), ag.mul(var, ag.scalar(2.0)), guarded=True)
        reg_term = ag.mul(ag.log(var, guarded=True), ag.scalar(0.5))
    else:
        data_term = ag.div(ag.absolute(residual), sigma, guarded=True)
        reg_term = ag.log(sigma, guarded=True)
    per_pixel = ag.mul(ag.add(data_term, reg_term), mask_t)
    return ag.mul(ag.tsum(per_pixel), ag.scalar(1.0 / count))


def compute_losses(pred: PredictionBundle, gt: Tensor, mask: Tensor, mode: str,
                   combiner: str = "ratio", weights: list[float] | None = None,
                   aleatoric_variant: str = "mae") -> LossBundle:
    """Mode-appropriate losses combined into the total that gets optimized.

    In ratio mode the total's value equals the number of active losses by
    construction. The single-loss sigma mode always optimizes its raw value
    (the objective can be negative, which a ratio cannot normalize).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if combiner not in ("ratio", "fixed-weights"):
        raise ValueError(f"unknown combiner {combiner!r}")

    if mode == "aleatoric":
        total = aleatoric_loss(pred, gt, mask, variant=aleatoric_variant)
        diag = ag.masked_mse(ag.stop_gradient(pred.depth), gt, mask)
        return LossBundle(loss_depth=diag, loss_error=total, baseline_depth=None,
                          baseline_error=None, loss_total=total)

    l_depth = loss_depth(pred, gt, mask)
    if mode == "depth-only":
        losses = [l_depth]
    else:
        gt_err = error_ground_truth(pred.depth, gt, mask)
        losses = [l_depth, loss_error(pred, gt_err, mask)]

    if combiner == "ratio":
        total, baselines = ratio_combine(losses)
    else:
        if weights is None or len(weights) != len(losses):
            raise ValueError(f"fixed-weights combiner needs {len(losses)} weights")
        total = None
        for w, loss in zip(weights, losses):
            term = ag.mul(loss, ag.scalar(w))
            total = term if total is None else ag.add(total, term)
        baselines = [1.0 / w if w != 0 else float("inf") for w in weights]

    return LossBundle(
        loss_depth=losses[0],
        loss_error=losses[1] if len(losses) > 1 else None,
        baseline_depth=baselines[0],
        baseline_error=baselines[1] if len(losses) > 1 else None,
        loss_total=total,
    )


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def predict(params: Parameters, sparse: DepthMap,
            scale: float = DEFAULT_INPUT_SCALE_M,
            pool_kernel: int = DEFAULT_POOL_KERNEL,
            pad: bool = False) -> tuple[DepthMap, ErrorMap | None]:
    """Preprocess, run the network, and de-normalize back to meters.

    Depth predictions are clamped to the PNG-representable range [0, 255.99];
    the error map is sigma when the net was trained in the sigma mode. Input
    dims must be divisible by 16 unless ``pad=True``, which zero-pads (i.e.
    adds invalid pixels) up to the next multiple and crops the output.
    """
    values = sparse.values
    h, w = values.shape
    if h % 16 != 0 or w % 16 != 0:
        if not pad:
            raise ValueError(f"input dims {h}x{w} not divisible by 16 "
                             "(use pad=True to pad and crop)")
        ph = (16 - h % 16) % 16
        pw = (16 - w % 16) % 16
        padded = np.pad(values, ((0, ph), (0, pw)))
        depth_p, err_p = predict(params, DepthMap(padded), scale=scale,
                                 pool_kernel=pool_kernel, pad=False)
        depth = DepthMap(depth_p.values[:h, :w], role="dense-prediction")
        err = None if err_p is None else ErrorMap(err_p.values[:h, :w])
        return depth, err

    x = assemble_input(DepthMap(values), fgbg_pool(DepthMap(values), kernel=pool_kernel),
                       scale=scale)
    pred = forward(params, x)
    depth_m = np.clip(pred.depth.data[0, 0] * scale, 0.0, 65535 / 256.0)
    depth = DepthMap(depth_m, role="dense-prediction")
    err = None
    if pred.error is not None:
        role = "sigma" if params.config.mode == "aleatoric" else "prediction"
        err = ErrorMap(pred.error.data[0, 0] * scale, role=role)
    return depth, err


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _checkpoint_paths(path: str) -> tuple[str, str]:
    base = path[:-4] if path.endswith(".npz") else path
    return base + ".npz", base + ".json"


def save_checkpoint(params: Parameters, path: str, extra: dict | None = None) -> str:
    """Write <base>.npz (named arrays) and <base>.json (config sidecar)."""
    npz_path, sidecar_path = _checkpoint_paths(path)
    arrays = {name: t.data for name, t in params.items()}
    np.savez(npz_path, **arrays)
    sidecar = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(params.config),
        "names": params.names(),
    }
    if extra:
        sidecar.update(extra)
    with open(sidecar_path, "w") as fh:
        json.dump(sidecar, fh, indent=2)
    return npz_path


def load_checkpoint(path: str) -> tuple[Parameters, dict]:
    """Load parameters plus the sidecar metadata dict."""
    npz_path, sidecar_path = _checkpoint_paths(path)
    if not os.path.exists(sidecar_path):
        raise ValueError(f"checkpoint sidecar not found: {sidecar_path}")
    with open(sidecar_path) as fh:
        sidecar = json.load(fh)
    version = sidecar.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    config = NetworkConfig(**sidecar["config"])
    with np.load(npz_path) as data:
        tensors = {}
        for name in sidecar["names"]:
            tensors[name] = Tensor(np.array(data[name]), requires_grad=True)
    return Parameters(config, tensors), sidecar
