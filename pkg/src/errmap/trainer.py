"""Adam training loop with mini-batching, checkpointing and a JSON-lines log.

The error label is recomputed from the live residual at every step (never
cached), which is what makes the error head track the model's own current
mistakes. Batching order is a deterministic per-epoch shuffle from the run
seed, so identical configs produce bit-identical trajectories.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor, backward
from .network import (
    LossBundle,
    NetworkConfig,
    Parameters,
    build,
    compute_losses,
    forward,
    save_checkpoint,
)
from .preproc import DEFAULT_INPUT_SCALE_M, DEFAULT_POOL_KERNEL, fgbg_pool, assemble_input
from .synth import SamplePair


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 2
    epochs: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    combiner: str = "ratio"            # ratio | fixed-weights
    weights: tuple[float, ...] | None = None
    input_scale: float = DEFAULT_INPUT_SCALE_M
    pool_kernel: int = DEFAULT_POOL_KERNEL
    aleatoric_variant: str = "mae"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.combiner not in ("ratio", "fixed-weights"):
            raise ValueError(f"unknown combiner {self.combiner!r}")


class AdamState:
    """First/second moment accumulators plus the step counter."""

    def __init__(self, params: Parameters):
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def adam_step(params: Parameters, grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place.

    Parameters without an entry in ``grads`` are treated as having zero
    gradient. Any NaN gradient rejects the whole step.
    """
    for name, g in grads.items():
        if np.any(np.isnan(g)):
            raise ValueError(f"NaN gradient for parameter {name!r}; step rejected")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        tensor.data -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)


@dataclass
class TrainResult:
    params: Parameters
    log: list[dict]
    checkpoints: list[str] = field(default_factory=list)


def _prepare_arrays(pairs: list[SamplePair], scale: float,
                    pool_kernel: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pooled+normalized inputs (N,3,H,W), gt (N,1,H,W), masks (N,1,H,W)."""
    xs, gts, masks = [], [], []
    for pair in pairs:
        x = assemble_input(pair.input, fgbg_pool(pair.input, kernel=pool_kernel),
                           scale=scale)
        xs.append(x.data[0])
        gts.append(pair.gt.values[None] / scale)
        masks.append(pair.gt.mask[None])
    return np.stack(xs), np.stack(gts), np.stack(masks)


def prepare_batch(pairs: list[SamplePair], scale: float = DEFAULT_INPUT_SCALE_M,
                  pool_kernel: int = DEFAULT_POOL_KERNEL) -> tuple[Tensor, Tensor, Tensor]:
    """Tensors ready for forward/loss: input, normalized gt, validity mask."""
    xs, gts, masks = _prepare_arrays(pairs, scale, pool_kernel)
    return Tensor(xs), Tensor(gts), Tensor(masks)


def train(pairs: list[SamplePair], net_config: NetworkConfig, config: TrainConfig,
          out_dir: str | None = None, params: Parameters | None = None) -> TrainResult:
    """Optimize the network on the given samples; returns params and the log.

    Per step: assemble the batch, forward, compute mode-appropriate losses
    (the error label recomputed from the current residual), combine, backward,
    Adam. With ``out_dir`` set, checkpoints land there at each epoch boundary
    along with train_log.jsonl.
    """
    if not pairs:
        raise ValueError("train: empty dataset")
    h, w = pairs[0].input.values.shape
    if h % 16 != 0 or w % 16 != 0:
        raise ValueError(f"sample dims {h}x{w} not divisible by 16; "
                         "the network cannot run on this dataset")
    for i, pair in enumerate(pairs):
        if pair.input.values.shape != (h, w) or pair.gt.values.shape != (h, w):
            raise ValueError(f"sample {i} shape differs from the first sample")
        if pair.gt.valid_count() == 0:
            raise ValueError(f"sample {i} has an empty ground-truth mask")

    xs, gts, masks = _prepare_arrays(pairs, config.input_scale, config.pool_kernel)
    if params is None:
        params = build(net_config, seed=config.seed)
    state = AdamState(params)
    rng = np.random.default_rng(config.seed)
    log: list[dict] = []
    checkpoints: list[str] = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs), config.batch_size):
            idx = order[start:start + config.batch_size]
            t_start = time.perf_counter()
            x = Tensor(xs[idx])
            gt = Tensor(gts[idx])
            mask = Tensor(masks[idx])
            pred = forward(params, x)
            bundle = compute_losses(pred, gt, mask, net_config.mode,
                                    combiner=config.combiner,
                                    weights=list(config.weights) if config.weights else None,
                                    aleatoric_variant=config.aleatoric_variant)
            table = backward(bundle.loss_total)
            grads = {name: table[t] for name, t in params.items() if t in table}
            adam_step(params, grads, state, config)
            log.append(_log_record(step, epoch, bundle, time.perf_counter() - t_start))
            step += 1
        if out_dir:
            checkpoints.append(save_checkpoint(
                params, os.path.join(out_dir, f"checkpoint_ep{epoch:03d}"),
                extra={"epoch": epoch, "step": step,
                       "train_config": _config_dict(config)}))
    if out_dir:
        checkpoints.append(save_checkpoint(
            params, os.path.join(out_dir, "checkpoint_final"),
            extra={"epoch": config.epochs, "step": step,
                   "train_config": _config_dict(config)}))
        with open(os.path.join(out_dir, "train_log.jsonl"), "w") as fh:
            for record in log:
                fh.write(json.dumps(record) + "\n")
    return TrainResult(params=params, log=log, checkpoints=checkpoints)


def _log_record(step: int, epoch: int, bundle: LossBundle, wall: float) -> dict:
    return {
        "step": step,
        "epoch": epoch,
        "loss_depth": None if bundle.loss_depth is None else bundle.loss_depth.item(),
        "loss_error": None if bundle.loss_error is None else bundle.loss_error.item(),
        "baseline_depth": bundle.baseline_depth,
        "baseline_error": bundle.baseline_error,
        "loss_total": bundle.loss_total.item(),
        "wall_time_s": wall,
    }


def _config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    if d["weights"] is not None:
        d["weights"] = list(d["weights"])
    return d


# ---------------------------------------------------------------------------
# Whole-network gradient check
# ---------------------------------------------------------------------------

def gradcheck_network(net_config: NetworkConfig, seed: int = 0, image: int = 16,
                      eps: float = 1e-3, aleatoric_variant: str = "mse") -> float:
    """Finite-difference check of the full loss graph on a tiny network.

    Frozen quantities (error labels, ratio baselines) are held at their
    base-point values while parameters are perturbed, which is exactly the
    function the backward pass differentiates. Returns the max relative error.
    """
    if net_config.base_channels > 2 or image > 16:
        raise ValueError("gradcheck is restricted to tiny configs "
                         "(base_channels <= 2, image <= 16)")
    rng = np.random.default_rng(seed)
    params = build(net_config, seed=seed)
    x = Tensor(rng.uniform(0.0, 1.0, size=(1, 3, image, image)))
    gt = Tensor(rng.uniform(0.1, 1.0, size=(1, 1, image, image)))
    mask_arr = (rng.random((1, 1, image, image)) < 0.5).astype(float)
    if mask_arr.sum() == 0:
        mask_arr[0, 0, 0, 0] = 1.0
    mask = Tensor(mask_arr)

    mode = net_config.mode

    def live_loss() -> Tensor:
        pred = forward(params, x)
        bundle = compute_losses(pred, gt, mask, mode,
                                aleatoric_variant=aleatoric_variant)
        return bundle.loss_total

    # analytic gradients of the real graph (stop-gradient labels and baselines
    # included) at the base point
    table = backward(live_loss())

    if mode == "aleatoric":
        frozen_loss = live_loss  # no stopped values in the graph
    else:
        base_pred = forward(params, x)
        if mode == "depth-only":
            b_d = max(ag.masked_mse(base_pred.depth, gt, mask).item(), 1e-12)

            def frozen_loss() -> Tensor:
                pred = forward(params, x)
                return ag.mul(ag.masked_mse(pred.depth, gt, mask), ag.scalar(1.0 / b_d))
        else:
            label = Tensor(np.abs(base_pred.depth.data - gt.data) * mask.data)
            b_d = max(ag.masked_mse(base_pred.depth, gt, mask).item(), 1e-12)
            b_e = max(ag.masked_mse(base_pred.error, label, mask).item(), 1e-12)

            def frozen_loss() -> Tensor:
                pred = forward(params, x)
                t1 = ag.mul(ag.masked_mse(pred.depth, gt, mask), ag.scalar(1.0 / b_d))
                t2 = ag.mul(ag.masked_mse(pred.error, label, mask), ag.scalar(1.0 / b_e))
                return ag.add(t1, t2)

    worst = 0.0
    for name, p in params.items():
        analytic = table.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        for flat in range(p.data.size):
            idx = np.unravel_index(flat, p.data.shape)
            orig = p.data[idx]
            p.data[idx] = orig + eps
            f_plus = frozen_loss().item()
            p.data[idx] = orig - eps
            f_minus = frozen_loss().item()
            p.data[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(analytic[idx]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[idx] - numeric) / denom)
    return worst
