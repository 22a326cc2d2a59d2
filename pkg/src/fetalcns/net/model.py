"""Parameter layout, initialization, forward evaluation and reverse-mode
gradients of the residual classifier.

Parameter names follow a fixed scheme, fully determined by the config:

    stem.conv.weight                      stem.bn.{weight,bias,running_mean,running_var}
    stage{i}.block{j}.conv1.weight        stage{i}.block{j}.bn1.{...}
    stage{i}.block{j}.conv2.weight        stage{i}.block{j}.bn2.{...}
    stage{i}.block{j}.shortcut.conv.weight  stage{i}.block{j}.shortcut.bn.{...}
    head.fc.weight                        head.fc.bias

with ``i`` in 1..4 and ``j`` 0-based; the shortcut entries exist only where a
block changes resolution or width. ``running_mean``/``running_var`` are
statistics buffers: they are checkpointed and appear in gradient maps (as
zeros) but are never optimizer-updated.

Normalization layers always normalize by their running statistics (momentum
0.1, eps 1e-5), so evaluation is deterministic and gradients are exact
affine-layer gradients; during training the running statistics are refreshed
from each batch between optimizer steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, LabelError, ShapeError
from . import ops
from .config import BN_MOMENTUM, NetConfig

_BN_PARTS = ("weight", "bias", "running_mean", "running_var")


@dataclass
class ParameterSet:
    """Named map of parameter arrays (float32 storage)."""

    arrays: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.arrays[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def names(self) -> list[str]:
        return list(self.arrays)

    def items(self):
        return self.arrays.items()

    @staticmethod
    def is_buffer(name: str) -> bool:
        return name.endswith(("running_mean", "running_var"))

    def trainable_names(self) -> list[str]:
        return [n for n in self.arrays if not self.is_buffer(n)]

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> dict[str, np.ndarray]:
        return {k: v.astype(dtype, copy=False) for k, v in self.arrays.items()}


def _block_plan(config: NetConfig):
    """Yield (stage_index_1based, block_index, in_ch, out_ch, stride, has_shortcut)."""
    in_ch = config.stage_channels[0]
    for s, (blocks, out_ch) in enumerate(
        zip(config.stage_blocks, config.stage_channels), start=1
    ):
        for j in range(blocks):
            stride = 2 if (s > 1 and j == 0) else 1
            has_shortcut = stride != 1 or in_ch != out_ch
            yield s, j, in_ch, out_ch, stride, has_shortcut
            in_ch = out_ch


def parameter_spec(config: NetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list; storage/checkpoint order."""
    spec: list[tuple[str, tuple[int, ...]]] = []

    def bn(prefix: str, ch: int):
        for part in _BN_PARTS:
            spec.append((f"{prefix}.{part}", (ch,)))

    c0 = config.stage_channels[0]
    spec.append(("stem.conv.weight", (c0, config.input_channels, 7, 7)))
    bn("stem.bn", c0)
    for s, j, in_ch, out_ch, _stride, has_shortcut in _block_plan(config):
        base = f"stage{s}.block{j}"
        spec.append((f"{base}.conv1.weight", (out_ch, in_ch, 3, 3)))
        bn(f"{base}.bn1", out_ch)
        spec.append((f"{base}.conv2.weight", (out_ch, out_ch, 3, 3)))
        bn(f"{base}.bn2", out_ch)
        if has_shortcut:
            spec.append((f"{base}.shortcut.conv.weight", (out_ch, in_ch, 1, 1)))
            bn(f"{base}.shortcut.bn", out_ch)
    spec.append(("head.fc.weight", (config.num_classes, config.stage_channels[3])))
    spec.append(("head.fc.bias", (config.num_classes,)))
    return spec


def build_model(config: NetConfig, seed: int) -> ParameterSet:
    """Fan-in-scaled normal initialization, deterministic in (config, seed)."""
    rng = np.random.default_rng(seed % 2**64)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in parameter_spec(config):
        if len(shape) >= 2:  # conv and classifier weights
            fan_in = int(np.prod(shape[1:]))
            arrays[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(
                np.float32
            )
        elif name.endswith(("bn.weight", "bn1.weight", "bn2.weight", "running_var")):
            arrays[name] = np.ones(shape, dtype=np.float32)
        else:  # normalization biases, running means, classifier bias
            arrays[name] = np.zeros(shape, dtype=np.float32)
    return ParameterSet(arrays)


@dataclass
class ForwardCapture:
    """Single-image forward with the final-stage feature map retained."""

    logits: np.ndarray  # (num_classes,)
    last_conv_activations: np.ndarray  # (C, H, W) of the final stage output


def _check_batch(config: NetConfig, batch: np.ndarray) -> None:
    if batch.ndim != 4 or batch.shape[1] != config.input_channels:
        raise ShapeError(
            f"expected batch of shape N×{config.input_channels}×H×W, got {batch.shape}"
        )


def _bn_step(p, prefix, x, tape, stats):
    out, cache, batch_stats = ops.batchnorm_forward(
        x,
        p[f"{prefix}.weight"],
        p[f"{prefix}.bias"],
        p[f"{prefix}.running_mean"],
        p[f"{prefix}.running_var"],
        want_batch_stats=stats is not None,
        reuse_input=True,  # conv outputs are consumed only here
    )
    tape[prefix] = cache
    if stats is not None:
        stats[prefix] = batch_stats
    return out


def calibrate_running_stats(
    params: ParameterSet, batch: np.ndarray, config: NetConfig
) -> None:
    """Set every normalization layer's running statistics from one batch.

    Walks the forward pass once; each layer's statistics are assigned just
    before that layer is applied, so downstream layers see already-calibrated
    inputs. Used at the start of training from a fresh initialization, where
    the placeholder (0, 1) statistics would otherwise let activation scales
    drift with depth.
    """
    _check_batch(config, batch)
    p = params.astype(np.float64)
    x = np.ascontiguousarray(batch, dtype=np.float64)

    def fit(prefix: str, value: np.ndarray) -> np.ndarray:
        mean = value.mean(axis=(0, 2, 3))
        var = value.var(axis=(0, 2, 3))
        params[f"{prefix}.running_mean"] = mean.astype(np.float32)
        params[f"{prefix}.running_var"] = var.astype(np.float32)
        p[f"{prefix}.running_mean"] = mean
        p[f"{prefix}.running_var"] = var
        out, _, _ = ops.batchnorm_forward(
            value, p[f"{prefix}.weight"], p[f"{prefix}.bias"], mean, var
        )
        return out

    out, _ = ops.conv2d_forward(x, p["stem.conv.weight"], stride=2, pad=3, keep_cols=False)
    out = fit("stem.bn", out)
    out, _ = ops.relu_forward(out)
    if config.stem_pool:
        out, _ = ops.maxpool3x3s2_forward(out)
    for s, j, _in_ch, _out_ch, stride, has_shortcut in _block_plan(config):
        base = f"stage{s}.block{j}"
        identity = out
        if has_shortcut:
            identity, _ = ops.conv2d_forward(
                out, p[f"{base}.shortcut.conv.weight"], stride=stride, pad=0, keep_cols=False
            )
            identity = fit(f"{base}.shortcut.bn", identity)
        h, _ = ops.conv2d_forward(
            out, p[f"{base}.conv1.weight"], stride=stride, pad=1, keep_cols=False
        )
        h = fit(f"{base}.bn1", h)
        h, _ = ops.relu_forward(h)
        h, _ = ops.conv2d_forward(h, p[f"{base}.conv2.weight"], stride=1, pad=1, keep_cols=False)
        h = fit(f"{base}.bn2", h)
        out, _ = ops.relu_forward(h + identity)


def _forward_pass(
    p: dict[str, np.ndarray],
    config: NetConfig,
    x: np.ndarray,
    keep_tape: bool,
    collect_stats: bool = False,
):
    """Shared forward walk. Returns (logits, last_stage_out, tape, stats).

    ``tape`` holds per-layer caches keyed by parameter prefix; ``stats``
    holds per-normalization batch statistics when requested.
    """
    tape: dict = {}
    stats: dict | None = {} if collect_stats else None

    out, cache = ops.conv2d_forward(x, p["stem.conv.weight"], stride=2, pad=3, keep_cols=keep_tape)
    tape["stem.conv"] = cache
    out = _bn_step(p, "stem.bn", out, tape, stats)
    out, tape["stem.relu"] = ops.relu_forward(out, inplace=True)
    if config.stem_pool:
        out, tape["stem.pool"] = ops.maxpool3x3s2_forward(out)

    for s, j, _in_ch, _out_ch, stride, has_shortcut in _block_plan(config):
        base = f"stage{s}.block{j}"
        identity = out
        if has_shortcut:
            identity, cache = ops.conv2d_forward(
                out, p[f"{base}.shortcut.conv.weight"], stride=stride, pad=0,
                keep_cols=keep_tape,
            )
            tape[f"{base}.shortcut.conv"] = cache
            identity = _bn_step(p, f"{base}.shortcut.bn", identity, tape, stats)
        h, cache = ops.conv2d_forward(
            out, p[f"{base}.conv1.weight"], stride=stride, pad=1, keep_cols=keep_tape
        )
        tape[f"{base}.conv1"] = cache
        h = _bn_step(p, f"{base}.bn1", h, tape, stats)
        h, tape[f"{base}.relu1"] = ops.relu_forward(h, inplace=True)
        h, cache = ops.conv2d_forward(
            h, p[f"{base}.conv2.weight"], stride=1, pad=1, keep_cols=keep_tape
        )
        tape[f"{base}.conv2"] = cache
        h = _bn_step(p, f"{base}.bn2", h, tape, stats)
        out, tape[f"{base}.relu2"] = ops.relu_forward(h + identity, inplace=True)
        if not keep_tape:
            tape = {}

    last_stage = out
    pooled, tape["gap"] = ops.global_avgpool_forward(out)
    logits, tape["fc"] = ops.linear_forward(pooled, p["head.fc.weight"], p["head.fc.bias"])
    return logits, last_stage, tape, stats


def forward(
    params: ParameterSet,
    batch: np.ndarray,
    config: NetConfig,
    compute_dtype=np.float32,
) -> np.ndarray:
    """Logits for a normalized batch, N×num_classes. Deterministic."""
    _check_batch(config, batch)
    p = params.astype(compute_dtype)
    x = np.ascontiguousarray(batch, dtype=compute_dtype)
    logits, _, _, _ = _forward_pass(p, config, x, keep_tape=False)
    return logits


def forward_with_capture(
    params: ParameterSet, image: np.ndarray, config: NetConfig, compute_dtype=np.float32
) -> ForwardCapture:
    """Forward of one 3×H×W image, exposing the final-stage feature map."""
    if image.ndim != 3:
        raise ShapeError(f"expected a single C×H×W image, got shape {image.shape}")
    batch = np.ascontiguousarray(image[None], dtype=compute_dtype)
    _check_batch(config, batch)
    p = params.astype(compute_dtype)
    logits, last_stage, _, _ = _forward_pass(p, config, batch, keep_tape=False)
    return ForwardCapture(logits=logits[0], last_conv_activations=last_stage[0])


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, numerically shifted, accumulated in float64."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _weighted_ce(logits: np.ndarray, labels: np.ndarray, class_weights: np.ndarray):
    """Weighted-mean cross entropy and its logit gradient.

    loss = sum_n w[y_n] * (-log p_n[y_n]) / sum_n w[y_n]; a zero weight sum
    (every sample in a zero-weight class) yields loss 0 and zero gradients.
    """
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise LabelError(f"labels must lie in [0,{c}), got range "
                         f"[{labels.min()},{labels.max()}]")
    probs = softmax(logits)
    wn = class_weights[labels].astype(np.float64)
    denom = wn.sum()
    logp = np.log(np.maximum(probs[np.arange(n), labels], np.finfo(np.float64).tiny))
    if denom == 0.0:
        return 0.0, np.zeros_like(probs)
    loss = float(-(wn * logp).sum() / denom)
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad *= (wn / denom)[:, None]
    return loss, grad


def loss_value(
    params: ParameterSet,
    batch: np.ndarray,
    labels: np.ndarray,
    class_weights: np.ndarray,
    config: NetConfig,
    compute_dtype=np.float32,
) -> float:
    """Weighted cross-entropy of a batch (no gradients)."""
    logits = forward(params, batch, config, compute_dtype=compute_dtype)
    loss, _ = _weighted_ce(logits, np.asarray(labels), np.asarray(class_weights))
    return loss


def gradients(
    params: ParameterSet,
    batch: np.ndarray,
    labels: np.ndarray,
    class_weights: np.ndarray,
    config: NetConfig,
    compute_dtype=np.float32,
    update_running_stats: bool = False,
) -> tuple[float, dict[str, np.ndarray]]:
    """Weighted-cross-entropy loss and its gradient w.r.t. every parameter.

    The gradient map carries exactly the ParameterSet names and shapes;
    statistics buffers get zero entries. When ``update_running_stats`` is set
    the running buffers inside ``params`` are refreshed from this batch's
    statistics (float32, momentum 0.1) after the backward pass.
    """
    _check_batch(config, batch)
    labels = np.asarray(labels)
    p = params.astype(compute_dtype)
    x = np.ascontiguousarray(batch, dtype=compute_dtype)
    logits, _, tape, stats = _forward_pass(
        p, config, x, keep_tape=True, collect_stats=update_running_stats
    )
    loss, dlogits = _weighted_ce(logits, labels, np.asarray(class_weights))
    dlogits = dlogits.astype(compute_dtype)

    grads: dict[str, np.ndarray] = {}

    def bn_back(prefix, d):
        dx, dgamma, dbeta = ops.batchnorm_backward(d, tape[prefix])
        grads[f"{prefix}.weight"] = dgamma
        grads[f"{prefix}.bias"] = dbeta
        grads[f"{prefix}.running_mean"] = np.zeros_like(p[f"{prefix}.running_mean"])
        grads[f"{prefix}.running_var"] = np.zeros_like(p[f"{prefix}.running_var"])
        return dx

    d, dw_fc, db_fc = ops.linear_backward(dlogits, p["head.fc.weight"], tape["fc"])
    grads["head.fc.weight"] = dw_fc
    grads["head.fc.bias"] = db_fc
    d = ops.global_avgpool_backward(d, tape["gap"])

    for s, j, _in_ch, _out_ch, _stride, has_shortcut in reversed(list(_block_plan(config))):
        base = f"stage{s}.block{j}"
        d = ops.relu_backward(d, tape[f"{base}.relu2"])
        d_identity = d
        dh = bn_back(f"{base}.bn2", d)
        dh, dw = ops.conv2d_backward(dh, p[f"{base}.conv2.weight"], tape[f"{base}.conv2"])
        grads[f"{base}.conv2.weight"] = dw
        dh = ops.relu_backward(dh, tape[f"{base}.relu1"])
        dh = bn_back(f"{base}.bn1", dh)
        dh, dw = ops.conv2d_backward(dh, p[f"{base}.conv1.weight"], tape[f"{base}.conv1"])
        grads[f"{base}.conv1.weight"] = dw
        if has_shortcut:
            ds = bn_back(f"{base}.shortcut.bn", d_identity)
            ds, dw = ops.conv2d_backward(
                ds, p[f"{base}.shortcut.conv.weight"], tape[f"{base}.shortcut.conv"]
            )
            grads[f"{base}.shortcut.conv.weight"] = dw
            d = dh + ds
        else:
            d = dh + d_identity

    if config.stem_pool:
        d = ops.maxpool3x3s2_backward(d, tape["stem.pool"])
    d = ops.relu_backward(d, tape["stem.relu"])
    d = bn_back("stem.bn", d)
    _, dw = ops.conv2d_backward(d, p["stem.conv.weight"], tape["stem.conv"], need_dx=False)
    grads["stem.conv.weight"] = dw

    if update_running_stats:
        for prefix, batch_stats in stats.items():
            new_mean, new_var = ops.batchnorm_stat_update(
                batch_stats,
                params[prefix + ".running_mean"].astype(np.float64),
                params[prefix + ".running_var"].astype(np.float64),
                BN_MOMENTUM,
            )
            params[prefix + ".running_mean"] = new_mean.astype(np.float32)
            params[prefix + ".running_var"] = new_var.astype(np.float32)

    ordered = {
        name: np.ascontiguousarray(grads[name], dtype=compute_dtype)
        for name, _ in parameter_spec(config)
    }
    return loss, ordered


def last_stage_logit_gradient(
    params: ParameterSet, capture: ForwardCapture, class_index: int
) -> np.ndarray:
    """Gradient of one class logit w.r.t. the captured final-stage activations.

    The head is global average pooling followed by the linear classifier, so
    the exact reverse-mode gradient is the class row of the classifier weight
    spread uniformly over the spatial grid.
    """
    fc_w = params["head.fc.weight"]
    if not 0 <= class_index < fc_w.shape[0]:
        raise LabelError(f"class index {class_index} outside [0,{fc_w.shape[0]})")
    c, h, w = capture.last_conv_activations.shape
    if fc_w.shape[1] != c:
        raise ShapeError(
            f"classifier expects {fc_w.shape[1]} channels, capture has {c}"
        )
    col = fc_w[class_index].astype(np.float64) / (h * w)
    return np.broadcast_to(col[:, None, None], (c, h, w)).copy()
