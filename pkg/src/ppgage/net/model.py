"""Network definition: stem conv, residual-SE stages, pooled dense head.

The parameter set is a flat name -> array mapping whose order is fixed by the
config, which keeps initialization streams, Adam state, and checkpoint layout
aligned without extra bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInputError, NumericError
from ..streams import derive_rng
from . import ops

# When true, every stage of the forward pass asserts finiteness.
DEBUG_NAN_CHECKS = False


@dataclass(frozen=True)
class NetConfig:
    input_length: int = 100
    stem_channels: int = 16
    stages: tuple[tuple[int, int, int], ...] = ((2, 16, 2), (2, 32, 2))  # (blocks, channels, stride)
    se_reduction: int = 4
    kernel_size: int = 7
    head_hidden: int = 0  # 0 = single dense layer after pooling

    def __post_init__(self):
        if self.input_length < self.kernel_size:
            raise InvalidInputError("input_length must be >= kernel_size")
        if self.se_reduction < 1:
            raise InvalidInputError("se_reduction must be >= 1")
        for n_blocks, channels, stride in self.stages:
            if n_blocks < 1 or stride < 1:
                raise InvalidInputError("stage blocks and stride must be >= 1")
            if channels % self.se_reduction:
                raise InvalidInputError("stage channels must be divisible by se_reduction")

    @property
    def padding(self) -> int:
        return (self.kernel_size - 1) // 2

    def block_layout(self) -> list[tuple[str, int, int, int, bool]]:
        """(prefix, in_channels, out_channels, stride, has_projection) per block."""
        layout = []
        in_ch = self.stem_channels
        for si, (n_blocks, channels, stride) in enumerate(self.stages):
            for bi in range(n_blocks):
                blk_stride = stride if bi == 0 else 1
                proj = blk_stride != 1 or in_ch != channels
                layout.append((f"stage{si}.block{bi}", in_ch, channels, blk_stride, proj))
                in_ch = channels
        return layout

    def array_shapes(self) -> dict[str, tuple[int, ...]]:
        """Ordered name -> shape map for every weight and bias array."""
        k = self.kernel_size
        shapes: dict[str, tuple[int, ...]] = {
            "stem.w": (self.stem_channels, 1, k),
            "stem.b": (self.stem_channels,),
        }
        for prefix, in_ch, out_ch, _, proj in self.block_layout():
            hidden = out_ch // self.se_reduction
            shapes[f"{prefix}.conv1.w"] = (out_ch, in_ch, k)
            shapes[f"{prefix}.conv1.b"] = (out_ch,)
            shapes[f"{prefix}.conv2.w"] = (out_ch, out_ch, k)
            shapes[f"{prefix}.conv2.b"] = (out_ch,)
            shapes[f"{prefix}.se.reduce.w"] = (hidden, out_ch)
            shapes[f"{prefix}.se.reduce.b"] = (hidden,)
            shapes[f"{prefix}.se.expand.w"] = (out_ch, hidden)
            shapes[f"{prefix}.se.expand.b"] = (out_ch,)
            if proj:
                shapes[f"{prefix}.short.w"] = (out_ch, in_ch, 1)
                shapes[f"{prefix}.short.b"] = (out_ch,)
        feat = self.stages[-1][1] if self.stages else self.stem_channels
        if self.head_hidden:
            shapes["head.hidden.w"] = (self.head_hidden, feat)
            shapes["head.hidden.b"] = (self.head_hidden,)
            feat = self.head_hidden
        shapes["head.w"] = (1, feat)
        shapes["head.b"] = (1,)
        return shapes


@dataclass
class ModelParams:
    """All weights and biases, keyed by layer path."""

    config: NetConfig
    arrays: dict[str, np.ndarray] = field(repr=False)

    @property
    def parameter_count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.arrays.values())).dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config, {k: v.astype(dtype) for k, v in self.arrays.items()}
        )


def init_params(config: NetConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Fan-in-scaled uniform weights, zero biases, one RNG stream per layer."""
    arrays: dict[str, np.ndarray] = {}
    for name, shape in config.array_shapes().items():
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        rng = derive_rng(seed, "init", name)
        arrays[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ModelParams(config=config, arrays=arrays)


def _assert_finite(x: np.ndarray, where: str) -> None:
    if DEBUG_NAN_CHECKS and not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values after {where}")


def _block_forward(params: ModelParams, prefix: str, x, stride: int, proj: bool):
    p = params.arrays
    pad = params.config.padding
    conv1, cols1 = ops.conv1d(
        x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"], stride, pad, return_cols=True
    )
    act1 = ops.relu(conv1)
    conv2, cols2 = ops.conv1d(
        act1, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"], 1, pad, return_cols=True
    )
    se_out, se_cache = ops.se_block(
        conv2,
        p[f"{prefix}.se.reduce.w"],
        p[f"{prefix}.se.reduce.b"],
        p[f"{prefix}.se.expand.w"],
        p[f"{prefix}.se.expand.b"],
    )
    if proj:
        shortcut = ops.conv1d(x, p[f"{prefix}.short.w"], p[f"{prefix}.short.b"], stride, 0)
    else:
        shortcut = x
    pre = se_out + shortcut
    out = ops.relu(pre)
    cache = {
        "x": x,
        "conv1": conv1,
        "cols1": cols1,
        "act1": act1,
        "cols2": cols2,
        "se_cache": se_cache,
        "pre": pre,
        "stride": stride,
        "proj": proj,
    }
    return out, cache


def _block_backward(params: ModelParams, prefix: str, cache, dy, grads):
    p = params.arrays
    pad = params.config.padding
    d_pre = ops.relu_backward(dy, cache["pre"])

    d_conv2, se_grads = ops.se_block_backward(
        d_pre,
        cache["se_cache"],
        p[f"{prefix}.se.reduce.w"],
        p[f"{prefix}.se.expand.w"],
    )
    for k, v in se_grads.items():
        grads[f"{prefix}.se.{k}"] = v
    d_act1, dw2, db2 = ops.conv1d_backward(
        d_conv2, cache["act1"], p[f"{prefix}.conv2.w"], 1, pad, cols=cache["cols2"]
    )
    grads[f"{prefix}.conv2.w"] = dw2
    grads[f"{prefix}.conv2.b"] = db2
    d_conv1 = ops.relu_backward(d_act1, cache["conv1"])
    dx, dw1, db1 = ops.conv1d_backward(
        d_conv1, cache["x"], p[f"{prefix}.conv1.w"], cache["stride"], pad, cols=cache["cols1"]
    )
    grads[f"{prefix}.conv1.w"] = dw1
    grads[f"{prefix}.conv1.b"] = db1

    if cache["proj"]:
        dx_short, dws, dbs = ops.conv1d_backward(
            d_pre, cache["x"], p[f"{prefix}.short.w"], cache["stride"], 0
        )
        grads[f"{prefix}.short.w"] = dws
        grads[f"{prefix}.short.b"] = dbs
        dx = dx + dx_short
    else:
        dx = dx + d_pre
    return dx


def forward_with_cache(params: ModelParams, batch: np.ndarray):
    """Predictions (B,) plus the caches needed for the backward pass."""
    config = params.config
    batch = np.asarray(batch)
    if batch.ndim != 3 or batch.shape[1] != 1 or batch.shape[2] != config.input_length:
        raise InvalidInputError(
            f"expected batch shaped (B, 1, {config.input_length}), got {batch.shape}"
        )
    p = params.arrays
    x = batch.astype(params.dtype, copy=False)

    stem_pre, stem_cols = ops.conv1d(
        x, p["stem.w"], p["stem.b"], 1, config.padding, return_cols=True
    )
    stem_out = ops.relu(stem_pre)
    _assert_finite(stem_out, "stem")

    activations = stem_out
    block_caches = []
    for prefix, _, _, stride, proj in config.block_layout():
        activations, cache = _block_forward(params, prefix, activations, stride, proj)
        _assert_finite(activations, prefix)
        block_caches.append((prefix, cache))

    feats = ops.global_avg_pool(activations)
    head_in = feats
    hidden_pre = None
    if config.head_hidden:
        hidden_pre = ops.dense(feats, p["head.hidden.w"], p["head.hidden.b"])
        head_in = ops.relu(hidden_pre)
    out = ops.dense(head_in, p["head.w"], p["head.b"])
    preds = out[:, 0]
    _assert_finite(preds, "head")

    caches = {
        "input": x,
        "stem_pre": stem_pre,
        "stem_cols": stem_cols,
        "blocks": block_caches,
        "pooled_len": activations.shape[2],
        "feats": feats,
        "hidden_pre": hidden_pre,
        "head_in": head_in,
    }
    return preds, caches


def forward(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Predicted ages (years), one per sample."""
    preds, _ = forward_with_cache(params, batch)
    return preds


def backward(params: ModelParams, caches: dict, dpreds: np.ndarray):
    """Gradients for every parameter array plus the input gradient."""
    config = params.config
    p = params.arrays
    grads: dict[str, np.ndarray] = {}

    dout = np.asarray(dpreds, dtype=params.dtype)[:, None]
    d_head_in, dw, db = ops.dense_backward(dout, caches["head_in"], p["head.w"])
    grads["head.w"] = dw
    grads["head.b"] = db
    if config.head_hidden:
        d_hidden = ops.relu_backward(d_head_in, caches["hidden_pre"])
        d_feats, dwh, dbh = ops.dense_backward(d_hidden, caches["feats"], p["head.hidden.w"])
        grads["head.hidden.w"] = dwh
        grads["head.hidden.b"] = dbh
    else:
        d_feats = d_head_in

    dx = ops.global_avg_pool_backward(d_feats, caches["pooled_len"])
    for prefix, cache in reversed(caches["blocks"]):
        dx = _block_backward(params, prefix, cache, dx, grads)

    d_stem = ops.relu_backward(dx, caches["stem_pre"])
    d_input, dws, dbs = ops.conv1d_backward(
        d_stem, caches["input"], p["stem.w"], 1, config.padding, cols=caches["stem_cols"]
    )
    grads["stem.w"] = dws
    grads["stem.b"] = dbs
    return grads, d_input
