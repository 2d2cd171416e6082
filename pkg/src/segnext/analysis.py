"""Exact parameter counts and analytic FLOP counts, layer by layer.

Counting convention: one multiply-accumulate is one FLOP unit; conv bias
adds are folded into the MAC count (not counted separately); normalization,
activations, and elementwise ops cost one unit per output element; bilinear
resizing costs eight units per output element (zero when the size is
unchanged); data movement (concat, reshape, transpose) is free. FLOPs are
for a single image.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from .blocks import BatchNorm, BlockParams, ConvLayer
from .decoder import HamParams, MlpDecoderParams
from .encoder import Encoder
from .model import SegModel
from .tensor import Tensor

CONVENTION = (
    "mac=1 (bias folded in); bn/act/elementwise=1 per output element; "
    "bilinear resize=8 per output element; reshapes free"
)


@dataclass(frozen=True)
class LayerCost:
    name: str
    params: int
    flops: int


@dataclass
class CostReport:
    layers: list[LayerCost]
    input_h: int
    input_w: int
    convention: str = CONVENTION

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def total_flops(self) -> int:
        return sum(l.flops for l in self.layers)

    def table(self) -> str:
        """Aligned text rendering with a totals row."""
        name_w = max(len(l.name) for l in self.layers + [LayerCost("total", 0, 0)])
        lines = [f"{'layer':<{name_w}}  {'params':>12}  {'flops':>16}"]
        for l in self.layers:
            lines.append(f"{l.name:<{name_w}}  {l.params:>12,}  {l.flops:>16,}")
        lines.append(
            f"{'total':<{name_w}}  {self.total_params:>12,}  {self.total_flops:>16,}"
        )
        lines.append(f"input {self.input_h}x{self.input_w}; convention: {self.convention}")
        return "\n".join(lines)

    def machine_lines(self) -> str:
        rows = [f"{l.name}\t{l.params}\t{l.flops}" for l in self.layers]
        rows.append(f"total\t{self.total_params}\t{self.total_flops}")
        return "\n".join(rows)


def count_params(model) -> int:
    """Learnable scalars of anything exposing a ``parameters()`` registry."""
    return sum(e.tensor.size for e in model.parameters())


def _conv_params(layer: ConvLayer) -> int:
    n = layer.weight.size
    if layer.bias is not None:
        n += layer.bias.size
    return n


def _conv_cost(name: str, layer: ConvLayer, h: int, w: int) -> tuple[LayerCost, int, int]:
    spec = layer.spec
    oh, ow = spec.out_size(h, w)
    macs = oh * ow * spec.out_channels * (spec.in_channels // spec.groups) * (
        spec.kernel[0] * spec.kernel[1]
    )
    return LayerCost(name, _conv_params(layer), macs), oh, ow


def _norm_cost(name: str, bn: BatchNorm, c: int, h: int, w: int) -> LayerCost:
    return LayerCost(name, bn.gamma.size + bn.beta.size, c * h * w)


def _resize_flops(c: int, from_hw: tuple[int, int], to_hw: tuple[int, int]) -> int:
    if from_hw == to_hw:
        return 0
    return 8 * c * to_hw[0] * to_hw[1]


def _block_costs(prefix: str, b: BlockParams, c: int, h: int, w: int) -> list[LayerCost]:
    out: list[LayerCost] = []
    elems = c * h * w
    out.append(_norm_cost(f"{prefix}.norm1", b.norm1, c, h, w))
    lc, _, _ = _conv_cost(f"{prefix}.attn_in", b.attn_in, h, w)
    out.append(lc)
    attn = b.attn
    lc, _, _ = _conv_cost(f"{prefix}.attn.local_dw", attn.local_dw, h, w)
    out.append(lc)
    for i, (horiz, vert) in enumerate(attn.branches):
        ch, _, _ = _conv_cost(f"{prefix}.attn.branch{i}.h", horiz, h, w)
        cv, _, _ = _conv_cost(f"{prefix}.attn.branch{i}.v", vert, h, w)
        out.append(LayerCost(f"{prefix}.attn.branch{i}", ch.params + cv.params,
                             ch.flops + cv.flops))
    lc, _, _ = _conv_cost(f"{prefix}.attn.channel_mix", attn.channel_mix, h, w)
    out.append(lc)
    lc, _, _ = _conv_cost(f"{prefix}.attn_out", b.attn_out, h, w)
    out.append(lc)
    out.append(_norm_cost(f"{prefix}.norm2", b.norm2, c, h, w))
    lc, _, _ = _conv_cost(f"{prefix}.ffn_expand", b.ffn_expand, h, w)
    out.append(lc)
    lc, _, _ = _conv_cost(f"{prefix}.ffn_dw", b.ffn_dw, h, w)
    out.append(lc)
    lc, _, _ = _conv_cost(f"{prefix}.ffn_project", b.ffn_project, h, w)
    out.append(lc)
    # Activations, branch sums, the attention gate, layer scales, residuals.
    hidden = b.ffn_dw.spec.out_channels * h * w
    n_branch_adds = len(attn.branches) if attn.multi_scale else 0
    eltwise = (
        elems  # gelu after attn_in
        + n_branch_adds * elems  # branch sums
        + elems  # attention multiply
        + 2 * elems  # layer scale 1 + residual add
        + hidden  # gelu in ffn
        + 2 * elems  # layer scale 2 + residual add
    )
    out.append(
        LayerCost(f"{prefix}.elementwise", b.layer_scale1.size + b.layer_scale2.size, eltwise)
    )
    return out


def encoder_costs(enc: Encoder, input_h: int, input_w: int) -> list[LayerCost]:
    out: list[LayerCost] = []
    h, w = input_h, input_w
    for si, stage in enumerate(enc.stages, start=1):
        sp = f"encoder.stage{si}"
        c = enc.cfg.stages[si - 1].channels
        for di, down in enumerate(stage.downsample):
            lc, h, w = _conv_cost(f"{sp}.down{di}.conv", down.conv, h, w)
            out.append(lc)
            cc = down.conv.spec.out_channels
            out.append(_norm_cost(f"{sp}.down{di}.norm", down.norm, cc, h, w))
        for bi, block in enumerate(stage.blocks):
            out.extend(_block_costs(f"{sp}.block{bi}", block, c, h, w))
    return out


def _stage_grids(enc: Encoder, input_h: int, input_w: int) -> list[tuple[int, int]]:
    """Spatial sizes of the four stage outputs for a given input."""
    grids = []
    h, w = input_h, input_w
    for stage in enc.stages:
        for down in stage.downsample:
            h, w = down.conv.spec.out_size(h, w)
        grids.append((h, w))
    return grids


def _nmf_flops(c: int, rank: int, hw: int, iters: int) -> int:
    per_iter = (
        rank * c * hw  # Wt X
        + rank * c * rank  # Wt W
        + rank * rank * hw  # (Wt W) H
        + 3 * rank * hw  # eps, mul, div on codes
        + c * hw * rank  # X Ht
        + rank * hw * rank  # H Ht
        + c * rank * rank  # W (H Ht)
        + 3 * c * rank  # eps, mul, div on bases
    )
    return iters * per_iter + c * rank * hw  # plus final reconstruction


def decoder_costs(model: SegModel, input_h: int, input_w: int) -> list[LayerCost]:
    cfg = model.cfg
    dec = model.decoder
    grids = _stage_grids(model.encoder, input_h, input_w)
    chans = cfg.channels
    out: list[LayerCost] = []
    k = cfg.num_classes

    if isinstance(dec, HamParams):
        first = 0 if dec.include_stage1 else 1
        gh, gw = grids[first]
        resize = sum(
            _resize_flops(chans[i], grids[i], (gh, gw)) for i in range(first + 1, 4)
        )
        out.append(LayerCost("decoder.gather_resize", 0, resize))
        lc, _, _ = _conv_cost("decoder.pre_proj", dec.pre_proj, gh, gw)
        out.append(lc)
        dim = dec.pre_proj.spec.out_channels
        elems = dim * gh * gw
        out.append(LayerCost("decoder.rectify", 0, elems))
        out.append(
            LayerCost("decoder.nmf", 0, _nmf_flops(dim, dec.rank, gh * gw, dec.iters))
        )
        lc, _, _ = _conv_cost("decoder.post_proj", dec.post_proj, gh, gw)
        out.append(lc)
        out.append(LayerCost("decoder.residual", 0, elems))
        lc, _, _ = _conv_cost("decoder.classifier", dec.classifier, gh, gw)
        out.append(lc)
        out.append(
            LayerCost(
                "decoder.upsample", 0, _resize_flops(k, (gh, gw), (input_h, input_w))
            )
        )
    elif isinstance(dec, MlpDecoderParams):
        gh, gw = grids[0]
        dim = dec.fuse.spec.out_channels
        for i, proj in enumerate(dec.projs):
            lc, _, _ = _conv_cost(f"decoder.proj{i}", proj, *grids[i])
            out.append(lc)
        resize = sum(_resize_flops(dim, grids[i], (gh, gw)) for i in range(1, 4))
        out.append(LayerCost("decoder.gather_resize", 0, resize))
        lc, _, _ = _conv_cost("decoder.fuse", dec.fuse, gh, gw)
        out.append(lc)
        lc, _, _ = _conv_cost("decoder.classifier", dec.classifier, gh, gw)
        out.append(lc)
        out.append(
            LayerCost(
                "decoder.upsample", 0, _resize_flops(k, (gh, gw), (input_h, input_w))
            )
        )
    else:
        gh, gw = grids[3]
        dim = dec.refine1.spec.out_channels
        lc, _, _ = _conv_cost("decoder.refine1", dec.refine1, gh, gw)
        out.append(lc)
        out.append(_norm_cost("decoder.refine_norm1", dec.refine_norm1, dim, gh, gw))
        out.append(LayerCost("decoder.refine_act1", 0, dim * gh * gw))
        lc, _, _ = _conv_cost("decoder.refine2", dec.refine2, gh, gw)
        out.append(lc)
        out.append(_norm_cost("decoder.refine_norm2", dec.refine_norm2, dim, gh, gw))
        out.append(LayerCost("decoder.refine_act2", 0, dim * gh * gw))
        lc, _, _ = _conv_cost("decoder.classifier", dec.classifier, gh, gw)
        out.append(lc)
        out.append(
            LayerCost(
                "decoder.upsample", 0, _resize_flops(k, (gh, gw), (input_h, input_w))
            )
        )
    return out


def cost_report(model: SegModel, input_h: int, input_w: int) -> CostReport:
    layers = encoder_costs(model.encoder, input_h, input_w)
    layers += decoder_costs(model, input_h, input_w)
    return CostReport(layers, input_h, input_w)


def count_flops(model: SegModel, input_h: int, input_w: int) -> int:
    return cost_report(model, input_h, input_w).total_flops


@dataclass
class LatencyStats:
    median_ms: float
    p90_ms: float
    reps: int
    warmup: int
    cpu_count: int
    thread_env: dict[str, str]

    def __str__(self) -> str:
        env = ", ".join(f"{k}={v}" for k, v in self.thread_env.items()) or "unset"
        return (
            f"median {self.median_ms:.2f} ms  p90 {self.p90_ms:.2f} ms  "
            f"({self.reps} reps, {self.warmup} warmup, {self.cpu_count} cpus, {env})"
        )


_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def bench_latency(model: SegModel, input_h: int, input_w: int,
                  warmup: int = 1, reps: int = 5, seed: int = 0) -> LatencyStats:
    """Wall-clock single-image forward latency; informational only."""
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    if warmup < 0:
        raise ValueError(f"warmup must be >= 0, got {warmup}")
    rng = np.random.default_rng(seed)
    x = Tensor(rng.random((1, 3, input_h, input_w), dtype=np.float32))
    for _ in range(warmup):
        model.forward(x)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        model.forward(x)
        times.append((time.perf_counter() - t0) * 1000.0)
    arr = np.asarray(times)
    return LatencyStats(
        median_ms=float(np.median(arr)),
        p90_ms=float(np.percentile(arr, 90)),
        reps=reps,
        warmup=warmup,
        cpu_count=os.cpu_count() or 1,
        thread_env={k: os.environ[k] for k in _THREAD_VARS if k in os.environ},
    )
