"""Toy anchor-free multi-scale detector.

Backbone of conv-relu-pool stages, an FPN-style neck (1x1 laterals,
top-down nearest upsampling with elementwise adds, 3x3 smoothing conv per
scale) and a head shared across scales with separate 1x1 classification and
box branches.  Box regressions are (left, top, right, bottom) cell-center
distances in stride units.  No batch normalization anywhere, so physically
pruning a channel is exactly equivalent to zeroing it.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


@dataclass
class ArchConfig:
    widths: tuple = (16, 32, 64)
    c_neck: int = 32
    num_scales: int = 3
    num_classes: int = 4
    # fixed multiplier on the neck feature maps; stands in for the feature
    # normalization layers of larger detectors by bounding the activation
    # scale the regularizers see
    neck_scale: float = 0.0625

    def __post_init__(self):
        if any(w <= 0 for w in self.widths) or self.c_neck <= 0:
            raise ShapeError("layer widths must be positive")
        if not self.neck_scale > 0:
            raise ShapeError("neck_scale must be positive")
        if not 1 <= self.num_scales <= 3:
            raise ShapeError("num_scales must be 1..3")


# per-scale FCOS size ranges on max(l,t,r,b), in pixels
DEFAULT_SIZE_RANGES = ((0.0, 32.0), (32.0, 64.0), (64.0, 1e9))


@dataclass
class LayerSpec:
    lid: str
    kind: str                 # input | conv | relu | pool | upsample | add
    inputs: list
    wname: str = ""
    bname: str = ""
    pad: int = 0
    in_ch: int = 0
    out_ch: int = 0
    cum_stride: int = 1


@dataclass
class ModelGraph:
    arch: ArchConfig
    layers: list
    params: dict              # name -> Tensor
    neck_outputs: list        # (layer id, stride) per scale, finest first
    head_cls: list            # layer ids per scale
    head_box: list
    ldt_trained: bool = False
    by_id: dict = field(default_factory=dict)

    def __post_init__(self):
        self.by_id = {l.lid: l for l in self.layers}

    def conv_layers(self):
        return [l for l in self.layers if l.kind == "conv"]

    def param_layers(self):
        """Map conv weight param name -> layers applying it (shared head
        weights are applied once per scale)."""
        out = {}
        for l in self.conv_layers():
            out.setdefault(l.wname, []).append(l)
        return out


def _conv_param_shapes(graph):
    shapes = {}
    for l in graph.conv_layers():
        k = 3 if l.pad == 1 else 1
        shapes.setdefault(l.wname, (l.out_ch, l.in_ch, k, k))
    return shapes


def parameter_count(graph):
    """Total parameters: shared head weights counted once."""
    total = 0
    for wname, (co, ci, kh, kw) in _conv_param_shapes(graph).items():
        total += co * (ci * kh * kw + 1)
    return total


def mac_count(graph, image_size):
    """Multiply-accumulates of one forward pass at the given image size."""
    total = 0
    for l in graph.conv_layers():
        k = 3 if l.pad == 1 else 1
        hw = (image_size // l.cum_stride) ** 2
        total += l.out_ch * l.in_ch * k * k * hw
    return total


def build_model(arch, seed=0):
    """Construct the graph and initialize parameters from the seed.

    Initialization is scaled-uniform fan-in: U(-1/sqrt(fan_in), +1/sqrt(fan_in)).
    The classification bias starts at -2 so the untrained detector predicts
    background nearly everywhere.
    """
    s_count = arch.num_scales
    w1, w2, w3 = arch.widths
    cn = arch.c_neck
    g = arch.num_classes

    layers = []
    specs = []  # (wname, out_ch, in_ch, k) in creation order, for init

    def conv(lid, src, wname, in_ch, out_ch, k, stride_mult=1):
        prev = by_id[src]
        layers.append(
            LayerSpec(
                lid=lid, kind="conv", inputs=[src], wname=wname,
                bname=wname.replace("_w", "_b"), pad=(k // 2),
                in_ch=in_ch, out_ch=out_ch, cum_stride=prev.cum_stride,
            )
        )
        by_id[lid] = layers[-1]
        if wname not in seen_params:
            seen_params.add(wname)
            specs.append((wname, out_ch, in_ch, k))

    def unary(lid, kind, src):
        prev = by_id[src]
        cs = prev.cum_stride
        if kind == "pool":
            cs *= 2
        elif kind == "upsample":
            cs //= 2
        layers.append(
            LayerSpec(
                lid=lid, kind=kind, inputs=[src],
                in_ch=prev.out_ch, out_ch=prev.out_ch, cum_stride=cs,
            )
        )
        by_id[lid] = layers[-1]

    def addn(lid, a, b):
        pa, pb = by_id[a], by_id[b]
        if pa.out_ch != pb.out_ch:
            raise ShapeError(f"add {lid}: channel mismatch {pa.out_ch} vs {pb.out_ch}")
        layers.append(
            LayerSpec(
                lid=lid, kind="add", inputs=[a, b],
                in_ch=pa.out_ch, out_ch=pa.out_ch, cum_stride=pa.cum_stride,
            )
        )
        by_id[lid] = layers[-1]

    by_id = {}
    seen_params = set()
    layers.append(LayerSpec(lid="input", kind="input", inputs=[], out_ch=3))
    by_id["input"] = layers[0]

    # backbone: stages at strides 2, 4, 8, 16; scales tap stages 2..4
    stage_widths = [w1, w2, w3, w3]
    n_stages = 1 + s_count
    prev = "input"
    prev_ch = 3
    taps = []
    for i in range(n_stages):
        wd = stage_widths[i]
        conv(f"b{i + 1}_conv", prev, f"b{i + 1}_w", prev_ch, wd, 3)
        unary(f"b{i + 1}_relu", "relu", f"b{i + 1}_conv")
        unary(f"b{i + 1}_pool", "pool", f"b{i + 1}_relu")
        prev = f"b{i + 1}_pool"
        prev_ch = wd
        if i >= 1:
            taps.append((prev, prev_ch))

    # neck: laterals + top-down path + smoothing convs
    for s, (src, ch) in enumerate(taps):
        conv(f"lat{s}", src, f"lat{s}_w", ch, cn, 1)
    top = s_count - 1
    td = {top: f"lat{top}"}
    for s in range(top - 1, -1, -1):
        unary(f"up{s + 1}", "upsample", td[s + 1])
        addn(f"td{s}", f"lat{s}", f"up{s + 1}")
        td[s] = f"td{s}"
    neck_outputs = []
    for s in range(s_count):
        conv(f"smooth{s}", td[s], f"smooth{s}_w", cn, cn, 3)
        unary(f"neck{s}", "relu", f"smooth{s}")
        neck_outputs.append((f"neck{s}", 4 * (2 ** s)))

    # shared head applied per scale
    head_cls, head_box = [], []
    for s in range(s_count):
        conv(f"h1@{s}", f"neck{s}", "h1_w", cn, cn, 3)
        unary(f"h1r@{s}", "relu", f"h1@{s}")
        conv(f"h2@{s}", f"h1r@{s}", "h2_w", cn, cn, 3)
        unary(f"h2r@{s}", "relu", f"h2@{s}")
        conv(f"cls@{s}", f"h2r@{s}", "cls_w", cn, g, 1)
        conv(f"box@{s}", f"h2r@{s}", "box_w", cn, 4, 1)
        head_cls.append(f"cls@{s}")
        head_box.append(f"box@{s}")

    rng = np.random.Generator(np.random.Philox(key=(seed, 0xA11C)))
    params = {}
    for wname, co, ci, k in specs:
        bound = 1.0 / np.sqrt(ci * k * k)
        params[wname] = Tensor(
            rng.uniform(-bound, bound, size=(co, ci, k, k)).astype(np.float32)
        )
        bname = wname.replace("_w", "_b")
        if wname == "cls_w":
            params[bname] = Tensor(np.full(co, -2.0, dtype=np.float32))
        else:
            params[bname] = Tensor(
                rng.uniform(-bound, bound, size=co).astype(np.float32)
            )

    return ModelGraph(
        arch=arch, layers=layers, params=params,
        neck_outputs=neck_outputs, head_cls=head_cls, head_box=head_box,
    )


def forward(graph, images, channel_mask=None):
    """Run the graph; returns (activations dict, neck features, head outputs).

    ``images`` may be a Tensor or numpy [N,3,H,W].  ``channel_mask`` maps a
    conv weight param name to a 0/1 keep vector applied to that conv's
    output (used for the pruning equivalence check).
    """
    if not isinstance(images, Tensor):
        images = Tensor(images)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"expected [N,3,H,W] images, got {images.shape}")
    max_stride = max(s for _, s in graph.neck_outputs)
    if images.shape[2] % max_stride or images.shape[3] % max_stride:
        raise ShapeError(
            f"image dims {images.shape[2:]} not divisible by stride {max_stride}"
        )
    neck_lids = {lid for lid, _ in graph.neck_outputs}
    acts = {}
    for l in graph.layers:
        if l.kind == "input":
            acts[l.lid] = images
        elif l.kind == "conv":
            out = T.conv2d(
                acts[l.inputs[0]], graph.params[l.wname],
                graph.params[l.bname], stride=1, pad=l.pad,
            )
            if channel_mask and l.wname in channel_mask:
                m = np.asarray(channel_mask[l.wname], dtype=np.float32)
                out = T.mul_const(out, m[None, :, None, None])
            acts[l.lid] = out
        elif l.kind == "relu":
            out = T.relu(acts[l.inputs[0]])
            if l.lid in neck_lids:
                out = T.scale(out, graph.arch.neck_scale)
            acts[l.lid] = out
        elif l.kind == "pool":
            acts[l.lid] = T.maxpool2x2(acts[l.inputs[0]])
        elif l.kind == "upsample":
            acts[l.lid] = T.upsample2x(acts[l.inputs[0]])
        elif l.kind == "add":
            acts[l.lid] = T.add(acts[l.inputs[0]], acts[l.inputs[1]])
        else:
            raise ShapeError(f"unknown layer kind {l.kind}")
    neck = [acts[lid] for lid, _ in graph.neck_outputs]
    head = [
        {"cls": acts[c], "box": acts[b]}
        for c, b in zip(graph.head_cls, graph.head_box)
    ]
    return acts, neck, head


# ---------------------------------------------------------------------------
# target assignment and detection loss
# ---------------------------------------------------------------------------

def assign_targets(sample, img_size, strides, num_classes,
                   size_ranges=DEFAULT_SIZE_RANGES):
    """FCOS-style per-cell assignment for one image.

    A cell is positive for an object when its center falls inside the box
    and max(l,t,r,b) lies in the scale's size range; the smallest-area box
    wins contested cells.  Returns per scale (cls_targets, box_targets,
    positive mask).
    """
    out = []
    for si, stride in enumerate(strides):
        h = w = img_size // stride
        cls_t = np.zeros((num_classes, h, w), dtype=np.float32)
        box_t = np.zeros((4, h, w), dtype=np.float32)
        pos = np.zeros((h, w), dtype=bool)
        best_area = np.full((h, w), np.inf)
        cy = (np.arange(h) + 0.5) * stride
        cx = (np.arange(w) + 0.5) * stride
        cxg, cyg = np.meshgrid(cx, cy)
        lo, hi = size_ranges[si]
        for (x1, y1, x2, y2, g) in sample.objects:
            left = cxg - x1
            top = cyg - y1
            right = x2 - cxg
            bottom = y2 - cyg
            inside = (left > 0) & (top > 0) & (right > 0) & (bottom > 0)
            m = np.maximum(np.maximum(left, right), np.maximum(top, bottom))
            cand = inside & (m > lo) & (m <= hi)
            area = (x2 - x1) * (y2 - y1)
            take = cand & (area < best_area)
            if not take.any():
                continue
            best_area[take] = area
            pos |= take
            for gg in range(num_classes):
                cls_t[gg][take] = 1.0 if gg == g else 0.0
            box_t[0][take] = left[take] / stride
            box_t[1][take] = top[take] / stride
            box_t[2][take] = right[take] / stride
            box_t[3][take] = bottom[take] / stride
        out.append((cls_t, box_t, pos))
    return out


def object_scale_assignment(sample, img_size, strides,
                            size_ranges=DEFAULT_SIZE_RANGES):
    """Scales at which each object owns at least one positive cell.

    Reuses the per-cell rule of :func:`assign_targets` without the
    contested-cell tiebreak; used to route objects to scales for the
    discriminant analysis.
    """
    result = [[] for _ in sample.objects]
    for si, stride in enumerate(strides):
        h = w = img_size // stride
        cy = (np.arange(h) + 0.5) * stride
        cx = (np.arange(w) + 0.5) * stride
        cxg, cyg = np.meshgrid(cx, cy)
        lo, hi = size_ranges[si]
        for oi, (x1, y1, x2, y2, _g) in enumerate(sample.objects):
            left = cxg - x1
            top = cyg - y1
            right = x2 - cxg
            bottom = y2 - cyg
            inside = (left > 0) & (top > 0) & (right > 0) & (bottom > 0)
            m = np.maximum(np.maximum(left, right), np.maximum(top, bottom))
            if (inside & (m > lo) & (m <= hi)).any():
                result[oi].append(si)
    return result


def detection_loss(head, samples, num_classes, img_size, strides,
                   size_ranges=DEFAULT_SIZE_RANGES, box_weight=1.0):
    """Summed BCE-with-logits over all cells/classes plus summed smooth-L1
    over positive cells' box regressions, both normalized by the number of
    positive cells in the batch (clamped to one), FCOS-style."""
    if not samples:
        raise ShapeError("empty batch")
    n = len(samples)
    targets = [
        assign_targets(s, img_size, strides, num_classes, size_ranges)
        for s in samples
    ]
    terms = []
    box_terms = []
    total_pos = 0
    for si in range(len(strides)):
        cls_t = np.stack([targets[i][si][0] for i in range(n)])
        box_t = np.stack([targets[i][si][1] for i in range(n)])
        pos = np.stack([targets[i][si][2] for i in range(n)])
        terms.append(T.bce_logits_sum(head[si]["cls"], cls_t))
        ni, yi, xi = np.nonzero(pos)
        if len(ni):
            idx = (
                ni[:, None],
                np.broadcast_to(np.arange(4)[None, :], (len(ni), 4)),
                yi[:, None],
                xi[:, None],
            )
            pred = T.gather_cells(head[si]["box"], idx)
            box_terms.append(
                T.smooth_l1_sum(pred, box_t[ni[:, None], np.arange(4)[None, :],
                                            yi[:, None], xi[:, None]])
            )
            total_pos += len(ni)
    norm = float(max(total_pos, 1))
    loss = T.scale(T.add_n(terms), 1.0 / norm)
    if box_terms:
        loss = T.add(
            loss, T.scale(T.add_n(box_terms), box_weight / (4.0 * norm))
        )
    return loss
