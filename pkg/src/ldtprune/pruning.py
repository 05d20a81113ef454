"""Discriminant tracing and structured channel pruning.

Channel utility is the mean first-order sensitivity of the retained neck
discriminant energy to each feature map; importance weights the utility by
activations under a location attention mask; channels are removed in
coupling groups (elementwise adds and shared head weights tie channels
across layers) with the model physically shrunk afterwards.
"""

from dataclasses import dataclass, field

import numpy as np

from . import detector as det
from . import tensor as T
from .errors import LdtError, InfeasibleRateError, ShapeError
from .tensor import Tape, Tensor, backward


@dataclass
class PruneConfig:
    target_rate: float = 0.5
    rounds: int = 2
    trace_images: int = 128      # D in the importance average
    attn_a: float = 1.2
    attn_b: float = 0.062
    utility_source: str = "neck"  # "neck" | "det"
    use_location: bool = True
    signed: bool = False          # rank by signed value instead of |.|
    retrain_epochs: int = 6


@dataclass
class ImportanceTable:
    utility: dict                 # wname -> (C,) utility per out channel
    importance: dict              # wname -> (C,) |score|
    signed: dict                  # wname -> (C,) signed score
    d_count: int = 0


@dataclass
class PruneMask:
    keep: dict                    # wname -> bool (C,)
    group_of: dict                # (wname, c) -> group id
    groups: "CouplingGroups" = None

    def kept_fraction(self, wname):
        return float(self.keep[wname].mean())


# ---------------------------------------------------------------------------
# discriminant power and attention
# ---------------------------------------------------------------------------

def neck_discriminant_power(solutions):
    """Per-channel share of retained discriminant energy, per scale:
    power(c) = sum_k max(lambda_k, 0) * v_k[c]^2."""
    powers = {}
    for si, sol in solutions.items():
        lam = np.maximum(sol.values, 0.0)
        powers[si] = (sol.vectors ** 2 @ lam).astype(np.float64)
    return powers


def retained_channels(power, phi):
    """Channels whose power reaches phi times the per-scale maximum."""
    pmax = power.max() if power.size else 0.0
    if pmax <= 0:
        return np.zeros(power.shape, dtype=bool)
    return power >= phi * pmax


def attention_mask(sample, shape, stride, a, b):
    """Location attention at one layer resolution.

    Cells whose center lies inside any ground-truth box get weight 1;
    elsewhere the weight is the per-object maximum of a * d^(-b) with d the
    squared cell-center distance (in cells) to the projected box center,
    clamped to at least 1.  No objects -> all-zero mask.
    """
    if a <= 0 or b <= 0:
        raise ShapeError("attention parameters must be positive")
    h, w = shape
    mask = np.zeros((h, w), dtype=np.float64)
    if not sample.objects:
        return mask
    jc = np.arange(w) + 0.5
    ic = np.arange(h) + 0.5
    jg, ig = np.meshgrid(jc, ic)
    inside_any = np.zeros((h, w), dtype=bool)
    decay = np.zeros((h, w), dtype=np.float64)
    for (x1, y1, x2, y2, _g) in sample.objects:
        px = jg * stride
        py = ig * stride
        inside = (px >= x1) & (px <= x2) & (py >= y1) & (py <= y2)
        inside_any |= inside
        cxc = (x1 + x2) / 2.0 / stride
        cyc = (y1 + y2) / 2.0 / stride
        d = (jg - cxc) ** 2 + (ig - cyc) ** 2
        d = np.maximum(d, 1.0)
        decay = np.maximum(decay, a * d ** (-b))
    mask = np.where(inside_any, 1.0, decay)
    return mask


# ---------------------------------------------------------------------------
# utility and importance
# ---------------------------------------------------------------------------

def _traced_layers(model):
    return [l for l in model.conv_layers()]


def _trace_lid(model, layer):
    """Activation tensor traced for a conv layer: the output of the ReLU
    immediately following it when one exists, else the conv output itself.

    Post-activation maps are the layer's feature maps proper; tracing the
    raw conv output instead makes the masked spatial averages nearly cancel
    (positive and negative lobes), which destroys batch-to-batch stability
    of the importance estimate.
    """
    for l in model.layers:
        if l.kind == "relu" and l.inputs[0] == layer.lid:
            return l.lid
    return layer.lid


def channel_utility(model, images, solutions, phi, source="neck",
                    det_loss_fn=None):
    """First-order channel utilities for every conv layer.

    The retained discriminant energy of the neck is reduced to a scalar
    (power-weighted feature sum) and differentiated once; the utility of a
    channel is the batch/space mean of that derivative.  With
    ``source="det"`` the detection loss is differentiated instead.

    Returns (per-layer utilities keyed by layer id, per-weight-param
    utilities summed over shared applications).
    """
    if not isinstance(images, Tensor):
        images = Tensor(images)
    n = images.shape[0]
    with Tape() as tape:
        tape.watch(images)
        acts, neck, head = det.forward(model, images)
        if source == "det":
            if det_loss_fn is None:
                raise LdtError("det utility source needs a detection loss fn")
            scalar = det_loss_fn(head)
        else:
            powers = neck_discriminant_power(solutions)
            terms = []
            for si, power in powers.items():
                keep = retained_channels(power, phi)
                if not keep.any():
                    continue
                wvec = np.where(keep, power, 0.0)
                terms.append(T.weighted_channel_sum(neck[si], wvec))
            if not terms:
                raise LdtError(
                    "no retained discriminant channels at any scale; "
                    "run discriminant training first"
                )
            scalar = T.add_n(terms)
        grads = backward(tape, scalar)

    u_layer = {}
    for l in _traced_layers(model):
        g = grads.get(acts[_trace_lid(model, l)])
        u_layer[l.lid] = g.mean(axis=(0, 2, 3), dtype=np.float64)
    u_param = {}
    for wname, layers in model.param_layers().items():
        u_param[wname] = sum(u_layer[l.lid] for l in layers)
    return u_layer, u_param


def channel_importance(model, samples, solutions, phi, a, b,
                       use_location=True, source="neck", det_loss_fn=None,
                       batch=16):
    """Importance table over a set of D images.

    Per layer application: score_c = u_c * (1/D) sum_d sum_ij M_ij F_c,ij,d.
    Applications sharing a weight are summed; the reported importance is the
    absolute value of the summed signed score.
    """
    d_total = len(samples)
    images = np.stack([s.image.data for s in samples])
    u_layer, u_param = channel_utility(
        model, images[: min(batch, d_total)], solutions, phi,
        source=source, det_loss_fn=det_loss_fn,
    )

    acc = {l.lid: None for l in _traced_layers(model)}
    for start in range(0, d_total, batch):
        chunk = samples[start:start + batch]
        imgs = images[start:start + batch]
        acts, _neck, _head = det.forward(model, imgs)
        for l in _traced_layers(model):
            f = acts[_trace_lid(model, l)].data.astype(np.float64)
            _, c, h, w = f.shape
            msum = np.zeros((len(chunk), h, w))
            for i, s in enumerate(chunk):
                if use_location:
                    msum[i] = attention_mask(s, (h, w), l.cum_stride, a, b)
                else:
                    msum[i] = 1.0
            contrib = np.einsum("nchw,nhw->c", f, msum)
            acc[l.lid] = contrib if acc[l.lid] is None else acc[l.lid] + contrib

    signed = {}
    for wname, layers in model.param_layers().items():
        s = np.zeros(layers[0].out_ch)
        for l in layers:
            s += u_layer[l.lid] * (acc[l.lid] / d_total)
        signed[wname] = s
    importance = {w: np.abs(v) for w, v in signed.items()}
    return ImportanceTable(
        utility=u_param, importance=importance, signed=signed, d_count=d_total
    )


# ---------------------------------------------------------------------------
# coupling groups
# ---------------------------------------------------------------------------

class CouplingGroups:
    """Union-find over (weight param, out channel) keys.

    Elementwise adds merge their producers channel-wise; a weight applied to
    several tensors (the shared head) merges those producers too.
    """

    def __init__(self, model):
        self.model = model
        self.parent = {}
        self.order = {}
        order = 0
        for l in model.conv_layers():
            for c in range(l.out_ch):
                key = (l.wname, c)
                if key not in self.parent:
                    self.parent[key] = key
                    self.order[key] = order
                    order += 1
        self.src = self._propagate()
        self._canonical = None

    def find(self, key):
        while self.parent[key] != key:
            self.parent[key] = self.parent[self.parent[key]]
            key = self.parent[key]
        return key

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        # keep the earliest-created key as root for determinism
        if self.order[ra] > self.order[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra

    def _propagate(self):
        model = self.model
        src = {}
        for l in model.layers:
            if l.kind == "input":
                src[l.lid] = None
            elif l.kind == "conv":
                src[l.lid] = [(l.wname, c) for c in range(l.out_ch)]
            elif l.kind in ("relu", "pool", "upsample"):
                src[l.lid] = src[l.inputs[0]]
            elif l.kind == "add":
                sa, sb = src[l.inputs[0]], src[l.inputs[1]]
                if len(sa) != len(sb):
                    raise ShapeError(
                        f"add {l.lid}: channel count mismatch"
                    )
                for ka, kb in zip(sa, sb):
                    self.union(ka, kb)
                src[l.lid] = sa
        # a weight shared by several applications ties its input producers
        for wname, layers in model.param_layers().items():
            if len(layers) > 1:
                srcs = [src[l.inputs[0]] for l in layers]
                for other in srcs[1:]:
                    for ka, kb in zip(srcs[0], other):
                        self.union(ka, kb)
        return src

    def group_id(self, key):
        return self.find(key)

    def members(self):
        """group root -> sorted member list, deterministic order."""
        if self._canonical is None:
            out = {}
            for key in self.parent:
                out.setdefault(self.find(key), []).append(key)
            for root in out:
                out[root].sort(key=lambda k: self.order[k])
            self._canonical = out
        return self._canonical

    def input_keys(self, layer):
        """Union-find keys of a conv layer's input channels (None for the
        image input)."""
        s = self.src[layer.inputs[0]]
        return None if s is None else [self.find(k) for k in s]


def build_coupling_groups(model):
    return CouplingGroups(model)


# ---------------------------------------------------------------------------
# mask selection and physical shrinking
# ---------------------------------------------------------------------------

def protected_params(model):
    first_conv = model.conv_layers()[0].wname
    return {first_conv, "cls_w", "box_w"}


def _count_params_masked(model, groups, keep):
    """Closed-form parameter count under per-channel keep flags."""
    total = 0
    seen = set()
    for l in model.conv_layers():
        if l.wname in seen:
            continue
        seen.add(l.wname)
        k = 3 if l.pad == 1 else 1
        rows = int(keep[l.wname].sum())
        ik = groups.input_keys(l)
        if ik is None:
            cols = l.in_ch
        else:
            cols = sum(1 for key in ik if keep[key[0]][key[1]])
        total += rows * (cols * k * k + 1)
    return total


def group_scores(table, groups, mode="importance"):
    """Group score = sum of member channel scores."""
    src = table.importance if mode == "importance" else table.signed
    scores = {}
    for root, members in groups.members().items():
        scores[root] = float(sum(src[w][c] for (w, c) in members))
    return scores


def select_prune_mask(table_or_scores, rate, groups, protect=None):
    """Greedy global ranking: drop lowest-scored groups until the removed
    parameter fraction reaches ``rate``.

    Never empties a layer and never touches protected weight params.  Ties
    break on the group's earliest (layer, channel) key.
    """
    if not 0.0 <= rate < 1.0:
        raise ShapeError("rate must lie in [0, 1)")
    model = groups.model
    if protect is None:
        protect = protected_params(model)
    if isinstance(table_or_scores, ImportanceTable):
        scores = group_scores(table_or_scores, groups)
    else:
        scores = dict(table_or_scores)

    keep = {}
    for l in model.conv_layers():
        keep.setdefault(l.wname, np.ones(l.out_ch, dtype=bool))
    base = _count_params_masked(model, groups, keep)
    target_removed = rate * base

    members = groups.members()
    ranked = sorted(
        members,
        key=lambda r: (scores[r], groups.order[members[r][0]]),
    )
    group_of = {}
    for root, mem in members.items():
        for key in mem:
            group_of[key] = root

    removed = 0
    for root in ranked:
        if removed >= target_removed:
            break
        mem = members[root]
        if any(w in protect for (w, _c) in mem):
            continue
        per_w = {}
        for (w, _c) in mem:
            per_w[w] = per_w.get(w, 0) + 1
        if any(keep[w].sum() - n < 1 for w, n in per_w.items()):
            continue
        for (w, c) in mem:
            keep[w][c] = False
        removed = base - _count_params_masked(model, groups, keep)

    if removed < target_removed:
        raise InfeasibleRateError(rate, removed / base)
    return PruneMask(keep=keep, group_of=group_of, groups=groups)


def realized_rate(model, mask):
    groups = mask.groups
    full = {w: np.ones_like(k) for w, k in mask.keep.items()}
    base = _count_params_masked(model, groups, full)
    now = _count_params_masked(model, groups, mask.keep)
    return (base - now) / base


def apply_prune(model, mask):
    """Physically remove dropped channels; returns a smaller ModelGraph.

    The pruned model's forward equals the original's with dropped channels
    zeroed, exactly (no normalization layers exist to break this).
    """
    groups = mask.groups
    if groups.model is not model:
        raise ShapeError("mask was built for a different model")
    for root, mem in groups.members().items():
        flags = {mask.keep[w][c] for (w, c) in mem}
        if len(flags) != 1:
            raise ShapeError(f"inconsistent keep flags in group {root}")

    new_params = {}
    new_layers = []
    for l in model.layers:
        spec = det.LayerSpec(
            lid=l.lid, kind=l.kind, inputs=list(l.inputs), wname=l.wname,
            bname=l.bname, pad=l.pad, in_ch=l.in_ch, out_ch=l.out_ch,
            cum_stride=l.cum_stride,
        )
        new_layers.append(spec)
    new_graph = det.ModelGraph(
        arch=model.arch, layers=new_layers, params=new_params,
        neck_outputs=list(model.neck_outputs),
        head_cls=list(model.head_cls), head_box=list(model.head_box),
        ldt_trained=model.ldt_trained,
    )
    for l in new_graph.layers:
        if l.kind == "input":
            continue
        if l.kind == "conv":
            keep_out = mask.keep[l.wname]
            ik = groups.input_keys(model.by_id[l.lid])
            if ik is None:
                keep_in = np.ones(l.in_ch, dtype=bool)
            else:
                keep_in = np.array(
                    [mask.keep[w][c] for (w, c) in ik], dtype=bool
                )
            if l.wname not in new_params:
                w = model.params[l.wname].data
                b = model.params[l.bname].data
                new_params[l.wname] = Tensor(
                    np.ascontiguousarray(w[keep_out][:, keep_in])
                )
                new_params[l.bname] = Tensor(b[keep_out].copy())
            l.in_ch = int(keep_in.sum())
            l.out_ch = int(keep_out.sum())
        else:
            prev = new_graph.by_id[l.inputs[0]]
            l.in_ch = prev.out_ch
            l.out_ch = prev.out_ch
    return new_graph


def zero_mask_from_prune_mask(mask):
    """Per-param float keep vectors for the masked-forward equivalence
    check."""
    return {w: k.astype(np.float32) for w, k in mask.keep.items()}


# ---------------------------------------------------------------------------
# baseline scores
# ---------------------------------------------------------------------------

def random_group_scores(groups, seed):
    rng = np.random.Generator(np.random.Philox(key=(seed, 0x9A4D)))
    roots = sorted(groups.members(), key=lambda r: groups.order[r])
    return {r: float(rng.uniform(0, 1)) for r in roots}


def l1_group_scores(model, groups):
    """Filter L1-norm baseline: group score sums the |w| of each member's
    producing filter."""
    scores = {}
    for root, mem in groups.members().items():
        s = 0.0
        for (w, c) in mem:
            s += float(np.abs(model.params[w].data[c]).sum())
        scores[root] = s
    return scores
