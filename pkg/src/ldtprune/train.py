"""Training loop, SGD, evaluation and the iterative prune-retrain schedule."""

import csv
import os

import numpy as np

from . import detector as det
from . import ldt as ldt_mod
from . import pruning
from .checkpoint import Checkpoint
from .config import render
from .data import generate_split
from .errors import LdtError
from .metrics import decode_detections, evaluate_map
from .tensor import Tape, Tensor, backward


def strides_of(model):
    return [s for _, s in model.neck_outputs]


class SGD:
    """Plain SGD with momentum and cosine-decayed learning rate."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0,
                 total_steps=1, clip_norm=5.0):
        self.params = params              # dict name -> Tensor
        self.base_lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.total_steps = max(total_steps, 1)
        self.step_count = 0
        self.velocity = {
            name: np.zeros_like(t.data) for name, t in params.items()
        }

    def lr(self):
        t = min(self.step_count, self.total_steps)
        return self.base_lr * 0.5 * (1.0 + np.cos(np.pi * t / self.total_steps))

    def step(self, grads):
        lr = np.float32(self.lr())
        scale = np.float32(1.0)
        if self.clip_norm:
            total = np.sqrt(sum(
                float(np.sum(grads.get(p).astype(np.float64) ** 2))
                for p in self.params.values()))
            if total > self.clip_norm:
                scale = np.float32(self.clip_norm / total)
        for name, p in self.params.items():
            g = grads.get(p) * scale
            if self.weight_decay:
                g = g + np.float32(self.weight_decay) * p.data
            v = self.velocity[name]
            v *= np.float32(self.momentum)
            v -= lr * g
            p.data += v
        self.step_count += 1


def evaluate_model(model, samples, num_classes, score_thresh=0.05,
                   nms_iou=0.5, iou_thresh=0.5, batch=16):
    """Deterministic val evaluation: decode every image, then mAP."""
    strides = strides_of(model)
    preds = []
    gts = []
    for start in range(0, len(samples), batch):
        chunk = samples[start:start + batch]
        imgs = np.stack([s.image.data for s in chunk])
        _acts, _neck, head = det.forward(model, imgs)
        for i, s in enumerate(chunk):
            per_img = [
                {"cls": head[si]["cls"].data[i], "box": head[si]["box"].data[i]}
                for si in range(len(strides))
            ]
            preds.append(decode_detections(per_img, strides, score_thresh,
                                           nms_iou))
            gts.append(list(s.objects))
    mean_ap, per_class = evaluate_map(preds, gts, iou_thresh)
    return mean_ap, per_class


def probe_diagnostics(model, samples, cfg):
    """Eigen spectra and off-diagonal scatter energy on a probe batch."""
    imgs = np.stack([s.image.data for s in samples])
    _acts, neck, _head = det.forward(model, imgs)
    parts = ldt_mod.compute_ldt_losses(
        neck, samples, Tensor(np.float32(0.0)), strides_of(model),
        imgs.shape[2], cfg.ldt,
    )
    energy = {
        si: float(np.abs(ss.S_t.data * (1 - np.eye(ss.S_t.shape[0]))).sum())
        for si, ss in parts.scatters.items()
    }
    return parts.spectra, energy, parts


def class_balanced_order(samples, rng, batch_size, num_classes):
    """Shuffled sample order adjusted so every batch covers every class.

    After an initial shuffle, batches are patched greedily: when a class is
    missing from a batch, a later sample containing it is swapped in for a
    sample whose classes remain covered by the rest of the batch.
    """

    def classes_of(i):
        return set(samples[i].class_ids())

    remaining = [int(i) for i in rng.permutation(len(samples))]
    order = []
    while remaining:
        take = remaining[:batch_size]
        rest = remaining[batch_size:]
        present = set().union(*(classes_of(i) for i in take))
        for c in range(num_classes):
            if c in present:
                continue
            j = next((k for k, i in enumerate(rest) if c in classes_of(i)),
                     None)
            if j is None:
                continue
            for pos in range(len(take)):
                others = set().union(
                    *(classes_of(take[q]) for q in range(len(take))
                      if q != pos),
                    classes_of(rest[j]),
                )
                if present <= others:
                    take[pos], rest[j] = rest[j], take[pos]
                    present = others
                    break
        order.extend(take)
        remaining = rest
    return np.array(order, dtype=np.int64)


def train_model(cfg, model, train_samples, val_samples, epochs,
                with_ldt=True, out_dir=None, tag="train", momenta=None,
                eval_every=1):
    """Run the LDT training loop; returns per-epoch metric rows.

    With ``with_ldt=False`` (or alpha=beta=0) this degenerates to baseline
    detector training.
    """
    num_classes = cfg.arch.num_classes
    img_size = cfg.data.image_size
    strides = strides_of(model)
    batch_size = cfg.optim.batch_size
    steps_per_epoch = max(len(train_samples) // batch_size, 1)
    opt = SGD(model.params, cfg.optim.lr, cfg.optim.momentum,
              cfg.optim.weight_decay, total_steps=epochs * steps_per_epoch,
              clip_norm=cfg.optim.clip_norm)
    if momenta:
        for name, v in momenta.items():
            if name in opt.velocity and v.shape == opt.velocity[name].shape:
                opt.velocity[name] = v.copy()

    use_ldt = with_ldt and (cfg.ldt.alpha > 0 or cfg.ldt.beta > 0)
    probe = train_samples[: min(32, len(train_samples))]
    rows = []
    spectra_rows = []
    energy_rows = []
    for epoch in range(epochs):
        rng = np.random.Generator(
            np.random.Philox(key=(cfg.seed, 0xE0000000 + epoch))
        )
        order = class_balanced_order(train_samples, rng, batch_size,
                                     num_classes)
        ep_det = ep_ld = ep_cov = ep_tot = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            batch = [train_samples[i] for i in idx]
            imgs = np.stack([s.image.data for s in batch])
            with Tape() as tape:
                for p in model.params.values():
                    tape.watch(p)
                _acts, neck, head = det.forward(model, imgs)
                det_loss = det.detection_loss(
                    head, batch, num_classes, img_size, strides
                )
                if use_ldt:
                    parts = ldt_mod.compute_ldt_losses(
                        neck, batch, det_loss, strides, img_size, cfg.ldt
                    )
                    loss = parts.total
                    ep_ld += parts.ld_loss.item()
                    ep_cov += parts.cov_loss.item()
                else:
                    loss = det_loss
                grads = backward(tape, loss)
            opt.step(grads)
            ep_det += det_loss.item()
            ep_tot += loss.item()

        val_map = float("nan")
        at_eval = epoch % eval_every == 0 or epoch == epochs - 1
        if val_samples and at_eval:
            val_map, _ = evaluate_model(model, val_samples, num_classes)
        if at_eval:
            spectra, energy, _ = probe_diagnostics(model, probe, cfg)
            for si, vals in spectra.items():
                for k, lam in enumerate(vals):
                    spectra_rows.append((epoch, si, k, float(lam)))
            for si, e in energy.items():
                energy_rows.append((epoch, si, e))
        rows.append({
            "epoch": epoch,
            "det_loss": ep_det / steps_per_epoch,
            "ld_loss": ep_ld / steps_per_epoch,
            "cov_loss": ep_cov / steps_per_epoch,
            "total_loss": ep_tot / steps_per_epoch,
            "val_map": val_map,
        })

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_csv(
            os.path.join(out_dir, f"{tag}_metrics.csv"),
            ["epoch", "det_loss", "ld_loss", "cov_loss", "total_loss",
             "val_map"],
            [[r[k] for k in ("epoch", "det_loss", "ld_loss", "cov_loss",
                             "total_loss", "val_map")] for r in rows],
        )
        _write_csv(
            os.path.join(out_dir, f"{tag}_spectra.csv"),
            ["epoch", "scale", "k", "eigenvalue"], spectra_rows,
        )
        _write_csv(
            os.path.join(out_dir, f"{tag}_cov_energy.csv"),
            ["epoch", "scale", "offdiag_energy"], energy_rows,
        )
    model.ldt_trained = model.ldt_trained or use_ldt
    return rows, opt


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(list(r))


# ---------------------------------------------------------------------------
# checkpoint glue
# ---------------------------------------------------------------------------

def model_to_checkpoint(cfg, model, opt=None, epoch=0, mask_history=None):
    params = {name: t.data for name, t in model.params.items()}
    momenta = {} if opt is None else dict(opt.velocity)
    return Checkpoint(render(cfg), params, momenta, epoch,
                      model.ldt_trained, mask_history)


def model_from_checkpoint(cfg, ckpt):
    """Rebuild a (possibly pruned) model from stored parameter shapes."""
    model = det.build_model(cfg.arch, seed=cfg.seed)
    for l in model.layers:
        if l.kind == "conv":
            w = ckpt.params[l.wname]
            l.out_ch, l.in_ch = int(w.shape[0]), int(w.shape[1])
        elif l.kind != "input":
            prev = model.by_id[l.inputs[0]]
            l.in_ch = prev.out_ch
            l.out_ch = prev.out_ch
    model.params = {
        name: Tensor(arr.copy()) for name, arr in ckpt.params.items()
    }
    model.ldt_trained = ckpt.ldt_trained
    return model


# ---------------------------------------------------------------------------
# tracing and the prune-retrain schedule
# ---------------------------------------------------------------------------

def estimate_solutions(model, samples, cfg, batches=4):
    """Average scatter matrices over a few batches, then solve per scale."""
    strides = strides_of(model)
    img_size = cfg.data.image_size
    bs = cfg.optim.batch_size
    acc = {}
    for b in range(batches):
        chunk = samples[b * bs:(b + 1) * bs]
        if not chunk:
            break
        imgs = np.stack([s.image.data for s in chunk])
        _acts, neck, _head = det.forward(model, imgs)
        parts = ldt_mod.compute_ldt_losses(
            neck, chunk, Tensor(np.float32(0.0)), strides, img_size, cfg.ldt
        )
        for si, ss in parts.scatters.items():
            if si not in acc:
                acc[si] = [ss.S_w.data.astype(np.float64).copy(),
                           ss.S_t.data.astype(np.float64).copy(), 1]
            else:
                acc[si][0] += ss.S_w.data
                acc[si][1] += ss.S_t.data
                acc[si][2] += 1
    solutions = {}
    scatters = {}
    for si, (sw, st, cnt) in acc.items():
        sw = (sw / cnt).astype(np.float32)
        st = (st / cnt).astype(np.float32)
        ss = ldt_mod.ScatterSet(
            S_w=Tensor(sw), S_b=Tensor(st - sw), S_t=Tensor(st),
            G=cfg.arch.num_classes, N=cnt * bs, scale=si,
        )
        scatters[si] = ss
        solutions[si] = ldt_mod.solve_discriminants(ss, cfg.ldt.eps_reg)
    return solutions, scatters


def trace_importance(cfg, model, train_samples, use_location=None,
                     source=None):
    """Full tracing pass: spectra, utilities, importance table."""
    p = cfg.prune
    source = p.utility_source if source is None else source
    use_location = p.use_location if use_location is None else use_location
    if source == "neck" and not model.ldt_trained:
        raise LdtError(
            "neck utility source requires a model trained with the "
            "discriminant losses; train with ldt.alpha > 0 first"
        )
    solutions, _ = estimate_solutions(model, train_samples, cfg)
    subset = train_samples[: p.trace_images]

    def det_loss_fn(head):
        return det.detection_loss(
            head, subset[: cfg.optim.batch_size], cfg.arch.num_classes,
            cfg.data.image_size, strides_of(model),
        )

    table = pruning.channel_importance(
        model, subset, solutions, cfg.ldt.phi, p.attn_a, p.attn_b,
        use_location=use_location, source=source,
        det_loss_fn=det_loss_fn if source == "det" else None,
        batch=cfg.optim.batch_size,
    )
    return table, solutions


def trace_stability(cfg, model, train_samples, n_batches=4, batch=32,
                    out_dir=None):
    """Importance tables over disjoint image batches (stability probe)."""
    solutions, _ = estimate_solutions(model, train_samples, cfg)
    p = cfg.prune
    rows = []
    tables = []
    for bi in range(n_batches):
        chunk = train_samples[bi * batch:(bi + 1) * batch]
        if len(chunk) < 2:
            break
        table = pruning.channel_importance(
            model, chunk, solutions, cfg.ldt.phi, p.attn_a, p.attn_b,
            use_location=p.use_location, source="neck",
            batch=cfg.optim.batch_size,
        )
        tables.append(table)
        for wname in sorted(table.importance):
            for c, v in enumerate(table.importance[wname]):
                rows.append((bi, wname, c, float(v)))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_csv(os.path.join(out_dir, "stability.csv"),
                   ["batch", "layer", "channel", "importance"], rows)
    return tables, rows


def prune_retrain_schedule(cfg, model, train_samples, val_samples,
                           method="ldt", out_dir=None, use_location=None,
                           source=None):
    """Iterate (trace -> prune -> retrain); returns per-round metrics and
    the final model.

    ``method`` selects the scoring: "ldt" (ours), "random" or "l1".
    Baselines retrain with the plain detection loss.
    """
    p = cfg.prune
    rounds = max(p.rounds, 1)
    if p.target_rate <= 0:
        rows, _ = train_model(cfg, model, train_samples, val_samples,
                              epochs=0, out_dir=None)
        return [], model, []
    per_round = 1.0 - (1.0 - p.target_rate) ** (1.0 / rounds)

    round_rows = []
    importance_rows = []
    mask_history = []
    for r in range(rounds):
        groups = pruning.build_coupling_groups(model)
        table = None
        if method == "ldt":
            table, _sols = trace_importance(
                cfg, model, train_samples, use_location=use_location,
                source=source,
            )
            scores = pruning.group_scores(table, groups)
        elif method == "random":
            scores = pruning.random_group_scores(groups, cfg.seed * 1000 + r)
        elif method == "l1":
            scores = pruning.l1_group_scores(model, groups)
        else:
            raise LdtError(f"unknown pruning method {method!r}")
        mask = pruning.select_prune_mask(scores, per_round, groups)
        if table is not None:
            for (wname, c), root in sorted(
                mask.group_of.items(), key=lambda kv: groups.order[kv[0]]
            ):
                importance_rows.append((
                    r, wname, c, groups.order[root],
                    float(table.utility[wname][c]),
                    float(table.importance[wname][c]),
                    int(mask.keep[wname][c]),
                ))
        mask_history.append({w: k.copy() for w, k in mask.keep.items()})
        model = pruning.apply_prune(model, mask)
        train_model(cfg, model, train_samples, val_samples,
                    epochs=p.retrain_epochs, with_ldt=(method == "ldt"),
                    out_dir=None, eval_every=max(p.retrain_epochs, 1))
        val_map, _ = evaluate_model(model, val_samples, cfg.arch.num_classes)
        n_params = det.parameter_count(model)
        macs = det.mac_count(model, cfg.data.image_size)
        round_rows.append({
            "round": r,
            "rate": per_round,
            "params": n_params,
            "macs": macs,
            "val_map": val_map,
        })

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_csv(
            os.path.join(out_dir, f"prune_{method}_rounds.csv"),
            ["round", "rate", "params", "macs", "val_map"],
            [[row[k] for k in ("round", "rate", "params", "macs", "val_map")]
             for row in round_rows],
        )
        if importance_rows:
            _write_csv(
                os.path.join(out_dir, "importance.csv"),
                ["round", "layer", "channel", "group", "utility",
                 "importance", "kept"],
                importance_rows,
            )
    return round_rows, model, mask_history


# ---------------------------------------------------------------------------
# top-level runs
# ---------------------------------------------------------------------------

def run_train(cfg, out_dir=None, with_ldt=True):
    out_dir = out_dir or cfg.out_dir
    train_samples = generate_split(cfg.data, "train")
    val_samples = generate_split(cfg.data, "val")
    model = det.build_model(cfg.arch, seed=cfg.seed)
    rows, opt = train_model(
        cfg, model, train_samples, val_samples, cfg.optim.epochs,
        with_ldt=with_ldt, out_dir=out_dir,
    )
    return model, rows, opt


def run_eval(cfg, model, split="val"):
    samples = generate_split(cfg.data, split)
    if not samples:
        raise LdtError("no ground truth: empty split")
    mean_ap, per_class = evaluate_model(model, samples,
                                        cfg.arch.num_classes)
    return {
        "map": mean_ap,
        "per_class": {int(k): float(v) for k, v in per_class.items()},
        "params": det.parameter_count(model),
        "macs": det.mac_count(model, cfg.data.image_size),
    }
