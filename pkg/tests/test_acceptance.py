"""Acceptance gate: ten end-to-end criteria, one pass/fail line each.

Training and pruning runs are expensive, so their artifacts are cached on
disk under ``.acceptance_cache/`` keyed by the rendered configuration; a
rerun with unchanged defaults reuses them.  Each criterion prints a single
``criterion N: PASS/FAIL`` line (also echoed in the terminal summary).
"""

import os
import pickle
import time

import numpy as np
import pytest

from ldtprune import config as cfg_mod
from ldtprune import detector as det
from ldtprune import ldt as ldt_mod
from ldtprune import pruning
from ldtprune import train
from ldtprune.checkpoint import read_checkpoint, write_checkpoint
from ldtprune.data import DatasetConfig, DetectionSample, generate_sample, \
    generate_split
from ldtprune.tensor import Tape, Tensor, backward

from conftest import rng

CACHE = os.path.join(os.path.dirname(os.path.abspath(__file__)), os.pardir,
                     ".acceptance_cache")
CRITERIA_LOG = os.path.join(CACHE, "criteria.txt")
SEEDS = (0, 1, 2)


# ---------------------------------------------------------------------------
# reporting / caching plumbing
# ---------------------------------------------------------------------------

def crit(num, ok, detail):
    """Record and print the one-line verdict for a criterion, then assert."""
    line = f"criterion {num:2d}: {'PASS' if ok else 'FAIL'} - {detail}"
    os.makedirs(CACHE, exist_ok=True)
    lines = {}
    if os.path.exists(CRITERIA_LOG):
        with open(CRITERIA_LOG) as fh:
            for old in fh.read().splitlines():
                if old.startswith("criterion"):
                    lines[int(old.split(":")[0].split()[1])] = old
    lines[num] = line
    with open(CRITERIA_LOG, "w") as fh:
        for k in sorted(lines):
            fh.write(lines[k] + "\n")
    print(line)
    assert ok, line


def cached(key, builder):
    os.makedirs(CACHE, exist_ok=True)
    path = os.path.join(CACHE, key + ".pkl")
    if os.path.exists(path):
        with open(path, "rb") as fh:
            return pickle.load(fh)
    value = builder()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        pickle.dump(value, fh)
    os.replace(tmp, path)
    return value


def default_cfg(seed):
    cfg = cfg_mod.ExperimentConfig()
    cfg.seed = seed
    cfg.data.seed = seed
    return cfg


def cfg_key(tag, cfg):
    import hashlib
    h = hashlib.sha1(cfg_mod.render(cfg).encode()).hexdigest()[:12]
    return f"{tag}_{h}"


def splits(cfg):
    return generate_split(cfg.data, "train"), generate_split(cfg.data, "val")


def train_run(seed, with_ldt):
    cfg = default_cfg(seed)
    tag = f"train_{'ldt' if with_ldt else 'base'}_s{seed}"

    def build():
        tr, va = splits(cfg)
        model = det.build_model(cfg.arch, seed=cfg.seed)
        t0 = time.time()
        rows, _opt = train.train_model(cfg, model, tr, va, cfg.optim.epochs,
                                       with_ldt=with_ldt, eval_every=10)
        final_map, _ = train.evaluate_model(model, va, cfg.arch.num_classes)
        _spectra, energy, _ = train.probe_diagnostics(model, tr[:32], cfg)
        return {
            "params": {k: t.data.copy() for k, t in model.params.items()},
            "rows": rows,
            "final_map": float(final_map),
            "energy": energy,
            "ldt": with_ldt,
            "seconds": time.time() - t0,
        }

    return cached(cfg_key(tag, cfg), build)


def restore_model(seed, run):
    cfg = default_cfg(seed)
    model = det.build_model(cfg.arch, seed=cfg.seed)
    for k, arr in run["params"].items():
        model.params[k].data[...] = arr
    model.ldt_trained = bool(run["ldt"])
    return model


def prune_run(seed, method, use_location=True, source="neck"):
    cfg = default_cfg(seed)
    tag = f"prune_{method}_loc{int(use_location)}_{source}_s{seed}"

    def build():
        base = train_run(seed, True)
        model = restore_model(seed, base)
        tr, va = splits(cfg)
        t0 = time.time()
        rounds, _pruned, _hist = train.prune_retrain_schedule(
            cfg, model, tr, va, method=method,
            use_location=use_location, source=source,
        )
        return {
            "rounds": rounds,
            "final_map": float(rounds[-1]["val_map"]),
            "unpruned_map": base["final_map"],
            "seconds": time.time() - t0,
        }

    return cached(cfg_key(tag, cfg), build)


@pytest.fixture(scope="session")
def trained():
    return {(s, kind): train_run(s, kind == "ldt")
            for s in SEEDS for kind in ("base", "ldt")}


# ---------------------------------------------------------------------------
# criterion 1: finite-difference gradient suite on a tiny model
# ---------------------------------------------------------------------------

def test_criterion_1_gradient_suite():
    t0 = time.time()
    arch = det.ArchConfig(widths=(6, 8, 10), c_neck=8)
    dc = DatasetConfig(image_size=16, min_size=6, max_size=12, min_box=4,
                       min_objects=2, max_objects=3, n_train=8, n_val=0,
                       seed=5)
    samples = []
    total = 0
    idx = 0
    while total < 12:
        s = generate_sample(dc, idx)
        idx += 1
        if s.objects:
            samples.append(s)
            total += len(s.objects)
    img_size = dc.image_size
    model = det.build_model(arch, seed=3)
    imgs = np.stack([s.image.data for s in samples])
    lcfg = ldt_mod.LdtConfig()
    strides = train.strides_of(model)

    def losses():
        _a, neck, head = det.forward(model, imgs)
        det_loss = det.detection_loss(head, samples, arch.num_classes,
                                      img_size, strides)
        parts = ldt_mod.compute_ldt_losses(neck, samples, det_loss, strides,
                                           img_size, lcfg)
        return {"det": parts.det_loss, "ld": parts.ld_loss,
                "cov": parts.cov_loss}

    autos = {}
    values = {}
    for key in ("det", "ld", "cov"):
        with Tape() as tape:
            for p in model.params.values():
                tape.watch(p)
            loss = losses()[key]
            grads = backward(tape, loss)
        autos[key] = {n: grads.get(p).astype(np.float64).copy()
                      for n, p in model.params.items()}
        values[key] = loss.item()
    # all three loss surfaces must be live, or the check is vacuous
    assert values["ld"] != 0.0 and values["cov"] != 0.0 and values["det"] != 0.0

    g = rng(11, 0xACC)
    worst = {"det": 0.0, "ld": 0.0, "cov": 0.0}
    n_coords = 0
    n_checked = {"det": 0, "ld": 0, "cov": 0}

    def fd_at(flat, c, orig, eps):
        flat[c] = np.float32(orig + eps)
        hi = {k: v.item() for k, v in losses().items()}
        flat[c] = np.float32(orig - eps)
        lo = {k: v.item() for k, v in losses().items()}
        flat[c] = np.float32(orig)
        # use the step actually realized in float32, not the nominal eps
        delta = (np.float32(orig + eps) - np.float32(orig - eps)) / 2.0
        return {k: (hi[k] - lo[k]) / (2.0 * delta) for k in hi}

    # step sizes balance truncation against float32 round-off per surface:
    # the eigensolve chain ("ld") carries ~1e-4 noise in the loss value and
    # O(1..10) gradients, so it wants the larger step
    eps_for = {"det": 1e-2, "ld": 5e-2, "cov": 1e-2}
    for name, p in model.params.items():
        flat = p.data.reshape(-1)
        coords = g.choice(flat.size, size=min(2, flat.size), replace=False)
        for c in coords:
            orig = float(flat[c])
            fd1 = {k: fd_at(flat, c, orig, eps_for[k])[k] for k in worst}
            fd2 = {k: fd_at(flat, c, orig, eps_for[k] / 2)[k] for k in worst}
            fd3 = {k: fd_at(flat, c, orig, eps_for[k] / 4)[k] for k in worst}
            n_coords += 1
            for key in worst:
                a = float(autos[key][name].reshape(-1)[c])
                denom = max(abs(fd1[key]), abs(a), 1.0)
                # a kink inside the stencil (ReLU / max switches, |.| sign
                # flips, top-K changes) makes central differences
                # meaningless there; step sizes disagreeing along the
                # halving chain flags that case, at 4x the tolerance of the
                # actual comparison
                if (abs(fd1[key] - fd2[key]) / denom > 2.5e-4
                        or abs(fd2[key] - fd3[key]) / denom > 2.5e-4):
                    continue
                n_checked[key] += 1
                worst[key] = max(worst[key], abs(a - fd1[key]) / denom)
    elapsed = time.time() - t0
    coverage_ok = all(n_checked[k] >= 0.4 * n_coords for k in n_checked)
    ok = (all(v <= 1e-3 for v in worst.values()) and coverage_ok
          and elapsed < 60.0)
    crit(1, ok,
         f"fd gradients ({n_coords} coords x 3 losses, {total} objects, "
         f"smooth-point coverage det {n_checked['det']} ld {n_checked['ld']} "
         f"cov {n_checked['cov']}): worst rel det {worst['det']:.1e} "
         f"ld {worst['ld']:.1e} cov {worst['cov']:.1e} (tol 1e-3), "
         f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: eigensolver battery on 1000 random scatter sets
# ---------------------------------------------------------------------------

def random_scatter(g):
    c = int(g.integers(2, 9))
    n = int(g.integers(c + 2, 3 * c + 4))
    n_cls = int(g.integers(2, min(c, 4) + 1))
    labels = [int(g.integers(0, n_cls)) for _ in range(n)]
    # force at least two distinct classes
    labels[0], labels[1] = 0, 1
    x = g.normal(size=(n, c)).astype(np.float32) * g.uniform(0.1, 3.0)
    ofm = ldt_mod.ObjectFeatureMatrix(X=Tensor(x), labels=labels, scale=0)
    return ldt_mod.scatter_matrices(ofm)


def test_criterion_2_eigensolver_battery():
    t0 = time.time()
    g = rng(2, 0xE16)
    eps_reg = 1e-2
    worst_res = worst_orth = worst_c2 = 0.0
    descending = True
    n_c2 = 0
    for _ in range(1000):
        ss = random_scatter(g)
        assert ss is not None
        sol = ldt_mod.solve_discriminants(ss, eps_reg=eps_reg)
        sb = ss.S_b.data.astype(np.float64)
        swr = ldt_mod.regularized_sw(ss, eps_reg).astype(np.float64)
        lam = sol.values
        v = sol.vectors
        descending &= bool(np.all(np.diff(lam) <= 1e-12))
        res = np.linalg.norm(sb @ v - swr @ v * lam[None, :], ord="fro")
        worst_res = max(worst_res, res / max(np.linalg.norm(sb), 1e-30))
        gram = v.T @ swr @ v
        worst_orth = max(worst_orth,
                         float(np.abs(gram - np.eye(len(lam))).max()))
        if sb.shape[0] == 2:
            # closed form: roots of det(S_b - lambda * S_w_reg) = 0
            a = np.linalg.det(swr)
            b = -(sb[0, 0] * swr[1, 1] + sb[1, 1] * swr[0, 0]
                  - sb[0, 1] * swr[1, 0] - sb[1, 0] * swr[0, 1])
            cc = np.linalg.det(sb)
            roots = np.sort(np.roots([a, b, cc]).real)[::-1]
            scale = max(np.abs(roots).max(), 1.0)
            worst_c2 = max(worst_c2, float(np.abs(roots - lam).max()) / scale)
            n_c2 += 1
    elapsed = time.time() - t0
    ok = (worst_res <= 1e-5 and descending and worst_orth <= 1e-5
          and worst_c2 <= 1e-8 and n_c2 > 0 and elapsed < 60.0)
    crit(2, ok,
         f"1000 eigensolves: residual {worst_res:.1e} (tol 1e-5), "
         f"orthonormality {worst_orth:.1e} (tol 1e-5), descending "
         f"{descending}, C=2 closed form {worst_c2:.1e} over {n_c2} "
         f"(tol 1e-8), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: scatter identities and label invariance
# ---------------------------------------------------------------------------

def test_criterion_3_scatter_identities():
    g = rng(3, 0x5CA)
    worst_ident = worst_st = worst_relabel = worst_order = 0.0
    for _ in range(200):
        ss = random_scatter(g)
        st, sw, sb = ss.S_t.data, ss.S_w.data, ss.S_b.data
        # additive identity: S_b is the exact float32 difference S_t - S_w
        worst_ident = max(worst_ident,
                          float(np.abs(sb - (st - sw)).max()))
        # independent float64 recomputation of S_t = Xc^T Xc / (N-1)
    g = rng(33, 0x5CB)
    for _ in range(200):
        c = int(g.integers(2, 9))
        n = int(g.integers(c + 2, 2 * c + 6))
        x = g.normal(size=(n, c)).astype(np.float32)
        labels = [int(g.integers(0, 3)) for _ in range(n)]
        labels[0], labels[1] = 0, 1
        ofm = ldt_mod.ObjectFeatureMatrix(X=Tensor(x), labels=labels, scale=0)
        ss = ldt_mod.scatter_matrices(ofm)
        xd = x.astype(np.float64)
        xc = xd - xd.mean(axis=0)
        st_ref = xc.T @ xc / (n - 1)
        worst_st = max(worst_st,
                       float(np.abs(ss.S_t.data - st_ref).max()))
        # relabeling classes (0,1,2) -> (2,0,1) leaves every scatter fixed
        perm = {0: 2, 1: 0, 2: 1}
        ofm2 = ldt_mod.ObjectFeatureMatrix(
            X=Tensor(x), labels=[perm[l] for l in labels], scale=0)
        ss2 = ldt_mod.scatter_matrices(ofm2)
        worst_relabel = max(
            worst_relabel,
            float(np.abs(ss.S_w.data - ss2.S_w.data).max()),
            float(np.abs(ss.S_b.data - ss2.S_b.data).max()),
        )
        # shuffling rows (objects) leaves every scatter fixed
        order = g.permutation(n)
        ofm3 = ldt_mod.ObjectFeatureMatrix(
            X=Tensor(x[order]), labels=[labels[i] for i in order], scale=0)
        ss3 = ldt_mod.scatter_matrices(ofm3)
        worst_order = max(
            worst_order,
            float(np.abs(ss.S_w.data - ss3.S_w.data).max()),
            float(np.abs(ss.S_t.data - ss3.S_t.data).max()),
        )
    ok = (worst_ident == 0.0 and worst_st <= 1e-5
          and worst_relabel <= 1e-6 and worst_order <= 1e-5)
    crit(3, ok,
         f"scatter identities: S_t-(S_w+S_b) max {worst_ident:.1e} (exact), "
         f"S_t vs float64 ref {worst_st:.1e}, relabel {worst_relabel:.1e}, "
         f"row order {worst_order:.1e}")


# ---------------------------------------------------------------------------
# criterion 4: LDT vs baseline training, representation structure
# ---------------------------------------------------------------------------

def test_criterion_4_structure(trained):
    lrun, brun = trained[(0, "ldt")], trained[(0, "base")]
    ratios = {
        s: lrun["energy"][s] / max(brun["energy"][s], 1e-12)
        for s in lrun["energy"] if s in brun["energy"]
    }
    a_ok = bool(ratios) and all(r <= 0.5 for r in ratios.values())

    cfg = default_cfg(0)
    tr, _va = splits(cfg)
    mass = {}
    align = 0.0
    for kind, run in (("ldt", lrun), ("base", brun)):
        model = restore_model(0, run)
        sols, _sc = train.estimate_solutions(model, tr[:64], cfg)
        pooled = np.concatenate([s.values for s in sols.values()])
        pos = pooled[pooled > 0]
        if pos.size == 0:
            mass[kind] = 0.0
            continue
        mass[kind] = float(np.sort(pos)[::-1][:3].sum() / pos.sum())
        if kind == "ldt":
            coss = []
            for _si, sol in sols.items():
                k = ldt_mod.top_k_count(sol.values, cfg.ldt.phi)
                for j in range(k):
                    v = sol.vectors[:, j]
                    coss.append(np.max(np.abs(v)) / np.linalg.norm(v))
            align = float(np.mean(coss)) if coss else 0.0
    b_ok = mass["ldt"] >= 0.90 and mass["base"] < mass["ldt"]
    c_ok = align >= 0.9
    budget_ok = lrun["seconds"] + brun["seconds"] < 20 * 60
    rtxt = ", ".join(f"s{s}:{r:.2e}" for s, r in sorted(ratios.items()))
    crit(4, a_ok and b_ok and c_ok and budget_ok,
         f"(a) off-diag energy ratios [{rtxt}] (need <=0.5); "
         f"(b) top-3 eigenvalue mass ldt {mass['ldt']:.3f} vs base "
         f"{mass['base']:.3f} (need >=0.90 and higher); "
         f"(c) mean axis alignment {align:.3f} (need >=0.9); "
         f"train time {lrun['seconds'] + brun['seconds']:.0f}s (<1200)")


# ---------------------------------------------------------------------------
# criterion 5: LDT does not cost detection quality
# ---------------------------------------------------------------------------

def test_criterion_5_map_parity(trained):
    ldt_maps = [trained[(s, "ldt")]["final_map"] for s in SEEDS]
    base_maps = [trained[(s, "base")]["final_map"] for s in SEEDS]
    m_ldt, m_base = float(np.mean(ldt_maps)), float(np.mean(base_maps))
    ok = m_ldt >= m_base - 0.005
    crit(5, ok,
         f"mean mAP over {len(SEEDS)} seeds: ldt {m_ldt:.4f} "
         f"({', '.join(f'{m:.3f}' for m in ldt_maps)}) vs base {m_base:.4f} "
         f"({', '.join(f'{m:.3f}' for m in base_maps)}); need >= base-0.005")


# ---------------------------------------------------------------------------
# criterion 6: 50% pruning beats random and filter-L1
# ---------------------------------------------------------------------------

def test_criterion_6_pruning_quality():
    t0 = time.time()
    res = {m: [prune_run(s, m)["final_map"] for s in SEEDS]
           for m in ("ldt", "random", "l1")}
    unpruned = [prune_run(s, "ldt")["unpruned_map"] for s in SEEDS]
    secs = sum(prune_run(s, m)["seconds"]
               for s in SEEDS for m in ("ldt", "random", "l1"))
    m = {k: float(np.mean(v)) for k, v in res.items()}
    m_un = float(np.mean(unpruned))
    close_ok = m["ldt"] >= m_un - 0.02
    beat_ok = (m["ldt"] >= m["random"] + 0.03
               and m["ldt"] >= m["l1"] + 0.03)
    budget_ok = secs < 45 * 60
    crit(6, close_ok and beat_ok and budget_ok,
         f"50% prune / 2 rounds, mean over {len(SEEDS)} seeds: ldt "
         f"{m['ldt']:.4f} vs unpruned {m_un:.4f} (need >= -0.02), random "
         f"{m['random']:.4f}, l1 {m['l1']:.4f} (need ldt >= +0.03 over "
         f"both); schedules {secs:.0f}s (<2700, wall {time.time() - t0:.0f}s)")


# ---------------------------------------------------------------------------
# criterion 7: ablation of utility source and location weighting
# ---------------------------------------------------------------------------

def test_criterion_7_ablation():
    neck_loc = [prune_run(s, "ldt")["final_map"] for s in SEEDS]
    neck_noloc = [prune_run(s, "ldt", use_location=False)["final_map"]
                  for s in SEEDS]
    det_loc = [prune_run(s, "ldt", source="det")["final_map"] for s in SEEDS]
    a, b, c = (float(np.mean(v)) for v in (neck_loc, neck_noloc, det_loc))
    ok = a >= b - 0.003 and a >= c - 0.003
    crit(7, ok,
         f"pruned mAP means: neck+loc {a:.4f} vs neck,no-loc {b:.4f} and "
         f"det+loc {c:.4f}; need neck+loc >= each - 0.003")


# ---------------------------------------------------------------------------
# criterion 8: importance stability across disjoint trace batches
# ---------------------------------------------------------------------------

def test_criterion_8_importance_stability(trained):
    cfg = default_cfg(0)
    model = restore_model(0, trained[(0, "ldt")])
    tr, _va = splits(cfg)
    tables, _rows = train.trace_stability(cfg, model, tr, n_batches=2,
                                          batch=32)
    assert len(tables) == 2
    worst = 1.0
    worst_layer = "-"
    for wname in sorted(tables[0].importance):
        a = np.asarray(tables[0].importance[wname], dtype=np.float64)
        b = np.asarray(tables[1].importance[wname], dtype=np.float64)
        if np.array_equal(a, b):
            r = 1.0  # identical vectors (e.g. all-zero) are perfectly stable
        elif a.std() == 0.0 or b.std() == 0.0:
            r = 0.0
        else:
            r = float(np.corrcoef(a, b)[0, 1])
        if r < worst:
            worst, worst_layer = r, wname
    crit(8, worst >= 0.9,
         f"importance Pearson across disjoint 32-image batches: worst "
         f"{worst:.3f} at {worst_layer} (need >=0.9 for every traced layer)")


# ---------------------------------------------------------------------------
# criterion 9: masking equivalence, rate, checkpoint, determinism
# ---------------------------------------------------------------------------

def test_criterion_9_mechanics(trained, tmp_path):
    cfg = default_cfg(0)
    run = trained[(0, "ldt")]
    model = restore_model(0, run)
    tr, _va = splits(cfg)

    table, _sols = train.trace_importance(cfg, model, tr)
    groups = pruning.build_coupling_groups(model)
    scores = pruning.group_scores(table, groups)
    mask = pruning.select_prune_mask(scores, 0.5, groups)
    rr = pruning.realized_rate(model, mask)
    rate_ok = abs(rr - 0.5) <= 0.02

    zmask = pruning.zero_mask_from_prune_mask(mask)
    pruned = pruning.apply_prune(restore_model(0, run), mask)
    max_diff = 0.0
    for start in range(0, 100, 20):
        imgs = np.stack([
            generate_sample(cfg.data, 5000 + start + i).image.data
            for i in range(20)
        ])
        _a, _n, head_m = det.forward(model, imgs, channel_mask=zmask)
        _a2, _n2, head_p = det.forward(pruned, imgs)
        for si in range(len(head_m)):
            for key in ("cls", "box"):
                d = np.abs(head_m[si][key].data - head_p[si][key].data)
                max_diff = max(max_diff, float(d.max()))
    equiv_ok = max_diff <= 1e-6

    ck = train.model_to_checkpoint(cfg, model)
    path = str(tmp_path / "m.ldtc")
    write_checkpoint(ck, path)
    back = read_checkpoint(path)
    ckpt_ok = (back.to_bytes() == ck.to_bytes()) and all(
        np.array_equal(back.params[k], v) for k, v in ck.params.items()
    )

    # end-to-end determinism: identical short runs give identical weights
    dcfg = default_cfg(9)
    dcfg.data.n_train = 48
    dcfg.data.n_val = 16
    dcfg.optim.epochs = 2
    finals = []
    for _ in range(2):
        t, v = splits(dcfg)
        m = det.build_model(dcfg.arch, seed=dcfg.seed)
        train.train_model(dcfg, m, t, v, dcfg.optim.epochs, eval_every=10)
        finals.append({k: p.data.copy() for k, p in m.params.items()})
    det_ok = all(np.array_equal(finals[0][k], finals[1][k])
                 for k in finals[0])

    crit(9, rate_ok and equiv_ok and ckpt_ok and det_ok,
         f"realized rate {rr:.4f} (target 0.5 +/- 0.02); zero-mask vs "
         f"physical prune max |diff| {max_diff:.1e} over 100 inputs "
         f"(tol 1e-6); checkpoint bit-exact {ckpt_ok}; deterministic "
         f"retrain {det_ok}")


# ---------------------------------------------------------------------------
# criterion 10: location attention point checks
# ---------------------------------------------------------------------------

def test_criterion_10_attention_points():
    a, b = 1.2, 0.062
    # a degenerate box at a cell center isolates single-cell distances
    s1 = DetectionSample(image=Tensor(np.zeros((3, 9, 9), np.float32)),
                         objects=[(4.5, 4.5, 4.5, 4.5, 0)])
    m = pruning.attention_mask(s1, (9, 9), 1, a, b)
    inside = float(m[4, 4])
    at_d1 = float(m[4, 5])          # squared distance 1
    at_d4 = float(m[4, 6])          # squared distance 4 (after clamping >=1)
    ok_inside = inside == 1.0
    ok_d1 = abs(at_d1 - 1.2) <= 1e-6
    ok_d4 = abs(at_d4 - 1.1012) <= 1e-4

    # outside two boxes, the larger (closer-box) weight wins
    s2 = DetectionSample(image=Tensor(np.zeros((3, 9, 9), np.float32)),
                         objects=[(0.5, 4.5, 0.5, 4.5, 0),
                                  (8.5, 4.5, 8.5, 4.5, 1)])
    m2 = pruning.attention_mask(s2, (9, 9), 1, a, b)
    ok_multi = True
    for x in range(9):
        d0 = max((x + 0.5 - 0.5) ** 2, 1.0)
        d1 = max((x + 0.5 - 8.5) ** 2, 1.0)
        want = max(a * d0 ** (-b), a * d1 ** (-b))
        if x in (0, 8):
            want = 1.0  # cell inside one of the boxes
        ok_multi &= abs(float(m2[4, x]) - want) <= 1e-6
    ok = ok_inside and ok_d1 and ok_d4 and ok_multi
    crit(10, ok,
         f"attention points: inside {inside} (=1), d=1 -> {at_d1:.4f} "
         f"(=1.2), d=4 -> {at_d4:.5f} (=1.1012 +/- 1e-4), multi-box max "
         f"rule {ok_multi}")
