"""Location-aware discriminant training losses.

Per neck scale: object feature rows are per-channel maxima over the
projected ground-truth box, scatter matrices are built from the stacked
rows, a generalized symmetric eigenproblem yields the discriminant
spectrum, and two differentiable penalties are derived from it: the
negated top-eigenvalue sum and the off-diagonal L1 of the total scatter.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import NotPositiveDefiniteError
from .linalg import EigenSolution, cholesky_np, jacobi_eigh, solve_lower, solve_lower_t
from .tensor import Tensor, record

log = logging.getLogger("ldtprune.ldt")

TRACE_FLOOR = 1e-8      # keeps the regularizer positive for zero scatter


@dataclass
class LdtConfig:
    alpha: float = 5e-4
    beta: float = 7.5
    phi: float = 5e-3
    eps_reg: float = 1e-2
    assignment: str = "fcos"     # "fcos" | "all"
    norm_mode: str = "per-scale"  # "per-scale" | "global"


@dataclass
class ObjectFeatureMatrix:
    X: Tensor            # [N, C] or None when no objects landed here
    labels: list
    scale: int

    @property
    def n(self):
        return 0 if self.X is None else self.X.shape[0]

    @property
    def num_classes(self):
        return len(set(self.labels))


@dataclass
class ScatterSet:
    S_w: Tensor
    S_b: Tensor
    S_t: Tensor
    G: int
    N: int
    scale: int = 0


@dataclass
class LdtLossParts:
    det_loss: Tensor
    ld_loss: Tensor
    cov_loss: Tensor
    total: Tensor
    spectra: dict = field(default_factory=dict)   # scale -> eigenvalues (np)
    top_k: dict = field(default_factory=dict)     # scale -> K
    scatters: dict = field(default_factory=dict)  # scale -> ScatterSet
    solutions: dict = field(default_factory=dict)  # scale -> EigenSolution


def project_box(box, stride, h, w):
    """Project a pixel box onto a stride-s grid, flooring/ceiling outward
    and clamping to at least one cell."""
    x1, y1, x2, y2 = box
    cx1 = max(0, min(int(np.floor(x1 / stride)), w - 1))
    cy1 = max(0, min(int(np.floor(y1 / stride)), h - 1))
    cx2 = max(cx1 + 1, min(int(np.ceil(x2 / stride)), w))
    cy2 = max(cy1 + 1, min(int(np.ceil(y2 / stride)), h))
    return cx1, cy1, cx2, cy2


def object_feature_matrix(neck, samples, stride, assigned, scale=0):
    """Stack per-object masked-max feature rows for one scale.

    ``assigned`` lists, per image, the object indices routed to this scale.
    Gradient flows to the argmax cell of each channel.
    """
    _, _, h, w = neck.shape
    rows, labels = [], []
    for i, s in enumerate(samples):
        idxs = assigned[i]
        if not idxs:
            continue
        feat = T.batch_select(neck, i)
        for oi in idxs:
            x1, y1, x2, y2, g = s.objects[oi]
            cx1, cy1, cx2, cy2 = project_box((x1, y1, x2, y2), stride, h, w)
            mask = np.zeros((h, w), dtype=np.float32)
            mask[cy1:cy2, cx1:cx2] = 1.0
            rows.append(T.masked_spatial_max(feat, mask))
            labels.append(g)
    x = T.stack0(rows) if rows else None
    return ObjectFeatureMatrix(X=x, labels=labels, scale=scale)


def scatter_matrices(ofm):
    """Within/total/between scatter of an object feature matrix.

    Returns None when the batch lacks diversity (N < 2 or fewer than two
    classes).  Accumulation runs in double precision; the between-class
    scatter is formed as an exact float32 difference so the additive
    identity holds to machine precision.
    """
    if ofm.X is None or ofm.n < 2 or ofm.num_classes < 2:
        return None
    x = ofm.X
    labels = np.asarray(ofm.labels)
    classes = sorted(set(ofm.labels))
    n, c = x.shape
    g_count = len(classes)

    xd = x.data.astype(np.float64)
    xc = xd - xd.mean(axis=0)
    st64 = xc.T @ xc / (n - 1)
    sw64 = np.zeros((c, c))
    class_rows = {g: np.nonzero(labels == g)[0] for g in classes}
    for g in classes:
        xg = xd[class_rows[g]]
        xgc = xg - xg.mean(axis=0)
        sw64 += xgc.T @ xgc
    sw64 /= g_count

    s_w = Tensor(sw64.astype(np.float32))
    s_t = Tensor(st64.astype(np.float32))

    def bwd(g_sw, g_st):
        gx = np.zeros((n, c), dtype=np.float64)
        sym_t = (g_st + g_st.T).astype(np.float64)
        gx += xc @ sym_t / (n - 1)
        sym_w = (g_sw + g_sw.T).astype(np.float64)
        for g in classes:
            rows = class_rows[g]
            xg = xd[rows]
            xgc = xg - xg.mean(axis=0)
            gx[rows] += xgc @ sym_w / g_count
        return (gx.astype(np.float32),)

    record((s_w, s_t), (x,), bwd)
    s_b = T.sub(s_t, s_w)
    return ScatterSet(S_w=s_w, S_b=s_b, S_t=s_t, G=g_count, N=n,
                      scale=ofm.scale)


def regularized_sw(ss, eps_reg):
    """S_w plus trace-scaled ridge, double precision.

    The floor term uses the total scatter's mean diagonal: with desk-scale
    object counts a scale's within-class scatter can vanish outright
    (singleton classes), and a ridge tied only to trace(S_w) would let the
    top generalized eigenvalue blow up past 1e8.  The total-scatter floor
    keeps eigenvalues bounded by roughly C / eps_reg and is scale
    invariant.
    """
    sw = ss.S_w.data.astype(np.float64)
    sw = 0.5 * (sw + sw.T)
    c = sw.shape[0]
    tr_t = np.trace(ss.S_t.data.astype(np.float64)) if ss.S_t is not None else 0.0
    ridge = eps_reg * (np.trace(sw) / c + tr_t / c + TRACE_FLOOR)
    return sw + ridge * np.eye(c)


def solve_discriminants(ss, eps_reg=1e-2):
    """Solve S_b v = lambda S_w_reg v via Cholesky reduction and Jacobi.

    Eigenvalues descend; columns are S_w_reg-orthonormal.  Eigenvalues can
    be negative since the between-class scatter is a difference.
    """
    sw_reg = regularized_sw(ss, eps_reg)
    try:
        lo = cholesky_np(sw_reg)
    except NotPositiveDefiniteError as e:
        raise NotPositiveDefiniteError(e.pivot_index, e.value) from e
    sb = ss.S_b.data.astype(np.float64)
    sb = 0.5 * (sb + sb.T)
    y = solve_lower(lo, sb)
    m = solve_lower(lo, y.T).T
    m = 0.5 * (m + m.T)
    inner = jacobi_eigh(m)
    vecs = solve_lower_t(lo, inner.vectors)
    return EigenSolution(values=inner.values, vectors=vecs)


def top_k_count(values, phi):
    """Number of eigenvalues at or above phi times the largest."""
    lam_max = values[0]
    if lam_max <= 0:
        return 0
    return int(np.sum(values >= phi * lam_max))


def backward_eigen(ss, sol, dlam):
    """First-order eigenvalue gradients: dS_b and dS_w(_reg) accumulations.

    dS_b += sum_k dlam_k v_k v_k^T;  dS_w += sum_k dlam_k (-lam_k) v_k v_k^T.
    Only entries of ``dlam`` that are nonzero contribute.
    """
    c = ss.S_w.shape[0]
    d_sb = np.zeros((c, c))
    d_sw = np.zeros((c, c))
    for k, dl in enumerate(dlam):
        if dl == 0.0:
            continue
        v = sol.vectors[:, k]
        outer = np.outer(v, v)
        d_sb += dl * outer
        d_sw += dl * (-sol.values[k]) * outer
    return d_sb, d_sw


def ld_scale_loss(ss, sol, k, norm, eps_reg):
    """Differentiable negated top-k eigenvalue sum for one scale.

    ``norm`` is the divisor (K_s for per-scale normalization, total K for
    the global mode).  Returns None when nothing is retained.  The gradient
    chain runs through the analytic eigenvalue derivative.  The sum of the
    retained eigenvalues is differentiable even when they are mutually
    degenerate (its gradient is the projector onto their joint subspace);
    degeneracy at the retain/drop boundary yields a valid subgradient.
    """
    if k < 1:
        return None
    vals = sol.values
    loss_val = -float(vals[:k].sum()) / norm
    out = Tensor(np.float32(loss_val))
    c = ss.S_w.shape[0]

    def bwd(g):
        dlam = np.zeros(len(vals))
        dlam[:k] = -float(g) / norm
        d_sb, d_sw_reg = backward_eigen(ss, sol, dlam)
        # ridge chain: the regularizer's trace terms depend on S_w twice
        # (directly and through S_t = S_w + S_b) and on S_b once
        tr_chain = (eps_reg / c) * np.trace(d_sw_reg)
        eye = np.eye(c)
        d_sw = d_sw_reg + 2.0 * tr_chain * eye
        d_sb = d_sb + tr_chain * eye
        return (d_sw.astype(np.float32), d_sb.astype(np.float32))

    record((out,), (ss.S_w, ss.S_b), bwd)
    return out


def cov_penalty(scatters):
    """Sum over scales of the off-diagonal L1 norm of the total scatter."""
    terms = [T.offdiag_abs_sum(ss.S_t) for ss in scatters]
    if not terms:
        return Tensor(np.float32(0.0))
    return T.add_n(terms)


def ldt_total_loss(det_loss, ld_loss, cov_loss, alpha, beta):
    """L_total = L_det + alpha * L_ld + beta * L_cov (exact weighted sum)."""
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be nonnegative")
    total = T.add(det_loss,
                  T.add(T.scale(ld_loss, alpha), T.scale(cov_loss, beta)))
    return total


def compute_ldt_losses(neck, samples, det_loss, strides, img_size, cfg,
                       object_scales=None):
    """Assemble the full training objective for one batch.

    ``neck`` is the list of per-scale neck feature tensors from the same
    forward pass as ``det_loss``.  ``object_scales`` (per image, per object,
    list of scales) may be precomputed; otherwise it is derived from the
    configured assignment mode.
    """
    from .detector import object_scale_assignment

    n_scales = len(strides)
    scatters = {}
    solutions = {}
    spectra = {}
    top_k = {}

    if object_scales is None and cfg.assignment == "fcos":
        object_scales = [
            object_scale_assignment(s, img_size, strides) for s in samples
        ]

    for si in range(n_scales):
        if cfg.assignment == "all":
            assigned = [list(range(len(s.objects))) for s in samples]
        else:
            assigned = [
                [oi for oi, scl in enumerate(object_scales[i]) if si in scl]
                for i in range(len(samples))
            ]
        ofm = object_feature_matrix(neck[si], samples, strides[si], assigned,
                                    scale=si)
        ss = scatter_matrices(ofm)
        if ss is None:
            continue
        scatters[si] = ss
        sol = solve_discriminants(ss, cfg.eps_reg)
        solutions[si] = sol
        spectra[si] = sol.values.copy()
        top_k[si] = top_k_count(sol.values, cfg.phi)

    ld_terms = []
    if cfg.norm_mode == "global":
        k_total = sum(top_k.values())
        norms = {si: k_total for si in top_k}
    else:
        norms = {si: top_k[si] for si in top_k}
    for si, ss in scatters.items():
        k = top_k[si]
        if k < 1:
            continue
        term = ld_scale_loss(ss, solutions[si], k, norms[si], cfg.eps_reg)
        if term is not None:
            ld_terms.append(term)

    ld_loss = T.add_n(ld_terms) if ld_terms else Tensor(np.float32(0.0))
    cov_loss = cov_penalty(list(scatters.values()))
    total = ldt_total_loss(det_loss, ld_loss, cov_loss, cfg.alpha, cfg.beta)
    return LdtLossParts(
        det_loss=det_loss, ld_loss=ld_loss, cov_loss=cov_loss, total=total,
        spectra=spectra, top_k=top_k, scatters=scatters, solutions=solutions,
    )
