"""IRT measurement model with fixed item parameters.

Two-parameter logistic (dichotomous) and generalised partial credit
(polytomous) response probabilities, response-likelihood evaluation under
local independence, response simulation under a matrix-sampling block design,
and posterior sampling of the latent proficiency by adaptive rejection
sampling (the posterior is log-concave: logistic-family log-likelihoods plus
a Gaussian prior).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import ItemBank, ResponseData
from .errors import DataError, NumericalError

_EXP_CLIP = 700.0


def prob_2pl(theta: float, a: float, b: float) -> float:
    """P(Y=1 | theta) = exp(a*theta + b) / (1 + exp(a*theta + b))."""
    t = a * theta + b
    if t >= 0.0:
        return 1.0 / (1.0 + math.exp(-min(t, _EXP_CLIP)))
    e = math.exp(max(t, -_EXP_CLIP))
    return e / (1.0 + e)


def prob_gpcm(theta: float, a: float, b) -> np.ndarray:
    """Category probabilities (length K+1) of the generalised partial credit model.

    Category k has unnormalised log-weight sum_{r<=k} (a*theta + b_r), the
    empty sum for k = 0; normalisation is done through log-sum-exp.
    """
    b = np.asarray(b, dtype=float)
    k = np.arange(b.size + 1)
    logits = k * (a * theta) + np.concatenate(([0.0], np.cumsum(b)))
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def log_measurement_likelihood(codes, administered, theta: float, bank: ItemBank) -> float:
    """Sum of log h_j(y_j | theta) over administered items; 0 when none."""
    total = 0.0
    for j in np.flatnonzero(np.asarray(administered, dtype=bool)):
        item = bank.items[j]
        y = int(codes[j])
        if y < 0 or y > item.n_categories - 1:
            raise DataError(f"item {item.id!r}: code {y} out of range")
        if item.model == "2PL":
            p = prob_2pl(theta, item.a, item.b[0])
            total += math.log(p if y == 1 else 1.0 - p)
        else:
            total += math.log(prob_gpcm(theta, item.a, item.b)[y])
    return total


class ItemLoglik:
    """Packed per-student response log-likelihood with derivative.

    Precomputes flat parameter lists so that repeated evaluations inside the
    posterior samplers stay cheap.
    """

    __slots__ = ("pl_a", "pl_b", "pl_y", "gp", "n_items")

    def __init__(self, items, codes):
        pl_a = []
        pl_b = []
        pl_y = []
        gp = []
        for item, y in zip(items, codes):
            if item.model == "2PL":
                pl_a.append(item.a)
                pl_b.append(item.b[0])
                pl_y.append(float(y))
            else:
                cum = [0.0]
                for v in item.b:
                    cum.append(cum[-1] + v)
                gp.append((item.a, cum, int(y)))
        self.pl_a = pl_a
        self.pl_b = pl_b
        self.pl_y = pl_y
        self.gp = gp
        self.n_items = len(pl_a) + len(gp)

    def eval(self, theta: float) -> tuple[float, float]:
        """Return (log-likelihood, d/dtheta log-likelihood) at theta."""
        ll = 0.0
        dll = 0.0
        exp = math.exp
        log = math.log
        for a, b, y in zip(self.pl_a, self.pl_b, self.pl_y):
            t = a * theta + b
            if t > 0.0:
                e = exp(-t) if t < _EXP_CLIP else 0.0
                p = 1.0 / (1.0 + e)
                ll += (y - 1.0) * t - log(1.0 + e)
            else:
                e = exp(t) if t > -_EXP_CLIP else 0.0
                p = e / (1.0 + e)
                ll += y * t - log(1.0 + e)
            dll += a * (y - p)
        for a, cum, y in self.gp:
            n_cat = len(cum)
            at = a * theta
            m = -math.inf
            logits = [0.0] * n_cat
            for k in range(n_cat):
                v = k * at + cum[k]
                logits[k] = v
                if v > m:
                    m = v
            s = 0.0
            ek = 0.0
            for k in range(n_cat):
                w = exp(logits[k] - m)
                s += w
                ek += k * w
            ll += logits[y] - (m + log(s))
            dll += a * (y - ek / s)
        return ll, dll


def pack_student_logliks(responses: ResponseData, bank: ItemBank) -> list[ItemLoglik]:
    """One ItemLoglik per student, restricted to administered items."""
    out = []
    items = bank.items
    for i in range(responses.n_rows):
        idx = np.flatnonzero(responses.administered_mask[i])
        out.append(ItemLoglik([items[j] for j in idx], responses.codes[i, idx]))
    return out


@dataclass
class ThetaPosteriorSpec:
    """Posterior ingredients for one student: responses and Gaussian prior."""

    item_indices: np.ndarray
    codes: np.ndarray
    prior_mean: float
    prior_var: float

    def __post_init__(self):
        if self.prior_var <= 0:
            raise DataError("prior variance must be positive")


def simulate_responses(thetas, bank: ItemBank, n_blocks: int, rng) -> ResponseData:
    """Matrix-sampled responses: items split into equal contiguous blocks,
    each student uniformly assigned one block."""
    thetas = np.asarray(thetas, dtype=float)
    n = thetas.size
    j_total = len(bank)
    if j_total % n_blocks != 0:
        raise DataError(f"{j_total} items cannot be split into {n_blocks} equal blocks")
    block_size = j_total // n_blocks
    assignment = rng.integers(0, n_blocks, size=n)
    codes = np.zeros((n, j_total), dtype=np.int64)
    mask = np.zeros((n, j_total), dtype=bool)
    for j, item in enumerate(bank.items):
        students = np.flatnonzero(assignment == j // block_size)
        if students.size == 0:
            continue
        mask[students, j] = True
        th = thetas[students]
        if item.model == "2PL":
            t = np.clip(item.a * th + item.b[0], -_EXP_CLIP, _EXP_CLIP)
            p = np.where(t >= 0, 1.0 / (1.0 + np.exp(-t)), np.exp(t) / (1.0 + np.exp(t)))
            codes[students, j] = (rng.uniform(size=students.size) < p).astype(np.int64)
        else:
            b = np.asarray(item.b)
            k = np.arange(b.size + 1)
            logits = np.outer(item.a * th, k) + np.concatenate(([0.0], np.cumsum(b)))
            logits -= logits.max(axis=1, keepdims=True)
            w = np.exp(logits)
            cdf = np.cumsum(w, axis=1)
            u = rng.uniform(size=students.size) * cdf[:, -1]
            codes[students, j] = (u[:, None] > cdf).sum(axis=1)
    return ResponseData(codes, mask)


# ---------------------------------------------------------------------------
# Adaptive rejection sampling for the theta posterior
# ---------------------------------------------------------------------------

_MAX_HULL = 64
_SLICE_STEPS = 50


def _segment_logmass(h, dh, x, lo, hi):
    """log integral of exp(h + dh*(t - x)) over [lo, hi]."""
    if dh > 1e-12:
        if hi == math.inf:
            return math.inf
        if lo == -math.inf:
            return h + dh * (hi - x) - math.log(dh)
        return h + dh * (hi - x) + math.log1p(-math.exp(-dh * (hi - lo))) - math.log(dh)
    if dh < -1e-12:
        if lo == -math.inf:
            return math.inf
        width = hi - lo
        if width == math.inf:
            return h + dh * (lo - x) - math.log(-dh)
        return h + dh * (lo - x) + math.log1p(-math.exp(dh * width)) - math.log(-dh)
    if lo == -math.inf or hi == math.inf:
        return math.inf
    return h + dh * (0.5 * (lo + hi) - x) + math.log(hi - lo)


def _segment_draw(dh, lo, hi, u):
    """Inverse-CDF draw from density proportional to exp(dh * t) on [lo, hi]."""
    if dh > 1e-12:
        if lo == -math.inf:
            return hi + math.log(u) / dh
        w = dh * (hi - lo)
        return hi + math.log(u + (1.0 - u) * math.exp(-w)) / dh
    if dh < -1e-12:
        if hi == math.inf:
            return lo + math.log1p(-u) / dh
        w = dh * (hi - lo)
        return lo + math.log1p(-u * (1.0 - math.exp(w))) / dh
    return lo + u * (hi - lo)


class _Hull:
    """Piecewise-linear upper hull of a concave log-density."""

    __slots__ = ("xs", "hs", "dhs", "zs")

    def __init__(self, xs, hs, dhs):
        self.xs = xs
        self.hs = hs
        self.dhs = dhs
        self._rebuild()

    def _rebuild(self):
        xs, hs, dhs = self.xs, self.hs, self.dhs
        zs = [-math.inf]
        for i in range(len(xs) - 1):
            denom = dhs[i] - dhs[i + 1]
            if denom <= 1e-12:
                zs.append(0.5 * (xs[i] + xs[i + 1]))
            else:
                zs.append(
                    (hs[i + 1] - hs[i] - xs[i + 1] * dhs[i + 1] + xs[i] * dhs[i]) / denom
                )
        zs.append(math.inf)
        self.zs = zs

    def insert(self, x, h, dh):
        xs = self.xs
        k = 0
        while k < len(xs) and xs[k] < x:
            k += 1
        xs.insert(k, x)
        self.hs.insert(k, h)
        self.dhs.insert(k, dh)
        self._rebuild()

    def sample(self, rng):
        """Draw from the normalised hull; returns (x, hull log-density at x)."""
        xs, hs, dhs, zs = self.xs, self.hs, self.dhs, self.zs
        n = len(xs)
        logmass = [
            _segment_logmass(hs[i], dhs[i], xs[i], zs[i], zs[i + 1]) for i in range(n)
        ]
        m = max(logmass)
        if not math.isfinite(m):
            raise NumericalError("upper hull has infinite mass")
        weights = [math.exp(v - m) for v in logmass]
        total = sum(weights)
        u = rng.uniform() * total
        acc = 0.0
        seg = n - 1
        for i, w in enumerate(weights):
            acc += w
            if u <= acc:
                seg = i
                break
        x = _segment_draw(dhs[seg], zs[seg], zs[seg + 1], rng.uniform())
        hull_val = hs[seg] + dhs[seg] * (x - xs[seg])
        return x, hull_val


def _build_hull(logpost, mean: float, sd: float):
    """Tangent points around the prior mean, widened until both tails decay."""
    left = mean - 2.0 * sd
    right = mean + 2.0 * sd
    hL, dL = logpost(left)
    for _ in range(200):
        if math.isfinite(hL) and dL > 0.0:
            break
        left -= 2.0 * sd
        hL, dL = logpost(left)
    else:
        raise NumericalError("no rising left tail found for theta posterior")
    hR, dR = logpost(right)
    for _ in range(200):
        if math.isfinite(hR) and dR < 0.0:
            break
        right += 2.0 * sd
        hR, dR = logpost(right)
    else:
        raise NumericalError("no falling right tail found for theta posterior")
    mid = 0.5 * (left + right)
    hM, dM = logpost(mid)
    if not math.isfinite(hM):
        raise NumericalError("non-finite theta log-posterior at midpoint")
    return _Hull([left, mid, right], [hL, hM, hR], [dL, dM, dR])


def _ars_draw(logpost, mean: float, sd: float, rng) -> float:
    hull = None
    for _attempt in range(2):
        try:
            hull = _build_hull(logpost, mean, sd * (1.0 + _attempt))
            break
        except NumericalError:
            hull = None
    if hull is None:
        return _slice_draw(logpost, mean, sd, rng)
    while True:
        x, hull_val = hull.sample(rng)
        h, dh = logpost(x)
        if math.log(rng.uniform()) <= h - hull_val:
            return x
        if len(hull.xs) < _MAX_HULL and math.isfinite(h):
            hull.insert(x, h, dh)


def _slice_draw(logpost, mean: float, sd: float, rng) -> float:
    """Fixed-length slice sampler fallback (stepping out + shrinkage)."""
    x = mean
    h, _ = logpost(x)
    if not math.isfinite(h):
        raise NumericalError("non-finite theta log-posterior at prior mean")
    w = max(sd, 1e-3)
    for _ in range(_SLICE_STEPS):
        level = h + math.log(rng.uniform())
        lo = x - w * rng.uniform()
        hi = lo + w
        for _ in range(64):
            if logpost(lo)[0] <= level:
                break
            lo -= w
        for _ in range(64):
            if logpost(hi)[0] <= level:
                break
            hi += w
        while True:
            cand = rng.uniform(lo, hi)
            hc, _ = logpost(cand)
            if hc > level:
                x, h = cand, hc
                break
            if cand < x:
                lo = cand
            else:
                hi = cand
    return x


# ---------------------------------------------------------------------------
# Batched adaptive rejection sampling across students
# ---------------------------------------------------------------------------


class BatchItemLoglik:
    """All students' response log-likelihoods, packed for vectorised
    evaluation: dichotomous items in CSR-style flat arrays, polytomous items
    grouped per item."""

    def __init__(self, item_logliks: list[ItemLoglik]):
        self.n = len(item_logliks)
        rows = []
        a_flat = []
        b_flat = []
        y_flat = []
        for i, ll in enumerate(item_logliks):
            rows.extend([i] * len(ll.pl_a))
            a_flat.extend(ll.pl_a)
            b_flat.extend(ll.pl_b)
            y_flat.extend(ll.pl_y)
        self.rows = np.asarray(rows, dtype=np.int64)
        self.a = np.asarray(a_flat, dtype=float)
        self.b = np.asarray(b_flat, dtype=float)
        self.y = np.asarray(y_flat, dtype=float)
        # polytomous: group (student, item) pairs by item parameters
        gp: dict[tuple, list] = {}
        for i, ll in enumerate(item_logliks):
            for a, cum, y in ll.gp:
                gp.setdefault((a, tuple(cum)), []).append((i, y))
        self.gp_groups = [
            (a, np.asarray(cum), np.asarray([i for i, _ in pairs], dtype=np.int64),
             np.asarray([y for _, y in pairs], dtype=np.int64))
            for (a, cum), pairs in gp.items()
        ]
        self.has_items = np.zeros(self.n, dtype=bool)
        for i, ll in enumerate(item_logliks):
            self.has_items[i] = ll.n_items > 0

    def eval(self, theta: np.ndarray, rows_sel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(log-likelihood, derivative) for theta[k] on student rows_sel[k]."""
        ll = np.zeros(theta.size)
        dll = np.zeros(theta.size)
        if self.rows.size:
            pos = np.full(self.n, -1, dtype=np.int64)
            pos[rows_sel] = np.arange(rows_sel.size)
            take = pos[self.rows] >= 0
            if np.any(take):
                rs = pos[self.rows[take]]
                t = self.a[take] * theta[rs] + self.b[take]
                t = np.clip(t, -_EXP_CLIP, _EXP_CLIP)
                yv = self.y[take]
                term = np.where(t > 0, (yv - 1.0) * t - np.log1p(np.exp(-t)),
                                yv * t - np.log1p(np.exp(t)))
                p = np.where(t >= 0, 1.0 / (1.0 + np.exp(-np.abs(t))),
                             np.exp(-np.abs(t)) / (1.0 + np.exp(-np.abs(t))))
                dterm = self.a[take] * (yv - p)
                np.add.at(ll, rs, term)
                np.add.at(dll, rs, dterm)
        if self.gp_groups:
            pos = np.full(self.n, -1, dtype=np.int64)
            pos[rows_sel] = np.arange(rows_sel.size)
            for a, cum, idx, ycodes in self.gp_groups:
                rs_all = pos[idx]
                take = rs_all >= 0
                if not np.any(take):
                    continue
                rs = rs_all[take]
                th = theta[rs]
                k = np.arange(cum.size)
                logits = np.outer(a * th, k) + cum
                m = logits.max(axis=1, keepdims=True)
                w = np.exp(logits - m)
                s = w.sum(axis=1)
                yv = ycodes[take]
                ll[rs] += logits[np.arange(rs.size), yv] - (m[:, 0] + np.log(s))
                dll[rs] += a * (yv - (w @ k) / s)
        return ll, dll


def _batch_segment_logmass(h, dh, x, lo, hi):
    """Vectorised log integral of exp(h + dh (t - x)) over [lo, hi]."""
    pos = dh > 1e-12
    neg = dh < -1e-12
    width = hi - lo
    out = np.full(h.shape, -np.inf)
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        lo_f = np.where(np.isfinite(lo), lo, 0.0)
        hi_f = np.where(np.isfinite(hi), hi, 0.0)
        # rising slope: finite only when hi is finite
        v = h + dh * (hi_f - x) - np.log(np.abs(dh) + 1e-300)
        tail = np.where(
            np.isfinite(lo), np.log1p(-np.exp(-np.clip(np.abs(dh) * width, 1e-300, None))), 0.0
        )
        out = np.where(pos & np.isfinite(hi), v + tail, out)
        # falling slope: finite only when lo is finite
        v2 = h + dh * (lo_f - x) - np.log(np.abs(dh) + 1e-300)
        tail2 = np.where(
            np.isfinite(hi), np.log1p(-np.exp(-np.clip(np.abs(dh) * width, 1e-300, None))), 0.0
        )
        out = np.where(neg & np.isfinite(lo), v2 + tail2, out)
        # near-zero slope on a finite segment
        flat = ~pos & ~neg & np.isfinite(lo) & np.isfinite(hi)
        out = np.where(flat, h + dh * (0.5 * (lo_f + hi_f) - x) + np.log(np.maximum(width, 1e-300)), out)
    return out


def _batch_segment_draw(dh, lo, hi, u):
    """Vectorised inverse-CDF draw from exp(dh t) on [lo, hi]."""
    out = np.empty(dh.shape)
    pos = dh > 1e-12
    neg = dh < -1e-12
    flat = ~pos & ~neg
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        w = dh * (hi - lo)
        # rising: anchor at hi
        val = np.where(np.isfinite(lo), np.exp(-np.where(np.isfinite(lo), w, 0.0)), 0.0)
        out = np.where(pos, hi + np.log(u + (1.0 - u) * val) / np.where(pos, dh, 1.0), 0.0)
        # falling: anchor at lo
        val2 = np.where(np.isfinite(hi), np.exp(np.where(np.isfinite(hi), w, 0.0)), 0.0)
        out2 = lo + np.log1p(-u * (1.0 - val2)) / np.where(neg, dh, 1.0)
        out = np.where(neg, out2, out)
        out3 = lo + u * (hi - lo)
        out = np.where(flat, out3, out)
    return out


class BatchThetaSampler:
    """Adaptive rejection sampling vectorised across students.

    Each student carries a small tangent-point hull (fixed-width arrays);
    every round all pending students draw a candidate from their
    piecewise-exponential hull, candidates are evaluated in one batched
    log-posterior call, and rejected students refine their hulls.  Exact in
    the same sense as the scalar sampler: acceptance uses the true
    log-posterior."""

    _CAP = 24

    def __init__(self, batch_ll: BatchItemLoglik):
        self.bll = batch_ll

    def draw(self, mu: np.ndarray, sigma2: float, rng) -> np.ndarray:
        n = self.bll.n
        sd = math.sqrt(sigma2)
        theta = np.empty(n)
        no_items = ~self.bll.has_items
        if np.any(no_items):
            theta[no_items] = mu[no_items] + sd * rng.standard_normal(int(no_items.sum()))
        rows = np.flatnonzero(self.bll.has_items)
        if rows.size == 0:
            return theta
        inv_var = 1.0 / sigma2
        mu_r = mu[rows]

        def logpost(x, sub):
            ll, dll = self.bll.eval(x, rows[sub])
            diff = x - mu_r[sub]
            return ll - 0.5 * diff * diff * inv_var, dll - diff * inv_var

        m = rows.size
        cap = self._CAP
        xs = np.full((m, cap), np.inf)
        hs = np.zeros((m, cap))
        dhs = np.zeros((m, cap))
        counts = np.full(m, 3, dtype=np.int64)
        all_idx = np.arange(m)
        left = mu_r - 2.0 * sd
        right = mu_r + 2.0 * sd
        hl, dl = logpost(left, all_idx)
        hr, dr = logpost(right, all_idx)
        for _ in range(64):
            bad = dl <= 0.0
            if not np.any(bad):
                break
            left[bad] -= 2.0 * sd
            hl[bad], dl[bad] = logpost(left[bad], np.flatnonzero(bad))
        for _ in range(64):
            bad = dr >= 0.0
            if not np.any(bad):
                break
            right[bad] += 2.0 * sd
            hr[bad], dr[bad] = logpost(right[bad], np.flatnonzero(bad))
        mid = 0.5 * (left + right)
        hm, dm = logpost(mid, all_idx)
        xs[:, 0], xs[:, 1], xs[:, 2] = left, mid, right
        hs[:, 0], hs[:, 1], hs[:, 2] = hl, hm, hr
        dhs[:, 0], dhs[:, 1], dhs[:, 2] = dl, dm, dr

        active = all_idx.copy()
        out = np.empty(m)
        for _round in range(200):
            if active.size == 0:
                break
            k = active.size
            c = counts[active]
            width = int(c.max())
            x_a = xs[active, :width]
            h_a = hs[active, :width]
            d_a = dhs[active, :width]
            col = np.arange(width)
            valid = col < c[:, None]
            # intersections between consecutive tangents
            denom = d_a[:, :-1] - d_a[:, 1:]
            num = h_a[:, 1:] - h_a[:, :-1] - x_a[:, 1:] * d_a[:, 1:] + x_a[:, :-1] * d_a[:, :-1]
            with np.errstate(invalid="ignore", divide="ignore"):
                z_mid = np.where(denom > 1e-12, num / denom, 0.5 * (x_a[:, :-1] + x_a[:, 1:]))
            lo = np.concatenate([np.full((k, 1), -np.inf), z_mid], axis=1)
            hi = np.concatenate([z_mid, np.full((k, 1), np.inf)], axis=1)
            # the segment after the last tangent point of each row ends at +inf
            hi[np.arange(k), c - 1] = np.inf
            logmass = _batch_segment_logmass(h_a, d_a, x_a, lo, hi)
            logmass = np.where(valid, logmass, -np.inf)
            mmax = logmass.max(axis=1, keepdims=True)
            wseg = np.exp(logmass - mmax)
            cdf = np.cumsum(wseg, axis=1)
            u_seg = rng.uniform(size=k) * cdf[:, -1]
            seg = (u_seg[:, None] > cdf).sum(axis=1)
            seg = np.minimum(seg, c - 1)
            rowi = np.arange(k)
            cand = _batch_segment_draw(
                d_a[rowi, seg], lo[rowi, seg], hi[rowi, seg], rng.uniform(size=k)
            )
            # pathological draws fall back to the tangent point (always accepted)
            cand = np.where(np.isfinite(cand), cand, x_a[rowi, seg])
            hull_val = h_a[rowi, seg] + d_a[rowi, seg] * (cand - x_a[rowi, seg])
            h_cand, d_cand = logpost(cand, active)
            accept = np.log(rng.uniform(size=k)) <= h_cand - hull_val
            out[active[accept]] = cand[accept]
            rej = ~accept
            if np.any(rej):
                r_idx = active[rej]
                can_grow = counts[r_idx] < cap
                grow = r_idx[can_grow]
                if grow.size:
                    slot = counts[grow]
                    xs[grow, slot] = cand[rej][can_grow]
                    hs[grow, slot] = h_cand[rej][can_grow]
                    dhs[grow, slot] = d_cand[rej][can_grow]
                    counts[grow] += 1
                    order = np.argsort(xs[grow], axis=1)
                    xs[grow] = np.take_along_axis(xs[grow], order, axis=1)
                    hs[grow] = np.take_along_axis(hs[grow], order, axis=1)
                    dhs[grow] = np.take_along_axis(dhs[grow], order, axis=1)
            active = active[rej]
        else:
            # stubborn rows: fall back to the scalar sampler
            for i in active:
                out[i] = _slice_draw(
                    lambda t, _i=i: _scalar_logpost(self.bll, rows[_i], t, mu_r[_i], inv_var),
                    mu_r[i],
                    sd,
                    rng,
                )
        theta[rows] = out
        return theta


def _scalar_logpost(bll: BatchItemLoglik, row: int, t: float, mu: float, inv_var: float):
    ll, dll = bll.eval(np.array([t]), np.array([row]))
    diff = t - mu
    return float(ll[0]) - 0.5 * diff * diff * inv_var, float(dll[0]) - diff * inv_var


def draw_theta_given(item_ll: ItemLoglik, prior_mean: float, prior_var: float, rng) -> float:
    """One exact draw from the posterior prop. to likelihood x N(prior_mean, prior_var)."""
    sd = math.sqrt(prior_var)
    if item_ll.n_items == 0:
        return prior_mean + sd * rng.standard_normal()
    inv_var = 1.0 / prior_var

    def logpost(t):
        ll, dll = item_ll.eval(t)
        diff = t - prior_mean
        return ll - 0.5 * diff * diff * inv_var, dll - diff * inv_var

    return _ars_draw(logpost, prior_mean, sd, rng)


def sample_theta(spec: ThetaPosteriorSpec, bank: ItemBank, rng) -> float:
    """Posterior draw for one student under a ThetaPosteriorSpec."""
    items = [bank.items[j] for j in np.asarray(spec.item_indices, dtype=int)]
    item_ll = ItemLoglik(items, np.asarray(spec.codes, dtype=int))
    return draw_theta_given(item_ll, spec.prior_mean, spec.prior_var, rng)
