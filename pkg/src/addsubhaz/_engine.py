"""Shared computational core for fitting, variance, and model checking.

Everything is evaluated on a panel grid: boundaries are 0, the event-time
knots, optional extra cut points (censoring-complete exit times), and a
Q-fold subdivision of each interval. Within an open panel no counting
process jumps, so every integrand factors into (constant risk levels)
times (smooth basis functions). Panel integrals therefore combine the
risk levels of the open interval with a trapezoid rule on the basis
factors: exact for constant bases, O(Q^-2) for the decaying basis.

Two level samplings coexist:

- "open" levels: state on the open interval just after a panel's left
  boundary; used for all dt-integrals.
- "point" levels: state at a boundary itself with inclusive membership
  (a subject is at risk at its own observed time); used for dN sums and
  every evaluation at an event time.

Per-subject integrals of the form ``int c(u) w(u) dM-hat(u)`` reduce to
reads of shared cumulative paths, because a subject's weight path is 1
on [0, Z] plus (IPCW, failure from another cause) a ``G(t)/G(Z)`` tail,
or an indicator core up to an exit time (censoring complete).
"""

from __future__ import annotations

import numpy as np

from .censoring import CensoringModel
from .dataset import ClusteredDataset, TimeGrid, basis_values
from .errors import NoEventsForCause, SingularDesign

MODE_IPCW = "ipcw"
MODE_CC = "cc"

RCOND_SINGULAR = 1e-12


def _cum0(increments: np.ndarray) -> np.ndarray:
    """Cumulative with a leading zero: out[g] = sum of increments[:g]."""
    out = np.zeros((increments.shape[0] + 1,) + increments.shape[1:])
    np.cumsum(increments, axis=0, out=out[1:])
    return out


class PanelEngine:
    """Per-fit state: grid, risk levels, paths, and subject primitives."""

    def __init__(
        self,
        ds: ClusteredDataset,
        cause: int,
        mode: str,
        grid: TimeGrid,
        censoring: CensoringModel | None = None,
    ):
        if mode not in (MODE_IPCW, MODE_CC):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == MODE_IPCW and censoring is None:
            raise ValueError("IPCW mode needs a fitted censoring model")
        if mode == MODE_CC and ds.ctime is None:
            from .errors import CensoringTimeUnavailable

            raise CensoringTimeUnavailable(
                "censoring-complete mode needs the ctime column"
            )
        self.ds = ds
        self.cause = int(cause)
        self.mode = mode
        self.grid = grid
        self.censoring = censoring
        self.n = ds.n_clusters
        self.N = ds.n_subjects
        self.p = ds.p
        self.tau = grid.tau
        self._beta: np.ndarray | None = None
        self._prim: dict | None = None

        extra = np.asarray(ds.ctime, dtype=float) if mode == MODE_CC else None
        self.pts = grid.refined_points(extra_cuts=extra)
        self.G = self.pts.size
        self.dw = np.diff(self.pts)
        self.B = basis_values(ds.bases, self.pts)  # (G, p)
        outer = self.B[:, :, None] * self.B[:, None, :]
        # trapezoid factors of the basis per panel
        self.tb1 = 0.5 * self.dw[:, None] * (self.B[:-1] + self.B[1:])
        self.tb2 = 0.5 * self.dw[:, None, None] * (outer[:-1] + outer[1:])

        self.knots = grid.knots
        self.T = self.knots.size
        self.kpt = np.searchsorted(self.pts, self.knots)  # pt index of each knot

        self._setup_subjects()
        self._setup_levels()
        inc = self.tb2 * self.Mraw_open
        self.Araw_path = _cum0(inc)  # (G, p, p): n * A-hat(t) at the boundaries
        self.Araw_tau = 0.5 * (self.Araw_path[-1] + self.Araw_path[-1].T)
        self._setup_events()

    # ------------------------------------------------------------------
    # subject bookkeeping
    # ------------------------------------------------------------------

    def _setup_subjects(self):
        ds = self.ds
        Z = ds.time
        st = ds.status
        self.is_event_subject = st == self.cause
        self.is_other = (st != self.cause) & (st != 0)
        self.is_cens = st == 0

        if self.mode == MODE_IPCW:
            g_z = np.asarray(self.censoring.survival(np.minimum(Z, self.tau)))
            # tail coefficient 1/G(Z), only for other-cause failures in (0, tau]
            self.v_tail = np.where(self.is_other & (Z <= self.tau), 1.0 / g_z, 0.0)
            exit_raw = Z
            self.exit_excl = np.zeros(self.N, dtype=bool)
            self.valid_event = self.is_event_subject & (Z <= self.tau)
        else:
            C = ds.ctime
            # cause-k subjects leave at Z (inclusive) unless C <= Z;
            # everyone else leaves at C (exclusive boundary).
            self.exit_excl = ~self.is_event_subject | (C <= Z)
            exit_raw = np.where(self.exit_excl, C, Z)
            self.v_tail = np.zeros(self.N)
            self.valid_event = self.is_event_subject & (Z <= self.tau) & (C > Z)

        self.exit_raw = exit_raw
        self.exit_time = np.minimum(exit_raw, self.tau)
        # exit times <= tau are always panel boundaries
        self.pos = np.searchsorted(self.pts, self.exit_time)
        # boundary atoms at the exit are excluded only when the exclusive
        # exit actually happens inside the analysis window
        self.excl_atom = (self.exit_excl & (exit_raw <= self.tau)).astype(float)
        self.knotpos = np.where(
            Z <= self.tau,
            np.searchsorted(self.knots, np.minimum(Z, self.tau)),
            self.T,
        )
        # first knot index at which the subject is no longer at risk
        frozen_excl = np.where(
            exit_raw <= self.tau,
            np.searchsorted(self.knots, np.minimum(exit_raw, self.tau), side="left"),
            self.T,
        )
        self.freeze_bin = np.where(
            self.exit_excl, frozen_excl, np.minimum(self.knotpos + 1, self.T)
        ).astype(np.intp)

    # ------------------------------------------------------------------
    # risk levels
    # ------------------------------------------------------------------

    @staticmethod
    def _suffix_tables(keys: np.ndarray, X: np.ndarray):
        order = np.argsort(keys, kind="stable")
        ks = keys[order]
        Xs = X[order]
        p = X.shape[1]
        sx = np.zeros((ks.size + 1, p))
        sxx = np.zeros((ks.size + 1, p, p))
        if ks.size:
            sx[1:] = np.cumsum(Xs[::-1], axis=0)
            sxx[1:] = np.cumsum((Xs[:, :, None] * Xs[:, None, :])[::-1], axis=0)
        return ks, sx[::-1], sxx[::-1]

    @staticmethod
    def _suffix_lookup(tables, t, side):
        ks, sx, sxx = tables
        idx = np.searchsorted(ks, t, side=side)
        return (ks.size - idx).astype(float), sx[idx], sxx[idx]

    @staticmethod
    def _prefix_tables(keys: np.ndarray, X: np.ndarray, weights: np.ndarray):
        order = np.argsort(keys, kind="stable")
        ks = keys[order]
        Xs = X[order]
        w = weights[order]
        p = X.shape[1]
        c = np.concatenate([[0.0], np.cumsum(w)])
        sx = np.zeros((ks.size + 1, p))
        sxx = np.zeros((ks.size + 1, p, p))
        if ks.size:
            sx[1:] = np.cumsum(w[:, None] * Xs, axis=0)
            sxx[1:] = np.cumsum(
                w[:, None, None] * (Xs[:, :, None] * Xs[:, None, :]), axis=0
            )
        return ks, c, sx, sxx

    @staticmethod
    def _prefix_lookup(tables, t, side):
        ks, c, sx, sxx = tables
        idx = np.searchsorted(ks, t, side=side)
        return c[idx], sx[idx], sxx[idx]

    def _setup_levels(self):
        ds = self.ds
        Z = ds.time
        left = self.pts[:-1]

        if self.mode == MODE_IPCW:
            self._core_tables = self._suffix_tables(Z, ds.X)
            has_tail = self.v_tail > 0
            self._tail_tables = self._prefix_tables(
                Z[has_tail], ds.X[has_tail], self.v_tail[has_tail]
            )
            self.G_pts = np.asarray(self.censoring.survival(self.pts))

            c0, c1, c2 = self._suffix_lookup(self._core_tables, left, side="right")
            t0, t1, t2 = self._prefix_lookup(self._tail_tables, left, side="right")
            g = self.G_pts[:-1]
            raw0 = c0 + g * t0
            raw1 = c1 + g[:, None] * t1
            raw2 = c2 + g[:, None, None] * t2
        else:
            incl = ~self.exit_excl
            self._cc_incl = self._suffix_tables(self.exit_raw[incl], ds.X[incl])
            self._cc_excl = self._suffix_tables(
                self.exit_raw[self.exit_excl], ds.X[self.exit_excl]
            )
            self.G_pts = np.ones(self.G)
            a0, a1, a2 = self._suffix_lookup(self._cc_incl, left, side="right")
            b0, b1, b2 = self._suffix_lookup(self._cc_excl, left, side="right")
            raw0 = a0 + b0
            raw1 = a1 + b1
            raw2 = a2 + b2

        self.raw0_open = raw0
        with np.errstate(invalid="ignore", divide="ignore"):
            xh = raw1 / raw0[:, None]
        xh[raw0 <= 0] = 0.0
        self.xh_open = xh
        denom = np.where(raw0 > 0, raw0, 1.0)
        m = raw2 - (raw1[:, :, None] * raw1[:, None, :]) / denom[:, None, None]
        m[raw0 <= 0] = 0.0
        self.Mraw_open = m

    def point_levels(self, t):
        """Raw (count, sum X, sum XX') at t with inclusive membership."""
        t = np.asarray(t, dtype=float)
        if self.mode == MODE_IPCW:
            c0, c1, c2 = self._suffix_lookup(self._core_tables, t, side="left")
            t0, t1, t2 = self._prefix_lookup(self._tail_tables, t, side="left")
            g = np.asarray(self.censoring.survival(t))
            return c0 + g * t0, c1 + g[..., None] * t1, c2 + g[..., None, None] * t2
        a = self._suffix_lookup(self._cc_incl, t, side="left")
        b = self._suffix_lookup(self._cc_excl, t, side="right")
        return a[0] + b[0], a[1] + b[1], a[2] + b[2]

    # ------------------------------------------------------------------
    # events, coefficient solve, baseline, score
    # ------------------------------------------------------------------

    def _setup_events(self):
        ev_idx = np.flatnonzero(self.valid_event)
        if ev_idx.size == 0:
            raise NoEventsForCause(f"no usable cause-{self.cause} events in (0, tau]")
        self.event_subjects = ev_idx
        ev_pt = self.pos[ev_idx]
        uniq_pt, inv, counts = np.unique(ev_pt, return_inverse=True, return_counts=True)
        s0, s1, _ = self.point_levels(self.pts[uniq_pt])
        safe = np.where(s0 > 0, s0, 1.0)
        self.event_pt = uniq_pt
        self.event_counts = counts
        self.event_s0raw = s0
        self.event_xh = self.B[uniq_pt] * (s1 / safe[:, None])  # X-hat at event times
        self.event_dj = counts / safe  # baseline jumps
        self._event_inv = inv
        Xe = self.ds.X[ev_idx] * self.B[ev_pt]
        self.event_terms = Xe - self.event_xh[inv]
        inc = np.zeros((self.G, self.p))
        np.add.at(inc, ev_pt, self.event_terms)
        self.braw_path = np.cumsum(inc, axis=0)
        self.braw = self.braw_path[-1]

    def solve_beta(self) -> np.ndarray:
        eigs = np.linalg.eigvalsh(self.Araw_tau)
        if (
            not np.all(np.isfinite(eigs))
            or eigs[-1] <= 0
            or eigs[0] / eigs[-1] < RCOND_SINGULAR
        ):
            raise SingularDesign(
                "design matrix A(tau) is singular or numerically rank deficient"
            )
        beta = np.linalg.solve(self.Araw_tau, self.braw)
        self.set_beta(beta)
        return beta

    def set_beta(self, beta: np.ndarray):
        self._beta = np.asarray(beta, dtype=float)
        self._prim = None
        drift_inc = np.einsum("qp,qp->q", self.tb1, self.xh_open * self._beta)
        self.base_drift_path = np.concatenate([[0.0], np.cumsum(drift_inc)])

    @property
    def beta(self) -> np.ndarray:
        if self._beta is None:
            raise RuntimeError("beta has not been solved or set")
        return self._beta

    def interp_path(self, path: np.ndarray, t) -> np.ndarray:
        """Evaluate a cumulative panel path at arbitrary t in [0, tau]."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        q = np.clip(np.searchsorted(self.pts, t, side="right") - 1, 0, self.G - 2)
        with np.errstate(invalid="ignore", divide="ignore"):
            w = np.where(self.dw[q] > 0, (t - self.pts[q]) / self.dw[q], 0.0)
        w = np.clip(w, 0.0, 1.0)
        shape = (t.size,) + (1,) * (path.ndim - 1)
        return path[q] + w.reshape(shape) * (path[q + 1] - path[q])

    def _floor_pt(self, t: np.ndarray) -> np.ndarray:
        return np.clip(np.searchsorted(self.pts, t, side="right") - 1, 0, self.G - 1)

    def baseline_at(self, t) -> np.ndarray | float:
        """Cumulative baseline subdistribution hazard at t."""
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        tt = np.atleast_1d(t)
        jump_cum = np.concatenate([[0.0], np.cumsum(self.event_dj)])
        jumps = jump_cum[np.searchsorted(self.pts[self.event_pt], tt, side="right")]
        drift = self.interp_path(self.base_drift_path, tt)
        out = jumps - drift
        return float(out[0]) if scalar else out

    def score_at(self, beta, t) -> np.ndarray:
        """Estimating-function process U(beta, t) on the raw (sum) scale."""
        beta = np.asarray(beta, dtype=float)
        tt = np.atleast_1d(np.asarray(t, dtype=float))
        bpart = self.braw_path[self._floor_pt(tt)]
        A_t = self.interp_path(self.Araw_path, tt)
        out = bpart - np.einsum("tab,b->ta", A_t, beta)
        return out[0] if np.asarray(t).ndim == 0 else out

    # ------------------------------------------------------------------
    # knot-level aggregate views
    # ------------------------------------------------------------------

    def knot_aggregates(self):
        s0, s1, _ = self.point_levels(self.knots)
        S0 = s0 / self.n
        S1 = self.B[self.kpt] * s1 / self.n
        with np.errstate(invalid="ignore", divide="ignore"):
            Xh = np.where(
                S0[:, None] > 0, S1 / np.where(S0 > 0, S0, 1.0)[:, None], 0.0
            )
        return S0, S1, Xh

    def A_at_knots(self) -> np.ndarray:
        return self.Araw_path[self.kpt] / self.n

    def U_at_knots(self, beta: np.ndarray | None = None) -> np.ndarray:
        beta = self.beta if beta is None else np.asarray(beta, dtype=float)
        return self.braw_path[self.kpt] - np.einsum(
            "tab,b->ta", self.Araw_path[self.kpt], beta
        )

    # ------------------------------------------------------------------
    # cumulative path primitives for per-subject integrals
    # ------------------------------------------------------------------

    def primitives(self) -> dict:
        """Cumulative paths at the panel boundaries, keyed by name.

        ``core_*`` are unweighted; ``tail_*`` (IPCW only) carry the extra
        G-hat(u) factor of the other-cause tail weight. Jump paths keep
        their per-boundary atoms for strict/inclusive boundary reads.
        """
        if self._prim is not None:
            return self._prim
        beta = self.beta
        xh = self.xh_open
        xb = xh * beta

        def drift_block(scale):
            sc2 = scale[:, None, None]
            sc1 = scale[:, None]
            bb_inc = self.tb2 * sc2
            return dict(
                bb=_cum0(bb_inc),
                bx=_cum0(np.einsum("qab,qb->qa", self.tb2, xb) * sc1),
                xb=_cum0(xh[:, :, None] * bb_inc),
                xx=_cum0(np.einsum("qab,qa,qb->qa", self.tb2, xh, xb) * sc1),
                bvec=_cum0(self.tb1 * sc1),
                xvec=_cum0(self.tb1 * xh * sc1),
                xhd=np.concatenate(
                    [[0.0], np.cumsum(np.einsum("qp,qp->q", self.tb1, xb) * scale)]
                ),
            )

        def jump_block(g_at_events):
            w = self.event_dj * g_at_events
            atom_b = np.zeros((self.G, self.p))
            atom_x = np.zeros((self.G, self.p))
            atom_s = np.zeros(self.G)
            atom_b[self.event_pt] = self.B[self.event_pt] * w[:, None]
            atom_x[self.event_pt] = self.event_xh * w[:, None]
            atom_s[self.event_pt] = w
            return dict(
                b=np.cumsum(atom_b, axis=0),
                x=np.cumsum(atom_x, axis=0),
                s=np.cumsum(atom_s),
                atom_b=atom_b,
                atom_x=atom_x,
                atom_s=atom_s,
            )

        prim = {
            "core_d": drift_block(np.ones(self.G - 1)),
            "core_j": jump_block(np.ones(self.event_pt.size)),
        }
        if self.mode == MODE_IPCW:
            prim["tail_d"] = drift_block(self.G_pts[:-1])
            prim["tail_j"] = jump_block(self.G_pts[self.event_pt])
        self._prim = prim
        return prim

    def _drift_read(self, blk, g, X, Xb, g0=None):
        """Per-subject drift integral between boundaries g0 (default 0) and g."""

        def span(path):
            return path[g] if g0 is None else path[g] - path[g0]

        t1 = np.einsum("nab,nb->na", span(blk["bb"]), Xb) * X
        t2 = X * span(blk["bx"])
        t3 = np.einsum("nab,nb->na", span(blk["xb"]), Xb)
        t4 = span(blk["xx"])
        return t1 - t2 - t3 + t4

    def _jump_read(self, blk, g, X, drop_atom=None, g0=None, add_atom_at_g0=False):
        """Per-subject jump integral up to boundary g (optionally from g0)."""
        b = blk["b"][g]
        x = blk["x"][g]
        if g0 is not None:
            b = b - blk["b"][g0]
            x = x - blk["x"][g0]
            if add_atom_at_g0:
                b = b + blk["atom_b"][g0]
                x = x + blk["atom_x"][g0]
        out = X * b - x
        if drop_atom is not None:
            out = out - drop_atom * (X * blk["atom_b"][g] - blk["atom_x"][g])
        return out

    # ------------------------------------------------------------------
    # per-subject influence pieces
    # ------------------------------------------------------------------

    def eta_per_subject(self) -> np.ndarray:
        """eta_ij: integral over [0, tau] of (X - X-hat) w dM-hat per subject."""
        prim = self.primitives()
        X = self.ds.X
        Xb = X * self.beta
        g = self.pos

        ev = np.zeros((self.N, self.p))
        ev[self.event_subjects] = self.event_terms
        atom = self.excl_atom[:, None]
        out = ev - self._jump_read(prim["core_j"], g, X, drop_atom=atom)
        out -= self._drift_read(prim["core_d"], g, X, Xb)

        if self.mode == MODE_IPCW and np.any(self.v_tail > 0):
            last = np.full(self.N, self.G - 1)
            tail = self._jump_read(prim["tail_j"], last, X, g0=g)
            tail += self._drift_read(prim["tail_d"], last, X, Xb, g0=g)
            out -= self.v_tail[:, None] * tail
        return out

    def censor_points(self):
        Z = self.ds.time
        mask = self.is_cens & (Z <= self.tau)
        uc, counts = np.unique(Z[mask], return_counts=True)
        at_risk = (self.N - np.searchsorted(np.sort(Z), uc, side="left")).astype(float)
        return uc, counts, at_risk

    def q_hat_at(self, u: np.ndarray) -> np.ndarray:
        """q-hat(u): censoring-influence direction, one p-vector per u.

        Only other-cause failures with Z < u contribute: their weighted
        compensator mass on [u, tau].
        """
        prim = self.primitives()
        tj, td = prim["tail_j"], prim["tail_d"]
        gpos = np.searchsorted(self.pts, u)
        last = self.G - 1

        suf_b = tj["b"][last] - tj["b"][gpos] + tj["atom_b"][gpos]
        suf_x = tj["x"][last] - tj["x"][gpos] + tj["atom_x"][gpos]
        sbb = td["bb"][last] - td["bb"][gpos]
        sbx = td["bx"][last] - td["bx"][gpos]
        sxb = td["xb"][last] - td["xb"][gpos]
        sxx = td["xx"][last] - td["xx"][gpos]

        c0, c1, c2 = self._prefix_lookup(self._tail_tables, u, side="left")
        beta = self.beta
        out = c1 * suf_b - c0[:, None] * suf_x
        out += np.einsum("uab,uab,b->ua", sbb, c2, beta)
        out -= c1 * sbx
        out -= np.einsum("uab,ub->ua", sxb, c1 * beta)
        out += c0[:, None] * sxx
        return out / self.n

    def psi_per_subject(self) -> np.ndarray:
        """psi_ij: contribution of estimating the censoring distribution."""
        if self.mode == MODE_CC:
            return np.zeros((self.N, self.p))
        uc, counts, at_risk = self.censor_points()
        if uc.size == 0:
            return np.zeros((self.N, self.p))
        q = self.q_hat_at(uc)
        pi = at_risk / self.n
        lam = counts / at_risk
        q_over_pi = q / pi[:, None]
        kc = _cum0(q_over_pi * lam[:, None])
        Z = self.ds.time
        out = -kc[np.searchsorted(uc, np.minimum(Z, self.tau), side="right")]
        mask = self.is_cens & (Z <= self.tau)
        out[mask] += q_over_pi[np.searchsorted(uc, Z[mask])]
        return out

    def cluster_sum(self, per_subject: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n,) + per_subject.shape[1:])
        np.add.at(out, self.ds.cluster_index, per_subject)
        return out

    # ------------------------------------------------------------------
    # per-cluster score-process paths (model checking)
    # ------------------------------------------------------------------

    def phi_cluster_paths(self) -> np.ndarray:
        """Phi_i(t) at the knots: per-cluster centered weighted residual sums.

        No dense subject-by-time array: at each knot, still-at-risk
        subjects contribute shared paths applied to running cluster sums
        of (1, X, XX'), exited subjects contribute a frozen constant, and
        (IPCW) other-cause failures add G-weighted tail paths applied to
        running tail sums.
        """
        prim = self.primitives()
        X = self.ds.X
        beta = self.beta
        Xb = X * beta
        n, T, p = self.n, self.T, self.p
        ci = self.ds.cluster_index
        kg = self.kpt

        def scatter_vec(values, bins):
            out = np.zeros((n, T + 1, values.shape[1]))
            np.add.at(out, (ci, bins), values)
            return np.cumsum(out, axis=1)

        def scatter_mat(values, bins):
            out = np.zeros((n, T + 1, p, p))
            np.add.at(out, (ci, bins), values)
            return np.cumsum(out, axis=1)

        def scatter_scalar(values, bins):
            out = np.zeros((n, T + 1))
            np.add.at(out, (ci, bins), values)
            return np.cumsum(out, axis=1)

        fb = self.freeze_bin
        ev_vals = np.zeros((self.N, p))
        ev_vals[self.event_subjects] = self.event_terms
        E = scatter_vec(ev_vals, np.minimum(self.knotpos, T))[:, :T]

        XX = X[:, :, None] * X[:, None, :]
        tot1 = self.cluster_sum(X)[:, None, :]
        tot2 = self.cluster_sum(XX)[:, None, :, :]
        totc = np.bincount(ci, minlength=n).astype(float)[:, None]
        act1 = tot1 - scatter_vec(X, fb)[:, :T]
        act2 = tot2 - scatter_mat(XX, fb)[:, :T]
        actc = totc - scatter_scalar(np.ones(self.N), fb)[:, :T]

        cd = prim["core_d"]
        cj = prim["core_j"]
        L = (
            act1 * cj["b"][kg][None]
            - actc[:, :, None] * cj["x"][kg][None]
            + np.einsum("tab,itab,b->ita", cd["bb"][kg], act2, beta)
            - act1 * cd["bx"][kg][None]
            - np.einsum("tab,itb->ita", cd["xb"][kg], act1 * beta)
            + actc[:, :, None] * cd["xx"][kg][None]
        )

        # frozen constant: the full core integral up to the exit, minus the
        # tail-path offset at the exit for other-cause subjects
        g = self.pos
        const = self._jump_read(cj, g, X, drop_atom=self.excl_atom[:, None])
        const += self._drift_read(cd, g, X, Xb)
        has_tail = self.v_tail > 0
        if self.mode == MODE_IPCW and np.any(has_tail):
            tj, td = prim["tail_j"], prim["tail_d"]
            off = self._jump_read(tj, g, X) + self._drift_read(td, g, X, Xb)
            const = const - self.v_tail[:, None] * off
        F = scatter_vec(const, fb)[:, :T]

        out = E - L - F

        if self.mode == MODE_IPCW and np.any(has_tail):
            tj, td = prim["tail_j"], prim["tail_d"]
            vt = self.v_tail
            t1 = scatter_vec(vt[:, None] * X, fb)[:, :T]
            t2 = scatter_mat(vt[:, None, None] * XX, fb)[:, :T]
            tc = scatter_scalar(vt, fb)[:, :T]
            H = (
                t1 * tj["b"][kg][None]
                - tc[:, :, None] * tj["x"][kg][None]
                + np.einsum("tab,itab,b->ita", td["bb"][kg], t2, beta)
                - t1 * td["bx"][kg][None]
                - np.einsum("tab,itb->ita", td["xb"][kg], t1 * beta)
                + tc[:, :, None] * td["xx"][kg][None]
            )
            out = out - H
        return out

    # ------------------------------------------------------------------
    # dense per-subject rows (functional-form checks, residual paths)
    # ------------------------------------------------------------------

    def weight_rows(self, idx: np.ndarray, at: np.ndarray) -> np.ndarray:
        """w_ij(t) = omega-hat * Y (IPCW) or I(C > t) * Y (CC) at times t."""
        Z = self.ds.time[idx]
        if self.mode == MODE_IPCW:
            g_t = np.asarray(self.censoring.survival(at))
            core = at[None, :] <= Z[:, None]
            out = core.astype(float)
            v = self.v_tail[idx]
            tail = ~core & (v > 0)[:, None]
            out += np.where(tail, g_t[None, :] * v[:, None], 0.0)
            return out
        exit_raw = self.exit_raw[idx]
        excl = self.exit_excl[idx]
        strict = at[None, :] < exit_raw[:, None]
        incl = at[None, :] <= exit_raw[:, None]
        return np.where(excl[:, None], strict, incl).astype(float)

    def residual_measure_rows(self, idx: np.ndarray) -> np.ndarray:
        """Per-subject increments of ``omega-hat dM-hat`` per knot interval.

        Column m holds the mass on (knot_{m-1}, knot_m]: the subject's own
        event atom, minus weighted baseline jumps, minus the weighted
        drift integral.
        """
        prim = self.primitives()
        X = self.ds.X[idx]
        Xb = X * self.beta
        kg = self.kpt
        g = self.pos[idx]
        rows = np.zeros((idx.size, self.T))

        kz = self.knotpos[idx]
        ev = self.valid_event[idx]
        rows[np.flatnonzero(ev), kz[ev]] += 1.0

        cj, cd = prim["core_j"], prim["core_d"]
        gcap = np.minimum(kg[None, :], g[:, None])
        comp = (
            cj["s"][gcap]
            - self.excl_atom[idx][:, None] * (gcap == g[:, None]) * cj["atom_s"][g][:, None]
            + np.einsum("ntp,np->nt", cd["bvec"][gcap], Xb)
            - cd["xhd"][gcap]
        )
        if self.mode == MODE_IPCW:
            v = self.v_tail[idx]
            if np.any(v > 0):
                tj, td = prim["tail_j"], prim["tail_d"]
                span = np.maximum(kg[None, :], g[:, None])
                tail = (
                    tj["s"][span]
                    - tj["s"][g][:, None]
                    + np.einsum(
                        "ntp,np->nt",
                        td["bvec"][span] - td["bvec"][g][:, None, :],
                        Xb,
                    )
                    - (td["xhd"][span] - td["xhd"][g][:, None])
                )
                comp = comp + v[:, None] * tail
        rows[:, 0] -= comp[:, 0]
        rows[:, 1:] -= np.diff(comp, axis=1)
        return rows

    def subject_h_vectors(self) -> np.ndarray:
        """Per-subject ``int_0^tau w (X - X-hat) du`` (for h-hat reads)."""
        prim = self.primitives()
        X = self.ds.X
        g = self.pos
        cd = prim["core_d"]
        out = X * cd["bvec"][g] - cd["xvec"][g]
        if self.mode == MODE_IPCW and np.any(self.v_tail > 0):
            td = prim["tail_d"]
            last = self.G - 1
            tail = X * (td["bvec"][last] - td["bvec"][g]) - (
                td["xvec"][last] - td["xvec"][g]
            )
            out += self.v_tail[:, None] * tail
        return out

    def residual_path_unweighted(self, i: int) -> np.ndarray:
        """M-hat_ij at the knots: N - int Y {dLambda0 + X' beta du}.

        The subdistribution risk indicator Y stays 1 after censoring and
        after failures from other causes; only a cause-k failure ends it.
        """
        prim = self.primitives()
        cj, cd = prim["core_j"], prim["core_d"]
        X = self.ds.X[i]
        Xb = X * self.beta
        kg = self.kpt
        stop = self.pos[i] if self.is_event_subject[i] else self.G - 1
        gcap = np.minimum(kg, stop)
        out = np.zeros(self.T)
        if self.valid_event[i]:
            out[self.knotpos[i]:] += 1.0
        out -= cj["s"][gcap]
        out -= cd["bvec"][gcap] @ Xb - cd["xhd"][gcap]
        return out
