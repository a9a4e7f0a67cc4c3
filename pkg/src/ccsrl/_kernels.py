"""Compiled inner loop of the reservoir proxy.

One call advances a full control interval: per substep it assembles the
banded pressure matrix, factorizes it with LAPACK ``dpbtrf`` (reached through
scipy's cython_lapack table), enforces BHP limits by an active set over the
well responses and runs CFL sub-cycled upwind transport of the per-cell phase
volumes.
"""

from __future__ import annotations

import ctypes
import math

import numpy as np
from numba import njit
from numba.extending import get_cython_function_address

DAY = 86400.0

OK = 0
NOT_POSITIVE_DEFINITE = 1
NON_FINITE = 2
TOO_MANY_SUBCYCLES = 3

_vp = ctypes.c_void_p
_dpbtrf = ctypes.CFUNCTYPE(None, _vp, _vp, _vp, _vp, _vp, _vp)(
    get_cython_function_address("scipy.linalg.cython_lapack", "dpbtrf"))
_dpbtrs = ctypes.CFUNCTYPE(None, _vp, _vp, _vp, _vp, _vp, _vp, _vp, _vp, _vp)(
    get_cython_function_address("scipy.linalg.cython_lapack", "dpbtrs"))


@njit(cache=True)
def _mobility(sg, mu_g, mu_w, eg, ew, sgr, swr):
    span = 1.0 - sgr - swr
    se_g = min(max((sg - sgr) / span, 0.0), 1.0)
    se_w = min(max((1.0 - sg - swr) / span, 0.0), 1.0)
    return se_g**eg / mu_g, se_w**ew / mu_w


@njit(cache=True)
def _saturation(g, w):
    return min(max(g / (g + w), 0.0), 1.0)


# not cacheable: the LAPACK entry points are ctypes globals
@njit
def run_interval(pressure, gas, brine, accum, face_a, face_b, face_t, rank, face_hi, face_off, bw,
                 perf_cell, perf_well, perf_wi, is_inj, sign, bhp_limit, targets,
                 fluid, dt, n_sub, sample_of_step, cfl, max_subcycles,
                 out_rates, out_gas, out_water, out_bhp, delivered, totals):
    """Advance ``pressure``, ``gas`` and ``brine`` in place; return a status code.

    ``fluid`` packs (mu_g, mu_w, corey_g, corey_w, sgr, swr, mobility_floor, max_dfg).
    ``totals`` receives (gas injected, gas produced, brine produced) in m3.
    """
    mu_g, mu_w, eg, ew, sgr, swr, floor, max_dfg = (fluid[0], fluid[1], fluid[2], fluid[3],
                                                    fluid[4], fluid[5], fluid[6], fluid[7])
    n = pressure.shape[0]
    nf = face_a.shape[0]
    nperf = perf_cell.shape[0]
    nw = targets.shape[0]
    kd = bw + 1

    lam = np.empty(n)
    wf = np.empty(nf)
    ab = np.zeros((n, kd))  # column-major upper band storage for LAPACK
    rhs = np.zeros((nw + 1, n))
    conn = np.empty(nperf)
    conn_sum = np.zeros(nw)
    share = np.empty(nperf)
    g0 = np.zeros(nw)
    G = np.zeros((nw, nw))
    q = np.empty(nw)
    bhp = np.empty(nw)
    p = np.empty(n)
    flux = np.empty(nf)
    src_inj = np.zeros(n)
    src_prod = np.zeros(n)
    out_rate = np.zeros(n)
    fg = np.empty(n)
    dg = np.empty(n)
    dw = np.empty(n)
    gas_out = np.zeros(n)
    gas_well = np.zeros(nw)

    uplo = np.array([ord("U")], dtype=np.uint8)
    n_arr = np.array([n], dtype=np.int32)
    kd_arr = np.array([bw], dtype=np.int32)
    ld_arr = np.array([kd], dtype=np.int32)
    nrhs_arr = np.array([nw + 1], dtype=np.int32)
    info = np.zeros(1, dtype=np.int32)

    for c in range(3):
        totals[c] = 0.0
    for w in range(nw):
        delivered[w] = 0.0

    for s in range(n_sub):
        # mobilities
        for c in range(n):
            lg, lw = _mobility(_saturation(gas[c], brine[c]), mu_g, mu_w, eg, ew, sgr, swr)
            lam[c] = max(lg + lw, floor)

        # banded pressure matrix and right-hand sides
        ab[:, :] = 0.0
        for c in range(n):
            ab[rank[c], bw] = accum[c] / dt
        for f in range(nf):
            a = face_a[f]
            b = face_b[f]
            wv = face_t[f] * 0.5 * (lam[a] + lam[b])
            wf[f] = wv
            ab[rank[a], bw] += wv
            ab[rank[b], bw] += wv
            ab[face_hi[f], face_off[f]] -= wv
        rhs[:, :] = 0.0
        for c in range(n):
            rhs[0, rank[c]] = accum[c] / dt * pressure[c]
        conn_sum[:] = 0.0
        for k in range(nperf):
            conn[k] = perf_wi[k] * lam[perf_cell[k]]
            conn_sum[perf_well[k]] += conn[k]
        for k in range(nperf):
            w = perf_well[k]
            share[k] = conn[k] / conn_sum[w]
            rhs[1 + w, rank[perf_cell[k]]] += sign[w] * share[k] / DAY

        _dpbtrf(uplo.ctypes, n_arr.ctypes, kd_arr.ctypes, ab.ctypes, ld_arr.ctypes, info.ctypes)
        if info[0] != 0:
            return NOT_POSITIVE_DEFINITE
        _dpbtrs(uplo.ctypes, n_arr.ctypes, kd_arr.ctypes, nrhs_arr.ctypes, ab.ctypes, ld_arr.ctypes,
                rhs.ctypes, n_arr.ctypes, info.ctypes)
        if info[0] != 0:
            return NOT_POSITIVE_DEFINITE

        # well-averaged responses: bhp = g0 + G q
        g0[:] = 0.0
        G[:, :] = 0.0
        for k in range(nperf):
            w = perf_well[k]
            r = rank[perf_cell[k]]
            g0[w] += share[k] * rhs[0, r]
            for v in range(nw):
                G[w, v] += share[k] * rhs[1 + v, r]
        for w in range(nw):
            G[w, w] += sign[w] / DAY / conn_sum[w]
            q[w] = targets[w]
        active = np.zeros(nw, dtype=np.bool_)
        for _ in range(nw):
            for w in range(nw):
                acc = g0[w]
                for v in range(nw):
                    acc += G[w, v] * q[v]
                bhp[w] = acc
            n_new = 0
            for w in range(nw):
                if active[w] or q[w] <= 0.0:
                    continue
                over = bhp[w] > bhp_limit[w] + 1.0 if is_inj[w] else bhp[w] < bhp_limit[w] - 1.0
                if over:
                    active[w] = True
                    n_new += 1
            if n_new == 0:
                break
            idx = np.flatnonzero(active)
            m = idx.shape[0]
            M = np.empty((m, m))
            ra = np.empty(m)
            for i in range(m):
                wi = idx[i]
                acc = bhp_limit[wi] - g0[wi]
                for v in range(nw):
                    if not active[v]:
                        acc -= G[wi, v] * targets[v]
                ra[i] = acc
                for j in range(m):
                    M[i, j] = G[wi, idx[j]]
            sol = np.linalg.solve(M, ra)
            for i in range(m):
                q[idx[i]] = min(max(sol[i], 0.0), targets[idx[i]])
        for w in range(nw):
            acc = g0[w]
            for v in range(nw):
                acc += G[w, v] * q[v]
            bhp[w] = acc

        for c in range(n):
            r = rank[c]
            acc = rhs[0, r]
            for w in range(nw):
                acc += rhs[1 + w, r] * q[w]
            if not math.isfinite(acc):
                return NON_FINITE
            p[c] = acc
            pressure[c] = acc

        # total-volume fluxes (m3/s) and well sources
        src_inj[:] = 0.0
        src_prod[:] = 0.0
        out_rate[:] = 0.0
        for f in range(nf):
            fl = wf[f] * (p[face_a[f]] - p[face_b[f]])
            flux[f] = fl
            if fl > 0.0:
                out_rate[face_a[f]] += fl
            else:
                out_rate[face_b[f]] -= fl
        for k in range(nperf):
            w = perf_well[k]
            pq = q[w] * share[k] / DAY
            if is_inj[w]:
                src_inj[perf_cell[k]] += pq
            else:
                src_prod[perf_cell[k]] += pq
        rate_limit = 0.0
        for c in range(n):
            out_rate[c] += src_prod[c]
            rate_limit = max(rate_limit, out_rate[c] * max_dfg / (gas[c] + brine[c]))
        n_cyc = max(1, int(math.ceil(dt * rate_limit / cfl)))
        if n_cyc > max_subcycles:
            return TOO_MANY_SUBCYCLES
        h = dt / n_cyc
        gas_out[:] = 0.0
        for _ in range(n_cyc):
            for c in range(n):
                lg, lw = _mobility(_saturation(gas[c], brine[c]), mu_g, mu_w, eg, ew, sgr, swr)
                fg[c] = lg / max(lg + lw, 1e-300)
                dg[c] = 0.0
                dw[c] = 0.0
            for f in range(nf):
                fl = flux[f]
                up = face_a[f] if fl > 0.0 else face_b[f]
                gfl = fl * fg[up]
                wfl = fl - gfl
                dg[face_b[f]] += gfl
                dg[face_a[f]] -= gfl
                dw[face_b[f]] += wfl
                dw[face_a[f]] -= wfl
            for c in range(n):
                gp = src_prod[c] * fg[c]
                gas[c] += h * (dg[c] + src_inj[c] - gp)
                brine[c] += h * (dw[c] - src_prod[c] + gp)
                gas_out[c] += h * gp

        gi = 0.0
        gp_tot = 0.0
        sp = 0.0
        for c in range(n):
            gi += src_inj[c]
            gp_tot += gas_out[c]
            sp += src_prod[c]
        totals[0] += gi * dt
        totals[1] += gp_tot
        totals[2] += sp * dt - gp_tot

        for w in range(nw):
            delivered[w] += q[w] / n_sub
        j = sample_of_step[s]
        if j >= 0:
            gas_well[:] = 0.0
            for k in range(nperf):
                gas_well[perf_well[k]] += gas_out[perf_cell[k]]
            for w in range(nw):
                out_rates[j, w] = q[w]
                out_bhp[j, w] = bhp[w]
                if is_inj[w]:
                    out_gas[j, w] = q[w]
                    out_water[j, w] = 0.0
                else:
                    out_gas[j, w] = gas_well[w] / dt * DAY
                    out_water[j, w] = q[w] - out_gas[j, w]
    return OK
