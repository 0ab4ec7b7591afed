"""Compiled next-reaction-method engine.

One loop serves both a single network (``mode == 0``; ``K`` channels on ``d``
species) and the split coupling of two networks (``mode == 1``; ``3K``
channels on ``2d`` species, channel ``3k + j`` is type ``j + 1``).

Uniform draws come from numpy bit generators through their C-level
``next_double`` hook, so every path owns an independent, seedable stream.
The hook address is passed in at run time, which keeps the compiled code
cacheable on disk.
"""
import ctypes

import numpy as np
import numba as nb
from llvmlite import ir
from numba.core import types
from numba.extending import intrinsic

SINGLE = 0
COUPLED = 1

# output row layout (scalars, then blocks of length R, then the final state)
ST_STATUS = 0
ST_JUMPS = 1
ST_LX = 2
ST_FX = 3
ST_VALID = 4
ST_LAMBDA_BAD = 5
ST_DIVERGED = 6
ST_LZ = 7
ST_FZ = 8
ST_TLAST = 9
ST_WORK = 10
N_SCALARS = 11

STATUS_OK = 0
STATUS_EXPLOSION = 1
STATUS_RECORD_FULL = 2


def row_layout(R, D, C):
    """Offsets of the per-path output row."""
    o = N_SCALARS
    lay = {}
    for name in ("dL", "dFx", "H", "dFz"):
        lay[name] = (o, o + R)
        o += R
    lay["state"] = (o, o + D)
    o += D
    lay["counts"] = (o, o + C)
    o += C
    lay["size"] = o
    return lay


def next_double_address(bitgen):
    return ctypes.cast(bitgen.ctypes.next_double, ctypes.c_void_p).value


@intrinsic
def _next_double(typingctx, fnptr, state):
    sig = types.float64(types.uintp, types.uintp)

    def codegen(context, builder, signature, args):
        fnty = ir.FunctionType(ir.DoubleType(), [ir.IntType(8).as_pointer()])
        f = builder.inttoptr(args[0], fnty.as_pointer())
        st = builder.inttoptr(args[1], ir.IntType(8).as_pointer())
        return builder.call(f, [st])

    return sig, codegen


@nb.njit(cache=True, nogil=True, _nrt=False)
def _exp_draw(fp, addr):
    return -np.log(1.0 - _next_double(fp, addr))


@nb.njit(cache=True, nogil=True, _nrt=False)
def _eval_net(theta, w, off, d, spec, nu, par, sfloor, lam, dlam, loff, br):
    """Rates of one network at ``w[off:off+d]`` into ``lam[loff:loff+K]``.

    ``br[k]`` records the branch: 0 unclipped, 1 floor, 2 ceiling.
    """
    K = spec.shape[0]
    R = theta.shape[0]
    neg = False
    if sfloor:
        for i in range(d):
            if w[off + i] < 0:
                neg = True
    for k in range(K):
        row = loff + k
        for i in range(R):
            dlam[row, i] = 0.0
        br[k] = 0
        if neg:
            lam[row] = 0.0
            continue
        kind = spec[k, 0]
        p0 = spec[k, 1]
        p1 = spec[k, 2]
        short = False
        for i in range(d):
            if nu[k, i] > 0 and w[off + i] < nu[k, i]:
                short = True
        if short:
            if spec[k, 4] == 1:
                delta = par[k, 0]
                if kind == 0:
                    lam[row] = theta[p0] * delta
                    dlam[row, p0] += delta
                else:
                    den = theta[p1] + delta
                    lam[row] = theta[p0] * delta / den
                    dlam[row, p0] += delta / den
                    dlam[row, p1] -= theta[p0] * delta / (den * den)
                br[k] = 1
            else:
                lam[row] = 0.0
            continue
        if kind == 0:
            g = 1.0
            for i in range(d):
                xi = w[off + i]
                for m in range(nu[k, i]):
                    g *= xi - m
            v = theta[p0] * g
            cap = theta[p0] * par[k, 1]
            if v >= cap:
                lam[row] = cap
                dlam[row, p0] += par[k, 1]
                br[k] = 2
            else:
                lam[row] = v
                dlam[row, p0] += g
        else:
            xs = w[off + spec[k, 3]]
            den = theta[p1] + xs
            lam[row] = theta[p0] * xs / den
            dlam[row, p0] += xs / den
            dlam[row, p1] -= theta[p0] * xs / (den * den)


@nb.njit(cache=True, nogil=True, _nrt=False)
def _channel_rates(mode, thx, thz, w, d, xspec, xnu, xpar, xfl, zspec, znu, zpar, zfl,
                   lam, dlam, lx, dlx, lz, dlz, brx, brz):
    if mode == 0:
        _eval_net(thx, w, 0, d, xspec, xnu, xpar, xfl, lam, dlam, 0, brx)
        return
    _eval_net(thx, w, 0, d, xspec, xnu, xpar, xfl, lx, dlx, 0, brx)
    _eval_net(thz, w, d, d, zspec, znu, zpar, zfl, lz, dlz, 0, brz)
    K = lx.shape[0]
    R = thx.shape[0]
    for k in range(K):
        a = lx[k]
        b = lz[k]
        c = 3 * k
        # ties take the X-branch derivative
        if a <= b:
            lam[c] = a
            lam[c + 1] = 0.0
            lam[c + 2] = b - a
            for i in range(R):
                dlam[c, i] = dlx[k, i]
                dlam[c + 1, i] = 0.0
                dlam[c + 2, i] = dlz[k, i] - dlx[k, i]
        else:
            lam[c] = b
            lam[c + 1] = a - b
            lam[c + 2] = 0.0
            for i in range(R):
                dlam[c, i] = dlz[k, i]
                dlam[c + 1, i] = dlx[k, i] - dlz[k, i]
                dlam[c + 2, i] = 0.0


@nb.njit(cache=True, nogil=True, _nrt=False)
def _poly(w, off, d, pw, cf, zeta, k):
    """Polynomial at ``w[off:off+d]`` (shifted by ``zeta[k]`` when ``k >= 0``)."""
    tot = 0.0
    for t in range(cf.shape[0]):
        term = cf[t]
        for i in range(d):
            p = pw[t, i]
            if p:
                xi = w[off + i]
                if k >= 0:
                    xi += zeta[k, i]
                term *= float(xi) ** p
        tot += term
    return tot


@nb.njit(cache=True, nogil=True, _nrt=False)
def _func_eval(theta, w, off, d, pw, cf, alpha, beta, gamma, fspec, fnu, fpar, ffl, shared,
               use_rates, zeta, shared_lam, shared_dlam, flam, fdlam, fbr, dF):
    """Integrand ``F`` at one state; its theta-gradient is written to ``dF``.

    ``F = alpha * P(x) + sum_k lambda_k (beta_k + gamma * (P(x + zeta_k) - P(x)))``
    with rates from the functional's own network (or the shared buffers).
    """
    R = theta.shape[0]
    for i in range(R):
        dF[i] = 0.0
    base = _poly(w, off, d, pw, cf, zeta, -1)
    F = alpha * base
    if use_rates == 0:
        return F
    if shared:
        lam = shared_lam
        dlam = shared_dlam
    else:
        _eval_net(theta, w, off, d, fspec, fnu, fpar, ffl, flam, fdlam, 0, fbr)
        lam = flam
        dlam = fdlam
    K = beta.shape[0]
    for k in range(K):
        c = beta[k]
        if gamma != 0.0:
            c += gamma * (_poly(w, off, d, pw, cf, zeta, k) - base)
        if c != 0.0:
            F += c * lam[k]
            for i in range(R):
                dF[i] += c * dlam[k, i]
    return F


@nb.njit(cache=True, nogil=True)
def make_workspace(C, K, R, D):
    """Scratch buffers for :func:`run_path` (allocated once per batch)."""
    return (np.zeros(D, dtype=np.int64), np.zeros(C), np.zeros((C, R)), np.zeros(K),
            np.zeros((K, R)), np.zeros(K), np.zeros((K, R)), np.zeros(K, dtype=np.int64),
            np.zeros(K, dtype=np.int64), np.zeros(K), np.zeros((K, R)),
            np.zeros(K, dtype=np.int64), np.zeros(R), np.zeros(R), np.zeros(C), np.zeros(C),
            np.zeros((C, R)), np.zeros(R), np.zeros(R), np.zeros(R), np.zeros(R), np.zeros(R))


# The per-jump loop runs without reference counting: every buffer comes from
# the caller, and refcount traffic on array arguments otherwise dominates.
@nb.njit(cache=True, nogil=True, _nrt=False)
def run_path(mode, thx, thz, w0, d, jumps, zeta, netx, netz, fun, opts, fp, addr, init_i, out,
             rec_t, rec_c, rec_w, ws):
    """Simulate one path and accumulate every requested statistic into ``out``.

    ``opts``: horizon, lr time, terminal time, jump cap, want pathwise (0/1),
    want lr (0/1), record (0/1), want functional (0/1).
    """
    C = jumps.shape[0]
    D = jumps.shape[1]
    R = thx.shape[0]
    K = zeta.shape[0]
    horizon = opts[0]
    t_lr = opts[1]
    t_term = opts[2]
    cap = opts[3]
    want_dl = opts[4] != 0.0
    want_lr = opts[5] != 0.0
    record = opts[6] != 0.0
    want_fun = opts[7] != 0.0
    pw, cf, alpha, beta, gamma, a, b, fnet, shared, use_rates, tpw, tcf = fun
    fspec, fnu, fpar, ffl = fnet
    xspec, xnu, xpar, xfl = netx
    zspec, znu, zpar, zfl = netz

    lay_dl = N_SCALARS
    lay_dfx = lay_dl + R
    lay_h = lay_dfx + R
    lay_dfz = lay_h + R
    lay_state = lay_dfz + R
    lay_cnt = lay_state + D
    for i in range(out.shape[0]):
        out[i] = 0.0

    (w, lam, dlam, lx, dlx, lz, dlz, brx, brz, flam, fdlam, fbr, dFx, dFz, S, I, dS, dT,
     dDelta, dL, hjump, hint) = ws
    for i in range(D):
        w[i] = w0[i]
    for c in range(C):
        S[c] = 0.0
        for i in range(R):
            dS[c, i] = 0.0
    for i in range(R):
        dT[i] = 0.0
        dL[i] = 0.0
        hjump[i] = 0.0
        hint[i] = 0.0
    for c in range(C):
        if init_i[c] == init_i[c]:
            I[c] = init_i[c]
        else:
            I[c] = _exp_draw(fp, addr)

    t = 0.0
    n = 0
    flag = 0
    Lx = 0.0
    Lz = 0.0
    fx_term = 0.0
    fz_term = 0.0
    have_term = False
    valid = 1.0
    lam_bad = 0.0
    diverged = 0.0
    work = 0.0
    status = STATUS_OK
    Fx = 0.0

    while True:
        _channel_rates(mode, thx, thz, w, d, xspec, xnu, xpar, xfl, zspec, znu, zpar, zfl,
                       lam, dlam, lx, dlx, lz, dlz, brx, brz)
        work += C
        if mode == 0:
            for k in range(K):
                if brx[k] == 2:
                    valid = 0.0
        else:
            for k in range(K):
                c = 3 * k
                if lam[c + 1] * lam[c + 2] != 0.0:
                    lam_bad += 1.0
                sx = lam[c] + lam[c + 1]
                sz = lam[c] + lam[c + 2]
                if abs(sx - lx[k]) > 1e-12 * abs(lx[k]) or abs(sz - lz[k]) > 1e-12 * abs(lz[k]):
                    lam_bad += 1.0

        j = -1
        best = np.inf
        for c in range(C):
            if lam[c] > 0.0:
                q = (I[c] - S[c]) / lam[c]
                if q < best:
                    best = q
                    j = c
        delta_t = best
        tn = t + delta_t
        stop = tn > horizon
        seg_end = horizon if stop else tn

        if want_fun:
            Fx = _func_eval(thx, w, 0, d, pw, cf, alpha, beta, gamma, fspec, fnu, fpar, ffl, shared,
                            use_rates, zeta, lam, dlam, flam, fdlam, fbr, dFx)
            ov = min(seg_end, b) - max(t, a)
            if ov > 0.0:
                Lx += Fx * ov
                for i in range(R):
                    out[lay_dfx + i] += dFx[i] * ov
            if mode == 1:
                Fz = _func_eval(thz, w, d, d, pw, cf, alpha, beta, gamma, fspec, fnu, fpar, ffl, 0,
                                use_rates, zeta, lam, dlam, flam, fdlam, fbr, dFz)
                if ov > 0.0:
                    Lz += Fz * ov
                    for i in range(R):
                        out[lay_dfz + i] += dFz[i] * ov

        if want_lr:
            ov = min(seg_end, t_lr) - t
            if ov > 0.0:
                for c in range(C):
                    for i in range(R):
                        hint[i] += dlam[c, i] * ov

        if not have_term and (seg_end > t_term or stop):
            fx_term = _poly(w, 0, d, tpw, tcf, zeta, -1)
            if mode == 1:
                fz_term = _poly(w, d, d, tpw, tcf, zeta, -1)
            have_term = True

        if stop:
            if want_dl:
                ov = b - max(t, a)
                if ov > 0.0:
                    for i in range(R):
                        dL[i] += ov * dFx[i]
                if flag == 1:
                    for i in range(R):
                        dL[i] -= Fx * dT[i]
            break

        lj = lam[j]
        if want_dl:
            for i in range(R):
                dDelta[i] = -(delta_t / lj) * dlam[j, i] - dS[j, i] / lj
            ov = min(tn, b) - max(t, a)
            if ov > 0.0:
                for i in range(R):
                    dL[i] += ov * dFx[i]
            if tn < a:
                pass
            elif tn > a and flag == 0:
                for i in range(R):
                    dL[i] += Fx * (dT[i] + dDelta[i])
                flag = 1
            else:
                for i in range(R):
                    dL[i] += Fx * dDelta[i]

        if want_lr and tn <= t_lr:
            for i in range(R):
                hjump[i] += dlam[j, i] / lj
        if tn <= t_lr:
            out[lay_cnt + j] += 1.0
        if mode == 0:
            if brx[j] == 1:
                valid = 0.0
        elif j % 3 != 0:
            diverged = 1.0

        if record:
            if n >= rec_t.shape[0]:
                status = STATUS_RECORD_FULL
                break
            rec_t[n] = tn
            rec_c[n] = j

        for i in range(D):
            w[i] += jumps[j, i]
        if record:
            for i in range(D):
                rec_w[n, i] = w[i]
        for c in range(C):
            S[c] += delta_t * lam[c]
        if want_dl:
            for c in range(C):
                for i in range(R):
                    dS[c, i] += delta_t * dlam[c, i] + lam[c] * dDelta[i]
            for i in range(R):
                dT[i] += dDelta[i]
        I[j] += _exp_draw(fp, addr)
        t = tn
        n += 1
        if n > cap:
            status = STATUS_EXPLOSION
            break

    out[ST_STATUS] = status
    out[ST_JUMPS] = n
    out[ST_LX] = Lx
    out[ST_FX] = fx_term
    out[ST_VALID] = valid
    out[ST_LAMBDA_BAD] = lam_bad
    out[ST_DIVERGED] = diverged
    out[ST_LZ] = Lz
    out[ST_FZ] = fz_term
    out[ST_TLAST] = t
    out[ST_WORK] = work
    for i in range(R):
        out[lay_dl + i] = dL[i]
        out[lay_h + i] = hjump[i] - hint[i]
    for i in range(D):
        out[lay_state + i] = w[i]


@nb.njit(cache=True, nogil=True)
def run_batch(mode, thx, thz, w0, d, jumps, zeta, netx, netz, fun, opts, fp, addrs, out):
    C = jumps.shape[0]
    ws = make_workspace(C, zeta.shape[0], thx.shape[0], jumps.shape[1])
    init_i = np.full(C, np.nan)
    rec_t = np.zeros(0)
    rec_c = np.zeros(0, dtype=np.int64)
    rec_w = np.zeros((0, jumps.shape[1]), dtype=np.int64)
    for p in range(addrs.shape[0]):
        run_path(mode, thx, thz, w0, d, jumps, zeta, netx, netz, fun, opts, fp, addrs[p], init_i,
                 out[p], rec_t, rec_c, rec_w, ws)


@nb.njit(cache=True, nogil=True)
def _rates_many(theta, states, d, net, lam, dlam):
    K = net[0].shape[0]
    br = np.zeros(K, dtype=np.int64)
    for s in range(states.shape[0]):
        _eval_net(theta, states[s], 0, d, net[0], net[1], net[2], net[3], lam[s], dlam[s], 0, br)


def rates_many(net, theta, states):
    """Rates ``(n, K)`` and gradients ``(n, K, R)`` at many states."""
    states = np.ascontiguousarray(states, dtype=np.int64)
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    n = states.shape[0]
    K = net.num_reactions
    lam = np.zeros((n, K))
    dlam = np.zeros((n, K, theta.shape[0]))
    _rates_many(theta, states, net.num_species, net.compiled, lam, dlam)
    return lam, dlam
