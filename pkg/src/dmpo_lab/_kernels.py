"""Compiled inner loops for MPC rollouts and the clamp-aware proposal slopes.

Mirrors ``sim.step_array`` (closed-form translational integration under a
held thrust and rate, exact quaternion exponential) fused with the stage
cost, one sample at a time. Tests compare it against the numpy simulator.
"""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def _integral_coeffs(th2, dt):
    th = math.sqrt(th2)
    T = dt
    if th * dt < 0.05:
        t2 = th2 * th2
        a1 = T - th2 * T**3 / 6 + t2 * T**5 / 120
        a2 = T**2 / 2 - th2 * T**4 / 24 + t2 * T**6 / 720
        a3 = T**3 / 6 - th2 * T**5 / 120 + t2 * T**7 / 5040
        a4 = T**4 / 24 - th2 * T**6 / 720 + t2 * T**8 / 40320
    else:
        s = math.sin(th * T)
        c = math.cos(th * T)
        a1 = s / th
        a2 = (1 - c) / th2
        a3 = (T - s / th) / th2
        a4 = (T**2 / 2 - (1 - c) / th2) / th2
    return a1, a2, a3, a4


@njit(cache=True)
def _rotate(qw, qx, qy, qz, vx, vy, vz):
    tx = 2.0 * (qy * vz - qz * vy)
    ty = 2.0 * (qz * vx - qx * vz)
    tz = 2.0 * (qx * vy - qy * vx)
    return (vx + qw * tx + (qy * tz - qz * ty),
            vy + qw * ty + (qz * tx - qx * tz),
            vz + qw * tz + (qx * ty - qy * tx))


@njit(cache=True)
def rollout_costs(x0, controls, ref_p, ref_q, mass, gvec, k, dt, f_max, omega_max, hover,
                  w_p, w_q, w_u, terminal_scale, large):
    """x0 (B,17); controls (B,N,H,4) normalized; ref_p (B,H,3); ref_q (B,H,4) -> (B,N)."""
    B, N, H, _ = controls.shape
    out = np.empty((B, N))
    gx, gy, gz = gvec[0], gvec[1], gvec[2]
    for b in range(B):
        for n in range(N):
            px, py, pz = x0[b, 0], x0[b, 1], x0[b, 2]
            vx, vy, vz = x0[b, 3], x0[b, 4], x0[b, 5]
            qw, qx, qy, qz = x0[b, 6], x0[b, 7], x0[b, 8], x0[b, 9]
            f = x0[b, 13]
            wx, wy, wz = x0[b, 14], x0[b, 15], x0[b, 16]
            total = 0.0
            for h in range(H):
                u0 = controls[b, n, h, 0]
                u1 = controls[b, n, h, 1]
                u2 = controls[b, n, h, 2]
                u3 = controls[b, n, h, 3]
                fd = min(max(u0 * hover, 0.0), f_max)
                w1 = min(max(u1 * omega_max, -omega_max), omega_max)
                w2 = min(max(u2 * omega_max, -omega_max), omega_max)
                w3 = min(max(u3 * omega_max, -omega_max), omega_max)
                f = f + k * (fd - f)
                wx = wx + k * (w1 - wx)
                wy = wy + k * (w2 - wy)
                wz = wz + k * (w3 - wz)

                th2 = wx * wx + wy * wy + wz * wz
                a1, a2, a3, a4 = _integral_coeffs(th2, dt)
                # j = e3*a + (w x e3)*b + wz*w*c
                j1x = wy * a2 + wz * wx * a3
                j1y = -wx * a2 + wz * wy * a3
                j1z = a1 + wz * wz * a3
                j2x = wy * a3 + wz * wx * a4
                j2y = -wx * a3 + wz * wy * a4
                j2z = a2 + wz * wz * a4
                r1x, r1y, r1z = _rotate(qw, qx, qy, qz, j1x, j1y, j1z)
                r2x, r2y, r2z = _rotate(qw, qx, qy, qz, j2x, j2y, j2z)
                ta = f / mass
                npx = px + vx * dt + 0.5 * gx * dt * dt + ta * r2x
                npy = py + vy * dt + 0.5 * gy * dt * dt + ta * r2y
                npz = pz + vz * dt + 0.5 * gz * dt * dt + ta * r2z
                vx = vx + gx * dt + ta * r1x
                vy = vy + gy * dt + ta * r1y
                vz = vz + gz * dt + ta * r1z
                px, py, pz = npx, npy, npz

                # q <- q * exp(w dt)
                ang = math.sqrt(th2) * dt
                half = 0.5 * ang
                if ang < 1e-8:
                    sc = (0.5 - ang * ang / 48.0) * dt
                else:
                    sc = math.sin(half) / ang * dt
                ew, ex, ey, ez = math.cos(half), sc * wx, sc * wy, sc * wz
                nw = qw * ew - qx * ex - qy * ey - qz * ez
                nx = qw * ex + qx * ew + qy * ez - qz * ey
                ny = qw * ey - qx * ez + qy * ew + qz * ex
                nz = qw * ez + qx * ey - qy * ex + qz * ew
                norm = math.sqrt(nw * nw + nx * nx + ny * ny + nz * nz)
                qw, qx, qy, qz = nw / norm, nx / norm, ny / norm, nz / norm

                ex_ = px - ref_p[b, h, 0]
                ey_ = py - ref_p[b, h, 1]
                ez_ = pz - ref_p[b, h, 2]
                dot = qw * ref_q[b, h, 0] + qx * ref_q[b, h, 1] + qy * ref_q[b, h, 2] + qz * ref_q[b, h, 3]
                du = u0 - 1.0
                c = (w_p * (ex_ * ex_ + ey_ * ey_ + ez_ * ez_) + w_q * (1.0 - dot * dot)
                     + w_u * (du * du + u1 * u1 + u2 * u2 + u3 * u3))
                if h == H - 1:
                    c *= terminal_scale
                total += c
            if not math.isfinite(total):
                total = large
            out[b, n] = total
    return out


@njit(cache=True)
def clamp_slopes(weights, controls, base, lo, hi):
    """Weighted fraction of unclamped entries, plain and times the base sample.

    ``weights`` (B, N), ``controls`` (B, N, H, D) already clamped, ``base``
    (N, H, D). Sample 0 is the mean itself, so its base value counts as 0.
    """
    B, N, H, D = controls.shape
    s_mu = np.zeros((B, H, D))
    s_sig = np.zeros((B, H, D))
    for b in range(B):
        for n in range(N):
            w = weights[b, n]
            for h in range(H):
                for d in range(D):
                    u = controls[b, n, h, d]
                    if u > lo[d] and u < hi[d]:
                        s_mu[b, h, d] += w
                        if n > 0:
                            s_sig[b, h, d] += w * base[n, h, d]
    return s_mu, s_sig
