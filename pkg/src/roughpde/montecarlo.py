"""Particle engine for rough SDEs with exponential rough weights.

Particles are processed in fixed-size blocks; the Brownian noise of particle
``i`` at grid step ``k`` is the slice ``[k r m, (k+1) r m)`` of the child
stream ``root.spawn(i)``.  Results therefore depend only on (seed, particle
index, step), never on block scheduling or thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .rde import SolverError, joint_blocks
from .streams import as_stream

CHUNK_STEPS = 32


class WeightOverflow(FloatingPointError):
    pass


@dataclass
class MCParams:
    """Monte Carlo settings.

    Attributes:
      particles: number of particles N.
      seed: root seed.
      refine: Brownian sub-steps per grid step inside the joint lift.
      block: particles per work unit (fixed, so results ignore ``threads``).
      threads: worker threads.
      crn: reuse the same Brownian noise across evaluation points.
    """

    particles: int = 10_000
    seed: int = 0
    refine: int = 4
    block: int = 4096
    threads: int = 1
    crn: bool = True

    def __post_init__(self):
        if int(self.particles) < 2:
            raise ValueError("need at least 2 particles")
        if int(self.refine) < 1 or int(self.block) < 1 or int(self.threads) < 1:
            raise ValueError("refine, block and threads must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def to_json(self):
        return {"particles": int(self.particles), "seed": int(self.seed), "refine": int(self.refine),
                "block": int(self.block), "crn": bool(self.crn)}


@dataclass
class Trajectories:
    """Recorded particle states and log-weights.

    Attributes:
      steps: global grid indices of the records.
      X: (R, N, d) states.
      logw: (R, N) accumulated log-weights.
    """

    steps: np.ndarray
    X: np.ndarray
    logw: np.ndarray


def _step_block(num, x, logw, dt, inc, area, m, weights):
    V = num.V(x)
    DV = num.DV(x)
    if weights:
        if not num.c_is_zero:
            logw += num.c(x) * dt
        if not num.gamma_is_zero:
            e = num.e
            logw += np.einsum("nk,nk->n", num.gamma(x), inc[:, m:m + e])
            logw += np.einsum("nki,nil,nlk->n", num.Dgamma(x), V, area[:, :, m:m + e])
    out = x + dt * num.b(x) + np.einsum("nik,nk->ni", V, inc)
    out += np.einsum("nijk,njl,nlk->ni", DV, V, area)
    return out


def simulate(num, driver, x0, stream, params, start=0, record=None, particle_ids=None, weights=True):
    """Run particles from grid index ``start`` to the end of ``driver``.

    Args:
      num: NumericCoefficients (fields ``(sigma, beta)``, drift, ``c``, ``gamma``).
      driver: GeometricRoughPath of dimension ``num.e``.
      x0: (N, d) start states.
      stream: root RandomStream (or int seed).
      params: MCParams (refine, block, threads).
      start: first grid index.
      record: increasing global grid indices to record (default: only the end).
      particle_ids: (N,) stream keys (default ``arange(N)``).
      weights: accumulate ``int c dr + int gamma dW``.

    Returns:
      Trajectories.
    """
    stream = as_stream(stream)
    x0 = np.asarray(x0, dtype=float)
    n_part, d = x0.shape
    n = driver.n_steps
    record = np.array([n] if record is None else record, dtype=int)
    if np.any(record < start) or np.any(record > n) or np.any(np.diff(record) <= 0):
        raise ValueError("record indices must increase within [start, n]")
    ids = np.arange(n_part) if particle_ids is None else np.asarray(particle_ids, dtype=np.int64)
    m, e, r = num.m, num.e, int(params.refine)
    w_inc, w_area, dts, times = driver.increments, driver.areas, driver.grid.dt, driver.times
    if e == 0:
        # coefficients without rough transport ignore the driver's increments
        w_inc, w_area = w_inc[:, :0], w_area[:, :0, :0]
    elif driver.dim != e:
        raise ValueError(f"driver dimension {driver.dim} does not match coefficients ({e})")

    def run(block):
        lo, hi = block
        P = hi - lo
        # shared keys (common random numbers) draw identical noise: generate once per key
        keys, inverse = np.unique(ids[lo:hi], return_inverse=True)
        x = x0[lo:hi].copy()
        logw = np.zeros(P)
        rec_x = np.empty((record.size, P, d))
        rec_w = np.empty((record.size, P))
        slot = 0
        while slot < record.size and record[slot] == start:
            rec_x[slot], rec_w[slot] = x, logw
            slot += 1
        for c0 in range(start, n, CHUNK_STEPS):
            kk = min(CHUNK_STEPS, n - c0)
            sl = slice(c0, c0 + kk)
            if m:
                z = stream.normal_for(keys, kk * r * m, offset=c0 * r * m).reshape(keys.size, kk, r, m)
                dB, ito, bw, wb = (a[inverse] for a in joint_blocks(w_inc[sl], w_area[sl], dts[sl], z, r))
            for j in range(kk):
                k = c0 + j
                if m:
                    inc = np.concatenate([dB[:, j], np.broadcast_to(w_inc[k], (P, e))], axis=1)
                    top = np.concatenate([ito[:, j], bw[:, j]], axis=2)
                    bottom = np.concatenate([wb[:, j], np.broadcast_to(w_area[k], (P, e, e))], axis=2)
                    area = np.concatenate([top, bottom], axis=1)
                else:
                    inc = np.broadcast_to(w_inc[k], (P, e))
                    area = np.broadcast_to(w_area[k], (P, e, e))
                with np.errstate(all="ignore"):
                    x = _step_block(num, x, logw, dts[k], inc, area, m, weights)
                if not np.all(np.isfinite(x)):
                    raise SolverError(f"non-finite particle state at step {k} (t={times[k + 1]:.6g})")
                while slot < record.size and record[slot] == k + 1:
                    rec_x[slot], rec_w[slot] = x, logw
                    slot += 1
        return rec_x, rec_w

    size = int(params.block)
    blocks = [(lo, min(lo + size, n_part)) for lo in range(0, n_part, size)]
    if int(params.threads) > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=int(params.threads)) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(b) for b in blocks]
    X = np.concatenate([p[0] for p in parts], axis=1)
    logw = np.concatenate([p[1] for p in parts], axis=1)
    if not np.all(np.isfinite(logw)):
        raise WeightOverflow("non-finite log-weights")
    return Trajectories(record, X, logw)


def weighted_mean(values, logw):
    """Mean and standard error of ``values * exp(logw)`` (exp taken once here)."""
    with np.errstate(over="raise"):
        try:
            samples = np.asarray(values) * np.exp(logw)
        except FloatingPointError as exc:
            raise WeightOverflow("weight overflow at aggregation") from exc
    n = samples.shape[-1]
    mean = samples.mean(axis=-1)
    se = samples.std(axis=-1, ddof=1) / np.sqrt(n)
    return mean, se
