"""Cached binary occupancy over (x, y, z, t) bins.

The grid starts fully occupied. During training, probe batches query the
field's density at jittered points inside chosen cells and fold the result
into a per-cell running estimate, density_cache[c] <- max(ema * cache, sigma);
bits are re-derived as cache >= tau_occ after every update. Rendering skips
samples whose cell bit is 0 and may stop a ray once its transmittance falls
below the configured floor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class IndicatorGrid:
    dims: tuple[int, int, int, int]
    density_cache: np.ndarray  # f32, shape dims
    bits: np.ndarray  # bool, shape dims
    tau_occ: float
    ema: float
    transmittance_floor: float

    @classmethod
    def create(cls, dims, tau_occ: float, ema: float = 0.95,
               init_scale: float = 1.1, transmittance_floor: float = 1e-4
               ) -> "IndicatorGrid":
        dims = tuple(int(g) for g in dims)
        cache = np.full(dims, init_scale * tau_occ, dtype=np.float32)
        bits = np.ones(dims, dtype=bool)
        return cls(dims, cache, bits, float(tau_occ), float(ema),
                   float(transmittance_floor))

    @property
    def num_cells(self) -> int:
        return int(np.prod(self.dims))

    def cell_ids(self, points: np.ndarray) -> np.ndarray:
        """Flat cell index of each (n, 4) unit-cube point; boundary 1.0 maps
        into the last cell."""
        points = np.asarray(points)
        if points.ndim == 1:
            points = points[None, :]
        g = np.asarray(self.dims, dtype=np.float64)
        ix = np.clip((points * g).astype(np.int64), 0, np.asarray(self.dims) - 1)
        gx, gy, gz, gt = self.dims
        return ((ix[:, 0] * gy + ix[:, 1]) * gz + ix[:, 2]) * gt + ix[:, 3]

    def filter_mask(self, points: np.ndarray) -> np.ndarray:
        return self.bits.reshape(-1)[self.cell_ids(points)]

    def filter_samples(self, points: np.ndarray) -> np.ndarray:
        """Keep exactly the points whose cell bit is 1, preserving order."""
        points = np.asarray(points)
        if points.ndim == 1:
            points = points[None, :]
        return points[self.filter_mask(points)]

    def rebinarize(self) -> None:
        np.greater_equal(self.density_cache, self.tau_occ, out=self.bits)

    def update(self, query_sigma, rng: np.random.Generator, n_probes: int) -> None:
        """Probe n_probes cells (half uniform, half from occupied cells) at one
        jittered interior point each; decay-and-max their density estimates.

        query_sigma: (m, 4) unit-cube points -> (m,) densities.
        """
        n_uniform = n_probes // 2
        cells = [rng.integers(0, self.num_cells, size=n_uniform)]
        occ = np.flatnonzero(self.bits.reshape(-1))
        n_occ = n_probes - n_uniform
        if occ.size:
            cells.append(occ[rng.integers(0, occ.size, size=n_occ)])
        else:
            cells.append(rng.integers(0, self.num_cells, size=n_occ))
        cells = np.concatenate(cells)

        gx, gy, gz, gt = self.dims
        it = cells % gt
        rest = cells // gt
        iz = rest % gz
        rest = rest // gz
        iy = rest % gy
        ix = rest // gy
        corner = np.stack([ix, iy, iz, it], axis=1).astype(np.float64)
        pts = (corner + rng.random(corner.shape)) / np.asarray(self.dims, dtype=np.float64)
        sigma = np.asarray(query_sigma(pts), dtype=np.float64)

        flat = self.density_cache.reshape(-1)
        uniq, inverse = np.unique(cells, return_inverse=True)
        peak = np.zeros(uniq.size)
        np.maximum.at(peak, inverse, sigma)
        flat[uniq] = np.maximum(self.ema * flat[uniq], peak).astype(np.float32)
        self.rebinarize()

    def occupied_fraction(self) -> float:
        return float(self.bits.mean())


def march_with_early_stop(grid: IndicatorGrid, origin, direction, t0: float,
                          t1: float, delta: float, to_unit, time: float):
    """Generator walking uniform midpoint steps over [t0, t1].

    Skips samples in unoccupied cells; after each yielded sample the consumer
    sends back the accumulated transmittance and the walk stops once it falls
    below the grid's floor. Yields (position_unit (3,), t, delta).

    to_unit: world (3,) -> unit-cube (3,) mapping.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    steps = int(max(0, np.floor((t1 - t0) / delta + 0.5)))
    bits = grid.bits.reshape(-1)
    for i in range(steps):
        t = t0 + (i + 0.5) * delta
        if t >= t1:
            break
        pos = to_unit(origin + t * direction)
        p4 = np.array([pos[0], pos[1], pos[2], time])
        if not bits[grid.cell_ids(p4)[0]]:
            continue
        trans = yield (pos, t, delta)
        if trans is not None and trans < grid.transmittance_floor:
            return
