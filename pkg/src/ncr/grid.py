"""Multi-resolution feature grids over the unit cube.

Each level stores a table of small feature vectors sampled on a cubic
lattice; points are decoded by trilinear interpolation.  Coarse levels
fit densely, finer levels share rows through a hash.  Two query modes
feed the two radiance branches: concatenating every level, and blending
the two levels whose cell edge lengths bracket a query footprint.

Forward queries can record the touched rows and weights so training can
scatter exact adjoints back without densifying per level.
"""

from dataclasses import dataclass, field

import numpy as np

_PRIMES = (np.uint64(1), np.uint64(2654435761), np.uint64(805459861))

# corner c offsets the base cell by bit k of c along axis k
_OFFSETS = np.array([[(c >> a) & 1 for a in range(3)] for c in range(8)], dtype=np.int64)


@dataclass(frozen=True)
class GridSpec:
    levels: int
    base_resolution: int
    growth_factor: float
    feature_dim: int
    table_size: int = 1 << 19
    mode: str = "concat"

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_resolution < 1:
            raise ValueError("base_resolution must be >= 1")
        if self.growth_factor <= 1.0:
            raise ValueError("growth_factor must be > 1")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.table_size < 8 or self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two >= 8")
        if self.mode not in ("concat", "scale_interp"):
            raise ValueError(f"unknown grid mode {self.mode!r}")

    def resolution(self, level: int) -> int:
        return int(round(self.base_resolution * self.growth_factor**level))

    def cell_size(self, level: int) -> float:
        return 1.0 / self.resolution(level)

    @property
    def output_dim(self) -> int:
        if self.mode == "concat":
            return self.feature_dim * self.levels
        return self.feature_dim


def table_index(cell: np.ndarray, resolution: int, table_size: int) -> np.ndarray:
    """Map integer lattice coordinates (..., 3) to table rows.

    Lattices that fit entirely use exact row-major indexing; larger ones
    fold through an XOR of prime-multiplied coordinates (wrapping uint64
    products) masked to the power-of-two table size.
    """
    cell = np.asarray(cell, dtype=np.int64)
    side = resolution + 1
    if side**3 <= table_size:
        return cell[..., 0] + side * cell[..., 1] + side * side * cell[..., 2]
    u = cell.astype(np.uint64)
    h = (u[..., 0] * _PRIMES[0]) ^ (u[..., 1] * _PRIMES[1]) ^ (u[..., 2] * _PRIMES[2])
    return (h & np.uint64(table_size - 1)).astype(np.int64)


@dataclass
class QueryRecord:
    """Touched rows and folded weights from one batched forward query.

    Each slot is (rows (N,8), weights (N,8), col_start, col_end): the
    slot contributed weights @ params[rows] to output columns
    [col_start, col_end).
    """

    n: int
    out_dim: int
    slots: list = field(default_factory=list)


class GradBuffer:
    """Order-insensitive sparse gradient accumulator keyed by table row."""

    def __init__(self, n_rows: int, feature_dim: int):
        self.n_rows = n_rows
        self.feature_dim = feature_dim
        self._rows: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []

    def add(self, rows: np.ndarray, vals: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        vals = np.asarray(vals, dtype=np.float64).reshape(-1, self.feature_dim)
        if rows.shape[0] != vals.shape[0]:
            raise ValueError("rows and vals disagree on length")
        if rows.size:
            self._rows.append(rows)
            self._vals.append(vals)

    def merge(self, other: "GradBuffer") -> None:
        self._rows.extend(other._rows)
        self._vals.extend(other._vals)

    @property
    def is_empty(self) -> bool:
        return not self._rows

    def touched_rows(self) -> np.ndarray:
        if self.is_empty:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate(self._rows))

    def dense(self) -> np.ndarray:
        out = np.zeros((self.n_rows, self.feature_dim))
        if self.is_empty:
            return out
        rows = np.concatenate(self._rows)
        vals = np.concatenate(self._vals)
        for k in range(self.feature_dim):
            out[:, k] = np.bincount(rows, weights=vals[:, k], minlength=self.n_rows)
        return out

    def compact(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique touched rows and their summed gradients, sorted by row."""
        if self.is_empty:
            return np.empty(0, dtype=np.int64), np.empty((0, self.feature_dim))
        rows = np.concatenate(self._rows)
        vals = np.concatenate(self._vals)
        uniq, inverse = np.unique(rows, return_inverse=True)
        out = np.zeros((uniq.size, self.feature_dim))
        for k in range(self.feature_dim):
            out[:, k] = np.bincount(inverse, weights=vals[:, k], minlength=uniq.size)
        return uniq, out


class HashGrid:
    def __init__(self, spec: GridSpec, rng: np.random.Generator | None = None):
        self.spec = spec
        self._res = np.array([spec.resolution(l) for l in range(spec.levels)])
        self._cs = np.array([spec.cell_size(l) for l in range(spec.levels)])
        if np.any(np.diff(self._cs) >= 0):
            raise ValueError("levels must strictly refine")
        entries = np.minimum((self._res + 1) ** 3, spec.table_size)
        self._entries = entries
        self._offset = np.concatenate([[0], np.cumsum(entries)[:-1]])
        self.n_rows = int(entries.sum())
        if rng is None:
            self.params = np.zeros((self.n_rows, spec.feature_dim))
        else:
            self.params = rng.uniform(-1e-4, 1e-4, (self.n_rows, spec.feature_dim))

    @classmethod
    def from_params(cls, spec: GridSpec, params: np.ndarray) -> "HashGrid":
        grid = cls(spec)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != grid.params.shape:
            raise ValueError(f"params shape {params.shape} != {grid.params.shape}")
        grid.params = params.copy()
        return grid

    @property
    def n_params(self) -> int:
        return self.params.size

    def grad_buffer(self) -> GradBuffer:
        return GradBuffer(self.n_rows, self.spec.feature_dim)

    def _corners(self, level: int, p: np.ndarray):
        """Rows (N,8) into the flat table and trilinear weights (N,8)."""
        res = self._res[level]
        scaled = np.clip(p, 0.0, 1.0) * res
        base = np.minimum(np.floor(scaled).astype(np.int64), res - 1)
        frac = scaled - base
        cell = base[:, None, :] + _OFFSETS[None, :, :]
        hi = _OFFSETS[None, :, :].astype(bool)
        w = np.prod(np.where(hi, frac[:, None, :], 1.0 - frac[:, None, :]), axis=2)
        rows = self._offset[level] + table_index(cell, res, self.spec.table_size)
        return rows, w

    def level_query(self, level: int, p: np.ndarray) -> np.ndarray:
        rows, w = self._corners(level, np.atleast_2d(p))
        return np.einsum("nc,ncd->nd", w, self.params[rows])

    def query_concat(self, p: np.ndarray):
        if self.spec.mode != "concat":
            raise ValueError("query_concat requires mode=concat")
        p = np.atleast_2d(p)
        d, L = self.spec.feature_dim, self.spec.levels
        rec = QueryRecord(p.shape[0], d * L)
        out = np.empty((p.shape[0], d * L))
        for l in range(L):
            rows, w = self._corners(l, p)
            out[:, l * d:(l + 1) * d] = np.einsum("nc,ncd->nd", w, self.params[rows])
            rec.slots.append((rows, w, l * d, (l + 1) * d))
        return out, rec

    def _scale_levels(self, q: np.ndarray):
        """Bracket each footprint length by a level pair and blend weight.

        Returns (coarse level (N,), weight on coarse (N,)); the fine
        level is coarse+1.  Lengths outside the covered range clamp to
        the end levels.
        """
        L = self.spec.levels
        if L == 1:
            return np.zeros(q.shape, dtype=np.int64), np.ones_like(q)
        cs = self._cs
        qc = np.clip(q, cs[-1], cs[0])
        j = np.searchsorted(cs[::-1], qc, side="left")
        coarse = np.clip(L - 1 - j, 0, L - 2)
        w = (qc - cs[coarse + 1]) / (cs[coarse] - cs[coarse + 1])
        return coarse, np.clip(w, 0.0, 1.0)

    def query_scale(self, p: np.ndarray, r_c: np.ndarray, s: float = 1.0):
        if self.spec.mode != "scale_interp":
            raise ValueError("query_scale requires mode=scale_interp")
        if s <= 0.0:
            raise ValueError("scale factor must be positive")
        p = np.atleast_2d(p)
        n, d = p.shape[0], self.spec.feature_dim
        r_c = np.broadcast_to(np.asarray(r_c, dtype=np.float64), (n,))
        if np.any(r_c < 0.0):
            raise ValueError("footprint radius must be >= 0")
        coarse, w_c = self._scale_levels(s * r_c)

        rec = QueryRecord(n, d)
        out = np.zeros((n, d))
        rows_c = np.empty((n, 8), dtype=np.int64)
        rows_f = np.empty((n, 8), dtype=np.int64)
        tri_c = np.empty((n, 8))
        tri_f = np.empty((n, 8))
        for l in range(self.spec.levels):
            m = coarse == l
            if np.any(m):
                rows_c[m], tri_c[m] = self._corners(l, p[m])
            m = (coarse + 1) == l
            if np.any(m):
                rows_f[m], tri_f[m] = self._corners(l, p[m])
        if self.spec.levels == 1:
            rows_f, tri_f = rows_c, np.zeros_like(tri_c)

        w_tri_c = tri_c * w_c[:, None]
        w_tri_f = tri_f * (1.0 - w_c)[:, None]
        out = np.einsum("nc,ncd->nd", w_tri_c, self.params[rows_c])
        out += np.einsum("nc,ncd->nd", w_tri_f, self.params[rows_f])
        rec.slots.append((rows_c, w_tri_c, 0, d))
        rec.slots.append((rows_f, w_tri_f, 0, d))
        return out, rec

    def query_mean(self, p: np.ndarray):
        """Scale-blind fallback: average of every level's interpolation."""
        p = np.atleast_2d(p)
        d, L = self.spec.feature_dim, self.spec.levels
        rec = QueryRecord(p.shape[0], d)
        out = np.zeros((p.shape[0], d))
        for l in range(L):
            rows, w = self._corners(l, p)
            w = w / L
            out += np.einsum("nc,ncd->nd", w, self.params[rows])
            rec.slots.append((rows, w, 0, d))
        return out, rec

    def backward(self, rec: QueryRecord, upstream: np.ndarray, buf: GradBuffer) -> None:
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (rec.n, rec.out_dim):
            raise ValueError(f"upstream shape {upstream.shape} != {(rec.n, rec.out_dim)}")
        if not np.any(upstream):
            return
        for rows, w, c0, c1 in rec.slots:
            vals = w[:, :, None] * upstream[:, None, c0:c1]
            buf.add(rows.reshape(-1), vals.reshape(-1, self.spec.feature_dim))
