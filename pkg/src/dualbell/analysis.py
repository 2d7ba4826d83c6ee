"""Observables from momentum-space snapshots: regions, joint weights, E, S, ring fits.

Momentum arrays follow :mod:`dualbell.grid.wavefunction`: centred axes,
species A on axes (0, 1) = (p_x3, p_z3), species B on (2, 3) = (p_x4, p_z4).
Joint weights use the basis order of :mod:`dualbell.oracle`
(up-up, up-down, down-up, down-down).
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy.optimize import least_squares

from .config import CollisionGeometry, GridSpec, RunConfig
from .errors import AnalysisError, DualBellError, GeometryError
from .grid.wavefunction import WaveFunction4D, to_momentum_space, to_position_space
from .oracle import BASIS, _PARITY, ModeState

log = logging.getLogger(__name__)

MODE_KEYS = ("A_up", "A_down", "B_up", "B_down")
MIN_RADIUS_CELLS = 2.0
DEFAULT_RADIUS_FRACTION = 0.1


# ---------------------------------------------------------------------------
# regions and tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModeRegion:
    """Disc of ``radius`` around ``center`` = (p_x, p_z) in one species' momentum plane."""

    species: str
    label: str
    center: tuple
    radius: float

    def mask(self, grid: GridSpec) -> np.ndarray:
        p = grid.momenta()
        px, pz = np.meshgrid(p, p, indexing="ij")
        # a small relative slack keeps cells exactly on the rim inside
        r2 = (px - self.center[0]) ** 2 + (pz - self.center[1]) ** 2
        return r2 <= self.radius ** 2 * (1 + 1e-9)

    def overlaps(self, other: "ModeRegion") -> bool:
        if self.species != other.species:
            return False
        d = math.hypot(self.center[0] - other.center[0], self.center[1] - other.center[1])
        return d <= self.radius + other.radius


@dataclass
class CorrelationTable:
    """Raw joint weights W(uu), W(ud), W(du), W(dd) and their normalization."""

    weights: np.ndarray
    normalization: float
    settings: dict = field(default_factory=dict)
    radius: float = float("nan")

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(4)
        if np.any(self.weights < 0):
            raise AnalysisError("joint weights must be non-negative")

    @property
    def normalized(self) -> np.ndarray:
        return self.weights / self.normalization

    @classmethod
    def from_normalized(cls, values, settings=None) -> "CorrelationTable":
        w = np.asarray(values, dtype=float)
        return cls(w, float(w.sum()), dict(settings or {}))

    @property
    def E(self) -> float:
        return correlator_from_table(self)


def default_mode_regions(geometry: CollisionGeometry, grid: GridSpec, radius: Optional[float] = None,
                         min_cells: float = MIN_RADIUS_CELLS) -> Dict[str, ModeRegion]:
    """Discs on the four selected halo points (see ``CollisionGeometry.mode_points``).

    The default radius is 0.1 * halo_radius, raised to ``min_cells`` momentum
    steps when that is smaller.  An explicit radius below ``min_cells`` steps
    is rejected; pass a smaller ``min_cells`` for convergence studies.
    """
    dp = grid.momentum_step
    if radius is None:
        radius = max(DEFAULT_RADIUS_FRACTION * geometry.halo_radius, min_cells * dp)
    if radius < min_cells * dp * (1 - 1e-9):
        raise GeometryError(f"region radius {radius / dp:.2f} momentum steps is below {min_cells}")
    pts = geometry.mode_points()
    regions = {k: ModeRegion(k[0], k[2:], tuple(pts[k]), radius) for k in MODE_KEYS}
    pmax = grid.momenta()[-1]
    for k, r in regions.items():
        if max(abs(r.center[0]), abs(r.center[1])) + radius > pmax:
            raise GeometryError(f"region {k} extends beyond the momentum grid (use a finer grid)")
    for a, b in (("A_up", "A_down"), ("B_up", "B_down")):
        if regions[a].overlaps(regions[b]):
            raise GeometryError(f"regions {a} and {b} overlap; use a smaller radius or a larger grid")
    return regions


def _momentum_amplitudes(psi: WaveFunction4D) -> np.ndarray:
    if psi.representation == "momentum":
        return psi.amplitudes
    return to_momentum_space(psi).amplitudes


def joint_weights(psi: WaveFunction4D, regions: Dict[str, ModeRegion],
                  settings: Optional[dict] = None) -> CorrelationTable:
    """W(ab) = integral over region a (A) x region b (B) of |Phi|^2."""
    for a, b in (("A_up", "A_down"), ("B_up", "B_down")):
        if regions[a].overlaps(regions[b]):
            raise GeometryError(f"regions {a} and {b} overlap")
    grid = psi.grid
    phi = _momentum_amplitudes(psi)
    n = grid.points_per_dim
    dp4 = grid.momentum_step ** 4
    flat = phi.reshape(n * n, n * n)
    masks = {k: np.flatnonzero(regions[k].mask(grid)) for k in MODE_KEYS}
    w = []
    for ka, kb in (("A_up", "B_up"), ("A_up", "B_down"), ("A_down", "B_up"), ("A_down", "B_down")):
        block = flat[np.ix_(masks[ka], masks[kb])]
        w.append(float(np.sum(block.real ** 2 + block.imag ** 2)) * dp4)
    total = float(sum(w))
    if total < 1e-12:
        raise AnalysisError("no probability in the mode regions (sum of weights < 1e-12)")
    return CorrelationTable(np.array(w), total, dict(settings or {}), regions["A_up"].radius)


def correlator_from_table(table: CorrelationTable) -> float:
    """E = W(uu) + W(dd) - W(ud) - W(du) on normalized weights."""
    return float(_PARITY @ table.normalized)


def chsh_from_runs(tables: Sequence[CorrelationTable]) -> float:
    """S = E(a,b) - E(a,b') + E(a',b) + E(a',b') from tables in that order."""
    if len(tables) != 4:
        raise AnalysisError("CHSH needs exactly four tables")
    e = [correlator_from_table(t) for t in tables]
    return e[0] - e[1] + e[2] + e[3]


def radius_convergence(psi: WaveFunction4D, geometry: CollisionGeometry, radii: Iterable[float]):
    """[(radius, E)] for a list of radii (cells below the usual minimum allowed)."""
    phi = psi if psi.representation == "momentum" else to_momentum_space(psi)
    out = []
    for r in radii:
        regs = default_mode_regions(geometry, psi.grid, r, min_cells=0.0)
        out.append((float(r), correlator_from_table(joint_weights(phi, regs))))
    return out


# ---------------------------------------------------------------------------
# slices, ring fits, centroids
# ---------------------------------------------------------------------------

def slice_joint_density(psi: WaveFunction4D, px_A: float, px_B: float,
                        half_width: float = 0.0) -> np.ndarray:
    """|Phi(p_z^A, p_z^B)|^2 integrated over p_x windows around px_A and px_B.

    Returns an (N, N) array indexed [p_z^A, p_z^B] on the centred grid; its
    sum times dp^2 is the probability inside the two transverse windows.
    """
    grid = psi.grid
    p = grid.momenta()
    tol = half_width + 0.5 * grid.momentum_step
    ia = np.flatnonzero(np.abs(p - px_A) <= tol)
    ib = np.flatnonzero(np.abs(p - px_B) <= tol)
    if ia.size == 0 or ib.size == 0:
        raise AnalysisError("slice window contains no grid points")
    phi = _momentum_amplitudes(psi)
    sub = phi[ia][:, :, ib]
    dens = sub.real ** 2 + sub.imag ** 2
    return dens.sum(axis=(0, 2)) * grid.momentum_step ** 2


def ridge_positions(slice2d: np.ndarray, grid: GridSpec, p_k: float) -> dict:
    """Weighted mean of p_z^A + p_z^B on each side of zero (ridges of a back-to-back slice)."""
    p = grid.momenta()
    s = p[:, None] + p[None, :]
    out = {}
    for key, sel in (("plus", s > 0), ("minus", s < 0)):
        w = np.where(sel, slice2d, 0.0)
        tot = w.sum()
        out[key] = float((w * s).sum() / tot) if tot > 0 else float("nan")
    return out


def ring_fit(density: np.ndarray, grid: GridSpec, sign: int = 1, exclude_radius: Optional[float] = None):
    """Weighted circle fit to a halo in one species' momentum density.

    Only the half plane sign * p_z > 0 is used, and a disc of
    ``exclude_radius`` (default 4 momentum steps) around the origin is removed
    so the unscattered cloud does not bias the fit.  An algebraic fit gives
    the starting point; the result minimizes the density-weighted squared
    distance to the circle, which unlike the algebraic fit is not pulled
    off-centre by a partial arc with uneven weight along it.  Returns
    ``(center_x, center_z, radius)``.
    """
    p = grid.momenta()
    px, pz = np.meshgrid(p, p, indexing="ij")
    r_ex = 4 * grid.momentum_step if exclude_radius is None else exclude_radius
    sel = (sign * pz > 0) & (px ** 2 + pz ** 2 > r_ex ** 2)
    w = np.where(sel, density, 0.0).ravel()
    if w.sum() <= 0:
        raise AnalysisError("no density available for the ring fit")
    # fit in units of the momentum step: SI momenta next to the constant
    # column would otherwise fall below the least-squares rank cutoff
    dp = grid.momentum_step
    x, z = px.ravel() / dp, pz.ravel() / dp
    a = np.stack([2 * x, 2 * z, np.ones_like(x)], axis=1)
    b = x ** 2 + z ** 2
    sw = np.sqrt(w / w.max())
    sol, *_ = np.linalg.lstsq(a * sw[:, None], b * sw, rcond=None)
    cx, cz, c = sol
    r0 = math.sqrt(max(c + cx ** 2 + cz ** 2, 1.0))
    keep = w > 0
    xk, zk, sk = x[keep], z[keep], sw[keep]

    def residual(q):
        return sk * (np.hypot(xk - q[0], zk - q[1]) - q[2])

    cx, cz, r = least_squares(residual, [cx, cz, r0]).x
    return float(cx * dp), float(cz * dp), float(abs(r) * dp)


def lobe_centroids(psi: WaveFunction4D, regions: Dict[str, ModeRegion]) -> Dict[str, tuple]:
    """Position-space centroid (x, z) of each mode's wavepacket.

    The field is filtered in momentum space to one region (on that species'
    axes) and transformed back; the centroid of that species' marginal is
    returned together with its rms width: ``{key: (x, z, width)}``.
    """
    phi = psi if psi.representation == "momentum" else to_momentum_space(psi)
    grid = psi.grid
    x = grid.positions()
    out = {}
    for key, reg in regions.items():
        m = reg.mask(grid)
        filt = phi.copy()
        if reg.species == "A":
            filt.amplitudes *= m[:, :, None, None]
            axes = (2, 3)
        else:
            filt.amplitudes *= m[None, None, :, :]
            axes = (0, 1)
        pos = to_position_space(filt)
        d = (np.abs(pos.amplitudes) ** 2).sum(axis=axes)
        tot = d.sum()
        if tot <= 0:
            raise AnalysisError(f"region {key} is empty")
        mx = float((d.sum(axis=1) * x).sum() / tot)
        mz = float((d.sum(axis=0) * x).sum() / tot)
        var = float((d.sum(axis=1) * (x - mx) ** 2).sum() / tot + (d.sum(axis=0) * (x - mz) ** 2).sum() / tot)
        out[key] = (mx, mz, math.sqrt(var / 2))
    return out


def four_lobe_state(grid: GridSpec, geometry: CollisionGeometry, state: ModeState,
                    width_cells: float = 1.0, masses=None) -> WaveFunction4D:
    """Momentum-space field sum_ab c_ab g_a(p_A) g_b(p_B) with Gaussian lobes on the mode points."""
    p = grid.momenta()
    dp = grid.momentum_step
    pts = geometry.mode_points()
    sig = width_cells * dp

    def lobe(c):
        gx = np.exp(-((p - c[0]) ** 2) / (4 * sig ** 2))
        gz = np.exp(-((p - c[1]) ** 2) / (4 * sig ** 2))
        return np.outer(gx, gz)

    la = {"u": lobe(pts["A_up"]), "d": lobe(pts["A_down"])}
    lb = {"u": lobe(pts["B_up"]), "d": lobe(pts["B_down"])}
    amp = np.zeros(grid.shape, dtype=complex)
    for c, key in zip(state.normalized().amplitudes, BASIS):
        if c != 0:
            amp += c * np.multiply.outer(la[key[0]], lb[key[1]])
    kw = {} if masses is None else {"masses": tuple(masses)}
    psi = WaveFunction4D(amp, grid, representation="momentum", **kw)
    psi.amplitudes /= math.sqrt(float(np.sum(np.abs(amp) ** 2)) * dp ** 4)
    return psi


# ---------------------------------------------------------------------------
# scans
# ---------------------------------------------------------------------------

def fit_visibility(theta_A, theta_B, E):
    """Least-squares V in E = V cos(theta_A + theta_B); returns (V, rms residual)."""
    c = np.cos(np.asarray(theta_A, dtype=float) + np.asarray(theta_B, dtype=float))
    e = np.asarray(E, dtype=float)
    ok = np.isfinite(e)
    if not ok.any() or np.sum(c[ok] ** 2) == 0:
        return float("nan"), float("nan")
    v = float(np.sum(e[ok] * c[ok]) / np.sum(c[ok] ** 2))
    rms = float(np.sqrt(np.mean((e[ok] - v * c[ok]) ** 2)))
    return v, rms


@dataclass
class ScanRow:
    theta_A: float
    theta_B: float
    phi_A: float
    phi_B: float
    weights: Optional[np.ndarray]
    E: float
    status: str = "ok"

    def as_dict(self) -> dict:
        w = self.weights if self.weights is not None else [float("nan")] * 4
        return {"theta_A": self.theta_A, "theta_B": self.theta_B, "phi_A": self.phi_A,
                "phi_B": self.phi_B, "W_uu": float(w[0]), "W_ud": float(w[1]),
                "W_du": float(w[2]), "W_dd": float(w[3]), "E": self.E, "status": self.status}


@dataclass
class ScanResult:
    rows: List[ScanRow]
    visibility: float
    rms_residual: float
    chsh: Optional[float] = None
    chsh_rows: List[ScanRow] = field(default_factory=list)
    premix_E: float = float("nan")
    interaction_strength: float = float("nan")
    scattered_fraction: float = float("nan")


def theta_sum_chsh_settings():
    """(theta_A, theta_B) for E(a,b), E(a,b'), E(a',b), E(a',b') at phi = 0, all in [0, pi]."""
    from .oracle import theta_sum_settings
    a, ap, b, bp = theta_sum_settings()
    return [(a, b), (a, bp), (ap, b), (ap, bp)]


def scan_correlator(config: RunConfig, thetas_A: Sequence[float], thetas_B: Sequence[float],
                    phi_A: float = 0.0, phi_B: float = 0.0, include_chsh: bool = True,
                    output_dir: Optional[str] = None, checkpoint: bool = False,
                    progress=None) -> ScanResult:
    """Run the sequence for every (theta_A, theta_B) and fit E = V cos(theta_A + theta_B).

    The stages up to the mixing window do not depend on the mixing settings,
    so they run once; each A setting is applied once and reused for every B
    setting (the species evolve independently after the collision).  The final
    free expansion multiplies the momentum amplitudes by a phase and leaves
    every momentum-space observable unchanged, so it is not executed here.
    Failed points are recorded with status ``failed`` and the scan continues.
    """
    from .sequence import advance_species, make_propagator, make_pulse, run_to_mixing

    if len(thetas_A) == 0 or len(thetas_B) == 0:
        raise ValueError("theta lists must not be empty")
    say = progress or (lambda msg: log.info(msg))
    prop = make_propagator(config)

    def pulse_for(tgt, th, ph):
        th = float(th) % (2 * math.pi)
        return make_pulse(config, tgt, th, ph, config.t2, "mix_" + tgt) if th > 0 else None

    pairs = [(float(a), float(b)) for a in thetas_A for b in thetas_B]
    extra = theta_sum_chsh_settings() if include_chsh else []
    wanted = pairs + [p for p in extra]
    # the shared pre-mixing state must precede the longest mixing pulse
    starts = [p.start_time for tgt, k in (("A", 0), ("B", 1)) for p in
              (pulse_for(tgt, w[k], phi_A if tgt == "A" else phi_B) for w in wanted) if p is not None]
    base, _, _, g, frac, _ = run_to_mixing(config, output_dir, checkpoint, prop, progress,
                                           mix_start=min(starts, default=None))
    regions = default_mode_regions(config.geometry, config.grid,
                                   config.region_radius_cells * config.grid.momentum_step)
    premix_E = correlator_from_table(joint_weights(base, regions))
    say(f"pre-mixing E = {premix_E:.4f}")
    t0 = base.time
    by_a: Dict[float, List[int]] = {}
    for i, (a, b) in enumerate(wanted):
        by_a.setdefault(a, []).append(i)
    results: Dict[int, ScanRow] = {}
    for a, idxs in by_a.items():
        try:
            pa = pulse_for("A", a, phi_A)
            pbs = [pulse_for("B", wanted[i][1], phi_B) for i in idxs]
            ends = [p.end_time for p in [pa] + pbs if p is not None]
            t_end = max(ends + [t0])
            qa = base.copy()
            advance_species(qa, "A", t0, t_end, pa, prop)
        except DualBellError as exc:
            for i in idxs:
                results[i] = ScanRow(a, wanted[i][1], phi_A, phi_B, None, float("nan"), f"failed: {exc}")
            continue
        for i, pb in zip(idxs, pbs):
            b = wanted[i][1]
            try:
                q = qa.copy()
                advance_species(q, "B", t0, t_end, pb, prop)
                q.time = t_end
                tab = joint_weights(q, regions, {"theta_A": a, "theta_B": b, "phi_A": phi_A, "phi_B": phi_B})
                results[i] = ScanRow(a, b, phi_A, phi_B, tab.normalized, tab.E)
                say(f"theta_A={a:.4f} theta_B={b:.4f} E={tab.E:+.4f}")
            except DualBellError as exc:
                results[i] = ScanRow(a, b, phi_A, phi_B, None, float("nan"), f"failed: {exc}")
    rows = [results[i] for i in range(len(pairs))]
    v, rms = fit_visibility([r.theta_A for r in rows], [r.theta_B for r in rows], [r.E for r in rows])
    chsh = None
    chsh_rows = [results[len(pairs) + k] for k in range(len(extra))]
    if chsh_rows and all(r.status == "ok" for r in chsh_rows):
        e = [r.E for r in chsh_rows]
        chsh = e[0] - e[1] + e[2] + e[3]
    return ScanResult(rows, v, rms, chsh, chsh_rows, premix_E, g, frac)


# ---------------------------------------------------------------------------
# output writers
# ---------------------------------------------------------------------------

TABLE_COLUMNS = ("theta_A", "theta_B", "phi_A", "phi_B", "W_uu", "W_ud", "W_du", "W_dd", "E")


def table_record(table: CorrelationTable) -> dict:
    s = table.settings
    w = table.normalized
    return {"theta_A": s.get("theta_A", float("nan")), "theta_B": s.get("theta_B", float("nan")),
            "phi_A": s.get("phi_A", float("nan")), "phi_B": s.get("phi_B", float("nan")),
            "W_uu": w[0], "W_ud": w[1], "W_du": w[2], "W_dd": w[3], "E": correlator_from_table(table)}


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_records(path: str, records: Sequence[dict], columns: Sequence[str], fmt: str = "csv") -> str:
    """Write rows as CSV (header + rows) or JSON lines; returns the path."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(columns)
            for r in records:
                wr.writerow([_fmt(r.get(c, "")) for c in columns])
    elif fmt == "json-lines":
        with open(path, "w") as fh:
            for r in records:
                fh.write(json.dumps({c: r.get(c) for c in columns}) + "\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return path


def write_slice(path: str, array2d: np.ndarray, grid: GridSpec, axes=("p_z_A", "p_z_B"),
                units: str = "kg m/s", quantity: str = "probability density") -> List[str]:
    """Flat CSV grid (one row per first-axis index) plus a sidecar ``.header.txt``."""
    np.savetxt(path, array2d, delimiter=",", fmt="%.17g")
    side = path + ".header.txt"
    p = grid.momenta()
    with open(side, "w") as fh:
        fh.write(f"quantity: {quantity}\n")
        fh.write(f"rows: {axes[0]} ({units}), {len(p)} points from {p[0]!r} step {grid.momentum_step!r}\n")
        fh.write(f"columns: {axes[1]} ({units}), {len(p)} points from {p[0]!r} step {grid.momentum_step!r}\n")
    return [path, side]
