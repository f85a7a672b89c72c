"""Order and K-rank selection with extended-BIC criteria.

The criterion for a configuration ``(R_1, ..., R_p)`` is
``0.5 * log(SSE / (d * n)) + g(d, n) * sum(R_i)``. Within one selection run
every cell is fitted on the same ``n = T - p_max`` equations, so SSE values
are comparable across orders.
"""

from __future__ import annotations

import enum
import itertools
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import TenarError, ValidationError
from .estimators import FitOptions, fit_lse, projected_terms, var_ols
from .model import ModelSpec, TenArModel, as_series, normalize
from .simulate import make_rng

log = logging.getLogger(__name__)

# IC gaps between neighbouring cells are of order g(d, n) >> 1e-6, so a looser
# stopping rule than plain fitting loses nothing and saves most of the sweeps.
SELECTION_REL_TOL = 1e-6


def default_options() -> FitOptions:
    return FitOptions(rel_tol=SELECTION_REL_TOL)


class Penalty(str, enum.Enum):
    IC1 = "IC1"
    IC2 = "IC2"


def g1(dims, n: int) -> float:
    return math.log(n) / n


def g2(dims, n: int) -> float:
    d = int(np.prod(dims))
    return (sum(dk * dk for dk in dims) - len(dims) + 1) * math.log(n) / (d * n)


def penalty_value(penalty, dims, n: int) -> float:
    return g1(dims, n) if Penalty(penalty) is Penalty.IC1 else g2(dims, n)


@dataclass
class GridCell:
    kranks: tuple[int, ...]
    ic: float
    sse: float
    sweeps: int
    converged: bool
    error: str = ""


@dataclass
class SelectionReport:
    grid: list[GridCell]
    chosen: tuple[int, ...]
    order: int
    penalty: Penalty
    procedure: str
    n_obs: int
    notes: list[str] = field(default_factory=list)

    def table(self) -> list[dict]:
        return [
            {
                "kranks": list(c.kranks),
                "ic": c.ic,
                "sse": c.sse,
                "sweeps": c.sweeps,
                "converged": c.converged,
                "error": c.error,
            }
            for c in self.grid
        ]


def _trim(kranks) -> tuple[int, ...]:
    kr = list(kranks)
    while kr and kr[-1] == 0:
        kr.pop()
    return tuple(kr)


class _CellFitter:
    """Fits grid cells on the last ``T - p_max`` equations, with memoization.

    Alternating least squares from the projection start can stall in a slow
    swamp when the configuration over-fits, leaving an SSE above that of a
    nested smaller model. Each cell is therefore also fitted from its nested
    predecessor (one term fewer, at the lag holding the most terms) padded
    with a small extra term, and the lower SSE is kept. Along such a chain
    SSE cannot increase when a term is added.
    """

    def __init__(self, x: np.ndarray, p_max: int, penalty, opts: FitOptions):
        self.x = x
        self.p_max = p_max
        self.dims = x.shape[1:]
        self.d = int(np.prod(self.dims))
        self.n = x.shape[0] - p_max
        self.g = penalty_value(penalty, self.dims, self.n)
        self.opts = opts
        self._fits: dict[tuple[int, ...], tuple[GridCell, TenArModel | None]] = {}
        self._var: dict[int, list[np.ndarray]] = {}
        self._terms: dict[tuple[int, int, int], list] = {}

    def cell(self, kranks) -> GridCell:
        kranks = tuple(int(r) for r in kranks)
        base, _ = self._fit(_trim(kranks))
        if base.kranks == kranks:
            return base
        return GridCell(kranks, base.ic, base.sse, base.sweeps, base.converged, base.error)

    def _ic(self, sse: float, kranks) -> float:
        return 0.5 * math.log(sse / (self.d * self.n)) + self.g * sum(kranks)

    def _projection_start(self, spec: ModelSpec) -> FitOptions:
        # cells of equal order share one VAR fit, and lags share CP solutions
        o = self.opts
        if not (isinstance(o.init, str) and o.init == "projection"):
            return o
        p = spec.p
        if p not in self._var:
            self._var[p] = var_ols(self.x[self.p_max - p:], p, ridge=o.ridge)[0]
        lags = []
        for i, R in enumerate(spec.kranks):
            key = (p, i, R)
            if key not in self._terms:
                self._terms[key] = projected_terms(self._var[p][i], self.dims, R, o.restarts, o.seed)
            lags.append(self._terms[key])
        return replace(o, init=normalize(TenArModel(spec, lags)))

    def _fit(self, kranks: tuple[int, ...]) -> tuple[GridCell, TenArModel | None]:
        if kranks in self._fits:
            return self._fits[kranks]
        if not kranks:
            sse = float(np.sum(self.x[self.p_max:] ** 2))
            out = (GridCell(kranks, self._ic(sse, kranks), sse, 0, True), None)
            self._fits[kranks] = out
            return out

        p = len(kranks)
        spec = ModelSpec(self.dims, kranks)
        data = self.x[self.p_max - p:]
        starts = [self._projection_start(spec)]
        j = max(range(p), key=lambda i: (kranks[i], i))
        pred = _trim(kranks[:j] + (kranks[j] - 1,) + kranks[j + 1:])
        _, pred_model = self._fit(pred)
        if pred_model is not None:
            starts.append(replace(self.opts, init=_pad(pred_model, spec, j, self.opts.seed)))

        best, errors = None, []
        for start, o in enumerate(starts):
            try:
                rep = fit_lse(data, spec, o)
            except TenarError as exc:
                errors.append(str(exc))
                continue
            if best is None or rep.objective < best.objective:
                best, winner = rep, start
        if best is None:
            log.warning("cell %s failed: %s", kranks, errors[0])
            out = (GridCell(kranks, math.inf, math.inf, 0, False, errors[0]), None)
        else:
            log.debug("cell %s: %s start kept", kranks, ("projection", "nested")[winner])
            sse = best.objective
            out = (GridCell(kranks, self._ic(sse, kranks), sse, best.sweeps_used, best.converged), best.model)
        self._fits[kranks] = out
        return out


def _pad(m: TenArModel, spec: ModelSpec, lag: int, seed) -> TenArModel:
    """``m`` extended to ``spec`` by one small random term at ``lag``."""
    rng = make_rng(seed)
    lags = [list(m.coeffs[i]) if i < m.spec.p else [] for i in range(spec.p)]
    scales = [np.linalg.norm(term[-1]) for lag_terms in lags for term in lag_terms]
    size = 0.1 * min(scales, default=1.0)
    term = []
    for dk in spec.dims:
        a = rng.standard_normal((dk, dk))
        term.append(a / np.linalg.norm(a))
    term[-1] = size * term[-1]
    lags[lag].append(term)
    return TenArModel(spec, lags)


def ic_value(series, kranks, penalty=Penalty.IC1, opts: FitOptions | None = None, p_max: int | None = None) -> float:
    """Criterion value of one configuration (``inf`` if the fit fails).

    ``p_max`` fixes the effective sample ``T - p_max``; it defaults to the
    configuration's own order.
    """
    x = as_series(series)
    kranks = tuple(int(r) for r in kranks)
    if any(r < 0 for r in kranks):
        raise ValidationError("K-ranks must be non-negative")
    p_max = len(kranks) if p_max is None else p_max
    if p_max < len(_trim(kranks)):
        raise ValidationError("p_max is smaller than the configuration's order")
    return _CellFitter(x, p_max, penalty, opts or default_options()).cell(kranks).ic


def _check_caps(x: np.ndarray, p_max: int, r_max: int) -> None:
    if p_max < 1 or r_max < 1:
        raise ValidationError("p_max and r_max must be >= 1")
    if x.shape[0] <= p_max + 1:
        raise ValidationError("series too short for the requested maximum order")


def _argmin(grid: list[GridCell]) -> GridCell:
    # cells that stopped at the sweep cap keep a valid (upper bound) SSE and stay
    # eligible; only failed fits are dropped
    ok = [c for c in grid if not c.error and math.isfinite(c.ic)]
    if not ok:
        raise ValidationError("every grid cell failed to fit")
    return min(ok, key=lambda c: c.ic)


def select_joint(series, p_max: int, r_max: int, penalty=Penalty.IC1, opts: FitOptions | None = None) -> SelectionReport:
    """Exhaustive search over ``{0..r_max}^p_max``; trailing zeros lower the order."""
    x = as_series(series)
    _check_caps(x, p_max, r_max)
    opts = opts or default_options()
    fitter = _CellFitter(x, p_max, penalty, opts)
    grid = [fitter.cell(kr) for kr in itertools.product(range(r_max + 1), repeat=p_max)]
    best = _argmin(grid)
    chosen = _trim(best.kranks)
    return SelectionReport(grid, chosen, len(chosen), Penalty(penalty), "joint", x.shape[0] - p_max)


def select_separate(series, p_max: int, r_max: int, penalty=Penalty.IC1, opts: FitOptions | None = None) -> SelectionReport:
    """Lag-by-lag search with the other lags pinned at ``r_max``.

    The grid lists ``p_max * (r_max + 1)`` rows; the all-``r_max`` cell is
    shared between lags and fitted once.
    """
    x = as_series(series)
    _check_caps(x, p_max, r_max)
    opts = opts or default_options()
    fitter = _CellFitter(x, p_max, penalty, opts)
    cache: dict[tuple[int, ...], GridCell] = {}
    grid = []
    chosen = []
    for i in range(p_max):
        rows = []
        for r in range(r_max + 1):
            kr = tuple(r if j == i else r_max for j in range(p_max))
            if kr not in cache:
                cache[kr] = fitter.cell(kr)
            rows.append(cache[kr])
        grid.extend(rows)
        chosen.append(_argmin(rows).kranks[i])
    chosen = tuple(chosen)
    order = max((i + 1 for i, r in enumerate(chosen) if r > 0), default=0)
    return SelectionReport(grid, chosen, order, Penalty(penalty), "separate", x.shape[0] - p_max)
