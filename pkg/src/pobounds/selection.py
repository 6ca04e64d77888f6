"""Sample splitting and FCR-targeting hyperparameter search."""

from __future__ import annotations

import csv
import itertools
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from pobounds.bounds import BoundModel, FitConfig, apply_gamma_shift, fit, normalize_loss
from pobounds.datagen import Dataset
from pobounds.kernels import KernelSpec, median_heuristic
from pobounds.qp import SOLVED, SolverSettings

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = (1e-4, 1e-3, 1e-2, 1e-1)
DEFAULT_BETAS = (0.0, 0.01, 0.05, 0.1)
DEFAULT_GAMMAS = (0.0, 0.05, 0.1, 0.2, 0.4, 0.8)
DEFAULT_BANDWIDTH_FACTORS = (0.5, 1.0, 2.0)
MIN_VALIDATE_PER_ARM = 30


@dataclass(frozen=True)
class SplitPlan:
    seed: int = 0
    nuisance: float = 0.5
    train: float = 0.25
    validate: float = 0.25
    stratify: bool = True

    def __post_init__(self):
        fr = (self.nuisance, self.train, self.validate)
        if any(not f > 0 for f in fr):
            raise ValueError("split fractions must be positive")
        if sum(fr) > 1 + 1e-12:
            raise ValueError("split fractions must sum to at most 1")

    @property
    def fractions(self):
        return (self.nuisance, self.train, self.validate)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _apportion(total: int, sizes) -> np.ndarray:
    """Largest-remainder split of ``total`` proportionally to ``sizes`` (capped by them)."""
    sizes = np.asarray(sizes, dtype=int)
    S = sizes.sum()
    if S == 0:
        return np.zeros_like(sizes)
    exact = total * sizes / S
    out = np.floor(exact).astype(int)
    rem = total - out.sum()
    order = np.argsort(-(exact - out), kind="stable")
    for k in order[:rem]:
        out[k] += 1
    return np.minimum(out, sizes)


def split_indices(T, plan: SplitPlan) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    T = np.asarray(T).astype(int)
    n = T.size
    sizes = np.floor(np.asarray(plan.fractions) * n + 0.5 + 1e-9).astype(int)
    while sizes.sum() > n:
        sizes[np.argmax(sizes)] -= 1
    rng = np.random.default_rng(plan.seed)
    parts = [[], [], []]
    if plan.stratify:
        idx1 = np.flatnonzero(T == 1)
        idx0 = np.flatnonzero(T == 0)
        n1_total = int(np.floor(idx1.size * sizes.sum() / n + 0.5)) if n else 0
        c1 = _apportion(min(n1_total, idx1.size), sizes)
        c0 = sizes - c1
        if c0.sum() > idx0.size:
            raise ValueError("split plan cannot be met with the untreated arm size")
        for idx, counts in ((idx0, c0), (idx1, c1)):
            perm = idx[rng.permutation(idx.size)]
            start = 0
            for k, c in enumerate(counts):
                parts[k].append(perm[start:start + c])
                start += c
        parts = [np.sort(np.concatenate(p)) for p in parts]
    else:
        perm = rng.permutation(n)
        start = 0
        for k, c in enumerate(sizes):
            parts[k] = np.sort(perm[start:start + c])
            start += c
    for k, p in enumerate(parts):
        for t in (0, 1):
            if not np.any(T[p] == t):
                raise ValueError(f"split part {('nuisance', 'train', 'validate')[k]} has no samples of arm {t}")
    return tuple(parts)


def make_splits(dataset: Dataset, plan: SplitPlan) -> tuple[Dataset, Dataset, Dataset]:
    """``(nuisance, train, validate)`` subsets; disjoint and reproducible from ``plan.seed``."""
    return tuple(dataset.subset(p) for p in split_indices(dataset.T, plan))


@dataclass(frozen=True)
class Grid:
    """Hyperparameter grid. ``gammas`` are multiples of the training outcome sd
    when ``gamma_scale == "sd"``; ``betas_l=None`` ties ``beta_l`` to ``beta_u``.
    ``bandwidth_factors`` multiply the median-heuristic bandwidth (rbf only).
    """

    alphas: tuple = DEFAULT_ALPHAS
    betas_u: tuple = DEFAULT_BETAS
    betas_l: tuple | None = None
    gammas: tuple = DEFAULT_GAMMAS
    gamma_scale: str = "sd"
    kernel: KernelSpec = field(default_factory=KernelSpec)
    bandwidth_factors: tuple = DEFAULT_BANDWIDTH_FACTORS
    loss: str = "L2"
    coupled: bool = False
    required_fcr: float = 0.01
    anchor_cap: int = 1000
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        for name in ("alphas", "betas_u", "gammas"):
            v = tuple(float(x) for x in getattr(self, name))
            if not v:
                raise ValueError(f"grid list {name} must be non-empty")
            if any(x < 0 for x in v):
                raise ValueError(f"grid list {name} must be non-negative")
            object.__setattr__(self, name, v)
        if self.betas_l is not None:
            v = tuple(float(x) for x in self.betas_l)
            if not v or any(x < 0 for x in v):
                raise ValueError("betas_l must be non-empty and non-negative")
            object.__setattr__(self, "betas_l", v)
        object.__setattr__(self, "gammas", tuple(sorted(self.gammas)))
        object.__setattr__(self, "loss", normalize_loss(self.loss))
        if self.gamma_scale not in ("sd", "absolute"):
            raise ValueError("gamma_scale must be 'sd' or 'absolute'")
        if not 0 < self.required_fcr < 1:
            raise ValueError("required_fcr must lie in (0, 1)")
        if not self.bandwidth_factors:
            raise ValueError("bandwidth_factors must be non-empty")

    def with_(self, **kw) -> "Grid":
        return replace(self, **kw)

    def beta_pairs(self):
        if self.betas_l is None:
            return [(b, b) for b in self.betas_u]
        return list(itertools.product(self.betas_u, self.betas_l))

    def kernels(self, X) -> list[KernelSpec]:
        if self.kernel.kind != "rbf":
            return [self.kernel]
        base = median_heuristic(X)
        return [self.kernel.with_bandwidth(base * f) for f in self.bandwidth_factors]

    def fit_configs(self, X) -> list[FitConfig]:
        out = []
        for kern in self.kernels(X):
            for a in self.alphas:
                for bu, bl in self.beta_pairs():
                    out.append(FitConfig(loss=self.loss, coupled=self.coupled, alpha=a, beta_u=bu, beta_l=bl,
                                         kernel=kern, anchor_cap=self.anchor_cap, solver=self.solver))
        return out

    def to_dict(self) -> dict:
        return {
            "alphas": list(self.alphas), "betas_u": list(self.betas_u),
            "betas_l": None if self.betas_l is None else list(self.betas_l),
            "gammas": list(self.gammas), "gamma_scale": self.gamma_scale, "kernel": self.kernel.to_dict(),
            "bandwidth_factors": list(self.bandwidth_factors), "loss": self.loss, "coupled": self.coupled,
            "required_fcr": self.required_fcr, "anchor_cap": self.anchor_cap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        d = dict(d)
        if "kernel" in d:
            d["kernel"] = KernelSpec.from_dict(d["kernel"])
        if "solver" in d:
            d["solver"] = SolverSettings.from_dict(d["solver"])
        for k in ("alphas", "betas_u", "betas_l", "gammas", "bandwidth_factors"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def weighted_miscoverage(lower, upper, y, w) -> float:
    """Weighted share of ``y`` outside the closed interval (crossings are uncovered)."""
    lower, upper, y = (np.asarray(v, float) for v in (lower, upper, y))
    out = (y < lower) | (y > upper) | (upper < lower)
    return float(np.sum(w[out]) / np.sum(w))


@dataclass
class CellFit:
    """One fitted (kernel, alpha, beta) configuration with its pre-shift
    validation predictions; gamma is applied at selection time."""

    index: int
    config: FitConfig
    model: BoundModel | None
    status: str
    flagged: bool
    # arm -> (lower, upper, y, w) on the arm's factual validate points
    factual: dict = field(default_factory=dict)
    # arm -> width at all validate covariates
    widths: dict = field(default_factory=dict)
    error: str = ""


def _evaluate_cell(index, config, train: Dataset, validate: Dataset, arms, weighted, cache):
    try:
        model = fit(train, config, arms=arms, feature_maps=cache)
    except (RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        log.warning("grid cell %d failed: %s", index, exc)
        return CellFit(index, config, None, "error", True, error=str(exc))
    cell = CellFit(index, config, model,
                   "max_iter" if model.flagged else SOLVED, model.flagged)
    for t in (arms if not config.coupled else (0, 1)):
        b = model.arms[t]
        lo_all, up_all = b.raw(validate.X)
        cell.widths[t] = up_all - lo_all
        idx = validate.arm_index(t)
        w = validate.arm_weights(t) if weighted else np.full(idx.size, 1.0 / idx.size)
        cell.factual[t] = (lo_all[idx], up_all[idx], validate.Y[idx], w)
    return cell


def evaluate_grid(train: Dataset, validate: Dataset, grid: Grid, arms=(0, 1), weighted: bool = True,
                  jobs: int = 1) -> list[CellFit]:
    """Fit every (kernel, alpha, beta) cell on ``train`` and record validation predictions."""
    configs = grid.fit_configs(train.X)
    arms = (0, 1) if grid.coupled else tuple(arms)
    if jobs != 1 and len(configs) > 1:
        try:
            from joblib import Parallel, delayed
        except ImportError as exc:  # optional extra
            raise RuntimeError("jobs != 1 needs joblib; install the 'parallel' extra") from exc

        cells = Parallel(n_jobs=jobs)(
            delayed(_evaluate_cell)(i, c, train, validate, arms, weighted, None) for i, c in enumerate(configs))
    else:
        # feature maps depend only on (kernel, anchors): share them across cells
        caches = {}
        cells = []
        for i, c in enumerate(configs):
            cache = caches.setdefault(c.kernel, {})
            cells.append(_evaluate_cell(i, c, train, validate, arms, weighted, cache))
    cells.sort(key=lambda c: c.index)
    if all(c.model is None for c in cells):
        raise RuntimeError("every grid cell failed to solve: " + "; ".join(c.error for c in cells[:3]))
    return cells


@dataclass(frozen=True)
class CellScore:
    cell: int
    gamma: float
    nu_hat: float
    loss_hat: float
    flagged: bool
    alpha: float
    params: dict

    def row(self) -> dict:
        d = dict(self.params)
        d.update(gamma=self.gamma, nu_hat=self.nu_hat, loss_hat=self.loss_hat,
                 status="max_iter" if self.flagged else SOLVED)
        return d


@dataclass
class SelectionResult:
    """Selected configuration per target (an arm, or ``"joint"`` for coupled fits)."""

    chosen: dict
    model: BoundModel
    table: dict
    fallback_used: dict
    required_fcr: float
    certified: bool = True
    gamma_unit: float = 1.0
    configs: dict = field(default_factory=dict)

    @property
    def any_fallback(self) -> bool:
        return any(self.fallback_used.values())

    def chosen_score(self, target) -> CellScore:
        return self.chosen[target]

    def rows(self) -> list[dict]:
        out = []
        for target, scores in self.table.items():
            for s in scores:
                r = {"target": target}
                r.update(s.row())
                out.append(r)
        return out

    def to_csv(self, path) -> None:
        rows = self.rows()
        cols = ["target", "kernel", "bandwidth", "alpha", "beta_u", "beta_l", "gamma", "nu_hat", "loss_hat", "status"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
            wr.writeheader()
            for r in rows:
                wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    def to_dict(self) -> dict:
        return {
            "required_fcr": self.required_fcr,
            "certified": self.certified,
            "fallback_used": {str(k): v for k, v in self.fallback_used.items()},
            "chosen": {str(k): s.row() for k, s in self.chosen.items()},
            "gamma_unit": self.gamma_unit,
            "configs": {str(k): c.to_dict() for k, c in self.configs.items()},
        }


def _loss_stat(widths, loss):
    return float(np.max(widths)) if loss == "Linf" else float(np.mean(widths))


def _cell_params(c: CellFit) -> dict:
    k = c.config.kernel
    return {"kernel": k.kind, "bandwidth": k.bandwidth if k.kind == "rbf" else "", "alpha": c.config.alpha,
            "beta_u": c.config.beta_u, "beta_l": c.config.beta_l}


def score_cells(cells: list[CellFit], gammas, gamma_unit: float, loss: str, target) -> list[CellScore]:
    """(nu_hat, loss_hat) for every cell and shift. ``target`` is an arm or
    ``"joint"`` (max FCR over arms, summed widths)."""
    out = []
    for c in cells:
        if c.model is None:
            continue
        arms = (0, 1) if target == "joint" else (target,)
        for g in gammas:
            shift = g * gamma_unit
            nus, ells = [], []
            for t in arms:
                lo, up, y, w = c.factual[t]
                nus.append(weighted_miscoverage(lo - shift, up + shift, y, w))
                ells.append(_loss_stat(c.widths[t] + 2 * shift, loss))
            out.append(CellScore(c.index, float(g), max(nus), float(sum(ells)), c.flagged,
                                 c.config.alpha, _cell_params(c)))
    return out


def choose(scores: list[CellScore], nu: float) -> tuple[CellScore, bool]:
    """Filter ``nu_hat <= nu`` then minimize ``loss_hat``; ties by (unflagged,
    smaller nu_hat, larger alpha, smaller gamma, cell order). Falls back to
    the smallest ``nu_hat`` when nothing survives."""
    if not scores:
        raise RuntimeError("no successfully fitted grid cell to choose from")
    ok = [s for s in scores if s.nu_hat <= nu]
    if ok:
        return min(ok, key=lambda s: (s.loss_hat, s.flagged, s.nu_hat, -s.alpha, s.gamma, s.cell)), False
    return min(scores, key=lambda s: (s.nu_hat, s.loss_hat, s.flagged, -s.alpha, s.gamma, s.cell)), True


def gamma_unit_for(train: Dataset, grid: Grid) -> float:
    if grid.gamma_scale == "absolute":
        return 1.0
    sd = float(np.std(train.Y))
    return sd if sd > 0 else 1.0


def select_from_cells(cells: list[CellFit], grid: Grid, gamma_unit: float, nu: float | None = None,
                      arms=(0, 1), certified: bool = True) -> SelectionResult:
    nu = grid.required_fcr if nu is None else nu
    targets = ["joint"] if grid.coupled else list(arms)
    chosen, table, fallback = {}, {}, {}
    by_index = {c.index: c for c in cells}
    arm_models, diags = {}, {}
    for target in targets:
        scores = score_cells(cells, grid.gammas, gamma_unit, grid.loss, target)
        best, fb = choose(scores, nu)
        chosen[target], table[target], fallback[target] = best, scores, fb
        if fb:
            log.warning("no grid cell reaches FCR %.4g for %s; using the smallest validation FCR %.4g",
                        nu, target, best.nu_hat)
        m = apply_gamma_shift(by_index[best.cell].model, best.gamma * gamma_unit)
        if target == "joint":
            model = m
        else:
            arm_models[target] = m.arms[target]
            diags[target] = m.diagnostics[target]
    configs = {t: replace(by_index[chosen[t].cell].config, gamma=chosen[t].gamma * gamma_unit) for t in targets}
    if not grid.coupled:
        # the model-level config records the first arm's choice; see ``configs`` for each arm
        model = BoundModel(arm_models, configs[targets[0]], diags)
    return SelectionResult(chosen, model, table, fallback, nu, certified, gamma_unit, configs)


def check_validation_size(validate: Dataset, nu: float, arms=(0, 1)) -> bool:
    small = [t for t in arms if validate.arm_index(t).size < MIN_VALIDATE_PER_ARM]
    if small and nu <= 0.01:
        warnings.warn(f"validation arm(s) {small} have fewer than {MIN_VALIDATE_PER_ARM} samples; "
                      f"the FCR target {nu} is not certified", UserWarning, stacklevel=3)
        return False
    return True


def grid_search(train: Dataset, validate: Dataset, grid: Grid, loss: str | None = None, nu: float | None = None,
                arms=(0, 1), weighted: bool = True, jobs: int = 1) -> SelectionResult:
    """Fit each cell on ``train``, score it on ``validate`` and pick per the FCR target.

    Decoupled grids select independently per arm; coupled grids select one
    configuration jointly (largest per-arm FCR, summed width statistics).
    """
    if loss is not None:
        grid = grid.with_(loss=loss)
    nu = grid.required_fcr if nu is None else nu
    if not 0 < nu < 1:
        raise ValueError("nu must lie in (0, 1)")
    arms = (0, 1) if grid.coupled else tuple(arms)
    certified = check_validation_size(validate, nu, arms)
    cells = evaluate_grid(train, validate, grid, arms, weighted, jobs)
    return select_from_cells(cells, grid, gamma_unit_for(train, grid), nu, arms, certified)
