"""Compression-aware loss law, decay-phase law, FLOPs accounting and (P, R) search.

Loss law (exponents shared across every configuration)::

    L = E0 + A_token / (N(1-P) + t_token)^d1
           + A_concept * R^gamma / (N P + t_concept)^d2
           + A_data / (D + t_data)^alpha_data
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy.optimize import brentq, least_squares, minimize

LAW_PARAMS = ("E0", "A_token", "A_concept", "A_data", "t_token", "t_concept", "t_data",
              "delta1", "delta2", "gamma", "alpha_data")
EXPONENTS = ("delta1", "delta2", "gamma", "alpha_data")


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class ScalingPoint:
    N: float
    D: float
    R: float
    P: float
    loss: float
    phase: str = "stable"
    weight: float = 1.0
    run_id: str | None = None

    def __post_init__(self):
        if self.N <= 0 or self.D <= 0:
            raise ValueError(f"N and D must be positive (N={self.N}, D={self.D})")
        if not math.isfinite(self.loss):
            raise ValueError("loss must be finite")

    @property
    def config_key(self) -> tuple:
        return (self.N, self.P, self.R)


@dataclass
class ScalingFit:
    E0: float
    A_token: float
    A_concept: float
    A_data: float
    t_token: float
    t_concept: float
    t_data: float
    delta1: float
    delta2: float
    gamma: float
    alpha_data: float
    r2: float = float("nan")
    residuals: list = field(default_factory=list)
    offsets: dict = field(default_factory=dict)
    objective: float = float("nan")

    def params(self) -> dict:
        return {k: getattr(self, k) for k in LAW_PARAMS}

    def predict(self, N, D, R, P, config_key=None):
        N, D, R, P = (np.asarray(v, dtype=float) for v in (N, D, R, P))
        off = self.offsets.get(_key_str(config_key), 0.0) if config_key is not None else 0.0
        return (self.E0 + off
                + self.A_token / (N * (1 - P) + self.t_token) ** self.delta1
                + self.A_concept * R ** self.gamma / (N * P + self.t_concept) ** self.delta2
                + self.A_data / (D + self.t_data) ** self.alpha_data)

    def to_json(self) -> str:
        d = asdict(self)
        d["reference"] = {"joint_fit_r2": "> 0.98"}
        return json.dumps(d, indent=2, sort_keys=True)


def _key_str(key) -> str:
    return "N={:g},P={:g},R={:g}".format(*key) if isinstance(key, tuple) else str(key)


def law(N, D, R, P, **params):
    return ScalingFit(**params).predict(N, D, R, P)


def generate_points(params: dict, Ns, Rs, Ps, Ds, noise: float = 0.0, seed: int = 0) -> list[ScalingPoint]:
    """Grid of law evaluations with multiplicative Gaussian noise (relative std ``noise``)."""
    rng = np.random.default_rng(seed)
    pts = []
    for N in Ns:
        for R in Rs:
            for P in Ps:
                for D in Ds:
                    y = float(law(N, D, R, P, **params))
                    y *= 1 + noise * rng.standard_normal()
                    pts.append(ScalingPoint(float(N), float(D), float(R), float(P), y))
    return pts


# fitting -------------------------------------------------------------------------

def _check_identifiable(points: Sequence[ScalingPoint]) -> None:
    if len(points) < 30:
        raise FitError(f"need at least 30 points, got {len(points)}")
    for axis, need in (("N", 3), ("R", 2), ("P", 2)):
        n = len({getattr(p, axis) for p in points})
        if n < need:
            raise FitError(f"design is rank-deficient along {axis}: {n} distinct value(s), need {need}")
    if len({p.D for p in points}) < 3:
        raise FitError("design is rank-deficient along D: need at least 3 distinct token counts")


def _unpack(theta: torch.Tensor) -> dict:
    out = {}
    i = 0
    for name in LAW_PARAMS:
        v = theta[i]
        out[name] = v if name == "gamma" else torch.exp(v)
        i += 1
    return out


def _objective_factory(points, huber: float | None, offsets: bool, penalty: float):
    N = torch.tensor([p.N for p in points], dtype=torch.float64)
    D = torch.tensor([p.D for p in points], dtype=torch.float64)
    R = torch.tensor([p.R for p in points], dtype=torch.float64)
    P = torch.tensor([p.P for p in points], dtype=torch.float64)
    y = torch.log(torch.tensor([p.loss for p in points], dtype=torch.float64))
    w = torch.tensor([p.weight for p in points], dtype=torch.float64)
    w = w / w.sum()
    keys = sorted({_key_str(p.config_key) for p in points})
    kidx = torch.tensor([keys.index(_key_str(p.config_key)) for p in points])
    n_law = len(LAW_PARAMS)

    def predict(theta):
        q = _unpack(theta)
        pred = (q["E0"]
                + q["A_token"] / (N * (1 - P) + q["t_token"]) ** q["delta1"]
                + q["A_concept"] * R ** q["gamma"] / (N * P + q["t_concept"]) ** q["delta2"]
                + q["A_data"] / (D + q["t_data"]) ** q["alpha_data"])
        if offsets:
            pred = pred + theta[n_law:][kidx]
        return pred

    def fun(x):
        theta = torch.tensor(x, dtype=torch.float64, requires_grad=True)
        pred = predict(theta)
        r = torch.log(torch.clamp(pred, min=1e-12)) - y
        if huber:
            a = r.abs()
            loss_terms = torch.where(a <= huber, 0.5 * r**2, huber * (a - 0.5 * huber))
        else:
            loss_terms = 0.5 * r**2
        obj = (w * loss_terms).sum()
        if offsets:
            obj = obj + penalty * (theta[n_law:] ** 2).sum()
        obj.backward()
        return float(obj.detach()), theta.grad.numpy().copy()

    sw = w.sqrt()

    def resid(x):
        theta = torch.tensor(x, dtype=torch.float64)
        r = sw * (torch.log(torch.clamp(predict(theta), min=1e-12)) - y)
        if offsets:
            r = torch.cat([r, math.sqrt(2 * penalty) * theta[n_law:]])
        return r.numpy()

    def resid_jac(x):
        theta = torch.tensor(x, dtype=torch.float64)
        return torch.autograd.functional.jacobian(
            lambda t: torch.cat([sw * (torch.log(torch.clamp(predict(t), min=1e-12)) - y)]
                                + ([math.sqrt(2 * penalty) * t[n_law:]] if offsets else [])), theta).numpy()

    return fun, predict, keys, resid, resid_jac


_BOUNDS = {
    "E0": (-12, 3), "A_token": (-10, 20), "A_concept": (-10, 20), "A_data": (-10, 20),
    "t_token": (-5, 25), "t_concept": (-5, 25), "t_data": (-5, 30),
    "delta1": (-5, 1), "delta2": (-5, 1), "gamma": (-3, 3), "alpha_data": (-5, 1),
}


def _starts(points, n_starts: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    lmin = min(p.loss for p in points)
    starts = []
    for i in range(n_starts):
        e0 = lmin * (0.5 if i == 0 else rng.uniform(0.2, 0.9))
        exps = [0.3, 0.3, 0.0, 0.3] if i == 0 else list(rng.uniform(0.1, 0.6, 4))
        exps[2] = 0.0 if i == 0 else rng.uniform(-0.5, 0.5)
        amps = [math.log(10.0)] * 3 if i == 0 else list(rng.uniform(0, 8, 3))
        ts = [0.0, 0.0, 0.0] if i == 0 else list(rng.uniform(0, 10, 3))
        starts.append(np.array([math.log(e0), *amps, *ts,
                                math.log(exps[0]), math.log(exps[1]), exps[2], math.log(exps[3])]))
    return starts


def fit_full_law(points: Sequence[ScalingPoint], n_starts: int = 8, max_iter: int = 5000, seed: int = 0,
                 huber: float | None = None, offsets: bool = False, offset_penalty: float = 1.0) -> ScalingFit:
    """Weighted least squares in log-loss space, multi-start L-BFGS-B on log-parameters.

    With ``offsets`` each (N, P, R) configuration gets an additive scalar on E0,
    shrunk towards zero by ``offset_penalty``.
    """
    _check_identifiable(points)
    fun, predict, keys, resid, resid_jac = _objective_factory(points, huber, offsets, offset_penalty)
    bounds = [_BOUNDS[k] for k in LAW_PARAMS] + ([(-1.0, 1.0)] * len(keys) if offsets else [])
    lo, hi = np.array([b[0] for b in bounds]), np.array([b[1] for b in bounds])
    results = []
    for x0 in _starts(points, n_starts, seed):
        if offsets:
            x0 = np.concatenate([x0, np.zeros(len(keys))])
        x0 = np.clip(x0, lo, hi)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                           options={"maxiter": max_iter, "ftol": 1e-15, "gtol": 1e-12})
        if np.isfinite(res.fun):
            results.append((float(res.fun), res.x))
    if not results:
        raise FitError("all starts failed to produce a finite objective")
    # quasi-Newton stalls in the flat E0/A/t valleys; finish the best few with trust-region least squares
    results.sort(key=lambda r: r[0])
    best_x, best_f = results[0][1], results[0][0]
    for _, x in results[:3]:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            ls = least_squares(resid, np.clip(x, lo + 1e-9, hi - 1e-9), jac=resid_jac, bounds=(lo, hi),
                               method="trf", loss="huber" if huber else "linear", f_scale=huber or 1.0,
                               xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=max_iter)
        f = fun(ls.x)[0]
        if f < best_f:
            best_x, best_f = ls.x, f
    theta = torch.tensor(best_x, dtype=torch.float64)
    q = {k: float(v) for k, v in _unpack(theta).items()}
    pred = predict(theta).numpy()
    obs = np.array([p.loss for p in points])
    r2 = 1 - float(((obs - pred) ** 2).sum() / ((obs - obs.mean()) ** 2).sum())
    offs = {k: float(v) for k, v in zip(keys, best_x[len(LAW_PARAMS):])} if offsets else {}
    return ScalingFit(**q, r2=r2, residuals=(obs - pred).tolist(), offsets=offs, objective=float(best_f))


def check_monotone(fit: ScalingFit, points: Sequence[ScalingPoint], n_grid: int = 16) -> bool:
    """Predicted loss nonincreasing in N and in D over the data hull at every observed (P, R)."""
    Ns = np.geomspace(min(p.N for p in points), max(p.N for p in points), n_grid)
    Ds = np.geomspace(min(p.D for p in points), max(p.D for p in points), n_grid)
    for P in {p.P for p in points}:
        for R in {p.R for p in points}:
            for D in Ds[[0, -1]]:
                if np.any(np.diff(fit.predict(Ns, D, R, P)) > 1e-12):
                    return False
            for N in Ns[[0, -1]]:
                if np.any(np.diff(fit.predict(N, Ds, R, P)) > 1e-12):
                    return False
    return True


# trajectory sampling ----------------------------------------------------------------


def tail_weighted_sampling(trajectory: Sequence[dict], n_points: int = 32, w: float = 2.0, N: float = 1.0,
                           R: float = 1.0, P: float = 0.5, decay_frac: float = 0.1,
                           loss_key: str = "loss_ce", run_id: str | None = None) -> list[ScalingPoint]:
    """Log-spaced subsample in D with weight (D / D_max)^w; the last point is always kept."""
    traj = [e for e in trajectory if e["tokens"] > 0]
    D = np.array([e["tokens"] for e in traj], dtype=float)
    if len(D) == 0:
        return []
    targets = np.geomspace(D[0], D[-1], min(n_points, len(D)))
    idx = sorted({int(np.searchsorted(D, t, side="left").clip(0, len(D) - 1)) for t in targets} | {len(D) - 1})
    d_max = D[-1]
    decay_start = (1 - decay_frac) * d_max
    return [ScalingPoint(N, D[i], R, P, float(traj[i][loss_key]),
                         phase="decay" if D[i] > decay_start else "stable",
                         weight=float((D[i] / d_max) ** w), run_id=run_id) for i in idx]


def fit_data_curve(D, loss, weights=None) -> dict:
    """Fit L = E + A * D^-alpha to one trajectory (weighted, log-loss space)."""
    D, loss = np.asarray(D, float), np.asarray(loss, float)
    wts = np.ones_like(D) if weights is None else np.asarray(weights, float)
    wts = wts / wts.sum()
    scale = D.max()

    def obj(x):
        E, A, a = math.exp(x[0]), math.exp(x[1]), math.exp(x[2])
        pred = E + A * (D / scale) ** (-a)
        return float((wts * (np.log(pred) - np.log(loss)) ** 2).sum())

    best = None
    for a0 in (0.1, 0.3, 1.0):
        x0 = [math.log(loss.min() * 0.8), math.log(max(loss.min() * 0.2, 1e-3)), math.log(a0)]
        res = minimize(obj, x0, method="L-BFGS-B")
        if best is None or res.fun < best.fun:
            best = res
    E, A, a = np.exp(best.x)
    pred = E + A * (D / scale) ** (-a)
    return {"E": E, "A": A * scale**a, "alpha": a, "residuals": (loss - pred).tolist()}


# decay law ----------------------------------------------------------------------------


@dataclass
class DecayFit:
    k: float
    a: float
    b: float
    c: float
    r2: float

    def predict(self, L_stable, R, N):
        return self.k * np.asarray(L_stable, float) ** self.a * np.asarray(R, float) ** self.b \
            * np.asarray(N, float) ** self.c


def decay_delta(trajectory: Sequence[dict], loss_key: str = "loss_ce", lo: float = 0.9, hi: float = 0.99):
    """(L_stable, fractional drop) between ``lo`` and ``hi`` of total tokens."""
    D = np.array([e["tokens"] for e in trajectory], float)
    y = np.array([e[loss_key] for e in trajectory], float)
    total = D[-1]
    l_lo = float(np.interp(lo * total, D, y))
    l_hi = float(np.interp(hi * total, D, y))
    return l_lo, (l_lo - l_hi) / l_lo


def fit_decay_law(runs: Iterable[tuple[float, float, float, float]]) -> DecayFit:
    """OLS of ln(delta) on (1, ln L_stable, ln R, ln N). Nonpositive deltas are dropped."""
    rows = []
    for L, R, N, delta in runs:
        if delta <= 0 or L <= 0 or R <= 0 or N <= 0:
            warnings.warn(f"dropping run with nonpositive value (L={L}, R={R}, N={N}, delta={delta})")
            continue
        rows.append((L, R, N, delta))
    if len(rows) < 5:
        raise FitError(f"need at least 5 usable runs, got {len(rows)}")
    arr = np.log(np.array(rows, float))
    X = np.column_stack([np.ones(len(arr)), arr[:, 0], arr[:, 1], arr[:, 2]])
    y = arr[:, 3]
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    # columns with no variation carry no information; lstsq gives them zero weight in the min-norm sense
    resid = y - X @ coef
    sst = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - float((resid**2).sum() / sst) if sst > 0 else 1.0
    return DecayFit(float(math.exp(coef[0])), float(coef[1]), float(coef[2]), float(coef[3]), r2)


# FLOPs --------------------------------------------------------------------------------


@dataclass(frozen=True)
class Architecture:
    """Widths and depths for FLOPs accounting. ``n_concept_layers = 0`` describes a dense model."""

    d_token: int
    n_token_layers: int
    token_heads: int
    token_kv_heads: int
    token_mlp: int
    d_concept: int = 0
    n_concept_layers: int = 0
    concept_heads: int = 1
    concept_kv_heads: int = 1
    concept_mlp: int = 0
    n_cross_layers: int = 0
    cross_mlp: int = 0
    seq_len: int = 2048

    @staticmethod
    def _layer(d, heads, kv, mlp) -> int:
        hd = d // heads
        return d * heads * hd * 2 + 2 * d * kv * hd + 3 * d * mlp

    @property
    def token_params(self) -> int:
        n = self.n_token_layers * self._layer(self.d_token, self.token_heads, self.token_kv_heads, self.token_mlp)
        if self.n_concept_layers:
            d, dc = self.d_token, self.d_concept
            n += 2 * d * 128 + d * dc  # boundary projections and up-projection
            n += self.n_cross_layers * (2 * d * d + 2 * dc * d + 3 * d * self.cross_mlp)
        return n

    @property
    def concept_params(self) -> int:
        if not self.n_concept_layers:
            return 0
        return self.n_concept_layers * self._layer(self.d_concept, self.concept_heads, self.concept_kv_heads,
                                                   self.concept_mlp)

    @property
    def P(self) -> float:
        return self.concept_params / (self.token_params + self.concept_params)


def flops_estimate(arch: Architecture, D: float, R: float, attention: bool = True) -> dict:
    """Training FLOPs: 6 D N_token + 6 (D/R) N_concept plus (optionally) quadratic attention terms."""
    L = arch.seq_len if attention else 0
    token = D * (6 * arch.token_params + arch.n_token_layers * 12 * L * arch.d_token)
    concept = (D / R) * (6 * arch.concept_params + arch.n_concept_layers * 12 * (L / R) * arch.d_concept)
    return {"token_flops": token, "concept_flops": concept, "total": token + concept}


def reference_archs(seq_len: int = 2048) -> tuple[Architecture, Architecture]:
    """The dense 1.3B baseline and the 2.3B concept model of the reference configuration."""
    base = Architecture(1536, 32, 24, 24, 4096, seq_len=seq_len)
    dlcm = Architecture(1536, 16, 24, 12, 6144, d_concept=3072, n_concept_layers=16, concept_heads=48,
                    concept_kv_heads=24, concept_mlp=6144, n_cross_layers=1, cross_mlp=6144, seq_len=seq_len)
    return base, dlcm


# (P, R) search ------------------------------------------------------------------------


def optimal_config(fit: ScalingFit | None, N_budget: float, D: float, Ps=(0.3, 0.5, 0.7), Rs=(2, 4, 8)) -> dict:
    """Predicted loss per (P, R) at equal estimated FLOPs.

    The reference dense model is N_budget params over D tokens. Each cell gets
    the token count that spends the same FLOPs: 6 N (1-P) D' + 6 N P D'/R = 6 N D.
    """
    if fit is None:
        raise FitError("optimal_config needs a fitted law")
    rows = []
    for P in Ps:
        for R in Rs:
            D_eq = D / ((1 - P) + P / R)
            rows.append({"P": P, "R": R, "D_equal_flops": D_eq, "pred_loss": float(fit.predict(N_budget, D_eq, R, P))})
    rows.sort(key=lambda r: r["pred_loss"])
    return {"best": rows[0], "table": rows, "reference_operating_point": {"P": 0.6, "R": 4}}


def compute_multiplier(fit: ScalingFit, dlcm: dict, baseline: dict, D_range=(1e6, 1e16)) -> float:
    """Baseline-to-DLCM FLOPs ratio at matched predicted loss.

    ``dlcm`` / ``baseline`` are dicts with N, P, R, D (baseline: its R and P are
    those it is evaluated at; a dense model is represented with P ~ 0, R = 1).
    The baseline token count matching the DLCM loss is found by root finding.
    """
    target = float(fit.predict(dlcm["N"], dlcm["D"], dlcm["R"], dlcm["P"]))

    def gap(logD):
        return float(fit.predict(baseline["N"], math.exp(logD), baseline["R"], baseline["P"])) - target

    lo, hi = math.log(D_range[0]), math.log(D_range[1])
    if gap(lo) * gap(hi) > 0:
        raise FitError("baseline never reaches the DLCM loss within the token range")
    D_base = math.exp(brentq(gap, lo, hi, xtol=1e-14, rtol=1e-14))

    def flops(cfg, D):
        return 6 * cfg["N"] * (1 - cfg["P"]) * D + 6 * cfg["N"] * cfg["P"] * D / cfg["R"]

    return flops(baseline, D_base) / flops(dlcm, dlcm["D"])


# IO -------------------------------------------------------------------------------------


def read_points(path) -> list[ScalingPoint]:
    """CSV (run_id,N,P,R,D,loss,phase[,weight]) or JSONL records with the same keys."""
    path = Path(path)
    pts = []
    if path.suffix == ".csv":
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                pts.append(ScalingPoint(float(row["N"]), float(row["D"]), float(row["R"]), float(row["P"]),
                                        float(row["loss"]), row.get("phase", "stable"),
                                        float(row.get("weight") or 1.0), row.get("run_id") or None))
    else:
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            r = json.loads(line)
            loss = r.get("loss", r.get("loss_ce"))
            D = r.get("D", r.get("tokens"))
            pts.append(ScalingPoint(float(r["N"]), float(D), float(r["R"]), float(r["P"]), float(loss),
                                    r.get("phase", "stable"), float(r.get("weight", 1.0)), r.get("run_id")))
    return pts


def write_points_csv(points: Sequence[ScalingPoint], path) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["run_id", "N", "P", "R", "D", "loss", "phase", "weight"])
        for p in points:
            wr.writerow([p.run_id or "", *(repr(float(v)) for v in (p.N, p.P, p.R, p.D, p.loss)), p.phase,
                         repr(float(p.weight))])


def write_prediction_grid(fit: ScalingFit, points: Sequence[ScalingPoint], path) -> None:
    """Gnuplot-friendly TSV: one block per configuration, blank line between blocks."""
    groups: dict = {}
    for p in points:
        groups.setdefault(p.config_key, []).append(p)
    with open(path, "w") as f:
        f.write("# N\tP\tR\tD\tobserved\tpredicted\n")
        for key in sorted(groups):
            for p in sorted(groups[key], key=lambda q: q.D):
                pred = float(fit.predict(p.N, p.D, p.R, p.P))
                f.write(f"{p.N:g}\t{p.P:g}\t{p.R:g}\t{p.D:g}\t{p.loss:.6f}\t{pred:.6f}\n")
            f.write("\n\n")
