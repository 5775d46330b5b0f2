"""Configuration-driven orchestration and report emission.

Stages run in a fixed order; each records a status and contributes tables,
JSON documents and constants to a :class:`ReportBundle`.  Every constant
carries its provenance: ``configured`` (read from the config), ``measured``
(computed from the graph) or ``derived`` (a formula of other constants).
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .builders import (build_lattice, build_sierpinski, build_vicsek, fit_walk_dimension,
                       mean_exit_times, sierpinski_point)
from .config import ExperimentConfig
from .cutoff import AnnulusSpec, base_profile, csa_frontier
from .errors import ConvergenceError, DaviesLabError, InsufficientDataError
from .fitting import fit_subgaussian, kernel_samples
from .graph import WeightedGraph, ahlfors_fit, lp_norm, write_edge_list
from .heat import (diagonal_sup, heat_kernel, nash_constant_estimate, nash_family,
                   orthonormality_residual, spectral_decompose)
from .iteration import (calibrate_usg, cascade_constant, davies_iterate, exact_one_to_inf,
                        geometric_grid, select_pairs, sr_margins, ultracontractive_bound,
                        usg_domination)
from .perturb import key_inequality_margin, key_negative_part, perturb_apply

log = logging.getLogger(__name__)

STAGES = ("build", "spectral", "exit-times", "csa", "iterate", "usg", "fit")
DEPENDS = {
    "build": (),
    "spectral": ("build",),
    "exit-times": ("build",),
    "csa": ("build",),
    "iterate": ("build", "spectral"),
    "usg": ("build", "spectral"),
    "fit": ("build", "spectral", "usg"),
}
CSV_COLUMNS = {
    "kernels": ("t", "x", "y", "p"),
    "exit_times": ("center", "r", "time"),
    "csa": ("C1", "C2", "violations"),
    "margins": ("p", "lambda", "t", "margin", "negative_part"),
    "trace": ("k", "t", "u", "w", "margin"),
    "fit": ("pair_id", "d", "t", "p", "bound", "residual"),
}


@dataclass
class ReportBundle:
    config: ExperimentConfig | None = None
    stages: dict = field(default_factory=dict)     # name -> {"status", "detail"}
    constants: dict = field(default_factory=dict)  # name -> {"value", "provenance", "stage"}
    tables: dict = field(default_factory=dict)     # name -> list of rows
    documents: dict = field(default_factory=dict)  # file name -> text
    summary: list = field(default_factory=list)
    complete: bool = True

    def constant(self, name, value, provenance, stage):
        assert provenance in ("measured", "configured", "derived")
        self.constants[name] = {"value": float(value), "provenance": provenance, "stage": stage}

    def value(self, name) -> float:
        return self.constants[name]["value"]


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


# -- building blocks -------------------------------------------------------------------

def build_graph(cfg: ExperimentConfig) -> WeightedGraph:
    if cfg.builder == "sierpinski":
        return build_sierpinski(cfg.level, cfg.measure)
    if cfg.builder == "vicsek":
        return build_vicsek(cfg.level, cfg.measure)
    return build_lattice(cfg.dim, cfg.side, cfg.measure)


def default_centers(G: WeightedGraph, cfg: ExperimentConfig) -> list:
    if cfg.centers:
        return [int(c) for c in cfg.centers]
    if cfg.builder == "sierpinski":
        cands = [sierpinski_point(G, 0.5, 0.0), sierpinski_point(G, 0.25, 0.25),
                 sierpinski_point(G, 0.5, 0.25)]
    elif cfg.builder == "vicsek":
        cands = [int(np.argmin(np.sum(G.coords**2, axis=1)))]
    else:
        mid = (cfg.side - 1) / 2.0
        cands = [int(np.argmin(np.sum((G.coords - mid) ** 2, axis=1)))]
    out = []
    for c in cands:
        if c not in out:
            out.append(c)
    return out


def interior_reach(G: WeightedGraph, x: int) -> int:
    """Largest R such that the closed ball B(x, R) avoids the boundary and is not all of G."""
    d = G.distances_from(x)
    reach = int(d.max()) - 1
    if G.boundary:
        reach = min(reach, int(min(d[b] for b in G.boundary)) - 1)
    return reach


def _powers_of_two(lo: int, hi: float) -> list:
    out, r = [], lo
    while r <= hi:
        out.append(float(r))
        r *= 2
    return out


def auto_pair_distances(reach: int) -> list:
    """Even distances in the central third of the feasible range."""
    ds = [d for d in range(2, reach + 1, 2) if reach / 3 <= d <= 2 * reach / 3]
    if not ds and reach >= 2:
        ds = [2 * (reach // 2)]
    if not ds:
        raise InsufficientDataError("graph too small for any annulus pair")
    return ds


@dataclass
class _Context:
    cfg: ExperimentConfig
    df: float
    dw: float
    G: WeightedGraph | None = None
    S: object = None
    centers: list = field(default_factory=list)
    reach: int = 0
    pairs: list = field(default_factory=list)
    tgrid: np.ndarray | None = None
    calibration: object = None


# -- stages ------------------------------------------------------------------------------

def _stage_build(ctx: _Context, b: ReportBundle):
    cfg = ctx.cfg
    ctx.G = G = build_graph(cfg)
    ctx.centers = default_centers(G, cfg)
    ctx.reach = min(interior_reach(G, x) for x in ctx.centers)
    dists = list(cfg.pair_distances) or auto_pair_distances(ctx.reach)
    ctx.pairs = select_pairs(G, ctx.centers, dists)
    dmin = min(p.d for p in ctx.pairs)
    dmax = max(p.d for p in ctx.pairs)
    ctx.tgrid = geometric_grid(dmin, dmax**ctx.dw, cfg.t_per_decade)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "graph.txt")
        write_edge_list(G, path)
        with open(path) as fh:
            b.documents["graph.txt"] = fh.read()
    b.constant("df_target", ctx.df, "configured", "build")
    b.constant("dw_target", ctx.dw, "configured", "build")
    b.summary.append(f"graph {G.name}: {G.n} vertices, {len(G.cond)} edges, "
                     f"centres {ctx.centers}, {len(ctx.pairs)} pairs")
    return {"vertices": G.n, "edges": int(len(G.cond)), "centers": ctx.centers,
            "pairs": [[p.x, p.y, p.d] for p in ctx.pairs]}


def _stage_spectral(ctx: _Context, b: ReportBundle):
    G = ctx.G
    ctx.S = S = spectral_decompose(G)
    resid = orthonormality_residual(S)
    alpha = ctx.df / ctx.dw
    C_diag = max(diagonal_sup(S, t) * t**alpha for t in ctx.tgrid)
    b.constant("C_diag", C_diag, "measured", "spectral")
    fam = nash_family(S, centers=ctx.centers, dw=ctx.dw)
    nash = nash_constant_estimate(G, ctx.df, ctx.dw, fam, ondiag_constant=C_diag)
    b.constant("C_N_family", nash.constant, "measured", "spectral")
    rows = []
    verts = sorted({v for p in ctx.pairs for v in (p.x, p.y)})
    for t in ctx.tgrid:
        P = heat_kernel(S, float(t)).values
        for x in ctx.centers:
            for y in verts:
                rows.append((float(t), x, y, float(P[x, y])))
    b.tables["kernels"] = rows
    b.summary.append(f"spectral: orthonormality residual {resid:.3e}, on-diagonal constant {C_diag:.6g}")
    return {"orthonormality_residual": resid, "eigenvalue_gap": float(S.eigenvalues[1])}


def _stage_exit_times(ctx: _Context, b: ReportBundle):
    G, cfg = ctx.G, ctx.cfg
    detail = {}
    open_reach = ctx.reach + 1
    radii = list(cfg.exit_radii) or _powers_of_two(2, open_reach)
    if len(radii) < 3:
        radii = [float(r) for r in range(1, open_reach + 1)]
    profiles = [mean_exit_times(G, x, [0.0] + radii) for x in ctx.centers]
    b.tables["exit_times"] = [(p.center, float(r), float(t)) for p in profiles
                              for r, t in zip(p.radii, p.times)]
    try:
        fit = fit_walk_dimension(profiles)
        b.constant("dw_fit", fit.exponent, "measured", "exit-times")
        detail["dw_fit"] = fit.exponent
        detail["dw_r_squared"] = fit.r_squared
    except InsufficientDataError as exc:
        detail["dw_fit"] = f"skipped: {exc}"
    aradii = list(cfg.ahlfors_radii) or _powers_of_two(4, ctx.reach)
    if len(aradii) < 3:
        aradii = [float(r) for r in range(1, ctx.reach + 1)]
    try:
        af = ahlfors_fit(G, ctx.centers, aradii)
        b.constant("df_fit", af.exponent, "measured", "exit-times")
        detail["df_fit"] = af.exponent
    except InsufficientDataError as exc:
        detail["df_fit"] = f"skipped: {exc}"
    b.summary.append(f"exit times: dw fit {detail['dw_fit']}, df fit {detail['df_fit']}")
    return detail


def _annulus(ctx: _Context) -> AnnulusSpec:
    r = ctx.cfg.annulus_radius
    if r is None:
        half = max(1, ctx.reach // 2)
        r = float(2 ** int(math.floor(math.log2(half))))
    return AnnulusSpec(ctx.centers[0], float(r), float(r)).validate(ctx.G)


def _stage_csa(ctx: _Context, b: ReportBundle):
    G, cfg = ctx.G, ctx.cfg
    A = _annulus(ctx)
    phi = base_profile(G, A.distances(G), A.R, A.r, cfg.cutoff_base)
    front = csa_frontier(G, phi, A, ctx.dw, cfg.c1_grid, n_validate=cfg.csa_validate, seed=cfg.seed)
    b.tables["csa"] = [(p.C1, p.C2, p.violations) for p in front.pairs]
    b.documents["csa.json"] = front.to_json()
    for p in front.pairs:
        if p.C1 == cfg.c1hat:
            b.constant("C1", p.C1, "configured", "csa")
            b.constant("C2_csa", p.C2, "measured", "csa")
    b.summary.append("csa: " + ", ".join(f"C2({p.C1:g})={p.C2:.6g}" for p in front.pairs))
    return {"R": A.R, "r": A.r, "violations": int(sum(p.violations for p in front.pairs))}


def _stage_iterate(ctx: _Context, b: ReportBundle, pool: ThreadPoolExecutor):
    G, S, cfg = ctx.G, ctx.S, ctx.cfg
    A = _annulus(ctx)
    x, r, lam = A.center, A.r, cfg.iterate_lambda
    f = np.zeros(G.n)
    f[x] = 1.0
    f /= lp_norm(f, G.mu, 2)
    tgrid = geometric_grid(1.0, max(10.0, (2 * r) ** ctx.dw), cfg.t_per_decade)

    def run(sign):
        return davies_iterate(S, x, r, lam, f, tgrid, cfg.K, ctx.df, ctx.dw, cfg.c1hat,
                              cfg.cutoff_base, sign)

    plus, minus = pool.map(run, (1, -1))
    table = sr_margins(plus)
    b.documents["trace.json"] = plus.to_json()
    by = {(row["k"], row["t"]): row["margin"] for row in table.rows if row["kind"] in ("sr1", "sr2")}
    b.tables["trace"] = [(rec.k, float(t), float(rec.u[j]), float(rec.w[j]),
                          by.get((rec.k, float(t)), float("nan")))
                         for rec in plus.levels for j, t in enumerate(tgrid)]

    def margin_rows(lam_k):
        # key-inequality margins along the flows; a short run for amplitudes
        # other than the traced one
        tr = plus if lam_k == lam else davies_iterate(
            S, x, r, lam_k, f, tgrid[:: max(1, len(tgrid) // 6)], min(cfg.K, 3),
            ctx.df, ctx.dw, cfg.c1hat, cfg.cutoff_base)
        rows = []
        for rec in tr.levels:
            F = perturb_apply(S, rec.psi, tr.tgrid, f)
            for j, t in enumerate(tr.tgrid):
                g = np.maximum(F[:, j], 0.0)
                g = g / lp_norm(g, G.mu, 2 * rec.p)
                rows.append((rec.p, lam_k, float(t), key_inequality_margin(G, g, rec.psi, rec.p),
                             key_negative_part(G, g, rec.psi, rec.p)))
        return rows

    b.tables["margins"] = [row for rows in pool.map(margin_rows, sorted(set(cfg.lambda_grid)))
                           for row in rows]
    for name, v in (("C_step", plus.C_step), ("C0", max(plus.C0, minus.C0)),
                    ("C_N", max(plus.C_N, minus.C_N))):
        b.constant(name, v, "measured", "iterate")
    b.constant("theta", plus.theta, "derived", "iterate")
    b.constant("delta", max(plus.delta, minus.delta), "derived", "iterate")
    C_A = max(plus.C_A(), minus.C_A())
    # a single level never exercises the Nash step, so C_N (and C_A) stay 0
    if C_A > 0:
        b.constant("C_A", C_A, "derived", "iterate")
        b.constant("C2_cascade", cascade_constant(ctx.dw, 1.0 / C_A, plus.theta), "derived", "iterate")
    b.constant("truncation_factor", max(plus.truncation_factor, minus.truncation_factor), "derived", "iterate")
    checks, worst, note = 0, 0.0, "ok"
    try:
        for t in tgrid[len(tgrid) // 3:]:
            bound = ultracontractive_bound(plus, float(t), minus)
            exact = exact_one_to_inf(S, plus, float(t))
            checks += 1
            worst = max(worst, exact / bound)
    except ConvergenceError as exc:
        note = f"skipped: {exc}"
    violations = table.violations
    b.summary.append(f"iterate: lambda={lam:g}, r={r:g}, K={plus.K}, C0={plus.C0:.6g}, "
                     f"C_N={plus.C_N:.6g}, margin violations {violations}, "
                     f"worst exact/bound {worst:.3g}")
    return {"levels": plus.K + 1, "margin_violations": violations, "ultracontractive": note,
            "ultracontractive_checks": checks, "worst_exact_over_bound": worst}


def _stage_usg(ctx: _Context, b: ReportBundle):
    cal = calibrate_usg(ctx.S, ctx.pairs, ctx.tgrid, ctx.cfg.lambda_grid, ctx.df, ctx.dw,
                        ctx.cfg.c1hat, ctx.cfg.cutoff_base)
    ctx.calibration = cal
    b.constant("C3", cal.C3, "derived", "usg")
    b.constant("C4", cal.C4, "measured", "usg")
    b.constant("C5", cal.C5, "derived", "usg")
    dom = usg_domination(ctx.S, cal, ctx.pairs, ctx.tgrid)
    b.summary.append(f"usg: C3={cal.C3:.6g}, C4={cal.C4:.6g}, C5={cal.C5:.6g}, "
                     f"{dom['points']} points, {dom['usg_violations']} violations")
    return {"points": dom["points"], "violations": dom["usg_violations"],
            "worst_ratio": dom["worst_ratio"], "rounds": cal.rounds}


def _stage_fit(ctx: _Context, b: ReportBundle):
    cal = ctx.calibration
    samples = kernel_samples(ctx.S, ctx.pairs, ctx.tgrid, ctx.dw)
    gate = max(1.0, cal.C4)
    rows = []
    try:
        fit = fit_subgaussian(samples, ctx.df, ctx.dw, gate=gate)
    except InsufficientDataError as exc:
        fit = None
        detail = {"status": f"skipped: {exc}"}
        b.summary.append(f"fit: skipped ({exc})")
    resid = {}
    if fit is not None:
        for i, r_ in zip(fit.used, fit.residuals):
            resid[int(i)] = float(r_)
        b.constant("fit_C1", fit.C1, "measured", "fit")
        b.constant("fit_C2", fit.C2, "measured", "fit")
        b.constant("stretched_exponent", fit.stretched_exponent, "measured", "fit")
        b.constant("prefactor_exponent", fit.prefactor_exponent, "measured", "fit")
        detail = {"stretched_exponent": fit.stretched_exponent, "target": 1 / (ctx.dw - 1),
                  "r_squared": fit.r_squared, "samples": int(len(fit.used))}
        b.summary.append(f"fit: stretched exponent {fit.stretched_exponent:.4g} "
                         f"(target {1 / (ctx.dw - 1):.4g}), R^2 {fit.r_squared:.4f}")
    for i, s in enumerate(samples):
        rows.append((s.pair_id, s.d, s.t, s.p, cal.bound(s.d, s.t), resid.get(i, float("nan"))))
    b.tables["fit"] = rows
    return detail


# -- orchestration ------------------------------------------------------------------------

def _closure(stages) -> list:
    need = set()

    def add(s):
        if s not in DEPENDS:
            raise DaviesLabError(f"unknown stage {s!r}")
        for dep in DEPENDS[s]:
            add(dep)
        need.add(s)

    for s in stages:
        add(s)
    return [s for s in STAGES if s in need]


def run_pipeline(cfg: ExperimentConfig, stages=None, out: str | None = None) -> ReportBundle:
    """Run ``stages`` (default: all) and their prerequisites; write the report.

    BLAS is pinned to one thread so results do not depend on ``cfg.threads``,
    which only sizes the pool for independent runs.  On a stage error the
    partial report is written with ``complete = false`` and the error is
    re-raised tagged with the stage name.
    """
    df, dw = cfg.dimensions()
    ctx = _Context(cfg, df, dw)
    bundle = ReportBundle(config=cfg)
    out = out if out is not None else cfg.out
    handlers = {"build": _stage_build, "spectral": _stage_spectral, "exit-times": _stage_exit_times,
                "csa": _stage_csa, "usg": _stage_usg, "fit": _stage_fit}
    with threadpool_limits(limits=1), ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        for name in _closure(stages or STAGES):
            try:
                if name == "iterate":
                    detail = _stage_iterate(ctx, bundle, pool)
                else:
                    detail = handlers[name](ctx, bundle)
            except DaviesLabError as exc:
                bundle.stages[name] = {"status": "failed", "detail": str(exc)}
                bundle.complete = False
                if out:
                    emit_report(bundle, out)
                exc.stage = name
                exc.args = (f"[{name}] {exc.args[0] if exc.args else ''}",) + exc.args[1:]
                raise
            bundle.stages[name] = {"status": "ok", "detail": detail}
    if out:
        emit_report(bundle, out)
    return bundle


def _version_existing(out: str) -> None:
    """Move files of an earlier report into ``previous/<n>/``."""
    existing = [f for f in sorted(os.listdir(out)) if f != "previous"]
    if not existing:
        return
    prev = os.path.join(out, "previous")
    os.makedirs(prev, exist_ok=True)
    n = 1 + max([int(d) for d in os.listdir(prev) if d.isdigit()] or [0])
    dest = os.path.join(prev, str(n))
    os.makedirs(dest)
    for f in existing:
        shutil.move(os.path.join(out, f), os.path.join(dest, f))


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def emit_report(bundle: ReportBundle, out: str) -> list:
    """Write MANIFEST.json, the CSV tables, JSON documents and summary.txt."""
    try:
        os.makedirs(out, exist_ok=True)
        _version_existing(out)
    except OSError as exc:
        raise OSError(f"cannot prepare output directory {out}: {exc}") from exc
    written = {}

    def put(name, text):
        path = os.path.join(out, name)
        with open(path, "w", newline="") as fh:
            fh.write(text)
        written[name] = hashlib.sha256(text.encode()).hexdigest()

    for name, rows in bundle.tables.items():
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS[name])
        for row in rows:
            w.writerow([_fmt(v) for v in row])
        put(f"{name}.csv", buf.getvalue())
    for name, text in bundle.documents.items():
        put(name, text)
    lines = [f"davieslab {__version__} report", ""] + bundle.summary
    lines += ["", "constants:"]
    lines += [f"  {k} = {v['value']!r} ({v['provenance']}, {v['stage']})"
              for k, v in bundle.constants.items()]
    put("summary.txt", "\n".join(lines) + "\n")
    manifest = {
        "tool": "davieslab",
        "version": __version__,
        "complete": bundle.complete,
        # output location and pool size do not affect results
        "config": ({k: v for k, v in bundle.config.as_dict().items() if k not in ("out", "threads")}
                   if bundle.config is not None else None),
        "stages": bundle.stages,
        "constants": bundle.constants,
        "files": dict(sorted(written.items())),
        "csv_columns": {k: list(v) for k, v in CSV_COLUMNS.items() if k in bundle.tables},
    }
    with open(os.path.join(out, "MANIFEST.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return sorted(written) + ["MANIFEST.json"]
