"""Command-line pipeline: generate -> invert -> summarize.

File formats (UTF-8 CSV with header rows):
  observations.csv  node_id, dof (x|y), value      full nodal field, obs. mesh
  force.csv         node_id, dof (x|y), value      generalized force, free DOFs
  trace.csv         level, iteration, Q_tilde, rel_increase
  element tables    elem_id, cx, cy, value...      (lambda2, modulus, stress)
  config files      flat "key = value" lines; CLI flags override file keys

Exit status: 0 success, 2 non-convergence (cap hit at some level; partial
outputs are retained), 1 usage or I/O errors.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import fem, priors, saem, synthetic
from .fem import ConstitutiveBase, Walls, build_structured_mesh
from .priors import NoiseHyperprior, build_gmrf, displacement_gmrf
from .samplers import GibbsSampler
from .saem import EmConfig, refine_cascade

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE_IO = 1
EXIT_NON_CONVERGED = 2


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Resolved pipeline configuration; defaults mirror the benchmark setup."""

    example: int = 1
    dataset: str = ""
    cascade: tuple = (5, 10, 20)
    element_kind: str = "quad"
    regime: str = "plane_stress"
    poisson_ratio: float = 0.5
    data_mesh_n: int = 100
    snr_db: float = math.inf
    u_bottom: float = 0.0
    u_left: float = 0.0
    u_right: float = 1.0
    u_top: float = 1.0
    d0: float = priors.DEFAULT_D0
    sigma_z2: float = priors.DEFAULT_SIGMA_Z2
    sigma_u2: float = priors.DEFAULT_SIGMA_U2
    alpha_nu: float = priors.DEFAULT_ALPHA_NU
    beta_nu: float = priors.DEFAULT_BETA_NU
    n_mcmc: int = 10
    p: float = 0.51
    epsilon: float = 1e-3
    max_iterations: int = 500
    final_samples: int = 400
    gibbs: str = "full"
    seed: int = 0
    outdir: str = "out"
    q_lo: float = 0.05
    q_hi: float = 0.95
    replicates: int = 1

    @property
    def walls(self) -> Walls:
        return Walls(bottom=self.u_bottom, left=self.u_left,
                     right=self.u_right, top=self.u_top)

    def base(self) -> ConstitutiveBase:
        return ConstitutiveBase.isotropic(self.regime, self.poisson_ratio)

    def em_config(self) -> EmConfig:
        return EmConfig(n_mcmc=self.n_mcmc, p=self.p, epsilon=self.epsilon,
                        max_iterations=self.max_iterations,
                        final_samples=self.final_samples, gibbs_mode=self.gibbs)

    def validate(self) -> "RunConfig":
        self.base()
        self.em_config()
        NoiseHyperprior(self.alpha_nu, self.beta_nu)
        if self.example not in (1, 2):
            raise ValueError(f"example must be 1 or 2, got {self.example}")
        if not self.cascade or any(n < 1 for n in self.cascade):
            raise ValueError("cascade must list positive mesh sizes")
        if any(b > a for a, b in zip(self.cascade[1:], self.cascade)):
            raise ValueError("cascade sizes must be non-decreasing")
        if self.data_mesh_n < self.cascade[-1]:
            raise ValueError("data mesh must be at least as fine as the finest level")
        if self.d0 <= 0 or self.sigma_z2 <= 0 or self.sigma_u2 <= 0:
            raise ValueError("prior parameters d0, sigma_z2, sigma_u2 must be positive")
        if not 0.0 <= self.q_lo < self.q_hi <= 1.0:
            raise ValueError("quantiles must satisfy 0 <= q_lo < q_hi <= 1")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        return self


def _parse_value(name: str, raw: str, kind):
    raw = raw.strip()
    if kind is tuple:
        return tuple(int(tok) for tok in raw.replace(",", " ").split())
    if kind is float:
        return float(raw)
    if kind is int:
        return int(raw)
    return raw


def read_config_file(path) -> dict:
    """Flat key = value file; '#' starts a comment, blank lines ignored."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = raw
    return values


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """File keys first, CLI overrides second, then validation."""
    types = {f.name: f.type for f in fields(RunConfig)}
    kinds = {name: type(getattr(RunConfig(), name)) for name in types}
    cfg = RunConfig()
    for source in (file_values or {}, overrides or {}):
        for key, raw in source.items():
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            value = _parse_value(key, raw, kinds[key]) if isinstance(raw, str) else raw
            setattr(cfg, key, value)
    return cfg.validate()


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def write_config_file(path, cfg: RunConfig) -> None:
    lines = [f"{name} = {format_value(getattr(cfg, name))}"
             for name in (f.name for f in fields(RunConfig))]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Tabular files
# ---------------------------------------------------------------------------

def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x))


def write_dof_table(path, values: np.ndarray, dof_indices=None) -> None:
    """Rows (node_id, dof, value); values are aligned with dof_indices (default: all)."""
    if dof_indices is None:
        dof_indices = np.arange(values.size)
    rows = [(int(dof) // 2, "xy"[int(dof) % 2], _fmt(val))
            for dof, val in zip(dof_indices, values)]
    _write_csv(path, ["node_id", "dof", "value"], rows)


def read_dof_table(path) -> list[tuple[int, int, float]]:
    """Rows as (node_id, component, value)."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            comp = {"x": 0, "y": 1}[row["dof"]]
            out.append((int(row["node_id"]), comp, float(row["value"])))
    return out


def write_element_table(path, centroids, columns: dict) -> None:
    """Element table (elem_id, cx, cy, <columns...>)."""
    names = list(columns)
    header = ["elem_id", "cx", "cy"] + names
    rows = []
    for e in range(centroids.shape[0]):
        rows.append([e, _fmt(centroids[e, 0]), _fmt(centroids[e, 1])]
                    + [_fmt(columns[name][e]) for name in names])
    _write_csv(path, header, rows)


def write_trace(path, cascade_result) -> None:
    rows = []
    for level, result in enumerate(cascade_result.results):
        trace = result.trace
        for it in range(trace.n_iterations):
            rows.append([level, it + 1, _fmt(trace.q_tilde[it]),
                         _fmt(trace.rel_increase[it])])
    _write_csv(path, ["level", "iteration", "Q_tilde", "rel_increase"], rows)


# ---------------------------------------------------------------------------
# Dataset serialization
# ---------------------------------------------------------------------------

def save_dataset(outdir, dataset: synthetic.Dataset, cfg: RunConfig) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    mesh = dataset.obs_mesh
    write_dof_table(outdir / "observations.csv", dataset.nodal)
    write_dof_table(outdir / "force.csv", dataset.f, mesh.free_dofs)
    write_config_file(outdir / "config_resolved.txt", cfg)


def load_dataset(dataset_dir) -> tuple[synthetic.Dataset, RunConfig]:
    dataset_dir = Path(dataset_dir)
    cfg = build_config(read_config_file(dataset_dir / "config_resolved.txt"))
    n = cfg.cascade[-1]
    mesh = build_structured_mesh(n, n, cfg.element_kind)
    nodal = np.zeros(mesh.n_dofs)
    for node, comp, value in read_dof_table(dataset_dir / "observations.csv"):
        nodal[2 * node + comp] = value
    f = np.zeros(mesh.n_free)
    for node, comp, value in read_dof_table(dataset_dir / "force.csv"):
        f[mesh.global_to_free[2 * node + comp]] = value
    dataset = synthetic.Dataset(obs_mesh=mesh, walls=cfg.walls, nodal=nodal,
                                snr_db=cfg.snr_db, f=f)
    return dataset, cfg


# ---------------------------------------------------------------------------
# Posterior summaries
# ---------------------------------------------------------------------------

def quantile_linear(samples: np.ndarray, q: float, axis=0) -> np.ndarray:
    """Linear interpolation of order statistics (type-7 convention)."""
    return np.quantile(samples, q, axis=axis, method="linear")


def diagonal_transect(centroids: np.ndarray, n_stations: int,
                      start, end) -> tuple[np.ndarray, np.ndarray]:
    """Element ids whose centroids are nearest the line's sampling stations.

    Returns (elem_ids, arc distances from the start point).
    """
    start, end = np.asarray(start, float), np.asarray(end, float)
    t = (np.arange(n_stations) + 0.5) / n_stations
    points = start + t[:, None] * (end - start)
    d2 = ((centroids[None, :, :] - points[:, None, :]) ** 2).sum(axis=2)
    elems = np.argmin(d2, axis=1)
    return elems, t * np.linalg.norm(end - start)


@dataclass
class PosteriorSummary:
    """Per-element and per-node posterior tables plus the diagonal transects."""

    centroids: np.ndarray
    e_mean: np.ndarray
    e_lo: np.ndarray
    e_hi: np.ndarray
    lambda2: np.ndarray
    stress_mean: np.ndarray     # (n_el, 3)
    pressure: np.ndarray        # mean in-plane normal stress, tension positive
    shear: np.ndarray
    node_coords: np.ndarray
    u_mean: np.ndarray          # (n_nodes, 2)
    transects: dict             # name -> (elem_ids, distances)
    q_lo: float
    q_hi: float


def summarize_samples(store: dict, q_lo: float = 0.05, q_hi: float = 0.95) -> PosteriorSummary:
    """Summary statistics from a sample store (the arrays of samples.npz)."""
    e_samples = store["E"]
    if e_samples.size == 0:
        raise ValueError("empty sample store")
    if not 0.0 <= q_lo < q_hi <= 1.0:
        raise ValueError("quantiles must satisfy 0 <= q_lo < q_hi <= 1")
    centroids = store["centroids"]
    nx = int(store["nx"])
    e_lo = quantile_linear(e_samples, q_lo)
    e_hi = quantile_linear(e_samples, q_hi)
    if np.any(e_lo > e_hi):
        raise AssertionError("quantile bands are not ordered")
    sigma_mean = store["sigma"].mean(axis=0).reshape(-1, 3)
    u_mean = store["u_full"].mean(axis=0).reshape(-1, 2)
    transects = {
        "diag": diagonal_transect(centroids, nx, (0.0, 0.0), (1.0, 1.0)),
        "anti": diagonal_transect(centroids, nx, (0.0, 1.0), (1.0, 0.0)),
    }
    return PosteriorSummary(
        centroids=centroids,
        e_mean=e_samples.mean(axis=0),
        e_lo=e_lo,
        e_hi=e_hi,
        lambda2=store["lambda2"],
        stress_mean=sigma_mean,
        pressure=0.5 * (sigma_mean[:, 0] + sigma_mean[:, 1]),
        shear=sigma_mean[:, 2],
        node_coords=store["node_coords"],
        u_mean=u_mean,
        transects=transects,
        q_lo=q_lo,
        q_hi=q_hi,
    )


def write_summary(outdir, summary: PosteriorSummary) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_element_table(outdir / "modulus.csv", summary.centroids, {
        "mean": summary.e_mean, "q_lo": summary.e_lo, "q_hi": summary.e_hi,
    })
    write_element_table(outdir / "lambda2.csv", summary.centroids, {
        "lambda2": summary.lambda2, "log10_lambda2": np.log10(summary.lambda2),
    })
    write_element_table(outdir / "stress.csv", summary.centroids, {
        "sigma_xx": summary.stress_mean[:, 0],
        "sigma_yy": summary.stress_mean[:, 1],
        "sigma_xy": summary.stress_mean[:, 2],
        "pressure": summary.pressure,
        "shear": summary.shear,
    })
    rows = [(n, _fmt(summary.node_coords[n, 0]), _fmt(summary.node_coords[n, 1]),
             _fmt(summary.u_mean[n, 0]), _fmt(summary.u_mean[n, 1]))
            for n in range(summary.node_coords.shape[0])]
    _write_csv(outdir / "displacement.csv", ["node_id", "x", "y", "ux", "uy"], rows)
    for name, (elems, dist) in summary.transects.items():
        rows = [(_fmt(dist[k]), int(e), _fmt(summary.centroids[e, 0]),
                 _fmt(summary.centroids[e, 1]), _fmt(summary.e_mean[e]),
                 _fmt(summary.e_lo[e]), _fmt(summary.e_hi[e]))
                for k, e in enumerate(elems)]
        _write_csv(outdir / f"transect_{name}.csv",
                   ["s", "elem_id", "cx", "cy", "mean", "q_lo", "q_hi"], rows)


def save_sample_store(path, result: saem.EmResult) -> None:
    mesh = result.mesh
    store = result.samples
    np.savez(path, E=store.E, u_full=store.u_full, sigma=store.sigma,
             nu2=store.nu2, lambda2=result.lambda2, centroids=mesh.centroids,
             node_coords=mesh.node_coords, volumes=mesh.volumes,
             free_dofs=mesh.free_dofs, prescribed_dofs=mesh.prescribed_dofs,
             nx=mesh.nx, ny=mesh.ny, element_kind=mesh.element_kind)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def generate_dataset(cfg: RunConfig, rng: np.random.Generator) -> synthetic.Dataset:
    base = cfg.base()
    fine = build_structured_mesh(cfg.data_mesh_n, cfg.data_mesh_n, "quad")
    n = cfg.cascade[-1]
    obs_mesh = build_structured_mesh(n, n, cfg.element_kind)
    field_fn = synthetic.example1_field if cfg.example == 1 else synthetic.example2_field
    truth = field_fn(fine, base)
    return synthetic.make_dataset(truth, fine, obs_mesh, cfg.walls, cfg.snr_db, rng)


def cmd_generate(cfg: RunConfig) -> int:
    rng = np.random.default_rng(cfg.seed)
    dataset = generate_dataset(cfg, rng)
    save_dataset(cfg.outdir, dataset, cfg)
    for name in (f.name for f in fields(RunConfig)):
        print(f"{name} = {format_value(getattr(cfg, name))}")
    logger.info("dataset written to %s", cfg.outdir)
    return EXIT_OK


def run_inversion(cfg: RunConfig, dataset: synthetic.Dataset,
                  rng: np.random.Generator) -> saem.CascadeResult:
    base = cfg.base()
    noise_prior = NoiseHyperprior(cfg.alpha_nu, cfg.beta_nu)
    samplers, gmrfs = [], []
    for n in cfg.cascade:
        mesh = build_structured_mesh(n, n, cfg.element_kind)
        obs, bc = synthetic.observations_for_mesh(dataset, mesh)
        u_prior = displacement_gmrf(mesh, cfg.d0, cfg.sigma_u2)
        samplers.append(GibbsSampler(mesh, base, bc, obs, noise_prior, u_prior))
        gmrfs.append(build_gmrf(mesh.centroids, cfg.d0, cfg.sigma_z2))
    return refine_cascade(samplers, gmrfs, cfg.em_config(), rng)


def write_inversion_outputs(outdir, cfg: RunConfig, cascade: saem.CascadeResult) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_config_file(outdir / "config_resolved.txt", cfg)
    write_trace(outdir / "trace.csv", cascade)
    for level, result in enumerate(cascade.results):
        mesh = result.mesh
        write_element_table(
            outdir / f"lambda2_level{level}_{mesh.nx}x{mesh.ny}.csv",
            mesh.centroids,
            {"lambda2": result.lambda2, "log10_lambda2": np.log10(result.lambda2)})
    final = cascade.final
    save_sample_store(outdir / "samples.npz", final)
    store = dict(np.load(outdir / "samples.npz"))
    write_summary(outdir, summarize_samples(store, cfg.q_lo, cfg.q_hi))


def cmd_invert(cfg: RunConfig) -> int:
    if not cfg.dataset:
        raise ValueError("invert requires a dataset directory (--dataset)")
    dataset, _ = load_dataset(cfg.dataset)
    status = EXIT_OK
    for rep in range(cfg.replicates):
        rng = np.random.default_rng(cfg.seed + rep)
        outdir = Path(cfg.outdir) if cfg.replicates == 1 \
            else Path(cfg.outdir) / f"rep{rep}"
        cascade = run_inversion(cfg, dataset, rng)
        write_inversion_outputs(outdir, cfg, cascade)
        if not all(r.trace.converged for r in cascade.results):
            status = EXIT_NON_CONVERGED
            logger.warning("iteration cap hit; partial outputs in %s", outdir)
    return status


def cmd_summarize(samples_path, outdir, q_lo: float, q_hi: float) -> int:
    store = dict(np.load(samples_path))
    write_summary(outdir, summarize_samples(store, q_lo, q_hi))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE_IO, f"{self.prog}: error: {message}\n")


def _add_override_args(parser):
    parser.add_argument("--config", help="flat key = value config file")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, default=None,
                            help=f"override config key {f.name}")


def _collect_overrides(args) -> dict:
    return {f.name: getattr(args, f.name) for f in fields(RunConfig)
            if getattr(args, f.name, None) is not None}


def main(argv=None) -> int:
    parser = _Parser(prog="elastobayes",
                     description="Bayesian identification of spatially-varying "
                                 "elastic moduli with model-discrepancy learning")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "invert"):
        p = sub.add_parser(name, parents=[], add_help=True)
        p.__class__ = _Parser
        _add_override_args(p)
    p_sum = sub.add_parser("summarize")
    p_sum.__class__ = _Parser
    p_sum.add_argument("--samples", required=True, help="samples.npz from invert")
    p_sum.add_argument("--outdir", default="out")
    p_sum.add_argument("--q-lo", type=float, default=0.05)
    p_sum.add_argument("--q-hi", type=float, default=0.95)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "summarize":
            return cmd_summarize(args.samples, args.outdir, args.q_lo, args.q_hi)
        file_values = read_config_file(args.config) if args.config else {}
        cfg = build_config(file_values, _collect_overrides(args))
        if args.command == "generate":
            return cmd_generate(cfg)
        return cmd_invert(cfg)
    except (OSError, ValueError) as exc:
        print(f"elastobayes: error: {exc}", file=sys.stderr)
        return EXIT_USAGE_IO


if __name__ == "__main__":
    sys.exit(main())
