"""Batch entry point: `pcmf {simulate,fit,evaluate,compare,deviance-curve}`.

Every run writes a `manifest.txt` (flat key=value) echoing the effective
configuration; `pcmf fit --manifest FILE` reruns a fit from it.
Exit codes: 0 success, 2 input error, 3 numerical failure.
"""

import argparse
import math
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from tabulate import tabulate

from torch_pcmf.counts import CountMatrix, read_matrix, write_matrix
from torch_pcmf.errors import InputError, NumericalError, PCMFError, PCMFWarning
from torch_pcmf.inference import (
    FitConfig,
    FittedModel,
    FitReport,
    fit,
    fit_sparse_reestimate,
    selection_prior,
)
from torch_pcmf.methods import METHODS, get_method
from torch_pcmf.metrics import Partition, adjusted_rand_index, kmeans, selection_accuracy
from torch_pcmf.model_core import LOG_EPS_RATE, ModelFamily, deviance_curve
from torch_pcmf.simulate import SimScenario, simulate
from torch_pcmf.utils import DTYPE

MANIFEST_NAME = "manifest.txt"
DEFAULT_FIT_DIR = "pcmf_fit"
COMPARE_COLUMNS = ["method", "dropout", "noise", "seed", "ari_u", "ari_v", "pct_dev", "runtime_s"]
FIX_SCALE_CHOICES = {"auto": None, "yes": True, "no": False}


@dataclass
class RunConfig:
    command: str = "fit"
    input: str = ""
    output: str = ""
    # fit
    family: str = "spcmf"
    K: int = 2
    seed: int = 0
    restarts: int = 5
    tol: float = 1e-5
    max_sweeps: int = 1000
    warmup_sweeps: int = 30
    tau: float = 0.5
    fix_scale: str = "auto"
    jobs: int = 1
    reestimate: bool = False
    filter_threshold: float = 0.2
    min_expression_fraction: float = 0.05
    # simulate
    n: int = 100
    m: int = 800
    K_true: int = 40
    groups: int = 3
    gene_groups: int = 2
    alpha_g: str = ""
    theta_u: float = 0.8
    theta_v: float = 0.8
    beta_rate: float = 80.0
    noise_prop: float = 0.4
    dropout: str = "0.5"
    concentration: float = 100.0
    format: str = "csv"
    # compare
    dropouts: str = "0.3,0.5,0.7,0.9"
    noise_props: str = "0.4"
    n_seeds: int = 10
    methods: str = "gap,zigap,spcmf,poisson-nmf,pca"
    kappa_cells: int = 0
    kappa_genes: int = 0

    def __post_init__(self):
        if self.family not in {family.value for family in ModelFamily}:
            raise InputError(f"Unknown family {self.family}")
        if self.fix_scale not in FIX_SCALE_CHOICES:
            raise InputError(f"fix_scale must be one of {sorted(FIX_SCALE_CHOICES)}")
        if self.format not in ("csv", "mtx"):
            raise InputError(f"Unknown output format {self.format}")
        for name in ("filter_threshold", "min_expression_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise InputError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        self.dropout_mean()
        for method in _split(self.methods):
            get_method(method)

    def dropout_mean(self) -> float | None:
        if self.dropout.lower() == "none":
            return None
        try:
            return float(self.dropout)
        except ValueError:
            raise InputError(f"dropout must be a probability or 'none', got {self.dropout}") from None

    def fit_config(self, seed: int | None = None) -> FitConfig:
        return FitConfig(
            K=self.K,
            family=ModelFamily(self.family),
            max_sweeps=self.max_sweeps,
            warmup_sweeps=self.warmup_sweeps,
            rel_tol=self.tol,
            n_restarts=self.restarts,
            tau=self.tau,
            rng_seed=self.seed if seed is None else seed,
            fix_scale=FIX_SCALE_CHOICES[self.fix_scale],
            n_jobs=self.jobs,
        )

    def scenario(self, **overrides) -> SimScenario:
        alpha_g = tuple(float(a) for a in _split(self.alpha_g)) or None
        settings = dict(
            n=self.n,
            m=self.m,
            K=self.K_true,
            N=self.groups,
            M=self.gene_groups,
            alpha_g=alpha_g,
            theta_u=self.theta_u,
            theta_v=self.theta_v,
            beta_rate=self.beta_rate,
            noise_prop_mean=self.noise_prop,
            dropout_mean=self.dropout_mean(),
            concentration=self.concentration,
            rng_seed=self.seed,
        )
        settings.update(overrides)
        return SimScenario(**settings)

    def to_manifest(self) -> str:
        return "".join(f"{key}={value}\n" for key, value in asdict(self).items())

    @classmethod
    def from_manifest(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            lines = path.read_text().splitlines()
        except OSError as e:
            raise InputError(f"Cannot read manifest {path}: {e}") from e
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in lines:
            if not line.strip():
                continue
            key, sep, text = line.partition("=")
            if not sep or key not in types:
                raise InputError(f"Unexpected manifest line in {path}: {line!r}")
            values[key] = _parse_value(types[key], text)
        return cls(**values)


def _parse_value(kind: type, text: str):
    if kind is bool:
        return text == "True"
    try:
        return kind(text)
    except ValueError:
        raise InputError(f"Invalid manifest value {text!r} for a {kind.__name__}") from None


def _split(text: str) -> list[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _write_manifest(config: RunConfig, directory: Path) -> None:
    (directory / MANIFEST_NAME).write_text(config.to_manifest())


def _output_dir(config: RunConfig) -> Path:
    if not config.output:
        raise InputError("An output directory is required (--out)")
    directory = Path(config.output)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InputError(f"Cannot create output directory {directory}: {e}") from e
    return directory


def _factor_frame(matrix: torch.Tensor, ids: list[str], id_name: str) -> pd.DataFrame:
    columns = [f"factor{k + 1}" for k in range(matrix.shape[1])]
    frame = pd.DataFrame(matrix.numpy(), index=ids, columns=columns)
    frame.index.name = id_name
    return frame


def _print_table(rows: list[tuple[str, object]]) -> None:
    print(tabulate(rows, tablefmt="simple"))


def cmd_simulate(config: RunConfig) -> None:
    directory = _output_dir(config)
    output = simulate(config.scenario())
    X = output.X
    write_matrix(X, directory / f"counts.{config.format}")
    pd.DataFrame({"cell": X.row_names, "label": output.cell_labels}).to_csv(
        directory / "cell_labels.csv", index=False
    )
    pd.DataFrame({"gene": X.col_names, "label": output.gene_labels}).to_csv(
        directory / "gene_labels.csv", index=False
    )
    _factor_frame(output.U_true, X.row_names, "cell").to_csv(directory / "U_true.csv")
    _factor_frame(output.V_true, X.col_names, "gene").to_csv(directory / "V_true.csv")
    pd.DataFrame({"gene": X.col_names, "pi_D": output.pi_D_true}).to_csv(
        directory / "pi_D.csv", index=False
    )
    _write_manifest(config, directory)

    zero_fraction = 1 - X.nnz / (X.n_rows * X.n_cols)
    _print_table(
        [
            ("cells", X.n_rows),
            ("genes", X.n_cols),
            ("informative genes", int(output.informative_genes.sum())),
            ("zero fraction", f"{zero_fraction:.3f}"),
            ("mean pi_D", f"{float(np.mean(output.pi_D_true)):.3f}"),
        ]
    )


def prefilter_genes(
    X: CountMatrix, filter_threshold: float, min_expression_fraction: float
) -> torch.Tensor:
    """Genes kept for fitting: expressed in at least `min_expression_fraction`
    of the cells, and with a selection prior above `filter_threshold` (when
    positive)."""
    keep = X.expressed_fraction() >= min_expression_fraction
    if filter_threshold > 0:
        prior, _ = selection_prior(X)
        keep &= prior > filter_threshold
    return keep


def _fit_model(
    X: CountMatrix, config: RunConfig
) -> tuple[FittedModel, FitReport, torch.Tensor, CountMatrix]:
    keep = prefilter_genes(X, config.filter_threshold, config.min_expression_fraction)
    if not bool(keep.any()):
        raise InputError("All genes were filtered out")
    kept = X.select_columns(keep) if not bool(keep.all()) else X
    fit_config = config.fit_config()
    if config.reestimate and fit_config.family is ModelFamily.SPARSE_ZI_GAP:
        model, report = fit_sparse_reestimate(kept, fit_config)
    else:
        model, report = fit(kept, fit_config)
    return model, report, keep, kept


def _expand_rows(values: torch.Tensor, keep: torch.Tensor, fill: float) -> torch.Tensor:
    full = torch.full((keep.numel(), values.shape[1]), fill, dtype=DTYPE)
    full[keep] = values
    return full


def cmd_fit(config: RunConfig) -> None:
    X = read_matrix(config.input)
    if not config.output:
        config = replace(config, output=DEFAULT_FIT_DIR)
    directory = _output_dir(config)
    model, report, keep, _ = _fit_model(X, config)

    _factor_frame(model.U, X.row_names, "cell").to_csv(directory / "U.csv")
    _factor_frame(model.log_U, X.row_names, "cell").to_csv(directory / "logU.csv")
    _factor_frame(_expand_rows(model.V, keep, 0.0), X.col_names, "gene").to_csv(
        directory / "V.csv"
    )
    _factor_frame(_expand_rows(model.log_V, keep, LOG_EPS_RATE), X.col_names, "gene").to_csv(
        directory / "logV.csv"
    )
    pd.DataFrame(
        {"sweep": range(1, len(report.elbo_trace) + 1), "elbo": report.elbo_trace}
    ).to_csv(directory / "elbo.csv", index=False)
    selected = torch.zeros(X.n_cols, dtype=torch.bool)
    selected[keep] = model.selected_genes
    pd.DataFrame(
        {"gene": X.col_names, "kept": keep.numpy(), "selected": selected.numpy()}
    ).to_csv(directory / "selection.csv", index=False)

    summary = {
        "family": config.family,
        "K": config.K,
        "restart": report.restart,
        "sweeps": report.sweeps,
        "converged": report.converged,
        "elbo": report.final_elbo,
        "pct_dev": report.explained_deviance,
        "worse_than_null": report.worse_than_null,
        "genes_kept": int(keep.sum()),
        "genes_selected": int(selected.sum()),
    }
    pd.DataFrame([summary]).to_csv(directory / "summary.csv", index=False)
    _write_manifest(config, directory)
    _print_table(list(summary.items()))


def _read_table(path: str | Path) -> pd.DataFrame:
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"Cannot read {path}: {e}") from e
    if frame.shape[1] < 2:
        raise InputError(f"{path} needs an identifier column and at least one value column")
    frame[frame.columns[0]] = frame[frame.columns[0]].astype(str)
    return frame


def align(embedding: pd.DataFrame, labels: pd.DataFrame) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates and labels of two tables sharing the same identifier order."""
    ids = embedding.iloc[:, 0].tolist()
    label_ids = labels.iloc[:, 0].tolist()
    if len(ids) != len(label_ids):
        raise InputError(f"Label length mismatch: {len(label_ids)} labels for {len(ids)} rows")
    if ids != label_ids:
        raise InputError("Embedding and labels list their identifiers in a different order")
    return embedding.iloc[:, 1:].to_numpy(dtype=np.float64), labels.iloc[:, 1].to_numpy()


def evaluate_embedding(
    coordinates: np.ndarray, truth: np.ndarray, kappa: int, rng: np.random.Generator
) -> float:
    if kappa == 0:
        kappa = len(np.unique(truth))
    return adjusted_rand_index(kmeans(coordinates, kappa, rng), Partition(truth))


def cmd_evaluate(config: RunConfig, args: argparse.Namespace) -> None:
    rng = np.random.default_rng(config.seed)
    row = {"ari_u": math.nan, "ari_v": math.nan, "pct_dev": math.nan, "selection_accuracy": math.nan}
    coordinates, truth = align(_read_table(args.embedding), _read_table(args.labels))
    row["ari_u"] = evaluate_embedding(coordinates, truth, config.kappa_cells, rng)
    if args.gene_embedding and args.gene_labels:
        gene_coordinates, gene_truth = align(
            _read_table(args.gene_embedding), _read_table(args.gene_labels)
        )
        row["ari_v"] = evaluate_embedding(gene_coordinates, gene_truth, config.kappa_genes, rng)
        if args.selection:
            selection = _read_table(args.selection)
            selected, gene_truth = align(
                selection[[selection.columns[0], "selected"]], _read_table(args.gene_labels)
            )
            row["selection_accuracy"] = selection_accuracy(selected[:, 0] > 0, gene_truth != 0)
    if args.summary:
        row["pct_dev"] = float(_read_table(args.summary)["pct_dev"].iloc[0])

    output = Path(config.output) if config.output else Path("report.csv")
    try:
        pd.DataFrame([row]).to_csv(output, index=False)
    except OSError as e:
        raise InputError(f"Cannot write {output}: {e}") from e
    _print_table(list(row.items()))


def run_grid_cell(
    config: RunConfig, dropout: float | None, noise: float, seed: int
) -> list[dict]:
    """Simulate one scenario and score every requested method on it.

    A method that fails gets NaN metrics and its error message under "error".
    """
    scenario = config.scenario(dropout_mean=dropout, noise_prop_mean=noise, rng_seed=seed)
    output = simulate(scenario)
    kappa_cells = config.kappa_cells or scenario.N
    kappa_genes = config.kappa_genes or scenario.M + (1 if noise > 0 else 0)
    fit_config = replace(config.fit_config(seed), n_jobs=1)
    rows = []
    for name in _split(config.methods):
        rng = np.random.default_rng(seed)
        start = time.perf_counter()
        row = {
            "method": name,
            "dropout": "none" if dropout is None else dropout,
            "noise": noise,
            "seed": seed,
            "error": None,
        }
        try:
            result = get_method(name)(output.X, fit_config)
            row["ari_u"] = evaluate_embedding(
                result.cell_embedding.numpy(), output.cell_labels, kappa_cells, rng
            )
            row["ari_v"] = evaluate_embedding(
                result.gene_embedding.numpy(), output.gene_labels, kappa_genes, rng
            )
            row["pct_dev"] = result.pct_dev
        except PCMFError as e:
            warnings.warn(
                f"{name} failed on dropout={dropout} noise={noise} seed={seed}: {e}", PCMFWarning
            )
            row.update(ari_u=math.nan, ari_v=math.nan, pct_dev=math.nan, error=str(e))
        row["runtime_s"] = time.perf_counter() - start
        rows.append(row)
    return rows


def cmd_compare(config: RunConfig) -> pd.DataFrame:
    dropouts = [
        None if value.lower() == "none" else float(value) for value in _split(config.dropouts)
    ]
    noise_props = [float(value) for value in _split(config.noise_props)]
    seeds = [config.seed + i for i in range(config.n_seeds)]
    cells = [(d, p, s) for d in dropouts for p in noise_props for s in seeds]
    if not cells:
        raise InputError("The comparison grid is empty")

    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            batches = list(pool.map(run_grid_cell, *zip(*[(config, *cell) for cell in cells])))
    else:
        batches = [run_grid_cell(config, *cell) for cell in cells]

    order = {name: i for i, name in enumerate(_split(config.methods))}
    rows = sorted(
        (row for batch in batches for row in batch),
        key=lambda row: (str(row["dropout"]), row["noise"], row["seed"], order[row["method"]]),
    )
    table = pd.DataFrame(rows, columns=COMPARE_COLUMNS)
    if config.output:
        output = Path(config.output)
        try:
            table.to_csv(output, index=False)
        except OSError as e:
            raise InputError(f"Cannot write {output}: {e}") from e
        (output.parent / MANIFEST_NAME).write_text(config.to_manifest())
    medians = table.groupby(["method", "dropout", "noise"], sort=False)[
        ["ari_u", "ari_v", "pct_dev"]
    ].median()
    print(tabulate(medians, headers="keys", floatfmt=".3f"))
    failed = [row for row in rows if row["error"]]
    if failed:
        warnings.warn(
            f"{len(failed)} of {len(rows)} runs failed, their metrics are NaN", PCMFWarning
        )
        columns = ["method", "dropout", "noise", "seed", "error"]
        print(tabulate([[row[key] for key in columns] for row in failed], headers=columns))
    return table


def cmd_deviance_curve(config: RunConfig) -> None:
    X = read_matrix(config.input)
    model, _, _, kept = _fit_model(X, config)
    curve = deviance_curve(model.factors(), kept)
    frame = pd.DataFrame({"k": range(1, len(curve) + 1), "deviance": curve})
    if config.output:
        try:
            frame.to_csv(config.output, index=False)
        except OSError as e:
            raise InputError(f"Cannot write {config.output}: {e}") from e
    print(tabulate(frame, headers="keys", showindex=False))


def _add_fit_arguments(parser: argparse.ArgumentParser) -> None:
    defaults = RunConfig()
    parser.add_argument("--family", choices=[f.value for f in ModelFamily], default=defaults.family)
    parser.add_argument("--k", dest="K", type=int, default=defaults.K)
    parser.add_argument("--seed", type=int, default=defaults.seed)
    parser.add_argument("--restarts", type=int, default=defaults.restarts)
    parser.add_argument("--tol", type=float, default=defaults.tol)
    parser.add_argument("--max-sweeps", type=int, default=defaults.max_sweeps)
    parser.add_argument(
        "--warmup-sweeps",
        type=int,
        default=defaults.warmup_sweeps,
        help="Sweeps with every gene selected before the sparse layer starts.",
    )
    parser.add_argument("--tau", type=float, default=defaults.tau)
    parser.add_argument("--fix-scale", choices=sorted(FIX_SCALE_CHOICES), default=defaults.fix_scale)
    parser.add_argument("--jobs", type=int, default=defaults.jobs)
    parser.add_argument(
        "--reestimate",
        action="store_true",
        help="Refit the zero-inflated model on the genes selected by the sparse model.",
    )
    parser.add_argument("--filter-threshold", type=float, default=defaults.filter_threshold)
    parser.add_argument(
        "--min-expr-frac",
        dest="min_expression_fraction",
        type=float,
        default=defaults.min_expression_fraction,
    )


def _add_scenario_arguments(parser: argparse.ArgumentParser) -> None:
    defaults = RunConfig()
    parser.add_argument("--n", type=int, default=defaults.n)
    parser.add_argument("--m", type=int, default=defaults.m)
    parser.add_argument("--k-true", dest="K_true", type=int, default=defaults.K_true)
    parser.add_argument("--groups", type=int, default=defaults.groups)
    parser.add_argument("--gene-groups", type=int, default=defaults.gene_groups)
    parser.add_argument(
        "--alpha-g", default=defaults.alpha_g, help="Comma separated group rates, random if empty."
    )
    parser.add_argument("--theta-u", type=float, default=defaults.theta_u)
    parser.add_argument("--theta-v", type=float, default=defaults.theta_v)
    parser.add_argument("--beta-rate", type=float, default=defaults.beta_rate)
    parser.add_argument("--noise-prop", type=float, default=defaults.noise_prop)
    parser.add_argument("--dropout", default=defaults.dropout, help="Mean of pi_D, or 'none'.")
    parser.add_argument("--concentration", type=float, default=defaults.concentration)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcmf", description="Sparse zero-inflated Gamma-Poisson factor models for count data."
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    sim = subparsers.add_parser("simulate", help="Generate a synthetic count matrix.")
    sim.add_argument("--out", dest="output", required=True)
    sim.add_argument("--format", choices=["csv", "mtx"], default="csv")
    sim.add_argument("--seed", type=int, default=RunConfig.seed)
    _add_scenario_arguments(sim)

    fit_parser = subparsers.add_parser("fit", help="Fit a factor model to a count matrix.")
    fit_parser.add_argument("input", nargs="?", default="")
    fit_parser.add_argument(
        "--out", dest="output", default="", help=f"Output directory, ./{DEFAULT_FIT_DIR} by default."
    )
    fit_parser.add_argument("--manifest", default="", help="Rerun the fit described by a manifest.")
    _add_fit_arguments(fit_parser)

    evaluate = subparsers.add_parser("evaluate", help="Score an embedding against known labels.")
    evaluate.add_argument("--embedding", required=True)
    evaluate.add_argument("--labels", required=True)
    evaluate.add_argument("--gene-embedding", default="")
    evaluate.add_argument("--gene-labels", default="")
    evaluate.add_argument("--selection", default="")
    evaluate.add_argument("--summary", default="", help="summary.csv of the fit, for pct_dev.")
    evaluate.add_argument("--kappa-cells", type=int, default=0)
    evaluate.add_argument("--kappa-genes", type=int, default=0)
    evaluate.add_argument("--seed", type=int, default=RunConfig.seed)
    evaluate.add_argument("--out", dest="output", default="report.csv")

    compare = subparsers.add_parser("compare", help="Run every method on a simulation grid.")
    compare.add_argument("--out", dest="output", default="")
    compare.add_argument("--dropouts", default=RunConfig.dropouts)
    compare.add_argument("--noise-props", default=RunConfig.noise_props)
    compare.add_argument("--n-seeds", type=int, default=RunConfig.n_seeds)
    compare.add_argument("--methods", default=RunConfig.methods, help=f"Among {', '.join(sorted(METHODS))}.")
    compare.add_argument("--kappa-cells", type=int, default=0)
    compare.add_argument("--kappa-genes", type=int, default=0)
    _add_fit_arguments(compare)
    _add_scenario_arguments(compare)

    curve = subparsers.add_parser("deviance-curve", help="Cumulative deviance of ordered factors.")
    curve.add_argument("input")
    curve.add_argument("--out", dest="output", default="")
    _add_fit_arguments(curve)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    names = {f.name for f in fields(RunConfig)}
    values = {key: value for key, value in vars(args).items() if key in names}
    if getattr(args, "manifest", ""):
        config = RunConfig.from_manifest(args.manifest)
        return replace(config, output=args.output or config.output)
    return RunConfig(**values)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = config_from_args(args)
        if config.command == "fit" and not config.input:
            raise InputError("fit needs an input matrix or --manifest")
        if config.command == "simulate":
            cmd_simulate(config)
        elif config.command == "fit":
            cmd_fit(config)
        elif config.command == "evaluate":
            cmd_evaluate(config, args)
        elif config.command == "compare":
            cmd_compare(config)
        elif config.command == "deviance-curve":
            cmd_deviance_curve(config)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
