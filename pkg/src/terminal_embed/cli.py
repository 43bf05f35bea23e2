"""Command-line tooling: temb build | embed | verify | bench.

Exit codes: 0 success, 1 verification failure, 2 I/O or format error,
3 internal cap exceeded.
"""

import contextlib
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import click
import numpy as np

from .config import Config
from .ellipsoid import DegenerateEllipsoidError
from .errors import CapExceededError, CertificationError, FormatError
from .io import dump_index, read_index, read_points, write_points
from .terminal import build_index

EXIT_OK, EXIT_VERIFY, EXIT_IO, EXIT_CAP = 0, 1, 2, 3


@contextlib.contextmanager
def _guard():
    try:
        yield
    except (FormatError, OSError, ValueError) as err:
        click.echo(f"error: {err}", err=True)
        sys.exit(EXIT_IO)
    except (CapExceededError, CertificationError, DegenerateEllipsoidError) as err:
        click.echo(f"cap exceeded: {err}", err=True)
        sys.exit(EXIT_CAP)


def _threads():
    raw = os.environ.get("TEMB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise click.BadParameter(f"TEMB_THREADS must be an integer, got {raw!r}") from None


def _make_config(config_path, eps, seed, backend, median_jl):
    cfg = Config.load(config_path) if config_path else Config()
    if backend:
        cfg = cfg.with_backend(backend)
    changes = {}
    if eps is not None:
        changes["eps"] = eps
    if seed is not None:
        changes["seed"] = seed
    if median_jl is not None:
        changes["median_jl"] = median_jl == "on"
    return cfg.replace(**changes)


def mixture(n, d, rng, centers=16, spread=3.0):
    """Gaussian mixture: unit-variance blobs around `centers` random means."""
    means = rng.standard_normal((centers, d)) * spread
    return means[rng.integers(0, centers, n)] + rng.standard_normal((n, d)), means


def embed_all(index, Q, seed, threads=1):
    """Embed every row of Q with per-query generators seeded [seed, i]."""
    def one(i):
        start = time.perf_counter()
        res = index.embed(Q[i], np.random.default_rng([seed, i]))
        return res, time.perf_counter() - start

    if threads > 1 and len(Q) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, range(len(Q))))
    return [one(i) for i in range(len(Q))]


def run_bench(sizes, cfg, queries, seed, dim=8):
    """Rows of (n, median probes per oracle call, median probes per query,
    median seconds per query) on synthetic mixtures."""
    rows = []
    for n in sizes:
        rng = np.random.default_rng([seed, n])
        X, means = mixture(n, dim, rng)
        index = build_index(X, cfg)
        Q = means[rng.integers(0, len(means), queries)] + rng.standard_normal((queries, dim))
        results = embed_all(index, Q, seed)
        per_call = [r.probes_per_call for r, _ in results]
        per_query = [r.probes for r, _ in results]
        times = [t for _, t in results]
        rows.append((n, float(np.median(per_call)), float(np.median(per_query)), float(np.median(times))))
    return rows


def fitted_exponent(sizes, values):
    """Least-squares slope of log(values) against log(sizes)."""
    x = np.log(np.asarray(sizes, dtype=float))
    y = np.log(np.maximum(np.asarray(values, dtype=float), 1e-300))
    return float(np.polyfit(x, y, 1)[0])


@click.group()
def cli():
    """Terminal embeddings of point sets."""


common_config = [
    click.option("--eps", type=float, default=None, help="Target distortion."),
    click.option("--seed", type=int, default=None, help="Build seed."),
    click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                 help="Flat key=value config file."),
    click.option("--backend", type=click.Choice(["trivial", "lsh"]), default=None),
    click.option("--median-jl", type=click.Choice(["on", "off"]), default=None),
]


def _with_config(f):
    for opt in reversed(common_config):
        f = opt(f)
    return f


@cli.command()
@click.option("--input", "input_path", required=True, type=click.Path(dir_okay=False))
@click.option("--output", "output_path", required=True, type=click.Path(dir_okay=False))
@_with_config
def build(input_path, output_path, eps, seed, config_path, backend, median_jl):
    """Build an index over a point file."""
    with _guard():
        cfg = _make_config(config_path, eps, seed, backend, median_jl)
        X = read_points(input_path)
        index = build_index(X, cfg)
        blob = dump_index(index)
        with open(output_path, "wb") as fh:
            fh.write(blob)
        tree = index.tree
        click.echo(f"points\t{X.shape[0]}\tunique\t{tree.n}\td\t{X.shape[1]}\tk\t{index.k}")
        click.echo(f"tree_nodes\t{len(tree.nodes)}\ttotal_size\t{tree.total_size}\tdepth\t{tree.depth}")
        click.echo(f"ladder_levels\t{index.multi.levels + 1}\tbytes\t{len(blob)}")


@cli.command()
@click.option("--input", "input_path", required=True, type=click.Path(dir_okay=False), help="Index file.")
@click.option("--queries", "queries_path", required=True, type=click.Path(dir_okay=False))
@click.option("--output", "output_path", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=0, help="Query seed.")
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None,
              help="Optional TSV of per-query probes, iterations and timing.")
def embed(input_path, queries_path, output_path, seed, report_path):
    """Embed query points with a built index."""
    with _guard():
        index = read_index(input_path)
        Q = read_points(queries_path, allow_empty=True)
        if len(Q) and Q.shape[1] != index.d:
            raise FormatError(f"queries have dimension {Q.shape[1]}, index expects {index.d}")
        results = embed_all(index, Q, seed, _threads())
        Z = np.array([r.z_q for r, _ in results]).reshape(len(results), index.k + 1)
        write_points(output_path, Z)
        if report_path:
            with open(report_path, "w", encoding="utf-8") as fh:
                fh.write("query\txhat\tprobes\toracle_calls\titerations\tseconds\n")
                for i, (r, t) in enumerate(results):
                    fh.write(f"{i}\t{r.xhat}\t{r.probes}\t{r.oracle_calls}\t{r.iterations}\t{t:.6f}\n")


@cli.command()
@click.option("--input", "input_path", required=True, type=click.Path(dir_okay=False), help="Index file.")
@click.option("--queries", "queries_path", required=True, type=click.Path(dir_okay=False))
@click.option("--embeddings", "embeddings_path", required=True, type=click.Path(dir_okay=False))
@click.option("--output", "output_path", type=click.Path(dir_okay=False), default=None,
              help="Report destination (default stdout).")
def verify(input_path, queries_path, embeddings_path, output_path):
    """Check embeddings against every terminal by brute force."""
    with _guard():
        index = read_index(input_path)
        Q = read_points(queries_path, allow_empty=True)
        Z = read_points(embeddings_path, allow_empty=True)
        if len(Q) != len(Z):
            raise FormatError(f"{len(Q)} queries but {len(Z)} embeddings")
        if len(Q) and (Q.shape[1] != index.d or Z.shape[1] != index.k + 1):
            raise FormatError("query or embedding dimension does not match the index")
        tol = index.cfg.eps_acc
        lines = ["query\txhat\tdist\tmax_over\tmax_under\tseconds"]
        failed = 0
        for i in range(len(Q)):
            start = time.perf_counter()
            dist = np.linalg.norm(index.X_input - Q[i], axis=1)
            xhat = int(np.argmin(dist))
            over, under = index.verify(Q[i], Z[i])
            failed += over > tol or under > tol
            lines.append(f"{i}\t{xhat}\t{dist[xhat]:.9g}\t{over:.6g}\t{under:.6g}\t{time.perf_counter() - start:.6f}")
        text = "\n".join(lines) + "\n"
        if output_path:
            with open(output_path, "w", encoding="utf-8") as fh:
                fh.write(text)
        else:
            click.echo(text, nl=False)
        click.echo(f"verified {len(Q)} queries, {failed} above eps_acc={tol}", err=True)
    sys.exit(EXIT_VERIFY if failed else EXIT_OK)


@cli.command()
@click.option("--sizes", required=True, help="Comma-separated ascending sizes.")
@click.option("--queries", type=int, default=200, help="Queries per size.")
@click.option("--dim", type=int, default=8)
@_with_config
def bench(sizes, queries, dim, eps, seed, config_path, backend, median_jl):
    """Probe counts on synthetic Gaussian mixtures, as TSV."""
    with _guard():
        try:
            ns = [int(s) for s in sizes.split(",") if s.strip()]
        except ValueError:
            raise FormatError(f"bad --sizes {sizes!r}") from None
        if ns != sorted(ns):
            raise FormatError("--sizes must be ascending")
        cfg = _make_config(config_path, eps, seed, backend, median_jl)
        click.echo("n\tmedian_probes_per_call\tmedian_probes_per_query\tmedian_seconds")
        rows = []
        for n in ns:
            row = run_bench([n], cfg, queries, cfg.seed, dim)[0]
            rows.append(row)
            click.echo(f"{row[0]}\t{row[1]:.1f}\t{row[2]:.1f}\t{row[3]:.4f}")
        if len(rows) > 1:
            slope = fitted_exponent([r[0] for r in rows], [r[1] for r in rows])
            click.echo(f"fitted log-log exponent of probes per call: {slope:.3f}", err=True)


def main():
    cli()


if __name__ == "__main__":
    main()
