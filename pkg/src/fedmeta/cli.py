"""Batch experiment runner.

Subcommands: generate | train | adapt | attack | analyze.  Every command
reads an optional JSON config (--config), applies flag overrides, and
writes its artifacts plus a manifest embedding the fully resolved
configuration and input hashes, so identical manifests reproduce identical
CSV bytes.

Exit codes: 0 success, 2 config error, 3 divergence, 4 I/O error.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import analysis, data, federation, robust
from .federation import DivergenceError, FedConfig
from .model import LossSpec, Params
from .robust import RobustConfig

EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

DATA_DIR_ENV = "FEDMETA_DATA_DIR"


def _fmt(x) -> str:
    """Diff-stable cell format: 9 significant digits, period decimal."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float):
        return f"{x:.9g}"
    return str(x)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _resolve_path(p: str) -> Path:
    path = Path(p)
    if not path.is_absolute():
        base = os.environ.get(DATA_DIR_ENV)
        if base and not path.exists():
            return Path(base) / path
    return path


def _load_config(config_path) -> dict:
    if config_path is None:
        return {}
    try:
        with open(config_path) as fh:
            return json.load(fh)
    except OSError as e:
        raise click.ClickException(f"cannot read config {config_path}: {e}")
    except json.JSONDecodeError as e:
        _fail_config(f"malformed config {config_path}: {e}")


def _fail_config(msg: str):
    click.echo(f"config error: {msg}", err=True)
    sys.exit(EXIT_CONFIG)


def _fail_io(msg: str):
    click.echo(f"i/o error: {msg}", err=True)
    sys.exit(EXIT_IO)


def _fed_config(cfg: dict, seed_override=None) -> FedConfig:
    fed = dict(cfg.get("fed", {}))
    if seed_override is not None:
        fed["seed"] = seed_override
    elif "seed" in cfg:
        fed.setdefault("seed", cfg["seed"])
    try:
        return FedConfig(**fed)
    except (TypeError, ValueError) as e:
        _fail_config(str(e))


def _robust_config(cfg: dict) -> RobustConfig:
    rb = dict(cfg.get("robust", {}))
    clip = rb.get("clip")
    if clip is not None:
        rb["clip"] = (float(clip[0]), float(clip[1]))
    try:
        return RobustConfig(**rb)
    except (TypeError, ValueError) as e:
        _fail_config(str(e))


def _loss_spec(cfg: dict) -> LossSpec:
    try:
        return LossSpec(**cfg.get("loss", {}))
    except (TypeError, ValueError) as e:
        _fail_config(str(e))


def _out_dir(out) -> Path:
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        _fail_io(f"cannot create output directory {path}: {e}")
    return path


def _write_manifest(out_dir: Path, resolved: dict, outputs: list[str]) -> None:
    manifest = {"resolved_config": resolved, "outputs": sorted(outputs)}
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)


def _save_params(path, params: Params) -> None:
    obj = {
        "schema": "fedmeta-params-v1",
        "num_classes": params.num_classes,
        "feature_dim": params.feature_dim,
        "values": [float(v) for v in params.values],
    }
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"))


def _load_params(path) -> Params:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except OSError as e:
        _fail_io(str(e))
    if obj.get("schema") != "fedmeta-params-v1":
        _fail_config(f"not a params file: {path}")
    return Params(np.array(obj["values"]), obj["num_classes"], obj["feature_dim"])


def _load_federation(path) -> data.Federation:
    path = _resolve_path(path)
    try:
        return data.load_federation(path)
    except OSError as e:
        _fail_io(str(e))
    except ValueError as e:
        _fail_io(str(e))


@click.group()
def main():
    """Federated meta-learning laboratory."""


@main.command()
@click.option("--config", type=click.Path(), default=None, help="JSON config file.")
@click.option("--dataset", type=click.Choice(["synthetic", "mnist"]), default=None)
@click.option("--alpha-tilde", type=float, default=None)
@click.option("--beta-tilde", type=float, default=None)
@click.option("--nodes", type=int, default=None)
@click.option("--images", type=click.Path(), default=None, help="MNIST IDX images file.")
@click.option("--labels", type=click.Path(), default=None, help="MNIST IDX labels file.")
@click.option("--k", type=int, default=None, help="Train samples per node.")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), required=True)
def generate(config, dataset, alpha_tilde, beta_tilde, nodes, images, labels, k, seed, out):
    """Build a federation file and print its size statistics."""
    cfg = _load_config(config)
    ds = dict(cfg.get("dataset", {}))
    if dataset:
        ds["kind"] = dataset
    for key, val in [
        ("alpha_tilde", alpha_tilde),
        ("beta_tilde", beta_tilde),
        ("num_nodes", nodes),
        ("images", images),
        ("labels", labels),
    ]:
        if val is not None:
            ds[key] = val
    if seed is None:
        seed = cfg.get("seed", 0)
    size_kw = dict(cfg.get("size_spec", {}))
    if k is not None:
        size_kw["k_train"] = k

    kind = ds.get("kind")
    out_dir = _out_dir(out)
    if kind == "synthetic":
        spec = data.SizeSpec.synthetic_default(**size_kw)
        try:
            fed = data.gen_synthetic(
                float(ds.get("alpha_tilde", 0.0)),
                float(ds.get("beta_tilde", 0.0)),
                int(ds.get("num_nodes", 50)),
                int(seed),
                spec,
            )
        except ValueError as e:
            _fail_config(str(e))
    elif kind == "mnist":
        if "images" not in ds or "labels" not in ds:
            _fail_config("mnist dataset needs --images and --labels")
        spec = data.SizeSpec.mnist_default(**size_kw)
        try:
            samples = data.load_mnist_idx(
                _resolve_path(ds["images"]), _resolve_path(ds["labels"])
            )
        except OSError as e:
            _fail_io(str(e))
        except ValueError as e:
            _fail_io(str(e))
        try:
            fed = data.partition_mnist(samples, int(ds.get("num_nodes", 100)), int(seed), spec)
        except ValueError as e:
            _fail_config(str(e))
    else:
        _fail_config("dataset kind must be 'synthetic' or 'mnist'")

    fed_path = out_dir / "federation.json"
    data.save_federation(fed, fed_path)

    sizes = np.array([n.size for n in fed.sources + fed.targets])
    click.echo(
        f"nodes={len(sizes)} sources={len(fed.sources)} targets={len(fed.targets)} "
        f"mean={sizes.mean():.2f} stdev={sizes.std():.2f}"
    )
    resolved = {
        "command": "generate",
        "dataset": ds,
        "seed": int(seed),
        "size_spec": size_kw,
        "stats": {"mean": float(sizes.mean()), "stdev": float(sizes.std())},
    }
    _write_manifest(out_dir, resolved, ["federation.json"])


ALGORITHMS = ("fedml", "fedavg", "robust-fedml")


@main.command()
@click.option("--config", type=click.Path(), default=None)
@click.option("--dataset-file", type=click.Path(), required=True)
@click.option("--algorithm", type=click.Choice(ALGORITHMS), default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--beta", type=float, default=None)
@click.option("--total-steps", type=int, default=None)
@click.option("--local-steps", type=int, default=None)
@click.option("--lam", type=float, default=None, help="Robust transport penalty.")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), required=True)
def train(config, dataset_file, algorithm, alpha, beta, total_steps, local_steps, lam, seed, out):
    """Run the selected algorithm; emit rounds.csv, params.json, manifest.json."""
    cfg = _load_config(config)
    algorithm = algorithm or cfg.get("algorithm", "fedml")
    if algorithm not in ALGORITHMS:
        _fail_config(f"unknown algorithm {algorithm!r}")
    fed_over = dict(cfg.get("fed", {}))
    for key, val in [
        ("alpha", alpha),
        ("beta", beta),
        ("total_steps", total_steps),
        ("local_steps", local_steps),
    ]:
        if val is not None:
            fed_over[key] = val
    cfg = {**cfg, "fed": fed_over}
    fc = _fed_config(cfg, seed_override=seed)
    spec = _loss_spec(cfg)
    fed = _load_federation(dataset_file)
    out_dir = _out_dir(out)

    rc = None
    if algorithm == "robust-fedml":
        if lam is not None:
            cfg.setdefault("robust", {})
            cfg["robust"]["lam"] = lam
        rc = _robust_config(cfg)

    start = time.perf_counter()
    try:
        if algorithm == "fedml":
            params, logs = federation.run_fedml(fed, fc, spec)
        elif algorithm == "fedavg":
            params, logs = federation.run_fedavg(fed, fc, spec)
        else:
            params, logs = robust.run_robust_fedml(fed, fc, rc, spec)
    except DivergenceError as e:
        click.echo(f"divergence: {e}", err=True)
        sys.exit(EXIT_DIVERGED)
    elapsed = time.perf_counter() - start

    header = ["t", "comm_round", "global_loss", "min_node_loss", "max_node_loss", "wall_ms"]
    robust_cols = algorithm == "robust-fedml"
    if robust_cols:
        header += ["clean_loss", "adv_loss", "clean_acc", "adv_acc", "adv_set_size"]
    rows = []
    for lg in logs:
        # wall_ms is reported on stderr instead; the CSV must be
        # byte-reproducible across reruns of the same manifest
        row = [
            lg.t,
            lg.comm_round,
            lg.global_loss,
            float(lg.node_losses.min()),
            float(lg.node_losses.max()),
            0,
        ]
        if robust_cols:
            row += [lg.clean_loss, lg.adv_loss, lg.clean_acc, lg.adv_acc, lg.adv_set_size]
        rows.append(row)
    write_csv(out_dir / "rounds.csv", header, rows)
    _save_params(out_dir / "params.json", params)

    resolved = {
        "command": "train",
        "algorithm": algorithm,
        "fed": fc.__dict__,
        "loss": spec.__dict__,
        "robust": rc.__dict__ if rc else None,
        "dataset_sha256": _sha256(_resolve_path(dataset_file)),
    }
    _write_manifest(out_dir, resolved, ["rounds.csv", "params.json"])
    click.echo(
        f"{algorithm}: T={fc.total_steps} final_loss={logs[-1].global_loss:.6g} "
        f"({elapsed:.1f}s)",
        err=True,
    )


@main.command()
@click.option("--params", "params_file", type=click.Path(), required=True)
@click.option("--dataset-file", type=click.Path(), required=True)
@click.option("--steps", type=int, default=5, show_default=True)
@click.option("--k", type=int, default=None, help="Adaptation samples (default: the split K).")
@click.option("--rate", type=float, default=None, help="Adaptation rate (default: fed.alpha).")
@click.option("--config", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), required=True)
def adapt(params_file, dataset_file, steps, k, rate, config, out):
    """Per-target adaptation curves: test loss/accuracy after 0..steps updates."""
    cfg = _load_config(config)
    fc = _fed_config(cfg)
    spec = _loss_spec(cfg)
    rate = rate if rate is not None else fc.alpha
    params = _load_params(params_file)
    fed = _load_federation(dataset_file)
    if not fed.targets:
        _fail_config("dataset has no target nodes")
    out_dir = _out_dir(out)

    rows = []
    curves = np.zeros((steps + 1, 3))
    for node in fed.targets:
        use = node
        if k is not None:
            if k < 1 or k > len(node.train):
                _fail_config(f"k={k} outside 1..{len(node.train)} for node {node.node_id}")
            use = data.NodeData(node.node_id, node.train[:k], node.test)
        for s in range(steps + 1):
            adapted = federation.fast_adapt(params, use, rate, s, spec)
            train_loss = federation.evaluate(adapted, use.train, spec)[0]
            test_loss, test_acc = federation.evaluate(adapted, use.test, spec)
            rows.append([str(node.node_id), s, train_loss, test_loss, test_acc])
            curves[s] += [train_loss, test_loss, test_acc]
    curves /= len(fed.targets)
    for s in range(steps + 1):
        rows.append(["mean", s, curves[s][0], curves[s][1], curves[s][2]])
    write_csv(
        out_dir / "adaptation.csv",
        ["target", "step", "train_loss", "test_loss", "test_acc"],
        rows,
    )
    resolved = {
        "command": "adapt",
        "steps": steps,
        "k": k,
        "rate": rate,
        "fed": fc.__dict__,
        "loss": spec.__dict__,
        "params_sha256": _sha256(params_file),
        "dataset_sha256": _sha256(_resolve_path(dataset_file)),
    }
    _write_manifest(out_dir, resolved, ["adaptation.csv"])
    click.echo(f"adaptation over {len(fed.targets)} targets -> {out_dir/'adaptation.csv'}", err=True)


@main.command()
@click.option("--params", "params_file", type=click.Path(), required=True)
@click.option("--dataset-file", type=click.Path(), required=True)
@click.option("--xi", "xi_list", type=str, default="0,0.1,0.2,0.3", show_default=True)
@click.option("--adapt-steps", type=int, default=1, show_default=True)
@click.option("--clip", type=(float, float), default=None, help="Feature box, e.g. 0 1.")
@click.option("--config", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), required=True)
def attack(params_file, dataset_file, xi_list, adapt_steps, clip, config, out):
    """Clean vs FGSM-attacked evaluation after adaptation, per (target, xi)."""
    cfg = _load_config(config)
    fc = _fed_config(cfg)
    spec = _loss_spec(cfg)
    params = _load_params(params_file)
    fed = _load_federation(dataset_file)
    if not fed.targets:
        _fail_config("dataset has no target nodes")
    try:
        xis = [float(v) for v in xi_list.split(",") if v.strip()]
    except ValueError:
        _fail_config(f"bad --xi list: {xi_list!r}")
    out_dir = _out_dir(out)

    rows = []
    for node in fed.targets:
        adapted = federation.fast_adapt(params, node, fc.alpha, adapt_steps, spec)
        clean_loss, clean_acc = federation.evaluate(adapted, node.test, spec)
        for xi in xis:
            attacked = robust.fgsm_attack(adapted, node.test, xi, spec, clip=clip)
            adv_loss, adv_acc = federation.evaluate(adapted, attacked, spec)
            rows.append([node.node_id, xi, clean_loss, clean_acc, adv_loss, adv_acc])
    write_csv(
        out_dir / "robustness.csv",
        ["target", "xi", "clean_loss", "clean_acc", "adv_loss", "adv_acc"],
        rows,
    )
    resolved = {
        "command": "attack",
        "xi": xis,
        "adapt_steps": adapt_steps,
        "clip": list(clip) if clip else None,
        "fed": fc.__dict__,
        "loss": spec.__dict__,
        "params_sha256": _sha256(params_file),
        "dataset_sha256": _sha256(_resolve_path(dataset_file)),
    }
    _write_manifest(out_dir, resolved, ["robustness.csv"])
    click.echo(f"attack grid over {len(fed.targets)} targets -> {out_dir/'robustness.csv'}", err=True)


@main.command()
@click.option("--dataset-file", type=click.Path(), required=True)
@click.option("--config", type=click.Path(), default=None)
@click.option("--probe-pairs", type=int, default=200, show_default=True)
@click.option("--radius", type=float, default=10.0, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), required=True)
def analyze(dataset_file, config, probe_pairs, radius, seed, out):
    """Estimate constants, fit C, and compare the contraction bound with the
    measured optimality gap."""
    cfg = _load_config(config)
    fc = _fed_config(cfg, seed_override=seed)
    spec = _loss_spec(cfg)
    fed = _load_federation(dataset_file)
    out_dir = _out_dir(out)

    report = analysis.estimate_constants(
        fed, spec, num_probe_pairs=probe_pairs, radius=radius, seed=fc.seed
    )
    t1 = analysis.theorem1_gap(fed, report, spec, alpha=fc.alpha, probes=max(50, probe_pairs // 2), seed=fc.seed)
    report = analysis.derive_rates(report, fc.alpha, fc.beta, C=t1.C)

    report_path = out_dir / "constants_report.json"
    with open(report_path, "w") as fh:
        json.dump(report.to_json_dict(), fh, sort_keys=True, indent=2)

    if not (report.mu_prime > 0 and 0 < report.xi < 1):
        cap = analysis.alpha_cap(report)
        click.echo(
            "learning-rate caps violated for these estimated constants:\n"
            f"  mu'={report.mu_prime:.6g} xi={report.xi:.6g}\n"
            f"  mu={report.mu:.6g} H={report.H:.6g} rho={report.rho:.6g} B={report.B:.6g}\n"
            f"  advice: choose alpha <= {cap:.6g} "
            f"(current alpha={fc.alpha:.6g}); report written to {report_path}",
            err=True,
        )
        sys.exit(EXIT_CONFIG)

    try:
        trace = analysis.empirical_convergence_gap(fed, fc, spec)
    except DivergenceError as e:
        click.echo(f"divergence: {e}", err=True)
        sys.exit(EXIT_DIVERGED)
    except RuntimeError as e:
        click.echo(f"divergence: {e}", err=True)
        sys.exit(EXIT_DIVERGED)
    curve = analysis.theorem2_bound_curve(report, trace.g0 - trace.g_star, fc)

    rows = [
        [t, float(gap), float(bound)]
        for (t, gap), (_, bound) in zip(zip(trace.ts, trace.gaps), curve)
    ]
    write_csv(out_dir / "bound_vs_empirical.csv", ["t", "empirical_gap", "bound"], rows)

    resolved = {
        "command": "analyze",
        "fed": fc.__dict__,
        "loss": spec.__dict__,
        "probe_pairs": probe_pairs,
        "radius": radius,
        "dataset_sha256": _sha256(_resolve_path(dataset_file)),
    }
    _write_manifest(out_dir, resolved, ["constants_report.json", "bound_vs_empirical.csv"])
    sound = all(g <= b + 1e-12 for _, g, b in rows)
    click.echo(
        f"xi={report.xi:.6g} bound {'dominates' if sound else 'VIOLATED by'} the "
        f"empirical gap at {len(rows)} aggregation points",
        err=True,
    )
    if not sound:
        sys.exit(1)


if __name__ == "__main__":
    main()
