"""Command-line surface: synth, build-bank, score, eval, scale-study,
verify-theory.

Every command is deterministic given (inputs, seed, config) and independent
of the worker count. Exit codes: 0 success, 2 validation error, 3 contract
violation, 1 anything else. Flag precedence: CLI flags > --config file >
built-in defaults.
"""

from __future__ import annotations

import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click

from .anomaly_map import render_heatmap, save_result, load_result
from .errors import ContractViolation, RadError, ValidationError
from .manifest import read_manifest, write_dataset
from .memory_bank import (
    ScalingProtocol,
    build_bank,
    load_bank,
    save_bank,
    subsample_bank,
)
from .metrics import GroundTruthEntry, evaluate
from .retrieval import RetrievalConfig, score_image
from .synthetic import SynthSpec, generate_synthetic_dataset
from .theory import require_all_passed, run_all_checks

DEFAULTS = {
    "layers": (4, 7, 10, 12),
    "weights": None,
    "topk": 150,
    "rho": 1,
    "pooling_fraction": 0.01,
    "output_resolution": (448, 448),
    "smoothing_sigma": 0.0,
}


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.replace(" ", "").split(",") if tok)


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.replace(" ", "").split(",") if tok)


def _parse_pair(text: str) -> tuple[int, int]:
    parts = text.lower().replace("x", ",").split(",")
    if len(parts) != 2:
        raise ValidationError(f"expected HxW, got {text!r}")
    return int(parts[0]), int(parts[1])


def _resolve_config(
    config_path: str | None,
    layers: str | None,
    weights: str | None,
    topk: int | None,
    rho: int | None,
    pool_frac: float | None,
    output_res: str | None,
) -> RetrievalConfig:
    resolved = dict(DEFAULTS)
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            try:
                file_cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"config file is not valid JSON: {exc}") from exc
        for key in resolved:
            if key in file_cfg and file_cfg[key] is not None:
                value = file_cfg[key]
                if key in ("layers", "output_resolution"):
                    value = tuple(int(v) for v in value)
                elif key == "weights":
                    value = tuple(float(v) for v in value)
                resolved[key] = value
    if layers is not None:
        resolved["layers"] = _parse_ints(layers)
    if weights is not None:
        resolved["weights"] = _parse_floats(weights)
    if topk is not None:
        resolved["topk"] = topk
    if rho is not None:
        resolved["rho"] = rho
    if pool_frac is not None:
        resolved["pooling_fraction"] = pool_frac
    if output_res is not None:
        resolved["output_resolution"] = _parse_pair(output_res)
    config = RetrievalConfig(**resolved)
    config.validate()
    return config


def _protocol_from_flags(mode, tau, shots, base_categories, target_category, seed):
    if mode is None:
        return None
    protocol = ScalingProtocol(
        mode=mode,
        tau=tau if tau is not None else 1.0,
        shots=shots if shots is not None else 1,
        base_categories=tuple(base_categories.split(",")) if base_categories else (),
        target_category=target_category,
        seed=seed,
    )
    protocol.validate()
    return protocol


@click.group()
def cli() -> None:
    """Training-free anomaly detection by memory-bank retrieval."""


@cli.command("synth")
@click.option("--out", required=True, type=click.Path())
@click.option("--categories", default=3, show_default=True)
@click.option("--train", "train_per_category", default=20, show_default=True)
@click.option("--test", "test_per_category", default=10, show_default=True)
@click.option("--grid", default="8x8", show_default=True)
@click.option("--layers", default="4,7", show_default=True)
@click.option("--dim", default=16, show_default=True, help="patch embedding dim")
@click.option("--global-dim", default=16, show_default=True)
@click.option("--anomaly-fraction", default=0.5, show_default=True)
@click.option("--anomaly-patches", default=4, show_default=True)
@click.option("--margin", default=0.8, show_default=True)
@click.option("--jitter", default=0.1, show_default=True)
@click.option("--anomaly-ceiling", default=None, type=float)
@click.option("--resolution", default="96x96", show_default=True)
@click.option("--seed", default=0, show_default=True)
def cmd_synth(
    out,
    categories,
    train_per_category,
    test_per_category,
    grid,
    layers,
    dim,
    global_dim,
    anomaly_fraction,
    anomaly_patches,
    margin,
    jitter,
    anomaly_ceiling,
    resolution,
    seed,
) -> None:
    """Generate a synthetic feature dataset (packs + masks + manifest)."""
    spec = SynthSpec(
        categories=categories,
        train_per_category=train_per_category,
        test_per_category=test_per_category,
        grid=_parse_pair(grid),
        layer_dims={lid: dim for lid in _parse_ints(layers)},
        global_dim=global_dim,
        anomaly_fraction=anomaly_fraction,
        anomaly_patches=anomaly_patches,
        margin=margin,
        jitter=jitter,
        anomaly_ceiling=anomaly_ceiling,
        source_resolution=_parse_pair(resolution),
    )
    train_packs, test_packs, masks = generate_synthetic_dataset(spec, seed)
    manifest_path = write_dataset(out, train_packs + test_packs, masks)
    click.echo(
        f"wrote {len(train_packs)} train + {len(test_packs)} test packs -> {manifest_path}"
    )


@cli.command("build-bank")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--layers", default=None)
@click.option("--mode", default=None, type=click.Choice(
    ["single_class", "multi_class", "incremental_class", "few_shot"]))
@click.option("--tau", default=None, type=float)
@click.option("--shots", default=None, type=int)
@click.option("--base-categories", default=None)
@click.option("--target-category", default=None)
@click.option("--seed", default=0, show_default=True)
def cmd_build_bank(
    manifest_path, out, layers, mode, tau, shots, base_categories, target_category, seed
) -> None:
    """Build the anomaly-free memory bank from a manifest's train split."""
    dataset = read_manifest(manifest_path)
    packs = dataset.load_packs("train")
    protocol = _protocol_from_flags(mode, tau, shots, base_categories, target_category, seed)
    if protocol is not None:
        packs = subsample_bank(packs, protocol)
    if not packs:
        raise ValidationError("empty selection: no train packs after subsampling")
    layer_ids = _parse_ints(layers) if layers else packs[0].layer_ids
    bank = build_bank(packs, layer_ids)
    with open(out, "wb") as fh:
        save_bank(bank, fh)
    click.echo(f"bank: {bank.num_images} images, grid {bank.grid}")
    for lid in bank.layer_ids:
        store = bank.layer_stores[lid]
        click.echo(f"  layer {lid}: {store.patches.shape[0]} patches, dim {store.dim}")


@cli.command("score")
@click.option("--bank", "bank_path", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--split", default="test", show_default=True)
@click.option("--config", "config_path", default=None, type=click.Path())
@click.option("--layers", default=None)
@click.option("--weights", default=None)
@click.option("--topk", default=None, type=int)
@click.option("--rho", default=None, type=int)
@click.option("--pool-frac", default=None, type=float)
@click.option("--output-res", default=None)
@click.option("--heatmaps", is_flag=True, default=False)
@click.option("-j", "jobs", default=1, show_default=True)
def cmd_score(
    bank_path,
    manifest_path,
    out,
    split,
    config_path,
    layers,
    weights,
    topk,
    rho,
    pool_frac,
    output_res,
    heatmaps,
    jobs,
) -> None:
    """Score a split against a bank; one result file per image."""
    config = _resolve_config(
        config_path, layers, weights, topk, rho, pool_frac, output_res
    )
    with open(bank_path, "rb") as fh:
        bank = load_bank(fh)
    dataset = read_manifest(manifest_path)
    entries = dataset.select(split)
    if not entries:
        raise ValidationError(f"manifest has no {split!r} images")
    out_dir = Path(out)
    (out_dir / "results").mkdir(parents=True, exist_ok=True)
    if heatmaps:
        (out_dir / "heatmaps").mkdir(parents=True, exist_ok=True)

    def work(entry):
        pack = dataset.load_pack(entry)
        result = score_image(bank, pack, config)
        with open(out_dir / "results" / f"{entry.image_id}.radf", "wb") as fh:
            save_result(result, fh)
        if heatmaps:
            png = render_heatmap(result.pixel_map)
            (out_dir / "heatmaps" / f"{entry.image_id}.png").write_bytes(png)
        return entry.image_id, result.image_score

    scores = {}
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        for done, (image_id, score) in enumerate(pool.map(work, entries), 1):
            scores[image_id] = score
            print(f"\rscored {done}/{len(entries)}", end="", file=sys.stderr)
    print(file=sys.stderr)

    summary = {
        "config": {
            "layers": list(config.layers),
            "weights": None if config.weights is None else list(config.weights),
            "topk": config.topk,
            "rho": config.rho,
            "pooling_fraction": config.pooling_fraction,
            "output_resolution": list(config.output_resolution),
        },
        "image_scores": {k: scores[k] for k in sorted(scores)},
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    click.echo(f"scored {len(entries)} images -> {out_dir}")


def _truth_from_manifest(dataset, split="test"):
    truth = {}
    for entry in dataset.select(split):
        truth[entry.image_id] = GroundTruthEntry(
            label=entry.label,
            category=entry.category,
            mask=dataset.load_mask(entry),
        )
    return truth


@cli.command("eval")
@click.option("--results", "results_dir", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--split", default="test", show_default=True)
@click.option("--fpr-limit", default=0.3, show_default=True)
def cmd_eval(results_dir, manifest_path, out, split, fpr_limit) -> None:
    """Evaluate stored scoring results against manifest ground truth."""
    dataset = read_manifest(manifest_path)
    truth = _truth_from_manifest(dataset, split)
    results = {}
    for image_id in truth:
        path = Path(results_dir) / "results" / f"{image_id}.radf"
        if not path.exists():
            raise ValidationError(f"missing result file for image {image_id!r}")
        with open(path, "rb") as fh:
            results[image_id] = load_result(fh)
    report = evaluate(results, truth, fpr_limit=fpr_limit)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    (out_dir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    click.echo(json.dumps(report.pooled.as_dict(), indent=2, sort_keys=True))


@cli.command("scale-study")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--mode", required=True, type=click.Choice(
    ["single_class", "multi_class", "incremental_class", "few_shot"]))
@click.option("--tau-grid", default=None, help="comma-separated tau values")
@click.option("--shots-grid", default=None, help="comma-separated shot counts")
@click.option("--seeds", default="0", show_default=True)
@click.option("--base-categories", default=None)
@click.option("--target-category", default=None)
@click.option("--config", "config_path", default=None, type=click.Path())
@click.option("--layers", default=None)
@click.option("--weights", default=None)
@click.option("--topk", default=None, type=int)
@click.option("--rho", default=None, type=int)
@click.option("--pool-frac", default=None, type=float)
@click.option("--output-res", default=None)
@click.option("--fpr-limit", default=0.3, show_default=True)
def cmd_scale_study(
    manifest_path,
    out,
    mode,
    tau_grid,
    shots_grid,
    seeds,
    base_categories,
    target_category,
    config_path,
    layers,
    weights,
    topk,
    rho,
    pool_frac,
    output_res,
    fpr_limit,
) -> None:
    """Sweep a scaling protocol grid: subsample, build, score, evaluate."""
    config = _resolve_config(
        config_path, layers, weights, topk, rho, pool_frac, output_res
    )
    if mode == "few_shot":
        if not shots_grid:
            raise ValidationError("few_shot mode needs --shots-grid")
        grid_points = [("shots", int(v)) for v in _parse_ints(shots_grid)]
    else:
        if not tau_grid:
            raise ValidationError(f"{mode} mode needs --tau-grid")
        grid_points = [("tau", float(v)) for v in _parse_floats(tau_grid)]
    seed_list = _parse_ints(seeds)
    if not grid_points or not seed_list:
        raise ValidationError("empty grid")

    dataset = read_manifest(manifest_path)
    train_packs = dataset.load_packs("train")
    test_entries = dataset.select("test")
    test_packs = [dataset.load_pack(e) for e in test_entries]
    truth = _truth_from_manifest(dataset)

    rows = ["mode,tau,shots,seed,scope,I-AUROC,I-AP,I-F1max,P-AUROC,P-AP,P-F1max,AUPRO"]
    for kind, value in grid_points:
        for seed in seed_list:
            protocol = ScalingProtocol(
                mode=mode,
                tau=value if kind == "tau" else 1.0,
                shots=value if kind == "shots" else 1,
                base_categories=tuple(base_categories.split(","))
                if base_categories
                else (),
                target_category=target_category,
                seed=seed,
            )
            protocol.validate()
            selected = subsample_bank(train_packs, protocol)
            if not selected:
                raise ValidationError("empty selection at grid point")
            bank = build_bank(selected, config.layers)
            results = {
                pack.image_id: score_image(bank, pack, config)
                for pack in test_packs
            }
            report = evaluate(results, truth, fpr_limit=fpr_limit)

            def fmt(scope, bundle):
                vals = [
                    bundle.image_auroc,
                    bundle.image_ap,
                    bundle.image_f1max,
                    bundle.pixel_auroc,
                    bundle.pixel_ap,
                    bundle.pixel_f1max,
                    bundle.aupro,
                ]
                tau_s = f"{protocol.tau:g}" if kind == "tau" else ""
                shots_s = f"{protocol.shots}" if kind == "shots" else ""
                return (
                    f"{mode},{tau_s},{shots_s},{seed},{scope},"
                    + ",".join(f"{v:.6f}" for v in vals)
                )

            rows.append(fmt("pooled", report.pooled))
            for cat in sorted(report.per_category):
                rows.append(fmt(cat, report.per_category[cat]))
            click.echo(f"{mode} {kind}={value} seed={seed}: done")

    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_text("\n".join(rows) + "\n", encoding="utf-8")
    click.echo(f"wrote {out}")


@cli.command("verify-theory")
@click.option("--seed", default=0, show_default=True)
@click.option("--trials", default=1000, show_default=True)
@click.option("--pairs", default=10_000, show_default=True)
@click.option("--out", default=None, type=click.Path())
@click.option("--inject-bug", is_flag=True, default=False, hidden=True)
def cmd_verify_theory(seed, trials, pairs, out, inject_bug) -> None:
    """Run every theory contract check; nonzero exit on any violation."""
    records = run_all_checks(
        seed=seed, trials=trials, pair_samples=pairs, inject_bug=inject_bug
    )
    width = max(len(r["check"]) for r in records)
    for r in records:
        status = "PASS" if r["passed"] else "FAIL"
        click.echo(
            f"{status}  {r['check']:<{width}}  max_slack={r['max_slack']:+.3e}"
            f"  tolerance={r['tolerance']:.1e}"
        )
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            json.dump({"seed": seed, "checks": records}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    require_all_passed(records)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except ContractViolation as exc:
        click.echo(f"contract violation: {exc}", err=True)
        return 3
    except (ValidationError, click.UsageError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.Abort:
        return 1
    except RadError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        click.echo(f"unexpected error: {exc}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
