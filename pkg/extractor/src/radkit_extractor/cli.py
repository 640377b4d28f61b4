"""Extraction CLI, mirroring the primary package's flag conventions."""

from __future__ import annotations

import sys

import click

from radkit.errors import RadError, ValidationError
from radkit.feature_io import write_feature_pack

from .backbones import BackboneError, DEFAULT_BACKBONE, available_backbones
from .extract import ExtractorConfig, extract_dataset, extract_single


def _config(backbone, layers, resize, crop, batch, device):
    return ExtractorConfig(
        backbone=backbone,
        layers=tuple(int(t) for t in layers.replace(" ", "").split(",") if t),
        resize=resize,
        crop=crop,
        batch_size=batch,
        device=device,
    )


@click.group()
def cli() -> None:
    """Frozen-encoder feature extraction emitting RADF packs."""


def _common_options(fn):
    fn = click.option("--backbone", default=DEFAULT_BACKBONE, show_default=True,
                      help=f"one of: {', '.join(available_backbones())}")(fn)
    fn = click.option("--layers", default="4,7,10,12", show_default=True)(fn)
    fn = click.option("--resize", default=512, show_default=True)(fn)
    fn = click.option("--crop", default=448, show_default=True)(fn)
    fn = click.option("--batch", default=8, show_default=True)(fn)
    fn = click.option("--device", default="cpu", show_default=True)(fn)
    return fn


@cli.command("dataset")
@click.option("--dataset", "dataset_dir", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@_common_options
def cmd_dataset(dataset_dir, out, backbone, layers, resize, crop, batch, device) -> None:
    """Extract an MVTec-style image tree into packs + masks + manifest."""
    config = _config(backbone, layers, resize, crop, batch, device)
    manifest = extract_dataset(dataset_dir, config, out, progress=True)
    click.echo(f"wrote {manifest}")


@cli.command("image")
@click.option("--image", "image_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@_common_options
def cmd_image(image_path, out, backbone, layers, resize, crop, batch, device) -> None:
    """Extract a single image into one RADF pack."""
    config = _config(backbone, layers, resize, crop, batch, device)
    pack = extract_single(image_path, config)
    with open(out, "wb") as fh:
        write_feature_pack(pack, fh)
    click.echo(f"wrote {out} ({pack.grid_shape[0]}x{pack.grid_shape[1]} grid)")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except (ValidationError, BackboneError, click.UsageError) as exc:
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
