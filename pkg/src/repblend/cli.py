"""Command-line client for the repblend service.

Every subcommand issues an HTTP request.  With ``--url`` (or
``REPBLEND_SERVICE_URL``) the request goes to a running server; otherwise
an in-process application instance handles it, so single-machine use needs
no separate server.  ``repblend serve`` starts a standalone server.
"""

from __future__ import annotations

import asyncio
import json
import os

import click
import httpx

from .config import ExperimentConfig, apply_overrides, config_to_dict, load_config

DEFAULT_TIMEOUT = None  # training requests may run for minutes


class _InProcessClient:
    """Sync adapter that runs requests against the ASGI app without a socket."""

    def __init__(self) -> None:
        from .service.app import create_app

        self._app = create_app()

    def __enter__(self) -> "_InProcessClient":
        return self

    def __exit__(self, *exc) -> None:
        return None

    async def _request(self, method: str, path: str, payload: dict | None) -> httpx.Response:
        transport = httpx.ASGITransport(app=self._app)
        async with httpx.AsyncClient(
            transport=transport, base_url="http://repblend.local", timeout=DEFAULT_TIMEOUT
        ) as client:
            return await client.request(method, path, json=payload)

    def post(self, path: str, json: dict | None = None) -> httpx.Response:
        return asyncio.run(self._request("POST", path, json))

    def get(self, path: str) -> httpx.Response:
        return asyncio.run(self._request("GET", path, None))


def _client(url: str | None):
    url = url or os.environ.get("REPBLEND_SERVICE_URL")
    if url:
        return httpx.Client(base_url=url, timeout=DEFAULT_TIMEOUT)
    return _InProcessClient()


def _post(client, path: str, payload: dict) -> dict:
    response = client.post(path, json=payload)
    if response.status_code != 200:
        try:
            detail = response.json().get("detail", response.text)
        except json.JSONDecodeError:
            detail = response.text
        raise click.ClickException(f"{path} failed ({response.status_code}): {detail}")
    return response.json()


def _load_experiment_config(config_path: str | None, overrides: tuple[str, ...]) -> dict:
    cfg = load_config(config_path) if config_path else ExperimentConfig()
    if overrides:
        cfg = apply_overrides(cfg, list(overrides))
    return config_to_dict(cfg)


url_option = click.option("--url", default=None, help="Service URL (default: in-process app, or REPBLEND_SERVICE_URL)")
config_option = click.option("--config", "config_path", default=None, type=click.Path(exists=True), help="YAML experiment config")
set_option = click.option("--set", "overrides", multiple=True, metavar="FIELD=VALUE", help="Dotted config override, e.g. optimizer.epochs=3")


@click.group()
def main() -> None:
    """Partial-label multi-label recognition: datasets, training, evaluation."""


@main.command()
@url_option
@click.option("--output", "output_dir", required=True, help="Dataset directory (train/ + test/)")
@click.option("--categories", default=12, show_default=True)
@click.option("--n-train", default=2000, show_default=True)
@click.option("--n-test", default=500, show_default=True)
@click.option("--image-size", default=64, show_default=True)
@click.option("--objects-min", default=1, show_default=True)
@click.option("--objects-max", default=4, show_default=True)
@click.option("--clutter", default=0.3, show_default=True)
@click.option("--seed", default=0, show_default=True)
def generate(url, output_dir, categories, n_train, n_test, image_size, objects_min, objects_max, clutter, seed):
    """Render a synthetic multi-label dataset to disk."""
    payload = {
        "output_dir": output_dir,
        "n_train": n_train,
        "n_test": n_test,
        "scene": {
            "num_categories": categories,
            "image_size": (image_size, image_size),
            "objects_per_image": (objects_min, objects_max),
            "clutter": clutter,
            "seed": seed,
        },
    }
    with _client(url) as client:
        doc = _post(client, "/datasets/generate", payload)
    click.echo(f"train: {doc['train']['n_images']} images -> {doc['train']['directory']}")
    click.echo(f"test:  {doc['test']['n_images']} images -> {doc['test']['directory']}")


@main.command()
@url_option
@click.option("--labels-csv", required=True, help="Complete labels CSV to drop from")
@click.option("--proportions", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--rounding", default="nearest", show_default=True, type=click.Choice(["nearest", "floor", "ceil"]))
@click.option("--output", "output_dir", required=True)
def prepare(url, labels_csv, proportions, seed, rounding, output_dir):
    """Drop labels at the given known proportions into split CSVs."""
    payload = {
        "labels_csv": labels_csv,
        "proportions": [float(p) for p in proportions.split(",")],
        "seed": seed,
        "rounding": rounding,
        "output_dir": output_dir,
    }
    with _client(url) as client:
        doc = _post(client, "/datasets/prepare", payload)
    for split in doc["splits"]:
        click.echo(f"p={split['proportion']:g}: {split['known_per_image']} known/image -> {split['path']}")


@main.command()
@url_option
@config_option
@set_option
@click.option("--output", "output_dir", required=True, help="Run directory for trace + checkpoint")
@click.option("--resume-from", default=None, help="Checkpoint to resume from")
def train(url, config_path, overrides, output_dir, resume_from):
    """Train one run at the first configured proportion."""
    payload = {
        "config": _load_experiment_config(config_path, overrides),
        "output_dir": output_dir,
        "resume_from": resume_from,
    }
    with _client(url) as client:
        doc = _post(client, "/runs/train", payload)
    click.echo(f"trained {doc['final_epoch']} epochs in {doc['duration_seconds']:.1f}s")
    if doc["bank_epochs"]:
        click.echo(f"prototype bank built at epochs {doc['bank_epochs']}")
    click.echo(f"checkpoint: {doc['checkpoint']}")
    click.echo(f"trace:      {doc['trace']}")


@main.command()
@url_option
@click.option("--checkpoint", required=True)
@click.option("--proportion", default=1.0, show_default=True, help="Tag recorded in the report")
def evaluate(url, checkpoint, proportion):
    """Evaluate a checkpoint on its configured test split (clean path only)."""
    payload = {"checkpoint": checkpoint, "proportion": proportion}
    with _client(url) as client:
        doc = _post(client, "/runs/evaluate", payload)
    click.echo(f"mAP={100 * doc['mAP']:.2f}  OF1={100 * doc['OF1']:.2f}  CF1={100 * doc['CF1']:.2f}")


@main.command()
@url_option
@config_option
@set_option
@click.option("--output", "output_dir", required=True)
@click.option("--ablation", is_flag=True, help="Sweep the four module-toggle rows instead of proportions")
def sweep(url, config_path, overrides, output_dir, ablation):
    """Train + evaluate per proportion (or per ablation variant) and emit the report."""
    payload = {
        "config": _load_experiment_config(config_path, overrides),
        "output_dir": output_dir,
        "ablation": ablation,
    }
    with _client(url) as client:
        doc = _post(client, "/runs/sweep", payload)
    if ablation:
        for name, row in doc["rows"].items():
            click.echo(f"{name:>9}: mAP={100 * row['mAP']:.2f}  OF1={100 * row['OF1']:.2f}  CF1={100 * row['CF1']:.2f}")
    else:
        for row in doc["reports"]:
            click.echo(f"p={row['proportion']:g}: mAP={100 * row['mAP']:.2f}  OF1={100 * row['OF1']:.2f}  CF1={100 * row['CF1']:.2f}")
        avg = doc["average"]
        click.echo(f"average: mAP={100 * avg['mAP']:.2f}  OF1={100 * avg['OF1']:.2f}  CF1={100 * avg['CF1']:.2f}")
    if doc.get("report_csv"):
        click.echo(f"report: {doc['report_csv']}")


@main.command()
@url_option
@click.option("--report-json", required=True, help="Sweep report JSON to render")
@click.option("--format", "fmt", default="table", show_default=True, type=click.Choice(["csv", "table"]))
def report(url, report_json, fmt):
    """Render a sweep report as a CSV or aligned table."""
    payload = {"report_json": report_json, "format": fmt}
    with _client(url) as client:
        doc = _post(client, "/reports/render", payload)
    click.echo(doc["rendered"], nl=False)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(host, port):
    """Start the HTTP service."""
    import uvicorn

    uvicorn.run("repblend.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()
