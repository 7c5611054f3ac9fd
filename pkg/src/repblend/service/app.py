"""FastAPI service wrapping the experiment harness.

All endpoints execute synchronously on the server's filesystem; training
and sweep requests serialize on a lock so a single logical training thread
owns the model parameters at any time.  Relative paths are resolved
against the output root (``REPBLEND_OUTPUT_ROOT``, default: the server's
working directory).
"""

from __future__ import annotations

import dataclasses
import json
import os
import threading
from pathlib import Path

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..config import config_from_dict
from ..harness import ablation, evaluate, model_from_checkpoint, resolve_dataset, train, sweep
from ..labels import ProportionSpec, drop_labels, from_csv, known_stats, to_csv
from ..metrics import EvalReport
from ..synthetic import SyntheticSceneSpec, generate_synthetic, write_images
from .schemas import (
    EvalReportModel,
    EvaluateRequest,
    GenerateRequest,
    GenerateResponse,
    HealthResponse,
    PrepareRequest,
    PreparedSplit,
    PrepareResponse,
    ReportRequest,
    ReportResponse,
    SplitInfo,
    SweepRequest,
    SweepResponse,
    TrainRequest,
    TrainResponse,
)

_train_lock = threading.Lock()


def output_root() -> Path:
    return Path(os.environ.get("REPBLEND_OUTPUT_ROOT", "."))


def _resolve(path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else output_root() / p


def _report_model(report: EvalReport) -> EvalReportModel:
    return EvalReportModel(
        proportion=report.proportion,
        mAP=report.mean_ap,
        OF1=report.of1,
        CF1=report.cf1,
        per_category_ap=list(report.per_category_ap),
        loss_trace=report.loss_trace,
    )


def create_app() -> FastAPI:
    app = FastAPI(
        title="repblend",
        description="Partial-label multi-label recognition with representation blending",
        version=__version__,
    )

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__, output_root=str(output_root()))

    @app.post("/datasets/generate", response_model=GenerateResponse)
    def generate(request: GenerateRequest) -> GenerateResponse:
        try:
            scene = SyntheticSceneSpec(**request.scene.model_dump())
            base = _resolve(request.output_dir)
            splits = {}
            for name, count, seed_tag in (
                ("train", request.n_train, 0),
                ("test", request.n_test, 1),
            ):
                spec = dataclasses.replace(scene, seed=scene.seed + seed_tag)
                dataset = generate_synthetic(spec, count)
                directory = base / name
                names = write_images(dataset, directory)
                labels_csv = directory / "labels.csv"
                to_csv(dataset.labels, labels_csv, image_ids=names)
                stats = known_stats(dataset.labels)
                splits[name] = SplitInfo(
                    directory=str(directory),
                    labels_csv=str(labels_csv),
                    n_images=count,
                    positives_per_category=[int(x) for x in stats.positives],
                )
            return GenerateResponse(train=splits["train"], test=splits["test"])
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc

    @app.post("/datasets/prepare", response_model=PrepareResponse)
    def prepare(request: PrepareRequest) -> PrepareResponse:
        try:
            matrix, ids, names = from_csv(_resolve(request.labels_csv))
            out_dir = _resolve(request.output_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            splits = []
            for p in request.proportions:
                spec = ProportionSpec(p, request.seed, request.rounding)
                dropped = drop_labels(matrix, spec)
                path = out_dir / f"labels_p{p:g}.csv"
                to_csv(dropped, path, image_ids=ids, category_names=names)
                splits.append(
                    PreparedSplit(
                        proportion=p,
                        path=str(path),
                        known_per_image=spec.known_per_image(matrix.num_categories),
                    )
                )
            return PrepareResponse(splits=splits)
        except (ValueError, FileNotFoundError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc

    @app.post("/runs/train", response_model=TrainResponse)
    def run_train(request: TrainRequest) -> TrainResponse:
        try:
            cfg = request.config.to_config()
            with _train_lock:
                result = train(
                    cfg,
                    _resolve(request.output_dir),
                    resume_from=_resolve(request.resume_from) if request.resume_from else None,
                )
        except (ValueError, FileNotFoundError, RuntimeError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        last = result.trace_rows[-1] if result.trace_rows else None
        return TrainResponse(
            checkpoint=result.checkpoint_path,
            trace=result.trace_path,
            final_epoch=result.final_epoch,
            bank_epochs=result.bank_epochs,
            duration_seconds=result.duration_seconds,
            final_cls_loss=last["cls_loss"] if last else None,
            final_contrastive_loss=last["contrastive_loss"] if last else None,
        )

    @app.post("/runs/evaluate", response_model=EvalReportModel)
    def run_evaluate(request: EvaluateRequest) -> EvalReportModel:
        try:
            model, cfg = model_from_checkpoint(_resolve(request.checkpoint))
            if request.dataset is not None:
                cfg = dataclasses.replace(
                    cfg, dataset=config_from_dict({"dataset": request.dataset.model_dump()}).dataset
                )
            data = resolve_dataset(cfg)
            report = evaluate(
                model,
                data.test_images,
                data.test_labels,
                proportion=request.proportion,
            )
            return _report_model(report)
        except (ValueError, FileNotFoundError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc

    @app.post("/runs/sweep", response_model=SweepResponse)
    def run_sweep(request: SweepRequest) -> SweepResponse:
        try:
            cfg = request.config.to_config()
            out = _resolve(request.output_dir)
            with _train_lock:
                if request.ablation:
                    rows = ablation(cfg, out)
                    return SweepResponse(
                        reports=[_report_model(r) for r in rows.values()],
                        rows={name: _report_model(r) for name, r in rows.items()},
                        report_csv=str(out / "ablation.csv"),
                    )
                result = sweep(cfg, out)
        except (ValueError, FileNotFoundError, RuntimeError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        average = EvalReportModel(
            proportion=-1.0,
            mAP=result.aggregate.mean_ap,
            OF1=result.aggregate.of1,
            CF1=result.aggregate.cf1,
            per_category_ap=[],
        )
        return SweepResponse(
            reports=[_report_model(r) for r in result.reports],
            average=average,
            report_csv=result.report_csv,
            report_json=result.report_json,
        )

    @app.post("/reports/render", response_model=ReportResponse)
    def render_report(request: ReportRequest) -> ReportResponse:
        try:
            path = _resolve(request.report_json)
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except (FileNotFoundError, json.JSONDecodeError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        if request.format not in ("csv", "table"):
            raise HTTPException(status_code=422, detail=f"unknown format {request.format!r}")
        rows = doc.get("per_proportion", [])
        avg = doc.get("average", {})
        header = ["proportion", "mAP", "OF1", "CF1"]
        table = [[f"{r['proportion']:g}"] + [f"{100 * r[k]:.2f}" for k in header[1:]] for r in rows]
        table.append(["average"] + [f"{100 * avg[k]:.2f}" for k in header[1:]])
        if request.format == "csv":
            rendered = "\n".join(",".join(row) for row in [header, *table]) + "\n"
        else:
            widths = [max(len(row[i]) for row in [header, *table]) for i in range(len(header))]
            lines = ["  ".join(cell.rjust(widths[i]) for i, cell in enumerate(row)) for row in [header, *table]]
            rendered = "\n".join(lines) + "\n"
        return ReportResponse(rendered=rendered)

    return app


app = create_app()
