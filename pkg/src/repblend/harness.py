"""Experiment orchestration: training schedule, checkpoints, sweeps.

Every stochastic site (data generation, label dropping, batch order,
augmentation, prototype sampling, parameter init) draws from its own RNG
stream derived from the base seed and a fixed label, so toggling one
module never perturbs another's randomness.  Checkpoints capture model,
optimizer, prototype bank and all stream states; resuming reproduces the
remaining loss trace exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, config_from_dict, config_to_dict
from .decoupling import contrastive_batch_loss, load_embeddings, random_embeddings
from .heads import classification_loss, cooccurrence_adjacency, partial_bce, total_loss
from .instance_blend import blend_batch
from .labels import LabelMatrix, ProportionSpec, drop_labels, from_csv
from .metrics import EvalReport, aggregate_proportions, f1_measures, mean_average_precision, write_report_csv, write_report_json
from .model import PartialLabelRecognizer
from .prototype_blend import PrototypeBank, blend_prototype_batch, blend_prototype_vectors_batch, build_prototypes
from .synthetic import generate_synthetic, read_images

CHECKPOINT_FORMAT_VERSION = 1
TRACE_COLUMNS = (
    "epoch",
    "iteration",
    "cls_loss",
    "contrastive_loss",
    "total_loss",
    "mean_instance_coeff",
    "mean_prototype_coeff",
    "clean_loss",
    "instance_loss",
    "prototype_loss",
)
RNG_SITES = ("batch-order", "augment", "prototype-sample")
ABLATION_VARIANTS = ("baseline", "instance", "prototype", "full")


def derive_seed(base_seed: int, label: str) -> int:
    """Stable 63-bit seed for one named stochastic site."""
    digest = hashlib.sha256(f"{base_seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def rng_stream(base_seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base_seed, label))


@dataclass
class DataBundle:
    """In-memory dataset: complete labels on both splits."""

    train_images: np.ndarray
    train_labels: LabelMatrix
    test_images: np.ndarray
    test_labels: LabelMatrix


def resolve_dataset(cfg: ExperimentConfig) -> DataBundle:
    """Materialize the configured dataset (generate or load from disk)."""
    ds = cfg.dataset
    if ds.kind == "synthetic":
        train_spec = dataclasses.replace(
            ds.scene, seed=derive_seed(cfg.base_seed, f"dataset.train.{ds.scene.seed}")
        )
        test_spec = dataclasses.replace(
            ds.scene, seed=derive_seed(cfg.base_seed, f"dataset.test.{ds.scene.seed}")
        )
        train = generate_synthetic(train_spec, ds.n_train)
        test = generate_synthetic(test_spec, ds.n_test)
        return DataBundle(train.images, train.labels, test.images, test.labels)
    train_labels, train_ids, _ = from_csv(Path(ds.train_dir) / "labels.csv")
    test_labels, test_ids, _ = from_csv(Path(ds.test_dir) / "labels.csv")
    train_images = read_images(ds.train_dir, train_ids)
    test_images = read_images(ds.test_dir, test_ids)
    return DataBundle(train_images, train_labels, test_images, test_labels)


def resolve_known_labels(cfg: ExperimentConfig, complete: LabelMatrix) -> LabelMatrix:
    """Partial train labels: a prepared split file, or an on-the-fly drop."""
    if cfg.dataset.known_labels_csv:
        known, _, _ = from_csv(cfg.dataset.known_labels_csv)
        if known.values.shape != complete.values.shape:
            raise ValueError("known_labels_csv shape does not match the train split")
        return known
    p = cfg.proportions[0]
    if p == 1.0:
        return complete
    spec = ProportionSpec(p, derive_seed(cfg.base_seed, "drop-labels"))
    return drop_labels(complete, spec)


def build_model(cfg: ExperimentConfig, known_labels: LabelMatrix | None = None) -> PartialLabelRecognizer:
    """Construct the recognizer; seeded so identical configs give identical weights."""
    c = cfg.dataset.scene.num_categories if cfg.dataset.kind == "synthetic" else None
    if known_labels is not None:
        c = known_labels.num_categories
    if c is None:
        raise ValueError("cannot infer category count; pass known_labels")
    if cfg.embeddings_path:
        embeddings = load_embeddings(cfg.embeddings_path)
        if embeddings.num_categories != c:
            raise ValueError("embedding file category count does not match dataset")
    else:
        embeddings = random_embeddings(c, cfg.embedding_dim, derive_seed(cfg.base_seed, "embeddings"))
    adjacency = None
    if cfg.adjacency == "cooccurrence":
        if known_labels is None:
            raise ValueError("cooccurrence adjacency needs the known train labels")
        adjacency = cooccurrence_adjacency(known_labels)
    torch.manual_seed(derive_seed(cfg.base_seed, "model-init"))
    return PartialLabelRecognizer(
        cfg.backbone,
        embeddings,
        joint_dim=cfg.joint_dim,
        pool_mode=cfg.pool_mode,
        propagation_steps=cfg.propagation_steps,
        adjacency=adjacency,
    )


def _rebuild_bank(
    model: PartialLabelRecognizer,
    images: torch.Tensor,
    known: LabelMatrix,
    batch_size: int,
    grid_level: int,
    epoch: int,
) -> PrototypeBank:
    """No-gradient dataset pass collecting per-bin prototype means."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            def samples():
                for start in range(0, images.shape[0], batch_size):
                    maps, _ = model.category_maps(images[start : start + batch_size])
                    for i in range(maps.shape[0]):
                        yield maps[i], known.values[start + i]

            bank = build_prototypes(samples(), grid_level, built_at_epoch=epoch)
    finally:
        if was_training:
            model.train()
    if not bank.usable.any():
        raise RuntimeError(
            "prototype blending is enabled but no category has a known positive label"
        )
    return bank


@dataclass
class TrainResult:
    checkpoint_path: str
    trace_path: str
    trace_rows: list = field(default_factory=list)
    final_epoch: int = 0
    bank_epochs: list = field(default_factory=list)
    duration_seconds: float = 0.0


def _trace_line(row: dict) -> str:
    return ",".join(
        str(row[k]) if k in ("epoch", "iteration") else repr(float(row[k])) for k in TRACE_COLUMNS
    )


def save_checkpoint(
    path: str | Path,
    model: PartialLabelRecognizer,
    optimizer: torch.optim.Optimizer,
    bank: PrototypeBank | None,
    epoch: int,
    streams: dict[str, np.random.Generator],
    cfg: ExperimentConfig,
    bank_epochs: list[int],
) -> None:
    bank_payload = None
    if bank is not None:
        bank_payload = {
            "prototypes": bank.prototypes,
            "occupancy": bank.occupancy,
            "backfilled": bank.backfilled,
            "grid_level": bank.grid_level,
            "built_at_epoch": bank.built_at_epoch,
        }
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict(),
            "bank": bank_payload,
            "epoch": epoch,
            "rng": {name: gen.bit_generator.state for name, gen in streams.items()},
            "torch_rng": torch.get_rng_state(),
            "config": config_to_dict(cfg),
            "bank_epochs": list(bank_epochs),
        },
        path,
    )


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {payload.get('format_version')}")
    return payload


def _epoch_lr(cfg: ExperimentConfig, epoch: int) -> float:
    opt = cfg.optimizer
    if opt.decay_every <= 0:
        return opt.learning_rate
    return opt.learning_rate * opt.decay_factor ** ((epoch - 1) // opt.decay_every)


def train(
    cfg: ExperimentConfig,
    output_dir: str | Path,
    dataset: DataBundle | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Run the full training schedule at ``cfg.proportions[0]`` known labels.

    Epochs before ``blend_start_epoch`` train the clean path (plus the
    contrastive term when enabled); from that epoch on, the active blending
    paths join the classification loss with equal weight.  The prototype
    bank is rebuilt from a no-gradient dataset pass at the blend-start
    epoch and every refresh period after it.  The per-iteration loss trace
    is appended to ``trace.csv`` at every epoch boundary.
    """
    started = time.monotonic()
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    trace_path = output_dir / "trace.csv"
    checkpoint_path = output_dir / "checkpoint.pt"

    data = dataset if dataset is not None else resolve_dataset(cfg)
    known = resolve_known_labels(cfg, data.train_labels)
    model = build_model(cfg, known)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.optimizer.learning_rate)
    streams = {site: rng_stream(cfg.base_seed, site) for site in RNG_SITES}

    bank: PrototypeBank | None = None
    bank_epochs: list[int] = []
    start_epoch = 1
    trace_rows: list[dict] = []

    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        model.load_state_dict(payload["model"])
        optimizer.load_state_dict(payload["optimizer"])
        if payload["bank"] is not None:
            bank = PrototypeBank(**payload["bank"])
        for name, state in payload["rng"].items():
            streams[name].bit_generator.state = state
        torch.set_rng_state(payload["torch_rng"])
        bank_epochs = list(payload.get("bank_epochs", []))
        start_epoch = payload["epoch"] + 1
    if not (resume_from is not None and trace_path.exists()):
        trace_path.write_text(",".join(TRACE_COLUMNS) + "\n", encoding="utf-8")

    images = torch.from_numpy(np.ascontiguousarray(data.train_images))
    known_t = torch.from_numpy(np.asarray(known.values, dtype=np.float32))
    n = images.shape[0]
    batch_size = cfg.optimizer.batch_size
    toggles = cfg.toggles
    loss_cfg = cfg.loss
    iteration = (start_epoch - 1) * ((n + batch_size - 1) // batch_size)

    for epoch in range(start_epoch, cfg.optimizer.epochs + 1):
        lr = _epoch_lr(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        blending = epoch >= loss_cfg.blend_start_epoch
        if (
            toggles.prototype_blend
            and blending
            and (epoch - loss_cfg.blend_start_epoch) % loss_cfg.prototype_refresh_period == 0
        ):
            bank = _rebuild_bank(model, images, known, batch_size, cfg.grid_level, epoch)
            bank_epochs.append(epoch)

        model.train()
        order = streams["batch-order"].permutation(n)
        epoch_rows: list[dict] = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch = images[idx]
            flips = streams["augment"].random(len(idx)) < 0.5
            if flips.any():
                batch = batch.clone()
                batch[np.flatnonzero(flips)] = torch.flip(batch[np.flatnonzero(flips)], dims=[-1])
            labels_b = known_t[idx]

            maps, _ = model.category_maps(batch)
            scores, vectors = model.classify_maps(maps)
            paths = [(labels_b, scores)]
            clean_loss = partial_bce(labels_b, scores).sum()
            instance_loss = torch.zeros(())
            prototype_loss = torch.zeros(())

            if blending and toggles.instance_blend and len(idx) >= 2:
                b_maps, b_labels = blend_batch(maps, labels_b, model.instance_coefficients.values)
                b_scores, _ = model.classify_maps(b_maps)
                instance_loss = partial_bce(b_labels, b_scores).sum()
                paths.append((b_labels, b_scores))
            if blending and toggles.prototype_blend and bank is not None:
                beta = model.prototype_coefficients.values
                if toggles.vector_blend:
                    p_vectors, p_labels, _ = blend_prototype_vectors_batch(
                        maps, vectors, labels_b, bank, beta, streams["prototype-sample"],
                        cfg.pool_mode,
                    )
                    p_scores = model.classify_vectors(p_vectors)
                else:
                    p_maps, p_labels, _ = blend_prototype_batch(
                        maps, labels_b, bank, beta, streams["prototype-sample"]
                    )
                    p_scores, _ = model.classify_maps(p_maps)
                prototype_loss = partial_bce(p_labels, p_scores).sum()
                paths.append((p_labels, p_scores))

            cls = classification_loss(paths)
            if toggles.contrastive:
                cst = contrastive_batch_loss(vectors, labels_b)
            else:
                cst = torch.zeros(())
            loss = total_loss(cls, cst, loss_cfg)

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            iteration += 1
            with torch.no_grad():
                epoch_rows.append(
                    {
                        "epoch": epoch,
                        "iteration": iteration,
                        "cls_loss": cls.item(),
                        "contrastive_loss": cst.item(),
                        "total_loss": loss.item(),
                        "mean_instance_coeff": model.instance_coefficients.values.mean().item(),
                        "mean_prototype_coeff": model.prototype_coefficients.values.mean().item(),
                        "clean_loss": clean_loss.item(),
                        "instance_loss": instance_loss.item(),
                        "prototype_loss": prototype_loss.item(),
                    }
                )

        with open(trace_path, "a", encoding="utf-8") as fh:
            for row in epoch_rows:
                fh.write(_trace_line(row) + "\n")
        trace_rows.extend(epoch_rows)

        if cfg.checkpoint_every > 0 and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(
                output_dir / f"checkpoint_epoch{epoch:03d}.pt",
                model, optimizer, bank, epoch, streams, cfg, bank_epochs,
            )

    final_epoch = max(cfg.optimizer.epochs, start_epoch - 1)
    save_checkpoint(checkpoint_path, model, optimizer, bank, final_epoch, streams, cfg, bank_epochs)
    return TrainResult(
        checkpoint_path=str(checkpoint_path),
        trace_path=str(trace_path),
        trace_rows=trace_rows,
        final_epoch=final_epoch,
        bank_epochs=bank_epochs,
        duration_seconds=time.monotonic() - started,
    )


def model_from_checkpoint(path: str | Path) -> tuple[PartialLabelRecognizer, ExperimentConfig]:
    payload = load_checkpoint(path)
    cfg = config_from_dict(payload["config"])
    c = payload["model"]["embeddings"].shape[0]
    dummy = LabelMatrix(np.zeros((1, c)))
    model = build_model(cfg, dummy)
    model.load_state_dict(payload["model"])
    return model, cfg


def evaluate(
    model: PartialLabelRecognizer | str | Path,
    test_images: np.ndarray,
    test_labels: LabelMatrix,
    batch_size: int = 64,
    proportion: float = 1.0,
    loss_trace: str | None = None,
) -> EvalReport:
    """Score the clean inference path (blending removed) and compute metrics."""
    if not isinstance(model, PartialLabelRecognizer):
        model, _ = model_from_checkpoint(model)
    if not test_labels.is_complete():
        raise ValueError("evaluation labels must be complete")
    if test_labels.num_categories != model.num_categories:
        raise ValueError(
            f"test set has {test_labels.num_categories} categories, model expects {model.num_categories}"
        )
    model.eval()
    chunks = []
    images = torch.from_numpy(np.ascontiguousarray(test_images))
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            chunks.append(model(images[start : start + batch_size]).numpy())
    scores = np.concatenate(chunks, axis=0)
    targets = (test_labels.values == 1.0).astype(np.int64)
    mean_ap, per_category = mean_average_precision(scores, targets)
    f1 = f1_measures(scores, targets)
    return EvalReport(
        proportion=proportion,
        mean_ap=mean_ap,
        of1=f1.of1,
        cf1=f1.cf1,
        per_category_ap=per_category,
        loss_trace=loss_trace,
    )


@dataclass
class SweepResult:
    reports: list
    aggregate: object
    report_csv: str
    report_json: str
    run_dirs: list


def sweep(
    cfg: ExperimentConfig,
    output_dir: str | Path,
    dataset: DataBundle | None = None,
) -> SweepResult:
    """Train and evaluate once per configured proportion; emit the report table."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    data = dataset if dataset is not None else resolve_dataset(cfg)
    reports = []
    run_dirs = []
    for p in cfg.proportions:
        run_cfg = dataclasses.replace(cfg, proportions=(p,))
        run_dir = output_dir / f"p{p:g}"
        result = train(run_cfg, run_dir, dataset=data)
        report = evaluate(
            result.checkpoint_path,
            data.test_images,
            data.test_labels,
            batch_size=cfg.optimizer.batch_size,
            proportion=p,
            # relative so identical runs emit byte-identical report files
            loss_trace=str(Path(result.trace_path).relative_to(output_dir)),
        )
        reports.append(report)
        run_dirs.append(str(run_dir))
    aggregate = aggregate_proportions(reports)
    report_csv = output_dir / "report.csv"
    report_json = output_dir / "report.json"
    write_report_csv(reports, report_csv, aggregate)
    write_report_json(reports, report_json, aggregate)
    return SweepResult(
        reports=reports,
        aggregate=aggregate,
        report_csv=str(report_csv),
        report_json=str(report_json),
        run_dirs=run_dirs,
    )


def _variant_toggles(cfg: ExperimentConfig, variant: str):
    base = cfg.toggles
    if variant == "baseline":
        return dataclasses.replace(base, instance_blend=False, prototype_blend=False, contrastive=False)
    if variant == "instance":
        return dataclasses.replace(base, instance_blend=True, prototype_blend=False, contrastive=True)
    if variant == "prototype":
        return dataclasses.replace(base, instance_blend=False, prototype_blend=True, contrastive=True)
    if variant == "full":
        return dataclasses.replace(base, instance_blend=True, prototype_blend=True, contrastive=True)
    raise ValueError(f"unknown ablation variant {variant!r}")


def ablation(
    cfg: ExperimentConfig,
    output_dir: str | Path,
    dataset: DataBundle | None = None,
    variants: tuple[str, ...] = ABLATION_VARIANTS,
) -> dict[str, EvalReport]:
    """Four-row toggle sweep at one proportion: baseline / instance / prototype / full."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    data = dataset if dataset is not None else resolve_dataset(cfg)
    rows: dict[str, EvalReport] = {}
    for variant in variants:
        run_cfg = dataclasses.replace(cfg, toggles=_variant_toggles(cfg, variant))
        result = train(run_cfg, output_dir / variant, dataset=data)
        rows[variant] = evaluate(
            result.checkpoint_path,
            data.test_images,
            data.test_labels,
            batch_size=cfg.optimizer.batch_size,
            proportion=cfg.proportions[0],
            loss_trace=str(Path(result.trace_path).relative_to(output_dir)),
        )
    with open(output_dir / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "mAP", "OF1", "CF1"])
        for variant, report in rows.items():
            writer.writerow(
                [variant, f"{100 * report.mean_ap:.4f}", f"{100 * report.of1:.4f}", f"{100 * report.cf1:.4f}"]
            )
    return rows
