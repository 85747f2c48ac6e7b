"""One orchestration function per CLI subcommand.

Every workflow resolves its inputs, runs the mapped pipeline operation,
writes all artifacts under a single run directory, and appends one
record to the run registry, so each artifact on disk traces back to
exactly one run.  Workflows return a payload dict the CLI prints as
JSON; the artifact paths inside it are absolute.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import replace

from .config import (
    ExperimentConfig,
    build_augmentor_protocol,
    build_classifier_spec,
    build_classifier_train_config,
    build_discriminator_spec,
    build_gan_train_config,
    build_generator_spec,
    build_pipeline_config,
    build_segment_config,
)
from .data import load_slice, save_slice
from .experiments import (
    ABLATION_VARIANTS,
    BenchmarkData,
    ablation_run,
    arm_to_dict,
    run_augmented,
    run_baseline,
    stress_test,
    stress_to_dict,
    train_augmentor,
)
from .manifest import (
    DatasetManifest,
    load_manifest,
    manifest_fingerprint,
    save_manifest,
)
from .phantom import build_phantom_dataset
from .registry import RunRecord, RunRegistry, new_run_id
from .report import (
    save_accuracy_vs_k,
    save_benchmark_table,
    save_contact_sheet,
    save_loss_curves,
)
from .segment import apply_mask, dice_coefficient, load_mask, save_mask, segment_lungs
from .synthesis import SynthesisJob, generate_synthetic_positives, load_provenance
from .training import (
    checkpoint_file_hash,
    load_checkpoint,
    pretrain_on_normals,
    save_checkpoint,
    train_ccsgan,
)

OUT_ROOT_ENV = "CTSYNTH_OUT_ROOT"
REGISTRY_FILE = "registry.jsonl"


class WorkflowError(RuntimeError):
    """Unusable inputs or an inconsistent run request."""


def default_out_root() -> str:
    return os.environ.get(OUT_ROOT_ENV) or os.path.join(os.getcwd(), "runs")


def resolve_run_dir(out: str | None, run_id: str) -> str:
    return os.path.abspath(out or os.path.join(default_out_root(), run_id))


def resolve_registry(path: str | None) -> RunRegistry:
    return RunRegistry(os.path.abspath(path or os.path.join(default_out_root(), REGISTRY_FILE)))


def _record(
    registry: RunRegistry,
    run_id: str,
    command: str,
    cfg: ExperimentConfig,
    input_hashes: dict[str, str],
    outputs: list[str],
    started: float,
    details: dict | None = None,
    outcome: str = "ok",
) -> RunRecord:
    record = RunRecord(
        run_id=run_id,
        command=command,
        config_hash=cfg.hash,
        input_hashes=input_hashes,
        outputs=[os.path.abspath(p) for p in outputs],
        started_at=started,
        finished_at=time.time(),
        outcome=outcome,
        details=details or {},
    )
    registry.append(record)
    return record


def _write_json(path: str, payload: dict) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    return os.path.abspath(path)


def _arm_row(arm: dict) -> dict:
    return {
        "arm": arm["arm"],
        "preset": arm["preset"],
        "k": arm["k"],
        "n_real_pos": arm["n_real_pos"],
        "n_synth": arm["n_synth"],
        "n_normal": arm["n_normal"],
        "mean_accuracy": arm["mean_accuracy"],
        "mean_auc": arm["mean_auc"],
        "seeds": arm["seeds"],
    }


def run_phantom(
    cfg: ExperimentConfig,
    registry: RunRegistry,
    out: str | None,
    count: int,
    covid: int,
    split: str = "train",
    seed: int | None = None,
) -> dict:
    started = time.time()
    run_id = new_run_id()
    out_dir = resolve_run_dir(out, run_id)
    data = cfg.section("data")
    manifest = build_phantom_dataset(
        out_dir,
        n_normal=count,
        n_covid=covid,
        size=data["side"],
        seed=0 if seed is None else seed,
        split=split,
        noise_hu=data["phantom_noise_hu"],
        case_prefix=split,
    )
    manifest_path = os.path.join(out_dir, "manifest.tsv")
    outputs = [manifest_path, os.path.join(out_dir, "slices")]
    if os.path.isdir(os.path.join(out_dir, "masks")):
        outputs.append(os.path.join(out_dir, "masks"))
    payload = {
        "run_id": run_id,
        "out_dir": out_dir,
        "manifest": os.path.abspath(manifest_path),
        "n_normal": count,
        "n_covid": covid,
        "fingerprint": manifest_fingerprint(manifest, content=True),
        "outputs": [os.path.abspath(p) for p in outputs],
    }
    _record(registry, run_id, "phantom", cfg, {}, outputs, started,
            details={"n_normal": count, "n_covid": covid, "split": split})
    return payload


def run_segment(
    cfg: ExperimentConfig,
    registry: RunRegistry,
    out: str | None,
    manifest_path: str,
    save_masks: bool = True,
) -> dict:
    started = time.time()
    run_id = new_run_id()
    out_dir = resolve_run_dir(out, run_id)
    manifest = load_manifest(manifest_path)
    seg_cfg = build_segment_config(cfg)
    entries = []
    dice_by_label: dict[str, list[float]] = {}
    for e in manifest:
        sl = load_slice(e.path, case_id=e.case_id)
        mask = segment_lungs(sl, seg_cfg)
        masked = apply_mask(sl, mask, background=seg_cfg.background)
        slice_path = os.path.join(out_dir, "slices", f"{e.case_id}.png")
        save_slice(masked, slice_path, fmt="png16")
        if save_masks:
            save_mask(mask, os.path.join(out_dir, "masks", f"{e.case_id}.png"))
        truth_path = os.path.join(os.path.dirname(e.path), "..", "masks",
                                  os.path.basename(e.path))
        if os.path.exists(truth_path):
            truth = load_mask(truth_path)
            dice_by_label.setdefault(e.label, []).append(
                dice_coefficient(mask.bits, truth.bits)
            )
        entries.append(replace(e, path=slice_path))
    result = DatasetManifest(entries=entries)
    manifest_out = save_manifest(result, os.path.join(out_dir, "manifest.tsv"))
    dice_summary = {
        label: float(sum(values) / len(values)) for label, values in dice_by_label.items()
    }
    report_path = _write_json(
        os.path.join(out_dir, "report.json"),
        {"dice_by_label": dice_summary, "n_slices": len(result)},
    )
    outputs = [manifest_out, os.path.join(out_dir, "slices"), report_path]
    if save_masks:
        outputs.append(os.path.join(out_dir, "masks"))
    payload = {
        "run_id": run_id,
        "out_dir": out_dir,
        "manifest": os.path.abspath(manifest_out),
        "dice_by_label": dice_summary,
        "outputs": [os.path.abspath(p) for p in outputs],
    }
    _record(
        registry, run_id, "segment", cfg,
        {"manifest": manifest_fingerprint(manifest, content=True)},
        outputs, started, details={"dice_by_label": dice_summary},
    )
    return payload


def run_pretrain(
    cfg: ExperimentConfig,
    registry: RunRegistry,
    out: str | None,
    normals_path: str,
) -> dict:
    started = time.time()
    run_id = new_run_id()
    out_dir = resolve_run_dir(out, run_id)
    normals = load_manifest(normals_path).filter(label="normal")
    if len(normals) == 0:
        raise WorkflowError(f"no normal slices in {normals_path!r}")
    pipe = build_pipeline_config(cfg)
    steps = cfg.get("gan", "pretrain_steps")
    train_cfg = replace(build_gan_train_config(cfg), steps=steps)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    result = pretrain_on_normals(
        normals,
        train_cfg,
        pipe=pipe,
        gen_spec=build_generator_spec(cfg),
        disc_spec=build_discriminator_spec(cfg),
        out_dir=os.path.join(out_dir, "checkpoints"),
        log_path=log_path,
    )
    ckpt_path = save_checkpoint(result.model, os.path.join(out_dir, "pretrained.ckpt"))
    fig_path = os.path.join(out_dir, "loss_curves.png")
    data_path = os.path.join(out_dir, "loss_curves.tsv")
    save_loss_curves(log_path, fig_path, data_path)
    outputs = [ckpt_path, log_path, fig_path, data_path]
    payload = {
        "run_id": run_id,
        "out_dir": out_dir,
        "checkpoint": os.path.abspath(ckpt_path),
        "steps": steps,
        "outputs": [os.path.abspath(p) for p in outputs],
    }
    _record(
        registry, run_id, "pretrain", cfg,
        {"normals": manifest_fingerprint(normals, content=True)},
        outputs, started, details={"steps": steps},
    )
    return payload


def run_train(
    cfg: ExperimentConfig,
    registry: RunRegistry,
    out: str | None,
    normals_path: str,
    positives_path: str,
    pretrained: str | None = None,
) -> dict:
    started = time.time()
    run_id = new_run_id()
    out_dir = resolve_run_dir(out, run_id)
    normals = load_manifest(normals_path).filter(label="normal")
    positives = load_manifest(positives_path).filter(label="covid")
    if len(normals) == 0 or len(positives) == 0:
        raise WorkflowError("training needs normal and covid slices")
    pipe = build_pipeline_config(cfg)
    model = None
    input_hashes = {
        "normals": manifest_fingerprint(normals, content=True),
        "positives": manifest_fingerprint(positives, content=True),
    }
    if pretrained:
        model, _ = load_checkpoint(pretrained)
        # a warm start counts its own budget from zero
        model.step = 0
        input_hashes["pretrained"] = checkpoint_file_hash(pretrained)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    result = train_ccsgan(
        normals,
        positives,
        build_gan_train_config(cfg),
        pipe=pipe,
        gen_spec=build_generator_spec(cfg),
        disc_spec=build_discriminator_spec(cfg),
        model=model,
        out_dir=os.path.join(out_dir, "checkpoints"),
        log_path=log_path,
    )
    fig_path = os.path.join(out_dir, "loss_curves.png")
    data_path = os.path.join(out_dir, "loss_curves.tsv")
    save_loss_curves(log_path, fig_path, data_path)
    outputs = [result.checkpoint_path, log_path, fig_path, data_path]
    payload = {
        "run_id": run_id,
        "out_dir": out_dir,
        "checkpoint": os.path.abspath(result.checkpoint_path),
        "steps": result.model.step,
        "outputs": [os.path.abspath(p) for p in outputs],
    }
    _record(registry, run_id, "train", cfg, input_hashes, outputs, started,
            details={"steps": result.model.step, "pretrained": bool(pretrained)})
    return payload


def run_generate(
    cfg: ExperimentConfig,
    registry: RunRegistry,
    out: str | None,
    checkpoint: str,
    source_path: str,
    count: int | None = None,
    seed: int | None = None,
    remask: bool | None = None,
) -> dict:
    started = time.time()
    run_id = new_run_id()
    out_dir = resolve_run_dir(out, run_id)
    source = load_manifest(source_path).filter(label="normal")
    synth = cfg.section("synthesis")
    # a calibrated checkpoint carries its own removal level; the config
    # value covers checkpoints saved without one
    _, ckpt_meta = load_checkpoint(checkpoint)
    floor_hu = ckpt_meta.get("synthesis_floor_hu")
    if floor_hu is None:
        floor_hu = synth["floor_snap_hu"]
    job = SynthesisJob(
        checkpoint=checkpoint,
        source=source,
        count=synth["count"] if count is None else count,
        out_dir=out_dir,
        seed=synth["seed"] if seed is None else seed,
        remask=synth["remask"] if remask is None else remask,
        pipe=build_pipeline_config(cfg),
        max_reject_fraction=synth["max_reject_fraction"],
        floor_snap_hu=floor_hu,
        match_source_intensities=synth["match_intensities"],
        carve_from_source=synth["carve_from_source"],
    )
    manifest = generate_synthetic_positives(job)
    manifest_path = os.path.join(out_dir, "manifest.tsv")
    sheet_path = os.path.join(out_dir, "contact_sheet.png")
    stats: dict = {}
    if len(manifest):
        stats = save_contact_sheet(manifest, sheet_path, window=job.pipe.window, limit=64)
    stats_path = _write_json(os.path.join(out_dir, "contact_sheet_stats.json"), stats)
    outputs = [manifest_path, os.path.join(out_dir, "provenance.json"), stats_path]
    if len(manifest):
        outputs.extend([os.path.join(out_dir, "slices"), sheet_path])
    payload = {
        "run_id": run_id,
        "out_dir": out_dir,
        "manifest": os.path.abspath(manifest_path),
        "count": len(manifest),
        "rejected": len(load_provenance(out_dir)["rejected"]),
        "outputs": [os.path.abspath(p) for p in outputs],
    }
    _record(
        registry, run_id, "generate", cfg,
        {
            "checkpoint": checkpoint_file_hash(checkpoint),
            "source": manifest_fingerprint(source, content=True),
        },
        outputs, started, details={"count": len(manifest)},
    )
    return payload


def _load_benchmark(train_path: str, test_path: str) -> BenchmarkData:
    train = load_manifest(train_path)
    test = load_manifest(test_path)
    return BenchmarkData(
        normals=train.filter(label="normal", split="train"),
        positives=train.filter(label="covid", split="train"),
        test=test,
    )


def run_classify(
    cfg: ExperimentConfig,
    registry: RunRegistry,
    out: str | None,
    train_path: str,
    test_path: str,
    k: int | None = None,
    checkpoint: str | None = None,
) -> dict:
    """One benchmark cell: baseline vs augmented at a single k."""
    started = time.time()
    run_id = new_run_id()
    out_dir = resolve_run_dir(out, run_id)
    data = _load_benchmark(train_path, test_path)
    k = cfg.get("ablation", "k") if k is None else k
    pipe = build_pipeline_config(cfg)
    protocol = build_augmentor_protocol(cfg)
    clf_spec = build_classifier_spec(cfg)
    clf_cfg = build_classifier_train_config(cfg)
    seeds = tuple(cfg.get("stress", "seeds"))
    input_hashes = {
        "train_manifest": manifest_fingerprint(data.normals, content=True),
        "positives": manifest_fingerprint(data.positives, content=True),
        "test_manifest": data.test_fingerprint,
    }
    if checkpoint is None:
        augmentor = train_augmentor(data, k, os.path.join(out_dir, "gan"), pipe, protocol)
        checkpoint = augmentor.checkpoint_path
    else:
        input_hashes["checkpoint"] = checkpoint_file_hash(checkpoint)
    baseline = run_baseline(data, k, clf_spec, clf_cfg, pipe, seeds)
    augmented = run_augmented(
        data,
        k,
        checkpoint,
        out_dir,
        clf_spec,
        clf_cfg,
        pipe,
        n_synth=cfg.get("synthesis", "count"),
        target_per_class=min(len(data.normals), cfg.get("stress", "normals_pool")),
        seeds=seeds,
        protocol=protocol,
    )
    report = {
        "k": k,
        "baseline": arm_to_dict(baseline),
        "augmented": arm_to_dict(augmented),
        "checkpoint": os.path.abspath(checkpoint),
        "improved_accuracy": augmented.mean_accuracy >= baseline.mean_accuracy,
        "improved_auc": augmented.mean_auc >= baseline.mean_auc,
    }
    report_path = _write_json(os.path.join(out_dir, "report.json"), report)
    table_path = save_benchmark_table(
        [_arm_row(report["baseline"]), _arm_row(report["augmented"])],
        os.path.join(out_dir, "benchmark_table.tsv"),
    )
    outputs = [report_path, table_path]
    payload = {
        "run_id": run_id,
        "out_dir": out_dir,
        "baseline": {"accuracy": baseline.mean_accuracy, "auc": baseline.mean_auc},
        "augmented": {"accuracy": augmented.mean_accuracy, "auc": augmented.mean_auc},
        "outputs": [os.path.abspath(p) for p in outputs],
    }
    _record(registry, run_id, "classify", cfg, input_hashes, outputs, started,
            details={"k": k})
    return payload


def run_stress(
    cfg: ExperimentConfig,
    registry: RunRegistry,
    out: str | None,
    train_path: str,
    test_path: str,
) -> dict:
    started = time.time()
    run_id = new_run_id()
    out_dir = resolve_run_dir(out, run_id)
    data = _load_benchmark(train_path, test_path)
    stress = cfg.section("stress")
    result = stress_test(
        data,
        out_dir,
        (build_classifier_spec(cfg),),
        build_classifier_train_config(cfg),
        build_pipeline_config(cfg),
        k_values=tuple(stress["k_values"]),
        seeds=tuple(stress["seeds"]),
        n_synth=stress["n_synth"],
        target_per_class=min(len(data.normals), stress["normals_pool"]),
        protocol=build_augmentor_protocol(cfg),
    )
    report_path = _write_json(os.path.join(out_dir, "report.json"), stress_to_dict(result))
    rows = []
    for cell in result.cells:
        rows.append(_arm_row(arm_to_dict(cell.baseline)))
        rows.append(_arm_row(arm_to_dict(cell.augmented)))
    table_path = save_benchmark_table(rows, os.path.join(out_dir, "benchmark_table.tsv"))
    fig_path = os.path.join(out_dir, "accuracy_vs_k.png")
    data_path = os.path.join(out_dir, "accuracy_vs_k.tsv")
    save_accuracy_vs_k(result.curves(), fig_path, data_path)
    outputs = [report_path, table_path, fig_path, data_path]
    payload = {
        "run_id": run_id,
        "out_dir": out_dir,
        "cells": len(result.cells),
        "outputs": [os.path.abspath(p) for p in outputs],
    }
    _record(
        registry, run_id, "stress", cfg,
        {
            "train_manifest": manifest_fingerprint(data.normals, content=True),
            "positives": manifest_fingerprint(data.positives, content=True),
            "test_manifest": data.test_fingerprint,
        },
        outputs, started, details={"k_values": stress["k_values"]},
    )
    return payload


def run_ablate(
    cfg: ExperimentConfig,
    registry: RunRegistry,
    out: str | None,
    train_path: str,
    test_path: str,
) -> dict:
    started = time.time()
    run_id = new_run_id()
    out_dir = resolve_run_dir(out, run_id)
    data = _load_benchmark(train_path, test_path)
    ablation = cfg.section("ablation")
    variants = ablation["variants"]
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise WorkflowError(
            f"unknown ablation variants {unknown}; expected subset of {list(ABLATION_VARIANTS)}"
        )
    stress = cfg.section("stress")
    outcomes = {}
    rows = []
    outputs = []
    for variant in variants:
        variant_dir = os.path.join(out_dir, variant)
        outcome = ablation_run(
            data,
            variant,
            variant_dir,
            build_classifier_spec(cfg),
            build_classifier_train_config(cfg),
            build_pipeline_config(cfg),
            k=ablation["k"],
            seeds=tuple(ablation["seeds"]),
            n_synth=stress["n_synth"],
            target_per_class=min(len(data.normals), stress["normals_pool"]),
            protocol=build_augmentor_protocol(cfg),
        )
        sheet_path = os.path.join(variant_dir, "sample_grid.png")
        sheet_stats = save_contact_sheet(
            outcome.sample_manifest, sheet_path, window=build_pipeline_config(cfg).window
        )
        stats_path = _write_json(
            os.path.join(variant_dir, "sample_grid_stats.json"), sheet_stats
        )
        outcomes[variant] = {
            "arm": arm_to_dict(outcome.arm),
            "tissue_fractions": outcome.tissue_fractions,
            "sample_grid": os.path.abspath(sheet_path),
            "chosen_finetune_steps": outcome.augmentor.chosen_finetune_steps,
        }
        rows.append(_arm_row(arm_to_dict(outcome.arm)))
        outputs.extend([sheet_path, stats_path])
    ordering_ok = None
    if "full" in outcomes:
        full_acc = outcomes["full"]["arm"]["mean_accuracy"]
        ordering_ok = all(
            full_acc >= outcomes[v]["arm"]["mean_accuracy"]
            for v in outcomes
            if v != "full"
        )
    report = {
        "k": ablation["k"],
        "variants": outcomes,
        "full_not_worse_than_ablations": ordering_ok,
    }
    report_path = _write_json(os.path.join(out_dir, "report.json"), report)
    table_path = save_benchmark_table(rows, os.path.join(out_dir, "benchmark_table.tsv"))
    outputs = [report_path, table_path] + outputs
    payload = {
        "run_id": run_id,
        "out_dir": out_dir,
        "variants": {v: outcomes[v]["arm"]["mean_accuracy"] for v in outcomes},
        "full_not_worse_than_ablations": ordering_ok,
        "outputs": [os.path.abspath(p) for p in outputs],
    }
    _record(
        registry, run_id, "ablate", cfg,
        {
            "train_manifest": manifest_fingerprint(data.normals, content=True),
            "positives": manifest_fingerprint(data.positives, content=True),
            "test_manifest": data.test_fingerprint,
        },
        outputs, started, details={"variants": list(variants)},
    )
    return payload


def run_report(
    cfg: ExperimentConfig,
    registry: RunRegistry,
    out: str | None,
    run_ids: list[str],
) -> dict:
    """Bundle tables, curves, and sample grids for the given runs."""
    started = time.time()
    run_id = new_run_id()
    out_dir = resolve_run_dir(out, run_id)
    rows = []
    curves: dict[tuple[str, str], list[tuple[int, float]]] = {}
    outputs: list[str] = []
    sourced: list[str] = []
    for rid in run_ids:
        record = registry.get(rid)
        sourced.append(rid)
        report_json = next(
            (p for p in record.outputs if p.endswith("report.json")), None
        )
        report = None
        if report_json and os.path.exists(report_json):
            with open(report_json, "r", encoding="utf-8") as fh:
                report = json.load(fh)
        if record.command == "classify" and report:
            rows.append(_arm_row(report["baseline"]))
            rows.append(_arm_row(report["augmented"]))
        elif record.command == "stress" and report:
            for cell in report["cells"]:
                for arm_name in ("baseline", "augmented"):
                    arm = cell[arm_name]
                    rows.append(_arm_row(arm))
                    curves.setdefault((arm["preset"], arm_name), []).append(
                        (cell["k"], arm["mean_accuracy"])
                    )
        elif record.command == "ablate" and report:
            for variant in report["variants"].values():
                rows.append(_arm_row(variant["arm"]))
        elif record.command in ("phantom", "generate"):
            manifest_path = next(
                (p for p in record.outputs if p.endswith("manifest.tsv")), None
            )
            if manifest_path and os.path.exists(manifest_path):
                manifest = load_manifest(manifest_path)
                if len(manifest):
                    sheet = os.path.join(out_dir, f"contact_sheet-{rid}.png")
                    stats = save_contact_sheet(manifest, sheet, limit=64)
                    stats_path = _write_json(
                        os.path.join(out_dir, f"contact_sheet-{rid}_stats.json"), stats
                    )
                    outputs.extend([sheet, stats_path])
    if rows:
        outputs.append(
            save_benchmark_table(rows, os.path.join(out_dir, "summary_table.tsv"))
        )
    if curves:
        fig_path = os.path.join(out_dir, "accuracy_vs_k.png")
        data_path = os.path.join(out_dir, "accuracy_vs_k.tsv")
        save_accuracy_vs_k({k: sorted(v) for k, v in curves.items()}, fig_path, data_path)
        outputs.extend([fig_path, data_path])
    payload = {
        "run_id": run_id,
        "out_dir": out_dir,
        "source_runs": sourced,
        "outputs": [os.path.abspath(p) for p in outputs],
    }
    _record(registry, run_id, "report", cfg, {}, outputs, started,
            details={"source_runs": sourced})
    return payload
