"""Benchmark harness: baseline vs augmented classifiers, stress grids,
and ablation variants.

The augmentation pipeline at desk scale is: warm up the translators on
normals (reconstruction), fine-tune against the k real positives, then
generate synthetic positives from held normal slices and top the
positive class up to the target size.  Both warm-up and fine-tune keep
periodic snapshots and the snapshot whose generated output best matches
the real positives (statistics computed from training data only) is the
one used for synthesis; adversarial training at tiny k oscillates, so
picking the best snapshot is far more reliable than taking the last.

Synthesis defaults to carving: the translator decides which source
pixels to remove and the survivors keep their original values, so the
only knob that shifts population statistics is the removal threshold.
Selection therefore sweeps a grid of thresholds per snapshot and keeps
the (snapshot, threshold) pair whose surviving-pixel count median best
matches the real positives; the winning threshold is stored in the
selected checkpoint so downstream synthesis reuses it.

Baseline and augmented arms share the classifier preset, training
protocol, input pipeline, and the fixed test split; the only difference
is the training manifest.  The checkpoint used for augmentation must
have been fine-tuned on exactly the k real positives the baseline
trains on, which is enforced by manifest fingerprint.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .classifier import (
    ClassifierSpec,
    ClassifierTrainConfig,
    evaluate_classifier,
    train_classifier,
)
from .manifest import (
    DatasetManifest,
    ManifestError,
    manifest_fingerprint,
    merge_manifests,
    sample_subset,
)
from .metrics import EvalReport
from .phantom import build_phantom_dataset
from .pipeline import DataPipelineConfig, load_stack
from .segment import SegmentConfig, segment_lungs
from .synthesis import (
    SynthesisJob,
    audit_synthetic_tissue,
    compose_augmented_manifest,
    generate_synthetic_positives,
    match_to_palette,
)
from .training import (
    TrainConfig,
    default_generator_spec,
    load_checkpoint,
    pretrain_on_normals,
    save_checkpoint,
    train_ccsgan,
)
from .data import load_slice
from .networks import GeneratorSpec

ABLATION_VARIANTS = ("full", "no-cycle", "no-segmentation", "resnet-generator")


class ExperimentError(RuntimeError):
    """Bad parameters, insufficient pools, or checkpoint mismatch."""


@dataclass(frozen=True)
class AugmentorProtocol:
    """Desk-calibrated GAN schedule for the augmentation benchmark."""

    pretrain_total: int = 2500
    pretrain_segment: int = 500
    finetune_total: int = 1500
    finetune_segment: int = 150
    probe_count: int = 30
    probe_seed: int = 99
    batch_size: int = 2
    learning_rate: float = 2e-4
    cycle_weight: float = 10.0
    seed: int = 0
    floor_snap_hu: float | None = -880.0
    match_source_intensities: bool = False
    carve_from_source: bool = True
    level_grid: tuple[float, ...] = (
        -990.0, -970.0, -950.0, -930.0, -910.0,
        -890.0, -870.0, -850.0, -830.0, -810.0,
    )
    band_weight: float = 300.0

    def __post_init__(self) -> None:
        if self.pretrain_total > 0 and not 0 < self.pretrain_segment <= self.pretrain_total:
            raise ExperimentError("pretrain_segment must be in (0, pretrain_total]")
        if not 0 < self.finetune_segment <= self.finetune_total:
            raise ExperimentError("finetune_segment must be in (0, finetune_total]")
        if self.probe_count < 1:
            raise ExperimentError("probe_count must be >= 1")
        if self.carve_from_source:
            if self.match_source_intensities:
                raise ExperimentError(
                    "carve_from_source already keeps source intensities; "
                    "drop match_source_intensities"
                )
            if self.floor_snap_hu is None:
                raise ExperimentError(
                    "carve_from_source needs floor_snap_hu as its fallback level"
                )
            if not self.level_grid:
                raise ExperimentError("carve_from_source needs a non-empty level_grid")


@dataclass
class BenchmarkData:
    """Training pools plus the immutable test split for one benchmark."""

    normals: DatasetManifest
    positives: DatasetManifest
    test: DatasetManifest

    def __post_init__(self) -> None:
        for e in self.normals:
            if e.label != "normal" or e.split != "train":
                raise ExperimentError(f"normals pool entry {e.case_id} is {e.split}/{e.label}")
        for e in self.positives:
            if e.label != "covid" or e.split != "train":
                raise ExperimentError(f"positives pool entry {e.case_id} is {e.split}/{e.label}")
        labels = {e.label for e in self.test}
        if labels != {"normal", "covid"}:
            raise ExperimentError(f"test split needs both classes, found {sorted(labels)}")
        merge_manifests(self.normals, self.positives, self.test)

    @property
    def test_fingerprint(self) -> str:
        return manifest_fingerprint(self.test, content=True)


def build_phantom_benchmark(
    root: str,
    n_normals: int = 200,
    n_positives: int = 10,
    test_per_class: int = 50,
    size: int = 64,
    seed: int = 0,
) -> BenchmarkData:
    train = build_phantom_dataset(
        os.path.join(root, "train"),
        n_normal=n_normals,
        n_covid=n_positives,
        size=size,
        seed=seed,
        split="train",
        case_prefix="trn",
    )
    test = build_phantom_dataset(
        os.path.join(root, "test"),
        n_normal=test_per_class,
        n_covid=test_per_class,
        size=size,
        seed=seed + 1_000_003,
        split="test",
        case_prefix="tst",
    )
    return BenchmarkData(
        normals=train.filter(label="normal"),
        positives=train.filter(label="covid"),
        test=test,
    )


def select_positives(data: BenchmarkData, k: int) -> DatasetManifest:
    """The fixed k-positive subset shared by every arm at this k."""
    if k < 1 or k > len(data.positives):
        raise ExperimentError(
            f"k={k} positives requested but the pool holds {len(data.positives)}"
        )
    return sample_subset(data.positives, label="covid", split="train", n=k, seed=k)


@dataclass
class ArmResult:
    arm: str
    preset: str
    k: int
    n_real_pos: int
    n_synth: int
    n_normal: int
    seeds: list[int]
    reports: dict[int, EvalReport]
    mean_accuracy: float
    mean_auc: float
    test_fingerprint: str
    train_fingerprints: dict[int, str] = field(default_factory=dict)
    details: dict = field(default_factory=dict)


def arm_to_dict(result: ArmResult) -> dict:
    payload = asdict(result)
    payload["reports"] = {
        str(seed): asdict(report) for seed, report in result.reports.items()
    }
    payload["train_fingerprints"] = {
        str(seed): fp for seed, fp in result.train_fingerprints.items()
    }
    return payload


def _aggregate(
    arm: str,
    preset: str,
    k: int,
    counts: tuple[int, int, int],
    data: BenchmarkData,
    reports: dict[int, EvalReport],
    fingerprints: dict[int, str],
    details: dict | None = None,
) -> ArmResult:
    accs = [r.accuracy for r in reports.values()]
    aucs = [r.auc for r in reports.values()]
    return ArmResult(
        arm=arm,
        preset=preset,
        k=k,
        n_real_pos=counts[0],
        n_synth=counts[1],
        n_normal=counts[2],
        seeds=sorted(reports),
        reports=reports,
        mean_accuracy=float(np.mean(accs)),
        mean_auc=float(np.mean(aucs)),
        test_fingerprint=data.test_fingerprint,
        train_fingerprints=fingerprints,
        details=details or {},
    )


def run_baseline(
    data: BenchmarkData,
    k: int,
    clf_spec: ClassifierSpec,
    clf_cfg: ClassifierTrainConfig,
    pipe: DataPipelineConfig,
    seeds: tuple[int, ...] = (0, 1, 2),
) -> ArmResult:
    """Balanced k-vs-k training, evaluated on the fixed test split."""
    positives_k = select_positives(data, k)
    if k > len(data.normals):
        raise ExperimentError(f"baseline needs {k} normals, pool has {len(data.normals)}")
    reports: dict[int, EvalReport] = {}
    fingerprints: dict[int, str] = {}
    for seed in seeds:
        normals_k = sample_subset(data.normals, label="normal", split="train", n=k, seed=seed)
        train_m = merge_manifests(positives_k, normals_k)
        cfg = ClassifierTrainConfig(
            epochs=clf_cfg.epochs,
            learning_rate=clf_cfg.learning_rate,
            batch_size=clf_cfg.batch_size,
            seed=seed,
        )
        model, _ = train_classifier(clf_spec, train_m, cfg, pipe)
        reports[seed] = evaluate_classifier(model, data.test, pipe)
        fingerprints[seed] = manifest_fingerprint(train_m)
    return _aggregate(
        "baseline", clf_spec.preset, k, (k, 0, k), data, reports, fingerprints
    )


def _active_counts(stack: np.ndarray) -> np.ndarray:
    return (stack > -0.9999).reshape(len(stack), -1).sum(axis=1)


def _carve_counts(sources: np.ndarray, rendered: np.ndarray, level: float) -> np.ndarray:
    """Per-slice count of source pixels that would survive carving.

    A pixel survives when the source holds tissue and the rendering
    keeps it above the removal level; this mirrors the carving composite
    in synthesis exactly, so probe counts predict output counts.
    """
    keep = (sources > -1.0) & (rendered > level)
    return keep.reshape(len(sources), -1).sum(axis=1)


def _band_mass(stack: np.ndarray, band: tuple[float, float]) -> float:
    active = stack[stack > -0.9999]
    if active.size == 0:
        return 0.0
    lo, hi = band
    return float(((active > lo) & (active <= hi)).mean())


def realism_reference(real_positives_stack: np.ndarray) -> dict:
    """Statistics of the real positives that candidates are scored against."""
    active_values = real_positives_stack[real_positives_stack > -0.9999]
    if active_values.size == 0:
        raise ExperimentError("real positives have no foreground pixels")
    band = (
        float(np.quantile(active_values, 0.05)),
        float(np.quantile(active_values, 0.95)),
    )
    return {
        "median_active": float(np.median(_active_counts(real_positives_stack))),
        "band": band,
        "band_mass": _band_mass(real_positives_stack, band),
    }


def realism_score(candidate_stack: np.ndarray, reference: dict, band_weight: float) -> float:
    """Lower is better: pixel-count gap plus intensity-band mass gap."""
    med = float(np.median(_active_counts(candidate_stack)))
    mass = _band_mass(candidate_stack, reference["band"])
    return abs(med - reference["median_active"]) + band_weight * abs(
        mass - reference["band_mass"]
    )


@dataclass
class AugmentorResult:
    checkpoint_path: str
    positives_hash: str
    pretrain_trace: list[dict]
    finetune_trace: list[dict]
    chosen_pretrain_steps: int
    chosen_finetune_steps: int
    chosen_floor_snap_hu: float | None = None
    log_path: str | None = None


def train_augmentor(
    data: BenchmarkData,
    k: int,
    out_dir: str,
    pipe: DataPipelineConfig,
    protocol: AugmentorProtocol = AugmentorProtocol(),
    gen_spec: GeneratorSpec | None = None,
    cycle_weight: float | None = None,
    synth_pipe: DataPipelineConfig | None = None,
) -> AugmentorResult:
    """Warm up, fine-tune, and select the best snapshot for synthesis.

    ``synth_pipe`` lets a variant train and generate through a different
    input pipeline (the no-segmentation ablation) while scoring still
    runs on whatever that pipeline produces.
    """
    os.makedirs(out_dir, exist_ok=True)
    positives_k = select_positives(data, k)
    work_pipe = synth_pipe or pipe
    weight = protocol.cycle_weight if cycle_weight is None else cycle_weight
    x_real, _ = load_stack(positives_k, work_pipe)
    reference = realism_reference(x_real[:, 0])
    x_norm, _ = load_stack(data.normals, work_pipe)
    lo, hi = work_pipe.window

    def to_window(level_hu: float) -> float:
        return (float(level_hu) - lo) / (hi - lo) * 2.0 - 1.0

    # a fixed probe subset of the source pool stands in for the full
    # synthesis run when scoring snapshots
    probe_n = min(protocol.probe_count, len(x_norm))
    probe_idx = np.random.default_rng(protocol.probe_seed).permutation(len(x_norm))[:probe_n]
    probe_in = x_norm[probe_idx]
    probe_src = probe_in[:, 0]

    def render(m) -> np.ndarray:
        m.eval_mode()
        with torch.no_grad():
            return m.g(torch.from_numpy(probe_in).float()).numpy()[:, 0]

    def snap(values: np.ndarray) -> np.ndarray:
        if protocol.floor_snap_hu is None:
            return values
        return np.where(values <= to_window(protocol.floor_snap_hu), -1.0, values)

    # warm-up: reconstruction on normals; under carving the best warm-up
    # is the one that would remove the least (closest to identity),
    # otherwise it is the one whose renderings carry the most mass
    # inside the real intensity band
    pretrain_trace: list[dict] = []
    chosen_pre = 0
    pre_model = None
    if protocol.pretrain_total > 0:
        best_gauge = None
        pre_path = os.path.join(out_dir, "pretrained.ckpt")
        segments = max(1, protocol.pretrain_total // protocol.pretrain_segment)
        running = None
        for i in range(segments):
            result = pretrain_on_normals(
                data.normals,
                TrainConfig(
                    steps=protocol.pretrain_segment,
                    batch_size=protocol.batch_size,
                    learning_rate=protocol.learning_rate,
                    cycle_weight=weight,
                    seed=protocol.seed + i,
                ),
                pipe=work_pipe,
                gen_spec=gen_spec,
                model=running,
            )
            running = result.model
            rendered = render(running)
            steps_done = (i + 1) * protocol.pretrain_segment
            if protocol.carve_from_source:
                counts = _carve_counts(
                    probe_src, rendered, to_window(protocol.floor_snap_hu)
                )
                gauge = float(np.median(counts))
                pretrain_trace.append({"steps": steps_done, "median_active": gauge})
            else:
                gauge = _band_mass(snap(rendered), reference["band"])
                pretrain_trace.append({"steps": steps_done, "band_mass": gauge})
            if best_gauge is None or gauge > best_gauge:
                best_gauge = gauge
                chosen_pre = steps_done
                save_checkpoint(running, pre_path)
        pre_model, _ = load_checkpoint(pre_path)

    # fine-tune against the k positives, scoring each snapshot on the
    # probe subset; lower score means closer to the real positives
    finetune_trace: list[dict] = []
    best = None
    model = pre_model
    log_path = os.path.join(out_dir, "train_log.jsonl")
    segments = max(1, protocol.finetune_total // protocol.finetune_segment)
    for i in range(segments):
        result = train_ccsgan(
            data.normals,
            positives_k,
            TrainConfig(
                steps=protocol.finetune_segment * (i + 1),
                batch_size=protocol.batch_size,
                learning_rate=protocol.learning_rate,
                cycle_weight=weight,
                seed=protocol.seed,
            ),
            pipe=work_pipe,
            gen_spec=gen_spec,
            model=model,
            out_dir=os.path.join(out_dir, f"segment-{i:02d}"),
            log_path=log_path,
        )
        model = result.model
        rendered = render(model)
        steps_done = protocol.finetune_segment * (i + 1)
        if protocol.carve_from_source:
            # carving keeps source values, so the count of surviving
            # pixels is the one statistic the threshold shifts; sweep
            # the grid and keep this snapshot's best threshold
            cand = None
            for level_hu in protocol.level_grid:
                counts = _carve_counts(probe_src, rendered, to_window(level_hu))
                gap = abs(float(np.median(counts)) - reference["median_active"])
                if cand is None or gap < cand[0]:
                    cand = (gap, level_hu)
            score, level_hu = cand
        elif protocol.floor_snap_hu is None:
            score = realism_score(rendered, reference, protocol.band_weight)
            level_hu = None
        else:
            snapped = snap(rendered)
            if protocol.match_source_intensities:
                snapped = snapped.copy()
                for j in range(len(snapped)):
                    active = snapped[j] > -1.0
                    palette = probe_src[j][probe_src[j] > -1.0]
                    if active.any() and palette.size:
                        snapped[j][active] = match_to_palette(
                            snapped[j][active], palette
                        )
            score = realism_score(snapped, reference, protocol.band_weight)
            level_hu = protocol.floor_snap_hu
        finetune_trace.append(
            {"steps": steps_done, "score": score, "level_hu": level_hu}
        )
        if best is None or score < best[0]:
            best = (score, steps_done, result.checkpoint_path, level_hu)

    selected = os.path.join(out_dir, "selected.ckpt")
    chosen_model, meta = load_checkpoint(best[2])
    save_checkpoint(
        chosen_model,
        selected,
        config_hash=meta.get("config_hash", ""),
        positives_hash=meta.get("positives_hash", ""),
        synthesis_floor_hu=best[3],
    )
    return AugmentorResult(
        checkpoint_path=selected,
        positives_hash=manifest_fingerprint(positives_k, content=True),
        pretrain_trace=pretrain_trace,
        finetune_trace=finetune_trace,
        chosen_pretrain_steps=chosen_pre,
        chosen_finetune_steps=best[1],
        chosen_floor_snap_hu=best[3],
        log_path=log_path,
    )


def run_augmented(
    data: BenchmarkData,
    k: int,
    checkpoint: str,
    out_dir: str,
    clf_spec: ClassifierSpec,
    clf_cfg: ClassifierTrainConfig,
    pipe: DataPipelineConfig,
    n_synth: int = 200,
    target_per_class: int = 200,
    seeds: tuple[int, ...] = (0, 1, 2),
    protocol: AugmentorProtocol = AugmentorProtocol(),
    synth_pipe: DataPipelineConfig | None = None,
    remask: bool = True,
) -> ArmResult:
    """Classifier trained on real + synthetic positives vs normals.

    The checkpoint must have been fine-tuned on exactly the k real
    positives the baseline uses; anything else is an audit failure.
    """
    positives_k = select_positives(data, k)
    expected_hash = manifest_fingerprint(positives_k, content=True)
    _, meta = load_checkpoint(checkpoint)
    if meta.get("positives_hash") != expected_hash:
        raise ExperimentError(
            f"checkpoint {checkpoint!r} was not fine-tuned on the same "
            f"{k} real positives as the baseline (fingerprint mismatch)"
        )
    # a calibrated checkpoint carries its own removal level; fall back
    # to the protocol's for checkpoints trained elsewhere
    floor_hu = meta.get("synthesis_floor_hu")
    if floor_hu is None:
        floor_hu = protocol.floor_snap_hu
    work_pipe = synth_pipe or pipe
    reports: dict[int, EvalReport] = {}
    fingerprints: dict[int, str] = {}
    synth_count = None
    for seed in seeds:
        job = SynthesisJob(
            checkpoint=checkpoint,
            source=data.normals,
            count=min(n_synth, len(data.normals)),
            out_dir=os.path.join(out_dir, f"synth-seed{seed}"),
            seed=seed,
            pipe=work_pipe,
            remask=remask,
            floor_snap_hu=floor_hu,
            match_source_intensities=protocol.match_source_intensities,
            carve_from_source=protocol.carve_from_source,
        )
        synthetic = generate_synthetic_positives(job)
        synth_count = len(synthetic)
        train_m = compose_augmented_manifest(
            positives_k, synthetic, data.normals, target_per_class, data.test
        )
        cfg = ClassifierTrainConfig(
            epochs=clf_cfg.epochs,
            learning_rate=clf_cfg.learning_rate,
            batch_size=clf_cfg.batch_size,
            seed=seed,
        )
        model, _ = train_classifier(clf_spec, train_m, cfg, pipe)
        reports[seed] = evaluate_classifier(model, data.test, pipe)
        fingerprints[seed] = manifest_fingerprint(train_m)
    return _aggregate(
        "augmented",
        clf_spec.preset,
        k,
        (k, synth_count or 0, target_per_class),
        data,
        reports,
        fingerprints,
        details={"checkpoint": os.path.abspath(checkpoint)},
    )


@dataclass
class StressCell:
    k: int
    preset: str
    baseline: ArmResult
    augmented: ArmResult


@dataclass
class StressTestResult:
    cells: list[StressCell]
    test_fingerprint: str

    def curves(self) -> dict[tuple[str, str], list[tuple[int, float]]]:
        out: dict[tuple[str, str], list[tuple[int, float]]] = {}
        for cell in self.cells:
            out.setdefault((cell.preset, "baseline"), []).append(
                (cell.k, cell.baseline.mean_accuracy)
            )
            out.setdefault((cell.preset, "augmented"), []).append(
                (cell.k, cell.augmented.mean_accuracy)
            )
        return out


def stress_test(
    data: BenchmarkData,
    out_dir: str,
    clf_specs: tuple[ClassifierSpec, ...],
    clf_cfg: ClassifierTrainConfig,
    pipe: DataPipelineConfig,
    k_values: tuple[int, ...] = (10, 20, 30, 40, 50),
    seeds: tuple[int, ...] = (0, 1, 2),
    n_synth: int = 200,
    target_per_class: int = 200,
    protocol: AugmentorProtocol = AugmentorProtocol(),
) -> StressTestResult:
    """Full baseline/augmented grid over k, sharing one test split."""
    if max(k_values) > len(data.positives):
        raise ExperimentError(
            f"stress grid needs {max(k_values)} positives, pool has {len(data.positives)}"
        )
    cells = []
    for k in k_values:
        gan_dir = os.path.join(out_dir, f"gan-k{k}")
        augmentor = train_augmentor(data, k, gan_dir, pipe, protocol)
        for clf_spec in clf_specs:
            baseline = run_baseline(data, k, clf_spec, clf_cfg, pipe, seeds)
            augmented = run_augmented(
                data,
                k,
                augmentor.checkpoint_path,
                os.path.join(out_dir, f"aug-k{k}-{clf_spec.preset}"),
                clf_spec,
                clf_cfg,
                pipe,
                n_synth=n_synth,
                target_per_class=target_per_class,
                seeds=seeds,
                protocol=protocol,
            )
            cells.append(StressCell(k=k, preset=clf_spec.preset, baseline=baseline, augmented=augmented))
    return StressTestResult(cells=cells, test_fingerprint=data.test_fingerprint)


def stress_to_dict(result: StressTestResult) -> dict:
    return {
        "test_fingerprint": result.test_fingerprint,
        "cells": [
            {
                "k": cell.k,
                "preset": cell.preset,
                "baseline": arm_to_dict(cell.baseline),
                "augmented": arm_to_dict(cell.augmented),
            }
            for cell in result.cells
        ],
    }


@dataclass
class AblationOutcome:
    variant: str
    arm: ArmResult
    sample_manifest: DatasetManifest
    tissue_fractions: dict[str, float]
    augmentor: AugmentorResult


def _variant_settings(
    variant: str, pipe: DataPipelineConfig, protocol: AugmentorProtocol
) -> tuple[DataPipelineConfig | None, float | None, GeneratorSpec | None, AugmentorProtocol, bool]:
    """(synth_pipe, cycle_weight, gen_spec, protocol, remask) per variant."""
    if variant == "full":
        return None, None, None, protocol, True
    if variant == "no-cycle":
        return None, 0.0, None, protocol, True
    if variant == "no-segmentation":
        raw_pipe = DataPipelineConfig(
            side=pipe.side, window=pipe.window, seg=pipe.seg, segment_inputs=False
        )
        # floor snapping, palette matching, and carving assume masked
        # inputs, so the unsegmented variant generates raw translator
        # output
        raw_protocol = replace(
            protocol,
            floor_snap_hu=None,
            match_source_intensities=False,
            carve_from_source=False,
        )
        return raw_pipe, None, None, raw_protocol, False
    if variant == "resnet-generator":
        spec = GeneratorSpec(
            input_side=pipe.side,
            depth=default_generator_spec(pipe.side).depth,
            arch="resnet",
        )
        return None, None, spec, protocol, True
    raise ExperimentError(
        f"unknown ablation variant {variant!r}; expected one of {ABLATION_VARIANTS}"
    )


def ablation_run(
    data: BenchmarkData,
    variant: str,
    out_dir: str,
    clf_spec: ClassifierSpec,
    clf_cfg: ClassifierTrainConfig,
    pipe: DataPipelineConfig,
    k: int = 10,
    seeds: tuple[int, ...] = (0, 1, 2),
    n_synth: int = 200,
    target_per_class: int = 200,
    protocol: AugmentorProtocol = AugmentorProtocol(),
    sample_count: int = 16,
) -> AblationOutcome:
    """Train one pipeline variant end to end and benchmark it."""
    synth_pipe, cycle_weight, gen_spec, eff_protocol, remask = _variant_settings(
        variant, pipe, protocol
    )
    gan_dir = os.path.join(out_dir, "gan")
    augmentor = train_augmentor(
        data,
        k,
        gan_dir,
        pipe,
        eff_protocol,
        gen_spec=gen_spec,
        cycle_weight=cycle_weight,
        synth_pipe=synth_pipe,
    )
    arm = run_augmented(
        data,
        k,
        augmentor.checkpoint_path,
        out_dir,
        clf_spec,
        clf_cfg,
        pipe,
        n_synth=n_synth,
        target_per_class=target_per_class,
        seeds=seeds,
        protocol=eff_protocol,
        synth_pipe=synth_pipe,
        remask=remask,
    )
    arm.arm = variant
    sample_dir = os.path.join(out_dir, "samples")
    sample_floor = augmentor.chosen_floor_snap_hu
    if sample_floor is None:
        sample_floor = eff_protocol.floor_snap_hu
    sample_job = SynthesisJob(
        checkpoint=augmentor.checkpoint_path,
        source=data.normals,
        count=min(sample_count, len(data.normals)),
        out_dir=sample_dir,
        seed=eff_protocol.probe_seed,
        pipe=synth_pipe or pipe,
        remask=remask,
        floor_snap_hu=sample_floor,
        match_source_intensities=eff_protocol.match_source_intensities,
        carve_from_source=eff_protocol.carve_from_source,
    )
    samples = generate_synthetic_positives(sample_job)
    return AblationOutcome(
        variant=variant,
        arm=arm,
        sample_manifest=samples,
        tissue_fractions=audit_synthetic_tissue(samples),
        augmentor=augmentor,
    )


def outside_mask_activity(manifest: DatasetManifest, seg: SegmentConfig) -> dict[str, int]:
    """Per-slice count of above-floor pixels outside the slice's own lung mask.

    Masked synthesis keeps this at zero; unsegmented synthesis leaves the
    body and bone in place, so every slice shows outside-mask activity.
    """
    out = {}
    for e in manifest:
        sl = load_slice(e.path, case_id=e.case_id)
        bits = segment_lungs(sl, seg).bits
        background = sl.hu.min()
        out[e.case_id] = int(((sl.hu > background) & ~bits).sum())
    return out
