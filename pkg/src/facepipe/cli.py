"""Pipeline orchestration and command-line entry point.

Train side: preprocess -> augment -> render (-> export / embed).
Test side: preprocess -> render -> embed -> sqrt normalize -> PCA -> match.

Scans are PLY files named <subject>_<scan>.ply; the subject label is the
stem up to the first underscore. Every command reads one JSON config,
writes its resolved copy next to the outputs, and logs one line per item
to stderr. Exit status is 0 only if every item succeeded.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from facepipe.augmentation import AugmentPlan, apply_patches, augment_subject
from facepipe.depthmap import (
    DepthMap,
    RenderParams,
    export_pgm,
    load_pgm,
    median_filter,
    normalize,
    render_depth,
    resize,
)
from facepipe.embedding import (
    baseline_train,
    external_backend,
    pca_fit_variance,
    pca_transform,
    sqrt_normalize,
)
from facepipe.matching import Gallery, MatchAccountingError, cmc, identify, roc
from facepipe.morphable import FitConfig, MorphableModel, load_model, make_toy_model
from facepipe.pointcloud import NeighborIndex, PointCloud, load_ply, save_ply
from facepipe.registration import IcpParams, preprocess_with_result

__all__ = [
    "PipelineConfig",
    "load_config",
    "cmd_preprocess",
    "cmd_augment",
    "cmd_render",
    "cmd_evaluate",
    "main",
]

log = logging.getLogger("facepipe")


@dataclass(frozen=True)
class ToyModelConfig:
    n_vertices: int = 2000
    ks: int = 10
    ke: int = 29
    seed: int = 0


@dataclass(frozen=True)
class RenderConfig:
    crop_radius: float = 100.0
    output_size: int = 200
    final_size: int = 224
    median_kernel: int = 3
    fixed_depth_range: tuple[float, float] | None = None

    def params(self) -> RenderParams:
        return RenderParams(self.crop_radius, self.output_size)


@dataclass(frozen=True)
class EmbeddingConfig:
    backend: str = "baseline"  # "baseline" | "external"
    dimension: int = 256
    pca_variance_target: float = 0.95
    train_dir: str | None = None
    feature_dir: str | None = None


@dataclass(frozen=True)
class MatchingConfig:
    pca_mode: str = "union"  # "union" | "gallery"


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    reference_model_path: str | None = None
    morphable_model_path: str | None = None
    toy_model: ToyModelConfig = field(default_factory=ToyModelConfig)
    icp: IcpParams = field(default_factory=IcpParams)
    fit: FitConfig = field(default_factory=FitConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    augment: AugmentPlan = field(default_factory=AugmentPlan)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    matching: MatchingConfig = field(default_factory=MatchingConfig)

    def load_morphable(self) -> MorphableModel:
        if self.morphable_model_path is not None:
            return load_model(self.morphable_model_path)
        t = self.toy_model
        return make_toy_model(t.n_vertices, t.ks, t.ke, t.seed)

    def load_reference(self) -> PointCloud:
        if self.reference_model_path is not None:
            return load_ply(self.reference_model_path)
        return self.load_morphable().mean_cloud()


def _build(cls, data: dict, where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown config keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if name == "fixed_depth_range" and value is not None:
            value = (float(value[0]), float(value[1]))
        elif isinstance(value, dict):
            nested = {
                "toy_model": ToyModelConfig,
                "icp": IcpParams,
                "fit": FitConfig,
                "render": RenderConfig,
                "augment": AugmentPlan,
                "embedding": EmbeddingConfig,
                "matching": MatchingConfig,
            }[name]
            value = _build(nested, value, f"{where}.{name}")
        kwargs[name] = value
    return cls(**kwargs)


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Config from JSON with defaults; `overrides` wins over the file."""
    data = {}
    if path is not None:
        data = json.loads(Path(path).read_text())
    if overrides:
        for key, value in overrides.items():
            if value is not None:
                data[key] = value
    # an unset or null augment seed inherits the master seed
    aug = data.setdefault("augment", {})
    if not isinstance(aug, dict):
        raise ValueError("config key 'augment' must be an object")
    if aug.get("seed") is None:
        aug["seed"] = data.get("seed", 0)
    return _build(PipelineConfig, data, "config")


def _config_json(config: PipelineConfig) -> str:
    return json.dumps(dataclasses.asdict(config), sort_keys=True, indent=2) + "\n"


def _write_resolved_config(config: PipelineConfig, out_dir: Path) -> None:
    (out_dir / "config.resolved.json").write_text(_config_json(config))


def _ply_files(directory: Path) -> list[Path]:
    files = sorted(Path(directory).glob("*.ply"))
    if not files:
        raise FileNotFoundError(f"no inputs: no .ply files in {directory}")
    return files


def _subject_of(stem: str) -> str:
    return stem.split("_")[0]


def _derived_seed(*parts) -> int:
    """Stable 63-bit seed from a master seed plus string/int context."""
    text = ":".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _run_items(fn, items, workers: int) -> list[tuple[str, str | None]]:
    """Run fn(item) per item; returns (label, error-or-None) pairs in order."""

    def guarded(item):
        try:
            return fn(item)
        except Exception as exc:  # per-item isolation; commands keep going
            return str(item), f"{type(exc).__name__}: {exc}"

    if workers <= 1:
        return [guarded(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(guarded, items))


def _report(results) -> int:
    failures = 0
    for label, error in results:
        if error is None:
            continue
        failures += 1
        log.error("FAILED %s: %s", label, error)
    return failures


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_preprocess(input_dir, output_dir, config: PipelineConfig, workers: int = 1) -> int:
    """Align and crop every scan; returns the number of failed scans."""
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    files = _ply_files(input_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    reference = config.load_reference()
    index = NeighborIndex(reference.points)

    def one(path: Path):
        cloud = load_ply(path)
        aligned, icp = preprocess_with_result(
            cloud, reference, config.icp, config.render.crop_radius, index
        )
        save_ply(aligned, output_dir / path.name)
        log.info(
            "preprocess %s: rmse %.4f mm, %d iterations%s",
            path.name, icp.rmse, icp.iterations_used,
            "" if icp.converged else " (no convergence)",
        )
        return path.name, None

    results = _run_items(one, files, workers)
    _write_resolved_config(config, output_dir)
    return _report(results)


def cmd_augment(input_dir, output_dir, config: PipelineConfig, workers: int = 1) -> int:
    """Expression variants for each subject's first scan, pose variants for all.

    Writes a manifest mapping every output file to its provenance.
    """
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    files = _ply_files(input_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    model = config.load_morphable()
    plan = config.augment

    subjects: dict[str, list[Path]] = {}
    for path in files:
        subjects.setdefault(_subject_of(path.stem), []).append(path)

    tasks = []
    for subject in sorted(subjects):
        for scan_pos, path in enumerate(sorted(subjects[subject])):
            tasks.append((subject, scan_pos, path))

    manifest: dict[str, dict] = {}

    def one(task):
        subject, scan_pos, path = task
        scan = load_ply(path)
        expressions = plan.expressions_per_subject if scan_pos == 0 else 0
        seed = _derived_seed(plan.seed, subject, scan_pos)
        local_plan = dataclasses.replace(
            plan, expressions_per_subject=expressions, seed=seed
        )
        clouds = augment_subject(scan, model, local_plan, config.fit)
        for k, cloud in enumerate(clouds):
            kind = "expression" if k < expressions else "pose"
            counter = k if k < expressions else k - expressions
            name = f"{path.stem}_{'expr' if kind == 'expression' else 'pose'}{counter:02d}.ply"
            save_ply(cloud, output_dir / name)
            manifest[name] = {
                "source": path.name,
                "subject": subject,
                "kind": kind,
                "index": counter,
                "seed": seed,
            }
        log.info("augment %s: %d outputs", path.name, len(clouds))
        return path.name, None

    results = _run_items(one, tasks, workers)
    (output_dir / "manifest.json").write_text(
        json.dumps(dict(sorted(manifest.items())), sort_keys=True, indent=2) + "\n"
    )
    _write_resolved_config(config, output_dir)
    return _report(results)


def render_pipeline(cloud: PointCloud, render_cfg: RenderConfig) -> DepthMap:
    """Render, median-filter, normalize, and resize one aligned cloud."""
    dmap = render_depth(cloud, render_cfg.params())
    dmap = median_filter(dmap, render_cfg.median_kernel)
    dmap = normalize(dmap, render_cfg.fixed_depth_range)
    return resize(dmap, render_cfg.final_size)


def cmd_render(
    input_dir, output_dir, config: PipelineConfig, patches: bool = False, workers: int = 1
) -> int:
    """Render every aligned PLY to a normalized 16-bit PGM (optionally patched)."""
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    files = _ply_files(input_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    plan = config.augment

    def one(path: Path):
        dmap = render_pipeline(load_ply(path), config.render)
        export_pgm(dmap, output_dir / f"{path.stem}.pgm")
        count = 1
        if patches:
            rng = np.random.default_rng(_derived_seed(config.seed, "patches", path.stem))
            for k in range(plan.patch_variants_per_scan):
                patched = apply_patches(dmap, rng, plan.patch_count, plan.patch_size)
                export_pgm(patched, output_dir / f"{path.stem}_patch{k:02d}.pgm")
                count += 1
        log.info("render %s: %d maps", path.name, count)
        return path.name, None

    results = _run_items(one, files, workers)
    _write_resolved_config(config, output_dir)
    return _report(results)


def _load_maps(directory: Path) -> dict[str, DepthMap]:
    files = sorted(Path(directory).glob("*.pgm"))
    if not files:
        raise FileNotFoundError(f"no inputs: no .pgm files in {directory}")
    return {f.stem: load_pgm(f) for f in files}


def _make_backend(config: PipelineConfig, gallery_maps: dict[str, DepthMap]):
    emb = config.embedding
    if emb.backend == "external":
        if emb.feature_dir is None:
            raise ValueError("external backend requires embedding.feature_dir")
        return external_backend(emb.feature_dir)
    if emb.backend != "baseline":
        raise ValueError(f"unknown embedding backend {emb.backend!r}")
    if emb.train_dir is not None:
        train_maps = list(_load_maps(Path(emb.train_dir)).values())
    else:
        train_maps = list(gallery_maps.values())
    return baseline_train(train_maps, emb.dimension, config.render.final_size)


def cmd_evaluate(gallery_dir, probe_dir, config: PipelineConfig, report_dir) -> int:
    """Embed, normalize, project, and match probes against the gallery.

    Writes cmc.csv, roc.csv, and summary.json under report_dir.
    """
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    gallery_maps = _load_maps(Path(gallery_dir))
    probe_maps = _load_maps(Path(probe_dir))

    gallery_subjects = {_subject_of(stem) for stem in gallery_maps}
    missing = sorted(
        stem for stem in probe_maps if _subject_of(stem) not in gallery_subjects
    )
    if missing:
        raise MatchAccountingError(
            f"probe subjects absent from gallery: {', '.join(missing)}"
        )

    backend = _make_backend(config, gallery_maps)
    gallery_feats = {
        stem: sqrt_normalize(backend.embed(m)) for stem, m in gallery_maps.items()
    }
    probe_feats = {
        stem: sqrt_normalize(backend.embed(m)) for stem, m in probe_maps.items()
    }

    mode = config.matching.pca_mode
    if mode not in ("union", "gallery"):
        raise ValueError(f"unknown pca_mode {mode!r}")
    fit_feats = list(gallery_feats.values())
    if mode == "union":
        fit_feats += list(probe_feats.values())
    cap = max(1, len(gallery_feats) - 1)
    pca = pca_fit_variance(
        np.stack(fit_feats), config.embedding.pca_variance_target, cap
    )

    gallery = Gallery(
        [(_subject_of(stem), pca_transform(pca, f)) for stem, f in sorted(gallery_feats.items())]
    )
    results = []
    genuine: list[float] = []
    impostor: list[float] = []
    rank1 = rank2 = 0
    for stem in sorted(probe_feats):
        true_id = _subject_of(stem)
        ranked = identify(pca_transform(pca, probe_feats[stem]), gallery)
        results.append((true_id, ranked))
        top = [sid for sid, _ in ranked]
        rank1 += top[0] == true_id
        rank2 += true_id in top[:2]
        best_genuine = min(d for sid, d in ranked if sid == true_id)
        genuine.append(best_genuine)
        impostor.extend(d for sid, d in ranked if sid != true_id)
        log.info("probe %s: rank-1 %s (distance %.6f)", stem, top[0], ranked[0][1])

    curve = cmc(results, max_rank=len(gallery))
    roc_curve = roc(genuine, impostor)

    with (report_dir / "cmc.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "accuracy"])
        for r, acc in enumerate(curve, start=1):
            writer.writerow([r, repr(float(acc))])
    with (report_dir / "roc.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["far", "vr"])
        for far, vr in roc_curve:
            writer.writerow([repr(float(far)), repr(float(vr))])
    summary = {
        "gallery_size": len(gallery),
        "probe_count": len(results),
        "rank1_accuracy": rank1 / len(results),
        "rank2_accuracy": rank2 / len(results),
        "pca_components": pca.k,
        "pca_mode": mode,
        "backend": config.embedding.backend,
    }
    (report_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n"
    )
    _write_resolved_config(config, report_dir)
    log.info(
        "evaluate: rank-1 %.4f rank-2 %.4f over %d probes",
        summary["rank1_accuracy"], summary["rank2_accuracy"], len(results),
    )
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facepipe", description="3D face identification pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument(
            "--workers", type=int, default=os.cpu_count() or 1,
            help="parallel workers (default: number of processors)",
        )

    p = sub.add_parser("preprocess", help="align and crop raw scans")
    p.add_argument("input_dir", type=Path)
    p.add_argument("output_dir", type=Path)
    common(p)

    p = sub.add_parser("augment", help="generate expression and pose variants")
    p.add_argument("input_dir", type=Path)
    p.add_argument("output_dir", type=Path)
    common(p)

    p = sub.add_parser("render", help="render aligned scans to depth-map PGMs")
    p.add_argument("input_dir", type=Path)
    p.add_argument("output_dir", type=Path)
    p.add_argument("--patches", action="store_true", help="also write patched variants")
    common(p)

    p = sub.add_parser("evaluate", help="match probe maps against a gallery")
    p.add_argument("gallery_dir", type=Path)
    p.add_argument("probe_dir", type=Path)
    p.add_argument("report_dir", type=Path)
    common(p)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    args = _parser().parse_args(argv)
    try:
        overrides = {"seed": args.seed} if args.seed is not None else None
        config = load_config(args.config, overrides)
        if args.command == "preprocess":
            failures = cmd_preprocess(args.input_dir, args.output_dir, config, args.workers)
        elif args.command == "augment":
            failures = cmd_augment(args.input_dir, args.output_dir, config, args.workers)
        elif args.command == "render":
            failures = cmd_render(
                args.input_dir, args.output_dir, config, args.patches, args.workers
            )
        else:
            failures = cmd_evaluate(args.gallery_dir, args.probe_dir, config, args.report_dir)
    except Exception as exc:
        log.error("%s", exc)
        return 1
    if failures:
        log.error("%d item(s) failed", failures)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
