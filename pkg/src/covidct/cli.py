"""Command-line entry point: ``covidct <subcommand>``.

Stages communicate only through files under the work directory::

    data/        phantoms, masks, manifest.json      (make-phantoms)
    normalized/  preprocessed stacks                 (preprocess)
    weights/     denoiser.zip, classifier.zip        (train-anomaly, train-classifier)
    infection/   subtraction volumes                 (infer-anomaly)
    reports/     <split>_report.json, <split>_roc.csv (evaluate)
    overlays/    <case>/slice_###.png, summary.json  (report)
    logs/        JSON lines training logs

Exit codes: 0 success, 1 validation or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import multiprocessing
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import anomaly_net, classifier
from .config import PROFILES, PipelineConfig, load_config, save_config
from .errors import CovidCTError, PrerequisiteError, TrainingError, ValidationError
from .metrics import classification_report, collapse_binary, roc_curve
from .noise import build_denoiser_dataset
from .overlay import write_overlays
from .phantom import generate_phantom_dataset
from .preprocess import NormalizedStack, preprocess_case, resize_depth
from .volume_io import LABELS, DatasetManifest, ManifestEntry, read_array, read_manifest, read_volume, write_array

log = logging.getLogger("covidct")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class CaseFailures(CovidCTError):
    """One or more cases of a per-case stage failed; the others completed."""

    def __init__(self, stage: str, failures: List[Tuple[str, str]]):
        lines = "\n".join(f"  {case}: {msg}" for case, msg in failures)
        super().__init__(f"{stage}: {len(failures)} case(s) failed\n{lines}")
        self.failures = failures


# --- artifact lookup -------------------------------------------------------

def _manifest(cfg: PipelineConfig) -> DatasetManifest:
    if not cfg.manifest_path.is_file():
        raise PrerequisiteError(f"no manifest at {cfg.manifest_path}; run `covidct make-phantoms` first",
                                "make-phantoms")
    return read_manifest(cfg.manifest_path)


def _normalized_path(cfg: PipelineConfig, case_id: str) -> Path:
    return cfg.normalized_dir / f"{case_id}.json"


def _infection_path(cfg: PipelineConfig, case_id: str) -> Path:
    return cfg.infection_dir / f"{case_id}.json"


def _require(paths: Iterable[Path], command: str, what: str) -> None:
    missing = [p for p in paths if not Path(p).exists()]
    if missing:
        raise PrerequisiteError(f"{len(missing)} {what} missing (first: {missing[0]}); run `covidct {command}` first",
                                command)


def _load_stack(cfg: PipelineConfig, case_id: str) -> NormalizedStack:
    arr, meta = read_array(_normalized_path(cfg, case_id))
    return NormalizedStack(arr, case_id, int(meta.get("original_slice_count", arr.shape[0])))


def _load_infection(cfg: PipelineConfig, case_id: str) -> np.ndarray:
    return read_array(_infection_path(cfg, case_id))[0]


def _find_case(manifest: DatasetManifest, case_id: str) -> ManifestEntry:
    try:
        return manifest.get(case_id)
    except KeyError:
        raise ValidationError(f"case {case_id!r} is not in the manifest") from None


# --- per-case execution ----------------------------------------------------

def _run_cases(stage: str, fn: Callable, cfg: PipelineConfig, case_ids: Sequence[str]) -> List:
    """Run ``fn(cfg, case_id)`` for every case; collect failures instead of stopping."""
    results, failures = [], []
    if cfg.jobs > 1 and len(case_ids) > 1:
        # spawn: forked children inherit torch's thread pools and can hang
        with ProcessPoolExecutor(max_workers=cfg.jobs, mp_context=multiprocessing.get_context("spawn")) as pool:
            futures = [(c, pool.submit(fn, cfg, c)) for c in case_ids]
            outcomes = []
            for c, fut in futures:
                try:
                    outcomes.append((c, fut.result(), None))
                except Exception as exc:  # noqa: BLE001 - reported per case
                    outcomes.append((c, None, exc))
    else:
        outcomes = []
        for c in case_ids:
            try:
                outcomes.append((c, fn(cfg, c), None))
            except Exception as exc:  # noqa: BLE001 - reported per case
                outcomes.append((c, None, exc))
    for c, res, exc in outcomes:
        if exc is None:
            results.append(res)
        else:
            log.debug("%s failed for %s", stage, c, exc_info=exc)
            failures.append((c, f"{type(exc).__name__}: {exc}"))
    if failures:
        raise CaseFailures(stage, failures)
    return results


def _preprocess_one(cfg: PipelineConfig, case_id: str) -> str:
    entry = read_manifest(cfg.manifest_path).get(case_id)
    vol = read_volume(entry.path)
    stack = preprocess_case(vol, size=cfg.slice_size, target_spacing_mm=cfg.target_spacing_mm)
    write_array(_normalized_path(cfg, case_id), stack.slices, case_id=case_id, spacing_mm=cfg.target_spacing_mm,
                stage="normalized", extra={"original_slice_count": stack.original_slice_count})
    return case_id


def _infer_one(cfg: PipelineConfig, case_id: str) -> str:
    weights = _cached_denoiser(str(cfg.denoiser_path))
    stack = _load_stack(cfg, case_id)
    inf = anomaly_net.infection_map_case(stack, weights, depth=cfg.depth)
    z = stack.slices.shape[0]
    tz = cfg.target_spacing_mm[0] * ((z - 1) / (cfg.depth - 1) if z > 1 and cfg.depth > 1 else 1.0)
    write_array(_infection_path(cfg, case_id), inf.voxels, case_id=case_id,
                spacing_mm=(tz, cfg.target_spacing_mm[1], cfg.target_spacing_mm[2]), stage="infection")
    return case_id


_DENOISERS = {}


def _cached_denoiser(path: str) -> anomaly_net.DenoiserWeights:
    if path not in _DENOISERS:
        _DENOISERS[path] = anomaly_net.DenoiserWeights.load(path)
    return _DENOISERS[path]


# --- subcommands -----------------------------------------------------------

def cmd_make_phantoms(cfg: PipelineConfig, args) -> int:
    manifest = generate_phantom_dataset(cfg.phantom, cfg.data_dir, split_seed=cfg.split_seed)
    save_config(cfg, cfg.work / "config.resolved.json")
    print(f"wrote {len(manifest)} phantoms to {cfg.data_dir}")
    print(_manifest_summary(manifest))
    return EXIT_OK


def _manifest_summary(manifest: DatasetManifest) -> str:
    rows = ["label     train  validation  test  total"]
    for lab in LABELS:
        ents = manifest.by_label(lab)
        counts = [sum(e.split == s for e in ents) for s in ("train", "validation", "test")]
        rows.append(f"{lab:<9} {counts[0]:>5}  {counts[1]:>10}  {counts[2]:>4}  {len(ents):>5}")
    return "\n".join(rows)


def cmd_preprocess(cfg: PipelineConfig, args) -> int:
    manifest = _manifest(cfg)
    done = _run_cases("preprocess", _preprocess_one, cfg, [e.case_id for e in manifest])
    print(f"preprocessed {len(done)} cases into {cfg.normalized_dir}")
    return EXIT_OK


def cmd_train_anomaly(cfg: PipelineConfig, args) -> int:
    manifest = _manifest(cfg)
    train = [e for e in manifest if e.label == "Control" and e.split == "train"]
    val = [e for e in manifest if e.label == "Control" and e.split == "validation"]
    if not train:
        raise ValidationError("the manifest has no Control training cases")
    _require([_normalized_path(cfg, e.case_id) for e in train + val], "preprocess", "normalized stacks")
    x, y = build_denoiser_dataset([_load_stack(cfg, e.case_id) for e in train], cfg.perlin, cfg.perlin.seed)
    val_pair = None
    if val:
        val_pair = build_denoiser_dataset([_load_stack(cfg, e.case_id) for e in val], cfg.perlin,
                                          cfg.perlin.seed + 1)
    cfg.logs_dir.mkdir(parents=True, exist_ok=True)
    log_path = cfg.logs_dir / "denoiser.jsonl"
    try:
        weights = anomaly_net.train_denoiser(x, y, cfg.denoiser, val=val_pair, log_path=log_path)
    except TrainingError as exc:
        raise TrainingError(f"{exc} (log: {log_path})", epoch=exc.epoch) from exc
    weights.save(cfg.denoiser_path)
    last = weights.history[-1]
    print(f"trained denoiser on {len(x)} slices for {cfg.denoiser.epochs} epochs; "
          f"train_mse={last['train_mse']:.6f} val_mse={last['val_mse']}")
    print(f"weights: {cfg.denoiser_path}  log: {log_path}")
    return EXIT_OK


def cmd_infer_anomaly(cfg: PipelineConfig, args) -> int:
    manifest = _manifest(cfg)
    _require([cfg.denoiser_path], "train-anomaly", "denoiser weights")
    _require([_normalized_path(cfg, e.case_id) for e in manifest], "preprocess", "normalized stacks")
    done = _run_cases("infer-anomaly", _infer_one, cfg, [e.case_id for e in manifest])
    print(f"wrote {len(done)} infection volumes of shape {(cfg.depth, cfg.slice_size, cfg.slice_size)} "
          f"to {cfg.infection_dir}")
    return EXIT_OK


def _split_data(cfg: PipelineConfig, entries: Sequence[ManifestEntry]):
    _require([_infection_path(cfg, e.case_id) for e in entries], "infer-anomaly", "infection volumes")
    return [_load_infection(cfg, e.case_id) for e in entries], [e.label for e in entries]


def cmd_train_classifier(cfg: PipelineConfig, args) -> int:
    manifest = _manifest(cfg)
    train, val = manifest.by_split("train"), manifest.by_split("validation")
    if not train:
        raise ValidationError("the manifest has no training cases")
    x, y = _split_data(cfg, train)
    val_pair = _split_data(cfg, val) if val else None
    cfg.logs_dir.mkdir(parents=True, exist_ok=True)
    log_path = cfg.logs_dir / "classifier.jsonl"
    try:
        weights = classifier.train_classifier(x, y, cfg.classifier, val=val_pair, log_path=log_path)
    except TrainingError as exc:
        raise TrainingError(f"{exc} (log: {log_path})", epoch=exc.epoch) from exc
    weights.save(cfg.classifier_path)
    chosen = weights.archive.metadata.get("epoch")
    print(f"trained classifier on {len(x)} volumes; kept epoch {chosen}")
    print(f"weights: {cfg.classifier_path}  log: {log_path}")
    return EXIT_OK


def _classifier_weights(cfg: PipelineConfig) -> classifier.ClassifierWeights:
    _require([cfg.classifier_path], "train-classifier", "classifier weights")
    return classifier.ClassifierWeights.load(cfg.classifier_path)


def cmd_evaluate(cfg: PipelineConfig, args) -> int:
    manifest = _manifest(cfg)
    weights = _classifier_weights(cfg)
    splits = [args.split] if args.split else [s for s in ("validation", "test") if manifest.by_split(s)]
    if not splits:
        raise ValidationError("the manifest has no validation or test cases")
    cfg.reports_dir.mkdir(parents=True, exist_ok=True)
    for split in splits:
        entries = manifest.by_split(split)
        if not entries:
            raise ValidationError(f"split {split!r} is empty")
        x, y = _split_data(cfg, entries)
        probs = classifier.predict_many(x, weights)
        report = classification_report(y, probs, split)
        path = report.save(cfg.reports_dir / f"{split}_report.json")
        scores = [p.p_covid for p in probs]
        positives = [lab == "Covid" for lab in y]
        if 0 < sum(positives) < len(positives):
            roc_curve(scores, positives).to_csv(cfg.reports_dir / f"{split}_roc.csv")
        print(f"{split}: n={report.n_cases} acc3={report.accuracy_3class:.3f} acc2={report.accuracy_2class:.3f} "
              f"sens={_fmt(report.sensitivity)} spec={_fmt(report.specificity)} auc={_fmt(report.auc)}  -> {path}")
    return EXIT_OK


def _fmt(v: float) -> str:
    return "undefined" if v != v else f"{v:.3f}"


def cmd_predict(cfg: PipelineConfig, args) -> int:
    manifest = _manifest(cfg)
    entry = _find_case(manifest, args.case)
    weights = _classifier_weights(cfg)
    x, _ = _split_data(cfg, [entry])
    probs = classifier.predict(x[0], weights)
    score, positive = collapse_binary(probs)
    out = {"case": entry.case_id, "p_control": probs.p_control, "p_cap": probs.p_cap, "p_covid": probs.p_covid,
           "predicted_class": probs.label, "covid_score": score, "covid_positive": positive}
    if args.json:
        print(json.dumps(out))
    else:
        print(f"{entry.case_id}: Control={probs.p_control:.4f} CAP={probs.p_cap:.4f} Covid={probs.p_covid:.4f}")
        print(f"3-class: {probs.label}   2-class: {'Covid-19' if positive else 'non-Covid'} (score {score:.4f})")
    return EXIT_OK


def cmd_report(cfg: PipelineConfig, args) -> int:
    manifest = _manifest(cfg)
    entries = list(manifest) if args.all else [_find_case(manifest, c) for c in args.cases]
    if not entries:
        raise ValidationError("name at least one case or pass --all")
    _require([_infection_path(cfg, e.case_id) for e in entries], "infer-anomaly", "infection volumes")
    _require([_normalized_path(cfg, e.case_id) for e in entries], "preprocess", "normalized stacks")
    weights = classifier.ClassifierWeights.load(cfg.classifier_path) if cfg.classifier_path.exists() else None
    if weights is None:
        log.warning("no classifier weights at %s; predicted_class will be null", cfg.classifier_path)
    for e in entries:
        inf = _load_infection(cfg, e.case_id)
        base = resize_depth(_load_stack(cfg, e.case_id).slices, cfg.depth)
        predicted = classifier.predict(inf, weights).label if weights is not None else None
        path = write_overlays(base, inf, cfg.overlays_dir / e.case_id, e.case_id, predicted, cfg.overlay_scale)
        print(f"{e.case_id}: {inf.shape[0]} overlays, predicted {predicted} -> {path.parent}")
    return EXIT_OK


# --- argument parsing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="covidct", description="Covid-19 CT detection pipeline on synthetic phantoms.")
    p.add_argument("--config", type=Path, help="pipeline config JSON file")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit); reseeds every component")
    p.add_argument("--profile", choices=PROFILES, help="default shapes: full (240 px, 50 slices) or test (96 px)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
                   help="override a config field by dotted path, e.g. denoiser.epochs=5 (repeatable)")
    p.add_argument("--jobs", type=int, help="worker processes for per-case stages")
    p.add_argument("--work-dir", help="root directory for all stage outputs")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("make-phantoms", help="generate the synthetic phantom dataset and manifest")
    sub.add_parser("preprocess", help="resample, window and resize every case")
    sub.add_parser("train-anomaly", help="train the healthy-lung denoiser on Control training slices")
    sub.add_parser("infer-anomaly", help="write subtraction infection volumes for every case")
    sub.add_parser("train-classifier", help="train the 3D CNN on training-split infection volumes")
    ev = sub.add_parser("evaluate", help="write report JSON and ROC CSV for validation/test splits")
    ev.add_argument("--split", choices=("train", "validation", "test"))
    pr = sub.add_parser("predict", help="print class probabilities for one case")
    pr.add_argument("case", help="case id from the manifest")
    pr.add_argument("--json", action="store_true", help="print one JSON object")
    rp = sub.add_parser("report", help="write overlay PNGs and a summary for cases")
    rp.add_argument("cases", nargs="*", help="case ids from the manifest")
    rp.add_argument("--all", action="store_true", help="every case in the manifest")
    return p


COMMANDS = {
    "make-phantoms": cmd_make_phantoms,
    "preprocess": cmd_preprocess,
    "train-anomaly": cmd_train_anomaly,
    "infer-anomaly": cmd_infer_anomaly,
    "train-classifier": cmd_train_classifier,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.work_dir:
            overrides.append(f"work_dir={json.dumps(args.work_dir)}")
        cfg = load_config(args.config, profile=args.profile, seed=args.seed, overrides=overrides, jobs=args.jobs)
        return COMMANDS[args.command](cfg, args)
    except (ValidationError, PrerequisiteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except CovidCTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception:  # noqa: BLE001 - last-resort report
        traceback.print_exc()
        return EXIT_RUNTIME


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
