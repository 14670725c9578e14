"""
takws - text-aware few-shot keyword spotting
Command-line entry point

    python -m takws.main pretrain     --config run.json
    python -m takws.main adapt        --config run.json --keyword cat --shots 5
    python -m takws.main eval         --config run.json
    python -m takws.main param-audit  [--config run.json]
    python -m takws.main plot-laf     --config run.json
    python -m takws.main ablate       --config run.json --seed 3

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
"""

import argparse
import copy
import csv
import json
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Optional, Sequence

import torch
from pydantic import BaseModel, ValidationError

from takws.core.config import get_settings
from takws.core.errors import ConfigError, TakwsError
from takws.core.logging import get_logger, setup_logging
from takws.models.schemas import (
    AblateRun,
    AdaptRun,
    AuditRun,
    EvalRun,
    MethodKind,
    MetricsReport,
    NamedSpec,
    PlotLafRun,
    PretrainRun,
)
from takws.networks.conditioning import laf_normalized_profile, profile_grid
from takws.networks.encoder import build_encoder
from takws.services.adaptation import audit, reference_catalogue, write_audit_csv, write_audit_json
from takws.services.checkpoint import load_detector, load_pair, save_detector, save_pair
from takws.services.data import (
    Augmenter,
    derive_seed,
    open_corpus,
    sample_few_shot,
    save_toy_dataset,
)
from takws.services.scoring import aggregate, evaluate_score_set, write_report_json, write_reports_csv
from takws.services.training import (
    EvalSet,
    adapt,
    evaluate,
    pretrain_toy,
    run_method,
)

logger = get_logger(__name__)

LAF_COLUMNS = ("keyword", "group", "site", "h", "y")
TRAIN_LOG_COLUMNS = ("epoch", "loss", "lr", "valid_ap")


# ============================================================
# RUN DOCUMENTS
# ============================================================

def load_run(model: type[BaseModel], args: argparse.Namespace, required: bool = True) -> BaseModel:
    """
    Read the JSON run document, apply flag overrides, then validate.

    Overrides only touch keys the document type declares; list-valued
    keys (ablate) receive a one-element list. A document without seed or
    out falls back to TAKWS_DEFAULT_SEED and TAKWS_OUTPUT_DIR/<command>.
    """
    doc: dict[str, Any] = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"--config: {path} does not exist")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"--config: {path} is not valid JSON ({e})") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"--config: {path} must hold a JSON object")
    elif required:
        raise ConfigError("--config is required for this command")

    fields = model.model_fields
    overrides = {"seed": args.seed, "out": args.out, "shots": args.shots, "keyword": args.keyword, "method": args.method}
    plural = {"shots": "shots", "keyword": "keywords", "method": "methods"}
    for key, value in overrides.items():
        if value is None:
            continue
        if key in fields and not (key == "shots" and model is AblateRun):
            doc[key] = value
        elif key in plural and plural[key] in fields:
            doc[plural[key]] = [value]
    settings = get_settings()
    if "seed" in fields:
        doc.setdefault("seed", settings.default_seed)
    doc.setdefault("out", str(Path(settings.output_dir) / args.command))
    return model.model_validate(doc)


def _out_dir(out: str) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(reports: Sequence[MetricsReport], path: Path) -> None:
    path.write_text(json.dumps([r.model_dump(mode="json") for r in reports], indent=2, sort_keys=True) + "\n")


# ============================================================
# COMMANDS
# ============================================================

def cmd_pretrain(run: PretrainRun) -> Path:
    out = _out_dir(run.out)
    corpus = open_corpus(run.data)
    if run.data.toy is not None:
        save_toy_dataset(corpus.manifest, {r.id: corpus.features(r.id) for r in corpus.manifest.records}, out / "data")
    pair = pretrain_toy(corpus, run.pretrain, run.augmentation, seed=run.seed)
    return save_pair(
        pair,
        out / "pretrained.pt",
        metadata={"seed": run.seed, "keywords": list(corpus.manifest.keyword_inventory)},
    )


def _sampling_seed(seed: int, keyword: str, shots: int, sampling_id: int) -> int:
    return derive_seed(seed, "sampling", keyword, shots, sampling_id)


def cmd_adapt(run: AdaptRun) -> Path:
    out = _out_dir(run.out)
    corpus = open_corpus(run.data)
    pair = load_pair(run.checkpoint)
    task = sample_few_shot(
        corpus.manifest, run.keyword, run.shots, _sampling_seed(run.seed, run.keyword, run.shots, run.sampling_id)
    )
    result = adapt(
        pair,
        task,
        corpus,
        run.method,
        run.optimizer,
        run.composition,
        run.augmentation,
        spec=run.spec,
        head_init=run.head_init,
        seed=run.seed,
    )
    stem = f"{run.keyword}_{run.method.value}_{run.shots}shot_s{run.sampling_id}"
    with (out / f"{stem}_trainlog.csv").open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRAIN_LOG_COLUMNS)
        for entry in result.log:
            writer.writerow([entry.epoch, f"{entry.loss:.8f}", f"{entry.lr:.10g}", f"{entry.valid_ap:.6f}"])
    (out / f"{stem}_task.json").write_text(task.model_dump_json(indent=2) + "\n")
    return save_detector(
        result.detector,
        out / f"{stem}.pt",
        metadata={
            "keyword": run.keyword,
            "method": run.method.value,
            "shots": run.shots,
            "sampling_id": run.sampling_id,
            "seed": run.seed,
            "test_ids": task.test_ids,
            "best_epoch": result.best_epoch,
            "spec": (run.spec or run.method.spec).describe(),
        },
    )


def _aggregate_groups(reports: Sequence[MetricsReport], across_keywords: bool = False) -> list[MetricsReport]:
    groups: dict[tuple, list[MetricsReport]] = defaultdict(list)
    for r in reports:
        key = (r.method, r.shots) if across_keywords else (r.keyword, r.method, r.shots)
        groups[key].append(r)
    return [aggregate(groups[k], across_keywords=across_keywords) for k in sorted(groups)]


def cmd_eval(run: EvalRun) -> Path:
    out = _out_dir(run.out)
    corpus = open_corpus(run.data)
    reports_dir = _out_dir(str(out / "reports"))
    reports = []
    for path in run.checkpoints:
        detector, meta = load_detector(path)
        keyword = meta["keyword"]
        method = MethodKind(meta.get("method", MethodKind.TA_ADAPTER.value))
        test_ids = meta.get("test_ids") or [r.id for r in corpus.manifest.by_split("test")]
        augmenter = Augmenter.for_corpus(corpus, run.augmentation, run.seed)
        eval_set = EvalSet.build(corpus, test_ids, keyword, augmenter, derive_seed(run.seed, "test", keyword))
        scores = evaluate(detector, eval_set, keyword, method.score_mode)
        report = evaluate_score_set(
            scores, method=method.value, shots=int(meta.get("shots", 0)), sampling_id=meta.get("sampling_id")
        )
        write_report_json(report, reports_dir / f"{Path(path).stem}.json")
        reports.append(report)
    summary = _aggregate_groups(reports)
    write_reports_csv(reports + summary, out / "metrics.csv")
    _write_json(reports + summary, out / "metrics.json")
    return out / "metrics.csv"


def default_audit_specs() -> list[NamedSpec]:
    methods = [
        NamedSpec(
            label=f"method {m.value}",
            spec=m.spec,
            reference_k=45.0 if m is MethodKind.TA_ADAPTER else None,
            note="G5 site counted as d*a+a" if m is MethodKind.TA_ADAPTER else "",
        )
        for m in MethodKind
    ]
    return reference_catalogue() + methods


def cmd_param_audit(run: AuditRun) -> Path:
    out = _out_dir(run.out)
    specs = default_audit_specs() if run.specs is None else run.specs
    report = audit(build_encoder(run.encoder), specs)
    write_audit_csv(report, out / "audit.csv")
    write_audit_json(report, out / "audit.json")
    logger.info("audit_written", rows=len(report.rows), total_params=report.total_params)
    return out / "audit.csv"


def _profile_rows(keyword: str, encoder, te: torch.Tensor, grid: list[float]) -> list[list]:
    rows = []
    for site in encoder.activation_sites():
        if not site.active:
            continue
        for h, y in laf_normalized_profile(site.laf, te, grid):
            rows.append([keyword, site.group.value, site.index, f"{h:.6f}", f"{y:.10g}"])
    return rows


def cmd_plot_laf(run: PlotLafRun) -> Path:
    out = _out_dir(run.out)
    grid = profile_grid(run.points)
    rows = []
    for path in run.checkpoints:
        detector, meta = load_detector(path)
        rows.extend(_profile_rows(meta["keyword"], detector.encoder, detector.te, grid))
    if run.pretrained:
        pair = load_pair(run.pretrained)
        for keyword in run.keywords:
            encoder = copy.deepcopy(pair.encoder)
            encoder.set_activation_sites(run.sites)
            rows.extend(_profile_rows(keyword, encoder, pair.te(keyword), grid))
    path = out / "laf_profiles.csv"
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LAF_COLUMNS)
        writer.writerows(rows)
    logger.info("laf_profiles_written", path=str(path), rows=len(rows))
    return path


def _ablation_job(job: dict[str, Any]) -> MetricsReport:
    """One isolated (method or spec row, keyword, shots, sampling) run; safe to execute in a worker process."""
    run = AblateRun.model_validate(job["run"])
    if job["spec"] is None:
        method, named = MethodKind(job["method"]), None
    else:
        method, named = run.spec_method, run.specs[job["spec"]]
    corpus = open_corpus(run.data)
    pair = load_pair(job["pretrained"])
    keyword, shots, sampling = job["keyword"], job["shots"], job["sampling"]
    task = sample_few_shot(corpus.manifest, keyword, shots, _sampling_seed(run.seed, keyword, shots, sampling))
    report, _ = run_method(
        method,
        task,
        pair,
        corpus,
        run.optimizer,
        run.composition,
        run.augmentation,
        head_init=run.head_init,
        seed=derive_seed(run.seed, "run", keyword, shots, sampling),
        sampling_id=sampling,
        spec=named.spec if named else None,
        label=named.label if named else None,
    )
    return report


def cmd_ablate(run: AblateRun) -> Path:
    out = _out_dir(run.out)
    if run.pretrained is None:
        corpus = open_corpus(run.data)
        pair = pretrain_toy(corpus, run.pretrain, run.augmentation, seed=run.seed)
        pretrained = str(save_pair(pair, out / "pretrained.pt", metadata={"seed": run.seed}))
    else:
        corpus = open_corpus(run.data)
        pretrained = run.pretrained
    keywords = run.keywords or list(corpus.manifest.keyword_inventory)

    payload = run.model_dump(mode="json")
    rows = [(m.value, None) for m in run.methods] + [(run.spec_method.value, i) for i in range(len(run.specs))]
    jobs = [
        {
            "run": payload,
            "pretrained": pretrained,
            "method": method,
            "spec": spec,
            "keyword": keyword,
            "shots": shots,
            "sampling": sampling,
        }
        for method, spec in rows
        for shots in run.shots
        for keyword in keywords
        for sampling in range(run.samplings)
    ]
    logger.info("ablation_started", jobs=len(jobs), workers=run.workers)
    if run.workers > 1:
        with ProcessPoolExecutor(max_workers=run.workers) as pool:
            reports = list(pool.map(_ablation_job, jobs))
    else:
        reports = [_ablation_job(job) for job in jobs]

    write_reports_csv(reports, out / "ablation_runs.csv")
    summary = _aggregate_groups(reports, across_keywords=True)
    write_reports_csv(summary, out / "ablation.csv")
    _write_json(summary, out / "ablation.json")
    return out / "ablation.csv"


COMMANDS = {
    "pretrain": (PretrainRun, cmd_pretrain, True),
    "adapt": (AdaptRun, cmd_adapt, True),
    "eval": (EvalRun, cmd_eval, True),
    "param-audit": (AuditRun, cmd_param_audit, False),
    "plot-laf": (PlotLafRun, cmd_plot_laf, True),
    "ablate": (AblateRun, cmd_ablate, True),
}


# ============================================================
# ENTRY POINT
# ============================================================

def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="takws", description="Text-aware few-shot keyword spotting")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON run document")
        p.add_argument("--seed", type=int, help="Top-level seed")
        p.add_argument("--out", type=str, help="Output directory")
        p.add_argument("--shots", type=int, help="Shots per keyword (5, 10 or 15)")
        p.add_argument("--keyword", type=str, help="Target keyword")
        p.add_argument("--method", type=str, help="Method name, e.g. TA_ADAPTER")
        p.add_argument("--log-level", type=str, help="Overrides TAKWS_LOG_LEVEL")
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    setup_logging(level=args.log_level)
    settings = get_settings()
    if settings.num_threads:
        torch.set_num_threads(settings.num_threads)

    model, handler, required = COMMANDS[args.command]
    try:
        run = load_run(model, args, required=required)
        result = handler(run)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "config"
        print(f"config error: {where}: {first['msg']}", file=sys.stderr)
        logger.error("command_failed", command=args.command, exit_code=2, error=str(e))
        return 2
    except TakwsError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        logger.error("command_failed", command=args.command, exit_code=e.exit_code, error=str(e))
        return e.exit_code
    logger.info("command_finished", command=args.command, output=str(result))
    print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
