"""``advbench`` command line: train -> attack -> sweep -> transfer -> report."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import report as R
from .attacks import METHODS, AttackConfig
from .checkpoint import file_sha256, load_checkpoint_with_header, verify_checkpoint
from .config import ExperimentConfig, derive_seed, parse_epsilon
from .data import DATASETS, data_paths, load_dataset, resolve_data_dir
from .errors import AdvbenchError, ConfigError
from .models import MODEL_IDS, SIZE_TAGS, ModelConfig, build_model
from .robustness import clean_subset, epsilon_sweep, evaluate_attack
from .train import train
from .transfer import build_matrix

log = logging.getLogger("advbench")

COMMANDS = ("train", "attack", "sweep", "transfer", "report")


class StageError(AdvbenchError):
    pass


def _split_list(values):
    if values is None:
        return None
    out = []
    for v in values:
        out.extend(x for x in v.split(",") if x)
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config; flags override its values")
    common.add_argument("--models", nargs="+", help="model ids such as KAN_small MLP_medium")
    common.add_argument("--datasets", nargs="+", help=f"subset of {', '.join(DATASETS)}")
    common.add_argument("--attacks", nargs="+", help=f"subset of {', '.join(METHODS)}")
    common.add_argument("--epsilon", nargs="+", help="budget(s), e.g. 0.125 or 32/255")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--data-dir", help="IDX data root (fallback: $ADVBENCH_DATA_DIR)")
    common.add_argument("--checkpoint-dir")
    common.add_argument("--force", action="store_true", help="retrain even if a verified checkpoint exists")
    common.add_argument("--max-samples", type=int, help="cap on attacked samples per cell")
    common.add_argument("--epochs", type=int, help="override training epochs")
    common.add_argument("--pairs", nargs="+", help="transfer pairs SOURCE:TARGET")
    common.add_argument("--transfer-m", type=int, help="samples per transfer pair")
    common.add_argument("--batch-size", type=int, help="attack batch size")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="advbench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _check_model_ids(parser, ids):
    for mid in ids:
        kind, _, size = mid.partition("_")
        if size not in SIZE_TAGS:
            parser.error(f"invalid size tag in {mid!r}; choose from {{{', '.join(SIZE_TAGS)}}}")
        if kind.lower() not in ("kan", "mlp"):
            parser.error(f"invalid model kind in {mid!r}; choose from {{KAN, MLP}}")


def resolve_config(parser, args) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    except (OSError, ConfigError, TypeError) as exc:
        parser.error(f"bad config: {exc}")
    models = _split_list(args.models)
    if models:
        _check_model_ids(parser, models)
        cfg.models = models
    datasets = _split_list(args.datasets)
    if datasets:
        bad = [d for d in datasets if d not in DATASETS]
        if bad:
            parser.error(f"unknown dataset(s) {bad}; choose from {{{', '.join(DATASETS)}}}")
        cfg.datasets = datasets
    attacks = _split_list(args.attacks)
    if attacks:
        bad = [a for a in attacks if a not in METHODS]
        if bad:
            parser.error(f"unknown attack(s) {bad}; choose from {{{', '.join(METHODS)}}}")
        cfg.attacks = {a: cfg.attacks.get(a, AttackConfig(a)) for a in attacks}
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.paths.out_dir = args.out
    if args.data_dir:
        cfg.paths.data_dir = args.data_dir
    if args.checkpoint_dir:
        cfg.paths.checkpoint_dir = args.checkpoint_dir
    if args.max_samples is not None:
        cfg.max_samples = args.max_samples
    if args.epochs is not None:
        cfg.train = dataclasses.replace(cfg.train, epochs=args.epochs)
    if args.transfer_m is not None:
        cfg.transfer_m = args.transfer_m
    if args.batch_size is not None:
        cfg.attack_batch_size = args.batch_size
    if args.pairs:
        pairs = _split_list(args.pairs)
        for p in pairs:
            if p.count(":") != 1:
                parser.error(f"pair {p!r} should look like KAN_small:MLP_small")
            _check_model_ids(parser, p.split(":"))
        cfg.transfer_pairs = pairs
    if args.epsilon:
        try:
            eps = [parse_epsilon(e) for e in _split_list(args.epsilon)]
        except ConfigError as exc:
            parser.error(str(exc))
        if args.command == "sweep":
            cfg.sweep_epsilons = [e * 255 for e in eps]
        else:
            if len(eps) != 1:
                parser.error("--epsilon takes a single value for this command")
            cfg.attacks = {k: v.with_epsilon(eps[0]) for k, v in cfg.attacks.items()}
    try:
        return cfg.validate()
    except ConfigError as exc:
        parser.error(str(exc))


# ---------------------------------------------------------------------------
# helpers


def checkpoint_path(cfg: ExperimentConfig, dataset: str, model_id: str) -> Path:
    return Path(cfg.paths.checkpoint_dir) / dataset / f"{model_id}.ckpt"


def _load_split(cfg, name, split, manifest):
    data_dir = resolve_data_dir(cfg.paths.data_dir)
    try:
        ds = load_dataset(data_dir, name, split)
    except FileNotFoundError as exc:
        raise StageError(str(exc)) from None
    manifest.datasets[f"{name}/{split}"] = ds.content_hash()
    return ds


def _load_models(cfg, dataset, ids, manifest):
    missing = [str(checkpoint_path(cfg, dataset, m)) for m in ids if not checkpoint_path(cfg, dataset, m).exists()]
    if missing:
        raise StageError("missing checkpoint(s): " + ", ".join(missing) + " (run `advbench train` first)")
    models = []
    for mid in ids:
        path = checkpoint_path(cfg, dataset, mid)
        model, _ = load_checkpoint_with_header(path)
        if model.model_id != mid:
            raise StageError(f"{path} holds {model.model_id}, expected {mid}")
        manifest.checkpoints[str(path)] = file_sha256(path)
        models.append(model)
    return models


def _sweep_eps(cfg) -> list[float]:
    return [float(n) / 255 for n in cfg.sweep_epsilons]


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: ExperimentConfig, args, manifest: R.RunManifest, out: Path) -> None:
    trained, skipped, rows = [], [], []
    for ds_name in cfg.datasets:
        data_dir = resolve_data_dir(cfg.paths.data_dir)
        try:
            data_paths(data_dir, ds_name, "train")
            data_paths(data_dir, ds_name, "test")
        except FileNotFoundError as exc:
            raise StageError(str(exc)) from None
        train_ds = test_ds = None
        for mid in cfg.models:
            mcfg = ModelConfig.from_id(mid)
            path = checkpoint_path(cfg, ds_name, mid)
            if path.exists() and not args.force and verify_checkpoint(path, mcfg):
                _, header = load_checkpoint_with_header(path)
                if header.get("epochs_trained") == cfg.train.epochs:
                    skipped.append(f"{ds_name}/{mid}")
                    manifest.checkpoints[str(path)] = file_sha256(path)
                    rows.append([ds_name, mid, header["epochs_trained"], R.pct(header["clean_accuracy"] or 0.0),
                                 manifest.checkpoints[str(path)]])
                    continue
            if train_ds is None:
                train_ds = _load_split(cfg, ds_name, "train", manifest)
                test_ds = _load_split(cfg, ds_name, "test", manifest)
            seed = derive_seed(cfg.seed, "train", ds_name, mid)
            model = build_model(mcfg, seed=seed)
            log.info("training %s on %s (seed %d)", mid, ds_name, seed)
            report = train(model, train_ds, test_ds, dataclasses.replace(cfg.train, seed=seed), checkpoint_path=path)
            manifest.checkpoints[str(path)] = file_sha256(path)
            manifest.notes.setdefault("wall_time_s", {})[f"{ds_name}/{mid}"] = round(report.wall_time, 1)
            trained.append(f"{ds_name}/{mid}")
            acc = report.final_test_acc if report.final_test_acc is not None else 0.0
            rows.append([ds_name, mid, cfg.train.epochs, R.pct(acc), manifest.checkpoints[str(path)]])
    manifest.notes.update(trained=trained, skipped=skipped)
    if rows:
        path = R._write_csv(out / "train_summary.csv", ["dataset", "model", "epochs", "clean_acc", "checkpoint_sha256"],
                            rows)
        manifest.add_file(path, out)
    print(f"trained {len(trained)}, skipped {len(skipped)}" + (f": {', '.join(skipped)}" if skipped else ""))


def cmd_attack(cfg, args, manifest, out: Path) -> None:
    records, traces, constraints = [], [], []
    stage_seed = manifest.stage_seeds["attack"]
    for ds_name in cfg.datasets:
        ds = _load_split(cfg, ds_name, "test", manifest)
        for model in _load_models(cfg, ds_name, cfg.models, manifest):
            base = clean_subset(model, ds, cfg.max_samples, stage_seed)
            for method, acfg in cfg.attacks.items():
                t0 = time.perf_counter()
                cell = evaluate_attack(model, ds, acfg, stage_seed, cfg.max_samples, cfg.attack_batch_size, base)
                log.info("%s %s %s: robust %.1f%% over %d (%.0fs)", ds_name, model.model_id, method,
                         cell.record.robust_acc, cell.record.n_evaluated, time.perf_counter() - t0)
                records.append(cell.record)
                if cell.trace is not None:
                    traces.append(R.LossTrace(ds_name, model.model_id, method, *cell.trace))
                constraints.append({"dataset": ds_name, "model": model.model_id, "attack": method,
                                    "epsilon": acfg.epsilon, **cell.constraints})
                k = min(cfg.images_per_cell, len(cell.subset))
                idx = cell.subset.indices[:k]
                for p in R.emit_adversarial_images(ds.images[idx], cell.x_adv[:k], out / "images" / ds_name,
                                                   model.model_id, method, acfg.epsilon, idx):
                    manifest.add_file(p, out)
    manifest.add_file(R.emit_robustness_table(records, out / "robust_accuracy.csv"), out)
    if traces:
        manifest.add_file(R.emit_loss_trace(traces, out / "loss_trace.csv"), out)
    manifest.add_file(R.emit_constraint_table(constraints, out / "attack_constraints.csv"), out)
    manifest.notes["attack_batch_size"] = cfg.attack_batch_size


def cmd_sweep(cfg, args, manifest, out: Path) -> None:
    ids = _split_list(args.models) or cfg.sweep_models
    records, constraints = [], []
    stage_seed = manifest.stage_seeds["sweep"]
    fgsm_cfg = cfg.attacks.get("fgsm", AttackConfig("fgsm"))
    for ds_name in cfg.datasets:
        ds = _load_split(cfg, ds_name, "test", manifest)
        models = _load_models(cfg, ds_name, ids, manifest)
        for cell in epsilon_sweep(models, ds, _sweep_eps(cfg), stage_seed, fgsm_cfg, cfg.max_samples,
                                  cfg.attack_batch_size):
            records.append(cell.record)
            constraints.append({"dataset": ds_name, "model": cell.record.model, "attack": "fgsm",
                                "epsilon": cell.record.epsilon, **cell.constraints})
    manifest.add_file(R.emit_epsilon_sweep(records, out / "fgsm_sweep.csv"), out)
    manifest.add_file(R.emit_constraint_table(constraints, out / "sweep_constraints.csv"), out)


def cmd_transfer(cfg, args, manifest, out: Path) -> None:
    pairs = [tuple(p.split(":")) for p in cfg.transfer_pairs] if cfg.transfer_pairs else None
    if pairs:
        ids = list(dict.fromkeys(m for p in pairs for m in p))
    else:
        ids = cfg.transfer_models or cfg.models
    ids = sorted(ids, key=lambda m: MODEL_IDS.index(m))
    stage_seed = manifest.stage_seeds["transfer"]
    attacks = list(cfg.attacks.values())
    matrices, records, constraints = [], [], []
    for ds_name in cfg.datasets:
        ds = _load_split(cfg, ds_name, "test", manifest)
        models = _load_models(cfg, ds_name, ids, manifest)
        matrix, recs = build_matrix(ds, models, attacks, cfg.transfer_m, stage_seed, cfg.attack_batch_size, pairs)
        matrices.append(matrix)
        records.extend(recs)
        constraints.extend(matrix.constraints)
    manifest.add_file(R.emit_transfer_records(records, out / "transfer.csv"), out)
    if len(attacks) == len(METHODS):
        manifest.add_file(R.emit_transfer_total(matrices, out / "transfer_total.csv"), out)
    manifest.add_file(R.emit_constraint_table(constraints, out / "transfer_constraints.csv"), out)


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cmd_report(cfg, args, manifest, out: Path) -> None:
    problems = []
    lines = ["# advbench run summary", ""]
    for mpath in sorted((out / "manifests").glob("*.json")):
        if mpath.stem == "report":
            continue
        m = R.RunManifest.read(mpath)
        issues = m.verify(out)
        problems.extend(f"{m.command}: {p}" for p in issues)
        lines.append(f"- {m.command}: run {m.run_id}, status {m.status}, {len(m.files)} files, "
                     f"{'verified' if not issues else f'{len(issues)} problem(s)'}")
    lines.append("")
    ra = out / "robust_accuracy.csv"
    if ra.exists():
        rows = _read_csv(ra)
        lines += ["## Robust accuracy (%)", "", "| dataset | model | " + " | ".join(METHODS) + " | clean |",
                  "|" + "---|" * (len(METHODS) + 3)]
        cells = {(r["dataset"], r["model"], r["attack"]): r for r in rows}
        for ds_name, mid in dict.fromkeys((r["dataset"], r["model"]) for r in rows):
            vals = [cells.get((ds_name, mid, a), {}).get("robust_acc", "") for a in METHODS]
            clean = next(r["clean_acc"] for r in rows if r["dataset"] == ds_name and r["model"] == mid)
            lines.append(f"| {ds_name} | {mid} | " + " | ".join(vals) + f" | {clean} |")
        lines.append("")
    tt = out / "transfer_total.csv"
    if tt.exists():
        rows = _read_csv(tt)
        header = list(rows[0].keys())
        lines += ["## Maximum transferability t_total (%, rows = source, columns = target)", "",
                  "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(r[h] for h in header) + " |" for r in rows]
        lines.append("")
    summary = out / "report.md"
    summary.write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest.add_file(summary, out)
    print("\n".join(lines))
    if problems:
        raise StageError("manifest verification failed: " + "; ".join(problems))


HANDLERS = {"train": cmd_train, "attack": cmd_attack, "sweep": cmd_sweep, "transfer": cmd_transfer,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    cfg = resolve_config(parser, args)
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = R.RunManifest(args.command, cfg.to_dict(), cfg.stage_seeds())
    status = 0
    try:
        HANDLERS[args.command](cfg, args, manifest, out)
        manifest.status = "complete"
    except (AdvbenchError, OSError) as exc:
        manifest.errors.append(str(exc))
        print(f"advbench {args.command}: error: {exc}", file=sys.stderr)
        status = 1
    finally:
        manifest.write(out)
    return status


if __name__ == "__main__":
    sys.exit(main())
