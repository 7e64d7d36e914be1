"""Command-line entry point.

Subcommands: ``synth`` (seeded dataset generation), ``train`` (the staged
protocol, one stage per invocation or ``--stage all``), ``predict``
(prediction dumps), ``eval`` (metric reports from a model or a dump),
``gradcheck`` (finite-difference check of the full fused model) and
``ablate`` (configuration sweeps).

Configs are JSON files; command-line flags win over config values.  Every
command honors ``--seed`` (falling back to the RU_SEED environment variable)
and records its resolved configuration in a run manifest before doing any
heavy work.  Checkpoints, logs and reports land in the ``--out`` directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import assign_blocks, load_checkpoint, save_checkpoint
from .data import Dataset, load_dataset, materialize_features
from .linalg import ShapeError
from .metrics import EvalRecord, aggregate, read_dump, write_dump
from .model import (
    FusionModel,
    PredictionTimeline,
    model_config,
    model_from_config,
)
from .nn import collect_blocks, cross_entropy_timeline, gradcheck, zero_grads
from .rng import Rng
from .synth import ConfigError, SynthConfig, synth_generate, write_dataset
from .timeline import TimelineSpec
from .train import (
    TrainConfig,
    TrainingDivergedError,
    build_model,
    build_train_data,
    run_protocol,
    train_branch,
    train_fusion,
)


def _load_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _resolve_seed(flag_seed, config_seed=None) -> int:
    if flag_seed is not None:
        return int(flag_seed)
    if config_seed is not None:
        return int(config_seed)
    return int(os.environ.get("RU_SEED", "0"))


def _write_manifest(out_dir: Path, command: str, config: dict, seed: int,
                    artifacts: list[str]):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": artifacts,
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    (out_dir / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# synth

def cmd_synth(args) -> int:
    config = SynthConfig.from_dict(_load_json(args.config) if args.config else {})
    seed = _resolve_seed(args.seed)
    out = Path(args.out)
    _write_manifest(out, "synth", config.to_dict(), seed,
                    ["manifest.csv", "vocab.json", "splits.json", "meta.json",
                     "features/"])
    dataset = synth_generate(config, seed)
    write_dataset(dataset, out, config, seed)
    n_train = len(dataset.splits["train"])
    n_val = len(dataset.splits["val"])
    print(f"wrote {out}: {n_train} train / {n_val} val samples, "
          f"{config.num_actions} actions, "
          f"modalities {list(config.modalities)}, "
          f"{sum(len(v) for v in dataset.corrupted.values())} corrupted "
          f"modality instances")
    return 0


# ---------------------------------------------------------------------------
# train

def _train_config(args) -> TrainConfig:
    base = _load_json(args.config) if args.config else {}
    d = TrainConfig.from_dict(base).to_dict()
    if args.seed is not None:
        d["seed"] = int(args.seed)
    elif "seed" not in base:
        d["seed"] = _resolve_seed(None)
    if args.fusion:
        d["fusion"] = args.fusion
    if args.s_enc is not None:
        d["timeline"] = {**d["timeline"], "s_enc": args.s_enc}
    if args.batch_size is not None:
        d["batch_size"] = args.batch_size
    if args.no_scp:
        d["use_scp"] = False
    return TrainConfig.from_dict(d)


def _save_stage(out: Path, name: str, blocks, velocity, metadata: dict):
    path = out / f"{name}.ruck"
    combined = dict(blocks)
    for vname, arr in sorted(velocity.items()):
        combined[f"velocity.{vname}"] = arr
    save_checkpoint(path, combined, metadata)
    return path


def _write_logs(out: Path, name: str, log):
    logs_dir = out / "logs"
    logs_dir.mkdir(parents=True, exist_ok=True)
    (logs_dir / f"{name}.csv").write_text(log.to_csv())
    (logs_dir / f"{name}.summary.json").write_text(
        json.dumps(log.summary(), indent=2, sort_keys=True))


def _stage_metadata(cfg: TrainConfig, stage: str, modality, log) -> dict:
    return {
        "stage": stage,
        "modality": modality,
        "config": cfg.to_dict(),
        "selected_epoch": log.selected_epoch,
        "metric_history": [r.selection for r in log.rows],
        "train_loss_history": [r.train_loss for r in log.rows],
    }


def _branch_stage(model: FusionModel, data, cfg: TrainConfig, out: Path,
                  mode: str, wanted: str | None) -> list[str]:
    """Run scp or anticipation fine-tuning for the selected branches."""
    root = Rng(cfg.seed)
    stage = "scp" if mode == "scp" else "branch"
    inputs = model.branch_inputs(data.features, cfg.timeline)
    val_inputs = (model.branch_inputs(data.val_features, cfg.timeline)
                  if data.has_validation
                  else [arr[:0] for arr in inputs])
    trained = []
    for branch, feats, val_feats in zip(model.branches, inputs, val_inputs):
        if wanted is not None and branch.modality != wanted:
            continue
        if stage == "branch" and cfg.use_scp and cfg.architecture == "ru":
            scp_path = out / f"scp_{branch.modality}.ruck"
            if not scp_path.exists():
                raise FileNotFoundError(
                    f"{scp_path} missing; run --stage scp first or pass --no-scp")
            loaded, _ = load_checkpoint(scp_path)
            assign_blocks(
                collect_blocks(branch.blocks(f"branch.{branch.modality}")), loaded)
        result = train_branch(
            branch, feats, data.labels, val_feats, data.val_labels, cfg,
            mode=mode if stage == "scp" else
            ("baseline" if cfg.architecture == "bl" else "anticipation"),
            epochs=cfg.epochs_for(stage, branch.modality),
            rng=root.derive(f"train/{stage}/{branch.modality}"))
        name = f"{stage}_{branch.modality}"
        _save_stage(out, name,
                    dict(branch.blocks(f"branch.{branch.modality}")),
                    result.best_velocity,
                    _stage_metadata(cfg, stage, branch.modality, result.log))
        _write_logs(out, name, result.log)
        if stage == "branch":
            single = FusionModel(
                {branch.modality: branch.input_dim}, cfg.hidden_size,
                data.num_actions, cfg.timeline, "late", cfg.dropout_spec(),
                [1.0], model.branch_mode)
            (out / f"model_{branch.modality}.json").write_text(json.dumps(
                model_config(single, vocabulary="vocab.json",
                             checkpoint=f"{name}.ruck"),
                indent=2, sort_keys=True))
        trained.append(branch.modality)
    if wanted is not None and wanted not in trained:
        raise ValueError(f"--modality {wanted!r} not in model "
                         f"({[b.modality for b in model.branches]})")
    return trained


def _fusion_stage(model: FusionModel, data, cfg: TrainConfig, out: Path,
                  from_scratch: bool) -> Path:
    if not from_scratch:
        for branch in model.branches:
            path = out / f"branch_{branch.modality}.ruck"
            if not path.exists():
                raise FileNotFoundError(
                    f"{path} missing; run --stage branch first or pass "
                    f"--from-scratch")
            loaded, _ = load_checkpoint(path)
            assign_blocks(
                collect_blocks(branch.blocks(f"branch.{branch.modality}")), loaded)
    if model.strategy == "matt":
        result = train_fusion(model, data, cfg, Rng(cfg.seed).derive("train/fusion"))
        log = result.log
        velocity = result.best_velocity
    else:
        # Fixed-weight fusion has no joint parameters to train.
        from .train import TrainLog
        log = TrainLog(stage="fusion", modality=None,
                       taus=cfg.timeline.anticipation_times())
        velocity = {}
    name = f"fusion_{model.strategy}"
    path = _save_stage(out, name, model.blocks(), velocity,
                       _stage_metadata(cfg, "fusion", None, log))
    _write_logs(out, name, log)
    (out / "model.json").write_text(json.dumps(
        model_config(model, vocabulary="vocab.json", checkpoint=f"{name}.ruck"),
        indent=2, sort_keys=True))
    return path


def cmd_train(args) -> int:
    cfg = _train_config(args)
    out = Path(args.out)
    _write_manifest(out, f"train:{args.stage}", cfg.to_dict(), cfg.seed,
                    ["*.ruck", "logs/", "model.json"])
    dataset = load_dataset(args.data, cfg.modalities)
    data = build_train_data(dataset, cfg)
    if (out / "vocab.json").resolve() != (Path(args.data) / "vocab.json").resolve():
        (out / "vocab.json").write_text(dataset.vocab.to_json())
    model = build_model(data, cfg)

    if args.stage in ("scp", "all"):
        if cfg.use_scp and cfg.architecture == "ru":
            trained = _branch_stage(model, data, cfg, out, "scp", args.modality)
            print(f"scp stage done for {trained}")
        elif args.stage == "scp":
            print("scp disabled by config; nothing to do")
    if args.stage in ("branch", "all"):
        trained = _branch_stage(model, data, cfg, out, "anticipation", args.modality)
        print(f"branch stage done for {trained}")
    if args.stage in ("fusion", "all"):
        path = _fusion_stage(model, data, cfg, out,
                             args.from_scratch or args.stage == "all")
        print(f"fusion stage done: {path}")
    return 0


# ---------------------------------------------------------------------------
# predict / eval

def _load_model(model_path: Path) -> tuple[FusionModel, dict]:
    config = _load_json(model_path)
    model = model_from_config(config)
    ckpt = config.get("checkpoint")
    if ckpt:
        loaded, _ = load_checkpoint(model_path.parent / ckpt)
        assign_blocks(model.blocks(), loaded)
    return model, config


def _predict_records(model: FusionModel, dataset: Dataset, split: str,
                     task: str, jobs: int = 1,
                     spec: TimelineSpec | None = None) -> list[EvalRecord]:
    spec = spec or model.spec
    records = dataset.records(split)
    modalities = model.modalities
    order = list(range(len(records)))
    chunks = [order[i::jobs] for i in range(jobs)] if jobs > 1 else [order]

    branch_names = [b.modality for b in model.branches]

    def run_chunk(idx_list):
        if not idx_list:
            return []
        recs = [records[i] for i in idx_list]
        feats = materialize_features(dataset.store, recs, modalities, spec, task)
        fwd = model.forward(feats, train=False, spec=spec)
        out = []
        for pos, rec in enumerate(recs):
            timeline = PredictionTimeline(
                spec=spec, modalities=branch_names,
                fused_scores=fwd.fused[pos],
                modality_scores=fwd.modality_scores[:, pos],
                fusion_weights=fwd.weights[pos])
            out.append((idx_list[pos], EvalRecord(
                rec.video_id, rec.verb_id, rec.noun_id, rec.action_id, timeline)))
        return out

    results: list[tuple[int, EvalRecord]] = []
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for part in pool.map(run_chunk, chunks):
                results.extend(part)
    else:
        results.extend(run_chunk(chunks[0]))
    results.sort(key=lambda pair: pair[0])
    return [rec for _, rec in results]


def cmd_predict(args) -> int:
    model, config = _load_model(Path(args.model))
    dataset = load_dataset(args.data, model.modalities)
    if args.mode == "early" and model.spec.s_enc != 0:
        raise ValueError(
            f"--mode early needs a model trained with s_enc=0, "
            f"got s_enc={model.spec.s_enc}")
    task = "early" if args.mode == "early" else "anticipation"
    records = _predict_records(model, dataset, args.split, task, args.jobs)
    write_dump(args.out, records)
    print(f"wrote {args.out}: {len(records)} records")
    return 0


def cmd_eval(args) -> int:
    mode = args.mode
    if args.dump:
        records = read_dump(args.dump)
        vocab = load_dataset(args.data).vocab if args.data else None
    else:
        if not (args.model and args.data):
            raise ValueError("eval needs --model and --data (or --dump)")
        model, config = _load_model(Path(args.model))
        dataset = load_dataset(args.data, model.modalities)
        vocab = dataset.vocab
        if vocab.num_actions != model.num_actions:
            raise ShapeError(
                f"model predicts {model.num_actions} actions but the dataset "
                f"vocabulary has {vocab.num_actions}")
        task = "anticipation" if mode == "anticipation" else "early"
        if task == "early" and model.spec.s_enc != 0:
            raise ValueError(
                f"--mode {mode} needs a model trained with s_enc=0, "
                f"got s_enc={model.spec.s_enc}")
        records = _predict_records(model, dataset, args.split, task, args.jobs)

    metric_mode = {"anticipation": "anticipation", "early": "early",
                   "recognition": "recognition"}[mode]
    report = aggregate(records, mode=metric_mode, vocab=vocab)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save_json(out.with_suffix(".json"))
    report.save_csv(out.with_suffix(".csv"))
    print(report.to_csv().rstrip("\n"))
    print(f"wrote {out.with_suffix('.json')} and {out.with_suffix('.csv')}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck

def cmd_gradcheck(args) -> int:
    config = _load_json(args.config) if args.config else {}
    modalities = config.get("modalities", {"rgb": 8, "flow": 8, "obj": 6})
    hidden = config.get("hidden_size", 16)
    num_actions = config.get("num_actions", 4)
    spec = TimelineSpec(**config.get(
        "timeline", {"alpha": 0.25, "s_enc": 2, "s_ant": 3}))
    strategy = config.get("fusion", "matt")
    tolerance = config.get("tolerance", 1e-4)
    seed = _resolve_seed(args.seed, config.get("seed"))

    rng = Rng(seed)
    from .nn import DropoutSpec
    model = FusionModel.init(modalities, hidden, num_actions, spec,
                             rng.derive("init"), strategy=strategy,
                             dropout=DropoutSpec(0.0))
    features = {m: rng.derive(f"x/{m}").normal((2, spec.total_steps, d))
                for m, d in modalities.items()}
    labels = np.asarray([i % num_actions for i in range(2)])
    blocks = model.blocks()

    def loss_fn():
        fwd = model.forward(features, train=False)
        loss, _ = cross_entropy_timeline(fwd.fused, labels)
        return loss

    fwd = model.forward(features, train=False, want_tape=True)
    _, dfused = cross_entropy_timeline(fwd.fused, labels)
    analytic = zero_grads(blocks)
    model.backward(fwd, dfused, analytic)

    report = gradcheck(loss_fn, blocks, analytic, tolerance=tolerance)
    print(report.format_table())
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# ablate

def _eval_arm(cfg: TrainConfig, dataset: Dataset) -> dict:
    data = build_train_data(dataset, cfg)
    result = run_protocol(data, cfg)
    records = _predict_records(result.model, dataset, "val", cfg.task)
    report = aggregate(records, mode="anticipation", vocab=dataset.vocab)
    acc = report.payload["accuracy"]["action"]["top5"]
    taus = report.payload["taus"]
    ref = report.payload["tau_ref_index"]
    return {"top5_by_tau": dict(zip([f"{t:g}" for t in taus], acc)),
            "top5_at_ref": acc[ref], "tau_ref": taus[ref]}


def _cfg_with(cfg: TrainConfig, **kw) -> TrainConfig:
    d = cfg.to_dict()
    d.update(kw)
    return TrainConfig.from_dict(d)


def cmd_ablate(args) -> int:
    cfg = _train_config(args)
    out = Path(args.out)
    _write_manifest(out, f"ablate:{args.axis}", cfg.to_dict(), cfg.seed,
                    [f"ablate_{args.axis}.csv", f"ablate_{args.axis}.json"])
    dataset = load_dataset(args.data)

    rows: list[dict] = []
    if args.axis == "fusion":
        for strategy in ("early", "late", "matt"):
            arm = _cfg_with(cfg, fusion=strategy)
            rows.append({"arm": strategy, **_eval_arm(arm, dataset)})
    elif args.axis == "modalities":
        all_mods = cfg.modalities or dataset.store.modalities
        arms = [[m] for m in all_mods]
        if len(all_mods) > 1:
            arms.append(list(all_mods))
        for mods in arms:
            arm = _cfg_with(cfg, modalities=mods,
                            fusion=cfg.fusion if len(mods) > 1 else "late")
            rows.append({"arm": "+".join(mods), **_eval_arm(arm, dataset)})
    elif args.axis == "scp":
        seeds = [cfg.seed + i for i in range(args.seeds)]
        diffs = []
        for seed in seeds:
            with_scp = _eval_arm(_cfg_with(cfg, seed=seed, use_scp=True), dataset)
            without = _eval_arm(_cfg_with(cfg, seed=seed, use_scp=False), dataset)
            rows.append({"arm": f"with_scp/seed{seed}", **with_scp})
            rows.append({"arm": f"without_scp/seed{seed}", **without})
            diffs.append(with_scp["top5_at_ref"] - without["top5_at_ref"])
        rows.append({"arm": "paired_mean_diff",
                     "top5_by_tau": {}, "top5_at_ref": sum(diffs) / len(diffs),
                     "tau_ref": rows[-1]["tau_ref"]})
    elif args.axis == "s_enc":
        for s_enc in range(cfg.timeline.total_steps):
            spec = TimelineSpec(cfg.timeline.alpha, s_enc, cfg.timeline.s_ant)
            arm = _cfg_with(cfg, timeline={"alpha": spec.alpha, "s_enc": s_enc,
                                           "s_ant": spec.s_ant})
            rows.append({"arm": f"s_enc={s_enc}", **_eval_arm(arm, dataset)})
    elif args.axis == "architecture":
        for arch in ("bl", "ru"):
            arm = _cfg_with(cfg, architecture=arch,
                            use_scp=cfg.use_scp and arch == "ru")
            rows.append({"arm": arch, **_eval_arm(arm, dataset)})
    else:
        raise ValueError(f"unknown ablation axis {args.axis!r}")

    out.mkdir(parents=True, exist_ok=True)
    (out / f"ablate_{args.axis}.json").write_text(
        json.dumps(rows, indent=2, sort_keys=True))
    tau_keys = sorted({k for r in rows for k in r["top5_by_tau"]},
                      key=float, reverse=True)
    lines = ["arm," + ",".join(f"top5@{k}s" for k in tau_keys) + ",top5_at_ref"]
    for r in rows:
        cells = [r["arm"]]
        cells += [f"{r['top5_by_tau'][k]:.2f}" if k in r["top5_by_tau"] else ""
                  for k in tau_keys]
        cells.append(f"{r['top5_at_ref']:.2f}")
        lines.append(",".join(cells))
    (out / f"ablate_{args.axis}.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rulstm",
        description="Rolling-unrolling LSTM anticipation: data synthesis, "
                    "training, evaluation and verification tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic dataset")
    p.add_argument("--config", help="SynthConfig JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run a training stage")
    p.add_argument("--stage", choices=["scp", "branch", "fusion", "all"],
                   required=True)
    p.add_argument("--modality", help="restrict scp/branch stages to one branch")
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fusion", choices=["late", "early", "matt"])
    p.add_argument("--s-enc", dest="s_enc", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--no-scp", dest="no_scp", action="store_true")
    p.add_argument("--from-scratch", dest="from_scratch", action="store_true",
                   help="fusion stage without pre-trained branch checkpoints")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write a prediction dump (JSON lines)")
    p.add_argument("--model", required=True, help="model description JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--mode", choices=["anticipation", "early"],
                   default="anticipation")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="compute metric reports")
    p.add_argument("--mode", choices=["anticipation", "early", "recognition"],
                   default="anticipation")
    p.add_argument("--model", help="model description JSON")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--dump", help="evaluate a prediction dump instead")
    p.add_argument("--split", default="val")
    p.add_argument("--out", required=True, help="report path prefix")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the fused model")
    p.add_argument("--config", help="gradcheck config JSON")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run a configuration sweep")
    p.add_argument("--axis", required=True,
                   choices=["fusion", "modalities", "scp", "s_enc",
                            "architecture"])
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=5,
                   help="paired seeds for the scp axis")
    p.add_argument("--fusion", choices=["late", "early", "matt"])
    p.add_argument("--s-enc", dest="s_enc", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--no-scp", dest="no_scp", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError,) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, FileNotFoundError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
