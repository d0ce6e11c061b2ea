"""Umbrella command line: catalog checks, training, simulation, analysis,
and the serving shell."""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import analysis, catalog, features, models, policy, simulator


def _load_catalog(path: str) -> catalog.Curriculum:
    fmt = "jsonl" if path.endswith(".jsonl") else "csv"
    with open(path, "rb") as fh:
        return catalog.load_curriculum(fh, fmt=fmt)


def _load_events(path: str, curriculum=None):
    with open(path, "rb") as fh:
        return catalog.load_events(fh, curriculum)


def _cmd_catalog_validate(args) -> int:
    curriculum = _load_catalog(args.catalog)
    print(
        f"catalog ok: {len(curriculum)} exercises, "
        f"{curriculum.topic_count} topics, "
        f"{curriculum.learning_unit_count} learning units, "
        f"sections {sorted(curriculum.section_boundaries)}"
    )
    if args.events:
        records, summary = _load_events(args.events, curriculum)
        print(
            f"events ok: {summary.accepted} accepted, "
            f"{summary.rejected_count} rejected of {summary.total_lines} lines, "
            f"{len(catalog.group_by_student(records))} students"
        )
    return 0


def _training_set(args, curriculum, task: str) -> models.TrainingSet:
    events, _ = _load_events(args.events, curriculum)
    snapshot = (
        features.load_snapshot(args.snapshot)
        if args.snapshot
        else features.build_snapshot(events, curriculum)
    )
    matrix = features.build_training_matrix(events, curriculum, snapshot)
    y = matrix.y_cfa if task == models.TASK_CFA else matrix.y_tts
    return models.TrainingSet(
        X=matrix.X,
        y=y,
        student_ids=matrix.student_ids,
        feature_indices=matrix.descriptor_indices,
        task=task,
    )


def _cmd_train(args) -> int:
    curriculum = _load_catalog(args.catalog)
    data = _training_set(args, curriculum, args.task)
    if args.selected:
        with open(args.selected, "r", encoding="utf-8") as fh:
            selected = tuple(json.load(fh)["selected"])
    elif args.rfe_target:
        result = models.rfe_select(
            data, target_count=args.rfe_target, folds=args.folds,
            step=args.rfe_step, rng_seed=args.seed,
        )
        selected = result.selected
    else:
        selected = (
            features.default_cfa_features()
            if args.task == models.TASK_CFA
            else features.default_tts_features()
        )
    params = models.ForestParams(
        n_trees=args.trees,
        max_depth=args.depth,
        min_samples_leaf=args.min_leaf,
    )
    model = models.train_forest(data.select_columns(selected), params, args.task, args.seed)
    models.save_model(model, args.out)
    print(f"trained {args.task} model: {len(model.trees)} trees -> {args.out}")
    return 0


def _cmd_rfe(args) -> int:
    curriculum = _load_catalog(args.catalog)
    data = _training_set(args, curriculum, args.task)
    result = models.rfe_select(
        data, target_count=args.rfe_target, folds=args.folds,
        step=args.rfe_step, rng_seed=args.seed,
    )
    doc = {
        "task": result.task,
        "selected": list(result.selected),
        "trace": [
            {"n_features": len(stage), "cv_score": score}
            for stage, score in result.trace
        ],
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    print(
        f"selected {len(result.selected)} of {len(result.trace[0][0])} features "
        f"-> {args.out}"
    )
    return 0


def _cmd_simulate_gen(args) -> int:
    if args.catalog:
        curriculum = _load_catalog(args.catalog)
    else:
        curriculum = simulator.make_curriculum(args.exercises, seed=args.seed)
        if args.catalog_out:
            Path(args.catalog_out).write_text(catalog.dump_curriculum(curriculum))
    events, info = simulator.generate_cohort(args.students, curriculum, rng_seed=args.seed)
    with open(args.out, "w", encoding="utf-8") as fh:
        for rec in events:
            fh.write(catalog.record_to_json(rec) + "\n")
    print(f"wrote {len(events)} events for {args.students} students -> {args.out}")
    if args.profiles_out:
        doc = {
            sid: {
                "ability": p.ability,
                "speed": p.speed,
                "guess_propensity": p.guess_propensity,
            }
            for sid, p in info.profiles.items()
        }
        Path(args.profiles_out).write_text(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def _parse_policy(spec: str) -> simulator.PolicySpec:
    kind, _, param = spec.partition(":")
    if kind == "random":
        return simulator.PolicySpec.random(float(param))
    if kind == "benchmark":
        return simulator.PolicySpec.benchmark(int(param))
    if kind == "adaptive":
        cfg = policy.load_policy_config(param) if param else policy.PolicyConfig()
        return simulator.PolicySpec.adaptive(cfg)
    raise ValueError(f"unknown policy spec {spec!r} (random:p | benchmark:n | adaptive:cfg.json)")


def _replay_inputs(args, curriculum):
    events, _ = _load_events(args.events, curriculum)
    cfa_model = models.load_model(args.cfa_model) if args.cfa_model else None
    tts_model = models.load_model(args.tts_model) if args.tts_model else None
    snapshot = features.load_snapshot(args.snapshot) if args.snapshot else None
    return events, cfa_model, tts_model, snapshot


def _cmd_simulate_replay(args) -> int:
    curriculum = _load_catalog(args.catalog)
    spec = _parse_policy(args.policy)
    events, cfa_model, tts_model, snapshot = _replay_inputs(args, curriculum)
    result = simulator.replay(
        events, curriculum, spec,
        cfa_model=cfa_model, tts_model=tts_model, snapshot=snapshot,
        rng_seed=args.seed,
    )
    doc = {
        "policy": result.policy_label,
        "seed": result.seed,
        "fpr": result.fpr,
        "fpr_defined": result.fpr_defined,
        "time_saved": result.time_saved_fraction,
        "per_student": {
            sid: {
                "skipped": s.skipped_exercise_ids,
                "bad_skips": s.bad_skip_ids,
                "time_of_skipped": s.time_of_skipped,
                "time_total": s.time_total,
                "cfa_rate": s.cfa_rate,
            }
            for sid, s in result.per_student.items()
        },
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    print(
        f"{result.policy_label}: fpr={result.fpr:.4f} "
        f"time_saved={result.time_saved_fraction:.4f} -> {args.out}"
    )
    if args.curve_out:
        curve = simulator.bin_curve(simulator.personalization_curve(result))
        Path(args.curve_out).write_text(simulator.curve_to_csv(curve))
    return 0


def _cmd_simulate_sweep(args) -> int:
    curriculum = _load_catalog(args.catalog)
    with open(args.grid, "r", encoding="utf-8") as fh:
        grid = json.load(fh)
    specs: list[simulator.PolicySpec] = []
    for p in grid.get("random", []):
        specs.append(simulator.PolicySpec.random(float(p)))
    for n in grid.get("benchmark", []):
        specs.append(simulator.PolicySpec.benchmark(int(n)))
    for cfg in grid.get("adaptive", []):
        specs.append(simulator.PolicySpec.adaptive(policy.PolicyConfig(**cfg)))
    if not specs:
        print("empty sweep grid", file=sys.stderr)
        return 1
    events, cfa_model, tts_model, snapshot = _replay_inputs(args, curriculum)
    points = simulator.frontier_sweep(
        events, curriculum, specs,
        cfa_model=cfa_model, tts_model=tts_model, snapshot=snapshot,
        rng_seed=args.seed,
    )
    Path(args.out).write_text(simulator.sweep_to_csv(points))
    print(f"swept {len(points)} policies -> {args.out}")
    return 0


def _cmd_analyze(args) -> int:
    curriculum = _load_catalog(args.catalog) if args.catalog else None
    events, _ = _load_events(args.events, curriculum)
    with open(args.groups, "rb") as fh:
        groups = analysis.load_groups(fh)
    cfg = analysis.FilterConfig(
        guess_threshold_sec=args.guess, outlier_threshold_sec=args.outlier
    )
    paths = analysis.run_report(events, groups, cfg, args.out)
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    return 0


def _cmd_snapshot(args) -> int:
    curriculum = _load_catalog(args.catalog)
    events, _ = _load_events(args.events, curriculum)
    snapshot = features.build_snapshot(events, curriculum, version=args.version)
    features.save_snapshot(snapshot, args.out)
    print(
        f"snapshot v{snapshot.version}: {len(snapshot.per_exercise)} exercises, "
        f"{snapshot.global_stats.n_observations} observations -> {args.out}"
    )
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import EngineService, create_app, load_service_config

    if not args.config:
        print("error: pass --config or set ZPDSEQ_CONFIG", file=sys.stderr)
        return 1
    cfg = load_service_config(args.config)
    try:
        service = EngineService.from_config(cfg)
    except FileNotFoundError as exc:
        print(f"startup error: {exc}", file=sys.stderr)
        return 1
    if args.refresh_interval or cfg.refresh_interval_sec:
        service.start_refresh_thread(args.refresh_interval or cfg.refresh_interval_sec)
    app = create_app(service)
    host, _, port = cfg.listen_address.rpartition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8000))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zpdseq",
        description="Adaptive exercise sequencing: training, simulation, analysis, serving.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_cat = sub.add_parser("catalog", help="catalog tools")
    cat_sub = p_cat.add_subparsers(dest="subcommand", required=True)
    p_val = cat_sub.add_parser("validate", help="validate a catalog (and optionally events)")
    p_val.add_argument("--catalog", required=True)
    p_val.add_argument("--events")
    p_val.set_defaults(func=_cmd_catalog_validate)

    def add_training_args(p):
        p.add_argument("--task", choices=[models.TASK_CFA, models.TASK_TTS], required=True)
        p.add_argument("--catalog", required=True)
        p.add_argument("--events", required=True)
        p.add_argument("--snapshot", help="feature snapshot (default: build from events)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--folds", type=int, default=5)
        p.add_argument("--rfe-target", type=int, default=None)
        p.add_argument("--rfe-step", type=float, default=0.10)
        p.add_argument("--out", required=True)

    p_train = sub.add_parser("train", help="train a prediction model")
    add_training_args(p_train)
    p_train.add_argument("--trees", type=int, default=100)
    p_train.add_argument("--depth", type=int, default=12)
    p_train.add_argument("--min-leaf", type=int, default=5)
    p_train.add_argument("--selected", help="JSON file with a selected-feature list")
    p_train.set_defaults(func=_cmd_train)

    p_rfe = sub.add_parser("rfe", help="recursive feature elimination")
    add_training_args(p_rfe)
    p_rfe.set_defaults(func=_cmd_rfe, rfe_target=20)

    p_snap = sub.add_parser("snapshot", help="build a feature snapshot from events")
    p_snap.add_argument("--catalog", required=True)
    p_snap.add_argument("--events", required=True)
    p_snap.add_argument("--version", type=int, default=1)
    p_snap.add_argument("--out", required=True)
    p_snap.set_defaults(func=_cmd_snapshot)

    p_sim = sub.add_parser("simulate", help="synthetic cohorts and policy replay")
    sim_sub = p_sim.add_subparsers(dest="subcommand", required=True)

    p_gen = sim_sub.add_parser("gen", help="generate a synthetic cohort")
    p_gen.add_argument("--students", type=int, required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--catalog", help="existing catalog to use")
    p_gen.add_argument("--exercises", type=int, default=150)
    p_gen.add_argument("--catalog-out", help="write the synthetic catalog here")
    p_gen.add_argument("--profiles-out")
    p_gen.set_defaults(func=_cmd_simulate_gen)

    def add_replay_args(p):
        p.add_argument("--catalog", required=True)
        p.add_argument("--events", required=True)
        p.add_argument("--cfa-model")
        p.add_argument("--tts-model")
        p.add_argument("--snapshot")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)

    p_rep = sim_sub.add_parser("replay", help="replay one policy against events")
    p_rep.add_argument("--policy", required=True, help="random:p | benchmark:n | adaptive:cfg.json")
    add_replay_args(p_rep)
    p_rep.add_argument("--curve-out", help="personalization curve CSV")
    p_rep.set_defaults(func=_cmd_simulate_replay)

    p_swp = sim_sub.add_parser("sweep", help="replay a grid of policies")
    p_swp.add_argument("--grid", required=True, help='JSON: {"random": [..], "benchmark": [..], "adaptive": [{...}]}')
    add_replay_args(p_swp)
    p_swp.set_defaults(func=_cmd_simulate_sweep)

    p_an = sub.add_parser("analyze", help="experiment analysis report")
    p_an.add_argument("--events", required=True)
    p_an.add_argument("--groups", required=True, help="CSV: student_id,school,condition")
    p_an.add_argument("--catalog")
    p_an.add_argument("--guess", type=float, default=2.1)
    p_an.add_argument("--outlier", type=float, default=1500.0)
    p_an.add_argument("--out", required=True)
    p_an.set_defaults(func=_cmd_analyze)

    p_srv = sub.add_parser("serve", help="run the sequencing web service")
    p_srv.add_argument(
        "--config",
        default=os.environ.get("ZPDSEQ_CONFIG"),
        help="service config JSON (or set ZPDSEQ_CONFIG)",
    )
    p_srv.add_argument("--refresh-interval", type=float, default=None)
    p_srv.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (catalog.CatalogError, catalog.EventValidationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
