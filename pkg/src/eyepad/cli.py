"""Experiment orchestration: data generation, training, evaluation, the
distillation-weight ablation, and the strategy comparison table.

One JSON config file with sections {data, train, eval, output} drives every
subcommand; flags only pick the subcommand and paths. Exit codes: 0 ok,
2 config error, 3 missing input, 4 incompatible artifacts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import protocols, synthdata, trainers
from .losses import LossWeights
from .models import load_snapshot, save_snapshot

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_INCOMPATIBLE = 4

DEFAULT_LAMBDA1_GRID = (0.1, 0.5, 0.75, 1.0, 2.0, 5.0, 10.0)


class ConfigError(Exception):
    pass


_SECTION_KEYS = {
    "data": {
        "seed", "n_train_users", "n_test_users", "images_per_side",
        "query_per_side", "gallery_per_side", "n_pad_train_users",
        "n_pad_test_users", "pad_live_per_user", "pad_lens_per_user",
        "pad_print_per_user", "patch_size", "render_noise", "degradation",
        "dir",
    },
    "train": {
        "strategy", "epochs", "batch_size", "samples_per_class", "optimizer",
        "lr", "gamma", "decay_after", "seed", "preset", "feature_dim",
        "degradation", "alpha", "lambda1", "lambda2", "lambda_auth",
        "lambda_pad",
    },
    "eval": {"k_values", "runs", "far_targets", "seed"},
    "output": {"dir"},
}


def load_config(path):
    """Parse and validate the experiment config; unknown keys are rejected."""
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for section in raw:
        if section not in _SECTION_KEYS:
            raise ConfigError(f"unknown config section '{section}'")
        for key in raw[section]:
            if key not in _SECTION_KEYS[section]:
                raise ConfigError(f"unknown key '{section}.{key}'")
    cfg = {section: dict(raw.get(section, {})) for section in _SECTION_KEYS}
    env_seed = os.environ.get("EYEPAD_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"EYEPAD_SEED must be an integer, got '{env_seed}'")
        cfg["data"]["seed"] = seed
        cfg["train"]["seed"] = seed
        cfg["eval"]["seed"] = seed
    return cfg


def bundle_config(cfg):
    data = dict(cfg["data"])
    data.pop("dir", None)
    try:
        return synthdata.BundleConfig(**data)
    except TypeError as e:
        raise ConfigError(f"bad data section: {e}")


def train_config(cfg):
    t = dict(cfg["train"])
    weight_keys = {"alpha", "lambda1", "lambda2", "lambda_auth", "lambda_pad"}
    overrides = {k: t.pop(k) for k in list(t) if k in weight_keys}
    preset_name = t.get("preset", "medium")
    degradation = t.get("degradation", cfg["data"].get("degradation", "clean"))
    weights = trainers.default_weights(preset_name, degradation)
    for k, v in overrides.items():
        setattr(weights, k, v)
    try:
        return trainers.TrainConfig(weights=weights, **t)
    except (TypeError, trainers.TrainError) as e:
        raise ConfigError(f"bad train section: {e}")


def _data_dir(cfg):
    return cfg["data"].get("dir", "bundle")


def _out_dir(cfg):
    path = cfg["output"].get("dir", "out")
    os.makedirs(path, exist_ok=True)
    return path


def cmd_generate(cfg, degradation=None):
    if degradation is not None:
        cfg["data"]["degradation"] = degradation
    bc = bundle_config(cfg)
    bundle = synthdata.build_bundle(bc)
    manifest = synthdata.save_bundle(bundle, _data_dir(cfg))
    for name, count in sorted(manifest["counts"].items()):
        print(f"{name}: {count}")
    print(f"bundle written to {_data_dir(cfg)}")
    return EXIT_OK


def _load_bundle_checked(cfg):
    try:
        return synthdata.load_bundle(_data_dir(cfg))
    except FileNotFoundError as e:
        print(f"error: bundle not found ({e}); run `eyepad generate` first",
              file=sys.stderr)
        return None


def cmd_train(cfg):
    bundle = _load_bundle_checked(cfg)
    if bundle is None:
        return EXIT_MISSING
    tc = train_config(cfg)
    out = _out_dir(cfg)
    model, log = trainers.run_strategy(tc, bundle)
    save_snapshot(model, out, tc.strategy, tc.seed, epoch=tc.epochs)
    log.to_csv(os.path.join(out, "trainlog.csv"))
    print(f"trained {tc.strategy} ({len(log.rows)} iterations); "
          f"snapshot + trainlog.csv in {out}")
    return EXIT_OK


def _eval_params(cfg):
    e = cfg["eval"]
    return {
        "k_values": tuple(e.get("k_values", (1, 2, 5))),
        "runs": int(e.get("runs", 10)),
        "far_targets": tuple(e.get("far_targets", (1e-4, 1e-3, 1e-2))),
        "master_seed": int(e.get("seed", cfg["train"].get("seed", 0))),
    }


def _report_json(report):
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def _table_rows(results, far_targets, k_values):
    """Rows shaped like the published comparison table; '-' marks cells a
    single-task model has no score for."""
    header = ["method"]
    for k in k_values:
        header += [f"ofrr_k{k}"] + [f"tar_far_{t:.0e}_k{k}" for t in far_targets]
    header += ["tdr_at_fdr_002", "apcer", "bpcer", "hter"]
    rows = [header]
    for name, report in results:
        row = [name]
        ea_capable = name != "pad_only"
        pad_capable = name != "ea_only"
        joint = ea_capable and pad_capable
        for k in k_values:
            kr = report.k_results[k]
            row.append(f"{kr.ofrr:.4f}" if joint else "-")
            for t in far_targets:
                row.append(f"{kr.tar_at_far[t]:.4f}" if ea_capable else "-")
        for val in (report.tdr_at_fdr_002, report.apcer, report.bpcer, report.hter):
            row.append(f"{val:.4f}" if pad_capable else "-")
        rows.append(row)
    return rows


def _mark_best(rows, k_values):
    """Suffix the best (*) and second-best (+) OFRR per K column."""
    for col in range(1, len(rows[0])):
        if not rows[0][col].startswith("ofrr"):
            continue
        vals = []
        for r in range(1, len(rows)):
            cell = rows[r][col]
            if cell != "-":
                vals.append((float(cell), r))
        vals.sort()
        if vals:
            rows[vals[0][1]][col] += "*"
        if len(vals) > 1:
            rows[vals[1][1]][col] += "+"
    return rows


def _write_csv(rows, path):
    with open(path, "w") as f:
        for row in rows:
            f.write(",".join(str(c) for c in row) + "\n")


def _write_roc_csv(roc, path):
    with open(path, "w") as f:
        f.write("threshold,tar,far\n")
        for t, tar, far in zip(roc.thresholds, roc.tar, roc.far):
            f.write(f"{t!r},{tar!r},{far!r}\n")


def cmd_evaluate(cfg, snapshot_path):
    bundle = _load_bundle_checked(cfg)
    if bundle is None:
        return EXIT_MISSING
    if not os.path.exists(snapshot_path):
        print(f"error: snapshot not found: {snapshot_path}", file=sys.stderr)
        return EXIT_MISSING
    model, _ = load_snapshot(snapshot_path)
    if tuple(model.spec.input_shape) != (bundle.config.patch_size,) * 2:
        print(
            f"error: snapshot input shape {model.spec.input_shape} does not "
            f"match bundle patch size {bundle.config.patch_size}",
            file=sys.stderr,
        )
        return EXIT_INCOMPATIBLE
    p = _eval_params(cfg)
    report = protocols.evaluate_model(model, bundle, **p)
    out = _out_dir(cfg)
    with open(os.path.join(out, "report.json"), "w") as f:
        f.write(_report_json(report))
    rows = _table_rows([("model", report)], p["far_targets"], p["k_values"])
    _write_csv(rows, os.path.join(out, "table.csv"))
    rng = np.random.default_rng(p["master_seed"])
    u2u = protocols.user_to_user(
        model,
        bundle.eye_images("ea_query"),
        bundle.eye_images("ea_gallery"),
        max(p["k_values"]),
        rng,
        p["far_targets"],
    )
    _write_roc_csv(u2u.roc, os.path.join(out, "roc.csv"))
    print(f"report.json, table.csv, roc.csv written to {out}")
    return EXIT_OK


def cmd_ablate_lambda1(cfg, values):
    bundle = _load_bundle_checked(cfg)
    if bundle is None:
        return EXIT_MISSING
    tc = train_config(cfg)
    p = _eval_params(cfg)
    out = _out_dir(cfg)
    ea = bundle.ea_train_arrays()
    pad = bundle.pad_arrays("pad_train")
    # Step 1 is independent of lambda1: train the teacher once
    teacher, _ = trainers.train_ea_only(tc, ea)
    teacher.freeze()
    rows = [["lambda1", "tar_at_far_1e-03", "tdr_at_fdr_002"]]
    for lam in values:
        cfg_l = trainers.TrainConfig(
            **{**tc.__dict__, "weights": LossWeights(**tc.weights.__dict__)}
        )
        cfg_l.weights.lambda1 = lam
        _, student, _ = trainers.train_eyepad(cfg_l, ea, pad, teacher=teacher)
        report = protocols.evaluate_model(student, bundle, **p)
        k = max(p["k_values"])
        tar = report.k_results[k].tar_at_far[1e-3]
        tdr = report.tdr_at_fdr_002
        with open(os.path.join(out, f"report_lambda1_{lam}.json"), "w") as f:
            f.write(_report_json(report))
        rows.append([repr(float(lam)), f"{tar:.6f}", f"{tdr:.6f}"])
        print(f"lambda1={lam}: TAR@FAR=1e-3 {tar:.4f}  TDR@FDR=0.002 {tdr:.4f}")
    _write_csv(rows, os.path.join(out, "ablation.csv"))
    print(f"ablation.csv written to {out}")
    return EXIT_OK


def cmd_compare(cfg):
    bundle = _load_bundle_checked(cfg)
    if bundle is None:
        return EXIT_MISSING
    tc = train_config(cfg)
    p = _eval_params(cfg)
    out = _out_dir(cfg)
    results = []
    for strategy in trainers.STRATEGIES:
        cfg_s = trainers.TrainConfig(
            **{**tc.__dict__, "strategy": strategy,
               "weights": LossWeights(**tc.weights.__dict__)}
        )
        model, _ = trainers.run_strategy(cfg_s, bundle)
        report = protocols.evaluate_model(model, bundle, **p)
        results.append((strategy, report))
        print(f"{strategy}: done")
    rows = _mark_best(
        _table_rows(results, p["far_targets"], p["k_values"]), p["k_values"]
    )
    _write_csv(rows, os.path.join(out, "table.csv"))
    with open(os.path.join(out, "compare.json"), "w") as f:
        f.write(json.dumps(
            {name: rep.to_dict() for name, rep in results},
            indent=2, sort_keys=True,
        ) + "\n")
    print(f"table.csv written to {out} (* best, + second-best OFRR)")
    return EXIT_OK


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="eyepad",
        description="joint eye-authentication / attack-detection experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="build and save the synthetic bundle")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--degradation", choices=synthdata.DEGRADATIONS,
                       help="override the config's degradation mode")

    p_train = sub.add_parser("train", help="train the configured strategy")
    p_train.add_argument("--config", required=True)

    p_eval = sub.add_parser("evaluate", help="run the protocols on a snapshot")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--snapshot", required=True,
                        help="path to a .model.json snapshot manifest")

    p_abl = sub.add_parser("ablate-lambda1",
                           help="sweep the distillation weight of step 2")
    p_abl.add_argument("--config", required=True)
    p_abl.add_argument("--values", type=float, nargs="+",
                       default=list(DEFAULT_LAMBDA1_GRID))

    p_cmp = sub.add_parser("compare", help="train and evaluate all strategies")
    p_cmp.add_argument("--config", required=True)

    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "generate":
            return cmd_generate(cfg, args.degradation)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.snapshot)
        if args.command == "ablate-lambda1":
            return cmd_ablate_lambda1(cfg, args.values)
        if args.command == "compare":
            return cmd_compare(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    parser.error(f"unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
