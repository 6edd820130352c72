"""Command-line operator surface: generate, train, eval, inspect.

Reports are machine-readable JSON first; each report-writing command
also renders a figure next to its output.  Every run writes a manifest
(command, config hash, seed, argv, artifact paths) from which the same
byte-identical outputs can be reproduced.

Exit codes: 0 success, 2 config/validation error, 3 I/O error,
4 training divergence.  EBSG_SEED in the environment overrides the
configured seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from . import metrics as em
from . import plotting
from . import synthetic as sd
from . import training as tr
from .graphs import decode, read_header, read_records
from .langevin import sgld_run

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4

MANIFEST_FORMAT_VERSION = 1
FEW_SHOT_BUCKETS = ((1, 5), (6, 10), (11, 15), (16, 20))
_INSPECT_STREAM = 5  # seed stream id, disjoint from the generator's


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _write_json(path, obj) -> str:
    with open(path, "w") as fh:
        fh.write(_dumps(obj))
        fh.write("\n")
    return str(path)


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _env_seed():
    raw = os.environ.get("EBSG_SEED")
    if raw is None or raw == "":
        return None
    return int(raw)


def _write_manifest(out_dir, name, command, config_obj, seed, argv,
                    artifacts) -> str:
    path = os.path.join(out_dir, f"manifest_{name}.json")
    return _write_json(path, {
        "format_version": MANIFEST_FORMAT_VERSION,
        "command": command,
        "config_hash": _sha256(_dumps(config_obj)),
        "seed": seed,
        "argv": list(argv),
        "artifacts": {k: str(v) for k, v in sorted(artifacts.items())},
    })


def rerun_from_manifest(path) -> int:
    """Re-execute the command recorded in a manifest."""
    return main(_load_json(path)["argv"])


def _space_hash(space) -> str:
    return _sha256(_dumps(space.to_json()))


def _load_dataset_split(data_dir, split):
    header = read_header(os.path.join(data_dir, "header.json"))
    records = read_records(os.path.join(data_dir, f"{split}.jsonl"))
    return header, records


# ---------------------------------------------------------------------------
# generate


def _resolve_generate_config(args):
    obj = _load_json(args.config) if args.config else {}
    if not isinstance(obj, dict):
        raise ValueError("generate config must be a JSON object")
    unknown = set(obj) - {"generator", "counts"}
    if unknown:
        raise ValueError(f"unknown generate config keys {sorted(unknown)}")
    gen = {**sd.GeneratorConfig().to_json(), **obj.get("generator", {})}
    cfg = sd.GeneratorConfig.from_json(gen)
    counts = sd.SplitCounts.from_json({**sd.SplitCounts().to_json(),
                                       **obj.get("counts", {})})
    seed = _env_seed()
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg, counts


def _bucket_occupancy(census: dict) -> dict:
    counts = np.array(list(census.values())) if census else np.zeros(0)
    return {f"{lo}-{hi}": int(((counts >= lo) & (counts <= hi)).sum())
            for lo, hi in FEW_SHOT_BUCKETS}


def cmd_generate(args) -> int:
    cfg, counts = _resolve_generate_config(args)
    os.makedirs(args.out, exist_ok=True)

    targets = [os.path.join(args.out, name) for name in
               ("train.jsonl", "val.jsonl", "test.jsonl", "header.json")]
    before = None
    if all(os.path.exists(t) for t in targets):
        before = [_sha256(open(t).read()) for t in targets]

    paths = sd.generate_dataset(cfg, counts, args.out)
    header = read_header(paths["header"])
    figure = plotting.plot_predicate_marginals(
        header["config"]["predicate_marginals"],
        header["config"]["zipf_target"],
        os.path.join(args.out, "marginals.png"))

    reproduced = before is not None and \
        before == [_sha256(open(t).read()) for t in targets]
    occupancy = _bucket_occupancy(header["census"])
    print(f"scenes: train={counts.train} val={counts.val} test={counts.test}")
    print(f"train census: {len(header['census'])} distinct triplets, "
          f"{sum(header['census'].values())} instances")
    print(f"bucket occupancy: {occupancy}")
    if reproduced:
        print("reproduced: outputs identical to the existing files")

    config_obj = {"generator": cfg.to_json(), "counts": counts.to_json()}
    argv = ["generate", "--out", str(args.out)]
    if args.config:
        argv += ["--config", str(args.config)]
    _write_manifest(args.out, "generate", "generate", config_obj, cfg.seed,
                    argv, {**paths, "figure": figure})
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _resolve_train_config(args):
    obj = _load_json(args.config)
    if not isinstance(obj, dict) or "data" not in obj:
        raise ValueError("train config needs a 'data' entry pointing at a dataset")
    unknown = set(obj) - {"data", "train"}
    if unknown:
        raise ValueError(f"unknown train config keys {sorted(unknown)}")
    data_dir = obj["data"]
    if not os.path.isabs(data_dir):
        data_dir = os.path.join(os.path.dirname(os.path.abspath(args.config)),
                                data_dir)
    config = tr.TrainConfig.from_json(obj.get("train", {}))
    if args.mode is not None:
        config = dataclasses.replace(config, mode=args.mode)
    seed = _env_seed()
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    return data_dir, config


def cmd_train(args) -> int:
    data_dir, config = _resolve_train_config(args)
    header, train_records = _load_dataset_split(data_dir, "train")
    val_records = read_records(os.path.join(data_dir, "val.jsonl"))
    data = tr.TrainData(space=header["label_space"], train=train_records,
                        val=val_records, rules=tuple(header["rules"]))

    state, _ = tr.train(data, config, out_dir=args.out,
                        resume_path=args.resume)

    report_path = os.path.join(args.out, "report.jsonl")
    with open(report_path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    figure = plotting.plot_loss_curves(rows, os.path.join(args.out, "losses.png"))
    final_ckpt = os.path.join(args.out, f"checkpoint_epoch{state.epoch - 1:03d}.json")

    last = rows[-1]
    print(f"mode={state.mode} epochs={state.epoch} "
          f"final total={last['total']:.4f} L_t={last['L_t']:.4f}")
    if last.get("val_metrics"):
        print(f"val: {_dumps(last['val_metrics'])}")
    print(f"final checkpoint: {final_ckpt}")

    config_obj = {"data": data_dir, "train": config.to_json()}
    argv = ["train", "--config", str(args.config), "--out", str(args.out)]
    if args.mode is not None:
        argv += ["--mode", args.mode]
    if args.resume is not None:
        argv += ["--resume", str(args.resume)]
    _write_manifest(args.out, "train", "train", config_obj, config.seed, argv,
                    {"report": report_path, "final_checkpoint": final_ckpt,
                     "figure": figure})
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _parse_k(raw: str) -> list:
    ks = sorted({int(part) for part in raw.split(",") if part.strip()})
    if not ks or ks[0] < 1:
        raise ValueError(f"bad K list {raw!r}")
    return ks


def _evaluate(state, records, header, setting, ks) -> dict:
    census = header["census"]
    results = []
    decoded = []
    with ad.no_grad():
        for record in records:
            sg0 = tr.predict(record.image_graph, state.predictor)
            results.append(em.ImageResult(ranked=em.rank_triplets(sg0, setting),
                                          gt_triplets=record.triplets(),
                                          node_classes=record.node_labels))
            nodes, edges = decode(sg0)
            if setting == "predcls":
                nodes = record.node_labels
            decoded.append((nodes, edges))

    def per_image_recall(k):
        vals = [em.recall_at_k(r.ranked, r.gt_triplets, k) for r in results]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    few = {}
    for k in ks:
        for (lo, hi), val in em.few_shot_recall(results, census,
                                                FEW_SHOT_BUCKETS, k).items():
            few.setdefault(f"{lo}-{hi}", {})[str(k)] = val
    return {
        "setting": setting,
        "num_scenes": len(records),
        "k": ks,
        "recall": {str(k): per_image_recall(k) for k in ks},
        "mean_recall": {str(k): em.mean_recall_at_k(results, state.space, k)
                        for k in ks},
        "zero_shot_recall": {str(k): em.zero_shot_recall(results, census, k)
                             for k in ks},
        "few_shot_recall": few,
        "violation_rate": em.constraint_violation_rate(
            decoded, tuple(header["rules"])),
        "label_space_hash": _space_hash(state.space),
    }


def cmd_eval(args) -> int:
    ks = _parse_k(args.k)
    if args.setting not in em.SETTINGS:
        raise ValueError(f"unknown setting {args.setting!r}")
    header, records = _load_dataset_split(args.data, args.split)
    if not records:
        raise ValueError(f"no records in split {args.split!r}")
    f = records[0].image_graph.f
    state, config, _, _ = tr.load_checkpoint(args.ckpt, f)
    if _space_hash(state.space) != _space_hash(header["label_space"]):
        raise ValueError("checkpoint and dataset label spaces differ")

    report = _evaluate(state, records, header, args.setting, ks)
    report.update({"split": args.split, "checkpoint": str(args.ckpt),
                   "mode": state.mode, "epoch": state.epoch})

    out_dir = args.out or os.path.dirname(os.path.abspath(args.ckpt))
    os.makedirs(out_dir, exist_ok=True)
    stem = f"eval_{args.split}_{args.setting}"
    report_path = _write_json(os.path.join(out_dir, f"{stem}.json"), report)
    figure = plotting.plot_metric_bars(report,
                                       os.path.join(out_dir, f"{stem}.png"))
    print(_dumps(report))

    config_obj = {"ckpt": str(args.ckpt), "data": str(args.data),
                  "setting": args.setting, "split": args.split, "k": ks}
    argv = ["eval", "--ckpt", str(args.ckpt), "--data", str(args.data),
            "--setting", args.setting, "--k", args.k,
            "--split", args.split, "--out", out_dir]
    _write_manifest(out_dir, stem, "eval", config_obj, state.seed, argv,
                    {"report": report_path, "figure": figure})
    return EXIT_OK


# ---------------------------------------------------------------------------
# inspect


def cmd_inspect(args) -> int:
    if args.tau < 0 or args.noise_scale < 0:
        raise ValueError("tau and noise scale must be non-negative")
    header, records = _load_dataset_split(args.data, args.split)
    if not 0 <= args.record < len(records):
        raise ValueError(f"record index {args.record} outside 0..{len(records) - 1}")
    record = records[args.record]
    state, config, _, _ = tr.load_checkpoint(args.ckpt, record.image_graph.f)
    if _space_hash(state.space) != _space_hash(header["label_space"]):
        raise ValueError("checkpoint and dataset label spaces differ")

    # inspection never differentiates through the chain
    sgld = dataclasses.replace(config.sgld, tau=args.tau,
                               noise_scale=args.noise_scale,
                               record_gradients_through_chain=False)
    seed = _env_seed()
    if seed is None:
        seed = config.seed
    rng = np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(_INSPECT_STREAM, args.record)))
    with ad.ComputationRecord():
        sg0 = tr.predict(record.image_graph, state.predictor)
        traj = sgld_run(sg0, record.image_graph, state.energy, sgld, rng)

    nodes0, edges0 = decode(sg0)
    nodes1, edges1 = decode(traj.final_state)
    diff = {
        "record": args.record,
        "split": args.split,
        "tau": args.tau,
        "noise_scale": args.noise_scale,
        "energy_start": traj.energies[0],
        "energy_final": traj.energies[-1],
        "node_changes": [[int(i), int(a), int(b)]
                         for i, (a, b) in enumerate(zip(nodes0, nodes1)) if a != b],
        "edge_changes": [[int(i), int(j), int(edges0[i, j]), int(edges1[i, j])]
                         for i in range(record.n) for j in range(record.n)
                         if edges0[i, j] != edges1[i, j]],
    }

    out_dir = args.out or os.path.dirname(os.path.abspath(args.ckpt))
    os.makedirs(out_dir, exist_ok=True)
    stem = f"inspect_record{args.record:04d}_tau{args.tau:03d}"
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    with open(csv_path, "w") as fh:
        fh.write("step,energy\n")
        for step, energy in enumerate(traj.energies):
            fh.write(f"{step},{energy:.17g}\n")
    diff_path = _write_json(os.path.join(out_dir, f"{stem}.json"), diff)
    figure = plotting.plot_energy_trajectory(
        traj.energies, os.path.join(out_dir, f"{stem}.png"),
        label=f"record {args.record}, tau {args.tau}")
    print(_dumps(diff))

    config_obj = {"ckpt": str(args.ckpt), "data": str(args.data),
                  "split": args.split, "record": args.record,
                  "tau": args.tau, "noise_scale": args.noise_scale}
    argv = ["inspect", "--ckpt", str(args.ckpt), "--data", str(args.data),
            "--split", args.split, "--record", str(args.record),
            "--tau", str(args.tau), "--noise-scale", str(args.noise_scale),
            "--out", out_dir]
    _write_manifest(out_dir, stem, "inspect", config_obj, seed, argv,
                    {"trajectory": csv_path, "diff": diff_path,
                     "figure": figure})
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ebsg", description="energy-based scene-graph experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--config", help="JSON file with generator/counts overrides")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--config", required=True,
                   help="JSON file with data path and training settings")
    p.add_argument("--mode", choices=("ce", "ebm"))
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compute recall metrics for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--setting", default="predcls", choices=em.SETTINGS)
    p.add_argument("--k", default="20,50,100")
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="report directory (default: next to ckpt)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="trace the sampler on one record")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--record", type=int, required=True)
    p.add_argument("--tau", type=int, default=20)
    p.add_argument("--noise-scale", type=float, default=0.0)
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="report directory (default: next to ckpt)")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    try:
        return args.func(args)
    except tr.DivergenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except ad.NonFiniteError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ValueError, KeyError, TypeError, sd.GenerationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
