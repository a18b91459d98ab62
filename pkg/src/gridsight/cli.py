"""Command-line front end.

Every command resolves a run configuration (config file plus flag overrides),
writes the resolved form next to its artifacts, and reports failures as a
single `error: <Type>: <message>` line on stderr with a nonzero exit. Run
directories live under $GRIDSIGHT_RUN_ROOT (default ./runs) and are named by
the hash of the resolved configuration plus the command inputs, so re-running
the same invocation lands in the same place.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import world as gworld
from .config import RunConfig, load_run_config, run_root
from .errors import ConfigError, FormatError, GridsightError, StateError
from .io import (CHECKPOINT_MAGIC, DATASET_MAGIC, DatasetReader, file_checksum,
                 load_checkpoint, save_checkpoint, write_json_atomic)
from .model import HEAD_ORDER, NetInput, build_model, forward
from .preproc import RawFrame, assemble_sample
from .tensor import Tensor
from .training import (SampleSource, cross_validate, evaluate, expand_examples,
                       predict_with_latency, run_ablation_suite, train)
from .world import ACTIONS, ORIENTATIONS, Perturbation


def _resolved_config(args) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None))
    tr = {}
    for flag, field in (("epochs", "epochs"), ("seed", "seed"),
                        ("batch_size", "batch_size"),
                        ("learning_rate", "learning_rate")):
        v = getattr(args, flag, None)
        if v is not None:
            tr[field] = v
    if tr:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **tr))
    return cfg


def _artifact_dir(kind: str, cfg: RunConfig, inputs: dict,
                  override: str | None = None) -> str:
    """Create the run directory and drop resolved config + invocation record."""
    if override is not None:
        path = override
    else:
        h = hashlib.sha256()
        h.update(cfg.canonical_json().encode())
        h.update(json.dumps(inputs, sort_keys=True).encode())
        path = os.path.join(run_root(), f"{kind}-{h.hexdigest()[:12]}")
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "config.json"), "w", encoding="utf-8") as f:
        f.write(cfg.canonical_json())
    write_json_atomic(os.path.join(path, "invocation.json"),
                      {"command": kind, **inputs})
    return path


def _parse_ids(spec: str | None, n: int) -> list:
    """'12' one sample, '40:60' a half-open range, default everything."""
    if spec is None:
        return list(range(n))
    try:
        if ":" in spec:
            lo_s, hi_s = spec.split(":", 1)
            lo = int(lo_s) if lo_s else 0
            hi = int(hi_s) if hi_s else n
        else:
            lo = int(spec)
            hi = lo + 1
    except ValueError as err:
        raise ConfigError(f"bad --samples {spec!r}: {err}") from err
    if not (0 <= lo < hi <= n):
        raise ConfigError(
            f"--samples {spec!r} out of range for {n} samples")
    return list(range(lo, hi))


def _accuracy_line(acc: dict) -> str:
    return "  ".join(f"{h}={acc[h]:.3f}" for h in HEAD_ORDER if h in acc)


def _table(rows: list, headers: list) -> str:
    cells = [headers] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    for ri, r in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if ri == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _perturbation_from_args(args) -> Perturbation | None:
    if not getattr(args, "perturbation", None):
        return None
    return Perturbation(kind=args.perturbation,
                        magnitude=args.magnitude if args.magnitude is not None
                        else 0.0)


# ---------------------------------------------------------------------------
# commands


def _cmd_gen_data(args) -> int:
    cfg = _resolved_config(args)
    mix = None
    if any(p.kind != "none" for p, _ in cfg.perturbation_mix):
        mix = list(cfg.perturbation_mix)
    report = gworld.generate_dataset(cfg.world, args.out, args.samples,
                                     seed=args.seed, perturbation_mix=mix)
    with open(args.out + ".config.json", "w", encoding="utf-8") as f:
        f.write(cfg.canonical_json())
    checksum = file_checksum(args.out)
    write_json_atomic(args.out + ".report.json",
                      {**report, "checksum": checksum})
    print(f"wrote {args.out}: {args.samples} samples, seed {args.seed}, "
          f"sha256 {checksum[:16]}")
    dead = {h: v for h, v in report["dead_classes"].items() if v}
    if dead:
        print("dead classes: " + "  ".join(f"{h}={v}" for h, v in dead.items()))
    return 0


def _cmd_capture_background(args) -> int:
    cfg = _resolved_config(args)
    vantage = None
    if args.vantage is not None:
        parts = args.vantage.split(",")
        if len(parts) != 3:
            raise ConfigError(f"--vantage needs x,y,z, got {args.vantage!r}")
        vantage = tuple(float(p) for p in parts)
    frame = gworld.capture_background(cfg.world, vantage)
    if vantage is None:
        vantage = (cfg.world.cam_x, cfg.world.cam_y, cfg.world.cam_z)
    out = args.out if args.out.endswith(".npz") else args.out + ".npz"
    with open(out, "wb") as f:
        np.savez(f, rgb=frame.rgb, depth=frame.depth,
                 vantage=np.asarray(vantage, dtype=np.float64))
    with open(out + ".config.json", "w", encoding="utf-8") as f:
        f.write(cfg.canonical_json())
    print(f"wrote {out}: {frame.rgb.shape[0]}x{frame.rgb.shape[1]} "
          "background")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolved_config(args)
    out = _artifact_dir("train", cfg,
                        {"dataset": os.path.abspath(args.dataset)},
                        override=args.run_dir)
    with DatasetReader(args.dataset) as reader:
        source = SampleSource(reader, crop_cfg=cfg.crop, ablation=cfg.ablation)
        ids = list(range(reader.n_samples))
        rng = np.random.default_rng(cfg.train.seed)
        n_val = max(1, int(round(len(ids) * cfg.train.val_fraction)))
        pick = rng.permutation(len(ids))
        val_ids = sorted(int(ids[j]) for j in pick[:n_val])
        fit_ids = sorted(int(ids[j]) for j in pick[n_val:])
        model = build_model(source.space, source.geometry(),
                            ablation=cfg.ablation, seed=cfg.train.seed)
        run = train(model, source, fit_ids, cfg.train, val_samples=val_ids,
                    metrics_path=os.path.join(out, "metrics.jsonl"))
        ckpt = os.path.join(out, "model.ckpt")
        save_checkpoint(model, ckpt)
    final = run["final"]
    print(f"trained {run['epochs_run']} epochs "
          f"(loss {final['train_loss']:.3f})")
    if "val_accuracy" in final:
        print("val  " + _accuracy_line(final["val_accuracy"]))
    print(f"wrote {ckpt}")
    return 0


def _steady_state(times: list) -> dict:
    """Latency stats with the warmup frames dropped."""
    warm = times[min(5, max(0, len(times) - 2)):]
    arr = np.asarray(warm)
    mean = float(arr.mean())
    return {"n_frames": len(times), "n_steady": len(warm),
            "mean_s": mean, "std_s": float(arr.std()),
            "cv": float(arr.std() / mean) if mean else 0.0,
            "p95_s": float(np.percentile(arr, 95))}


def _cmd_eval(args) -> int:
    cfg = _resolved_config(args)
    pert = _perturbation_from_args(args)
    with DatasetReader(args.dataset) as reader:
        model = load_checkpoint(args.checkpoint, expect_space=reader.space)
        source = SampleSource(reader, crop_cfg=cfg.crop,
                              ablation=model.ablation, detector=args.detector,
                              perturbation=pert)
        ids = _parse_ids(args.samples, reader.n_samples)
        examples = expand_examples(ids, reader.n_experts, "all")
        report = evaluate(model, source, examples, confusion=args.confusion)
        lat_n = min(args.latency_frames, len(examples))
        _, times = predict_with_latency(model, source, examples[:lat_n])
    inputs = {"dataset": os.path.abspath(args.dataset),
              "checkpoint": os.path.abspath(args.checkpoint),
              "samples": args.samples, "detector": args.detector,
              "perturbation": dataclasses.asdict(pert) if pert else None}
    out = _artifact_dir("eval", cfg, inputs, override=args.run_dir)
    write_json_atomic(os.path.join(out, "report.json"),
                      {**report, "inputs": inputs})
    # wall-clock latency can never be bit-stable, so it lives in its own file
    write_json_atomic(os.path.join(out, "latency.json"), _steady_state(times))
    print(f"evaluated {report['n']} examples "
          f"({report['misses']} detection misses)")
    print("test " + _accuracy_line(report["accuracy"]))
    st = _steady_state(times)
    print(f"latency {st['mean_s'] * 1e3:.1f} ms/frame "
          f"(std {st['std_s'] * 1e3:.1f}) over {st['n_steady']} frames")
    print(f"wrote {os.path.join(out, 'report.json')}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _resolved_config(args)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    report = run_ablation_suite(args.dataset, seeds=seeds, cfg=cfg.train,
                                crop_cfg=cfg.crop, verbose=True)
    out = _artifact_dir("ablate", cfg,
                        {"dataset": os.path.abspath(args.dataset),
                         "seeds": list(seeds)}, override=args.run_dir)
    write_json_atomic(os.path.join(out, "ablation.json"), report)
    heads = [h for h in HEAD_ORDER
             if h in report["variants"]["full"]["mean_accuracy"]]
    rows = []
    for name, cell in report["variants"].items():
        mean = cell["mean_accuracy"]
        rows.append([name] + [f"{mean[h]:.3f}" if h in mean else "-"
                              for h in heads])
    print(_table(rows, ["variant"] + heads))
    print(f"wrote {os.path.join(out, 'ablation.json')}")
    return 0


def _parse_perturbations(spec: str) -> list:
    """'occlusion:0.5,dim-light:0.4' -> [Perturbation, ...]."""
    out = []
    for part in spec.split(","):
        if not part:
            continue
        if ":" not in part:
            raise ConfigError(f"perturbation {part!r} needs kind:magnitude")
        kind, mag = part.rsplit(":", 1)
        try:
            out.append(Perturbation(kind=kind, magnitude=float(mag)))
        except ValueError as err:
            raise ConfigError(f"bad magnitude in {part!r}: {err}") from err
    if not out:
        raise ConfigError("no perturbations given")
    return out


def _cmd_robustness(args) -> int:
    cfg = _resolved_config(args)
    perts = _parse_perturbations(args.perturbations)
    with DatasetReader(args.dataset) as reader:
        model = load_checkpoint(args.checkpoint, expect_space=reader.space)
        ids = _parse_ids(args.samples, reader.n_samples)
        examples = expand_examples(ids, reader.n_experts, "all")
        conditions = [("clean", None)] + [
            (f"{p.kind}:{p.magnitude:g}", p) for p in perts]
        results = {}
        for name, pert in conditions:
            source = SampleSource(reader, crop_cfg=cfg.crop,
                                  ablation=model.ablation,
                                  detector=args.detector, perturbation=pert)
            rep = evaluate(model, source, examples)
            results[name] = {"accuracy": rep["accuracy"],
                             "misses": rep["misses"]}
            print(f"{name}: " + _accuracy_line(rep["accuracy"])
                  + f"  misses={rep['misses']}")
    inputs = {"dataset": os.path.abspath(args.dataset),
              "checkpoint": os.path.abspath(args.checkpoint),
              "perturbations": args.perturbations, "samples": args.samples}
    out = _artifact_dir("robustness", cfg, inputs, override=args.run_dir)
    write_json_atomic(os.path.join(out, "robustness.json"),
                      {"conditions": results, "inputs": inputs})
    clean = results["clean"]["accuracy"]
    heads = [h for h in HEAD_ORDER if h in clean]
    rows = []
    for name, r in results.items():
        if name == "clean":
            continue
        rows.append([name] + [f"{r['accuracy'][h] - clean[h]:+.3f}"
                              for h in heads])
    if rows:
        print(_table(rows, ["delta vs clean"] + heads))
    print(f"wrote {os.path.join(out, 'robustness.json')}")
    return 0


def _cmd_kfold(args) -> int:
    cfg = _resolved_config(args)
    report = cross_validate(args.dataset, k=args.k, cfg=cfg.train,
                            crop_cfg=cfg.crop, detector=args.detector,
                            verbose=True)
    out = _artifact_dir("kfold", cfg,
                        {"dataset": os.path.abspath(args.dataset),
                         "k": args.k}, override=args.run_dir)
    write_json_atomic(os.path.join(out, "kfold.json"), report)
    print("mean " + _accuracy_line(report["mean_accuracy"]))
    print(f"wrote {os.path.join(out, 'kfold.json')}")
    return 0


def _decode_prediction(pred) -> str:
    x, y, z, theta, action, dx, dy, dz = (int(v) for v in pred)
    return (f"x={x} y={y} z={z} theta={ORIENTATIONS[theta]} "
            f"action={ACTIONS[action]} dx={dx} dy={dy} dz={dz}")


def _load_frame_file(path: str, timestamp: int) -> RawFrame:
    try:
        with np.load(path) as data:
            rgb, depth = data["rgb"], data["depth"]
    except (OSError, KeyError, ValueError) as err:
        raise FormatError(f"cannot read frame file {path}: {err}") from err
    return RawFrame(rgb=np.ascontiguousarray(rgb, dtype=np.uint8),
                    depth=np.ascontiguousarray(depth, dtype=np.float32),
                    timestamp=timestamp)


def _cmd_infer(args) -> int:
    cfg = _resolved_config(args)
    if (args.dataset is None) == (args.frames is None):
        raise ConfigError("infer needs exactly one of --dataset or --frames")
    if args.frames is not None:
        if len(args.frames) != 3:
            raise ConfigError(
                f"--frames needs 3 files (t-2, t-1, t), got {len(args.frames)}")
        model = load_checkpoint(args.checkpoint)
        frames = tuple(_load_frame_file(p, t)
                       for t, p in enumerate(args.frames))
        color_keys = {i: tuple(c)
                      for i, c in enumerate(cfg.world.expert_colors)}
        t0 = time.perf_counter()
        out = assemble_sample(frames, ((), (), ()), args.expert, cfg.crop,
                              cfg.world.depth_range_m, ablation=model.ablation,
                              detector="blob", color_keys=color_keys)
        if out is None:
            raise StateError(
                f"no detection for expert {args.expert} in {args.frames[2]}")
        inp = NetInput(full_frame=Tensor(out[0][None]),
                       crops=Tensor(out[1][None]))
        result = forward(model, inp)
        pred = [int(np.argmax(getattr(result, h)[0])) for h in HEAD_ORDER]
        dt = time.perf_counter() - t0
        print(f"frame {args.frames[2]} expert {args.expert}: "
              f"{_decode_prediction(pred)}  ({dt * 1e3:.1f} ms)")
        return 0
    with DatasetReader(args.dataset) as reader:
        model = load_checkpoint(args.checkpoint, expect_space=reader.space)
        source = SampleSource(reader, crop_cfg=cfg.crop,
                              ablation=model.ablation, detector=args.detector)
        ids = _parse_ids(args.samples, reader.n_samples)
        examples = expand_examples(ids, reader.n_experts, "all")
        preds, times = predict_with_latency(model, source, examples)
    for (i, e), pred, dt in zip(examples, preds, times):
        body = "detection miss" if pred is None else _decode_prediction(pred)
        print(f"sample {i} expert {e}: {body}  ({dt * 1e3:.1f} ms)")
    st = _steady_state(times)
    print(f"latency mean {st['mean_s'] * 1e3:.2f} ms  "
          f"std {st['std_s'] * 1e3:.2f} ms  cv {st['cv']:.3f}  "
          f"({st['n_steady']} steady-state of {st['n_frames']} frames)")
    if args.latency_out is not None:
        write_json_atomic(args.latency_out,
                          {**st, "per_frame_s": [float(t) for t in times]})
        print(f"wrote {args.latency_out}")
    return 0


def _cmd_inspect(args) -> int:
    with open(args.path, "rb") as f:
        magic = f.read(5)
    if magic == DATASET_MAGIC:
        with DatasetReader(args.path) as r:
            space = r.space
            world = json.loads(r.world_json)
            print(f"dataset {args.path}")
            print(f"  samples {r.n_samples}  seed {r.seed}  "
                  f"experts {r.n_experts}  frames 3x{r.frame_h}x{r.frame_w}")
            print(f"  world {world.get('template')} "
                  f"{world.get('grid_nx')}x{world.get('grid_ny')}"
                  f"x{world.get('grid_nz')}")
            print("  space " + " ".join(
                f"{h}={space.head_width(h)}" for h in HEAD_ORDER))
            print("  checksum ok")
        return 0
    if magic == CHECKPOINT_MAGIC:
        model = load_checkpoint(args.path)
        n_params = sum(p.data.size for _, p in model.params.named_tensors())
        g = model.geometry
        print(f"checkpoint {args.path}")
        print(f"  variant {model.ablation.tag()}  parameters {n_params}")
        print(f"  geometry frame {g.frame_h}x{g.frame_w} "
              f"crop {g.crop_h}x{g.crop_w}")
        print("  space " + " ".join(
            f"{h}={model.space.head_width(h)}" for h in HEAD_ORDER))
        print("  checksum ok")
        return 0
    raise FormatError(
        f"unrecognized magic {magic!r}: expected {DATASET_MAGIC!r} or "
        f"{CHECKPOINT_MAGIC!r}")


# ---------------------------------------------------------------------------
# parser


def _add_common(p, config=True, run_dir=False):
    if config:
        p.add_argument("--config", help="run config JSON (defaults apply)")
    if run_dir:
        p.add_argument("--run-dir", help="artifact directory "
                       "(default: $GRIDSIGHT_RUN_ROOT/<command>-<hash>)")


def _add_train_overrides(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridsight",
        description="State-action recognition on synthetic RGB-D gridworlds.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("capture-background",
                       help="render the empty-world masking background")
    _add_common(p)
    p.add_argument("--out", required=True, help="output .npz")
    p.add_argument("--vantage", help="camera x,y,z (default: configured)")
    p.set_defaults(func=_cmd_capture_background)

    p = sub.add_parser("train", help="train a model on a dataset")
    _add_common(p, run_dir=True)
    p.add_argument("--dataset", required=True)
    _add_train_overrides(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_common(p, run_dir=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--samples", help="id or lo:hi slice (default: all)")
    p.add_argument("--detector", default="oracle", choices=("oracle", "blob"))
    p.add_argument("--perturbation", help="re-render under this perturbation")
    p.add_argument("--magnitude", type=float)
    p.add_argument("--confusion", action="store_true",
                   help="include per-head confusion matrices in the report")
    p.add_argument("--latency-frames", type=int, default=100,
                   dest="latency_frames")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train and compare ablation variants")
    _add_common(p, run_dir=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--seeds", default="0,1,2")
    _add_train_overrides(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("robustness",
                       help="evaluate a checkpoint under perturbations")
    _add_common(p, run_dir=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--perturbations",
                   default="distractor-boxes:2,dim-light:0.4,occlusion:0.5")
    p.add_argument("--samples")
    p.add_argument("--detector", default="oracle", choices=("oracle", "blob"))
    p.set_defaults(func=_cmd_robustness)

    p = sub.add_parser("kfold", help="stratified k-fold cross-validation")
    _add_common(p, run_dir=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--detector", default="oracle", choices=("oracle", "blob"))
    _add_train_overrides(p)
    p.set_defaults(func=_cmd_kfold)

    p = sub.add_parser("infer", help="per-frame predictions with latency")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--samples", help="id or lo:hi slice of the dataset")
    p.add_argument("--frames", nargs="+",
                   help="three .npz frame files (rgb, depth) at t-2, t-1, t")
    p.add_argument("--expert", type=int, default=0)
    p.add_argument("--detector", default="oracle", choices=("oracle", "blob"))
    p.add_argument("--latency-out", dest="latency_out",
                   help="write per-frame latency JSON here")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("inspect", help="print dataset or checkpoint headers")
    p.add_argument("--path", required=True)
    p.set_defaults(func=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except GridsightError as err:
        msg = " ".join(str(err).split())
        print(f"error: {type(err).__name__}: {msg}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
