"""Command-line interface: ``locgen <command> [options]``.

Settings resolve in order: dataclass defaults, then ``--config FILE``
(``key = value`` lines, dotted keys such as ``train.total_steps``, optional
``[section]`` headers), then ``--set key=value``, then dedicated flags. The
top-level ``seed`` seeds every section unless that section sets its own.

Exit codes: 0 success, 1 usage error, 2 invariant violation, 3 numeric failure.
"""

from __future__ import annotations

import os
import sys


def _cap_threads() -> None:
    n = os.environ.get("LOCGEN_THREADS")
    if n is None:
        return
    if not n.isdigit() or int(n) < 1:
        # reported as a usage error by main()
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, n)


_cap_threads()

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import time  # noqa: E402
from dataclasses import asdict, fields  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .artifacts import atomic_write, code_version, file_digest, csv_with_stamp, stamp, stamp_json, svg_with_stamp  # noqa: E402
from .dpo import DpoConfig, dpo_finetune  # noqa: E402
from .evalharness import (InvariantError, curve_sweep, evaluate, reports_to_csv, reports_to_svg,  # noqa: E402
                          topk_sweep)
from .model import ConfigError, ModelConfig, load_checkpoint, save_checkpoint  # noqa: E402
from .pretrain import NumericError, TrainConfig, pretrain  # noqa: E402
from .sampler import Region, SamplerConfig, SamplingError, sample_k_locations  # noqa: E402
from .scene_synth import (AnnotationConfig, ClassSpec, DatasetConfig, SceneConfig, SceneError,  # noqa: E402
                          build_dataset, build_preference_dataset, dataset_stats, read_dataset, write_dataset)

log = logging.getLogger("locgen")

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# -- run configuration --------------------------------------------------------

EVAL_DEFAULTS = {"K": 100, "Ks": (10, 20, 30, 40, 50, 60, 70, 80, 90, 100), "top_ks": (1, 2, 4, 8, 16),
                 "iou_threshold": 0.7, "baseline": "model", "split": "test"}
SECTIONS = ("data", "model", "train", "dpo", "sampler", "eval")


def default_run_config() -> dict:
    return {
        "seed": 0,
        "data": asdict(DatasetConfig()),
        "model": asdict(ModelConfig()),
        "train": asdict(TrainConfig()),
        "dpo": asdict(DpoConfig()),
        "sampler": asdict(SamplerConfig()),
        "eval": dict(EVAL_DEFAULTS),
    }


def _coerce(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {text!r}")
    try:
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, (tuple, list)):
            items = json.loads(text) if text.startswith("[") else [t for t in text.split(",") if t.strip()]
            ref = like[0] if like else 0
            if isinstance(ref, dict):
                raise UsageError("structured list values cannot be overridden")
            return tuple(_coerce(str(t), ref) for t in items)
    except ValueError:
        raise UsageError(f"cannot parse {text!r} as {type(like).__name__}") from None
    return text.strip("\"'")


def set_key(cfg: dict, key: str, value: str) -> None:
    """Set a dotted ``key`` in the nested config from its text form."""
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise UsageError(f"unknown config key {key!r}")
    node[parts[-1]] = _coerce(value, node[parts[-1]])


def parse_config_text(text: str) -> list:
    """``(key, value)`` pairs from a ``key = value`` file.

    A ``[section]`` header prefixes the keys after it, except keys that
    already start with a top-level section name.
    """
    out, section = [], ""
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        k = k.strip()
        absolute = k.split(".", 1)[0] in SECTIONS or k == "seed"
        out.append((f"{section}.{k}" if section and not absolute else k, v.strip()))
    return out


def resolve_config(config_file=None, overrides=(), flags=None) -> dict:
    cfg = default_run_config()
    explicit = set()
    pairs = []
    if config_file:
        p = Path(config_file)
        if not p.is_file():
            raise UsageError(f"config file {config_file} not found")
        pairs += parse_config_text(p.read_text())
    for o in overrides:
        if "=" not in o:
            raise UsageError(f"--set expects key=value, got {o!r}")
        pairs.append(tuple(o.split("=", 1)))
    for k, v in flags or {}:
        pairs.append((k, str(v)))
    for k, v in pairs:
        set_key(cfg, k, v)
        explicit.add(k.strip())
    for sec in ("model", "train", "dpo", "sampler"):
        if f"{sec}.seed" not in explicit:
            cfg[sec]["seed"] = cfg["seed"]
    return cfg


def dataset_config(d: dict) -> DatasetConfig:
    sc = dict(d["scene"])
    sc["classes"] = tuple(ClassSpec(c["name"], tuple(c["area_frac"]), tuple(c["aspect"])) for c in sc["classes"])
    for k in ("n_shelves", "n_objects", "shelf_len"):
        sc[k] = tuple(sc[k])
    return DatasetConfig(d["n_train"], d["n_test"], SceneConfig(**sc), AnnotationConfig(**d["annotations"]))


def _config(cls, d: dict):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in d.items() if k in names})


# -- commands -----------------------------------------------------------------

def _input_digests(args) -> dict:
    """Content digests of the files a command reads; paths are left out so reruns elsewhere match."""
    out = {}
    data = getattr(args, "data", None)
    if data and (Path(data) / "manifest.json").is_file():
        out["data_manifest"] = file_digest(Path(data) / "manifest.json")
    ckpt = getattr(args, "checkpoint", None)
    if ckpt and Path(ckpt).is_file():
        out["checkpoint"] = file_digest(ckpt)
    return out


def _load_split(data_dir, split: str):
    d = Path(data_dir) / split
    if not (d / "annotations.jsonl").is_file() or not (d / "scenes.jsonl").is_file():
        raise FileNotFoundError(f"no {split} split under {data_dir} (run gen-data first)")
    return read_dataset(d, split)


def _check_classes(cfg: dict, model_cfg: ModelConfig) -> None:
    n = len(cfg["data"]["scene"]["classes"])
    if n != model_cfg.num_classes:
        raise ConfigError(f"dataset has {n} classes but the model has {model_cfg.num_classes}")


def cmd_gen_data(args, cfg: dict) -> int:
    dc = dataset_config(cfg["data"])
    train, test = build_dataset(dc, cfg["seed"])
    out = Path(args.out)
    stats = {}
    for d in (train, test):
        write_dataset(d, out / d.split)
        stats[d.split] = dataset_stats(d)
    atomic_write(out / "manifest.json", json.dumps({**stamp(cfg), "stats": stats}, sort_keys=True, indent=1) + "\n")
    for split, s in stats.items():
        print(f"{split}: scenes={s['scenes']} samples={s['samples']} "
              f"mean_annotations={s['mean_annotations']:.2f} sparsity_ratio={s['max_sparsity_ratio']:.5f}")
    return EXIT_OK


def _progress_writer(path, columns, cfg):
    rows = []

    def add(row):
        rows.append(row)
        body = ",".join(columns) + "\n" + "".join(",".join(_fmt(v) for v in r) + "\n" for r in rows)
        atomic_write(path, csv_with_stamp(body, cfg))

    return add


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def cmd_train(args, cfg: dict) -> int:
    train = _load_split(args.data, "train")
    heldout = _load_split(args.data, "test")
    mc = _config(ModelConfig, cfg["model"])
    _check_classes(cfg, mc)
    out = Path(args.out)
    progress = _progress_writer(args.log or out.with_name(out.name + ".progress.csv"),
                                ("step", "lr", "train_loss", "heldout_loss"), cfg)
    params = pretrain(train, mc, _config(TrainConfig, cfg["train"]), heldout=heldout, progress=progress)
    save_checkpoint(params, out, extra=stamp(cfg))
    print(f"wrote {out} ({params.n_params()} parameters)")
    return EXIT_OK


def cmd_dpo(args, cfg: dict) -> int:
    if not args.checkpoint:
        raise UsageError("dpo needs --checkpoint pointing at a pretrained model")
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint {args.checkpoint} not found")
    base, _ = load_checkpoint(args.checkpoint)
    train = _load_split(args.data, "train")
    _check_classes(cfg, base.config)
    dc = _config(DpoConfig, cfg["dpo"])
    out = Path(args.out)
    progress = _progress_writer(args.log or out.with_name(out.name + ".progress.csv"),
                                ("step", "dpo_loss", "mean_preference_prob", "ref_hash"), cfg)
    target = dpo_finetune(base, lambda epoch: build_preference_dataset(train, dc.seed, epoch), dc,
                          scenes=train, progress=progress)
    save_checkpoint(target, out, extra={**stamp(cfg), "base_checkpoint_digest": base.digest()})
    print(f"wrote {out}")
    return EXIT_OK


def _sampler_config(cfg) -> SamplerConfig:
    return _config(SamplerConfig, cfg["sampler"])


def _limit(dataset, n):
    if n:
        keep = dataset.samples[:n]
        ids = {a.scene_id for a in keep}
        dataset = type(dataset)([s for s in dataset.scenes if s.scene_id in ids], keep, dataset.split)
    return dataset


def cmd_sample(args, cfg: dict) -> int:
    region = Region.parse(args.region) if args.region else None  # validated before the model loads
    sc = _sampler_config(cfg)
    if not args.checkpoint:
        raise UsageError("sample needs --checkpoint")
    params, _ = load_checkpoint(args.checkpoint)
    data = _limit(_load_split(args.data, cfg["eval"]["split"]), args.limit)
    K = cfg["eval"]["K"]
    lines = []
    for a in data.samples:
        boxes, lp = sample_k_locations(params, data.scene(a.scene_id), a.cls.id, sc, K, region=region,
                                       return_logprob=True)
        for b, l in zip(boxes, lp):
            lines.append(json.dumps({"scene_id": a.scene_id, "class": a.cls.id, "bbox": b.as_list(),
                                     "logprob": round(float(l), 6)}, separators=(",", ":")))
    out = Path(args.out)
    atomic_write(out, "".join(x + "\n" for x in lines))
    atomic_write(out.with_name(out.name + ".meta.json"), stamp_json(cfg) + "\n")
    print(f"wrote {len(lines)} samples to {out}")
    return EXIT_OK


def _model_or_baseline(args, cfg):
    baseline = cfg["eval"]["baseline"]
    if baseline not in ("model", "random"):
        raise UsageError(f"unknown baseline {baseline!r}")
    if baseline == "random":
        return None, "random"
    if not args.checkpoint:
        raise UsageError("a --checkpoint is required unless --baseline random")
    return load_checkpoint(args.checkpoint)[0], None


def _write_reports(args, cfg, reports, name, extra_columns=()):
    out = Path(args.out)
    atomic_write(out, csv_with_stamp(reports_to_csv(reports, extra_columns), cfg))
    svg = args.svg or out.with_suffix(".svg")
    atomic_write(svg, svg_with_stamp(reports_to_svg({name: reports}), cfg))
    for r in reports:
        tag = f"top_k={r.config['top_k']} " if "top_k" in extra_columns else ""
        print(f"{tag}K={r.K} tpr={r.tpr:.4f} fpr={r.fpr:.4f}")


def cmd_eval(args, cfg: dict) -> int:
    model, baseline = _model_or_baseline(args, cfg)
    data = _limit(_load_split(args.data, cfg["eval"]["split"]), args.limit)
    r = evaluate(model, data, _sampler_config(cfg), cfg["eval"]["K"], baseline=baseline,
                 iou_threshold=cfg["eval"]["iou_threshold"])
    _write_reports(args, cfg, [r], baseline or "model")
    return EXIT_OK


def cmd_sweep_k(args, cfg: dict) -> int:
    model, baseline = _model_or_baseline(args, cfg)
    data = _limit(_load_split(args.data, cfg["eval"]["split"]), args.limit)
    reports = curve_sweep(model, data, _sampler_config(cfg), cfg["eval"]["Ks"], baseline=baseline,
                          iou_threshold=cfg["eval"]["iou_threshold"])
    _write_reports(args, cfg, reports, baseline or "model")
    return EXIT_OK


def cmd_sweep_topk(args, cfg: dict) -> int:
    model, baseline = _model_or_baseline(args, cfg)
    if baseline:
        raise UsageError("sweep-topk needs a model; the random baseline has no top-k")
    data = _limit(_load_split(args.data, cfg["eval"]["split"]), args.limit)
    reports = topk_sweep(model, data, cfg["eval"]["top_ks"], cfg["eval"]["K"], _sampler_config(cfg),
                         iou_threshold=cfg["eval"]["iou_threshold"])
    _write_reports(args, cfg, reports, "model", extra_columns=("top_k",))
    return EXIT_OK


def cmd_bench(args, cfg: dict) -> int:
    """Single-location sampling latency against a full K-draw evaluation of the same sets."""
    if not args.checkpoint:
        raise UsageError("bench needs --checkpoint")
    params, _ = load_checkpoint(args.checkpoint)
    data = _limit(_load_split(args.data, cfg["eval"]["split"]), args.limit or 20)
    sc = _sampler_config(cfg)
    t0 = time.perf_counter()
    for a in data.samples:
        sample_k_locations(params, data.scene(a.scene_id), a.cls.id, sc, 1)
    per_sample = (time.perf_counter() - t0) / len(data.samples)
    t0 = time.perf_counter()
    evaluate(params, data, sc, cfg["eval"]["K"])
    per_eval = (time.perf_counter() - t0) / len(data.samples)
    report = {"sets": len(data.samples), "seconds_per_location": per_sample,
              "seconds_per_set_evaluation": per_eval, "K": cfg["eval"]["K"],
              "speedup": per_eval / per_sample if per_sample > 0 else float("inf"),
              "version": code_version()}
    text = json.dumps(report, indent=1, sort_keys=True) + "\n"
    if args.out:
        atomic_write(args.out, text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "dpo": cmd_dpo, "sample": cmd_sample,
            "eval": cmd_eval, "sweep-k": cmd_sweep_k, "sweep-topk": cmd_sweep_topk, "bench": cmd_bench}


# -- argument parsing ---------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="locgen", description="Generative object-location model on synthetic scenes.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, dest="data.n_train")
    g.add_argument("--n-test", type=int, dest="data.n_test")

    t = sub.add_parser("train", parents=[common], help="NLL pretraining")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log")
    t.add_argument("--steps", type=int, dest="train.total_steps")
    t.add_argument("--batch-size", type=int, dest="train.batch_size")
    t.add_argument("--lr", type=float, dest="train.learning_rate")
    t.add_argument("--warmup", type=int, dest="train.warmup_steps")

    d = sub.add_parser("dpo", parents=[common], help="preference fine-tuning of a pretrained checkpoint")
    d.add_argument("--data", required=True)
    d.add_argument("--checkpoint")
    d.add_argument("--out", required=True)
    d.add_argument("--log")
    d.add_argument("--steps", type=int, dest="dpo.total_steps")
    d.add_argument("--batch-size", type=int, dest="dpo.batch_size")
    d.add_argument("--lr", type=float, dest="dpo.learning_rate")
    d.add_argument("--beta", type=float, dest="dpo.beta")

    def sampling_flags(q):
        q.add_argument("--data", required=True)
        q.add_argument("--checkpoint")
        q.add_argument("--split", dest="eval.split")
        q.add_argument("--limit", type=int, help="only the first N annotation sets")
        q.add_argument("--k", type=int, dest="eval.K", help="draws per annotation set")
        q.add_argument("--top-k", type=int, dest="sampler.top_k")
        q.add_argument("--temperature", type=float, dest="sampler.temperature")

    s = sub.add_parser("sample", parents=[common], help="sample locations to JSONL")
    sampling_flags(s)
    s.add_argument("--region", help="rx1,ry1,rx2,ry2")
    s.add_argument("--out", required=True)

    for name, helptext in (("eval", "TPR/FPR at one K"), ("sweep-k", "TPR/FPR over K"),
                           ("sweep-topk", "TPR/FPR over top-k")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        sampling_flags(e)
        e.add_argument("--baseline", choices=("model", "random"), dest="eval.baseline")
        e.add_argument("--iou-threshold", type=float, dest="eval.iou_threshold")
        e.add_argument("--out", required=True, help="CSV report")
        e.add_argument("--svg", help="SVG plot (default: next to the CSV)")
        if name == "sweep-k":
            e.add_argument("--ks", dest="eval.Ks", help="comma-separated K values")
        if name == "sweep-topk":
            e.add_argument("--top-ks", dest="eval.top_ks", help="comma-separated top-k values")

    b = sub.add_parser("bench", parents=[common], help="sampling latency report")
    sampling_flags(b)
    b.add_argument("--out")
    return p


def main(argv=None) -> int:
    try:
        n = os.environ.get("LOCGEN_THREADS")
        if n is not None and (not n.isdigit() or int(n) < 1):
            raise UsageError(f"LOCGEN_THREADS must be a positive integer, got {n!r}")
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        flags = [(k, v) for k, v in vars(args).items() if "." in k and v is not None]
        if args.seed is not None:
            flags.insert(0, ("seed", args.seed))
        cfg = resolve_config(args.config, args.set, flags)
        cfg["inputs"] = _input_digests(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, SamplingError, FileNotFoundError) as e:
        print(f"locgen: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (InvariantError, SceneError) as e:
        print(f"locgen: invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except (NumericError, FloatingPointError) as e:
        print(f"locgen: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
