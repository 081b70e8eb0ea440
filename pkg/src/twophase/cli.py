"""Command-line front end for the whole pipeline.

Subcommands: gen-data, train, pipeline, infer, fuse, cues, eval-loc,
eval-sal, eval-dist, report. Configuration is a flat dotted-key JSON file
overridable by ``--key value`` flags (flags > file > defaults). Every run
directory gets a verbatim config echo so it is reproducible from the seed
alone.

Exit codes: 0 success, 2 usage error, 3 missing/bad input artifact,
4 config validation failure.
"""

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__, evaluation, fusion, network, synth, training
from .io import FormatError, save_tns, load_tns, write_pgm
from .network import FcnConfig, HeatMapSet
from .synth import DatasetError, SynthSpec
from .training import PhasePlan, TrainConfig

USAGE_ERROR, INPUT_ERROR, VALIDATION_ERROR = 2, 3, 4


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


DEFAULTS = {
    "seed": 0,
    "phases": 2,
    "thresholds": [0.6, 0.4, 0.3, 0.25],
    "cue_fraction": 0.2,
    "tolerance": 3,
    "data.classes": 4,
    "data.image_size": 64,
    "data.train_samples": 500,
    "data.eval_samples": 100,
    "data.multi_label_prob": 0.15,
    "train.iterations": 2000,
    "train.batch_size": 15,
    "train.base_lr": 0.05,
    "train.lr_drop_every": 1100,
    "train.lr_drop_factor": 10.0,
    "train.weight_decay": 0.0005,
}


def load_config(config_path, overrides):
    cfg = dict(DEFAULTS)
    if config_path:
        if not os.path.exists(config_path):
            raise CliError(f"config file not found: {config_path}", INPUT_ERROR)
        with open(config_path) as f:
            file_cfg = json.load(f)
        for k, v in file_cfg.items():
            if k not in cfg:
                raise CliError(f"unknown config key: {k}", VALIDATION_ERROR)
            cfg[k] = v
    for k, v in overrides.items():
        if k not in cfg:
            raise CliError(f"unknown config key: {k}", USAGE_ERROR)
        base = cfg[k]
        try:
            if isinstance(base, list):
                cfg[k] = json.loads(v) if isinstance(v, str) else v
            elif isinstance(base, bool):
                cfg[k] = v in ("1", "true", "yes")
            else:
                cfg[k] = type(base)(v)
        except (ValueError, json.JSONDecodeError) as e:
            raise CliError(f"bad value for {k}: {v} ({e})", VALIDATION_ERROR)
    return cfg


def parse_overrides(extra):
    """Turn ['--train.base_lr', '0.01', ...] into a dict."""
    overrides = {}
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--"):
            raise CliError(f"unknown argument: {arg}", USAGE_ERROR)
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise CliError(f"flag {arg} needs a value", USAGE_ERROR)
            value = extra[i + 1]
            i += 1
        overrides[key] = value
        i += 1
    return overrides


def atomic_write(path, data):
    """Write to a temp name, rename on success; partial outputs never land."""
    tmp = path + ".tmp"
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as f:
        f.write(data)
    os.replace(tmp, path)


def write_json(path, obj):
    atomic_write(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _require(path, what):
    if not os.path.exists(path):
        raise CliError(f"missing {what}: {path}", INPUT_ERROR)
    return path


# ---------------------------------------------------------------------------
# config -> domain objects

def synth_spec(cfg, split="train"):
    samples = cfg["data.train_samples"] if split == "train" else cfg["data.eval_samples"]
    seed_offset = 0 if split == "train" else 1
    return SynthSpec(class_count=cfg["data.classes"],
                     image_size=cfg["data.image_size"],
                     samples=samples,
                     multi_label_prob=cfg["data.multi_label_prob"],
                     rng_seed=2 * cfg["seed"] + seed_offset)


def model_config(cfg):
    return FcnConfig.default(class_count=cfg["data.classes"],
                             rng_seed=10_000 + cfg["seed"])


def train_config(cfg, phase):
    return TrainConfig(iterations=cfg["train.iterations"],
                       batch_size=cfg["train.batch_size"],
                       base_lr=cfg["train.base_lr"],
                       lr_drop_every=cfg["train.lr_drop_every"],
                       lr_drop_factor=cfg["train.lr_drop_factor"],
                       weight_decay=cfg["train.weight_decay"],
                       rng_seed=100 * cfg["seed"] + phase)


def phase_plan(cfg):
    phases = cfg["phases"]
    thresholds = tuple(cfg["thresholds"][:phases - 1])
    configs = tuple(train_config(cfg, p) for p in range(phases))
    return PhasePlan(phase_count=phases, thresholds=thresholds, configs=configs)


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(cfg, args):
    os.makedirs(args.out, exist_ok=True)
    for split in ("train", "eval"):
        spec = synth_spec(cfg, split)
        samples = synth.generate_dataset(spec)
        synth.save_dataset(os.path.join(args.out, split), samples, spec)
    print(f"wrote {args.out}/train and {args.out}/eval")
    return 0


def _load_split(data_dir, split):
    path = _require(os.path.join(data_dir, split), f"dataset split '{split}'")
    try:
        return synth.load_dataset(path)
    except (DatasetError, FormatError) as e:
        raise CliError(str(e), INPUT_ERROR)


def _phase_ckpt(out_dir, phase):
    return os.path.join(out_dir, f"phase{phase}", "model.fcn1")


def cmd_train(cfg, args):
    samples, _ = _load_split(args.data, "train")
    phase = args.phase
    if phase < 1:
        raise CliError(f"--phase must be >= 1, got {phase}", USAGE_ERROR)
    provider = None
    if phase > 1:
        frozen = []
        for p in range(1, phase):
            ckpt = _phase_ckpt(args.out, p)
            _require(ckpt, f"phase-{p} checkpoint (train earlier phases first)")
            frozen.append(network.load_model(ckpt))
        threshold = cfg["thresholds"][phase - 2]
        provider = training.MaskProvider(frozen, threshold)
    model = network.init_model(replace(model_config(cfg),
                                       rng_seed=model_config(cfg).rng_seed + 1000 * (phase - 1)))
    trained, history = training.train_phase(model, samples, train_config(cfg, phase - 1),
                                            provider)
    phase_dir = os.path.join(args.out, f"phase{phase}")
    os.makedirs(phase_dir, exist_ok=True)
    network.save_model(os.path.join(phase_dir, "model.fcn1"), trained)
    atomic_write(os.path.join(phase_dir, "loss.csv"), training.history_csv(history))
    print(f"phase {phase}: final loss {history[-1][2]:.4f} -> {phase_dir}")
    return 0


def _infer_split(models, samples):
    """Per-image heat-map sets for each phase model."""
    per_phase = []
    for phase, model in enumerate(models, start=1):
        sets = [network.compute_heatmaps(model, s.to_tensor(), phase) for s in samples]
        per_phase.append(sets)
    return per_phase


def cmd_infer(cfg, args):
    samples, _ = _load_split(args.data, args.split)
    model = network.load_model(_require(args.model, "model checkpoint"))
    os.makedirs(args.out, exist_ok=True)
    probs = []
    for i, s in enumerate(samples):
        hm = network.compute_heatmaps(model, s.to_tensor())
        save_tns(os.path.join(args.out, f"heatmaps_{i:05d}.tns"), hm.maps)
        probs.append([float(p) for p in hm.probs])
    write_json(os.path.join(args.out, "probs.json"), {"probs": probs})
    print(f"wrote {len(samples)} heat-map files to {args.out}")
    return 0


def _load_heatmap_dir(path, count):
    _require(os.path.join(path, "probs.json"), "probs.json")
    with open(os.path.join(path, "probs.json")) as f:
        probs = json.load(f)["probs"]
    sets = []
    for i in range(count):
        maps = load_tns(_require(os.path.join(path, f"heatmaps_{i:05d}.tns"),
                                 f"heat-map file {i}"))
        sets.append(HeatMapSet(maps=maps, probs=np.array(probs[i], dtype=np.float32)))
    return sets


def cmd_fuse(cfg, args):
    counts = {len(json.load(open(os.path.join(d, "probs.json")))["probs"])
              for d in args.inputs if os.path.exists(os.path.join(d, "probs.json"))}
    if len(counts) != 1:
        raise CliError("fuse: input heat-map directories disagree or are missing",
                       INPUT_ERROR)
    count = counts.pop()
    per_phase = [_load_heatmap_dir(d, count) for d in args.inputs]
    os.makedirs(args.out, exist_ok=True)
    for i in range(count):
        fused = fusion.weighted_map_voting(
            [fusion.peak_normalize(phase[i]) for phase in per_phase])
        save_tns(os.path.join(args.out, f"fused_{i:05d}.tns"), fused.maps)
    print(f"wrote {count} fused maps to {args.out}")
    return 0


def cmd_cues(cfg, args):
    os.makedirs(args.out, exist_ok=True)
    index = {}
    i = 0
    while os.path.exists(os.path.join(args.input, f"fused_{i:05d}.tns")):
        maps = load_tns(os.path.join(args.input, f"fused_{i:05d}.tns"))
        entry = {}
        for c in range(maps.shape[0]):
            cue = fusion.extract_cues(maps[c], cfg["cue_fraction"])
            name = f"cue_{i:05d}_class{c}.pgm"
            write_pgm(os.path.join(args.out, name), (cue * 255).astype(np.uint8))
            entry[str(c)] = name
        index[str(i)] = entry
        i += 1
    if i == 0:
        raise CliError(f"no fused maps found in {args.input}", INPUT_ERROR)
    # foreground cues only; background/unlabeled is the complement of their union
    write_json(os.path.join(args.out, "cues.json"),
               {"cue_fraction": cfg["cue_fraction"], "images": index})
    print(f"wrote cues for {i} images to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# evaluation plumbing shared by eval-* and report

def _gt_boxes(samples):
    return {i: [(o.class_id, o.full_box) for o in s.objects]
            for i, s in enumerate(samples)}


def _point_predictions(sets, samples, image_size):
    """Locations from the heat-map peak; ranking confidence from the
    classifier probability, which is far better calibrated across images
    than the raw peak response."""
    preds = []
    for i, hm in enumerate(sets):
        for c in range(hm.maps.shape[0]):
            loc, _ = evaluation.predict_point(hm.maps[c], image_size, image_size)
            preds.append(evaluation.PointPrediction(i, c, loc, float(hm.probs[c])))
    return preds


def _saliency_pairs(sets, samples, image_size, weighted=True):
    pairs = []
    for i, (hm, s) in enumerate(zip(sets, samples)):
        maps = hm.maps if isinstance(hm, fusion.FusedHeatMapSet) else \
            (hm.probs[:, None, None] * fusion.peak_normalize(hm).maps
             if weighted else hm.maps)
        for c in np.flatnonzero(s.labels):
            gt = np.zeros_like(s.image, dtype=bool)
            for o in s.objects:
                if o.class_id == c:
                    gt |= o.mask
            up = evaluation.bilinear_resize(maps[c].astype(np.float64),
                                            image_size, image_size)
            pairs.append((up, gt))
    return pairs


def _pred_list_json(preds):
    return [{"image": p.image_id, "class": p.class_id,
             "row": p.location[0], "col": p.location[1],
             "confidence": p.confidence} for p in preds]


def _preds_from_json(entries):
    return [evaluation.PointPrediction(e["image"], e["class"],
                                       (e["row"], e["col"]), e["confidence"])
            for e in entries]


def cmd_eval_loc(cfg, args):
    samples, spec = _load_split(args.data, "eval")
    with open(_require(args.predictions, "predictions file")) as f:
        preds = _preds_from_json(json.load(f)["predictions"])
    per, mAP = evaluation.localization_ap(preds, _gt_boxes(samples), cfg["tolerance"])
    out = {"per_class_ap": {str(c): ap for c, ap in per.items()}, "map": mAP,
           "tolerance": cfg["tolerance"]}
    write_json(args.out, out)
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_eval_dist(cfg, args):
    lists = []
    for path in (args.a, args.b):
        with open(_require(path, "predictions file")) as f:
            lists.append(_preds_from_json(json.load(f)["predictions"]))
    dist = evaluation.mean_pairwise_distance(*lists)
    write_json(args.out, {"mean_distance_px": dist})
    print(f"mean inter-phase distance: {dist:.2f} px")
    return 0


def cmd_eval_sal(cfg, args):
    samples, spec = _load_split(args.data, "eval")
    count = len(samples)
    sets = []
    i = 0
    while os.path.exists(os.path.join(args.heatmaps, f"fused_{i:05d}.tns")):
        maps = load_tns(os.path.join(args.heatmaps, f"fused_{i:05d}.tns"))
        sets.append(fusion.FusedHeatMapSet(maps=maps, provenance=np.zeros_like(maps, dtype=np.int32)))
        i += 1
    if i != count:
        raise CliError(f"found {i} fused maps for {count} eval images in {args.heatmaps}",
                       INPUT_ERROR)
    curve = evaluation.corpus_saliency_ap(
        _saliency_pairs(sets, samples, spec.image_size))
    write_json(args.out, {"corpus_saliency_ap": curve.ap})
    print(f"corpus saliency AP: {curve.ap:.4f}")
    return 0


# ---------------------------------------------------------------------------
# full pipeline + report

def run_full_pipeline(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    write_json(os.path.join(out_dir, "config.json"),
               {"config": cfg, "version": __version__})

    train_set = synth.generate_dataset(synth_spec(cfg, "train"))
    eval_spec = synth_spec(cfg, "eval")
    eval_set = synth.generate_dataset(eval_spec)
    synth.save_dataset(os.path.join(out_dir, "data", "train"), train_set,
                       synth_spec(cfg, "train"))
    synth.save_dataset(os.path.join(out_dir, "data", "eval"), eval_set, eval_spec)

    plan = phase_plan(cfg)
    try:
        plan.validate()
    except ValueError as e:
        raise CliError(str(e), VALIDATION_ERROR)
    models = training.run_pipeline(plan, train_set, model_config(cfg))
    for p, m in enumerate(models, start=1):
        phase_dir = os.path.join(out_dir, f"phase{p}")
        os.makedirs(phase_dir, exist_ok=True)
        network.save_model(os.path.join(phase_dir, "model.fcn1"), m)

    image_size = eval_spec.image_size
    per_phase = _infer_split(models, eval_set)
    for p, sets in enumerate(per_phase, start=1):
        hdir = os.path.join(out_dir, "heatmaps", f"phase{p}")
        os.makedirs(hdir, exist_ok=True)
        probs = []
        for i, hm in enumerate(sets):
            save_tns(os.path.join(hdir, f"heatmaps_{i:05d}.tns"), hm.maps)
            probs.append([float(v) for v in hm.probs])
        write_json(os.path.join(hdir, "probs.json"), {"probs": probs})

    fused = [fusion.weighted_map_voting(
                 [fusion.peak_normalize(phase[i]) for phase in per_phase])
             for i in range(len(eval_set))]
    fdir = os.path.join(out_dir, "fused")
    os.makedirs(fdir, exist_ok=True)
    for i, fs in enumerate(fused):
        save_tns(os.path.join(fdir, f"fused_{i:05d}.tns"), fs.maps)

    gt = _gt_boxes(eval_set)
    tolerance = cfg["tolerance"]
    metrics = {"tolerance": tolerance, "phases": {}}
    phase_preds = []
    for p, sets in enumerate(per_phase, start=1):
        preds = _point_predictions(sets, eval_set, image_size)
        phase_preds.append(preds)
        write_json(os.path.join(out_dir, f"phase{p}", "predictions.json"),
                   {"predictions": _pred_list_json(preds)})
        per, mAP = evaluation.localization_ap(preds, gt, tolerance)
        metrics["phases"][str(p)] = {
            "per_class_ap": {str(c): ap for c, ap in per.items()}, "map": mAP}

    # center baseline, confidences = phase-1 class probabilities
    conf = {(i, c): float(per_phase[0][i].probs[c])
            for i in range(len(eval_set)) for c in range(cfg["data.classes"])}
    center = evaluation.center_baseline_predictions(
        range(len(eval_set)), image_size, image_size, conf)
    per, mAP = evaluation.localization_ap(center, gt, tolerance)
    metrics["center_baseline"] = {
        "per_class_ap": {str(c): ap for c, ap in per.items()}, "map": mAP}

    if len(phase_preds) >= 2:
        metrics["inter_phase_distance_px"] = evaluation.mean_pairwise_distance(
            phase_preds[0], phase_preds[1])

    sal_first = evaluation.corpus_saliency_ap(
        _saliency_pairs(per_phase[0], eval_set, image_size))
    sal_fused = evaluation.corpus_saliency_ap(
        _saliency_pairs(fused, eval_set, image_size))
    metrics["saliency"] = {"first_phase_ap": sal_first.ap, "fused_ap": sal_fused.ap}

    write_json(os.path.join(out_dir, "metrics.json"), metrics)
    return metrics, (eval_set, per_phase, fused)


def render_report(out_dir, cfg, metrics, eval_artifacts, panels=6):
    eval_set, per_phase, fused = eval_artifacts
    rdir = os.path.join(out_dir, "renders")
    os.makedirs(rdir, exist_ok=True)

    def norm_to_pgm(m):
        m = np.asarray(m, dtype=np.float64)
        lo, hi = m.min(), m.max()
        if hi > lo:
            m = (m - lo) / (hi - lo)
        else:
            m = np.zeros_like(m)
        return (m * 255).astype(np.uint8)

    size = eval_set[0].image.shape[0]
    for i in range(min(panels, len(eval_set))):
        s = eval_set[i]
        c = int(np.flatnonzero(s.labels)[0])
        write_pgm(os.path.join(rdir, f"img_{i:03d}_input.pgm"), s.image)
        for p, sets in enumerate(per_phase, start=1):
            up = evaluation.bilinear_resize(sets[i].maps[c].astype(np.float64), size, size)
            write_pgm(os.path.join(rdir, f"img_{i:03d}_phase{p}_class{c}.pgm"),
                      norm_to_pgm(up))
        up = evaluation.bilinear_resize(fused[i].maps[c].astype(np.float64), size, size)
        write_pgm(os.path.join(rdir, f"img_{i:03d}_fused_class{c}.pgm"), norm_to_pgm(up))

    lines = [f"two-phase localization report (tolerance {metrics['tolerance']} px)",
             ""]
    classes = sorted(metrics["phases"]["1"]["per_class_ap"])
    header = "method    " + "".join(f"  class{c:>2}" for c in classes) + "      mAP"
    lines.append(header)

    def row(name, entry):
        cells = "".join(f"  {entry['per_class_ap'].get(c, 0.0):7.3f}" for c in classes)
        return f"{name:<10}{cells}  {entry['map']:7.3f}"

    lines.append(row("center", metrics["center_baseline"]))
    order = {"1": "first", "2": "second", "3": "third"}
    for p in sorted(metrics["phases"]):
        lines.append(row(order.get(p, f"phase{p}"), metrics["phases"][p]))
    lines.append("")
    if "inter_phase_distance_px" in metrics:
        lines.append(f"mean inter-phase prediction distance: "
                     f"{metrics['inter_phase_distance_px']:.2f} px")
    lines.append(f"corpus saliency AP  first: {metrics['saliency']['first_phase_ap']:.4f}"
                 f"  fused: {metrics['saliency']['fused_ap']:.4f}")
    text = "\n".join(lines) + "\n"
    atomic_write(os.path.join(out_dir, "report.txt"), text)
    return text


def cmd_pipeline(cfg, args):
    metrics, artifacts = run_full_pipeline(cfg, args.out)
    text = render_report(args.out, cfg, metrics, artifacts)
    print(text)
    return 0


def cmd_report(cfg, args):
    metrics_path = _require(os.path.join(args.run, "metrics.json"), "metrics.json")
    with open(metrics_path) as f:
        metrics = json.load(f)
    eval_set, _ = _load_split(os.path.join(args.run, "data"), "eval")
    models = []
    p = 1
    while os.path.exists(_phase_ckpt(args.run, p)):
        models.append(network.load_model(_phase_ckpt(args.run, p)))
        p += 1
    if not models:
        raise CliError(f"no phase checkpoints under {args.run}", INPUT_ERROR)
    per_phase = _infer_split(models, eval_set)
    fused = [fusion.weighted_map_voting(
                 [fusion.peak_normalize(phase[i]) for phase in per_phase])
             for i in range(len(eval_set))]
    text = render_report(args.run, cfg, metrics, (eval_set, per_phase, fused))
    print(text)
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="twophase",
                                     description="two-phase weakly supervised localization")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **arguments):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        for arg, kwargs in arguments.items():
            p.add_argument(arg, **kwargs)
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data, **{"--out": {"required": True}})
    add("train", cmd_train, **{"--data": {"required": True},
                               "--phase": {"type": int, "required": True},
                               "--out": {"required": True}})
    add("pipeline", cmd_pipeline, **{"--out": {"required": True}})
    add("infer", cmd_infer, **{"--model": {"required": True},
                               "--data": {"required": True},
                               "--split": {"default": "eval"},
                               "--out": {"required": True}})
    p_fuse = sub.add_parser("fuse")
    p_fuse.add_argument("--config", default=None)
    p_fuse.add_argument("--seed", type=int, default=None)
    p_fuse.add_argument("--inputs", nargs="+", required=True)
    p_fuse.add_argument("--out", required=True)
    p_fuse.set_defaults(fn=cmd_fuse)
    add("cues", cmd_cues, **{"--input": {"required": True},
                             "--out": {"required": True}})
    add("eval-loc", cmd_eval_loc, **{"--data": {"required": True},
                                     "--predictions": {"required": True},
                                     "--out": {"required": True}})
    add("eval-sal", cmd_eval_sal, **{"--data": {"required": True},
                                     "--heatmaps": {"required": True},
                                     "--out": {"required": True}})
    add("eval-dist", cmd_eval_dist, **{"--a": {"required": True},
                                       "--b": {"required": True},
                                       "--out": {"required": True}})
    add("report", cmd_report, **{"--run": {"required": True}})
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as e:
        return USAGE_ERROR if e.code not in (0, None) else 0
    try:
        overrides = parse_overrides(extra)
        cfg = load_config(getattr(args, "config", None), overrides)
        if getattr(args, "seed", None) is not None:
            cfg["seed"] = args.seed
        return args.fn(cfg, args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (DatasetError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return INPUT_ERROR
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return VALIDATION_ERROR


if __name__ == "__main__":
    sys.exit(main())
