"""Command line entry point: ``umyops {phantom,train,infer,evaluate,quantify}``.

Exit codes: 0 success, 2 usage / schema / missing input, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, clinquant, metrics, tps
from .datapipe import (CRI, EDEMA, LV, MOVING, MYO, SCAR, PhantomSpec, PhantomSpecError, generate_phantom,
                       load_slice, myo_region, sample_seed, save_slice)
from .io import config_hash, dump_json, load_json, load_npz, save_npz, sha256_file
from .netarch import NetConfig, NumericError

log = logging.getLogger("umyops")

DATA_ROOT_ENV = "UMYOPS_DATA_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    inputs: list
    outputs: list
    tool_version: str = __version__
    wall_clock_s: float = 0.0
    checksums: dict = field(default_factory=dict)

    def write(self, directory):
        dump_json(Path(directory) / MANIFEST, asdict(self))


# ---------------------------------------------------------------------------
# helpers

def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = load_json(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object with optional 'phantom', 'net', 'train' sections")
    return cfg


def _dataclass_from(cls, section: dict, **overrides):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = dict(section)
    kw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from exc


def _data_dir(arg) -> Path:
    d = arg or os.environ.get(DATA_ROOT_ENV)
    if not d:
        raise UsageError(f"no data directory: pass --data or set {DATA_ROOT_ENV}")
    d = Path(d)
    if not d.is_dir():
        raise UsageError(f"data directory {d} does not exist")
    return d


def _sample_paths(d: Path) -> list:
    paths = sorted(p.with_suffix("") for p in d.glob("sample_*.npz"))
    if not paths:
        raise UsageError(f"no sample_*.npz files in {d}")
    return paths


def _load_samples(d: Path):
    out = []
    for p in _sample_paths(d):
        sl, meta = load_slice(p)
        out.append((p.name, sl, meta))
    return out


def _split(samples, val_fraction: float):
    n_val = max(1, int(round(len(samples) * val_fraction)))
    if n_val >= len(samples):
        raise UsageError(f"need more than {n_val} samples for a train/val split")
    return samples[:-n_val], samples[-n_val:]


def _out_dir(arg) -> Path:
    if arg is None:
        raise UsageError("--out is required")
    d = Path(arg)
    d.mkdir(parents=True, exist_ok=True)
    return d


def gold_label_mask(sl) -> np.ndarray:
    """CRI-frame LabelMask combining the LGE anatomy with the merged pathology gold."""
    lab = np.asarray(sl.labels[CRI]).copy()
    if sl.pathology is not None:
        lab[np.isin(lab, (SCAR, EDEMA))] = MYO
        lab[sl.pathology == EDEMA] = EDEMA
        lab[sl.pathology == SCAR] = SCAR
    return lab


def _load_prediction(path: Path) -> tuple:
    """A prediction file from ``infer`` or, for gold-vs-gold checks, a sample file."""
    arrays = load_npz(path)
    if "label_mask" in arrays:
        disp = {s: arrays[f"disp_{s}"] for s in MOVING if f"disp_{s}" in arrays}
        return arrays["label_mask"].astype(np.int64), disp
    sl, meta = load_slice(path.with_suffix(""))
    disp = {s: np.asarray(v) for s, v in meta.get("gt_displacements", {}).items()}
    return gold_label_mask(sl), disp


def _prediction_paths(d: Path) -> dict:
    found = {p.stem.removeprefix("pred_"): p for p in sorted(d.glob("pred_*.npz"))}
    if not found:
        found = {p.stem: p for p in sorted(d.glob("sample_*.npz"))}
    if not found:
        raise UsageError(f"no pred_*.npz or sample_*.npz files in {d}")
    return found


# ---------------------------------------------------------------------------
# commands

def _phantom_one(args):
    spec, path = args
    sl, gt = generate_phantom(spec)
    save_slice(path, sl, {"gt_displacements": {s: gt[s].deltas.tolist() for s in MOVING},
                          "sample_id": path.name})
    return path.with_suffix(".npz")


def cmd_phantom(a, cfg) -> RunManifest:
    out = _out_dir(a.out)
    if a.count <= 0:
        raise UsageError("--count must be positive")
    base = _dataclass_from(PhantomSpec, cfg.get("phantom", {}), misalign_magnitude=a.misalign, size=a.size)
    try:
        base.validate()
    except PhantomSpecError as exc:
        raise UsageError(str(exc)) from exc
    jobs = [(PhantomSpec(**{**asdict(base), "seed": sample_seed(a.seed, i)}), out / f"sample_{i:04d}")
            for i in range(a.count)]
    if a.jobs > 1:
        with ProcessPoolExecutor(a.jobs) as pool:
            files = list(pool.map(_phantom_one, jobs))
    else:
        files = [_phantom_one(j) for j in jobs]
    sums = {f.name: sha256_file(f) for f in files}
    return RunManifest("phantom", config_hash({"spec": asdict(base), "count": a.count}), a.seed, [],
                       [str(f) for f in files], checksums=sums)


def cmd_train(a, cfg) -> RunManifest:
    from . import trainer

    out = _out_dir(a.out)
    data = _data_dir(a.data)
    samples = [s for _, s, _ in _load_samples(data)]
    train, val = _split(samples, a.val_fraction)
    tcfg = _dataclass_from(trainer.TrainConfig, cfg.get("train", {}), stage=a.stage, seed=a.seed,
                           max_steps=a.max_steps, checkpoint_dir=str(out))
    inputs = [str(data)]
    if a.stage == 1:
        net = _dataclass_from(NetConfig, {"size": samples[0].shape[0], **cfg.get("net", {})})
        _, ckpt, m = trainer.train_stage1(train, val, tcfg, net, out / "train_stage1.csv")
        summary = {k: v for k, v in m.items() if not k.startswith("disp_")}
    else:
        if not a.from_stage1:
            raise UsageError("stage 2 needs --from-stage1 <checkpoint dir>")
        src = Path(a.from_stage1)
        if (src / "stage1").is_dir():
            src = src / "stage1"
        if not (src / "config.json").exists():
            raise UsageError(f"no stage-1 checkpoint at {src}")
        _, ckpt, summary = trainer.train_stage2(train, val, src, tcfg, out / "train_stage2.csv")
        inputs.append(str(src))
    dump_json(out / f"metrics_stage{a.stage}.json", summary)
    return RunManifest(f"train --stage {a.stage}", config_hash(asdict(tcfg)), a.seed, inputs,
                       [str(ckpt), str(out / f"metrics_stage{a.stage}.json")])


def cmd_infer(a, cfg) -> RunManifest:
    from . import trainer

    out = _out_dir(a.out)
    data = _data_dir(a.data)
    model, ck, _ = trainer.load_checkpoint(a.checkpoint)
    outputs = []
    for name, sl, _ in _load_samples(data):
        res = trainer.infer(sl, model)
        arrays = {"label_mask": res.label_mask.astype(np.uint8),
                  "myo_prob": res.outputs.myo_prob[CRI][0].numpy().astype(np.float32),
                  "pathology": res.pathology_mask.astype(np.uint8)}
        for s in MOVING:
            arrays[f"disp_{s}"] = res.displacements[s].deltas
            arrays[f"warped_{s}"] = res.warped_images[s].astype(np.float32)
        p = out / f"pred_{name}.npz"
        save_npz(p, arrays)
        outputs.append(str(p))
    return RunManifest("infer", config_hash(ck), a.seed, [str(data), str(a.checkpoint)], outputs)


def _warp_labels(lab, deltas, grid):
    coeffs = tps.solve_tps(grid, tps.DisplacementSet(deltas, lab.shape))
    return tps.warp_label(lab, coeffs)


def cmd_evaluate(a, cfg) -> RunManifest:
    out = _out_dir(a.out)
    data = _data_dir(a.data)
    preds = _prediction_paths(Path(a.pred))
    rep = metrics.EvalReport()
    dsets = []
    grid = None
    for name, sl, _ in _load_samples(data):
        if name not in preds:
            raise UsageError(f"no prediction for {name} in {a.pred}")
        pred, disp = _load_prediction(preds[name])
        gold = gold_label_mask(sl)
        row = {}
        for cls, codes in (("scar", (SCAR,)), ("edema", (SCAR, EDEMA))):
            for k, v in metrics.evaluate_segmentation(np.isin(pred, codes), np.isin(gold, codes), sl.spacing).items():
                row[f"{cls}_{k}"] = v
        row["myo_dice"] = metrics.dice_hard(myo_region(pred), myo_region(gold))
        for s, d in disp.items():
            grid = grid or tps.make_control_grid(int(round(math.sqrt(len(d)))))
            warped = _warp_labels(sl.labels[s], d, grid)
            reg = metrics.eval_registration(myo_region(warped), myo_region(sl.labels[CRI]), sl.spacing)
            row[f"reg_{s}_dice"] = reg["dice"]
            row[f"reg_{s}_hd_mm"] = reg["hd"]
            dsets.append(tps.DisplacementSet(d, sl.shape))
        rep.add(name, row)
    if dsets:
        h, w = dsets[0].frame
        rep.displacement = metrics.displacement_stats(dsets, h, w)
    rep.to_csv(out / "eval.csv")
    rep.to_json(out / "eval.json")
    return RunManifest("evaluate", config_hash({"pred": str(a.pred)}), a.seed, [str(data), str(a.pred)],
                       [str(out / "eval.csv"), str(out / "eval.json")])


def cmd_quantify(a, cfg) -> RunManifest:
    out = _out_dir(a.out)
    preds = _prediction_paths(Path(a.pred))
    reports, outputs = {}, []
    for name, p in preds.items():
        lab, _ = _load_prediction(p)
        try:
            reports[name] = clinquant.quantify(lab)
        except clinquant.GeometryError as exc:
            log.warning("skipping %s: %s", name, exc)
            continue
        png = out / f"bullseye_{name}.png"
        clinquant.plot_bullseye(reports[name].chords, png, name)
        outputs.append(str(png))
    clinquant.write_quant_csv(out / "quant.csv", reports)
    outputs.append(str(out / "quant.csv"))
    inputs = [str(a.pred)]
    if a.data:
        data = _data_dir(a.data)
        inputs.append(str(data))
        gold = {}
        for name, sl, _ in _load_samples(data):
            if name in reports:
                gold[name] = clinquant.quantify(gold_label_mask(sl))
        names = sorted(gold)
        corr = {}
        for key in ("scar_size_pct", "edema_size_pct", "transmural_count"):
            x = [getattr(gold[n], key) for n in names]
            y = [getattr(reports[n], key) for n in names]
            corr[key] = clinquant.pearson_r(x, y) if len(names) >= 2 else math.nan
            png = out / f"correlation_{key}.png"
            clinquant.plot_correlation(x, y, png, xlabel=f"gold {key}", ylabel=f"predicted {key}")
            outputs.append(str(png))
        clinquant.write_quant_csv(out / "quant_gold.csv", gold)
        dump_json(out / "correlation.json", {k: (None if math.isnan(v) else v) for k, v in corr.items()})
        outputs += [str(out / "quant_gold.csv"), str(out / "correlation.json")]
    return RunManifest("quantify", config_hash({"pred": str(a.pred)}), a.seed, inputs, outputs)


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with optional 'phantom', 'net', 'train' sections")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-sample work")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="umyops", description="Multi-sequence myocardial pathology segmentation")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", parents=[common], help="generate synthetic multi-sequence samples")
    ph.add_argument("--count", type=int, default=50)
    ph.add_argument("--misalign", type=float, default=None, help="max control-point displacement (px)")
    ph.add_argument("--size", type=int, default=None)
    ph.set_defaults(func=cmd_phantom)

    tr = sub.add_parser("train", parents=[common], help="train stage 1 or stage 2")
    tr.add_argument("--stage", type=int, choices=(1, 2), required=True)
    tr.add_argument("--data", help=f"sample directory (default ${DATA_ROOT_ENV})")
    tr.add_argument("--from-stage1", help="stage-1 checkpoint directory (stage 2 only)")
    tr.add_argument("--max-steps", type=int, default=None)
    tr.add_argument("--val-fraction", type=float, default=0.2)
    tr.set_defaults(func=cmd_train)

    inf = sub.add_parser("infer", parents=[common], help="predict masks and displacements")
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("--data")
    inf.set_defaults(func=cmd_infer)

    ev = sub.add_parser("evaluate", parents=[common], help="score predictions against gold")
    ev.add_argument("--pred", required=True, help="directory of pred_*.npz (or sample_*.npz)")
    ev.add_argument("--data")
    ev.set_defaults(func=cmd_evaluate)

    q = sub.add_parser("quantify", parents=[common], help="scar/edema size and transmurality")
    q.add_argument("--pred", required=True)
    q.add_argument("--data", help="gold samples for correlation plots")
    q.set_defaults(func=cmd_quantify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .trainer import CheckpointError

    t0 = time.time()
    try:
        cfg = _load_config(a.config)
        manifest = a.func(a, cfg)
    except (UsageError, CheckpointError, PhantomSpecError) as exc:
        print(f"umyops: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"umyops: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    manifest.wall_clock_s = round(time.time() - t0, 3)
    manifest.write(a.out)
    print(json.dumps({"command": manifest.command, "out": str(a.out), "outputs": len(manifest.outputs)}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
