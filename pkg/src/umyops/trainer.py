"""Two-stage training, checkpoints and inference."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch

from . import __version__, tps
from .datapipe import (CRI, MOVING, SEQUENCES, EDEMA, MYO, SCAR, P_EDEMA, P_SCAR,
                       anatomy_channels, myo_region, pathology_index)
from .io import dump_json, load_json, load_npz, save_npz
from .losses import LossConfig, loss_cons, loss_hybrid, loss_myo, loss_pathology, loss_reg
from .metrics import dice_hard
from .netarch import STAGE1_PARTS, ForwardOutputs, NetConfig, NumericError, UMyoPS

log = logging.getLogger(__name__)

CKPT_SCHEMA = "umyops.checkpoint/1"
LOG_SCHEMA = "trainlog.v1"


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage: int = 1
    learning_rate: float | None = None  # stage default: 1e-3 / 5e-4
    batch_size: int = 8
    max_steps: int = 2000
    lambda_balance: float = 0.1
    seed: int = 0
    checkpoint_dir: str | None = None
    convergence_patience: int = 10
    eval_every: int = 50
    augment_flips: bool = False
    augment_rot90: bool = False
    prior_mode: str = "true"  # stage 2 ablations: true | uniform | shuffled

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.batch_size <= 0 or self.max_steps <= 0 or self.convergence_patience <= 0 or self.eval_every <= 0:
            raise ValueError("batch_size, max_steps, patience and eval_every must be positive")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.prior_mode not in ("true", "uniform", "shuffled"):
            raise ValueError(f"unknown prior_mode {self.prior_mode!r}")

    @property
    def lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 1e-3 if self.stage == 1 else 5e-4


# ---------------------------------------------------------------------------
# data

@dataclass
class Batch:
    images: dict
    ana: dict
    myo: dict
    pathology: torch.Tensor | None


def to_batch(slices) -> Batch:
    images = {s: torch.as_tensor(np.stack([sl.images[s] for sl in slices]), dtype=torch.float32)[:, None]
              for s in SEQUENCES}
    ana, myo = {}, {}
    if all(s in sl.labels for sl in slices for s in SEQUENCES):
        for s in SEQUENCES:
            ana[s] = torch.as_tensor(np.stack([anatomy_channels(sl.labels[s]) for sl in slices]))
            myo[s] = ana[s][:, 0]
    path = None
    if all(sl.pathology is not None for sl in slices):
        path = torch.as_tensor(np.stack([pathology_index(sl.pathology) for sl in slices]))
    return Batch(images, ana, myo, path)


def _augment(batch: Batch, rng: np.random.Generator, cfg: TrainConfig) -> Batch:
    dims = []
    if cfg.augment_flips and rng.random() < 0.5:
        dims.append(-1)
    if cfg.augment_flips and rng.random() < 0.5:
        dims.append(-2)
    k = int(rng.integers(4)) if cfg.augment_rot90 else 0

    def f(t):
        if t is None:
            return None
        if dims:
            t = torch.flip(t, dims)
        return torch.rot90(t, k, (-2, -1)) if k else t

    return Batch({s: f(v) for s, v in batch.images.items()}, {s: f(v) for s, v in batch.ana.items()},
                 {s: f(v) for s, v in batch.myo.items()}, f(batch.pathology))


def _select(batch: Batch, idx) -> Batch:
    idx = torch.as_tensor(idx)
    return Batch({s: v[idx] for s, v in batch.images.items()}, {s: v[idx] for s, v in batch.ana.items()},
                 {s: v[idx] for s, v in batch.myo.items()},
                 None if batch.pathology is None else batch.pathology[idx])


# ---------------------------------------------------------------------------
# checkpoints

def state_arrays(model: torch.nn.Module, prefix: str = "") -> dict:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items() if k.startswith(prefix)}


def params_digest(model: torch.nn.Module, parts=STAGE1_PARTS) -> str:
    h = hashlib.sha256()
    for name in parts:
        for k, v in sorted(model.part(name).state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: UMyoPS, directory, train_cfg: dict, manifest: dict, stage: int):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_npz(d / "params.npz", state_arrays(model))
    dump_json(d / "config.json", {"schema": CKPT_SCHEMA, "stage": stage, "net": model.cfg.to_dict(),
                                  "train": train_cfg})
    dump_json(d / "manifest.json", manifest)
    return d


def load_checkpoint(directory):
    d = Path(directory)
    try:
        cfg = load_json(d / "config.json")
        arrays = load_npz(d / "params.npz")
        manifest = load_json(d / "manifest.json")
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint at {d}: {exc}") from exc
    if not isinstance(cfg, dict) or cfg.get("schema") != CKPT_SCHEMA:
        raise CheckpointError(f"checkpoint schema mismatch at {d}: {cfg.get('schema') if isinstance(cfg, dict) else cfg!r}")
    try:
        model = UMyoPS(NetConfig(**cfg["net"]))
        state = {k: torch.as_tensor(v) for k, v in arrays.items()}
        model.load_state_dict(state, strict=True)
    except (KeyError, TypeError, RuntimeError) as exc:
        raise CheckpointError(f"checkpoint parameters do not match architecture: {exc}") from exc
    model.eval()
    return model, cfg, manifest


# ---------------------------------------------------------------------------
# training

class TrainLog:
    FIELDS = ("step", "stage", "split", "reg", "cons", "myo", "pathology", "total")

    def __init__(self, path=None):
        self.rows = []
        self.path = Path(path) if path else None

    def append(self, **row):
        self.rows.append({k: row.get(k, "") for k in self.FIELDS})

    def write(self):
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            fh.write(f"# schema={LOG_SCHEMA}\n")
            w = csv.DictWriter(fh, fieldnames=self.FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})


def _seed_all(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


def stage1_losses(model: UMyoPS, b: Batch, lcfg: LossConfig):
    disp, myo = model.forward_stage1(b.images)
    warped = {s: model.warp(b.ana[s], disp[s]) for s in MOVING}
    reg = loss_reg(warped, b.ana[CRI], lcfg.smooth_eps)
    cons = loss_cons({s: myo[s] for s in MOVING}, {s: b.myo[s] for s in MOVING}, lcfg.smooth_eps)
    lm = loss_myo(myo[CRI], b.myo[CRI], lcfg.smooth_eps)
    return loss_hybrid(reg, cons, lm, lcfg), {"reg": reg, "cons": cons, "myo": lm}


@torch.no_grad()
def evaluate_stage1(model: UMyoPS, slices, lcfg: LossConfig = LossConfig(), batch_size: int = 16) -> dict:
    """Validation hybrid loss plus hard registration / CRI myocardium Dice."""
    model.eval()
    totals, n = {"total": 0.0, "reg": 0.0, "cons": 0.0, "myo": 0.0}, 0
    reg_dice = {s: [] for s in MOVING}
    init_dice = {s: [] for s in MOVING}
    cri_dice = []
    disps = {s: [] for s in MOVING}
    for i in range(0, len(slices), batch_size):
        chunk = slices[i:i + batch_size]
        b = to_batch(chunk)
        total, parts = stage1_losses(model, b, lcfg)
        k = len(chunk)
        totals["total"] += float(total) * k
        for p, v in parts.items():
            totals[p] += float(v) * k
        n += k
        disp, myo = model.forward_stage1(b.images)
        for s in MOVING:
            lab = torch.as_tensor(np.stack([sl.labels[s] for sl in chunk]), dtype=torch.float32)[:, None]
            warped = model.warp(lab, disp[s], mode="nearest")[:, 0].round().long().numpy()
            for j, sl in enumerate(chunk):
                tgt = myo_region(sl.labels[CRI])
                reg_dice[s].append(dice_hard(myo_region(warped[j]), tgt))
                init_dice[s].append(dice_hard(myo_region(sl.labels[s]), tgt))
            disps[s].append(disp[s].numpy())
        pred = (myo[CRI] > 0.5).numpy()
        for j, sl in enumerate(chunk):
            cri_dice.append(dice_hard(pred[j], myo_region(sl.labels[CRI])))
    out = {k: v / max(n, 1) for k, v in totals.items()}
    for s in MOVING:
        out[f"reg_dice_{s}"] = float(np.mean(reg_dice[s]))
        out[f"init_dice_{s}"] = float(np.mean(init_dice[s]))
        out[f"disp_{s}"] = np.concatenate(disps[s]) if disps[s] else np.zeros((0, 0, 2))
    out["cri_myo_dice"] = float(np.mean(cri_dice))
    return out


def _run_loop(model, params, train, val_fn, step_fn, cfg: TrainConfig, tlog: TrainLog, save_fn):
    """Shared optimization loop with patience-based early stopping on the validation loss."""
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    best, best_state, bad = math.inf, None, 0
    n = train.images[CRI].shape[0]
    order, pos = rng.permutation(n), 0
    step = 0
    for step in range(1, cfg.max_steps + 1):
        if pos + cfg.batch_size > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        b = _select(train, idx)
        if cfg.augment_flips or cfg.augment_rot90:
            b = _augment(b, rng, cfg)
        loss, parts = step_fn(b)
        if not torch.isfinite(loss):
            if best_state is not None:
                model.load_state_dict(best_state)
            save_fn(step, aborted=True)
            raise NumericError(f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        tlog.append(step=step, stage=cfg.stage, split="train", total=float(loss.detach()),
                    **{k: float(v.detach()) for k, v in parts.items()})
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            val = val_fn()
            tlog.append(step=step, stage=cfg.stage, split="val", **val)
            log.info("stage %d step %d val %s", cfg.stage, step, {k: round(v, 4) for k, v in val.items()})
            if val["total"] < best - 1e-6:
                best, bad = val["total"], 0
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            else:
                bad += 1
                if bad >= cfg.convergence_patience:
                    break
    if best_state is not None:
        model.load_state_dict(best_state)
    return step, best


def train_stage1(train_slices, val_slices, cfg: TrainConfig, net_cfg: NetConfig | None = None,
                 log_path=None) -> tuple:
    """Jointly train encoders, registration heads and anatomy decoders under the hybrid loss.

    Returns ``(model, checkpoint_dir_or_None, validation_metrics)``.
    """
    if cfg.stage != 1:
        raise ValueError("train_stage1 needs a stage-1 config")
    _seed_all(cfg.seed)
    size = train_slices[0].shape[0]
    net_cfg = net_cfg or NetConfig(size=size)
    model = UMyoPS(net_cfg)
    lcfg = LossConfig(lambda_balance=cfg.lambda_balance)
    train = to_batch(train_slices)
    tlog = TrainLog(log_path)
    params = [p for m in model.stage1_modules() for p in m.parameters()]
    t0 = time.time()

    def step_fn(b):
        model.train()
        return stage1_losses(model, b, lcfg)

    def val_fn():
        ev = evaluate_stage1(model, val_slices, lcfg)
        return {k: ev[k] for k in ("total", "reg", "cons", "myo")}

    def save_fn(step, aborted=False):
        if cfg.checkpoint_dir:
            _save_stage(model, cfg, 1, {"steps": step, "aborted": aborted})

    steps, best = _run_loop(model, params, train, val_fn, step_fn, cfg, tlog, save_fn)
    model.eval()
    metrics = evaluate_stage1(model, val_slices, lcfg)
    tlog.write()
    ckpt = None
    if cfg.checkpoint_dir:
        ckpt = _save_stage(model, cfg, 1, {"steps": steps, "best_val_total": best,
                                           "stage1_digest": params_digest(model),
                                           "val_reg_dice": {s: metrics[f"reg_dice_{s}"] for s in MOVING},
                                           "val_cri_myo_dice": metrics["cri_myo_dice"]})
    log.info("stage 1 finished in %.1fs after %d steps", time.time() - t0, steps)
    return model, ckpt, metrics


def _save_stage(model, cfg: TrainConfig, stage: int, info: dict):
    d = Path(cfg.checkpoint_dir) / f"stage{stage}"
    manifest = {"tool_version": __version__, "stage": stage, "seed": cfg.seed, **info}
    return save_checkpoint(model, d, asdict(cfg), manifest, stage)


@torch.no_grad()
def stage1_outputs(model: UMyoPS, slices, batch_size: int = 16):
    """Frozen registration/anatomy outputs: aligned images ``I'``, CRI myo prior, displacements."""
    model.eval()
    aligned, prior, disps = [], [], {s: [] for s in MOVING}
    for i in range(0, len(slices), batch_size):
        b = to_batch(slices[i:i + batch_size])
        disp, myo = model.forward_stage1(b.images)
        aligned.append(model.align_images(b.images, disp))
        prior.append(myo[CRI])
        for s in MOVING:
            disps[s].append(disp[s])
    return torch.cat(aligned), torch.cat(prior), {s: torch.cat(v) for s, v in disps.items()}


def _derangement(n, rng):
    if n < 2:
        return np.arange(n)
    while True:
        p = rng.permutation(n)
        if not np.any(p == np.arange(n)):
            return p


def make_priors(prior: torch.Tensor, mode: str, seed: int) -> torch.Tensor:
    if mode == "true":
        return prior
    if mode == "uniform":
        return torch.ones_like(prior)
    return prior[torch.as_tensor(_derangement(len(prior), np.random.default_rng(seed + 7919)))]


@torch.no_grad()
def predict_pathology(model: UMyoPS, aligned, prior, batch_size: int = 16) -> torch.Tensor:
    model.eval()
    return torch.cat([model.forward_pathology(aligned[i:i + batch_size], prior[i:i + batch_size])
                      for i in range(0, len(aligned), batch_size)])


def pathology_scores(pred_idx: np.ndarray, gold_idx: np.ndarray) -> dict:
    """Mean per-sample Dice for scar and edema (edema = scar OR edema)."""
    scar, edema = [], []
    for p, g in zip(pred_idx, gold_idx):
        scar.append(dice_hard(p == P_SCAR, g == P_SCAR))
        edema.append(dice_hard(p > 0, g > 0))
    return {"scar_dice": float(np.mean(scar)), "edema_dice": float(np.mean(edema))}


def train_stage2(train_slices, val_slices, stage1, cfg: TrainConfig, log_path=None) -> tuple:
    """Train the pathology sub-network with every stage-1 parameter frozen.

    ``stage1`` is a model or a checkpoint directory. Returns ``(model, ckpt, metrics)``.
    """
    if cfg.stage != 2:
        raise ValueError("train_stage2 needs a stage-2 config")
    if isinstance(stage1, (str, Path)):
        model, ck, _ = load_checkpoint(stage1)
        if ck.get("stage") != 1:
            raise CheckpointError(f"{stage1} is not a stage-1 checkpoint")
    else:
        model = stage1
    _seed_all(cfg.seed)
    # fresh pathology weights, independent of whatever the stage-1 model carried
    model.pathology = type(model.pathology)(model.cfg.channels)
    digest_before = params_digest(model)
    for m in model.stage1_modules():
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)

    al_tr, pr_tr, _ = stage1_outputs(model, train_slices)
    al_va, pr_va, _ = stage1_outputs(model, val_slices)
    pr_tr = make_priors(pr_tr, cfg.prior_mode, cfg.seed)
    pr_va = make_priors(pr_va, cfg.prior_mode, cfg.seed + 1)
    gold_tr = torch.as_tensor(np.stack([pathology_index(s.pathology) for s in train_slices]))
    gold_va = torch.as_tensor(np.stack([pathology_index(s.pathology) for s in val_slices]))
    # reuse the generic loop: pack stage-2 inputs into a Batch
    train = Batch({"LGE": al_tr, "prior": pr_tr[:, None]}, {}, {}, gold_tr)
    tlog = TrainLog(log_path)

    def step_fn(b):
        model.pathology.train()
        logits = model.forward_pathology(b.images["LGE"], b.images["prior"][:, 0])
        lp = loss_pathology(logits, b.pathology)
        return lp, {"pathology": lp}

    def val_fn():
        logits = predict_pathology(model, al_va, pr_va)
        return {"total": float(loss_pathology(logits, gold_va))}

    def save_fn(step, aborted=False):
        if cfg.checkpoint_dir:
            _save_stage(model, cfg, 2, {"steps": step, "aborted": aborted})

    steps, best = _run_loop(model, list(model.pathology.parameters()), train, val_fn, step_fn, cfg, tlog, save_fn)
    model.eval()
    digest_after = params_digest(model)
    if digest_after != digest_before:
        raise RuntimeError("stage-1 parameters changed during stage-2 training")
    pred = predict_pathology(model, al_va, pr_va).argmax(1).numpy()
    metrics = pathology_scores(pred, gold_va.numpy())
    metrics["val_loss"] = best
    tlog.write()
    ckpt = None
    if cfg.checkpoint_dir:
        ckpt = _save_stage(model, cfg, 2, {"steps": steps, "best_val_total": best,
                                           "stage1_digest_before": digest_before,
                                           "stage1_digest_after": digest_after,
                                           "stage1_frozen_bit_equal": digest_before == digest_after,
                                           "prior_mode": cfg.prior_mode,
                                           "val": {k: v for k, v in metrics.items() if k != "val_loss"}})
    return model, ckpt, metrics


# ---------------------------------------------------------------------------
# inference

@dataclass
class InferenceResult:
    outputs: ForwardOutputs
    myo_mask: np.ndarray
    pathology_mask: np.ndarray  # pathology classes BG/EDEMA/SCAR
    label_mask: np.ndarray  # LabelMask codes in the CRI frame
    displacements: dict  # sequence -> tps.DisplacementSet
    warped_images: dict = field(default_factory=dict)


@torch.no_grad()
def infer(sl, checkpoint) -> InferenceResult:
    model = checkpoint if isinstance(checkpoint, UMyoPS) else load_checkpoint(checkpoint)[0]
    model.eval()
    b = to_batch([sl])
    disp, myo = model.forward_stage1(b.images)
    aligned = model.align_images(b.images, disp)
    logits = model.forward_pathology(aligned, myo[CRI])
    outputs = ForwardOutputs(disp=disp, myo_prob=myo, pathology_logits=logits, warped_images=aligned)
    myo_mask = (myo[CRI][0] > 0.5).numpy()
    path = logits.argmax(1)[0].numpy()
    label = np.zeros(myo_mask.shape, dtype=np.int64)
    label[myo_mask] = MYO
    label[path == P_EDEMA] = EDEMA
    label[path == P_SCAR] = SCAR
    frame = tuple(sl.shape)
    dsets = {s: tps.DisplacementSet(disp[s][0].double().numpy(), frame) for s in MOVING}
    warped = {s: aligned[0, i].numpy() for i, s in enumerate(SEQUENCES)}
    return InferenceResult(outputs, myo_mask, path, label, dsets, warped)
