"""Alternating adversarial training, checkpoints, and depth evaluation."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import NonFiniteError, Tensor
from .losses import LossConfig, discriminator_loss, generator_loss, reconstruction_loss
from .nets import ArchSpec, Models, ParamSet, discriminator_forward, generator_forward, init_params
from .synthgen import ExampleRecord, compute_occlusion_mask, read_dataset, read_manifest
from .warp import CameraRig, as_image_tensor, disparity_to_depth, synthesize_view

logger = logging.getLogger(__name__)

CSV_HEADER = ["step", "loss_dl", "loss_dr", "loss_g", "loss_l", "loss_r", "wall_ms"]
_BATCH_STREAM = 0xBA7C


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient; carries the diagnostics that were written."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 2
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    d_max_frac: float = 0.2
    loss: LossConfig = field(default_factory=LossConfig)
    arch: ArchSpec = field(default_factory=ArchSpec)
    data_dir: Optional[str] = None
    out_dir: Optional[str] = None
    checkpoint_every: int = 100
    log_every: int = 10

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise ValueError("learning_rate and adam_eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not 0 < self.d_max_frac <= 1:
            raise ValueError("d_max_frac must lie in (0, 1]")
        if self.checkpoint_every < 0 or self.log_every < 1:
            raise ValueError("checkpoint_every must be >= 0 and log_every >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossConfig(**d["loss"])
        d["arch"] = ArchSpec.from_dict(d["arch"])
        return cls(**d)

    def trajectory_hash(self) -> str:
        """Hash of every field that shapes the loss trajectory (not run length or paths)."""
        d = self.to_dict()
        for k in ("steps", "data_dir", "out_dir", "checkpoint_every", "log_every"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    def __init__(self, params: ParamSet):
        self.t = 0
        self.m = OrderedDict((k, np.zeros_like(v.data)) for k, v in params.items())
        self.v = OrderedDict((k, np.zeros_like(v.data)) for k, v in params.items())


def adam_step(params: ParamSet, state: AdamState, lr: float, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update using each parameter's accumulated ``grad``, in place.

    Every gradient is checked first; a non-finite one aborts before any
    parameter or moment is touched.
    """
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in {name}")
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad
        dt = p.data.dtype.type
        m = state.m[name]
        v = state.v[name]
        m *= dt(beta1)
        m += dt(1 - beta1) * g
        v *= dt(beta2)
        v += dt(1 - beta2) * (g * g)
        step = (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(eps))
        p.data = p.data - dt(lr) * step


# ---------------------------------------------------------------------------
# one alternating step


def make_batch(records: Sequence[ExampleRecord]) -> dict:
    return {
        view: as_image_tensor(np.stack([r.images[view] for r in records]))
        for view in ("left", "center", "right")
    }


@dataclass
class OptimState:
    G: AdamState
    D_L: AdamState
    D_R: AdamState

    @classmethod
    def fresh(cls, models: Models) -> "OptimState":
        return cls(AdamState(models.G), AdamState(models.D_L), AdamState(models.D_R))


def _check(name: str, t: Tensor) -> float:
    val = float(t.data)
    if not np.isfinite(val):
        raise NonFiniteError(f"{name} is non-finite ({val})")
    return val


def discriminator_phase(batch: dict, models: Models, opt: OptimState, cfg: TrainConfig, d_max: float) -> tuple[float, float]:
    """Update D_L and D_R against warps from a generator that receives no gradient."""
    disp = generator_forward(batch["center"], models.G.detached(), d_max, models.arch)
    losses = []
    for side, params, state in (("left", models.D_L, opt.D_L), ("right", models.D_R, opt.D_R)):
        fake, mask = synthesize_view(batch["center"], disp, side)
        real = dc.mul(batch[side], Tensor(np.broadcast_to(mask.data, fake.shape).copy()))
        params.zero_grad()
        d_real = discriminator_forward(real, params, models.arch)
        d_fake = discriminator_forward(fake, params, models.arch)
        loss = discriminator_loss(d_real, d_fake, cfg.loss)
        losses.append(_check(f"loss_d_{side}", loss))
        dc.backward(loss)
        adam_step(params, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return losses[0], losses[1]


def generator_losses(batch: dict, models: Models, cfg: TrainConfig, d_max: float, G: Optional[ParamSet] = None) -> dict:
    """Forward the generator path and return the loss tensors (D parameters frozen)."""
    G = models.G if G is None else G
    disp = generator_forward(batch["center"], G, d_max, models.arch)
    fake_l, mask_l = synthesize_view(batch["center"], disp, "left")
    fake_r, mask_r = synthesize_view(batch["center"], disp, "right")
    rec_l = reconstruction_loss(batch["left"], fake_l, mask_l, cfg.loss)
    rec_r = reconstruction_loss(batch["right"], fake_r, mask_r, cfg.loss)
    if cfg.loss.lambda_gan > 0:
        p_l = discriminator_forward(fake_l, models.D_L.detached(), models.arch)
        p_r = discriminator_forward(fake_r, models.D_R.detached(), models.arch)
    else:
        # zero-weighted adversarial terms: skip the discriminator forward
        p_l = p_r = Tensor(np.full(batch["center"].shape[0], 0.5, dtype=batch["center"].dtype))
    loss_g = generator_loss(p_l, p_r, rec_l, rec_r, cfg.loss)
    return {"loss_g": loss_g, "loss_l": rec_l, "loss_r": rec_r, "disp": disp}


def generator_phase(batch: dict, models: Models, opt: OptimState, cfg: TrainConfig, d_max: float) -> dict:
    models.G.zero_grad()
    out = generator_losses(batch, models, cfg, d_max)
    vals = {k: _check(k, out[k]) for k in ("loss_g", "loss_l", "loss_r")}
    dc.backward(out["loss_g"])
    adam_step(models.G, opt.G, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return vals


def train_step(batch: dict, models: Models, opt: OptimState, cfg: TrainConfig, d_max: float) -> dict:
    """One D phase (both discriminators) followed by one G phase on the same batch."""
    l_dl, l_dr = discriminator_phase(batch, models, opt, cfg, d_max)
    g = generator_phase(batch, models, opt, cfg, d_max)
    return {"loss_dl": l_dl, "loss_dr": l_dr, **g}


# ---------------------------------------------------------------------------
# batching


def batch_indices(step: int, n_records: int, batch_size: int, seed: int) -> np.ndarray:
    """Record indices for 0-based ``step``: seeded permutation per epoch, last partial batch dropped."""
    per_epoch = n_records // batch_size
    if per_epoch == 0:
        raise ValueError(f"dataset of {n_records} records is smaller than one batch of {batch_size}")
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, _BATCH_STREAM, epoch]).permutation(n_records)
    return perm[k * batch_size : (k + 1) * batch_size]


# ---------------------------------------------------------------------------
# checkpoints


def _net_tensor_names(models: Models) -> list[tuple[str, str, Tensor]]:
    out = []
    for net, params in models.nets().items():
        for name, t in params.items():
            out.append((net, name, t))
    return out


def save_checkpoint(directory, step: int, models: Models, opt: OptimState, cfg: TrainConfig, rig: Optional[CameraRig] = None) -> None:
    """Write ``meta.json``, ``params.bin`` and ``adam.bin`` (float32 little-endian, manifest order)."""
    os.makedirs(directory, exist_ok=True)
    manifest = []
    offset = 0
    with open(os.path.join(directory, "params.bin"), "wb") as f:
        for net, name, t in _net_tensor_names(models):
            buf = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
            manifest.append({"name": f"{net}/{name}", "shape": list(t.shape), "offset": offset})
            f.write(buf)
            offset += len(buf)
    adam_manifest = []
    offset = 0
    with open(os.path.join(directory, "adam.bin"), "wb") as f:
        for net, state in (("G", opt.G), ("D_L", opt.D_L), ("D_R", opt.D_R)):
            for name in state.m:
                for moment, arr in (("m", state.m[name]), ("v", state.v[name])):
                    buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
                    adam_manifest.append({"name": f"{net}/{name}/{moment}", "shape": list(arr.shape), "offset": offset})
                    f.write(buf)
                    offset += len(buf)
    meta = {
        "step": int(step),
        "config_hash": cfg.trajectory_hash(),
        "config": cfg.to_dict(),
        "rig": rig.to_dict() if rig is not None else None,
        "adam_t": {"G": opt.G.t, "D_L": opt.D_L.t, "D_R": opt.D_R.t},
        # batch order is a pure function of (seed, step), so this fully fixes it
        "rng": {"scheme": "per-epoch-permutation", "seed": cfg.seed, "next_step": int(step)},
        "tensors": manifest,
        "adam_tensors": adam_manifest,
    }
    with open(os.path.join(directory, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_tensors(path, manifest: list[dict]) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as f:
        raw = f.read()
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for entry in manifest:
        n = int(np.prod(entry["shape"], dtype=np.int64)) * 4
        start = entry["offset"]
        if start + n > len(raw):
            raise ValueError(f"{path}: truncated at tensor {entry['name']}")
        out[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=n // 4, offset=start).reshape(entry["shape"]).astype(np.float32)
    return out


@dataclass
class Checkpoint:
    step: int
    models: Models
    opt: OptimState
    config: TrainConfig
    rig: Optional[CameraRig]
    meta: dict


def load_checkpoint(directory) -> Checkpoint:
    meta_path = os.path.join(directory, "meta.json")
    if not os.path.isfile(meta_path):
        raise FileNotFoundError(f"{meta_path}: checkpoint metadata not found")
    with open(meta_path) as f:
        meta = json.load(f)
    cfg = TrainConfig.from_dict(meta["config"])
    tensors = _read_tensors(os.path.join(directory, "params.bin"), meta["tensors"])
    nets: dict[str, OrderedDict] = {"G": OrderedDict(), "D_L": OrderedDict(), "D_R": OrderedDict()}
    for key, arr in tensors.items():
        net, name = key.split("/", 1)
        nets[net][name] = Tensor(arr, requires_grad=True)
    models = Models(ParamSet(nets["G"]), ParamSet(nets["D_L"]), ParamSet(nets["D_R"]), cfg.arch)
    opt = OptimState.fresh(models)
    moments = _read_tensors(os.path.join(directory, "adam.bin"), meta["adam_tensors"])
    for key, arr in moments.items():
        net, rest = key.split("/", 1)
        name, moment = rest.rsplit("/", 1)
        getattr(getattr(opt, net), moment)[name] = arr.copy()
    for net, t in meta["adam_t"].items():
        getattr(opt, net).t = int(t)
    rig = CameraRig.from_dict(meta["rig"]) if meta.get("rig") else None
    return Checkpoint(int(meta["step"]), models, opt, cfg, rig, meta)


# ---------------------------------------------------------------------------
# training loop


def _write_diagnostics(out_dir, diag: dict) -> None:
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "abort_diagnostics.json"), "w") as f:
            json.dump(diag, f, indent=2, default=str)


def train(
    cfg: TrainConfig,
    records: Optional[Sequence[ExampleRecord]] = None,
    resume_from=None,
    models: Optional[Models] = None,
) -> tuple[Checkpoint, list[dict]]:
    """Run ``cfg.steps`` alternating steps (counted from the resume point, if any).

    Records are read from ``cfg.data_dir`` unless given. Writes a CSV loss log
    and checkpoints under ``cfg.out_dir`` when set. Returns the final
    checkpoint and the per-step loss rows.
    """
    if records is None:
        if cfg.data_dir is None:
            raise ValueError("either records or cfg.data_dir is required")
        records = read_dataset(cfg.data_dir)
    if len(records) == 0:
        raise ValueError("cannot train on an empty dataset")
    rig = records[0].rig
    d_max = cfg.d_max_frac * rig.width

    start = 0
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        if ck.meta["config_hash"] != cfg.trajectory_hash():
            raise ValueError("checkpoint was produced by a different training configuration")
        if ck.rig is not None and ck.rig != rig:
            raise ValueError(f"checkpoint rig {ck.rig} does not match dataset rig {rig}")
        models, opt, start = ck.models, ck.opt, ck.step
    else:
        models = models if models is not None else init_params(cfg.seed, cfg.arch)
        opt = OptimState.fresh(models)

    csv_file = writer = None
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        csv_file = open(os.path.join(cfg.out_dir, "losses.csv"), "w", newline="")
        writer = csv.writer(csv_file)
        writer.writerow(CSV_HEADER)

    rows: list[dict] = []
    step = start
    try:
        for step in range(start + 1, start + cfg.steps + 1):
            idx = batch_indices(step - 1, len(records), cfg.batch_size, cfg.seed)
            batch = make_batch([records[i] for i in idx])
            t0 = time.perf_counter()
            try:
                losses = train_step(batch, models, opt, cfg, d_max)
            except NonFiniteError as e:
                diag = {"step": step, "error": str(e), "batch": idx.tolist(), "config": cfg.to_dict()}
                _write_diagnostics(cfg.out_dir, diag)
                raise TrainingAborted(f"step {step}: {e}", diag) from e
            wall_ms = (time.perf_counter() - t0) * 1000.0
            row = {"step": step, **{k: losses[k] for k in CSV_HEADER[1:6]}, "wall_ms": wall_ms}
            rows.append(row)
            if writer is not None:
                writer.writerow([step] + [repr(float(row[k])) for k in CSV_HEADER[1:6]] + [f"{wall_ms:.1f}"])
            if step % cfg.log_every == 0:
                logger.info(
                    "step %d  L_DL %.4f  L_DR %.4f  L_G %.4f  L_L %.4f  L_R %.4f  (%.0f ms)",
                    step, row["loss_dl"], row["loss_dr"], row["loss_g"], row["loss_l"], row["loss_r"], wall_ms,
                )
            if cfg.out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(os.path.join(cfg.out_dir, "checkpoints", f"step_{step:06d}"), step, models, opt, cfg, rig)
    finally:
        if csv_file is not None:
            csv_file.close()

    final_step = start + cfg.steps
    if cfg.out_dir:
        save_checkpoint(os.path.join(cfg.out_dir, "final"), final_step, models, opt, cfg, rig)
    meta = {"step": final_step, "config_hash": cfg.trajectory_hash()}
    return Checkpoint(final_step, models, opt, cfg, rig, meta), rows


def read_loss_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in reader]


# ---------------------------------------------------------------------------
# evaluation


def depth_metrics(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None) -> dict:
    """abs_rel, rmse and delta1 (strict max-ratio < 1.25) over masked pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    sel = np.ones(gt.shape, bool) if mask is None else np.asarray(mask) > 0
    p, g = pred[sel], gt[sel]
    if p.size == 0:
        return {"abs_rel": float("nan"), "rmse": float("nan"), "delta1": float("nan"), "n_pixels": 0}
    ratio = np.maximum(g / p, p / g)
    return {
        "abs_rel": float(np.mean(np.abs(p - g) / g)),
        "rmse": float(np.sqrt(np.mean((p - g) ** 2))),
        "delta1": float(np.mean(ratio < 1.25)),
        "n_pixels": int(p.size),
    }


def predict_depth(models: Models, center_hwc: np.ndarray, rig: CameraRig, d_max: float) -> np.ndarray:
    """HxWx3 image -> HxW depth in world units."""
    disp = generator_forward(as_image_tensor(center_hwc), models.G.detached(), d_max, models.arch)
    return disparity_to_depth(disp, rig).data[0, 0]


def evaluate(
    models: Models,
    records: Sequence[ExampleRecord],
    d_max_frac: float = 0.2,
    occlusion_masked: bool = False,
    rig: Optional[CameraRig] = None,
) -> dict:
    """Depth metrics of the generator against ground-truth center depth.

    The occlusion-masked variant keeps only center pixels visible in both
    side views.
    """
    if not records:
        raise ValueError("cannot evaluate on an empty dataset")
    data_rig = records[0].rig
    if rig is not None and rig != data_rig:
        raise ValueError(f"checkpoint rig {rig} does not match dataset rig {data_rig}")
    d_max = d_max_frac * data_rig.width
    preds, gts, masks, scenes = [], [], [], []
    for i, rec in enumerate(records):
        pred = predict_depth(models, rec.center, data_rig, d_max)
        gt = rec.depths["center"]
        mask = None
        if occlusion_masked:
            mask = compute_occlusion_mask(gt, rec.depths["left"], data_rig, "left") * compute_occlusion_mask(
                gt, rec.depths["right"], data_rig, "right"
            )
        scenes.append({"index": i, "seed": rec.seed, **depth_metrics(pred, gt, mask)})
        preds.append(pred)
        gts.append(gt)
        masks.append(np.ones(gt.shape) if mask is None else mask)
    overall = depth_metrics(np.stack(preds), np.stack(gts), np.stack(masks))
    return {**overall, "scenes": scenes}
