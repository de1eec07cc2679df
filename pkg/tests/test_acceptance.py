"""Acceptance suite: one test per criterion, each at its stated tolerance.

A PASS/FAIL line per criterion is printed in the terminal summary. Run just
this file with ``pytest tests/test_acceptance.py -v``; the training criteria
take about 20 minutes on one CPU core.
"""

import hashlib
import math
import time
from collections import OrderedDict

import numpy as np
import pytest

from ygan import diffcore as dc
from ygan.diffcore import Tensor, grad_check
from ygan.fileio import read_pfm, write_pfm
from ygan.losses import LossConfig, discriminator_loss, generator_loss, reconstruction_loss, ssim
from ygan.nets import ParamSet, discriminator_forward, generator_forward, init_params
from ygan.synthgen import SceneConfig, compute_occlusion_mask, generate_records, write_dataset
from ygan.trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    batch_indices,
    evaluate,
    load_checkpoint,
    make_batch,
    read_loss_csv,
    save_checkpoint,
    train,
)
from ygan.warp import CameraRig, bilinear_sample, depth_to_disparity, disparity_to_depth, synthesize_view, warp_image

RIG = CameraRig.centered(width=96, height=64, focal_px=100.0, baseline=0.5)
STEP, TOL = 1e-4, 1e-3
FINE_STEP = 1e-6

# Criterion 5 configuration: best of the lambda / lr / d_max_frac values tried;
# defaults (lr 2e-4) drift further once reconstruction saturates.
DEPTH_LAMBDA = 1.0
DEPTH_LR = 2e-5
DEPTH_D_MAX_FRAC = 0.2


def _sq_mean(t):
    return dc.reduce_mean(dc.mul(t, t))


# ---------------------------------------------------------------------------
# 1. gradient correctness


def _primitive_checks():
    rng = np.random.default_rng(11)
    r = lambda *s: rng.random(s)
    pos = lambda *s: rng.uniform(0.5, 2.0, s)
    mask = (rng.random((2, 1, 4, 5)) > 0.3).astype(np.float64)
    mask[0, 0, 0, 0] = 1.0
    xs = rng.uniform(-0.8, 5.8, (1, 1, 4, 6))
    xs = np.where(np.abs(xs - np.rint(xs)) < 0.05, xs + 0.1, xs)  # keep away from bilinear kinks
    probs = rng.uniform(0.1, 0.9, (3,))
    cfg = LossConfig()
    return {
        "conv2d s1 p1": (lambda x, w, b: _sq_mean(dc.conv2d(x, w, b, 1, 1)), [r(2, 3, 5, 6), r(4, 3, 3, 3) - 0.5, r(4)]),
        "conv2d s2 p1": (lambda x, w, b: _sq_mean(dc.conv2d(x, w, b, 2, 1)), [r(1, 2, 8, 8), r(3, 2, 4, 4) - 0.5, r(3)]),
        "leaky_relu": (lambda x: _sq_mean(dc.leaky_relu(x)), [r(2, 3, 4, 4) - 0.5]),
        "sigmoid": (lambda x: _sq_mean(dc.sigmoid(x)), [4 * r(2, 3, 4, 4) - 2]),
        "upsample_nearest2x": (lambda x: _sq_mean(dc.upsample_nearest2x(x)), [r(1, 2, 3, 4)]),
        "add": (lambda a, b: _sq_mean(dc.add(a, b)), [r(2, 3), r(2, 3)]),
        "sub": (lambda a, b: _sq_mean(dc.sub(a, b)), [r(2, 3), r(2, 3)]),
        "mul": (lambda a, b: _sq_mean(dc.mul(a, b)), [r(2, 3), r(2, 3)]),
        "div": (lambda a, b: _sq_mean(dc.div(a, b)), [r(2, 3), pos(2, 3)]),
        "abs_diff": (lambda a, b: _sq_mean(dc.abs_diff(a, b)), [r(2, 3), r(2, 3) + 1.0]),
        "scale_shift": (lambda x: _sq_mean(dc.scale_shift(x, 2.5, -0.3)), [r(3, 4)]),
        "clamp": (lambda x: _sq_mean(dc.clamp(x, 0.2, 0.8)), [np.array([0.1, 0.3, 0.5, 0.7, 0.9])]),
        "log": (lambda x: _sq_mean(dc.log(x)), [pos(3, 4)]),
        "concat_channels": (lambda a, b: _sq_mean(dc.concat_channels(a, b)), [r(1, 2, 3, 3), r(1, 1, 3, 3)]),
        "reduce_mean masked": (lambda x: dc.reduce_mean(dc.mul(x, x), Tensor(mask)), [r(2, 3, 4, 5)]),
        "batch_mean": (lambda x: _sq_mean(dc.batch_mean(x)), [r(3, 1, 4, 4)]),
        "avg_pool3x3_valid": (lambda x: _sq_mean(dc.avg_pool3x3_valid(x)), [r(1, 2, 5, 6)]),
        "bilinear_sample": (lambda im, x: _sq_mean(bilinear_sample(im, x)[0]), [r(1, 3, 4, 6), xs]),
        "synthesize_view": (lambda im, d: _sq_mean(synthesize_view(im, d, "left")[0]), [r(1, 3, 4, 6), np.full((1, 1, 4, 6), 1.3) + 0.2 * r(1, 1, 4, 6)]),
        "depth_to_disparity": (lambda z: _sq_mean(depth_to_disparity(z, RIG)), [5 + 45 * r(1, 1, 3, 3)]),
        "disparity_to_depth": (lambda d: _sq_mean(disparity_to_depth(d, RIG)), [1 + 9 * r(1, 1, 3, 3)]),
        "ssim": (lambda a, b: ssim(a, b), [r(1, 3, 5, 6), r(1, 3, 5, 6)]),
        "reconstruction_loss": (lambda a, b: reconstruction_loss(a, b, None, cfg), [r(1, 3, 5, 6), r(1, 3, 5, 6) + 0.01]),
        "generator_loss": (lambda a, b: generator_loss(a, b, Tensor(np.array(0.0)), Tensor(np.array(0.0)), cfg), [probs, probs[::-1].copy()]),
        "discriminator_loss": (lambda a, b: discriminator_loss(a, b, cfg), [probs, probs[::-1].copy()]),
    }


def _composite_check():
    """generator -> synthesize_view -> reconstruction_loss on [1,3,16,16], float64 end to end."""
    rng = np.random.default_rng(12)
    params = init_params(3, dtype=np.float64).G
    center, left = rng.random((1, 3, 16, 16)), rng.random((1, 3, 16, 16))
    d_max = 0.2 * 16
    cfg = LossConfig()

    def loss_from(c, G):
        disp = generator_forward(c, G, d_max)
        recon, m = synthesize_view(c, disp, "left")
        return reconstruction_loss(Tensor(left), recon, m, cfg)

    def with_head(w):
        tensors = OrderedDict((k, Tensor(v.data)) for k, v in params.items())
        tensors["head.weight"] = w
        return ParamSet(tensors)

    def checked(fn, x, max_coords=None):
        # coordinates whose +-1e-4 stencil straddles a leaky_relu / |.| / floor kink are
        # re-verified at a step small enough to stay on one linear piece
        rep = grad_check(fn, [x], STEP, TOL, max_coords=max_coords, kink_tol=TOL)
        fine = grad_check(fn, [x], FINE_STEP, TOL, coords=rep.kinks) if rep.kinks else None
        return rep, fine

    img = checked(lambda c: loss_from(c, params.detached()), center, max_coords=150)
    head = checked(lambda w: loss_from(Tensor(center), with_head(w)), params["head.weight"].data)
    return img, head


def test_1_gradient_correctness(criterion):
    t0 = time.perf_counter()
    failures, worst = [], 0.0
    for name, (fn, inputs) in _primitive_checks().items():
        rep = grad_check(fn, inputs, STEP, TOL)
        worst = max(worst, rep.max_rel_err)
        if not rep.passed:
            failures.append(f"{name} ({rep.max_rel_err:.2e})")
    n_kinks, fine_worst = 0, 0.0
    for name, (rep, fine) in zip(("composite/input", "composite/head"), _composite_check()):
        worst = max(worst, rep.max_rel_err)
        if not rep.passed:
            failures.append(f"{name} ({rep.max_rel_err:.2e})")
        if fine is not None:
            n_kinks += len(rep.kinks)
            fine_worst = max(fine_worst, fine.max_rel_err)
            if not fine.passed:
                failures.append(f"{name} kinks ({fine.max_rel_err:.2e})")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120
    detail = f"worst rel err {worst:.2e} < 1e-3 at step 1e-4; {n_kinks} kink-straddling composite coords rechecked at step {FINE_STEP:g}: {fine_worst:.1e}; {elapsed:.0f}s < 120s"
    criterion(1, "gradient correctness", ok, detail + (f"; failed {failures}" if failures else ""))
    assert not failures, failures
    assert elapsed < 120


# ---------------------------------------------------------------------------
# 2. geometry oracle


def test_2_geometry_oracle(criterion):
    t0 = time.perf_counter()
    records = generate_records(20, RIG, SceneConfig(), 1)
    errors = []
    for rec in records:
        for side in ("left", "right"):
            warped, valid = warp_image(rec.center, rec.depths["center"], RIG, side)
            visible = compute_occlusion_mask(rec.depths["center"], rec.depths[side], RIG, side)
            m = (valid * visible) > 0
            errors.append(float(np.abs(warped - rec.images[side])[m].mean()))
    elapsed = time.perf_counter() - t0
    mean = float(np.mean(errors))
    ok = mean <= 0.02 and elapsed < 60
    criterion(2, "geometry oracle", ok, f"mean L1 {mean:.4f} (max per view {max(errors):.4f}) <= 0.02 over 20 scenes, {elapsed:.0f}s")
    assert mean <= 0.02
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 3. equation fidelity


def test_3_equation_fidelity(criterion):
    paper = LossConfig(gan_mode="paper", ssim_mode="paper_literal", lambda_gan=1.0)
    half = Tensor(np.array(0.5))
    zero = Tensor(np.array(0.0))
    eq1 = generator_loss(half, half, zero, zero, paper).item()
    img = Tensor(np.random.default_rng(0).random((1, 3, 8, 8)))
    eq2 = reconstruction_loss(img, img, None, paper).item()
    c1 = paper.c1
    const = ssim(Tensor(np.zeros((1, 3, 6, 6))), Tensor(np.ones((1, 3, 6, 6))), paper).item()
    errs = [abs(eq1 - 2 * math.log(0.5)), abs(eq1 - (-1.38629)), abs(eq2 - 1.0), abs(const - c1 / (1 + c1))]
    ok = max(errs) <= 1e-5
    criterion(3, "equation fidelity", ok, f"Eq1 {eq1:.5f}, Eq2 {eq2:.6f}, SSIM const {const:.6e}; max err {max(errs):.1e} <= 1e-5")
    assert ok, errs


# ---------------------------------------------------------------------------
# training runs shared by criteria 4 and 7


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """Criterion 4 run: 4 scenes, seed 1, defaults, 500 steps; checkpoints every 100."""
    records = generate_records(4, RIG, SceneConfig(), 1)
    out = tmp_path_factory.mktemp("overfit")
    cfg = TrainConfig(steps=500, seed=1, out_dir=str(out), checkpoint_every=100)
    t0 = time.perf_counter()
    train(cfg, records)
    return records, cfg, out, time.perf_counter() - t0


def test_4_overfit_descent(criterion, overfit_run):
    _, _, out, elapsed = overfit_run
    rows = read_loss_csv(out / "losses.csv")
    recon = np.array([r["loss_l"] + r["loss_r"] for r in rows])
    first, last = recon[:50].mean(), recon[450:500].mean()
    ratio = last / first
    ok = len(rows) == 500 and ratio <= 0.5 and elapsed <= 15 * 60
    criterion(4, "overfit descent", ok, f"mean(L_L+L_R) steps 451-500 / 1-50 = {last:.4f}/{first:.4f} = {ratio:.3f} <= 0.5, {elapsed / 60:.1f} min")
    assert len(rows) == 500
    assert ratio <= 0.5
    assert elapsed <= 15 * 60


# ---------------------------------------------------------------------------
# 5. depth recovery


def test_5_depth_recovery(criterion, tmp_path):
    records = generate_records(32, RIG, SceneConfig(max_objects=0), 5)
    train_set, held_out = records[:24], records[24:]
    cfg = TrainConfig(
        steps=2000,
        seed=5,
        learning_rate=DEPTH_LR,
        d_max_frac=DEPTH_D_MAX_FRAC,
        loss=LossConfig(lambda_gan=DEPTH_LAMBDA),
        out_dir=str(tmp_path / "depth"),
        checkpoint_every=0,
        log_every=100,
    )
    t0 = time.perf_counter()
    ck, _ = train(cfg, train_set)
    elapsed = time.perf_counter() - t0
    report = evaluate(ck.models, held_out, cfg.d_max_frac)
    median = float(np.median([s["abs_rel"] for s in report["scenes"]]))
    ok = median <= 0.25 and elapsed <= 45 * 60
    criterion(
        5,
        "depth recovery",
        ok,
        f"held-out median abs_rel {median:.3f} <= 0.25 (lambda {DEPTH_LAMBDA}, lr {DEPTH_LR}, d_max_frac {DEPTH_D_MAX_FRAC}), {elapsed / 60:.1f} min",
    )
    assert median <= 0.25
    assert elapsed <= 45 * 60


# ---------------------------------------------------------------------------
# 6. discriminator learnability


def _random_warps(batch, side, d_max, rng):
    center = batch["center"]
    b, _, h, w = center.shape
    disp = Tensor(rng.uniform(0.0, d_max, (b, 1, h, w)).astype(np.float32))
    fake, mask = synthesize_view(center, disp, side)
    real = dc.mul(batch[side], Tensor(np.broadcast_to(mask.data, fake.shape).copy()))
    return real, fake


def test_6_discriminator_learnability(criterion):
    t0 = time.perf_counter()
    models = init_params(0)
    g_before = b"".join(t.data.tobytes() for t in models.G.values())
    train_set = generate_records(16, RIG, SceneConfig(), 6)
    held_out = generate_records(8, RIG, SceneConfig(), 7)
    d_max = 0.2 * RIG.width
    cfg = TrainConfig()
    rng = np.random.default_rng(0)
    nets = (("left", models.D_L), ("right", models.D_R))
    states = {side: AdamState(params) for side, params in nets}
    for step in range(200):
        batch = make_batch([train_set[i] for i in batch_indices(step, len(train_set), cfg.batch_size, 0)])
        for side, params in nets:
            real, fake = _random_warps(batch, side, d_max, rng)
            params.zero_grad()
            loss = discriminator_loss(discriminator_forward(real, params), discriminator_forward(fake, params), cfg.loss)
            dc.backward(loss)
            adam_step(params, states[side], cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    correct = total = 0
    batch = make_batch(held_out)
    for side, params in nets:
        real, fake = _random_warps(batch, side, d_max, np.random.default_rng(1))
        correct += int(np.sum(discriminator_forward(real, params.detached()).data > 0.5))
        correct += int(np.sum(discriminator_forward(fake, params.detached()).data < 0.5))
        total += 2 * len(held_out)
    acc = correct / total
    elapsed = time.perf_counter() - t0
    g_frozen = b"".join(t.data.tobytes() for t in models.G.values()) == g_before
    ok = acc >= 0.95 and elapsed < 300 and g_frozen
    criterion(6, "discriminator learnability", ok, f"held-out accuracy {acc:.3f} >= 0.95 after 200 D-only steps, {elapsed:.0f}s")
    assert g_frozen
    assert acc >= 0.95
    assert elapsed < 300


# ---------------------------------------------------------------------------
# 7. determinism and persistence


def _tree_digest(path):
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(path)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def _max_row_diff(a, b):
    keys = ("loss_dl", "loss_dr", "loss_g", "loss_l", "loss_r")
    assert [r["step"] for r in a] == [r["step"] for r in b]
    return max(abs(x[k] - y[k]) for x, y in zip(a, b) for k in keys)


def test_7_determinism_and_persistence(criterion, overfit_run, tmp_path):
    records, cfg, out, _ = overfit_run
    reference = read_loss_csv(out / "losses.csv")

    # same seed, second run: the first 200 steps must match the reference run
    again = TrainConfig.from_dict({**cfg.to_dict(), "steps": 200, "out_dir": str(tmp_path / "again"), "checkpoint_every": 0})
    train(again, records)
    rerun_diff = _max_row_diff(read_loss_csv(tmp_path / "again" / "losses.csv"), reference[:200])

    # resume from the step-100 checkpoint for 100 steps
    resumed = TrainConfig.from_dict({**cfg.to_dict(), "steps": 100, "out_dir": str(tmp_path / "resumed"), "checkpoint_every": 0})
    train(resumed, records, resume_from=out / "checkpoints" / "step_000100")
    resume_diff = _max_row_diff(read_loss_csv(tmp_path / "resumed" / "losses.csv"), reference[100:200])

    # dataset generation byte-identical
    for name in ("ds_a", "ds_b"):
        write_dataset(generate_records(6, RIG, SceneConfig(), 21), tmp_path / name, SceneConfig(), 21)
    data_same = _tree_digest(tmp_path / "ds_a") == _tree_digest(tmp_path / "ds_b")

    # PFM and params round trips
    depth = records[0].depths["center"]
    write_pfm(tmp_path / "d.pfm", depth)
    pfm_same = read_pfm(tmp_path / "d.pfm").tobytes() == depth.tobytes()
    final = load_checkpoint(out / "final")
    save_checkpoint(tmp_path / "ck", final.step, final.models, final.opt, final.config, final.rig)
    back = load_checkpoint(tmp_path / "ck")
    params_same = all(
        a.data.tobytes() == b.data.tobytes()
        for net in ("G", "D_L", "D_R")
        for a, b in zip(getattr(final.models, net).values(), getattr(back.models, net).values())
    ) and (tmp_path / "ck" / "params.bin").read_bytes() == (out / "final" / "params.bin").read_bytes()

    ok = rerun_diff <= 1e-6 and resume_diff <= 1e-6 and data_same and pfm_same and params_same
    criterion(
        7,
        "determinism and persistence",
        ok,
        f"rerun diff {rerun_diff:.1e}, resume diff {resume_diff:.1e} (<= 1e-6); dataset identical {data_same}; PFM bitwise {pfm_same}; params bitwise {params_same}",
    )
    assert rerun_diff <= 1e-6
    assert resume_diff <= 1e-6
    assert data_same and pfm_same and params_same
