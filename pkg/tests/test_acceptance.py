"""Acceptance gate: one test per release criterion.

Each test here is a self-contained check of one promised property at its
stated tolerance.  Oracles in this file are written straight-line and
independently of the library code they judge; tolerances are pinned in the
asserts, not in shared constants, so a loosening shows up in the diff.
"""

import copy
import itertools
import json
import time
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

import scalar_oracle as oracle
from salfuse import autodiff as ad
from salfuse import cli, mapio, metrics
from salfuse.attributes import object_scale
from salfuse.gradcheck import check_gradients
from salfuse.model import CimBlock, Mfa
from salfuse.synth import make_dataset
from salfuse.train import train_toy


def params_as_lists(module):
    return {name: p.data.tolist() for name, p in module.named_parameters()}


# ---------------------------------------------------------------------------
# 1. gradient check: >= 30 stratified samples, rel err < 1e-3, < 5 min


def test_criterion_gradcheck_stratified_under_1e_minus_3():
    run = cli.toy_run_config()
    t0 = time.time()
    report = check_gradients(run, samples=32, seed=0)
    elapsed = time.time() - t0
    assert len(report.samples) >= 30
    strata = {s.parameter.split(".")[0] for s in report.samples}
    assert strata == {"enc_rgb", "enc_depth", "cim", "dec_shared", "dec_rgb", "dec_depth"}
    assert report.max_rel_error < 1e-3, report.worst()
    assert report.passed
    assert elapsed < 300.0


# ---------------------------------------------------------------------------
# 2. zero-weight cross-enhancement is exactly 1.5x in both dtypes


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_criterion_zero_weight_enhancement_is_exact_1p5x(dtype):
    with ad.precision(dtype):
        block = CimBlock(level=1, c=4, prev_c=None, mode="full")
        block.initialize(0)
        for p in (block.attn_r, block.attn_d):
            p.weight.data = np.zeros(p.weight.shape)
            p.bias.data = np.zeros(p.bias.shape)
        rng = np.random.default_rng(17)
        f_r = ad.tensor(rng.standard_normal((2, 4, 5, 5)))
        f_d = ad.tensor(rng.standard_normal((2, 4, 5, 5)))
        out_r, out_d = block.enhance(f_r, f_d)
        np.testing.assert_array_equal(out_r.data, np.asarray(1.5, dtype=dtype) * f_r.data)
        np.testing.assert_array_equal(out_d.data, np.asarray(1.5, dtype=dtype) * f_d.data)


# ---------------------------------------------------------------------------
# 3. fusion modules match the straight-line scalar oracle within 1e-10


def test_criterion_fusion_modules_match_scalar_oracle_1e_minus_10():
    with ad.precision("float64"):
        for seed in range(3):
            rng = np.random.default_rng(5000 + seed)

            block = CimBlock(level=1, c=2, prev_c=None, mode="full")
            block.initialize(seed)
            f_r = ad.tensor(rng.standard_normal((1, 2, 2, 2)))
            f_d = ad.tensor(rng.standard_normal((1, 2, 2, 2)))
            got = block(f_r, f_d).data[0]
            want = oracle.cim_forward(params_as_lists(block), 1,
                                      f_r.data[0].tolist(), f_d.data[0].tolist())
            np.testing.assert_allclose(got, np.array(want), rtol=0, atol=1e-10)

            block = CimBlock(level=2, c=4, prev_c=2, mode="full")
            block.initialize(seed)
            f_r = ad.tensor(rng.standard_normal((1, 4, 2, 2)))
            f_d = ad.tensor(rng.standard_normal((1, 4, 2, 2)))
            prev = ad.tensor(rng.standard_normal((1, 2, 4, 4)))
            got = block(f_r, f_d, prev).data[0]
            want = oracle.cim_forward(params_as_lists(block), 2, f_r.data[0].tolist(),
                                      f_d.data[0].tolist(), prev.data[0].tolist())
            np.testing.assert_allclose(got, np.array(want), rtol=0, atol=1e-10)

            mfa = Mfa(2, "full")
            mfa.initialize(seed)
            g_s = ad.tensor(rng.standard_normal((1, 2, 2, 2)))
            g_r = ad.tensor(rng.standard_normal((1, 2, 2, 2)))
            g_d = ad.tensor(rng.standard_normal((1, 2, 2, 2)))
            got = mfa(g_s, g_r, g_d).data[0]
            want = oracle.mfa_forward(params_as_lists(mfa), g_s.data[0].tolist(),
                                      g_r.data[0].tolist(), g_d.data[0].tolist())
            np.testing.assert_allclose(got, np.array(want), rtol=0, atol=1e-10)


# ---------------------------------------------------------------------------
# 4. exhaustive 2x2 metric parity against brute-force enumeration


def brute_pr_f(pred4, gt4):
    """Loop-everything PR/F oracle on flat 4-pixel lists."""
    pv = [p * 255.0 for p in pred4]
    n_fg = sum(gt4)
    precisions, recalls, fs = [], [], []
    for t in range(256):
        m = sum(1 for v in pv if v >= t)
        tp = sum(1 for v, g in zip(pv, gt4) if g and v >= t)
        p = tp / m if m > 0 else 0.0
        r = tp / n_fg
        den = 0.3 * p + r
        f = (1.3 * p * r) / den if den > 0 else 0.0
        precisions.append(p)
        recalls.append(r)
        fs.append(f)
    return precisions, recalls, max(fs)


def test_criterion_exhaustive_2x2_metric_parity():
    levels = [0.0, 0.25, 0.5, 0.75, 1.0]
    gts = [g for g in itertools.product([0, 1], repeat=4) if 0 < sum(g) < 4]
    assert len(gts) == 14
    checked = 0
    for pred4 in itertools.product(levels, repeat=4):
        pred = np.array(pred4).reshape(2, 2)
        for gt4 in gts:
            gt = np.array(gt4).reshape(2, 2)
            p_curve, r_curve = metrics.pr_curve(pred, gt)
            bp, br, bf = brute_pr_f(list(pred4), list(gt4))
            assert p_curve.tolist() == bp
            assert r_curve.tolist() == br
            assert metrics.f_measure_max(pred, gt) == bf
            hand_mae = sum(abs(p - g) for p, g in zip(pred4, gt4)) / 4.0
            assert abs(metrics.mae(pred, gt) - hand_mae) < 1e-12
            checked += 1
    assert checked == len(levels) ** 4 * 14


# ---------------------------------------------------------------------------
# 5. perfect prediction hits the metric fixed points


def test_criterion_perfect_prediction_fixed_points():
    rng = np.random.default_rng(99)
    done = 0
    while done < 50:
        gt = (rng.random((24, 24)) < rng.uniform(0.2, 0.8)).astype(np.float64)
        if gt.sum() in (0, gt.size):
            continue
        pair = metrics.evaluate_pair(f"m{done}", gt.copy(), gt)
        assert abs(pair.s_measure - 1.0) < 1e-9
        assert abs(pair.f_max - 1.0) < 1e-9
        assert abs(pair.e_value - 1.0) < 1e-9
        assert abs(pair.mae - 0.0) < 1e-9
        done += 1


# ---------------------------------------------------------------------------
# 6. the F and S weighting constants are really 0.3 and 0.5


def test_criterion_f_beta2_and_s_alpha_constants():
    rng = np.random.default_rng(7)
    pred = rng.random((16, 16))
    gt = np.zeros((16, 16))
    gt[3:9, 2:13] = 1.0

    assert metrics.f_measure_max(pred, gt) == metrics.f_measure_max(pred, gt, beta2=0.3)
    assert abs(metrics.f_measure_max(pred, gt) - metrics.f_measure_max(pred, gt, beta2=1.0)) > 1e-6

    assert metrics.s_measure(pred, gt) == metrics.s_measure(pred, gt, alpha=0.5)
    assert abs(metrics.s_measure(pred, gt) - metrics.s_measure(pred, gt, alpha=0.3)) > 1e-6


# ---------------------------------------------------------------------------
# 7. the toy trainer really overfits its 5-sample set


def test_criterion_toy_overfit_within_budget(tmp_path):
    run = cli.toy_run_config()
    samples = make_dataset(5, run.model.input_size, 0)
    t0 = time.time()
    result = train_toy(run, samples, tmp_path)
    elapsed = time.time() - t0
    first = result.stats[0].mean_loss
    final = result.stats[-1].mean_loss
    assert final < 0.2 * first, f"loss ratio {final / first:.3f}"
    assert result.train_mae < 0.05, f"train MAE {result.train_mae:.4f}"
    assert elapsed < 900.0


# ---------------------------------------------------------------------------
# 8. ablation direction: full model fits no worse than A1 and B1 on average


def test_criterion_ablation_direction_over_five_seeds(tmp_path):
    toggles = {"full": {}, "A1": {"cim_mode": "concat_only"}, "B1": {"mfa_mode": "off"}}
    maes = {name: [] for name in toggles}
    for seed in range(5):
        samples = make_dataset(5, cli.toy_run_config().model.input_size, seed)
        for name, changes in toggles.items():
            run = cli.toy_run_config()
            run.seed = seed
            run.model = copy.deepcopy(run.model)
            run.model.seed = seed
            for key, value in changes.items():
                setattr(run.model, key, value)
            run.validate()
            out = tmp_path / f"s{seed}_{name}"
            maes[name].append(train_toy(run, samples, out).train_mae)
    means = {name: sum(vals) / len(vals) for name, vals in maes.items()}
    for name, vals in maes.items():
        print(f"{name:4s} mean {means[name]:.5f}  per-seed " +
              " ".join(f"{v:.4f}" for v in vals))
    for seed in range(5):
        for other in ("A1", "B1"):
            if maes["full"][seed] > maes[other][seed]:
                print(f"seed {seed}: full {maes['full'][seed]:.4f} > "
                      f"{other} {maes[other][seed]:.4f} (single-seed reversal, logged)")
    detail = " ".join(f"{n}={m:.5f}" for n, m in means.items())
    assert means["full"] <= means["A1"], f"mean ordering reversed vs A1: {detail}"
    assert means["full"] <= means["B1"], f"mean ordering reversed vs B1: {detail}"


# ---------------------------------------------------------------------------
# 9. object-scale bins: thresholds 0.1/0.4, boundaries fall to medium


def test_criterion_scale_bin_thresholds():
    def mask_with_ratio(num, den=400):
        m = np.zeros(400)
        m[:num] = 1.0
        return m.reshape(20, 20)

    for count, want_ratio, want_bin in [(20, 0.05, "small"), (100, 0.25, "medium"),
                                        (200, 0.5, "large"), (40, 0.1, "medium"),
                                        (160, 0.4, "medium")]:
        ratio, bin_ = object_scale(mask_with_ratio(count))
        assert ratio == want_ratio
        assert bin_ == want_bin


# ---------------------------------------------------------------------------
# 10. byte-identical determinism for every subcommand, single-threaded


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_single_thread_determinism_all_subcommands(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "model": {"input_size": 64}, "epochs": 2, "batch_size": 2,
        "optimizer": {"lr": 0.002}, "seed": 0,
    }))
    cfg = str(cfg_path)

    pred_dir, gt_dir = tmp_path / "pred", tmp_path / "gt"
    pred_dir.mkdir(), gt_dir.mkdir()
    rng = np.random.default_rng(0)
    for s in make_dataset(3, 64, 0):
        mapio.save_map(s.gt[0], gt_dir / f"{s.name}.png")
        noisy = np.clip(s.gt[0] * 0.7 + rng.random((64, 64)) * 0.3, 0.0, 1.0)
        mapio.save_map(noisy, pred_dir / f"{s.name}.png")
    rgb8 = rng.integers(0, 256, size=(48, 56, 3)).astype(np.uint8)
    Image.fromarray(rgb8, mode="RGB").save(tmp_path / "scene.png")
    mapio.save_map(rng.random((48, 56)), tmp_path / "scene_d.png")

    train_a = str(tmp_path / "train_a")
    assert cli.main(["train-toy", "--config", cfg, "--samples", "2", "--out", train_a]) == 0
    weights = str(Path(train_a) / "weights.salf")

    invocations = {
        "train-toy": lambda out: ["train-toy", "--config", cfg, "--samples", "2", "--out", out],
        "forward": lambda out: ["forward", "--config", cfg, "--weights", weights,
                                "--rgb", str(tmp_path / "scene.png"),
                                "--depth", str(tmp_path / "scene_d.png"), "--out", out],
        "eval": lambda out: ["eval", "--pred-dir", str(pred_dir), "--gt-dir", str(gt_dir),
                             "--emit", "both", "--out", out],
        "attr-eval": lambda out: ["attr-eval", "--pred-dir", str(pred_dir),
                                  "--gt-dir", str(gt_dir), "--attr", "count",
                                  "--emit", "both", "--out", out],
        "gradcheck": lambda out: ["gradcheck", "--config", cfg, "--samples", "6", "--out", out],
        "ablate": lambda out: ["ablate", "--config", cfg, "--variants", "full,B1",
                               "--samples", "2", "--out", out],
    }
    for name, build in invocations.items():
        runs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{name}_{tag}"
            assert cli.main(build(str(out))) == 0, name
            runs.append(tree_bytes(out))
        assert runs[0].keys() == runs[1].keys(), name
        for rel in runs[0]:
            assert runs[0][rel] == runs[1][rel], f"{name}: {rel} differs between runs"
