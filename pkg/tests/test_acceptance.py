"""Acceptance criteria, one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines; `-v` alone shows the same outcome per test name.
"""

import json
import os
import time

import numpy as np
import pytest

from catanet import attention as at
from catanet import autograd as ag
from catanet import data, network, ops, training
from catanet import token_agg as ta
from catanet.checkpoint import checkpoint_load, checkpoint_save
from catanet.cli import main
from catanet.network import CATANet, ModelConfig

from conftest import tiny_config
from test_attention import dense_mha_oracle, iasa_oracle, irca_oracle, lrsa_oracle, make_weights


def ok(num, text):
    print(f"PASS criterion {num:2d}: {text}")


def test_01_grouping_oracle_equivalence():
    """assign_groups == exhaustive nearest-center scan, 1000 instances, < 5 s."""
    rng = np.random.default_rng(7)
    t0 = time.time()
    for _ in range(1000):
        n = int(rng.integers(1, 257))
        m = int(rng.integers(1, 9))
        d = int(rng.integers(2, 17))
        x = rng.standard_normal((n, d)).astype(np.float32)
        c = rng.standard_normal((m, d)).astype(np.float32)
        labels = ta.assign_groups(ta.cosine_similarity_matrix(x, c))
        # independent similarity at float64 + exhaustive per-row scan
        x64, c64 = x.astype(np.float64), c.astype(np.float64)
        sims = (x64 @ c64.T) / (
            np.linalg.norm(x64, axis=1)[:, None] * np.linalg.norm(c64, axis=1)[None, :]
            + 1e-8
        )
        for t in range(n):
            best = 0
            for j in range(1, m):
                if sims[t, j] > sims[t, best]:
                    best = j
            assert labels[t] == best
    elapsed = time.time() - t0
    assert elapsed < 5.0, f"took {elapsed:.1f}s"
    ok(1, f"grouping matches exhaustive oracle on 1000 instances in {elapsed:.2f}s")


def test_02_gather_pushback_identity():
    """Bit-exact round trip for 1000 random label vectors and subgroup sizes."""
    rng = np.random.default_rng(11)
    pad_cases = 0
    for _ in range(1000):
        n = int(rng.integers(1, 120))
        gs = int(rng.integers(1, 17))
        d = int(rng.integers(1, 9))
        labels = rng.integers(0, 7, n)
        x = rng.standard_normal((n, d)).astype(np.float32)
        g = ta.build_grouping(labels, gs)
        pad_cases += int(g.pad_mask.any())
        assert np.array_equal(ta.pushback(ta.gather_subgroups(x, g), g), x)
    assert pad_cases > 100  # the sweep genuinely exercises padding
    ok(2, f"gather/pushback bit-exact on 1000 cases ({pad_cases} with pads)")


def test_03_iasa_degenerates_to_dense():
    """One subgroup holding all tokens == plain dense attention, < 1e-5."""
    rng = np.random.default_rng(23)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 17))
        d, heads = 8, 2
        x = rng.standard_normal((n, d)).astype(np.float32)
        w, mats = make_weights(rng, d, heads)
        g = ta.build_grouping(np.zeros(n, dtype=np.int64), n)
        assert g.n_subgroups == 1 and not g.pad_mask.any()
        out = at.iasa(x, g, w).value
        dense = dense_mha_oracle(x @ mats[0], x @ mats[1], x @ mats[2], heads, mats[3])
        worst = max(worst, float(np.abs(out - dense).max()))
    assert worst < 1e-5
    ok(3, f"single-subgroup IASA == dense attention (max dev {worst:.2e})")


def test_04_attention_blocks_match_dense_oracles():
    """IASA / IRCA / LRSA vs slow float64 references within 1e-5 (N <= 64)."""
    rng = np.random.default_rng(31)
    worst = {"iasa": 0.0, "irca": 0.0, "lrsa": 0.0}
    for _ in range(25):
        n = int(rng.integers(2, 65))
        gs = int(rng.integers(2, 17))
        d, heads = 8, 2
        x = rng.standard_normal((n, d)).astype(np.float32)
        labels = rng.integers(0, 5, n)
        w, mats = make_weights(rng, d, heads)
        g = ta.build_grouping(labels, gs)
        dev = np.abs(at.iasa(x, g, w).value - iasa_oracle(x, labels, gs, mats, heads))
        worst["iasa"] = max(worst["iasa"], float(dev.max()))

        m = int(rng.integers(1, 9))
        c = rng.standard_normal((m, d)).astype(np.float32)
        dev = np.abs(at.irca(x, g, c, w).value - irca_oracle(x, c, mats, heads))
        worst["irca"] = max(worst["irca"], float(dev.max()))
    for _ in range(10):
        h = int(rng.integers(3, 9))
        wdt = int(rng.integers(3, 9))
        d, heads = 8, 2
        xmap = rng.standard_normal((d, h, wdt)).astype(np.float32)
        w, mats = make_weights(rng, d, heads)
        patch = int(rng.integers(2, 5))
        overlap = int(rng.integers(0, patch))
        dev = np.abs(
            at.lrsa(xmap, w, patch, overlap).value
            - lrsa_oracle(xmap, mats, heads, patch, overlap)
        )
        worst["lrsa"] = max(worst["lrsa"], float(dev.max()))
    assert all(v < 1e-5 for v in worst.values()), worst
    ok(4, "IASA/IRCA/LRSA match slow dense references "
          + " ".join(f"{k}={v:.1e}" for k, v in worst.items()))


def test_05_gradient_checks_all_blocks():
    """Central finite differences < 5e-3 relative; centers get no gradient."""
    model = CATANet(tiny_config(), seed=7)
    cfg = model.config
    rng = np.random.default_rng(0)
    bank = model.banks[0]
    bank.centers = rng.standard_normal(bank.centers.shape).astype(np.float32)
    bank.initialized = True

    errs = {}
    q = rng.standard_normal((5, 8)).astype(np.float32)
    kv = rng.standard_normal((6, 8)).astype(np.float32)
    errs["mha"] = ag.grad_check(
        lambda t: ag.mean(at.multi_head_attention(t, ag.constant(kv), ag.constant(kv), 2)), q
    )
    x = rng.standard_normal((12, 16)).astype(np.float32)
    g = ta.build_grouping(rng.integers(0, 3, 12), 4)
    errs["iasa"] = ag.grad_check(lambda t: ag.mean(at.iasa(t, g, model.rgs[0].tab.iasa)), x)
    c = rng.standard_normal((4, 16)).astype(np.float32)
    errs["irca"] = ag.grad_check(lambda t: ag.mean(at.irca(t, g, c, model.rgs[0].tab.irca)), x)
    xm = rng.standard_normal((16, 6, 6)).astype(np.float32)
    errs["lrsa"] = ag.grad_check(
        lambda t: ag.mean(at.lrsa(t, model.rgs[0].lrsa.attn, 4, 1)), xm
    )
    errs["conv_ffn"] = ag.grad_check(lambda t: ag.mean(at.conv_ffn(t, model.rgs[0].tab.ffn)), xm)
    errs["tab"] = ag.grad_check(
        lambda t: ag.mean(at.tab_forward(t, model.rgs[0].tab, bank, 8, 2, False)), xm
    )
    errs["residual_group"] = ag.grad_check(
        lambda t: ag.mean(network.residual_group(t, model.rgs[0], bank, cfg, False)), xm
    )
    img = rng.random((3, 8, 8)).astype(np.float32)
    errs["full_forward"] = ag.grad_check(lambda t: ag.mean(network.forward(t, model, False)), img)
    assert all(e < 5e-3 for e in errs.values()), errs

    # token centers are a gradient barrier: backward must record nothing for them
    with ag.Tape() as tape:
        loss = ag.mean(at.tab_forward(ag.constant(xm), model.rgs[0].tab, bank, 8, 2, False))
        grads = ag.backward(loss, tape)
    assert not any(node.value is bank.centers for node in grads)
    assert not any(getattr(node, "op", "") == "barrier" for node in grads)
    ok(5, "gradient checks " + " ".join(f"{k}={v:.1e}" for k, v in errs.items())
          + "; centers receive no gradient")


@pytest.mark.parametrize("scale", [2, 3, 4])
def test_06_zero_deep_path_is_bicubic(scale):
    """Reconstruction weights zeroed: forward output == bicubic, exactly."""
    rng = np.random.default_rng(scale)
    model = CATANet(tiny_config(scale=scale), seed=scale)
    model.recon_w.value = np.zeros_like(model.recon_w.value)
    model.recon_b.value = np.zeros_like(model.recon_b.value)
    for _ in range(3):
        h = int(rng.integers(6, 20))
        w = int(rng.integers(6, 20))
        img = rng.random((3, h, w), dtype=np.float32)
        out = network.forward(img, model).value
        assert np.array_equal(out, ops.bicubic_resize(img, float(scale)))
    ok(6, f"zero deep path == bicubic upsample exactly (x{scale})")


def test_07_inference_determinism_and_center_immutability():
    rng = np.random.default_rng(17)
    model = CATANet(tiny_config(), seed=2)
    for bank in model.banks:
        bank.centers = rng.standard_normal(bank.centers.shape).astype(np.float32)
        bank.initialized = True
    img = rng.random((3, 9, 7), dtype=np.float32)
    before = [b.centers.copy() for b in model.banks]
    out1 = network.forward(img, model, training=False).value
    out2 = network.forward(img, model, training=False).value
    assert np.array_equal(out1, out2)
    assert all(np.array_equal(b.centers, old) for b, old in zip(model.banks, before))
    # the same holds for a fresh model that lazily derives centers per input
    fresh = CATANet(tiny_config(), seed=3)
    o1 = network.forward(img, fresh, training=False).value
    o2 = network.forward(img, fresh, training=False).value
    assert np.array_equal(o1, o2)
    assert not any(b.initialized for b in fresh.banks)
    ok(7, "inference bit-deterministic; center buffers untouched")


def test_08_ema_law():
    """One training step moves centers by exactly the decay-weighted blend,
    elementwise within (1 - lambda) * ||refined - old||_inf, lambda = 0.999."""
    rng = np.random.default_rng(29)
    model = CATANet(tiny_config(ema_decay=0.999), seed=4)
    bank = model.banks[0]
    bank.centers = rng.standard_normal(bank.centers.shape).astype(np.float32)
    bank.initialized = True
    old = bank.centers.copy()
    xm = rng.standard_normal((16, 8, 8)).astype(np.float32)
    at.tab_forward(xm, model.rgs[0].tab, bank, 8, 2, training=True)
    refined = bank.last_refined
    # exact update law (float64 blend rounded once into storage)
    expect = (0.999 * old.astype(np.float64) + 0.001 * refined.astype(np.float64))
    assert np.array_equal(bank.centers, expect.astype(np.float32))
    # elementwise displacement bound on the ideal update
    bound = 0.001 * np.abs(refined.astype(np.float64) - old).max()
    assert (np.abs(expect - old) <= bound + 1e-15).all()
    assert np.abs(bank.centers - old).max() > 0
    ok(8, f"EMA law holds (max step {np.abs(bank.centers - old).max():.2e} "
          f"<= bound {bound:.2e})")


def block_pattern_images(seed=0, n=4, size=16):
    """Tiny images made of random axis-aligned color rectangles."""
    rng = np.random.default_rng(seed)
    imgs = []
    for _ in range(n):
        img = np.zeros((3, size, size), dtype=np.float32)
        for _ in range(6):
            y0, x0 = rng.integers(0, size - 4, 2)
            h, w = rng.integers(3, 8, 2)
            col = rng.random(3).astype(np.float32)
            img[:, y0 : y0 + h, x0 : x0 + w] = col[:, None, None]
        imgs.append(img)
    return imgs


def test_09_training_sanity():
    """200 steps on 4 tiny images: loss halves and the model beats bicubic
    by >= 0.2 dB on its training crops. Single core, < 10 min."""
    t0 = time.time()
    cfg = tiny_config(subgroup_size=16)
    model = CATANet(cfg, seed=0)
    imgs = block_pattern_images(seed=0)
    trace = training.train_loop(model, imgs, steps=200, lr=2e-3, seed=0,
                                batch=2, patch=16)
    first = float(np.mean([l for _, l, _ in trace[:20]]))
    last = float(np.mean([l for _, l, _ in trace[-20:]]))
    assert last < 0.5 * first, (first, last)

    model_psnr, bicubic_psnr = [], []
    for img in imgs:  # patch == image size, so these are the training crops
        lr_img = data.degrade_bicubic(img, cfg.scale)
        sr = network.forward(lr_img, model).value
        bic = ops.bicubic_resize(lr_img, float(cfg.scale))
        model_psnr.append(data.psnr_y(img, sr, crop=cfg.scale))
        bicubic_psnr.append(data.psnr_y(img, bic, crop=cfg.scale))
    gain = float(np.mean(model_psnr) - np.mean(bicubic_psnr))
    elapsed = time.time() - t0
    assert gain >= 0.2, gain
    assert elapsed < 600, elapsed
    ok(9, f"training sanity: loss {first:.4f}->{last:.4f} "
          f"({last / first:.2f}x), +{gain:.2f} dB over bicubic, {elapsed:.0f}s")


def test_10_subgrouping_speed(tmp_path):
    """Fixed-size subgrouped schedule strictly faster than the sequential
    per-group loop on a skewed distribution; outputs equal within 1e-4."""
    flags = ["--size", "48", "48", "--dim", "32", "--heads", "4",
             "--subgroup-size", "16", "--n-centers", "8", "--skew", "0.8",
             "--reps", "30", "--warmup", "5", "--seed", "5"]
    reports = {}
    for mode in ("subgrouped", "naive-groups"):
        j = tmp_path / f"{mode}.json"
        assert main(["bench", *flags, "--mode", mode, "--json", str(j)]) == 0
        reports[mode] = json.loads(j.read_text())
    assert reports["subgrouped"]["cross_max_abs_diff"] < 1e-4
    fast = reports["subgrouped"]["mean_ms"]
    slow = reports["naive-groups"]["mean_ms"]
    assert fast < slow, (fast, slow)
    ok(10, f"subgrouped {fast:.2f} ms vs naive {slow:.2f} ms "
           f"(ratio {slow / fast:.2f}x, outputs equal within 1e-4)")


def test_11_metric_oracles():
    """PSNR/SSIM on Y match float64 direct-formula oracles within 1e-6."""
    from test_data_metrics import psnr_oracle, ssim_oracle

    rng = np.random.default_rng(41)
    worst_p, worst_s = 0.0, 0.0
    for _ in range(50):  # x2 crops = 100 instances per metric
        a = rng.random((3, 16, 17), dtype=np.float32)
        b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1).astype(np.float32)
        for crop in (0, 2):
            worst_p = max(worst_p, abs(data.psnr_y(a, b, crop) - psnr_oracle(a, b, crop)))
            worst_s = max(worst_s, abs(data.ssim_y(a, b, crop) - ssim_oracle(a, b, crop)))
    assert worst_p < 1e-6 and worst_s < 1e-6
    img = rng.random((3, 16, 16), dtype=np.float32)
    assert data.psnr_y(img, img, 2) == float("inf")
    assert data.ssim_y(img, img, 2) == pytest.approx(1.0, abs=1e-9)
    ok(11, f"metrics match float64 oracles (psnr dev {worst_p:.1e}, "
           f"ssim dev {worst_s:.1e}); identical -> inf / 1.0")


def test_12_group_vis_partition_law(tmp_path):
    from PIL import Image

    model = CATANet(tiny_config(n_centers=4), seed=6)
    ckpt = tmp_path / "m.ckpt"
    checkpoint_save(model, ckpt)
    rng = np.random.default_rng(3)
    png = tmp_path / "in.png"
    data.save_image(rng.random((3, 14, 18), dtype=np.float32), png)
    out = tmp_path / "masks"
    assert main(["group-vis", str(ckpt), str(png), str(out), "--rg", "0"]) == 0
    masks = []
    for name in sorted(os.listdir(out)):
        arr = np.asarray(Image.open(out / name))
        assert arr.shape == (14, 18)
        masks.append(arr == 255)
    coverage = np.sum(masks, axis=0)
    assert (coverage == 1).all()
    ok(12, f"{len(masks)} masks partition the 14x18 token grid exactly")


def test_13_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(53)
    model = CATANet(tiny_config(), seed=8)
    img = rng.random((3, 10, 10), dtype=np.float32)
    network.forward(img, model, training=True)  # initialize + move the centers
    before = network.forward(img, model, training=False).value
    p = tmp_path / "rt.ckpt"
    checkpoint_save(model, p)
    loaded = checkpoint_load(p)
    assert all(b.initialized for b in loaded.banks)
    after = network.forward(img, loaded, training=False).value
    assert np.array_equal(before, after)
    assert all(
        np.array_equal(a.centers, b.centers) for a, b in zip(loaded.banks, model.banks)
    )
    ok(13, "checkpoint save->load->forward bit-identical, centers included")
