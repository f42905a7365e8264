"""Acceptance suite: one test per criterion, each at its stated tolerance.

The trained-model criteria (4, 5, 9, 11) share per-seed checkpoints built
by tests/train_cache.py; a cold cache trains five seeds (figure on
15-20 minutes per seed on one CPU core). Everything else runs from
scratch in seconds to a couple of minutes.
"""

import sys
import time

import numpy as np
import pytest

from duodiff import tensor as T
from duodiff.adadiff import (AdaDiffModel, early_exit_forward,
                             simulate_batch_early_exit)
from duodiff.bench import (FeatureExtractor, backbone_model_fn,
                           exit_trend_profile, fid_proxy, frechet_distance,
                           per_step_mse_profile)
from duodiff.checkpoint import load_model, save_model
from duodiff.diffusion import (SamplerSpec, analytic_gaussian_denoiser,
                               ddim_sigma, ddim_timesteps, ddpm_sigma,
                               ddpm_step, make_schedule)
from duodiff.duo import DuoDiffSampler, sample
from duodiff.tensor import Tape, Tensor, parameter
from duodiff.uvit import DenoiserConfig, UVitModel

from oracles import (central_diff_grad, ref_gelu, ref_layer_norm, ref_sigmoid,
                     ref_softmax, rel_err)
from train_cache import (ACCEPT_SEEDS, acceptance_dataset,
                         acceptance_schedule, calibrate_theta,
                         trained_adadiff, trained_backbone)


def _progress(msg):
    print(f"[acceptance] {msg}", file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# criterion 1: gradient fidelity


def _check_all_layer_grads(seed: int) -> float:
    """Max relative error of autodiff vs float64 central differences over
    every layer type used by the denoiser. Returns the worst error."""
    rng = np.random.default_rng(seed)
    worst = 0.0

    def check(build, ref, inputs):
        nonlocal worst
        params = {f"x{i}": parameter(v) for i, v in enumerate(inputs)}
        with Tape() as tape:
            out = build([params[f"x{i}"] for i in range(len(inputs))])
            w = rng.standard_normal(out.shape).astype(np.float32)
            loss = T.scale(T.mean(T.mul(out, Tensor(w))), out.size)
        grads = tape.backward(loss, params)
        for i, x in enumerate(inputs):
            fd = central_diff_grad(lambda v: ref(i, v, w),
                                   x.astype(np.float64))
            worst = max(worst, rel_err(grads[f"x{i}"], fd))

    r = lambda *s: rng.standard_normal(s).astype(np.float32)

    # matmul
    a, b = r(4, 6), r(6, 3)
    def mm_ref(i, v, w):
        args = [a.astype(np.float64), b.astype(np.float64)]
        args[i] = v
        return float((args[0] @ args[1] * w).sum())
    check(lambda xs: T.matmul(xs[0], xs[1]), mm_ref, [a, b])

    # batched matmul (attention shape)
    a4, b4 = r(2, 2, 5, 3), r(2, 2, 3, 5)
    def bmm_ref(i, v, w):
        args = [a4.astype(np.float64), b4.astype(np.float64)]
        args[i] = v
        return float((args[0] @ args[1] * w).sum())
    check(lambda xs: T.matmul(xs[0], xs[1]), bmm_ref, [a4, b4])

    # add with bias broadcast
    x, bias = r(4, 6), r(6)
    def add_ref(i, v, w):
        args = [x.astype(np.float64), bias.astype(np.float64)]
        args[i] = v
        return float(((args[0] + args[1]) * w).sum())
    check(lambda xs: T.add(xs[0], xs[1]), add_ref, [x, bias])

    # mul with broadcast
    def mul_ref(i, v, w):
        args = [x.astype(np.float64), bias.astype(np.float64)]
        args[i] = v
        return float((args[0] * args[1] * w).sum())
    check(lambda xs: T.mul(xs[0], xs[1]), mul_ref, [x, bias])

    # scale + transpose + reshape + mean
    def strm_ref(i, v, w):
        y = (0.7 * v).T.reshape(3, 8).mean(axis=1)
        return float((y * w).sum())
    check(lambda xs: T.mean(T.reshape(T.transpose(T.scale(xs[0], 0.7),
                                                  (1, 0)), (3, 8)), axis=1),
          strm_ref, [r(4, 6)])

    # concat + split (narrow)
    c1, c2 = r(3, 4), r(3, 2)
    def cs_ref(i, v, w):
        args = [c1.astype(np.float64), c2.astype(np.float64)]
        args[i] = v
        y = np.concatenate(args, axis=1)
        out = np.concatenate([y[:, :2] ** 2, y[:, 2:]], axis=1)
        return float((out * w).sum())
    def cs_build(xs):
        y = T.concat([xs[0], xs[1]], axis=1)
        lo, hi = T.split(y, [2, 4], axis=1)
        return T.concat([T.mul(lo, lo), hi], axis=1)
    check(cs_build, cs_ref, [c1, c2])

    # layer_norm
    ln_x, ln_g, ln_b = r(5, 8), r(8), r(8)
    def ln_ref(i, v, w):
        args = [ln_x.astype(np.float64), ln_g.astype(np.float64),
                ln_b.astype(np.float64)]
        args[i] = v
        return float((ref_layer_norm(*args) * w).sum())
    check(lambda xs: T.layer_norm(xs[0], xs[1], xs[2]), ln_ref,
          [ln_x, ln_g, ln_b])

    # softmax
    check(lambda xs: T.softmax(xs[0]),
          lambda i, v, w: float((ref_softmax(v) * w).sum()), [r(5, 7)])

    # gelu
    check(lambda xs: T.gelu(xs[0]),
          lambda i, v, w: float((ref_gelu(v) * w).sum()), [r(6, 5)])

    # sigmoid
    check(lambda xs: T.sigmoid(xs[0]),
          lambda i, v, w: float((ref_sigmoid(v) * w).sum()), [r(6, 5)])

    # embedding
    table = r(5, 4)
    ids = rng.integers(0, 5, 6)
    check(lambda xs: T.embedding(xs[0], ids),
          lambda i, v, w: float((v[ids] * w).sum()), [table])

    # 2-layer MLP end to end
    mx = r(4, 5)
    w1, b1, w2, b2 = r(5, 7), r(7), r(7, 3), r(3)
    def mlp_ref(i, v, w):
        args = [w1.astype(np.float64), b1.astype(np.float64),
                w2.astype(np.float64), b2.astype(np.float64)]
        args[i] = v
        h = ref_gelu(mx.astype(np.float64) @ args[0] + args[1])
        return float(((h @ args[2] + args[3]) * w).sum())
    check(lambda xs: T.add(T.matmul(T.gelu(T.add(T.matmul(Tensor(mx), xs[0]),
                                                 xs[1])), xs[2]), xs[3]),
          mlp_ref, [w1, b1, w2, b2])

    return worst


@pytest.mark.criterion(1, "gradient fidelity")
def test_c1_gradient_fidelity():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        worst = max(worst, _check_all_layer_grads(seed))
    elapsed = time.perf_counter() - t0
    _progress(f"c1: worst rel err {worst:.2e} over 10 seeds in {elapsed:.1f}s")
    assert worst < 1e-3
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# criterion 2: sampler oracle


@pytest.mark.criterion(2, "sampler oracle moments")
def test_c2_sampler_oracle():
    t0 = time.perf_counter()
    T_steps, dim, n = 200, 4, 10_000
    # beta range scaled by 1000/T so the chain is fully noised at t = T-1
    sched = make_schedule(T_steps, 5e-4, 0.1)
    mu0 = np.array([0.5, -1.0, 2.0, 0.0], dtype=np.float32)
    sigma0 = 1.0
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, dim)).astype(np.float32)
    for t in range(T_steps - 1, -1, -1):
        eps_hat = analytic_gaussian_denoiser(x, t, mu0, sigma0, sched)
        z = rng.standard_normal((n, dim)).astype(np.float32) if t else None
        x = ddpm_step(x, eps_hat, t, sched, z)
    mean_err = float(np.abs(x.mean(axis=0) - mu0).max())
    var_err = float(np.abs(x.var(axis=0) - sigma0 ** 2).max()) / sigma0 ** 2
    elapsed = time.perf_counter() - t0
    _progress(f"c2: mean err {mean_err:.4f} (<=0.05), var rel err "
              f"{var_err:.4f} (<=0.10), {elapsed:.0f}s")
    assert mean_err < 0.05
    assert var_err < 0.10
    assert elapsed < 300.0


# ---------------------------------------------------------------------------
# criterion 3: DDIM/DDPM consistency


@pytest.mark.criterion(3, "ddim/ddpm consistency")
def test_c3_ddim_ddpm_consistency():
    sched = acceptance_schedule()
    worst = max(abs(ddim_sigma(t, t - 1, 1.0, sched) - ddpm_sigma(t, sched))
                for t in range(1, sched.T))
    assert worst < 1e-6
    # eta = 0: bitwise-deterministic samples given x_T
    cfg = DenoiserConfig(num_layers=3)
    model = UVitModel(cfg, seed=0)
    spec = SamplerSpec(kind="ddim", eta=0.0, n_steps=20, t_s=0, seed=11)
    mk = lambda: DuoDiffSampler(full=model, shallow=None, spec=spec,
                                sched=sched)
    a = sample(mk(), 4, batch_size=4).images
    b = sample(mk(), 4, batch_size=4).images
    np.testing.assert_array_equal(a, b)
    _progress(f"c3: max |sigma_ddim - sigma_ddpm| = {worst:.2e}; eta=0 bitwise ok")


# ---------------------------------------------------------------------------
# criterion 4: difficulty gradient (trained backbones)


@pytest.mark.criterion(4, "difficulty gradient over t")
def test_c4_difficulty_gradient():
    sched = acceptance_schedule()
    ds = acceptance_dataset()
    wins = 0
    for seed in ACCEPT_SEEDS:
        model = trained_backbone(seed, "full")
        prof = per_step_mse_profile(backbone_model_fn(model), ds, sched,
                                    n=4000, buckets=10, seed=seed)
        top, bottom = prof.mean_mse[-1], prof.mean_mse[0]
        ok = top < bottom
        wins += ok
        _progress(f"c4 seed {seed}: top decile {top:.2f} vs bottom "
                  f"{bottom:.2f} -> {'ok' if ok else 'FAIL'}")
    assert wins >= 4, f"difficulty gradient held in only {wins}/5 seeds"


# ---------------------------------------------------------------------------
# criterion 5: phase transition (trained AdaDiff)


@pytest.mark.criterion(5, "exit-depth phase transition")
def test_c5_phase_transition():
    sched = acceptance_schedule()
    T_steps = sched.T
    wins = 0
    for seed in ACCEPT_SEEDS:
        model = trained_adadiff(seed)
        theta = calibrate_theta(model, sched, seed=seed)
        trend, _ = exit_trend_profile(model, theta, n=64, sched=sched,
                                      seed=seed)
        first = trend.mean_exit[int(0.9 * T_steps):].mean()
        last = trend.mean_exit[:int(0.1 * T_steps)].mean()
        shallow_std = trend.std_exit[int(0.9 * T_steps):].max()
        ok = first < last and shallow_std <= 1.5
        wins += ok
        _progress(f"c5 seed {seed}: theta={theta:.3f}, first 10% exit "
                  f"{first:.2f} vs last 10% {last:.2f}, shallow std "
                  f"{shallow_std:.2f} -> {'ok' if ok else 'FAIL'}")
    assert wins >= 4, f"phase transition held in only {wins}/5 seeds"


# ---------------------------------------------------------------------------
# criterion 6: exit-simulation equivalence


@pytest.mark.criterion(6, "batch exit simulation equivalence")
def test_c6_simulation_equivalence():
    model = AdaDiffModel(UVitModel(DenoiserConfig(), seed=3), seed=3)
    sched = acceptance_schedule()
    rng = np.random.default_rng(6)
    cfg = model.backbone.config
    for batch_idx in range(100):
        b = int(rng.integers(2, 6))
        x = rng.standard_normal((b, cfg.in_channels, cfg.image_size,
                                 cfg.image_size)).astype(np.float32)
        t = int(rng.integers(0, sched.T))
        theta = float(rng.uniform(0.05, 0.95))
        preds, exits, _ = simulate_batch_early_exit(model, x, t, theta)
        for i in range(b):
            p, e = early_exit_forward(model, x[i:i + 1], t, theta)
            assert e == exits[i], (batch_idx, i, e, exits[i])
            assert np.abs(p[0] - preds[i]).max() <= 1e-6
    _progress("c6: 100 random batches matched per-sample exits exactly")


# ---------------------------------------------------------------------------
# criterion 7: exit monotonicity


@pytest.mark.criterion(7, "exit monotone in theta")
def test_c7_exit_monotonicity():
    model = AdaDiffModel(UVitModel(DenoiserConfig(), seed=7), seed=7)
    sched = acceptance_schedule()
    cfg = model.backbone.config
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(50):  # 50 groups x 20 inputs = 1000 (input, t) pairs
        x = rng.standard_normal((20, cfg.in_channels, cfg.image_size,
                                 cfg.image_size)).astype(np.float32)
        t = int(rng.integers(0, sched.T))
        th1, th2 = sorted(rng.uniform(0.0, 1.0, 2))
        _, e1, _ = simulate_batch_early_exit(model, x, t, th1)
        _, e2, _ = simulate_batch_early_exit(model, x, t, th2)
        assert (e1 >= e2).all(), f"monotonicity violated at t={t}"
        checked += len(x)
    assert checked == 1000
    # theta < 0 reproduces the plain forward bitwise
    x = rng.standard_normal((8, cfg.in_channels, cfg.image_size,
                             cfg.image_size)).astype(np.float32)
    preds, exits, _ = simulate_batch_early_exit(model, x, 123, -0.5)
    assert (exits == cfg.num_layers).all()
    np.testing.assert_array_equal(preds, model.backbone.predict(x, 123))
    _progress("c7: monotone on 1000 pairs; theta<0 bitwise-plain")


# ---------------------------------------------------------------------------
# criterion 8: DuoDiff latency model


def _chain_seconds(sampler, n, runs=3):
    times = []
    for _ in range(runs):
        res = sample(sampler, n, batch_size=n)
        times.append(res.total_seconds)
    return float(np.median(times))


@pytest.mark.criterion(8, "duodiff latency model")
def test_c8_latency_model():
    sched = acceptance_schedule()
    T_steps = sched.T
    full = UVitModel(DenoiserConfig(), seed=0)
    shallow = UVitModel(DenoiserConfig(num_layers=3), seed=1)
    n_full, n_sh = full.config.num_layers, shallow.config.num_layers
    batch = 4

    def mk(t_s):
        return DuoDiffSampler(full=full, shallow=shallow if t_s else None,
                              spec=SamplerSpec(t_s=t_s, seed=0), sched=sched)

    t_full = _chain_seconds(mk(0), batch)
    t_shallow = _chain_seconds(
        DuoDiffSampler(full=shallow, shallow=None,
                       spec=SamplerSpec(t_s=0, seed=0), sched=sched), batch)
    # per-layer cost and fixed per-step overhead from the two pure runs
    per_layer = (t_full - t_shallow) / (T_steps * (n_full - n_sh))
    overhead = t_full / T_steps - n_full * per_layer
    _progress(f"c8: full {t_full:.2f}s shallow {t_shallow:.2f}s "
              f"(per-layer {per_layer * 1e3:.2f}ms, overhead "
              f"{overhead * 1e3:.2f}ms/step)")
    measured = {}
    for frac in (0.3, 0.4, 0.5):
        t_s = int(frac * T_steps)
        t_duo = _chain_seconds(mk(t_s), batch)
        predicted = (t_s * n_sh + (T_steps - t_s) * n_full) / (T_steps * n_full)
        ratio = ((t_duo - T_steps * overhead)
                 / (t_full - T_steps * overhead))
        measured[t_s] = t_duo
        _progress(f"c8 t_s={t_s}: measured ratio {ratio:.3f} vs predicted "
                  f"{predicted:.3f}")
        assert abs(ratio / predicted - 1.0) <= 0.10, (
            f"t_s={t_s}: ratio {ratio:.3f} vs predicted {predicted:.3f}")
    times = [measured[int(f * T_steps)] for f in (0.3, 0.4, 0.5)]
    assert times[0] > times[1] > times[2], f"not monotone: {times}"


# ---------------------------------------------------------------------------
# criterion 9: quality ordering (trained backbones)


@pytest.mark.criterion(9, "quality ordering over t_s")
def test_c9_quality_ordering():
    sched = acceptance_schedule()
    ds = acceptance_dataset()
    extractor = FeatureExtractor((3, 16, 16), seed=0)
    reference = ds.images[:1024]
    T_steps = sched.T
    ordered_wins = 0
    for seed in ACCEPT_SEEDS:
        full = trained_backbone(seed, "full")
        shallow = trained_backbone(seed, "shallow")
        fids = {}
        for frac in (0.0, 0.3, 0.7):
            t_s = int(frac * T_steps)
            spec = SamplerSpec(kind="ddim", eta=0.0, n_steps=50, t_s=t_s,
                               seed=seed)
            sampler = DuoDiffSampler(full=full,
                                     shallow=shallow if t_s else None,
                                     spec=spec, sched=sched)
            res = sample(sampler, 512, batch_size=64)
            fids[frac] = fid_proxy(res.images, reference, extractor)
        ordered = fids[0.0] <= fids[0.3] <= fids[0.7]
        ordered_wins += ordered
        _progress(f"c9 seed {seed}: fid(0)={fids[0.0]:.3f} "
                  f"fid(.3T)={fids[0.3]:.3f} fid(.7T)={fids[0.7]:.3f} "
                  f"-> {'ok' if ordered else 'OUT OF ORDER'}")
        assert fids[0.3] <= 2.0 * fids[0.0], (
            f"seed {seed}: fid at t_s=0.3T more than 2x baseline")
    assert ordered_wins >= 4, f"ordering held in only {ordered_wins}/5 seeds"


# ---------------------------------------------------------------------------
# criterion 10: Frechet correctness


@pytest.mark.criterion(10, "frechet distance correctness")
def test_c10_frechet():
    rng = np.random.default_rng(10)
    a = rng.standard_normal((500, 16))
    assert frechet_distance(a, a) <= 1e-6
    d, n = 16, 10_000
    mu = np.linspace(-1.0, 1.0, d)
    x = rng.standard_normal((n, d))
    y = rng.standard_normal((n, d)) + mu
    fd = frechet_distance(x, y)
    expect = float(mu @ mu)
    _progress(f"c10: fd={fd:.4f} vs ||mu||^2={expect:.4f}")
    assert abs(fd - expect) <= 0.05 * expect


# ---------------------------------------------------------------------------
# criterion 11: persistence


@pytest.mark.criterion(11, "checkpoint persistence")
def test_c11_persistence(tmp_path):
    model = trained_backbone(0, "full")
    path = tmp_path / "full.ckpt"
    save_model(path, model, meta={"seed": 0})
    loaded, _, _ = load_model(path)
    for k, v in model.params.items():
        np.testing.assert_array_equal(loaded.params[k].data, v.data,
                                      err_msg=k)
    # head/UEM training left the backbone bitwise unchanged
    ada = trained_adadiff(0)
    for k, v in model.params.items():
        np.testing.assert_array_equal(ada.backbone.params[k].data, v.data,
                                      err_msg=f"backbone.{k}")
    _progress("c11: round trip bitwise; frozen backbone bitwise unchanged")


# ---------------------------------------------------------------------------
# criterion 12: DDIM + DuoDiff compatibility


@pytest.mark.criterion(12, "ddim + duodiff compatibility")
def test_c12_ddim_duodiff():
    sched = acceptance_schedule()
    T_steps = sched.T
    full = UVitModel(DenoiserConfig(), seed=0)
    shallow = UVitModel(DenoiserConfig(num_layers=3), seed=1)
    t_s = int(0.15 * T_steps)

    def mk(ts_val):
        spec = SamplerSpec(kind="ddim", eta=0.0, n_steps=50, t_s=ts_val,
                           seed=2)
        return DuoDiffSampler(full=full, shallow=shallow if ts_val else None,
                              spec=spec, sched=sched)

    res = sample(mk(t_s), 4, batch_size=4)
    assert res.images.shape == (4, 3, 16, 16)
    ts = ddim_timesteps(T_steps, 50)
    expect = {int(t): ("shallow" if t >= T_steps - t_s else "full")
              for t in ts}
    assert dict(res.step_backbones) == expect
    dur_duo = float(np.median([sample(mk(t_s), 4, batch_size=4).total_seconds
                               for _ in range(5)]))
    dur_full = float(np.median([sample(mk(0), 4, batch_size=4).total_seconds
                                for _ in range(5)]))
    _progress(f"c12: duo {dur_duo:.3f}s vs full {dur_full:.3f}s over 50 DDIM steps")
    assert dur_duo < dur_full
