"""Backbone selection, dual-backbone sampling, and training behavior."""

import numpy as np
import pytest

from duodiff.data import DatasetSpec, SyntheticDataset
from duodiff.diffusion import SamplerSpec, ddim_timesteps, make_schedule
from duodiff.duo import (DuoDiffSampler, TrainConfig, sample, select_backbone,
                         train_adadiff, train_backbone)
from duodiff.tensor import NumericsError
from duodiff.uvit import DenoiserConfig, UVitModel

FULL = DenoiserConfig(image_size=8, patch_size=4, embed_dim=32, num_layers=4,
                      num_heads=2)
SHALLOW = DenoiserConfig(image_size=8, patch_size=4, embed_dim=32,
                         num_layers=2, num_heads=2)


@pytest.fixture(scope="module")
def sched():
    return make_schedule(60, 5e-4, 0.1)


@pytest.fixture(scope="module")
def backbones():
    return UVitModel(FULL, seed=0), UVitModel(SHALLOW, seed=1)


# ---------------------------------------------------------------------------
# backbone selection


def test_select_backbone_extremes():
    assert all(select_backbone(t, 100, 0) == "full" for t in range(100))
    assert all(select_backbone(t, 100, 100) == "shallow" for t in range(100))


def test_select_backbone_boundary():
    # T=1000, t_s=300: shallow is active for the first 300 reverse steps
    assert select_backbone(800, 1000, 300) == "shallow"
    assert select_backbone(700, 1000, 300) == "shallow"
    assert select_backbone(699, 1000, 300) == "full"
    assert select_backbone(600, 1000, 300) == "full"


def test_select_backbone_single_transition():
    T, t_s = 50, 20
    kinds = [select_backbone(t, T, t_s) for t in range(T - 1, -1, -1)]
    flips = sum(1 for a, b in zip(kinds, kinds[1:]) if a != b)
    assert flips == 1
    assert kinds[0] == "shallow" and kinds[-1] == "full"


# ---------------------------------------------------------------------------
# sampler construction


def test_sampler_requires_shallow_when_switching(backbones, sched):
    full, _ = backbones
    with pytest.raises(ValueError):
        DuoDiffSampler(full=full, shallow=None,
                       spec=SamplerSpec(t_s=10), sched=sched)


def test_sampler_rejects_mismatched_configs(sched):
    full = UVitModel(FULL, seed=0)
    other = UVitModel(DenoiserConfig(image_size=16, patch_size=4, embed_dim=32,
                                     num_layers=2, num_heads=2), seed=0)
    with pytest.raises(ValueError):
        DuoDiffSampler(full=full, shallow=other, spec=SamplerSpec(t_s=5),
                       sched=sched)


def test_sampler_rejects_deep_shallow(backbones, sched):
    full, _ = backbones
    with pytest.raises(ValueError):
        DuoDiffSampler(full=full, shallow=UVitModel(FULL, seed=2),
                       spec=SamplerSpec(t_s=5), sched=sched)


# ---------------------------------------------------------------------------
# sampling


def test_ts_zero_bitwise_matches_full_only(backbones, sched):
    full, shallow = backbones
    a = sample(DuoDiffSampler(full=full, shallow=shallow,
                              spec=SamplerSpec(t_s=0, seed=5), sched=sched), 3)
    b = sample(DuoDiffSampler(full=full, shallow=None,
                              spec=SamplerSpec(t_s=0, seed=5), sched=sched), 3)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.shallow_seconds == 0.0


def test_sample_deterministic_given_seed(backbones, sched):
    full, shallow = backbones
    spec = SamplerSpec(t_s=20, seed=9)
    mk = lambda: DuoDiffSampler(full=full, shallow=shallow, spec=spec,
                                sched=sched)
    a = sample(mk(), 2)
    b = sample(mk(), 2)
    np.testing.assert_array_equal(a.images, b.images)


def test_sample_backbone_usage_matches_rule(backbones, sched):
    full, shallow = backbones
    t_s = 25
    res = sample(DuoDiffSampler(full=full, shallow=shallow,
                                spec=SamplerSpec(t_s=t_s, seed=1),
                                sched=sched), 1)
    for t, kind in res.step_backbones:
        assert kind == select_backbone(t, sched.T, t_s)
    assert len(res.step_backbones) == sched.T


def test_ddim_subsequence_shallow_steps(backbones, sched):
    """DDIM: the shallow model handles exactly the steps with t >= T - t_s."""
    full, shallow = backbones
    t_s = 18
    spec = SamplerSpec(kind="ddim", eta=0.0, n_steps=10, t_s=t_s, seed=2)
    res = sample(DuoDiffSampler(full=full, shallow=shallow, spec=spec,
                                sched=sched), 1)
    ts = ddim_timesteps(sched.T, 10)
    assert [t for t, _ in res.step_backbones] == list(ts)
    expect = {int(t): ("shallow" if t >= sched.T - t_s else "full")
              for t in ts}
    assert dict(res.step_backbones) == expect


def test_ddim_eta0_deterministic(backbones, sched):
    full, _ = backbones
    spec = SamplerSpec(kind="ddim", eta=0.0, n_steps=8, t_s=0, seed=3)
    mk = lambda: DuoDiffSampler(full=full, shallow=None, spec=spec, sched=sched)
    np.testing.assert_array_equal(sample(mk(), 2).images, sample(mk(), 2).images)


def test_conditional_sampling_requires_labels(sched):
    cfg = DenoiserConfig(image_size=8, patch_size=4, embed_dim=32,
                         num_layers=2, num_heads=2, num_classes=3)
    model = UVitModel(cfg, seed=0)
    sampler = DuoDiffSampler(full=model, shallow=None,
                             spec=SamplerSpec(t_s=0), sched=sched)
    with pytest.raises(ValueError):
        sample(sampler, 2)
    res = sample(sampler, 2, class_labels=np.array([0, 2]))
    assert res.images.shape == (2, 3, 8, 8)


def test_timing_record_fields(backbones, sched):
    full, shallow = backbones
    spec = SamplerSpec(t_s=10, seed=0)
    res = sample(DuoDiffSampler(full=full, shallow=shallow, spec=spec,
                                sched=sched), 2)
    rec = res.timing_record(spec, sched.T)
    assert set(rec) == {"t_s", "sampler", "n_steps", "shallow_seconds",
                        "full_seconds", "total_seconds", "n_samples"}
    assert rec["n_samples"] == 2 and rec["n_steps"] == sched.T
    assert rec["shallow_seconds"] > 0 and rec["full_seconds"] > 0


# ---------------------------------------------------------------------------
# training


@pytest.fixture(scope="module")
def tiny_ds():
    return SyntheticDataset(DatasetSpec(image_size=8, count=64, seed=0))


def test_train_smoke_loss_decreases(tiny_ds, sched):
    tc = TrainConfig(steps=150, batch_size=8, warmup_steps=10, seed=0,
                     log_every=10)
    _, _, log = train_backbone(SHALLOW, tiny_ds, tc, sched)
    losses = [v for _, v in log]
    early = np.mean(losses[:3])
    assert losses[-1] < early


def test_train_deterministic_across_runs(tiny_ds, sched):
    tc = TrainConfig(steps=25, batch_size=4, warmup_steps=5, seed=7)
    m1, _, _ = train_backbone(SHALLOW, tiny_ds, tc, sched)
    m2, _, _ = train_backbone(SHALLOW, tiny_ds, tc, sched)
    for k in m1.params:
        np.testing.assert_array_equal(m1.params[k].data, m2.params[k].data,
                                      err_msg=k)


def test_train_divergence_aborts(tiny_ds, sched):
    tc = TrainConfig(steps=400, batch_size=4, warmup_steps=0, seed=0,
                     lr=1e12, weight_decay=0.0)
    with np.errstate(all="ignore"), pytest.raises(NumericsError):
        train_backbone(SHALLOW, tiny_ds, tc, sched)


def test_train_adadiff_freezes_backbone(tiny_ds, sched):
    tc_b = TrainConfig(steps=20, batch_size=4, warmup_steps=5, seed=1)
    backbone, _, _ = train_backbone(SHALLOW, tiny_ds, tc_b, sched)
    before = {k: v.data.copy() for k, v in backbone.params.items()}
    tc_h = TrainConfig(steps=300, batch_size=8, warmup_steps=5, seed=2,
                       log_every=10, freeze_backbone=True)
    model, _, log = train_adadiff(backbone, tiny_ds, tc_h, sched)
    for k, v in backbone.params.items():
        np.testing.assert_array_equal(v.data, before[k], err_msg=k)
    # heads did move
    head_w = model.heads[0].params["w"].data
    assert np.any(head_w)
    # the trainable part of the joint loss (L_u + L_ual) decreased; the
    # simple term is constant in expectation with a frozen backbone
    head_terms = [u + ual for _, _, _, u, ual in log]
    assert np.mean(head_terms[-5:]) < np.mean(head_terms[:5])


def test_train_adadiff_unfrozen_updates_backbone(tiny_ds, sched):
    backbone = UVitModel(SHALLOW, seed=3)
    before = {k: v.data.copy() for k, v in backbone.params.items()}
    tc = TrainConfig(steps=10, batch_size=4, warmup_steps=0, seed=3,
                     freeze_backbone=False)
    train_adadiff(backbone, tiny_ds, tc, sched)
    changed = any(np.any(v.data != before[k])
                  for k, v in backbone.params.items())
    assert changed


def test_resume_continues_step_counter(tiny_ds, sched):
    tc = TrainConfig(steps=30, batch_size=4, warmup_steps=5, seed=11)
    direct, opt_d, _ = train_backbone(SHALLOW, tiny_ds, tc, sched)
    # train 15 steps, then resume to 30 with the same stream
    tc_half = TrainConfig(steps=15, batch_size=4, warmup_steps=5, seed=11)
    half, opt_h, _ = train_backbone(SHALLOW, tiny_ds, tc_half, sched)
    resumed, opt_r, _ = train_backbone(SHALLOW, tiny_ds, tc, sched,
                                       start_step=15, model=half, opt=opt_h)
    assert opt_r.step_count == 30 == opt_d.step_count
    for k in direct.params:
        np.testing.assert_array_equal(resumed.params[k].data,
                                      direct.params[k].data, err_msg=k)
