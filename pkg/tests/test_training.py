"""Adam, LR schedule, batch sampling, checkpoints, and resume behavior."""

import math
import re

import numpy as np
import pytest

import stsc.model as M
import stsc.training as TR
from stsc.formats import write_image
from stsc.layers import ParamStore
from stsc.tensor import Tensor


def _grads_for(store, arrs):
    class _G:
        def __init__(self, table):
            self.table = table

        def get(self, t):
            return self.table.get(id(t))

    return _G({id(store[n]): a for n, a in arrs.items()})


class TestAdam:
    def _single_param(self, value=1.0):
        s = ParamStore()
        s.add("w.weight", Tensor(np.array([value], dtype=np.float64)))
        return s

    def test_first_step_magnitude(self):
        # with a constant gradient the first step moves by ~lr regardless
        # of gradient scale (bias-corrected moments cancel)
        for g in (1e-3, 1.0, 1e3):
            s = self._single_param(0.0)
            cfg = TR.TrainConfig(lr0=0.01)
            TR.adam_step(s, _grads_for(s, {"w.weight": np.array([g])}),
                         TR.AdamState(), 0.01, cfg)
            expect = -0.01 * g / (abs(g) + 1e-8)
            assert s["w.weight"].data[0] == pytest.approx(expect, rel=1e-9)

    def test_matches_reference_recurrence(self):
        # reference: p -= (lr / (1-b1^t)) * m / (sqrt(v / (1-b2^t)) + eps)
        rng = np.random.default_rng(3)
        s = self._single_param(0.5)
        cfg = TR.TrainConfig()
        state = TR.AdamState()
        p_ref, m_ref, v_ref = 0.5, 0.0, 0.0
        for t in range(1, 8):
            g = float(rng.normal())
            TR.adam_step(s, _grads_for(s, {"w.weight": np.array([g])}),
                         state, 0.01, cfg)
            m_ref = 0.9 * m_ref + 0.1 * g
            v_ref = 0.999 * v_ref + 0.001 * g * g
            p_ref -= (0.01 / (1 - 0.9 ** t)) * m_ref / (
                math.sqrt(v_ref / (1 - 0.999 ** t)) + 1e-8)
            assert s["w.weight"].data[0] == pytest.approx(p_ref, rel=1e-12)

    def test_frozen_untouched(self):
        s = ParamStore()
        s.add("w.weight", Tensor(np.array([1.0], dtype=np.float64)))
        s.add("vgg.c.weight", Tensor(np.array([5.0], dtype=np.float64)), frozen=True)
        TR.adam_step(s, _grads_for(s, {"w.weight": np.array([1.0])}),
                     TR.AdamState(), 0.1, TR.TrainConfig())
        assert s["vgg.c.weight"].data[0] == 5.0

    def test_missing_gradient_is_hard_error(self):
        s = self._single_param()
        with pytest.raises(TR.GradientMissingError, match="w.weight"):
            TR.adam_step(s, _grads_for(s, {}), TR.AdamState(), 0.1,
                         TR.TrainConfig())

    def test_step_counter_advances(self):
        s = self._single_param()
        state = TR.AdamState()
        for _ in range(3):
            TR.adam_step(s, _grads_for(s, {"w.weight": np.array([1.0])}),
                         state, 0.1, TR.TrainConfig())
        assert state.t == 3


class TestSchedule:
    def test_staircase(self):
        cfg = TR.TrainConfig(lr0=1e-3, lr_decay=0.2, lr_period=8000)
        assert TR.lr_at(0, cfg) == 1e-3
        assert TR.lr_at(7999, cfg) == 1e-3
        assert TR.lr_at(8000, cfg) == pytest.approx(2e-4)
        assert TR.lr_at(16000, cfg) == pytest.approx(4e-5)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TR.TrainConfig(crop=20).validate()
        with pytest.raises(ValueError):
            TR.TrainConfig(batch=0).validate()
        with pytest.raises(ValueError):
            TR.TrainConfig(lr0=-1.0).validate()


class TestSampling:
    def _pairs(self, n=3, hw=40):
        rng = np.random.default_rng(0)
        out = []
        for i in range(n):
            x = rng.uniform(0, 1, (3, hw, hw)).astype(np.float32)
            out.append((f"{i}.ppm", x, 1.0 - x))
        return out

    def test_same_window_from_both_images(self):
        pairs = self._pairs()
        x, gt, _ = TR.sample_batch(pairs, np.random.default_rng(5), 16, 4)
        np.testing.assert_allclose(gt.data, 1.0 - x.data, atol=1e-7)

    def test_shapes(self):
        x, gt, idxs = TR.sample_batch(self._pairs(), np.random.default_rng(1), 32, 2)
        assert x.shape == (2, 3, 32, 32) and gt.shape == (2, 3, 32, 32)
        assert len(idxs) == 2

    def test_deterministic_given_state(self):
        pairs = self._pairs()
        a = TR.sample_batch(pairs, np.random.default_rng(9), 16, 4)
        b = TR.sample_batch(pairs, np.random.default_rng(9), 16, 4)
        assert np.array_equal(a[0].data, b[0].data) and a[2] == b[2]

    def test_crops_stay_in_bounds(self):
        pairs = self._pairs(hw=16)
        x, _, _ = TR.sample_batch(pairs, np.random.default_rng(2), 16, 8)
        assert x.shape == (8, 3, 16, 16)


class TestRngState:
    def test_roundtrip_resumes_stream(self):
        rng = np.random.default_rng(123)
        rng.integers(1000, size=17)  # advance
        arr = TR._rng_state_to_array(rng)
        future = rng.integers(1000, size=50)
        resumed = TR._rng_state_from_array(arr)
        assert np.array_equal(resumed.integers(1000, size=50), future)

    def test_limbs_fit_float64_exactly(self):
        rng = np.random.default_rng(7)
        arr = TR._rng_state_to_array(rng)
        assert all(v == int(v) and 0 <= v < 2 ** 32 for v in arr)


def make_dataset(root, n=3, hw=48, seed=0):
    rng = np.random.default_rng(seed)
    (root / "input").mkdir(parents=True)
    (root / "gt").mkdir()
    for i in range(n):
        gt = rng.uniform(0.1, 0.9, (1, 3, hw, hw)).astype(np.float32)
        x = np.clip(gt * 0.7 + 0.05, 0, 1).astype(np.float32)
        write_image(Tensor(gt), root / "gt" / f"{i}.ppm")
        write_image(Tensor(x), root / "input" / f"{i}.ppm")
    return root


def tiny_cfgs(iters=4, seed=1):
    mc = M.ModelConfig(base_channels=4, sem_channels=8)
    tc = TR.TrainConfig(iters=iters, batch=2, crop=32, lr0=1e-3, seed=seed,
                        checkpoint_interval=0, log_interval=1)
    return mc, tc


class TestLoop:
    def test_logs_match_format(self, tmp_path):
        data = make_dataset(tmp_path / "d")
        mc, tc = tiny_cfgs(iters=3)
        lines = []
        vgg = M.random_vgg_store(np.random.default_rng(0))
        TR.train(mc, tc, data, vgg, str(tmp_path / "out.stscw"),
                 log=lines.append)
        pat = re.compile(r"^iter=\d+ lr=[\d.e+-]+ loss=[\d.]+ l1=[\d.]+ msssim=[\d.]+$")
        logged = [l for l in lines if l.startswith("iter=")]
        assert len(logged) == 3
        assert all(pat.match(l) for l in logged)

    def test_loss_decreases_on_tiny_problem(self, tmp_path):
        data = make_dataset(tmp_path / "d", n=1)
        mc, tc = tiny_cfgs(iters=12)
        lines = []
        vgg = M.random_vgg_store(np.random.default_rng(0))
        TR.train(mc, tc, data, vgg, str(tmp_path / "out.stscw"),
                 log=lines.append)
        losses = [float(l.split("loss=")[1].split()[0])
                  for l in lines if l.startswith("iter=")]
        assert losses[-1] < losses[0]

    def test_resume_is_bit_identical(self, tmp_path):
        data = make_dataset(tmp_path / "d")
        vgg = M.random_vgg_store(np.random.default_rng(0))

        mc, tc = tiny_cfgs(iters=6)
        straight = str(tmp_path / "straight.stscw")
        TR.train(mc, tc, data, vgg, straight, log=lambda *_: None)

        mc2, tc2 = tiny_cfgs(iters=3)
        half = str(tmp_path / "half.stscw")
        TR.train(mc2, tc2, data, vgg, half, log=lambda *_: None)
        mc3, tc3 = tiny_cfgs(iters=6)
        resumed = str(tmp_path / "resumed.stscw")
        TR.train(mc3, tc3, data, vgg, resumed, resume_path=half,
                 log=lambda *_: None)

        a = TR.read_weights(straight)
        b = TR.read_weights(resumed)
        for n in a.names():
            if n == "meta.iters":
                continue
            assert np.array_equal(a[n].data, b[n].data), n

    def test_checkpoint_meta_reconstructs_config(self, tmp_path):
        data = make_dataset(tmp_path / "d")
        mc = M.ModelConfig(base_channels=4, sem_channels=8,
                           branch_mode="texture_only", fdnet_enabled=False,
                           lam=0.6)
        tc = TR.TrainConfig(iters=2, batch=1, crop=32, seed=3,
                            checkpoint_interval=0)
        out = str(tmp_path / "ck.stscw")
        vgg = M.random_vgg_store(np.random.default_rng(0))
        TR.train(mc, tc, data, vgg, out, log=lambda *_: None)
        model, _ = TR.load_model_from_checkpoint(out)
        assert model.cfg.branch_mode == "texture_only"
        assert not model.cfg.fdnet_enabled
        assert model.cfg.lam == pytest.approx(0.6)
        assert model.cfg.base_channels == 4

    def test_loaded_model_reproduces_outputs(self, tmp_path):
        data = make_dataset(tmp_path / "d")
        mc, tc = tiny_cfgs(iters=2)
        out = str(tmp_path / "ck.stscw")
        vgg = M.random_vgg_store(np.random.default_rng(0))
        model, _ = TR.train(mc, tc, data, vgg, out, log=lambda *_: None)
        loaded, _ = TR.load_model_from_checkpoint(out)
        x = Tensor(np.random.default_rng(4).uniform(
            0, 1, (1, 3, 32, 32)).astype(np.float32))
        assert np.array_equal(model.forward(x).data, loaded.forward(x).data)

    def test_empty_dataset_aborts(self, tmp_path):
        (tmp_path / "d" / "input").mkdir(parents=True)
        (tmp_path / "d" / "gt").mkdir()
        mc, tc = tiny_cfgs()
        with pytest.raises(TR.TrainAbort):
            TR.train(mc, tc, tmp_path / "d",
                     M.random_vgg_store(np.random.default_rng(0)),
                     str(tmp_path / "o"), log=lambda *_: None)

    def test_seed_changes_trajectory(self, tmp_path):
        data = make_dataset(tmp_path / "d")
        vgg = M.random_vgg_store(np.random.default_rng(0))
        outs = []
        for seed in (1, 2):
            mc, tc = tiny_cfgs(iters=2, seed=seed)
            out = str(tmp_path / f"s{seed}.stscw")
            TR.train(mc, tc, data, vgg, out, log=lambda *_: None)
            outs.append(TR.read_weights(out))
        assert not np.array_equal(outs[0]["decoder.out.conv.weight"].data,
                                  outs[1]["decoder.out.conv.weight"].data)
