import dataclasses

import mpmath
import numpy as np
import pytest

from tracegrad import autodiff as ad
from tracegrad import training
from tracegrad.autodiff import Tape, finite_diff_check
from tracegrad.data import make_oracle_params
from tracegrad.errors import ConfigurationError, DivergenceError, ParameterError, UsageError
from tracegrad.model import Model, ModelConfig
from tracegrad.structures import DEFAULT_BASIS
from tracegrad.training import (
    ARMS,
    Adam,
    TrainConfig,
    arm_configs,
    block_table,
    compute_loss,
    eigen_metrics,
    evaluate,
    format_table,
    load_selection,
    loss_and_grad,
    model_predictor,
    mu_value,
    oracle_predictor,
    run_ablation,
    save_selection,
    scaling_benchmark,
    select_challenging,
    summarize_ablation,
    train,
    zero_predictor,
)


def tiny_config(**kw):
    base = dict(K=1, C=6, hidden=6, trace_hidden=6, radial_hidden=6, spec="0x3+1x3+2x2")
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def tiny_model():
    return Model(tiny_config(zero_last=False), seed=2)


@pytest.fixture(scope="module")
def samples(tiny_model, small_records):
    return [tiny_model.prepare(r.system, r.blocks) for r in small_records[:4]]


def one_entry_targets(h_true, t_true):
    return {
        "H": np.array([[h_true]]),
        "H_mask": np.ones((1, 1)),
        "T": np.array([[t_true]]),
        "T_mask": np.ones((1, 1)),
    }


def random_symmetric(rng, n):
    a = rng.normal(size=(n, n))
    return 0.5 * (a + a.T)


class TestLoss:
    def test_mu_arithmetic(self):
        tape = Tape()
        h = tape.variable([[np.sqrt(2.0)]])
        t = tape.variable([[4.0]])
        total, br = compute_loss(h, t, one_entry_targets(0.0, 0.0), 0.3)
        assert br.loss_H == pytest.approx(2.0, abs=1e-15)
        assert br.loss_T == 4.0
        assert br.mu == pytest.approx(0.15, abs=1e-15)
        assert br.total == pytest.approx(2.6, abs=1e-15)
        assert float(total.value) == pytest.approx(2.6, abs=1e-15)

    def test_mu_value_edges(self):
        assert mu_value(2.0, 4.0, 0.3) == pytest.approx(0.15)
        assert mu_value(2.0, 0.0, 0.3) == 0.0
        assert mu_value(2.0, 4.0, 0.0) == 0.0

    def test_perfect_prediction(self):
        tape = Tape()
        total, br = compute_loss(tape.variable([[1.5]]), tape.variable([[2.0]]), one_entry_targets(1.5, 2.0), 0.3)
        assert br.total == 0.0 and float(total.value) == 0.0

    def test_shape_mismatch(self):
        tape = Tape()
        with pytest.raises(ParameterError):
            compute_loss(tape.variable(np.zeros((1, 2))), None, one_entry_targets(0.0, 0.0), 0.3)

    def test_ratio_gets_no_gradient(self):
        # with the ratio detached, d total / d h = d loss_H/dh + mu * d loss_T/dh
        tape = Tape()
        h = tape.variable([[3.0]])
        t = tape.variable([[2.0]])
        total, br = compute_loss(h, t, one_entry_targets(1.0, 0.0), 0.5)
        gh, gt = tape.grad(total, [h, t])
        assert gh.value.item() == pytest.approx(2 * 2.0, abs=1e-15)
        assert gt.value.item() == pytest.approx(br.mu * 1.0, abs=1e-15)

    def test_no_grad_contract_model(self, tiny_model, samples):
        batch = tiny_model.collate(samples)
        tape = Tape()
        p = tiny_model.lift_params(tape)
        h, t, _ = tiny_model.forward(tape, batch, p)
        total, br = compute_loss(h, t, batch.targets, 0.3)
        names = sorted(p)
        g_detached = tape.grad(total, [p[n] for n in names])
        # the same loss with the ratio replaced by its numeric value
        sse, sae = training.loss_sums(h, t, batch.targets)
        loss_h = ad.scale(sse, 1.0 / batch.targets["H_mask"].sum())
        loss_t = ad.scale(sae, 1.0 / batch.targets["T_mask"].sum())
        frozen = ad.add(loss_h, ad.scale(loss_t, br.mu))
        g_frozen = tape.grad(frozen, [p[n] for n in names])
        worst = max(float(np.max(np.abs(a.value - b.value))) for a, b in zip(g_detached, g_frozen))
        assert worst <= 1e-12

    def test_no_grad_contract_finite_differences(self, tiny_model, samples):
        batch = tiny_model.collate(samples[:2])
        name = "dec.t0.l0"
        tape = Tape()
        p = tiny_model.lift_params(tape)
        h, t, _ = tiny_model.forward(tape, batch, p)
        _, br = compute_loss(h, t, batch.targets, 0.3)
        mu = br.mu

        def frozen(x):
            tp = x.tape
            q = tiny_model.lift_params(tp)
            q[name] = x
            hh, tt, _ = tiny_model.forward(tp, batch, q)
            sse, sae = training.loss_sums(hh, tt, batch.targets)
            return ad.add(
                ad.scale(sse, 1.0 / batch.targets["H_mask"].sum()),
                ad.scale(sae, mu / batch.targets["T_mask"].sum()),
            )

        tape = Tape()
        p = tiny_model.lift_params(tape)
        h, t, _ = tiny_model.forward(tape, batch, p)
        total, _ = compute_loss(h, t, batch.targets, 0.3)
        (g,) = tape.grad(total, [p[name]])
        fd = finite_diff_check(frozen, tiny_model.params[name], step=1e-5)
        denom = np.maximum(np.maximum(np.abs(g.value.ravel()), np.abs(fd.numeric)), 1e-8)
        assert float(np.max(np.abs(g.value.ravel() - fd.numeric) / denom)) <= 1e-5

    def test_chunked_gradient_matches_single_tape(self, tiny_model, samples):
        br1, g1 = loss_and_grad(tiny_model, tiny_model.params, samples, 0.3, threads=1)
        br3, g3 = loss_and_grad(tiny_model, tiny_model.params, samples, 0.3, threads=3)
        assert br1.loss_H == pytest.approx(br3.loss_H, rel=1e-13)
        assert br1.mu == pytest.approx(br3.mu, rel=1e-12)
        assert max(float(np.max(np.abs(g1[k] - g3[k]))) for k in g1) <= 1e-12

    def test_loss_and_grad_matches_compute_loss(self, tiny_model, samples):
        batch = tiny_model.collate(samples)
        tape = Tape()
        p = tiny_model.lift_params(tape)
        h, t, _ = tiny_model.forward(tape, batch, p)
        total, br = compute_loss(h, t, batch.targets, 0.3)
        grads = dict(zip(sorted(p), tape.grad(total, [p[n] for n in sorted(p)])))
        br2, g2 = loss_and_grad(tiny_model, tiny_model.params, samples, 0.3)
        assert br2.total == pytest.approx(br.total, rel=1e-13)
        assert max(float(np.max(np.abs(grads[k].value - g2[k]))) for k in g2) <= 1e-12


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [{"lam": -0.1}, {"lam": 1.5}, {"lr": 0.0}, {"epochs": -1}, {"batch": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kw)

    def test_json(self):
        cfg = TrainConfig(lam=0.2, epochs=7)
        assert TrainConfig.from_json(cfg.to_json()) == cfg
        with pytest.raises(ConfigurationError):
            TrainConfig.from_json({"momentum": 0.9})


class TestAdam:
    def test_first_step_is_signed_lr(self):
        p = {"w": np.array([1.0, -2.0, 0.5])}
        g = {"w": np.array([0.3, -4.0, 1e-3])}
        out = Adam(p, lr=0.1).step(p, g)
        assert np.allclose(out["w"], p["w"] - 0.1 * np.sign(g["w"]), atol=1e-6)

    def test_matches_reference_recurrence(self, rng):
        p = {"w": rng.normal(size=4)}
        opt = Adam(p, lr=0.01)
        m = v = np.zeros(4)
        w = p["w"].copy()
        for k in range(1, 6):
            g = rng.normal(size=4)
            p = opt.step(p, {"w": g})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - 0.01 * (m / (1 - 0.9**k)) / (np.sqrt(v / (1 - 0.999**k)) + 1e-8)
        assert np.allclose(p["w"], w, atol=1e-15)

    def test_state_roundtrip(self, rng):
        p = {"w": rng.normal(size=3)}
        opt = Adam(p, lr=0.01)
        p = opt.step(p, {"w": rng.normal(size=3)})
        clone = Adam(p, lr=1.0, state=opt.state())
        g = {"w": rng.normal(size=3)}
        assert np.array_equal(opt.step(p, g)["w"], clone.step(p, g)["w"])


class TestTrain:
    def test_zero_epochs(self, tiny_model, samples):
        res = train(tiny_model, samples, TrainConfig(epochs=0))
        assert all(np.array_equal(res.params[k], v) for k, v in tiny_model.params.items())
        assert res.log == []

    def test_deterministic(self, tiny_model, samples):
        cfg = TrainConfig(epochs=2, batch=2, seed=4)
        a = train(tiny_model, samples, cfg, samples[:2])
        b = train(tiny_model, samples, cfg, samples[:2])
        assert [(e.loss_H, e.loss_T, e.total, e.val_mae_all) for e in a.log] == [
            (e.loss_H, e.loss_T, e.total, e.val_mae_all) for e in b.log
        ]
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_loss_decreases(self, tiny_model, samples):
        res = train(tiny_model, samples, TrainConfig(epochs=15, batch=4, lr=5e-3))
        assert res.log[-1].loss_H < res.log[0].loss_H

    def test_lambda_zero_is_hamiltonian_only(self, tiny_model, samples):
        res = train(tiny_model, samples, TrainConfig(epochs=1, lam=0.0))
        assert res.log[0].mu == 0.0 and res.log[0].total == res.log[0].loss_H

    def test_resume_matches_continuous(self, tiny_model, samples):
        cfg = TrainConfig(epochs=4, batch=2)
        full = train(tiny_model, samples, cfg, samples[:2])
        first = train(tiny_model, samples, dataclasses.replace(cfg, epochs=2), samples[:2])
        saved = tiny_model.params
        tiny_model.params = first.params
        try:
            rest = train(
                tiny_model, samples, dataclasses.replace(cfg, epochs=2), samples[:2],
                optimizer=first.optimizer, start_epoch=2, resume_state=first.resume_state,
            )
        finally:
            tiny_model.params = saved
        assert all(np.array_equal(full.params[k], rest.params[k]) for k in full.params)
        assert rest.best_epoch == full.best_epoch

    def test_divergence_reports_epoch(self, tiny_model, small_records):
        bad = tiny_model.prepare(small_records[0].system, small_records[0].blocks)
        bad.targets = dict(bad.targets)
        bad.targets["H"] = bad.targets["H"].copy()
        bad.targets["H"][0, 0] = np.inf
        with np.errstate(all="ignore"), pytest.raises(DivergenceError) as info:
            train(tiny_model, [bad], TrainConfig(epochs=2))
        assert info.value.epoch == 0

    def test_trace_loss_needs_head(self, samples):
        m = Model(tiny_config(trace_head=False))
        with pytest.raises(ConfigurationError):
            train(m, samples, TrainConfig(epochs=1, lam=0.3))

    def test_empty(self, tiny_model):
        with pytest.raises(ParameterError):
            train(tiny_model, [], TrainConfig(epochs=1))


class TestEigenMetrics:
    def test_identical(self, rng):
        h = random_symmetric(rng, 8)
        e, s = eigen_metrics(h, h)
        assert e == 0.0 and s == pytest.approx(1.0, abs=1e-12)

    def test_shift(self, rng):
        h = random_symmetric(rng, 8)
        e, s = eigen_metrics(h + 0.001 * np.eye(8), h)
        assert e == pytest.approx(0.001, abs=1e-12)
        assert s == pytest.approx(1.0, abs=1e-10)

    def test_against_high_precision(self, rng):
        mpmath.mp.dps = 40
        for _ in range(3):
            h = random_symmetric(rng, 7)
            hp = h + 0.05 * random_symmetric(rng, 7)
            ref = []
            for mat in (hp, h):
                ev, _ = mpmath.eigsy(mpmath.matrix(mat.tolist()))
                ref.append(sorted(float(x) for x in ev))
            want = float(np.mean(np.abs(np.array(ref[0][:3]) - np.array(ref[1][:3]))))
            got, _ = eigen_metrics(hp, h, m=3)
            assert abs(got - want) <= 1e-10

    def test_sign_gauge(self, rng, monkeypatch):
        h = random_symmetric(rng, 6)
        hp = h + 0.1 * random_symmetric(rng, 6)
        base = eigen_metrics(hp, h)
        real_eigh = np.linalg.eigh
        flips = rng.choice([-1.0, 1.0], size=6)

        def flipped(a):
            w, v = real_eigh(a)
            return w, v * flips

        monkeypatch.setattr(training.np.linalg, "eigh", flipped)
        again = eigen_metrics(hp, h)
        assert again[1] == pytest.approx(base[1], abs=1e-14)

    def test_degenerate_subspace(self, rng):
        # a rotation inside a degenerate eigenspace keeps the occupied space intact
        q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        h = q @ np.diag([-2.0, -1.0, -1.0, 1.0, 2.0, 3.0]) @ q.T
        c, s = np.cos(0.7), np.sin(0.7)
        rot = np.eye(6)
        rot[1:3, 1:3] = [[c, -s], [s, c]]
        q2 = q @ rot
        h2 = q2 @ np.diag([-2.0, -1.0, -1.0, 1.0, 2.0, 3.0]) @ q2.T
        h2 = 0.5 * (h2 + h2.T)
        _, sim = eigen_metrics(h2, 0.5 * (h + h.T))
        assert sim == pytest.approx(1.0, abs=1e-8)

    def test_asymmetric(self, rng):
        a = rng.normal(size=(4, 4))
        with pytest.raises(ParameterError):
            eigen_metrics(a, a.T)


class TestEvaluate:
    def test_oracle_is_perfect(self, small_records):
        rep = evaluate(oracle_predictor(make_oracle_params(), DEFAULT_BASIS), small_records, DEFAULT_BASIS)
        assert rep.mae_all == 0.0 and rep.mae_cha_b == 0.0 and rep.mae_eps == 0.0
        assert rep.sim_psi == pytest.approx(1.0, abs=1e-12)

    def test_zero_model_is_mean_abs_target(self, small_records):
        rep = evaluate(zero_predictor(DEFAULT_BASIS), small_records, DEFAULT_BASIS)
        entries = np.concatenate([m.ravel() for r in small_records for _, m in r.blocks.items()])
        assert rep.mae_all == pytest.approx(float(np.mean(np.abs(entries))), rel=1e-12)

    def test_block_metrics(self, tiny_model, small_records):
        rep = evaluate(model_predictor(tiny_model), small_records, DEFAULT_BASIS)
        assert set(rep.mae_block) == {(0, 0), (0, 1), (1, 0), (1, 1)}
        assert rep.mae_cha_b == max(rep.mae_block.values())
        assert rep.mae_cha_b >= rep.mae_all
        assert "lp\\lq" in block_table(rep)

    def test_permutation_invariant(self, tiny_model, small_records):
        pred = model_predictor(tiny_model)
        a = evaluate(pred, small_records, DEFAULT_BASIS).mae_all
        b = evaluate(pred, small_records[::-1], DEFAULT_BASIS).mae_all
        assert a == pytest.approx(b, rel=1e-12)

    def test_challenging_selection(self, tiny_model, small_records, tmp_path):
        pred = model_predictor(tiny_model)
        base = evaluate(pred, small_records, DEFAULT_BASIS)
        sel = select_challenging(base.per_sample_mae)
        assert sel == [int(np.argmax(base.per_sample_mae))]
        save_selection(tmp_path / "sel.json", sel)
        rep = evaluate(pred, small_records, DEFAULT_BASIS, challenging=load_selection(tmp_path / "sel.json"))
        assert rep.mae_cha_s >= rep.mae_all

    def test_selection_fraction(self):
        errs = np.arange(40.0)
        assert select_challenging(errs) == [39, 38]

    def test_missing_selection(self, small_records):
        with pytest.raises(UsageError):
            evaluate(zero_predictor(DEFAULT_BASIS), small_records, DEFAULT_BASIS, require_challenging=True)

    def test_bad_selection_file(self, tmp_path):
        (tmp_path / "x.json").write_text('{"format": "other"}')
        with pytest.raises(UsageError):
            load_selection(tmp_path / "x.json")


class TestAblation:
    def test_arm_layout(self):
        arms = arm_configs(tiny_config(), TrainConfig(), 0.3)
        assert [a[0] for a in arms] == [a[0] for a in ARMS]
        table = {name: (mc.mode, tc.lam) for name, mc, tc in arms}
        assert table == {
            "baseline": ("off", 0.0), "+Trace": ("off", 0.3), "+Gate": ("gate", 0.0),
            "+Grad": ("grad", 0.0), "+TraceGate": ("gate", 0.3), "+TraceGrad": ("grad", 0.3),
        }
        assert all(mc.trace_head for _, mc, _ in arms)

    def test_arms_share_initial_loss(self, small_records):
        losses = []
        for _, mc, tc in arm_configs(tiny_config(), TrainConfig(), 0.3):
            m = Model(mc, seed=5)
            sg = [m.prepare(r.system, r.blocks) for r in small_records[:3]]
            losses.append(loss_and_grad(m, m.params, sg, tc.lam)[0].loss_H)
        assert max(losses) - min(losses) <= 1e-15 * max(losses)

    def test_run_ablation_smoke(self, small_records):
        splits = {"train": small_records[:4], "val": small_records[4:6], "test": small_records[6:10]}
        res = run_ablation(splits, DEFAULT_BASIS, tiny_config(), TrainConfig(epochs=1, batch=4), seeds=(0,))
        assert [r.arm for r in res] == [a[0] for a in ARMS]
        init = [r.initial.loss_H for r in res]
        assert max(init) - min(init) <= 1e-15 * max(init)
        summary = summarize_ablation(res)
        assert set(summary) == {a[0] for a in ARMS}
        text = format_table(summary)
        assert "+TraceGrad" in text and "mae_cha_s" in text

    def test_empty_split(self, small_records):
        with pytest.raises(ParameterError):
            run_ablation({"train": small_records, "val": [], "test": small_records}, DEFAULT_BASIS,
                         tiny_config(), TrainConfig(epochs=1))


class TestScaling:
    def test_report_fields(self):
        rep = scaling_benchmark(Model(tiny_config()), sizes=(4, 8, 12), repeats=1)
        assert rep.sizes == [4, 8, 12] and len(rep.seconds) == 3
        assert rep.edges[0] < rep.edges[-1]
        assert 0.0 <= rep.r2 <= 1.0
