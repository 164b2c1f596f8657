import json
import math

import numpy as np
import pytest

from ota_fl_sim import channel as ch
from ota_fl_sim.channel import ChannelConfig
from ota_fl_sim.exceptions import ConfigError
from ota_fl_sim.model import ProxConfig, local_grad, local_solve_sgd
from ota_fl_sim.protocol import (DataSource, RunConfig, StragglerModel, assign_stragglers,
                                 init_state, run_round, run_training, select_participants,
                                 variant_config)

from helpers import make_data


SMALL = DataSource(n=300, m=4, C=3, separation=2.0)


def small_cfg(**kw):
    base = dict(K=6, E=2, T=5, batch=16, pi=0.5, data=SMALL)
    base.update(kw)
    return RunConfig(**base)


# --- variant table -----------------------------------------------------------

def test_variant_overrides():
    base = RunConfig(lam=0.4, channel=ChannelConfig(sigma2=0.3))
    fp = variant_config("FedProx", base)
    assert fp.channel.sigma2 == 0 and fp.channel.precoding_mode == "unit" and fp.lam == 0.4
    co = variant_config("COTAF", base)
    assert co.lam == 0 and co.straggler.policy == "drop" and co.channel.precoding_mode == "oracle"
    npx = variant_config("NoisyProx", base)
    assert npx.channel.precoding_mode == "unit" and npx.channel.sigma2 == 0.3 and npx.lam == 0.4
    nfa = variant_config("NoisyFedAvg", base)
    assert (nfa.lam, nfa.channel.precoding_mode, nfa.straggler.policy) == (0, "unit", "drop")
    rc = variant_config("RobustComm", base)
    assert rc.lam == 0.3 and rc.channel.precoding_mode == "oracle"
    assert variant_config("NoROTA", base) == base


def test_variant_config_rejects_unknown_and_rederivation():
    with pytest.raises(ConfigError):
        variant_config("FedSGD", RunConfig())
    with pytest.raises(ConfigError):
        variant_config("FedProx", variant_config("COTAF", RunConfig()))
    with pytest.raises(ConfigError) as exc:
        RunConfig(variant="Nope")
    assert exc.value.field == "variant"


def test_noiseless_unit_norota_is_bitwise_fedprox():
    cfg = small_cfg(channel=ChannelConfig(sigma2=0.0, precoding_mode="unit"))
    a = run_training(cfg)
    b = run_training(variant_config("FedProx", cfg))
    assert a.theta.tobytes() == b.theta.tobytes()
    assert [r.global_loss for r in a.records] == [r.global_loss for r in b.records]


def test_cotaf_is_norota_without_prox_and_with_drop():
    strag = StragglerModel(0.3)
    cfg = small_cfg(channel=ChannelConfig(sigma2=1e-3), straggler=strag)
    a = run_training(variant_config("COTAF", cfg))
    b = run_training(small_cfg(channel=ChannelConfig(sigma2=1e-3), lam=0.0,
                               straggler=StragglerModel(0.3, "drop")))
    assert a.theta.tobytes() == b.theta.tobytes()


# --- stragglers and participation --------------------------------------------

def test_straggler_count_and_range():
    model = StragglerModel(0.5)
    rng = np.random.default_rng(0)
    for t in range(20):
        E_k = assign_stragglers(30, model, 3, t, rng)
        assert np.sum(E_k < 3) == 15
        assert set(E_k[E_k < 3]) <= {1, 2}


def test_straggler_membership_is_uniform():
    model = StragglerModel(0.5)
    rng = np.random.default_rng(1)
    hits = sum((assign_stragglers(30, model, 3, t, rng) < 3).astype(int) for t in range(1000))
    assert np.all(np.abs(hits - 500) <= 50)


def test_no_stragglers_and_single_epoch():
    assert np.all(assign_stragglers(10, StragglerModel(0.0), 4, 1, 0) == 4)
    with pytest.warns(RuntimeWarning):
        E_k = assign_stragglers(10, StragglerModel(0.5), 1, 1, 0)
    assert np.all(E_k == 1)


def test_fixed_straggler_set_is_reused():
    cfg = small_cfg(straggler=StragglerModel(0.5, fixed=True), T=4)
    res = run_training(cfg)
    sets = {tuple(np.flatnonzero(np.array(r.E_k) < cfg.E)) for r in res.records}
    assert len(sets) == 1 and len(next(iter(sets))) == 3


def test_random_participation_marginals():
    rng = np.random.default_rng(2)
    counts = np.zeros(10)
    for _ in range(2000):
        ids = select_participants("random", 10, 3, None, 0.0, "include", np.full(10, 2), 2, rng)
        assert len(ids) == 3 and list(ids) == sorted(set(ids))
        counts[list(ids)] += 1
    np.testing.assert_allclose(counts / 2000, 0.3, atol=0.04)


def test_fading_and_drop_selection():
    draws = [ch.FadingDraw(r, 0.0) for r in (0.2, 1.0, 0.5, 2.0)]
    assert select_participants("fading", 4, None, draws, 0.5, "include", [3] * 4, 3, 0) == (1, 3)
    assert select_participants("fading", 4, None, draws, 0.5, "drop", [3, 3, 3, 1], 3, 0) == (1,)
    assert select_participants("full", 4, None, None, 0, "drop", [3, 1, 3, 2], 3, 0) == (0, 2)


def test_dropped_stragglers_never_aggregate():
    res = run_training(small_cfg(straggler=StragglerModel(0.5, "drop"), T=4))
    for r in res.records:
        assert r.n_participants == 3
        assert all(r.E_k[k] == 2 for k in r.participants)


def test_k_hat_validation_names_field():
    with pytest.raises(ConfigError) as exc:
        RunConfig(K=5, K_hat=6)
    assert exc.value.field == "K_hat" and "K_hat" in str(exc.value)
    with pytest.raises(ConfigError):
        RunConfig(K=5, K_hat=2, channel=ChannelConfig(fading=True, r_hat=0.5))


# --- round mechanics ---------------------------------------------------------

def test_single_round_fedavg_closed_form():
    data = make_data(4)
    cfg = RunConfig(K=4, E=1, T=1, lam=0.0, eta=0.3, batch=10_000,
                    channel=ChannelConfig(precoding_mode="unit"))
    theta0 = np.random.default_rng(0).standard_normal(data.spec.d)
    res = run_training(cfg, data, theta0=theta0)
    expected = np.mean([theta0 - 0.3 * local_grad(theta0, s.dataset, data.spec)
                        for s in data.shards], axis=0)
    np.testing.assert_allclose(res.theta, expected, atol=1e-12)


def test_two_client_round_matches_hand_pipeline():
    data = make_data(2, n=40, m=1, C=2)
    cfg = RunConfig(K=2, E=2, T=1, lam=0.3, eta=0.2, batch=10_000,
                    channel=ChannelConfig(P=1.5, sigma2=0.1))
    theta0 = np.array([0.1, -0.2, 0.3, 0.05])
    res = run_training(cfg, data, theta0=theta0)
    rec = res.records[0]

    prox = ProxConfig(0.3, 0.2, 2, 10_000)
    local = [local_solve_sgd(s, theta0, prox, 2, 0, data.spec) for s in data.shards]
    deltas = [t - theta0 for t in local]
    q = np.array([s.weight for s in data.shards])
    p = 1.5 / sum(qk * (dk @ dk) for qk, dk in zip(q, deltas))
    noise = math.sqrt(0.1) * np.random.default_rng(rec.noise_seed).standard_normal(4)
    y = sum(math.sqrt(p) * dk for dk in deltas) + noise
    expected = y / (2 * math.sqrt(p)) + theta0
    assert rec.p_t == pytest.approx(p, rel=1e-12)
    np.testing.assert_allclose(res.theta, expected, atol=1e-12)


def test_oracle_precoding_meets_power():
    res = run_training(small_cfg(channel=ChannelConfig(P=2.0, sigma2=0.01), T=3))
    for r in res.records:
        assert abs(r.transmit_power - 2.0) <= 1e-9


def test_delayed_precoding_uses_previous_update():
    res = run_training(small_cfg(channel=ChannelConfig(precoding_mode="delayed"), T=3))
    r1, r2 = res.records[:2]
    assert r2.p_t == pytest.approx(1.0 / r1.update_sq, rel=1e-12)


def test_complex_baseband_matches_real_equivalent():
    chan = ChannelConfig(sigma2=0.0, fading=True, r_hat=ch.r_hat_for_participation(0.7))
    real = run_training(small_cfg(channel=chan, T=4))
    cplx = run_training(small_cfg(channel=ChannelConfig(sigma2=0.0, fading=True, r_hat=chan.r_hat,
                                                        baseband="complex"), T=4))
    np.testing.assert_allclose(cplx.theta, real.theta, atol=1e-9)
    assert [r.participants for r in real.records] == [r.participants for r in cplx.records]


def test_round_without_participants_is_skipped():
    cfg = small_cfg(channel=ChannelConfig(fading=True, r_hat=10.0), T=3)
    res = run_training(cfg)
    assert all(r.skipped and r.n_participants == 0 for r in res.records)
    assert np.array_equal(res.theta, init_state(cfg).theta)
    assert math.isnan(res.records[0].p_t)


def test_zero_rounds_return_initial_model():
    cfg = small_cfg(T=0)
    res = run_training(cfg)
    assert res.records == ()
    assert np.array_equal(res.theta, init_state(cfg).theta)
    assert res.final_accuracy == res.initial.test_accuracy


def test_run_is_deterministic_and_seed_sensitive():
    cfg = small_cfg(channel=ChannelConfig(sigma2=0.01), straggler=StragglerModel(0.3))
    a, b = run_training(cfg), run_training(cfg)
    assert a.theta.tobytes() == b.theta.tobytes()
    c = run_training(small_cfg(channel=ChannelConfig(sigma2=0.01), straggler=StragglerModel(0.3),
                               master_seed=1))
    assert not np.array_equal(a.theta, c.theta)


def test_records_are_indexed_by_round():
    res = run_training(small_cfg(T=4, eval_every=2))
    assert [r.t for r in res.records] == [1, 2, 3, 4]
    assert math.isnan(res.records[0].test_accuracy)
    assert 0 <= res.records[1].test_accuracy <= 1
    assert all(len(r.gamma_hat) == r.n_participants for r in res.records)


def test_divergence_truncates_run():
    res = run_training(small_cfg(eta=1e3, lam=5.0, batch=1, T=5))
    assert res.diverged and res.diverged_round == 1
    assert len(res.records) == res.diverged_round - 1


def test_state_round_by_round_equals_run():
    cfg = small_cfg(T=3)
    state = init_state(cfg)
    for t in (1, 2, 3):
        run_round(state, t)
    assert state.theta.tobytes() == run_training(cfg).theta.tobytes()


def test_config_serialises():
    cfg = small_cfg().with_snr_db(0.0)
    d = cfg.to_dict()
    json.dumps(d)
    assert d["channel"]["sigma2"] == pytest.approx(1.0 / cfg.model_spec().d)
    assert d["eta_effective"] == 0.05
