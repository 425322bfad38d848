import io

import numpy as np
import pytest

from quadhedge.dtsoc import (
    LOG_COLUMNS,
    DtsocConfig,
    as_policy,
    build_agent,
    load_agent,
    rollout_loss,
    save_agent,
    terminal_cash,
    train,
)
from quadhedge.ledger import ContractSpec, CostSpec, HedgeState, LedgerError, run_batch
from quadhedge.market import ConfigError, MarketConfig, simulate_arrays

CON = ContractSpec()
TINY = dict(hidden=(4,), batch_size=8, path_pool=64)


def _perturbed_agent(market, seed=0, **kw):
    agent = build_agent(DtsocConfig(**{**TINY, **kw}), market, CON)
    rng = np.random.default_rng(seed)
    for net in agent.nets:
        net.flat += 0.2 * rng.standard_normal(net.flat.shape)
    return agent


def test_one_step_hand_gradient():
    m = MarketConfig(maturity_days=1)
    agent = _perturbed_agent(m)
    spots = np.array([[100.0, 103.0]])
    alpha, y0 = 0.002, 0.7
    loss, grads = rollout_loss(agent, spots, CON, CostSpec(alpha), y0)
    h = float(as_policy(agent)(HedgeState(0, m.maturity, 100.0, 0.0)))
    c = h * 3.0 - alpha * 100 * abs(h) - alpha * 103 * abs(h) + y0 - 3.0
    assert loss == pytest.approx(c * c, rel=1e-12)
    # the output bias enters H with unit weight
    dh = 3.0 - alpha * (100 + 103) * np.sign(h)
    assert grads[0][-1][0] == pytest.approx(2 * c * dh, rel=1e-10)


def test_two_step_gradient_matches_finite_differences():
    m = MarketConfig(maturity_days=2)
    agent = _perturbed_agent(m, seed=3)
    spots = np.array([[100.0, 101.5, 99.0], [100.0, 98.0, 104.0]])
    cost = CostSpec(0.003)
    _, grads = rollout_loss(agent, spots, CON, cost, 1.0)
    for net, g in zip(agent.nets, grads):
        flat_g = np.concatenate([x.ravel() for x in g])
        fd = np.zeros_like(flat_g)
        for j in range(net.flat.size):
            keep = net.flat[j]
            net.flat[j] = keep + 1e-6
            up = rollout_loss(agent, spots, CON, cost, 1.0)[0]
            net.flat[j] = keep - 1e-6
            down = rollout_loss(agent, spots, CON, cost, 1.0)[0]
            net.flat[j] = keep
            fd[j] = (up - down) / 2e-6
        assert np.linalg.norm(flat_g - fd) / np.linalg.norm(fd) < 1e-4


def test_flat_paths_loss_is_policy_independent():
    m = MarketConfig(maturity_days=3)
    spots = np.full((4, 4), 100.0)
    for seed in range(3):
        loss, grads = rollout_loss(_perturbed_agent(m, seed=seed), spots, CON, CostSpec(0.0))
        assert loss == 0.0
        assert all(np.all(g == 0) for net_g in grads for g in net_g)
    itm = np.full((2, 4), 110.0)
    loss, _ = rollout_loss(_perturbed_agent(m), itm, CON, CostSpec(0.0))
    assert loss == pytest.approx(100.0)


def test_batch_loss_is_mean_of_path_losses():
    m = MarketConfig()
    agent = _perturbed_agent(m)
    spots, _ = simulate_arrays(m, range(6))
    cost = CostSpec(0.001)
    batch, _ = rollout_loss(agent, spots, CON, cost, 2.0)
    single = [rollout_loss(agent, spots[k:k + 1], CON, cost, 2.0)[0] for k in range(6)]
    assert batch == pytest.approx(np.mean(single), rel=1e-12)


def test_terminal_cash_matches_ledger():
    m = MarketConfig(model_kind="SABR")
    agent = _perturbed_agent(m).eval()
    spots, vols = simulate_arrays(m, range(5))
    cost = CostSpec(0.002)
    cash = terminal_cash(agent, spots, cost, y0=1.5)
    res = run_batch(m.times, spots, vols, CON, cost, as_policy(agent), y0=1.5)
    np.testing.assert_allclose(cash, -res.hedging_cost, rtol=1e-12, atol=1e-12)


def test_policy_routing_and_errors():
    m = MarketConfig(maturity_days=3)
    agent = _perturbed_agent(m).eval()
    pol = as_policy(agent)
    st0 = HedgeState(1, 0.005, 100.0, 0.3)
    x = np.array([[0.0, (0.005 - m.maturity / 2) / (m.maturity / 2), (0.3 - 0.5) / 0.5]])
    assert pol(st0) == pytest.approx(float(agent.nets[1](x)[0, 0]), rel=1e-14)
    assert pol(st0) == pol(st0)
    with pytest.raises(LedgerError):
        pol(HedgeState(3, 0.0, 100.0, 0.3))
    with pytest.raises(LedgerError):
        rollout_loss(agent, np.full((1, 5), 100.0), CON, CostSpec())
    with pytest.raises(LedgerError):
        rollout_loss(agent, np.full((1, 4), 100.0), ContractSpec(strike=90), CostSpec())


def test_shared_network_variant():
    m = MarketConfig(maturity_days=4)
    agent = build_agent(DtsocConfig(**TINY, shared_network=True), m, CON)
    assert len(agent.nets) == 1
    assert agent.net_for(3) is agent.nets[0]


def test_episode_units_and_lr_schedule():
    cfg = DtsocConfig(episodes=50_000, episode_unit="paths")
    assert cfg.n_epochs == 196
    assert cfg.lr_at(0) == 1e-3 and cfg.lr_at(40) == 5e-4
    cfg = DtsocConfig(episodes=25_000)
    assert cfg.n_epochs == 25_000 and cfg.lr_at(20_000) == 2.5e-4
    with pytest.raises(ConfigError):
        DtsocConfig(episode_unit="steps")
    with pytest.raises(ConfigError):
        DtsocConfig(dropout_p=1.0)


def test_initial_holding_is_half_hedge():
    m = MarketConfig()
    pol = as_policy(build_agent(DtsocConfig(), m, CON))
    h = pol(HedgeState(0, m.maturity, np.array([90.0, 100.0, 110.0]), np.zeros(3)))
    assert np.all(np.abs(h - 0.5) < 0.1)


def test_training_is_deterministic_and_improves(tmp_path):
    m = MarketConfig(maturity_days=5)
    cfg = DtsocConfig(episodes=300, batch_size=32, path_pool=512, hidden=(6,), seed=2)
    a1, log1 = train(cfg, m, CON, CostSpec(0.0))
    a2, log2 = train(cfg, m, CON, CostSpec(0.0))
    assert log1.columns == LOG_COLUMNS and len(log1) == 300
    np.testing.assert_array_equal(log1.column("loss"), log2.column("loss"))
    loss = log1.column("loss")
    assert np.all(loss >= 0)
    assert np.median(loss[-30:]) < np.median(loss[:30])
    b = io.StringIO()
    log1.write_csv(b, include_wall=False)
    assert b.getvalue().splitlines()[0] == "epoch,loss,lr"

    path = tmp_path / "dtsoc.json"
    save_agent(path, a1, cfg)
    back = load_agent(path)
    spots, _ = simulate_arrays(m, range(10))
    np.testing.assert_array_equal(terminal_cash(back, spots, CostSpec()), terminal_cash(a1, spots, CostSpec()))


def test_checkpoints_during_training(tmp_path):
    m = MarketConfig(maturity_days=2)
    path = tmp_path / "ck.json"
    train(DtsocConfig(episodes=4, **TINY), m, CON, CostSpec(), checkpoint_every=2, checkpoint_path=path)
    assert load_agent(path).n_steps == 2


def test_bs_trained_agent_runs_on_sabr_paths():
    bs = MarketConfig(maturity_days=5)
    agent, _ = train(DtsocConfig(episodes=5, **TINY), bs, CON, CostSpec())
    sabr = MarketConfig(model_kind="SABR", maturity_days=5)
    spots, vols = simulate_arrays(sabr, range(20))
    res = run_batch(sabr.times, spots, vols, CON, CostSpec(), as_policy(agent))
    assert np.all(np.isfinite(res.hedging_cost))
