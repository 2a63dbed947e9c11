import numpy as np
import pytest

from fedsheafhn import autodiff as ad
from fedsheafhn.client import ClientState, init_params, local_train
from fedsheafhn.federation import (
    FedAvg,
    FedSheafHN,
    LocalOnly,
    RoundError,
    add_new_clients,
    generate_for_embeddings,
    inject_malicious,
    onehot_embeddings,
    run_fedsheafhn,
)
from fedsheafhn.graphs import induced_shard, split_masks
from fedsheafhn.pipeline import build_shards
from fedsheafhn.sheaf import attach_node

from conftest import small_config, tiny_graph


def shards_for(cfg):
    trained, held = build_shards(cfg)
    return trained, held


def report_bytes(reports):
    return [(r.round, {k: v.tobytes() for k, v in r.accuracy.items()},
             {k: v.tobytes() for k, v in r.loss.items()}, r.surrogate_loss, r.grad_norm_sq) for r in reports]


# ---------------------------------------------------------------- main loop


def test_zero_rounds_is_empty_and_stateless():
    cfg = small_config(rounds=0)
    shards, _ = shards_for(cfg)
    sim = FedSheafHN(shards, cfg)
    before = sim.server.phi.copy()
    assert sim.run() == []
    assert sim.server.round == 0 and not sim.initialized
    assert sim.server.phi.bitwise_equal(before)
    assert run_fedsheafhn(shards, cfg) == []


def test_refresh_schedule():
    cfg = small_config(rounds=7, refresh_interval=3)
    sim = FedSheafHN(shards_for(cfg)[0], cfg)
    rebuilt, sent = [], {}
    for r in range(7):
        graph = sim.server.graph
        sim.step()
        rebuilt.append(sim.server.graph is not graph)
        sent[r] = sim.pending_embeddings.copy()
        if r in (3, 6):
            # X0 is what clients returned on the previous refresh round
            assert sim.server.x0.tobytes() == sent[r - 3].tobytes()
    assert rebuilt == [r % 3 == 0 for r in range(7)]
    assert sent[1].tobytes() == sent[2].tobytes() == sent[0].tobytes()


def test_federated_accuracy_is_mean_of_clients():
    cfg = small_config(rounds=2)
    for rep in FedSheafHN(shards_for(cfg)[0], cfg).run():
        acc = list(rep.accuracy["test"])
        assert rep.federated_accuracy == pytest.approx(sum(acc) / len(acc), abs=1e-15)
        assert rep.client_std == pytest.approx(float(np.std(acc)), abs=1e-15)
        assert np.isfinite(rep.surrogate_loss) and rep.grad_norm_sq >= 0


def test_server_steps_use_all_client_deltas():
    cfg = small_config(rounds=1, hn_dropout=0.0)
    sim = FedSheafHN(shards_for(cfg)[0], cfg)
    sim.initialize()
    sim.step()
    # every client now holds a backbone trained from its generated row
    assert all(c.embedding is not None for c in sim.clients)
    assert sim.server.round == 1


def test_frozen_dynamics_keep_everything_fixed():
    cfg = small_config(rounds=10, frozen=True, client_lr=0.0, sheaf_lr=0.0, hn_lr=0.0)
    sim = FedSheafHN(shards_for(cfg)[0], cfg)
    theta0, phi0 = sim.server.theta.copy(), sim.server.phi.copy()
    heads0 = [(c.params.w2.tobytes(), c.params.b2.tobytes()) for c in sim.clients]
    for _ in range(10):
        sim.step()
        assert sim.server.theta.bitwise_equal(theta0) and sim.server.phi.bitwise_equal(phi0)
        assert [(c.params.w2.tobytes(), c.params.b2.tobytes()) for c in sim.clients] == heads0


def test_frozen_dynamics_client_backbones_stable():
    # without HN dropout and with X0 fixed after round 0 the generated
    # backbones, hence client models, are constant from round 0 on
    cfg = small_config(rounds=10, frozen=True, client_lr=0.0, sheaf_lr=0.0, hn_lr=0.0, hn_dropout=0.0,
                       refresh_interval=100)
    sim = FedSheafHN(shards_for(cfg)[0], cfg)
    sim.step()
    packed = [c.params.pack().tobytes() for c in sim.clients]
    gen = sim.generated_backbones()
    for c, row in zip(sim.clients, gen):
        assert c.params.backbone.tobytes() == row.tobytes()
    for _ in range(9):
        sim.step()
        assert [c.params.pack().tobytes() for c in sim.clients] == packed


def test_bitwise_determinism_and_thread_invariance(monkeypatch):
    cfg = small_config(rounds=3, client_dropout=0.2)
    shards = shards_for(cfg)[0]
    a = report_bytes(FedSheafHN(shards, cfg).run())
    b = report_bytes(FedSheafHN(shards, cfg).run())
    threaded = report_bytes(FedSheafHN(shards, cfg.with_overrides(threads=4)).run())
    monkeypatch.setenv("FSHN_THREADS", "1")
    capped = report_bytes(FedSheafHN(shards, cfg.with_overrides(threads=4)).run())
    assert a == b == threaded == capped


def test_errors_carry_round_number():
    cfg = small_config(rounds=2)
    sim = FedSheafHN(shards_for(cfg)[0], cfg)
    sim.step()
    sim.server.graph = None
    sim.pending_embeddings = np.full_like(sim.pending_embeddings, np.nan)
    with pytest.raises(RoundError, match="round 1") as info:
        sim.step()
    assert info.value.round == 1


def test_unknown_variant():
    cfg = small_config()
    with pytest.raises(ValueError):
        FedSheafHN(shards_for(cfg)[0], cfg, variant="bogus")


@pytest.mark.slow
def test_accuracy_improves_over_rounds():
    # averaged over three seeds on the 8-client fixture
    from conftest import fixture_config

    gains = []
    for seed in range(3):
        cfg = fixture_config(seed=seed)
        reps = FedSheafHN(shards_for(cfg)[0], cfg).run()
        gains.append(reps[-1].federated_accuracy - reps[0].federated_accuracy)
    assert np.mean(gains) > 0


# ---------------------------------------------------------------- ablations


def test_no_sheaf_matches_zero_weight_stack():
    cfg = small_config(rounds=4)
    shards = shards_for(cfg)[0]
    plain = FedSheafHN(shards, cfg, variant="no_sheaf")
    zero = FedSheafHN(shards, cfg.with_overrides(sheaf_lr=0.0, frozen=True), variant="full")
    zero.server.stack.zero_()
    for _ in range(4):
        a, b = plain.step(), zero.step()
        assert a.accuracy["test"].tobytes() == b.accuracy["test"].tobytes()
        assert plain.generated_backbones().tobytes() == zero.generated_backbones().tobytes()


def test_onehot_rows_are_basis_vectors():
    x = onehot_embeddings(3, 5)
    assert x.tolist() == np.eye(3, 5).tolist()
    cfg = small_config(rounds=1)
    sim = FedSheafHN(shards_for(cfg)[0], cfg, variant="onehot_hn")
    sim.step()
    assert sim.server.x0.tolist() == np.eye(4, cfg.hidden).tolist()
    with pytest.raises(ValueError):
        onehot_embeddings(6, 5)


@pytest.mark.parametrize("variant", ["gcn_collab", "no_attention", "static_embedding", "mean_collab"])
def test_variants_run(variant):
    cfg = small_config(rounds=6, refresh_interval=2)
    sim = FedSheafHN(shards_for(cfg)[0], cfg, variant=variant)
    graphs = []
    for _ in range(6):
        sim.step()
        graphs.append(sim.server.graph)
    assert np.isfinite(sim.reports[-1].federated_accuracy)
    if variant == "static_embedding":
        assert all(g is graphs[0] for g in graphs)
    if variant == "no_attention":
        assert "att_q" not in sim.server.phi.names()


# ---------------------------------------------------------------- attack


def test_inject_malicious_rules():
    x = np.random.default_rng(0).standard_normal((4, 3))
    assert inject_malicious(x, 0.0, "same_value", 1.0, 0).tobytes() == x.tobytes()
    assert not inject_malicious(x, 0.5, "gaussian", 0.0, 0)[:2].any()
    out = inject_malicious(x, 0.5, "same_value", 1.0, 7)
    assert out[2:].tobytes() == x[2:].tobytes()
    for row in out[:2]:
        assert np.all(row == row[0])
    assert not np.array_equal(out[:2], x[:2])
    g = inject_malicious(x, 0.25, "gaussian", 2.0, 7)
    assert g[1:].tobytes() == x[1:].tobytes() and len(set(g[0])) == 3
    assert inject_malicious(x, 0.5, "gaussian", 1.0, 3).tobytes() == inject_malicious(x, 0.5, "gaussian", 1.0, 3).tobytes()
    with pytest.raises(ValueError):
        inject_malicious(x, 1.5, "gaussian", 1.0, 0)
    with pytest.raises(ValueError):
        inject_malicious(x, 0.5, "flip", 1.0, 0)


def test_same_value_scale_follows_tau():
    x = np.zeros((2000, 2))
    a = inject_malicious(x, 1.0, "same_value", 3.0, 1)[:, 0]
    assert abs(np.std(a) - 3.0) < 0.2


def test_attack_run_marks_malicious_clients():
    cfg = small_config(rounds=1, attack_ratio=0.5)
    rep = FedSheafHN(shards_for(cfg)[0], cfg).step()
    assert rep.malicious.tolist() == [0, 1]
    assert rep.benign_accuracy() == pytest.approx(float(np.mean(rep.accuracy["test"][2:])))


# ---------------------------------------------------------------- baselines


def test_local_only_single_client_matches_manual_loop():
    cfg = small_config(num_clients=1, rounds=3)
    shards = shards_for(cfg)[0]
    reps = LocalOnly(shards, cfg).run()
    shard = shards[0]
    rng = np.random.default_rng([cfg.seed, 1, shard.client_id])
    p = init_params(shard.graph.num_features, cfg.hidden, shard.graph.num_classes, rng)
    state = ClientState(shard=shard, params=p,
                        optimizer=ad.make_optimizer("sgd", cfg.client_lr, cfg.client_weight_decay))
    from fedsheafhn.client import evaluate

    for rep in reps:
        local_train(state, None, cfg.local_epochs)
        assert rep.accuracy["test"][0] == evaluate(state, "test")
        assert rep.federated_accuracy == rep.accuracy["test"][0]


def test_local_only_deterministic_and_beats_chance_on_two_cliques():
    cfg = small_config(num_clients=2, rounds=5, sbm_blocks=(20, 20), sbm_p_in=1.0, sbm_p_out=0.0,
                       client_lr=0.1)
    shards = shards_for(cfg)[0]
    a = LocalOnly(shards, cfg).run()
    b = LocalOnly(shards, cfg).run()
    assert report_bytes(a) == report_bytes(b)
    assert a[-1].federated_accuracy >= 0.5


def identical_shards(k):
    g = tiny_graph(n=12, f=3, c=2, seed=1)
    return [split_masks(induced_shard(g, np.arange(12), i), 0) for i in range(k)]


def test_fedavg_identical_shards_is_a_fixed_point():
    cfg = small_config(num_clients=2, rounds=2)
    fed = FedAvg(identical_shards(2), cfg)
    fed.step()
    for c in fed.clients:
        assert c.params.pack().tobytes() == fed.global_params.pack().tobytes()


def test_fedavg_one_client_is_local_training():
    cfg = small_config(num_clients=1, rounds=3)
    shard = shards_for(cfg)[0][0]
    fed = FedAvg([shard], cfg)
    state = ClientState(shard=shard, params=fed.global_params.copy(),
                        optimizer=ad.make_optimizer("sgd", cfg.client_lr, cfg.client_weight_decay))
    fed.run()
    for _ in range(3):
        local_train(state, None, cfg.local_epochs)
    assert fed.global_params.pack().tobytes() == state.params.pack().tobytes()


def test_fedavg_weighted_mean_brute_force():
    cfg = small_config(rounds=1)
    shards = shards_for(cfg)[0]
    fed = FedAvg(shards, cfg)
    fed.step()
    packs = [c.params.pack() for c in fed.clients]
    sizes = [s.num_nodes for s in shards]
    total = sum(sizes)
    want = [sum(n * p[j] for n, p in zip(sizes, packs)) / total for j in range(packs[0].size)]
    np.testing.assert_allclose(fed.global_params.pack(), want, rtol=1e-12, atol=1e-14)


# ---------------------------------------------------------------- new clients


def trained_sim(rounds=2, **kw):
    cfg = small_config(num_clients=5, holdout=1, rounds=rounds, **kw)
    trained, held = build_shards(cfg)
    sim = FedSheafHN(trained, cfg)
    sim.run()
    return sim, held


def test_new_clients_require_training():
    cfg = small_config(num_clients=5, holdout=1)
    trained, held = build_shards(cfg)
    with pytest.raises(ValueError, match="at least one round"):
        add_new_clients(FedSheafHN(trained, cfg), held)


def test_new_clients_leave_server_bitwise_unchanged():
    sim, held = trained_sim()
    theta, phi = sim.server.theta.copy(), sim.server.phi.copy()
    graph = sim.server.graph
    res = add_new_clients(sim, held)
    assert sim.server.theta.bitwise_equal(theta) and sim.server.phi.bitwise_equal(phi)
    assert sim.server.graph is graph
    assert res.client_ids == [s.client_id for s in held]
    assert res.backbones.shape == (1, sim.P)
    assert 0.0 <= res.mean_accuracy <= 1.0


def test_duplicate_embedding_gets_the_same_backbone():
    sim, _ = trained_sim()
    sim.server.stack.zero_()
    x0 = sim.server.x0
    new = generate_for_embeddings(sim, x0[2:3])[0]
    k = sim.cfg.k_for(x0.shape[0] + 1)
    aug = attach_node(sim.server.graph, x0[2], k)
    omega = sim.forward(aug, sim.server.theta.constants(), sim.server.phi.constants()).data
    assert np.max(np.abs(new - omega[2])) <= 1e-6
