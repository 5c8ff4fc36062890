"""
Tests for federation.py module.

Tests cover:
- FedAvg weighting, ordering and schema checks
- FedAvgM and FedYogi server recurrences
- FedBN broadcast and FedProx local training
- Full experiments on the tiny cohorts: determinism, tracks, failures
- Strategy and paradigm comparisons, desk-scale acceptance runs
"""

import numpy as np
import pytest

import federation
from autograd import LayerTag, ParamKind
from federation import (
    ClientUpdate,
    FederationError,
    ServerState,
    aggregate,
    aggregate_fedavg,
    aggregate_fedavgm,
    aggregate_fedyogi,
    broadcast,
    build_federated_dataset,
    local_train,
    run_experiment,
)
from schemas import FedAvgMParams, FedYogiParams, ParadigmConfig, StrategyConfig, desk_experiment_config
from unet import NamedParameterSet, build_unet

WEIGHT = LayerTag(ParamKind.CONV_WEIGHT, 0)
GAMMA = LayerTag(ParamKind.BN_GAMMA, 0)
RUNNING_MEAN = LayerTag(ParamKind.BN_RUNNING_MEAN, 0)


def _pset(weight, gamma=1.0, running_mean=0.0, dtype=np.float64):
    return NamedParameterSet(
        [
            ("conv.weight", np.atleast_1d(np.asarray(weight, dtype=dtype)), WEIGHT),
            ("bn.gamma", np.atleast_1d(np.asarray(gamma, dtype=dtype)), GAMMA),
            ("bn.running_mean", np.atleast_1d(np.asarray(running_mean, dtype=dtype)), RUNNING_MEAN),
        ]
    )


def _update(client_id, weight, n_k=1, **kwargs):
    return ClientUpdate(client_id=client_id, params=_pset(weight, **kwargs), n_k=n_k)


def _with_federation(cfg, **updates):
    return cfg.model_copy(update={"federation": cfg.federation.model_copy(update=updates)})


@pytest.fixture(scope="module")
def tiny_dataset(tiny_experiment_config, tiny_cohorts):
    return build_federated_dataset(tiny_experiment_config, tiny_cohorts)


# ============================================================================
# FedAvg
# ============================================================================


class TestAggregateFedAvg:
    """Sample-weighted averaging of full parameter sets."""

    def test_weighted_by_sample_count(self):
        result = aggregate_fedavg([_update(0, 1.0, n_k=1), _update(1, 3.0, n_k=3)])
        assert result["conv.weight"][0] == pytest.approx(2.5)

    def test_running_stats_averaged_too(self):
        result = aggregate_fedavg([_update(0, 0.0, running_mean=2.0), _update(1, 0.0, running_mean=4.0)])
        assert result["bn.running_mean"][0] == pytest.approx(3.0)

    @pytest.mark.parametrize("k", [2, 4, 8])
    def test_matches_weighted_sum_oracle(self, rng, k):
        weights = rng.standard_normal((k, 5))
        counts = [int(c) for c in rng.integers(1, 50, size=k)]
        updates = [ClientUpdate(i, NamedParameterSet([("w", weights[i], WEIGHT)]), counts[i]) for i in range(k)]
        n = sum(counts)
        expected = np.zeros(5)
        for j in range(5):
            total = 0.0
            for i in range(k):
                total += (counts[i] / n) * float(weights[i, j])
            expected[j] = total
        result = aggregate_fedavg(updates)["w"]
        assert result.dtype == np.float64
        np.testing.assert_array_equal(result, expected)

    def test_float32_entries_keep_dtype(self, rng):
        updates = [_update(i, float(rng.standard_normal()), n_k=i + 1, dtype=np.float32) for i in range(3)]
        assert aggregate_fedavg(updates)["conv.weight"].dtype == np.float32

    def test_within_client_range(self, rng):
        updates = [_update(i, float(rng.standard_normal()), n_k=int(rng.integers(1, 9))) for i in range(5)]
        values = [u.params["conv.weight"][0] for u in updates]
        result = aggregate_fedavg(updates)["conv.weight"][0]
        assert min(values) <= result <= max(values)

    def test_arrival_order_irrelevant(self, rng):
        updates = [_update(i, float(rng.standard_normal()), n_k=int(rng.integers(1, 9))) for i in range(6)]
        forward = aggregate_fedavg(updates)
        shuffled = aggregate_fedavg([updates[i] for i in rng.permutation(6)])
        assert forward.equals(shuffled)

    def test_no_updates(self):
        with pytest.raises(ValueError, match="no client updates"):
            aggregate_fedavg([])

    def test_schema_mismatch(self):
        other = ClientUpdate(1, NamedParameterSet([("conv.weight", np.zeros(2), WEIGHT)]), 1)
        with pytest.raises(ValueError):
            aggregate_fedavg([_update(0, 1.0), other])

    def test_non_positive_sample_count(self):
        with pytest.raises(ValueError, match="n_k"):
            _update(0, 1.0, n_k=0)


# ============================================================================
# Server Optimizers
# ============================================================================


class TestServerState:
    def test_fedavg_has_no_buffers(self):
        state = ServerState.initial(_pset(1.0), StrategyConfig())
        assert state.momentum is None and state.yogi_m is None and state.yogi_v is None

    def test_fedavgm_momentum_starts_at_zero(self):
        state = ServerState.initial(_pset(1.0), StrategyConfig(base="fedavgm"))
        assert state.momentum.names() == ["conv.weight", "bn.gamma"]
        assert not state.momentum["conv.weight"].any()

    def test_fedyogi_second_moment_starts_at_tau_squared(self):
        strategy = StrategyConfig(base="fedyogi", fedyogi=FedYogiParams(tau=0.01))
        state = ServerState.initial(_pset(1.0), strategy)
        assert state.yogi_v["bn.gamma"][0] == pytest.approx(1e-4)
        assert "bn.running_mean" not in state.yogi_v


class TestFedAvgM:
    """Server momentum on the averaged client delta."""

    def test_zero_momentum_unit_rate_is_fedavg(self, rng):
        updates = [_update(i, float(rng.standard_normal()), n_k=i + 1, dtype=np.float32) for i in range(4)]
        state = ServerState.initial(_pset(0.7, dtype=np.float32), StrategyConfig(base="fedavgm"))
        result = aggregate_fedavgm(updates, state, beta=0.0, eta_s=1.0)
        assert result.global_params.equals(aggregate_fedavg(updates))

    def test_two_round_recurrence(self):
        beta, eta_s = 0.3, 0.2
        state = ServerState.initial(_pset(1.0), StrategyConfig(base="fedavgm"))
        w, v = 1.0, 0.0
        for avg in (0.5, 0.4):
            state = aggregate_fedavgm([_update(0, avg), _update(1, avg)], state, beta, eta_s)
            v = beta * v + (w - avg)
            w = w - eta_s * v
            assert state.global_params["conv.weight"][0] == pytest.approx(w, abs=1e-12)
            assert state.momentum["conv.weight"][0] == pytest.approx(v, abs=1e-12)
        assert state.round_index == 2

    def test_running_stats_take_average(self):
        state = ServerState.initial(_pset(1.0, running_mean=9.0), StrategyConfig(base="fedavgm"))
        updates = [_update(0, 0.0, running_mean=1.0), _update(1, 0.0, running_mean=3.0)]
        result = aggregate_fedavgm(updates, state, 0.3, 0.2)
        assert result.global_params["bn.running_mean"][0] == pytest.approx(2.0)

    def test_missing_buffer(self):
        with pytest.raises(ValueError, match="momentum"):
            aggregate_fedavgm([_update(0, 1.0)], ServerState.initial(_pset(1.0), StrategyConfig()), 0.3, 0.2)


class TestFedYogi:
    """Adaptive server step with the sign-controlled second moment."""

    def test_two_round_recurrence(self):
        eta, beta1, beta2, tau = 0.03, 0.6, 0.6, 0.01
        strategy = StrategyConfig(base="fedyogi", fedyogi=FedYogiParams(eta=eta, beta1=beta1, beta2=beta2, tau=tau))
        state = ServerState.initial(_pset(1.0), strategy)
        w, m, v = 1.0, 0.0, tau**2
        for avg in (0.8, 0.9):
            state = aggregate_fedyogi([_update(0, avg), _update(1, avg)], state, eta, beta1, beta2, tau)
            d = avg - w
            m = beta1 * m + (1 - beta1) * d
            v = v - (1 - beta2) * d * d * np.sign(v - d * d)
            w = w + eta * m / (np.sqrt(v) + tau)
            assert state.global_params["conv.weight"][0] == pytest.approx(w, abs=1e-12)
            assert state.yogi_v["conv.weight"][0] == pytest.approx(v, abs=1e-12)

    @pytest.mark.parametrize("tau", [1e-3, 0.01, 0.1])
    def test_second_moment_stays_positive(self, rng, tau):
        strategy = StrategyConfig(base="fedyogi", fedyogi=FedYogiParams(tau=tau))
        state = ServerState.initial(_pset(np.zeros(16), gamma=np.ones(16), running_mean=np.zeros(16)), strategy)
        for _ in range(50):
            current = state.global_params["conv.weight"]
            target = current + rng.standard_normal(16) * 10.0 ** rng.uniform(-4, 1)
            update = ClientUpdate(0, _pset(target, gamma=np.ones(16), running_mean=np.zeros(16)), 1)
            state = aggregate_fedyogi([update], state, 0.03, 0.6, 0.6, tau)
            assert np.all(state.yogi_v["conv.weight"] > 0.0)
            assert np.all(state.yogi_v["bn.gamma"] > 0.0)

    def test_step_moves_toward_clients(self):
        strategy = StrategyConfig(base="fedyogi")
        state = ServerState.initial(_pset(1.0), strategy)
        result = aggregate([_update(0, 0.0), _update(1, 0.0)], state, strategy)
        assert result.global_params["conv.weight"][0] < 1.0
        assert result.round_index == 1

    def test_uninitialized_state(self):
        with pytest.raises(ValueError, match="not initialized"):
            aggregate_fedyogi([_update(0, 1.0)], ServerState(global_params=_pset(1.0)), 0.03, 0.6, 0.6, 0.01)


class TestAggregateDispatch:
    @pytest.mark.parametrize("base", ["fedavg", "fedavgm", "fedyogi"])
    def test_round_counter_advances(self, base):
        strategy = StrategyConfig(base=base, fedavgm=FedAvgMParams())
        state = ServerState.initial(_pset(1.0), strategy)
        assert aggregate([_update(0, 0.5)], state, strategy).round_index == 1


# ============================================================================
# FedBN and FedProx
# ============================================================================


class TestBroadcast:
    def test_fedbn_withholds_batchnorm(self):
        state = ServerState.initial(_pset(1.0), StrategyConfig(fedbn=True))
        assert broadcast(state, fedbn=True).names() == ["conv.weight"]

    def test_plain_broadcast_sends_everything(self):
        state = ServerState.initial(_pset(1.0), StrategyConfig())
        assert broadcast(state, fedbn=False).equals(state.global_params)


class TestLocalTrain:
    """Client training from a received global state."""

    def _run(self, cfg, client, prox_mu, seed=5, epochs=1, received=None, training=None):
        model = build_unet(cfg.model, seed=1)
        received = received if received is not None else build_unet(cfg.model, seed=2).flatten()
        update = local_train(
            client.client_id,
            model,
            received,
            client.train_records,
            cfg.paradigm,
            training or cfg.training,
            epochs,
            prox_mu,
            seed,
        )
        return update, received

    def test_update_reports_samples(self, tiny_experiment_config, tiny_dataset):
        client = tiny_dataset.clients[0]
        update, _ = self._run(tiny_experiment_config, client, prox_mu=0.0)
        assert update.n_k == len(client.train_records)
        batch_size = tiny_experiment_config.training.batch_size
        assert update.num_steps == -(-len(client.train_records) // batch_size)
        assert np.isfinite(update.loss)
        assert update.prox_loss == 0.0

    def test_deterministic(self, tiny_experiment_config, tiny_dataset):
        client = tiny_dataset.clients[0]
        a, _ = self._run(tiny_experiment_config, client, prox_mu=0.0)
        b, _ = self._run(tiny_experiment_config, client, prox_mu=0.0)
        assert a.params.equals(b.params)

    def test_proximal_term_limits_drift(self, tiny_experiment_config, tiny_dataset):
        client = tiny_dataset.clients[0]
        free, anchor = self._run(tiny_experiment_config, client, prox_mu=0.0, epochs=3)
        held, _ = self._run(tiny_experiment_config, client, prox_mu=1e4, epochs=3)

        def drift(update):
            return sum(
                float(np.abs(update.params[n].astype(np.float64) - anchor[n]).sum())
                for n, _, tag in anchor
                if tag.kind == ParamKind.CONV_WEIGHT
            )

        assert held.prox_loss > 0.0
        assert drift(held) < drift(free)

    def test_fedbn_keeps_local_batchnorm(self, tiny_experiment_config, tiny_dataset):
        client = tiny_dataset.clients[0]
        model = build_unet(tiny_experiment_config.model, seed=1)
        local_gamma = model.flatten()["stem.entry.bn.gamma"].copy()
        received = build_unet(tiny_experiment_config.model, seed=2).flatten()
        received = received.with_values({"stem.entry.bn.gamma": received["stem.entry.bn.gamma"] + 5.0})
        training = tiny_experiment_config.training.model_copy(update={"lr": 1e-9})
        update = local_train(
            0,
            model,
            received.without_batchnorm(),
            client.train_records,
            tiny_experiment_config.paradigm,
            training,
            1,
            0.0,
            3,
        )
        np.testing.assert_allclose(update.params["stem.entry.bn.gamma"], local_gamma, atol=1e-6)

    def test_no_records(self, tiny_experiment_config):
        cfg = tiny_experiment_config
        model = build_unet(cfg.model)
        with pytest.raises(ValueError, match="no training records"):
            local_train(0, model, model.flatten(), [], cfg.paradigm, cfg.training, 1, 0.0, 0)


# ============================================================================
# Experiments
# ============================================================================


class TestDataset:
    def test_clients_follow_centre_order(self, tiny_dataset):
        assert [c.centre_id for c in tiny_dataset.clients] == ["A", "B"]
        assert [c.client_id for c in tiny_dataset.clients] == [0, 1]
        assert tiny_dataset.unseen_centre_id == "E"
        assert len(tiny_dataset.unseen_patients) == 5

    def test_training_records_cover_three_planes(self, tiny_dataset):
        planes = {r.plane for r in tiny_dataset.clients[0].train_records}
        assert len(planes) == 3

    def test_splits(self, tiny_dataset):
        client = tiny_dataset.clients[1]
        assert len(client.val_patients) == 2
        assert len(client.test_patients) == 2


class TestRunExperiment:
    """End-to-end rounds on the tiny cohorts."""

    def test_records_and_final_test(self, tiny_experiment_config, tiny_dataset):
        seen = []
        result = run_experiment(tiny_experiment_config, tiny_dataset, on_round=seen.append)
        assert [r.round_index for r in result.records] == [0, 1]
        assert seen == result.records
        assert set(result.final_test) == {"A", "B"}
        assert result.records[1].strategy == "FedAvg"
        assert set(result.records[1].client_loss) == {"A", "B"}
        assert result.best_round in (0, 1)

    def test_deterministic(self, tiny_experiment_config, tiny_dataset):
        a = run_experiment(tiny_experiment_config, tiny_dataset)
        b = run_experiment(tiny_experiment_config, tiny_dataset)
        assert a.global_parameters().equals(b.global_parameters())
        assert a.records[-1].rows() == b.records[-1].rows()

    def test_rows_include_unseen_centre(self, tiny_experiment_config, tiny_dataset):
        rows = run_experiment(tiny_experiment_config, tiny_dataset).records[-1].rows()
        assert [r["centre_id"] for r in rows] == ["A", "B", "E"]
        assert rows[-1]["loss"] is None
        assert rows[0]["mae"] >= 0.0

    def test_zero_rounds_evaluates_initial_model(self, tiny_experiment_config, tiny_dataset):
        cfg = _with_federation(tiny_experiment_config, rounds=0)
        result = run_experiment(cfg, tiny_dataset)
        assert len(result.records) == 1
        assert result.best_round == 0
        assert result.states["main"].round_index == 0

    def test_server_optimizer_run(self, tiny_experiment_config, tiny_dataset):
        cfg = _with_federation(tiny_experiment_config, strategy=StrategyConfig(base="fedyogi", fedbn=True))
        result = run_experiment(cfg, tiny_dataset)
        assert result.states["main"].yogi_m is not None
        assert result.records[-1].strategy == "FedYogi + FedBN"

    def test_plane_tracks(self, tiny_experiment_config, tiny_dataset):
        cfg = tiny_experiment_config.model_copy(update={"paradigm": ParadigmConfig(kind="two_d_plus")})
        result = run_experiment(cfg, tiny_dataset)
        assert set(result.states) == {"axial", "coronal", "sagittal"}
        names = result.global_parameters().names()
        assert all(n.split("/", 1)[0] in result.states for n in names)
        split = federation.split_tracks(result.global_parameters(), federation.track_names(cfg.paradigm))
        assert split["coronal"].equals(result.states["coronal"].global_params)

    def test_patch_track_uses_patch_sized_network(self, tiny_experiment_config, tiny_dataset):
        paradigm = ParadigmConfig(kind="patches_2d", patch_size=12)
        cfg = tiny_experiment_config.model_copy(update={"paradigm": paradigm})
        assert federation.track_model_config(cfg).input_size == 12
        result = run_experiment(cfg, tiny_dataset)
        assert len(result.records) == 2

    def test_client_failure_names_round_and_client(self, tiny_experiment_config, tiny_dataset, mocker):
        original = federation.local_train

        def flaky(client_id, *args, **kwargs):
            if client_id == 1:
                raise FloatingPointError("non-finite loss")
            return original(client_id, *args, **kwargs)

        patched = mocker.patch.object(federation, "local_train", side_effect=flaky)
        with pytest.raises(FederationError, match="round 1, client 1") as info:
            run_experiment(tiny_experiment_config, tiny_dataset)
        assert info.value.round_index == 1
        assert info.value.client_id == 1
        assert isinstance(info.value.__cause__, FloatingPointError)
        assert {c.args[0] for c in patched.call_args_list} == {0, 1}

    def test_fedyogi_clients_use_eta_l(self, tiny_experiment_config, tiny_dataset, mocker):
        strategy = StrategyConfig(base="fedyogi", fedyogi=FedYogiParams(eta_l=5e-4))
        cfg = _with_federation(tiny_experiment_config, strategy=strategy)
        assert federation.client_training_config(cfg).lr == 5e-4
        spy = mocker.spy(federation, "local_train")
        run_experiment(cfg, tiny_dataset)
        assert spy.call_count == 2
        assert all(c.args[5].lr == 5e-4 for c in spy.call_args_list)

    def test_eta_l_unset_follows_training_lr(self, tiny_experiment_config):
        cfg = _with_federation(tiny_experiment_config, strategy=StrategyConfig(base="fedyogi"))
        assert federation.client_training_config(cfg) is cfg.training
        avgm = _with_federation(tiny_experiment_config, strategy=StrategyConfig(base="fedavgm"))
        assert federation.client_training_config(avgm) is avgm.training

    def test_zero_prox_mu_is_plain_fedavg(self, tiny_experiment_config, tiny_dataset):
        plain = run_experiment(_with_federation(tiny_experiment_config, strategy=StrategyConfig()), tiny_dataset)
        zero_mu = _with_federation(tiny_experiment_config, strategy=StrategyConfig(base="fedavg", prox_mu=0.0))
        proximal = run_experiment(zero_mu, tiny_dataset)
        assert proximal.global_parameters().equals(plain.global_parameters())
        assert proximal.records[-1].rows() == plain.records[-1].rows()


# ============================================================================
# Comparisons
# ============================================================================


@pytest.mark.slow
class TestComparisons:
    def test_strategy_rows(self, tiny_experiment_config, tiny_dataset):
        strategies = [StrategyConfig(), StrategyConfig(base="fedavgm")]
        rows = federation.compare_strategies(
            tiny_experiment_config, repeats=2, strategies=strategies, dataset=tiny_dataset
        )
        assert [r["strategy"] for r in rows] == ["FedAvg", "FedAvgM"]
        assert len(rows[0]["best_rounds"]) == 2
        assert rows[0]["mae_std"] >= 0.0
        assert rows[0]["round_mean"] == pytest.approx(np.mean(rows[0]["best_rounds"]))

    def test_paradigm_rows(self, tiny_experiment_config, tiny_dataset):
        paradigms = [ParadigmConfig(kind="random_multi_2d"), ParadigmConfig(kind="multi_2d")]
        rows, wins = federation.compare_paradigms(
            tiny_experiment_config, repeats=1, paradigms=paradigms, dataset=tiny_dataset
        )
        assert [r["paradigm"] for r in rows] == ["random_multi_2d", "multi_2d"]
        assert wins in (0, 1)


@pytest.mark.slow
class TestDeskAcceptance:
    """Four desk centres, unseen centre E, 64^3 volumes, ten rounds of FedAvg + FedProx."""

    @pytest.fixture(scope="class")
    def desk(self):
        cfg = desk_experiment_config(seed=0, rounds=10)
        return cfg, build_federated_dataset(cfg)

    def test_best_round_halves_unseen_mae(self, desk):
        cfg, dataset = desk
        result = run_experiment(cfg, dataset)
        initial = result.records[0].unseen_median_mae()
        best = next(r for r in result.records if r.round_index == result.best_round).unseen_median_mae()
        assert best < 0.5 * initial

    def test_random_multi_2d_not_worse_than_multi_2d(self, desk):
        cfg, dataset = desk
        paradigms = [ParadigmConfig(kind="random_multi_2d"), ParadigmConfig(kind="multi_2d")]
        rows, wins = federation.compare_paradigms(cfg, repeats=5, paradigms=paradigms, dataset=dataset)
        assert [r["paradigm"] for r in rows] == ["random_multi_2d", "multi_2d"]
        assert wins >= 4
