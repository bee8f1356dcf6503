"""
Unit tests for federated orchestration and the communication ledger
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '../../src'))

from models.adapted_model import AdaptedModel, Architecture, ModelSpec
from models.dataset import ClientDataset, LabeledSet, PoolConfig, TaskKind
from models.federated import (
    ROUNDS_COLUMNS, CommLedger, Direction, FederatedConfig, Strategy, trajectory_rounds
)
from models.param_vector import ParamVector
from models.rng import Rng
from services.data_service import make_base_pool, make_task_transforms, partition_distinct_tasks
from services.federated_service import (
    aggregate_uniform, ledger_predict, round_batches, run_fedit, run_local, shared_params_per_round
)
from services.model_service import evaluate, loss_and_grad, pretrain_base

SPEC = ModelSpec(Architecture.LINEAR_SOFTMAX, d_in=4, n_classes=3, rank=2)


def adapter_blocks(adapters, role):
    return [getattr(a, role) for a in adapters]


class TestLedger:
    """Unit tests for byte accounting"""

    def test_fedit_bytes_per_round(self):
        for r, m, n in [(1, 2, 3), (2, 4, 8), (8, 64, 32), (16, 768, 768)]:
            assert ledger_predict(Strategy.FEDIT, r, m, n, 1) == 4 * r * (m + n)

    def test_a_block_figure(self):
        # 16 x 9216 = 147,456 A parameters at float32
        assert ledger_predict(Strategy.FEDSA, 16, 1024, 9216, 1) == 589_824
        assert 589_824 / 2 ** 20 == 0.5625

    def test_fedsa_plus_ffa_equals_fedit(self):
        for r, m, n, T in [(1, 2, 3, 1), (4, 10, 20, 7), (8, 768, 768, 100)]:
            assert (ledger_predict(Strategy.FEDSA, r, m, n, T) + ledger_predict(Strategy.FFA_LORA, r, m, n, T)
                    == ledger_predict(Strategy.FEDIT, r, m, n, T))

    def test_local_only_is_free(self):
        assert ledger_predict(Strategy.LOCAL_ONLY, 4, 10, 10, 100, n_clients=8) == 0

    def test_client_multiplier(self):
        assert ledger_predict(Strategy.FEDIT, 2, 3, 4, 5, n_clients=6) == 6 * ledger_predict(Strategy.FEDIT, 2, 3, 4, 5)

    def test_invalid_dims(self):
        with pytest.raises(ValueError):
            ledger_predict(Strategy.FEDIT, 0, 3, 4, 1)

    def test_shared_params_per_round(self):
        assert shared_params_per_round(SPEC, Strategy.FEDIT) == 2 * (3 + 4)
        assert shared_params_per_round(SPEC, Strategy.FEDSA) == 2 * 4
        assert shared_params_per_round(SPEC, Strategy.FFA_LORA) == 2 * 3
        mlp = ModelSpec(Architecture.MLP1, d_in=4, n_classes=3, rank=2, d_hidden=5)
        assert shared_params_per_round(mlp, Strategy.FEDIT) == 2 * (5 + 4) + 2 * (3 + 5)

    def test_comm_ledger_totals(self):
        ledger = CommLedger()
        ledger.record(1, 0, Direction.UP, Strategy.FEDIT, 10)
        ledger.record(1, 0, Direction.DOWN, Strategy.FEDIT, 10)
        ledger.record(2, 1, Direction.UP, Strategy.FEDIT, 5)
        assert ledger.total() == 100
        assert ledger.total(Direction.UP) == 60
        assert ledger.total(client_id=1) == 20
        assert ledger.total(up_to_round=1) == 80
        assert ledger.bytes_for(1, 0, Direction.DOWN) == 40
        frame = ledger.to_frame()
        assert list(frame['cumulative_bytes']) == [40, 80, 100]
        with pytest.raises(ValueError):
            ledger.record(1, 0, Direction.UP, Strategy.FEDIT, -1)


class TestAggregation:
    """Unit tests for uniform averaging and batch plans"""

    def test_identical_vectors_are_bit_exact(self):
        v = ParamVector.from_items([('out.loraA', Rng(0).generator.normal(size=(3, 5)) * 1e3)])
        for k in (1, 2, 3, 7, 64):
            assert aggregate_uniform([v] * k) == v

    def test_mean(self):
        a = ParamVector.from_items([('w', [0.0, 2.0])])
        b = ParamVector.from_items([('w', [4.0, 6.0])])
        np.testing.assert_array_equal(aggregate_uniform([a, b])['w'], [2.0, 4.0])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate_uniform([])

    def test_round_batches_without_replacement(self):
        batches = round_batches(Rng(0).generator, 20, 5, 4)
        assert [len(b) for b in batches] == [5] * 4
        assert len(np.unique(np.concatenate(batches))) == 20

    def test_round_batches_reshuffle_and_clamp(self):
        batches = round_batches(Rng(0).generator, 3, 10, 2)
        assert [sorted(b.tolist()) for b in batches] == [[0, 1, 2], [0, 1, 2]]

    def test_trajectory_rounds(self):
        assert trajectory_rounds([5, 1, 5], 10) == [1, 5]
        with pytest.raises(ValueError):
            trajectory_rounds([11], 10)
        with pytest.raises(ValueError):
            trajectory_rounds([0], 10)


class TestRunFedit:
    """Unit tests for the federated training loop"""

    def setup_method(self):
        pool = make_base_pool(PoolConfig(n_classes=3, d_in=4, samples_per_class=100), Rng(0))
        transforms = make_task_transforms(TaskKind.INPUT_ROTATION, 3, 3, Rng(1), max_angle_deg=120.0)
        self.clients = partition_distinct_tasks(pool, transforms, 3, Rng(2), n_train=20, n_test=10)
        base = pretrain_base(SPEC, pool, Rng(3), steps=20)
        self.template = AdaptedModel.initialize(SPEC, base, Rng(4))
        self.config = FederatedConfig(rounds=4, local_iters=3, lr=0.1, batch_size=5)

    def test_local_only_uses_no_bytes(self):
        run = run_fedit(self.clients, self.template, self.config.with_strategy(Strategy.LOCAL_ONLY), Rng(7))
        assert run.ledger.total() == 0
        assert run.ledger.entries == []
        assert all(m.up_bytes == 0 for m in run.metrics)

    @pytest.mark.parametrize("strategy", [Strategy.FEDIT, Strategy.FEDSA, Strategy.FFA_LORA])
    def test_ledger_matches_prediction(self, strategy):
        run = run_fedit(self.clients, self.template, self.config.with_strategy(strategy), Rng(7))
        predicted = ledger_predict(strategy, SPEC.rank, 3, 4, self.config.rounds, n_clients=3)
        assert run.ledger.total(Direction.UP) == predicted
        assert run.ledger.total(Direction.DOWN) == predicted
        assert run.ledger.bytes_for(2, 1, Direction.UP) == predicted // (self.config.rounds * 3)

    def test_identical_clients_match_single_client(self):
        one = LabeledSet(self.clients[0].train.X[:1], self.clients[0].train.y[:1])
        clients = [ClientDataset(i, one, self.clients[0].test) for i in range(4)]
        config = FederatedConfig(rounds=1, local_iters=2, lr=0.1, batch_size=1)
        run = run_fedit(clients, self.template, config, Rng(7))
        local = run_local(clients[2], self.template, config, Rng(7))
        assert all(a.same_values(b) for a, b in zip(run.final_state.global_adapters, local.final_adapters))

    def test_single_step_update_is_mean_gradient(self):
        config = FederatedConfig(rounds=1, local_iters=1, lr=0.05, batch_size=20)
        clients = self.clients[:2]
        run = run_fedit(clients, self.template, config, Rng(7))
        grads = [loss_and_grad(self.template, c.train)[1] for c in clients]
        mean_grad = (grads[0].flatten() + grads[1].flatten()) / 2
        expected = self.template.adapter_vector().flatten() - 0.05 * mean_grad
        got = self.template.with_adapters(run.final_state.global_adapters).adapter_vector().flatten()
        np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-12)

    def test_fedsa_shares_a_and_keeps_b_local(self):
        run = run_fedit(self.clients, self.template, self.config.with_strategy(Strategy.FEDSA), Rng(7))
        views = run.final_state.client_adapters
        a_blocks = [adapter_blocks(v, 'A')[0] for v in views]
        b_blocks = [adapter_blocks(v, 'B')[0] for v in views]
        assert all(np.array_equal(a_blocks[0], a) for a in a_blocks[1:])
        assert not np.array_equal(b_blocks[0], b_blocks[1])
        assert not np.array_equal(b_blocks[1], b_blocks[2])

    def test_fedsa_b_blocks_diverge_by_round_two(self):
        run = run_fedit(self.clients, self.template, self.config.with_strategy(Strategy.FEDSA), Rng(7),
                        checkpoint_rounds=[2])
        b_blocks = [run.client_adapters_at(2, cid)[0].B for cid in range(3)]
        assert not np.array_equal(b_blocks[0], b_blocks[1])
        assert not np.array_equal(b_blocks[0], b_blocks[2])
        # B is never uploaded, so the server copy keeps its initial value
        np.testing.assert_array_equal(run.checkpoints[2].global_adapters[0].B, self.template.adapters[0].B)

    def test_ffa_lora_keeps_a_frozen(self):
        run = run_fedit(self.clients, self.template, self.config.with_strategy(Strategy.FFA_LORA), Rng(7))
        initial_a = self.template.adapters[0].A
        for view in run.final_state.client_adapters:
            np.testing.assert_array_equal(view[0].A, initial_a)
            assert np.any(view[0].B != 0)

    def test_fedit_clients_share_global_adapters(self):
        run = run_fedit(self.clients, self.template, self.config, Rng(7))
        for view in run.final_state.client_adapters:
            assert view[0].same_values(run.final_state.global_adapters[0])

    def test_base_never_changes(self):
        run = run_fedit(self.clients, self.template, self.config, Rng(7))
        for view in run.final_state.client_adapters:
            assert self.template.with_adapters(view).base == self.template.base

    def test_deterministic_across_worker_counts(self):
        serial = run_fedit(self.clients, self.template, self.config, Rng(7), checkpoint_rounds=[2])
        config = FederatedConfig(rounds=4, local_iters=3, lr=0.1, batch_size=5, workers=3)
        threaded = run_fedit(self.clients, self.template, config, Rng(7), checkpoint_rounds=[2])
        for cid in range(3):
            for a, b in zip(serial.client_adapters_at(2, cid), threaded.client_adapters_at(2, cid)):
                assert a.same_values(b)
        assert serial.metrics_frame().equals(threaded.metrics_frame())

    def test_checkpoints_and_eval_cadence(self):
        config = FederatedConfig(rounds=5, local_iters=1, lr=0.1, batch_size=5, eval_every=2)
        run = run_fedit(self.clients, self.template, config, Rng(7), checkpoint_rounds=[1, 3])
        assert sorted(run.checkpoints) == [1, 3]
        frame = run.metrics_frame()
        assert list(frame.columns) == ROUNDS_COLUMNS
        assert sorted(frame['round'].unique()) == [2, 4, 5]
        assert len(frame) == 3 * 3

    def test_run_local_equals_one_client_fedit(self):
        client = self.clients[1]
        local = run_local(client, self.template, self.config, Rng(7), checkpoint_rounds=[2])
        fedit = run_fedit([client], self.template, self.config, Rng(7), checkpoint_rounds=[2])
        assert all(a.same_values(b) for a, b in zip(local.final_adapters, fedit.final_state.client_adapters[0]))
        assert all(a.same_values(b) for a, b in zip(local.checkpoints[2], fedit.checkpoints[2].client_adapters[0]))

    def test_long_local_training_lowers_train_loss(self):
        client = self.clients[0]
        config = FederatedConfig(rounds=300, local_iters=1, lr=0.1, batch_size=5, eval_every=300)
        early, late = [], []
        for seed in range(5):
            local = run_local(client, self.template, config, Rng(30 + seed), checkpoint_rounds=[10, 300])
            early.append(evaluate(self.template.with_adapters(local.checkpoints[10]), client.train)[0])
            late.append(evaluate(self.template.with_adapters(local.checkpoints[300]), client.train)[0])
        assert np.mean(late) < np.mean(early)

    def test_local_only_matches_run_local_per_client(self):
        run = run_fedit(self.clients, self.template, self.config.with_strategy(Strategy.LOCAL_ONLY), Rng(7))
        for i, client in enumerate(self.clients):
            local = run_local(client, self.template, self.config, Rng(7))
            assert all(a.same_values(b) for a, b in zip(local.final_adapters, run.final_state.client_adapters[i]))

    def test_requires_clients(self):
        with pytest.raises(ValueError):
            run_fedit([], self.template, self.config, Rng(0))
