from __future__ import annotations

import random

import numpy as np
import pytest

from privflow.computing import (
    ComputingServer,
    NotLoaded,
    load_training_csv,
    write_training_csv,
)
from privflow.features import FixedPointCodec, WORD_MOD
from privflow.flows import Label
from privflow.knn import DuplicateInstanceId, EmptyTrainingSet, TrainingInstance
from privflow.masking import MaskVector, MaskedTuple
from tests.test_knn import instances, random_instances

CODEC = FixedPointCodec(1000)


def masked(serial, time, values):
    return MaskedTuple(serial, time, tuple(v % WORD_MOD for v in values))


class TestLoadTraining:
    def test_full_size_build(self):
        rng = random.Random(1)
        train = random_instances(rng, 2400)
        cs = ComputingServer()
        tree = cs.load_training(train)
        assert tree.size == 2400

    def test_reload_replaces(self):
        cs = ComputingServer()
        cs.load_training(instances([[10, 0, 0, 0, 0]]))
        first = cs.preliminary_compute(masked(0, 0, [3, 0, 0, 0, 0]))
        assert int(first.diffs[0][0]) == 7
        cs.load_training(instances([[100, 0, 0, 0, 0]]))
        second = cs.preliminary_compute(masked(0, 0, [3, 0, 0, 0, 0]))
        assert int(second.diffs[0][0]) == 97

    def test_empty_rejected(self):
        with pytest.raises(EmptyTrainingSet):
            ComputingServer().load_training([])

    def test_duplicate_id_rejected(self):
        bad = [
            TrainingInstance((0,) * 5, Label.NORMAL, 0),
            TrainingInstance((1,) * 5, Label.ATTACK, 0),
        ]
        with pytest.raises(DuplicateInstanceId):
            ComputingServer().load_training(bad)

    def test_not_loaded(self):
        with pytest.raises(NotLoaded):
            ComputingServer().preliminary_compute(masked(0, 0, [0] * 5))
        with pytest.raises(NotLoaded):
            ComputingServer().topology_blob()


class TestPreliminaryCompute:
    def test_small_subtraction(self):
        cs = ComputingServer()
        cs.load_training(instances([[70, 70, 70, 70, 70]]))
        result = cs.preliminary_compute(masked(1, 2, [65, 65, 65, 65, 65]))
        assert result.serial_number == 1
        assert result.time == 2
        assert [int(v) for v in result.diffs[0]] == [5] * 5

    def test_wraparound_when_masked_exceeds_train(self):
        cs = ComputingServer()
        cs.load_training(instances([[30, 0, 0, 0, 0]]))
        result = cs.preliminary_compute(masked(0, 0, [100, 0, 0, 0, 0]))
        assert int(result.diffs[0][0]) == WORD_MOD - 70

    def test_output_covers_every_instance_in_node_order(self):
        rng = random.Random(6)
        train = random_instances(rng, 41)
        cs = ComputingServer()
        tree = cs.load_training(train)
        result = cs.preliminary_compute(masked(0, 0, [rng.randrange(1000)] * 5))
        assert result.diffs.shape == (41, 5)
        by_id = {inst.instance_id: inst for inst in train}
        # row i must be the masked difference of node i's instance
        test_vals = None
        for row, node in zip(result.diffs, tree.nodes):
            feats = by_id[node.instance_id].features
            deltas = [
                (int(feats[j]) - int(row[j])) % WORD_MOD for j in range(5)
            ]
            if test_vals is None:
                test_vals = deltas
            assert deltas == test_vals  # same masked test vector every row

    def test_unmasking_reproduces_plaintext_differences(self):
        # full chain: mask the test vector, subtract at the server, then
        # remove the mask; must equal the direct plaintext differences
        from privflow.masking import gen_masks, remove_mask_from_difference

        rng = random.Random(12)
        train = random_instances(rng, 50, spread=100_000)
        cs = ComputingServer()
        tree = cs.load_training(train)
        by_id = {inst.instance_id: inst for inst in train}
        for _ in range(100):
            values = [rng.randrange(100_000) for _ in range(5)]
            mask = gen_masks(3, 4, rng)
            mt = MaskedTuple(
                3, 4,
                tuple((v + m) % WORD_MOD for v, m in zip(values, mask.masks)),
            )
            result = cs.preliminary_compute(mt)
            for row, node in zip(result.diffs, tree.nodes):
                feats = by_id[node.instance_id].features
                for j in range(5):
                    recovered = remove_mask_from_difference(
                        int(row[j]), mask.masks[j]
                    )
                    assert recovered == feats[j] - values[j]

    def test_diffs_stay_33_bit(self):
        rng = random.Random(9)
        cs = ComputingServer()
        cs.load_training(random_instances(rng, 20))
        result = cs.preliminary_compute(
            masked(0, 0, [rng.randrange(WORD_MOD) for _ in range(5)])
        )
        assert result.diffs.dtype == np.uint64
        assert int(result.diffs.max()) < WORD_MOD


class TestTrainingCsv:
    def test_roundtrip(self, tmp_path):
        rng = random.Random(4)
        train = random_instances(rng, 30)
        path = str(tmp_path / "train.csv")
        write_training_csv(path, train, CODEC)
        loaded = load_training_csv(path, CODEC)
        assert loaded == train

    def test_missing_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("instance_id,mpf\n0,1\n")
        with pytest.raises(ValueError):
            load_training_csv(str(path), CODEC)

    def test_decoded_units(self, tmp_path):
        path = tmp_path / "train.csv"
        path.write_text(
            "instance_id,mpf,mbf,pcf,gop,gsi,label\n"
            "0,5,750,1.0,1.333,0.667,NORMAL\n"
            "1,2,100,0.0,16.0,8.5,ATTACK\n"
        )
        a, b = load_training_csv(str(path), CODEC)
        assert a.features == (5000, 750_000, 1000, 1333, 667)
        assert a.label is Label.NORMAL
        assert b.features == (2000, 100_000, 0, 16_000, 8500)
        assert b.label is Label.ATTACK
