import hashlib
import math

import numpy as np
import pytest

from augsearch.rng import Rng
from augsearch.search import (
    SearchConfig,
    SearchTree,
    run_search,
    sample_path,
    select_best_path,
    update,
)
from augsearch.transforms import (
    AugmentationSequence,
    TransformKind,
    enumerate_choices,
    random_sequence,
    render_sequence,
)

SMALL_KINDS = (TransformKind.Identity, TransformKind.Invert, TransformKind.Cutout)
PLANT_KINDS = SMALL_KINDS + (TransformKind.Scale,)


def hash_scorer(seq):
    """Deterministic pseudo-random score in (0, 1) from the sequence text."""
    digest = hashlib.sha256(render_sequence(seq).encode()).digest()
    return int.from_bytes(digest[:8], "little") / 2**64


def all_sequences(kinds, n):
    """Independent exhaustive enumeration of legal length-n sequences."""
    results = []

    def rec(prefix, used):
        if len(prefix) == n:
            results.append(AugmentationSequence(tuple(prefix), max_len=n))
            return
        for spec in enumerate_choices(used):
            if spec.kind not in kinds:
                continue
            rec(
                prefix + [spec],
                used | ({spec.kind} if spec.kind is not TransformKind.Identity else set()),
            )

    rec([], set())
    return results


def mismatch_scorer(target):
    """Planted oracle: fraction of slots differing from the target sequence."""

    def score(seq):
        n = len(target.specs)
        padded = list(seq.specs) + [None] * (n - len(seq.specs))
        return sum(1 for a, b in zip(padded, target.specs) if a != b) / n

    return score


class TestUpdateMath:
    def _tree_with_path(self, baseline=1.0):
        cfg = SearchConfig(
            sequence_length=2, kinds=SMALL_KINDS, reward_baseline=baseline, seed=0
        )
        tree = SearchTree(cfg)
        seq = sample_path(tree, Rng(5))
        return tree, seq

    def test_score_equal_baseline_gives_zero_reward(self):
        tree, seq = self._tree_with_path(baseline=1.0)
        update(tree, seq, 1.0)
        assert tree.root.total_reward == 0.0 and tree.root.visits == 1

    def test_zero_score_gives_full_reward(self):
        tree, seq = self._tree_with_path(baseline=1.0)
        update(tree, seq, 0.0)
        assert tree.root.total_reward == 1.0

    def test_mean_of_two_rewards(self):
        tree, seq = self._tree_with_path(baseline=1.0)
        update(tree, seq, 0.0)
        update(tree, seq, 1.0)
        child = tree.root.children[seq.specs[0]]
        assert child.visits == 2 and child.q() == 0.5

    def test_infinite_score_clamps_to_zero(self):
        tree, seq = self._tree_with_path(baseline=0.5)
        update(tree, seq, float("inf"))
        assert tree.root.total_reward == 0.0

    def test_virtual_loss_add_remove(self):
        tree, seq = self._tree_with_path()
        tree.add_virtual(seq)
        assert tree.root.virtual == 1
        tree.remove_virtual(seq)
        assert tree.root.virtual == 0


class TestSamplePath:
    def test_fresh_tree_returns_full_legal_sequence(self):
        cfg = SearchConfig(sequence_length=8, reward_baseline=1.0, seed=0)
        tree = SearchTree(cfg)
        seq = sample_path(tree, Rng(0))
        assert len(seq) == 8  # constructor enforces legality

    def test_legality_fuzz(self):
        cfg = SearchConfig(sequence_length=8, reward_baseline=1.0, seed=0)
        tree = SearchTree(cfg)
        rng = Rng(99)
        for i in range(2000):
            seq = sample_path(tree, rng)
            update(tree, seq, hash_scorer(seq))
        # structural audit: children at every node exclude kinds used above
        def audit(node, used):
            for spec, child in node.children.items():
                assert spec.kind is TransformKind.Identity or spec.kind not in used
                audit(
                    child,
                    used | ({spec.kind} if spec.kind is not TransformKind.Identity else set()),
                )

        audit(tree.root, set())

    def test_exploitation_prefers_high_q(self):
        cfg = SearchConfig(
            sequence_length=1, kinds=SMALL_KINDS, reward_baseline=1.0,
            exploration_c=0.01, seed=0,
        )
        tree = SearchTree(cfg)
        rng = Rng(1)
        # visit every child once (all expansions)
        for _ in range(18):
            seq = sample_path(tree, rng)
            update(tree, seq, 0.9)  # low reward everywhere
        good = next(iter(tree.root.children))
        tree.root.children[good].total_reward = tree.root.children[good].visits * 1.0
        picks = [sample_path(tree, rng).specs[0] for _ in range(10)]
        assert all(p == good for p in picks)

    def test_conservation_root_visits(self):
        cfg = SearchConfig(sequence_length=2, kinds=SMALL_KINDS, reward_baseline=1.0, seed=0)
        tree = SearchTree(cfg)
        rng = Rng(3)
        for i in range(137):
            seq = sample_path(tree, rng)
            update(tree, seq, hash_scorer(seq))
        assert tree.root.visits == 137


class TestSelectBest:
    def test_argmin_over_cache(self):
        cfg = SearchConfig(sequence_length=1, kinds=SMALL_KINDS, reward_baseline=1.0, seed=0)
        tree = SearchTree(cfg)
        rng = Rng(0)
        scores = {}
        for _ in range(6):
            seq = sample_path(tree, rng)
            s = hash_scorer(seq)
            scores[render_sequence(seq)] = s
            update(tree, seq, s)
        best = select_best_path(tree)
        assert scores[render_sequence(best)] == min(scores.values())

    def test_tie_broken_lexicographically(self):
        cfg = SearchConfig(sequence_length=1, kinds=SMALL_KINDS, reward_baseline=1.0, seed=0)
        tree = SearchTree(cfg)
        rng = Rng(0)
        seqs = [sample_path(tree, rng) for _ in range(3)]
        for seq in seqs:
            update(tree, seq, 0.25)
        best = select_best_path(tree)
        assert render_sequence(best) == min(render_sequence(s) for s in seqs)

    def test_empty_cache_raises(self):
        tree = SearchTree(SearchConfig(reward_baseline=1.0))
        with pytest.raises(ValueError):
            select_best_path(tree)


class TestRunSearch:
    def test_plateau_patience_one_constant_scorer(self):
        cfg = SearchConfig(
            sequence_length=2, kinds=SMALL_KINDS, plateau_patience=1,
            max_iterations=100, reward_baseline=1.0, seed=0,
        )
        result = run_search(None, None, cfg, None, scorer=lambda seq: 0.5)
        assert len(result.iteration_log) == 2

    def test_cache_skips_rescoring(self):
        calls = {}

        def counting_scorer(seq):
            key = render_sequence(seq)
            calls[key] = calls.get(key, 0) + 1
            return hash_scorer(seq)

        cfg = SearchConfig(
            sequence_length=2, kinds=SMALL_KINDS, plateau_patience=300,
            max_iterations=600, reward_baseline=1.0, seed=1,
        )
        result = run_search(None, None, cfg, None, scorer=counting_scorer)
        assert all(count == 1 for count in calls.values())
        assert len(result.iteration_log) > len(calls)  # had cache hits

    def test_log_best_so_far_monotone(self):
        cfg = SearchConfig(
            sequence_length=2, kinds=SMALL_KINDS, plateau_patience=50,
            max_iterations=100, reward_baseline=1.0, seed=2,
        )
        result = run_search(None, None, cfg, None, scorer=hash_scorer)
        bests = [b for _, _, _, b in result.iteration_log]
        assert all(a >= b for a, b in zip(bests, bests[1:]))
        assert result.best_score == bests[-1]

    def test_brute_force_equivalence_smoke(self):
        # full sweep over 100 seeds lives in the acceptance suite
        space = all_sequences(set(SMALL_KINDS), 2)
        brute_best = min(hash_scorer(s) for s in space)
        for seed in range(5):
            cfg = SearchConfig(
                sequence_length=2, kinds=SMALL_KINDS, plateau_patience=1500,
                max_iterations=5000, reward_baseline=1.0, seed=seed,
            )
            result = run_search(None, None, cfg, None, scorer=hash_scorer)
            assert result.best_score == brute_best

    def test_planted_oracle_smoke(self):
        space = all_sequences(set(PLANT_KINDS), 3)
        rng = Rng(77)
        found = 0
        for seed in range(10):
            target = space[int(rng.integers(0, len(space) - 1))]
            scorer = mismatch_scorer(target)
            cfg = SearchConfig(
                sequence_length=3, kinds=PLANT_KINDS, plateau_patience=500,
                max_iterations=500, reward_baseline=1.0, seed=seed,
                exploration_c=0.7,
            )
            result = run_search(None, None, cfg, None, scorer=scorer)
            found += result.best_score == 0.0
        assert found >= 8

    def test_regret_no_worse_than_random(self):
        space = all_sequences(set(PLANT_KINDS), 3)
        target = space[5]
        scorer = mismatch_scorer(target)
        mcts_scores, random_scores = [], []
        for seed in range(20):
            cfg = SearchConfig(
                sequence_length=3, kinds=PLANT_KINDS, plateau_patience=200,
                max_iterations=200, reward_baseline=1.0, seed=seed,
            )
            result = run_search(None, None, cfg, None, scorer=scorer)
            mcts_scores.append(result.best_score)
            rng = Rng(1000 + seed)
            draws = [
                scorer(space[int(rng.integers(0, len(space) - 1))]) for _ in range(200)
            ]
            random_scores.append(min(draws))
        assert np.median(mcts_scores) <= np.median(random_scores)


class TestConfig:
    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            SearchConfig(plateau_patience=0)
        with pytest.raises(ValueError):
            SearchConfig(reward_baseline=-1.0)
        with pytest.raises(ValueError):
            SearchConfig(select_by="luck")


def test_parallel_workers_smoke():
    # two spawn workers score a tiny proxy task end to end
    from augsearch import scenegen
    from augsearch.depth_core import DomainTag
    from augsearch.nnet import TrainConfig

    d_sim = scenegen.make_dataset(4, 2, DomainTag.Sim, 16, 1)
    d_pr = scenegen.make_dataset(2, 2, DomainTag.PseudoReal, 16, 2)
    cfg = SearchConfig(
        sequence_length=2, kinds=SMALL_KINDS, plateau_patience=4,
        max_iterations=4, seed=0,
    )
    train_cfg = TrainConfig(epochs=2, batch_size=4, seed=0)
    result = run_search(d_sim, d_pr, cfg, train_cfg, workers=2)
    assert 1 <= len(result.iteration_log) <= 4
    assert np.isfinite(result.best_score)
