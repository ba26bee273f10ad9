"""Monte-Carlo tree search over augmentation sequences.

Nodes hold visit/value statistics for sequence prefixes; edges are whole
(kind, magnitude, probability) choices, so the branching factor is at most
66 and the tree depth equals the sequence length. Scores are errors (lower
is better); they map to bounded rewards via r = clamp(1 - score/baseline),
where the baseline is the no-augmentation score. An evaluation cache keyed
by the sequence text guarantees no sequence is ever trained twice.
"""

from __future__ import annotations

import dataclasses
import math
import multiprocessing
import os
import tempfile
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass, field

from .depth_core import Dataset, load_dataset, save_dataset
from .nnet import TrainConfig, score_sequence
from .rng import Rng
from .transforms import (
    AugmentationSequence,
    TransformKind,
    TransformSpec,
    enumerate_choices,
    render_sequence,
)

__all__ = [
    "SearchConfig",
    "SearchResult",
    "SearchTree",
    "sample_path",
    "update",
    "select_best_path",
    "run_search",
]


@dataclass(frozen=True)
class SearchConfig:
    sequence_length: int = 8
    exploration_c: float = math.sqrt(2.0)
    plateau_patience: int = 50
    max_iterations: int = 400
    reward_baseline: float | None = None  # computed from the empty sequence if None
    seed: int = 0
    select_by: str = "score"  # or "visits"
    kinds: tuple[TransformKind, ...] | None = None  # restrict the grid (tests)

    def __post_init__(self):
        if self.sequence_length < 1 or self.plateau_patience < 1 or self.max_iterations < 1:
            raise ValueError("counts must be positive")
        if self.reward_baseline is not None and not self.reward_baseline > 0:
            raise ValueError("reward_baseline must be positive")
        if self.select_by not in ("score", "visits"):
            raise ValueError("select_by must be 'score' or 'visits'")


@dataclass
class _Node:
    visits: int = 0
    total_reward: float = 0.0
    virtual: int = 0
    children: dict[TransformSpec, "_Node"] = field(default_factory=dict)

    @property
    def n_eff(self) -> int:
        return self.visits + self.virtual

    def q(self) -> float:
        n = self.n_eff
        return self.total_reward / n if n else 0.0


class SearchTree:
    """Node arena plus the evaluation cache."""

    def __init__(self, cfg: SearchConfig):
        self.cfg = cfg
        self.root = _Node()
        self.cache: dict[str, float] = {}
        self.cache_seq: dict[str, AugmentationSequence] = {}

    def choices(self, used: set[TransformKind]) -> list[TransformSpec]:
        specs = enumerate_choices(used)
        if self.cfg.kinds is not None:
            allowed = set(self.cfg.kinds)
            specs = [s for s in specs if s.kind in allowed]
        return specs

    def _prefix_nodes(self, seq: AugmentationSequence) -> list[_Node]:
        """Root plus the materialized nodes along seq, in order."""
        nodes = [self.root]
        node = self.root
        for spec in seq.specs:
            node = node.children.get(spec)
            if node is None:
                break
            nodes.append(node)
        return nodes

    def add_virtual(self, seq: AugmentationSequence) -> None:
        for node in self._prefix_nodes(seq):
            node.virtual += 1

    def remove_virtual(self, seq: AugmentationSequence) -> None:
        for node in self._prefix_nodes(seq):
            node.virtual -= 1


def sample_path(tree: SearchTree, rng: Rng) -> AugmentationSequence:
    """Descend by UCT, expand one new child, finish with a uniform rollout.

    Unvisited children have UCT +inf, so expansion picks uniformly among
    them; after the expansion the remaining slots are filled with uniform
    legal choices that are not materialized in the tree.
    """
    cfg = tree.cfg
    node = tree.root
    specs: list[TransformSpec] = []
    used: set[TransformKind] = set()
    expanded = False
    while len(specs) < cfg.sequence_length:
        choices = tree.choices(used)
        if not expanded:
            fresh = [s for s in choices if s not in node.children or node.children[s].n_eff == 0]
            if fresh:
                pick = fresh[int(rng.integers(0, len(fresh) - 1))]
                if pick not in node.children:
                    node.children[pick] = _Node()
                node = node.children[pick]
                expanded = True
            else:
                parent_n = max(node.n_eff, 1)
                log_n = math.log(parent_n)
                best, best_score = [], -math.inf
                for spec in choices:
                    child = node.children[spec]
                    uct = child.q() + cfg.exploration_c * math.sqrt(log_n / child.n_eff)
                    if uct > best_score + 1e-12:
                        best, best_score = [spec], uct
                    elif uct >= best_score - 1e-12:
                        best.append(spec)
                pick = best[int(rng.integers(0, len(best) - 1))]
                node = node.children[pick]
        else:
            pick = choices[int(rng.integers(0, len(choices) - 1))]
        specs.append(pick)
        if pick.kind is not TransformKind.Identity:
            used.add(pick.kind)
    return AugmentationSequence(tuple(specs), max_len=cfg.sequence_length)


def _reward(score: float, baseline: float) -> float:
    if not math.isfinite(score):
        return 0.0
    return min(1.0, max(0.0, 1.0 - score / baseline))


def update(tree: SearchTree, seq: AugmentationSequence, score: float) -> None:
    """Backpropagate along the materialized prefix and cache the score."""
    r = _reward(score, tree.cfg.reward_baseline)
    for node in tree._prefix_nodes(seq):
        node.visits += 1
        node.total_reward += r
    key = render_sequence(seq)
    tree.cache[key] = score
    tree.cache_seq[key] = seq


def select_best_path(tree: SearchTree) -> AugmentationSequence:
    """Best evaluated sequence: global argmin over the cache, ties broken by
    the lexicographically smaller text rendering. The by-visits variant
    descends the most-visited children instead."""
    if not tree.cache:
        raise ValueError("no evaluations yet")
    if tree.cfg.select_by == "visits":
        node = tree.root
        specs = []
        while node.children and len(specs) < tree.cfg.sequence_length:
            spec, child = sorted(
                node.children.items(), key=lambda kv: (-kv[1].visits, kv[0].render())
            )[0]
            if child.visits == 0:
                break
            specs.append(spec)
            node = child
        return AugmentationSequence(tuple(specs), max_len=tree.cfg.sequence_length)
    key = min(tree.cache, key=lambda k: (tree.cache[k], k))
    return tree.cache_seq[key]


@dataclass(frozen=True)
class SearchResult:
    best_sequence: AugmentationSequence
    best_score: float
    iteration_log: list[tuple[int, str, float, float]]  # iteration, text, score, best_so_far


# Per-worker state for process pools: datasets are loaded once per worker.
_WORKER: dict = {}


def _worker_init(sim_path: str, pr_path: str, train_cfg: TrainConfig):
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    _WORKER["sim"] = load_dataset(sim_path)
    _WORKER["pr"] = load_dataset(pr_path)
    _WORKER["cfg"] = train_cfg


def _worker_score(seq: AugmentationSequence) -> float:
    return score_sequence(seq, _WORKER["sim"], _WORKER["pr"], _WORKER["cfg"])


class _Plateau:
    """Stop once the best score has not improved for `patience` evaluations."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.streak = 0

    def record(self, score: float) -> None:
        if score < self.best:
            self.best = score
            self.streak = 0
        else:
            self.streak += 1

    @property
    def stop(self) -> bool:
        return self.streak >= self.patience


def run_search(
    d_sim: Dataset,
    d_pseudoreal: Dataset,
    cfg: SearchConfig,
    train_cfg: TrainConfig,
    workers: int = 1,
    scorer=None,
    on_iteration=None,
) -> SearchResult:
    """Search loop: sample a sequence, score it (cache hits skip training),
    backpropagate, stop on plateau or iteration budget.

    With workers > 1, scoring runs on a process pool and results apply in
    completion order, so only workers=1 is deterministic. `scorer` overrides
    the default proxy-task scorer (used by tests) and always runs in-process;
    `on_iteration(entry)` is called with each appended log entry.
    """
    custom_scorer = scorer is not None
    if scorer is None:
        def scorer(seq):
            return score_sequence(seq, d_sim, d_pseudoreal, train_cfg)

    if cfg.reward_baseline is None:
        empty = AugmentationSequence((), max_len=cfg.sequence_length)
        baseline = scorer(empty)
        if not (math.isfinite(baseline) and baseline > 0):
            raise RuntimeError(f"no-augmentation baseline score is unusable: {baseline}")
        cfg = dataclasses.replace(cfg, reward_baseline=baseline)

    tree = SearchTree(cfg)
    rng = Rng(cfg.seed).split("mcts")
    log: list[tuple[int, str, float, float]] = []
    plateau = _Plateau(cfg.plateau_patience)

    def apply(seq: AugmentationSequence, score: float) -> None:
        update(tree, seq, score)
        plateau.record(score)
        entry = (len(log) + 1, render_sequence(seq), score, plateau.best)
        log.append(entry)
        if on_iteration is not None:
            on_iteration(entry)

    if workers <= 1 or custom_scorer:
        for _ in range(cfg.max_iterations):
            seq = sample_path(tree, rng)
            key = render_sequence(seq)
            score = tree.cache[key] if key in tree.cache else scorer(seq)
            apply(seq, score)
            if plateau.stop:
                break
    else:
        _run_parallel(tree, rng, d_sim, d_pseudoreal, train_cfg, workers, apply, plateau)

    best_seq = select_best_path(tree)
    if cfg.select_by == "score":
        best_score = tree.cache[render_sequence(best_seq)]
    else:
        best_score = min(tree.cache.values())
    return SearchResult(best_sequence=best_seq, best_score=best_score, iteration_log=log)


def _run_parallel(tree, rng, d_sim, d_pr, train_cfg, workers, apply, plateau):
    """Dispatch sampled sequences to a process pool with virtual loss marking.

    A sampled-but-unscored path counts as one visit with zero reward so that
    concurrent workers diversify; duplicates of an in-flight sequence wait
    for its result instead of retraining.
    """
    cfg = tree.cfg
    # Workers spawn fresh interpreters with single-threaded BLAS so that
    # `workers` trainings run side by side instead of fighting over threads.
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    with tempfile.TemporaryDirectory(prefix="augsearch-") as tmp:
        sim_path = os.path.join(tmp, "sim.daug")
        pr_path = os.path.join(tmp, "pr.daug")
        save_dataset(d_sim, sim_path)
        save_dataset(d_pr, pr_path)
        pending: dict = {}  # key -> (future, [seq, ...])
        dispatched = 0
        with ProcessPoolExecutor(
            max_workers=workers,
            mp_context=multiprocessing.get_context("spawn"),
            initializer=_worker_init,
            initargs=(sim_path, pr_path, train_cfg),
        ) as pool:
            while True:
                while (
                    not plateau.stop
                    and dispatched < cfg.max_iterations
                    and sum(len(v[1]) for v in pending.values()) < 2 * workers
                ):
                    seq = sample_path(tree, rng)
                    key = render_sequence(seq)
                    dispatched += 1
                    if key in tree.cache:
                        apply(seq, tree.cache[key])
                        continue
                    tree.add_virtual(seq)
                    if key in pending:
                        pending[key][1].append(seq)
                    else:
                        pending[key] = (pool.submit(_worker_score, seq), [seq])
                if not pending or plateau.stop:
                    break
                done, _ = wait([v[0] for v in pending.values()], return_when=FIRST_COMPLETED)
                finished = [k for k, v in pending.items() if v[0] in done]
                for key in finished:
                    future, seqs = pending.pop(key)
                    score = future.result()
                    for seq in seqs:
                        tree.remove_virtual(seq)
                        apply(seq, score)
