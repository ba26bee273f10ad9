"""Pipeline orchestration: dataset generation, the per-transform study, the
sequence search, baseline comparison, behavior cloning, and previews.

Every command is a pure function of (config file, input files): outputs are
written atomically and regenerate byte-identically with workers=1. Errors in
meters are converted to centimeters in all CSV output.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import dataclass

import numpy as np

from . import depth_core, nnet, scenegen, search
from .depth_core import Dataset, DomainTag
from .nnet import TrainConfig
from .rng import Rng
from .search import SearchConfig
from .transforms import (
    AugmentationSequence,
    Magnitude,
    PARAMETERLESS,
    TransformKind,
    TransformSpec,
    apply_sequence,
    parse_sequence,
    random_sequence,
    render_sequence,
)

__all__ = ["PipelineConfig", "ConfigError", "load_config", "main"]

SCHEMA_VERSION = 1

BASELINES = ("none", "random-8", "handcrafted", "learned-1", "learned-4", "learned-8")

# Fixed handcrafted baseline: four mild always-on transformations.
HANDCRAFTED = tuple(
    TransformSpec(kind, Magnitude.Low, 1.0)
    for kind in (
        TransformKind.Scale,
        TransformKind.WhiteNoise,
        TransformKind.EraseObject,
        TransformKind.SaltNoise,
    )
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSizes:
    sim_train_scenes: int = 64
    sim_train_views: int = 4
    sim_val_scenes: int = 24
    sim_val_views: int = 4
    pseudo_real_scenes: int = 24
    pseudo_real_views: int = 4


@dataclass(frozen=True)
class BcConfig:
    n_demos: int = 40
    epochs: int = 20
    trials: int = 20


@dataclass(frozen=True)
class PipelineConfig:
    out_dir: str = "runs/desk"
    image_size: int = 64
    seed: int = 0
    eval_seeds: int = 1
    datasets: DatasetSizes = DatasetSizes()
    train: TrainConfig = TrainConfig()
    search: SearchConfig = SearchConfig()
    bc: BcConfig = BcConfig()
    baselines: tuple[str, ...] = BASELINES
    random_baseline_count: int = 10


_NESTED = {"datasets": DatasetSizes, "train": TrainConfig, "search": SearchConfig, "bc": BcConfig}


def _from_dict(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if name in _NESTED and cls is PipelineConfig:
            kwargs[name] = _from_dict(_NESTED[name], value, f"{path}.{name}")
        elif name == "baselines":
            bad = [b for b in value if b not in BASELINES]
            if bad:
                raise ConfigError(f"{path}.baselines: unknown baselines {bad}")
            kwargs[name] = tuple(value)
        elif name == "adam_betas":
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_config(path: str) -> PipelineConfig:
    """Parse a config JSON document; unknown keys are rejected."""
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    version = data.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    if isinstance(data.get("search"), dict) and "kinds" in data["search"]:
        raise ConfigError("search.kinds is not configurable from file")
    return _from_dict(PipelineConfig, data, "config")


def config_hash(cfg: PipelineConfig) -> str:
    def encode(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: encode(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, (tuple, list)):
            return [encode(v) for v in obj]
        if isinstance(obj, TransformKind):
            return obj.value
        return obj

    blob = json.dumps(encode(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_csv(path: str, cfg: PipelineConfig, header: list[str], rows: list[list]) -> None:
    lines = [f"# config-hash: {config_hash(cfg)}", ",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def _cm(meters: float) -> str:
    return f"{meters * 100.0:.4f}"


def _paths(cfg: PipelineConfig) -> dict[str, str]:
    d = cfg.out_dir
    return {
        "sim_train": os.path.join(d, "sim_train.daug"),
        "sim_val": os.path.join(d, "sim_val.daug"),
        "pseudo_real": os.path.join(d, "pseudo_real.daug"),
        "transforms_csv": os.path.join(d, "transforms_eval.csv"),
        "learned1": os.path.join(d, "learned_1.txt"),
        "compare_csv": os.path.join(d, "compare.csv"),
        "bc_csv": os.path.join(d, "bc_rollouts.csv"),
        "bc_plain": os.path.join(d, "bc_policy_plain.maug"),
        "bc_augmented": os.path.join(d, "bc_policy_augmented.maug"),
    }


def _search_paths(cfg: PipelineConfig, n: int) -> tuple[str, str]:
    return (
        os.path.join(cfg.out_dir, f"search_log_N{n}.csv"),
        os.path.join(cfg.out_dir, f"best_sequence_N{n}.txt"),
    )


def _load_datasets(cfg: PipelineConfig, *names: str) -> list[Dataset]:
    paths = _paths(cfg)
    out = []
    for name in names:
        path = paths[name]
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing dataset {path}; run gen-data first")
        out.append(depth_core.load_dataset(path))
    return out


def _train_cfg(cfg: PipelineConfig) -> TrainConfig:
    return dataclasses.replace(cfg.train, seed=cfg.seed)


def _eval_seed_list(cfg: PipelineConfig) -> list[int]:
    return [cfg.seed + i for i in range(max(1, cfg.eval_seeds))]


def median_errors(seq, d_train, eval_sets, cfg: TrainConfig, seeds) -> dict[str, float]:
    """Median (over the eval window, then over seeds) errors per eval set."""
    per_seed: dict[str, list[float]] = {name: [] for name in eval_sets}
    for seed in seeds:
        run_cfg = dataclasses.replace(cfg, seed=seed)
        try:
            _, history = nnet.train_regressor(d_train, seq, run_cfg, eval_sets=eval_sets)
        except nnet.TrainingDiverged:
            for name in eval_sets:
                per_seed[name].append(float("inf"))
            continue
        for name in eval_sets:
            window = [row[f"{name}_error"] for row in history if f"{name}_error" in row]
            per_seed[name].append(float(np.median(window)))
    return {name: float(np.median(vals)) for name, vals in per_seed.items()}


# ---------------------------------------------------------------------------
# Commands.


def cmd_gen_data(cfg: PipelineConfig) -> None:
    os.makedirs(cfg.out_dir, exist_ok=True)
    paths = _paths(cfg)
    ds = cfg.datasets
    jobs = [
        ("sim_train", ds.sim_train_scenes, ds.sim_train_views, DomainTag.Sim, cfg.seed * 3 + 1),
        ("sim_val", ds.sim_val_scenes, ds.sim_val_views, DomainTag.Sim, cfg.seed * 3 + 2),
        (
            "pseudo_real",
            ds.pseudo_real_scenes,
            ds.pseudo_real_views,
            DomainTag.PseudoReal,
            cfg.seed * 3 + 3,
        ),
    ]
    for name, scenes, views, domain, seed in jobs:
        data = scenegen.make_dataset(scenes, views, domain, cfg.image_size, seed)
        fd, tmp = tempfile.mkstemp(dir=cfg.out_dir, prefix=".tmp-")
        os.close(fd)
        depth_core.save_dataset(data, tmp)
        os.replace(tmp, paths[name])
        print(f"{name}: {len(data.items)} items (seed {seed}) -> {paths[name]}")


def cmd_eval_transforms(cfg: PipelineConfig) -> None:
    """Score each transformation alone at probability 1, reporting the better
    of its two magnitudes by pseudo-real error."""
    d_train, d_val, d_pr = _load_datasets(cfg, "sim_train", "sim_val", "pseudo_real")
    train_cfg = _train_cfg(cfg)
    seeds = _eval_seed_list(cfg)
    eval_sets = {"sim": d_val, "pseudoreal": d_pr}
    rows = []
    best: tuple[float, AugmentationSequence] | None = None
    for kind in TransformKind:
        magnitudes = [Magnitude.Low] if kind in PARAMETERLESS else list(Magnitude)
        results = []
        for mag in magnitudes:
            seq = AugmentationSequence((TransformSpec(kind, mag, 1.0),))
            errors = median_errors(seq, d_train, eval_sets, train_cfg, seeds)
            results.append((errors["pseudoreal"], errors["sim"], seq))
        pr_err, sim_err, seq = min(results, key=lambda r: r[0])
        rows.append([kind.value, _cm(sim_err), _cm(pr_err)])
        if kind is not TransformKind.Identity and (best is None or pr_err < best[0]):
            best = (pr_err, seq)
        print(f"{kind.value}: sim {_cm(sim_err)} cm, pseudoreal {_cm(pr_err)} cm")
    paths = _paths(cfg)
    _write_csv(paths["transforms_csv"], cfg, ["kind", "sim_error", "pseudoreal_error"], rows)
    _atomic_write(paths["learned1"], (render_sequence(best[1]) + "\n").encode())
    print(f"best single transform: {render_sequence(best[1])}")


def run_one_search(cfg: PipelineConfig, n: int, workers: int) -> search.SearchResult:
    d_train, d_pr = _load_datasets(cfg, "sim_train", "pseudo_real")
    train_cfg = _train_cfg(cfg)
    search_cfg = dataclasses.replace(cfg.search, sequence_length=n, seed=cfg.seed)
    log_path, best_path = _search_paths(cfg, n)
    entries = []
    result = search.run_search(
        d_train, d_pr, search_cfg, train_cfg, workers=workers, on_iteration=entries.append
    )
    rows = [[it, text, f"{score:.6f}", f"{best:.6f}"] for it, text, score, best in entries]
    _write_csv(log_path, cfg, ["iteration", "sequence", "score", "best_so_far"], rows)
    _atomic_write(best_path, (render_sequence(result.best_sequence) + "\n").encode())
    print(
        f"N={n}: best score {result.best_score:.6f} after {len(entries)} iterations: "
        f"{render_sequence(result.best_sequence) or '(empty)'}"
    )
    return result


def _learned_lengths(cfg: PipelineConfig) -> list[int]:
    lengths = {
        int(b.split("-")[1])
        for b in cfg.baselines
        if b.startswith("learned-") and b != "learned-1"
    }
    return sorted(lengths) or [cfg.search.sequence_length]


def cmd_search(cfg: PipelineConfig, workers: int) -> None:
    for n in _learned_lengths(cfg):
        run_one_search(cfg, n, workers)


def _baseline_sequences(cfg: PipelineConfig) -> dict[str, list[AugmentationSequence]]:
    """Sequences per configured baseline; learned ones read search artifacts."""
    paths = _paths(cfg)
    out: dict[str, list[AugmentationSequence]] = {}
    for name in cfg.baselines:
        if name == "none":
            out[name] = [AugmentationSequence(())]
        elif name == "handcrafted":
            out[name] = [AugmentationSequence(HANDCRAFTED)]
        elif name == "random-8":
            rng = Rng(cfg.seed).split("random-baseline")
            out[name] = [random_sequence(rng, 8) for _ in range(cfg.random_baseline_count)]
        elif name == "learned-1":
            if not os.path.exists(paths["learned1"]):
                raise FileNotFoundError("learned-1 requires eval-transforms output")
            with open(paths["learned1"]) as f:
                out[name] = [parse_sequence(f.read().strip())]
        else:
            n = int(name.split("-")[1])
            _, best_path = _search_paths(cfg, n)
            if not os.path.exists(best_path):
                raise FileNotFoundError(f"{name} requires a search run (missing {best_path})")
            with open(best_path) as f:
                out[name] = [parse_sequence(f.read().strip(), max_len=n)]
    return out


def cmd_compare(cfg: PipelineConfig) -> None:
    d_train, d_val, d_pr = _load_datasets(cfg, "sim_train", "sim_val", "pseudo_real")
    train_cfg = _train_cfg(cfg)
    seeds = _eval_seed_list(cfg)
    eval_sets = {"sim": d_val, "pseudoreal": d_pr}
    rows = []
    for name, seqs in _baseline_sequences(cfg).items():
        sims, prs = [], []
        for seq in seqs:
            errors = median_errors(seq, d_train, eval_sets, train_cfg, seeds)
            sims.append(errors["sim"])
            prs.append(errors["pseudoreal"])
        sim_err, pr_err = float(np.mean(sims)), float(np.mean(prs))
        rows.append([name, _cm(sim_err), _cm(pr_err)])
        print(f"{name}: sim {_cm(sim_err)} cm, pseudoreal {_cm(pr_err)} cm")
    _write_csv(_paths(cfg)["compare_csv"], cfg, ["baseline", "sim_error", "pseudoreal_error"], rows)


def cmd_bc(cfg: PipelineConfig) -> None:
    paths = _paths(cfg)
    n = max(_learned_lengths(cfg))
    _, best_path = _search_paths(cfg, n)
    if not os.path.exists(best_path):
        raise FileNotFoundError(f"bc requires a search result (missing {best_path})")
    with open(best_path) as f:
        learned = parse_sequence(f.read().strip(), max_len=n)

    demo_rng = Rng(cfg.seed).split("demos")
    demos = []
    for i in range(cfg.bc.n_demos):
        scene = scenegen.sample_episode_scene(demo_rng.split("scene", i))
        demos.append(scenegen.scripted_expert(scene, size=cfg.image_size))
    bc_cfg = dataclasses.replace(_train_cfg(cfg), epochs=cfg.bc.epochs)

    rows = []
    trials = cfg.bc.trials
    rollout_seed = cfg.seed + 17
    for domain in (DomainTag.Sim, DomainTag.PseudoReal):
        rate = nnet.rollout_expert(domain, trials, rollout_seed, cfg.image_size)
        rows.append(["expert", domain.name, round(rate * trials), trials])
    for label, seq, out_path in (
        ("plain", AugmentationSequence(()), paths["bc_plain"]),
        ("augmented", learned, paths["bc_augmented"]),
    ):
        model, _ = nnet.train_bc(demos, seq, bc_cfg)
        nnet.save_model(model, out_path)
        for domain in (DomainTag.Sim, DomainTag.PseudoReal):
            rate = nnet.rollout_policy(model, domain, trials, rollout_seed, cfg.image_size)
            rows.append([label, domain.name, round(rate * trials), trials])
            print(f"{label} / {domain.name}: {round(rate * trials)}/{trials}")
    _write_csv(paths["bc_csv"], cfg, ["policy", "domain", "successes", "trials"], rows)


def cmd_preview(cfg: PipelineConfig, seq: AugmentationSequence, count: int, dataset_name: str) -> None:
    (dataset,) = _load_datasets(cfg, dataset_name)
    os.makedirs(cfg.out_dir, exist_ok=True)
    rng = Rng(cfg.seed).split("preview")
    n = min(count, len(dataset.items))
    for i in range(n):
        frame = dataset.items[i].frame
        augmented = apply_sequence(seq, frame, rng)
        depth_core.export_pgm(frame, os.path.join(cfg.out_dir, f"preview_{i}_original.pgm"))
        depth_core.export_pgm(augmented, os.path.join(cfg.out_dir, f"preview_{i}_augmented.pgm"))
    print(f"wrote {n} preview pairs to {cfg.out_dir}")


# ---------------------------------------------------------------------------
# Entry point.


def _effective_workers(args) -> int:
    if args.workers is not None:
        return max(1, args.workers)
    env = os.environ.get("AUGSEARCH_THREADS")
    if env:
        return max(1, int(env))
    return 1


def _apply_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.paper_scale:
        cfg = dataclasses.replace(
            cfg,
            datasets=DatasetSizes(400, 5, 40, 5, 40, 5),
            search=dataclasses.replace(cfg.search, plateau_patience=500, max_iterations=5000),
        )
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="augsearch", description="Augmentation search pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "eval-transforms", "search", "compare", "bc", "preview"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--paper-scale", action="store_true")
        if name == "preview":
            p.add_argument("--sequence", default="")
            p.add_argument("--count", type=int, default=4)
            p.add_argument(
                "--dataset", default="sim_val", choices=["sim_train", "sim_val", "pseudo_real"]
            )
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        cfg = _apply_overrides(cfg, args)
        if args.command == "preview":
            preview_seq = parse_sequence(args.sequence)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "eval-transforms":
            cmd_eval_transforms(cfg)
        elif args.command == "search":
            cmd_search(cfg, _effective_workers(args))
        elif args.command == "compare":
            cmd_compare(cfg)
        elif args.command == "bc":
            cmd_bc(cfg)
        elif args.command == "preview":
            cmd_preview(cfg, preview_seq, args.count, args.dataset)
    except Exception as exc:  # runtime failure contract: report and exit 3
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
