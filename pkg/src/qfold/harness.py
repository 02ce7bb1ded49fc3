"""Run configuration, benchmark manifests, job execution and report tables."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import enum
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import OptimizerConfig, Variant, optimize
from .dqn_agent import TrainConfig, greedy_rollout, train_self_play
from .environment import ActionMode, DockingEnv, EpisodeConfig, RewardStrategy
from .errors import ConfigError, ManifestError, QFoldError
from .geometry import Pose
from .metrics import CSV_HEADER, QualityReport, evaluate, format_value
from .pdb_io import Structure, read_chain, read_dimer, write_pdb
from .restraints import (
    ContactSet,
    contact_prf,
    extract_true_contacts,
    inject_false_contacts,
    read_contact_file,
)

MANIFEST_VERSION = 1
BUNDLED_PREFIX = "bundled:"
METRIC_FIELDS = CSV_HEADER[3:]


class Scenario(enum.Enum):
    OPTIMAL = "optimal"
    SUBOPTIMAL = "suboptimal"
    REALISTIC = "realistic"


class Method(enum.Enum):
    DRL = "drl"
    GD = "gd"
    MC = "mc"
    SA = "sa"


# ---------------------------------------------------------------- settings


def _build(cls, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] settings: {exc}") from exc


def _plain(obj) -> dict:
    out = {}
    for k, v in dataclasses.asdict(obj).items():
        out[k] = v.value if isinstance(v, enum.Enum) else v
    return out


@dataclass
class EnvSettings:
    obs_size: int = 64
    action_mode: str = "twelve"
    reward: str = "contact_energy"
    translation_step: float = 1.0
    rotation_step: float = 1.0
    prob_weight: bool = False

    def __post_init__(self):
        ActionMode(self.action_mode)
        RewardStrategy(self.reward)
        if self.obs_size < 8:
            raise ValueError("obs_size must be at least 8")


@dataclass
class RunSettings:
    """Every tunable of a reconstruction run, grouped by component."""

    env: EnvSettings = field(default_factory=EnvSettings)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    SECTIONS = {"env": EnvSettings, "episode": EpisodeConfig, "train": TrainConfig, "optimizer": OptimizerConfig}

    @classmethod
    def from_dict(cls, data: dict) -> RunSettings:
        unknown = sorted(set(data) - set(cls.SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
        parts = {}
        for name, kind in cls.SECTIONS.items():
            section = data.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            parts[name] = _build(kind, section, name)
        return cls(**parts)

    def to_dict(self) -> dict:
        return {name: _plain(getattr(self, name)) for name in self.SECTIONS}

    def with_overrides(self, overrides: dict[str, dict]) -> RunSettings:
        """New settings with ``{section: {key: value}}`` applied on top."""
        data = self.to_dict()
        for section, values in overrides.items():
            data.setdefault(section, {}).update({k: v for k, v in values.items() if v is not None})
        return RunSettings.from_dict(data)


def load_settings(path=None, overrides: dict[str, dict] | None = None) -> RunSettings:
    """Defaults, then the JSON config file, then explicit overrides."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    settings = RunSettings.from_dict(data)
    return settings.with_overrides(overrides) if overrides else settings


# ---------------------------------------------------------------- reconstruction


@dataclass
class Reconstruction:
    method: Method
    pose: Pose
    energy: float
    steps: int
    log_lines: list[str]


def reconstruct(
    receptor: Structure,
    ligand: Structure,
    contacts: ContactSet,
    method: Method | str,
    settings: RunSettings,
    seed: int,
    native: tuple[Structure, Structure] | None = None,
) -> Reconstruction:
    """Place ``ligand`` against ``receptor`` with one method; deterministic in ``seed``."""
    method = Method(method)
    contacts.require_nonempty()
    if method is Method.DRL:
        return _reconstruct_drl(receptor, ligand, contacts, settings, seed, native)
    opt = dataclasses.replace(settings.optimizer, variant=Variant(method.value), seed=seed)
    result = optimize(opt, receptor, ligand, contacts)
    buf = io.StringIO()
    result.write_trace(buf)
    return Reconstruction(method, result.pose, result.energy, result.iterations, buf.getvalue().splitlines())


def _reconstruct_drl(receptor, ligand, contacts, settings, seed, native) -> Reconstruction:
    env_cfg = settings.env
    episode = dataclasses.replace(settings.episode, seed=seed)
    reward = RewardStrategy(env_cfg.reward)
    env = DockingEnv(
        receptor,
        ligand,
        contacts,
        reward=reward,
        native=native,
        config=episode,
        action_mode=env_cfg.action_mode,
        translation_step=env_cfg.translation_step,
        rotation_step=env_cfg.rotation_step,
        obs_size=env_cfg.obs_size,
        prob_weight=env_cfg.prob_weight,
    )
    train = dataclasses.replace(settings.train, seed=seed)
    result = train_self_play(env, train)
    best = result.best_state
    rollout_best, trajectory = greedy_rollout(result.network, env, seed=seed)
    if rollout_best.energy < best.energy:
        best = rollout_best
    lines = [rec.to_json() for rec in result.log]
    lines.append(json.dumps({"greedy_steps": len(trajectory), "greedy_best_energy": rollout_best.energy}))
    return Reconstruction(Method.DRL, best.pose, best.energy, result.steps + len(trajectory), lines)


# ---------------------------------------------------------------- manifest


@dataclass
class ScenarioSpec:
    """One benchmark target and how to run it."""

    target: str
    scenario: Scenario
    native: Path | None
    receptor: Path | None
    ligand: Path | None
    receptor_chain: str = "A"
    ligand_chain: str = "B"
    contacts: str = "extract"
    precision: float = 1.0
    contact_seed: int = 0
    methods: tuple[Method, ...] = (Method.GD,)
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.scenario is Scenario.OPTIMAL and self.native is None:
            raise ManifestError(f"target {self.target}: the optimal scenario needs a native structure")
        if self.contacts == "extract" and self.native is None:
            raise ManifestError(f"target {self.target}: extracting contacts needs a native structure")
        if self.native is None and (self.receptor is None or self.ligand is None):
            raise ManifestError(f"target {self.target}: give receptor and ligand paths or a native")
        if not 0.0 < self.precision <= 1.0:
            raise ManifestError(f"target {self.target}: precision must lie in (0, 1]")
        if not self.methods or not self.seeds:
            raise ManifestError(f"target {self.target}: needs at least one method and one seed")


@dataclass
class Manifest:
    targets: list[ScenarioSpec]
    config: Path | None = None


def resolve_path(value: str, base: Path) -> Path:
    """Manifest path; ``bundled:NAME`` refers to a packaged suite target."""
    if value.startswith(BUNDLED_PREFIX):
        from .synthetic import suite_path

        return suite_path(value[len(BUNDLED_PREFIX) :])
    path = Path(value)
    return path if path.is_absolute() else base / path


def _split_list(text: str) -> list[str]:
    return [t for t in (p.strip() for p in text.replace(",", " ").split()) if t]


def parse_manifest(text: str, base: Path = Path(".")) -> Manifest:
    """Parse an INI manifest.

    ``[manifest]`` carries ``version`` plus defaults for the ``[target NAME]``
    sections that follow.
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ManifestError(f"malformed manifest: {exc}") from exc
    if not parser.has_section("manifest"):
        raise ManifestError("manifest lacks a [manifest] section")
    head = parser["manifest"]
    if head.get("version") != str(MANIFEST_VERSION):
        raise ManifestError(f"unsupported manifest version {head.get('version')!r}")
    defaults = {k: v for k, v in head.items() if k not in ("version", "config")}
    config = resolve_path(head["config"], base) if "config" in head else None
    targets = []
    for name in parser.sections():
        if name == "manifest":
            continue
        if not name.startswith("target "):
            raise ManifestError(f"unexpected section [{name}]")
        values = {**defaults, **dict(parser[name])}
        targets.append(_target_from(name[len("target ") :].strip(), values, base))
    if not targets:
        raise ManifestError("manifest lists no targets")
    names = [t.target for t in targets]
    if len(set(names)) != len(names):
        raise ManifestError("duplicate target names in manifest")
    return Manifest(targets, config)


_TARGET_KEYS = {
    "scenario", "native", "receptor", "ligand", "receptor_chain", "ligand_chain",
    "contacts", "precision", "contact_seed", "methods", "seeds",
}


def _target_from(name: str, values: dict, base: Path) -> ScenarioSpec:
    unknown = sorted(set(values) - _TARGET_KEYS)
    if unknown:
        raise ManifestError(f"target {name}: unknown keys {', '.join(unknown)}")
    try:
        contacts = values.get("contacts", "extract")
        if contacts != "extract":
            contacts = str(resolve_path(contacts, base))
        return ScenarioSpec(
            target=name,
            scenario=Scenario(values.get("scenario", "optimal")),
            native=resolve_path(values["native"], base) if "native" in values else None,
            receptor=resolve_path(values["receptor"], base) if "receptor" in values else None,
            ligand=resolve_path(values["ligand"], base) if "ligand" in values else None,
            receptor_chain=values.get("receptor_chain", "A"),
            ligand_chain=values.get("ligand_chain", "B"),
            contacts=contacts,
            precision=float(values.get("precision", 1.0)),
            contact_seed=int(values.get("contact_seed", 0)),
            methods=tuple(Method(m.lower()) for m in _split_list(values.get("methods", "gd"))),
            seeds=tuple(int(s) for s in _split_list(values.get("seeds", "0"))),
        )
    except (ValueError, KeyError) as exc:
        raise ManifestError(f"target {name}: {exc}") from exc


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    return parse_manifest(text, path.parent)


# ---------------------------------------------------------------- jobs


@dataclass
class RunRecord:
    target: str
    scenario: str
    method: str
    seed: int
    report: QualityReport | None
    energy: float
    wall_time: float
    steps: int
    status: str = "ok"
    error: str = ""
    precision: float = float("nan")
    recall: float = float("nan")
    f1: float = float("nan")
    model_path: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def metric(self, name: str) -> float:
        return float("nan") if self.report is None else getattr(self.report, name)


@dataclass
class Job:
    spec: ScenarioSpec
    method: Method
    seed: int
    settings: RunSettings
    out_dir: Path


def load_inputs(spec: ScenarioSpec):
    """``(receptor, ligand, native_or_None, contacts, true_contacts_or_None)`` for a target."""
    native = read_dimer(spec.native, (spec.receptor_chain, spec.ligand_chain)) if spec.native else None
    receptor = read_chain(spec.receptor, spec.receptor_chain) if spec.receptor else native[0]
    ligand = read_chain(spec.ligand, spec.ligand_chain) if spec.ligand else native[1]
    truth = extract_true_contacts(*native) if native is not None else None
    if spec.contacts == "extract":
        contacts = truth
    else:
        contacts = read_contact_file(spec.contacts, ligand.length, receptor.length)
    if spec.precision < 1.0:
        rng = np.random.default_rng(spec.contact_seed)
        contacts = inject_false_contacts(contacts, spec.precision, rng, ligand.length, receptor.length, exclude=truth.pairs if truth else ())
    return receptor, ligand, native, contacts, truth


def model_filename(target: str, method: Method, seed: int) -> str:
    return f"{target}__{method.value}__seed{seed}.pdb"


def run_job(job: Job) -> RunRecord:
    """Execute one (target, method, seed) job; failures become error records."""
    spec = job.spec
    start = time.perf_counter()
    base = dict(target=spec.target, scenario=spec.scenario.value, method=job.method.value, seed=job.seed)
    try:
        receptor, ligand, native, contacts, truth = load_inputs(spec)
        prf = contact_prf(contacts, truth) if truth is not None else (float("nan"),) * 3
        result = reconstruct(receptor, ligand, contacts, job.method, job.settings, job.seed, native)
        models = job.out_dir / "models"
        models.mkdir(parents=True, exist_ok=True)
        model_path = models / model_filename(spec.target, job.method, job.seed)
        write_pdb(receptor, ligand, result.pose, model_path)
        report = None
        if native is not None:
            report = evaluate((receptor, ligand.posed(result.pose)), native)
        return RunRecord(
            **base,
            report=report,
            energy=result.energy,
            wall_time=time.perf_counter() - start,
            steps=result.steps,
            precision=prf[0],
            recall=prf[1],
            f1=prf[2],
            model_path=str(model_path.relative_to(job.out_dir)),
        )
    except (QFoldError, OSError, ValueError) as exc:
        return RunRecord(
            **base,
            report=None,
            energy=float("nan"),
            wall_time=time.perf_counter() - start,
            steps=0,
            status="error",
            error=f"{type(exc).__name__}: {exc}",
        )


def default_threads() -> int:
    env = os.environ.get("QFOLD_THREADS")
    if env:
        try:
            value = int(env)
        except ValueError as exc:
            raise ConfigError(f"QFOLD_THREADS must be an integer, got {env!r}") from exc
        if value < 1:
            raise ConfigError("QFOLD_THREADS must be at least 1")
        return value
    return os.cpu_count() or 1


def run_jobs(jobs: list[Job], threads: int = 1) -> list[RunRecord]:
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(run_job, jobs))
    else:
        records = [run_job(j) for j in jobs]
    return sorted(records, key=lambda r: (r.target, r.method, r.seed))


# ---------------------------------------------------------------- tables


fmt = format_value


def _mean(values: list[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class TargetRow:
    target: str
    scenario: str
    method: str
    metrics: dict[str, float]
    energy: float
    precision: float
    recall: float
    f1: float
    n_ok: int
    n_runs: int


def per_target_rows(records: list[RunRecord]) -> list[TargetRow]:
    groups: dict[tuple[str, str, str], list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.target, r.scenario, r.method), []).append(r)
    rows = []
    for (target, scenario, method), runs in sorted(groups.items()):
        good = [r for r in runs if r.ok]
        rows.append(
            TargetRow(
                target,
                scenario,
                method,
                {m: _mean([r.metric(m) for r in good]) for m in METRIC_FIELDS},
                _mean([r.energy for r in good]),
                _mean([r.precision for r in good]),
                _mean([r.recall for r in good]),
                _mean([r.f1 for r in good]),
                len(good),
                len(runs),
            )
        )
    return rows


def summary_rows(rows: list[TargetRow]) -> list[TargetRow]:
    groups: dict[tuple[str, str], list[TargetRow]] = {}
    for r in rows:
        groups.setdefault((r.scenario, r.method), []).append(r)
    out = []
    for (scenario, method), items in sorted(groups.items()):
        out.append(
            TargetRow(
                "mean",
                scenario,
                method,
                {m: _mean([r.metrics[m] for r in items]) for m in METRIC_FIELDS},
                _mean([r.energy for r in items]),
                _mean([r.precision for r in items]),
                _mean([r.recall for r in items]),
                _mean([r.f1 for r in items]),
                sum(r.n_ok for r in items),
                sum(r.n_runs for r in items),
            )
        )
    return out


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _metric_rows(rows: list[TargetRow]):
    return [[r.target, r.scenario, r.method] + [fmt(r.metrics[m]) for m in METRIC_FIELDS] for r in rows]


def write_tables(records: list[RunRecord], out_dir) -> dict[str, Path]:
    """Write every CSV product of a benchmark into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    targets = per_target_rows(records)
    summary = summary_rows(targets)
    paths = {
        "per_target": out / "per_target.csv",
        "summary": out / "summary.csv",
        "runs": out / "runs.csv",
        "best_method": out / "best_method.csv",
    }
    _write_csv(paths["per_target"], CSV_HEADER, _metric_rows(targets))
    _write_csv(paths["summary"], CSV_HEADER, _metric_rows(summary))
    _write_csv(
        paths["runs"],
        CSV_HEADER[:3] + ("seed",) + METRIC_FIELDS + ("energy", "steps", "precision", "recall", "f1", "status", "error", "model"),
        [
            [r.target, r.scenario, r.method, r.seed]
            + [fmt(r.metric(m)) for m in METRIC_FIELDS]
            + [fmt(r.energy), r.steps, fmt(r.precision), fmt(r.recall), fmt(r.f1), r.status, r.error, r.model_path]
            for r in records
        ],
    )
    best_rows = []
    by_target: dict[tuple[str, str], list[TargetRow]] = {}
    for r in targets:
        by_target.setdefault((r.target, r.scenario), []).append(r)
    for (target, scenario), items in sorted(by_target.items()):
        scored = [r for r in items if not math.isnan(r.metrics["tm_score"])]
        best = max(scored, key=lambda r: (r.metrics["tm_score"], r.metrics["fnat"]), default=None)
        best_rows.append([target, scenario, best.method if best else "", fmt(best.metrics["tm_score"]) if best else "nan"])
    _write_csv(paths["best_method"], ("target", "scenario", "best_method", "tm_score"), best_rows)
    for metric, label in (("tm_score", "tm"), ("fnat", "fnat")):
        for axis in ("precision", "recall", "f1"):
            key = f"{label}_vs_{axis}"
            paths[key] = out / f"{key}.csv"
            _write_csv(
                paths[key],
                ("target", "scenario", "method", axis, metric),
                [[r.target, r.scenario, r.method, fmt(getattr(r, axis)), fmt(r.metrics[metric])] for r in targets],
            )
    return paths


def run_benchmark(manifest: Manifest, out_dir, threads: int = 1, settings: RunSettings | None = None) -> list[RunRecord]:
    """Run every (target x method x seed) job and write the report tables.

    Wall-clock times go to ``timings.json`` so the CSV files depend only
    on the inputs and seeds.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if settings is None:
        settings = load_settings(manifest.config)
    (out / "effective_config.json").write_text(json.dumps(settings.to_dict(), indent=2, sort_keys=True) + "\n")
    jobs = [
        Job(spec, method, seed, settings, out)
        for spec in manifest.targets
        for method in dict.fromkeys(spec.methods)
        for seed in spec.seeds
    ]
    records = run_jobs(jobs, threads)
    write_tables(records, out)
    timings = [{"target": r.target, "method": r.method, "seed": r.seed, "wall_time": r.wall_time} for r in records]
    (out / "timings.json").write_text(json.dumps(timings, indent=2) + "\n")
    return records


def read_table(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def format_report(out_dir) -> str:
    """Plain-text rendering of ``summary.csv`` and ``per_target.csv``."""
    out = Path(out_dir)
    lines = []
    for name in ("summary", "per_target"):
        rows = read_table(out / f"{name}.csv")
        lines.append(f"== {name} ==")
        widths = [max(len(h), *(len(_short(row[h])) for row in rows)) if rows else len(h) for h in CSV_HEADER]
        lines.append("  ".join(h.ljust(w) for h, w in zip(CSV_HEADER, widths)))
        for row in rows:
            lines.append("  ".join(_short(row[h]).ljust(w) for h, w in zip(CSV_HEADER, widths)))
        lines.append("")
    best = out / "best_method.csv"
    if best.exists():
        lines.append("== best method per target ==")
        for row in read_table(best):
            lines.append(f"{row['target']} ({row['scenario']}): {row['best_method']}")
    return "\n".join(lines).rstrip() + "\n"


def _short(value: str) -> str:
    try:
        x = float(value)
    except ValueError:
        return value
    return "nan" if math.isnan(x) else f"{x:.4f}"


def bundled_manifest(
    names: list[str] | None = None,
    methods=("gd",),
    seeds=(0,),
    scenario: str = "optimal",
    precision: float = 1.0,
    config: str | None = None,
) -> str:
    """Manifest text covering bundled suite targets."""
    from .synthetic import suite_names

    lines = ["[manifest]", f"version = {MANIFEST_VERSION}"]
    if config:
        lines.append(f"config = {config}")
    lines += [f"methods = {', '.join(methods)}", f"seeds = {', '.join(str(s) for s in seeds)}", f"scenario = {scenario}"]
    if precision < 1.0:
        lines.append(f"precision = {precision}")
    for name in names or suite_names():
        lines += ["", f"[target {name}]", f"native = {BUNDLED_PREFIX}{name}"]
    return "\n".join(lines) + "\n"

