"""Experiment orchestration: the staged pipeline, the size sweep and the
ablation grid.

Every random draw of a run derives from its single ``seed``; identical
configurations therefore give identical records.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..adversarial import LossWeights, Stage2Config, refine
from ..dmd import ScoreBranches
from ..flow import euler_sample, train_teacher
from ..meanflow import MFConfig, TrainingDiverged, distill_stage1, one_step_sample
from ..nets import SIZES, VelocityNet, build, load_net, net_to_dict, save_net, size_config
from .data import PROBE_SIZE, ToyDataset, probe_set
from .metrics import circle_distance

log = logging.getLogger(__name__)

ADVERSARIAL = ("off", "gap", "awd")


class MissingTeacher(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    size: str = "XL"
    seed: int = 0
    teacher_fm: bool = True
    td: bool = True
    dmd: bool = False
    adversarial: str = "off"
    teacher_iters: int = 50_000
    td_iters: int = 20_000
    stage2_iters: int = 10_000
    batch_size: int = 128
    weights: LossWeights = LossWeights()
    sampler_steps: int = 50
    cfg_scale: float = 0.0
    n_classes: int = 0
    r_neq_t_ratio: float = 1.0
    fake_steps: int = 1
    fake_lr_ratio: float = 10.0
    disc_lr_ratio: float = 5.0
    probe_size: int = PROBE_SIZE
    eval_every: int = 0
    ema_decay: float | None = 0.99
    teacher_path: str | None = None
    student_path: str | None = None

    def __post_init__(self):
        size_config(self.size)
        if self.adversarial not in ADVERSARIAL:
            raise ValueError(f"adversarial must be one of {ADVERSARIAL}")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be nonnegative")
        if self.cfg_scale > 0 and self.n_classes == 0:
            raise ValueError("guidance needs the class-conditional dataset (n_classes=2)")
        if self.n_classes not in (0, 2):
            raise ValueError("n_classes must be 0 or 2")
        if self.n_classes and (self.dmd or self.adversarial != "off"):
            raise ValueError("stage 2 runs on the unconditional problem only")
        for name in ("teacher_iters", "td_iters", "stage2_iters", "eval_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.ema_decay is not None and not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.batch_size < 1 or self.sampler_steps < 1 or self.probe_size < 1:
            raise ValueError("batch_size, sampler_steps and probe_size must be positive")
        if not (self.teacher_fm or self.td or self.dmd or self.adversarial != "off"):
            raise ValueError("no stage enabled")

    @property
    def stage2(self) -> bool:
        return self.dmd or self.adversarial != "off"

    @property
    def stage2_weights(self) -> LossWeights:
        w = self.weights
        return LossWeights(w.dmd if self.dmd else 0.0, w.adv_g, w.adv_d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = dataclasses.asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ExperimentRecord:
    run_id: str
    config: ExperimentConfig
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    checkpoints: dict[str, str] = field(default_factory=dict)
    scatter: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def run_id_for(config: ExperimentConfig) -> str:
    return f"{config.size}-s{config.seed}-{config.config_hash()[:8]}"


def derive_seeds(seed: int) -> dict[str, int]:
    """Independent sub-seeds of one run seed."""
    names = ("teacher_init", "teacher_data", "student_init", "td_data", "stage2")
    state = np.random.SeedSequence(seed).generate_state(len(names))
    return {n: int(s) for n, s in zip(names, state)}


# ---------------------------------------------------------------------------
# stages

def _dataset(cfg: ExperimentConfig) -> ToyDataset:
    return ToyDataset(cfg.n_classes)


def _teacher_conditioning(cfg: ExperimentConfig):
    return ("t", "c") if cfg.n_classes else ("t",)


def _student_conditioning(cfg: ExperimentConfig):
    return ("t", "r", "c") if cfg.n_classes else ("t", "r")


def stage_teacher(cfg: ExperimentConfig, probe: np.ndarray, on_row: Callable[[dict], None] | None = None):
    seeds = derive_seeds(cfg.seed)
    teacher = build(size_config(cfg.size), _teacher_conditioning(cfg), seeds["teacher_init"], cfg.n_classes)
    rows = []
    train_teacher(teacher, _dataset(cfg), cfg.teacher_iters, batch_size=cfg.batch_size, seed=seeds["teacher_data"],
                  probe=probe, eval_every=cfg.eval_every, eval_steps=cfg.sampler_steps, ema_decay=cfg.ema_decay,
                  callback=lambda r: (rows.append(r), on_row and on_row(r)))
    return teacher, rows


def teacher_distance(teacher: VelocityNet, probe: np.ndarray, steps: int) -> tuple[float, np.ndarray]:
    x, _ = euler_sample(teacher, probe, steps)
    return circle_distance(x)[0], x


def stage_td(cfg: ExperimentConfig, teacher: VelocityNet, probe: np.ndarray,
             on_row: Callable[[dict], None] | None = None):
    seeds = derive_seeds(cfg.seed)
    student = build(size_config(cfg.size), _student_conditioning(cfg), seeds["student_init"], cfg.n_classes)
    rows = []
    mf = MFConfig(cfg.r_neq_t_ratio, "teacher", cfg.cfg_scale, cfg.batch_size)
    distill_stage1(student, teacher, _dataset(cfg), mf, cfg.td_iters, seed=seeds["td_data"], probe=probe,
                   eval_every=cfg.eval_every, ema_decay=cfg.ema_decay,
                   callback=lambda r: (rows.append(r), on_row and on_row(r)))
    return student, rows


def fresh_generator(cfg: ExperimentConfig) -> VelocityNet:
    """Generator for arms without trajectory distillation: the student's initialisation."""
    return build(size_config(cfg.size), _student_conditioning(cfg), derive_seeds(cfg.seed)["student_init"],
                 cfg.n_classes)


def stage2_config(cfg: ExperimentConfig) -> Stage2Config:
    lr = size_config(cfg.size).learning_rate
    return Stage2Config(iterations=cfg.stage2_iters, batch_size=cfg.batch_size, weights=cfg.stage2_weights,
                        disc=cfg.adversarial, lr=lr, fake_lr=lr * cfg.fake_lr_ratio,
                        disc_lr_ratio=cfg.disc_lr_ratio, fake_steps=cfg.fake_steps,
                        ema_decay=cfg.ema_decay)


def stage_refine(cfg: ExperimentConfig, generator: VelocityNet, teacher: VelocityNet, probe: np.ndarray,
                 on_row: Callable[[dict], None] | None = None):
    rows = []
    gen, branches, disc, _ = refine(generator, teacher, _dataset(cfg), stage2_config(cfg),
                                    seed=derive_seeds(cfg.seed)["stage2"], probe=probe, eval_every=cfg.eval_every,
                                    callback=lambda r: (rows.append(r), on_row and on_row(r)))
    return gen, branches, rows


# ---------------------------------------------------------------------------
# pipeline

def _tag(rows: list[dict], run_id: str, cfg: ExperimentConfig, start: int) -> int:
    h = cfg.config_hash()
    for i, r in enumerate(rows):
        r.update({"run_id": run_id, "config_hash": h, "seed": cfg.seed, "step": start + i + 1})
    return start + len(rows)


def run_pipeline(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    teacher: VelocityNet | None = None,
    td_student: VelocityNet | None = None,
    on_row: Callable[[dict], None] | None = None,
) -> ExperimentRecord:
    """Run the enabled stages in order teacher -> TD -> stage 2.

    ``teacher`` and ``td_student`` let callers reuse the outputs of earlier
    identical stages (they are copied, never modified). On divergence the
    record's status names the stage and the last completed stage's
    checkpoint is kept.
    """
    run_id = run_id_for(cfg)
    rec = ExperimentRecord(run_id, cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    probe = probe_set(cfg.probe_size)
    step = 0
    summary = rec.summary
    summary.update({"run_id": run_id, "config_hash": cfg.config_hash(), "seed": cfg.seed, "size": cfg.size,
                    "status": "ok"})

    def save(name, net):
        if out is not None:
            rec.checkpoints[name] = str(save_net(net, out / f"{name}.json"))

    try:
        if cfg.teacher_fm and teacher is None:
            teacher, rows = stage_teacher(cfg, probe, on_row)
            step = _tag(rows, run_id, cfg, step)
            rec.rows.extend(rows)
            save("teacher", teacher)
        elif teacher is None and cfg.teacher_path:
            teacher = load_net(cfg.teacher_path)
            rec.checkpoints["teacher"] = cfg.teacher_path
        if teacher is None and (cfg.td or cfg.stage2):
            raise MissingTeacher("distillation stages need a teacher: enable teacher_fm or give teacher_path")
        if teacher is not None:
            d, x = teacher_distance(teacher, probe, cfg.sampler_steps)
            summary["teacher_distance"] = d
            rec.scatter["teacher"] = x

        generator = None
        if cfg.td:
            if td_student is None:
                generator, rows = stage_td(cfg, teacher, probe, on_row)
                step = _tag(rows, run_id, cfg, step)
                rec.rows.extend(rows)
            else:
                generator = td_student.copy()
            save("td", generator)
            x = one_step_sample(generator, probe)
            summary["td_distance"] = circle_distance(x)[0]
            rec.scatter["td"] = x

        if generator is None and cfg.student_path:
            generator = load_net(cfg.student_path)
            rec.checkpoints["td"] = cfg.student_path
        if cfg.stage2:
            generator = generator if generator is not None else fresh_generator(cfg)
            generator, branches, rows = stage_refine(cfg, generator, teacher, probe, on_row)
            step = _tag(rows, run_id, cfg, step)
            rec.rows.extend(rows)
            if out is not None:
                rec.checkpoints["stage2"] = str(save_stage2(out / "stage2.json", generator, branches,
                                                            rec.checkpoints.get("teacher")))
            x = one_step_sample(generator, probe)
            summary["stage2_distance"] = circle_distance(x)[0]
            rec.scatter["stage2"] = x
    except TrainingDiverged as exc:
        log.warning("run %s diverged: %s", run_id, exc)
        summary["status"] = f"diverged: {exc}"

    for key in ("stage2_distance", "td_distance", "teacher_distance"):
        if key in summary:
            summary["final_distance"] = summary[key]
            summary["final_stage"] = key.split("_")[0]
            break
    summary["rows"] = len(rec.rows)
    if out is not None:
        from .export import write_record

        write_record(rec, out)
    return rec


def save_stage2(path: Path, generator: VelocityNet, branches: ScoreBranches, teacher_path: str | None) -> Path:
    """Generator and fake branch together; the real branch by path and checksum."""
    doc = {"generator": net_to_dict(generator), "fake": net_to_dict(branches.fake),
           "real": {"path": teacher_path, "checksum": branches.real_checksum}}
    path.write_text(json.dumps(doc))
    return path


# ---------------------------------------------------------------------------
# sweep and grid

@dataclass
class SweepTable:
    rows: list[dict]  # one per (size, seed)
    sizes: list[str]
    seeds: list[int]

    def medians(self) -> dict[str, dict[str, float]]:
        out = {}
        for s in self.sizes:
            sel = [r for r in self.rows if r["size"] == s]
            out[s] = {"teacher": statistics.median(r["teacher_distance"] for r in sel),
                      "student": statistics.median(r["student_distance"] for r in sel),
                      "params_student": sel[0]["params_student"]}
        return out


def size_sweep(sizes: Sequence[str], seeds: Sequence[int], base: ExperimentConfig | None = None,
               on_cell: Callable[[dict], None] | None = None) -> SweepTable:
    """Teacher 50-step and TD student 1-step distances for every (size, seed)."""
    if len(sizes) < 2:
        raise ValueError("a sweep needs at least two sizes")
    base = base or ExperimentConfig()
    rows = []
    for size in sizes:
        for seed in seeds:
            cfg = base.replace(size=size, seed=seed, teacher_fm=True, td=True, dmd=False, adversarial="off")
            rec = run_pipeline(cfg)
            row = {"size": size, "seed": seed, "teacher_distance": rec.summary.get("teacher_distance"),
                   "student_distance": rec.summary.get("td_distance"), "status": rec.summary["status"],
                   "params_student": build(SIZES[size], ("t", "r")).num_params}
            rows.append(row)
            if on_cell:
                on_cell(row)
    return SweepTable(rows, list(sizes), list(seeds))


ARMS: dict[str, dict] = {
    "TD-only": {"td": True, "dmd": False, "adversarial": "off"},
    "DMD-only": {"td": False, "dmd": True, "adversarial": "off"},
    "DMD+GAP": {"td": False, "dmd": True, "adversarial": "gap"},
    "TD+DMD": {"td": True, "dmd": True, "adversarial": "off"},
    "TD+DMD+GAP": {"td": True, "dmd": True, "adversarial": "gap"},
    "TD+DMD+AWD": {"td": True, "dmd": True, "adversarial": "awd"},
}


@dataclass
class GridTable:
    rows: list[dict]  # one per (arm, seed)
    arms: list[str]
    seeds: list[int]

    def medians(self) -> dict[str, float]:
        return {a: statistics.median(r["final_distance"] for r in self.rows if r["arm"] == a) for a in self.arms}

    def ordering_report(self) -> list[tuple[str, bool]]:
        m = self.medians()
        pairs = [("TD+DMD+AWD", "TD+DMD+GAP"), ("TD+DMD+GAP", "TD+DMD"), ("TD+DMD", "TD-only"),
                 ("TD+DMD", "DMD-only"), ("TD+DMD+GAP", "DMD+GAP")]
        return [(f"{a} <= {b}", m[a] <= m[b]) for a, b in pairs if a in m and b in m]


def ablation_grid(seeds: Sequence[int], base: ExperimentConfig | None = None, arms: Sequence[str] | None = None,
                  on_cell: Callable[[dict], None] | None = None) -> GridTable:
    """Final 1-step distance of every arm; arms share the seed's teacher and TD student."""
    base = base or ExperimentConfig(dmd=True)
    arms = list(ARMS) if arms is None else list(arms)
    unknown = set(arms) - set(ARMS)
    if unknown:
        raise ValueError(f"unknown arms: {sorted(unknown)}")
    rows = []
    for seed in seeds:
        probe_cfg = base.replace(seed=seed, teacher_fm=True, td=True, dmd=False, adversarial="off")
        teacher, _ = stage_teacher(probe_cfg, probe_set(base.probe_size))
        student = None
        if any(ARMS[a]["td"] for a in arms):
            student, _ = stage_td(probe_cfg, teacher, probe_set(base.probe_size))
        for arm in arms:
            cfg = base.replace(seed=seed, teacher_fm=True, **ARMS[arm])
            rec = run_pipeline(cfg, teacher=teacher, td_student=student if cfg.td else None)
            row = {"arm": arm, "seed": seed, "final_distance": rec.summary.get("final_distance"),
                   "status": rec.summary["status"]}
            rows.append(row)
            if on_cell:
                on_cell(row)
    return GridTable(rows, arms, list(seeds))
