"""Frame generation: force schedules, config loading, the substep loop and export."""
from __future__ import annotations

import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .materials import clamp_properties
from .mpm import (
    BoundaryCondition,
    Diagnostics,
    MpmGrid,
    SimulationAbort,
    init_particle_masses,
    stable_dt_bound,
    substep,
)
from .splat import SplatCloud, normalize_to_domain, save_frame, symmetrize

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

ACCELERATION = "acceleration_field"
VELOCITY = "velocity_override"
FORCE_KINDS = (ACCELERATION, VELOCITY)


class ScheduleError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ForceEntry:
    kind: str
    vector: tuple
    t_start: float = 0.0
    t_end: float = math.inf
    group: int | None = None

    def active(self, t):
        return self.t_start <= t < self.t_end

    def to_json(self):
        return {"kind": self.kind, "vector": list(self.vector), "t_start": self.t_start,
                "t_end": self.t_end if math.isfinite(self.t_end) else "inf",
                "group": self.group}


@dataclass(frozen=True)
class ForceSchedule:
    """Time-sorted external controls.

    ``acceleration_field`` entries add an acceleration (per unit mass by
    default); overlapping ones sum. ``velocity_override`` entries set particle
    velocities while active and may not overlap on the same particles.
    """

    entries: tuple = ()

    def accelerations(self, t):
        return [e for e in self.entries if e.kind == ACCELERATION and e.active(t)]

    def overrides(self, t):
        return [e for e in self.entries if e.kind == VELOCITY and e.active(t)]

    def uniform_acceleration(self, t):
        a = np.zeros(3)
        for e in self.accelerations(t):
            if e.group is None:
                a += e.vector
        return a

    def particle_impulse(self, t, dt, mass, groups, force_mode="acceleration"):
        """Per-particle momentum increments not covered by the uniform grid acceleration.

        In "acceleration" mode that is only group-filtered entries (m_p a dt);
        in "force" mode every entry is a literal per-particle force (f dt).
        """
        active = self.accelerations(t)
        if force_mode == "acceleration":
            active = [e for e in active if e.group is not None]
        if not active:
            return None
        imp = np.zeros((len(mass), 3))
        for e in active:
            sel = slice(None) if e.group is None else (groups == e.group)
            vec = np.asarray(e.vector) * dt
            if force_mode == "acceleration":
                imp[sel] += mass[sel, None] * vec
            else:
                imp[sel] += vec
        return imp

    def to_json(self):
        return [e.to_json() for e in self.entries]


def _overlap(a, b):
    return a.t_start < b.t_end and b.t_start < a.t_end


def make_force_schedule(entries) -> ForceSchedule:
    out = []
    for raw in entries:
        e = raw if isinstance(raw, ForceEntry) else _parse_force(raw)
        if e.kind not in FORCE_KINDS:
            raise ScheduleError(f"unknown force kind {e.kind!r}")
        if len(e.vector) != 3 or not all(math.isfinite(c) for c in e.vector):
            raise ScheduleError(f"force vector must be 3 finite numbers, got {e.vector}")
        if not e.t_start <= e.t_end:
            raise ScheduleError(f"t_start {e.t_start} > t_end {e.t_end}")
        out.append(e)
    out.sort(key=lambda e: (e.t_start, e.t_end))
    vel = [e for e in out if e.kind == VELOCITY]
    for i, a in enumerate(vel):
        for b in vel[i + 1:]:
            same_target = a.group is None or b.group is None or a.group == b.group
            if same_target and _overlap(a, b):
                raise ScheduleError(
                    f"velocity overrides overlap in time: [{a.t_start}, {a.t_end}) "
                    f"and [{b.t_start}, {b.t_end})")
    return ForceSchedule(tuple(out))


def _parse_force(d):
    t_end = d.get("t_end", math.inf)
    if isinstance(t_end, str):
        t_end = float(t_end)
    group = d.get("group")
    return ForceEntry(
        kind=d.get("kind", ACCELERATION),
        vector=tuple(float(c) for c in d["vector"]),
        t_start=float(d.get("t_start", 0.0)),
        t_end=float(t_end),
        group=None if group is None else int(group),
    )


def update_covariance(cov, F):
    """F cov F^T, symmetrized. Works on single matrices or stacks."""
    cov = np.asarray(cov, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    return symmetrize(F @ cov @ np.swapaxes(F, -1, -2))


# --- configuration ---------------------------------------------------------------------

@dataclass
class SimulationConfig:
    resolution: int = 50
    padding: float = 0.1
    dt: float = 5e-5
    substeps_per_frame: int = 714
    frames: int = 14
    boundary: BoundaryCondition = field(default_factory=BoundaryCondition)
    forces: ForceSchedule = field(default_factory=ForceSchedule)
    material_overrides: dict = field(default_factory=dict)
    force_mode: str = "acceleration"
    transfer: str = "gather"

    def __post_init__(self):
        if self.resolution < 8:
            raise ConfigError("grid resolution must be >= 8")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.substeps_per_frame < 1 or self.frames < 1:
            raise ConfigError("frames and substeps_per_frame must be >= 1")
        if self.force_mode not in ("acceleration", "force"):
            raise ConfigError("force_mode must be 'acceleration' or 'force'")
        if self.transfer not in ("gather", "scatter"):
            raise ConfigError("transfer must be 'gather' or 'scatter'")

    @property
    def frame_rate(self):
        return 1.0 / (self.substeps_per_frame * self.dt)

    def to_json(self):
        bc = self.boundary
        return {
            "grid": {"resolution": self.resolution, "padding": self.padding},
            "time": {"dt": self.dt, "substeps_per_frame": self.substeps_per_frame,
                     "frames": self.frames},
            "boundary": {"faces": bc.faces, "margin": bc.margin, "ground_height": bc.ground_height,
                         "ground": bc.ground, "friction": bc.friction},
            "forces": self.forces.to_json(),
            "materials": {str(k): v for k, v in self.material_overrides.items()},
            "simulation": {"force_mode": self.force_mode, "transfer": self.transfer},
        }


def config_from_dict(doc) -> SimulationConfig:
    known = {"grid", "time", "boundary", "forces", "materials", "simulation"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    grid = doc.get("grid", {})
    tm = doc.get("time", {})
    b = doc.get("boundary", {})
    faces = b.get("faces", "sticky")
    if isinstance(faces, str):
        faces = {f: faces for f in ("-x", "+x", "-y", "+y", "-z", "+z")}
    try:
        bc = BoundaryCondition(faces=dict(faces), margin=int(b.get("margin", 2)),
                               ground_height=b.get("ground_height"),
                               ground=b.get("ground", "slip"),
                               friction=float(b.get("friction", 0.0)))
        schedule = make_force_schedule(doc.get("forces", []))
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    sim = doc.get("simulation", {})
    return SimulationConfig(
        resolution=int(grid.get("resolution", 50)),
        padding=float(grid.get("padding", 0.1)),
        dt=float(tm.get("dt", 5e-5)),
        substeps_per_frame=int(tm.get("substeps_per_frame", 714)),
        frames=int(tm.get("frames", 14)),
        boundary=bc,
        forces=schedule,
        material_overrides={int(k): dict(v) for k, v in doc.get("materials", {}).items()},
        force_mode=sim.get("force_mode", "acceleration"),
        transfer=sim.get("transfer", "gather"),
    )


def load_config(path) -> SimulationConfig:
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc)


# --- simulation --------------------------------------------------------------------------

@dataclass
class FrameSequence:
    frames: list
    frame_rate: float
    substeps_per_frame: int
    dt: float
    com: np.ndarray = None
    report: dict = field(default_factory=dict)

    @property
    def simulated_time(self):
        return (len(self.frames) - 1) * self.substeps_per_frame * self.dt

    @property
    def times(self):
        return np.arange(len(self.frames)) * self.substeps_per_frame * self.dt

    @property
    def completed(self):
        return self.report.get("status") == "ok"


def resolve_materials(cloud: SplatCloud, overrides=None):
    out = {}
    overrides = overrides or {}
    for g, props in cloud.materials.items():
        if g in overrides:
            props = props.with_overrides(**overrides[g])
        out[g] = clamp_properties(props)
    return out


def time_step_warning(materials, dt, resolution):
    """A warning string when dt exceeds the elastic-wave bound, else None."""
    if not materials:
        return None
    e_max = max(p.youngs_modulus for p in materials.values())
    rho_min = min(p.density for p in materials.values())
    bound = stable_dt_bound(e_max, rho_min, 1.0 / resolution)
    if dt > bound:
        return (f"dt={dt:g} s exceeds the stability bound {bound:.3g} s "
                f"(0.3*dx/sqrt(E_max/rho_min), E_max={e_max:g}, rho_min={rho_min:g})")
    return None


def simulate(cloud: SplatCloud, config: SimulationConfig | None = None, *,
             on_frame=None) -> FrameSequence:
    """Run the MPM loop and return every frame in world coordinates.

    Frame 0 is the input cloud. Each later frame follows ``substeps_per_frame``
    substeps; kernel covariances are the rest covariances pushed through each
    particle's total deformation gradient. ``on_frame(index, cloud)`` is called
    as frames complete. A non-finite state stops the run and returns the frames
    produced so far with ``report["status"] == "aborted"``.
    """
    config = config or SimulationConfig()
    t_wall = time.perf_counter()
    timings = {}

    t0 = time.perf_counter()
    dom, xform = normalize_to_domain(cloud, config.padding)
    materials = resolve_materials(cloud, config.material_overrides)
    grid = MpmGrid(config.resolution)
    particles = init_particle_masses(dom, grid, materials)
    warnings = []
    msg = time_step_warning(materials, config.dt, config.resolution)
    if msg:
        log.warning(msg)
        warnings.append(msg)
    timings["setup"] = time.perf_counter() - t0

    cov0 = np.asarray(cloud.covariances)
    diag = Diagnostics()
    frames = [cloud]
    com = [xform.to_world(particles.center_of_mass())]
    if on_frame is not None:
        on_frame(0, cloud)
    status = "ok"
    failure = None
    t_sim = 0.0
    sched = config.forces
    try:
        for f in range(1, config.frames):
            t0 = time.perf_counter()
            for s in range(config.substeps_per_frame):
                t = ((f - 1) * config.substeps_per_frame + s) * config.dt
                for e in sched.overrides(t):
                    sel = slice(None) if e.group is None else (particles.group == e.group)
                    particles.v[sel] = e.vector
                    particles.C[sel] = 0.0
                impulse = sched.particle_impulse(t, config.dt, particles.mass, particles.group,
                                                 config.force_mode)
                accel = (sched.uniform_acceleration(t) if config.force_mode == "acceleration"
                         else np.zeros(3))
                substep(particles, grid, config.dt, bc=config.boundary, acceleration=accel,
                        impulse=impulse, diagnostics=diag, mode=config.transfer)
            t_sim += time.perf_counter() - t0
            frame = cloud.replace(positions=xform.to_world(particles.x),
                                  covariances=update_covariance(cov0, particles.F))
            frames.append(frame)
            com.append(xform.to_world(particles.center_of_mass()))
            if on_frame is not None:
                on_frame(f, frame)
    except SimulationAbort as exc:
        status = "aborted"
        failure = {"stage": exc.stage, "particle": exc.index, "message": str(exc),
                   "frame": len(frames)}
        log.error("simulation aborted: %s", exc)
    timings["simulate"] = t_sim
    timings["total"] = time.perf_counter() - t_wall

    report = {
        "tool_version": __version__,
        "status": status,
        "failure": failure,
        "frames_written": len(frames),
        "particles": cloud.count,
        "frame_rate": config.frame_rate,
        "simulated_time": (len(frames) - 1) * config.substeps_per_frame * config.dt,
        "domain_transform": {"scale": xform.scale, "translation": xform.translation.tolist()},
        "timings": timings,
        "diagnostics": diag.as_dict(),
        "warnings": warnings,
        "config": config.to_json(),
        "materials": {str(g): p.to_json() for g, p in materials.items()},
    }
    return FrameSequence(frames=frames, frame_rate=config.frame_rate,
                         substeps_per_frame=config.substeps_per_frame, dt=config.dt,
                         com=np.array(com), report=report)


def write_sequence(seq: FrameSequence, outdir, figures=True):
    """frame_%04d.ply for every frame, run_report.json and the COM trajectory files."""
    from .report import write_trajectory

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    clamps = 0
    for i, frame in enumerate(seq.frames):
        clamps += save_frame(frame, outdir / f"frame_{i:04d}.ply")
    seq.report["diagnostics"]["covariance_clamps"] = clamps
    write_trajectory(seq, outdir, figures=figures)
    seq.report["timings"]["export"] = time.perf_counter() - t0
    with open(outdir / "run_report.json", "w") as fh:
        json.dump(seq.report, fh, indent=2, default=_json_default)
    return outdir


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o)}")
