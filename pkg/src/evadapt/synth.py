"""Synthetic moving-shape scenes: paired frames, event streams, and masks.

An idealized noise-free event camera watches grayscale shapes translate at
constant velocity over a flat background. Events fire whenever the
per-pixel log-intensity (log(I + 1)) moves a full threshold away from the
level at the last event, with the crossing time linearly interpolated
inside the 1 ms simulation step. Optional uniform background noise events
are available as a realism knob (default off).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .events import Event
from .metrics import MaskSet

SIM_STEP_MS = 1.0


@dataclass
class Shape:
    kind: str                  # "rectangle" | "disk"
    position: tuple[float, float]   # (x, y) center at t = 0, pixels
    size: tuple[float, float]       # rectangle (w, h) or disk (radius, _)
    velocity: tuple[float, float] = (0.0, 0.0)  # px per ms
    intensity: float = 1.0

    def footprint(self, H: int, W: int, t_ms: float) -> np.ndarray:
        cx = self.position[0] + self.velocity[0] * t_ms
        cy = self.position[1] + self.velocity[1] * t_ms
        ys, xs = np.mgrid[0:H, 0:W]
        if self.kind == "rectangle":
            w, h = self.size
            return ((np.abs(xs - cx) <= w / 2.0)
                    & (np.abs(ys - cy) <= h / 2.0))
        if self.kind == "disk":
            r = self.size[0]
            return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
        raise ValueError(f"unknown shape kind: {self.kind}")


@dataclass
class SceneSpec:
    height: int = 32
    width: int = 32
    shapes: list[Shape] = field(default_factory=list)
    background: float = 0.1
    window_ms: float = 40.0
    threshold: float = 0.15
    noise_rate: float = 0.0     # expected noise events per pixel per ms
    seed: int = 0


def render_frame(spec: SceneSpec, t_ms: float) -> np.ndarray:
    """Rasterize the scene at time t into an (H, W, 3) grayscale frame."""
    if not 0.0 <= t_ms <= spec.window_ms:
        raise ValueError(f"t={t_ms} ms outside window [0, {spec.window_ms}]")
    frame = np.full((spec.height, spec.width), spec.background, dtype=np.float64)
    for shape in spec.shapes:
        fp = shape.footprint(spec.height, spec.width, t_ms)
        frame[fp] = shape.intensity
    return np.repeat(frame[:, :, None], 3, axis=2)


def ground_truth_masks(spec: SceneSpec, t_ms: float) -> MaskSet:
    """One mask per shape at time t; later shapes occlude earlier ones."""
    if not 0.0 <= t_ms <= spec.window_ms:
        raise ValueError(f"t={t_ms} ms outside window [0, {spec.window_ms}]")
    footprints = [s.footprint(spec.height, spec.width, t_ms)
                  for s in spec.shapes]
    masks = []
    ids = []
    for i, fp in enumerate(footprints):
        vis = fp.copy()
        for above in footprints[i + 1:]:
            vis &= ~above
        if vis.any():
            masks.append(vis)
            ids.append(i)
    return MaskSet(masks=masks, ids=ids)


def generate_events(spec: SceneSpec) -> list[Event]:
    """Simulate the event stream over the scene window, sorted by time."""
    n_steps = int(round(spec.window_ms / SIM_STEP_MS)) + 1
    H, W = spec.height, spec.width
    logI = np.empty((n_steps, H, W))
    for k in range(n_steps):
        frame = render_frame(spec, k * SIM_STEP_MS)
        logI[k] = np.log(frame[:, :, 0] + 1.0)
    cap = 16 * n_steps * H * W
    out_t = np.empty(cap, dtype=np.int64)
    out_x = np.empty(cap, dtype=np.int64)
    out_y = np.empty(cap, dtype=np.int64)
    out_p = np.empty(cap, dtype=np.int64)
    n = _kernels.threshold_crossings(logI, SIM_STEP_MS, spec.threshold,
                                     out_t, out_x, out_y, out_p)
    events = [Event(t=int(out_t[i]), x=int(out_x[i]), y=int(out_y[i]),
                    p=int(out_p[i])) for i in range(n)]
    if spec.noise_rate > 0:
        rng = np.random.default_rng(spec.seed)
        n_noise = rng.poisson(spec.noise_rate * spec.window_ms * H * W)
        for _ in range(n_noise):
            events.append(Event(
                t=int(rng.integers(0, int(spec.window_ms * 1000) + 1)),
                x=int(rng.integers(0, W)), y=int(rng.integers(0, H)),
                p=int(rng.choice([-1, 1]))))
    events.sort(key=lambda e: (e.t, e.y, e.x))
    return events
