"""Deterministic procedural generator of toy multimodal surgical scenes.

A scene is a smooth surface heightfield (mm, analytic sum of low-frequency
sinusoids), a few vessel polylines, and one instrument approaching the
surface. Each frame renders a top-view color image plus two cross-sectional
scans re-centered on the instrument tip: scan a runs along the shaft, scan b
perpendicular to it. Ground truth (class, box, keypoints, signed
tip-to-surface distance) is computed analytically from world state, never
from rendered pixels.

Depth convention: z is height in mm above a fixed reference plane, so the
tip hovering above the surface has z_t > z_s and positive distance. B-scan
rows map z via row(z) = round((z - z_near) / (z_far - z_near) * (H_o - 1)).

Everything is a pure function of (config, seed): identical inputs give
bit-identical sequences.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .datamodel import (
    Annotation,
    MultimodalFrame,
    ScanGeometry,
    SequenceRecord,
    ValidationError,
    quantize_unit,
)

INSTRUMENT_CLASS_NAMES = ("straight", "angled", "forked", "bulb")

# Silhouette constants in pixels at any scale; tip width is the lateral
# extent right at the tip. Class identity shows twice: tip geometry and the
# body tint below, so it stays readable whatever part of the tool a feature
# cell happens to cover.
_TIP_WIDTH = {0: 4.4, 1: 4.4, 2: 17.2, 3: 16.0}
_TOOL_TINT = {
    0: (0.96, 0.98, 1.04),  # bare steel
    1: (0.88, 0.62, 0.44),  # copper
    2: (0.42, 1.05, 0.50),  # green handle
    3: (0.58, 0.74, 1.16),  # blue handle
}
_SHAFT_HALFWIDTH = 3.0
_SHAFT_BASE_HALFWIDTH = 6.0
_RETINA_COLOR = np.array([0.82, 0.44, 0.26])
_VESSEL_COLOR = np.array([0.34, 0.07, 0.07])


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 128
    bscan_height: int = 64
    bscan_width: int = 64
    sequence_length: int = 64
    axial_range_mm: tuple[float, float] = (0.0, 9.0)

    # instrument motion
    motion_smoothness: float = 0.88
    xy_step_px: float = 2.0
    angle_step_rad: float = 0.03
    scan_halflen_px: float = 20.0
    shaft_rise_mm_per_px: float = 0.012

    # top-view shadow cue: silhouette shifted by shadow_gain * distance
    shadow_gain_px_per_mm: float = 8.0
    shadow_darken: float = 0.55
    light_dir_deg: float = 35.0

    # cross-sectional artifact
    mirror_prob: float = 0.3
    mirror_gain: float = 0.25

    # augmentation ranges, sampled per frame
    noise_sigma_range: tuple[float, float] = (0.0, 0.02)
    color_gain_range: tuple[float, float] = (0.92, 1.08)
    fog_alpha_range: tuple[float, float] = (0.0, 0.12)

    # metric ranges
    distance_range_mm: tuple[float, float] = (-1.0, 6.0)
    distance_gen_range_mm: tuple[float, float] = (-0.6, 5.0)
    hover_range_mm: tuple[float, float] = (0.08, 0.85)
    below_surface_prob: float = 0.15

    # world
    surface_base_range_mm: tuple[float, float] = (1.5, 2.5)
    surface_amp_range_mm: tuple[float, float] = (0.05, 0.25)
    vessel_count_range: tuple[int, int] = (3, 6)

    seed: int = 0

    def validate(self) -> None:
        for name in ("mirror_prob", "below_surface_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {p}")
        if self.shadow_gain_px_per_mm <= 0:
            raise ValidationError(f"shadow_gain_px_per_mm must be > 0, got {self.shadow_gain_px_per_mm}")
        if self.angle_step_rad < 0:
            raise ValidationError(f"angle_step_rad must be >= 0, got {self.angle_step_rad}")
        if self.image_size < 32 or self.bscan_height < 16 or self.bscan_width < 16:
            raise ValidationError("image_size must be >= 32 and B-scan dimensions >= 16")
        if self.sequence_length < 1:
            raise ValidationError(f"sequence_length must be >= 1, got {self.sequence_length}")
        d_lo, d_hi = self.distance_range_mm
        g_lo, g_hi = self.distance_gen_range_mm
        if not (d_lo < g_lo < g_hi < d_hi):
            raise ValidationError(
                f"distance_gen_range_mm {self.distance_gen_range_mm} must lie strictly "
                f"inside distance_range_mm {self.distance_range_mm}"
            )
        h_lo, h_hi = self.hover_range_mm
        if not (g_lo <= h_lo < h_hi <= g_hi):
            raise ValidationError("hover_range_mm must lie inside distance_gen_range_mm")
        z_near, z_far = self.axial_range_mm
        b_lo, b_hi = self.surface_base_range_mm
        amp_hi = self.surface_amp_range_mm[1]
        if b_lo - 3 * amp_hi + min(g_lo, 0.0) < z_near or b_hi + 3 * amp_hi + max(g_hi, 0.0) > z_far:
            raise ValidationError("axial_range_mm does not cover all reachable surface and tip depths")
        if 2 * (self.scan_halflen_px + 6) >= self.image_size:
            raise ValidationError("scan_halflen_px too large for image_size")


@dataclass(frozen=True)
class WorldState:
    """Analytic scene description for one frame."""

    image_size: int
    surface_base_mm: float
    surface_waves: tuple[tuple[float, float, float, float], ...]  # (amp, fx, fy, phase)
    vessels: tuple[tuple[tuple[float, float], ...], ...]
    instrument_class: int
    tip_x: float
    tip_y: float
    tip_z_mm: float
    shaft_angle: float
    tip_width: float

    def validate(self, cfg: GeneratorConfig) -> None:
        if not (0.0 <= self.tip_x < self.image_size and 0.0 <= self.tip_y < self.image_size):
            raise ValidationError(f"tip outside image: ({self.tip_x}, {self.tip_y})")
        d = self.tip_z_mm - float(surface_height(self, self.tip_x, self.tip_y))
        g_lo, g_hi = cfg.distance_gen_range_mm
        if not g_lo <= d <= g_hi:
            raise ValidationError(f"tip distance {d} outside generation range [{g_lo}, {g_hi}]")


def surface_height(world: WorldState, x, y):
    """Heightfield z_s in mm at top-view pixel coordinates (vectorized)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = np.full(np.broadcast(x, y).shape, world.surface_base_mm)
    inv = 2.0 * math.pi / world.image_size
    for amp, fx, fy, phase in world.surface_waves:
        z = z + amp * np.sin((fx * x + fy * y) * inv + phase)
    return z


def config_digest(cfg: GeneratorConfig) -> str:
    payload = json.dumps(dataclasses.asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def _segment_field(px, py, ax, ay, bx, by, hw_a, hw_b):
    """Signed distance to a capsule with linearly tapered half-width."""
    dx, dy = bx - ax, by - ay
    seg_len_sq = dx * dx + dy * dy
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / max(seg_len_sq, 1e-12), 0.0, 1.0)
    cx, cy = ax + t * dx, ay + t * dy
    dist = np.hypot(px - cx, py - cy)
    return dist - (hw_a + (hw_b - hw_a) * t)


def _border_exit_distance(x, y, ux, uy, size, margin=6.0):
    # distance along -u from (x, y) to the enlarged image rectangle
    best = math.inf
    for bound, pos, d in ((-margin, x, -ux), (size + margin, x, -ux), (-margin, y, -uy), (size + margin, y, -uy)):
        if abs(d) > 1e-12:
            t = (bound - pos) / d
            if t > 0:
                best = min(best, t)
    return best if math.isfinite(best) else float(size)


def _instrument_parts(world: WorldState):
    """Capsule segments (and an optional disc) making up the silhouette."""
    ux, uy = math.cos(world.shaft_angle), math.sin(world.shaft_angle)
    nx, ny = -uy, ux
    tx, ty = world.tip_x, world.tip_y
    reach = _border_exit_distance(tx, ty, ux, uy, world.image_size) + 10.0

    segments = []
    disc = None
    cls = world.instrument_class
    if cls == 0:
        segments.append((tx, ty, tx - reach * ux, ty - reach * uy, 2.2, _SHAFT_BASE_HALFWIDTH))
    elif cls == 1:
        bend = world.shaft_angle + 0.9
        bx, by = math.cos(bend), math.sin(bend)
        qx, qy = tx - 22.0 * bx, ty - 22.0 * by
        segments.append((tx, ty, qx, qy, 2.2, 3.4))
        segments.append((qx, qy, qx - reach * ux, qy - reach * uy, 3.4, _SHAFT_BASE_HALFWIDTH))
    elif cls == 2:
        qx, qy = tx - 18.0 * ux, ty - 18.0 * uy
        for side in (1.0, -1.0):
            segments.append((tx + side * 7.0 * nx, ty + side * 7.0 * ny, qx + side * 1.4 * nx, qy + side * 1.4 * ny, 1.6, 2.0))
        segments.append((qx, qy, qx - reach * ux, qy - reach * uy, 4.5, 7.0))
    else:
        cx, cy = tx - 8.0 * ux, ty - 8.0 * uy
        disc = (cx, cy, 8.0)
        segments.append((cx, cy, cx - reach * ux, cy - reach * uy, _SHAFT_HALFWIDTH, _SHAFT_BASE_HALFWIDTH))
    return segments, disc


def instrument_field(world: WorldState, px, py):
    """Silhouette signed distance (< 0 inside) and along-shaft distance from the tip.

    Shared by the top-view rasterizer, the cross-sectional renderer, and the
    bounding-box computation so all views agree on geometry.
    """
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    segments, disc = _instrument_parts(world)
    sdf = np.full(np.broadcast(px, py).shape, np.inf)
    for ax, ay, bx, by, hw_a, hw_b in segments:
        sdf = np.minimum(sdf, _segment_field(px, py, ax, ay, bx, by, hw_a, hw_b))
    if disc is not None:
        cx, cy, r = disc
        sdf = np.minimum(sdf, np.hypot(px - cx, py - cy) - r)
    ux, uy = math.cos(world.shaft_angle), math.sin(world.shaft_angle)
    along = np.maximum((world.tip_x - px) * ux + (world.tip_y - py) * uy, 0.0)
    return sdf, along


def instrument_bbox(world: WorldState) -> tuple[float, float, float, float]:
    """Tight axis-aligned bounds of the rasterized silhouette, clipped to the image."""
    size = world.image_size
    xs, ys = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5)
    sdf, _ = instrument_field(world, xs, ys)
    rows, cols = np.nonzero(sdf < 0.0)
    if rows.size == 0:
        raise ValidationError("instrument silhouette does not intersect the image")
    return float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1)


def render_opmi(world: WorldState, cfg: GeneratorConfig) -> np.ndarray:
    """Top-view image: shaded retina, vessels, offset shadow, instrument on top."""
    size = world.image_size
    xs, ys = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5)

    z_s = surface_height(world, xs, ys)
    amp_total = sum(w[0] for w in world.surface_waves) or 1.0
    shade = 0.88 + 0.22 * (z_s - world.surface_base_mm) / amp_total
    img = _RETINA_COLOR[None, None, :] * shade[:, :, None]

    for polyline in world.vessels:
        for (ax, ay), (bx, by) in zip(polyline, polyline[1:]):
            alpha = np.clip(0.5 - _segment_field(xs, ys, ax, ay, bx, by, 1.6, 1.1), 0.0, 1.0)
            img = img * (1.0 - alpha[:, :, None]) + _VESSEL_COLOR[None, None, :] * alpha[:, :, None]

    # shadow: silhouette translated by gain * tip distance along the light
    # direction, darkening the tissue beneath the instrument layer
    dist = world.tip_z_mm - float(surface_height(world, world.tip_x, world.tip_y))
    offset = cfg.shadow_gain_px_per_mm * dist
    light = math.radians(cfg.light_dir_deg)
    ox, oy = offset * math.cos(light), offset * math.sin(light)
    sdf_shadow, _ = instrument_field(world, xs - ox, ys - oy)
    shadow_alpha = np.clip(0.5 - sdf_shadow, 0.0, 1.0)
    img = img * (1.0 - (1.0 - cfg.shadow_darken) * shadow_alpha[:, :, None])

    sdf, along = instrument_field(world, xs, ys)
    alpha = np.clip(0.5 - sdf, 0.0, 1.0)
    gray = 0.58 + 0.30 * np.exp(-along / 50.0)
    tint = _TOOL_TINT[world.instrument_class]
    tool = np.stack([tint[0] * gray, tint[1] * gray, tint[2] * gray], axis=-1)
    img = img * (1.0 - alpha[:, :, None]) + np.clip(tool, 0.0, 1.0) * alpha[:, :, None]

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def depth_to_row(z_mm, axial_range_mm: tuple[float, float], height: int):
    """Row index for a depth; the continuous value before rounding is (H-1)-scaled."""
    z_near, z_far = axial_range_mm
    return np.round((np.asarray(z_mm) - z_near) / (z_far - z_near) * (height - 1)).astype(int)


def render_bscan(
    world: WorldState,
    line: tuple[tuple[float, float], tuple[float, float]],
    cfg: GeneratorConfig,
    *,
    mirrored: bool = False,
) -> np.ndarray:
    """Cross-sectional scan along a top-view line segment.

    Per lateral column: tissue fill below the surface, a bright Gaussian
    surface band, a bright instrument blob where the silhouette crosses the
    line, and attenuation of everything beneath the instrument in that
    column. ``mirrored`` adds a faint vertically flipped copy of the scene
    (zero-delay artifact); the caller decides the flag so rendering itself
    stays deterministic.
    """
    (ax, ay), (bx, by) = line
    if math.hypot(bx - ax, by - ay) < 1e-9:
        raise ValidationError("degenerate scan line (start == end)")
    size = world.image_size
    for x, y in (line[0], line[1]):
        if not (0.0 <= x <= size and 0.0 <= y <= size):
            raise ValidationError(f"scan line endpoint ({x}, {y}) outside image")

    h, w = cfg.bscan_height, cfg.bscan_width
    z_near, z_far = cfg.axial_range_mm
    t = np.linspace(0.0, 1.0, w)
    px = ax + t * (bx - ax)
    py = ay + t * (by - ay)

    rows = np.arange(h, dtype=np.float64)[:, None]
    zeta_surf = (surface_height(world, px, py) - z_near) / (z_far - z_near) * (h - 1)

    img = np.where(rows < zeta_surf[None, :] - 2.0, 0.28, 0.04)
    img = img + 0.85 * np.exp(-0.5 * ((rows - zeta_surf[None, :]) / 1.3) ** 2)

    sdf, along = instrument_field(world, px, py)
    present = sdf < 0.0
    if present.any():
        z_inst = world.tip_z_mm + cfg.shaft_rise_mm_per_px * along
        zeta_inst = (z_inst - z_near) / (z_far - z_near) * (h - 1)
        shadowed = present[None, :] & (rows < zeta_inst[None, :] - 2.5)
        img = np.where(shadowed, img * 0.25, img)
        img = img + np.where(present[None, :], np.exp(-0.5 * ((rows - zeta_inst[None, :]) / 1.1) ** 2), 0.0)

    img = np.clip(img, 0.0, 1.0)
    if mirrored:
        img = np.clip(img + cfg.mirror_gain * np.flipud(img), 0.0, 1.0)
    return img.astype(np.float32)


def apply_augmentations(frame: MultimodalFrame, rng: np.random.Generator, cfg: GeneratorConfig) -> MultimodalFrame:
    """Additive noise on every image, color gain on the top view only, fog on all.

    Parameters are drawn uniformly from the config ranges; annotations pass
    through untouched and outputs are clamped to [0, 1].
    """
    sigma = rng.uniform(*cfg.noise_sigma_range)
    noise_opmi = rng.standard_normal(frame.opmi.shape) * sigma
    noise_a = rng.standard_normal(frame.bscan_a.shape) * sigma
    noise_b = rng.standard_normal(frame.bscan_b.shape) * sigma
    gains = rng.uniform(cfg.color_gain_range[0], cfg.color_gain_range[1], size=3)
    fog = rng.uniform(*cfg.fog_alpha_range)

    opmi = (frame.opmi + noise_opmi) * gains[None, None, :] * (1.0 - fog) + fog
    bscan_a = (frame.bscan_a + noise_a) * (1.0 - fog) + fog
    bscan_b = (frame.bscan_b + noise_b) * (1.0 - fog) + fog
    return dataclasses.replace(
        frame,
        opmi=np.clip(opmi, 0.0, 1.0).astype(np.float32),
        bscan_a=np.clip(bscan_a, 0.0, 1.0).astype(np.float32),
        bscan_b=np.clip(bscan_b, 0.0, 1.0).astype(np.float32),
    )


def _smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def _distance_profile(cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    """Tip-to-surface distance per frame: descend, hover, ascend.

    The first third descends strictly monotonically to the hover level, the
    middle third hovers with a small smooth wobble, the last third retreats.
    """
    n = cfg.sequence_length
    g_lo, g_hi = cfg.distance_gen_range_mm
    h_lo, h_hi = cfg.hover_range_mm

    wobble = 0.03
    if rng.random() < cfg.below_surface_prob:
        hover = rng.uniform(max(g_lo + 0.05, -0.5) + wobble, -0.05 - wobble)
    else:
        hover = rng.uniform(h_lo + wobble, h_hi - wobble)
    far_lo = min(max(hover + 1.0, 1.5), g_hi - 0.1)
    start = rng.uniform(far_lo, g_hi - 0.02)
    end = rng.uniform(far_lo, g_hi - 0.02)

    n1 = n // 3
    n3 = n // 3
    n2 = n - n1 - n3
    freq = rng.uniform(1.0, 2.5)
    phase = rng.uniform(0.0, 2.0 * math.pi)

    descend = hover + (start - hover) * (1.0 - _smoothstep((np.arange(n1) + 1.0) / max(n1, 1)))
    tau2 = np.arange(n2, dtype=np.float64)
    hold = hover + wobble * np.sin(2.0 * math.pi * freq * tau2 / max(n, 1) + phase)
    ascend = hover + (end - hover) * _smoothstep((np.arange(n3) + 1.0) / max(n3, 1))
    return np.concatenate([descend, hold, ascend])


def _xy_trajectory(cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    """Smooth tip path confined to a central box so scan lines stay in-image."""
    n = cfg.sequence_length
    center = cfg.image_size / 2.0
    half = cfg.image_size / 2.0 - (cfg.scan_halflen_px + 6.0)

    steps = rng.normal(0.0, cfg.xy_step_px, size=(n, 2))
    smoothed = np.empty_like(steps)
    acc = rng.normal(0.0, cfg.xy_step_px, size=2)
    for i in range(n):
        acc = cfg.motion_smoothness * acc + (1.0 - cfg.motion_smoothness) * steps[i]
        smoothed[i] = acc
    path = np.cumsum(smoothed, axis=0) + rng.uniform(-0.5, 0.5, size=2) * half
    return center + half * np.tanh(path / (half * 1.2))


def generate_sequence(cfg: GeneratorConfig, seed: int) -> SequenceRecord:
    """Render one fully annotated sequence; pure in (cfg, seed)."""
    cfg.validate()
    rng = np.random.default_rng(seed)

    base = rng.uniform(*cfg.surface_base_range_mm)
    waves = tuple(
        (rng.uniform(*cfg.surface_amp_range_mm), rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.0, 2.0 * math.pi))
        for _ in range(3)
    )
    vessels = _make_vessels(cfg, rng)
    instrument_class = int(rng.integers(0, 4))

    theta0 = rng.uniform(0.0, 2.0 * math.pi)
    theta = theta0 + np.cumsum(rng.normal(0.0, cfg.angle_step_rad, size=cfg.sequence_length))
    xy = _xy_trajectory(cfg, rng)
    dist = _distance_profile(cfg, rng)

    frames = []
    h = cfg.scan_halflen_px
    for i in range(cfg.sequence_length):
        x_t, y_t = float(xy[i, 0]), float(xy[i, 1])
        world_dry = WorldState(
            image_size=cfg.image_size,
            surface_base_mm=base,
            surface_waves=waves,
            vessels=vessels,
            instrument_class=instrument_class,
            tip_x=x_t,
            tip_y=y_t,
            tip_z_mm=0.0,
            shaft_angle=float(theta[i]),
            tip_width=_TIP_WIDTH[instrument_class],
        )
        z_s_tip = float(surface_height(world_dry, x_t, y_t))
        world = dataclasses.replace(world_dry, tip_z_mm=z_s_tip + float(dist[i]))
        world.validate(cfg)

        ux, uy = math.cos(world.shaft_angle), math.sin(world.shaft_angle)
        line_a = ((x_t - h * ux, y_t - h * uy), (x_t + h * ux, y_t + h * uy))
        line_b = ((x_t + h * uy, y_t - h * ux), (x_t - h * uy, y_t + h * ux))
        mirror_a = bool(rng.random() < cfg.mirror_prob)
        mirror_b = bool(rng.random() < cfg.mirror_prob)

        reach = _border_exit_distance(x_t, y_t, ux, uy, cfg.image_size, margin=0.0)
        annotation = Annotation(
            instrument_class=instrument_class,
            bbox=instrument_bbox(world),
            keypoints=(
                (x_t, y_t, True),
                (x_t - 0.5 * reach * ux, y_t - 0.5 * reach * uy, True),
            ),
            distance_mm=world.tip_z_mm - z_s_tip,
        )
        frame = MultimodalFrame(
            frame_index=i,
            opmi=render_opmi(world, cfg),
            bscan_a=render_bscan(world, line_a, cfg, mirrored=mirror_a),
            bscan_b=render_bscan(world, line_b, cfg, mirrored=mirror_b),
            scan_geometry=ScanGeometry(
                line_a_start=line_a[0],
                line_a_end=line_a[1],
                line_b_start=line_b[0],
                line_b_end=line_b[1],
                axial_range_mm=cfg.axial_range_mm,
            ),
            annotation=annotation,
        )
        frame = apply_augmentations(frame, rng, cfg)
        frames.append(
            dataclasses.replace(
                frame,
                opmi=quantize_unit(frame.opmi),
                bscan_a=quantize_unit(frame.bscan_a),
                bscan_b=quantize_unit(frame.bscan_b),
            )
        )

    seq = SequenceRecord(
        sequence_id=f"seq_{seed:06d}",
        frames=tuple(frames),
        generator_config_digest=config_digest(cfg),
    )
    seq.validate(*cfg.distance_range_mm)
    return seq


def _make_vessels(cfg: GeneratorConfig, rng: np.random.Generator):
    size = cfg.image_size
    count = int(rng.integers(cfg.vessel_count_range[0], cfg.vessel_count_range[1] + 1))
    vessels = []
    for _ in range(count):
        x, y = rng.uniform(0.1 * size, 0.9 * size, size=2)
        heading = rng.uniform(0.0, 2.0 * math.pi)
        points = [(float(x), float(y))]
        for _ in range(8):
            heading += rng.normal(0.0, 0.45)
            x += math.cos(heading) * size * 0.09
            y += math.sin(heading) * size * 0.09
            points.append((float(x), float(y)))
        vessels.append(tuple(points))
    return tuple(vessels)
