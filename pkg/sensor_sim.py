"""
Synthetic drag and tap episodes for a 10-microphone vibration array.

Signal model (per microphone, in ADC counts before quantization):
- bump-crossing harmonic train at velocity / bump_spacing (3 harmonics)
- velocity-scaled broadband friction noise
- receptive-field gain exp(-d / receptive_decay_mm) on the contact excitation
- per-mic constant bias and Gaussian sensor noise
- 12-bit ADC behind a gain-5.5 / 1 V-bias amplifier on a 3.3 V rail

Every episode is a pure function of (seed, arguments). Independent random
streams are spawned per component so that two episodes sharing a seed share
their path and noise draws even when the texture differs.
"""
import dataclasses
import logging
import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import LayoutConfig, SimulationParams, TapParams
from errors import DataError


logger = logging.getLogger(__name__)

N_MICS = 10
ADC_GAIN = 5.5
ADC_BIAS_V = 1.0
ADC_VREF_V = 3.3
ADC_MAX_COUNTS = 4095
# input-referred volts per ADC count
COUNT_VOLTS = ADC_VREF_V / ADC_MAX_COUNTS / ADC_GAIN

MIC_CHANNELS = tuple(f"mic{i}" for i in range(N_MICS))
ROBOT_POS_CHANNELS = ("x_mm", "y_mm", "z_mm")
ROBOT_VEL_CHANNELS = ("vx_mm_s", "vy_mm_s", "vz_mm_s")
FT_CHANNELS = ("fx_n", "fy_n", "fz_n", "tx_nmm", "ty_nmm", "tz_nmm")

TEXTURE_IDS = ("a", "b", "c", "d")
TEXTURE_SPACINGS_MM = {"a": 0.0, "b": 1.5, "c": 3.0, "d": 4.5}
MAX_BUMP_SPACING_MM = 4.5

EPISODE_KINDS = ("drag", "tap")


# ============================================================================
# DOMAIN TYPES
# ============================================================================

@dataclasses.dataclass(frozen=True)
class TextureSpec:
    """Indenter texture: hemispherical bumps at a given spacing (0 = flat)."""

    id: str
    bump_spacing_mm: float

    def __post_init__(self):
        if self.id not in TEXTURE_IDS:
            raise DataError(f"unknown texture id '{self.id}'")
        if not 0.0 <= self.bump_spacing_mm <= MAX_BUMP_SPACING_MM:
            raise DataError(f"bump spacing {self.bump_spacing_mm} mm outside [0, {MAX_BUMP_SPACING_MM}]")

    @property
    def bump_diameter_mm(self) -> float:
        # contact-area preserving diameter; flat has none
        return self.bump_spacing_mm * math.sqrt(2.0 / math.pi)

    @property
    def is_flat(self) -> bool:
        return self.bump_spacing_mm == 0.0

    @property
    def class_index(self) -> int:
        return TEXTURE_IDS.index(self.id)


def texture_spec(texture: Union[str, TextureSpec]) -> TextureSpec:
    """Resolve a texture id to its spec; raises DataError on unknown ids."""
    if isinstance(texture, TextureSpec):
        return texture
    if texture not in TEXTURE_SPACINGS_MM:
        raise DataError(f"unknown texture id '{texture}'")
    return TextureSpec(texture, TEXTURE_SPACINGS_MM[texture])


@dataclasses.dataclass(frozen=True, eq=False)
class SensorLayout:
    """Microphone positions (mm) over an axis-aligned sensing area."""

    mic_positions: np.ndarray
    sensing_area: Tuple[float, float, float, float]
    receptive_decay_mm: float
    inner_side_mm: float
    outer_offset_mm: float

    @property
    def center(self) -> np.ndarray:
        x0, y0, x1, y1 = self.sensing_area
        return np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0])

    @property
    def inner_positions(self) -> np.ndarray:
        return self.mic_positions[:4]

    @property
    def outer_positions(self) -> np.ndarray:
        return self.mic_positions[4:]

    def contains(self, point, tol: float = 1e-9) -> bool:
        x0, y0, x1, y1 = self.sensing_area
        x, y = float(point[0]), float(point[1])
        return (x0 - tol <= x <= x1 + tol) and (y0 - tol <= y <= y1 + tol)

    def distances(self, points: np.ndarray) -> np.ndarray:
        """Contact-to-mic distances; (..., 2) -> (..., 10)."""
        points = np.asarray(points, dtype=np.float64)
        diff = points[..., None, :] - self.mic_positions
        return np.sqrt(np.sum(diff ** 2, axis=-1))

    def receptive_gain(self, points: np.ndarray) -> np.ndarray:
        return np.exp(-self.distances(points) / self.receptive_decay_mm)


@dataclasses.dataclass(eq=False)
class DragEpisode:
    """Time-aligned multichannel recording of one drag or tap."""

    episode_id: str
    texture: Optional[str]
    nominal_velocity_mm_s: float
    sample_rate_hz: float
    mic_counts: np.ndarray
    robot_pos_mm: np.ndarray
    robot_vel_mm_s: np.ndarray
    ft_n: np.ndarray
    rng_seed: int
    kind: str = "drag"
    metadata: Dict = dataclasses.field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return int(self.mic_counts.shape[0])

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    @property
    def planar_speed(self) -> np.ndarray:
        return np.hypot(self.robot_vel_mm_s[:, 0], self.robot_vel_mm_s[:, 1])

    def validate(self) -> None:
        """Check shapes, ranges and kind; raises DataError."""
        n = self.n_samples
        if self.mic_counts.shape != (n, N_MICS):
            raise DataError(f"{self.episode_id}: mic_counts shape {self.mic_counts.shape}")
        for name, arr, width in (("robot_pos_mm", self.robot_pos_mm, 3),
                                 ("robot_vel_mm_s", self.robot_vel_mm_s, 3),
                                 ("ft_n", self.ft_n, 6)):
            if arr.shape != (n, width):
                raise DataError(f"{self.episode_id}: {name} shape {arr.shape}, expected ({n}, {width})")
        if n and (self.mic_counts.min() < 0 or self.mic_counts.max() > ADC_MAX_COUNTS):
            raise DataError(f"{self.episode_id}: mic counts outside [0, {ADC_MAX_COUNTS}]")
        if self.kind not in EPISODE_KINDS:
            raise DataError(f"{self.episode_id}: unknown kind '{self.kind}'")


# ============================================================================
# LAYOUT
# ============================================================================

def build_layout(config: LayoutConfig = LayoutConfig()) -> SensorLayout:
    """
    Place 4 inner microphones on a centered square and 6 outer ones around it.

    Outer ring: two microphones in the NE and SW quadrants (pushed against the
    border when the offset exceeds the inner-square margin) and one on the
    outward diagonal of the NW and SE inner microphones. Every outer
    microphone sits exactly outer_offset_mm from its own inner microphone.

    Args:
        config: inner square side, outer offset, area size, receptive decay

    Returns:
        A validated SensorLayout

    Raises:
        DataError: a microphone falls outside the sensing area, or the
            geometry violates the layout invariants
    """
    side = float(config.inner_side_mm)
    offset = float(config.outer_offset_mm)
    size = float(config.area_size_mm)
    if side <= 0 or offset <= 0 or size <= 0:
        raise DataError("layout lengths must be positive")
    if config.receptive_decay_mm <= 0:
        raise DataError("receptive_decay_mm must be positive")

    c = size / 2.0
    h = side / 2.0
    sw, se, ne, nw = (c - h, c - h), (c + h, c - h), (c + h, c + h), (c - h, c + h)
    inner = [sw, se, ne, nw]

    margin = c - h
    along = min(offset, max(margin, 0.0))
    across = math.sqrt(max(offset ** 2 - along ** 2, 0.0))
    diag = offset / math.sqrt(2.0)
    outer = [
        (ne[0] + along, ne[1] + across),
        (ne[0] + across, ne[1] + along),
        (nw[0] - diag, nw[1] + diag),
        (sw[0] - along, sw[1] - across),
        (sw[0] - across, sw[1] - along),
        (se[0] + diag, se[1] - diag),
    ]

    layout = SensorLayout(
        mic_positions=np.array(inner + outer, dtype=np.float64),
        sensing_area=(0.0, 0.0, size, size),
        receptive_decay_mm=float(config.receptive_decay_mm),
        inner_side_mm=side,
        outer_offset_mm=offset,
    )
    validate_layout(layout)
    return layout


def validate_layout(layout: SensorLayout, tol: float = 1e-9) -> None:
    """Raise DataError unless the layout satisfies every geometry invariant."""
    pos = layout.mic_positions
    if pos.shape != (N_MICS, 2):
        raise DataError(f"expected {N_MICS} microphone positions, got {pos.shape[0]}")
    for i, p in enumerate(pos):
        if not layout.contains(p, tol):
            raise DataError(f"microphone {i} at ({p[0]:.3f}, {p[1]:.3f}) mm is outside the sensing area")
    if layout.receptive_decay_mm <= 0:
        raise DataError("receptive_decay_mm must be positive")

    inner, outer = pos[:4], pos[4:]
    inner_d = np.linalg.norm(inner[:, None, :] - inner[None, :, :], axis=-1)
    np.fill_diagonal(inner_d, np.inf)
    if not np.allclose(inner_d.min(axis=1), layout.inner_side_mm, atol=1e-6):
        raise DataError("inner microphones do not form a square of the configured side")
    outer_d = np.linalg.norm(outer[:, None, :] - inner[None, :, :], axis=-1).min(axis=1)
    if not np.allclose(outer_d, layout.outer_offset_mm, atol=1e-6):
        raise DataError("outer microphones are not at the configured offset from the inner square")


# ============================================================================
# ADC MODEL
# ============================================================================

def adc_quantize(voltage):
    """
    Amplify, bias and quantize a microphone voltage to 12-bit counts.

    counts = clamp(round((5.5 * v + 1.0) / 3.3 * 4095), 0, 4095). Saturation
    clamps; it is never an error. Scalars return int, arrays return int32.
    """
    v = np.asarray(voltage, dtype=np.float64)
    counts = np.clip(np.rint((ADC_GAIN * v + ADC_BIAS_V) / ADC_VREF_V * ADC_MAX_COUNTS), 0, ADC_MAX_COUNTS)
    if counts.ndim == 0:
        return int(counts)
    return counts.astype(np.int32)


def counts_to_volts(counts_equivalent: np.ndarray) -> np.ndarray:
    """Input-referred voltage that produces the given count offset above bias."""
    return np.asarray(counts_equivalent, dtype=np.float64) * COUNT_VOLTS


# ============================================================================
# DRAG TRAJECTORY
# ============================================================================

def _border_point(u: float, size: float) -> np.ndarray:
    """Map a perimeter coordinate u in [0, 4*size) to a border point."""
    u = u % (4.0 * size)
    side, t = divmod(u, size)
    if side == 0:
        return np.array([t, 0.0])
    if side == 1:
        return np.array([size, t])
    if side == 2:
        return np.array([size - t, size])
    return np.array([0.0, size - t])


def _sample_path(layout: SensorLayout, rng: np.random.Generator, min_length: float) -> Tuple[np.ndarray, np.ndarray]:
    x0, y0, x1, _ = layout.sensing_area
    size = x1 - x0
    origin = np.array([x0, y0])
    start = origin + _border_point(rng.uniform(0.0, 4.0 * size), size)
    for _ in range(1000):
        end = origin + _border_point(rng.uniform(0.0, 4.0 * size), size)
        if np.linalg.norm(end - start) >= min_length:
            return start, end
    raise DataError(f"could not sample a border path >= {min_length} mm")


def trapezoid_profile(tau: np.ndarray, distance: float, v_max: float, accel: float) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    Distance and speed along a straight move with a trapezoidal speed profile.

    Falls back to a triangular profile when the move is too short to reach
    v_max. Returns (distance, speed, total move time).
    """
    t_acc = v_max / accel
    d_acc = 0.5 * accel * t_acc ** 2
    if 2.0 * d_acc >= distance:
        v_peak = math.sqrt(accel * distance)
        t_acc = v_peak / accel
        d_acc = 0.5 * distance
        t_flat = 0.0
    else:
        v_peak = v_max
        t_flat = (distance - 2.0 * d_acc) / v_peak
    total = 2.0 * t_acc + t_flat

    tau = np.asarray(tau, dtype=np.float64)
    s = np.zeros_like(tau)
    speed = np.zeros_like(tau)

    ramp_up = (tau > 0) & (tau < t_acc)
    s[ramp_up] = 0.5 * accel * tau[ramp_up] ** 2
    speed[ramp_up] = accel * tau[ramp_up]

    flat = (tau >= t_acc) & (tau < t_acc + t_flat)
    s[flat] = d_acc + v_peak * (tau[flat] - t_acc)
    speed[flat] = v_peak

    ramp_down = (tau >= t_acc + t_flat) & (tau < total)
    remaining = total - tau[ramp_down]
    s[ramp_down] = distance - 0.5 * accel * remaining ** 2
    speed[ramp_down] = accel * remaining

    s[tau >= total] = distance
    return np.clip(s, 0.0, distance), speed, total


def _spawn(seed: int, n: int) -> List[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(n)]


# ============================================================================
# DRAG SIMULATION
# ============================================================================

def simulate_drag(layout: SensorLayout,
                  texture: Union[str, TextureSpec],
                  velocity: float,
                  seed: int,
                  params: SimulationParams = SimulationParams()) -> DragEpisode:
    """
    Simulate one straight-line drag of a textured indenter across the array.

    Args:
        layout: microphone layout
        texture: texture id or spec
        velocity: commanded drag speed in mm/s
        seed: episode seed; identical (seed, args) give identical episodes
        params: signal and trajectory parameters

    Returns:
        A DragEpisode of kind 'drag' sampled at params.sample_rate_hz
    """
    spec = texture_spec(texture)
    if not velocity > 0:
        raise DataError(f"drag velocity must be positive, got {velocity}")

    path_rng, excite_rng, friction_rng, noise_rng, bias_rng, ft_rng = _spawn(seed, 6)
    fs = float(params.sample_rate_hz)

    start, end = _sample_path(layout, path_rng, params.min_path_mm)
    accel = path_rng.uniform(*params.accel_range_mm_s2)
    force = path_rng.uniform(*params.force_range_n)
    rotation = path_rng.uniform(*params.rotation_range_deg)

    length = float(np.linalg.norm(end - start))
    direction = (end - start) / length
    _, _, move_time = trapezoid_profile(np.zeros(1), length, velocity, accel)

    n_pre = int(round(params.pre_drag_s * fs))
    n_move = int(math.ceil(move_time * fs))
    n_post = int(round(params.post_drag_s * fs))
    n = n_pre + n_move + n_post
    tau = np.arange(n) / fs - n_pre / fs
    s, speed, _ = trapezoid_profile(tau, length, velocity, accel)

    xy = start[None, :] + s[:, None] * direction[None, :]
    depth = force / params.contact_stiffness_n_mm
    robot_pos = np.column_stack([xy, np.full(n, -depth)])
    robot_vel = np.column_stack([speed * direction[0], speed * direction[1], np.zeros(n)])

    # contact excitation common to all mics; bump-to-friction ratio is set by the texture alone
    force_scale = force / params.reference_force_n
    speed_scale = np.sqrt(speed / params.reference_speed_mm_s)
    excitation = np.zeros(n)
    if not spec.is_flat:
        weights = np.asarray(params.harmonic_weights, dtype=np.float64)
        amps = weights * (1.0 + params.harmonic_jitter * excite_rng.standard_normal(weights.size))
        phases = excite_rng.uniform(0.0, 2.0 * np.pi, weights.size)
        bump_phase = 2.0 * np.pi * s / spec.bump_spacing_mm
        train = sum(a * np.sin((k + 1) * bump_phase + p) for k, (a, p) in enumerate(zip(amps, phases)))
        texture_gain = spec.bump_diameter_mm / (MAX_BUMP_SPACING_MM * math.sqrt(2.0 / math.pi))
        excitation += params.bump_gain_counts * texture_gain * train
    friction_gain = params.friction_gain_counts * (params.flat_friction_scale if spec.is_flat else 1.0)
    excitation += friction_gain * friction_rng.standard_normal(n)
    excitation *= force_scale * speed_scale

    gains = layout.receptive_gain(xy)
    bias = params.mic_bias_counts * bias_rng.standard_normal(N_MICS)
    noise = params.sensor_noise_counts * noise_rng.standard_normal((n, N_MICS))
    mic_counts = adc_quantize(counts_to_volts(bias[None, :] + gains * excitation[:, None] + noise))

    moving = speed > 0
    friction = params.friction_coefficient * force
    fx = friction * direction[0] * moving
    fy = friction * direction[1] * moving
    fz = np.full(n, -force)
    rel = xy - layout.center[None, :]
    ft = np.column_stack([
        fx, fy, fz,
        rel[:, 1] * fz,
        -rel[:, 0] * fz,
        rel[:, 0] * fy - rel[:, 1] * fx,
    ]) + params.ft_noise_n * ft_rng.standard_normal((n, 6))

    episode = DragEpisode(
        episode_id=f"drag-{spec.id}-v{velocity:g}-s{seed}",
        texture=spec.id,
        nominal_velocity_mm_s=float(velocity),
        sample_rate_hz=fs,
        mic_counts=mic_counts,
        robot_pos_mm=robot_pos,
        robot_vel_mm_s=robot_vel,
        ft_n=ft,
        rng_seed=int(seed),
        kind="drag",
        metadata={
            "start_mm": [float(v) for v in start],
            "end_mm": [float(v) for v in end],
            "path_length_mm": length,
            "accel_mm_s2": float(accel),
            "normal_force_n": float(force),
            "rotation_deg": float(rotation),
            "drag_start_index": n_pre,
            "drag_stop_index": n_pre + n_move,
            "duration_s": n_pre / fs + move_time + n_post / fs,
        },
    )
    episode.validate()
    return episode


# ============================================================================
# TAP SIMULATION
# ============================================================================

def tap_latency_ms(distance_mm: float, approach_velocity: float, params: TapParams) -> float:
    """Elastomer onset delay: base + distance term + velocity term."""
    velocity_term = params.velocity_latency_ms / (1.0 + approach_velocity / params.velocity_latency_scale_mm_s)
    return params.base_latency_ms + params.latency_per_mm_ms * distance_mm + velocity_term


def simulate_tap(layout: SensorLayout,
                 location: Sequence[float],
                 approach_velocity: float,
                 seed: int,
                 params: TapParams = TapParams(),
                 mic_of_interest: int = 0) -> DragEpisode:
    """
    Simulate a vertical tap onto the sensor at a given location.

    The indenter approaches at constant speed (after accelerating at
    params.approach_accel_mm_s2), contacts at an exact sample index, presses
    linearly until the force plateau and holds. Each microphone responds after
    an elastomer latency that grows with its distance from the contact, with a
    peak amplitude that decays with distance through the receptive field.

    Args:
        layout: microphone layout
        location: (x, y) contact point in mm, inside the sensing area
        approach_velocity: downward speed in mm/s
        seed: episode seed
        params: tap parameters
        mic_of_interest: microphone whose distance is recorded in metadata

    Returns:
        A DragEpisode of kind 'tap'; metadata['contact_index'] is the ground
        truth contact sample.
    """
    loc = np.asarray(location, dtype=np.float64)
    if loc.shape != (2,) or not layout.contains(loc):
        raise DataError(f"tap location {tuple(loc.tolist())} outside the sensing area")
    if not approach_velocity > 0:
        raise DataError(f"approach velocity must be positive, got {approach_velocity}")

    time_rng, force_rng, mic_rng, noise_rng, bias_rng, ft_rng, fault_rng = _spawn(seed, 7)
    fs = float(params.sample_rate_hz)
    v = float(approach_velocity)

    contact_index = int(round(time_rng.uniform(*params.pre_contact_range_s) * fs))
    t_contact = contact_index / fs
    plateau = force_rng.uniform(*params.plateau_range_n)
    depth_max = plateau / params.contact_stiffness_n_mm
    press_time = depth_max / v
    n = contact_index + int(math.ceil(press_time * fs)) + int(round(params.hold_s * fs))
    t = np.arange(n) / fs

    # approach: rest -> accelerate -> constant v, reaching the surface at t_contact
    accel = params.approach_accel_mm_s2
    t_acc = min(v / accel, t_contact)
    z0 = v * t_contact - 0.5 * accel * t_acc ** 2
    before = t < t_contact
    travelled = np.where(t < t_acc, 0.5 * accel * t ** 2, 0.5 * accel * t_acc ** 2 + v * (t - t_acc))
    depth = np.clip(v * (t - t_contact), 0.0, depth_max)
    z = np.where(before, z0 - travelled, -depth)
    vz = np.where(before, -np.minimum(accel * t, v), np.where(depth < depth_max, -v, 0.0))
    robot_pos = np.column_stack([np.full(n, loc[0]), np.full(n, loc[1]), z])
    robot_vel = np.column_stack([np.zeros(n), np.zeros(n), vz])

    # F/T: compression is negative Fz; each channel carries its own drift offset
    fz_contact = -params.contact_stiffness_n_mm * depth
    rel = loc - layout.center
    drift = ft_rng.uniform(-params.ft_drift_n, params.ft_drift_n, 6)
    ft = np.column_stack([
        np.zeros(n), np.zeros(n), fz_contact,
        rel[1] * fz_contact, -rel[0] * fz_contact, np.zeros(n),
    ]) + drift[None, :] + params.ft_noise_n * ft_rng.standard_normal((n, 6))

    flatline_start = None
    if fault_rng.random() < params.ft_flatline_probability:
        flatline_start = int(contact_index + fault_rng.integers(-3, 4))
        stop = min(n, flatline_start + params.ft_flatline_samples)
        ft[flatline_start:stop] = ft[flatline_start - 1]

    # microphones
    distances = layout.distances(loc)
    amp_scale = math.exp(params.amplitude_jitter * mic_rng.standard_normal())
    latency_jitter = params.latency_jitter_ms * mic_rng.standard_normal()
    amplitudes = params.tap_gain_counts_per_mm_s * v * np.exp(-distances / layout.receptive_decay_mm) * amp_scale
    rise_s = params.rise_depth_mm / v
    ring_s = params.ring_decay_ms / 1000.0
    pulses = np.zeros((n, N_MICS))
    onsets = np.empty(N_MICS)
    for i in range(N_MICS):
        latency_ms = max(tap_latency_ms(distances[i], v, params) + latency_jitter, 0.0)
        onsets[i] = t_contact + latency_ms / 1000.0
        since = t - onsets[i]
        rising = (since >= 0) & (since < rise_s)
        falling = since >= rise_s
        pulses[rising, i] = amplitudes[i] * since[rising] / rise_s
        pulses[falling, i] = amplitudes[i] * np.exp(-(since[falling] - rise_s) / ring_s)

    bias = params.mic_bias_counts * bias_rng.standard_normal(N_MICS)
    noise = params.sensor_noise_counts * noise_rng.standard_normal((n, N_MICS))
    mic_counts = adc_quantize(counts_to_volts(bias[None, :] + pulses + noise))

    episode = DragEpisode(
        episode_id=f"tap-x{loc[0]:.3f}-y{loc[1]:.3f}-v{v:g}-s{seed}",
        texture=None,
        nominal_velocity_mm_s=v,
        sample_rate_hz=fs,
        mic_counts=mic_counts,
        robot_pos_mm=robot_pos,
        robot_vel_mm_s=robot_vel,
        ft_n=ft,
        rng_seed=int(seed),
        kind="tap",
        metadata={
            "location_mm": [float(loc[0]), float(loc[1])],
            "mic_of_interest": int(mic_of_interest),
            "distance_mm": float(distances[mic_of_interest]),
            "contact_index": contact_index,
            "contact_time_s": t_contact,
            "mic_onset_s": [float(o) for o in onsets],
            "peak_counts": [float(a) for a in amplitudes],
            "plateau_n": float(plateau),
            "flatline_start": flatline_start,
        },
    )
    episode.validate()
    return episode


def tap_location(layout: SensorLayout, mic_index: int, distance_mm: float, rng: np.random.Generator) -> np.ndarray:
    """Random point at distance_mm from a microphone, inside the sensing area."""
    mic = layout.mic_positions[mic_index]
    if distance_mm == 0:
        return mic.copy()
    for _ in range(1000):
        angle = rng.uniform(0.0, 2.0 * np.pi)
        point = mic + distance_mm * np.array([math.cos(angle), math.sin(angle)])
        if layout.contains(point):
            return point
    raise DataError(f"no point {distance_mm} mm from microphone {mic_index} lies inside the sensing area")


# ============================================================================
# BATCH GENERATION
# ============================================================================

def episode_seed(base_seed: int, *keys: int) -> int:
    """Deterministic per-episode seed derived from a base seed and grid keys."""
    state = np.random.SeedSequence([int(base_seed), *[int(k) for k in keys]]).generate_state(1)
    return int(state[0])


def drag_grid(textures: Sequence[str],
              velocities: Sequence[float],
              drags_per_cell: int,
              base_seed: int) -> Iterator[Tuple[str, float, int]]:
    """Yield (texture, velocity, seed) for every drag of a collection grid."""
    for ti, tex in enumerate(textures):
        for vi, vel in enumerate(velocities):
            for k in range(drags_per_cell):
                yield tex, float(vel), episode_seed(base_seed, ti, vi, k)
