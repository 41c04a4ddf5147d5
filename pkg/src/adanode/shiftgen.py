"""Synthetic benchmark data: 1-D signals, graded shifts, a rotating glyph.

Severity tables (level s, identity at 0):
  ampfreq: frequency and amplitude scaled by (1 + 0.1 s) for oscillatory
           kinds; slope scaled by (1 + 0.2 s) for linear ramps.
  delay:   the signal is delayed by 0.05 s periods (phase shifted by
           2*pi*0.05*s) for oscillatory kinds; a ramp is delayed by 0.05 s
           time units (intercept drops by slope*0.05*s).

The glyph benchmark rotates a built-in 16x16 bitmap at a fixed angular rate;
severity stretches the frame interval dt from 0.10 up to 0.15, so a test
window covers a longer span of the same underlying rotation than the model
was trained on.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, EmptyDatasetError, ParseError, ShapeError, UsageError
from .model import TimeSeriesWindow

SIGNAL_KINDS = ("linear", "sine", "damped")
SHIFT_KINDS = ("ampfreq", "delay")
SEVERITIES = (0, 1, 2, 3, 4, 5)

# Width of the per-series phase-offset band for oscillatory kinds. Full-circle
# offsets would make the delay shift distribution-invariant.
PHASE_BAND = np.pi
DEFAULT_NOISE_FRACTION = 0.02

GLYPH_DT_TABLE = {0: 0.10, 1: 0.11, 2: 0.12, 3: 0.13, 4: 0.14, 5: 0.15}


@dataclass(frozen=True)
class SignalSpec:
    kind: str
    amplitude: float = 1.0
    frequency: float = 1.0
    phase: float = 0.0
    slope: float = 1.0
    intercept: float = 0.0
    damping: float = 0.5
    noise_std: float | None = None

    def __post_init__(self):
        if self.kind not in SIGNAL_KINDS:
            raise ConfigError(f"unknown signal kind: {self.kind!r}")
        if self.amplitude <= 0:
            raise ConfigError("amplitude must be positive")
        if self.kind in ("sine", "damped") and self.frequency <= 0:
            raise ConfigError("frequency must be positive for oscillatory kinds")
        if self.damping < 0:
            raise ConfigError("damping must be nonnegative")
        if self.noise_std is not None and self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")

    @property
    def effective_noise_std(self) -> float:
        if self.noise_std is None:
            return DEFAULT_NOISE_FRACTION * self.amplitude
        return self.noise_std


@dataclass(frozen=True)
class ShiftSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ConfigError(f"unknown shift kind: {self.kind!r}")
        if self.severity not in SEVERITIES:
            raise ConfigError("severity must be an integer in 0..5")


@dataclass
class SeriesDataset:
    split: str
    windows: list[TimeSeriesWindow]
    provenance: tuple | None = None

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ConfigError(f"split must be 'train' or 'test', got {self.split!r}")

    def __eq__(self, other) -> bool:
        """Data equality: split and window contents (provenance excluded)."""
        if not isinstance(other, SeriesDataset):
            return NotImplemented
        if self.split != other.split or len(self.windows) != len(other.windows):
            return False
        for a, b in zip(self.windows, other.windows):
            if not (
                np.array_equal(a.t_context, b.t_context)
                and np.array_equal(a.y_context, b.y_context)
                and np.array_equal(a.t_target, b.t_target)
            ):
                return False
            if (a.y_target is None) != (b.y_target is None):
                return False
            if a.y_target is not None and not np.array_equal(a.y_target, b.y_target):
                return False
        return True


def gen_signal(spec: SignalSpec, times, seed: int) -> np.ndarray:
    """Evaluate the clean signal on a time grid and add seeded Gaussian noise."""
    t = np.asarray(times, dtype=np.float64)
    if spec.kind == "sine":
        clean = spec.amplitude * np.sin(2.0 * np.pi * spec.frequency * t + spec.phase)
    elif spec.kind == "linear":
        clean = spec.slope * t + spec.intercept
    else:
        clean = (
            spec.amplitude
            * np.exp(-spec.damping * t)
            * np.sin(2.0 * np.pi * spec.frequency * t + spec.phase)
        )
    noise = np.random.default_rng(seed).normal(0.0, spec.effective_noise_std, size=t.shape)
    return clean + noise


def apply_shift(spec: SignalSpec, shift: ShiftSpec) -> SignalSpec:
    """Return the test-distribution version of a signal spec."""
    s = shift.severity
    if s not in SEVERITIES:
        raise ConfigError("severity must be an integer in 0..5")
    if s == 0:
        return spec
    if shift.kind == "ampfreq":
        if spec.kind == "linear":
            return replace(spec, slope=spec.slope * (1.0 + 0.2 * s))
        return replace(
            spec,
            frequency=spec.frequency * (1.0 + 0.1 * s),
            amplitude=spec.amplitude * (1.0 + 0.1 * s),
        )
    if spec.kind == "linear":
        return replace(spec, intercept=spec.intercept - spec.slope * 0.05 * s)
    return replace(spec, phase=spec.phase - 2.0 * np.pi * 0.05 * s)


def gen_dataset(
    signal: SignalSpec,
    shift: ShiftSpec,
    n_series: int,
    context_len: int,
    horizon_len: int,
    dt_sample: float,
    seed: int,
    split: str = "test",
) -> SeriesDataset:
    """Sample n_series labeled windows of the (possibly shifted) signal.

    Each series gets its own phase (oscillatory kinds) or intercept (linear)
    offset and its own noise, both drawn from a generator seeded with
    seed XOR series index, so series are independent and reproducible.
    """
    if n_series < 1:
        raise ConfigError("n_series must be >= 1")
    if context_len < 2 or horizon_len < 2:
        raise ConfigError("context_len and horizon_len must be >= 2")
    if dt_sample <= 0:
        raise ConfigError("dt_sample must be positive")
    if split == "train" and shift.severity != 0:
        raise ConfigError("the train split must use severity 0")
    shifted = apply_shift(signal, shift)
    n_total = context_len + horizon_len
    times = np.arange(n_total) * dt_sample
    windows = []
    for i in range(n_series):
        rng = np.random.default_rng(seed ^ i)
        if shifted.kind == "linear":
            spec_i = replace(
                shifted,
                intercept=shifted.intercept
                + rng.uniform(-shifted.amplitude, shifted.amplitude),
            )
        else:
            # Offsets cover part of a turn, not the full circle: with phases
            # uniform over 2*pi a time delay would leave the sine family's
            # distribution unchanged and the delay shift would test nothing.
            spec_i = replace(
                shifted, phase=shifted.phase + rng.uniform(0.0, PHASE_BAND)
            )
        noise = rng.normal(0.0, spec_i.effective_noise_std, size=n_total)
        if spec_i.kind == "sine":
            clean = spec_i.amplitude * np.sin(
                2.0 * np.pi * spec_i.frequency * times + spec_i.phase
            )
        elif spec_i.kind == "linear":
            clean = spec_i.slope * times + spec_i.intercept
        else:
            clean = (
                spec_i.amplitude
                * np.exp(-spec_i.damping * times)
                * np.sin(2.0 * np.pi * spec_i.frequency * times + spec_i.phase)
            )
        values = clean + noise
        windows.append(
            TimeSeriesWindow(
                times[:context_len],
                values[:context_len],
                times[context_len:],
                values[context_len:],
            )
        )
    return SeriesDataset(split=split, windows=windows, provenance=(signal, shift, seed))


# ---------------------------------------------------------------------------
# Rotating glyph
# ---------------------------------------------------------------------------

_GLYPH_ROWS = (
    "................",
    "...XXXXXXXX.....",
    "..XXXXXXXXXX....",
    "..XX......XXX...",
    "..........XXX...",
    ".........XXX....",
    "......XXXXX.....",
    "......XXXXXX....",
    ".........XXXX...",
    "...........XXX..",
    "...........XXX..",
    "..XX.......XXX..",
    "..XXX......XXX..",
    "...XXXXXXXXXX...",
    "....XXXXXXXX....",
    "................",
)


def builtin_glyph() -> np.ndarray:
    """The embedded 16x16 digit-like bitmap, values in {0, 1}."""
    return np.array([[1.0 if ch == "X" else 0.0 for ch in row] for row in _GLYPH_ROWS])


@dataclass(frozen=True)
class GlyphSequenceSpec:
    image: np.ndarray = None
    dt: float = 0.10
    frames: int = 20
    omega: float = 0.5 * np.pi

    def __post_init__(self):
        img = self.image if self.image is not None else builtin_glyph()
        img = np.asarray(img, dtype=np.float64)
        if img.shape != (16, 16):
            raise ConfigError("glyph image must be 16x16")
        if np.any(img < 0) or np.any(img > 1) or not np.all(np.isfinite(img)):
            raise ConfigError("glyph pixels must lie in [0, 1]")
        img = img.copy()
        img.flags.writeable = False
        object.__setattr__(self, "image", img)
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.frames < 2:
            raise ConfigError("a glyph sequence needs at least two frames")
        if not np.isfinite(self.omega):
            raise ConfigError("omega must be finite")


def rotate_bilinear(image: np.ndarray, angle: float) -> np.ndarray:
    """Rotate about the image center; bilinear sampling, zero outside."""
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    dy, dx = rr - cy, cc - cx
    cos, sin = np.cos(angle), np.sin(angle)
    sy = cos * dy + sin * dx + cy
    sx = -sin * dy + cos * dx + cx
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    wy, wx = sy - y0, sx - x0
    out = np.zeros((H, W))
    for oy, ox, w in (
        (0, 0, (1 - wy) * (1 - wx)),
        (0, 1, (1 - wy) * wx),
        (1, 0, wy * (1 - wx)),
        (1, 1, wy * wx),
    ):
        yy, xx = y0 + oy, x0 + ox
        inside = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        out += w * inside * img[np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1)]
    return out


def glyph_dt(spec: GlyphSequenceSpec, severity: int) -> float:
    """Frame interval at a severity; the table scales with the sequence's base dt."""
    if severity not in SEVERITIES:
        raise ConfigError("severity must be an integer in 0..5")
    return GLYPH_DT_TABLE[severity] * (spec.dt / GLYPH_DT_TABLE[0])


def gen_rotating_glyph(
    spec: GlyphSequenceSpec, severity: int, angle_offset: float = 0.0
) -> TimeSeriesWindow:
    """One glyph sequence window: frame i is the bitmap rotated by
    angle_offset + omega * (i * dt), flattened row-major; the first half of
    the frames is context, the rest target.

    Timestamps always follow the base frame interval. A severity widens the
    physical interval between captured frames, so the glyph turns further per
    frame, but the consumer still indexes frames on the clock it was built
    for; the shift shows up as a faster rotation, not as relabeled times.
    """
    dt = glyph_dt(spec, severity)
    frames = np.empty((spec.frames, spec.image.size))
    times = np.empty(spec.frames)
    for i in range(spec.frames):
        angle = angle_offset + spec.omega * (i * dt)
        frames[i] = rotate_bilinear(spec.image, angle).reshape(-1)
        times[i] = i * spec.dt
    n_ctx = (spec.frames + 1) // 2
    return TimeSeriesWindow(
        times[:n_ctx], frames[:n_ctx], times[n_ctx:], frames[n_ctx:]
    )


def gen_glyph_dataset(
    spec: GlyphSequenceSpec,
    severity: int,
    n_series: int,
    seed: int,
    split: str = "test",
) -> SeriesDataset:
    """Glyph windows differing by a seeded initial rotation per series."""
    if n_series < 1:
        raise ConfigError("n_series must be >= 1")
    if split == "train" and severity != 0:
        raise ConfigError("the train split must use severity 0")
    windows = []
    for i in range(n_series):
        offset = np.random.default_rng(seed ^ i).uniform(0.0, 2.0 * np.pi)
        windows.append(gen_rotating_glyph(spec, severity, angle_offset=offset))
    return SeriesDataset(split=split, windows=windows, provenance=(spec, severity, seed))


# ---------------------------------------------------------------------------
# Dataset CSV: series_id,split,role,t,dim_0,...  LF endings, %.17g floats.
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_dataset(ds: SeriesDataset, path) -> None:
    if not ds.windows:
        raise UsageError("cannot write an empty dataset")
    d = ds.windows[0].d_obs
    lines = ["series_id,split,role,t," + ",".join(f"dim_{j}" for j in range(d))]
    for sid, w in enumerate(ds.windows):
        if w.d_obs != d:
            raise ShapeError("all windows in a dataset must share d_obs")
        for t, row in zip(w.t_context, w.y_context):
            lines.append(
                f"{sid},{ds.split},context,{_fmt(t)}," + ",".join(_fmt(v) for v in row)
            )
        if w.y_target is not None:
            targets = np.asarray(w.y_target)
        else:
            targets = np.full((len(w.t_target), d), np.nan)
        for t, row in zip(w.t_target, targets):
            lines.append(
                f"{sid},{ds.split},target,{_fmt(t)}," + ",".join(_fmt(v) for v in row)
            )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_dataset(path) -> SeriesDataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].strip():
        raise EmptyDatasetError(f"{path}: no content")
    header = lines[0].split(",")
    if header[:4] != ["series_id", "split", "role", "t"]:
        raise ParseError("header must start with series_id,split,role,t", line=1)
    dim_names = header[4:]
    if not dim_names or dim_names != [f"dim_{j}" for j in range(len(dim_names))]:
        raise ParseError("header must end with dim_0..dim_{d-1} columns", line=1)
    d = len(dim_names)
    split = None
    series: dict[str, dict[str, list]] = {}
    order: list[str] = []
    n_rows = 0
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.split(",")
        if len(parts) != 4 + d:
            raise ParseError(
                f"expected {4 + d} fields, found {len(parts)}", line=lineno
            )
        sid, row_split, role = parts[0], parts[1], parts[2]
        if row_split not in ("train", "test"):
            raise ParseError(f"unknown split {row_split!r}", line=lineno)
        if split is None:
            split = row_split
        elif row_split != split:
            raise ParseError("file mixes train and test rows", line=lineno)
        if role not in ("context", "target"):
            raise ParseError(f"unknown role {role!r}", line=lineno)
        try:
            t = float(parts[3])
            vals = [float(v) for v in parts[4:]]
        except ValueError as exc:
            raise ParseError(f"bad number: {exc}", line=lineno) from None
        if sid not in series:
            series[sid] = {"ct": [], "cy": [], "tt": [], "ty": []}
            order.append(sid)
        bucket = series[sid]
        if role == "context":
            bucket["ct"].append(t)
            bucket["cy"].append(vals)
        else:
            bucket["tt"].append(t)
            bucket["ty"].append(vals)
        n_rows += 1
    if n_rows == 0:
        raise EmptyDatasetError(f"{path}: header only, no data rows")
    windows = []
    for sid in order:
        b = series[sid]
        ty = np.array(b["ty"])
        y_target = None if ty.size and np.all(np.isnan(ty)) else ty
        try:
            windows.append(
                TimeSeriesWindow(np.array(b["ct"]), np.array(b["cy"]),
                                 np.array(b["tt"]), y_target)
            )
        except ShapeError as exc:
            raise ParseError(f"series {sid}: {exc}") from None
    return SeriesDataset(split=split, windows=windows, provenance=None)
