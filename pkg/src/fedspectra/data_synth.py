"""Synthetic device-shifted spectrogram datasets.

Generation follows a content/style split: the class label is fixed by
content events (broadband transients for crackles, sustained narrow ridges
for wheezes) rendered on a 1/f noise bed, and only afterwards does a device
style (frequency response curve, mean offset, noise floor) touch the grid.
Device presets echo published per-stethoscope statistics: mean offsets are
taken verbatim, and the response-curve variances and noise floors follow
the frequency/temporal variation orderings.

Datasets are written as a structured-text manifest plus a raw little-endian
float64 blob ("RSFD-1"), one file pair per device.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .arrays import SpecGrid
from .errors import BadRatio, ConfigError, DataError, GridTooSmall, ShapeMismatch
from .rng import RngStream
from .text_meta import NEUTRAL, MetaPrompt

FORMAT_VERSION = "RSFD-1"

CLASSES = ("normal", "crackle", "wheeze", "both")

AGE_GROUPS = ("pediatric", "adult")
SEXES = ("female", "male")
SITES = ("site_0", "site_1", "site_2", "site_3")

BED_PEAK = 6.0
BED_KNEE = 8.0
BED_SD = 1.0

# Per-device statistics: mean offset (verbatim), frequency/temporal variation
# scales (verbatim, used for ordering only), published class counts, plus the
# response-curve amplitude and noise floor derived from the variation ranks.
DEVICE_TABLE = {
    "AKGC417L": dict(
        mean=-51.31, s_f=3275.76, s_t=47239.05, counts=(1879, 1503, 443, 315),
        response_amp=0.45, noise_sd=2.0,
    ),
    "LittC2SE": dict(
        mean=-90.53, s_f=1540.72, s_t=11640.13, counts=(672, 132, 252, 88),
        response_amp=0.25, noise_sd=1.3,
    ),
    "Litt3200": dict(
        mean=-77.62, s_f=409.18, s_t=1141.44, counts=(646, 48, 186, 26),
        response_amp=0.12, noise_sd=0.8,
    ),
    "Meditron": dict(
        mean=-77.34, s_f=2487.34, s_t=20810.60, counts=(995, 174, 133, 19),
        response_amp=0.35, noise_sd=1.6,
    ),
    "Yunting": dict(
        mean=-82.73, s_f=388.91, s_t=2102.70, counts=(6199, 1044, 757, 31),
        response_amp=0.10, noise_sd=0.9,
    ),
}

PRESET_DEVICES = tuple(DEVICE_TABLE)


@dataclass(frozen=True)
class DeviceStyle:
    device_id: str
    mean_offset: float
    freq_response: np.ndarray
    noise_floor_sd: float
    freq_var_scale: float
    time_var_scale: float

    def __post_init__(self):
        resp = np.asarray(self.freq_response, dtype=np.float64)
        if resp.ndim != 1:
            raise ConfigError("freq_response must be a 1-D gain curve")
        if (resp <= 0).any():
            raise ConfigError("freq_response entries must be positive")
        if self.noise_floor_sd < 0:
            raise ConfigError("noise_floor_sd must be >= 0")
        if resp.flags.writeable:
            resp = resp.copy()
            resp.setflags(write=False)
        object.__setattr__(self, "freq_response", resp)


def build_device_style(name: str, freq_bins: int, seed: int) -> DeviceStyle:
    """Preset style: mean-1 smoothed random-walk response curve whose spread
    follows the device's frequency-variation rank, plus its noise floor."""
    if name not in DEVICE_TABLE:
        raise ConfigError(f"unknown device preset {name!r}")
    row = DEVICE_TABLE[name]
    stream = RngStream(seed, ("style", name))
    walk = np.cumsum(stream.normal(size=freq_bins))
    kernel = np.ones(7) / 7.0
    smooth = np.convolve(walk, kernel, mode="same")
    sd = smooth.std()
    z = (smooth - smooth.mean()) / (sd if sd > 1e-9 else 1.0)
    resp = np.clip(1.0 + row["response_amp"] * z, 0.05, None)
    resp = resp / resp.mean()
    return DeviceStyle(
        device_id=name,
        mean_offset=row["mean"],
        freq_response=resp,
        noise_floor_sd=row["noise_sd"],
        freq_var_scale=row["s_f"],
        time_var_scale=row["s_t"],
    )


def device_class_ratios(name: str) -> tuple:
    counts = DEVICE_TABLE[name]["counts"]
    total = sum(counts)
    return tuple(c / total for c in counts)


@dataclass(frozen=True)
class ContentEvent:
    """Label plus the placements that realize it (no device information)."""

    label: str
    transients: tuple = field(default_factory=tuple)  # (t0, width, f_lo, f_hi, intensity)
    ridges: tuple = field(default_factory=tuple)  # (f0, bandwidth, t0, length, intensity)

    def __post_init__(self):
        if self.label not in CLASSES:
            raise ConfigError(f"unknown class {self.label!r}")
        want_t = self.label in ("crackle", "both")
        want_r = self.label in ("wheeze", "both")
        if bool(self.transients) != want_t or bool(self.ridges) != want_r:
            raise ConfigError(f"event composition does not realize label {self.label!r}")

    @classmethod
    def sample(cls, label: str, stream: RngStream, freq_bins: int, time_frames: int):
        _check_grid_size(freq_bins, time_frames)
        transients = []
        ridges = []
        if label in ("crackle", "both"):
            for _ in range(2 + int(stream.integer(4))):  # 2..5 transients
                width = 1 + int(stream.integer(3))
                t0 = int(stream.integer(time_frames - width + 1))
                f_lo = int(stream.integer(freq_bins // 8 + 1))
                f_hi = freq_bins - int(stream.integer(freq_bins // 8 + 1))
                intensity = float(stream.uniform(8.0, 14.0))
                transients.append((t0, width, f_lo, f_hi, intensity))
        if label in ("wheeze", "both"):
            for _ in range(1 + int(stream.integer(2))):  # 1..2 ridges
                bandwidth = 2 + int(stream.integer(3))
                f0 = int(stream.integer(freq_bins - bandwidth + 1))
                min_len = -(-time_frames // 3)  # ceil(T/3): "sustained"
                length = min_len + int(stream.integer(min_len + 1))
                t0 = int(stream.integer(time_frames - length + 1))
                intensity = float(stream.uniform(8.0, 14.0))
                ridges.append((f0, bandwidth, t0, length, intensity))
        return cls(label, tuple(transients), tuple(ridges))


def _check_grid_size(freq_bins: int, time_frames: int):
    if freq_bins < 8 or time_frames < 8:
        raise GridTooSmall(f"content rendering needs F, T >= 8, got {freq_bins}x{time_frames}")


def bed_level(freq_bins: int) -> np.ndarray:
    """Smooth 1/f-shaped bed, one level per frequency bin."""
    f = np.arange(freq_bins, dtype=np.float64)
    return BED_PEAK / (1.0 + f / BED_KNEE)


def render_content(
    event: ContentEvent, stream: RngStream, freq_bins: int, time_frames: int
) -> SpecGrid:
    """Noise bed plus the event placements; bed noise is bounded uniform so a
    normal-class grid never exceeds bed level + 3 * BED_SD."""
    _check_grid_size(freq_bins, time_frames)
    half_width = np.sqrt(3.0) * BED_SD
    grid = bed_level(freq_bins)[:, None] + stream.uniform(
        -half_width, half_width, size=(freq_bins, time_frames)
    )
    for t0, width, f_lo, f_hi, intensity in event.transients:
        grid[f_lo:f_hi, t0 : t0 + width] += intensity
    for f0, bandwidth, t0, length, intensity in event.ridges:
        grid[f0 : f0 + bandwidth, t0 : t0 + length] += intensity
    grid.setflags(write=False)
    return SpecGrid(grid)


def apply_device(x_content: SpecGrid, style: DeviceStyle, stream: RngStream) -> SpecGrid:
    """Row-wise response gain, mean offset, and per-entry noise floor."""
    if style.freq_response.shape[0] != x_content.freq_bins:
        raise ShapeMismatch(
            f"response curve length {style.freq_response.shape[0]} != grid rows "
            f"{x_content.freq_bins}"
        )
    out = style.freq_response[:, None] * x_content.values + style.mean_offset
    out += stream.normal(style.noise_floor_sd, size=out.shape)
    out.setflags(write=False)
    return SpecGrid(out)


@dataclass(frozen=True)
class RecordMeta:
    index: int
    device: str
    label: str
    age_group: str
    sex: str
    site: str
    offset: int

    def prompt(self) -> MetaPrompt:
        return MetaPrompt(self.device, self.age_group, self.sex, self.site)


@dataclass(frozen=True)
class DatasetManifest:
    version: str
    freq_bins: int
    time_frames: int
    classes: tuple
    attr_vocab: dict  # attribute name -> tuple of tokens
    records: tuple

    def vocabulary(self) -> tuple:
        """Model vocabulary: the shared neutral token then every attribute token."""
        tokens = [NEUTRAL]
        for name in ("device", "age_group", "sex", "site"):
            tokens.extend(self.attr_vocab[name])
        return tuple(tokens)


class Dataset:
    """Manifest plus a read-only memmap over the grid blob."""

    def __init__(self, manifest: DatasetManifest, grids: np.ndarray):
        self.manifest = manifest
        self.grids = grids
        self.labels = np.asarray(
            [manifest.classes.index(r.label) for r in manifest.records], dtype=np.intp
        )

    def __len__(self) -> int:
        return len(self.manifest.records)

    def grid(self, i: int) -> SpecGrid:
        return SpecGrid(self.grids[i])

    def prompt(self, i: int) -> MetaPrompt:
        return self.manifest.records[i].prompt()


def _sample_demographics(stream: RngStream, label_idx: int, site_label_corr: float):
    age = AGE_GROUPS[0] if float(stream.random()) < 0.35 else AGE_GROUPS[1]
    sex = SEXES[int(stream.integer(len(SEXES)))]
    if site_label_corr > 0 and float(stream.random()) < site_label_corr:
        site = SITES[label_idx]
    else:
        site = SITES[int(stream.integer(len(SITES)))]
    return age, sex, site


def _write_manifest(path, freq_bins, time_frames, devices, records):
    lines = [FORMAT_VERSION]
    lines.append(f"freq_bins {freq_bins}")
    lines.append(f"time_frames {time_frames}")
    lines.append("classes " + " ".join(CLASSES))
    lines.append("attr device " + " ".join(devices))
    lines.append("attr age_group " + " ".join(AGE_GROUPS))
    lines.append("attr sex " + " ".join(SEXES))
    lines.append("attr site " + " ".join(SITES))
    lines.append(f"neutral_token {NEUTRAL}")
    lines.append(f"records {len(records)}")
    for r in records:
        lines.append(
            f"record {r.index} {r.device} {r.label} {r.age_group} {r.sex} {r.site} {r.offset}"
        )
    lines.append("end")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def generate_dataset(
    out_dir,
    device_counts: dict,
    seed: int,
    freq_bins: int = 64,
    time_frames: int = 128,
    ratios: dict | None = None,
    site_label_corr: float = 0.0,
) -> dict:
    """Write one manifest/blob pair per device; returns device -> manifest path.

    device_counts maps preset names to record counts; ratios optionally
    overrides the per-device class ratios (must sum to 1 within 1e-9).
    """
    os.makedirs(out_dir, exist_ok=True)
    devices = tuple(device_counts)
    for name, count in device_counts.items():
        if name not in DEVICE_TABLE:
            raise ConfigError(f"unknown device preset {name!r}")
        if count < 1:
            raise ConfigError(f"device {name} needs at least one record")
    base = RngStream(seed)
    paths = {}
    for name in devices:
        count = device_counts[name]
        class_ratios = ratios[name] if ratios and name in ratios else device_class_ratios(name)
        class_ratios = tuple(float(v) for v in class_ratios)
        if len(class_ratios) != len(CLASSES) or abs(sum(class_ratios) - 1.0) > 1e-9:
            raise BadRatio(f"class ratios for {name} must sum to 1, got {class_ratios}")
        cumulative = np.cumsum(class_ratios)
        style = build_device_style(name, freq_bins, seed)
        manifest_path = os.path.join(out_dir, f"{name}.manifest")
        blob_path = os.path.join(out_dir, f"{name}.blob")
        records = []
        with open(blob_path, "wb") as blob:
            for i in range(count):
                rec = base.child("record", name, i)
                u = float(rec.child("label").random())
                label_idx = int(np.searchsorted(cumulative, u, side="right"))
                label_idx = min(label_idx, len(CLASSES) - 1)
                event = ContentEvent.sample(
                    CLASSES[label_idx], rec.child("event"), freq_bins, time_frames
                )
                content = render_content(event, rec.child("bed"), freq_bins, time_frames)
                grid = apply_device(content, style, rec.child("devnoise"))
                age, sex, site = _sample_demographics(
                    rec.child("demo"), label_idx, site_label_corr
                )
                offset = i * freq_bins * time_frames * 8
                records.append(
                    RecordMeta(i, name, CLASSES[label_idx], age, sex, site, offset)
                )
                blob.write(np.ascontiguousarray(grid.values, dtype="<f8").tobytes())
        _write_manifest(manifest_path, freq_bins, time_frames, devices, records)
        paths[name] = manifest_path
    return paths


def read_dataset(manifest_path) -> Dataset:
    manifest_path = os.fspath(manifest_path)
    try:
        with open(manifest_path, "r", encoding="ascii") as fh:
            lines = [line.rstrip("\n") for line in fh]
    except OSError as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if not lines or lines[0] != FORMAT_VERSION:
        raise DataError(f"{manifest_path}: expected format version {FORMAT_VERSION}")
    freq_bins = time_frames = None
    classes = None
    attr_vocab = {}
    declared = None
    records = []
    for line in lines[1:]:
        if line == "end":
            break
        kind, _, rest = line.partition(" ")
        if kind == "freq_bins":
            freq_bins = int(rest)
        elif kind == "time_frames":
            time_frames = int(rest)
        elif kind == "classes":
            classes = tuple(rest.split())
        elif kind == "attr":
            parts = rest.split()
            attr_vocab[parts[0]] = tuple(parts[1:])
        elif kind == "neutral_token":
            if rest != NEUTRAL:
                raise DataError(f"{manifest_path}: unsupported neutral token {rest!r}")
        elif kind == "records":
            declared = int(rest)
        elif kind == "record":
            parts = rest.split()
            records.append(
                RecordMeta(
                    int(parts[0]), parts[1], parts[2], parts[3], parts[4], parts[5],
                    int(parts[6]),
                )
            )
        else:
            raise DataError(f"{manifest_path}: unknown manifest line {line!r}")
    if freq_bins is None or time_frames is None or classes is None or declared is None:
        raise DataError(f"{manifest_path}: incomplete manifest header")
    if classes != CLASSES:
        raise DataError(f"{manifest_path}: unsupported class vocabulary {classes}")
    if len(records) != declared:
        raise DataError(
            f"{manifest_path}: {len(records)} record lines but header declares {declared}"
        )
    last = -1
    for r in records:
        if r.offset <= last:
            raise DataError(f"{manifest_path}: record offsets must be strictly increasing")
        last = r.offset
    blob_path = manifest_path[: -len(".manifest")] + ".blob" if manifest_path.endswith(
        ".manifest"
    ) else manifest_path + ".blob"
    record_bytes = freq_bins * time_frames * 8
    try:
        blob_size = os.path.getsize(blob_path)
    except OSError as exc:
        raise DataError(f"cannot read blob {blob_path}: {exc}") from exc
    if blob_size != record_bytes * len(records):
        raise DataError(
            f"{blob_path}: blob holds {blob_size} bytes, manifest implies "
            f"{record_bytes * len(records)}"
        )
    grids = np.memmap(blob_path, dtype="<f8", mode="r", shape=(len(records), freq_bins, time_frames))
    manifest = DatasetManifest(
        version=FORMAT_VERSION,
        freq_bins=freq_bins,
        time_frames=time_frames,
        classes=classes,
        attr_vocab=attr_vocab,
        records=tuple(records),
    )
    return Dataset(manifest, grids)
