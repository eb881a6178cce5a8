"""Event grids: EVT file I/O, train-fitted normalisation, synthetic showers.

An event is an ``H x W`` grid of station signals laid over a circular array;
cells outside the circle are exactly zero. Label 0 is gamma, 1 is proton.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "PARTITIONS",
    "DatasetError",
    "Geometry",
    "FULL_GEOMETRY",
    "DESK_GEOMETRY",
    "EventMatrix",
    "Partition",
    "DatasetBundle",
    "NormStats",
    "GeneratorConfig",
    "fit_norm",
    "apply_norm",
    "station_positions",
    "array_mask",
    "load_events",
    "save_events",
    "synth_generate",
]

PARTITIONS = ("train", "validation", "test", "generalisation")
LABEL_NAMES = ("gamma", "proton")
STD_FLOOR = 1e-12


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Geometry:
    height: int = 24
    width: int = 24
    cell_h: float = 7.0
    cell_w: float = 7.0
    radius: float = 80.0


FULL_GEOMETRY = Geometry(100, 45, 1.5, 3.0, 80.0)
DESK_GEOMETRY = Geometry()


def station_positions(geometry: Geometry) -> tuple[np.ndarray, np.ndarray]:
    """(x, y) in metres of every cell centre, origin at the array centre."""
    rows = (np.arange(geometry.height) + 0.5 - geometry.height / 2) * geometry.cell_h
    cols = (np.arange(geometry.width) + 0.5 - geometry.width / 2) * geometry.cell_w
    y, x = np.meshgrid(rows, cols, indexing="ij")
    return x, y


def array_mask(geometry: Geometry) -> np.ndarray:
    x, y = station_positions(geometry)
    return np.hypot(x, y) <= geometry.radius


@dataclass(frozen=True)
class EventMatrix:
    grid: np.ndarray
    label: int

    @property
    def label_name(self) -> str:
        return LABEL_NAMES[self.label]


@dataclass
class Partition:
    X: np.ndarray  # (n, H, W) float32
    y: np.ndarray  # (n,) int64
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)

    def events(self) -> list[EventMatrix]:
        return [EventMatrix(g, int(l)) for g, l in zip(self.X, self.y)]

    def counts(self) -> tuple[int, int]:
        return int((self.y == 0).sum()), int((self.y == 1).sum())


@dataclass
class DatasetBundle:
    partitions: dict[str, Partition]
    geometry: Geometry
    config: dict = field(default_factory=dict)

    @property
    def train(self) -> Partition:
        return self.partitions["train"]

    @property
    def validation(self) -> Partition:
        return self.partitions["validation"]

    @property
    def test(self) -> Partition:
        return self.partitions["test"]

    @property
    def generalisation(self) -> Partition:
        return self.partitions["generalisation"]

    def __getitem__(self, name: str) -> Partition:
        if name not in self.partitions:
            raise KeyError(f"unknown partition {name!r}; valid: {', '.join(PARTITIONS)}")
        return self.partitions[name]

    def counts(self) -> dict[str, tuple[int, int]]:
        return {k: p.counts() for k, p in self.partitions.items()}


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def fit_norm(X: np.ndarray) -> NormStats:
    """Per-cell mean and standard deviation; near-zero std floored to 1."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise DatasetError("cannot fit normalisation on an empty partition")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std < STD_FLOOR, 1.0, std)
    return NormStats(mean, std)


def apply_norm(stats: NormStats, X: np.ndarray) -> np.ndarray:
    return (np.asarray(X, dtype=np.float64) - stats.mean) / stats.std


# --------------------------------------------------------------------- I/O

def _check_bundle(parts: dict[str, Partition]) -> None:
    for name in PARTITIONS:
        if name not in parts or len(parts[name]) == 0:
            raise DatasetError(f"partition empty: {name}")


def _collect(h: int, w: int, tags: list[int], labels: list[int], grids: np.ndarray) -> dict[str, Partition]:
    tags_a = np.asarray(tags, dtype=np.int64)
    labels_a = np.asarray(labels, dtype=np.int64)
    if np.any((labels_a != 0) & (labels_a != 1)):
        raise DatasetError("label outside {0,1}")
    if np.any((tags_a < 0) | (tags_a > 3)):
        raise DatasetError("partition code outside 0..3")
    parts = {}
    for code, name in enumerate(PARTITIONS):
        sel = tags_a == code
        parts[name] = Partition(grids[sel].reshape(-1, h, w).astype(np.float32), labels_a[sel], {"name": name})
    _check_bundle(parts)
    return parts


def load_events(path: str | Path) -> DatasetBundle:
    """Read an EVT file (text ``EVT1`` or binary ``EVTB`` variant)."""
    data = Path(path).read_bytes()
    if data[:4] == b"EVTB":
        return _load_binary(data)
    if data[:4] == b"EVT1":
        return _load_text(data.decode("utf-8"))
    raise DatasetError(f"{path}: magic mismatch (expected EVT1 or EVTB)")


def _load_text(text: str) -> DatasetBundle:
    lines = text.splitlines()
    head = lines[0].split()
    if len(head) != 3 or head[0] != "EVT1":
        raise DatasetError("malformed EVT1 header")
    h, w = int(head[1]), int(head[2])
    config: dict = {}
    tags, labels, rows = [], [], []
    for ln in lines[1:]:
        if not ln.strip():
            continue
        if ln.startswith("#"):
            if ln.startswith("# config "):
                config = json.loads(ln[len("# config "):])
            continue
        fields = ln.split()
        if len(fields) != 2 + h * w:
            raise DatasetError(f"truncated event line: {len(fields) - 2} values, expected {h * w}")
        try:
            tags.append(int(fields[0]))
            labels.append(int(fields[1]))
        except ValueError:
            raise DatasetError("non-integer partition or label") from None
        rows.append(np.array(fields[2:], dtype=np.float32))
    grids = np.stack(rows) if rows else np.zeros((0, h * w), np.float32)
    return _bundle_from(h, w, tags, labels, grids, config)


def _load_binary(data: bytes) -> DatasetBundle:
    if len(data) < 20:
        raise DatasetError("truncated EVTB header")
    h, w, n, clen = struct.unpack_from("<4i", data, 4)
    pos = 20
    if len(data) < pos + clen:
        raise DatasetError("truncated EVTB config record")
    config = json.loads(data[pos : pos + clen].decode()) if clen else {}
    pos += clen
    rec = 2 + 4 * h * w
    if len(data) != pos + n * rec:
        raise DatasetError(f"truncated payload: expected {n} events of {rec} bytes")
    raw = np.frombuffer(data, dtype=np.uint8, offset=pos).reshape(n, rec)
    labels = raw[:, 0].astype(np.int64).tolist()
    tags = raw[:, 1].astype(np.int64).tolist()
    grids = np.ascontiguousarray(raw[:, 2:]).view("<f4").reshape(n, h * w)
    return _bundle_from(h, w, tags, labels, grids, config)


def _bundle_from(h, w, tags, labels, grids, config) -> DatasetBundle:
    parts = _collect(h, w, tags, labels, grids)
    geo = config.get("geometry")
    geometry = Geometry(**geo) if geo else Geometry(h, w)
    if (geometry.height, geometry.width) != (h, w):
        raise DatasetError("embedded geometry disagrees with the header")
    return DatasetBundle(parts, geometry, config)


def _records(bundle: DatasetBundle):
    for code, name in enumerate(PARTITIONS):
        p = bundle.partitions[name]
        for grid, label in zip(p.X, p.y):
            yield code, int(label), np.asarray(grid, dtype=np.float32).ravel()


def _config_record(bundle: DatasetBundle) -> dict:
    cfg = dict(bundle.config)
    cfg["geometry"] = asdict(bundle.geometry)
    return cfg


def save_events(bundle: DatasetBundle, path: str | Path, binary: bool = False) -> None:
    """Write ``bundle`` as EVT text (default) or binary."""
    _check_bundle(bundle.partitions)
    h, w = bundle.geometry.height, bundle.geometry.width
    cfg = json.dumps(_config_record(bundle), sort_keys=True)
    if binary:
        n = sum(len(p) for p in bundle.partitions.values())
        cb = cfg.encode()
        with open(path, "wb") as f:
            f.write(b"EVTB" + struct.pack("<4i", h, w, n, len(cb)) + cb)
            for code, label, grid in _records(bundle):
                f.write(struct.pack("<BB", label, code) + grid.astype("<f4").tobytes())
        return
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"EVT1 {h} {w}\n# config {cfg}\n")
        for code, label, grid in _records(bundle):
            f.write(f"{code} {label} " + " ".join(f"{v:.9g}" for v in grid.tolist()) + "\n")


# --------------------------------------------------------------- generator

@dataclass(frozen=True)
class GeneratorConfig:
    """Distribution parameters of the synthetic shower generator.

    Lateral profile: ``amplitude * (1 + r / scale) ** -slope``; station noise
    is multiplicative log-normal. Protons add off-core Gaussian clusters.
    """

    core_fraction: float = 0.6
    amplitude_median: float = 200.0
    amplitude_sigma: float = 0.3
    gamma_scale: float = 10.0
    gamma_slope: float = 3.6
    gamma_noise: float = 0.35
    proton_scale: float = 14.5
    proton_slope: float = 3.3
    proton_noise: float = 0.45
    scale_sigma: float = 0.15
    slope_sigma: float = 0.15
    clusters_min: int = 2
    clusters_max: int = 6
    cluster_r_min: float = 20.0
    cluster_r_max: float = 70.0
    cluster_width: float = 4.0
    cluster_fraction: float = 0.008
    cluster_fraction_sigma: float = 0.8
    split: tuple[float, float, float, float] = (0.70, 0.05, 0.10, 0.15)


def _profile(r: np.ndarray, amplitude: float, scale: float, slope: float) -> np.ndarray:
    return amplitude * (1.0 + r / scale) ** (-slope)


def _sample_event(label: int, geometry: Geometry, cfg: GeneratorConfig, rng: np.random.Generator,
                  x: np.ndarray, y: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, tuple[float, float]]:
    rad = geometry.radius * cfg.core_fraction * np.sqrt(rng.random())
    ang = rng.uniform(0, 2 * np.pi)
    cx, cy = rad * np.cos(ang), rad * np.sin(ang)
    amp = cfg.amplitude_median * np.exp(cfg.amplitude_sigma * rng.standard_normal())
    r = np.hypot(x - cx, y - cy)
    # shower-to-shower spread of the lateral shape
    wobble = np.exp(cfg.scale_sigma * rng.standard_normal())
    tilt = cfg.slope_sigma * rng.standard_normal()
    if label == 0:
        grid = _profile(r, amp, cfg.gamma_scale * wobble, cfg.gamma_slope + tilt)
        noise = cfg.gamma_noise
    else:
        grid = _profile(r, amp, cfg.proton_scale * wobble, cfg.proton_slope + tilt)
        noise = cfg.proton_noise
        n_clusters = int(rng.integers(cfg.clusters_min, cfg.clusters_max + 1)) if cfg.clusters_max > 0 else 0
        for _ in range(n_clusters):
            d = rng.uniform(cfg.cluster_r_min, cfg.cluster_r_max)
            a = rng.uniform(0, 2 * np.pi)
            px, py = cx + d * np.cos(a), cy + d * np.sin(a)
            frac = cfg.cluster_fraction * np.exp(cfg.cluster_fraction_sigma * rng.standard_normal())
            blob = np.exp(-0.5 * (np.hypot(x - px, y - py) / cfg.cluster_width) ** 2)
            grid = grid + amp * frac * blob
    if noise > 0:
        grid = grid * np.exp(noise * rng.standard_normal(grid.shape) - 0.5 * noise**2)
    return np.where(mask, grid, 0.0).astype(np.float32), (float(cx), float(cy))


def _split_counts(n: int, split) -> list[int]:
    counts = [int(np.floor(n * f)) for f in split[:-1]]
    counts.append(n - sum(counts))
    # every partition gets at least one event of the class when possible
    for i in range(len(counts)):
        if counts[i] == 0 and n >= len(counts):
            j = int(np.argmax(counts))
            counts[j] -= 1
            counts[i] += 1
    return counts


def synth_generate(
    n_gamma: int,
    n_proton: int,
    geometry: Geometry = DESK_GEOMETRY,
    rng: np.random.Generator | int | None = None,
    config: GeneratorConfig | None = None,
    generalisation: tuple[int, int] | None = None,
) -> DatasetBundle:
    """Generate a stratified train/validation/test/generalisation bundle.

    ``generalisation=(n_gamma, n_proton)`` draws that partition separately,
    e.g. class-imbalanced; otherwise it takes its share of ``config.split``.
    """
    if n_gamma < 1 or n_proton < 1:
        raise ValueError("need at least one event of each class")
    cfg = config or GeneratorConfig()
    seed_repr = rng if isinstance(rng, (int, type(None))) else None
    rng = np.random.default_rng(rng)
    x, y = station_positions(geometry)
    mask = array_mask(geometry)

    def draw(label: int, n: int):
        grids, cores = [], []
        for _ in range(n):
            g, c = _sample_event(label, geometry, cfg, rng, x, y, mask)
            grids.append(g)
            cores.append(c)
        return np.asarray(grids).reshape(n, geometry.height, geometry.width), np.asarray(cores).reshape(n, 2)

    split = cfg.split
    if generalisation is not None:
        split = tuple(split[:3]) + (0.0,)
        total = sum(split)
        split = tuple(s / total for s in split[:3]) + (0.0,)
    per_class = []
    for label, n in ((0, n_gamma), (1, n_proton)):
        X, cores = draw(label, n)
        counts = _split_counts(n, split[:3] if generalisation is not None else split)
        if generalisation is not None:
            counts.append(0)
        per_class.append((label, X, cores, counts))
    if generalisation is not None:
        gens = [draw(0, generalisation[0]), draw(1, generalisation[1])]

    parts = {}
    for code, name in enumerate(PARTITIONS):
        Xs, ys, cs = [], [], []
        for label, X, cores, counts in per_class:
            lo = sum(counts[:code])
            hi = lo + counts[code]
            Xs.append(X[lo:hi])
            cs.append(cores[lo:hi])
            ys.append(np.full(hi - lo, label, dtype=np.int64))
        if name == "generalisation" and generalisation is not None:
            Xs = [gens[0][0], gens[1][0]]
            cs = [gens[0][1], gens[1][1]]
            ys = [np.zeros(generalisation[0], np.int64), np.ones(generalisation[1], np.int64)]
        parts[name] = Partition(np.concatenate(Xs), np.concatenate(ys), {"name": name, "core": np.concatenate(cs)})
    record = {"generator": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()},
              "n_gamma": n_gamma, "n_proton": n_proton, "seed": seed_repr}
    if generalisation is not None:
        record["generalisation"] = list(generalisation)
    return DatasetBundle(parts, geometry, record)
