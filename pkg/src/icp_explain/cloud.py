"""Point clouds: container, file IO, nearest-neighbor index, perturbations.

Clouds carry a frame label ("local" or "world") so the overlap logic can
insist on world-frame inputs. File formats are CSV (x,y,z columns, header
auto-detected) and ascii PLY with float x/y/z vertex properties.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .errors import InsufficientOverlap, ParseError
from .se3 import RigidTransform

LOCAL = "local"
WORLD = "world"

DEFAULT_OVERLAP_DISTANCE = 0.2  # m

# Below this size a full distance matrix beats building a tree.
_BRUTE_FORCE_LIMIT = 256


@dataclasses.dataclass(frozen=True)
class PointCloud:
    """Immutable (n, 3) array of points plus a frame label."""

    points: np.ndarray
    frame: str = LOCAL

    def __post_init__(self):
        points = np.ascontiguousarray(self.points, dtype=float)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {points.shape}")
        if not np.all(np.isfinite(points)):
            raise ValueError("points must be finite")
        if self.frame not in (LOCAL, WORLD):
            raise ValueError(f"frame must be {LOCAL!r} or {WORLD!r}, got {self.frame!r}")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return self.points.shape[0]


def transform_cloud(cloud: PointCloud, transform: RigidTransform, frame: str | None = None) -> PointCloud:
    """Apply a rigid transform to every point; frame defaults to the input's."""
    return PointCloud(transform.apply(cloud.points), frame if frame is not None else cloud.frame)


def _parse_float(token: str, path, line_number: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(path, line_number, f"expected a number, got {token!r}") from None
    if not math.isfinite(value):
        raise ParseError(path, line_number, f"non-finite coordinate {token!r}")
    return value


def _load_csv(path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                continue
            fields = [f.strip() for f in line.split(",")]
            if line_number == 1:
                # Header row detected by non-numeric fields.
                try:
                    [float(f) for f in fields]
                except ValueError:
                    continue
            if len(fields) != 3:
                raise ParseError(path, line_number, f"expected 3 columns, got {len(fields)}")
            rows.append([_parse_float(f, path, line_number) for f in fields])
    return np.array(rows, dtype=float).reshape(-1, 3)


def _load_ply(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError(path, 1, "missing 'ply' magic line")
    vertex_count = None
    properties: list[str] = []
    in_vertex_element = False
    body_start = None
    for i, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "format":
            if tokens[1:] != ["ascii", "1.0"]:
                raise ParseError(path, i, f"unsupported format {' '.join(tokens[1:])!r}")
        elif tokens[0] == "element":
            in_vertex_element = tokens[1] == "vertex"
            if in_vertex_element:
                try:
                    vertex_count = int(tokens[2])
                except (IndexError, ValueError):
                    raise ParseError(path, i, "malformed vertex element") from None
        elif tokens[0] == "property" and in_vertex_element:
            if len(tokens) != 3:
                raise ParseError(path, i, "only scalar vertex properties are supported")
            properties.append(tokens[2])
        elif tokens[0] == "end_header":
            body_start = i + 1
            break
    if body_start is None:
        raise ParseError(path, len(lines), "missing end_header")
    if vertex_count is None:
        raise ParseError(path, body_start - 1, "missing vertex element")
    try:
        columns = [properties.index(name) for name in ("x", "y", "z")]
    except ValueError:
        raise ParseError(path, body_start - 1, "vertex element lacks x/y/z properties") from None

    rows = []
    line_number = body_start
    for line_number in range(body_start, body_start + vertex_count):
        if line_number - 1 >= len(lines):
            raise ParseError(path, line_number, "unexpected end of file in vertex data")
        tokens = lines[line_number - 1].split()
        if len(tokens) != len(properties):
            raise ParseError(path, line_number, f"expected {len(properties)} values, got {len(tokens)}")
        rows.append([_parse_float(tokens[c], path, line_number) for c in columns])
    return np.array(rows, dtype=float).reshape(-1, 3)


def _infer_format(path, format: str | None) -> str:
    if format is not None:
        return format
    suffix = str(path).rsplit(".", 1)[-1].lower()
    if suffix in ("csv", "ply"):
        return suffix
    raise ValueError(f"cannot infer cloud format from {path!r}; pass format='csv' or 'ply'")


def load_cloud(path, format: str | None = None, frame: str = LOCAL) -> PointCloud:
    """Read a cloud from CSV or PLY; the format is inferred from the extension."""
    fmt = _infer_format(path, format)
    points = _load_csv(path) if fmt == "csv" else _load_ply(path)
    return PointCloud(points, frame)


def save_cloud(cloud: PointCloud, path, format: str | None = None) -> None:
    fmt = _infer_format(path, format)
    with open(path, "w", encoding="utf-8") as handle:
        if fmt == "csv":
            handle.write("x,y,z\n")
            for p in cloud.points:
                handle.write(f"{float(p[0])!r},{float(p[1])!r},{float(p[2])!r}\n")
        else:
            handle.write("ply\nformat ascii 1.0\n")
            handle.write(f"element vertex {len(cloud)}\n")
            handle.write("property float x\nproperty float y\nproperty float z\n")
            handle.write("end_header\n")
            for p in cloud.points:
                handle.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")


class SpatialIndex:
    """Exact nearest-neighbor queries against a fixed point set.

    Small sets use a brute-force distance matrix, larger ones a kd-tree.
    Both paths return the true nearest neighbor; exact distance ties are
    broken toward the lowest point index (the kd-tree path checks the two
    nearest, which covers duplicated points).
    """

    def __init__(self, points) -> None:
        if isinstance(points, PointCloud):
            points = points.points
        points = np.ascontiguousarray(points, dtype=float)
        if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] == 0:
            raise ValueError("index requires a nonempty (n, 3) point array")
        self.points = points
        self._tree = cKDTree(points) if len(points) > _BRUTE_FORCE_LIMIT else None

    def __len__(self) -> int:
        return self.points.shape[0]

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Nearest neighbor of each query point: (distances, indices)."""
        queries = np.ascontiguousarray(queries, dtype=float).reshape(-1, 3)
        if self._tree is None:
            distances = cdist(queries, self.points)
            indices = np.argmin(distances, axis=1)  # argmin takes the lowest index on ties
            return distances[np.arange(len(queries)), indices], indices
        if len(self.points) == 1:
            distances, indices = self._tree.query(queries, k=1)
            return distances, indices
        distances, indices = self._tree.query(queries, k=2)
        tie = distances[:, 0] == distances[:, 1]
        best = indices[:, 0].copy()
        best[tie] = np.minimum(indices[tie, 0], indices[tie, 1])
        return distances[:, 0], best


def add_sensor_noise(cloud: PointCloud, std: float, rng: np.random.Generator) -> PointCloud:
    """Isotropic Gaussian jitter per point; std = 0 returns the input unchanged."""
    if std < 0:
        raise ValueError("noise std must be nonnegative")
    if std == 0:
        return cloud
    return PointCloud(cloud.points + rng.normal(0.0, std, size=cloud.points.shape), cloud.frame)


@dataclasses.dataclass(frozen=True)
class OverlapReport:
    """Overlap of a reference cloud against a source cloud.

    ratio is N / |P1| where N counts P2 points whose nearest P1 neighbor
    lies within the test distance; valid_indices are those P2 row indices.
    """

    ratio: float
    valid_indices: np.ndarray

    @property
    def valid_count(self) -> int:
        return int(self.valid_indices.shape[0])


def _require_world(cloud: PointCloud, name: str) -> None:
    if cloud.frame != WORLD:
        raise ValueError(f"{name} must be in the world frame, got {cloud.frame!r}")
    if len(cloud) == 0:
        raise ValueError(f"{name} is empty")


def overlap_ratio(p1: PointCloud, p2: PointCloud, distance: float = DEFAULT_OVERLAP_DISTANCE) -> OverlapReport:
    """Fraction of p1 covered by p2, measured over p2's nearest neighbors in p1.

    The ratio is not clamped: it can exceed 1 when p2 oversamples p1's
    extent. Both clouds must be nonempty and in the world frame.
    """
    _require_world(p1, "p1")
    _require_world(p2, "p2")
    if distance <= 0:
        raise ValueError("overlap distance must be positive")
    distances, _ = SpatialIndex(p1).query(p2.points)
    valid = np.flatnonzero(distances <= distance)
    return OverlapReport(ratio=valid.size / len(p1), valid_indices=valid)


def select_overlap_reduction(
    p1: PointCloud,
    p2: PointCloud,
    reduction: float,
    distance: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Choose p2 row indices whose removal lowers the overlap ratio by `reduction`.

    Removes ceil(N - |P1| * (O - reduction)) points drawn uniformly without
    replacement from the valid set. Raises InsufficientOverlap when the
    current ratio O does not exceed the requested reduction.
    """
    if reduction < 0:
        raise ValueError("overlap reduction must be nonnegative")
    report = overlap_ratio(p1, p2, distance)
    if reduction == 0:
        return np.empty(0, dtype=int)
    if report.ratio <= reduction:
        raise InsufficientOverlap(
            f"overlap ratio {report.ratio:.4f} does not exceed requested reduction {reduction:.4f}"
        )
    # Mathematically this is |P1| * reduction; the 1e-9 guard keeps float
    # round-up from removing one point too many.
    target = report.valid_count - len(p1) * (report.ratio - reduction)
    remove_count = int(math.ceil(target - 1e-9))
    remove_count = min(max(remove_count, 0), report.valid_count)
    return np.sort(rng.choice(report.valid_indices, size=remove_count, replace=False))


def reduce_overlap(
    p1: PointCloud,
    p2: PointCloud,
    reduction: float,
    distance: float,
    rng: np.random.Generator,
) -> PointCloud:
    """Return p2 with randomly chosen overlap points removed (see select_overlap_reduction)."""
    removed = select_overlap_reduction(p1, p2, reduction, distance, rng)
    if removed.size == 0:
        return p2
    return PointCloud(np.delete(p2.points, removed, axis=0), p2.frame)
