"""Synthetic data worlds: labeled inlier sets, structurally-complex auxiliary
point sets, and disjoint outlier evaluation sets.

All generators are pure functions of ``(params, Rng)``; a dataset persisted
to CSV round-trips exactly (values are written with 17 significant digits).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .rng import Rng

__all__ = [
    "AUX_BURN_IN",
    "DataBundle",
    "LabeledDataset",
    "geometric_transform",
    "ifs_chaos_points",
    "load_points_csv",
    "make_aux_dataset",
    "make_bundle",
    "make_id_dataset",
    "make_ood_eval",
    "random_ifs",
    "save_points_csv",
]

AUX_BURN_IN = 20
TRANSFORM_KINDS = ("rotate2d", "flip", "permute")


@dataclass
class LabeledDataset:
    """Points ``x`` of shape (n, d) with integer class labels ``y`` in [0, k)."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0


@dataclass
class DataBundle:
    """Everything one run consumes: train/test inliers, auxiliary points,
    and named outlier evaluation sets."""

    id_train: LabeledDataset
    id_test: LabeledDataset
    aux: np.ndarray
    ood_eval: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def _balanced_labels(n: int, k: int) -> np.ndarray:
    """Class labels with per-class counts differing by at most one."""
    counts = [n // k + (1 if c < n % k else 0) for c in range(k)]
    return np.repeat(np.arange(k), counts)


def _circle_centers(k: int, d: int, radius: float) -> np.ndarray:
    """k centers equally spaced on a circle in the first two coordinates."""
    ang = 2.0 * np.pi * np.arange(k) / k
    centers = np.zeros((k, d))
    centers[:, 0] = radius * np.cos(ang)
    centers[:, 1] = radius * np.sin(ang)
    return centers


def make_id_dataset(
    name: str, n: int, k: int, d: int, rng: Rng, params: dict | None = None
) -> LabeledDataset:
    """Generate a labeled inlier dataset.

    Generators: ``blobs`` (k Gaussian clusters on a circle of configurable
    radius/spread, or explicit ``centers``), ``moons2d`` (two interleaved
    half circles, k=2, d=2), ``rings`` (k concentric annuli, d=2). Classes
    are balanced within +-1.
    """
    params = dict(params or {})
    if n < k or k < 2 or d < 2:
        raise ValueError(f"make_id_dataset: need n >= k >= 2 and d >= 2, got n={n} k={k} d={d}")
    y = _balanced_labels(n, k)

    if name == "blobs":
        spread = float(params.get("spread", 0.5))
        if "centers" in params:
            centers = np.asarray(params["centers"], dtype=float)
            if centers.shape != (k, d):
                raise ConfigError(f"blobs: centers must have shape ({k}, {d})")
        else:
            centers = _circle_centers(k, d, float(params.get("center_radius", 3.0)))
        x = centers[y] + spread * rng.standard_normal((n, d))
    elif name == "moons2d":
        if k != 2 or d != 2:
            raise ConfigError(f"moons2d requires k=2 and d=2, got k={k} d={d}")
        noise = float(params.get("noise", 0.1))
        t = rng.uniform(0.0, np.pi, n)
        x = np.where(
            (y == 0)[:, None],
            np.column_stack([np.cos(t), np.sin(t)]),
            np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)]),
        )
        x = x + noise * rng.standard_normal((n, 2))
    elif name == "rings":
        if d != 2:
            raise ConfigError(f"rings requires d=2, got d={d}")
        base = float(params.get("base_radius", 1.0))
        gap = float(params.get("gap", 1.0))
        width = float(params.get("width", 0.1))
        r = base + gap * y + width * rng.standard_normal(n)
        theta = rng.uniform(0.0, 2.0 * np.pi, n)
        x = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    else:
        raise ConfigError(f"unknown inlier generator: {name!r}")
    return LabeledDataset(x=x, y=y)


def make_ood_eval(name: str, n: int, rng: Rng, params: dict | None = None) -> np.ndarray:
    """Generate an unlabeled outlier evaluation set.

    Generators: ``ring`` (spherical shell with radius in [inner, outer]),
    ``uniform`` (axis-aligned box), ``shifted-blobs`` (the given cluster
    centers displaced radially outward by ``offset``).
    """
    params = dict(params or {})
    if name == "ring":
        d = int(params.get("d", 2))
        inner = float(params.get("inner", 5.0))
        outer = float(params.get("outer", 7.0))
        direction = rng.standard_normal((n, d))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        r = rng.uniform(inner, outer, n)
        return direction * r[:, None]
    if name == "uniform":
        d = int(params.get("d", 2))
        low = float(params.get("low", -6.0))
        high = float(params.get("high", 6.0))
        return rng.uniform(low, high, (n, d))
    if name == "shifted-blobs":
        centers = np.asarray(params["centers"], dtype=float)
        offset = float(params.get("offset", 2.5))
        spread = float(params.get("spread", 0.5))
        norms = np.linalg.norm(centers, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        shifted = centers + offset * centers / norms
        k, d = shifted.shape
        y = _balanced_labels(n, k)
        return shifted[y] + spread * rng.standard_normal((n, d))
    raise ConfigError(f"unknown outlier generator: {name!r}")


def random_ifs(d: int, n_maps: int, rng: Rng) -> list[tuple[np.ndarray, np.ndarray]]:
    """Random contractive iterated-function system: ``n_maps`` affine maps
    ``x -> c * Q x + b`` with contraction factor c in [0.3, 0.8] and Q a
    random rotation."""
    if n_maps < 2:
        raise ValueError(f"random_ifs: need at least 2 maps, got {n_maps}")
    maps = []
    for _ in range(n_maps):
        q, _r = np.linalg.qr(rng.standard_normal((d, d)))
        c = rng.uniform(0.3, 0.8)
        b = rng.uniform(-1.0, 1.0, d)
        maps.append((c * q, b))
    return maps


def ifs_chaos_points(
    maps: list[tuple[np.ndarray, np.ndarray]], n: int, rng: Rng, burn_in: int = AUX_BURN_IN
) -> np.ndarray:
    """Run the chaos game: each output point starts uniform in [-1, 1]^d and
    applies ``burn_in`` randomly chosen maps; only the final iterate is kept."""
    d = maps[0][0].shape[0]
    mats = np.stack([m for m, _ in maps])
    offs = np.stack([b for _, b in maps])
    x = rng.uniform(-1.0, 1.0, (n, d))
    for _ in range(burn_in):
        idx = rng.integers(0, len(maps), n)
        x = np.einsum("nij,nj->ni", mats[idx], x) + offs[idx]
    return x


def _rescale_to_box(pts: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Affinely map the point cloud's bounding box onto [lo, hi] per coordinate."""
    pmin = pts.min(axis=0)
    pmax = pts.max(axis=0)
    span = pmax - pmin
    out = np.empty_like(pts)
    for j in range(pts.shape[1]):
        if span[j] == 0.0:
            out[:, j] = 0.5 * (lo[j] + hi[j])
        else:
            out[:, j] = lo[j] + (pts[:, j] - pmin[j]) * (hi[j] - lo[j]) / span[j]
    return out


def make_aux_dataset(
    n: int, d: int, rng: Rng, ifs_maps: int = 3, box: tuple | None = None
) -> np.ndarray:
    """Auxiliary structurally-complex point set from a random IFS attractor,
    rescaled into ``box = (lo, hi)`` (normally the inlier bounding box)."""
    if n < 1:
        raise ValueError(f"make_aux_dataset: n must be >= 1, got {n}")
    maps = random_ifs(d, ifs_maps, rng)
    pts = ifs_chaos_points(maps, n, rng)
    if box is not None:
        lo = np.asarray(box[0], dtype=float)
        hi = np.asarray(box[1], dtype=float)
        pts = _rescale_to_box(pts, lo, hi)
    return pts


def geometric_transform(
    x: np.ndarray, kind: str, rng: Rng, center=None, *, coords=None, angle=None
) -> np.ndarray:
    """Apply a bijective vector-space transform.

    ``rotate2d`` rotates a random coordinate pair about ``center`` (an
    isometry of the distance to ``center``); ``flip`` reflects one random
    coordinate about ``center``; ``permute`` swaps two random coordinates.
    ``coords``/``angle`` pin the otherwise random choices (for tests).
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    if d < 2:
        raise ValueError(f"geometric_transform: need dimension >= 2, got {d}")
    if center is None:
        center = np.zeros(d)
    center = np.asarray(center, dtype=float)
    out = x.copy()
    if kind == "rotate2d":
        i, j = coords if coords is not None else sorted(rng.choice(d, size=2, replace=False).tolist())
        theta = angle if angle is not None else rng.uniform(0.0, 2.0 * np.pi)
        ci, cj = np.cos(theta), np.sin(theta)
        ui, uj = x[i] - center[i], x[j] - center[j]
        out[i] = center[i] + ci * ui - cj * uj
        out[j] = center[j] + cj * ui + ci * uj
    elif kind == "flip":
        i = coords if coords is not None else int(rng.integers(0, d))
        out[i] = 2.0 * center[i] - x[i]
    elif kind == "permute":
        i, j = coords if coords is not None else rng.choice(d, size=2, replace=False).tolist()
        out[i], out[j] = x[j], x[i]
    else:
        raise ValueError(f"unknown transform kind: {kind!r}")
    return out


# --------------------------------------------------------------------------
# Bundle assembly and CSV persistence
# --------------------------------------------------------------------------

def make_bundle(cfg: dict, seed: int) -> DataBundle:
    """Assemble the full data world from a [data] config mapping.

    Recognised keys (with defaults): generator=blobs, n_train=1200,
    n_test=600, k=3, d=2, spread, center_radius, aux_size (0 -> n_train),
    ifs_maps, ood_sets (comma list), n_ood, ring_inner, ring_outer,
    box_low, box_high, shift_offset.
    """
    rng = Rng(seed).child("data")
    name = cfg.get("generator", "blobs")
    n_train = int(cfg.get("n_train", 1200))
    n_test = int(cfg.get("n_test", 600))
    k = int(cfg.get("k", 3))
    d = int(cfg.get("d", 2))
    id_params = {}
    for key in ("spread", "center_radius", "noise", "base_radius", "gap", "width"):
        if key in cfg:
            id_params[key] = float(cfg[key])

    id_train = make_id_dataset(name, n_train, k, d, rng.child("id-train"), id_params)
    id_test = make_id_dataset(name, n_test, k, d, rng.child("id-test"), id_params)

    aux_size = int(cfg.get("aux_size", 0)) or n_train
    lo = id_train.x.min(axis=0)
    hi = id_train.x.max(axis=0)
    aux = make_aux_dataset(
        aux_size, d, rng.child("aux"), ifs_maps=int(cfg.get("ifs_maps", 3)), box=(lo, hi)
    )

    ood_names = [s.strip() for s in str(cfg.get("ood_sets", "ring,uniform,shifted-blobs")).split(",") if s.strip()]
    n_ood = int(cfg.get("n_ood", 600))
    centers = (
        _circle_centers(k, d, float(cfg.get("center_radius", 3.0)))
        if name == "blobs"
        else id_train.x.mean(axis=0, keepdims=True).repeat(k, axis=0)
    )
    ood_eval = {}
    for ood_name in ood_names:
        params: dict = {"d": d}
        if ood_name == "ring":
            params["inner"] = float(cfg.get("ring_inner", 5.0))
            params["outer"] = float(cfg.get("ring_outer", 7.0))
        elif ood_name == "uniform":
            params["low"] = float(cfg.get("box_low", -6.0))
            params["high"] = float(cfg.get("box_high", 6.0))
        elif ood_name == "shifted-blobs":
            params["centers"] = centers
            params["offset"] = float(cfg.get("shift_offset", 2.5))
            params["spread"] = float(cfg.get("spread", 0.5))
        ood_eval[ood_name] = make_ood_eval(ood_name, n_ood, rng.child("ood", ood_name), params)

    meta = {"generator": name, "seed": seed, "d": d, "k": k, "n_train": n_train, "n_test": n_test}
    return DataBundle(id_train=id_train, id_test=id_test, aux=aux, ood_eval=ood_eval, meta=meta)


def save_points_csv(path, x: np.ndarray, y: np.ndarray | None, role: str, k: int = 0) -> None:
    """Write points to the documented CSV format.

    Header ``dim=<d>,classes=<k>,role=<role>``; one row per point,
    ``y,x0,x1,...`` with y = -1 for unlabeled points. Values carry 17
    significant digits so a round-trip is exact.
    """
    x = np.asarray(x, dtype=float)
    labels = np.full(len(x), -1, dtype=int) if y is None else np.asarray(y, dtype=int)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"dim={x.shape[1]},classes={k},role={role}\n")
        for lab, row in zip(labels, x):
            fh.write("%d,%s\n" % (lab, ",".join("%.17g" % v for v in row)))


def load_points_csv(path) -> tuple[np.ndarray, np.ndarray | None, dict]:
    """Read the CSV point format back; returns (x, y-or-None, header meta)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        meta = {}
        for part in header.split(","):
            key, _, val = part.partition("=")
            meta[key] = val
        if "dim" not in meta or "role" not in meta:
            raise ConfigError(f"{path}: malformed point-file header: {header!r}")
        d = int(meta["dim"])
        labels, rows = [], []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != d + 1:
                raise ConfigError(f"{path}: row has {len(fields) - 1} coords, expected {d}")
            labels.append(int(fields[0]))
            rows.append([float(v) for v in fields[1:]])
    x = np.array(rows, dtype=float).reshape(len(rows), d)
    y = np.array(labels, dtype=int)
    if np.all(y == -1):
        return x, None, meta
    return x, y, meta
