"""Procedural garment categories, rendered samples, episodes and benchmark splits.

Each category is a closed polygon whose vertices are its landmarks. Samples
are outline drawings of a randomly jittered copy of the template.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .rng import Rng, derive_seed

N_SLOTS = 39
REGIONS = ("upper", "lower", "full")


@dataclass(frozen=True)
class CategorySpec:
    id: int
    name: str
    body_region: str
    template: np.ndarray  # (N_c, 2) unit-square (x, y), contour order
    edges: tuple[tuple[int, int], ...]
    slots: tuple[int, ...] = ()  # global slot per landmark, used by the max-way baseline

    @property
    def n_landmarks(self) -> int:
        return len(self.template)


@dataclass(frozen=True)
class DataConfig:
    H: int = 32
    W: int = 32
    h: int = 8
    w: int = 8
    max_rotation_deg: float = 15.0
    scale_range: tuple[float, float] = (0.8, 1.2)
    shift_frac: float = 0.1
    thickness_range: tuple[float, float] = (1.0, 2.0)
    blur: bool = True
    noise_sigma: float = 0.05
    max_retries: int = 50

    def __post_init__(self):
        if self.H % self.h or self.W % self.w:
            raise ValueError(f"image {self.H}x{self.W} not a multiple of grid {self.h}x{self.w}")

    @classmethod
    def zero_jitter(cls, **kw) -> "DataConfig":
        base = dict(max_rotation_deg=0.0, scale_range=(1.0, 1.0), shift_frac=0.0)
        base.update(kw)
        return cls(**base)


@dataclass
class Sample:
    image: np.ndarray  # (H, W) in [0, 1]
    coords: np.ndarray  # (N_c, 2) pixel (x, y)
    labelmap: np.ndarray  # (N_c, h, w) one-hot
    area: float
    seed: int = 0


@dataclass
class Episode:
    category_id: int
    support: list[Sample]
    query: list[Sample]
    seed: int = 0

    @property
    def shot(self) -> int:
        return len(self.support)


@dataclass(frozen=True)
class BenchmarkSplit:
    scheme: int
    seen: tuple[int, ...]
    unseen: tuple[int, ...]


# ---------------------------------------------------------------------------
# registry

# Coarse outlines in the unit square (x right, y down), clockwise from the
# left neckline / waistband. Edges are subdivided until N_c vertices exist.
_OUTLINES: list[tuple[str, str, int, list[tuple[float, float]]]] = [
    ("short_sleeve_top", "upper", 25, [
        (0.40, 0.20), (0.50, 0.27), (0.60, 0.20), (0.72, 0.24), (0.85, 0.40), (0.77, 0.47),
        (0.68, 0.40), (0.68, 0.80), (0.32, 0.80), (0.32, 0.40), (0.23, 0.47), (0.15, 0.40),
        (0.28, 0.24)]),
    ("long_sleeve_top", "upper", 33, [
        (0.41, 0.18), (0.50, 0.25), (0.59, 0.18), (0.70, 0.22), (0.86, 0.70), (0.78, 0.73),
        (0.66, 0.38), (0.66, 0.82), (0.34, 0.82), (0.34, 0.38), (0.22, 0.73), (0.14, 0.70),
        (0.30, 0.22)]),
    ("vest", "upper", 15, [
        (0.40, 0.18), (0.50, 0.30), (0.60, 0.18), (0.66, 0.18), (0.70, 0.40), (0.68, 0.80),
        (0.32, 0.80), (0.30, 0.40), (0.34, 0.18)]),
    ("sling", "upper", 15, [
        (0.34, 0.36), (0.38, 0.18), (0.50, 0.38), (0.62, 0.18), (0.66, 0.36), (0.68, 0.78),
        (0.32, 0.78)]),
    ("short_sleeve_outwear", "upper", 31, [
        (0.41, 0.18), (0.50, 0.32), (0.59, 0.18), (0.72, 0.22), (0.85, 0.40), (0.77, 0.47),
        (0.69, 0.40), (0.70, 0.84), (0.53, 0.84), (0.50, 0.78), (0.47, 0.84), (0.30, 0.84),
        (0.31, 0.40), (0.23, 0.47), (0.15, 0.40), (0.28, 0.22)]),
    ("long_sleeve_outwear", "upper", 39, [
        (0.41, 0.16), (0.50, 0.30), (0.59, 0.16), (0.71, 0.20), (0.87, 0.72), (0.79, 0.75),
        (0.68, 0.38), (0.70, 0.86), (0.53, 0.86), (0.50, 0.80), (0.47, 0.86), (0.30, 0.86),
        (0.32, 0.38), (0.21, 0.75), (0.13, 0.72), (0.29, 0.20)]),
    ("shorts", "lower", 10, [
        (0.30, 0.22), (0.70, 0.22), (0.77, 0.64), (0.55, 0.66), (0.50, 0.46), (0.45, 0.66),
        (0.23, 0.64)]),
    ("trousers", "lower", 14, [
        (0.33, 0.14), (0.67, 0.14), (0.74, 0.86), (0.55, 0.86), (0.50, 0.40), (0.45, 0.86),
        (0.26, 0.86)]),
    ("skirt", "lower", 8, [
        (0.36, 0.22), (0.64, 0.22), (0.79, 0.78), (0.21, 0.78)]),
    ("short_sleeve_dress", "full", 29, [
        (0.42, 0.12), (0.50, 0.19), (0.58, 0.12), (0.68, 0.15), (0.80, 0.28), (0.74, 0.34),
        (0.64, 0.28), (0.62, 0.50), (0.76, 0.88), (0.24, 0.88), (0.38, 0.50), (0.36, 0.28),
        (0.26, 0.34), (0.20, 0.28), (0.32, 0.15)]),
    ("long_sleeve_dress", "full", 37, [
        (0.42, 0.12), (0.50, 0.19), (0.58, 0.12), (0.68, 0.15), (0.84, 0.56), (0.77, 0.59),
        (0.64, 0.28), (0.62, 0.50), (0.76, 0.88), (0.24, 0.88), (0.38, 0.50), (0.36, 0.28),
        (0.23, 0.59), (0.16, 0.56), (0.32, 0.15)]),
    ("vest_dress", "full", 19, [
        (0.42, 0.12), (0.50, 0.24), (0.58, 0.12), (0.64, 0.12), (0.67, 0.32), (0.62, 0.50),
        (0.75, 0.88), (0.25, 0.88), (0.38, 0.50), (0.33, 0.32), (0.36, 0.12)]),
    ("sling_dress", "full", 21, [
        (0.35, 0.30), (0.39, 0.12), (0.50, 0.32), (0.61, 0.12), (0.65, 0.30), (0.62, 0.50),
        (0.75, 0.88), (0.25, 0.88), (0.38, 0.50)]),
]


def _subdivide(points: list[tuple[float, float]], n: int) -> np.ndarray:
    pts = [np.asarray(p, dtype=np.float64) for p in points]
    if len(pts) > n:
        raise ValueError(f"outline has {len(pts)} vertices, more than {n} landmarks")
    while len(pts) < n:
        lengths = [np.linalg.norm(pts[(i + 1) % len(pts)] - pts[i]) for i in range(len(pts))]
        i = int(np.argmax(lengths))
        mid = 0.5 * (pts[i] + pts[(i + 1) % len(pts)])
        pts.insert(i + 1, mid)
    return np.round(np.stack(pts), 6)


def _ring(n: int) -> tuple[tuple[int, int], ...]:
    return tuple((i, (i + 1) % n) for i in range(n))


def _align_slots(templates: list[np.ndarray]) -> list[tuple[int, ...]]:
    ref = max(templates, key=len)
    if len(ref) != N_SLOTS:
        raise ValueError(f"largest category has {len(ref)} landmarks, need {N_SLOTS}")
    out = []
    for t in templates:
        cost = np.linalg.norm(t[:, None, :] - ref[None, :, :], axis=-1)
        rows, cols = linear_sum_assignment(cost)
        slots = np.empty(len(t), dtype=int)
        slots[rows] = cols
        out.append(tuple(int(s) for s in slots))
    return out


def default_registry() -> list[CategorySpec]:
    """The 13 fixed garment categories, N_c from 8 to 39.

    Global slots align every category's landmarks to the 39-landmark
    category by optimal one-to-one matching of template positions.
    """
    templates = [_subdivide(pts, n) for _, _, n, pts in _OUTLINES]
    slots = _align_slots(templates)
    return [
        CategorySpec(id=i, name=name, body_region=region, template=t, edges=_ring(len(t)),
                     slots=s)
        for i, ((name, region, _, _), t, s) in enumerate(zip(_OUTLINES, templates, slots))
    ]


def category_by_id(registry: list[CategorySpec], cid: int) -> CategorySpec:
    for c in registry:
        if c.id == cid:
            return c
    raise KeyError(f"unknown category id {cid}")


# ---------------------------------------------------------------------------
# rendering


def polygon_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _segment_distance(px: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point (P,2) to each segment a[k]-b[k]; returns (P, K)."""
    x, y = px[:, :1], px[:, 1:]
    dx, dy = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
    rx, ry = x - a[:, 0], y - a[:, 1]
    t = np.clip((rx * dx + ry * dy) / np.maximum(dx * dx + dy * dy, 1e-12), 0.0, 1.0)
    ex, ey = rx - t * dx, ry - t * dy
    return np.sqrt(ex * ex + ey * ey)


def _blur(img: np.ndarray) -> np.ndarray:
    k = np.array([0.25, 0.5, 0.25])
    p = np.pad(img, 1)
    img = k[0] * p[:-2, 1:-1] + k[1] * p[1:-1, 1:-1] + k[2] * p[2:, 1:-1]
    p = np.pad(img, 1)
    return k[0] * p[1:-1, :-2] + k[1] * p[1:-1, 1:-1] + k[2] * p[1:-1, 2:]


def rasterize(coords: np.ndarray, edges, H: int, W: int, thickness: float) -> np.ndarray:
    ys, xs = np.mgrid[0:H, 0:W]
    centers = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=-1).astype(np.float64)
    e = np.asarray(edges)
    dist = _segment_distance(centers, coords[e[:, 0]], coords[e[:, 1]]).min(axis=1)
    return (dist <= thickness / 2.0).astype(np.float64).reshape(H, W)


def jitter_transform(rng: Rng, cfg: DataConfig) -> tuple[float, float, np.ndarray]:
    angle, s, tx, ty = rng.uniform(4)
    angle = math.radians(cfg.max_rotation_deg) * (2 * angle - 1)
    s = cfg.scale_range[0] + (cfg.scale_range[1] - cfg.scale_range[0]) * s
    shift = cfg.shift_frac * (2 * np.array([tx, ty]) - 1) * np.array([cfg.W, cfg.H])
    return angle, s, shift


def apply_transform(template: np.ndarray, angle: float, s: float, shift: np.ndarray,
                    H: int, W: int) -> np.ndarray:
    pix = template * np.array([W, H], dtype=np.float64)
    center = np.array([W / 2.0, H / 2.0])
    c, sn = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -sn], [sn, c]])
    return (pix - center) @ (s * rot).T + center + shift


def coords_to_labelmap(coords: np.ndarray, h: int, w: int, H: int, W: int) -> np.ndarray:
    """One-hot cell per landmark; collisions move to the nearest free cell (L1).

    Ties in the search break by row, then column, ascending.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    if h * w < n:
        raise ValueError(f"{n} landmarks cannot be placed on a {h}x{w} grid")
    if np.any(coords < 0) or np.any(coords[:, 0] >= W) or np.any(coords[:, 1] >= H):
        raise ValueError("landmark coordinates out of frame")
    rows, cols = np.mgrid[0:h, 0:w]
    rows, cols = rows.ravel(), cols.ravel()
    taken = np.zeros(h * w, dtype=bool)
    out = np.zeros((n, h, w))
    for k, (x, y) in enumerate(coords):
        r, c = int(y * h // H), int(x * w // W)
        if taken[r * w + c]:
            free = np.flatnonzero(~taken)
            d = np.abs(rows[free] - r) + np.abs(cols[free] - c)
            best = free[np.lexsort((cols[free], rows[free], d))[0]]
            r, c = divmod(int(best), w)
        taken[r * w + c] = True
        out[k, r, c] = 1.0
    return out


def render_sample(cat: CategorySpec, cfg: DataConfig, seed: int) -> Sample:
    rng = Rng(seed)
    for _ in range(cfg.max_retries):
        angle, s, shift = jitter_transform(rng, cfg)
        coords = apply_transform(cat.template, angle, s, shift, cfg.H, cfg.W)
        if (coords.min() >= 0 and np.all(coords[:, 0] < cfg.W) and np.all(coords[:, 1] < cfg.H)):
            break
    else:
        raise ValueError(f"category {cat.name}: no in-frame jitter after "
                         f"{cfg.max_retries} tries (seed {seed})")
    lo, hi = cfg.thickness_range
    thickness = lo + (hi - lo) * rng.uniform(1)[0]
    img = rasterize(coords, cat.edges, cfg.H, cfg.W, thickness)
    if cfg.blur:
        img = _blur(img)
    if cfg.noise_sigma > 0:
        img = img + cfg.noise_sigma * rng.normal(cfg.H * cfg.W).reshape(cfg.H, cfg.W)
    img = np.clip(img, 0.0, 1.0)
    labelmap = coords_to_labelmap(coords, cfg.h, cfg.w, cfg.H, cfg.W)
    return Sample(image=img, coords=coords, labelmap=labelmap, area=polygon_area(coords),
                  seed=seed)


# ---------------------------------------------------------------------------
# episodes and splits

DEFAULT_QUERY = 24


def sample_seed(seed: int, category_id: int, role: int, index: int) -> int:
    """role 0 = support, 1 = query; distinct roles never share a seed stream."""
    return derive_seed(seed, category_id, role, index)


def sample_episode(registry: list[CategorySpec], category_id: int, K: int,
                   M: int = DEFAULT_QUERY, seed: int = 0,
                   cfg: DataConfig | None = None) -> Episode:
    if K < 1 or M < 1:
        raise ValueError(f"need K >= 1 and M >= 1, got K={K}, M={M}")
    cat = category_by_id(registry, category_id)
    cfg = cfg or DataConfig()
    support = [render_sample(cat, cfg, sample_seed(seed, category_id, 0, k)) for k in range(K)]
    query = [render_sample(cat, cfg, sample_seed(seed, category_id, 1, m)) for m in range(M)]
    return Episode(category_id=category_id, support=support, query=query, seed=seed)


def build_benchmark(registry: list[CategorySpec], scheme: int, seed: int = 0) -> BenchmarkSplit:
    """Seen/unseen split (6 seen) for the four transfer scenarios.

    1: half-body -> full-body (first four upper and first two lower seen)
    2: upper -> everything else
    3: categories sorted by N_c descending, the last six seen
    4: six seen chosen at random from ``seed``
    """
    ids = [c.id for c in registry]
    by_region = {r: [c.id for c in registry if c.body_region == r] for r in REGIONS}
    if scheme == 1:
        if len(by_region["upper"]) < 4 or len(by_region["lower"]) < 2:
            raise ValueError("scheme 1 needs at least 4 upper and 2 lower categories")
        seen = by_region["upper"][:4] + by_region["lower"][:2]
    elif scheme == 2:
        if len(by_region["upper"]) < 6:
            raise ValueError("scheme 2 needs at least 6 upper categories")
        seen = by_region["upper"][:6]
    elif scheme == 3:
        order = sorted(registry, key=lambda c: (-c.n_landmarks, c.id))
        seen = [c.id for c in order[-6:]]
        if order[-7].n_landmarks == order[-6].n_landmarks:
            raise ValueError("scheme 3 split is ambiguous: tie in landmark counts at the cut")
    elif scheme == 4:
        if len(ids) < 7:
            raise ValueError("scheme 4 needs at least 7 categories")
        seen = [ids[i] for i in Rng(derive_seed(seed, 4)).choice(len(ids), 6)]
    else:
        raise ValueError(f"unknown benchmark scheme {scheme}")
    seen_t = tuple(sorted(seen))
    return BenchmarkSplit(scheme=scheme, seen=seen_t,
                          unseen=tuple(i for i in ids if i not in seen_t))


# ---------------------------------------------------------------------------
# file formats


def encode_pgm(img: np.ndarray) -> bytes:
    """8-bit binary PGM (P5); values in [0, 1] map to 0..255 by rounding."""
    H, W = img.shape
    pix = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    return f"P5\n{W} {H}\n255\n".encode("ascii") + pix.tobytes()


def decode_pgm(raw: bytes) -> np.ndarray:
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a P5 PGM")
    W, H = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(H, W).astype(np.float64) / 255.0


def encode_labelmap_rle(labelmap: np.ndarray) -> str:
    """Run-length text: a ``n h w`` header line, then one line per channel of
    ``value*count`` tokens over the row-major flattened mask."""
    n, h, w = labelmap.shape
    lines = [f"{n} {h} {w}"]
    for ch in labelmap.reshape(n, -1).astype(np.int64):
        toks, start = [], 0
        change = np.flatnonzero(np.diff(ch)) + 1
        for end in list(change) + [len(ch)]:
            toks.append(f"{ch[start]}*{end - start}")
            start = end
        lines.append(" ".join(toks))
    return "\n".join(lines) + "\n"


def decode_labelmap_rle(text: str) -> np.ndarray:
    lines = text.strip("\n").split("\n")
    n, h, w = map(int, lines[0].split())
    out = np.zeros((n, h * w))
    for k, line in enumerate(lines[1:]):
        pos = 0
        for tok in line.split():
            v, c = tok.split("*")
            out[k, pos:pos + int(c)] = float(v)
            pos += int(c)
    return out.reshape(n, h, w)


def encode_coords_csv(coords: np.ndarray) -> str:
    rows = ["landmark,x,y"] + [f"{i},{x!r},{y!r}" for i, (x, y) in
                               enumerate(coords.tolist())]
    return "\n".join(rows) + "\n"


def serialize_sample(s: Sample) -> bytes:
    """Concatenated on-disk formats of one sample; used for byte-equality checks."""
    return (encode_pgm(s.image) + encode_coords_csv(s.coords).encode()
            + f"area,{s.area!r}\n".encode() + encode_labelmap_rle(s.labelmap).encode())


def serialize_episode(ep: Episode) -> bytes:
    head = f"episode,{ep.category_id},{ep.seed},{len(ep.support)},{len(ep.query)}\n".encode()
    return head + b"".join(serialize_sample(s) for s in ep.support + ep.query)


def dump_samples(registry: list[CategorySpec], category_ids, n: int, seed: int,
                 cfg: DataConfig, out_dir: Path) -> list[Path]:
    """Write ``n`` samples per category: ``<cat>/<i>.pgm|.csv|.rle`` plus ``samples.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = ["category,sample,seed,area"]
    written = []
    for cid in category_ids:
        cat = category_by_id(registry, cid)
        d = out_dir / cat.name
        d.mkdir(exist_ok=True)
        for i in range(n):
            sd = sample_seed(seed, cid, 2, i)
            s = render_sample(cat, cfg, sd)
            (d / f"{i:04d}.pgm").write_bytes(encode_pgm(s.image))
            (d / f"{i:04d}.csv").write_text(encode_coords_csv(s.coords))
            (d / f"{i:04d}.rle").write_text(encode_labelmap_rle(s.labelmap))
            index.append(f"{cat.name},{i},{sd},{s.area!r}")
            written.append(d / f"{i:04d}.pgm")
    (out_dir / "samples.csv").write_text("\n".join(index) + "\n")
    return written
