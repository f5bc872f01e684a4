"""Pose-aware reference selection on a Delaunay-triangulated appearance map.

Each reference frame is embedded as a 2-D point (for faces, a pitch/yaw
proxy from landmarks). The points are triangulated, and a query frame picks
the vertices of the triangle containing its embedding, growing outwards over
edge-adjacent triangles when more references are wanted.
"""
from __future__ import annotations

import json
import logging
import math
import os
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

DEDUP_TOL = 1e-9
INCIRCLE_TOL = 1e-9
# super-triangle half-size in normalized (unit-diameter) coordinates
SUPER_SCALE = 1e6


class TooFewPointsError(ValueError):
    pass


class DegenerateGeometryError(ValueError):
    pass


class InsufficientLandmarksError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddedFrame:
    frame_id: int
    x: float
    y: float

    @property
    def coord(self) -> tuple[float, float]:
        return (self.x, self.y)


def orient(a, b, c) -> float:
    """Twice the signed area of (a, b, c); positive when counter-clockwise."""
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def incircle(a, b, c, d) -> float:
    """Positive when d is strictly inside the circumcircle of CCW (a, b, c)."""
    adx, ady = a[0] - d[0], a[1] - d[1]
    bdx, bdy = b[0] - d[0], b[1] - d[1]
    cdx, cdy = c[0] - d[0], c[1] - d[1]
    alift = adx * adx + ady * ady
    blift = bdx * bdx + bdy * bdy
    clift = cdx * cdx + cdy * cdy
    return (
        alift * (bdx * cdy - cdx * bdy)
        + blift * (cdx * ady - adx * cdy)
        + clift * (adx * bdy - bdx * ady)
    )


# --------------------------------------------------------------------------
# landmark embedding

# 68-point (iBUG 300-W) indices
_NOSE_TIP = 30
_CHIN = 8
_EYE_OUTER = (36, 45)

# pose-mode keypoint layout
POSE_KEYPOINTS = ("head", "neck", "r_shoulder", "l_shoulder", "r_hip", "l_hip", "r_knee", "l_knee")


def _dist(p, q) -> float:
    return math.hypot(p[0] - q[0], p[1] - q[1])


def landmarks_to_coord(landmarks: Sequence[Sequence[float]], mode: str = "face") -> tuple[float, float]:
    """Map one frame's landmarks to a point on the appearance map.

    ``face`` expects the 68-point layout and returns ``(pitch, yaw)`` proxies
    in degrees::

        yaw   = atan2(d_L - d_R, d_L + d_R)
        pitch = atan2(n_upper - n_lower, n_upper + n_lower)

    ``d_L``/``d_R`` are the nose-tip distances to the outer eye corners on the
    image left/right, ``n_upper`` is the nose tip's distance to the line
    through both outer eye corners, and ``n_lower`` the nose tip to chin
    distance.

    ``pose`` expects at least 8 keypoints ordered as :data:`POSE_KEYPOINTS`
    and returns ``(torso tilt in degrees, hip-center x normalized to the
    keypoint bounding box)``.
    """
    pts = [(float(p[0]), float(p[1])) for p in landmarks]
    if mode == "face":
        if len(pts) < 68:
            raise InsufficientLandmarksError(f"face mode needs 68 landmarks, got {len(pts)}")
        nose = pts[_NOSE_TIP]
        left, right = sorted((pts[i] for i in _EYE_OUTER), key=lambda p: p[0])
        d_l, d_r = _dist(nose, left), _dist(nose, right)
        eye_span = _dist(left, right)
        if eye_span == 0:
            raise InsufficientLandmarksError("outer eye corners coincide")
        n_upper = abs(orient(left, right, nose)) / eye_span
        n_lower = _dist(nose, pts[_CHIN])
        yaw = math.degrees(math.atan2(d_l - d_r, d_l + d_r))
        pitch = math.degrees(math.atan2(n_upper - n_lower, n_upper + n_lower))
        return pitch, yaw
    if mode == "pose":
        if len(pts) < len(POSE_KEYPOINTS):
            raise InsufficientLandmarksError(f"pose mode needs {len(POSE_KEYPOINTS)} keypoints, got {len(pts)}")
        neck = pts[1]
        hip = ((pts[4][0] + pts[5][0]) / 2, (pts[4][1] + pts[5][1]) / 2)
        # image y grows downwards
        tilt = math.degrees(math.atan2(neck[0] - hip[0], hip[1] - neck[1]))
        xs = [p[0] for p in pts]
        span = max(xs) - min(xs)
        hip_x = (hip[0] - min(xs)) / span if span > 0 else 0.5
        return tilt, hip_x
    raise ValueError(f"unknown embedding mode {mode!r}")


def read_landmarks_jsonl(path: str | os.PathLike, mode: str = "face") -> list[EmbeddedFrame]:
    frames = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                frame_id, points = int(rec["frame"]), rec["points"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad landmark record ({exc})") from None
            x, y = landmarks_to_coord(points, mode)
            frames.append(EmbeddedFrame(frame_id, x, y))
    return frames


# --------------------------------------------------------------------------
# triangulation


class _Mesh:
    """Mutable triangle soup with a directed-edge index, used only while building.

    ``otol`` and ``ctol`` are the orientation and incircle tolerances, already
    scaled to the extent of the point set.
    """

    def __init__(self, pts, otol: float, ctol: float):
        self.pts = pts
        self.otol = otol
        self.ctol = ctol
        self.tris: dict[int, tuple[int, int, int]] = {}
        self.edges: dict[tuple[int, int], int] = {}
        self._next = 0
        self.last = -1

    def add(self, a, b, c) -> int:
        t = self._next
        self._next += 1
        self.tris[t] = (a, b, c)
        self.edges[(a, b)] = t
        self.edges[(b, c)] = t
        self.edges[(c, a)] = t
        self.last = t
        return t

    def remove(self, t) -> None:
        a, b, c = self.tris.pop(t)
        for e in ((a, b), (b, c), (c, a)):
            if self.edges.get(e) == t:
                del self.edges[e]

    def neighbor(self, u, v):
        return self.edges.get((v, u))

    def locate(self, q):
        """Visibility walk from the last created triangle; None when outside."""
        pts = self.pts
        t = self.last if self.last in self.tris else next(iter(self.tris))
        seen = set()
        while t not in seen:
            seen.add(t)
            a, b, c = self.tris[t]
            for u, v in ((a, b), (b, c), (c, a)):
                if orient(pts[u], pts[v], q) < 0:
                    nxt = self.neighbor(u, v)
                    if nxt is None:
                        return None
                    t = nxt
                    break
            else:
                return t
        for t, (a, b, c) in self.tris.items():
            if orient(pts[a], pts[b], q) >= 0 and orient(pts[b], pts[c], q) >= 0 and orient(pts[c], pts[a], q) >= 0:
                return t
        return None

    def insert(self, i, start) -> None:
        """Bowyer-Watson insertion of point ``i`` whose containing triangle is ``start``."""
        pts = self.pts
        q = pts[i]
        cavity = {start}
        queue = deque([start])
        while queue:
            t = queue.popleft()
            a, b, c = self.tris[t]
            for u, v in ((a, b), (b, c), (c, a)):
                n = self.neighbor(u, v)
                if n is None or n in cavity:
                    continue
                na, nb, nc = self.tris[n]
                if incircle(pts[na], pts[nb], pts[nc], q) > 0:
                    cavity.add(n)
                    queue.append(n)

        # Every boundary edge must see q strictly on its left. An edge that
        # fails either belongs to a triangle wrongly admitted by a rounded
        # incircle test (drop it) or, for triangles q lies on, must be
        # crossed (absorb the neighbour).
        pinned = {start}
        for _ in range(4 * len(self.tris) + 8):
            boundary = []
            change = False
            for t in sorted(cavity):
                a, b, c = self.tris[t]
                for u, v in ((a, b), (b, c), (c, a)):
                    n = self.neighbor(u, v)
                    if n in cavity:
                        continue
                    if orient(pts[u], pts[v], q) <= self.otol:
                        if n is None:
                            # q sits on a hull edge, which splits in two
                            continue
                        if t in pinned:
                            cavity.add(n)
                            pinned.add(n)
                        else:
                            cavity.discard(t)
                        change = True
                        break
                    boundary.append((u, v))
                if change:
                    break
            if not change:
                break
        else:
            raise DegenerateGeometryError(f"could not insert point {i} at {q}")
        for t in cavity:
            self.remove(t)
        for u, v in boundary:
            self.add(u, v, i)

    def hull_loop(self) -> dict[int, int]:
        return {u: v for (u, v) in self.edges if (v, u) not in self.edges}

    def convexify(self, n: int) -> None:
        """Fill reflex notches on the boundary until the region is convex."""
        pts = self.pts
        changed = True
        while changed:
            changed = False
            nxt = self.hull_loop()
            for a, b in list(nxt.items()):
                c = nxt.get(b)
                if c is None or c == a or (c, a) in self.edges:
                    continue
                if orient(pts[a], pts[b], pts[c]) >= -self.otol:
                    continue
                # triangle (a, c, b) is CCW and lies outside the region
                if any(
                    orient(pts[a], pts[c], pts[k]) >= 0
                    and orient(pts[c], pts[b], pts[k]) >= 0
                    and orient(pts[b], pts[a], pts[k]) >= 0
                    for k in range(n)
                    if k not in (a, b, c)
                ):
                    continue
                self.add(a, c, b)
                changed = True
                break

    def _prefer_flip(self, a, b, c, d) -> bool:
        """Shared edge (a, b) between (a, b, c) and (b, a, d)."""
        pts = self.pts
        if orient(pts[c], pts[a], pts[d]) <= self.otol or orient(pts[d], pts[b], pts[c]) <= self.otol:
            return False
        det = incircle(pts[a], pts[b], pts[c], pts[d])
        if det > self.ctol:
            return True
        if det < -self.ctol:
            return False
        current = sorted((tuple(sorted((a, b, c))), tuple(sorted((b, a, d)))))
        flipped = sorted((tuple(sorted((c, d, a))), tuple(sorted((d, c, b)))))
        return flipped < current

    def legalize(self) -> None:
        """Lawson flips until every interior edge is locally Delaunay."""
        stack = [e for e in self.edges if e[0] < e[1] and (e[1], e[0]) in self.edges]
        while stack:
            a, b = stack.pop()
            t1 = self.edges.get((a, b))
            t2 = self.edges.get((b, a))
            if t1 is None or t2 is None:
                continue
            c = next(v for v in self.tris[t1] if v not in (a, b))
            d = next(v for v in self.tris[t2] if v not in (a, b))
            if not self._prefer_flip(a, b, c, d):
                continue
            self.remove(t1)
            self.remove(t2)
            self.add(c, d, b)
            self.add(d, c, a)
            stack.extend((min(u, v), max(u, v)) for u, v in ((a, d), (d, b), (b, c), (c, a)))


def _dedup(frames: Iterable[EmbeddedFrame]) -> list[EmbeddedFrame]:
    """Frames sorted by id, dropping any within 1e-9 of a lower-id frame."""
    frames = list(frames)
    for f in frames:
        if not (math.isfinite(f.x) and math.isfinite(f.y)):
            raise ValueError(f"frame {f.frame_id} has non-finite coordinate {f.coord}")
    ids = [f.frame_id for f in frames]
    if len(set(ids)) != len(ids):
        raise ValueError("frame ids must be unique")
    grid: dict[tuple[int, int], list[EmbeddedFrame]] = {}
    kept = []
    for f in sorted(frames, key=lambda f: f.frame_id):
        cx, cy = math.floor(f.x / DEDUP_TOL), math.floor(f.y / DEDUP_TOL)
        clash = any(
            _dist(f.coord, g.coord) <= DEDUP_TOL
            for dx in (-1, 0, 1)
            for dy in (-1, 0, 1)
            for g in grid.get((cx + dx, cy + dy), ())
        )
        if clash:
            continue
        grid.setdefault((cx, cy), []).append(f)
        kept.append(f)
    return kept


def _triangulate(pts: list[tuple[float, float]]) -> list[tuple[int, int, int]]:
    n = len(pts)
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    cx, cy = (min(xs) + max(xs)) / 2, (min(ys) + max(ys)) / 2
    scale = max(max(xs) - min(xs), max(ys) - min(ys))
    otol = 1e-12 * scale * scale
    ctol = INCIRCLE_TOL * scale**4

    # collinearity: largest triangle spanned by the extreme pair and any point
    i0 = min(range(n), key=lambda i: pts[i])
    i1 = max(range(n), key=lambda i: _dist(pts[i0], pts[i]))
    if max(abs(orient(pts[i0], pts[i1], p)) for p in pts) <= otol:
        raise DegenerateGeometryError("all points are collinear")

    super_scale = SUPER_SCALE
    for _ in range(4):
        s = super_scale * scale
        corners = [(cx - 3 * s, cy - 3 * s), (cx + 3 * s, cy), (cx, cy + 3 * s)]
        mesh = _Mesh(list(pts) + corners, otol, ctol)
        mesh.add(n, n + 1, n + 2)
        for i in range(n):
            t = mesh.locate(pts[i])
            if t is None:
                raise DegenerateGeometryError(f"point {i} fell outside the super-triangle")
            mesh.insert(i, t)
        for t in [t for t, tri in mesh.tris.items() if max(tri) >= n]:
            mesh.remove(t)
        if len({v for tri in mesh.tris.values() for v in tri}) == n:
            break
        # a hull point kept only super-triangle neighbours; retry further out
        log.debug("super-triangle at %g too tight, retrying", super_scale)
        super_scale *= 1e3
    else:
        raise DegenerateGeometryError("could not triangulate all points")

    mesh.convexify(n)
    mesh.legalize()

    tris = []
    for a, b, c in mesh.tris.values():
        # rotate so the smallest index leads, keeping CCW order
        while a != min(a, b, c):
            a, b, c = b, c, a
        tris.append((a, b, c))
    tris.sort()
    return tris


def _adjacency(tris: Sequence[tuple[int, int, int]]) -> list[tuple[int, int, int]]:
    owner = {}
    for t, (a, b, c) in enumerate(tris):
        for e in ((a, b), (b, c), (c, a)):
            if e in owner:
                raise ValueError(f"edge {e} used by two triangles with the same orientation")
            owner[e] = t
    adj = []
    for a, b, c in tris:
        # entry i faces vertex i
        adj.append(tuple(owner.get((v, u), -1) for u, v in ((b, c), (c, a), (a, b))))
    return adj


@dataclass(frozen=True)
class AppearanceMap:
    points: tuple[EmbeddedFrame, ...]
    triangles: tuple[tuple[int, int, int], ...]
    adjacency: tuple[tuple[int, int, int], ...]

    def coord(self, i: int) -> tuple[float, float]:
        return self.points[i].coord

    def to_dict(self) -> dict:
        return {
            "points": [[f.frame_id, f.x, f.y] for f in self.points],
            "triangles": [list(t) for t in self.triangles],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "AppearanceMap":
        points = tuple(EmbeddedFrame(int(fid), float(x), float(y)) for fid, x, y in d["points"])
        if "triangles" not in d:
            return build_map(points)
        tris = tuple(tuple(int(v) for v in t) for t in d["triangles"])
        if len(points) < 3 or not tris:
            raise TooFewPointsError(f"map needs at least 3 points and one triangle, got {len(points)} points")
        for t in tris:
            if len(t) != 3 or not all(0 <= v < len(points) for v in t):
                raise ValueError(f"triangle {t} references a missing point")
            if orient(points[t[0]].coord, points[t[1]].coord, points[t[2]].coord) <= 0:
                raise DegenerateGeometryError(f"triangle {t} is not counter-clockwise")
        return cls(points, tris, tuple(_adjacency(tris)))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "AppearanceMap":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json())

    def contains(self, t: int, q) -> bool:
        a, b, c = (self.coord(v) for v in self.triangles[t])
        return orient(a, b, q) >= 0 and orient(b, c, q) >= 0 and orient(c, a, q) >= 0

    def scan(self, q) -> int | None:
        for t in range(len(self.triangles)):
            if self.contains(t, q):
                return t
        return None


def build_map(frames: Iterable[EmbeddedFrame]) -> AppearanceMap:
    """Delaunay-triangulate the embedded frames.

    Points are stored in frame_id order, so vertex indices do not depend on
    the input order. Frames at the same coordinate (within 1e-9) collapse to
    the lowest frame_id. For cocircular configurations the diagonal giving the
    lexicographically smaller pair of sorted vertex triples wins.
    """
    frames = [f if isinstance(f, EmbeddedFrame) else EmbeddedFrame(*f) for f in frames]
    points = _dedup(frames)
    if len(points) < 3:
        raise TooFewPointsError(f"need at least 3 distinct points, got {len(points)}")
    tris = _triangulate([f.coord for f in points])
    return AppearanceMap(tuple(points), tuple(tris), tuple(_adjacency(tris)))


def locate(amap: AppearanceMap, q) -> int | None:
    """Index of a triangle whose closed region holds ``q``, or None outside the hull.

    Straight visibility walk from triangle 0; a revisited triangle or a query
    on a triangle boundary falls back to a scan so ties resolve to the lowest
    index.
    """
    q = (float(q[0]), float(q[1]))
    t = 0
    seen = set()
    while t not in seen:
        seen.add(t)
        tri = amap.triangles[t]
        on_edge = False
        for i in range(3):
            u, v = amap.coord(tri[(i + 1) % 3]), amap.coord(tri[(i + 2) % 3])
            o = orient(u, v, q)
            if o < 0:
                nxt = amap.adjacency[t][i]
                if nxt < 0:
                    return None
                t = nxt
                break
            on_edge = on_edge or o == 0
        else:
            return amap.scan(q) if on_edge else t
    return amap.scan(q)


def _seg_dist(p, a, b) -> float:
    dx, dy = b[0] - a[0], b[1] - a[1]
    ll = dx * dx + dy * dy
    t = 0.0 if ll == 0 else max(0.0, min(1.0, ((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / ll))
    return math.hypot(p[0] - a[0] - t * dx, p[1] - a[1] - t * dy)


def _nearest_hull_triangle(amap: AppearanceMap, q) -> int:
    best = None
    for t, tri in enumerate(amap.triangles):
        for i in range(3):
            if amap.adjacency[t][i] >= 0:
                continue
            a, b = amap.coord(tri[(i + 1) % 3]), amap.coord(tri[(i + 2) % 3])
            key = (_seg_dist(q, a, b), t)
            if best is None or key < best:
                best = key
    return best[1]


def select_references(amap: AppearanceMap, q, want: int = 3) -> list[int]:
    """Frame ids of up to ``want`` references for a query embedding ``q``.

    Starts from the containing triangle (or, outside the hull, the triangle on
    the nearest hull edge) and grows breadth-first over edge-adjacent
    triangles. Within each ring new vertices are ordered by distance to ``q``,
    so a smaller ``want`` always yields a prefix of a larger one.
    """
    if want < 3:
        raise ValueError(f"want must be at least 3, got {want}")
    q = (float(q[0]), float(q[1]))
    start = locate(amap, q)
    if start is None:
        start = _nearest_hull_triangle(amap, q)
        log.info("query %s lies outside the appearance map; using nearest hull edge", q)

    def ranked(verts):
        return sorted(verts, key=lambda v: (_dist(amap.coord(v), q), amap.points[v].frame_id))

    order = ranked(amap.triangles[start])
    seen_v = set(order)
    seen_t = {start}
    ring = [start]
    while len(order) < want and ring:
        nxt = []
        for t in ring:
            for n in amap.adjacency[t]:
                if n >= 0 and n not in seen_t:
                    seen_t.add(n)
                    nxt.append(n)
        fresh = {v for t in nxt for v in amap.triangles[t]} - seen_v
        order.extend(ranked(fresh))
        seen_v |= fresh
        ring = nxt
    return [amap.points[v].frame_id for v in order[:want]]
