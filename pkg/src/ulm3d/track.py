"""Frame-to-frame linking of detections into microbubble tracks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .core import Detection


@dataclass(frozen=True)
class Track:
    detections: tuple
    block: int = 0

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))

    def __len__(self) -> int:
        return len(self.detections)

    @property
    def positions(self) -> np.ndarray:
        return np.array([d.position for d in self.detections], dtype=float).reshape(-1, 3)

    @property
    def frames(self) -> np.ndarray:
        return np.array([d.frame for d in self.detections], dtype=int)

    @property
    def net_displacement(self) -> float:
        p = self.positions
        return float(np.linalg.norm(p[-1] - p[0])) if len(p) else 0.0

    @property
    def path_length(self) -> float:
        p = self.positions
        return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum()) if len(p) > 1 else 0.0

    def translated(self, offset_mm) -> "Track":
        off = np.asarray(offset_mm, dtype=float)
        dets = tuple(Detection(tuple(np.asarray(d.position) + off), d.intensity, d.frame, d.block)
                     for d in self.detections)
        return Track(dets, self.block)


def _canonical(dets: Sequence[Detection]) -> list:
    return sorted(dets, key=lambda d: (d.position, d.intensity))


def _augmented_lap(cost: np.ndarray, feasible: np.ndarray, penalty: float, forced: dict):
    """Solve the square LAP where every row and column may also stay unmatched
    at ``penalty``. ``forced`` maps a row to a column, or to ``None`` for
    unmatched. Returns ``(objective, rows, cols)`` or ``None`` if infeasible."""
    n, m = cost.shape
    big = np.full((n + m, m + n), np.inf)
    big[:n, :m] = np.where(feasible, cost, np.inf)
    big[np.arange(n), m + np.arange(n)] = penalty
    big[n + np.arange(m), np.arange(m)] = penalty
    big[n:, m:] = 0.0
    for r, c in forced.items():
        row = big[r].copy()
        big[r, :] = np.inf
        if c is None:
            big[r, m + r] = row[m + r]
        else:
            big[:, c] = np.inf
            big[r, c] = row[c]
    try:
        rows, cols = linear_sum_assignment(big)
    except ValueError:
        return None
    total = big[rows, cols].sum()
    if not np.isfinite(total):
        return None
    sel = (rows < n) & (cols < m)
    return float(total), rows[sel], cols[sel]


def _solve_component(cost: np.ndarray, feasible: np.ndarray, penalty: float):
    """Max-cardinality, min-cost matching of one component.

    Among optimal matchings the lexicographically smallest pair list is
    returned: rows are fixed in order, each to the lowest column (or to
    no column) that still admits an optimal completion.
    """
    best, rows, cols = _augmented_lap(cost, feasible, penalty, {})
    n = cost.shape[0]
    if n == 1 and cost.shape[1] == 1:
        return rows, cols
    tol = 1e-9 * (1.0 + abs(best))
    forced: dict = {}
    used: set = set()
    for r in range(n):
        choice = None
        for c in [c for c in np.nonzero(feasible[r])[0] if c not in used] + [None]:
            res = _augmented_lap(cost, feasible, penalty, {**forced, r: c})
            if res is not None and res[0] <= best + tol:
                choice = c
                break
        forced[r] = choice
        if choice is not None:
            used.add(choice)
    pairs = sorted((r, c) for r, c in forced.items() if c is not None)
    return (np.array([p[0] for p in pairs], dtype=int), np.array([p[1] for p in pairs], dtype=int))


def assign_frames(prev: Sequence[Detection], nxt: Sequence[Detection], max_link: float) -> list:
    """Gated optimal assignment between two frames.

    Pairs farther apart than ``max_link`` (mm) are forbidden. Among feasible
    matchings the one with the most pairs is chosen, and among those the one
    with the smallest total Euclidean distance. Returns ``(i, j)`` index pairs
    into ``prev`` and ``nxt``, sorted by ``i``.
    """
    if max_link <= 0:
        raise ValueError("max_link must be positive")
    if len(prev) == 0 or len(nxt) == 0:
        return []
    a = np.array([d.position for d in prev], dtype=float)
    b = np.array([d.position for d in nxt], dtype=float)
    return assign_points(a, b, max_link)


def assign_points(a: np.ndarray, b: np.ndarray, max_link: float) -> list:
    na, nb = len(a), len(b)
    if na == 0 or nb == 0:
        return []
    near = cKDTree(a).query_ball_tree(cKDTree(b), max_link * (1 + 1e-12))
    ii = np.array([i for i, js in enumerate(near) for _ in js], dtype=np.int64)
    jj = np.array([j for js in near for j in js], dtype=np.int64)
    if ii.size == 0:
        return []
    dd = np.linalg.norm(a[ii] - b[jj], axis=1)
    ok = dd <= max_link
    ii, jj, dd = ii[ok], jj[ok], dd[ok]
    if ii.size == 0:
        return []
    graph = coo_matrix((np.ones(ii.size), (ii, na + jj)), shape=(na + nb, na + nb))
    _, labels = connected_components(graph, directed=False)
    pairs = []
    comp_of_edge = labels[ii]
    for comp in np.unique(comp_of_edge):
        e = comp_of_edge == comp
        ri, ci = np.unique(ii[e]), np.unique(jj[e])
        rmap = {r: k for k, r in enumerate(ri)}
        cmap = {c: k for k, c in enumerate(ci)}
        cost = np.zeros((len(ri), len(ci)))
        feas = np.zeros((len(ri), len(ci)), dtype=bool)
        for r, c, d in zip(ii[e], jj[e], dd[e]):
            cost[rmap[r], cmap[c]] = d
            feas[rmap[r], cmap[c]] = True
        # one extra pair always outweighs any change in total distance
        penalty = max_link * min(len(ri), len(ci)) + 1.0
        rr, cc = _solve_component(cost, feas, penalty)
        pairs.extend(zip(ri[rr].tolist(), ci[cc].tolist()))
    return sorted(pairs)


def build_tracks(frames: Sequence[Sequence[Detection]], max_link: float, min_length: int = 10,
                 min_displacement: float = 0.0, displacement: str = "net", block: int = 0) -> list:
    """Chain per-frame assignments into tracks, then filter them.

    ``frames[k]`` holds the detections of consecutive frame ``k``; a track
    ends as soon as its head is unmatched (no gap filling).
    """
    open_tracks: list = []
    finished: list = []
    prev: list = []
    for k, dets in enumerate(frames):
        dets = _canonical(dets)
        pairs = assign_frames(prev, dets, max_link) if prev else []
        matched_prev = {i for i, _ in pairs}
        matched_next = {j: i for i, j in pairs}
        new_open = []
        for i, tr in enumerate(open_tracks):
            if i not in matched_prev:
                finished.append(tr)
        for j, d in enumerate(dets):
            if j in matched_next:
                tr = open_tracks[matched_next[j]]
                tr.append(d)
                new_open.append(tr)
            else:
                new_open.append([d])
        open_tracks, prev = new_open, dets
    finished.extend(open_tracks)
    tracks = [Track(tuple(t), block) for t in finished]
    tracks = filter_tracks(tracks, min_length, min_displacement, displacement)
    return sorted(tracks, key=lambda t: (t.detections[0].frame, t.detections[0].position))


def group_by_frame(detections: Sequence[Detection]) -> dict:
    """Detections grouped per block, each a list of per-frame lists over the
    block's contiguous frame range."""
    by_block: dict = {}
    for d in detections:
        by_block.setdefault(d.block, {}).setdefault(d.frame, []).append(d)
    out = {}
    for b, frames in by_block.items():
        lo, hi = min(frames), max(frames)
        out[b] = [frames.get(f, []) for f in range(lo, hi + 1)]
    return out


def track_detections(detections: Sequence[Detection], max_link: float, min_length: int = 10,
                     min_displacement: float = 0.0, displacement: str = "net") -> list:
    tracks = []
    for b, frames in sorted(group_by_frame(detections).items()):
        tracks.extend(build_tracks(frames, max_link, min_length, min_displacement, displacement, b))
    return tracks


def filter_tracks(tracks: Sequence[Track], min_length: int = 10, min_displacement: float = 0.0,
                  displacement: str = "net") -> list:
    if displacement not in ("net", "path"):
        raise ValueError("displacement must be 'net' or 'path'")
    out = []
    for t in tracks:
        dist = t.net_displacement if displacement == "net" else t.path_length
        if len(t) >= min_length and dist >= min_displacement:
            out.append(t)
    return out


def max_velocity(max_link: float, volume_rate: float) -> float:
    """Largest speed (mm/s) a gated link can follow."""
    if volume_rate <= 0:
        raise ValueError("volume_rate must be positive")
    return max_link * volume_rate
