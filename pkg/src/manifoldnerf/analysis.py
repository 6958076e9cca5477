"""Feature-space studies over a set of views.

Pairwise cosine tables and histograms, cosine against angular separation,
interpolation checks on view triples and a 2-D principal-axis projection.
Everything exports CSV; plotting is left to downstream tools.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import default_intrinsics, render_dataset
from .errors import DomainError
from .features import FeatureExtractor, cosine_similarity, lerp_features
from .geometry import angle_between, pose_from_spherical, slerp_position


def view_angles_of(positions):
    """(azimuth, elevation) in degrees of camera positions about the origin."""
    positions = np.asarray(positions, dtype=np.float64)
    r = np.linalg.norm(positions, axis=1)
    az = np.degrees(np.arctan2(positions[:, 1], positions[:, 0])) % 360.0
    el = np.degrees(np.arcsin(np.clip(positions[:, 2] / r, -1.0, 1.0)))
    return az, el


def dataset_features(dataset, extractor=None):
    extractor = extractor or FeatureExtractor()
    with torch.no_grad():
        return np.stack([extractor(img).numpy() for img in dataset.images])


def orbit_dataset(scene, n=36, elevation=0.0, radius=4.0, size=64, samples=256):
    """Oracle renders on a constant-elevation orbit, ``360 / n`` degrees apart.

    The default equatorial orbit is a great circle, so every orbit view lies
    on the Slerp arc between its neighbours.
    """
    poses = [pose_from_spherical(360.0 * k / n, elevation, radius) for k in range(n)]
    return render_dataset(scene, poses, default_intrinsics(size), samples)


# -- pairwise similarity -------------------------------------------------------


@dataclass
class SimilarityTable:
    matrix: np.ndarray
    azimuths: np.ndarray
    elevations: np.ndarray
    positions: np.ndarray

    def __len__(self):
        return len(self.matrix)

    def off_diagonal(self):
        iu = np.triu_indices(len(self), k=1)
        return self.matrix[iu]

    def separations(self):
        """Angular separation in degrees for every pair, upper-triangle order."""
        n = len(self)
        out = [math.degrees(angle_between(self.positions[i], self.positions[j])) for i in range(n) for j in range(i + 1, n)]
        return np.asarray(out)

    def histogram(self, bin_width=0.02):
        """Counts of off-diagonal cosines in bins of ``bin_width`` aligned to 1.0."""
        if bin_width <= 0:
            raise DomainError(f"bin width must be positive, got {bin_width}")
        values = self.off_diagonal()
        lo = 1.0 - bin_width * math.ceil((1.0 - values.min()) / bin_width - 1e-9)
        n_bins = max(1, int(round((1.0 - lo) / bin_width)))
        edges = 1.0 - bin_width * np.arange(n_bins, -1, -1)
        counts, _ = np.histogram(values, bins=edges)
        return edges, counts

    def angle_buckets(self, width_deg=30.0):
        """Mean cosine per angular-separation bucket ``[k w, (k+1) w)``."""
        seps, cos = self.separations(), self.off_diagonal()
        keys = np.floor(seps / width_deg + 1e-9).astype(int)
        rows = []
        for k in np.unique(keys):
            sel = keys == k
            rows.append((k * width_deg, (k + 1) * width_deg, float(cos[sel].mean()), int(sel.sum())))
        return rows

    def least_similar_pair(self):
        m = self.matrix.copy()
        np.fill_diagonal(m, np.inf)
        i, j = np.unravel_index(np.argmin(m), m.shape)
        return (int(min(i, j)), int(max(i, j)))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["view", "azimuth_deg", "elevation_deg"] + [f"v{j}" for j in range(len(self))])
            for i, row in enumerate(self.matrix):
                w.writerow([i, f"{self.azimuths[i]:.6f}", f"{self.elevations[i]:.6f}"] + [f"{x:.12f}" for x in row])

    def write_histogram_csv(self, path, bin_width=0.02):
        edges, counts = self.histogram(bin_width)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_low", "bin_high", "count"])
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                w.writerow([f"{lo:.6f}", f"{hi:.6f}", int(c)])


def similarity_matrix(features):
    f = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(f, axis=1)
    if np.any(norms == 0):
        raise DomainError("cosine similarity of a zero feature vector is undefined")
    u = f / norms[:, None]
    m = np.clip(u @ u.T, -1.0, 1.0)
    # exact symmetry regardless of summation order in the matmul
    return (m + m.T) / 2.0


def pairwise_similarity(dataset, extractor=None):
    if len(dataset) < 2:
        raise DomainError(f"pairwise similarity needs at least 2 views, got {len(dataset)}")
    feats = dataset_features(dataset, extractor)
    az, el = view_angles_of(dataset.positions)
    return SimilarityTable(similarity_matrix(feats), az, el, dataset.positions)


# -- interpolation study -------------------------------------------------------


@dataclass(frozen=True)
class TripleRecord:
    index_a: int
    index_mid: int
    index_b: int
    s: float
    separation_deg: float
    interpolated: float
    endpoint_a: float
    endpoint_b: float

    @property
    def win(self):
        return self.interpolated > self.endpoint_a and self.interpolated > self.endpoint_b


@dataclass
class InterpolationStudy:
    records: list = field(default_factory=list)

    @property
    def win_rate(self):
        if not self.records:
            return math.nan
        return sum(r.win for r in self.records) / len(self.records)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["a", "mid", "b", "s", "separation_deg", "cos_interp_gt", "cos_a_gt", "cos_b_gt", "win"])
            for r in self.records:
                w.writerow(
                    [r.index_a, r.index_mid, r.index_b, f"{r.s:.9f}", f"{r.separation_deg:.6f}",
                     f"{r.interpolated:.12f}", f"{r.endpoint_a:.12f}", f"{r.endpoint_b:.12f}", int(r.win)]
                )
            w.writerow(["win_rate", "", "", "", "", "", "", "", f"{self.win_rate:.6f}"])


def arc_coefficient(pa, pm, pb, tol=1e-6):
    """``s`` with ``slerp(pa, pb, s) == pm``; raises if ``pm`` is off the arc."""
    theta = angle_between(pa, pb) if np.any(pa != pb) else 0.0
    if theta == 0.0:
        if np.linalg.norm(pm - pa) > tol * max(1.0, np.linalg.norm(pa)):
            raise DomainError("middle view does not coincide with the coincident endpoints")
        return 0.0
    s = angle_between(pa, pm) / theta
    if s > 1.0 + 1e-9:
        raise DomainError(f"middle view lies beyond the arc (s={s:.6f})")
    s = min(s, 1.0)
    if np.linalg.norm(slerp_position(pa, pb, s) - pm) > tol * max(1.0, np.linalg.norm(pm)):
        raise DomainError("middle view does not lie on the Slerp arc between the endpoints")
    return s


def interpolation_study(dataset, extractor=None, triples=(), features=None):
    """Score Lerp-interpolated features against the true feature at arc midpoints.

    ``triples`` holds ``(a, mid, b)`` view indices; ``mid`` must lie on the
    Slerp arc from ``a`` to ``b`` and its coefficient is recovered from the
    poses.
    """
    feats = dataset_features(dataset, extractor) if features is None else np.asarray(features)
    pos = dataset.positions
    n = len(dataset)
    records = []
    for t in triples:
        if len(t) != 3:
            raise DomainError(f"a triple needs three view indices, got {t!r}")
        a, m, b = (int(i) for i in t)
        if not all(0 <= i < n for i in (a, m, b)):
            raise DomainError(f"triple {t!r} indexes outside {n} views")
        s = arc_coefficient(pos[a], pos[m], pos[b])
        v_hat = lerp_features(feats[a], feats[b], s)
        gt = torch.as_tensor(feats[m])
        sep = math.degrees(angle_between(pos[a], pos[b])) if a != b else 0.0
        records.append(
            TripleRecord(
                a, m, b, s, sep,
                float(cosine_similarity(v_hat, gt)),
                float(cosine_similarity(feats[a], gt)),
                float(cosine_similarity(feats[b], gt)),
            )
        )
    return InterpolationStudy(records)


def orbit_triples(n, max_separation_deg=90.0):
    """``(i, i+k, i+2k)`` index triples on an ``n``-view orbit up to a separation."""
    step = 360.0 / n
    out = []
    k = 1
    while 2 * k * step <= max_separation_deg + 1e-9 and 2 * k < n:
        out.extend((i, (i + k) % n, (i + 2 * k) % n) for i in range(n))
        k += 1
    return out


def find_arc_triples(positions, max_separation_deg=90.0, tol=1e-6):
    """Every ``(a, mid, b)`` whose middle view lies strictly inside the a-b arc."""
    pos = np.asarray(positions, dtype=np.float64)
    out = []
    for a in range(len(pos)):
        for b in range(a + 1, len(pos)):
            if np.allclose(pos[a], pos[b]):
                continue
            theta = angle_between(pos[a], pos[b])
            if math.degrees(theta) > max_separation_deg + 1e-9 or theta > math.pi - 1e-6:
                continue
            for m in range(len(pos)):
                if m in (a, b):
                    continue
                try:
                    s = arc_coefficient(pos[a], pos[m], pos[b], tol)
                except DomainError:
                    continue
                if 0.0 < s < 1.0:
                    out.append((a, m, b))
    return out


# -- projection ----------------------------------------------------------------


@dataclass
class Projection:
    coords: np.ndarray  # (n, 2)
    axes: np.ndarray  # (2, D)
    mean: np.ndarray
    variances: np.ndarray
    degenerate: bool

    def reconstruct(self):
        return self.mean + self.coords @ self.axes

    def write_csv(self, path, azimuths=None, elevations=None):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["view", "azimuth_deg", "elevation_deg", "x", "y"])
            for i, (x, y) in enumerate(self.coords):
                az = "" if azimuths is None else f"{azimuths[i]:.6f}"
                el = "" if elevations is None else f"{elevations[i]:.6f}"
                w.writerow([i, az, el, f"{x:.12f}", f"{y:.12f}"])


def _fix_sign(axis, tol=1e-12):
    nz = np.flatnonzero(np.abs(axis) > tol)
    if len(nz) and axis[nz[0]] < 0:
        return -axis
    return axis


def project_2d(features):
    """Centre and project onto the two leading principal axes.

    Axes come from a symmetric eigensolver on the covariance and are signed so
    their first nonzero loading is positive. Identical inputs give zero
    coordinates and ``degenerate=True``.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) < 3:
        raise DomainError(f"projection needs at least 3 feature vectors, got shape {f.shape}")
    mean = f.mean(axis=0)
    x = f - mean
    cov = x.T @ x / len(f)
    scale = np.abs(cov).max()
    if scale == 0.0:
        return Projection(np.zeros((len(f), 2)), np.zeros((2, f.shape[1])), mean, np.zeros(2), True)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:2]
    axes, variances = [], []
    for k in order:
        if evals[k] <= 1e-14 * scale:
            axes.append(np.zeros(f.shape[1]))
            variances.append(0.0)
        else:
            axes.append(_fix_sign(evecs[:, k]))
            variances.append(float(evals[k]))
    axes = np.stack(axes)
    return Projection(x @ axes.T, axes, mean, np.asarray(variances), False)


def adjacency_ratio(coords, cyclic=True):
    """Mean 2-D distance of consecutive views over the mean of all pairs."""
    c = np.asarray(coords, dtype=np.float64)
    nxt = np.roll(c, -1, axis=0) if cyclic else c[1:]
    adj = np.linalg.norm((c if cyclic else c[:-1]) - nxt, axis=1).mean()
    d = np.linalg.norm(c[:, None] - c[None], axis=-1)
    iu = np.triu_indices(len(c), k=1)
    return float(adj / d[iu].mean())
