"""Scan-to-mesh evaluation protocol.

Each predicted mesh is rigidly aligned (optionally with scale) to its
scan through corresponding landmarks, then every scan point is measured
against the aligned mesh surface with an exact closest-point query
accelerated by an axis-aligned bounding-box tree. Distances from all
images are pooled and summarized by median, mean, and standard
deviation, in millimetres.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .morphable import Mesh


class AlignmentError(ValueError):
    pass


@dataclass
class SimilarityTransform:
    rotation: np.ndarray     # [3, 3], orthonormal, det +1
    translation: np.ndarray  # [3]
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * pts @ self.rotation.T + self.translation


def umeyama_align(
    src: np.ndarray, dst: np.ndarray, with_scale: bool = True
) -> SimilarityTransform:
    """Least-squares similarity transform t(p) = s R p + t taking src onto dst.

    Closed form via the SVD of the cross-covariance with the reflection
    guard; with_scale=False fixes s = 1 (rigid alignment).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise AlignmentError(f"landmark sets must both be [L,3], got {src.shape} and {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise AlignmentError("need at least 3 landmarks")

    mu_src = src.mean(axis=0)
    mu_dst = dst.mean(axis=0)
    x = src - mu_src
    y = dst - mu_dst
    var_src = float((x ** 2).sum()) / n
    if var_src < 1e-18:
        raise AlignmentError("source landmarks are coincident")

    cov = y.T @ x / n
    u, d, vt = np.linalg.svd(cov)
    # Collinear landmarks leave the rotation about the line unconstrained.
    if d[1] <= 1e-12 * max(d[0], 1e-300):
        raise AlignmentError("landmarks are collinear; alignment is degenerate")
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2] = -1.0
    rotation = (u * sign[None, :]) @ vt
    scale = float((d * sign).sum() / var_src) if with_scale else 1.0
    if scale <= 0:
        raise AlignmentError("alignment produced a non-positive scale")
    translation = mu_dst - scale * rotation @ mu_src
    return SimilarityTransform(rotation=rotation, translation=translation, scale=scale)


# ---------------------------------------------------------------------------
# Exact point-to-triangle distance, vectorized over triangles.

def _closest_on_triangles(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Closest point to p on each triangle; tri is [M, 3, 3].

    Region classification on the two edge parameters (interior, three
    edges, three corners); degenerate triangles fall back to the closest
    point over their three edges treated as segments.
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a

    ap = p[None, :] - a
    d1 = (ab * ap).sum(axis=1)
    d2 = (ac * ap).sum(axis=1)
    bp = p[None, :] - b
    d3 = (ab * bp).sum(axis=1)
    d4 = (ac * bp).sum(axis=1)
    cp = p[None, :] - c
    d5 = (ab * cp).sum(axis=1)
    d6 = (ac * cp).sum(axis=1)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        w_ac = d2 / (d2 - d6)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom

    closest = a + v_in[:, None] * ab + w_in[:, None] * ac  # interior default
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)  # edge AB
    closest[m] = a[m] + v_ab[m, None] * ab[m]
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)  # edge AC
    closest[m] = a[m] + w_ac[m, None] * ac[m]
    m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)  # edge BC
    closest[m] = b[m] + w_bc[m, None] * (c[m] - b[m])
    m = (d1 <= 0) & (d2 <= 0)  # corner A
    closest[m] = a[m]
    m = (d3 >= 0) & (d4 <= d3)  # corner B
    closest[m] = b[m]
    m = (d6 >= 0) & (d5 <= d6)  # corner C
    closest[m] = c[m]

    # Degenerate (near-zero area): closest point over the three edges.
    normal = np.cross(ab, ac)
    degen = (normal * normal).sum(axis=1) <= 1e-24
    if degen.any():
        best = None
        for e0, e1 in ((a[degen], b[degen]), (b[degen], c[degen]), (c[degen], a[degen])):
            seg = e1 - e0
            seg_len2 = (seg * seg).sum(axis=1)
            t = np.zeros(len(seg))
            nz = seg_len2 > 0
            t[nz] = np.clip(((p[None, :] - e0)[nz] * seg[nz]).sum(axis=1) / seg_len2[nz], 0.0, 1.0)
            cand = e0 + t[:, None] * seg
            dist2 = ((cand - p[None, :]) ** 2).sum(axis=1)
            if best is None:
                best = (dist2, cand)
            else:
                swap = dist2 < best[0]
                best[0][swap] = dist2[swap]
                best[1][swap] = cand[swap]
        closest[degen] = best[1]
    return closest


def point_triangle_distance(p: np.ndarray, tri: np.ndarray) -> tuple[float, np.ndarray]:
    """Euclidean distance from p to one closed triangle and the closest point."""
    p = np.asarray(p, dtype=np.float64)
    tri = np.asarray(tri, dtype=np.float64).reshape(1, 3, 3)
    closest = _closest_on_triangles(p, tri)[0]
    return float(np.linalg.norm(p - closest)), closest


# ---------------------------------------------------------------------------
# BVH over triangles: median split on the longest centroid axis.

@dataclass
class _Node:
    bounds: tuple  # (xlo, ylo, zlo, xhi, yhi, zhi) as plain floats
    left: int = -1
    right: int = -1
    tri_ids: np.ndarray | None = None


@dataclass
class BVH:
    triangles: np.ndarray  # [F, 3, 3] float64
    nodes: list[_Node] = field(default_factory=list)
    leaf_size: int = 8


def build_bvh(mesh: Mesh, leaf_size: int = 8) -> BVH:
    verts = np.asarray(mesh.vertices, dtype=np.float64)
    if mesh.triangles.size == 0:
        raise ValueError("cannot build a BVH over an empty mesh")
    tris = verts[np.asarray(mesh.triangles, dtype=np.int64)]
    bvh = BVH(triangles=tris, leaf_size=leaf_size)
    centroids = tris.mean(axis=1)

    def make_node(ids: np.ndarray) -> int:
        pts = tris[ids].reshape(-1, 3)
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        node = _Node(bounds=(lo[0], lo[1], lo[2], hi[0], hi[1], hi[2]))
        index = len(bvh.nodes)
        bvh.nodes.append(node)
        if len(ids) <= leaf_size:
            node.tri_ids = ids
            return index
        extent = centroids[ids].max(axis=0) - centroids[ids].min(axis=0)
        axis = int(np.argmax(extent))
        order = ids[np.argsort(centroids[ids, axis], kind="stable")]
        half = len(order) // 2
        node.left = make_node(order[:half])
        node.right = make_node(order[half:])
        return index

    make_node(np.arange(len(tris), dtype=np.int64))
    return bvh


def _box_distance2(bounds: tuple, x: float, y: float, z: float) -> float:
    dx = bounds[0] - x
    if dx < 0.0:
        dx = x - bounds[3]
        if dx < 0.0:
            dx = 0.0
    dy = bounds[1] - y
    if dy < 0.0:
        dy = y - bounds[4]
        if dy < 0.0:
            dy = 0.0
    dz = bounds[2] - z
    if dz < 0.0:
        dz = z - bounds[5]
        if dz < 0.0:
            dz = 0.0
    return dx * dx + dy * dy + dz * dz


def nearest_on_mesh(bvh: BVH, p: np.ndarray) -> tuple[float, np.ndarray, int]:
    """Exact closest point on the mesh: branch-and-bound over the tree."""
    p = np.asarray(p, dtype=np.float64)
    x, y, z = float(p[0]), float(p[1]), float(p[2])
    nodes = bvh.nodes
    best_d2 = np.inf
    best_point = None
    best_tri = -1
    stack = [0]
    while stack:
        node = nodes[stack.pop()]
        if _box_distance2(node.bounds, x, y, z) >= best_d2:
            continue
        if node.tri_ids is not None:
            closest = _closest_on_triangles(p, bvh.triangles[node.tri_ids])
            d2 = ((closest - p[None, :]) ** 2).sum(axis=1)
            i = int(np.argmin(d2))
            if d2[i] < best_d2:
                best_d2 = float(d2[i])
                best_point = closest[i]
                best_tri = int(node.tri_ids[i])
            continue
        # Explore the nearer child first for tighter pruning.
        dl = _box_distance2(nodes[node.left].bounds, x, y, z)
        dr = _box_distance2(nodes[node.right].bounds, x, y, z)
        if dl <= dr:
            if dr < best_d2:
                stack.append(node.right)
            stack.append(node.left)
        else:
            if dl < best_d2:
                stack.append(node.left)
            stack.append(node.right)
    return float(np.sqrt(best_d2)), best_point, best_tri


def scan_to_mesh_distances(bvh: BVH, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return np.array([nearest_on_mesh(bvh, q)[0] for q in pts])


# ---------------------------------------------------------------------------
# Evaluation protocol

@dataclass
class ImageEvalRow:
    image_id: str
    n_points: int
    mean_mm: float
    median_mm: float
    std_mm: float
    failed: bool = False
    note: str = ""


@dataclass
class EvalReport:
    rows: list[ImageEvalRow]
    pooled: np.ndarray  # all per-point distances across non-failed images

    @property
    def n_failed(self) -> int:
        return sum(1 for r in self.rows if r.failed)

    @property
    def median_mm(self) -> float:
        return float(np.median(self.pooled)) if self.pooled.size else float("nan")

    @property
    def mean_mm(self) -> float:
        return float(self.pooled.mean()) if self.pooled.size else float("nan")

    @property
    def std_mm(self) -> float:
        return float(self.pooled.std()) if self.pooled.size else float("nan")

    def summary(self) -> dict:
        return {
            "n_images": len(self.rows),
            "n_failed": self.n_failed,
            "n_points": int(self.pooled.size),
            "median_mm": self.median_mm,
            "mean_mm": self.mean_mm,
            "std_mm": self.std_mm,
        }

    def to_csv(self) -> str:
        lines = ["image_id,n_points,mean_mm,median_mm,std_mm,failed,note"]
        for r in self.rows:
            lines.append(
                f"{r.image_id},{r.n_points},{r.mean_mm!r},{r.median_mm!r},"
                f"{r.std_mm!r},{int(r.failed)},{r.note}"
            )
        return "\n".join(lines) + "\n"


def _evaluate_one(args) -> tuple[ImageEvalRow, np.ndarray | None]:
    image_id, mesh, scan, lm_scan, landmark_indices, with_scale = args
    scan_pts = np.asarray(scan, dtype=np.float64)
    try:
        transform = umeyama_align(
            np.asarray(mesh.vertices, dtype=np.float64)[landmark_indices],
            np.asarray(lm_scan, dtype=np.float64),
            with_scale=with_scale,
        )
    except AlignmentError as e:
        row = ImageEvalRow(
            image_id=image_id, n_points=len(scan_pts),
            mean_mm=float("nan"), median_mm=float("nan"), std_mm=float("nan"),
            failed=True, note=str(e),
        )
        return row, None
    aligned = Mesh(vertices=transform.apply(mesh.vertices), triangles=mesh.triangles)
    bvh = build_bvh(aligned)
    distances = scan_to_mesh_distances(bvh, scan_pts)
    row = ImageEvalRow(
        image_id=image_id,
        n_points=len(distances),
        mean_mm=float(distances.mean()),
        median_mm=float(np.median(distances)),
        std_mm=float(distances.std()),
    )
    return row, distances


def evaluate(
    pred_meshes: list[Mesh],
    scans: list[np.ndarray],
    landmark_indices: np.ndarray,
    scan_landmarks: list[np.ndarray],
    with_scale: bool = True,
    image_ids: list[str] | None = None,
    jobs: int = 1,
) -> EvalReport:
    """Align each prediction to its scan and pool scan-to-mesh distances.

    ``landmark_indices`` selects the predicted meshes' landmark vertices;
    ``scan_landmarks`` gives the corresponding points per scan. Images
    whose alignment is degenerate are marked failed and excluded from the
    pooled statistics. Per-image work may fan out to ``jobs`` threads;
    results are merged in input order, so the report is identical for any
    worker count.
    """
    if not (len(pred_meshes) == len(scans) == len(scan_landmarks)):
        raise ValueError("pred_meshes, scans, and scan_landmarks must have equal lengths")
    ids = image_ids or [f"image{i:05d}" for i in range(len(pred_meshes))]
    landmark_indices = np.asarray(landmark_indices, dtype=np.int64)

    tasks = [
        (image_id, mesh, scan, lm_scan, landmark_indices, with_scale)
        for image_id, mesh, scan, lm_scan
        in zip(ids, pred_meshes, scans, scan_landmarks)
    ]
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_evaluate_one, tasks))
    else:
        results = [_evaluate_one(t) for t in tasks]

    rows = [row for row, _ in results]
    pooled = [d for _, d in results if d is not None]
    pooled_arr = np.concatenate(pooled) if pooled else np.empty(0)
    return EvalReport(rows=rows, pooled=pooled_arr)


def pick_landmark_indices(model, count: int = 8) -> np.ndarray:
    """Deterministic spread landmark vertices, preferring the face region.

    Farthest-point sampling over the face vertices (falling back to all
    vertices), seeded from the lowest face vertex index.
    """
    from .morphable import REGION_FACE

    verts = np.asarray(model.template_vertices, dtype=np.float64)
    face_ids = np.nonzero(model.region_labels == REGION_FACE)[0]
    if len(face_ids) < count:
        face_ids = np.arange(len(verts))
    chosen = [int(face_ids[0])]
    d_min = np.linalg.norm(verts[face_ids] - verts[chosen[0]], axis=1)
    while len(chosen) < count:
        nxt = int(face_ids[int(np.argmax(d_min))])
        chosen.append(nxt)
        d_min = np.minimum(d_min, np.linalg.norm(verts[face_ids] - verts[nxt], axis=1))
    return np.asarray(chosen, dtype=np.int64)
