"""Linear 3D morphable head model: container I/O, decoding, shape sampling.

A model is a template mesh plus linear blendshape bases for shape,
expression, and pose correctives, together with a joint regressor and
skinning weights. Decoding a coefficient vector produces a mesh:

    vertices = skin(template + B_shape(beta) + B_pose(theta) + B_expr(psi),
                    joints(beta), theta, skin_weights)

Pose correctives are linear in the flattened per-joint (R - I) matrices,
so they vanish identically at zero pose. Joint locations are regressed
from the shape-displaced template, making them a function of beta.

The real licensed head model is not shipped; ``make_toy_model`` builds a
small self-consistent stand-in with the same structure for tests and
desk-scale runs, and ``load_model`` reads the binary container described
in ``save_model``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull

MAGIC = b"M3DM"
FORMAT_VERSION = 1

# Region label codes (uint8 in the container).
REGION_FACE = 0
REGION_BACK_OF_HEAD = 1
REGION_EYES = 2
REGION_EARS = 3
REGION_NAMES = {
    REGION_FACE: "face",
    REGION_BACK_OF_HEAD: "back_of_head",
    REGION_EYES: "eyes",
    REGION_EARS: "ears",
}


class ModelFormatError(ValueError):
    """Container is structurally unreadable (bad magic, header, or size)."""


class ModelValidationError(ValueError):
    """Container parsed but an invariant does not hold."""


@dataclass
class MorphableModel:
    template_vertices: np.ndarray  # [N, 3] float32
    triangles: np.ndarray          # [F, 3] uint32
    shape_basis: np.ndarray        # [n_shape, N, 3] float32
    expression_basis: np.ndarray   # [n_expression, N, 3] float32
    pose_basis: np.ndarray         # [9K, N, 3] float32
    joint_regressor: np.ndarray    # [K, N] float32
    skin_weights: np.ndarray       # [N, K] float32
    region_labels: np.ndarray      # [N] uint8
    parents: np.ndarray            # [K] int, -1 = attached to the global root
    unit_scale_mm: float = 1.0     # millimetres per model unit

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.joint_regressor.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[0]

    @property
    def n_expression(self) -> int:
        return self.expression_basis.shape[0]

    @property
    def n_pose_dims(self) -> int:
        """Length of theta: global rotation plus one rotation per joint."""
        return 3 + 3 * self.n_joints


@dataclass
class Coefficients:
    beta: np.ndarray   # [n_shape]
    theta: np.ndarray  # [3 + 3K] axis-angle: global, then per joint
    psi: np.ndarray    # [n_expression]


@dataclass
class Mesh:
    vertices: np.ndarray   # [N, 3]
    triangles: np.ndarray  # [F, 3], shared with the model


def zero_coefficients(model: MorphableModel) -> Coefficients:
    return Coefficients(
        beta=np.zeros(model.n_shape),
        theta=np.zeros(model.n_pose_dims),
        psi=np.zeros(model.n_expression),
    )


def validate_model(model: MorphableModel) -> None:
    """Raise ModelValidationError on the first violated invariant."""
    n, k = model.n_vertices, model.n_joints
    checks = [
        ("template_vertices", model.template_vertices, (n, 3)),
        ("triangles", model.triangles, (model.triangles.shape[0], 3)),
        ("shape_basis", model.shape_basis, (model.n_shape, n, 3)),
        ("expression_basis", model.expression_basis, (model.n_expression, n, 3)),
        ("pose_basis", model.pose_basis, (9 * k, n, 3)),
        ("joint_regressor", model.joint_regressor, (k, n)),
        ("skin_weights", model.skin_weights, (n, k)),
        ("region_labels", model.region_labels, (n,)),
    ]
    for name, arr, shape in checks:
        if arr.shape != shape:
            raise ModelValidationError(
                f"{name} has shape {arr.shape}, expected {shape}"
            )
        if np.issubdtype(arr.dtype, np.floating) and not np.all(np.isfinite(arr)):
            raise ModelValidationError(f"non-finite values in {name}")

    if model.parents.shape != (k,):
        raise ModelValidationError(
            f"parents has shape {model.parents.shape}, expected ({k},)"
        )
    for j, p in enumerate(model.parents):
        if p != -1 and not (0 <= p < k):
            raise ModelValidationError(f"joint {j} has invalid parent {p}")
        if p >= j:
            # Parents must precede children so one forward pass chains transforms.
            raise ModelValidationError(f"joint {j} has non-topological parent {p}")

    if model.triangles.size and model.triangles.max() >= n:
        bad = int(np.argmax(model.triangles.max(axis=1) >= n))
        raise ModelValidationError(f"triangle {bad} references vertex >= {n}")

    if np.any(model.skin_weights < 0):
        v = int(np.argwhere(model.skin_weights < 0)[0][0])
        raise ModelValidationError(f"skin weights for vertex {v} are negative")
    row_sums = model.skin_weights.sum(axis=1)
    bad_rows = np.abs(row_sums - 1.0) > 1e-6
    if np.any(bad_rows):
        v = int(np.argmax(bad_rows))
        raise ModelValidationError(
            f"skin weights row {v} sums to {row_sums[v]:.6g}, expected 1"
        )
    reg_sums = model.joint_regressor.sum(axis=1)
    bad_reg = np.abs(reg_sums - 1.0) > 1e-6
    if np.any(bad_reg):
        j = int(np.argmax(bad_reg))
        raise ModelValidationError(
            f"joint regressor row {j} sums to {reg_sums[j]:.6g}, expected 1"
        )
    if model.region_labels.max(initial=0) > REGION_EARS:
        raise ModelValidationError("region labels outside the known enum")


def _check_coefficients(model: MorphableModel, c: Coefficients) -> None:
    if c.beta.shape != (model.n_shape,):
        raise ValueError(f"beta length {c.beta.shape} != ({model.n_shape},)")
    if c.theta.shape != (model.n_pose_dims,):
        raise ValueError(f"theta length {c.theta.shape} != ({model.n_pose_dims},)")
    if c.psi.shape != (model.n_expression,):
        raise ValueError(f"psi length {c.psi.shape} != ({model.n_expression},)")
    for name, arr in (("beta", c.beta), ("theta", c.theta), ("psi", c.psi)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in {name}")


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """3x3 rotation from an axis-angle vector; exact identity at zero."""
    v = np.asarray(axis_angle, dtype=np.float64)
    angle = float(np.linalg.norm(v))
    if angle == 0.0:
        return np.eye(3)
    axis = v / angle
    x, y, z = axis
    khat = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return (
        np.cos(angle) * np.eye(3)
        + np.sin(angle) * khat
        + (1.0 - np.cos(angle)) * np.outer(axis, axis)
    )


def pose_feature(model: MorphableModel, theta: np.ndarray) -> np.ndarray:
    """Flattened (R_j - I) over the K per-joint rotations, length 9K.

    The global rotation theta[:3] is excluded: a rigid move of the whole
    head must not deform it.
    """
    k = model.n_joints
    feat = np.empty(9 * k)
    for j in range(k):
        rot = rodrigues(theta[3 + 3 * j: 6 + 3 * j])
        feat[9 * j: 9 * j + 9] = (rot - np.eye(3)).ravel()
    return feat


def _joint_world_transforms(
    model: MorphableModel, joints: np.ndarray, theta: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """World rotation and position offset per joint.

    Returns (rot[K,3,3], delta[K,3]) where the posed position of joint j
    is joints[j] + delta[j]. The global rotation pivots at the joints
    whose parent is -1, so delta and (rot - I) are exactly zero whenever
    all rotations are identity; decoding at zero pose then reproduces the
    blendshaped template bit for bit.
    """
    k = model.n_joints
    global_rot = rodrigues(theta[:3])
    rot = np.empty((k, 3, 3))
    delta = np.zeros((k, 3))
    for j in range(k):
        local = rodrigues(theta[3 + 3 * j: 6 + 3 * j])
        p = int(model.parents[j])
        if p < 0:
            rot[j] = global_rot @ local
            # delta stays zero: a root joint does not translate.
        else:
            rot[j] = rot[p] @ local
            delta[j] = delta[p] + (rot[p] - np.eye(3)) @ (joints[j] - joints[p])
    return rot, delta


def decode(model: MorphableModel, c: Coefficients) -> Mesh:
    """Decode coefficients to a mesh (blendshapes, then skinning)."""
    _check_coefficients(model, c)
    beta = np.asarray(c.beta, dtype=np.float64)
    theta = np.asarray(c.theta, dtype=np.float64)
    psi = np.asarray(c.psi, dtype=np.float64)

    template = model.template_vertices.astype(np.float64)
    shaped = template + np.tensordot(beta, model.shape_basis.astype(np.float64), axes=1)
    posed = (
        shaped
        + np.tensordot(pose_feature(model, theta), model.pose_basis.astype(np.float64), axes=1)
        + np.tensordot(psi, model.expression_basis.astype(np.float64), axes=1)
    )

    joints = model.joint_regressor.astype(np.float64) @ shaped
    rot, delta = _joint_world_transforms(model, joints, theta)

    # Blend per-joint displacements rather than positions: weights are
    # renormalized in float64 and a zero pose contributes exactly nothing.
    weights = model.skin_weights.astype(np.float64)
    weights = weights / weights.sum(axis=1, keepdims=True)
    out = posed.copy()
    eye = np.eye(3)
    for j in range(model.n_joints):
        moved = (posed - joints[j]) @ (rot[j] - eye).T + delta[j]
        out += weights[:, j:j + 1] * moved
    return Mesh(vertices=out, triangles=model.triangles)


def decode_shape(model: MorphableModel, beta: np.ndarray) -> np.ndarray:
    """Vertices at zero pose and expression: template + B_shape(beta).

    Equivalent to ``decode`` with theta = psi = 0 (skinning is the
    identity there); used on the training hot path where only beta varies.
    """
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (model.n_shape,):
        raise ValueError(f"beta length {beta.shape} != ({model.n_shape},)")
    return model.template_vertices.astype(np.float64) + np.tensordot(
        beta, model.shape_basis.astype(np.float64), axes=1
    )


def sample_shape(
    rng: np.random.Generator, sigma: float, n: int, model: MorphableModel
) -> list[Coefficients]:
    """Draw n coefficient sets: beta ~ iid Gaussian(0, sigma^2), pose and
    expression zero. The caller owns the generator."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    out = []
    for _ in range(n):
        out.append(
            Coefficients(
                beta=rng.normal(0.0, sigma, size=model.n_shape),
                theta=np.zeros(model.n_pose_dims),
                psi=np.zeros(model.n_expression),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Toy model generation

def _fibonacci_sphere(n: int) -> np.ndarray:
    """n well-spread unit vectors (golden-angle spiral)."""
    i = np.arange(n, dtype=np.float64)
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    ang = 2.0 * np.pi * i / phi
    return np.stack([r * np.cos(ang), z, r * np.sin(ang)], axis=1)


def _smooth_fields(fields: np.ndarray, triangles: np.ndarray, rounds: int = 5) -> np.ndarray:
    """Average each vertex with its mesh neighbours a few times."""
    n = fields.shape[1]
    neighbor_sum = np.zeros((n, n), dtype=np.float64)
    for a, b, c in triangles:
        for u, v in ((a, b), (b, c), (c, a)):
            neighbor_sum[u, v] = 1.0
            neighbor_sum[v, u] = 1.0
    degree = neighbor_sum.sum(axis=1, keepdims=True)
    out = fields
    for _ in range(rounds):
        avg = np.einsum("uv,fvc->fuc", neighbor_sum, out) / degree[None, :, :]
        out = 0.5 * out + 0.5 * avg
    return out


def _orthonormal_fields(
    rng: np.random.Generator, count: int, triangles: np.ndarray, n_vertices: int
) -> np.ndarray:
    """Smooth random displacement fields with orthonormal flattenings."""
    raw = rng.standard_normal((count, n_vertices, 3))
    smooth = _smooth_fields(raw, triangles)
    flat = smooth.reshape(count, -1)
    q, r = np.linalg.qr(flat.T)              # columns span the fields
    q = q * np.sign(np.diag(r))[None, :]     # deterministic sign convention
    return q.T.reshape(count, n_vertices, 3)


def _nearest_indices(points: np.ndarray, center: np.ndarray, k: int) -> np.ndarray:
    d = np.linalg.norm(points - center[None, :], axis=1)
    return np.argsort(d)[:k]


def make_toy_model(
    seed: int,
    n_vertices: int = 500,
    n_shape: int = 20,
    n_expr: int = 10,
    radius: float = 70.0,
) -> MorphableModel:
    """Small self-consistent head stand-in, deterministic in seed.

    A closed ellipsoid (semi-axes 0.8/1.0/0.85 of ``radius``; +z is the
    face direction, +y up), smooth orthogonalized blendshape bases scaled
    so shapes sampled at sigma=0.8 stay within ~15% of the head radius,
    four joints stacked along the vertical axis, and procedural region
    labels: front third is face, rear is back-of-head, with small eye and
    ear patches.
    """
    if n_vertices < 12:
        raise ValueError("n_vertices must be at least 12")
    rng = np.random.default_rng(seed)

    semi = np.array([0.80, 1.00, 0.85]) * radius
    verts = (_fibonacci_sphere(n_vertices) * semi[None, :]).astype(np.float64)
    hull = ConvexHull(verts)
    triangles = np.ascontiguousarray(hull.simplices.astype(np.uint32))
    if len(np.unique(triangles)) != n_vertices:
        raise RuntimeError("ellipsoid hull dropped vertices")  # pragma: no cover

    k_joints = 4
    fields = _orthonormal_fields(rng, n_shape + n_expr, triangles, n_vertices)
    basis_scale = 8.0  # power of two: exact in float32, ~2% radius RMS at sigma 0.8
    shape_basis = (fields[:n_shape] * basis_scale).astype(np.float32)
    expr_basis = (fields[n_shape:] * basis_scale).astype(np.float32)
    pose_fields = _smooth_fields(
        rng.standard_normal((9 * k_joints, n_vertices, 3)), triangles
    )
    pose_fields /= np.linalg.norm(pose_fields.reshape(9 * k_joints, -1), axis=1)[:, None, None]
    pose_basis = pose_fields.astype(np.float32)

    # Joints on the vertical axis: regressor rows are normalized Gaussian
    # weights of vertex height around four target heights.
    heights = np.array([-0.55, -0.15, 0.20, 0.50]) * semi[1]
    y = verts[:, 1]
    reg = np.exp(-((y[None, :] - heights[:, None]) ** 2) / (2 * (0.25 * semi[1]) ** 2))
    reg = reg / reg.sum(axis=1, keepdims=True)
    joint_regressor = reg.astype(np.float32)
    # Re-normalize after the float32 cast so row sums hold to 1e-6 exactly.
    joint_regressor /= joint_regressor.sum(axis=1, keepdims=True)

    sw = np.exp(-((y[:, None] - heights[None, :]) ** 2) / (2 * (0.35 * semi[1]) ** 2))
    sw = sw / sw.sum(axis=1, keepdims=True)
    skin_weights = sw.astype(np.float32)
    skin_weights /= skin_weights.sum(axis=1, keepdims=True)

    labels = np.full(n_vertices, REGION_BACK_OF_HEAD, dtype=np.uint8)
    labels[verts[:, 2] > 0.30 * semi[2]] = REGION_FACE
    patch = max(1, n_vertices // 100)
    for sx in (-1.0, 1.0):
        eye_center = np.array([sx * 0.35 * semi[0], 0.25 * semi[1], 0.90 * semi[2]])
        labels[_nearest_indices(verts, eye_center, patch)] = REGION_EYES
        ear_center = np.array([sx * semi[0], 0.0, 0.0])
        labels[_nearest_indices(verts, ear_center, patch)] = REGION_EARS
    if len(np.unique(labels)) != 4:
        raise RuntimeError("region labelling failed to produce all regions")  # pragma: no cover

    model = MorphableModel(
        template_vertices=verts.astype(np.float32),
        triangles=triangles,
        shape_basis=shape_basis,
        expression_basis=expr_basis,
        pose_basis=pose_basis,
        joint_regressor=joint_regressor,
        skin_weights=skin_weights,
        region_labels=labels,
        parents=np.array([-1, 0, 1, 1], dtype=np.int64),
        unit_scale_mm=1.0,
    )
    validate_model(model)
    return model


# ---------------------------------------------------------------------------
# Container I/O
#
# Layout: b"M3DM" | uint32 header length | UTF-8 JSON header | packed arrays.
# The header carries every dimension, so all byte offsets follow from it:
# template (N*3 f32) | triangles (F*3 u32) | shape basis (S*N*3 f32) |
# expression basis (E*N*3 f32) | pose basis (9K*N*3 f32) |
# joint regressor (K*N f32) | skin weights (N*K f32) | region labels (N u8).
# All multi-byte values are little-endian.

def _array_specs(n: int, k: int, n_shape: int, n_expr: int, n_tri: int):
    return [
        ("template_vertices", "<f4", (n, 3)),
        ("triangles", "<u4", (n_tri, 3)),
        ("shape_basis", "<f4", (n_shape, n, 3)),
        ("expression_basis", "<f4", (n_expr, n, 3)),
        ("pose_basis", "<f4", (9 * k, n, 3)),
        ("joint_regressor", "<f4", (k, n)),
        ("skin_weights", "<f4", (n, k)),
        ("region_labels", "u1", (n,)),
    ]


def save_model(model: MorphableModel, path: str) -> None:
    """Write the binary container; round-trips bit-exactly through load_model."""
    validate_model(model)
    header = {
        "version": FORMAT_VERSION,
        "n_vertices": model.n_vertices,
        "n_joints": model.n_joints,
        "n_shape": model.n_shape,
        "n_expression": model.n_expression,
        "n_triangles": int(model.triangles.shape[0]),
        "parents": [int(p) for p in model.parents],
        "unit_scale_mm": float(model.unit_scale_mm),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for name, dtype, shape in _array_specs(
        model.n_vertices, model.n_joints, model.n_shape,
        model.n_expression, header["n_triangles"],
    ):
        arr = np.ascontiguousarray(getattr(model, name), dtype=np.dtype(dtype))
        if arr.shape != shape:
            raise ModelValidationError(f"{name} has shape {arr.shape}, expected {shape}")
        buf.write(arr.tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_model(path: str) -> MorphableModel:
    """Read and validate a model container."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ModelFormatError("malformed header: bad magic bytes")
    if len(data) < 8:
        raise ModelFormatError("unexpected end of data")
    (header_len,) = struct.unpack_from("<I", data, 4)
    header_end = 8 + header_len
    if len(data) < header_end:
        raise ModelFormatError("unexpected end of data")
    try:
        header = json.loads(data[8:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"malformed header: {e}") from e
    try:
        version = header["version"]
        n = int(header["n_vertices"])
        k = int(header["n_joints"])
        n_shape = int(header["n_shape"])
        n_expr = int(header["n_expression"])
        n_tri = int(header["n_triangles"])
        parents = np.asarray(header["parents"], dtype=np.int64)
        unit_scale = float(header.get("unit_scale_mm", 1.0))
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFormatError(f"malformed header: {e}") from e
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")

    arrays = {}
    offset = header_end
    for name, dtype, shape in _array_specs(n, k, n_shape, n_expr, n_tri):
        dt = np.dtype(dtype)
        nbytes = int(np.prod(shape)) * dt.itemsize
        if offset + nbytes > len(data):
            raise ModelFormatError("unexpected end of data")
        arrays[name] = np.frombuffer(data, dtype=dt, count=int(np.prod(shape)),
                                     offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise ModelFormatError(f"{len(data) - offset} trailing bytes after arrays")

    model = MorphableModel(parents=parents, unit_scale_mm=unit_scale, **arrays)
    validate_model(model)
    return model
