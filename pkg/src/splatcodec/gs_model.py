"""Gaussian cloud container and the binary PLY checkpoint format.

The PLY layout is the one written by the reference 3DGS trainer::

    x y z nx ny nz f_dc_0..2 f_rest_0..D-1 opacity scale_0..2 rot_0..3

all ``float`` (float32, little endian).  Normals are written as zeros and
ignored on load; everything else is mapped by property name.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SH_C0 = 0.28209479177387814


class PlyError(ValueError):
    """Raised for any malformed or unsupported PLY input."""

    def __init__(self, message, prop=None):
        super().__init__(message)
        self.prop = prop


def rest_dim(degree):
    return 3 * (degree + 1) ** 2 - 3


def _degree_from_rest(d):
    for f in range(4):
        if rest_dim(f) == d:
            return f
    return None


def _readonly(a, dtype=np.float32):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GaussianCloud:
    positions: np.ndarray       # (N, 3)
    quaternions: np.ndarray     # (N, 4) w, x, y, z
    log_scales: np.ndarray      # (N, 3)
    opacity_logits: np.ndarray  # (N, 1)
    sh_dc: np.ndarray           # (N, 3)
    sh_rest: np.ndarray         # (N, D)
    sh_degree: int

    def __post_init__(self):
        fields = {
            "positions": 3,
            "quaternions": 4,
            "log_scales": 3,
            "opacity_logits": 1,
            "sh_dc": 3,
            "sh_rest": rest_dim(self.sh_degree) if 0 <= self.sh_degree <= 3 else -1,
        }
        if not 0 <= self.sh_degree <= 3:
            raise ValueError(f"sh_degree must be in [0, 3], got {self.sh_degree}")
        n = None
        for name, width in fields.items():
            arr = np.asarray(getattr(self, name))
            if name == "opacity_logits" and arr.ndim == 1:
                arr = arr[:, None]
            if arr.ndim != 2 or arr.shape[1] != width:
                raise ValueError(f"{name} must have shape (N, {width}), got {arr.shape}")
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise ValueError(f"{name} has {arr.shape[0]} rows, expected {n}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, _readonly(arr))
        if n < 1:
            raise ValueError("a cloud needs at least one Gaussian")

    def __len__(self):
        return self.positions.shape[0]

    @property
    def rest_dim(self):
        return self.sh_rest.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return GaussianCloud(
            positions=self.positions[idx],
            quaternions=self.quaternions[idx],
            log_scales=self.log_scales[idx],
            opacity_logits=self.opacity_logits[idx],
            sh_dc=self.sh_dc[idx],
            sh_rest=self.sh_rest[idx],
            sh_degree=self.sh_degree,
        )

    # vectorised activations, used by the renderer and importance scoring
    def scales(self):
        return np.exp(self.log_scales.astype(np.float64))

    def opacities(self):
        return 1.0 / (1.0 + np.exp(-self.opacity_logits[:, 0].astype(np.float64)))

    def unit_quaternions(self):
        q = self.quaternions.astype(np.float64)
        norm = np.linalg.norm(q, axis=1, keepdims=True)
        norm[norm == 0] = 1.0
        return q / norm

    def base_colors(self):
        return np.clip(SH_C0 * self.sh_dc.astype(np.float64) + 0.5, 0.0, None)


@dataclass(frozen=True)
class ActivatedGaussian:
    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    sh_dc: np.ndarray
    sh_rest: np.ndarray


def activate(cloud, index):
    if not 0 <= index < len(cloud):
        raise IndexError(f"index {index} out of range for cloud of size {len(cloud)}")
    q = cloud.quaternions[index].astype(np.float64)
    norm = np.linalg.norm(q)
    if norm == 0:
        raise ValueError(f"zero quaternion at index {index}")
    logit = float(cloud.opacity_logits[index, 0])
    return ActivatedGaussian(
        position=cloud.positions[index].astype(np.float64),
        rotation=q / norm,
        scale=np.exp(cloud.log_scales[index].astype(np.float64)),
        opacity=1.0 / (1.0 + np.exp(-logit)),
        sh_dc=cloud.sh_dc[index].astype(np.float64),
        sh_rest=cloud.sh_rest[index].astype(np.float64),
    )


def property_names(degree, normals=True):
    names = ["x", "y", "z"]
    if normals:
        names += ["nx", "ny", "nz"]
    names += [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(rest_dim(degree))]
    names += ["opacity"]
    names += [f"scale_{i}" for i in range(3)]
    names += [f"rot_{i}" for i in range(4)]
    return names


def save_ply(cloud):
    names = property_names(cloud.sh_degree)
    n = len(cloud)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header += ["end_header"]
    data = np.concatenate(
        [
            cloud.positions,
            np.zeros((n, 3), np.float32),
            cloud.sh_dc,
            cloud.sh_rest,
            cloud.opacity_logits,
            cloud.log_scales,
            cloud.quaternions,
        ],
        axis=1,
    ).astype("<f4")
    return ("\n".join(header) + "\n").encode("ascii") + data.tobytes()


def _parse_header(buf):
    end = buf.find(b"end_header")
    if not buf.startswith(b"ply") or end < 0:
        raise PlyError("malformed header: missing 'ply' magic or 'end_header'")
    stop = buf.find(b"\n", end)
    if stop < 0:
        raise PlyError("malformed header: no newline after end_header")
    try:
        lines = buf[:end].decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise PlyError("malformed header: non-ascii bytes") from exc
    fmt = None
    count = None
    props = []
    seen_vertex = False
    for raw in lines[1:]:
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) != 3:
                raise PlyError(f"malformed header line: {raw!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or tok[1] != "vertex" or seen_vertex:
                raise PlyError(f"unsupported element: {raw!r} (only one vertex element allowed)")
            try:
                count = int(tok[2])
            except ValueError as exc:
                raise PlyError(f"malformed vertex count: {tok[2]!r}") from exc
            if count < 0:
                raise PlyError(f"malformed vertex count: {count}")
            seen_vertex = True
        elif tok[0] == "property":
            if not seen_vertex:
                raise PlyError(f"property before element declaration: {raw!r}")
            if len(tok) != 3:
                raise PlyError(f"unsupported property declaration: {raw!r}", tok[-1])
            if tok[1] not in ("float", "float32"):
                raise PlyError(f"property {tok[2]} has type {tok[1]}, expected float", tok[2])
            if tok[2] in props:
                raise PlyError(f"duplicate property {tok[2]}", tok[2])
            props.append(tok[2])
        else:
            raise PlyError(f"malformed header line: {raw!r}")
    if fmt is None:
        raise PlyError("malformed header: missing format line")
    if fmt != "binary_little_endian":
        raise PlyError(f"unsupported PLY format {fmt!r}; only binary_little_endian is accepted")
    if count is None:
        raise PlyError("malformed header: missing 'element vertex'")
    return count, props, stop + 1


def load_ply(buf):
    buf = bytes(buf)
    count, props, offset = _parse_header(buf)
    n_rest = sum(1 for p in props if p.startswith("f_rest_"))
    degree = _degree_from_rest(n_rest)
    if degree is None:
        # name the first gap in the smallest degree that could hold n_rest
        target = next((rest_dim(f) for f in range(4) if rest_dim(f) >= n_rest), rest_dim(3))
        for i in range(target):
            if f"f_rest_{i}" not in props:
                raise PlyError(f"missing property f_rest_{i}", f"f_rest_{i}")
        extra = next(
            (p for p in props if p.startswith("f_rest_") and not (p[7:].isdigit() and int(p[7:]) < target)),
            None,
        )
        if extra is None:
            raise PlyError(f"{n_rest} f_rest_* properties do not match any SH degree")
        raise PlyError(f"unexpected property {extra}", extra)
    required = property_names(degree, normals=False)
    optional = {"nx", "ny", "nz"}
    for name in required:
        if name not in props:
            raise PlyError(f"missing property {name}", name)
    for name in props:
        if name not in required and name not in optional:
            raise PlyError(f"unexpected property {name}", name)
    n_props = len(props)
    expected = count * n_props * 4
    payload = len(buf) - offset
    if payload != expected:
        raise PlyError(
            f"element count mismatch: header declares {count} vertices x {n_props} properties "
            f"({expected} bytes) but payload holds {payload} bytes"
        )
    if count == 0:
        raise PlyError("element count mismatch: a cloud needs at least one vertex")
    table = np.frombuffer(buf, dtype="<f4", count=count * n_props, offset=offset).reshape(count, n_props)
    col = {name: i for i, name in enumerate(props)}
    bad = ~np.isfinite(table).all(axis=0)
    if bad.any():
        name = props[int(np.flatnonzero(bad)[0])]
        raise PlyError(f"non-finite value in property {name}", name)

    def take(names):
        return table[:, [col[n] for n in names]].astype(np.float32)

    return GaussianCloud(
        positions=take(["x", "y", "z"]),
        quaternions=take([f"rot_{i}" for i in range(4)]),
        log_scales=take([f"scale_{i}" for i in range(3)]),
        opacity_logits=take(["opacity"]),
        sh_dc=take([f"f_dc_{i}" for i in range(3)]),
        sh_rest=take([f"f_rest_{i}" for i in range(rest_dim(degree))]),
        sh_degree=degree,
    )


def read_ply(path):
    with open(path, "rb") as fh:
        return load_ply(fh.read())


def write_ply(path, cloud):
    with open(path, "wb") as fh:
        fh.write(save_ply(cloud))
