"""Binary little-endian PLY serialization of Gaussian scenes.

Per-particle float32 properties, in the de-facto splatting order: x, y, z,
scale_0..2 (log), rot_0..3 (w, x, y, z), opacity (logit), f_dc_0..2,
f_rest_0..44 (per-channel blocks of 15 higher-order coefficients), plus a
trailing uchar ``label`` (0 unmasked, 1 masked). Files without the label
property load as all-Unmasked."""

from __future__ import annotations

import numpy as np

from .scene import GaussianScene, Label

N_REST = 45  # 3 channels x 15 non-DC coefficients

FLOAT_PROPS = (
    ["x", "y", "z"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
    + ["opacity"]
    + [f"f_dc_{i}" for i in range(3)]
    + [f"f_rest_{i}" for i in range(N_REST)]
)


class PlyParseError(ValueError):
    """Malformed PLY header or body; carries the offending header line."""

    def __init__(self, message: str, line: str | None = None):
        self.line = line
        if line is not None:
            message = f"{message} (offending line: {line!r})"
        super().__init__(message)


def _header(n: int, with_label: bool = True) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property float {name}" for name in FLOAT_PROPS]
    if with_label:
        lines.append("property uchar label")
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def save_scene(path, scene: GaussianScene) -> None:
    n = len(scene)
    float_part = np.empty((n, len(FLOAT_PROPS)), dtype="<f4")
    float_part[:, 0:3] = scene.positions
    float_part[:, 3:6] = scene.log_scales
    float_part[:, 6:10] = scene.rotations
    float_part[:, 10] = scene.opacity_logits
    float_part[:, 11:14] = scene.sh_coeffs[:, :, 0]
    float_part[:, 14:59] = scene.sh_coeffs[:, :, 1:].reshape(n, N_REST)
    dtype = np.dtype(
        [(name, "<f4") for name in FLOAT_PROPS] + [("label", "u1")]
    )
    rows = np.empty(n, dtype=dtype)
    for i, name in enumerate(FLOAT_PROPS):
        rows[name] = float_part[:, i]
    rows["label"] = scene.labels
    with open(path, "wb") as fh:
        fh.write(_header(n))
        fh.write(rows.tobytes())


def load_scene(path) -> GaussianScene:
    with open(path, "rb") as fh:
        data = fh.read()
    props, n, body_offset = _parse_header(data)
    names = [name for name, _ in props]
    missing = [p for p in FLOAT_PROPS if p not in names]
    if missing:
        raise PlyParseError(f"missing required properties: {missing[:3]}...")
    dtype = np.dtype([(name, "u1" if kind == "uchar" else "<f4") for name, kind in props])
    expected = body_offset + n * dtype.itemsize
    if len(data) < expected:
        raise PlyParseError(
            f"body truncated: expected {expected - body_offset} bytes, "
            f"got {len(data) - body_offset}"
        )
    rows = np.frombuffer(data, dtype=dtype, count=n, offset=body_offset)
    cols = {name: rows[name].astype(np.float64) for name, kind in props if kind == "float"}
    sh = np.zeros((n, 3, 16))
    sh[:, :, 0] = np.stack([cols[f"f_dc_{i}"] for i in range(3)], axis=-1)
    rest = np.stack([cols[f"f_rest_{i}"] for i in range(N_REST)], axis=-1)
    sh[:, :, 1:] = rest.reshape(n, 3, 15)
    if "label" in names:
        labels = rows["label"].astype(np.uint8).copy()
    else:
        labels = np.full(n, int(Label.UNMASKED), dtype=np.uint8)
    return GaussianScene(
        positions=np.stack([cols["x"], cols["y"], cols["z"]], axis=-1),
        log_scales=np.stack([cols[f"scale_{i}"] for i in range(3)], axis=-1),
        rotations=np.stack([cols[f"rot_{i}"] for i in range(4)], axis=-1),
        opacity_logits=cols["opacity"],
        sh_coeffs=sh,
        labels=labels,
    )


def _parse_header(data: bytes):
    end = data.find(b"end_header\n")
    if end < 0:
        raise PlyParseError("no end_header line found")
    body_offset = end + len(b"end_header\n")
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyParseError("file does not start with 'ply'", lines[0] if lines else "")
    n = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line in lines[1:]:
        stripped = line.strip()
        if not stripped or stripped.startswith("comment"):
            continue
        parts = stripped.split()
        if parts[0] == "format":
            if parts[1:] != ["binary_little_endian", "1.0"]:
                raise PlyParseError("unsupported format", line)
        elif parts[0] == "element":
            if len(parts) != 3:
                raise PlyParseError("malformed element line", line)
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                try:
                    n = int(parts[2])
                except ValueError:
                    raise PlyParseError("vertex count is not an integer", line)
        elif parts[0] == "property":
            if not in_vertex:
                continue
            if len(parts) != 3 or parts[1] not in ("float", "uchar"):
                raise PlyParseError("unsupported property", line)
            props.append((parts[2], parts[1]))
        else:
            raise PlyParseError("unrecognized header keyword", line)
    if n is None:
        raise PlyParseError("no vertex element declared")
    return props, n, body_offset
