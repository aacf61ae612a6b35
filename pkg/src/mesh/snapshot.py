"""ASCII mesh snapshots.

Frame format::

    nodes <n> elements <m>
    x y z            (n lines, meters, 9 significant digits)
    i0 i1 ... i7     (m lines)
"""

from pathlib import Path
from typing import Tuple

import numpy as np

from src.mesh.hex_mesh import HexMesh
from src.utils.errors import InvalidArgumentError


def format_snapshot(mesh: HexMesh, x: np.ndarray) -> str:
    """Render one frame of the mesh at positions ``x``."""
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    if x.shape[0] != mesh.num_nodes:
        raise InvalidArgumentError("Position vector does not match the mesh")
    lines = [f"nodes {mesh.num_nodes} elements {mesh.num_elements}"]
    lines.extend(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}" for p in x)
    lines.extend(" ".join(str(int(i)) for i in element) for element in mesh.elements)
    return "\n".join(lines) + "\n"


def write_snapshot(path: str | Path, mesh: HexMesh, x: np.ndarray) -> Path:
    """Write one frame to ``path`` and return the path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_snapshot(mesh, x), encoding="utf-8")
    return path


def read_snapshot(path: str | Path) -> Tuple[np.ndarray, np.ndarray]:
    """Read a frame back as (positions (n, 3), elements (m, 8))."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split()
    if len(header) != 4 or header[0] != "nodes" or header[2] != "elements":
        raise InvalidArgumentError(f"Malformed snapshot header: {lines[0]!r}")
    n, m = int(header[1]), int(header[3])
    positions = np.array([[float(v) for v in line.split()] for line in lines[1:1 + n]])
    elements = np.array([[int(v) for v in line.split()] for line in lines[1 + n:1 + n + m]])
    return positions.reshape(n, 3), elements.reshape(m, 8)
