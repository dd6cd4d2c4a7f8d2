"""
Plain-text mesh files: OBJ for surfaces (quads and triangles, 1-based) and
the `.tet` format for volumes (0-based):

    tet <nv> <nt>
    v x y z
    t i j k l
"""
from typing import Iterable, Tuple

import numpy as np
import trimesh

from .logger import logger


def _format_vertex(prefix: str, xyz) -> str:
    return f"{prefix} " + " ".join(f"{float(c):.9g}" for c in xyz)


def obj_lines(vertices: np.ndarray, *face_sets: np.ndarray) -> Iterable[str]:
    for v in np.asarray(vertices, dtype=float):
        yield _format_vertex("v", v)
    for faces in face_sets:
        for face in np.asarray(faces, dtype=np.int64):
            yield "f " + " ".join(str(int(i) + 1) for i in face)


def write_obj(path: str, vertices: np.ndarray, *face_sets: np.ndarray) -> None:
    """Each face set is an (F, k) array; quads and triangles may be mixed across sets"""
    with open(path, "w") as f:
        for line in obj_lines(vertices, *face_sets):
            f.write(line + "\n")
    logger.debug(f"Wrote {len(vertices)} vertices to {path}")


def write_tet(path: str, vertices: np.ndarray, tets: np.ndarray) -> None:
    vertices = np.asarray(vertices, dtype=float)
    tets = np.asarray(tets, dtype=np.int64)
    with open(path, "w") as f:
        f.write(f"tet {len(vertices)} {len(tets)}\n")
        for v in vertices:
            f.write(_format_vertex("v", v) + "\n")
        for t in tets:
            f.write("t " + " ".join(str(int(i)) for i in t) + "\n")
    logger.debug(f"Wrote {len(tets)} tetrahedra to {path}")


def read_tet(path: str) -> Tuple[np.ndarray, np.ndarray]:
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 3 or header[0] != "tet":
            raise ValueError(f"{path} is not a tet file")
        vertices, tets = [], []
        for line in f:
            fields = line.split()
            if fields and fields[0] == "v":
                vertices.append([float(c) for c in fields[1:4]])
            elif fields and fields[0] == "t":
                tets.append([int(i) for i in fields[1:5]])
    if len(vertices) != int(header[1]) or len(tets) != int(header[2]):
        raise ValueError(f"{path} does not match its header counts")
    return np.array(vertices, dtype=float).reshape(-1, 3), np.array(tets, dtype=np.int64).reshape(-1, 4)


def read_mesh(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """Triangles of a mesh file as stored, without merging or normalizing"""
    mesh = trimesh.load(path, force="mesh", process=False)
    if not isinstance(mesh, trimesh.Trimesh):
        raise ValueError(f"{path} holds no triangle mesh")
    return np.asarray(mesh.vertices, dtype=float), np.asarray(mesh.faces, dtype=np.int64)
