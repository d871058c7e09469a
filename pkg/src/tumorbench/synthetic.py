"""Synthetic MRI-like phantoms written in the Figshare record layout.

Used for tests, demos and desk-scale smoke training when the real dataset is
not at hand. The three classes differ in tumor size, position and brightness so
that a network trained from scratch can separate them.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.path import Path as MplPath

from .data_ingest import TumorClass, TumorRecord, write_record

# (radius range as fraction of side, centre offsets from image centre, contrast)
_CLASS_SHAPES = {
    TumorClass.MENINGIOMA: dict(radius=(0.07, 0.09), centre=((-0.28, -0.22), (-0.1, 0.1)), gain=1.9),
    TumorClass.GLIOMA: dict(radius=(0.17, 0.21), centre=((-0.05, 0.05), (-0.12, 0.12)), gain=1.4),
    TumorClass.PITUITARY: dict(radius=(0.035, 0.045), centre=((0.12, 0.16), (-0.02, 0.02)), gain=2.4),
}


def _polygon(rng, centre, radius, n_vertices=48, wobble=0.12):
    theta = np.sort(rng.uniform(0, 2 * np.pi, n_vertices))
    r = radius * (1 + wobble * rng.uniform(-1, 1, n_vertices))
    return np.column_stack([centre[0] + r * np.sin(theta), centre[1] + r * np.cos(theta)])


def polygon_mask(vertices: np.ndarray, shape: tuple[int, int], origin: float = 1.0) -> np.ndarray:
    """Binary mask of pixel centres inside a ``(row, col)`` polygon."""
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w]
    centres = np.column_stack([rr.ravel() + origin, cc.ravel() + origin])
    inside = MplPath(vertices).contains_points(centres)
    return inside.reshape(h, w).astype(np.uint8)


def make_phantom(label: TumorClass, rng: np.random.Generator, size: int = 512, pid: str | None = None) -> TumorRecord:
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    head = ((yy - cy) / (0.42 * h)) ** 2 + ((xx - cx) / (0.36 * w)) ** 2 <= 1.0
    base = rng.uniform(250, 450)
    image = np.where(head, base, 0.0)
    image += head * rng.normal(0, 0.06 * base, size=(h, w))

    shape = _CLASS_SHAPES[label]
    radius = rng.uniform(*shape["radius"]) * size
    centre = (
        cy + rng.uniform(*shape["centre"][0]) * h + 1,
        cx + rng.uniform(*shape["centre"][1]) * w + 1,
    )
    border = _polygon(rng, centre, radius)
    mask = polygon_mask(border, (h, w))
    if not mask.any():
        mask[int(round(centre[0])) - 1, int(round(centre[1])) - 1] = 1
    image = np.where(mask == 1, shape["gain"] * base + rng.normal(0, 0.05 * base, size=(h, w)), image)
    image = np.clip(np.rint(image), 0, np.iinfo(np.int16).max).astype(np.int16)
    if pid is None:
        pid = str(int(rng.integers(100000, 999999)))
    return TumorRecord(label=label, pid=pid, image=image, tumor_border=border.ravel(), tumor_mask=mask)


def write_phantom_dataset(directory, counts: dict[TumorClass, int] | int, seed: int = 0,
                          size: int = 512, n_patients: int | None = None) -> list[Path]:
    """Write phantom records named ``1.mat``, ``2.mat``, ... into ``directory``.

    ``counts`` may be a per-class mapping or an int meaning that many per class.
    Classes are interleaved so any prefix of the files is roughly balanced.
    """
    if isinstance(counts, int):
        counts = {c: counts for c in TumorClass}
    rng = np.random.default_rng(seed)
    remaining = dict(counts)
    labels = []
    while any(remaining.values()):
        for c in TumorClass:
            if remaining.get(c, 0):
                labels.append(c)
                remaining[c] -= 1
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, label in enumerate(labels, start=1):
        pid = None if n_patients is None else f"P{int(rng.integers(n_patients)):04d}"
        rec = make_phantom(label, rng, size=size, pid=pid)
        p = directory / f"{i}.mat"
        write_record(rec, p)
        paths.append(p)
    return paths
