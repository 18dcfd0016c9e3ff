"""Synthetic 2-D datasets (linear, circles, moons), splitting and CSV persistence."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .linalg import make_rng

SPLITS = ("labeled", "validation", "unlabeled", "test")
KINDS = ("linear", "circles", "moons")


@dataclass
class RawDataset:
    x: np.ndarray
    y: np.ndarray


def _class_sizes(n: int) -> tuple[int, int]:
    return n // 2, n - n // 2


def gen_linear(n: int, margin: float = 1.0, seed: int = 0) -> RawDataset:
    """Two unit-variance Gaussian blobs pushed ``margin / 2`` off a random hyperplane."""
    if n < 4:
        raise ValueError("need n >= 4")
    if margin < 0:
        raise ValueError("margin must be non-negative")
    rng = make_rng(seed)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    normal = np.array([np.cos(angle), np.sin(angle)])
    along = np.array([-normal[1], normal[0]])
    n0, n1 = _class_sizes(n)
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    side = np.where(y == 1, 1.0, -1.0)
    depth = margin / 2.0 + np.abs(rng.standard_normal(n))
    lateral = rng.standard_normal(n)
    x = (side * depth)[:, None] * normal + lateral[:, None] * along
    return RawDataset(x, y)


def gen_circles(n: int, noise: float = 0.1, seed: int = 0) -> RawDataset:
    """Class 0 on a ring of radius 0.5, class 1 on a ring of radius 1.0."""
    if n < 4:
        raise ValueError("need n >= 4")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = make_rng(seed)
    n0, n1 = _class_sizes(n)
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    radius = np.where(y == 1, 1.0, 0.5)
    t = rng.uniform(0.0, 2.0 * np.pi, n)
    x = radius[:, None] * np.column_stack([np.cos(t), np.sin(t)])
    if noise > 0:
        x = x + noise * rng.standard_normal((n, 2))
    return RawDataset(x, y)


def gen_moons(n: int, noise: float = 0.1, seed: int = 0) -> RawDataset:
    """Two interleaving half circles: ``(cos t, sin t)`` and ``(1 - cos t, 0.5 - sin t)``."""
    if n < 4:
        raise ValueError("need n >= 4")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = make_rng(seed)
    n0, n1 = _class_sizes(n)
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    t = rng.uniform(0.0, np.pi, n)
    x = np.where((y == 0)[:, None],
                 np.column_stack([np.cos(t), np.sin(t)]),
                 np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)]))
    if noise > 0:
        x = x + noise * rng.standard_normal((n, 2))
    return RawDataset(x, y)


def generate(kind: str, n: int, noise: float = 0.1, margin: float = 1.0, seed: int = 0) -> RawDataset:
    if kind == "linear":
        return gen_linear(n, margin, seed)
    if kind == "circles":
        return gen_circles(n, noise, seed)
    if kind == "moons":
        return gen_moons(n, noise, seed)
    raise ValueError(f"unknown dataset kind {kind!r}; expected one of {', '.join(KINDS)}")


@dataclass
class SplitDataset:
    """Labeled / validation / unlabeled / test splits.

    Training code should only touch ``unlabeled`` (points); the hidden labels
    are kept for evaluation and analysis via ``hidden_labels()``.
    """

    labeled_x: np.ndarray
    labeled_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    unlabeled: np.ndarray
    _unlabeled_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.labeled_x.shape[1]

    def hidden_labels(self) -> np.ndarray:
        return self._unlabeled_y.copy()

    def sizes(self) -> dict[str, int]:
        return {"labeled": len(self.labeled_y), "validation": len(self.val_y),
                "unlabeled": len(self.unlabeled), "test": len(self.test_y)}

    def all_points(self) -> np.ndarray:
        return np.vstack([self.labeled_x, self.val_x, self.unlabeled, self.test_x])


def _take_balanced(pools: list[list[int]], count: int) -> list[int]:
    per = _class_sizes(count)
    out = []
    for pool, k in zip(pools, per):
        if len(pool) < k:
            raise ValueError("not enough points of each class for a balanced split")
        out.extend(pool[:k])
        del pool[:k]
    return out


def split(raw: RawDataset, n_labeled: int = 10, n_validation: int = 30,
          n_unlabeled: int = 1000, seed: int = 0) -> SplitDataset:
    """Class-balanced labeled and validation sets, random unlabeled set, rest is test."""
    n = len(raw.y)
    if n < n_labeled + n_validation + n_unlabeled:
        raise ValueError(f"dataset has {n} points, need at least {n_labeled + n_validation + n_unlabeled}")
    order = make_rng(seed).permutation(n)
    pools = [[int(i) for i in order if raw.y[i] == c] for c in (0, 1)]
    lab = _take_balanced(pools, n_labeled)
    val = _take_balanced(pools, n_validation)
    used = set(lab) | set(val)
    rest = [int(i) for i in order if int(i) not in used]
    unl, test = rest[:n_unlabeled], rest[n_unlabeled:]
    return SplitDataset(raw.x[lab], raw.y[lab], raw.x[val], raw.y[val],
                        raw.x[unl], raw.y[unl], raw.x[test], raw.y[test])


def make_dataset(kind: str = "moons", n: int = 1240, noise: float = 0.1, margin: float = 1.0,
                 seed: int = 0, n_labeled: int = 10, n_validation: int = 30,
                 n_unlabeled: int = 1000) -> SplitDataset:
    raw = generate(kind, n, noise=noise, margin=margin, seed=seed)
    return split(raw, n_labeled, n_validation, n_unlabeled, seed=seed)


HEADER = ["split", "id", "x0", "x1", "label"]


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def dataset_rows(data: SplitDataset):
    groups = [("labeled", data.labeled_x, data.labeled_y),
              ("validation", data.val_x, data.val_y),
              ("unlabeled", data.unlabeled, data._unlabeled_y),
              ("test", data.test_x, data.test_y)]
    for name, xs, ys in groups:
        for i, (x, y) in enumerate(zip(xs, ys)):
            yield [name, str(i), _fmt(x[0]), _fmt(x[1]), str(int(y))]


def dataset_to_csv(data: SplitDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    w.writerows(dataset_rows(data))
    return buf.getvalue()


def raw_to_csv(raw: RawDataset) -> str:
    """Unsplit points are written with split ``test``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for i, (x, y) in enumerate(zip(raw.x, raw.y)):
        w.writerow(["test", str(i), _fmt(x[0]), _fmt(x[1]), str(int(y))])
    return buf.getvalue()


def dataset_from_csv(text: str) -> SplitDataset:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != HEADER:
        raise ValueError(f"bad dataset header {header}; expected {','.join(HEADER)}")
    rows = {s: [] for s in SPLITS}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 5 or row[0] not in rows:
            raise ValueError(f"line {lineno}: malformed row {row}")
        rows[row[0]].append((int(row[1]), float(row[2]), float(row[3]), int(row[4])))

    def unpack(name):
        items = sorted(rows[name])
        ids = [r[0] for r in items]
        if ids != list(range(len(ids))):
            raise ValueError(f"{name} ids must be 0..{len(ids) - 1}")
        x = np.array([[r[1], r[2]] for r in items], dtype=np.float64).reshape(-1, 2)
        y = np.array([r[3] for r in items], dtype=np.int64)
        return x, y

    lx, ly = unpack("labeled")
    vx, vy = unpack("validation")
    ux, uy = unpack("unlabeled")
    tx, ty = unpack("test")
    return SplitDataset(lx, ly, vx, vy, ux, uy, tx, ty)
