"""Gradient-boosted regression trees with per-feature monotone constraints.

Logistic loss, Newton leaf values and exact greedy split search over every
boundary between distinct feature values.  A feature with constraint +1
(or -1) only admits splits whose left leaf value is not above (below) the
right one; children then inherit value bounds split at the midpoint, which
makes every leaf of a left subtree comparable with every leaf of the right
subtree.  Rows go left when ``x <= threshold``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateData, WidthMismatch

DUMP_VERSION = "gbdt-v1"
_TIE = 1e-9  # relative gain difference treated as a tie


@dataclass
class Dataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) in {0, 1}
    ids: list[str] = field(default_factory=list)
    feature_names: list[str] = field(default_factory=list)
    monotone_mask: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise WidthMismatch("features must be a 2-d array")
        self.labels = np.asarray(self.labels)
        n, d = self.features.shape
        if len(self.labels) != n:
            raise WidthMismatch("labels and feature rows differ in length")
        if not self.ids:
            self.ids = [str(i) for i in range(n)]
        if not self.feature_names:
            self.feature_names = [f"f{j}" for j in range(d)]
        if self.monotone_mask is None:
            self.monotone_mask = np.zeros(d, dtype=np.int8)
        self.monotone_mask = np.asarray(self.monotone_mask, dtype=np.int8)
        if len(self.monotone_mask) != d or len(self.feature_names) != d:
            raise WidthMismatch("monotone_mask and feature_names must match the feature width")
        if not set(np.unique(self.monotone_mask)) <= {-1, 0, 1}:
            raise ValueError("monotone constraints must be -1, 0 or +1")

    @property
    def width(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class GbdtConfig:
    num_trees: int = 200
    max_depth: int = 4
    learning_rate: float = 0.1
    min_leaf: int = 5
    l2: float = 1.0
    min_gain: float = 1e-9
    seed: int = 0  # split search is exact and deterministic; kept for provenance


@dataclass
class Tree:
    feature: list[int] = field(default_factory=list)  # -1 marks a leaf
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    def add(self, feature=-1, threshold=0.0, left=-1, right=-1, value=0.0) -> int:
        self.feature.append(int(feature))
        self.threshold.append(float(threshold))
        self.left.append(int(left))
        self.right.append(int(right))
        self.value.append(float(value))
        return len(self.feature) - 1

    def __len__(self) -> int:
        return len(self.feature)

    def predict(self, x: np.ndarray) -> np.ndarray:
        feat = np.asarray(self.feature)
        thr = np.asarray(self.threshold)
        left, right, value = np.asarray(self.left), np.asarray(self.right), np.asarray(self.value)
        node = np.zeros(len(x), dtype=np.int64)
        rows = np.arange(len(x))
        while True:
            f = feat[node]
            inner = f >= 0
            if not inner.any():
                return value[node]
            xi = x[rows[inner], f[inner]]
            node[inner] = np.where(xi <= thr[node[inner]], left[node[inner]], right[node[inner]])

    def leaf_values(self, node: int) -> list[float]:
        if self.feature[node] < 0:
            return [self.value[node]]
        return self.leaf_values(self.left[node]) + self.leaf_values(self.right[node])


@dataclass
class GbdtModel:
    trees: list[Tree]
    learning_rate: float
    base_score: float
    monotone_mask: np.ndarray
    config: GbdtConfig = field(default_factory=GbdtConfig)

    def __post_init__(self):
        self.learning_rate = float(self.learning_rate)
        self.base_score = float(self.base_score)

    @property
    def width(self) -> int:
        return len(self.monotone_mask)

    def margin(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.width:
            raise WidthMismatch(f"expected {self.width} features, got {x.shape[1]}")
        out = np.full(len(x), self.base_score)
        for t in self.trees:
            out += self.learning_rate * t.predict(x)
        return out[0] if single else out

    def predict(self, x: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.margin(x)))

    def dump(self) -> str:
        lines = [
            DUMP_VERSION,
            f"base_score={self.base_score!r}",
            f"learning_rate={self.learning_rate!r}",
            "monotone=" + ",".join(str(int(m)) for m in self.monotone_mask),
            f"trees={len(self.trees)}",
        ]
        for i, t in enumerate(self.trees):
            lines.append(f"tree {i} nodes={len(t)}")
            for n in range(len(t)):
                if t.feature[n] < 0:
                    lines.append(f"{n} leaf value={t.value[n]!r}")
                else:
                    lines.append(
                        f"{n} split feature={t.feature[n]} threshold={t.threshold[n]!r} "
                        f"left={t.left[n]} right={t.right[n]} value={t.value[n]!r}"
                    )
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, text: str) -> GbdtModel:
        lines = iter(text.splitlines())
        if next(lines) != DUMP_VERSION:
            raise ValueError("not a gbdt-v1 model dump")

        def kv(line: str, key: str) -> str:
            k, _, v = line.partition("=")
            if k != key:
                raise ValueError(f"expected {key!r}, found {line!r}")
            return v

        base = float(kv(next(lines), "base_score"))
        lr = float(kv(next(lines), "learning_rate"))
        mono_text = kv(next(lines), "monotone")
        mask = np.array([int(m) for m in mono_text.split(",")] if mono_text else [], dtype=np.int8)
        n_trees = int(kv(next(lines), "trees"))
        trees = []
        for _ in range(n_trees):
            n_nodes = int(next(lines).split("nodes=")[1])
            t = Tree()
            for _ in range(n_nodes):
                parts = next(lines).split()
                fields = dict(p.split("=") for p in parts[2:])
                if parts[1] == "leaf":
                    t.add(value=float(fields["value"]))
                else:
                    t.add(
                        int(fields["feature"]),
                        float(fields["threshold"]),
                        int(fields["left"]),
                        int(fields["right"]),
                        float(fields["value"]),
                    )
            trees.append(t)
        return cls(trees, lr, base, mask)


def _leaf_weight(g: np.ndarray, h: np.ndarray, l2: float, lo, hi) -> np.ndarray:
    return np.clip(-g / (h + l2), lo, hi)


def _score(g, h, w, l2):
    # twice the loss reduction of a leaf with weight w; equals g^2/(h+l2) at the optimum
    return -(2.0 * g * w + (h + l2) * w * w)


@dataclass
class _Node:
    sorted_rows: np.ndarray  # (m, d') row ids sorted by each candidate feature
    depth: int
    lo: float
    hi: float
    slot: int


def _find_split(node: _Node, x: np.ndarray, g: np.ndarray, h: np.ndarray, mask: np.ndarray, cfg: GbdtConfig):
    rows = node.sorted_rows
    m, d = rows.shape
    if m < 2 * cfg.min_leaf:
        return None
    cols = np.arange(d)
    vals = x[rows, cols]
    gc = np.cumsum(g[rows], axis=0)
    hc = np.cumsum(h[rows], axis=0)
    g_tot, h_tot = gc[-1, 0], hc[-1, 0]
    gl, hl = gc[:-1], hc[:-1]
    gr, hr = g_tot - gl, h_tot - hl
    counts = np.arange(1, m)[:, None]
    valid = (vals[1:] > vals[:-1]) & (counts >= cfg.min_leaf) & (m - counts >= cfg.min_leaf)
    if not valid.any():
        return None
    wl = _leaf_weight(gl, hl, cfg.l2, node.lo, node.hi)
    wr = _leaf_weight(gr, hr, cfg.l2, node.lo, node.hi)
    valid &= np.where(mask > 0, wl <= wr, True) & np.where(mask < 0, wl >= wr, True)
    w_parent = _leaf_weight(g_tot, h_tot, cfg.l2, node.lo, node.hi)
    gain = _score(gl, hl, wl, cfg.l2) + _score(gr, hr, wr, cfg.l2) - _score(g_tot, h_tot, w_parent, cfg.l2)
    gain = np.where(valid, gain, -np.inf)
    pos = np.argmax(gain, axis=0)
    best = gain[pos, cols]
    top = best.max()
    if not np.isfinite(top) or top <= cfg.min_gain:
        return None
    # lowest feature index among near-ties, then the lowest position
    j = int(np.flatnonzero(best >= top - _TIE * abs(top))[0])
    p = int(pos[j])
    lo_v, hi_v = vals[p, j], vals[p + 1, j]
    thr = 0.5 * (lo_v + hi_v)
    if not lo_v <= thr < hi_v:
        thr = lo_v
    return j, thr, float(wl[p, j]), float(wr[p, j]), p + 1


def train_gbdt(data: Dataset, config: GbdtConfig | None = None) -> GbdtModel:
    cfg = config or GbdtConfig()
    x = data.features
    y = np.asarray(data.labels, dtype=np.float64)
    n, d = x.shape
    if d < 1:
        raise WidthMismatch("need at least one feature")
    if not set(np.unique(y)) <= {0.0, 1.0}:
        raise ValueError("binary labels must be 0 or 1")
    if len(np.unique(y)) < 2:
        raise DegenerateData("all labels are identical")
    mask_full = data.monotone_mask

    # features that can never produce a valid split are left out of the search
    order_full = np.argsort(x, axis=0, kind="stable")
    sorted_vals = np.take_along_axis(x, order_full, axis=0)
    k = cfg.min_leaf
    usable = sorted_vals[k - 1] < sorted_vals[n - k] if n >= 2 * k else np.zeros(d, bool)
    feats = np.flatnonzero(usable)
    xs = x[:, feats]
    mask = mask_full[feats]
    order = order_full[:, feats]

    p = y.mean()
    base = float(np.log(p / (1 - p)))
    margin = np.full(n, base)
    trees = []
    for _ in range(cfg.num_trees):
        prob = 1.0 / (1.0 + np.exp(-margin))
        g = prob - y
        h = prob * (1.0 - prob)
        tree = Tree()
        root = tree.add()
        stack = [_Node(order, 0, -np.inf, np.inf, root)]
        while stack:
            node = stack.pop()
            members = node.sorted_rows[:, 0] if node.sorted_rows.shape[1] else np.arange(n)
            split = None
            if node.depth < cfg.max_depth and len(feats):
                split = _find_split(node, xs, g, h, mask, cfg)
            if split is None:
                tree.value[node.slot] = float(_leaf_weight(g[members].sum(), h[members].sum(), cfg.l2, node.lo, node.hi))
                continue
            j, thr, wl, wr, n_left = split
            goes_left = np.zeros(n, dtype=bool)
            goes_left[node.sorted_rows[:n_left, j]] = True
            flags = goes_left[node.sorted_rows]
            m, dd = node.sorted_rows.shape
            left_rows = node.sorted_rows.T[flags.T].reshape(dd, n_left).T
            right_rows = node.sorted_rows.T[~flags.T].reshape(dd, m - n_left).T
            lo_l, hi_l, lo_r, hi_r = node.lo, node.hi, node.lo, node.hi
            if mask[j] != 0:
                mid = 0.5 * (wl + wr)
                if mask[j] > 0:
                    hi_l, lo_r = mid, mid
                else:
                    lo_l, hi_r = mid, mid
            l_slot, r_slot = tree.add(), tree.add()
            tree.feature[node.slot] = int(feats[j])
            tree.threshold[node.slot] = float(thr)
            tree.left[node.slot] = l_slot
            tree.right[node.slot] = r_slot
            tree.value[node.slot] = float(_leaf_weight(g[members].sum(), h[members].sum(), cfg.l2, node.lo, node.hi))
            # right pushed first so the left subtree gets the lower slot numbers
            stack.append(_Node(right_rows, node.depth + 1, lo_r, hi_r, r_slot))
            stack.append(_Node(left_rows, node.depth + 1, lo_l, hi_l, l_slot))
        margin += cfg.learning_rate * tree.predict(x)
        trees.append(tree)
    return GbdtModel(trees, cfg.learning_rate, base, mask_full.copy(), cfg)


def monotone_violations(model: GbdtModel) -> list[tuple[int, int]]:
    """``(tree, node)`` of every constrained split whose left leaves exceed its right leaves."""
    bad = []
    for ti, t in enumerate(model.trees):
        for n in range(len(t)):
            f = t.feature[n]
            if f < 0 or model.monotone_mask[f] == 0:
                continue
            lmax, lmin = max(t.leaf_values(t.left[n])), min(t.leaf_values(t.left[n]))
            rmax, rmin = max(t.leaf_values(t.right[n])), min(t.leaf_values(t.right[n]))
            if (model.monotone_mask[f] > 0 and lmax > rmin) or (model.monotone_mask[f] < 0 and lmin < rmax):
                bad.append((ti, n))
    return bad


@dataclass
class OneVsRest:
    """One binary ensemble per class; the predicted class has the highest score."""

    classes: list[str]
    models: list[GbdtModel]

    @classmethod
    def train(cls, data: Dataset, config: GbdtConfig | None = None) -> OneVsRest:
        classes = sorted(set(str(c) for c in data.labels))
        if len(classes) < 2:
            raise DegenerateData("need at least two classes")
        labels = np.array([str(c) for c in data.labels])
        models = []
        for c in classes:
            sub = Dataset(data.features, (labels == c).astype(int), data.ids, data.feature_names, data.monotone_mask)
            models.append(train_gbdt(sub, config))
        return cls(classes, models)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return np.stack([m.predict(np.atleast_2d(x)) for m in self.models], axis=1)

    def predict(self, x: np.ndarray) -> list[str]:
        return [self.classes[i] for i in np.argmax(self.predict_proba(x), axis=1)]

    def dump(self) -> str:
        return "".join(f"class {c}\n{m.dump()}" for c, m in zip(self.classes, self.models))

    @classmethod
    def load(cls, text: str) -> OneVsRest:
        blocks = text.split("class ")[1:]
        classes, models = [], []
        for b in blocks:
            name, _, body = b.partition("\n")
            classes.append(name)
            models.append(GbdtModel.load(body))
        return cls(classes, models)


def dataset_from_rows(rows: Sequence[np.ndarray], labels: Sequence, **kw) -> Dataset:
    return Dataset(np.vstack(rows), np.asarray(labels), **kw)
