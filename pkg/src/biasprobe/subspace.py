"""Linear-SVM gender subspaces with group-aware cross-validation, plus
per-dimension probes, ablations, and recall clustering."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embed import FEMALE, MALE, AnchorLexicon, LabeledEmbedding, build_dataset

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass
class GenderSubspace:
    checkpoint: int
    weights: np.ndarray
    intercept: float
    cv_accuracy: float
    fold_accuracies: tuple[float, ...]
    train_accuracy: float = float("nan")

    @property
    def dim(self) -> int:
        return int(self.weights.shape[0])


@dataclass(frozen=True)
class DimensionProbeResult:
    checkpoint: int
    dimension: int
    cv_accuracy: float
    recall_female: float
    recall_male: float


@dataclass(frozen=True)
class RecallClustering:
    cls: str  # "female" | "male"
    k: int
    assignments: tuple[int, ...]  # dimension index -> cluster id
    cluster_means: tuple[float, ...]


def hinge_objective(w: np.ndarray, b: float, X: np.ndarray, y_pm: np.ndarray,
                    C: float) -> float:
    """0.5*||w||^2 + C * sum of hinge losses."""
    margins = y_pm * (X @ w + b)
    return 0.5 * float(w @ w) + C * float(np.maximum(0.0, 1.0 - margins).sum())


def _best_intercept(scores: np.ndarray, y_pm: np.ndarray) -> float:
    """Exact minimizer over b of sum_i hinge(y_i*(s_i+b)); the hinge sum is
    piecewise linear, so some breakpoint attains the minimum; ties take the
    midpoint of the flat argmin interval."""
    bp = y_pm - scores
    order = np.argsort(bp, kind="stable")
    bps = bp[order]
    pos = (y_pm[order] > 0).astype(np.float64)
    neg = 1.0 - pos
    n = len(bps)
    pos_cnt_suf = np.concatenate([np.cumsum(pos[::-1])[::-1], [0.0]])
    pos_sum_suf = np.concatenate([np.cumsum((bps * pos)[::-1])[::-1], [0.0]])
    neg_cnt_pre = np.concatenate([[0.0], np.cumsum(neg)])
    neg_sum_pre = np.concatenate([[0.0], np.cumsum(bps * neg)])
    hi = np.searchsorted(bps, bps, side="right")
    lo = np.searchsorted(bps, bps, side="left")
    vals = (pos_sum_suf[hi] - bps * pos_cnt_suf[hi]) + (bps * neg_cnt_pre[lo] - neg_sum_pre[lo])
    vmin = vals.min()
    ties = np.flatnonzero(vals <= vmin + 1e-12 * (1.0 + abs(vmin)))
    return float(0.5 * (bps[ties[0]] + bps[ties[-1]]))


def _fit_smo(X: np.ndarray, y_pm: np.ndarray, C: float, gap_tol: float,
             max_iter: int, check_every: int = 256) -> tuple[np.ndarray, float]:
    """Dual pairwise coordinate optimization (maximal violating pair) with a
    primal-dual gap stopping rule; exact within gap_tol of the optimum."""
    n, _ = X.shape
    alpha = np.zeros(n)
    w = np.zeros(X.shape[1])
    it = 0
    while it < max_iter:
        it += 1
        s = X @ w
        minus_yG = -y_pm * (y_pm * s - 1.0)
        up = ((y_pm > 0) & (alpha < C)) | ((y_pm < 0) & (alpha > 0))
        low = ((y_pm > 0) & (alpha > 0)) | ((y_pm < 0) & (alpha < C))
        if not up.any() or not low.any():
            break
        iu = int(np.flatnonzero(up)[np.argmax(minus_yG[up])])
        jl = int(np.flatnonzero(low)[np.argmin(minus_yG[low])])
        viol = minus_yG[iu] - minus_yG[jl]
        if viol <= 1e-12:
            break
        if it % check_every == 0:
            dual = float(alpha.sum()) - 0.5 * float(w @ w)
            b0 = _best_intercept(s, y_pm)
            prim = hinge_objective(w, b0, X, y_pm, C)
            if prim - dual <= gap_tol * (1.0 + abs(prim)):
                break
        yi, yj = y_pm[iu], y_pm[jl]
        diff = X[iu] - X[jl]
        eta = float(diff @ diff)
        tmax_i = (C - alpha[iu]) if yi > 0 else alpha[iu]
        tmax_j = alpha[jl] if yj > 0 else (C - alpha[jl])
        tmax = min(tmax_i, tmax_j)
        t = min(viol / eta, tmax) if eta > 0.0 else tmax
        if t <= 0.0:
            break
        ai = alpha[iu] + yi * t
        aj = alpha[jl] - yj * t
        if t == tmax_i:
            ai = C if yi > 0 else 0.0
        if t == tmax_j:
            aj = 0.0 if yj > 0 else C
        alpha[iu] = min(C, max(0.0, ai))
        alpha[jl] = min(C, max(0.0, aj))
        w = w + t * diff
    else:
        warnings.warn(f"SVM solver hit the iteration budget ({max_iter})", stacklevel=2)
    b = _best_intercept(X @ w, y_pm)
    return w, b


def _fit_1d(x: np.ndarray, y_pm: np.ndarray, C: float) -> tuple[np.ndarray, float]:
    """Exact single-feature fit: golden-section search on the convex profile
    phi(w) = min_b objective(w, b)."""
    def phi(w0: float) -> float:
        s = w0 * x
        b0 = _best_intercept(s, y_pm)
        return 0.5 * w0 * w0 + C * float(np.maximum(0.0, 1.0 - y_pm * (s + b0)).sum())

    b_at_zero = _best_intercept(np.zeros_like(x), y_pm)
    f0 = 0.5 * 0.0 + C * float(np.maximum(0.0, 1.0 - y_pm * b_at_zero).sum())
    radius = np.sqrt(2.0 * f0) + 1.0
    lo, hi = -radius, radius
    a = hi - GOLDEN * (hi - lo)
    b = lo + GOLDEN * (hi - lo)
    fa, fb = phi(a), phi(b)
    for _ in range(120):
        if fa <= fb:
            hi, b, fb = b, a, fa
            a = hi - GOLDEN * (hi - lo)
            fa = phi(a)
        else:
            lo, a, fa = a, b, fb
            b = lo + GOLDEN * (hi - lo)
            fb = phi(b)
    w0 = 0.5 * (lo + hi)
    s = w0 * x
    return np.array([w0]), _best_intercept(s, y_pm)


def _fit_linear(X: np.ndarray, y_pm: np.ndarray, C: float, gap_tol: float,
                max_iter: int) -> tuple[np.ndarray, float]:
    if np.unique(y_pm).size < 2:
        raise ValueError("SVM training requires both labels")
    if X.shape[1] == 1:
        return _fit_1d(X[:, 0], y_pm, C)
    return _fit_smo(X, y_pm, C, gap_tol, max_iter)


def predict_male(X: np.ndarray, w: np.ndarray, b: float) -> np.ndarray:
    """Decision rule: positive decision value is male, zero falls to female."""
    return (X @ w + b) > 0.0


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[tuple[str, ...], ...]

    def test_groups(self, k: int) -> frozenset[str]:
        return frozenset(self.folds[k])


def make_fold_plan(groups, folds: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle the distinct groups once under seed, deal them round-robin."""
    uniq = list(dict.fromkeys(groups))
    if len(uniq) < folds:
        raise ValueError(f"need at least {folds} distinct groups, got {len(uniq)}")
    rng = np.random.default_rng(seed)
    order = [uniq[i] for i in rng.permutation(len(uniq))]
    return FoldPlan(tuple(tuple(order[k::folds]) for k in range(folds)))


def _dataset_arrays(dataset: list[LabeledEmbedding]):
    X = np.stack([rec.vector for rec in dataset]).astype(np.float64)
    y = np.array([rec.label for rec in dataset], dtype=np.int64)
    groups = [rec.group for rec in dataset]
    return X, y, groups


def _cv_folds(X, y, groups, plan: FoldPlan, C: float, gap_tol: float, max_iter: int):
    """Held-out fold accuracies plus pooled held-out predictions."""
    group_arr = np.array(groups)
    y_pm = 2.0 * y - 1.0
    fold_accs = []
    pooled_pred = np.zeros(len(y), dtype=bool)
    for k in range(len(plan.folds)):
        test_groups = plan.test_groups(k)
        test_mask = np.isin(group_arr, list(test_groups))
        train_mask = ~test_mask
        if np.unique(y[train_mask]).size < 2:
            raise ValueError(f"fold {k}: training side has a single label")
        w, b = _fit_linear(X[train_mask], y_pm[train_mask], C, gap_tol, max_iter)
        pred = predict_male(X[test_mask], w, b)
        pooled_pred[test_mask] = pred
        fold_accs.append(float((pred == (y[test_mask] == MALE)).mean()))
    return fold_accs, pooled_pred


def fit_svm_arrays(X: np.ndarray, y: np.ndarray, groups, folds: int = 5,
                   C: float = 1.0, seed: int = 0, *, gap_tol: float = 1e-8,
                   max_iter: int = 200_000, checkpoint: int = -1,
                   fold_plan: FoldPlan | None = None) -> GenderSubspace:
    if np.unique(y).size < 2:
        raise ValueError("dataset contains a single label")
    plan = fold_plan if fold_plan is not None else make_fold_plan(groups, folds, seed)
    fold_accs, _ = _cv_folds(X, y, groups, plan, C, gap_tol, max_iter)
    y_pm = 2.0 * y - 1.0
    w, b = _fit_linear(X, y_pm, C, gap_tol, max_iter)
    train_acc = float((predict_male(X, w, b) == (y == MALE)).mean())
    return GenderSubspace(checkpoint, w, float(b), float(np.mean(fold_accs)),
                          tuple(fold_accs), train_acc)


def fit_svm(dataset: list[LabeledEmbedding], folds: int = 5, C: float = 1.0,
            seed: int = 0, **kwargs) -> GenderSubspace:
    """Group-aware cross-validated linear SVM over a labeled embedding dataset."""
    if not dataset:
        raise ValueError("empty dataset")
    X, y, groups = _dataset_arrays(dataset)
    kwargs.setdefault("checkpoint", dataset[0].checkpoint)
    return fit_svm_arrays(X, y, groups, folds=folds, C=C, seed=seed, **kwargs)


def gender_score(subspace: GenderSubspace, x: np.ndarray) -> float:
    """Projection onto the gender direction: the plain inner product, no intercept."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != subspace.weights.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {subspace.weights.shape}")
    return float(subspace.weights @ x)


def decision_value(subspace: GenderSubspace, x: np.ndarray) -> float:
    """Full decision function including the intercept."""
    return gender_score(subspace, x) + subspace.intercept


def sweep_checkpoints(checkpoints, index, lexicon: AnchorLexicon, cap: int = 200,
                      folds: int = 5, seed: int = 0, C: float = 1.0, *,
                      gap_tol: float = 1e-4, max_iter: int = 200_000,
                      batch_size: int = 16):
    """One subspace per checkpoint; failures are recorded and the sweep continues.

    Returns (subspaces, failures) with failures as (epoch, message) tuples.
    """
    if not checkpoints:
        raise ValueError("no checkpoints to sweep")
    subspaces = []
    failures = []
    for ckpt in checkpoints:
        try:
            dataset = build_dataset(ckpt, index, lexicon, cap=cap, seed=seed,
                                    batch_size=batch_size)
            sub = fit_svm(dataset, folds=folds, C=C, seed=seed,
                          gap_tol=gap_tol, max_iter=max_iter)
            subspaces.append(sub)
        except Exception as exc:  # noqa: BLE001 - sweep must continue
            failures.append((ckpt.epoch, str(exc)))
            warnings.warn(f"checkpoint {ckpt.epoch}: subspace fit failed: {exc}",
                          stacklevel=2)
    return subspaces, failures


def per_dimension_probe(dataset: list[LabeledEmbedding], folds: int = 5,
                        seed: int = 0, C: float = 1.0, *,
                        gap_tol: float = 1e-8, max_iter: int = 200_000
                        ) -> list[DimensionProbeResult]:
    """A separate single-coordinate SVM per embedding dimension, all sharing
    one fold partition for comparability."""
    X, y, groups = _dataset_arrays(dataset)
    plan = make_fold_plan(groups, folds, seed)
    epoch = dataset[0].checkpoint
    results = []
    female_mask = y == FEMALE
    male_mask = y == MALE
    for j in range(X.shape[1]):
        fold_accs, pooled = _cv_folds(X[:, j:j + 1], y, groups, plan, C, gap_tol, max_iter)
        recall_f = float((~pooled[female_mask]).mean()) if female_mask.any() else float("nan")
        recall_m = float(pooled[male_mask].mean()) if male_mask.any() else float("nan")
        results.append(DimensionProbeResult(epoch, j, float(np.mean(fold_accs)),
                                            recall_f, recall_m))
    return results


def ablate_dimension(dataset: list[LabeledEmbedding], j: int, folds: int = 5,
                     seed: int = 0, C: float = 1.0, **kwargs) -> GenderSubspace:
    """Refit with coordinate j removed from every vector."""
    X, y, groups = _dataset_arrays(dataset)
    if not 0 <= j < X.shape[1]:
        raise ValueError(f"dimension {j} out of range for d={X.shape[1]}")
    kwargs.setdefault("checkpoint", dataset[0].checkpoint)
    return fit_svm_arrays(np.delete(X, j, axis=1), y, groups, folds=folds,
                          C=C, seed=seed, **kwargs)


def _kmeans_1d_once(values: np.ndarray, k: int, rng: np.random.Generator):
    """k-means++ seeding then Lloyd iterations on scalar values."""
    centers = np.empty(k)
    centers[0] = values[rng.integers(len(values))]
    d2 = (values - centers[0]) ** 2
    for m in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers = centers[:m]
            break
        probs = d2 / total
        centers[m] = values[rng.choice(len(values), p=probs)]
        d2 = np.minimum(d2, (values - centers[m]) ** 2)
    centers = np.unique(centers[:min(k, len(centers))])
    for _ in range(100):
        dist = np.abs(values[:, None] - centers[None, :])
        assign = np.argmin(dist, axis=1)
        used = np.unique(assign)
        new_centers = np.array([values[assign == c].mean() for c in used])
        new_centers = np.unique(new_centers)
        if len(new_centers) == len(centers) and np.allclose(new_centers, centers, atol=0.0):
            break
        centers = new_centers
    dist = np.abs(values[:, None] - centers[None, :])
    assign = np.argmin(dist, axis=1)
    wcss = float(((values - centers[assign]) ** 2).sum())
    return centers, assign, wcss


def cluster_recalls(probe_results: list[DimensionProbeResult], cls: str,
                    k: int = 30, seed: int = 0, restarts: int = 8) -> RecallClustering:
    """K-means over the per-dimension recall values of one class."""
    if cls not in ("female", "male"):
        raise ValueError("cls must be 'female' or 'male'")
    ordered = sorted(probe_results, key=lambda r: r.dimension)
    values = np.array([r.recall_female if cls == "female" else r.recall_male
                       for r in ordered], dtype=np.float64)
    d = len(values)
    if d == 0:
        raise ValueError("no probe results to cluster")
    if d < k:
        warnings.warn(f"k={k} exceeds the number of dimensions {d}; using k={d}",
                      stacklevel=2)
        k = d
    k_eff = min(k, len(np.unique(values)))
    best = None
    for r in range(max(1, restarts)):
        rng = np.random.default_rng([seed, r])
        centers, assign, wcss = _kmeans_1d_once(values, k_eff, rng)
        if best is None or wcss < best[2] - 1e-15:
            best = (centers, assign, wcss)
    centers, assign, _ = best
    order = np.argsort(centers)
    relabel = np.empty_like(order)
    relabel[order] = np.arange(len(order))
    assign = relabel[assign]
    means = [float(values[assign == c].mean()) for c in range(len(centers))]
    return RecallClustering(cls, len(centers), tuple(int(a) for a in assign), tuple(means))


def save_subspace(sub: GenderSubspace, path: str | Path) -> None:
    """Text layout: checkpoint id, intercept, then one weight per line."""
    lines = [str(sub.checkpoint), repr(float(sub.intercept))]
    lines.extend(repr(float(v)) for v in sub.weights)
    lines.append("# cv_accuracy=" + repr(sub.cv_accuracy))
    lines.append("# fold_accuracies=" + ",".join(repr(a) for a in sub.fold_accuracies))
    lines.append("# train_accuracy=" + repr(sub.train_accuracy))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_subspace(path: str | Path) -> GenderSubspace:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    meta = {}
    body = []
    for line in lines:
        if line.startswith("# "):
            key, _, val = line[2:].partition("=")
            meta[key] = val
        elif line:
            body.append(line)
    checkpoint = int(body[0])
    intercept = float(body[1])
    weights = np.array([float(v) for v in body[2:]], dtype=np.float64)
    folds = tuple(float(v) for v in meta.get("fold_accuracies", "").split(",") if v)
    return GenderSubspace(checkpoint, weights, intercept,
                          float(meta.get("cv_accuracy", "nan")), folds,
                          float(meta.get("train_accuracy", "nan")))


def save_probe_results(results: list[DimensionProbeResult], path: str | Path) -> None:
    lines = ["checkpoint,dimension,cv_accuracy,recall_female,recall_male"]
    for r in sorted(results, key=lambda r: (r.checkpoint, r.dimension)):
        lines.append(f"{r.checkpoint},{r.dimension},{r.cv_accuracy!r},"
                     f"{r.recall_female!r},{r.recall_male!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_probe_results(path: str | Path) -> list[DimensionProbeResult]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    out = []
    for line in lines[1:]:
        if not line:
            continue
        ck, dim, acc, rf, rm = line.split(",")
        out.append(DimensionProbeResult(int(ck), int(dim), float(acc), float(rf), float(rm)))
    return out


def save_clustering(clusterings: list[RecallClustering], path: str | Path) -> None:
    lines = ["class,dimension,cluster_id,cluster_mean_recall"]
    for cl in clusterings:
        for dim, cid in enumerate(cl.assignments):
            lines.append(f"{cl.cls},{dim},{cid},{cl.cluster_means[cid]!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
