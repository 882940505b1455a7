"""Dataset reduction criteria.

A selection keeps round((1-pr) n) samples, chosen either by a per-sample
score ranking or cluster-structured rules: cosine k-means partitions the
selection space, quotas split the keep budget balanced or proportionally
across clusters, and within each cluster members are picked nearest or
furthest from the centroid, by kernel-mean herding, or by farthest-point
traversal.  Global variants of the kernel and coreset rules skip the
cluster structure.  All rules tie-break by sample id so selections are
invariant to dataset row order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from .data import LatentDataset, Rng
from .errors import ValidationError

K_DEFAULT = 24
RFF_FEATURES_DEFAULT = 1024

#: canonical criterion tags (ASCII renderings; ^-1 marks the inverted rule)
CRITERIA = (
    "random",
    "C_p", "C_b", "C_p^-1", "C_b^-1",
    "C_b^kappa", "C_b^cs",
    "G", "G^-1", "L", "L^-1",
)


def keep_count(n: int, pr: float) -> int:
    """Half-up rounding of (1-pr) n; pr=0.5 keeps ceil(n/2)."""
    if not 0.0 <= pr < 1.0:
        raise ValidationError(f"pr must lie in [0, 1), got {pr}")
    return int(np.floor((1.0 - pr) * n + 0.5))


def _unit_rows(x: np.ndarray, what: str = "embedding") -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    bad = np.nonzero(norms == 0)[0]
    if bad.size:
        raise ValidationError(f"zero-norm {what} row at position {int(bad[0])}")
    return x / norms[:, None]


# --- clustering ---------------------------------------------------------------


@dataclass(frozen=True)
class ClusterModel:
    """Cosine k-means result: unit-norm centroids and per-sample assignment."""

    k: int
    centroids: np.ndarray  # (k, e), unit rows
    assignments: np.ndarray  # (n,)

    def __post_init__(self):
        a = np.asarray(self.assignments, dtype=np.int64)
        if a.min(initial=0) < 0 or (a.size and a.max() >= self.k):
            raise ValidationError("cluster assignments out of range")
        object.__setattr__(self, "assignments", a)
        object.__setattr__(self, "centroids", np.asarray(self.centroids, dtype=np.float64))

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)

    @property
    def n(self) -> int:
        return self.assignments.size


def _plusplus_seed(xu: np.ndarray, k: int, g: np.random.Generator) -> np.ndarray:
    """k-means++ seeding under cosine distance on unit rows."""
    n = xu.shape[0]
    chosen = [int(g.integers(0, n))]
    d2 = np.maximum(1.0 - xu @ xu[chosen[0]], 0.0) ** 2
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all points coincide with chosen centers; fall back to uniform
            chosen.append(int(g.integers(0, n)))
        else:
            chosen.append(int(g.choice(n, p=d2 / total)))
        d2 = np.minimum(d2, np.maximum(1.0 - xu @ xu[chosen[-1]], 0.0) ** 2)
    return xu[chosen].copy()


def kmeans_cosine(
    embeddings: np.ndarray,
    k: int,
    rng: Rng,
    max_iters: int = 100,
    tol: float = 1e-9,
) -> ClusterModel:
    """Lloyd iterations on unit-normalized rows with renormalized centroids.

    Stops when no assignment changes (or the mean-cosine-distance objective
    improves by less than ``tol``, or ``max_iters`` is hit).  An emptied
    cluster is reseeded to the point farthest from its previous centroid,
    which keeps k fixed at the cost of strict Lloyd monotonicity.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError("embeddings must be an n x e matrix")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValidationError(f"k must lie in [1, n={n}], got {k}")
    xu = _unit_rows(x)
    g = rng.generator
    cent = _plusplus_seed(xu, k, g)
    assign = np.full(n, -1, dtype=np.int64)
    prev_obj = np.inf
    for _ in range(max_iters):
        sims = xu @ cent.T
        new_assign = np.argmax(sims, axis=1)
        obj = float(np.mean(1.0 - sims[np.arange(n), new_assign]))
        changed = int(np.count_nonzero(new_assign != assign))
        assign = new_assign
        if changed == 0 or prev_obj - obj < tol:
            break
        prev_obj = obj
        for j in range(k):
            members = xu[assign == j]
            if members.shape[0] == 0:
                far = int(np.argmin(xu @ cent[j]))
                cent[j] = xu[far]
                continue
            m = members.sum(axis=0)
            norm = np.linalg.norm(m)
            if norm < 1e-12:
                far = int(np.argmin(xu @ cent[j]))
                cent[j] = xu[far]
            else:
                cent[j] = m / norm
    return ClusterModel(k=k, centroids=cent, assignments=assign)


def cluster_dataset(ds: LatentDataset, k: int = K_DEFAULT, rng: Rng | None = None, **kw) -> ClusterModel:
    """Cluster a dataset in its selection space (embeddings if present)."""
    if rng is None:
        rng = Rng(0)
    return kmeans_cosine(ds.selection_space(), k, rng, **kw)


# --- quota allocation ---------------------------------------------------------


def _largest_remainder(fractions: np.ndarray, total: int) -> np.ndarray:
    """Integer shares summing exactly to ``total``; ties go to low index."""
    base = np.floor(fractions).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        rem = fractions - base
        order = np.lexsort((np.arange(rem.size), -rem))
        base[order[:short]] += 1
    elif short < 0:
        rem = fractions - base
        order = np.lexsort((np.arange(rem.size), rem))
        base[order[: -short]] -= 1
    return base


def allocate_quota(model: ClusterModel, pr: float, mode: str = "balanced") -> np.ndarray:
    """Per-cluster keep counts for pruning fraction ``pr``.

    balanced: equal shares of the keep budget per cluster (largest-remainder
    integers); clusters too small to fill their share contribute everything
    and the deficit is spread over clusters with spare capacity,
    proportionally to that capacity.  proportional: shares proportional to
    cluster sizes, largest-remainder adjusted so totals match exactly.
    """
    sizes = model.sizes
    n = int(sizes.sum())
    total = keep_count(n, pr)
    if mode == "proportional":
        quotas = _largest_remainder((1.0 - pr) * sizes.astype(np.float64), total)
    elif mode == "balanced":
        quotas = _largest_remainder(np.full(model.k, total / model.k), total)
    else:
        raise ValidationError(f"mode must be balanced or proportional, got {mode!r}")
    keep = np.minimum(quotas, sizes)
    deficit = total - int(keep.sum())
    while deficit > 0:
        cap = sizes - keep
        open_total = int(cap.sum())
        if open_total == 0:
            raise ValidationError("keep budget exceeds dataset size")
        add = _largest_remainder(deficit * cap / open_total, deficit)
        keep = np.minimum(keep + np.minimum(add, cap), sizes)
        deficit = total - int(keep.sum())
    return keep


# --- selections ---------------------------------------------------------------


@dataclass(frozen=True)
class PruneSelection:
    """The kept-id subset plus the metadata that produced it."""

    kept_ids: np.ndarray
    criterion: str
    pr: float
    n_total: int
    scores: np.ndarray | None = None  # aligned to the source dataset rows
    clusters: np.ndarray | None = None
    cluster_discrepancy: np.ndarray | None = None  # per cluster, kernel rule only
    scope: str = "cluster"  # kernel/coreset rules also run dataset-wide

    def __post_init__(self):
        kept = np.asarray(sorted(int(i) for i in np.asarray(self.kept_ids).ravel()), dtype=np.int64)
        if np.unique(kept).size != kept.size:
            raise ValidationError("kept ids contain duplicates")
        object.__setattr__(self, "kept_ids", kept)

    @property
    def kept(self) -> int:
        return self.kept_ids.size


def apply_selection(ds: LatentDataset, sel: PruneSelection) -> LatentDataset:
    return ds.subset_by_ids(sel.kept_ids)


def _rows_to_ids(ds: LatentDataset, rows) -> np.ndarray:
    return ds.ids[np.asarray(rows, dtype=np.int64)]


def select_random(ds: LatentDataset, pr: float, rng: Rng) -> PruneSelection:
    q = keep_count(ds.n, pr)
    rows = rng.generator.choice(ds.n, size=q, replace=False)
    return PruneSelection(kept_ids=_rows_to_ids(ds, rows), criterion="random", pr=pr, n_total=ds.n)


def select_by_score(
    ds: LatentDataset,
    scores: np.ndarray,
    pr: float,
    direction: str = "highest",
    base_tag: str = "L",
) -> PruneSelection:
    """Keep the round((1-pr) n) samples from one end of a score ranking.

    ``base_tag`` names the score family (L for loss, G for gradient norm);
    selecting the low end appends the ^-1 inversion marker.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != (ds.n,):
        raise ValidationError(f"scores shape {s.shape} does not match n={ds.n}")
    nan_rows = np.nonzero(np.isnan(s))[0]
    if nan_rows.size:
        raise ValidationError(f"NaN score for sample id {int(ds.ids[nan_rows[0]])}")
    if direction == "highest":
        order = np.lexsort((ds.ids, -s))
        tag = base_tag
    elif direction == "lowest":
        order = np.lexsort((ds.ids, s))
        tag = base_tag + "^-1"
    else:
        raise ValidationError(f"direction must be highest or lowest, got {direction!r}")
    q = keep_count(ds.n, pr)
    return PruneSelection(
        kept_ids=_rows_to_ids(ds, order[:q]), criterion=tag, pr=pr, n_total=ds.n, scores=s
    )


def select_by_distance(
    ds: LatentDataset,
    model: ClusterModel,
    quotas: np.ndarray,
    direction: str = "nearest",
    pr: float = 0.0,
    mode: str = "balanced",
) -> PruneSelection:
    """Per cluster, rank members by cosine distance to the centroid and take
    the quota from the chosen end; ties break by id."""
    if direction not in ("nearest", "furthest"):
        raise ValidationError(f"direction must be nearest or furthest, got {direction!r}")
    xu = _unit_rows(np.asarray(ds.selection_space(), dtype=np.float64), "selection-space")
    dist = 1.0 - np.einsum("ij,ij->i", xu, model.centroids[model.assignments])
    rows: list[int] = []
    for j in range(model.k):
        members = np.nonzero(model.assignments == j)[0]
        key = dist[members] if direction == "nearest" else -dist[members]
        order = np.lexsort((ds.ids[members], key))
        rows.extend(members[order[: int(quotas[j])]])
    tag = ("C_b" if mode == "balanced" else "C_p") + ("" if direction == "nearest" else "^-1")
    return PruneSelection(
        kept_ids=_rows_to_ids(ds, rows), criterion=tag, pr=pr, n_total=ds.n,
        scores=dist, clusters=model.assignments,
    )


def _median_bandwidth(rows: np.ndarray) -> float:
    if rows.shape[0] < 2:
        return 1.0
    # cap the pairwise computation; evenly strided rows keep it deterministic
    if rows.shape[0] > 512:
        rows = rows[np.linspace(0, rows.shape[0] - 1, 512).astype(np.int64)]
    med = float(np.median(pdist(rows)))
    return med if med > 0 else 1.0


def _herd(
    space: np.ndarray,
    members: np.ndarray,
    member_ids: np.ndarray,
    quota: int,
    g: np.random.Generator,
    rff_features: int,
    bandwidth: float | None,
) -> tuple[np.ndarray, float]:
    """Greedy kernel herding in RFF space over one candidate pool.

    Returns the selected row positions (within ``members``) and the final
    mean discrepancy.  Candidates are scanned in id order so objective ties
    resolve to the lowest id.
    """
    if quota > len(members):
        raise ValidationError(f"quota {quota} exceeds pool size {len(members)}")
    pool = space[members]
    bw = _median_bandwidth(pool) if bandwidth is None else float(bandwidth)
    if bw <= 0:
        raise ValidationError("kernel bandwidth must be positive")
    e = pool.shape[1]
    omega = g.standard_normal((e, rff_features)) / bw
    b = g.uniform(0.0, 2.0 * np.pi, rff_features)
    z = np.sqrt(2.0 / rff_features) * np.cos(pool @ omega + b)
    target = z.mean(axis=0)

    id_order = np.argsort(member_ids, kind="stable")
    z = z[id_order]
    picked = np.zeros(len(members), dtype=bool)
    run = np.zeros(rff_features)
    chosen: list[int] = []
    for step in range(quota):
        cand = (run + z) / (step + 1.0) - target
        obj = np.einsum("ij,ij->i", cand, cand)
        obj[picked] = np.inf
        best = int(np.argmin(obj))
        picked[best] = True
        run += z[best]
        chosen.append(best)
    disc = float(np.linalg.norm(run / max(quota, 1) - target)) if quota else float(np.linalg.norm(target))
    return members[id_order[chosen]], disc


def select_by_kernel(
    ds: LatentDataset,
    model: ClusterModel | None,
    quotas: np.ndarray | None,
    rng: Rng,
    rff_features: int = RFF_FEATURES_DEFAULT,
    bandwidth: float | None = None,
    pr: float = 0.0,
    global_scope: bool = False,
) -> PruneSelection:
    """Kernel-herding selection: greedily match the RFF kernel mean of each
    cluster (or of the whole dataset when ``global_scope``)."""
    if rff_features < 1:
        raise ValidationError("rff_features must be >= 1")
    space = np.asarray(ds.selection_space(), dtype=np.float64)
    g = rng.generator
    if global_scope:
        members = np.arange(ds.n)
        rows, disc = _herd(space, members, ds.ids, keep_count(ds.n, pr), g, rff_features, bandwidth)
        return PruneSelection(
            kept_ids=_rows_to_ids(ds, rows), criterion="C_b^kappa", pr=pr, n_total=ds.n,
            cluster_discrepancy=np.array([disc]), scope="global",
        )
    if model is None or quotas is None:
        raise ValidationError("cluster model and quotas required unless global_scope")
    rows_all: list[np.ndarray] = []
    discs = np.zeros(model.k)
    for j in range(model.k):
        members = np.nonzero(model.assignments == j)[0]
        rows, discs[j] = _herd(space, members, ds.ids[members], int(quotas[j]), g, rff_features, bandwidth)
        rows_all.append(rows)
    return PruneSelection(
        kept_ids=_rows_to_ids(ds, np.concatenate(rows_all)), criterion="C_b^kappa", pr=pr,
        n_total=ds.n, clusters=model.assignments, cluster_discrepancy=discs,
    )


def _farthest_point_rows(xu: np.ndarray, members: np.ndarray, member_ids: np.ndarray, centroid: np.ndarray, quota: int) -> np.ndarray:
    """Gonzalez traversal under cosine distance; start nearest the centroid,
    then repeatedly add the point farthest from the selected set."""
    if quota <= 0:
        return members[:0]
    if quota > len(members):
        raise ValidationError(f"quota {quota} exceeds pool size {len(members)}")
    pool = xu[members]
    id_order = np.argsort(member_ids, kind="stable")
    pool = pool[id_order]
    start = int(np.argmax(pool @ centroid))
    chosen = [start]
    dmin = 1.0 - pool @ pool[start]
    dmin[start] = -np.inf
    for _ in range(1, quota):
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        dmin = np.minimum(dmin, 1.0 - pool @ pool[nxt])
        dmin[nxt] = -np.inf
    return members[id_order[chosen]]


def select_by_coreset(
    ds: LatentDataset,
    model: ClusterModel | None,
    quotas: np.ndarray | None,
    pr: float = 0.0,
    global_scope: bool = False,
) -> PruneSelection:
    xu = _unit_rows(np.asarray(ds.selection_space(), dtype=np.float64), "selection-space")
    if global_scope:
        m = xu.sum(axis=0)
        norm = np.linalg.norm(m)
        centroid = m / norm if norm > 0 else xu[0]
        rows = _farthest_point_rows(xu, np.arange(ds.n), ds.ids, centroid, keep_count(ds.n, pr))
        return PruneSelection(
            kept_ids=_rows_to_ids(ds, rows), criterion="C_b^cs", pr=pr, n_total=ds.n, scope="global"
        )
    if model is None or quotas is None:
        raise ValidationError("cluster model and quotas required unless global_scope")
    rows_all = []
    for j in range(model.k):
        members = np.nonzero(model.assignments == j)[0]
        rows_all.append(_farthest_point_rows(xu, members, ds.ids[members], model.centroids[j], int(quotas[j])))
    return PruneSelection(
        kept_ids=_rows_to_ids(ds, np.concatenate(rows_all)), criterion="C_b^cs", pr=pr,
        n_total=ds.n, clusters=model.assignments,
    )


# --- balance measure ----------------------------------------------------------


@dataclass(frozen=True)
class BalanceReport:
    """KL divergence (nats) of a cluster-frequency histogram from uniform."""

    kl: float
    empty_clusters: int


def balance_divergence(model: ClusterModel, generated_assignments) -> BalanceReport:
    a = np.asarray(generated_assignments, dtype=np.int64)
    if a.size == 0:
        raise ValidationError("balance_divergence needs at least one assignment")
    if a.min() < 0 or a.max() >= model.k:
        raise ValidationError("assignment references a cluster outside the model")
    counts = np.bincount(a, minlength=model.k)
    p = counts / counts.sum()
    nz = p > 0
    kl = float(np.sum(p[nz] * np.log(p[nz] * model.k)))
    return BalanceReport(kl=kl, empty_clusters=int(np.count_nonzero(counts == 0)))


# --- persistence ---------------------------------------------------------------


def save_selection_csv(sel: PruneSelection, ds: LatentDataset, path) -> None:
    """One row per dataset sample: id,score,cluster,kept, plus the kernel
    rule's per-cluster discrepancy column when available."""
    kept = set(int(i) for i in sel.kept_ids)
    has_disc = sel.cluster_discrepancy is not None and sel.clusters is not None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["id", "score", "cluster", "kept"]
        if has_disc:
            header.append("cluster_discrepancy")
        w.writerow(header)
        order = np.argsort(ds.ids, kind="stable")
        for r in order:
            sid = int(ds.ids[r])
            score = "" if sel.scores is None else repr(float(sel.scores[r]))
            cl = -1 if sel.clusters is None else int(sel.clusters[r])
            row = [sid, score, cl, int(sid in kept)]
            if has_disc:
                row.append(repr(float(sel.cluster_discrepancy[cl])))
            w.writerow(row)


def save_id_list(sel: PruneSelection, path) -> None:
    with open(path, "w") as fh:
        for i in sel.kept_ids:
            fh.write(f"{int(i)}\n")


def load_id_list(path) -> np.ndarray:
    with open(path) as fh:
        ids = [int(line) for line in fh if line.strip()]
    return np.asarray(sorted(ids), dtype=np.int64)
