"""End-to-end training: tree partition, per-region initialization, mini-batch
ascent on the quasi-likelihood with a closed-form BLUP refresh each epoch,
and prediction for fitted models.

The random effect is deliberately not updated by gradient steps: given the
fixed part it has an exact maximizer, so each epoch alternates stochastic
coefficient updates with the closed-form BLUP and a variance-component
update.  Every epoch's step on a region's coefficients uses the mean batch
gradient (gradient over the batch members in the region, divided by their
count); this keeps the stable learning-rate range independent of batch size
and leaf count, so the conventional 0.01 works on data whose predictors are
far from the origin.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset
from .errors import IllPosedRegionError, NumericalError
from .mixedmodel import (
    GtimmModel,
    blup,
    fixed_part_eta,
    get_family,
    quasi_loglik,
    update_variance_components,
)
from .tree import (
    RegionAssignment,
    RegressionTree,
    TreeNode,
    assign_regions,
    fit_tree,
    ols_solve,
    select_leaves_cv,
)

DEFAULT_CV_CANDIDATES = (1, 2, 3, 4, 5, 6, 7, 8)
PATIENCE = 3  # consecutive small-improvement epochs before stopping


@dataclass(frozen=True)
class FitConfig:
    """Hyperparameters of the training loop.

    ``max_leaves`` is either a leaf count or the string ``"cv"`` to pick one
    by k-fold cross-validation over ``cv_candidates``.  ``rel_tol`` bounds
    the relative change of the full-data quasi-likelihood,
    |delta| / (1 + |previous|), below which an epoch counts as stalled.
    """

    learning_rate: float = 0.01
    batch_size: int = 32
    max_epochs: int = 500
    rel_tol: float = 1e-6
    blup_refresh_every: int = 1
    max_leaves: int | str = "cv"
    cv_folds: int = 5
    cv_candidates: tuple[int, ...] = DEFAULT_CV_CANDIDATES
    seed: int = 0
    min_region_fraction: float = 0.05
    min_leaf: int = 10
    family: str = "gaussian"

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 0 or self.blup_refresh_every < 1:
            raise ValueError("batch_size and blup_refresh_every must be >= 1; max_epochs >= 0")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be > 0")
        if not 0.0 < self.min_region_fraction <= 0.5:
            raise ValueError("min_region_fraction must be in (0, 0.5]")
        if isinstance(self.max_leaves, str):
            if self.max_leaves != "cv":
                raise ValueError(f"max_leaves must be a count or 'cv', got {self.max_leaves!r}")
            if self.cv_folds < 2:
                raise ValueError("cv_folds must be >= 2 when max_leaves='cv'")
        elif self.max_leaves < 1:
            raise ValueError("max_leaves must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")
        get_family(self.family)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    quasi_loglik: float
    sigma_b2: float
    sigma_eps2: float


@dataclass(frozen=True)
class SgdState:
    """Parameters carried across epochs; ``epoch`` counts completed passes."""

    beta_star: np.ndarray
    b_hat: np.ndarray
    sigma_b2: float
    sigma_eps2: float
    epoch: int = 0


def sgd_epoch(state: SgdState, d: Dataset, r: RegionAssignment, cfg: FitConfig) -> SgdState:
    """One shuffled pass of mini-batch ascent on the region coefficients.

    Deterministic given (cfg.seed, state.epoch).  b_hat and the variance
    components are left untouched; the caller refreshes them.  A non-finite
    update retries the whole epoch once at half the learning rate, then
    raises :class:`NumericalError`.
    """
    fam = get_family(cfg.family)
    rng = np.random.default_rng([cfg.seed, state.epoch])
    order = rng.permutation(d.n)
    zb = d.Z @ state.b_hat

    def one_pass(lr: float):
        # overflow here is an expected, handled condition (caught by the
        # finiteness checks), so numpy's warnings are silenced
        beta = state.beta_star.copy()
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            for start in range(0, d.n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                Xb = d.X[idx]
                reg = r.region[idx]
                eta = np.einsum("ij,ji->i", Xb, beta[:, reg - 1]) + zb[idx]
                mu = fam.inverse(eta)
                score = (d.y[idx] - mu) / (fam.alpha * fam.variance(mu) * fam.dlink(mu))
                score /= fam.dispersion
                if not np.all(np.isfinite(score)):
                    return None
                for m in np.unique(reg):
                    mask = reg == m
                    grad = Xb[mask].T @ score[mask]
                    beta[:, m - 1] += lr * grad / mask.sum()
            if not np.all(np.isfinite(beta)):
                return None
        return beta

    beta = one_pass(cfg.learning_rate)
    if beta is None:
        beta = one_pass(cfg.learning_rate / 2.0)
        if beta is None:
            raise NumericalError(
                f"SGD diverged in epoch {state.epoch} even after halving the learning rate"
            )
    return replace(state, beta_star=beta, epoch=state.epoch + 1)


def _tree_to_dicts(tree: RegressionTree) -> list[dict]:
    out = []
    for nd in tree.nodes:
        if nd.feature < 0:
            out.append({"leaf": True})
        else:
            out.append({"leaf": False, "feature": nd.feature, "threshold": nd.threshold,
                        "left": nd.left, "right": nd.right})
    return out


def merge_small_regions(tree: RegressionTree, X: np.ndarray, y: np.ndarray,
                        min_count: float) -> RegressionTree:
    """Merge any leaf holding fewer than ``min_count`` rows into its sibling.

    The undersized leaf is spliced out: its parent is replaced by the sibling
    subtree, so the small region's rows are re-routed into the sibling's
    regions (a single combined leaf when the sibling is itself a leaf).
    Repeats, smallest leaf first, until every leaf is large enough or one
    leaf remains.  Leaf means and region numbering are rebuilt from the data.
    """
    nodes = _tree_to_dicts(tree)
    while True:
        live = [i for i, nd in enumerate(nodes) if nd is not None and nd["leaf"]]
        if len(live) <= 1:
            break
        node_of = _route_to_nodes_live(nodes, X)
        counts = {i: int(np.sum(node_of == i)) for i in live}
        small = [i for i in live if counts[i] < min_count]
        if not small:
            break
        victim = min(small, key=lambda i: (counts[i], i))
        parent = _parent_of(nodes, victim)
        sibling = (nodes[parent]["right"] if nodes[parent]["left"] == victim
                   else nodes[parent]["left"])
        nodes[parent] = nodes[sibling]
        nodes[victim] = None
        nodes[sibling] = None
    return _rebuild(nodes, X, y)


def _route_to_nodes_live(nodes, X):
    node_of = np.zeros(X.shape[0], dtype=int)
    stack = [(0, np.arange(X.shape[0]))]
    while stack:
        nid, rows = stack.pop()
        nd = nodes[nid]
        if nd["leaf"]:
            node_of[rows] = nid
            continue
        mask = X[rows, nd["feature"]] <= nd["threshold"]
        stack.append((nd["left"], rows[mask]))
        stack.append((nd["right"], rows[~mask]))
    return node_of


def _parent_of(nodes, child):
    for i, nd in enumerate(nodes):
        if nd is not None and not nd["leaf"] and child in (nd["left"], nd["right"]):
            return i
    raise NumericalError("leaf has no parent; tree structure corrupt")


def _rebuild(nodes, X, y) -> RegressionTree:
    """Compact the surviving nodes into a fresh tree with 1..M leaf regions."""
    node_of = _route_to_nodes_live(nodes, X)
    out: list[TreeNode | None] = []
    region = 0

    def visit(nid) -> int:
        nonlocal region
        nd = nodes[nid]
        my_id = len(out)
        if nd["leaf"]:
            rows = node_of == nid
            region += 1
            mean = float(y[rows].mean()) if rows.any() else 0.0
            out.append(TreeNode(region=region, leaf_mean=mean, n=int(rows.sum())))
            return my_id
        out.append(None)  # placeholder until children ids are known
        left_id = visit(nd["left"])
        right_id = visit(nd["right"])
        out[my_id] = TreeNode(feature=nd["feature"], threshold=nd["threshold"],
                              left=left_id, right=right_id,
                              n=out[left_id].n + out[right_id].n)
        return my_id

    visit(0)
    return RegressionTree(tuple(out), region)


def fit_gtimm(d: Dataset, cfg: FitConfig) -> GtimmModel:
    """Train a tree-informed mixed model.

    Pipeline: choose the leaf count (fixed or by CV), grow the tree, merge
    undersized regions, initialize each region's coefficients by OLS, then
    alternate SGD epochs with BLUP and variance refreshes until the
    quasi-likelihood stalls for three epochs or ``max_epochs`` is reached.
    The best-quasi-likelihood iterate (including the initializer) is
    returned, with the per-epoch history attached.
    """
    if cfg.max_leaves == "cv":
        m_leaves = select_leaves_cv(d, cfg.cv_folds, cfg.cv_candidates, cfg.seed,
                                    min_leaf=cfg.min_leaf)
    else:
        m_leaves = int(cfg.max_leaves)
    tree = fit_tree(d, m_leaves, cfg.min_leaf)
    tree = merge_small_regions(tree, d.X, d.y, cfg.min_region_fraction * d.n)
    r = assign_regions(tree, d.X)
    if np.any(r.counts < d.p):
        raise IllPosedRegionError(
            f"a region holds fewer than p={d.p} observations after merging; "
            "lower max_leaves or raise min_leaf"
        )
    thin = int(np.sum(r.counts < 5 * d.p))
    if thin:
        warnings.warn(
            f"{thin} region(s) hold fewer than 5*p={5 * d.p} observations; "
            "their coefficient estimates may be unstable",
            stacklevel=2,
        )

    m = tree.leaf_count
    beta = np.empty((d.p, m))
    for region in range(1, m + 1):
        rows = r.region == region
        beta[:, region - 1] = ols_solve(d.X[rows], d.y[rows])
    resid0 = d.y - fixed_part_eta(beta, d.X, r.region)
    sigma_eps2 = max(float(np.var(resid0, ddof=1)) if d.n > 1 else 1.0, 1e-8)
    state = SgdState(beta, np.zeros(d.q), 1.0, sigma_eps2)

    def model_at(s: SgdState) -> GtimmModel:
        return GtimmModel(s.beta_star, s.b_hat, s.sigma_b2, s.sigma_eps2, tree,
                          cfg.family)

    ql = quasi_loglik(model_at(state), d, r)
    history = [EpochRecord(0, ql, state.sigma_b2, state.sigma_eps2)]
    best_ql, best_state = ql, state
    prev_ql, stall = ql, 0

    for epoch in range(1, cfg.max_epochs + 1):
        state = sgd_epoch(state, d, r, cfg)
        if epoch % cfg.blup_refresh_every == 0:
            b_hat = blup(state.beta_star, d, r, state.sigma_b2, state.sigma_eps2,
                         cfg.family)
            sb2, se2 = update_variance_components(d, r, state.beta_star, b_hat,
                                                  state.sigma_b2, state.sigma_eps2)
            state = replace(state, b_hat=b_hat, sigma_b2=sb2, sigma_eps2=se2)
        ql = quasi_loglik(model_at(state), d, r)
        history.append(EpochRecord(epoch, ql, state.sigma_b2, state.sigma_eps2))
        if ql > best_ql:
            best_ql, best_state = ql, state
        rel = abs(ql - prev_ql) / (1.0 + abs(prev_ql))
        stall = stall + 1 if rel < cfg.rel_tol else 0
        prev_ql = ql
        if stall >= PATIENCE:
            break

    model = model_at(best_state)
    model.history = history
    model.selected_leaves = m_leaves
    return model


def predict(model: GtimmModel, X: np.ndarray, Z: np.ndarray | None = None,
            include_random: bool = True) -> np.ndarray:
    """Route rows through the tree and evaluate h(x' beta^(m) + z' b_hat).

    With ``include_random`` the random term z' b_hat is added; rows whose Z
    encoding is all zero (unseen groups) contribute 0 there and a warning is
    recorded.  Without it, predictions are marginal (fixed part only).
    """
    X = np.asarray(X, dtype=float)
    region = model.tree.route(X)
    eta = fixed_part_eta(model.beta_star, X, region)
    if include_random:
        if Z is None:
            raise ValueError("include_random=True requires Z")
        Z = np.asarray(Z, dtype=float)
        if Z.shape != (X.shape[0], model.b_hat.shape[0]):
            raise ValueError(
                f"Z must be {X.shape[0]} x {model.b_hat.shape[0]}, got {Z.shape}"
            )
        dead = ~Z.any(axis=1)
        if dead.any():
            warnings.warn(
                f"{int(dead.sum())} row(s) have an all-zero random-effect encoding; "
                "their random term contributes 0",
                stacklevel=2,
            )
        eta = eta + Z @ model.b_hat
    return get_family(model.family).inverse(eta)
