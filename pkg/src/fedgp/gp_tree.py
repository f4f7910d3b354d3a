"""
Per-client multiclass model: a binary tree of GP classifiers.

Classes are split recursively by 2-means++ on their embedding prototypes
until every leaf holds one class.  Each internal node is a binary GP over
the points of its classes, labelled 1 when their class lies in the left
subtree.  A class probability is the product of the node Bernoullis along
the class's root-to-leaf path.

Three node variants share the tree:

* ``exact``       the node conditions on the client's routed points;
* ``ip-data``     training conditions on the routed inducing points only and
                  scores the client's points; test time conditions on
                  inducing points plus client data;
* ``ip-compute``  FITC node over the client's points with the routed
                  inducing inputs.

Kernel learning works on a frozen *plan* (tree, splits and omega samples
from Gibbs), so the objective is a deterministic function of the network
parameters and the inducing inputs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import ClusterError, kmeans2

from .deep_kernel import KernelConfig, backward, embed, forward, gram, prior_gram, rbf_backward
from .fitc_node import FITCCache, fitc_cache, fitc_marginal_grad, fitc_predictive, fitc_predictive_grad, fitc_run_gibbs
from .gpc_node import (
    DEGENERATE_CONFIDENCE,
    GibbsConfig,
    bernoulli_loglik_grad,
    marginal_loglik_grad,
    predictive_bernoulli,
    predictive_posterior,
    predictive_posterior_backward,
    run_gibbs,
)
from .inducing import (
    InducingSet,
    conditioning_distribution,
    ipdata_test_conditioning,
    label_distribution,
    route_inducing,
)

__all__ = [
    "VARIANTS",
    "TreeNode",
    "Tree",
    "TreeConfig",
    "ClassRatios",
    "NodeFit",
    "GPTreeModel",
    "ObjectiveFallbackWarning",
    "NodePlan",
    "ObjectivePlan",
    "build_tree",
    "fit_tree",
    "node_bernoullis",
    "class_posterior",
    "predict_proba",
    "correct_class_ratios",
    "correct_node_bernoulli",
    "prepare_objective",
    "evaluate_objective",
    "train_objective",
]

VARIANTS = ("exact", "ip-data", "ip-compute")
OBJECTIVES = ("marginal", "predictive")
CORRECTIONS = ("node", "leaf", "off")


class ObjectiveFallbackWarning(UserWarning):
    """A node could not be split for the predictive objective and used the marginal."""


# --------------------------------------------------------------------------- tree


@dataclass
class TreeNode:
    classes: tuple
    left: int | None = None
    right: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class Tree:
    """Nodes in creation order; ``nodes[0]`` is the root."""

    nodes: list

    @property
    def classes(self) -> tuple:
        return self.nodes[0].classes

    @property
    def internal(self) -> list:
        return [i for i, n in enumerate(self.nodes) if not n.is_leaf]

    def children_classes(self, i):
        node = self.nodes[i]
        return self.nodes[node.left].classes, self.nodes[node.right].classes

    def paths(self) -> dict:
        """Class -> list of (node index, goes_left)."""
        out = {}

        def walk(i, path):
            node = self.nodes[i]
            if node.is_leaf:
                out[node.classes[0]] = path
                return
            walk(node.left, path + [(i, True)])
            walk(node.right, path + [(i, False)])

        walk(0, [])
        return out

    def route(self, i, labels):
        """Mask of points under node ``i`` and their routing labels (1 = left)."""
        labels = np.asarray(labels)
        left, right = self.children_classes(i)
        lmask = np.isin(labels, left)
        mask = lmask | np.isin(labels, right)
        return mask, lmask[mask].astype(float)

    def to_dict(self) -> dict:
        return {"nodes": [{"classes": list(map(int, n.classes)), "left": n.left, "right": n.right} for n in self.nodes]}

    @classmethod
    def from_dict(cls, d) -> "Tree":
        return cls([TreeNode(tuple(n["classes"]), n["left"], n["right"]) for n in d["nodes"]])


def _split_prototypes(protos: np.ndarray, rng: np.random.Generator, n_init: int = 5):
    """Two-way k-means++ split of prototype rows; returns (left idx, right idx)."""
    k = protos.shape[0]
    if k == 2:
        return np.array([0]), np.array([1])
    if np.allclose(protos, protos[0]):
        # nothing to cluster on; split by position
        return np.arange(k // 2), np.arange(k // 2, k)
    best, best_cost = None, np.inf
    for _ in range(n_init):
        try:
            centers, assign = kmeans2(protos, 2, iter=20, minit="++", missing="raise", rng=rng)
        except ClusterError:
            continue
        if assign.min() == assign.max():
            continue
        cost = np.sum((protos - centers[assign]) ** 2)
        if cost < best_cost - 1e-12:
            best, best_cost = assign, cost
    if best is None:
        # every restart collapsed: peel off the prototype farthest from the mean
        far = np.argmax(np.sum((protos - protos.mean(0)) ** 2, axis=1))
        best = np.zeros(k, dtype=int)
        best[far] = 1
    # the cluster holding the smallest class index goes left, so output is canonical
    left_label = best[0]
    return np.flatnonzero(best == left_label), np.flatnonzero(best != left_label)


def build_tree(embeddings, labels, rng: np.random.Generator) -> Tree:
    """Divisive 2-means++ clustering of class prototypes down to singleton leaves."""
    embeddings = np.asarray(embeddings, dtype=float)
    labels = np.asarray(labels, dtype=int)
    classes = np.unique(labels)
    if classes.size == 0:
        raise ValueError("need at least one class")
    protos = np.stack([embeddings[labels == c].mean(axis=0) for c in classes])
    nodes: list = []

    def grow(idx):
        me = len(nodes)
        nodes.append(TreeNode(tuple(int(c) for c in classes[idx])))
        if idx.size == 1:
            return me
        li, ri = _split_prototypes(protos[idx], rng)
        nodes[me].left = grow(idx[li])
        nodes[me].right = grow(idx[ri])
        return me

    grow(np.arange(classes.size))
    return Tree(nodes)


# --------------------------------------------------------------------- configuration


@dataclass(frozen=True)
class TreeConfig:
    variant: str = "exact"
    objective: str = "predictive"
    holdout_fraction: float = 0.5
    loss_scale: float = 1.0
    combine_inducing: bool = True     # ip-data: condition on inducing + client data at test time
    ratio_correction: str = "node"    # node | leaf | off
    ratio_source: str = "combined"    # combined | inducing
    resample_test_omega: bool = False  # ip-compute: fresh chains per prediction call

    def problems(self) -> list:
        out = []
        if self.variant not in VARIANTS:
            out.append(f"variant: expected one of {VARIANTS}, got {self.variant!r}")
        if self.objective not in OBJECTIVES:
            out.append(f"objective: expected one of {OBJECTIVES}, got {self.objective!r}")
        if self.variant == "ip-data" and self.objective == "marginal":
            out.append("objective: ip-data trains on the predictive objective only")
        if not 0.0 <= self.holdout_fraction < 1.0:
            out.append("holdout_fraction: must lie in [0, 1)")
        if self.loss_scale <= 0:
            out.append("loss_scale: must be positive")
        if self.ratio_correction not in CORRECTIONS:
            out.append(f"ratio_correction: expected one of {CORRECTIONS}")
        if self.ratio_source not in ("combined", "inducing"):
            out.append("ratio_source: expected combined or inducing")
        return out

    def __post_init__(self):
        bad = self.problems()
        if bad:
            raise ValueError("; ".join(bad))

    @property
    def uses_inducing(self) -> bool:
        return self.variant != "exact"


@dataclass
class ClassRatios:
    """Client class distribution ``q`` and conditioning-set distribution ``p``."""

    classes: tuple
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        for name in ("q", "p"):
            v = getattr(self, name)
            if v.shape != (len(self.classes),) or np.any(v < 0) or not np.isclose(v.sum(), 1.0):
                raise ValueError(f"{name} must be a distribution over the classes")

    def masses(self, left_classes, right_classes):
        idx = {c: i for i, c in enumerate(self.classes)}
        li = [idx[c] for c in left_classes]
        ri = [idx[c] for c in right_classes]
        return self.q[li].sum(), self.q[ri].sum(), self.p[li].sum(), self.p[ri].sum()


def correct_class_ratios(posterior, ratios: ClassRatios) -> np.ndarray:
    """Reweight class probabilities by ``q / p`` and renormalise (rows of ``posterior``)."""
    post = np.asarray(posterior, dtype=float)
    positive = post > 0
    if np.any(positive & (ratios.p == 0)):
        raise ValueError("p is zero where the posterior puts mass")
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(ratios.p > 0, ratios.q / ratios.p, 0.0)
    out = post * w
    return out / out.sum(axis=-1, keepdims=True)


def correct_node_bernoulli(b, q_left, q_right, p_left, p_right):
    """Binary version of the class-ratio correction for one node's left probability."""
    if min(p_left, p_right) <= 0:
        raise ValueError("conditioning mass must be positive on both sides")
    r = (q_left / p_left) / (q_right / p_right) if q_right > 0 else np.inf
    b = np.asarray(b, dtype=float)
    if np.isinf(r):
        return np.ones_like(b)
    return b * r / (b * r + 1.0 - b)


# ------------------------------------------------------------------------ fitting


@dataclass
class NodeFit:
    """Everything a node needs to predict.

    ``kind`` is ``"gp"`` (exact GP on ``inputs``), ``"fitc"`` (FITC over
    ``inputs`` with inducing inputs ``inducing_inputs``) or ``"degenerate"``.
    """

    kind: str
    inputs: np.ndarray | None = None
    y: np.ndarray | None = None
    omega: np.ndarray | None = None
    label: float | None = None
    inducing_inputs: np.ndarray | None = None
    cache: FITCCache | None = None


@dataclass
class GPTreeModel:
    tree: Tree
    fits: dict
    ratios: ClassRatios | None
    config: TreeConfig
    kernel: KernelConfig
    gibbs: GibbsConfig

    @property
    def classes(self) -> tuple:
        return self.tree.classes


def _kss(kernel: KernelConfig, n):
    return np.full(n, kernel.output_scale)


def _fitc_blocks(kernel, data_emb, ind_emb):
    knn = np.full(data_emb.shape[0], kernel.output_scale + kernel.jitter)
    knm = gram(kernel, data_emb, ind_emb)
    kmm = prior_gram(kernel, ind_emb)
    return knn, knm, kmm


def _fit_node(kernel, gibbs, inputs, y, rng, inducing_inputs=None, n_chains=None, n_samples=None) -> NodeFit:
    if y.size == 0 or np.unique(y).size < 2:
        label = float(y[0]) if y.size else 1.0
        return NodeFit("degenerate", label=label)
    n_chains = gibbs.test_chains if n_chains is None else n_chains
    n_samples = gibbs.test_samples if n_samples is None else n_samples
    if inducing_inputs is None:
        k = prior_gram(kernel, inputs)
        run = run_gibbs(k, y, n_chains, rng, gibbs.burn_in, gibbs.steps_between_samples, n_samples,
                        chol_k=kernel.cholesky(k))
        return NodeFit("gp", inputs, y, run.pooled_omega())
    knn, knm, kmm = _fitc_blocks(kernel, inputs, inducing_inputs)
    run = fitc_run_gibbs(knn, knm, kmm, y, n_chains, rng, gibbs.burn_in, gibbs.steps_between_samples, n_samples,
                         factor=kernel.cholesky)
    omega = run.pooled_omega()
    cache = fitc_cache(knn, knm, kmm, y, omega, factor=kernel.cholesky)
    return NodeFit("fitc", inputs, y, omega, inducing_inputs=inducing_inputs, cache=cache)


def fit_tree(embeddings, labels, rng: np.random.Generator, config: TreeConfig = TreeConfig(),
             kernel: KernelConfig = KernelConfig(), gibbs: GibbsConfig = GibbsConfig(),
             inducing: InducingSet | None = None, tree: Tree | None = None) -> GPTreeModel:
    """Build (or reuse) the tree and run test-time Gibbs chains at every node."""
    embeddings = np.asarray(embeddings, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if config.uses_inducing and inducing is None:
        raise ValueError(f"variant {config.variant!r} needs an inducing set")
    if tree is None:
        tree = build_tree(embeddings, labels, rng)
    fits = {}
    for i in tree.internal:
        mask, y = tree.route(i, labels)
        left, right = tree.children_classes(i)
        if config.variant == "exact":
            fits[i] = _fit_node(kernel, gibbs, embeddings[mask], y, rng)
        elif config.variant == "ip-data":
            X, yv, _ = ipdata_test_conditioning(inducing, left, right, embeddings[mask], y, config.combine_inducing)
            fits[i] = _fit_node(kernel, gibbs, X, yv, rng)
        else:
            idx, _ = route_inducing(inducing, left, right)
            fits[i] = _fit_node(kernel, gibbs, embeddings[mask], y, rng, inducing.Xbar[idx])
    classes = tree.classes
    ratios = None
    if len(classes) > 1 and labels.size:
        q = label_distribution(labels, classes)
        if config.variant == "ip-data":
            client = labels if config.combine_inducing else np.zeros(0, dtype=int)
            source = config.ratio_source if config.combine_inducing else "inducing"
            p = conditioning_distribution(inducing, client, classes, source)
        else:
            p = q
        ratios = ClassRatios(classes, q, p)
    return GPTreeModel(tree, fits, ratios, config, kernel, gibbs)


# --------------------------------------------------------------------- prediction


def _node_left_prob(model: GPTreeModel, fit: NodeFit, emb_star, rng):
    k = model.kernel
    t = emb_star.shape[0]
    if fit.kind == "degenerate":
        return np.full(t, DEGENERATE_CONFIDENCE if fit.label == 1 else 1.0 - DEGENERATE_CONFIDENCE)
    if fit.kind == "gp":
        kmat = prior_gram(k, fit.inputs)
        mu, var = predictive_posterior(kmat, fit.y, fit.omega, gram(k, fit.inputs, emb_star), _kss(k, t))
    else:
        cache = fit.cache
        if model.config.resample_test_omega:
            if rng is None:
                raise ValueError("resampling test omega needs a random generator")
            knn, knm, kmm = _fitc_blocks(k, fit.inputs, fit.inducing_inputs)
            g = model.gibbs
            run = fitc_run_gibbs(knn, knm, kmm, fit.y, g.test_chains, rng, g.burn_in, g.steps_between_samples,
                                 g.test_samples, factor=k.cholesky)
            cache = fitc_cache(knn, knm, kmm, fit.y, run.pooled_omega(), factor=k.cholesky)
        mu, var = fitc_predictive(gram(k, emb_star, fit.inducing_inputs), _kss(k, t), cache, return_all=True)
    return predictive_bernoulli(mu, var, model.gibbs.gh_degree).mean(axis=0)


def node_bernoullis(model: GPTreeModel, emb_star, corrected: bool = False, rng=None) -> dict:
    """Left-branch probability at every internal node, keyed by node index."""
    emb_star = np.atleast_2d(np.asarray(emb_star, dtype=float))
    out = {}
    for i in model.tree.internal:
        b = _node_left_prob(model, model.fits[i], emb_star, rng)
        if corrected and model.ratios is not None:
            left, right = model.tree.children_classes(i)
            b = correct_node_bernoulli(b, *model.ratios.masses(left, right))
        out[i] = b
    return out


def class_posterior(model: GPTreeModel, emb_star, corrected: bool | None = None, rng=None) -> np.ndarray:
    """Class probabilities (T, n_classes) in the order of ``model.classes``.

    ``corrected`` defaults to the model's ratio-correction setting.
    """
    emb_star = np.atleast_2d(np.asarray(emb_star, dtype=float))
    t = emb_star.shape[0]
    classes = model.classes
    if len(classes) == 1:
        return np.ones((t, 1))
    mode = model.config.ratio_correction
    if corrected is None:
        corrected = mode != "off"
    node_level = corrected and mode != "leaf"
    bern = node_bernoullis(model, emb_star, corrected=node_level, rng=rng)
    paths = model.tree.paths()
    out = np.ones((t, len(classes)))
    for j, c in enumerate(classes):
        for i, goes_left in paths[c]:
            out[:, j] *= bern[i] if goes_left else 1.0 - bern[i]
    if corrected and not node_level:
        out = correct_class_ratios(out, model.ratios)
    return out / out.sum(axis=1, keepdims=True)


def predict_proba(model: GPTreeModel, params, X, corrected=None, rng=None) -> np.ndarray:
    return class_posterior(model, embed(params, X), corrected, rng)


# ---------------------------------------------------------------------- objective


@dataclass
class NodePlan:
    """Frozen pieces of one node's objective term.

    ``cond`` indexes client points (or inducing points for ip-data) that the
    node conditions on; ``target`` indexes client points that are scored
    (predictive kinds only); ``ind`` indexes inducing points (ip-compute).
    """

    node: int
    kind: str                 # marginal | predictive | skip
    cond: np.ndarray
    y: np.ndarray
    omega: np.ndarray | None = None
    target: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    y_target: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ind: np.ndarray | None = None
    cond_is_inducing: bool = False


@dataclass
class ObjectivePlan:
    tree: Tree
    nodes: list
    n_points: int
    config: TreeConfig
    fallback_nodes: list


def _predictive_split(y, frac, rng):
    """Stratified keep/hold split of a node's points; None when infeasible."""
    keep, hold = [], []
    for lab in (0.0, 1.0):
        idx = np.flatnonzero(y == lab)
        if idx.size < 2:
            return None
        n_hold = min(int(np.floor(frac * idx.size + 0.5)), idx.size - 1)
        perm = rng.permutation(idx)
        hold.append(perm[:n_hold])
        keep.append(perm[n_hold:])
    hold = np.sort(np.concatenate(hold))
    if hold.size == 0:
        return None
    return np.sort(np.concatenate(keep)), hold


def prepare_objective(embeddings, labels, rng: np.random.Generator, config: TreeConfig = TreeConfig(),
                      kernel: KernelConfig = KernelConfig(), gibbs: GibbsConfig = GibbsConfig(),
                      inducing: InducingSet | None = None, tree: Tree | None = None) -> ObjectivePlan:
    """Fix the tree, per-node splits and omega samples for one optimisation step.

    Omega samples are the final state of each of ``gibbs.train_chains``
    chains.  Nodes whose predictive split is infeasible fall back to the
    marginal term and are listed in ``fallback_nodes`` (with a warning).
    """
    embeddings = np.asarray(embeddings, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if config.uses_inducing and inducing is None:
        raise ValueError(f"variant {config.variant!r} needs an inducing set")
    if tree is None:
        tree = build_tree(embeddings, labels, rng)
    plans, fallback = [], []
    chains, burn, thin = gibbs.train_chains, gibbs.burn_in, gibbs.steps_between_samples
    for i in tree.internal:
        mask, y = tree.route(i, labels)
        idx = np.flatnonzero(mask)
        left, right = tree.children_classes(i)
        if config.variant == "ip-data":
            ind, yi = route_inducing(inducing, left, right)
            if np.unique(yi).size < 2 or idx.size == 0:
                plans.append(NodePlan(i, "skip", ind, yi))
                continue
            xb = inducing.Xbar[ind]
            k = prior_gram(kernel, xb)
            run = run_gibbs(k, yi, chains, rng, burn, thin, chol_k=kernel.cholesky(k))
            plans.append(NodePlan(i, "predictive", ind, yi, run.pooled_omega(), idx, y, cond_is_inducing=True))
            continue
        if np.unique(y).size < 2:
            plans.append(NodePlan(i, "skip", idx, y))
            continue
        kind = config.objective
        cond, ycond, target, ytarget = idx, y, np.zeros(0, dtype=int), np.zeros(0)
        if kind == "predictive":
            split = _predictive_split(y, config.holdout_fraction, rng)
            if split is None:
                kind = "marginal"
                fallback.append(i)
            else:
                keep, hold = split
                cond, ycond, target, ytarget = idx[keep], y[keep], idx[hold], y[hold]
        ind = None
        if config.variant == "exact":
            k = prior_gram(kernel, embeddings[cond])
            run = run_gibbs(k, ycond, chains, rng, burn, thin, chol_k=kernel.cholesky(k))
        else:
            ind, _ = route_inducing(inducing, left, right)
            knn, knm, kmm = _fitc_blocks(kernel, embeddings[cond], inducing.Xbar[ind])
            run = fitc_run_gibbs(knn, knm, kmm, ycond, chains, rng, burn, thin, factor=kernel.cholesky)
        plans.append(NodePlan(i, kind, cond, ycond, run.pooled_omega(), target, ytarget, ind))
    if fallback:
        warnings.warn(f"predictive split infeasible at nodes {fallback}; using the marginal term there",
                      ObjectiveFallbackWarning, stacklevel=2)
    return ObjectivePlan(tree, plans, labels.size, config, fallback)


def _exact_predictive_term(kernel, gh, e_cond, e_tgt, y, omega, y_tgt):
    """Value and gradients (cond, target embeddings) of a predictive term."""
    kraw = gram(kernel, e_cond, e_cond)
    kmat = kraw + kernel.jitter * np.eye(kraw.shape[0])
    ks = gram(kernel, e_cond, e_tgt)
    mu, var, cache = predictive_posterior(kmat, y, omega, ks, _kss(kernel, e_tgt.shape[0]), return_cache=True)
    lab = np.broadcast_to(y_tgt, mu.shape)
    lp, dmu, dvar = bernoulli_loglik_grad(mu, var, lab, gh)
    n_om = mu.shape[0]
    dvar = np.where(var <= 1e-12, 0.0, dvar)
    g_k, g_ks = predictive_posterior_backward(ks, cache, dmu / n_om, dvar / n_om)
    ga, gb = rbf_backward(kernel, e_cond, e_cond, kraw, g_k)
    gc, gt = rbf_backward(kernel, e_cond, e_tgt, ks, g_ks)
    return lp.sum() / n_om, ga + gb + gc, gt


def evaluate_objective(plan: ObjectivePlan, params, X, kernel: KernelConfig = KernelConfig(),
                       Xbar=None, gh_degree: int = 20):
    """Objective value with gradients w.r.t. the network parameters and ``Xbar``.

    The value is ``loss_scale / N`` times the sum over nodes of the marginal
    terms or of the held-out predictive log-likelihoods, each averaged over
    the plan's omega samples.  ``Xbar`` gradient is None for the exact variant.
    """
    emb, cache = forward(params, X)
    g_emb = np.zeros_like(emb)
    g_xbar = None if Xbar is None else np.zeros_like(Xbar)
    total = 0.0
    variant = plan.config.variant
    for np_ in plan.nodes:
        if np_.kind == "skip":
            continue
        if np_.cond_is_inducing:
            xb = Xbar[np_.cond]
            val, g_c, g_t = _exact_predictive_term(kernel, gh_degree, xb, emb[np_.target], np_.y, np_.omega,
                                                   np_.y_target)
            np.add.at(g_xbar, np_.cond, g_c)
            np.add.at(g_emb, np_.target, g_t)
        elif variant == "exact":
            e_c = emb[np_.cond]
            if np_.kind == "marginal":
                kraw = gram(kernel, e_c, e_c)
                val, g_k = marginal_loglik_grad(kraw + kernel.jitter * np.eye(kraw.shape[0]), np_.y, np_.omega)
                ga, gb = rbf_backward(kernel, e_c, e_c, kraw, g_k)
                np.add.at(g_emb, np_.cond, ga + gb)
            else:
                val, g_c, g_t = _exact_predictive_term(kernel, gh_degree, e_c, emb[np_.target], np_.y, np_.omega,
                                                       np_.y_target)
                np.add.at(g_emb, np_.cond, g_c)
                np.add.at(g_emb, np_.target, g_t)
        else:
            e_c = emb[np_.cond]
            xb = Xbar[np_.ind]
            knn, knm, kmm = _fitc_blocks(kernel, e_c, xb)
            kmm_raw = kmm - kernel.jitter * np.eye(kmm.shape[0])
            fc = fitc_cache(knn, knm, kmm, np_.y, np_.omega, factor=kernel.cholesky)
            if np_.kind == "marginal":
                val, g_knm, g_kmm = fitc_marginal_grad(knn, knm, kmm, np_.y, np_.omega, cache=fc)
            else:
                e_t = emb[np_.target]
                ksm = gram(kernel, e_t, xb)
                kss = _kss(kernel, e_t.shape[0])
                mu, var = fitc_predictive(ksm, kss, fc, return_all=True)
                lp, dmu, dvar = bernoulli_loglik_grad(mu, var, np.broadcast_to(np_.y_target, mu.shape), gh_degree)
                n_om = mu.shape[0]
                val = lp.sum() / n_om
                g_knm, g_kmm, g_ksm = fitc_predictive_grad(knm, ksm, kss, fc, dmu / n_om, dvar / n_om)
                gt, gx = rbf_backward(kernel, e_t, xb, ksm, g_ksm)
                np.add.at(g_emb, np_.target, gt)
                np.add.at(g_xbar, np_.ind, gx)
            gc, gx = rbf_backward(kernel, e_c, xb, knm, g_knm)
            np.add.at(g_emb, np_.cond, gc)
            np.add.at(g_xbar, np_.ind, gx)
            ga, gb = rbf_backward(kernel, xb, xb, kmm_raw, g_kmm)
            np.add.at(g_xbar, np_.ind, ga + gb)
        total += val
    scale = plan.config.loss_scale / max(plan.n_points, 1)
    g_params = backward(params, cache, g_emb * scale)
    if g_xbar is not None:
        g_xbar = g_xbar * scale
    return total * scale, g_params, g_xbar


def train_objective(params, X, labels, rng, config: TreeConfig = TreeConfig(), kernel: KernelConfig = KernelConfig(),
                    gibbs: GibbsConfig = GibbsConfig(), inducing: InducingSet | None = None, tree: Tree | None = None):
    """One-shot objective: plan at the current parameters, then evaluate.

    Returns ``(value, grad_params, grad_Xbar, plan)``.
    """
    emb = embed(params, X)
    plan = prepare_objective(emb, labels, rng, config, kernel, gibbs, inducing, tree)
    xbar = None if inducing is None else inducing.Xbar
    value, g_p, g_x = evaluate_objective(plan, params, X, kernel, xbar, gibbs.gh_degree)
    return value, g_p, g_x, plan
