"""
Simulated federation: datasets, client partitioning, feature-noise channels,
the round loop and evaluation.

The server owns the feature-network parameters and, for the inducing
variants, the shared inducing inputs.  Each round samples clients uniformly
without replacement; every sampled client rebuilds its tree with the
current features, takes ``local_epochs`` full-batch gradient steps on its
objective and returns the result.  The server replaces its state with the
weighted average.

Random streams are derived from the master seed so results do not depend on
the worker count: ``[seed, round]`` for client sampling and
``[seed, round, client id]`` for each client.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .bound import BoundReport, bound_report
from .deep_kernel import SGD, FeatureNetParams, KernelConfig, embed, init_params
from .gp_tree import GPTreeModel, TreeConfig, build_tree, class_posterior, fit_tree, train_objective
from .gpc_node import GibbsConfig
from .inducing import InducingSet, class_means, init_inducing
from .metrics import ece, mce

__all__ = [
    "Dataset",
    "ClientShard",
    "PartitionConfig",
    "FederationConfig",
    "NoiseModel",
    "ServerState",
    "ClientResult",
    "RoundError",
    "gaussian_blobs",
    "save_dataset",
    "load_dataset",
    "partition",
    "assign_classes",
    "stratified_split",
    "make_shard",
    "apply_noise",
    "init_server",
    "client_update",
    "aggregate",
    "run_round",
    "train_federated",
    "train_local",
    "evaluate_federated",
    "ood_proportions",
    "spawn_ood_clients",
    "client_bound",
]

DATASET_TAG = "# format: fedgp-dataset/1"
AGGREGATIONS = ("uniform", "by_sample_count")
NOISE_KINDS = ("gaussian", "dropout", "scale_shift")
_EVAL_STREAM = 7_919       # separates evaluation streams from training rounds
_LOCAL_STREAM = 104_729


# ------------------------------------------------------------------------ data


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=int).ravel()
        if self.X.shape[0] != self.y.size:
            raise ValueError("X and y lengths differ")
        if self.y.size and self.y.min() < 0:
            raise ValueError("class labels must be non-negative integers")

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1 if self.y.size else 0

    def __len__(self):
        return self.y.size

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx])


def gaussian_blobs(n_classes: int, n_per_class: int, rng: np.random.Generator, dim: int = 2,
                   radius: float = 3.0, sigma: float = 0.5) -> Dataset:
    """Isotropic blobs with class means evenly spaced on a circle in the first two coordinates."""
    if n_classes < 1 or n_per_class < 1:
        raise ValueError("need at least one class and one point per class")
    if dim < 2:
        raise ValueError("blobs need dim >= 2")
    ang = 2 * np.pi * np.arange(n_classes) / n_classes
    means = np.zeros((n_classes, dim))
    means[:, 0], means[:, 1] = radius * np.cos(ang), radius * np.sin(ang)
    y = np.repeat(np.arange(n_classes), n_per_class)
    X = means[y] + sigma * rng.standard_normal((y.size, dim))
    return Dataset(X, y)


def save_dataset(ds: Dataset, path) -> None:
    """Comma-separated text: tag line, ``n,d`` line, then rows with the class last."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(DATASET_TAG + "\n")
        fh.write(f"{ds.X.shape[0]},{ds.X.shape[1]}\n")
        for row, lab in zip(ds.X, ds.y):
            fh.write(",".join(repr(float(v)) for v in row) + f",{int(lab)}\n")


def load_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != DATASET_TAG:
        raise ValueError(f"{path}: missing format tag {DATASET_TAG!r}")
    try:
        n, d = (int(v) for v in lines[1].split(","))
    except (IndexError, ValueError) as e:
        raise ValueError(f"{path}: bad header line, expected 'n,d'") from e
    rows = lines[2:]
    if len(rows) != n:
        raise ValueError(f"{path}: header says {n} rows, found {len(rows)}")
    X = np.empty((n, d))
    y = np.empty(n, dtype=int)
    for i, ln in enumerate(rows):
        parts = ln.split(",")
        if len(parts) != d + 1:
            raise ValueError(f"{path}: row {i} has {len(parts)} fields, expected {d + 1}")
        X[i] = [float(v) for v in parts[:-1]]
        lab = float(parts[-1])
        if lab != int(lab) or lab < 0:
            raise ValueError(f"{path}: row {i} has a non-integer class {parts[-1]!r}")
        y[i] = int(lab)
    return Dataset(X, y)


# -------------------------------------------------------------------- clients


@dataclass(frozen=True)
class NoiseModel:
    kind: str
    params: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise model {self.kind!r}; expected one of {NOISE_KINDS}")
        need = {"gaussian": 1, "dropout": 1, "scale_shift": 2}[self.kind]
        if len(self.params) != need:
            raise ValueError(f"noise model {self.kind!r} takes {need} parameter(s)")
        if self.kind == "gaussian" and self.params[0] < 0:
            raise ValueError("gaussian sigma must be non-negative")
        if self.kind == "dropout" and not 0 <= self.params[0] <= 1:
            raise ValueError("dropout p must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": [float(p) for p in self.params], "seed": int(self.seed)}


@dataclass
class ClientShard:
    cid: int
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    classes: tuple
    noise: NoiseModel | None = None
    indices: dict | None = None    # split -> row indices into the source dataset

    def __post_init__(self):
        present = np.unique(np.concatenate([self.y_train, self.y_val, self.y_test]).astype(int))
        if tuple(present.tolist()) != tuple(self.classes):
            raise ValueError(f"client {self.cid}: class list {self.classes} does not match labels {present}")
        if self.indices is not None:
            parts = [np.asarray(self.indices[k]) for k in ("train", "val", "test")]
            allidx = np.concatenate(parts)
            if np.unique(allidx).size != allidx.size:
                raise ValueError(f"client {self.cid}: splits overlap")

    @property
    def n_train(self) -> int:
        return int(self.y_train.size)

    def split(self, name: str):
        return {"train": (self.X_train, self.y_train), "val": (self.X_val, self.y_val),
                "test": (self.X_test, self.y_test)}[name]


@dataclass(frozen=True)
class PartitionConfig:
    n_clients: int
    classes_per_client: int
    frac_low: float = 0.4
    frac_high: float = 0.6
    val_fraction: float = 0.0
    test_fraction: float = 0.25
    dirichlet_alpha: float | None = None

    def problems(self) -> list:
        out = []
        if self.n_clients < 1:
            out.append("n_clients: must be >= 1")
        if self.classes_per_client < 1:
            out.append("classes_per_client: must be >= 1")
        if not 0 < self.frac_low <= self.frac_high:
            out.append("frac_low/frac_high: need 0 < low <= high")
        if not (0 <= self.val_fraction and 0 <= self.test_fraction and self.val_fraction + self.test_fraction < 1):
            out.append("val_fraction/test_fraction: need non-negative fractions summing below 1")
        if self.dirichlet_alpha is not None and self.dirichlet_alpha <= 0:
            out.append("dirichlet_alpha: must be positive when set")
        return out

    def __post_init__(self):
        bad = self.problems()
        if bad:
            raise ValueError("; ".join(bad))


def _largest_remainder(total: int, weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    exact = total * w / w.sum()
    out = np.floor(exact).astype(int)
    short = total - out.sum()
    # ties broken by position, which keeps the result deterministic
    order = np.argsort(-(exact - out), kind="stable")
    out[order[:short]] += 1
    return out


def stratified_split(idx, labels, val_fraction, test_fraction, rng):
    tr, va, te = [], [], []
    for c in np.unique(labels[idx]):
        ci = rng.permutation(idx[labels[idx] == c])
        n_te = int(np.floor(test_fraction * ci.size + 0.5))
        n_va = int(np.floor(val_fraction * ci.size + 0.5))
        n_te = min(n_te, ci.size)
        n_va = min(n_va, ci.size - n_te)
        te.append(ci[:n_te])
        va.append(ci[n_te:n_te + n_va])
        tr.append(ci[n_te + n_va:])
    cat = lambda parts: np.sort(np.concatenate(parts)).astype(int) if parts else np.zeros(0, dtype=int)
    return cat(tr), cat(va), cat(te)


def make_shard(cid, ds: Dataset, tr, va, te) -> ClientShard:
    classes = tuple(np.unique(ds.y[np.concatenate([tr, va, te])]).tolist())
    return ClientShard(cid, ds.X[tr], ds.y[tr], ds.X[va], ds.y[va], ds.X[te], ds.y[te], classes,
                       indices={"train": tr, "val": va, "test": te})


def assign_classes(n_clients: int, k: int, n_classes: int, rng: np.random.Generator) -> list:
    """Cyclic assignment over a random class permutation: client i holds
    ``perm[(i k + j) mod C]`` for ``j < k``.  Every class is held when ``n k >= C``."""
    perm = rng.permutation(n_classes)
    return [sorted(int(perm[(i * k + j) % n_classes]) for j in range(k)) for i in range(n_clients)]


def partition(ds: Dataset, config: PartitionConfig, rng: np.random.Generator) -> list:
    """Split ``ds`` over clients; each class is divided among its holders in
    proportion to fractions drawn from ``U(frac_low, frac_high)``."""
    n_classes = ds.n_classes
    k, n = config.classes_per_client, config.n_clients
    if k > n_classes:
        raise ValueError(f"classes_per_client={k} exceeds the {n_classes} classes in the data")
    if n * k < n_classes:
        raise ValueError(f"{n} clients x {k} classes cannot cover all {n_classes} classes")
    held = assign_classes(n, k, n_classes, rng)
    alpha = rng.uniform(config.frac_low, config.frac_high, size=(n, n_classes))
    owned = [[] for _ in range(n)]
    for c in range(n_classes):
        holders = [i for i in range(n) if c in held[i]]
        idx = rng.permutation(np.flatnonzero(ds.y == c))
        if idx.size < len(holders):
            raise ValueError(f"class {c} has {idx.size} samples for {len(holders)} holding clients")
        counts = _largest_remainder(idx.size, alpha[holders, c])
        for i, part in zip(holders, np.split(idx, np.cumsum(counts)[:-1])):
            owned[i].append(part)
    shards = []
    for i in range(n):
        idx = np.concatenate(owned[i]) if owned[i] else np.zeros(0, dtype=int)
        tr, va, te = stratified_split(idx, ds.y, config.val_fraction, config.test_fraction, rng)
        shards.append(make_shard(i, ds, tr, va, te))
    return shards


def apply_noise(shard: ClientShard, noise: NoiseModel) -> ClientShard:
    """Corrupt the shard's inputs with the given channel; labels are untouched.

    The corruption is a deterministic function of ``noise.seed``.
    """
    if not isinstance(noise, NoiseModel):
        noise = NoiseModel(*noise)
    rng = np.random.default_rng([noise.seed, shard.cid])

    def channel(x):
        if noise.kind == "gaussian":
            return x + noise.params[0] * rng.standard_normal(x.shape)
        if noise.kind == "dropout":
            return np.where(rng.random(x.shape) < noise.params[0], 0.0, x)
        a, b = noise.params
        return a * x + b

    return replace(shard, X_train=channel(shard.X_train), X_val=channel(shard.X_val),
                   X_test=channel(shard.X_test), noise=noise)


# ---------------------------------------------------------------------- server


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 100
    clients_per_round: int = 5
    local_epochs: int = 1
    aggregation: str = "by_sample_count"
    lr: float = 0.05
    seed: int = 0
    workers: int = 1

    def problems(self, n_clients: int | None = None) -> list:
        out = []
        if self.rounds < 0:
            out.append("rounds: must be >= 0")
        if self.clients_per_round < 1:
            out.append("clients_per_round: must be >= 1")
        if n_clients is not None and self.clients_per_round > n_clients:
            out.append(f"clients_per_round: {self.clients_per_round} exceeds the {n_clients} clients")
        if self.local_epochs < 1:
            out.append("local_epochs: must be >= 1")
        if self.aggregation not in AGGREGATIONS:
            out.append(f"aggregation: expected one of {AGGREGATIONS}")
        if self.lr <= 0:
            out.append("lr: must be positive")
        if self.workers < 1:
            out.append("workers: must be >= 1")
        return out

    def __post_init__(self):
        bad = self.problems()
        if bad:
            raise ValueError("; ".join(bad))


@dataclass
class ServerState:
    params: FeatureNetParams
    inducing: InducingSet | None = None
    round: int = 0

    def copy(self) -> "ServerState":
        return ServerState(self.params.copy(), None if self.inducing is None else self.inducing.copy(), self.round)

    def checksum(self) -> float:
        v = self.params.to_vector()
        if self.inducing is not None:
            v = np.concatenate([v, self.inducing.Xbar.ravel()])
        return float(np.sum(v * np.arange(1, v.size + 1)))


@dataclass
class ClientResult:
    cid: int
    params: FeatureNetParams
    xbar: np.ndarray | None
    n_train: int
    objectives: list = field(default_factory=list)


class RoundError(RuntimeError):
    pass


def init_server(layer_sizes, clients, rng: np.random.Generator, inducing_per_class: int = 0,
                n_classes: int | None = None, activations=None) -> ServerState:
    """Fresh parameters and, when ``inducing_per_class > 0``, inducing inputs
    around the class means of all clients' training embeddings."""
    params = init_params(layer_sizes, rng, activations)
    inducing = None
    if inducing_per_class > 0:
        X = np.concatenate([c.X_train for c in clients])
        y = np.concatenate([c.y_train for c in clients]).astype(int)
        if n_classes is None:
            n_classes = int(y.max()) + 1
        means = class_means(embed(params, X), y, n_classes)
        inducing = init_inducing(means, inducing_per_class * n_classes, rng)
    return ServerState(params, inducing, 0)


def client_update(server: ServerState, shard: ClientShard, rng: np.random.Generator,
                  fed: FederationConfig = FederationConfig(), tree_cfg: TreeConfig = TreeConfig(),
                  kernel: KernelConfig = KernelConfig(), gibbs: GibbsConfig = GibbsConfig()) -> ClientResult:
    """Local training: rebuild the tree with the current features, then take
    ``local_epochs`` full-batch ascent steps on the client objective."""
    params = server.params.copy()
    inducing = None if server.inducing is None else server.inducing.copy()
    X, y = shard.X_train, shard.y_train.astype(int)
    if y.size == 0:
        return ClientResult(shard.cid, params, None if inducing is None else inducing.Xbar, 0, [])
    tree = build_tree(embed(params, X), y, rng)
    opt = SGD(lr=fed.lr)
    values = []
    for _ in range(fed.local_epochs):
        value, g_p, g_x, _ = train_objective(params, X, y, rng, tree_cfg, kernel, gibbs, inducing, tree)
        values.append(float(value))
        params = params.with_vector(opt.step("theta", params.to_vector(), g_p.to_vector()))
        if inducing is not None and g_x is not None:
            inducing = inducing.with_inputs(opt.step("xbar", inducing.Xbar, g_x))
    if not params.is_finite():
        raise FloatingPointError("non-finite parameters after the local step")
    return ClientResult(shard.cid, params, None if inducing is None else inducing.Xbar, y.size, values)


def aggregate(results: list, server: ServerState, mode: str = "by_sample_count") -> ServerState:
    """Weighted average of client parameters (and inducing inputs)."""
    if mode not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {mode!r}")
    if not results:
        raise ValueError("nothing to aggregate")
    w = np.ones(len(results)) if mode == "uniform" else np.array([r.n_train for r in results], dtype=float)
    if w.sum() == 0:
        w = np.ones(len(results))
    w = w / w.sum()
    vec = sum(wi * r.params.to_vector() for wi, r in zip(w, results))
    params = server.params.with_vector(vec)
    params.version = server.params.version + 1
    inducing = server.inducing
    if inducing is not None:
        inducing = inducing.with_inputs(sum(wi * r.xbar for wi, r in zip(w, results)))
    return ServerState(params, inducing, server.round + 1)


def client_rng(seed: int, round_idx: int, cid: int) -> np.random.Generator:
    return np.random.default_rng([seed, round_idx, cid])


def run_round(server: ServerState, clients: list, fed: FederationConfig = FederationConfig(),
              tree_cfg: TreeConfig = TreeConfig(), kernel: KernelConfig = KernelConfig(),
              gibbs: GibbsConfig = GibbsConfig()):
    """One federated round.  Returns ``(new_state, log_record)``."""
    bad = fed.problems(len(clients))
    if bad:
        raise ValueError("; ".join(bad))
    r = server.round
    t0 = time.perf_counter()
    pick = np.random.default_rng([fed.seed, r]).choice(len(clients), size=fed.clients_per_round, replace=False)
    chosen = [clients[int(i)] for i in np.sort(pick)]

    def work(shard):
        try:
            return client_update(server, shard, client_rng(fed.seed, r, shard.cid), fed, tree_cfg, kernel, gibbs)
        except Exception as e:
            raise RoundError(f"round {r}: client {shard.cid} failed ({type(e).__name__}: {e})") from e

    if fed.workers > 1:
        with ThreadPoolExecutor(max_workers=fed.workers) as pool:
            results = list(pool.map(work, chosen))
    else:
        results = [work(s) for s in chosen]
    new = aggregate(results, server, fed.aggregation)
    log = {
        "round": r,
        "clients": [res.cid for res in results],
        "objective": {str(res.cid): res.objectives for res in results},
        "n_train": {str(res.cid): res.n_train for res in results},
        "wall_time": time.perf_counter() - t0,
    }
    return new, log


def train_federated(server: ServerState, clients: list, fed: FederationConfig = FederationConfig(),
                    tree_cfg: TreeConfig = TreeConfig(), kernel: KernelConfig = KernelConfig(),
                    gibbs: GibbsConfig = GibbsConfig(), on_round=None) -> ServerState:
    """Run rounds until ``server.round == fed.rounds``; ``on_round(state, log)`` is called after each."""
    while server.round < fed.rounds:
        server, log = run_round(server, clients, fed, tree_cfg, kernel, gibbs)
        if on_round is not None:
            on_round(server, log)
    return server


def train_local(server: ServerState, clients: list, steps: int, fed: FederationConfig = FederationConfig(),
                tree_cfg: TreeConfig = TreeConfig(), kernel: KernelConfig = KernelConfig(),
                gibbs: GibbsConfig = GibbsConfig()) -> dict:
    """Local baseline: every client trains its own copy from the shared
    initialisation, with no communication.  Returns ``{cid: ServerState}``."""
    out = {}
    for shard in clients:
        state = server.copy()
        for _ in range(steps):
            # keyed by the client's own step count so a resumed run continues the same streams
            res = client_update(state, shard, client_rng(fed.seed + _LOCAL_STREAM, state.round, shard.cid),
                                fed, tree_cfg, kernel, gibbs)
            state = ServerState(res.params, None if state.inducing is None else state.inducing.with_inputs(res.xbar),
                                state.round + 1)
        out[shard.cid] = state
    return out


# ------------------------------------------------------------------ evaluation


def _client_predictions(state: ServerState, shard: ClientShard, split, rng, tree_cfg, kernel, gibbs):
    """Class probabilities over the client's training classes plus column map."""
    emb = embed(state.params, shard.X_train)
    model: GPTreeModel = fit_tree(emb, shard.y_train, rng, tree_cfg, kernel, gibbs, state.inducing)
    Xs, ys = shard.split(split)
    probs = class_posterior(model, embed(state.params, Xs), rng=rng)
    return probs, np.asarray(model.classes), ys.astype(int)


def evaluate_federated(state, clients: list, tree_cfg: TreeConfig = TreeConfig(),
                       kernel: KernelConfig = KernelConfig(), gibbs: GibbsConfig = GibbsConfig(),
                       seed: int = 0, split: str = "test", n_bins: int = 10) -> dict:
    """Personal trees from each client's train split, scored on ``split``.

    ``state`` is one ServerState shared by all clients, or a mapping from
    client id to state (the Local baseline).  Nothing in ``state`` is
    modified.  The federated accuracy is sample-weighted.
    """
    per, conf_all, corr_all, sq_all = {}, [], [], []
    for shard in clients:
        st = state[shard.cid] if isinstance(state, dict) else state
        if shard.split(split)[1].size == 0 or shard.y_train.size == 0:
            continue
        rng = np.random.default_rng([seed, _EVAL_STREAM, shard.cid])
        probs, classes, ys = _client_predictions(st, shard, split, rng, tree_cfg, kernel, gibbs)
        pred = classes[np.argmax(probs, axis=1)]
        conf = probs.max(axis=1)
        correct = (pred == ys).astype(float)
        onehot = (classes[None, :] == ys[:, None]).astype(float)
        # a test label unseen in training contributes its full missing mass
        sq = np.sum((probs - onehot) ** 2, axis=1) + (onehot.sum(axis=1) == 0)
        per[shard.cid] = {"accuracy": float(correct.mean()), "n": int(ys.size),
                          "ece": ece(conf, correct, n_bins), "mce": mce(conf, correct, n_bins),
                          "brier": float(sq.mean())}
        conf_all.append(conf)
        corr_all.append(correct)
        sq_all.append(sq)
    if not per:
        raise ValueError(f"no client has data in the {split!r} split")
    conf, corr, sq = (np.concatenate(a) for a in (conf_all, corr_all, sq_all))
    return {
        "accuracy": float(corr.mean()),
        "ece": ece(conf, corr, n_bins),
        "mce": mce(conf, corr, n_bins),
        "brier": float(sq.mean()),
        "n": int(corr.size),
        "clients": per,
        "confidence": conf,
        "correct": corr,
    }


# ------------------------------------------------------------------ novel clients


def ood_proportions(alpha: float, n_classes: int, n_new: int, rng: np.random.Generator) -> np.ndarray:
    if alpha <= 0:
        raise ValueError("dirichlet alpha must be positive")
    return rng.dirichlet(np.full(n_classes, float(alpha)), size=n_new)


def spawn_ood_clients(remainder: Dataset, alpha: float, n_new: int, n_per_client: int,
                      rng: np.random.Generator, test_fraction: float = 0.25, first_cid: int = 10_000) -> list:
    """Novel clients with Dirichlet(alpha) class proportions drawn from ``remainder``."""
    if n_new == 0:
        return []
    if len(remainder) == 0:
        raise ValueError("remainder is empty")
    props = ood_proportions(alpha, remainder.n_classes, n_new, rng)
    pools = {c: list(rng.permutation(np.flatnonzero(remainder.y == c))) for c in range(remainder.n_classes)}
    shards = []
    for j in range(n_new):
        counts = _largest_remainder(n_per_client, props[j])
        idx = []
        for c, m in enumerate(counts):
            if m > len(pools[c]):
                raise ValueError(f"class {c} has {len(pools[c])} unused samples, client needs {m}")
            idx.extend(pools[c][:m])
            del pools[c][:m]
        idx = np.asarray(idx, dtype=int)
        tr, va, te = stratified_split(idx, remainder.y, 0.0, test_fraction, rng)
        shards.append(make_shard(first_cid + j, remainder, tr, va, te))
    return shards


def client_bound(params: FeatureNetParams, shard: ClientShard, delta: float, rng: np.random.Generator,
                 kernel: KernelConfig = KernelConfig(), **budgets) -> BoundReport:
    """Bound for a binary client under frozen features.  Labels map to 0/1 by class order."""
    if len(shard.classes) != 2:
        raise ValueError(f"client {shard.cid} has {len(shard.classes)} classes; the bound is binary")
    pos = shard.classes[1]
    return bound_report(embed(params, shard.X_train), (shard.y_train == pos).astype(float),
                        embed(params, shard.X_test), (shard.y_test == pos).astype(float),
                        delta, rng, kernel, **budgets)
