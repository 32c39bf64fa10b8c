"""Dual-stream segmentation network: EdgeConv stream + residual pointwise
stream, feature fusion, segmentation head, loss and analytic gradients.

The network runs on one cloud at a time (N x 3 coordinates). Mini-batches
are handled by the training loop, which averages gradients over the clouds
of a batch; normalization statistics therefore pool over the points (and
edges) of a single cloud.
"""
from __future__ import annotations

import fnmatch
import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Node, Tape
from .cloud import LabeledCloud
from .graph import knn


class StateError(RuntimeError):
    """Trace/parameter lifecycle violation (stale or reused trace)."""


@dataclass
class FusionConfig:
    k: int = 10
    edgeconv_widths: list = field(default_factory=lambda: [64, 64, 128, 256])
    residual_widths: list = field(default_factory=lambda: [64, 128, 256])
    head_widths: list = field(default_factory=lambda: [512, 256])
    num_classes: int = 8
    leaky_slope: float = 0.2
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.1
    streams: str = "both"  # both | edgeconv | residual (single-stream ablations)
    dtype: str = "float32"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")
        for w in (*self.edgeconv_widths, *self.residual_widths, *self.head_widths):
            if w < 1:
                raise ValueError("all layer widths must be positive")
        if self.streams not in ("both", "edgeconv", "residual"):
            raise ValueError(f"unknown streams mode {self.streams!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def fused_width(self) -> int:
        w = 0
        if self.streams in ("both", "edgeconv"):
            w += sum(self.edgeconv_widths)
        if self.streams in ("both", "residual"):
            w += self.residual_widths[-1]
        return w


@dataclass
class _Entry:
    value: np.ndarray
    grad: np.ndarray
    frozen: bool = False


class ParameterStore:
    """Named, shaped parameter arrays with per-entry frozen flags.

    Iteration is lexicographic by name. Batch-norm running statistics live
    in a parallel ``stats`` map; they are state, not trainable parameters.
    """

    def __init__(self):
        self._entries: dict[str, _Entry] = {}
        self.stats: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._entries:
            raise ValueError(f"duplicate parameter {name}")
        self._entries[name] = _Entry(value, np.zeros_like(value))

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name) -> _Entry:
        return self._entries[name]

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self):
        for name in self.names():
            yield name, self._entries[name]

    def num_params(self) -> int:
        return sum(e.value.size for e in self._entries.values())

    def zero_grads(self) -> None:
        for e in self._entries.values():
            e.grad[...] = 0.0

    def set_trainable(self, patterns) -> int:
        """Freeze everything not matched by any pattern; return match count."""
        matched = 0
        for name, e in self.items():
            hit = any(fnmatch.fnmatchcase(name, p) for p in patterns)
            e.frozen = not hit
            matched += hit
        return matched

    def unfreeze_all(self) -> None:
        for e in self._entries.values():
            e.frozen = False

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, e in self.items():
            out.add(name, e.value.copy())
            out[name].frozen = e.frozen
        out.stats = {k: v.copy() for k, v in self.stats.items()}
        return out


@dataclass(frozen=True)
class Logits:
    """N x C unnormalized per-point class scores."""

    values: np.ndarray


@dataclass
class ForwardTrace:
    tape: Tape
    logits_node: Node
    param_nodes: dict
    mode: str
    params_id: int
    graphs: list
    consumed: bool = False
    internals: dict | None = None


@dataclass
class FeatureContext:
    """Per-layer features of a fixed point subset, sliced from a forward.

    Lets later clouds be segmented against this subset as frozen context:
    graph queries and the global descriptor see the union of fresh and
    context points, while only fresh rows are convolved.
    """

    edge_inputs: list        # input features to each EdgeConv layer (M x F)
    fused: np.ndarray        # M x G fused per-point features


def feature_context(trace: ForwardTrace, rows) -> FeatureContext:
    """Slice the context rows out of a completed forward pass."""
    rows = np.asarray(rows, dtype=np.int64)
    ins = trace.internals
    return FeatureContext([a[rows] for a in ins["edge_inputs"]],
                          ins["fused"][rows])


def head_last2_patterns(config: FusionConfig) -> list[str]:
    """Names of the final two fully connected head layers."""
    last_fc = len(config.head_widths) - 1
    return [f"head.fc{last_fc}.*", "head.out.*"]


# --------------------------------------------------------------------------
# initialization


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(config: FusionConfig, rng_seed: int) -> ParameterStore:
    """Fan-in-scaled uniform weights, unit BN scales, zero shifts/biases."""
    rng = np.random.default_rng(rng_seed)
    dt = config.np_dtype
    store = ParameterStore()

    def bn(prefix, width):
        store.add(f"{prefix}.gamma", np.ones(width, dtype=dt))
        store.add(f"{prefix}.beta", np.zeros(width, dtype=dt))
        store.stats[f"{prefix}.mean"] = np.zeros(width, dtype=dt)
        store.stats[f"{prefix}.var"] = np.ones(width, dtype=dt)

    if config.streams in ("both", "edgeconv"):
        f_in = 3
        for i, w in enumerate(config.edgeconv_widths):
            store.add(f"edgeconv{i}.weight", _uniform(rng, 2 * f_in, (2 * f_in, w), dt))
            bn(f"edgeconv{i}.bn", w)
            f_in = w
    if config.streams in ("both", "residual"):
        f_in = 3
        for i, w in enumerate(config.residual_widths):
            store.add(f"res{i}.conv1.weight", _uniform(rng, f_in, (f_in, w), dt))
            bn(f"res{i}.bn1", w)
            store.add(f"res{i}.conv2.weight", _uniform(rng, w, (w, w), dt))
            bn(f"res{i}.bn2", w)
            if f_in != w:
                store.add(f"res{i}.proj.weight", _uniform(rng, f_in, (f_in, w), dt))
            f_in = w

    d_in = 2 * config.fused_width()
    for j, w in enumerate(config.head_widths):
        store.add(f"head.fc{j}.weight", _uniform(rng, d_in, (d_in, w), dt))
        store.add(f"head.fc{j}.bias", np.zeros(w, dtype=dt))
        d_in = w
    store.add("head.out.weight", _uniform(rng, d_in, (d_in, config.num_classes), dt))
    store.add("head.out.bias", np.zeros(config.num_classes, dtype=dt))
    return store


def expected_param_count(config: FusionConfig) -> int:
    """Closed-form parameter count for a config (used as an init oracle)."""
    total = 0
    if config.streams in ("both", "edgeconv"):
        f_in = 3
        for w in config.edgeconv_widths:
            total += 2 * f_in * w + 2 * w
            f_in = w
    if config.streams in ("both", "residual"):
        f_in = 3
        for w in config.residual_widths:
            total += f_in * w + 2 * w + w * w + 2 * w
            if f_in != w:
                total += f_in * w
            f_in = w
    d_in = 2 * config.fused_width()
    for w in config.head_widths:
        total += d_in * w + w
        d_in = w
    total += d_in * config.num_classes + config.num_classes
    return total


# --------------------------------------------------------------------------
# traced layers


def _node_map(tape: Tape, params: ParameterStore) -> dict:
    return {name: tape.leaf(e.value, requires_grad=not e.frozen)
            for name, e in params.items()}


def _traced_edgeconv(tape, h, nodes, params, prefix, k, cfg, training,
                     update_stats, graphs):
    method = "tree" if h.value.shape[1] <= 3 else "gram"
    g = knn(h.value, k, metric_space="feature", method=method)
    graphs.append(g)
    n = h.value.shape[0]
    e = tape.edge_features(h, g.neighbors)             # N x k x 2F
    f2 = e.value.shape[2]
    w = nodes[f"{prefix}.weight"]
    lin = tape.reshape(tape.matmul(tape.reshape(e, (n * k, f2)), w),
                       (n, k, w.value.shape[1]))
    bn = tape.batchnorm(
        lin, nodes[f"{prefix}.bn.gamma"], nodes[f"{prefix}.bn.beta"],
        eps=cfg.bn_epsilon, training=training,
        running_mean=params.stats[f"{prefix}.bn.mean"],
        running_var=params.stats[f"{prefix}.bn.var"],
        momentum=cfg.bn_momentum,
        update_stats=update_stats and not params[f"{prefix}.bn.gamma"].frozen)
    act = tape.leaky_relu(bn, cfg.leaky_slope)
    return tape.max_along(act, axis=1)                 # N x W


def _traced_pointwise_bn_act(tape, x, nodes, params, wname, bnprefix, cfg,
                             training, update_stats, act="relu"):
    lin = tape.matmul(x, nodes[wname])
    bn = tape.batchnorm(
        lin, nodes[f"{bnprefix}.gamma"], nodes[f"{bnprefix}.beta"],
        eps=cfg.bn_epsilon, training=training,
        running_mean=params.stats[f"{bnprefix}.mean"],
        running_var=params.stats[f"{bnprefix}.var"],
        momentum=cfg.bn_momentum,
        update_stats=update_stats and not params[f"{bnprefix}.gamma"].frozen)
    return tape.relu(bn) if act == "relu" else bn


def _traced_residual_block(tape, x, nodes, params, prefix, cfg, training,
                           update_stats):
    y = _traced_pointwise_bn_act(tape, x, nodes, params, f"{prefix}.conv1.weight",
                                 f"{prefix}.bn1", cfg, training, update_stats)
    y = _traced_pointwise_bn_act(tape, y, nodes, params, f"{prefix}.conv2.weight",
                                 f"{prefix}.bn2", cfg, training, update_stats)
    if f"{prefix}.proj.weight" in params:
        shortcut = tape.matmul(x, nodes[f"{prefix}.proj.weight"])
    else:
        shortcut = x
    return tape.add(y, shortcut)


def fusion_forward(cloud, params: ParameterStore, config: FusionConfig,
                   mode: str = "eval") -> tuple[Logits, ForwardTrace]:
    """Full dual-stream forward pass on one cloud.

    mode='train' uses per-cloud batch statistics and records a trace that
    ``backward`` can replay; mode='eval' uses running statistics and is
    deterministic for fixed parameters.
    """
    pts = cloud.points if isinstance(cloud, LabeledCloud) else np.asarray(cloud)
    pts = pts.astype(config.np_dtype).reshape(-1, 3)
    n = pts.shape[0]
    if n <= config.k:
        raise ValueError(f"need N > k, got N={n}, k={config.k}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    training = mode == "train"

    tape = Tape()
    nodes = _node_map(tape, params)
    graphs: list = []
    x0 = tape.leaf(pts)

    per_point = []
    edge_inputs = []
    if config.streams in ("both", "edgeconv"):
        h = x0
        for i in range(len(config.edgeconv_widths)):
            edge_inputs.append(h.value)
            h = _traced_edgeconv(tape, h, nodes, params, f"edgeconv{i}",
                                 config.k, config, training, training, graphs)
            per_point.append(h)
    if config.streams in ("both", "residual"):
        x = x0
        for i in range(len(config.residual_widths)):
            x = _traced_residual_block(tape, x, nodes, params, f"res{i}",
                                       config, training, training)
        per_point.append(x)

    fused = per_point[0] if len(per_point) == 1 else tape.concat(per_point, axis=1)
    global_desc = tape.max_along(fused, axis=0)        # (G,)
    global_bcast = tape.gather_rows(tape.reshape(global_desc, (1, -1)),
                                    np.zeros(n, dtype=np.int64))
    z = tape.concat([fused, global_bcast], axis=1)

    for j in range(len(config.head_widths)):
        z = tape.relu(tape.add(tape.matmul(z, nodes[f"head.fc{j}.weight"]),
                               nodes[f"head.fc{j}.bias"]))
    logits_node = tape.add(tape.matmul(z, nodes["head.out.weight"]),
                           nodes["head.out.bias"])

    trace = ForwardTrace(tape=tape, logits_node=logits_node, param_nodes=nodes,
                         mode=mode, params_id=id(params), graphs=graphs,
                         internals={"edge_inputs": edge_inputs,
                                    "fused": fused.value})
    return Logits(logits_node.value), trace


def _bn_eval(x, params, config, prefix):
    gamma = params[f"{prefix}.gamma"].value
    beta = params[f"{prefix}.beta"].value
    mean = params.stats[f"{prefix}.mean"]
    var = params.stats[f"{prefix}.var"]
    return gamma * (x - mean) / np.sqrt(var + config.bn_epsilon) + beta


def _context_knn(queries, reference, k, self_rows):
    """k nearest reference rows per query, excluding each query's own row."""
    sq_q = np.einsum("ij,ij->i", queries, queries)
    sq_r = np.einsum("ij,ij->i", reference, reference)
    d2 = sq_q[:, None] + sq_r[None, :] - 2.0 * (queries @ reference.T)
    d2[np.arange(queries.shape[0]), self_rows] = np.inf
    part = np.argpartition(d2, k - 1, axis=1)[:, :k]
    pd = np.take_along_axis(d2, part, axis=1)
    order = np.lexsort((part, pd), axis=1)
    return np.take_along_axis(part, order, axis=1).astype(np.int64)


def fusion_forward_context(points, ctx: FeatureContext,
                           params: ParameterStore,
                           config: FusionConfig) -> Logits:
    """Eval-mode forward for fresh points against frozen context features.

    Graph neighborhoods and the global descriptor are computed over the
    union of fresh and context points, so predictions track a full-cloud
    forward closely, but only the fresh rows are convolved.
    """
    pts = np.asarray(points, dtype=config.np_dtype).reshape(-1, 3)
    n = pts.shape[0]
    if n == 0:
        return Logits(np.zeros((0, config.num_classes), dtype=config.np_dtype))
    k = config.k
    self_rows = np.arange(n)

    per_point = []
    if config.streams in ("both", "edgeconv"):
        h = pts
        for i in range(len(config.edgeconv_widths)):
            ref = np.concatenate([h, ctx.edge_inputs[i]], axis=0)
            if ref.shape[0] <= k:
                raise ValueError(f"need more than k={k} points with context")
            nb = _context_knn(h, ref, k, self_rows)
            hj = ref[nb]
            hi = np.broadcast_to(h[:, None, :], hj.shape)
            edges = np.concatenate([hi, hj - hi], axis=2)
            lin = (edges.reshape(n * k, -1)
                   @ params[f"edgeconv{i}.weight"].value).reshape(n, k, -1)
            bn = _bn_eval(lin, params, config, f"edgeconv{i}.bn")
            act = np.where(bn > 0, bn, config.leaky_slope * bn)
            h = act.max(axis=1)
            per_point.append(h)
    if config.streams in ("both", "residual"):
        x = pts
        for i in range(len(config.residual_widths)):
            y = np.maximum(_bn_eval(x @ params[f"res{i}.conv1.weight"].value,
                                    params, config, f"res{i}.bn1"), 0.0)
            y = np.maximum(_bn_eval(y @ params[f"res{i}.conv2.weight"].value,
                                    params, config, f"res{i}.bn2"), 0.0)
            if f"res{i}.proj.weight" in params:
                shortcut = x @ params[f"res{i}.proj.weight"].value
            else:
                shortcut = x
            x = y + shortcut
        per_point.append(x)

    fused = (per_point[0] if len(per_point) == 1
             else np.concatenate(per_point, axis=1))
    global_desc = np.vstack([fused, ctx.fused]).max(axis=0)
    z = np.concatenate([fused, np.broadcast_to(global_desc, fused.shape)],
                       axis=1)
    for j in range(len(config.head_widths)):
        z = np.maximum(z @ params[f"head.fc{j}.weight"].value
                       + params[f"head.fc{j}.bias"].value, 0.0)
    logits = z @ params["head.out.weight"].value + params["head.out.bias"].value
    return Logits(logits)


def backward(trace: ForwardTrace, loss_grad: np.ndarray,
             params: ParameterStore) -> None:
    """Populate parameter gradients from a recorded train-mode forward."""
    if trace.consumed:
        raise StateError("trace already consumed; run a new forward")
    if trace.params_id != id(params):
        raise StateError("trace was recorded with a different ParameterStore")
    if trace.mode != "train":
        raise StateError("backward requires a train-mode trace")
    trace.consumed = True
    loss_grad = np.asarray(loss_grad, dtype=trace.logits_node.value.dtype)
    if loss_grad.shape != trace.logits_node.value.shape:
        raise ValueError("loss gradient shape mismatch")
    trace.tape.backward(trace.logits_node, loss_grad)
    for name, e in params.items():
        node = trace.param_nodes[name]
        if e.frozen or node.grad is None:
            e.grad[...] = 0.0
        else:
            e.grad[...] = node.grad


# --------------------------------------------------------------------------
# standalone layer APIs (numpy only, for unit-level use)


def edgeconv_forward(features, weight, gamma=None, beta=None, *, k,
                     slope=0.2, eps=1e-5, normalize=True):
    """One EdgeConv layer on raw arrays; graph recomputed in feature space.

    With normalize=False the batch-norm step is bypassed (unit-test mode).
    """
    features = np.asarray(features, dtype=np.float64)
    g = knn(features, k, metric_space="feature", method="brute")
    n = features.shape[0]
    hj = features[g.neighbors]
    hi = np.broadcast_to(features[:, None, :], hj.shape)
    edges = np.concatenate([hi, hj - hi], axis=2)
    lin = edges.reshape(n * k, -1) @ weight
    lin = lin.reshape(n, k, -1)
    if normalize:
        mean = lin.mean(axis=(0, 1))
        var = lin.var(axis=(0, 1))
        lin = (lin - mean) / np.sqrt(var + eps)
        if gamma is not None:
            lin = gamma * lin + beta
    act = np.where(lin > 0, lin, slope * lin)
    return act.max(axis=1)


def residual_block_forward(features, w1, w2, proj=None, *, normalize=False,
                           eps=1e-5):
    """One residual block on raw arrays: y = F(x) + shortcut(x)."""
    x = np.asarray(features, dtype=np.float64)

    def stage(v, w):
        lin = v @ w
        if normalize:
            lin = (lin - lin.mean(axis=0)) / np.sqrt(lin.var(axis=0) + eps)
        return np.maximum(lin, 0.0)

    y = stage(stage(x, w1), w2)
    shortcut = x @ proj if proj is not None else x
    return y + shortcut


# --------------------------------------------------------------------------
# loss and prediction


def cross_entropy_loss(logits, labels) -> tuple[float, np.ndarray]:
    """Mean per-point cross entropy and its gradient w.r.t. the logits."""
    values = logits.values if isinstance(logits, Logits) else np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = values.shape
    if labels.shape != (n,):
        raise ValueError("labels must be length N")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError("label code out of range")
    shifted = values - values.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.astype(values.dtype)


def predict_labels(logits) -> np.ndarray:
    """Per-point argmax class; ties resolve to the lowest class id."""
    values = logits.values if isinstance(logits, Logits) else np.asarray(logits)
    if not np.isfinite(values).all():
        raise ValueError("non-finite logits")
    return values.argmax(axis=1).astype(np.int64)


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"FSCK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    params: ParameterStore
    config: FusionConfig


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Byte-stable container: JSON header + float32 payloads."""
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(ckpt.config),
        "entries": [{"name": n, "shape": list(e.value.shape), "frozen": e.frozen}
                    for n, e in ckpt.params.items()],
        "stats": [{"name": n, "shape": list(ckpt.params.stats[n].shape)}
                  for n in sorted(ckpt.params.stats)],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for n, e in ckpt.params.items():
        buf.write(e.value.astype("<f4").tobytes())
    for n in sorted(ckpt.params.stats):
        buf.write(ckpt.params.stats[n].astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen))
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        config = FusionConfig(**header["config"])
        dt = config.np_dtype
        store = ParameterStore()
        for meta in header["entries"]:
            size = int(np.prod(meta["shape"])) if meta["shape"] else 1
            raw = np.frombuffer(f.read(4 * size), dtype="<f4")
            store.add(meta["name"], raw.reshape(meta["shape"]).astype(dt))
            store[meta["name"]].frozen = meta["frozen"]
        for meta in header["stats"]:
            size = int(np.prod(meta["shape"])) if meta["shape"] else 1
            raw = np.frombuffer(f.read(4 * size), dtype="<f4")
            store.stats[meta["name"]] = raw.reshape(meta["shape"]).astype(dt)
    return Checkpoint(params=store, config=config)
