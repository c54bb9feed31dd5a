"""Desk-scale data-parallel SGD on synthetic tasks.

Every node keeps its own replica of the parameters, computes the gradient of
its shard of the global batch, hands it to the communication engine and
applies the averaged result. Replicas therefore stay identical only if the
engine delivers identical results to every node.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field

import numpy as np

from cgxsim import adaptive
from cgxsim.adaptive import AdaptiveConfig, StatsCollector
from cgxsim.engine import CommEngine, EngineConfig
from cgxsim.model import CompressionPlan, GradientTensor, LayerKind, LayerSpec
from cgxsim.simnet import StepTrace


class TrainingDiverged(ArithmeticError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step
        self.loss = loss


class Dataset(str, enum.Enum):
    BLOBS = "blobs"
    REGRESSION = "regression"
    TOKENS = "tokens"


class ModelKind(str, enum.Enum):
    LOGREG = "logreg"
    MLP = "mlp"
    EMBED_MLP = "embed-mlp"


@dataclass(frozen=True)
class TrainTask:
    dataset: Dataset = Dataset.BLOBS
    model: ModelKind = ModelKind.LOGREG
    features: int = 2048
    classes: int = 10
    hidden: int = 64
    depth: int = 1
    vocab: int = 2048
    seq_len: int = 16
    embed_dim: int = 32
    embed_init: float = 0.5
    separation: float = 0.08
    train_samples: int = 16384
    test_samples: int = 2048
    lr: float = 0.03
    momentum: float = 0.9
    batch_size: int = 256
    steps: int = 300
    eval_every: int = 50
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dataset", Dataset(self.dataset))
        object.__setattr__(self, "model", ModelKind(self.model))
        if self.depth < 1:
            raise ValueError("depth counts hidden layers and must be at least 1")
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("steps, batch_size and eval_every must be positive")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr > 0 and 0 <= momentum < 1")
        if (self.dataset is Dataset.TOKENS) != (self.model is ModelKind.EMBED_MLP):
            raise ValueError("the embed-mlp model goes with the tokens dataset and only with it")
        if self.dataset is Dataset.REGRESSION and self.model is not ModelKind.LOGREG:
            raise ValueError("regression is supported with the logreg (linear) model only")

    def check_nodes(self, nodes: int) -> None:
        if self.batch_size % nodes:
            raise ValueError(f"global batch {self.batch_size} is not divisible by {nodes} nodes")

    @classmethod
    def from_json(cls, d: dict) -> TrainTask:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def to_json(self) -> dict:
        return {k: (v.value if isinstance(v, enum.Enum) else v) for k, v in self.__dict__.items()}


# --- data -------------------------------------------------------------------


@dataclass
class Data:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


def make_data(task: TrainTask) -> Data:
    rng = np.random.default_rng([task.seed, 1])
    n = task.train_samples + task.test_samples
    if task.dataset is Dataset.BLOBS:
        centers = rng.normal(size=(task.classes, task.features)) * task.separation
        y = rng.integers(task.classes, size=n)
        x = centers[y] + rng.normal(size=(n, task.features))
    elif task.dataset is Dataset.REGRESSION:
        w = rng.normal(size=task.features) / np.sqrt(task.features)
        x = rng.normal(size=(n, task.features))
        y = x @ w + 0.1 * rng.normal(size=n)
    else:
        # each class favours its own small set of tokens; the rest is noise
        signal = rng.integers(task.vocab, size=(task.classes, 8))
        y = rng.integers(task.classes, size=n)
        noise = rng.integers(task.vocab, size=(n, task.seq_len))
        picks = signal[y[:, None], rng.integers(8, size=(n, task.seq_len))]
        x = np.where(rng.random((n, task.seq_len)) < 0.25, picks, noise)
    t = task.train_samples
    return Data(x[:t], y[:t], x[t:], y[t:])


# --- models -----------------------------------------------------------------


def _widths(task: TrainTask) -> list[int]:
    c = 1 if task.dataset is Dataset.REGRESSION else task.classes
    d_in = task.embed_dim if task.model is ModelKind.EMBED_MLP else task.features
    return [d_in] + [task.hidden] * task.depth + [c]


def model_layers(task: TrainTask) -> list[LayerSpec]:
    """Named layers in forward order."""
    w = _widths(task)
    if task.model is ModelKind.LOGREG:
        return [LayerSpec("fc.weight", w[0] * w[-1]), LayerSpec("fc.bias", w[-1], LayerKind.BIAS)]
    layers = []
    if task.model is ModelKind.EMBED_MLP:
        layers.append(LayerSpec("embed.weight", task.vocab * task.embed_dim, LayerKind.EMBEDDING))
    for i in range(len(w) - 1):
        layers += [LayerSpec(f"fc{i + 1}.weight", w[i] * w[i + 1]), LayerSpec(f"fc{i + 1}.bias", w[i + 1], LayerKind.BIAS)]
    return layers


def init_params(task: TrainTask) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([task.seed, 2])
    w = _widths(task)
    if task.model is ModelKind.LOGREG:
        return {"fc.weight": np.zeros((w[0], w[-1])), "fc.bias": np.zeros(w[-1])}
    p: dict[str, np.ndarray] = {}
    if task.model is ModelKind.EMBED_MLP:
        p["embed.weight"] = rng.normal(size=(task.vocab, task.embed_dim)) * task.embed_init
    last = len(w) - 2
    for i in range(len(w) - 1):
        gain = 1.0 if i == last else 2.0
        p[f"fc{i + 1}.weight"] = rng.normal(size=(w[i], w[i + 1])) * np.sqrt(gain / w[i])
        p[f"fc{i + 1}.bias"] = np.zeros(w[i + 1])
    return p


def _softmax_xent(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    prob = e / e.sum(axis=1, keepdims=True)
    m = len(y)
    loss = -float(np.mean(np.log(prob[np.arange(m), y] + 1e-300)))
    d = prob
    d[np.arange(m), y] -= 1.0
    return loss, d / m


def _inputs(task: TrainTask, p: dict, x: np.ndarray) -> np.ndarray:
    return p["embed.weight"][x].mean(axis=1) if task.model is ModelKind.EMBED_MLP else x


def forward(task: TrainTask, p: dict, x: np.ndarray) -> np.ndarray:
    if task.model is ModelKind.LOGREG:
        return x @ p["fc.weight"] + p["fc.bias"]
    h = _inputs(task, p, x)
    for i in range(1, task.depth + 1):
        h = np.maximum(h @ p[f"fc{i}.weight"] + p[f"fc{i}.bias"], 0.0)
    top = task.depth + 1
    return h @ p[f"fc{top}.weight"] + p[f"fc{top}.bias"]


def loss_and_grads(task: TrainTask, p: dict, x: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss over the batch and the gradient of every layer."""
    g: dict[str, np.ndarray] = {}
    if task.model is ModelKind.LOGREG:
        out = x @ p["fc.weight"] + p["fc.bias"]
        if task.dataset is Dataset.REGRESSION:
            r = out[:, 0] - y
            loss = 0.5 * float(np.mean(r * r))
            d = (r / len(y))[:, None]
        else:
            loss, d = _softmax_xent(out, y)
        g["fc.weight"] = x.T @ d
        g["fc.bias"] = d.sum(axis=0)
        return loss, g

    acts = [_inputs(task, p, x)]
    pres = []
    for i in range(1, task.depth + 1):
        pres.append(acts[-1] @ p[f"fc{i}.weight"] + p[f"fc{i}.bias"])
        acts.append(np.maximum(pres[-1], 0.0))
    top = task.depth + 1
    loss, d = _softmax_xent(acts[-1] @ p[f"fc{top}.weight"] + p[f"fc{top}.bias"], y)
    for i in range(top, 0, -1):
        g[f"fc{i}.weight"] = acts[i - 1].T @ d
        g[f"fc{i}.bias"] = d.sum(axis=0)
        d = d @ p[f"fc{i}.weight"].T
        if i > 1:
            d = d * (pres[i - 2] > 0)
    if task.model is ModelKind.EMBED_MLP:
        dx = np.repeat((d / task.seq_len)[:, None, :], task.seq_len, axis=1)
        emb = np.zeros_like(p["embed.weight"])
        np.add.at(emb, x.ravel(), dx.reshape(-1, task.embed_dim))
        g["embed.weight"] = emb
    return loss, g


def evaluate(task: TrainTask, p: dict, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """(loss, metric); the metric is accuracy, or R^2 for regression."""
    out = forward(task, p, x)
    if task.dataset is Dataset.REGRESSION:
        r = out[:, 0] - y
        loss = 0.5 * float(np.mean(r * r))
        return loss, 1.0 - float(np.mean(r * r) / np.var(y))
    loss, _ = _softmax_xent(out, y)
    return loss, float(np.mean(np.argmax(out, axis=1) == y))


# --- training loop ----------------------------------------------------------


def batch_indices(task: TrainTask, step: int) -> np.ndarray:
    """Global batch for ``step``, drawn from a per-epoch permutation."""
    per_epoch = task.train_samples // task.batch_size
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([task.seed, 3, epoch]).permutation(task.train_samples)
    return perm[pos * task.batch_size : (pos + 1) * task.batch_size]


def shard_grads(task: TrainTask, params: dict, data: Data, step: int, node: int, nodes: int):
    idx = batch_indices(task, step)
    per = task.batch_size // nodes
    mine = idx[node * per : (node + 1) * per]
    loss, g = loss_and_grads(task, params, data.x_train[mine], data.y_train[mine])
    with np.errstate(over="ignore", invalid="ignore"):
        g32 = {k: v.astype(np.float32).ravel() for k, v in g.items()}
    if not np.isfinite(loss) or not all(np.isfinite(v).all() for v in g32.values()):
        raise TrainingDiverged(step, loss)
    return loss, g32


def sgd_update(task: TrainTask, params: dict, velocity: dict, grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        v = velocity.setdefault(name, np.zeros(params[name].size))
        v *= task.momentum
        v += g
        params[name] -= task.lr * v.reshape(params[name].shape)


@dataclass
class TrainResult:
    losses: list[float]
    evals: list[tuple[int, float, float]]
    final_metric: float
    params: dict[str, np.ndarray]
    trace: StepTrace
    events: list[dict] = field(default_factory=list)
    plan_history: list[tuple[int, dict]] = field(default_factory=list)

    @property
    def total_bytes(self) -> int:
        return self.trace.total_bytes


def _ready_times(layers: list[LayerSpec]) -> list[float]:
    # backward pass emits the last layer first, one layer per millisecond
    return [1e-3 * i for i in range(len(layers))]


class _Replicas:
    def __init__(self, task: TrainTask, nodes: int):
        self.task = task
        self.nodes = nodes
        self.data = make_data(task)
        self.layers = model_layers(task)
        self.backward = list(reversed(self.layers))
        self.params = [init_params(task) for _ in range(nodes)]
        self.velocity = [{} for _ in range(nodes)]
        self.losses: list[float] = []
        self.evals: list[tuple[int, float, float]] = []

    def grads(self, step: int, node: int):
        loss, g = shard_grads(self.task, self.params[node], self.data, step, node, self.nodes)
        return loss, [GradientTensor(l, g[l.name]) for l in self.backward]

    def apply(self, node: int, reduced: list[GradientTensor]) -> None:
        sgd_update(self.task, self.params[node], self.velocity[node], {g.name: g.values for g in reduced})

    def after_step(self, step: int, shard_losses: list[float]) -> None:
        self.losses.append(float(np.mean(shard_losses)))
        if (step + 1) % self.task.eval_every == 0 or step + 1 == self.task.steps:
            loss, metric = evaluate(self.task, self.params[0], self.data.x_test, self.data.y_test)
            self.evals.append((step + 1, loss, metric))

    def check_in_sync(self) -> None:
        for node in range(1, self.nodes):
            for name, value in self.params[node].items():
                if not np.array_equal(value, self.params[0][name]):
                    raise RuntimeError(f"replica {node} diverged from replica 0 in {name!r}")


def _step_exchange(engine: CommEngine, reps: _Replicas, step: int) -> list[list[GradientTensor]]:
    losses, grads = zip(*(reps.grads(step, node) for node in range(reps.nodes)))
    results = engine.exchange(list(grads), _ready_times(reps.backward))
    for node in range(reps.nodes):
        reps.apply(node, results[node])
    reps.after_step(step, list(losses))
    return results


def _step_threads(engine: CommEngine, reps: _Replicas, step: int) -> list[list[GradientTensor]]:
    n = reps.nodes
    losses = [0.0] * n
    results: list = [None] * n
    errors: list = []
    times = _ready_times(reps.backward)

    def node_main(node: int) -> None:
        try:
            losses[node], grads = reps.grads(step, node)
            for g, t in zip(grads, times):
                engine.submit(node, g, t)
        except Exception as exc:
            errors.append(exc)
            engine._barrier.abort()
            return
        try:
            results[node] = engine.flush(node, timeout=600)
            reps.apply(node, results[node])
        except threading.BrokenBarrierError:
            pass
        except Exception as exc:
            errors.append(exc)

    workers = [threading.Thread(target=node_main, args=(i,)) for i in range(n)]
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    if errors:
        engine._barrier.reset()
        raise errors[0]
    reps.after_step(step, losses)
    return results


def _finish(reps: _Replicas, engine: CommEngine | None, trace: StepTrace, history=None) -> TrainResult:
    reps.check_in_sync()
    return TrainResult(
        losses=reps.losses,
        evals=reps.evals,
        final_metric=reps.evals[-1][2],
        params=reps.params[0],
        trace=trace,
        events=list(engine.events) if engine else [],
        plan_history=history or [],
    )


def train(task: TrainTask, config: EngineConfig, threads: bool = False, schedule=None) -> TrainResult:
    """Data-parallel SGD with gradients exchanged through the engine.

    With ``threads`` every node runs in its own thread and meets the others
    at the engine barrier; otherwise nodes are multiplexed on the caller's
    thread. Both give identical results. ``schedule`` hooks in before and
    after every step (see :func:`run_adaptive_training`).
    """
    task.check_nodes(config.nodes)
    engine = CommEngine(config)
    reps = _Replicas(task, config.nodes)
    step_fn = _step_threads if threads else _step_exchange
    for step in range(task.steps):
        if schedule is not None:
            schedule.before(engine, step)
        results = step_fn(engine, reps, step)
        if schedule is not None:
            schedule.after(results)
    return _finish(reps, engine, engine.total_trace, schedule.history if schedule else None)


def reference_sgd(task: TrainTask, nodes: int) -> TrainResult:
    """Single-process SGD that sums shard gradients in ascending node order."""
    task.check_nodes(nodes)
    data = make_data(task)
    params = init_params(task)
    velocity: dict = {}
    reps = _Replicas(task, 1)
    reps.data, reps.params, reps.velocity = data, [params], [velocity]
    scale = np.float32(nodes)
    for step in range(task.steps):
        shard = [shard_grads(task, params, data, step, node, nodes) for node in range(nodes)]
        total = {}
        for name in shard[0][1]:
            acc = shard[0][1][name].copy()
            for _, g in shard[1:]:
                acc = acc + g[name]
            total[name] = acc / scale
        sgd_update(task, params, velocity, total)
        reps.after_step(step, [loss for loss, _ in shard])
    return _finish(reps, None, StepTrace.zeros(nodes))


# --- adaptive ---------------------------------------------------------------


class _AdaptiveSchedule:
    """Step hook: 4-bit stats windows followed by planner-driven plan swaps."""

    def __init__(self, config: EngineConfig, acfg: AdaptiveConfig, algorithm: str):
        if algorithm not in adaptive.PLANNERS:
            raise ValueError(f"unknown planner {algorithm!r}; choose from {sorted(adaptive.PLANNERS)}")
        self.filters = config.filters
        self.acfg = acfg
        self.planner = adaptive.PLANNERS[algorithm]
        self.stats_plan = CompressionPlan.uniform(4, acfg.bucket_size)
        self.current = self.stats_plan
        self.collector: StatsCollector | None = None
        self.history: list[tuple[int, dict]] = []

    def before(self, engine: CommEngine, step: int) -> None:
        phase = step % self.acfg.stats_period
        if phase == 0:
            if self.collector is not None:
                self._replan(engine, step)
            self.collector = StatsCollector(self.acfg.top_fraction)
        elif phase == self.acfg.stats_window and self.collector is not None:
            self._replan(engine, step)
            self.collector = None
        want = self.stats_plan if self.collector is not None else self.current
        if engine.plan is not want:
            engine.set_plan(want)

    def after(self, results) -> None:
        if self.collector is not None:
            self.collector.add({g.name: g.values for g in results[0] if not self.filters.skips(g.layer)})

    def _replan(self, engine: CommEngine, step: int) -> None:
        try:
            stats = self.collector.stats()
            plan = self.planner(stats, self.acfg)
            if not plan.meta.get("budget_satisfied", True):
                raise ValueError(f"plan error {plan.meta['error']:.6g} exceeds budget {plan.meta['budget']:.6g}")
        except Exception as exc:
            engine.log("planner_warning", {"error": str(exc), "kept": "previous plan"})
            return
        self.current = plan
        self.history.append((step, plan.to_json()))


def run_adaptive_training(task: TrainTask, config: EngineConfig, acfg: AdaptiveConfig | None = None,
                          algorithm: str = "kmeans", threads: bool = False) -> TrainResult:
    """Train while periodically re-planning per-layer bit widths.

    At the start of every ``stats_period`` the engine runs uniform 4-bit for
    ``stats_window`` steps while the reduced gradients are summed; the
    planner then picks a new plan, which is swapped in at the next step
    boundary and kept until the following period.
    """
    acfg = acfg or config.adaptive or AdaptiveConfig()
    schedule = _AdaptiveSchedule(config, acfg, algorithm)
    return train(task, config, threads=threads, schedule=schedule)


BUNDLED_TASKS = {
    "logreg": TrainTask(),
    "mlp": TrainTask(model=ModelKind.MLP, features=256, separation=0.2),
    "embed-mlp": TrainTask(dataset=Dataset.TOKENS, model=ModelKind.EMBED_MLP, hidden=128, seq_len=32,
                           embed_init=3.0, lr=0.05),
    "regression": TrainTask(dataset=Dataset.REGRESSION, features=256, lr=0.05),
}


def bundled_task(name: str, **overrides) -> TrainTask:
    try:
        base = BUNDLED_TASKS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(BUNDLED_TASKS)}") from None
    return TrainTask.from_json({**base.to_json(), **overrides})
