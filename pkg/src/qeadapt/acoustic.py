"""Feed-forward softmax frame classifier and its cross-entropy training."""

from __future__ import annotations

import copy
import hashlib
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

POSTERIOR_FLOOR = 1e-12


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AcousticModel:
    """Sigmoid hidden layers, softmax output.

    ``weights[l]`` has shape ``(n_in, n_out)``.  ``odlr`` optionally holds an
    affine transform ``(A, c)`` applied to the last hidden activations, the
    features the softmax layer sees.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    context: int = 2
    odlr: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "AcousticModel":
        return copy.deepcopy(self)

    def params(self) -> list[np.ndarray]:
        """Flat parameter list in file order: W0, b0, W1, b1, ..., [A, c]."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        if self.odlr is not None:
            out.extend(self.odlr)
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class Priors:
    values: np.ndarray
    floor: float

    def __post_init__(self):
        if not np.isclose(self.values.sum(), 1.0, atol=1e-9):
            raise ValueError("priors must sum to one")
        if np.any(self.values < self.floor * (1 - 1e-12)) or self.floor <= 0:
            raise ValueError("priors must be >= floor > 0")


@dataclass
class TrainSchedule:
    learning_rate: float = 0.008
    halve_threshold: float = 0.005
    stop_threshold: float = 0.001
    max_epochs: int = 20
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.stop_threshold <= self.halve_threshold:
            raise ValueError("need 0 < stop_threshold <= halve_threshold")


@dataclass
class EpochLog:
    epoch: int
    learning_rate: float
    cv_accuracy: float
    train_loss: float


@dataclass
class TrainLog:
    epochs: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0

    def to_tsv(self) -> str:
        rows = ["epoch\tlr\tcv-frame-acc\ttrain-loss\n"]
        for e in self.epochs:
            rows.append(f"{e.epoch}\t{e.learning_rate:.8g}\t{e.cv_accuracy:.6f}\t{e.train_loss:.6f}\n")
        return "".join(rows)


def init_model(seed, layout, context: int = 2) -> AcousticModel:
    """Uniform weights in +-sqrt(3 / fan_in), zero biases."""
    layout = [int(s) for s in layout]
    if len(layout) < 3:
        raise ValueError("layout needs input, at least one hidden layer and output")
    if any(s <= 0 for s in layout):
        raise ValueError("layer sizes must be positive")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(layout[:-1], layout[1:]):
        r = np.sqrt(3.0 / n_in)
        weights.append(rng.uniform(-r, r, (n_in, n_out)))
        biases.append(np.zeros(n_out))
    return AcousticModel(weights, biases, context)


def splice(frames: np.ndarray, context: int) -> np.ndarray:
    """Stack +-context neighbours; edges are padded by replication."""
    frames = np.asarray(frames, dtype=np.float64)
    if context == 0:
        return frames
    padded = np.concatenate([np.repeat(frames[:1], context, 0), frames,
                             np.repeat(frames[-1:], context, 0)])
    T = frames.shape[0]
    return np.concatenate([padded[k:k + T] for k in range(2 * context + 1)], axis=1)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(model: AcousticModel, x: np.ndarray):
    """Layer inputs, last hidden activations and posteriors.

    ``acts[l]`` is the input of weight layer ``l``; with an output transform
    the last entry is the transformed hidden vector.
    """
    acts = [x]
    h = x
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        h = sigmoid(h @ w + b)
        acts.append(h)
    hidden = h
    if model.odlr is not None:
        a, c = model.odlr
        acts[-1] = hidden @ a.T + c
    logits = acts[-1] @ model.weights[-1] + model.biases[-1]
    return acts, hidden, softmax(logits)


def forward_spliced(model: AcousticModel, x: np.ndarray) -> np.ndarray:
    if x.shape[1] != model.sizes[0]:
        raise ValueError(f"input dimension {x.shape[1]} != model input {model.sizes[0]}")
    return _forward(model, x)[2]


def forward(model: AcousticModel, frames: np.ndarray, context: int | None = None) -> np.ndarray:
    """T x I posterior matrix for one utterance."""
    c = model.context if context is None else context
    return forward_spliced(model, splice(frames, c))


def ce_loss_and_grad(model: AcousticModel, x: np.ndarray, targets: np.ndarray):
    """Mean negative cross-entropy over frames and its exact gradient.

    ``x`` is the spliced input.  The gradient list follows ``model.params()``.
    """
    if x.shape[1] != model.sizes[0]:
        raise ValueError("input dimension mismatch")
    T = x.shape[0]
    acts, hidden, post = _forward(model, x)
    loss = -np.sum(targets * np.log(np.maximum(post, POSTERIOR_FLOOR))) / T
    # softmax + CE: d loss / d logits, valid for any target rows summing to one
    delta = (post - targets) / T
    grads_w, grads_b, odlr_grads = [], [], []
    for layer in range(len(model.weights) - 1, -1, -1):
        h = acts[layer]
        grads_w.append(h.T @ delta)
        grads_b.append(delta.sum(axis=0))
        if layer == 0:
            break
        delta = delta @ model.weights[layer].T
        if layer == len(model.weights) - 1 and model.odlr is not None:
            a, _ = model.odlr
            odlr_grads = [delta.T @ hidden, delta.sum(axis=0)]
            delta = delta @ a
            h = hidden
        delta = delta * h * (1.0 - h)
    grads = []
    for gw, gb in zip(reversed(grads_w), reversed(grads_b)):
        grads.extend([gw, gb])
    return float(loss), grads + odlr_grads


def frame_accuracy(model: AcousticModel, x: np.ndarray, targets: np.ndarray) -> float:
    post = forward_spliced(model, x)
    return float(np.mean(post.argmax(axis=1) == targets.argmax(axis=1)))


def stack_dataset(model: AcousticModel, dataset):
    """Splice and concatenate a list of ``(frames, targets)`` pairs."""
    xs, ys = [], []
    for frames, targets in dataset:
        xs.append(splice(frames, model.context))
        ys.append(np.asarray(targets, dtype=np.float64))
    return np.concatenate(xs), np.concatenate(ys)


def _trainable_mask(model: AcousticModel, trainable):
    n = len(model.params())
    if trainable is None or trainable == "all":
        return [True] * n
    if trainable == "odlr":
        if model.odlr is None:
            raise ValueError("model has no output transform")
        return [False] * (n - 2) + [True, True]
    raise ValueError(f"unknown trainable set {trainable!r}")


def train(model: AcousticModel, dataset, schedule: TrainSchedule, cv_set,
          trainable=None) -> tuple[AcousticModel, TrainLog]:
    """Mini-batch SGD with the halving/stopping rule on cv frame accuracy.

    Each update moves parameters by ``lr`` times the gradient summed over
    the mini-batch (per-frame learning rate).  An epoch that does not beat
    the best cv accuracy so far is rolled back.  The relative improvement of
    an epoch is measured against that best accuracy; below the halving
    threshold the rate is halved, below the stopping threshold training ends
    once the rate has been halved at least once.  Returns a trained copy
    from the best cv epoch; the input model is untouched.
    """
    dataset, cv_set = list(dataset), list(cv_set)
    if not dataset or not cv_set:
        raise ValueError("dataset and cv_set must be non-empty")
    model = model.copy()
    x, y = stack_dataset(model, dataset)
    xcv, ycv = stack_dataset(model, cv_set)
    mask = _trainable_mask(model, trainable)
    rng = np.random.default_rng(schedule.seed)
    log = TrainLog()

    lr = schedule.learning_rate
    best_acc = frame_accuracy(model, xcv, ycv)
    init_loss, _ = ce_loss_and_grad(model, x, y)
    log.epochs.append(EpochLog(0, lr, best_acc, init_loss))
    best = model.copy()
    halved = False
    n = x.shape[0]
    bs = schedule.batch_size
    for epoch in range(1, schedule.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, grads = ce_loss_and_grad(model, x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}")
            step = lr * len(idx)
            for p, g, on in zip(model.params(), grads, mask):
                if on:
                    p -= step * g
            total += loss * len(idx)
        acc = frame_accuracy(model, xcv, ycv)
        log.epochs.append(EpochLog(epoch, lr, acc, total / n))
        rel = (acc - best_acc) / max(best_acc, 1e-12)
        if acc > best_acc:
            best_acc, best = acc, model.copy()
            log.best_epoch = epoch
        else:
            model = best.copy()
        logger.debug("epoch %d lr %.5g cv-acc %.4f rel %.4g", epoch, lr, acc, rel)
        if rel < schedule.stop_threshold and halved:
            break
        if rel < schedule.halve_threshold:
            lr *= 0.5
            halved = True
    return best, log


def one_hot(states, n_states: int) -> np.ndarray:
    states = np.asarray(states, dtype=int)
    out = np.zeros((states.size, n_states))
    out[np.arange(states.size), states] = 1.0
    return out


def estimate_priors(alignments, n_states: int, floor: float = 1e-4) -> Priors:
    """Relative state frequencies; floored states are pinned at ``floor``."""
    alignments = [np.asarray(a, dtype=int) for a in alignments]
    if not alignments or sum(a.size for a in alignments) == 0:
        raise ValueError("empty alignment set")
    if not 0 < floor * n_states < 1:
        raise ValueError("floor * n_states must lie in (0, 1)")
    counts = np.bincount(np.concatenate(alignments), minlength=n_states).astype(float)
    p = counts / counts.sum()
    pinned = np.zeros(n_states, dtype=bool)
    while True:
        newly = (p < floor) & ~pinned
        if not newly.any():
            break
        pinned |= newly
        free_mass = 1.0 - floor * pinned.sum()
        free = counts * ~pinned
        p = np.where(pinned, floor, free / free.sum() * free_mass)
    return Priors(p, floor)


def scaled_loglik(posteriors: np.ndarray, priors: Priors) -> np.ndarray:
    """log p(s|o) - log p(s): the state likelihood up to a per-frame constant."""
    return np.log(np.maximum(posteriors, POSTERIOR_FLOOR)) - np.log(priors.values)


# --- model file -------------------------------------------------------------

def save_model(model: AcousticModel, path) -> None:
    sizes = model.sizes
    header = f"MLP {len(sizes) - 1} {' '.join(map(str, sizes))} {model.context}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for w, b in zip(model.weights, model.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        if model.odlr is not None:
            a, c = model.odlr
            fh.write(b"ODLR\n")
            fh.write(struct.pack("<I", a.shape[0]))
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(c, dtype="<f8").tobytes())


def load_model(path) -> AcousticModel:
    with open(path, "rb") as fh:
        data = fh.read()
    nl = data.index(b"\n")
    head = data[:nl].decode("ascii").split()
    if head[0] != "MLP":
        raise ValueError(f"{path}: not an MLP model file")
    n_layers = int(head[1])
    sizes = [int(s) for s in head[2:3 + n_layers]]
    context = int(head[3 + n_layers])
    pos = nl + 1
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(data, "<f8", n_in * n_out, pos).reshape(n_in, n_out).copy()
        pos += 8 * n_in * n_out
        b = np.frombuffer(data, "<f8", n_out, pos).copy()
        pos += 8 * n_out
        weights.append(w)
        biases.append(b)
    odlr = None
    if data[pos:pos + 5] == b"ODLR\n":
        pos += 5
        (k,) = struct.unpack("<I", data[pos:pos + 4])
        pos += 4
        a = np.frombuffer(data, "<f8", k * k, pos).reshape(k, k).copy()
        pos += 8 * k * k
        c = np.frombuffer(data, "<f8", k, pos).copy()
        odlr = (a, c)
    return AcousticModel(weights, biases, context, odlr)


def save_priors(priors: Priors, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# floor {float(priors.floor)!r}\n")
        for v in priors.values:
            fh.write(f"{float(v)!r}\n")


def load_priors(path) -> Priors:
    floor, vals = None, []
    with open(path) as fh:
        for line in fh:
            if line.startswith("# floor"):
                floor = float(line.split()[2])
            elif line.strip():
                vals.append(float(line))
    return Priors(np.asarray(vals), floor)
