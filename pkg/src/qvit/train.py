"""Optimization, metrics, and the classical-to-quantum distillation pipeline.

Training follows the fixed protocol: Adam at 1e-3 with 10x decays at epochs
50 and 75, batch size 32, 100 epochs, best checkpoint selected by
validation AUC. Distillation pre-trains the student to match a teacher's
qubit-width intermediate vectors with MSE for 50 epochs, then copies the
teacher's final linear layer onto the student head before fine-tuning;
matching the final logits instead is kept as the ablation arm.
"""

import io
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as model_mod

log = logging.getLogger(__name__)

TEACHER_MAGIC = b"QKD1"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

BASE_LR = 1e-3
DECAY_EPOCHS = (50, 75)


def lr_schedule(epoch):
    """1e-3, decayed by 10x at epochs 50 and 75."""
    lr = BASE_LR
    for boundary in DECAY_EPOCHS:
        if epoch >= boundary:
            lr /= 10.0
    return lr


@dataclass
class OptimState:
    moments: dict = field(default_factory=dict)   # id -> (m, v)
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def adam_step(tensors, state, lr):
    """Bias-corrected Adam update, in place.

    A non-finite gradient anywhere skips the whole step (tripwire: this
    graph should never produce one) and returns False.
    """
    grads = []
    for t in tensors:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.isfinite(g).all():
            log.warning("non-finite gradient encountered at step %d; step skipped",
                        state.step + 1)
            return False
        grads.append(g)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for i, (t, g) in enumerate(zip(tensors, grads)):
        if i not in state.moments:
            state.moments[i] = (np.zeros_like(t.data), np.zeros_like(t.data))
        m, v = state.moments[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        t.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return True


def _average_ranks(x):
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def binary_auc(scores, is_positive):
    """ROC area via the rank statistic; tied scores contribute 1/2."""
    is_positive = np.asarray(is_positive, dtype=bool)
    n_pos = int(is_positive.sum())
    n_neg = len(is_positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = _average_ranks(np.asarray(scores, dtype=np.float64))
    r_pos = ranks[is_positive].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auc(probabilities, labels):
    """Mean one-vs-rest AUC over the classes present in the labels."""
    labels = np.asarray(labels)
    per_class = {}
    for cls in range(probabilities.shape[1]):
        auc = binary_auc(probabilities[:, cls], labels == cls)
        if not np.isnan(auc):
            per_class[cls] = auc
    if not per_class:
        raise ValueError("no class has both positive and negative samples")
    return float(np.mean(list(per_class.values()))), per_class


@dataclass
class Metrics:
    accuracy: float
    auc: float
    loss: float
    per_class_auc: dict
    n_samples: int

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "auc": self.auc,
            "loss": self.loss,
            "per_class_auc": {str(k): v for k, v in self.per_class_auc.items()},
            "n_samples": self.n_samples,
        }


def predict_logits(params, split, threads=1):
    out = np.empty((len(split), params.config.n_classes))
    with ad.no_grad():
        for i in range(len(split)):
            logits, _ = model_mod.forward(split.images[i], params, threads=threads)
            out[i] = logits.data[0]
    return out


def predict_intermediates(params, split, threads=1):
    width = (params.config.head_to if params.config.head_to is not None
             else params.config.embed_dim)
    out = np.empty((len(split), width))
    with ad.no_grad():
        for i in range(len(split)):
            _, inter = model_mod.forward(split.images[i], params, threads=threads)
            out[i] = inter.data[0]
    return out


def softmax_probs(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def evaluate(params, split, threads=1):
    """Pure function of (params, split): accuracy, macro AUC, mean loss."""
    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    logits = predict_logits(params, split, threads=threads)
    probs = softmax_probs(logits)
    # np.argmax breaks ties toward the lowest class index
    acc = float(np.mean(np.argmax(probs, axis=1) == split.labels))
    auc, per_class = macro_auc(probs, split.labels)
    picked = np.clip(probs[np.arange(len(split)), split.labels], 1e-300, None)
    loss = float(np.mean(-np.log(picked)))
    return Metrics(accuracy=acc, auc=auc, loss=loss, per_class_auc=per_class,
                   n_samples=len(split))


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


@dataclass
class TrainResult:
    params: "model_mod.ModelParams"        # best-validation-AUC snapshot
    final_params: "model_mod.ModelParams"
    history: list
    best_epoch: int
    best_val_auc: float


def train_loop(params, splits, epochs=100, batch_size=32, seed=0,
               schedule=lr_schedule, threads=1, eval_train=True,
               log_every=None):
    """Supervised training with per-epoch validation and best-AUC retention.

    Batching is seed-deterministic; two runs with identical inputs produce
    identical histories. Checkpoint selection is by validation AUC with
    ties broken by validation accuracy, then by the later epoch (AUC alone
    saturates early on easy data).
    """
    train, val = splits["train"], splits["val"]
    rng = np.random.default_rng(seed)
    state = OptimState()
    tensors = params.trainable()
    history = []
    best_key = (-1.0, -1.0)
    best = (0, params.copy())
    for epoch in range(epochs):
        lr = schedule(epoch)
        losses = []
        for batch in _batches(len(train), batch_size, rng):
            zero_grads(tensors)
            for idx in batch:
                logits, _ = model_mod.forward(train.images[idx], params,
                                              threads=threads)
                loss = ad.softmax_cross_entropy(logits, [train.labels[idx]])
                loss.backward(seed=1.0 / len(batch))
                losses.append(float(loss.data))
            adam_step(tensors, state, lr)
        epoch_loss = float(np.mean(losses)) if losses else float("nan")
        row = {"epoch": epoch, "lr": lr, "train_loss": epoch_loss}
        if eval_train:
            m = evaluate(params, train, threads=threads)
            row.update(train_acc=m.accuracy, train_auc=m.auc)
        vm = evaluate(params, val, threads=threads)
        row.update(val_loss=vm.loss, val_acc=vm.accuracy, val_auc=vm.auc)
        history.append(row)
        if (vm.auc, vm.accuracy) >= best_key:
            best_key = (vm.auc, vm.accuracy)
            best = (epoch, params.copy())
        if log_every and epoch % log_every == 0:
            log.info("epoch %d loss %.4f val acc %.3f auc %.3f",
                     epoch, epoch_loss, vm.accuracy, vm.auc)
    return TrainResult(params=best[1], final_params=params, history=history,
                       best_epoch=best[0], best_val_auc=best_key[0])


# ---------------------------------------------------------------------------
# knowledge distillation

@dataclass
class TeacherBundle:
    """Per-sample intermediate targets plus the teacher's final linear layer."""

    targets: np.ndarray          # (N, width) aligned with the training split
    head_weights: np.ndarray     # (width, n_classes)
    head_bias: np.ndarray        # (n_classes,)
    metadata: dict = field(default_factory=dict)

    @property
    def width(self):
        return self.targets.shape[1]


def save_teacher_bundle(path_or_file, bundle):
    sections = [("targets", bundle.targets), ("head_weights", bundle.head_weights),
                ("head_bias", bundle.head_bias)]
    header = {
        "sections": [{"name": name, "shape": list(arr.shape)}
                     for name, arr in sections],
        "metadata": bundle.metadata,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    out = io.BytesIO()
    out.write(TEACHER_MAGIC)
    out.write(struct.pack("<BI", 1, len(blob)))
    out.write(blob)
    for _, arr in sections:
        out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    data = out.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        with open(path_or_file, "wb") as f:
            f.write(data)


def load_teacher_bundle(path_or_file):
    if hasattr(path_or_file, "read"):
        data = path_or_file.read()
    else:
        with open(path_or_file, "rb") as f:
            data = f.read()
    if data[:4] != TEACHER_MAGIC:
        raise ValueError("not a teacher bundle (bad magic)")
    version, hlen = struct.unpack_from("<BI", data, 4)
    if version != 1:
        raise ValueError(f"unsupported teacher bundle version {version}")
    header = json.loads(data[9:9 + hlen])
    arrays = {}
    offset = 9 + hlen
    for entry in header["sections"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise ValueError("teacher bundle truncated")
        arrays[entry["name"]] = np.frombuffer(
            data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset = end
    if offset != len(data):
        raise ValueError("trailing bytes in teacher bundle")
    missing = {"targets", "head_weights", "head_bias"} - set(arrays)
    if missing:
        raise ValueError(f"teacher bundle missing sections {sorted(missing)}")
    return TeacherBundle(targets=arrays["targets"],
                         head_weights=arrays["head_weights"],
                         head_bias=arrays["head_bias"],
                         metadata=header["metadata"])


def _student_width(params):
    if params.config.head_to is not None:
        raise ValueError("distillation student must use the standard head")
    return params.config.embed_dim


def _match_loop(params, train_split, targets, use_intermediate, epochs,
                batch_size, seed, threads, match_post_relu=False):
    rng = np.random.default_rng(seed)
    state = OptimState()
    tensors = params.trainable()
    history = []
    for epoch in range(epochs):
        losses = []
        for batch in _batches(len(train_split), batch_size, rng):
            zero_grads(tensors)
            for idx in batch:
                logits, inter = model_mod.forward(train_split.images[idx], params,
                                                  threads=threads)
                out = inter if use_intermediate else logits
                if use_intermediate and match_post_relu:
                    out = ad.relu(out)
                loss = ad.mse_loss(out, targets[idx][None, :])
                loss.backward(seed=1.0 / len(batch))
                losses.append(float(loss.data))
            adam_step(tensors, state, BASE_LR)
        history.append({"epoch": epoch, "kd_loss": float(np.mean(losses))})
    return history


def kd_pretrain(params, bundle, train_split, epochs=50, batch_size=32, seed=0,
                threads=1, match_post_relu=False):
    """Match the teacher's intermediate vectors with MSE (Adam, 1e-3, batch 32).

    bundle.targets row i must correspond to train_split sample i. Targets
    are matched pre-ReLU unless match_post_relu is set.
    """
    width = _student_width(params)
    if bundle.width != width:
        raise ValueError(
            f"teacher width {bundle.width} != student intermediate width {width}")
    if len(bundle.targets) != len(train_split):
        raise ValueError("bundle target count does not match the training split")
    targets = bundle.targets
    if match_post_relu:
        targets = np.maximum(targets, 0.0)
    return _match_loop(params, train_split, targets, True, epochs, batch_size,
                       seed, threads, match_post_relu=match_post_relu)


def kd_direct_logits(params, logit_targets, train_split, epochs=50,
                     batch_size=32, seed=0, threads=1):
    """Ablation arm: match final logits directly, no weight transfer after."""
    logit_targets = np.asarray(logit_targets, dtype=np.float64)
    if logit_targets.shape != (len(train_split), params.config.n_classes):
        raise ValueError("logit target shape mismatch")
    return _match_loop(params, train_split, logit_targets, False, epochs,
                       batch_size, seed, threads)


def transfer_head(params, bundle):
    """Overwrite the student classifier with the teacher's final layer.

    Touches exactly head.weight and head.bias; idempotent.
    """
    width = _student_width(params)
    head_w = params.tensors["head.weight"]
    head_b = params.tensors["head.bias"]
    if bundle.head_weights.shape != head_w.data.shape:
        raise ValueError(
            f"teacher head {bundle.head_weights.shape} != student head "
            f"{head_w.data.shape}")
    if bundle.head_bias.shape != head_b.data.shape:
        raise ValueError("teacher head bias shape mismatch")
    head_w.data[...] = bundle.head_weights
    head_b.data[...] = bundle.head_bias
    return params


def train_teacher(teacher_config, splits, epochs=100, batch_size=32, seed=0,
                  threads=1, schedule=lr_schedule):
    """Train the in-repo classical teacher and package it for distillation.

    The teacher uses the two-stage head (embed -> qubit width -> classes,
    ReLU between); its bundle carries the per-sample first-stage outputs on
    the training split plus the final layer's weights.
    """
    if teacher_config.head_to is None:
        raise ValueError("teacher config must set head_to (the student width)")
    params = model_mod.init_params(teacher_config, seed)
    result = train_loop(params, splits, epochs=epochs, batch_size=batch_size,
                        seed=seed, schedule=schedule, threads=threads,
                        eval_train=False)
    best = result.params
    targets = predict_intermediates(best, splits["train"], threads=threads)
    bundle = TeacherBundle(
        targets=targets,
        head_weights=best.tensors["head.weight"].data.copy(),
        head_bias=best.tensors["head.bias"].data.copy(),
        metadata={
            "teacher_embed_dim": teacher_config.embed_dim,
            "teacher_depth": teacher_config.depth,
            "width": teacher_config.head_to,
            "seed": seed,
            "epochs": epochs,
            "best_epoch": result.best_epoch,
            "val_auc": result.best_val_auc,
        },
    )
    return best, bundle, result
