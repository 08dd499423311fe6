"""Caption decoder: unrolled BPTT, softmax loss, SGD schedule, greedy decoding.

The image feature initializes the recurrent state through
``s_0 = tanh(feature @ W_img + b_img)``. At step t the embedded token t is
fed to the cell and the state is projected to vocabulary logits. Captions
are wrapped as ``<START> ... <END>`` and padded with ``<PAD>``, which is
masked out of the loss.
"""

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import _tree
from .cells import (
    ConfigurationError,
    LstmParams,
    RhnParams,
    Variant,
    cell_backward,
    cell_forward,
    init_params,
    initial_state,
)
from .dataio import DataError, build_vocab
from .diagnostics import clip_by_global_norm
from .numkernel import ShapeError, as_float, global_norm
from .vocab import END, PAD, START

__all__ = [
    "MODEL_KINDS",
    "ModelParams",
    "TrainConfig",
    "StepRecord",
    "RunReport",
    "Batch",
    "NonFiniteLossError",
    "lr_at",
    "softmax_xent",
    "init_model",
    "model_architecture",
    "build_model",
    "make_batch",
    "forward_unroll",
    "backward_unroll",
    "sgd_update",
    "train",
    "greedy_decode",
    "greedy_decode_batch",
    "write_run_csv",
    "RUN_CSV_HEADER",
]

log = logging.getLogger(__name__)

MODEL_KINDS = ("lstm", "rhn", "bn_rhn")
RUN_CSV_HEADER = ["step", "epoch", "lr", "loss", "pre_clip_norm", "clipped"]


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step, diagnostics):
        super().__init__(f"non-finite loss at step {step}: {diagnostics}")
        self.step = step
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class SiteStats:
    """Running statistics of one batch-norm site for one time slot."""

    running_mean: np.ndarray = field(metadata={"buffer": True})
    running_var: np.ndarray = field(metadata={"buffer": True})
    n_updates: int = field(default=0, metadata={"static": True})


@dataclass(frozen=True)
class ModelParams:
    embed: np.ndarray
    W_img: np.ndarray
    b_img: np.ndarray
    cell: object
    W_out: np.ndarray
    b_out: np.ndarray
    # Per-time-step running statistics: one tuple of SiteStats per time slot,
    # sites ordered as cell.bn_state then cell.bn_input. None when the cell's
    # own statistics are shared across time.
    step_stats: tuple | None = None

    @property
    def kind(self):
        if isinstance(self.cell, LstmParams):
            return "lstm"
        return "rhn" if self.cell.variant is Variant.COUPLED else "bn_rhn"

    @property
    def vocab_size(self):
        return self.embed.shape[0]

    @property
    def feature_width(self):
        return self.W_img.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    model: str = "bn_rhn"
    width: int = 64
    embed: int = 64
    depth: int = 3
    lr0: float = 0.1
    decay: float = 0.5
    decay_every: int = 8
    epochs: int = 10
    batch_size: int = 8
    max_len: int = 16
    # "auto": threshold 5 for lstm/rhn, no clipping for bn_rhn.
    clip: object = "auto"
    seed: int = 1
    init_scale: float = 0.04
    transform_bias: float = -2.0
    carry_bias: float = 2.0
    bn_gamma: float = 0.1
    bn_every_depth: bool = True
    bn_shared_over_time: bool = True
    min_count: int = 1

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigurationError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if not self.lr0 > 0:
            raise ConfigurationError(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.decay <= 1:
            raise ConfigurationError(f"decay must lie in (0, 1], got {self.decay}")
        if self.decay_every < 1:
            raise ConfigurationError(f"decay_every must be >= 1, got {self.decay_every}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1 or (self.model == "bn_rhn" and self.batch_size < 2):
            raise ConfigurationError(f"batch_size {self.batch_size} is too small for model {self.model}")
        for name in ("width", "embed", "depth", "max_len", "min_count"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.clip not in ("auto", None) and not (isinstance(self.clip, (int, float)) and self.clip > 0):
            raise ConfigurationError(f"clip must be 'auto', None or a positive number, got {self.clip!r}")

    @property
    def clip_threshold(self):
        if self.clip == "auto":
            return None if self.model == "bn_rhn" else 5.0
        return self.clip

    def to_dict(self):
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def lr_at(epoch, cfg):
    """Step-decayed learning rate ``lr0 * decay ** (epoch // decay_every)``."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.decay ** (epoch // cfg.decay_every)


def softmax_xent(logits, targets, mask):
    """Masked mean cross-entropy and its gradient with respect to ``logits``.

    A fully masked batch has loss 0 and zero gradient.
    """
    logits = as_float(logits)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    B, V = logits.shape
    if targets.shape != (B,) or mask.shape != (B,):
        raise ShapeError(f"targets {targets.shape} and mask {mask.shape} must have length {B}")
    if np.any(targets < 0) or np.any(targets >= V):
        raise DataError(f"target ids must lie in [0, {V})")
    n = mask.sum()
    if n == 0:
        return 0.0, np.zeros_like(logits)
    mask = mask.astype(logits.dtype)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(B)
    loss = -(log_p[rows, targets] * mask).sum() / n
    dlogits = np.exp(log_p)
    dlogits[rows, targets] -= 1.0
    dlogits *= (mask / n)[:, None]
    # Extended-precision inputs keep their precision in the returned loss.
    return (float(loss) if loss.dtype == np.float64 else loss), dlogits


# --------------------------------------------------------------------------
# model construction


def init_model(
    vocab_size,
    feature_width,
    kind="bn_rhn",
    width=64,
    embed=64,
    depth=3,
    seed=1,
    init_scale=0.04,
    transform_bias=-2.0,
    carry_bias=2.0,
    bn_gamma=0.1,
    bn_every_depth=True,
    bn_step_slots=0,
):
    if kind not in MODEL_KINDS:
        raise ConfigurationError(f"model kind must be one of {MODEL_KINDS}, got {kind!r}")
    if vocab_size < 5 or feature_width < 1:
        raise ConfigurationError(f"invalid vocab_size={vocab_size} or feature_width={feature_width}")
    rng = np.random.default_rng(seed)

    def uniform(rows, cols):
        if init_scale == 0:
            return np.zeros((rows, cols))
        return rng.uniform(-init_scale, init_scale, size=(rows, cols))

    embed_table = uniform(vocab_size, embed)
    W_img = uniform(feature_width, width)
    if kind == "lstm":
        cell = init_params("lstm", embed, width, seed=rng, init_scale=init_scale)
    else:
        cell = init_params(
            "rhn",
            embed,
            width,
            depth,
            Variant.COUPLED if kind == "rhn" else Variant.DECOUPLED_BN,
            seed=rng,
            init_scale=init_scale,
            transform_bias=transform_bias,
            carry_bias=carry_bias,
            bn_gamma=bn_gamma,
            bn_every_depth=bn_every_depth,
        )
    W_out = uniform(width, vocab_size)
    step_stats = None
    if kind == "bn_rhn" and bn_step_slots > 0:
        slot = tuple(
            SiteStats(np.zeros_like(layer.running_mean), np.ones_like(layer.running_var))
            for layer in _bn_sites(cell)
        )
        step_stats = (slot,) * bn_step_slots
    return ModelParams(
        embed=embed_table,
        W_img=W_img,
        b_img=np.zeros((1, width)),
        cell=cell,
        W_out=W_out,
        b_out=np.zeros((1, vocab_size)),
        step_stats=step_stats,
    )


def _bn_sites(cell):
    return list(cell.bn_state) + [cell.bn_input]


def _site_stats(cell):
    return tuple(SiteStats(b.running_mean, b.running_var, b.n_updates) for b in _bn_sites(cell))


def _cell_at_step(params, t, fallback=False):
    """The cell carrying the running statistics of time slot ``t``.

    Steps past the last slot use the last slot. With ``fallback`` a slot that
    was never updated (a step no training caption reached) borrows the latest
    updated slot before it.
    """
    if params.step_stats is None:
        return params.cell
    k = min(t, len(params.step_stats) - 1)
    if fallback:
        while k > 0 and params.step_stats[k][0].n_updates == 0:
            k -= 1
    layers = [
        replace(b, running_mean=st.running_mean, running_var=st.running_var, n_updates=st.n_updates)
        for b, st in zip(_bn_sites(params.cell), params.step_stats[k])
    ]
    return replace(params.cell, bn_state=tuple(layers[:-1]), bn_input=layers[-1])


def init_from_config(vocab_size, feature_width, cfg):
    return init_model(
        vocab_size,
        feature_width,
        kind=cfg.model,
        width=cfg.width,
        embed=cfg.embed,
        depth=cfg.depth,
        seed=cfg.seed,
        init_scale=cfg.init_scale,
        transform_bias=cfg.transform_bias,
        carry_bias=cfg.carry_bias,
        bn_gamma=cfg.bn_gamma,
        bn_every_depth=cfg.bn_every_depth,
        # One slot per unrolled step: <START> plus up to max_len words.
        bn_step_slots=0 if cfg.bn_shared_over_time else cfg.max_len + 1,
    )


def model_architecture(params):
    """Shape-determining description of ``params`` (stored in checkpoints)."""
    cell = params.cell
    arch = {
        "kind": params.kind,
        "vocab_size": params.vocab_size,
        "feature_width": params.feature_width,
        "embed": params.embed.shape[1],
        "width": params.W_img.shape[1],
        "depth": 1 if isinstance(cell, LstmParams) else cell.depth,
    }
    if isinstance(cell, RhnParams) and cell.bn_state is not None:
        arch["bn_every_depth"] = len(cell.bn_state) == cell.depth
        arch["bn_eps"] = cell.bn_input.eps
        arch["bn_momentum"] = cell.bn_input.momentum
        arch["bn_step_slots"] = 0 if params.step_stats is None else len(params.step_stats)
    return arch


def build_model(arch):
    """Zero-valued parameters with the structure described by ``arch``."""
    params = init_model(
        int(arch["vocab_size"]),
        int(arch["feature_width"]),
        kind=arch["kind"],
        width=int(arch["width"]),
        embed=int(arch["embed"]),
        depth=int(arch["depth"]),
        init_scale=0.0,
        bn_every_depth=bool(arch.get("bn_every_depth", True)),
        bn_step_slots=int(arch.get("bn_step_slots", 0)),
    )
    cell = params.cell
    if isinstance(cell, RhnParams) and cell.bn_state is not None and "bn_eps" in arch:
        eps, mom = float(arch["bn_eps"]), float(arch["bn_momentum"])
        cell = replace(
            cell,
            bn_state=tuple(replace(b, eps=eps, momentum=mom) for b in cell.bn_state),
            bn_input=replace(cell.bn_input, eps=eps, momentum=mom),
        )
        params = replace(params, cell=cell)
    return params


# --------------------------------------------------------------------------
# batches and the unrolled graph


@dataclass
class Batch:
    ids: list
    features: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    @property
    def size(self):
        return self.features.shape[0]

    @property
    def steps(self):
        return self.inputs.shape[1]


def make_batch(ids, features, captions, vocab, max_len=16):
    """Encode token captions as ``<START> w1 .. wn <END> <PAD>..`` with the
    input/target shift and PAD mask. Captions longer than ``max_len`` are
    truncated before ``<END>`` is appended."""
    seqs = []
    for cap in captions:
        ids_ = vocab.encode(cap) if cap and isinstance(cap[0], str) else list(cap)
        seqs.append([START] + ids_[:max_len] + [END])
    L = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), L), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = s
    targets = tokens[:, 1:]
    return Batch(
        ids=list(ids),
        features=np.asarray(features, dtype=np.float64).reshape(len(seqs), -1),
        inputs=tokens[:, :-1],
        targets=targets,
        mask=(targets != PAD).astype(np.float64),
    )


@dataclass
class UnrollCache:
    batch: Batch
    s0: np.ndarray
    outputs: list
    cell_caches: list
    cell_params: list
    dlogits: np.ndarray
    params_after: ModelParams
    loss: float


def _check_batch(batch, params):
    V = params.vocab_size
    for name in ("inputs", "targets"):
        arr = getattr(batch, name)
        bad = np.argwhere((arr < 0) | (arr >= V))
        if len(bad):
            row = bad[0][0]
            raise DataError(f"sample {batch.ids[row]!r}: token id {arr[tuple(bad[0])]} out of range for vocab size {V}")
    if batch.features.shape[1] != params.feature_width:
        raise ShapeError(f"feature width {batch.features.shape[1]} does not match model width {params.feature_width}")


def forward_unroll(batch, params, mode="train"):
    """Total masked loss over the batch; returns ``(loss, cache)``.

    ``cache.params_after`` carries advanced batch-norm running statistics
    when ``mode == "train"``.
    """
    _check_batch(batch, params)
    s0 = np.tanh(batch.features @ params.W_img + params.b_img)
    state = initial_state(params.cell, s0)
    cell = params.cell
    per_step = params.step_stats is not None
    slots = list(params.step_stats) if per_step else None
    outputs, caches, cell_params = [], [], []
    for t in range(batch.steps):
        x = params.embed[batch.inputs[:, t]]
        if per_step:
            cell = _cell_at_step(params, t, fallback=mode != "train")
        cell_params.append(cell)
        state, out, cache, cell = cell_forward(cell, state, x, mode)
        if per_step and mode == "train":
            slots[min(t, len(slots) - 1)] = _site_stats(cell)
        outputs.append(out)
        caches.append(cache)
    S = np.concatenate(outputs, axis=0)
    logits = S @ params.W_out + params.b_out
    # Time-major flattening matches the stacking of S.
    loss, dlogits = softmax_xent(logits, batch.targets.T.ravel(), batch.mask.T.ravel())
    if per_step:
        after = replace(params, step_stats=tuple(slots)) if mode == "train" else params
    else:
        after = params if cell is params.cell else replace(params, cell=cell)
    return loss, UnrollCache(batch, s0, outputs, caches, cell_params, dlogits, after, loss)


def _accumulate(total, prefix, grads):
    for k, v in grads.items():
        key = prefix + k
        total[key] = total[key] + v if key in total else v


def backward_unroll(cache, params, trace=None):
    """Gradients of the unrolled loss for every trainable array of ``params``.

    Keys match ``bnrhn._tree.trainable(params)``. If ``trace`` is a list, the
    norm of dL/ds_t is appended for t = T, ..., 1.
    """
    batch = cache.batch
    T, B = batch.steps, batch.size
    S = np.concatenate(cache.outputs, axis=0)
    grads = {
        "W_out": S.T @ cache.dlogits,
        "b_out": cache.dlogits.sum(axis=0, keepdims=True),
    }
    dS = (cache.dlogits @ params.W_out.T).reshape(T, B, -1)
    dembed = np.zeros_like(params.embed)
    n_state = 2 if isinstance(params.cell, LstmParams) else 1
    d_state = tuple(np.zeros_like(dS[0]) for _ in range(n_state))
    for t in reversed(range(T)):
        d_state = (d_state[0] + dS[t],) + d_state[1:]
        if trace is not None:
            trace.append(float(np.linalg.norm(d_state[0])))
        d_state, dx, g = cell_backward(cache.cell_params[t], cache.cell_caches[t], d_state)
        _accumulate(grads, "cell.", g)
        np.add.at(dembed, batch.inputs[:, t], dx)
    da0 = d_state[0] * (1.0 - cache.s0 ** 2)
    grads["embed"] = dembed
    grads["W_img"] = batch.features.T @ da0
    grads["b_img"] = da0.sum(axis=0, keepdims=True)
    names = _tree.trainable(params)
    return {k: grads[k] for k in names}


def sgd_update(params, grads, lr):
    """``theta - lr * g`` for every trainable array."""
    current = _tree.trainable(params)
    if set(grads) != set(current):
        raise ValueError(f"gradient keys differ from parameters: {sorted(set(grads) ^ set(current))}")
    mapping = {}
    for k, v in current.items():
        if grads[k].shape != v.shape:
            raise ShapeError(f"gradient for {k} has shape {grads[k].shape}, parameter has {v.shape}")
        mapping[k] = v - lr * grads[k]
    return _tree.replace(params, mapping)


# --------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class StepRecord:
    step: int
    epoch: int
    lr: float
    loss: float
    pre_clip_norm: float
    clipped: bool


@dataclass
class RunReport:
    records: list
    params: ModelParams
    initial_params: ModelParams
    vocab: object
    config: TrainConfig
    wall_clock: float = 0.0
    notes: list = field(default_factory=list)

    @property
    def losses(self):
        return [r.loss for r in self.records]


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    if n <= batch_size:
        return [order]
    # Incomplete trailing batches are dropped; reshuffling covers them next epoch.
    return [order[i : i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def train(dataset, cfg, vocab=None):
    """Seeded SGD training over ``dataset`` (a list of CaptionSample).

    Every reference caption forms one training pair. Raises
    NonFiniteLossError if the loss or gradient becomes non-finite.
    """
    if not dataset:
        raise DataError("cannot train on an empty dataset")
    started = time.perf_counter()
    if vocab is None:
        vocab = build_vocab(dataset, cfg.min_count)
    pairs = [(s.id, s.feature, ref) for s in dataset for ref in s.references]
    params = init_from_config(len(vocab), dataset[0].feature.shape[0], cfg)
    initial = params
    encoded = [vocab.encode(ref) for _, _, ref in pairs]
    rng = np.random.default_rng([cfg.seed, 7])
    threshold = cfg.clip_threshold
    records = []
    notes = []
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        for idx in _batches(len(pairs), cfg.batch_size, rng):
            batch = make_batch(
                [pairs[i][0] for i in idx],
                np.stack([pairs[i][1] for i in idx]),
                [encoded[i] for i in idx],
                vocab,
                cfg.max_len,
            )
            loss, cache = forward_unroll(batch, params, "train")
            if not batch.mask.any():
                notes.append(f"step {step}: every target position is masked; loss and gradient are zero")
            grads = backward_unroll(cache, params)
            norm = global_norm(grads.values())
            if not (np.isfinite(loss) and np.isfinite(norm)):
                raise NonFiniteLossError(step, {"loss": loss, "grad_norm": norm, "lr": lr, "epoch": epoch})
            clipped = False
            if threshold is not None:
                grads, _ = clip_by_global_norm(grads, threshold)
                clipped = norm > threshold
            params = sgd_update(cache.params_after, grads, lr)
            records.append(StepRecord(step, epoch, lr, loss, norm, clipped))
            step += 1
        log.debug("epoch %d lr %.4g last loss %.4f", epoch, lr, records[-1].loss if records else float("nan"))
    return RunReport(
        records=records,
        params=params,
        initial_params=initial,
        vocab=vocab,
        config=cfg,
        wall_clock=time.perf_counter() - started,
        notes=notes,
    )


def write_run_csv(report, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RUN_CSV_HEADER)
        for r in report.records:
            w.writerow([r.step, r.epoch, repr(r.lr), repr(r.loss), repr(r.pre_clip_norm), int(r.clipped)])


# --------------------------------------------------------------------------
# decoding


def greedy_decode_batch(features, params, vocab, max_len=16):
    """Greedy captions for each feature row.

    Starts from ``<START>`` and feeds back the argmax token (lowest id wins a
    tie) until ``<END>`` or ``max_len`` generated tokens. ``<PAD>`` and
    ``<START>`` are never emitted. Batch norm runs in inference mode.
    """
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[None, :]
    B = features.shape[0]
    if B == 0:
        return []
    s0 = np.tanh(features @ params.W_img + params.b_img)
    state = initial_state(params.cell, s0)
    tokens = np.full(B, START, dtype=np.int64)
    out = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for t in range(max_len):
        cell = _cell_at_step(params, t, fallback=True)
        state, h, _, _ = cell_forward(cell, state, params.embed[tokens], "infer")
        logits = h @ params.W_out + params.b_out
        logits[:, PAD] = -np.inf
        logits[:, START] = -np.inf
        tokens = np.argmax(logits, axis=1)
        for i in np.flatnonzero(~done):
            if tokens[i] == END:
                done[i] = True
            else:
                out[i].append(vocab.tokens[tokens[i]])
        if done.all():
            break
    return out


def greedy_decode(feature, params, vocab, max_len=16):
    return greedy_decode_batch(np.asarray(feature)[None, :], params, vocab, max_len)[0]


# --------------------------------------------------------------------------
# full-model gradient check on a tiny problem


def tiny_problem(kind, depth, seed=0):
    """Seeded tiny model and batch: V=7, E=4, F=5, T=3 steps, B=2.

    Gates are started mid-range (zero gate biases, unit batch-norm scale,
    weights drawn from Uniform(-0.5, 0.5)) so every path carries gradient.
    """
    from .vocab import Vocab

    rng = np.random.default_rng([seed, depth, MODEL_KINDS.index(kind)])
    vocab = Vocab.from_words(["w4", "w5", "w6"])
    params = init_model(
        7, 6, kind, width=5, embed=4, depth=depth, seed=rng,
        init_scale=0.5, transform_bias=0.0, carry_bias=0.0, bn_gamma=1.0,
    )
    words = rng.integers(4, 7, size=3)
    # One two-word and one one-word caption: 3 input steps, one PAD target.
    batch = make_batch(["a", "b"], rng.normal(size=(2, 6)), [list(words[:2]), list(words[2:])], vocab)
    return params, batch


def _extended(params):
    every = _tree.all_arrays(params)
    return _tree.replace(params, {k: v.astype(np.longdouble) for k, v in every.items()})


def model_grad_check(kind, depth, seed=0, h=1e-5, tol=1e-4, fault=0.0):
    """Central-difference check of every parameter of a tiny model.

    The analytic gradient is computed in float64. The finite-difference side
    perturbs the float64 parameters and evaluates the loss in extended
    precision, so the difference quotient is not limited by the float64
    rounding of a loss near 2 (about 1e-11 in the quotient). ``fault`` scales
    the analytic gradient by (1 + fault) to exercise the failure path.
    """
    from .diagnostics import grad_check

    params, batch = tiny_problem(kind, depth, seed)
    _, cache = forward_unroll(batch, params, "train")
    grads = backward_unroll(cache, params)
    if fault:
        grads = {k: v * (1.0 + fault) for k, v in grads.items()}
    return grad_check(
        lambda _: forward_unroll(batch, _extended(params), "train")[0],
        _tree.trainable(params),
        grads,
        h=h,
        tol=tol,
    )
