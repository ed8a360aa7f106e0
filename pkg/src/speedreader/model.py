"""The speed reader: embedding, LSTM cell, skip agent, jump agent, classifier.

Reading loop: at each position the skip agent peeks at the current token
embedding (together with the hidden state) and decides read vs skip. A
skip advances one position with no state update. A read applies the LSTM
cell (one state update), after which the jump agent picks one of four
moves: continue to the next token, jump past the next comma, jump past
the next sentence terminator, or terminate at the document end. The
classifier reads the final hidden state.

Modes: ``sample`` draws both agents' actions, ``greedy`` takes argmax
(ties break toward read), ``full_read`` forces read+continue everywhere
without consulting the agents, which makes it computation-identical to a
plain LSTM over the full token sequence.

Training needs gradients of the episode objective with the sampled
actions frozen; ``episode_backward`` replays a cached forward pass in
reverse with hand-derived layer gradients (verified by grad_check).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .numerics import EPS_LOG, ParamStore, Rng, sample_categorical, softmax
from .text import (
    JUMP_CONTINUE,
    JUMP_TO_COMMA,
    JUMP_TO_DOC_END,
    JUMP_TO_SENTENCE_END,
    NUM_JUMP_ACTIONS,
    Document,
    StructureIndex,
    build_structure_index,
    resolve_jump,
)

READ = 0
SKIP = 1
SKIP_ACTION_NAMES = ("read", "skip")

MODE_SAMPLE = "sample"
MODE_GREEDY = "greedy"
MODE_FULL_READ = "full_read"
MODES = (MODE_SAMPLE, MODE_GREEDY, MODE_FULL_READ)

# Checkpoint tensor order; changing it breaks the on-disk format.
PARAM_ORDER = (
    "embed",
    "lstm_w",
    "lstm_u",
    "lstm_b",
    "skip_w",
    "skip_b",
    "jump_w",
    "jump_b",
    "cls_w",
    "cls_b",
)

CHECKPOINT_MAGIC = b"SRDR"
CHECKPOINT_VERSION = 1


class ModelParams:
    """All parameter tensors plus their dims, backed by a ParamStore.

    Gate layout in the stacked LSTM weights is [input, forget, cell, output]
    blocks of size ``hidden_size`` each. The skip head consumes the
    concatenation [h; x], the jump head and classifier consume h alone.
    """

    def __init__(self, hidden_size: int, vocab_size: int, num_classes: int, store: ParamStore):
        self.hidden_size = hidden_size
        self.vocab_size = vocab_size
        self.num_classes = num_classes
        self.store = store
        p = store.params
        self.embed = p["embed"]
        self.lstm_w = p["lstm_w"]
        self.lstm_u = p["lstm_u"]
        self.lstm_b = p["lstm_b"]
        self.skip_w = p["skip_w"]
        self.skip_b = p["skip_b"]
        self.jump_w = p["jump_w"]
        self.jump_b = p["jump_b"]
        self.cls_w = p["cls_w"]
        self.cls_b = p["cls_b"]

    @classmethod
    def init(cls, hidden_size: int, vocab_size: int, num_classes: int, rng: Rng) -> "ModelParams":
        """Uniform [-0.1, 0.1] weights, +1 forget-gate bias, zeroed agent heads."""
        d, v, c = hidden_size, vocab_size, num_classes
        if d < 1 or v < 1 or c < 2:
            raise ValueError(f"bad dims: hidden={d} vocab={v} classes={c}")

        def uniform(*shape: int) -> np.ndarray:
            return (rng.uniform_array(*shape) * 2.0 - 1.0) * 0.1

        store = ParamStore()
        store.add("embed", uniform(v, d))
        store.add("lstm_w", uniform(4 * d, d))
        store.add("lstm_u", uniform(4 * d, d))
        lstm_b = np.zeros(4 * d)
        lstm_b[d : 2 * d] = 1.0  # forget gate starts open
        store.add("lstm_b", lstm_b)
        store.add("skip_w", np.zeros((2, 2 * d)))
        store.add("skip_b", np.zeros(2))
        store.add("jump_w", np.zeros((NUM_JUMP_ACTIONS, d)))
        store.add("jump_b", np.zeros(NUM_JUMP_ACTIONS))
        store.add("cls_w", uniform(c, d))
        store.add("cls_b", np.zeros(c))
        return cls(d, v, c, store)


def lstm_step(
    h: np.ndarray, c: np.ndarray, x: np.ndarray, params: ModelParams
) -> tuple[np.ndarray, np.ndarray]:
    """One state update with standard gates; returns (h', c')."""
    d = params.hidden_size
    pre = params.lstm_w @ x + params.lstm_u @ h + params.lstm_b
    i = _sigmoid(pre[:d])
    f = _sigmoid(pre[d : 2 * d])
    g = np.tanh(pre[2 * d : 3 * d])
    o = _sigmoid(pre[3 * d :])
    c2 = f * c + i * g
    h2 = o * np.tanh(c2)
    return h2, c2


def skip_policy(h: np.ndarray, x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Distribution over {read, skip} from the concatenated [h; x]."""
    return softmax(params.skip_w @ np.concatenate([h, x]) + params.skip_b)


def jump_policy(h: np.ndarray, params: ModelParams) -> np.ndarray:
    """Distribution over the four jump actions."""
    return softmax(params.jump_w @ h + params.jump_b)


def classify(h: np.ndarray, params: ModelParams) -> np.ndarray:
    """Class distribution from the final hidden state."""
    return softmax(params.cls_w @ h + params.cls_b)


@dataclass(frozen=True, slots=True)
class TraceStep:
    position: int
    skip_action: int  # READ or SKIP
    skip_logprob: float
    jump_action: int | None  # present iff skip_action == READ
    jump_logprob: float | None


@dataclass(frozen=True, slots=True)
class ReadingTrace:
    steps: tuple[TraceStep, ...]
    state_updates: int  # number of read steps
    tokens_total: int
    final_hidden: np.ndarray
    prediction: np.ndarray  # class distribution
    terminated_early: bool
    mode: str


class PreparedDoc(NamedTuple):
    """Per-document arrays precomputed once for repeated episodes."""

    ids: np.ndarray  # int64 vocab ids, shape (T,)
    index: StructureIndex
    label_id: int


def prepare_documents(docs: Sequence[Document]) -> list[PreparedDoc]:
    out = []
    for doc in docs:
        ids = np.fromiter((t.vocab_id for t in doc.tokens), dtype=np.int64, count=len(doc.tokens))
        out.append(PreparedDoc(ids, build_structure_index(doc.tokens), doc.label_id))
    return out


def read_document(
    doc: Document,
    index: StructureIndex,
    params: ModelParams,
    mode: str,
    rng: Rng | None = None,
) -> ReadingTrace:
    """Run the reading loop over one document and return its trace.

    ``rng`` is only consumed in sample mode. An empty document yields the
    prediction of the zero hidden state with no steps.
    """
    ids = np.fromiter((t.vocab_id for t in doc.tokens), dtype=np.int64, count=len(doc.tokens))
    trace, _ = run_episode(ids, index, params, mode, rng, keep_cache=False)
    return trace


class EpisodeCache:
    """Forward activations needed to replay an episode backward."""

    __slots__ = ("x_rows", "steps", "final_h", "probs", "mode")

    def __init__(self, x_rows, steps, final_h, probs, mode):
        self.x_rows = x_rows  # (T, d) embedding rows for this document
        self.steps = steps  # forward records, see run_episode
        self.final_h = final_h
        self.probs = probs  # classifier output
        self.mode = mode


def run_episode(
    ids: np.ndarray,
    index: StructureIndex,
    params: ModelParams,
    mode: str,
    rng: Rng | None,
    keep_cache: bool,
    forced: Sequence[tuple[int, int | None]] | None = None,
) -> tuple[ReadingTrace, EpisodeCache | None]:
    """Core reading loop shared by inference, training, and replay.

    ``forced`` replays a frozen decision sequence of (skip_action,
    jump_action) pairs; agent heads are still evaluated so log-probs and
    gradients refer to the current parameters. full_read skips the heads
    entirely and records zero log-probs for its forced actions.

    Step records kept for the backward pass:
      skip: (False, pos, skip_probs, skip_action, h_ref)
      read: (True, pos, skip_probs, h_prev, c_prev, gates, c_new, h_new,
             jump_probs, jump_action)
    """
    if mode not in MODES and forced is None:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == MODE_SAMPLE and rng is None and forced is None:
        raise ValueError("sample mode needs an rng")

    d = params.hidden_size
    t_total = index.doc_end
    if len(ids) != t_total:
        raise ValueError(f"ids length {len(ids)} != doc_end {t_total}")

    x_rows = params.embed[ids] if t_total else np.zeros((0, d))
    full = mode == MODE_FULL_READ
    if not full:
        # Skip head split into h- and x-parts; x-parts batched up front,
        # h-part recomputed only when the state changes.
        skip_wh = params.skip_w[:, :d]
        skip_wx = params.skip_w[:, d:]
        sx_rows = x_rows @ skip_wx.T
        sh = skip_wh @ np.zeros(d) + params.skip_b

    h = np.zeros(d)
    c = np.zeros(d)
    pos = 0
    forced_iter = iter(forced) if forced is not None else None

    trace_steps: list[TraceStep] = []
    cache_steps: list[tuple] = []
    terminated_early = False
    n_reads = 0

    while pos < t_total:
        x = x_rows[pos]
        if full:
            skip_probs = None
            skip_action = READ
            skip_logprob = 0.0
        else:
            skip_probs = _softmax_small(sh + sx_rows[pos])
            if forced_iter is not None:
                skip_action, forced_jump = next(forced_iter)
            elif mode == MODE_SAMPLE:
                skip_action = sample_categorical(skip_probs, rng)
            else:  # greedy; ties break toward READ since READ == 0
                skip_action = int(np.argmax(skip_probs))
            skip_logprob = float(np.log(skip_probs[skip_action] + EPS_LOG))

        if skip_action == SKIP:
            trace_steps.append(TraceStep(pos, SKIP, skip_logprob, None, None))
            if keep_cache:
                cache_steps.append((False, pos, skip_probs, skip_action, h))
            pos += 1
            continue

        # read: one state update
        pre = params.lstm_w @ x + params.lstm_u @ h + params.lstm_b
        gates = np.empty(4 * d)
        gates[: 2 * d] = _sigmoid(pre[: 2 * d])
        gates[2 * d : 3 * d] = np.tanh(pre[2 * d : 3 * d])
        gates[3 * d :] = _sigmoid(pre[3 * d :])
        c_new = gates[d : 2 * d] * c + gates[:d] * gates[2 * d : 3 * d]
        h_new = gates[3 * d :] * np.tanh(c_new)
        n_reads += 1

        if full:
            jump_probs = None
            jump_action = JUMP_CONTINUE
            jump_logprob = 0.0
        else:
            jump_probs = _softmax_small(params.jump_w @ h_new + params.jump_b)
            if forced_iter is not None:
                jump_action = forced_jump
            elif mode == MODE_SAMPLE:
                jump_action = sample_categorical(jump_probs, rng)
            else:
                jump_action = int(np.argmax(jump_probs))
            jump_logprob = float(np.log(jump_probs[jump_action] + EPS_LOG))

        trace_steps.append(TraceStep(pos, READ, skip_logprob, jump_action, jump_logprob))
        if keep_cache:
            cache_steps.append(
                (True, pos, skip_probs, h, c, gates, c_new, h_new, jump_probs, jump_action)
            )

        new_pos = resolve_jump(index, pos, jump_action)
        if jump_action == JUMP_TO_DOC_END:
            terminated_early = True
        elif jump_action == JUMP_TO_COMMA and index.next_comma[pos] == t_total:
            terminated_early = True  # sentinel landing
        elif jump_action == JUMP_TO_SENTENCE_END and index.next_sentence_end[pos] == t_total:
            terminated_early = True

        h, c = h_new, c_new
        if not full:
            sh = skip_wh @ h + params.skip_b
        pos = new_pos

    probs = classify(h, params)
    trace = ReadingTrace(
        steps=tuple(trace_steps),
        state_updates=n_reads,
        tokens_total=t_total,
        final_hidden=h,
        prediction=probs,
        terminated_early=terminated_early,
        mode=mode,
    )
    cache = EpisodeCache(x_rows, cache_steps, h, probs, mode) if keep_cache else None
    return trace, cache


def episode_loss(
    cache: EpisodeCache,
    trace: ReadingTrace,
    label_id: int,
    ce_weight: float,
    advantage: float,
    entropy_weight: float,
) -> float:
    """Scalar episode objective for the frozen action sequence.

    L = ce_weight * CE - advantage * sum(log pi) - entropy_weight * sum(H),
    with the advantage held constant. full_read episodes have no policy
    terms.
    """
    loss = ce_weight * -float(np.log(cache.probs[label_id] + EPS_LOG))
    if cache.mode == MODE_FULL_READ:
        return loss
    for step in trace.steps:
        loss -= advantage * step.skip_logprob
        if step.jump_logprob is not None:
            loss -= advantage * step.jump_logprob
    for rec in cache.steps:
        if rec[0]:
            loss -= entropy_weight * (_entropy(rec[2]) + _entropy(rec[8]))
        else:
            loss -= entropy_weight * _entropy(rec[2])
    return loss


def episode_backward(
    cache: EpisodeCache,
    label_id: int,
    ce_weight: float,
    advantage: float,
    entropy_weight: float,
    store: ParamStore,
    scale: float = 1.0,
) -> None:
    """Accumulate scale * dL/dparams into store.grads by reverse replay.

    The advantage is a constant of differentiation; cross-entropy, action
    log-probs, and entropy terms all backpropagate through the hidden
    states into the LSTM and embeddings.
    """
    p = store.params
    g = store.grads
    d = cache.final_h.shape[0]
    lstm_w, lstm_u = p["lstm_w"], p["lstm_u"]
    skip_wh = p["skip_w"][:, :d]
    jump_w = p["jump_w"]

    # classifier head
    probs = cache.probs
    dcls = probs.copy()
    dcls[label_id] -= probs[label_id] / (probs[label_id] + EPS_LOG)
    dcls *= ce_weight * scale
    g["cls_w"] += np.outer(dcls, cache.final_h)
    g["cls_b"] += dcls
    dh = p["cls_w"].T @ dcls
    dc = np.zeros(d)

    full = cache.mode == MODE_FULL_READ
    dx_rows = np.zeros_like(cache.x_rows)
    # rows collected for one batched parameter-gradient update at the end
    read_pre: list[np.ndarray] = []
    read_hprev: list[np.ndarray] = []
    read_pos: list[int] = []
    jump_dl: list[np.ndarray] = []
    jump_h: list[np.ndarray] = []
    skip_dl: list[np.ndarray] = []
    skip_h: list[np.ndarray] = []
    skip_pos: list[int] = []

    for rec in reversed(cache.steps):
        if rec[0]:
            _, pos, skip_probs, h_prev, c_prev, gates, c_new, h_new, jump_probs, jump_action = rec
            if not full:
                dl4 = _policy_dlogits(jump_probs, jump_action, advantage, entropy_weight) * scale
                jump_dl.append(dl4)
                jump_h.append(h_new)
                dh = dh + jump_w.T @ dl4
            # LSTM cell backward
            i = gates[:d]
            f = gates[d : 2 * d]
            gg = gates[2 * d : 3 * d]
            o = gates[3 * d :]
            tc = np.tanh(c_new)
            dcn = dc + dh * o * (1.0 - tc * tc)
            dpre = np.empty(4 * d)
            dpre[:d] = dcn * gg * i * (1.0 - i)
            dpre[d : 2 * d] = dcn * c_prev * f * (1.0 - f)
            dpre[2 * d : 3 * d] = dcn * i * (1.0 - gg * gg)
            dpre[3 * d :] = dh * tc * o * (1.0 - o)
            read_pre.append(dpre)
            read_hprev.append(h_prev)
            read_pos.append(pos)
            dc = dcn * f
            dh = lstm_u.T @ dpre
            if not full:
                dl2 = _policy_dlogits(skip_probs, READ, advantage, entropy_weight) * scale
                skip_dl.append(dl2)
                skip_h.append(h_prev)
                skip_pos.append(pos)
                dh = dh + skip_wh.T @ dl2
        else:
            _, pos, skip_probs, skip_action, h_ref = rec
            dl2 = _policy_dlogits(skip_probs, skip_action, advantage, entropy_weight) * scale
            skip_dl.append(dl2)
            skip_h.append(h_ref)
            skip_pos.append(pos)
            dh = dh + skip_wh.T @ dl2

    if read_pre:
        dpre_m = np.stack(read_pre) * scale
        hprev_m = np.stack(read_hprev)
        x_m = cache.x_rows[read_pos]
        g["lstm_w"] += dpre_m.T @ x_m
        g["lstm_u"] += dpre_m.T @ hprev_m
        g["lstm_b"] += dpre_m.sum(axis=0)
        dx_rows[read_pos] += dpre_m @ lstm_w
    if jump_dl:
        dl4_m = np.stack(jump_dl)
        g["jump_w"] += dl4_m.T @ np.stack(jump_h)
        g["jump_b"] += dl4_m.sum(axis=0)
    if skip_dl:
        dl2_m = np.stack(skip_dl)
        g["skip_w"][:, :d] += dl2_m.T @ np.stack(skip_h)
        g["skip_w"][:, d:] += dl2_m.T @ cache.x_rows[skip_pos]
        g["skip_b"] += dl2_m.sum(axis=0)
        dx_rows[skip_pos] += dl2_m @ p["skip_w"][:, d:]

    visited = read_pos + skip_pos
    if visited:
        vis = np.array(sorted(set(visited)), dtype=np.int64)
        np.add.at(g["embed"], cache.ids_for(vis), dx_rows[vis])


def _cache_ids_for(self, vis):  # pragma: no cover - replaced below
    raise NotImplementedError


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax_small(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def _entropy(probs: np.ndarray) -> float:
    return float(-np.sum(probs * np.log(probs + EPS_LOG)))


def _policy_dlogits(
    probs: np.ndarray, action: int, advantage: float, entropy_weight: float
) -> np.ndarray:
    """d/dlogits of [-advantage * log pi(action) - entropy_weight * H]."""
    logp = np.log(probs + EPS_LOG)
    ratio_a = probs[action] / (probs[action] + EPS_LOG)
    dl = advantage * ratio_a * probs.copy()
    dl[action] -= advantage * ratio_a
    if entropy_weight:
        term = logp + probs / (probs + EPS_LOG)
        dl += entropy_weight * probs * (term - np.dot(probs, term))
    return dl


def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    vocab: dict[str, int],
    label_map: dict[str, int],
) -> None:
    """Write a single self-describing binary checkpoint.

    Layout: magic, little-endian uint32 header length, JSON header with
    sorted keys (format version, dims, vocab, label map, tensor shapes),
    then raw little-endian float64 tensor bytes in PARAM_ORDER. The bytes
    are a pure function of the inputs.
    """
    header = {
        "format_version": CHECKPOINT_VERSION,
        "hidden_size": params.hidden_size,
        "vocab_size": params.vocab_size,
        "num_classes": params.num_classes,
        "vocab": vocab,
        "label_map": label_map,
        "tensors": [
            {"name": name, "shape": list(params.store.params[name].shape)}
            for name in PARAM_ORDER
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for name in PARAM_ORDER:
            fh.write(np.ascontiguousarray(params.store.params[name], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict[str, int], dict[str, int]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported format version {header.get('format_version')}")
        store = ParamStore()
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(n * 8)
            store.add(spec["name"], np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
    params = ModelParams(
        header["hidden_size"], header["vocab_size"], header["num_classes"], store
    )
    return params, dict(header["vocab"]), dict(header["label_map"])
