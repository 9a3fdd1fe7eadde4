"""AWD-LSTM language model: embedding -> stacked LSTMs -> linear decoder.

Regularisation follows the weight-dropped LSTM recipe: DropConnect on the
hidden-to-hidden matrices, variational (locked) dropout on layer inputs and
outputs, and embedding dropout that removes whole word rows. All masks are
sampled once per training segment and reused at every timestep.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

GATES = ("i", "f", "o", "c")

# base rates at multiplier 1.0; the default multiplier 0.5 gives
# weight 0.5, variational 0.25, embedding 0.1
BASE_DROPOUT = {"weight": 1.0, "input": 0.5, "output": 0.5, "embed": 0.2}


@dataclass
class ModelConfig:
    vocab_size: int
    emb: int = 400
    hidden: int = 1150
    layers: int = 3
    dropout_mult: float = 0.5
    tie_weights: bool = False

    def __post_init__(self):
        if self.layers < 1 or self.emb < 1 or self.hidden < 1 or self.vocab_size < 1:
            raise ValueError("model sizes must be positive")
        if not 0.0 <= self.dropout_mult < 1.0:
            raise ValueError("dropout_mult must lie in [0, 1)")

    def dropout(self, kind: str) -> float:
        return BASE_DROPOUT[kind] * self.dropout_mult

    def layer_sizes(self) -> list[tuple[int, int]]:
        sizes = []
        for layer in range(self.layers):
            n_in = self.emb if layer == 0 else self.hidden
            n_out = self.emb if layer == self.layers - 1 else self.hidden
            sizes.append((n_in, n_out))
        return sizes


@dataclass
class LstmLayerParams:
    W: dict[str, Tensor]
    U: dict[str, Tensor]
    b: dict[str, Tensor]

    @property
    def n_in(self) -> int:
        return self.W["i"].shape[0]

    @property
    def n_out(self) -> int:
        return self.U["i"].shape[0]

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.W_{g}", self.W[g]) for g in GATES]
        out += [(f"{prefix}.U_{g}", self.U[g]) for g in GATES]
        out += [(f"{prefix}.b_{g}", self.b[g]) for g in GATES]
        return out

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64):
        bound = 1.0 / math.sqrt(n_out)

        def uniform(shape):
            return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

        return cls(
            W={g: uniform((n_in, n_out)) for g in GATES},
            U={g: uniform((n_out, n_out)) for g in GATES},
            b={g: Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True) for g in GATES},
        )


@dataclass
class HiddenState:
    """Per-layer ``(h, c)`` as plain arrays, i.e. already cut from any graph."""

    h: list[np.ndarray]
    c: list[np.ndarray]

    def copy(self) -> "HiddenState":
        return HiddenState([x.copy() for x in self.h], [x.copy() for x in self.c])


def detach_state(state) -> HiddenState:
    """Keep the values of ``state`` and drop any graph lineage."""
    def value(x):
        return x.data.copy() if isinstance(x, Tensor) else np.array(x, copy=True)
    return HiddenState([value(h) for h in state.h], [value(c) for c in state.c])


@dataclass
class DropoutMasks:
    weight: list[dict[str, np.ndarray]]
    var_in: np.ndarray
    var_out: list[np.ndarray]
    embed: np.ndarray


def _bernoulli_mask(shape, p: float, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    if p <= 0.0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / (1.0 - p)


def sample_masks(config: ModelConfig, batch_size: int, rng: np.random.Generator,
                 p_weight: float | None = None, p_var_in: float | None = None,
                 p_var_out: float | None = None, p_embed: float | None = None,
                 dtype=np.float64) -> DropoutMasks:
    """Inverted-dropout masks for one training segment.

    Probabilities default to the config's rates; entries are 0 or 1/(1-p).
    """
    p_weight = config.dropout("weight") if p_weight is None else p_weight
    p_var_in = config.dropout("input") if p_var_in is None else p_var_in
    p_var_out = config.dropout("output") if p_var_out is None else p_var_out
    p_embed = config.dropout("embed") if p_embed is None else p_embed
    for p in (p_weight, p_var_in, p_var_out, p_embed):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability {p} outside [0, 1)")
    sizes = config.layer_sizes()
    return DropoutMasks(
        weight=[{g: _bernoulli_mask((n_out, n_out), p_weight, rng, dtype) for g in GATES}
                for _, n_out in sizes],
        var_in=_bernoulli_mask((batch_size, config.emb), p_var_in, rng, dtype),
        var_out=[_bernoulli_mask((batch_size, n_out), p_var_out, rng, dtype) for _, n_out in sizes],
        embed=_bernoulli_mask((config.vocab_size,), p_embed, rng, dtype),
    )


def lstm_cell(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, params: LstmLayerParams,
              u_masks: dict[str, np.ndarray] | None = None) -> tuple[Tensor, Tensor]:
    """One LSTM step with the gate equations written out per gate."""
    def pre(g):
        U = params.U[g] if u_masks is None else ad.dropout_apply(params.U[g], u_masks[g])
        return ad.add(ad.add(ad.matmul(x_t, params.W[g]), ad.matmul(h_prev, U)), params.b[g])

    i = ad.sigmoid(pre("i"))
    f = ad.sigmoid(pre("f"))
    o = ad.sigmoid(pre("o"))
    c_tilde = ad.tanh(pre("c"))
    c_t = ad.add(ad.mul(f, c_prev), ad.mul(i, c_tilde))
    h_t = ad.mul(o, ad.tanh(c_t))
    return h_t, c_t


class LstmLanguageModel:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        V, E = config.vocab_size, config.emb
        self.embedding = Tensor(rng.uniform(-0.1, 0.1, size=(V, E)).astype(dtype), requires_grad=True)
        self.layers = [LstmLayerParams.init(n_in, n_out, rng, dtype)
                       for n_in, n_out in config.layer_sizes()]
        bound = 1.0 / math.sqrt(E)
        if config.tie_weights:
            self.decoder_w = None
        else:
            self.decoder_w = Tensor(rng.uniform(-bound, bound, size=(E, V)).astype(dtype),
                                    requires_grad=True)
        self.decoder_b = Tensor(np.zeros(V, dtype=dtype), requires_grad=True)

    # -- parameter bookkeeping -------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """All trainable tensors in checkpoint order."""
        out = [("embedding", self.embedding)]
        for k, layer in enumerate(self.layers):
            out += layer.named(f"lstm{k + 1}")
        if self.decoder_w is not None:
            out.append(("decoder.W", self.decoder_w))
        out.append(("decoder.b", self.decoder_b))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def layer_groups(self) -> list[list[str]]:
        """Parameter names partitioned input-side first.

        Group 1 holds the embedding and first LSTM, the last group holds the
        top LSTM and the decoder, and each middle LSTM is its own group.
        """
        names = [n for n, _ in self.named_parameters()]
        n_layers = len(self.layers)
        groups: list[list[str]] = [[] for _ in range(n_layers)]
        for name in names:
            if name == "embedding":
                groups[0].append(name)
            elif name.startswith("decoder"):
                groups[-1].append(name)
            else:
                groups[int(name[4:name.index(".")]) - 1].append(name)
        return groups

    def decoder_weight(self) -> Tensor:
        # tying reuses the embedding as [V x E]; transposed lazily per forward
        if self.decoder_w is not None:
            return self.decoder_w
        return _transpose(self.embedding)

    def init_state(self, batch_size: int) -> HiddenState:
        widths = [n_out for _, n_out in self.config.layer_sizes()]
        return HiddenState([np.zeros((batch_size, w), dtype=self.dtype) for w in widths],
                           [np.zeros((batch_size, w), dtype=self.dtype) for w in widths])

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def get_weights(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def set_weights(self, arrays: list[np.ndarray]):
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError("weight list does not match the model")
        for p, arr in zip(params, arrays):
            if arr.shape != p.shape:
                raise ad.ShapeMismatch(f"weight shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=self.dtype, copy=True)

    # -- forward ---------------------------------------------------------------

    def forward_segment(self, inputs, state: HiddenState, masks: DropoutMasks | None = None,
                        training: bool = False) -> tuple[Tensor, HiddenState]:
        """Run a [T x batch] block of ids; return flat [T*batch x V] logits.

        Layers are evaluated one after another over the whole window, so the
        input projection ``x @ W`` of a layer is a single matmul over all
        timesteps. With ``training`` off, masks are ignored.
        """
        inputs = np.asarray(inputs, dtype=np.int64)
        if inputs.ndim != 2:
            raise ad.ShapeMismatch(f"inputs must be [T x batch], got {inputs.shape}")
        T, B = inputs.shape
        V = self.config.vocab_size
        if inputs.size and (inputs.min() < 0 or inputs.max() >= V):
            raise InvalidTokenId(f"token id outside [0, {V})")
        if state.h[0].shape[0] != B:
            raise ad.ShapeMismatch(f"state batch {state.h[0].shape[0]} != input batch {B}")
        use_masks = training and masks is not None

        flat_ids = inputs.reshape(-1)
        x = ad.embedding_lookup(self.embedding, flat_ids)
        if use_masks:
            x = ad.dropout_apply(x, masks.embed[flat_ids][:, None])
            x = ad.dropout_apply(x, np.tile(masks.var_in, (T, 1)))

        new_h, new_c = [], []
        for k, layer in enumerate(self.layers):
            u_masks = masks.weight[k] if use_masks else None
            x, h, c = _run_layer(x, layer, state.h[k], state.c[k], T, B, u_masks)
            new_h.append(h)
            new_c.append(c)
            if use_masks:
                x = ad.dropout_apply(x, np.tile(masks.var_out[k], (T, 1)))
        logits = ad.add(ad.matmul(x, self.decoder_weight()), self.decoder_b)
        return logits, HiddenState(new_h, new_c)

    def loss(self, inputs, targets, state: HiddenState, masks: DropoutMasks | None = None,
             training: bool = False) -> tuple[Tensor, HiddenState]:
        logits, new_state = self.forward_segment(inputs, state, masks, training)
        return ad.softmax_cross_entropy(logits, np.asarray(targets).reshape(-1)), new_state

    def token_log_probs(self, stream, chunk: int = 70) -> np.ndarray:
        """ln p(stream[t] | stream[:t]) for t >= 1, carrying state with batch 1."""
        stream = np.asarray(stream, dtype=np.int64)
        out = np.empty(max(len(stream) - 1, 0))
        state = self.init_state(1)
        with ad.no_grad():
            for start in range(0, len(stream) - 1, chunk):
                stop = min(start + chunk, len(stream) - 1)
                logits, state = self.forward_segment(stream[start:stop, None], state)
                logp = ad.log_softmax(logits.data)
                out[start:stop] = logp[np.arange(stop - start), stream[start + 1:stop + 1]]
        return out

    # -- persistence ---------------------------------------------------------------

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            write_checkpoint(fh, self)

    @classmethod
    def load(cls, path: str | Path) -> "LstmLanguageModel":
        with open(path, "rb") as fh:
            return read_checkpoint(fh)


class InvalidTokenId(IndexError):
    pass


def _transpose(a: Tensor) -> Tensor:
    return ad._result(a.data.T, (a,), lambda g: (g.T,), "transpose")


def _run_layer(x: Tensor, layer: LstmLayerParams, h0: np.ndarray, c0: np.ndarray,
               T: int, B: int, u_masks) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Unroll one layer over T steps with the four gates fused column-wise.

    Column blocks are ordered i, f, o, c so one sigmoid covers the first
    three. DropConnect masks are applied to U once, before the time loop.
    """
    n = layer.n_out
    W = ad.concat([layer.W[g] for g in GATES], axis=1)
    b = ad.concat([layer.b[g] for g in GATES], axis=0)
    if u_masks is None:
        U = ad.concat([layer.U[g] for g in GATES], axis=1)
    else:
        U = ad.concat([ad.dropout_apply(layer.U[g], u_masks[g]) for g in GATES], axis=1)
    xw = ad.add(ad.matmul(x, W), b)
    h, c = Tensor(h0), Tensor(c0)
    outputs = []
    for t in range(T):
        pre = ad.add(xw[t * B:(t + 1) * B], ad.matmul(h, U))
        gates = ad.sigmoid(pre[:, :3 * n])
        c_tilde = ad.tanh(pre[:, 3 * n:])
        i, f, o = gates[:, :n], gates[:, n:2 * n], gates[:, 2 * n:]
        c = ad.add(ad.mul(f, c), ad.mul(i, c_tilde))
        h = ad.mul(o, ad.tanh(c))
        outputs.append(h)
    return ad.concat(outputs, axis=0), h.data.copy(), c.data.copy()


# Checkpoint layout (all integers little-endian):
#   b"LMFG" | u32 version | u32 vocab_size | u32 emb | u32 hidden | u32 n_layers
#   | n_layers x (u32 n_in, u32 n_out) | u32 flags (bit 0: tied decoder)
#   | f64 dropout_mult | parameters as f64 arrays in named_parameters() order
MAGIC = b"LMFG"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(fh: BinaryIO, model: LstmLanguageModel) -> None:
    cfg = model.config
    fh.write(MAGIC)
    fh.write(struct.pack("<5I", FORMAT_VERSION, cfg.vocab_size, cfg.emb, cfg.hidden, cfg.layers))
    for n_in, n_out in cfg.layer_sizes():
        fh.write(struct.pack("<2I", n_in, n_out))
    fh.write(struct.pack("<I", 1 if cfg.tie_weights else 0))
    fh.write(struct.pack("<d", cfg.dropout_mult))
    for _, p in model.named_parameters():
        fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def _read(fh: BinaryIO, fmt: str):
    size = struct.calcsize(fmt)
    raw = fh.read(size)
    if len(raw) != size:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack(fmt, raw)


def read_checkpoint(fh: BinaryIO, dtype=np.float64) -> LstmLanguageModel:
    if fh.read(4) != MAGIC:
        raise CheckpointError("not an LMFG checkpoint")
    version, vocab_size, emb, hidden, n_layers = _read(fh, "<5I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    sizes = [tuple(_read(fh, "<2I")) for _ in range(n_layers)]
    (flags,) = _read(fh, "<I")
    (mult,) = _read(fh, "<d")
    cfg = ModelConfig(vocab_size, emb, hidden, n_layers, mult, bool(flags & 1))
    if sizes != cfg.layer_sizes():
        raise CheckpointError(f"layer sizes {sizes} inconsistent with header")
    model = LstmLanguageModel(cfg, dtype=dtype)
    arrays = []
    for _, p in model.named_parameters():
        n = int(np.prod(p.shape))
        raw = fh.read(8 * n)
        if len(raw) != 8 * n:
            raise CheckpointError("truncated parameter data")
        arrays.append(np.frombuffer(raw, dtype="<f8").reshape(p.shape))
    if fh.read(1):
        raise CheckpointError("trailing bytes after parameters")
    model.set_weights(arrays)
    return model
