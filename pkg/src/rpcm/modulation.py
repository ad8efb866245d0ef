"""Memory encoder, modulator blocks, assembly schemes and the decoder."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BufferOverwrite, DimMismatch, MissingBuffer
from .features import FeatureMap, SimilarityMap
from .nn import channel_gate, concat_channels, conv2d, group_normalize, upsample_bilinear
from .pool import ObjectProxy
from .tensor import ParamSet, Tensor, add, relu, reshape

# row order of the ablation table
SCHEMES = ("S2S", "S2P", "P2S", "P2P", "C2S", "S2C", "C2C", "C2P", "P2C", "P&C", "P2P2P")
KIND_NAMES = {"S": "self", "P": "propagation", "C": "correction"}
GN_GROUPS = 4
STAGES = 2


class SchemeError(ValueError):
    pass


def parse_scheme(token: str) -> str:
    canon = token.strip().upper()
    if canon not in SCHEMES:
        raise SchemeError(f"unknown scheme {token!r}; valid schemes: {', '.join(SCHEMES)}")
    return canon


def scheme_kinds(scheme: str) -> list[str]:
    """Block kinds in execution order; P&C runs P and C in parallel, then a fusing S."""
    scheme = parse_scheme(scheme)
    if scheme == "P&C":
        letters = ["P", "C", "S"]
    else:
        letters = scheme.split("2")
    return [KIND_NAMES[ch] for ch in letters]


# ---------------------------------------------------------------- encoder


def encode_memory(
    f_t: FeatureMap,
    s_c: SimilarityMap,
    s_p: SimilarityMap,
    w_p: ObjectProxy,
    w_c: ObjectProxy,
    params: ParamSet,
) -> Tensor:
    """Compress [f_t; s_c; s_p] to a C_e-channel embedding gated by [w_p; w_c]."""
    x = concat_channels([f_t.tensor, s_c.tensor, s_p.tensor])
    e = conv2d(x, params["conv.weight"], params["conv.bias"])
    w = concat_channels([_col(w_p.vector), _col(w_c.vector)])
    e = channel_gate(e, _flat(w), params.subset("gate"))
    e = group_normalize(e, GN_GROUPS, params["gn.scale"], params["gn.shift"])
    return relu(e)


def _col(v: Tensor) -> Tensor:
    return reshape(v, (v.shape[0], 1, 1))


def _flat(v: Tensor) -> Tensor:
    return reshape(v, (v.shape[0],))


# ---------------------------------------------------------------- modulator block


@dataclass
class ModulatorBlock:
    name: str  # parameter prefix, e.g. "mod0"
    kind: str  # self | propagation | correction
    buffer: Tensor | None = None
    written_at: int | None = None

    def write(self, e: Tensor, t: int, keep_graph: bool = False) -> None:
        if self.kind == "self":
            return
        if self.kind == "correction" and (t > 1 or self.buffer is not None):
            raise BufferOverwrite(f"{self.name}: the correction buffer holds e_1 and is written only at t=1")
        self.buffer = e if keep_graph else e.detach()
        self.written_at = t


def modulator_forward(block: ModulatorBlock, e_in: Tensor, w: ObjectProxy, params: ParamSet) -> Tensor:
    """Concat input with the buffered embedding, compress 2C_e -> C_e, then two gated residual stages."""
    if block.kind == "self":
        memory = e_in
    else:
        if block.buffer is None:
            raise MissingBuffer(f"{block.name} ({block.kind}) read before its buffer was written")
        memory = block.buffer
    if memory.shape != e_in.shape:
        raise DimMismatch(f"{block.name}: buffer {memory.shape} vs input {e_in.shape}")
    h = conv2d(concat_channels([e_in, memory]), params["compress.weight"])
    for j in range(STAGES):
        st = params.subset(f"stage{j}")
        z = group_normalize(h, GN_GROUPS, st["gn.scale"], st["gn.shift"])
        z = relu(channel_gate(z, w.vector, st.subset("gate")))
        h = add(h, conv2d(z, st["conv.weight"], st["conv.bias"], pad=1))
    if h.shape != e_in.shape:
        raise DimMismatch("modulator changed the embedding dims")
    return h


# ---------------------------------------------------------------- assembly


@dataclass
class Assembly:
    """One object's modulator arrangement; blocks own their buffers, params are shared."""

    scheme: str
    blocks: list[ModulatorBlock] = field(default_factory=list)
    trace: list[str] | None = None

    @classmethod
    def build(cls, scheme: str) -> "Assembly":
        scheme = parse_scheme(scheme)
        blocks = [ModulatorBlock(f"mod{i}", kind) for i, kind in enumerate(scheme_kinds(scheme))]
        return cls(scheme, blocks)

    @property
    def parallel(self) -> bool:
        return self.scheme == "P&C"

    def _run(self, block: ModulatorBlock, e: Tensor, w_p: ObjectProxy, w_c: ObjectProxy, params: ParamSet) -> Tensor:
        if self.trace is not None:
            self.trace.append(block.kind)
        w = w_c if block.kind == "correction" else w_p
        return modulator_forward(block, e, w, params.subset(block.name))

    def forward(self, e_t: Tensor, w_p: ObjectProxy, w_c: ObjectProxy, params: ParamSet) -> Tensor:
        if self.parallel:
            p_out = self._run(self.blocks[0], e_t, w_p, w_c, params)
            c_out = self._run(self.blocks[1], e_t, w_p, w_c, params)
            fused = conv2d(concat_channels([p_out, c_out]), params["fuse.compress.weight"])
            return self._run(self.blocks[2], fused, w_p, w_c, params)
        e = e_t
        for block in self.blocks:
            e = self._run(block, e, w_p, w_c, params)
        return e

    def write_buffers(self, e_t: Tensor, t: int, keep_graph: bool = False) -> None:
        """Propagation buffers take e_t every frame; correction buffers take e_1 once.

        Buffers are detached unless ``keep_graph`` (training writes them in-graph).
        """
        if t < 1:
            raise ValueError("t must be >= 1")
        for block in self.blocks:
            if block.kind == "propagation" or (block.kind == "correction" and t == 1):
                block.write(e_t, t, keep_graph)

    def buffer(self, kind: str) -> list[Tensor | None]:
        return [b.buffer for b in self.blocks if b.kind == kind]

    def copy(self) -> "Assembly":
        """Fresh blocks sharing the (immutable) buffer tensors."""
        return Assembly(self.scheme, [replace(b) for b in self.blocks], self.trace)


def assemble(assembly: Assembly, e_t: Tensor, w_p: ObjectProxy, w_c: ObjectProxy, params: ParamSet) -> Tensor:
    return assembly.forward(e_t, w_p, w_c, params)


# ---------------------------------------------------------------- decoder


def decode(e: Tensor, params: ParamSet, stride: int = 4, upsample: bool = True) -> Tensor:
    """Two 3x3 conv+ReLU stages and a 1x1 head giving [bg, fg] logits, upsampled by ``stride``."""
    x = relu(conv2d(e, params["conv1.weight"], params["conv1.bias"], pad=1))
    x = relu(conv2d(x, params["conv2.weight"], params["conv2.bias"], pad=1))
    x = conv2d(x, params["out.weight"], params["out.bias"])
    return upsample_bilinear(x, stride) if upsample else x


def block_input_channels(params: ParamSet, block: str) -> tuple[int, int]:
    """(input, output) channel counts of a block's post-concat compression conv."""
    w = params[f"{block}.compress.weight"].data
    return int(w.shape[1]), int(w.shape[0])


def tensor_digest(t: Tensor | None) -> bytes:
    if t is None:
        return b""
    return hashlib.sha256(np.ascontiguousarray(t.data).tobytes()).digest()
