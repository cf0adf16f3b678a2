"""Reconfigurable decoder-only transformer.

The decoder carries K binary switches on its upper layers (``split_layer`` and
above). In the layer-level design each switch gates a whole pre-LN block: a
block that is off returns its input unchanged through the residual path. In
the head-level design each attention head and each contiguous group of
``d_mlp / n_heads`` MLP channels has its own switch; an off head's attention
output is zeroed before the output projection and an off group's activations
are zeroed before the down projection.

A plan is passed either as an :class:`ExecutionPlan` (one plan for the whole
batch) or as a float gate tensor of shape (B, K) whose values are exactly 0 or
1 in the forward pass. Gate tensors may carry gradients (straight-through
training); hard plans skip bypassed blocks outright.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import cost_model as cm
from . import numerics as nx
from .numerics import Tensor


class SwitchDesign(str, enum.Enum):
    LAYER = "layer"
    HEAD = "head"


class SwitchKind(str, enum.Enum):
    BLOCK = "block"
    ATTN_HEAD = "attn_head"
    MLP_GROUP = "mlp_group"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    d_mlp: int = 256
    vocab_size: int = 32
    n_visual_tokens: int = 16
    d_feat: int = 16
    max_seq_len: int = 32
    switch_design: SwitchDesign = SwitchDesign.LAYER
    switchable_start_layer: int | None = None
    gated_mlp: bool = False

    def __post_init__(self):
        object.__setattr__(self, "switch_design", SwitchDesign(self.switch_design))
        if self.switchable_start_layer is None:
            object.__setattr__(self, "switchable_start_layer", self.n_layers // 2)
        if not 0 < self.switchable_start_layer < self.n_layers:
            raise ValueError("need 0 < switchable_start_layer < n_layers")
        if self.d_model % self.n_heads or self.d_mlp % self.n_heads:
            raise ValueError("n_heads must divide d_model and d_mlp")

    @property
    def split_layer(self) -> int:
        return self.switchable_start_layer

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def group_width(self) -> int:
        return self.d_mlp // self.n_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["switch_design"] = self.switch_design.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})


# Shape-only configs for FLOPs accounting; far too large to instantiate here.
PRESETS = {
    # 7B-class vision-language decoder: 576 visual tokens, gated MLP
    "llava-7b": dict(
        n_layers=32, d_model=4096, n_heads=32, d_mlp=11008, vocab_size=32000,
        n_visual_tokens=576, d_feat=1024, max_seq_len=4096, gated_mlp=True,
    ),
}


@dataclass(frozen=True)
class SwitchDescriptor:
    switch_id: int
    kind: SwitchKind
    layer_index: int
    group_index: int = 0


@dataclass(frozen=True)
class SwitchTopology:
    descriptors: tuple[SwitchDescriptor, ...]

    @property
    def K(self) -> int:
        return len(self.descriptors)

    @classmethod
    def from_config(cls, config: ModelConfig) -> "SwitchTopology":
        out: list[SwitchDescriptor] = []
        for layer in range(config.split_layer, config.n_layers):
            if config.switch_design is SwitchDesign.LAYER:
                out.append(SwitchDescriptor(len(out), SwitchKind.BLOCK, layer))
                continue
            for h in range(config.n_heads):
                out.append(SwitchDescriptor(len(out), SwitchKind.ATTN_HEAD, layer, h))
            for g in range(config.n_heads):
                out.append(SwitchDescriptor(len(out), SwitchKind.MLP_GROUP, layer, g))
        return cls(tuple(out))

    def by_layer(self) -> dict[int, dict[SwitchKind, list[int]]]:
        table: dict[int, dict[SwitchKind, list[int]]] = {}
        for d in self.descriptors:
            table.setdefault(d.layer_index, {}).setdefault(d.kind, []).append(d.switch_id)
        return table


@dataclass(frozen=True)
class ExecutionPlan:
    bits: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("plan bits must be 0 or 1")

    @classmethod
    def ones(cls, K: int) -> "ExecutionPlan":
        return cls((1,) * K)

    @classmethod
    def zeros(cls, K: int) -> "ExecutionPlan":
        return cls((0,) * K)

    @classmethod
    def from_indices(cls, K: int, indices) -> "ExecutionPlan":
        bits = [0] * K
        for i in indices:
            bits[int(i)] = 1
        return cls(tuple(bits))

    @property
    def K(self) -> int:
        return len(self.bits)

    @property
    def selected(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.bits) if b)

    def count(self) -> int:
        return sum(self.bits)

    def __len__(self) -> int:
        return len(self.bits)

    def __str__(self) -> str:
        return "".join(map(str, self.bits))


@dataclass
class KVState:
    plan_key: tuple | None
    layers: list[tuple[Tensor, Tensor] | None]
    length: int


@dataclass
class PrefillResult:
    logits: Tensor
    hidden_states: list[Tensor]
    # layer -> (B, H, T) attention weights of the last prompt position
    attention: dict[int, Tensor]
    kv_state: KVState
    flops: np.ndarray = field(repr=False)


def _param(rng: nx.Rng, *shape, gain: float = 1.0) -> nn.Parameter:
    # fan-in scaling; the GPT-style fixed 0.02 trains far too slowly at toy widths
    return nn.Parameter(nx.tensor(rng.normal(shape, gain / math.sqrt(shape[-1]))))


def _zeros(*shape) -> nn.Parameter:
    return nn.Parameter(torch.zeros(*shape, dtype=nx.default_dtype()))


def _ones(*shape) -> nn.Parameter:
    return nn.Parameter(torch.ones(*shape, dtype=nx.default_dtype()))


class Block(nn.Module):
    """Pre-LN transformer block with per-head and per-channel-group gating hooks."""

    def __init__(self, config: ModelConfig, rng: nx.Rng):
        super().__init__()
        d, f = config.d_model, config.d_mlp
        self.n_heads = config.n_heads
        self.d_head = config.d_head
        self.group_width = config.group_width
        out_gain = 1 / math.sqrt(2 * config.n_layers)
        self.ln1_g, self.ln1_b = _ones(d), _zeros(d)
        self.w_qkv, self.b_qkv = _param(rng, 3 * d, d), _zeros(3 * d)
        self.w_o, self.b_o = _param(rng, d, d, gain=out_gain), _zeros(d)
        self.ln2_g, self.ln2_b = _ones(d), _zeros(d)
        self.w_in, self.b_in = _param(rng, f, d), _zeros(f)
        if config.gated_mlp:
            self.w_gate, self.b_gate = _param(rng, f, d), _zeros(f)
        else:
            self.w_gate = self.b_gate = None
        self.w_out, self.b_out = _param(rng, d, f, gain=out_gain), _zeros(d)

    def attend(self, x: Tensor, past=None, head_gate: Tensor | None = None):
        B, T, d = x.shape
        H, dh = self.n_heads, self.d_head
        qkv = nx.linear(nx.layer_norm(x, self.ln1_g, self.ln1_b), self.w_qkv, self.b_qkv)
        q, k, v = qkv.view(B, T, 3, H, dh).permute(2, 0, 3, 1, 4)
        if past is not None:
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        offset = k.shape[2] - T
        scores = nx.matmul(q, k.transpose(-1, -2)) / math.sqrt(dh)
        allowed = torch.ones(T, k.shape[2], dtype=torch.bool).tril(offset)
        probs = nx.softmax(scores.masked_fill(~allowed, nx.MASK_VALUE), axis=-1)
        out = nx.matmul(probs, v)
        if head_gate is not None:
            out = out * head_gate[:, :, None, None]
        out = out.transpose(1, 2).reshape(B, T, d)
        return nx.linear(out, self.w_o, self.b_o), (k, v), probs

    def mlp(self, x: Tensor, group_gate: Tensor | None = None) -> Tensor:
        hx = nx.layer_norm(x, self.ln2_g, self.ln2_b)
        a = nx.gelu(nx.linear(hx, self.w_in, self.b_in))
        if self.w_gate is not None:
            a = a * nx.linear(hx, self.w_gate, self.b_gate)
        if group_gate is not None:
            a = a * group_gate.repeat_interleave(self.group_width, dim=-1)[:, None, :]
        return nx.linear(a, self.w_out, self.b_out)

    def forward(self, x, past=None, block_gate=None, head_gate=None, group_gate=None):
        a, kv, probs = self.attend(x, past, head_gate)
        if block_gate is not None:
            a = a * block_gate[:, None, None]
        h = x + a
        m = self.mlp(h, group_gate)
        if block_gate is not None:
            m = m * block_gate[:, None, None]
        return h + m, kv, probs


class ReconfigurableDecoder(nn.Module):
    """Decoder f(.; theta) plus the toy visual projector and text embedder."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.topology = SwitchTopology.from_config(config)
        rng = nx.Rng(seed)
        d = config.d_model
        self.visual_w = _param(rng, d, config.d_feat)
        self.visual_b = _zeros(d)
        self.tok_emb = _param(rng, config.vocab_size, d)
        self.pos_emb = _param(rng, config.max_seq_len, d)
        self.blocks = nn.ModuleList([Block(config, rng) for _ in range(config.n_layers)])
        self.lnf_g, self.lnf_b = _ones(d), _zeros(d)
        self.lm_head = _param(rng, config.vocab_size, d)
        self._switches = self.topology.by_layer()

    @property
    def K(self) -> int:
        return self.topology.K

    # -- encoders -----------------------------------------------------------------
    def encode_visual(self, features: Tensor) -> Tensor:
        if features.shape[-1] != self.config.d_feat:
            raise ValueError(f"visual feature dim {features.shape[-1]} != d_feat {self.config.d_feat}")
        return nx.linear(features, self.visual_w, self.visual_b)

    def embed_text(self, ids, offset: int = 0) -> Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long)
        n = ids.shape[-1]
        if offset + n > self.config.max_seq_len:
            raise ValueError("sequence too long")
        pos = self.pos_emb[offset : offset + n]
        return nx.embedding_lookup(self.tok_emb, ids) + pos

    # -- plan handling ------------------------------------------------------------
    def gates_for(self, plan, batch: int) -> Tensor | None:
        """Normalise a plan into a (B, K) gate tensor, or None for the plain model."""
        if plan is None:
            return None
        if isinstance(plan, ExecutionPlan):
            if plan.K != self.K:
                raise ValueError(f"plan length {plan.K} != K={self.K}")
            return torch.tensor(plan.bits, dtype=nx.default_dtype()).expand(batch, -1)
        if plan.shape != (batch, self.K):
            raise ValueError(f"gate shape {tuple(plan.shape)} != {(batch, self.K)}")
        return plan

    @staticmethod
    def _plan_key(plan, gates: Tensor | None):
        if isinstance(plan, ExecutionPlan):
            return plan.bits
        if gates is None:
            return None
        return tuple(tuple(row) for row in gates.detach().to(torch.int8).tolist())

    # -- core ---------------------------------------------------------------------
    def run_layers(self, x, start, stop, gates=None, past=None, attention=None, hidden=None, flops=None):
        """Apply layers [start, stop) to x (B, T, d). Returns (x, kv list)."""
        cfg = self.config
        T = x.shape[1]
        n_past = 0 if past is None else past.length
        kvs: list = []
        full = cm.layer_flops(cfg, T) if flops is not None else 0
        head_cost = cm.attention_head_flops(T, cfg.d_model, cfg.d_head)
        group_cost = cm.mlp_group_flops(T, cfg.d_model, cfg.group_width, cfg.gated_mlp)
        for i in range(start, stop):
            block = self.blocks[i]
            layer_past = None if past is None else past.layers[i]
            sw = self._switches.get(i) if gates is not None else None
            kw = {}
            if sw is None:
                if flops is not None:
                    flops += full
            elif SwitchKind.BLOCK in sw:
                g = gates[:, sw[SwitchKind.BLOCK][0]]
                if flops is not None:
                    flops += full * (g.detach().numpy() != 0)
                if not g.requires_grad and bool((g == 0).all()):
                    kvs.append(None)
                    if hidden is not None:
                        hidden.append(x)
                    continue
                if not g.requires_grad and bool((g == 1).all()):
                    g = None
                kw["block_gate"] = g
            else:
                hg = gates[:, sw[SwitchKind.ATTN_HEAD]]
                gg = gates[:, sw[SwitchKind.MLP_GROUP]]
                if flops is not None:
                    flops += head_cost * (hg.detach().numpy() != 0).sum(1)
                    flops += group_cost * (gg.detach().numpy() != 0).sum(1)
                kw["head_gate"], kw["group_gate"] = hg, gg
            if layer_past is None and past is not None and n_past:
                raise ValueError("kv_state is missing a layer executed by this plan")
            x, kv, probs = block(x, layer_past, **kw)
            kvs.append(kv)
            if attention is not None:
                attention[i] = probs[:, :, -1, :]
            if hidden is not None:
                hidden.append(x)
        return x, kvs

    def head(self, x: Tensor) -> Tensor:
        return nx.linear(nx.layer_norm(x, self.lnf_g, self.lnf_b), self.lm_head)

    def forward_prefill(self, sequence: Tensor, plan=None) -> PrefillResult:
        """Run the prompt ``sequence`` (T, d) or (B, T, d) under ``plan``."""
        squeeze = sequence.dim() == 2
        x = sequence[None] if squeeze else sequence
        B, T, _ = x.shape
        if T > self.config.max_seq_len:
            raise ValueError(f"sequence too long: {T} > max_seq_len {self.config.max_seq_len}")
        gates = self.gates_for(plan, B)
        attention: dict[int, Tensor] = {}
        hidden: list[Tensor] = []
        flops = np.zeros(B, dtype=np.int64)
        x, kvs = self.run_layers(x, 0, self.config.n_layers, gates, attention=attention, hidden=hidden, flops=flops)
        logits = self.head(x)
        state = KVState(self._plan_key(plan, gates), kvs, T)
        if squeeze:
            logits = logits[0]
            hidden = [h[0] for h in hidden]
            attention = {k: v[0] for k, v in attention.items()}
        return PrefillResult(logits, hidden, attention, state, flops)

    def decode_step(self, kv_state: KVState, last_token, plan=None) -> tuple[Tensor, KVState]:
        """Feed one token; returns next-token logits (B, V) and the extended state."""
        tok = torch.as_tensor(last_token, dtype=torch.long).reshape(-1, 1)
        B = tok.shape[0]
        gates = self.gates_for(plan, B)
        if self._plan_key(plan, gates) != kv_state.plan_key:
            raise ValueError("plan changed mid-generation")
        if kv_state.length + 1 > self.config.max_seq_len:
            raise ValueError("sequence too long")
        x = self.embed_text(tok, offset=kv_state.length)
        x, kvs = self.run_layers(x, 0, self.config.n_layers, gates, past=kv_state)
        new_state = KVState(kv_state.plan_key, kvs, kv_state.length + 1)
        return self.head(x)[:, -1], new_state

    @torch.no_grad()
    def generate(self, sequence: Tensor, plan=None, max_len: int = 2, eoa_token: int | None = None) -> list[int]:
        """Greedy decoding of one answer; the plan is fixed for every step."""
        if max_len <= 0:
            return []
        pre = self.forward_prefill(sequence, plan)
        logits = pre.logits[-1] if sequence.dim() == 2 else pre.logits[0, -1]
        state = pre.kv_state
        out: list[int] = []
        while True:
            token = int(torch.argmax(logits))
            if token == eoa_token:
                break
            out.append(token)
            if len(out) >= max_len:
                break
            step, state = self.decode_step(state, [token], plan)
            logits = step[0]
        return out

    # -- parameter groups -----------------------------------------------------------
    def head_parameter_slices(self, layer: int, head: int) -> list[tuple[str, tuple]]:
        """(param name, index) pairs owned exclusively by one attention head."""
        d, dh = self.config.d_model, self.config.d_head
        rows = [slice(part * d + head * dh, part * d + (head + 1) * dh) for part in range(3)]
        p = f"blocks.{layer}."
        out = [(p + "w_qkv", (r,)) for r in rows] + [(p + "b_qkv", (r,)) for r in rows]
        out.append((p + "w_o", (slice(None), slice(head * dh, (head + 1) * dh))))
        return out

    def group_parameter_slices(self, layer: int, group: int) -> list[tuple[str, tuple]]:
        """(param name, index) pairs owned exclusively by one MLP channel group."""
        w = self.config.group_width
        cols = slice(group * w, (group + 1) * w)
        p = f"blocks.{layer}."
        out = [(p + "w_in", (cols,)), (p + "b_in", (cols,)), (p + "w_out", (slice(None), cols))]
        if self.config.gated_mlp:
            out += [(p + "w_gate", (cols,)), (p + "b_gate", (cols,))]
        return out
