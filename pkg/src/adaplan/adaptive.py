"""The full adaptive model: decoder (theta) + latency encoder and scheduler head (phi).

The prompt is ``[visual tokens, query tokens, latency token]``. The first
``split_layer`` blocks always run; the latency token's hidden state after them
feeds the scheduler head, whose logits pick the plan for the remaining blocks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from . import scheduler as sch
from .cost_model import CostModel
from .data import EOA, Batch
from .model import ExecutionPlan, ModelConfig, ReconfigurableDecoder
from .numerics import Tensor


@dataclass
class SplitState:
    hidden: Tensor  # (B, T, d) after the always-on layers
    logits: Tensor  # (B, K) scheduler logits
    attention: dict[int, Tensor]


class AdaptiveModel(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.decoder = ReconfigurableDecoder(config, seed=seed)
        self.latency_encoder = sch.LatencyEncoder(config.d_model, seed=seed + 7919)
        self.scheduler = sch.SchedulerHead(config.d_model, self.decoder.K)
        self._costs: dict[int, CostModel] = {}

    @property
    def topology(self):
        return self.decoder.topology

    @property
    def K(self) -> int:
        return self.decoder.K

    def theta(self) -> list[nn.Parameter]:
        return list(self.decoder.parameters())

    def phi(self) -> list[nn.Parameter]:
        return list(self.latency_encoder.parameters()) + list(self.scheduler.parameters())

    def cost_model(self, seq_len: int) -> CostModel:
        if seq_len not in self._costs:
            self._costs[seq_len] = CostModel.build(self.config, self.topology, seq_len)
        return self._costs[seq_len]

    def prompt(self, features: Tensor, query, budgets) -> Tensor:
        """(B, n_vis + n_query + 1, d) prompt embeddings for a batch."""
        features = torch.as_tensor(features, dtype=nx.default_dtype())
        query = torch.as_tensor(query, dtype=torch.long)
        if features.dim() == 2:
            features = features[None]
            query = query[None]
        B, n_vis = features.shape[:2]
        if n_vis != self.config.n_visual_tokens:
            raise ValueError(f"expected {self.config.n_visual_tokens} visual tokens, got {n_vis}")
        seq_len = n_vis + query.shape[1] + 1
        budgets = torch.as_tensor(np.broadcast_to(np.asarray(budgets, dtype=np.float64), (B,)).copy())
        z_s = sch.encode_latency(budgets.to(nx.default_dtype()), self.latency_encoder, self.cost_model(seq_len))
        z_v = self.decoder.encode_visual(features)
        z_q = self.decoder.embed_text(query, offset=n_vis)
        return torch.cat([z_v, z_q, z_s[:, None, :]], dim=1)

    def split(self, sequence: Tensor, latency_index: int | None = None) -> SplitState:
        """Run the always-on layers and read the scheduler logits off the latency token."""
        attention: dict[int, Tensor] = {}
        h, _ = self.decoder.run_layers(sequence, 0, self.config.split_layer, attention=attention)
        idx = sequence.shape[1] - 1 if latency_index is None else latency_index
        logits = sch.scheduler_logits(h[:, idx], self.scheduler)
        return SplitState(h, logits, attention)

    def finish(self, state: SplitState, gates) -> Tensor:
        h, _ = self.decoder.run_layers(state.hidden, self.config.split_layer, self.config.n_layers, gates)
        return self.decoder.head(h)

    # -- inference ----------------------------------------------------------------
    @torch.no_grad()
    def plan_logits(self, features, query, budgets) -> tuple[Tensor, Tensor]:
        seq = self.prompt(features, query, budgets)
        return seq, self.split(seq).logits

    @torch.no_grad()
    def answer(self, features, query, l: float, plan: ExecutionPlan | None = None, max_len: int = 2):
        """Schedule (argmax plan unless ``plan`` is given) and greedily decode one sample."""
        seq = self.prompt(features, query, l)
        logits = self.split(seq).logits[0]
        if plan is None:
            plan = sch.argmax_plan(logits, l, self.cost_model(seq.shape[1]))
        ids = self.decoder.generate(seq[0], plan, max_len=max_len, eoa_token=EOA)
        return plan, ids, logits


def teacher_forced_inputs(model: AdaptiveModel, batch: Batch, budgets) -> tuple[Tensor, int]:
    """Prompt followed by the answer tokens that are fed back; returns (sequence, prompt_len)."""
    prompt = model.prompt(batch.features, batch.query, budgets)
    P = prompt.shape[1]
    fed = model.decoder.embed_text(batch.answer[:, :-1], offset=P)
    return torch.cat([prompt, fed], dim=1), P
