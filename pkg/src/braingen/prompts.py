"""Mixed-modality prompt assembly for the three experimental conditions:
brain-conditioned (BrainLLM), permuted-brain control (PerBrainLLM), and the
text-only control (StdLLM).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .lm import BOS_ID

BRAINLLM = "brainllm"
PERBRAINLLM = "perbrainllm"
STDLLM = "stdllm"
CONDITIONS = (BRAINLLM, PERBRAINLLM, STDLLM)


@dataclass
class PromptInput:
    """Embedding rows plus layout bookkeeping.

    Brain conditions: [sentinel_open, t brain rows, sentinel_close, n text rows].
    StdLLM: text rows only (a single BOS row when the prompt is empty).
    """

    rows: np.ndarray
    condition: str
    t: int  # brain rows present (0 for stdllm)
    n: int  # text rows

    @property
    def has_brain(self) -> bool:
        return self.t > 0

    @property
    def text_start(self) -> int:
        return self.t + 2 if self.has_brain else 0


@dataclass
class PermutationPlan:
    mapping: np.ndarray
    seed: int

    def __getitem__(self, i: int) -> int:
        return int(self.mapping[i])


def build_input(vb: np.ndarray, vw: np.ndarray, sent_open: np.ndarray, sent_close: np.ndarray, condition: str = BRAINLLM) -> PromptInput:
    d = sent_open.shape[1]
    for name, m in (("brain", vb), ("text", vw), ("close sentinel", sent_close)):
        if m.shape[0] > 0 and m.shape[1] != d:
            raise DimensionError(f"{name} rows have dim {m.shape[1]}, expected {d}")
    rows = np.vstack([sent_open, vb, sent_close, vw])
    return PromptInput(rows=rows, condition=condition, t=vb.shape[0], n=vw.shape[0])


def build_text_input(vw: np.ndarray, lm) -> PromptInput:
    if vw.shape[0] == 0:
        vw = lm.embed_tokens([BOS_ID])
    return PromptInput(rows=vw, condition=STDLLM, t=0, n=vw.shape[0])


def plan_permutation(n_samples: int, seed: int) -> PermutationPlan:
    """Uniform random derangement by rejection sampling; deterministic under seed."""
    if n_samples < 2:
        raise ValueError(f"need at least 2 samples to permute, got {n_samples}")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n_samples)
        if not np.any(perm == np.arange(n_samples)):
            return PermutationPlan(mapping=perm, seed=seed)


def identity_plan(n_samples: int) -> PermutationPlan:
    """Debug hook: PerBrainLLM inputs collapse onto BrainLLM inputs."""
    return PermutationPlan(mapping=np.arange(n_samples), seed=-1)


def assemble_condition(index: int, samples, plan: PermutationPlan | None, condition: str, adapter, lm) -> PromptInput:
    """Build the prompt rows for one test sample under the given condition."""
    if condition not in CONDITIONS:
        raise ConfigError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")
    sample = samples[index]
    vw = lm.embed_tokens(sample.prompt_ids)
    if condition == STDLLM:
        return build_text_input(vw, lm)
    if condition == PERBRAINLLM:
        if plan is None:
            raise ConfigError("PerBrainLLM requires a permutation plan")
        recording = samples[plan[index]].recording
    else:
        recording = sample.recording
    vb = adapter.adapt(recording)
    return build_input(vb, vw, adapter.sent_open.value, adapter.sent_close.value, condition)
