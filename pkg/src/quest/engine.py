"""Test-time optimization engine: the query-conditioned self-training pipeline,
entropy/perplexity-minimization baselines, and self-consistency sampling.

All methods share one recipe: derive an objective from the query, run T AdamW
updates on low-rank adapter factors while the base stays frozen, answer with
greedy decoding, then discard the adapter (per-query reset). "T steps" counts
optimizer updates; each update accumulates gradients over ``grad_accumulation``
examples visited by cycling the dataset in order (a seeded shuffle sits behind
a flag). Token telemetry is exact: generated tokens cover every sampling call
including parse retries, trained tokens count every example visit.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .adapters import AdapterSpec, AdapterState, attach, detach, init_adapter, trainable_parameters
from .backend.session import ModelSession
from .evalkit import answers_equivalent, extract_boxed, majority_vote
from .optim import AdamW
from .seeding import derive_seed
from .supervision import (
    AuxPair,
    GenConfig,
    Query,
    SolutionTruncated,
    format_answer_prompt,
    generate_dataset,
    generate_unconditioned_dataset,
    make_training_example,
)

log = logging.getLogger(__name__)

METHOD_LABELS = (
    "base",
    "quest",
    "tent",
    "tlm",
    "self_consistency",
    "quest_no_query",
    "quest_no_lora",
)

ANSWER_MAX_NEW_TOKENS = 4096


@dataclass(frozen=True)
class OptConfig:
    steps: int = 10
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    grad_accumulation: int = 4
    max_seq_len: int = 4096
    seed: int = 0
    shuffle: bool = False
    # alternative reading of the step budget: count micro-batches, not updates
    steps_count_micro: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.grad_accumulation < 1:
            raise ValueError("grad_accumulation must be positive")

    @property
    def num_updates(self) -> int:
        if self.steps_count_micro:
            return self.steps // self.grad_accumulation
        return self.steps


@dataclass
class AdaptTelemetry:
    loss_trajectory: list[float] = field(default_factory=list)
    generated_tokens: int = 0
    trained_tokens: int = 0
    wall_seconds: float = 0.0
    pairs_used: int = 0

    def to_dict(self) -> dict:
        return {
            "loss_trajectory": self.loss_trajectory,
            "generated_tokens": self.generated_tokens,
            "trained_tokens": self.trained_tokens,
            "wall_seconds": self.wall_seconds,
            "pairs_used": self.pairs_used,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "AdaptTelemetry":
        return cls(**obj)


@dataclass
class MethodResult:
    answer_text: str
    extracted: Optional[str]
    telemetry: AdaptTelemetry
    method_label: str

    def __post_init__(self):
        if self.method_label not in METHOD_LABELS:
            raise ValueError(f"unknown method label {self.method_label!r}")


def _answer_prompt_ids(session: ModelSession, query: Query) -> list[int]:
    return session.backend.tokenize(format_answer_prompt(query.text, query.system_prompt))


def _greedy_answer(session: ModelSession, prompt_ids: list[int], max_new_tokens: int) -> list[int]:
    return session.backend.generate(
        prompt_ids, max_new_tokens, 0.0, adapter=session.adapter, seed=session.seed
    )


def sft_update(
    session: ModelSession,
    examples: Sequence[tuple[list[int], list[int]]],
    optimizer: AdamW,
    dropout_rng: Optional[np.random.Generator] = None,
) -> float:
    """One optimizer update over a micro-batch of (tokens, mask) examples.

    Returns the mean masked NLL of the batch; gradients are averaged, applied
    to adapter factors only, and the adapter's step counter advances by one.
    """
    if not examples:
        raise ValueError("empty batch")
    adapter = session.adapter
    if adapter is None:
        raise ValueError("no adapter attached")
    total = 0.0
    summed: dict[str, np.ndarray] = {}
    for tokens, mask in examples:
        loss, grads = session.backend.masked_nll_with_grads(
            tokens, mask, adapter, dropout_rng=dropout_rng
        )
        total += loss
        for name, (ga, gb) in grads.items():
            if f"{name}.A" in summed:
                summed[f"{name}.A"] += ga
                summed[f"{name}.B"] += gb
            else:
                summed[f"{name}.A"] = ga.copy()
                summed[f"{name}.B"] = gb.copy()
    scale = 1.0 / len(examples)
    optimizer.step({k: v * scale for k, v in summed.items()})
    adapter.step_count += 1
    return total * scale


def _visit_order(n_examples: int, total_visits: int, seed: int, shuffle: bool) -> list[int]:
    if not shuffle:
        return [i % n_examples for i in range(total_visits)]
    rng = np.random.default_rng(derive_seed(seed, "visit-order"))
    order: list[int] = []
    while len(order) < total_visits:
        order.extend(rng.permutation(n_examples).tolist())
    return order[:total_visits]


def adapt(
    session: ModelSession,
    dataset: Sequence[AuxPair],
    spec: AdapterSpec,
    cfg: OptConfig,
    system_prompt: str = "",
) -> tuple[AdapterState, AdaptTelemetry]:
    """Fit a fresh adapter to the generated dataset with exactly T updates.

    T=0 returns the just-initialized adapter, which is an exact identity.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    t0 = time.perf_counter()
    backend = session.backend
    examples = []
    for pair in dataset:
        try:
            examples.append(make_training_example(pair, backend, system_prompt, cfg.max_seq_len))
        except SolutionTruncated as exc:
            log.warning("skipping pair: %s", exc)
    if not examples:
        raise ValueError("no valid training examples after truncation")

    adapter = init_adapter(spec, backend.adaptable_modules())
    optimizer = AdamW(
        trainable_parameters(adapter),
        lr=cfg.lr,
        betas=cfg.betas,
        weight_decay=cfg.weight_decay,
    )
    dropout_rng = np.random.default_rng(derive_seed(cfg.seed, "dropout"))
    updates = cfg.num_updates
    order = _visit_order(len(examples), updates * cfg.grad_accumulation, cfg.seed, cfg.shuffle)

    telemetry = AdaptTelemetry(pairs_used=len(examples))
    attach(session, adapter)
    try:
        for step in range(updates):
            batch = [
                examples[order[step * cfg.grad_accumulation + j]]
                for j in range(cfg.grad_accumulation)
            ]
            loss = sft_update(session, batch, optimizer, dropout_rng=dropout_rng)
            telemetry.loss_trajectory.append(loss)
            telemetry.trained_tokens += sum(len(tokens) for tokens, _ in batch)
    finally:
        detach(session)
    telemetry.wall_seconds = time.perf_counter() - t0
    return adapter, telemetry


def _generate_answer(
    session: ModelSession,
    query: Query,
    adapter: Optional[AdapterState],
    max_new_tokens: int,
) -> tuple[str, int]:
    """Greedy answer text plus the exact number of tokens generated."""
    prompt_ids = _answer_prompt_ids(session, query)
    if adapter is not None:
        attach(session, adapter)
    try:
        out = _greedy_answer(session, prompt_ids, max_new_tokens)
    finally:
        if adapter is not None:
            detach(session)
    return session.backend.detokenize(out), len(out)


def answer_with_adapter(
    session: ModelSession,
    query: Query,
    adapter: Optional[AdapterState],
    max_new_tokens: int,
) -> str:
    return _generate_answer(session, query, adapter, max_new_tokens)[0]


def base_answer(
    session: ModelSession, query: Query, max_new_tokens: int = ANSWER_MAX_NEW_TOKENS
) -> MethodResult:
    """Unadapted greedy answer; the floor every method is measured against."""
    t0 = time.perf_counter()
    text, n_tokens = _generate_answer(session, query, None, max_new_tokens)
    telemetry = AdaptTelemetry(generated_tokens=n_tokens, wall_seconds=time.perf_counter() - t0)
    return MethodResult(text, extract_boxed(text), telemetry, "base")


def _quest_pipeline(
    session: ModelSession,
    query: Query,
    gen_cfg: GenConfig,
    spec: AdapterSpec,
    opt_cfg: OptConfig,
    label: str,
    conditioned: bool,
    generator_session: Optional[ModelSession],
    max_new_tokens: int,
) -> MethodResult:
    t0 = time.perf_counter()
    gen_session = generator_session if generator_session is not None else session
    if conditioned:
        gen = generate_dataset(gen_session, query, gen_cfg)
    else:
        gen = generate_unconditioned_dataset(gen_session, gen_cfg)

    if not gen.pairs:
        # uninformative supervision: fall back to the unadapted base answer
        text, n_answer = _generate_answer(session, query, None, max_new_tokens)
        telemetry = AdaptTelemetry(generated_tokens=gen.generated_tokens + n_answer)
    else:
        adapter, telemetry = adapt(
            session, gen.pairs, spec, opt_cfg, system_prompt=query.system_prompt
        )
        text, n_answer = _generate_answer(session, query, adapter, max_new_tokens)
        telemetry.generated_tokens = gen.generated_tokens + n_answer
    telemetry.wall_seconds = time.perf_counter() - t0
    return MethodResult(text, extract_boxed(text), telemetry, label)


def quest(
    session: ModelSession,
    query: Query,
    gen_cfg: GenConfig,
    spec: AdapterSpec,
    opt_cfg: OptConfig,
    *,
    generator_session: Optional[ModelSession] = None,
    max_new_tokens: int = ANSWER_MAX_NEW_TOKENS,
) -> MethodResult:
    """Full query-conditioned pipeline: generate pairs, adapt, answer, reset.

    ``generator_session`` defaults to the solving session (the base model is
    its own generator); tests substitute a scripted generator here.
    """
    return _quest_pipeline(
        session, query, gen_cfg, spec, opt_cfg, "quest", True, generator_session, max_new_tokens
    )


def quest_no_query(
    session: ModelSession,
    query: Query,
    gen_cfg: GenConfig,
    spec: AdapterSpec,
    opt_cfg: OptConfig,
    *,
    generator_session: Optional[ModelSession] = None,
    max_new_tokens: int = ANSWER_MAX_NEW_TOKENS,
) -> MethodResult:
    """Ablation: same pipeline trained on query-independent pairs."""
    return _quest_pipeline(
        session,
        query,
        gen_cfg,
        spec,
        opt_cfg,
        "quest_no_query",
        False,
        generator_session,
        max_new_tokens,
    )


def quest_no_lora(
    session: ModelSession,
    query: Query,
    gen_cfg: GenConfig,
    *,
    generator_session: Optional[ModelSession] = None,
    max_new_tokens: int = ANSWER_MAX_NEW_TOKENS,
) -> MethodResult:
    """Ablation: generated pairs become in-context exemplars; no updates."""
    t0 = time.perf_counter()
    gen_session = generator_session if generator_session is not None else session
    gen = generate_dataset(gen_session, query, gen_cfg)
    blocks = [f"{pair.problem}\n{pair.solution}\n" for pair in gen.pairs]
    prompt = "".join(blocks) + format_answer_prompt(query.text, query.system_prompt)
    prompt_ids = session.backend.tokenize(prompt)
    out = _greedy_answer(session, prompt_ids, max_new_tokens)
    text = session.backend.detokenize(out)
    telemetry = AdaptTelemetry(
        generated_tokens=gen.generated_tokens + len(out),
        pairs_used=len(gen.pairs),
        wall_seconds=time.perf_counter() - t0,
    )
    return MethodResult(text, extract_boxed(text), telemetry, "quest_no_lora")


def _objective_pipeline(
    session: ModelSession,
    query: Query,
    spec: AdapterSpec,
    opt_cfg: OptConfig,
    label: str,
    loss_with_grads: Callable,
    max_new_tokens: int,
) -> MethodResult:
    """Shared TENT/TLM loop: optimize one query-derived objective, then answer."""
    t0 = time.perf_counter()
    backend = session.backend
    tokens = backend.tokenize(query.text)
    if len(tokens) > backend.max_len:
        tokens = tokens[: backend.max_len]

    adapter = init_adapter(spec, backend.adaptable_modules())
    optimizer = AdamW(
        trainable_parameters(adapter),
        lr=opt_cfg.lr,
        betas=opt_cfg.betas,
        weight_decay=opt_cfg.weight_decay,
    )
    dropout_rng = np.random.default_rng(derive_seed(opt_cfg.seed, "dropout"))
    telemetry = AdaptTelemetry(pairs_used=0)
    for _ in range(opt_cfg.num_updates):
        total = 0.0
        summed: dict[str, np.ndarray] = {}
        for _ in range(opt_cfg.grad_accumulation):
            loss, grads = loss_with_grads(tokens, adapter, dropout_rng)
            total += loss
            for name, (ga, gb) in grads.items():
                if f"{name}.A" in summed:
                    summed[f"{name}.A"] += ga
                    summed[f"{name}.B"] += gb
                else:
                    summed[f"{name}.A"] = ga.copy()
                    summed[f"{name}.B"] = gb.copy()
        scale = 1.0 / opt_cfg.grad_accumulation
        optimizer.step({k: v * scale for k, v in summed.items()})
        adapter.step_count += 1
        telemetry.loss_trajectory.append(total * scale)
        telemetry.trained_tokens += len(tokens) * opt_cfg.grad_accumulation

    text, n_answer = _generate_answer(session, query, adapter, max_new_tokens)
    telemetry.generated_tokens += n_answer
    telemetry.wall_seconds = time.perf_counter() - t0
    return MethodResult(text, extract_boxed(text), telemetry, label)


def tent(
    session: ModelSession,
    query: Query,
    spec: AdapterSpec,
    opt_cfg: OptConfig,
    *,
    max_new_tokens: int = ANSWER_MAX_NEW_TOKENS,
) -> MethodResult:
    """Entropy-minimization baseline over the query's next-token distributions,
    optimized through the same low-rank parameterization as the main method."""

    def loss_with_grads(tokens, adapter, rng):
        return session.backend.entropy_with_grads(tokens, adapter, dropout_rng=rng)

    return _objective_pipeline(session, query, spec, opt_cfg, "tent", loss_with_grads, max_new_tokens)


def tlm(
    session: ModelSession,
    query: Query,
    spec: AdapterSpec,
    opt_cfg: OptConfig,
    *,
    max_new_tokens: int = ANSWER_MAX_NEW_TOKENS,
) -> MethodResult:
    """Input-perplexity-minimization baseline: NLL of the query text itself."""

    def loss_with_grads(tokens, adapter, rng):
        mask = [0] + [1] * (len(tokens) - 1)
        return session.backend.masked_nll_with_grads(tokens, mask, adapter, dropout_rng=rng)

    return _objective_pipeline(session, query, spec, opt_cfg, "tlm", loss_with_grads, max_new_tokens)


def self_consistency(
    session: ModelSession,
    query: Query,
    n_samples: int,
    temperature: float,
    *,
    max_new_tokens: int = ANSWER_MAX_NEW_TOKENS,
    extract: Callable[[str], Optional[str]] = extract_boxed,
) -> MethodResult:
    """Sample n completions and majority-vote their extracted answers."""
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    if temperature <= 0:
        raise ValueError("self-consistency requires temperature > 0")
    t0 = time.perf_counter()
    prompt_ids = _answer_prompt_ids(session, query)
    texts = []
    answers = []
    total_tokens = 0
    for k in range(n_samples):
        out = session.backend.generate(
            prompt_ids,
            max_new_tokens,
            temperature,
            adapter=session.adapter,
            seed=derive_seed(session.seed, "sc", k),
        )
        total_tokens += len(out)
        text = session.backend.detokenize(out)
        texts.append(text)
        answers.append(extract(text))
    winner = majority_vote(answers)
    raw = texts[0]
    if winner is not None:
        for text, ans in zip(texts, answers):
            if ans is not None and answers_equivalent(ans, winner):
                raw = text
                break
    telemetry = AdaptTelemetry(generated_tokens=total_tokens, wall_seconds=time.perf_counter() - t0)
    return MethodResult(raw, winner, telemetry, "self_consistency")


# -- per-query artifacts and seed derivation ------------------------------------


def derive_item_seeds(seed: int, query_id: str) -> dict[str, int]:
    """Stage seeds for one query; shared by the fused pipeline and the CLI
    stage-replay path so both see identical randomness."""
    return {
        "session": derive_seed(seed, query_id, "session"),
        "adapter": derive_seed(seed, query_id, "adapter"),
        "opt": derive_seed(seed, query_id, "opt"),
    }


def query_artifact_dir(run_dir: Union[str, Path], query_id: str) -> Path:
    path = Path(run_dir) / query_id
    path.mkdir(parents=True, exist_ok=True)
    return path


def save_telemetry(telemetry: AdaptTelemetry, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(telemetry.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_telemetry(path: Union[str, Path]) -> AdaptTelemetry:
    with open(path, encoding="utf-8") as f:
        return AdaptTelemetry.from_dict(json.load(f))
