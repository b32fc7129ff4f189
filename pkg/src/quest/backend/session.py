"""Model sessions, adaptable-module metadata, and the backend registry.

A backend bundles tokenizer + parameters + forward/sampling machinery. A
ModelSession wraps one backend together with an rng seed and an optional
attached low-rank adapter; the base parameters behind a session are never
mutated. Backends are looked up by name through a small registry so external
implementations can be plugged in next to the built-in "reference" one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Optional, Protocol, Sequence

import numpy as np

TokenSequence = list[int]


@dataclass(frozen=True)
class AdaptableModuleInfo:
    """One weight matrix that accepts a low-rank adapter."""

    name: str
    d_in: int
    d_out: int
    dtype: str = "float32"


class Backend(Protocol):
    """Structural interface every backend must satisfy.

    Adapter-aware methods accept the adapter state duck-typed: it must expose
    ``factors`` (mapping module name -> (A, B) arrays), ``scaling`` and
    ``spec.dropout``. Gradient entry points are only required of backends
    meant to be optimized at test time.
    """

    name: str
    vocab_size: int
    max_len: int
    eos_id: int

    def tokenize(self, text: str) -> TokenSequence: ...

    def detokenize(self, tokens: Sequence[int]) -> str: ...

    def forward_logits(self, tokens: Sequence[int], adapter: Any = None) -> np.ndarray: ...

    def generate(
        self,
        prompt: Sequence[int],
        max_new_tokens: int,
        temperature: float,
        adapter: Any = None,
        seed: Optional[int] = None,
    ) -> TokenSequence: ...

    def adaptable_modules(self) -> list[AdaptableModuleInfo]: ...

    def masked_nll(self, tokens: Sequence[int], loss_mask: Sequence[int], adapter: Any = None) -> float: ...


@dataclass
class ModelSession:
    """One backend plus per-run state: rng seed and the attached adapter.

    At most one adapter may be attached at a time; attach/detach live in
    ``quest.adapters``. Sessions are not safe for concurrent writers --
    clone per worker instead.
    """

    backend: Any
    seed: int = 0
    adapter: Any = None

    @property
    def backend_name(self) -> str:
        return self.backend.name

    def clone(self, seed: Optional[int] = None) -> "ModelSession":
        """Independent session over the same frozen base; adapter not carried."""
        return ModelSession(backend=self.backend, seed=self.seed if seed is None else seed)


def check_loss_mask(tokens: Sequence[int], loss_mask: Sequence[int]) -> None:
    """Validate the masked-NLL preconditions shared by all backends."""
    if len(loss_mask) != len(tokens):
        raise ValueError(
            f"loss mask length {len(loss_mask)} does not match token length {len(tokens)}"
        )
    if not any(loss_mask):
        raise ValueError("loss mask has no positions set")
    if loss_mask[0]:
        raise ValueError("loss mask must be 0 at position 0 (no prefix to predict from)")


# -- session-level operations -------------------------------------------------


def tokenize(session: ModelSession, text: str) -> TokenSequence:
    return session.backend.tokenize(text)


def detokenize(session: ModelSession, tokens: Sequence[int]) -> str:
    return session.backend.detokenize(tokens)


def forward_logits(session: ModelSession, tokens: Sequence[int]) -> np.ndarray:
    """Per-position next-token scores, shape (len(tokens), vocab)."""
    return session.backend.forward_logits(tokens, adapter=session.adapter)


def generate(
    session: ModelSession,
    prompt: Sequence[int],
    max_new_tokens: int,
    temperature: float = 0.0,
    seed: Optional[int] = None,
) -> TokenSequence:
    """Continue the prompt; temperature 0 is greedy with lowest-id tie-break.

    The returned sequence excludes both the prompt and the end-of-sequence
    token that terminated decoding. Sampling is a pure function of
    (parameters, adapter, session seed, explicit seed, prompt).
    """
    return session.backend.generate(
        prompt,
        max_new_tokens,
        temperature,
        adapter=session.adapter,
        seed=session.seed if seed is None else seed,
    )


def list_adaptable_modules(session: ModelSession) -> list[AdaptableModuleInfo]:
    return list(session.backend.adaptable_modules())


def masked_nll(session: ModelSession, tokens: Sequence[int], loss_mask: Sequence[int]) -> float:
    """Mean next-token NLL over mask-1 positions (target t predicted from prefix < t)."""
    check_loss_mask(tokens, loss_mask)
    return session.backend.masked_nll(tokens, loss_mask, adapter=session.adapter)


# -- registry -----------------------------------------------------------------

_REGISTRY: dict[str, Callable[..., Any]] = {}


def register_backend(name: str, factory: Callable[..., Any]) -> None:
    """Register a backend factory; ``factory(**options)`` must return a Backend."""
    _REGISTRY[name] = factory


def available_backends() -> list[str]:
    return sorted(_REGISTRY)


def create_session(name: str, *, seed: int = 0, **options: Any) -> ModelSession:
    """Instantiate a registered backend and wrap it in a fresh session."""
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(
            f"unknown backend {name!r}; registered: {', '.join(available_backends()) or '(none)'}"
        ) from None
    return ModelSession(backend=factory(**options), seed=seed)
