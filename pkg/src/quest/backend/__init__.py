"""Pluggable model backends and the tiny trainable reference transformer."""

from .reference import (
    DEFAULT_CHARSET,
    CharTokenizer,
    RefConfig,
    ReferenceBackend,
    init_params,
    param_names,
    param_shapes,
    train_reference,
)
from .serialize import load_checkpoint, save_checkpoint
from .session import (
    AdaptableModuleInfo,
    Backend,
    ModelSession,
    TokenSequence,
    available_backends,
    check_loss_mask,
    create_session,
    detokenize,
    forward_logits,
    generate,
    list_adaptable_modules,
    masked_nll,
    register_backend,
    tokenize,
)


def _reference_factory(checkpoint=None, seed: int = 0, **config_overrides):
    if checkpoint is not None:
        if config_overrides:
            raise ValueError("pass either a checkpoint or config overrides, not both")
        return load_checkpoint(checkpoint)
    return ReferenceBackend.fresh(RefConfig(**config_overrides), seed=seed)


register_backend("reference", _reference_factory)

__all__ = [
    "AdaptableModuleInfo",
    "Backend",
    "CharTokenizer",
    "DEFAULT_CHARSET",
    "ModelSession",
    "RefConfig",
    "ReferenceBackend",
    "TokenSequence",
    "available_backends",
    "check_loss_mask",
    "create_session",
    "detokenize",
    "forward_logits",
    "generate",
    "init_params",
    "list_adaptable_modules",
    "load_checkpoint",
    "masked_nll",
    "param_names",
    "param_shapes",
    "register_backend",
    "save_checkpoint",
    "tokenize",
    "train_reference",
]
