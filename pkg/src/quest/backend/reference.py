"""Reference backend: a tiny character-level decoder-only transformer in numpy.

Small enough to train from scratch in seconds, yet structurally a real GPT:
token + position embeddings, pre-norm blocks with multi-head causal attention
(q/k/v/o projections, the low-rank injection sites) and a squared-ReLU MLP,
final RMSNorm, untied output head, no biases anywhere. Forward and backward
passes are written out by hand so gradients are available both for base
pretraining and for adapter-only test-time updates, with no autograd framework
behind them.

Weight convention: every linear is ``out = x @ W.T`` with ``W`` of shape
(d_out, d_in). An attached adapter contributes ``scaling * (x @ A.T) @ B.T``
on the q/k/v/o projections it targets; the branch input is dropped out only
when a training rng is supplied.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np

from .session import AdaptableModuleInfo, check_loss_mask

_RMS_EPS = 1e-5

DEFAULT_CHARSET = "\n\t" + "".join(chr(c) for c in range(32, 127))


class CharTokenizer:
    """Fixed character vocabulary; id 0 is the end-of-sequence token."""

    eos_id = 0

    def __init__(self, charset: str = DEFAULT_CHARSET):
        if len(set(charset)) != len(charset):
            raise ValueError("charset contains duplicate characters")
        self.charset = charset
        self.vocab_size = len(charset) + 1
        self._id_of = {ch: i + 1 for i, ch in enumerate(charset)}
        self._char_of = {i + 1: ch for i, ch in enumerate(charset)}

    def encode(self, text: str) -> list[int]:
        """Total function: CR/CRLF normalize to LF, unknown chars become '?'
        when available and are dropped otherwise."""
        text = text.replace("\r\n", "\n").replace("\r", "\n")
        fallback = self._id_of.get("?")
        ids = []
        for ch in text:
            tid = self._id_of.get(ch, fallback)
            if tid is not None:
                ids.append(tid)
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        chars = []
        for pos, tid in enumerate(ids):
            if tid == self.eos_id:
                continue
            ch = self._char_of.get(int(tid))
            if ch is None:
                raise ValueError(f"invalid token id {tid} at position {pos}")
            chars.append(ch)
        return "".join(chars)


@dataclass(frozen=True)
class RefConfig:
    charset: str = DEFAULT_CHARSET
    n_layer: int = 2
    d_model: int = 64
    n_head: int = 4
    max_len: int = 256
    dtype: str = "float32"
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_head:
            raise ValueError("d_model must be divisible by n_head")
        if len(self.charset) + 1 > 128:
            raise ValueError("reference vocabulary is capped at 128")

    @property
    def vocab_size(self) -> int:
        return len(self.charset) + 1

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_head


def param_names(n_layer: int) -> list[str]:
    """Parameter declaration order; also the checkpoint dump order."""
    names = ["wte", "wpe"]
    for i in range(n_layer):
        names += [
            f"layers.{i}.attn.q",
            f"layers.{i}.attn.k",
            f"layers.{i}.attn.v",
            f"layers.{i}.attn.o",
            f"layers.{i}.mlp.fc1",
            f"layers.{i}.mlp.fc2",
        ]
    names.append("lm_head")
    return names


def param_shapes(config: RefConfig) -> dict[str, tuple[int, ...]]:
    d, v = config.d_model, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"wte": (v, d), "wpe": (config.max_len, d)}
    for i in range(config.n_layer):
        for proj in ("q", "k", "v", "o"):
            shapes[f"layers.{i}.attn.{proj}"] = (d, d)
        shapes[f"layers.{i}.mlp.fc1"] = (4 * d, d)
        shapes[f"layers.{i}.mlp.fc2"] = (d, 4 * d)
    shapes["lm_head"] = (v, d)
    return shapes


def init_params(config: RefConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Gaussian init; o-projection, second MLP matrix and the output head start
    at zero so a fresh model is residual-quiet and exactly uniform over tokens."""
    rng = np.random.default_rng(seed)
    dt = np.dtype(config.dtype)
    params = {}
    for name, shape in param_shapes(config).items():
        zero = name == "lm_head" or name.endswith(".attn.o") or name.endswith(".mlp.fc2")
        if zero:
            params[name] = np.zeros(shape, dtype=dt)
        else:
            params[name] = rng.normal(0.0, config.init_std, shape).astype(dt)
    return params


# -- forward / backward core ---------------------------------------------------


def _rmsnorm(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows scaled to unit RMS; returns (normed, per-row inverse rms)."""
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1) + _RMS_EPS)
    return x * inv[..., None], inv


def _rmsnorm_bwd(dy: np.ndarray, x: np.ndarray, inv: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    dot = (x * dy).sum(axis=-1)
    return inv[..., None] * (dy - (inv * inv * dot / n)[..., None] * x)


def _adapter_view(adapter: Any) -> tuple[dict, float, float]:
    if adapter is None:
        return {}, 0.0, 0.0
    return adapter.factors, float(adapter.scaling), float(adapter.spec.dropout)


class _RefCore:
    """Forward/backward over one parameter set. Shared by the frozen backend
    wrapper and the pretraining loop (which owns writable parameters)."""

    def __init__(self, config: RefConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    # forward -------------------------------------------------------------

    def forward(
        self,
        ids: Sequence[int],
        adapter: Any = None,
        dropout_rng: Optional[np.random.Generator] = None,
    ) -> tuple[np.ndarray, dict]:
        """Full-sequence forward. Returns (logits (T, V), cache for backward).

        ``dropout_rng`` switches the adapter branch into training mode; eval
        calls leave it None and are fully deterministic.
        """
        cfg, p = self.config, self.params
        T = len(ids)
        if T > cfg.max_len:
            raise ValueError(f"sequence length {T} exceeds max length {cfg.max_len}")
        ids_arr = np.asarray(ids, dtype=np.intp)
        if T and (ids_arr.min() < 0 or ids_arr.max() >= cfg.vocab_size):
            raise ValueError("token id out of range")
        factors, scaling, dropout = _adapter_view(adapter)
        train = dropout_rng is not None and dropout > 0.0

        x = p["wte"][ids_arr] + p["wpe"][:T]
        cache: dict[str, Any] = {"ids": ids_arr, "T": T, "scaling": scaling, "layers": []}
        H, hd = cfg.n_head, cfg.head_dim
        inv_sqrt = 1.0 / math.sqrt(hd)
        causal = np.triu(np.full((T, T), -np.inf, dtype=x.dtype), k=1)

        def adapted(xin: np.ndarray, name: str):
            out = xin @ p[name].T
            fac = factors.get(name)
            if fac is None:
                return out, (xin, None, None, None, None)
            A, B = fac
            mask = None
            branch_in = xin
            if train:
                keep = (dropout_rng.random(xin.shape) >= dropout).astype(xin.dtype)
                mask = keep / np.asarray(1.0 - dropout, dtype=xin.dtype)
                branch_in = xin * mask
            h = branch_in @ A.T
            out = out + (h @ B.T) * np.asarray(scaling, dtype=xin.dtype)
            return out, (xin, branch_in, h, mask, (A, B))

        for li in range(cfg.n_layer):
            lc: dict[str, Any] = {"attn_in": x}
            a, a_inv = _rmsnorm(x)
            lc["a_norm"], lc["a_inv"] = a, a_inv
            q, lc["q_cache"] = adapted(a, f"layers.{li}.attn.q")
            k, lc["k_cache"] = adapted(a, f"layers.{li}.attn.k")
            v, lc["v_cache"] = adapted(a, f"layers.{li}.attn.v")
            # head-major (H, T, hd) layout so the contractions hit BLAS
            qh = q.reshape(T, H, hd).transpose(1, 0, 2)
            kh = k.reshape(T, H, hd).transpose(1, 0, 2)
            vh = v.reshape(T, H, hd).transpose(1, 0, 2)
            scores = (qh @ kh.transpose(0, 2, 1)) * inv_sqrt + causal
            scores -= scores.max(axis=2, keepdims=True)
            probs = np.exp(scores)
            probs /= probs.sum(axis=2, keepdims=True)
            attn = (probs @ vh).transpose(1, 0, 2).reshape(T, cfg.d_model)
            lc["qh"], lc["kh"], lc["vh"], lc["probs"], lc["attn"] = qh, kh, vh, probs, attn
            o, lc["o_cache"] = adapted(attn, f"layers.{li}.attn.o")
            x = x + o

            lc["mlp_in"] = x
            b, b_inv = _rmsnorm(x)
            lc["b_norm"], lc["b_inv"] = b, b_inv
            h_pre = b @ p[f"layers.{li}.mlp.fc1"].T
            h_act = np.square(np.maximum(h_pre, 0.0))
            lc["h_pre"], lc["h_act"] = h_pre, h_act
            x = x + h_act @ p[f"layers.{li}.mlp.fc2"].T
            cache["layers"].append(lc)

        cache["final_in"] = x
        xf, f_inv = _rmsnorm(x)
        cache["final_norm"], cache["final_inv"] = xf, f_inv
        logits = xf @ p["lm_head"].T
        return logits, cache

    # backward --------------------------------------------------------------

    def backward(self, cache: dict, dlogits: np.ndarray, wrt: str) -> dict:
        """Backpropagate dL/dlogits.

        wrt="base": gradients for every base tensor (no adapter may be active).
        wrt="adapter": gradients {module: (dA, dB)} for adapted modules only.
        """
        if wrt not in ("base", "adapter"):
            raise ValueError(f"wrt must be 'base' or 'adapter', got {wrt!r}")
        cfg, p = self.config, self.params
        T = cache["T"]
        scaling = cache["scaling"]
        H, hd = cfg.n_head, cfg.head_dim
        inv_sqrt = 1.0 / math.sqrt(hd)
        base: dict[str, np.ndarray] = {}
        adapter_grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        dlogits = dlogits.astype(p["lm_head"].dtype, copy=False)

        def adapted_bwd(dout: np.ndarray, name: str, lin_cache) -> np.ndarray:
            xin, branch_in, h, mask, fac = lin_cache
            dx = dout @ p[name]
            if wrt == "base":
                base[name] = dout.T @ xin
            if fac is not None:
                A, B = fac
                dh = scaling * (dout @ B)
                if wrt == "adapter":
                    adapter_grads[name] = (dh.T @ branch_in, scaling * (dout.T @ h))
                dbranch = dh @ A
                if mask is not None:
                    dbranch = dbranch * mask
                dx = dx + dbranch
            return dx

        dxf = dlogits @ p["lm_head"]
        if wrt == "base":
            base["lm_head"] = dlogits.T @ cache["final_norm"]
        dx = _rmsnorm_bwd(dxf, cache["final_in"], cache["final_inv"])

        for li in range(cfg.n_layer - 1, -1, -1):
            lc = cache["layers"][li]
            # MLP block
            dh_act = dx @ p[f"layers.{li}.mlp.fc2"]
            if wrt == "base":
                base[f"layers.{li}.mlp.fc2"] = dx.T @ lc["h_act"]
            dh_pre = dh_act * (2.0 * np.maximum(lc["h_pre"], 0.0))
            db = dh_pre @ p[f"layers.{li}.mlp.fc1"]
            if wrt == "base":
                base[f"layers.{li}.mlp.fc1"] = dh_pre.T @ lc["b_norm"]
            dx = dx + _rmsnorm_bwd(db, lc["mlp_in"], lc["b_inv"])

            # attention block
            dattn = adapted_bwd(dx, f"layers.{li}.attn.o", lc["o_cache"])
            dattn_h = dattn.reshape(T, H, hd).transpose(1, 0, 2)
            probs, vh, qh, kh = lc["probs"], lc["vh"], lc["qh"], lc["kh"]
            dprobs = dattn_h @ vh.transpose(0, 2, 1)
            dvh = probs.transpose(0, 2, 1) @ dattn_h
            dscores = probs * (dprobs - (probs * dprobs).sum(axis=2, keepdims=True))
            dqh = (dscores @ kh) * inv_sqrt
            dkh = (dscores.transpose(0, 2, 1) @ qh) * inv_sqrt

            def to_flat(g):
                return g.transpose(1, 0, 2).reshape(T, -1)

            da = adapted_bwd(to_flat(dqh), f"layers.{li}.attn.q", lc["q_cache"])
            da += adapted_bwd(to_flat(dkh), f"layers.{li}.attn.k", lc["k_cache"])
            da += adapted_bwd(to_flat(dvh), f"layers.{li}.attn.v", lc["v_cache"])
            dx = dx + _rmsnorm_bwd(da, lc["attn_in"], lc["a_inv"])

        if wrt == "base":
            ids_arr = cache["ids"]
            dwte = np.zeros_like(p["wte"])
            np.add.at(dwte, ids_arr, dx)
            base["wte"] = dwte
            dwpe = np.zeros_like(p["wpe"])
            dwpe[:T] = dx
            base["wpe"] = dwpe
            return base
        return adapter_grads


def _log_softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64, copy=False)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def _nll_and_dlogits(
    logits: np.ndarray, ids: Sequence[int], loss_mask: Sequence[int]
) -> tuple[float, np.ndarray]:
    """Mean NLL over mask-1 targets plus dL/dlogits (float64)."""
    logp = _log_softmax64(logits)
    targets = [t for t, m in enumerate(loss_mask) if m]
    loss = -sum(logp[t - 1, ids[t]] for t in targets) / len(targets)
    dlogits = np.zeros_like(logp)
    probs = np.exp(logp)
    w = 1.0 / len(targets)
    for t in targets:
        dlogits[t - 1] += probs[t - 1] * w
        dlogits[t - 1, ids[t]] -= w
    return float(loss), dlogits


def _entropy_and_dlogits(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-position Shannon entropy of next-token distributions."""
    logp = _log_softmax64(logits)
    probs = np.exp(logp)
    # p log p -> 0 (not nan) where p underflowed to exactly zero
    plogp = np.where(probs > 0.0, probs * logp, 0.0)
    row_h = -plogp.sum(axis=-1)
    dlogits = -(plogp + probs * row_h[:, None]) / logits.shape[0]
    return float(row_h.mean()), dlogits


class ReferenceBackend:
    """Frozen-parameter reference model implementing the backend interface."""

    name = "reference"

    def __init__(self, config: RefConfig, params: dict[str, np.ndarray]):
        shapes = param_shapes(config)
        missing = set(shapes) - set(params)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        frozen = {}
        for key, shape in shapes.items():
            arr = np.array(params[key], dtype=np.dtype(config.dtype), order="C")
            if arr.shape != shape:
                raise ValueError(f"parameter {key} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            frozen[key] = arr
        self.config = config
        self.params = frozen
        self.tokenizer = CharTokenizer(config.charset)
        self._core = _RefCore(config, frozen)

    @classmethod
    def fresh(cls, config: Optional[RefConfig] = None, seed: int = 0) -> "ReferenceBackend":
        config = config or RefConfig()
        return cls(config, init_params(config, seed))

    # -- metadata ---------------------------------------------------------

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def max_len(self) -> int:
        return self.config.max_len

    @property
    def eos_id(self) -> int:
        return self.tokenizer.eos_id

    def adaptable_modules(self) -> list[AdaptableModuleInfo]:
        d = self.config.d_model
        return [
            AdaptableModuleInfo(f"layers.{i}.attn.{proj}", d, d, self.config.dtype)
            for i in range(self.config.n_layer)
            for proj in ("q", "k", "v", "o")
        ]

    def checksum(self) -> str:
        """Digest of all base parameters in declaration order."""
        h = hashlib.sha256()
        for name in param_names(self.config.n_layer):
            h.update(self.params[name].tobytes())
        return h.hexdigest()

    def with_params(self, params: dict[str, np.ndarray]) -> "ReferenceBackend":
        """Same architecture over a different parameter set (merge snapshots)."""
        return ReferenceBackend(self.config, params)

    # -- token ops --------------------------------------------------------

    def tokenize(self, text: str) -> list[int]:
        return self.tokenizer.encode(text)

    def detokenize(self, tokens: Sequence[int]) -> str:
        return self.tokenizer.decode(tokens)

    # -- forward / losses ---------------------------------------------------

    def forward_logits(self, tokens: Sequence[int], adapter: Any = None) -> np.ndarray:
        logits, _ = self._core.forward(tokens, adapter=adapter)
        return logits

    def masked_nll(self, tokens: Sequence[int], loss_mask: Sequence[int], adapter: Any = None) -> float:
        check_loss_mask(tokens, loss_mask)
        logits, _ = self._core.forward(tokens, adapter=adapter)
        loss, _ = _nll_and_dlogits(logits, list(tokens), loss_mask)
        return loss

    def masked_nll_with_grads(
        self,
        tokens: Sequence[int],
        loss_mask: Sequence[int],
        adapter: Any,
        dropout_rng: Optional[np.random.Generator] = None,
    ) -> tuple[float, dict[str, tuple[np.ndarray, np.ndarray]]]:
        """Training-mode loss and adapter-factor gradients."""
        check_loss_mask(tokens, loss_mask)
        logits, cache = self._core.forward(tokens, adapter=adapter, dropout_rng=dropout_rng)
        loss, dlogits = _nll_and_dlogits(logits, list(tokens), loss_mask)
        return loss, self._core.backward(cache, dlogits, wrt="adapter")

    def mean_entropy(self, tokens: Sequence[int], adapter: Any = None) -> float:
        logits, _ = self._core.forward(tokens, adapter=adapter)
        value, _ = _entropy_and_dlogits(logits)
        return value

    def entropy_with_grads(
        self,
        tokens: Sequence[int],
        adapter: Any,
        dropout_rng: Optional[np.random.Generator] = None,
    ) -> tuple[float, dict[str, tuple[np.ndarray, np.ndarray]]]:
        logits, cache = self._core.forward(tokens, adapter=adapter, dropout_rng=dropout_rng)
        value, dlogits = _entropy_and_dlogits(logits)
        return value, self._core.backward(cache, dlogits, wrt="adapter")

    # -- generation ---------------------------------------------------------

    def generate(
        self,
        prompt: Sequence[int],
        max_new_tokens: int,
        temperature: float = 0.0,
        adapter: Any = None,
        seed: Optional[int] = None,
    ) -> list[int]:
        if max_new_tokens < 0:
            raise ValueError("max_new_tokens must be >= 0")
        if temperature < 0:
            raise ValueError("temperature must be >= 0")
        if len(prompt) > self.max_len:
            raise ValueError(f"prompt length {len(prompt)} exceeds max length {self.max_len}")
        if max_new_tokens == 0:
            return []
        if not len(prompt):
            raise ValueError("cannot generate from an empty prompt")

        rng = None
        if temperature > 0:
            digest = hashlib.blake2b(
                (str(seed) + ":" + ",".join(map(str, prompt))).encode(), digest_size=16
            ).digest()
            rng = np.random.default_rng(np.frombuffer(digest, dtype=np.uint32))

        state = _GenState(self.config, self.params, adapter)
        logits = None
        for pos, tok in enumerate(prompt):
            logits = state.step(int(tok), pos)
        out: list[int] = []
        for _ in range(max_new_tokens):
            if temperature == 0:
                tok = int(np.argmax(logits))
            else:
                z = logits.astype(np.float64) / temperature
                z -= z.max()
                probs = np.exp(z)
                probs /= probs.sum()
                tok = int(rng.choice(self.vocab_size, p=probs))
            if tok == self.eos_id:
                break
            out.append(tok)
            pos = len(prompt) + len(out) - 1
            if pos + 1 >= self.max_len:
                break
            logits = state.step(tok, pos)
        return out


class _GenState:
    """Incremental decoding state: per-layer key/value caches, one row per step."""

    def __init__(self, config: RefConfig, params: dict[str, np.ndarray], adapter: Any):
        self.cfg = config
        self.p = params
        self.factors, self.scaling, _ = _adapter_view(adapter)
        dt = np.dtype(config.dtype)
        self.k = [np.empty((config.max_len, config.d_model), dtype=dt) for _ in range(config.n_layer)]
        self.v = [np.empty((config.max_len, config.d_model), dtype=dt) for _ in range(config.n_layer)]

    def _proj(self, x: np.ndarray, name: str) -> np.ndarray:
        out = x @ self.p[name].T
        fac = self.factors.get(name)
        if fac is not None:
            A, B = fac
            out = out + ((x @ A.T) @ B.T) * np.asarray(self.scaling, dtype=x.dtype)
        return out

    def step(self, tok: int, pos: int) -> np.ndarray:
        cfg, p = self.cfg, self.p
        H, hd = cfg.n_head, cfg.head_dim
        x = p["wte"][tok] + p["wpe"][pos]
        cur = pos + 1
        for li in range(cfg.n_layer):
            a, _ = _rmsnorm(x)
            q = self._proj(a, f"layers.{li}.attn.q")
            self.k[li][pos] = self._proj(a, f"layers.{li}.attn.k")
            self.v[li][pos] = self._proj(a, f"layers.{li}.attn.v")
            qh = q.reshape(H, hd)
            kh = self.k[li][:cur].reshape(cur, H, hd)
            vh = self.v[li][:cur].reshape(cur, H, hd)
            scores = np.einsum("hd,jhd->hj", qh, kh) / math.sqrt(hd)
            scores -= scores.max(axis=1, keepdims=True)
            probs = np.exp(scores)
            probs /= probs.sum(axis=1, keepdims=True)
            attn = np.einsum("hj,jhd->hd", probs, vh).reshape(cfg.d_model)
            x = x + self._proj(attn, f"layers.{li}.attn.o")
            b, _ = _rmsnorm(x)
            h = np.square(np.maximum(b @ p[f"layers.{li}.mlp.fc1"].T, 0.0))
            x = x + h @ p[f"layers.{li}.mlp.fc2"].T
        xf, _ = _rmsnorm(x)
        return xf @ p["lm_head"].T


def train_reference(
    corpus: Sequence[str],
    config: Optional[RefConfig] = None,
    *,
    steps: int = 400,
    lr: float = 1e-2,
    seed: int = 0,
    log_every: int = 0,
) -> ReferenceBackend:
    """Train a reference model from scratch on a list of text documents.

    Documents are cycled in shuffled order, one per step, each terminated by
    the end-of-sequence token; the loss covers every position after the first.
    Returns a frozen backend ready to wrap in a session.
    """
    from ..optim import AdamW

    config = config or RefConfig()
    if not corpus:
        raise ValueError("corpus is empty")
    params = init_params(config, seed)
    core = _RefCore(config, params)
    opt = AdamW(params, lr=lr)
    tok = CharTokenizer(config.charset)
    order = list(range(len(corpus)))
    np.random.default_rng(seed).shuffle(order)

    for step in range(steps):
        doc = corpus[order[step % len(order)]]
        ids = tok.encode(doc)[: config.max_len - 1] + [tok.eos_id]
        if len(ids) < 2:
            continue
        mask = [0] + [1] * (len(ids) - 1)
        logits, cache = core.forward(ids)
        loss, dlogits = _nll_and_dlogits(logits, ids, mask)
        grads = core.backward(cache, dlogits, wrt="base")
        opt.step(grads)
        if log_every and (step + 1) % log_every == 0:
            print(f"step {step + 1:>5}/{steps}  loss {loss:.4f}")

    return ReferenceBackend(config, params)
