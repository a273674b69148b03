"""A small pre-norm causal transformer with hand-written backward pass.

All arithmetic runs in float64. Parameters live in a :class:`NamedTensorMap`;
linear weights are stored ``(out, in)`` and applied as ``x @ W.T``. A
:class:`LoraView` routes every targeted projection through the low-rank path
``x @ W.T + s * (x @ A.T) @ B.T`` without materialising ``W + s*B@A``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .lora import A_SUFFIX, B_SUFFIX, LoraAdapter
from .tensor_core import NamedTensorMap, NonFiniteError, SeededRng, TensorError

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class PolicyError(TensorError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    vocab_size: int = 57
    max_seq_len: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    ff_mult: int = 4

    def __post_init__(self):
        if min(self.vocab_size, self.max_seq_len, self.d_model, self.n_layers, self.n_heads, self.ff_mult) < 1:
            raise PolicyError("all PolicyConfig sizes must be positive")
        if self.d_model % self.n_heads:
            raise PolicyError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def layout(self) -> dict[str, tuple[int, ...]]:
        d, f, V = self.d_model, self.d_model * self.ff_mult, self.vocab_size
        shapes = {"tok_emb": (V, d), "pos_emb": (self.max_seq_len, d)}
        for l in range(self.n_layers):
            p = f"layers.{l}"
            shapes[f"{p}.ln1.gain"] = (d,)
            shapes[f"{p}.ln1.bias"] = (d,)
            for proj in "qkvo":
                shapes[f"{p}.attn.{proj}.weight"] = (d, d)
            shapes[f"{p}.ln2.gain"] = (d,)
            shapes[f"{p}.ln2.bias"] = (d,)
            shapes[f"{p}.mlp.up.weight"] = (f, d)
            shapes[f"{p}.mlp.down.weight"] = (d, f)
        shapes["ln_f.gain"] = (d,)
        shapes["ln_f.bias"] = (d,)
        shapes["head.weight"] = (V, d)
        return dict(sorted(shapes.items()))

    def to_dict(self) -> dict:
        return asdict(self)


class LoraView:
    """Base weights plus an attached adapter; forward uses the low-rank path."""

    def __init__(self, base: NamedTensorMap, adapter: LoraAdapter):
        adapter.validate(base)
        self.base = base
        self.adapter = adapter

    def materialize(self) -> NamedTensorMap:
        return self.adapter.materialize(self.base)


def attach_lora(base: NamedTensorMap, adapter: LoraAdapter) -> LoraView:
    return LoraView(base, adapter)


@dataclass
class ForwardTrace:
    tokens: np.ndarray
    logits: np.ndarray
    cache: dict | None = None
    squeeze: bool = False

    @property
    def batch_logits(self) -> np.ndarray:
        return self.logits[None] if self.squeeze else self.logits


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _layer_norm_back(gy, cache):
    xhat, rstd, g = cache
    gg = (gy * xhat).reshape(-1, gy.shape[-1]).sum(0)
    gb = gy.reshape(-1, gy.shape[-1]).sum(0)
    gx_hat = gy * g
    gx = rstd * (gx_hat - gx_hat.mean(-1, keepdims=True) - xhat * (gx_hat * xhat).mean(-1, keepdims=True))
    return gx, gg, gb


def _outer(gy, x):
    """Sum over all leading axes of ``gy[..., o] * x[..., i]``."""
    return gy.reshape(-1, gy.shape[-1]).T @ x.reshape(-1, x.shape[-1])


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u**3))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(gy, u, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return gy * (0.5 * (1.0 + t) + 0.5 * u * dt)


class ToyTransformer:
    """Causal policy ``pi_theta``; stateless apart from its config."""

    def __init__(self, config: PolicyConfig):
        self.config = config
        self.head_dim = config.d_model // config.n_heads

    # ------------------------------------------------------------------ params
    def init_base(self, seed: int) -> NamedTensorMap:
        rng = SeededRng(seed)
        params = {}
        for name, shape in self.config.layout().items():
            if name.endswith(".gain"):
                params[name] = np.ones(shape)
            elif name.endswith(".bias"):
                params[name] = np.zeros(shape)
            elif name.endswith("_emb"):
                params[name] = rng.normal(0.0, 1.0, size=shape)
            else:
                params[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[1]), size=shape)
        return NamedTensorMap(params)

    def check_params(self, params: NamedTensorMap) -> None:
        layout = self.config.layout()
        if set(params) != set(layout):
            raise PolicyError(f"parameter names differ from layout: {sorted(set(params) ^ set(layout))}")
        for n, shape in layout.items():
            if params[n].shape != shape:
                raise PolicyError(f"{n}: shape {params[n].shape} != {shape}")

    # ----------------------------------------------------------------- forward
    def forward(self, params, tokens, cache: bool = False) -> ForwardTrace:
        """Logits for every position of ``tokens`` (shape ``(T,)`` or ``(B, T)``)."""
        if isinstance(params, LoraView):
            W, lora = params.base, params.adapter
        else:
            W, lora = params, None
        toks = np.asarray(tokens, dtype=np.int64)
        squeeze = toks.ndim == 1
        if squeeze:
            toks = toks[None]
        B, T = toks.shape
        cfg = self.config
        if T < 1:
            raise PolicyError("empty input")
        if T > cfg.max_seq_len:
            raise PolicyError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
        if toks.min() < 0 or toks.max() >= cfg.vocab_size:
            raise PolicyError(f"token id out of range [0, {cfg.vocab_size})")

        store = {} if cache else None

        def linear(x, name):
            y = x @ W[name].T
            if lora is not None and name in lora.pairs:
                A, Bm = lora.pairs[name]
                xa = x @ A.T
                y = y + lora.scale * (xa @ Bm.T)
                if store is not None:
                    store[name + ":xa"] = xa
            if store is not None:
                store[name + ":x"] = x
            return y

        H, dh = cfg.n_heads, self.head_dim
        h = W["tok_emb"][toks] + W["pos_emb"][:T]
        if lora is not None and "tok_emb" in lora.pairs:
            A, Bm = lora.pairs["tok_emb"]
            bx = Bm[toks]
            h = h + lora.scale * (bx @ A)
            if store is not None:
                store["tok_emb:bx"] = bx
        mask = np.triu(np.ones((T, T), dtype=bool), k=1)
        for l in range(cfg.n_layers):
            p = f"layers.{l}"
            a, ln1 = _layer_norm(h, W[f"{p}.ln1.gain"], W[f"{p}.ln1.bias"])
            q = linear(a, f"{p}.attn.q.weight").reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            k = linear(a, f"{p}.attn.k.weight").reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            v = linear(a, f"{p}.attn.v.weight").reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            s = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(dh)
            s = np.where(mask, -np.inf, s)
            P = softmax(s)
            ctx = (P @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
            h = h + linear(ctx, f"{p}.attn.o.weight")
            a2, ln2 = _layer_norm(h, W[f"{p}.ln2.gain"], W[f"{p}.ln2.bias"])
            u = linear(a2, f"{p}.mlp.up.weight")
            g, t = _gelu(u)
            h = h + linear(g, f"{p}.mlp.down.weight")
            if store is not None:
                store[p] = dict(ln1=ln1, q=q, k=k, v=v, P=P, ln2=ln2, u=u, t=t)
        f, lnf = _layer_norm(h, W["ln_f.gain"], W["ln_f.bias"])
        logits = linear(f, "head.weight")
        if not np.all(np.isfinite(logits)):
            raise NonFiniteError("non-finite logits")
        if store is not None:
            store["ln_f"] = lnf
            store["_params"] = params
        return ForwardTrace(toks[0] if squeeze else toks, logits[0] if squeeze else logits, store, squeeze)

    # ---------------------------------------------------------------- backward
    def backward(self, trace: ForwardTrace, dlogits: np.ndarray, lora_only: bool | None = None) -> NamedTensorMap:
        """Gradients of ``sum(dlogits * logits)`` w.r.t. every trainable tensor.

        With an attached adapter the default is ``lora_only=True``: only the
        adapter tensors (``<target>.lora_A`` / ``.lora_B``) are returned.
        """
        if trace.cache is None:
            raise PolicyError("trace was produced without cache=True")
        store = trace.cache
        params = store["_params"]
        if isinstance(params, LoraView):
            W, lora = params.base, params.adapter
        else:
            W, lora = params, None
        if lora_only is None:
            lora_only = lora is not None
        if lora_only and lora is None:
            raise PolicyError("lora_only requested without an attached adapter")
        cfg = self.config
        H, dh = cfg.n_heads, self.head_dim
        toks = trace.tokens[None] if trace.squeeze else trace.tokens
        B, T = toks.shape
        gz = np.asarray(dlogits, dtype=np.float64)
        if trace.squeeze:
            gz = gz[None]
        if gz.shape != (B, T, cfg.vocab_size):
            raise PolicyError(f"dlogits shape {gz.shape} != {(B, T, cfg.vocab_size)}")

        grads: dict[str, np.ndarray] = {}

        def acc(name, g):
            if name in grads:
                grads[name] = grads[name] + g
            else:
                grads[name] = g

        def linear_back(gy, name):
            x = store[name + ":x"]
            gx = gy @ W[name]
            if not lora_only:
                acc(name, _outer(gy, x))
            if lora is not None and name in lora.pairs:
                A, Bm = lora.pairs[name]
                s = lora.scale
                gyB = gy @ Bm
                acc(name + B_SUFFIX, s * _outer(gy, store[name + ":xa"]))
                acc(name + A_SUFFIX, s * _outer(gyB, x))
                gx = gx + s * (gyB @ A)
            return gx

        gf = linear_back(gz, "head.weight")
        gh, gg, gb = _layer_norm_back(gf, store["ln_f"])
        if not lora_only:
            acc("ln_f.gain", gg)
            acc("ln_f.bias", gb)
        for l in reversed(range(cfg.n_layers)):
            p = f"layers.{l}"
            c = store[p]
            # MLP branch
            gg_ = linear_back(gh, f"{p}.mlp.down.weight")
            gu = _gelu_back(gg_, c["u"], c["t"])
            ga2 = linear_back(gu, f"{p}.mlp.up.weight")
            gx, g2, b2 = _layer_norm_back(ga2, c["ln2"])
            gh = gh + gx
            if not lora_only:
                acc(f"{p}.ln2.gain", g2)
                acc(f"{p}.ln2.bias", b2)
            # attention branch
            gctx = linear_back(gh, f"{p}.attn.o.weight")
            gctx = gctx.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            P, q, k, v = c["P"], c["q"], c["k"], c["v"]
            gP = gctx @ v.transpose(0, 1, 3, 2)
            gv = P.transpose(0, 1, 3, 2) @ gctx
            gs = P * (gP - np.sum(gP * P, axis=-1, keepdims=True)) / math.sqrt(dh)
            gq = gs @ k
            gk = gs.transpose(0, 1, 3, 2) @ q
            merge = lambda g: g.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)  # noqa: E731
            ga = (
                linear_back(merge(gq), f"{p}.attn.q.weight")
                + linear_back(merge(gk), f"{p}.attn.k.weight")
                + linear_back(merge(gv), f"{p}.attn.v.weight")
            )
            gx, g1, b1 = _layer_norm_back(ga, c["ln1"])
            gh = gh + gx
            if not lora_only:
                acc(f"{p}.ln1.gain", g1)
                acc(f"{p}.ln1.bias", b1)
        if lora is not None and "tok_emb" in lora.pairs:
            A, Bm = lora.pairs["tok_emb"]
            s = lora.scale
            g_b = np.zeros_like(Bm, dtype=np.float64)
            np.add.at(g_b, toks.reshape(-1), s * (gh.reshape(-1, cfg.d_model) @ A.T))
            acc("tok_emb" + B_SUFFIX, g_b)
            acc("tok_emb" + A_SUFFIX, s * _outer(store["tok_emb:bx"], gh))
        if not lora_only:
            g_tok = np.zeros_like(W["tok_emb"], dtype=np.float64)
            np.add.at(g_tok, toks.reshape(-1), gh.reshape(-1, cfg.d_model))
            acc("tok_emb", g_tok)
            g_pos = np.zeros_like(W["pos_emb"], dtype=np.float64)
            g_pos[:T] = gh.sum(0)
            acc("pos_emb", g_pos)
        return NamedTensorMap(grads)

    # ---------------------------------------------------------- log-probs
    def token_logprobs(self, params, seqs: np.ndarray, start: int) -> np.ndarray:
        """``log pi(seq[t] | seq[<t])`` for ``t >= start``; shape ``(B, T - start)``."""
        seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
        logp = log_softmax(self.forward(params, seqs).logits)
        tgt = seqs[:, start:]
        return np.take_along_axis(logp[:, start - 1 : -1], tgt[..., None], axis=-1)[..., 0]

    def sequence_logprob(self, params, prompt, continuation) -> tuple[float, list[float]]:
        prompt = list(prompt)
        continuation = list(continuation)
        if not continuation:
            raise PolicyError("empty continuation")
        if not prompt:
            raise PolicyError("empty prompt")
        per = self.token_logprobs(params, np.array([prompt + continuation]), len(prompt))[0]
        per = np.minimum(per, 0.0)
        return float(math.fsum(per)), [float(x) for x in per]

    # ---------------------------------------------------------------- sampling
    def sample_batch(
        self,
        params,
        prompts,
        max_new: int,
        temperature: float = 1.0,
        rng: SeededRng | None = None,
        greedy: bool = False,
        stop_token: int | None = None,
    ) -> list[list[int]]:
        """Lockstep sampling for equal-length prompts.

        A row stops ``one`` token after emitting ``stop_token`` (the ANSWER
        marker, followed by its label) or after ``max_new`` tokens.
        """
        if not greedy:
            if temperature <= 0:
                raise PolicyError("temperature must be > 0")
            if rng is None:
                raise PolicyError("sampling requires an rng (or greedy=True)")
        seqs = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
        B = seqs.shape[0]
        max_new = min(max_new, self.config.max_seq_len - seqs.shape[1])
        out: list[list[int]] = [[] for _ in range(B)]
        active = np.ones(B, dtype=bool)
        seen_stop = np.zeros(B, dtype=bool)
        for _ in range(max_new):
            if not active.any():
                break
            # finished rows are not re-run; their next token is a dummy 0
            rows = np.flatnonzero(active)
            logits = self.forward(params, seqs[rows]).logits[:, -1]
            if greedy:
                picked = np.argmax(logits, axis=-1)
            else:
                probs = softmax(logits / temperature)
                u = rng.random(B)[rows]
                cdf = np.cumsum(probs, axis=-1)
                picked = np.minimum((cdf < (u * cdf[:, -1])[:, None]).sum(-1), probs.shape[-1] - 1)
            nxt = np.zeros(B, dtype=np.int64)
            nxt[rows] = picked
            for i in np.flatnonzero(active):
                out[i].append(int(nxt[i]))
                if seen_stop[i]:
                    active[i] = False
                elif stop_token is not None and nxt[i] == stop_token:
                    seen_stop[i] = True
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        return out

    def sample(self, params, prompt, max_new: int, temperature: float = 1.0, rng=None, greedy=False, stop_token=None):
        return self.sample_batch(params, [list(prompt)], max_new, temperature, rng, greedy, stop_token)[0]
