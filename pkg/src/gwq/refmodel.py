"""Tiny bias-free decoder-only transformer with hand-written forward/backward.

This is the toolkit's self-contained stand-in for a large language model:
big enough to have real per-layer structure (pre-norm blocks, multi-head
causal attention, GELU MLP, untied output head), small enough that every
gradient can be verified against central finite differences in seconds.

Architecture notes, fixed deliberately:

* no bias anywhere: projections are pure matrices, norms are RMS norms
  with a gain vector only, so every quantizable parameter is a 2-D matrix
  and gradient magnitudes reflect weight importance directly;
* learned positional embeddings, separate (untied) output head;
* weights are [out_features, in_features]; a linear layer computes
  ``y = x @ W.T`` so each output channel is one row of W (the channel
  axis the quantizer groups along the input-feature axis);
* softmax subtracts the row max before exponentiation;
* forward/backward run in the dtype of the supplied weights (float32 in
  normal use; tests may pass a float64 shadow for finite differencing).

The numeric core works on plain ``{name: ndarray}`` dicts; the public
entry points accept/return the bundle types from :mod:`gwq.container`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .container import GradientBundle, ModelBundle
from .errors import AlignmentError, InputError, TrainingError, UsageError
from .tensor import Tensor, as_array

RMS_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

CROSS_ENTROPY = "cross_entropy_next_token"
MSE = "mse_on_logits"
DATASET_TOKENS = "dataset_tokens"
GREEDY_TOKENS = "model_greedy_tokens"


@dataclass(frozen=True)
class TinyTransformerConfig:
    vocab_size: int
    d_model: int
    n_heads: int
    n_layers: int
    max_seq_len: int
    use_bias: bool = False
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise UsageError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.use_bias:
            raise UsageError("bias must stay disabled; gradients on biased layers misrank weights")
        if min(self.vocab_size, self.d_model, self.n_heads, self.n_layers, self.max_seq_len) < 1:
            raise UsageError("all size fields must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_hidden(self) -> int:
        return self.mlp_ratio * self.d_model

    def to_metadata(self) -> str:
        return json.dumps(
            {
                "vocab_size": self.vocab_size,
                "d_model": self.d_model,
                "n_heads": self.n_heads,
                "n_layers": self.n_layers,
                "max_seq_len": self.max_seq_len,
                "use_bias": self.use_bias,
                "mlp_ratio": self.mlp_ratio,
            },
            sort_keys=True,
        )

    @classmethod
    def from_metadata(cls, text: str) -> "TinyTransformerConfig":
        try:
            return cls(**json.loads(text))
        except (TypeError, ValueError, json.JSONDecodeError) as exc:
            raise UsageError(f"bad arch metadata: {exc}") from exc


@dataclass(frozen=True)
class LossKind:
    variant: str = CROSS_ENTROPY
    label_source: str = DATASET_TOKENS

    def __post_init__(self):
        if self.variant not in (CROSS_ENTROPY, MSE):
            raise UsageError(f"unknown loss variant {self.variant!r}")
        if self.label_source not in (DATASET_TOKENS, GREEDY_TOKENS):
            raise UsageError(f"unknown label source {self.label_source!r}")


DEFAULT_LOSS = LossKind()


# ---------------------------------------------------------------------------
# weight naming / initialisation
# ---------------------------------------------------------------------------

def weight_names(config: TinyTransformerConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for i in range(config.n_layers):
        p = f"layers.{i}"
        names += [f"{p}.attn.norm", f"{p}.attn.wq", f"{p}.attn.wk", f"{p}.attn.wv",
                  f"{p}.attn.wo", f"{p}.mlp.norm", f"{p}.mlp.w1", f"{p}.mlp.w2"]
    names += ["final_norm", "lm_head"]
    return names


def init_params(config: TinyTransformerConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    std = 0.02
    res_std = std / math.sqrt(2.0 * config.n_layers)
    d, h = config.d_model, config.d_hidden

    def normal(shape, sigma):
        return rng.normal(0.0, sigma, size=shape).astype(dtype)

    params: dict[str, np.ndarray] = {
        "tok_emb": normal((config.vocab_size, d), std),
        "pos_emb": normal((config.max_seq_len, d), std),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}"
        params[f"{p}.attn.norm"] = np.ones(d, dtype=dtype)
        params[f"{p}.attn.wq"] = normal((d, d), std)
        params[f"{p}.attn.wk"] = normal((d, d), std)
        params[f"{p}.attn.wv"] = normal((d, d), std)
        params[f"{p}.attn.wo"] = normal((d, d), res_std)
        params[f"{p}.mlp.norm"] = np.ones(d, dtype=dtype)
        params[f"{p}.mlp.w1"] = normal((h, d), std)
        params[f"{p}.mlp.w2"] = normal((d, h), res_std)
    params["final_norm"] = np.ones(d, dtype=dtype)
    params["lm_head"] = normal((config.vocab_size, d), std)
    return params


def params_to_bundle(config: TinyTransformerConfig, params: dict[str, np.ndarray],
                     metadata: dict[str, str] | None = None) -> ModelBundle:
    bundle = ModelBundle(metadata={"arch": config.to_metadata(), **(metadata or {})})
    for name in weight_names(config):
        bundle.add(Tensor(name, np.asarray(params[name], dtype=np.float32)))
    return bundle


def config_from_bundle(bundle: ModelBundle) -> TinyTransformerConfig:
    if "arch" not in bundle.metadata:
        raise UsageError("bundle has no 'arch' metadata; not a reference-model checkpoint")
    return TinyTransformerConfig.from_metadata(bundle.metadata["arch"])


def init_weights(config: TinyTransformerConfig, seed: int) -> ModelBundle:
    return params_to_bundle(config, init_params(config, seed), {"seed": str(seed)})


def _bundle_params(weights: ModelBundle) -> tuple[TinyTransformerConfig, dict[str, np.ndarray]]:
    config = config_from_bundle(weights)
    return config, {name: weights[name].data for name in weights.names()}


# ---------------------------------------------------------------------------
# numeric pieces
# ---------------------------------------------------------------------------

def _rmsnorm_fwd(x, gain):
    r = np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + np.asarray(RMS_EPS, x.dtype))
    xh = x / r
    return xh * gain, (xh, r)


def _rmsnorm_bwd(dy, gain, cache):
    xh, r = cache
    dgain = np.sum(dy * xh, axis=tuple(range(dy.ndim - 1)))
    dxh = dy * gain
    dx = (dxh - xh * np.mean(dxh * xh, axis=-1, keepdims=True)) / r
    return dx, dgain


def _softmax(x):
    z = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return z / np.sum(z, axis=-1, keepdims=True)


def _gelu_fwd(u):
    t = np.tanh(_GELU_C * (u + _GELU_A * u ** 3))
    return 0.5 * u * (1.0 + t), t


def _gelu_bwd(du_out, u, t):
    inner = _GELU_C * (1.0 + 3.0 * _GELU_A * u ** 2)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * inner)


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _validate_tokens(config: TinyTransformerConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if tokens.ndim != 2:
        raise InputError(f"tokens must be a sequence or batch, got ndim {tokens.ndim}")
    if tokens.shape[1] > config.max_seq_len:
        raise InputError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if tokens.shape[1] < 1:
        raise InputError("empty token sequence")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise InputError(
            f"token id out of range [0, {config.vocab_size}): {int(tokens.min())}..{int(tokens.max())}"
        )
    return tokens


def forward_core(config: TinyTransformerConfig, params: dict[str, np.ndarray],
                 tokens: np.ndarray, need_cache: bool = False):
    """Causal forward pass over a [batch, seq] token array.

    Returns (logits [batch, seq, vocab], cache); the cache holds every
    intermediate needed by :func:`backward_core` and is None when not
    requested.
    """
    tokens = _validate_tokens(config, tokens)
    b, t = tokens.shape
    dh = config.head_dim
    scale = 1.0 / math.sqrt(dh)
    x = params["tok_emb"][tokens] + params["pos_emb"][:t]
    neg = np.asarray(-np.inf, x.dtype)
    causal = np.triu(np.full((t, t), neg), k=1)

    cache = {"tokens": tokens, "layers": []} if need_cache else None
    for i in range(config.n_layers):
        p = f"layers.{i}"
        lc = {}
        a, lc["norm1"] = _rmsnorm_fwd(x, params[f"{p}.attn.norm"])
        q = _split_heads(a @ params[f"{p}.attn.wq"].T, config.n_heads)
        k = _split_heads(a @ params[f"{p}.attn.wk"].T, config.n_heads)
        v = _split_heads(a @ params[f"{p}.attn.wv"].T, config.n_heads)
        scores = q @ k.transpose(0, 1, 3, 2) * np.asarray(scale, x.dtype) + causal
        probs = _softmax(scores)
        o = _merge_heads(probs @ v)
        att = o @ params[f"{p}.attn.wo"].T
        x_mid = x + att

        a2, lc["norm2"] = _rmsnorm_fwd(x_mid, params[f"{p}.mlp.norm"])
        u = a2 @ params[f"{p}.mlp.w1"].T
        gu, gelu_t = _gelu_fwd(u)
        x_out = x_mid + gu @ params[f"{p}.mlp.w2"].T

        if need_cache:
            lc.update(a=a, q=q, k=k, v=v, probs=probs, o=o, a2=a2, u=u,
                      gu=gu, gelu_t=gelu_t)
            cache["layers"].append(lc)
        x = x_out

    xf, final_cache = _rmsnorm_fwd(x, params["final_norm"])
    logits = xf @ params["lm_head"].T
    if need_cache:
        cache["final_norm"] = final_cache
        cache["xf"] = xf
    return logits, cache


def backward_core(config: TinyTransformerConfig, params: dict[str, np.ndarray],
                  cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Backpropagate d(loss)/d(logits) to every weight tensor.

    Pure with respect to ``params``; returns gradients in the params dtype.
    """
    dh = config.head_dim
    scale = 1.0 / math.sqrt(dh)
    grads = {name: np.zeros_like(arr) for name, arr in params.items()}

    def linear_bwd(dy, x, w_name):
        dy2 = dy.reshape(-1, dy.shape[-1])
        x2 = x.reshape(-1, x.shape[-1])
        grads[w_name] += dy2.T @ x2
        return dy @ params[w_name]

    xf = cache["xf"]
    dxf = linear_bwd(dlogits, xf, "lm_head")
    dx, grads["final_norm"] = _rmsnorm_bwd(dxf, params["final_norm"], cache["final_norm"])

    for i in reversed(range(config.n_layers)):
        p = f"layers.{i}"
        lc = cache["layers"][i]

        dgu = linear_bwd(dx, lc["gu"], f"{p}.mlp.w2")
        du = _gelu_bwd(dgu, lc["u"], lc["gelu_t"])
        da2 = linear_bwd(du, lc["a2"], f"{p}.mlp.w1")
        dx_mid, grads[f"{p}.mlp.norm"] = _rmsnorm_bwd(da2, params[f"{p}.mlp.norm"], lc["norm2"])
        dx_mid = dx_mid + dx

        do = linear_bwd(dx_mid, lc["o"], f"{p}.attn.wo")
        do_h = _split_heads(do, config.n_heads)
        probs, q, k, v = lc["probs"], lc["q"], lc["k"], lc["v"]
        dprobs = do_h @ v.transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ do_h
        dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
        dq = dscores @ k * np.asarray(scale, dx.dtype)
        dk = dscores.transpose(0, 1, 3, 2) @ q * np.asarray(scale, dx.dtype)

        da = linear_bwd(_merge_heads(dq), lc["a"], f"{p}.attn.wq")
        da += linear_bwd(_merge_heads(dk), lc["a"], f"{p}.attn.wk")
        da += linear_bwd(_merge_heads(dv), lc["a"], f"{p}.attn.wv")
        dx_in, grads[f"{p}.attn.norm"] = _rmsnorm_bwd(da, params[f"{p}.attn.norm"], lc["norm1"])
        dx = dx_in + dx_mid

    tokens = cache["tokens"]
    np.add.at(grads["tok_emb"], tokens.ravel(), dx.reshape(-1, dx.shape[-1]))
    grads["pos_emb"][: tokens.shape[1]] += dx.sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _resolve_targets(logits: np.ndarray, tokens: np.ndarray, kind: LossKind) -> np.ndarray:
    """Next-token targets for logits[:, :-1]: dataset tokens or the model's own argmax."""
    if kind.label_source == DATASET_TOKENS:
        return tokens[:, 1:]
    return np.argmax(logits[:, :-1], axis=-1)


def _loss_and_dlogits(logits: np.ndarray, targets: np.ndarray, kind: LossKind,
                      want_grad: bool) -> tuple[float, np.ndarray | None]:
    b, t, vocab = logits.shape
    n_pred = b * (t - 1)
    pred = logits[:, :-1]
    rows = np.arange(n_pred)
    flat_targets = targets.reshape(-1)

    if kind.variant == CROSS_ENTROPY:
        shifted = pred - np.max(pred, axis=-1, keepdims=True)
        lse = np.log(np.sum(np.exp(shifted), axis=-1))
        logp = shifted.reshape(n_pred, vocab)[rows, flat_targets] - lse.reshape(-1)
        value = float(np.mean(-logp, dtype=np.float64))
        if not want_grad:
            return value, None
        probs = _softmax(pred).reshape(n_pred, vocab)
        probs[rows, flat_targets] -= 1.0
        dpred = probs / n_pred
    else:
        onehot = np.zeros((n_pred, vocab), dtype=logits.dtype)
        onehot[rows, flat_targets] = 1.0
        diff = pred.reshape(n_pred, vocab) - onehot
        value = float(np.mean(np.square(diff), dtype=np.float64))
        if not want_grad:
            return value, None
        dpred = 2.0 * diff / (n_pred * vocab)

    dlogits = np.zeros_like(logits)
    dlogits[:, :-1] = dpred.reshape(b, t - 1, vocab).astype(logits.dtype)
    return value, dlogits


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def forward(weights: ModelBundle, tokens) -> Tensor:
    """Logits [seq, vocab] for one token sequence."""
    config, params = _bundle_params(weights)
    arr = np.asarray(tokens)
    if arr.ndim != 1:
        raise InputError(f"forward expects one sequence, got shape {arr.shape}")
    logits, _ = forward_core(config, params, arr[None, :])
    return Tensor("logits", logits[0].astype(np.float32))


def loss(logits, targets, kind: LossKind = DEFAULT_LOSS) -> float:
    """Scalar training loss for one sequence of logits.

    ``targets`` is the token sequence aligned with the logits positions;
    predictions at position i are scored against targets[i + 1] (the last
    position predicts nothing).
    """
    arr = as_array(logits).astype(np.float64)
    tokens = np.asarray(targets, dtype=np.int64)
    if arr.ndim != 2:
        raise AlignmentError(f"logits must be [seq, vocab], got {arr.shape}")
    if tokens.ndim != 1 or tokens.shape[0] != arr.shape[0]:
        raise AlignmentError(f"targets length {tokens.shape} misaligned with logits {arr.shape}")
    if tokens.shape[0] < 2:
        raise AlignmentError("need at least 2 positions for next-token loss")
    kind_targets = _resolve_targets(arr[None], tokens[None], kind)
    value, _ = _loss_and_dlogits(arr[None], kind_targets, kind, want_grad=False)
    return value


def backward(weights: ModelBundle, tokens, kind: LossKind = DEFAULT_LOSS) -> GradientBundle:
    """Loss gradients for every weight tensor; ``weights`` is left untouched."""
    config, params = _bundle_params(weights)
    grads = gradient_arrays(config, params, np.asarray(tokens), kind)
    bundle = GradientBundle()
    for name in weight_names(config):
        bundle.tensors[name + ".grad"] = Tensor(name + ".grad", grads[name].astype(np.float32))
    return bundle


def gradient_arrays(config: TinyTransformerConfig, params: dict[str, np.ndarray],
                    tokens: np.ndarray, kind: LossKind = DEFAULT_LOSS,
                    loss_out: list | None = None) -> dict[str, np.ndarray]:
    """Dtype-generic gradient computation (the core behind :func:`backward`)."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if tokens.shape[1] < 2:
        raise InputError("need at least 2 tokens to form a next-token loss")
    logits, cache = forward_core(config, params, tokens, need_cache=True)
    targets = _resolve_targets(logits, tokens, kind)
    value, dlogits = _loss_and_dlogits(logits, targets, kind, want_grad=True)
    if loss_out is not None:
        loss_out.append(value)
    return backward_core(config, params, cache, dlogits)


def loss_value(config: TinyTransformerConfig, params: dict[str, np.ndarray],
               tokens: np.ndarray, kind: LossKind = DEFAULT_LOSS) -> float:
    """Loss without gradients, on raw params (used by shadow-dtype tests)."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    logits, _ = forward_core(config, params, tokens)
    targets = _resolve_targets(logits, tokens, kind)
    value, _ = _loss_and_dlogits(logits, targets, kind, want_grad=False)
    return value


# ---------------------------------------------------------------------------
# tokenizers and corpus handling
# ---------------------------------------------------------------------------

BYTE_VOCAB = 256


def byte_tokenize(text: str | bytes) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


class WhitespaceTokenizer:
    """Whitespace tokenizer with a frequency-ranked vocabulary capped at a size.

    Id 0 is reserved for out-of-vocabulary words.
    """

    def __init__(self, corpus: str, vocab_size: int):
        if vocab_size < 2:
            raise UsageError("whitespace tokenizer needs vocab_size >= 2")
        counts: dict[str, int] = {}
        for word in corpus.split():
            counts[word] = counts.get(word, 0) + 1
        ranked = sorted(counts, key=lambda w: (-counts[w], w))[: vocab_size - 1]
        self.vocab = {w: i + 1 for i, w in enumerate(ranked)}
        self.vocab_size = vocab_size

    def __call__(self, text: str) -> np.ndarray:
        return np.asarray([self.vocab.get(w, 0) for w in text.split()], dtype=np.int64)


def tokenize_for(weights: ModelBundle, corpus: str) -> np.ndarray:
    """Tokenize per the bundle's recorded tokenizer (byte-level by default)."""
    name = weights.metadata.get("tokenizer", "byte")
    if name == "byte":
        tokens = byte_tokenize(corpus)
    elif name == "whitespace":
        tokens = WhitespaceTokenizer(corpus, config_from_bundle(weights).vocab_size)(corpus)
    else:
        raise UsageError(f"unknown tokenizer {name!r}")
    return tokens


def corpus_windows(tokens: np.ndarray, window: int) -> list[np.ndarray]:
    """Non-overlapping evaluation windows; a trailing window shorter than 2 is dropped."""
    out = []
    for start in range(0, max(len(tokens) - 1, 0), window):
        w = tokens[start : start + window]
        if len(w) >= 2:
            out.append(np.asarray(w, dtype=np.int64))
    return out


# ---------------------------------------------------------------------------
# evaluation metrics
# ---------------------------------------------------------------------------

def _as_bundle(model) -> ModelBundle:
    if isinstance(model, ModelBundle):
        return model
    if hasattr(model, "to_bundle"):
        return model.to_bundle()
    raise UsageError(f"expected a ModelBundle or QuantizedModel, got {type(model).__name__}")


def _iter_eval_batches(config, tokens, batch_windows: int = 16):
    windows = corpus_windows(np.asarray(tokens, dtype=np.int64), config.max_seq_len)
    if not windows:
        raise InputError("corpus shorter than 2 tokens")
    by_len: dict[int, list[np.ndarray]] = {}
    for w in windows:
        by_len.setdefault(len(w), []).append(w)
    for length, group in sorted(by_len.items()):
        for i in range(0, len(group), batch_windows):
            yield np.stack(group[i : i + batch_windows])


def perplexity(model, corpus) -> float:
    """exp(mean negative log-probability) of each token given its window prefix.

    ``corpus`` may be text (tokenized per the model's tokenizer) or a
    pre-tokenized id array. Accepts a plain weights bundle or a quantized
    model (evaluated through its dequantized weights).
    """
    bundle = _as_bundle(model)
    config, params = _bundle_params(bundle)
    tokens = tokenize_for(bundle, corpus) if isinstance(corpus, (str, bytes)) else corpus
    total_nll = 0.0
    count = 0
    for batch in _iter_eval_batches(config, tokens):
        logits, _ = forward_core(config, params, batch)
        pred = logits[:, :-1].astype(np.float64)
        shifted = pred - np.max(pred, axis=-1, keepdims=True)
        lse = np.log(np.sum(np.exp(shifted), axis=-1))
        b, tm1, vocab = pred.shape
        picked = shifted.reshape(-1, vocab)[np.arange(b * tm1), batch[:, 1:].reshape(-1)]
        total_nll += float(np.sum(lse.reshape(-1) - picked, dtype=np.float64))
        count += b * tm1
    return float(np.exp(total_nll / count))


def next_token_accuracy(model, corpus) -> float:
    """Greedy next-token accuracy: drop the last position's logits, shift the
    ground truth by one, compare argmax predictions."""
    bundle = _as_bundle(model)
    config, params = _bundle_params(bundle)
    tokens = tokenize_for(bundle, corpus) if isinstance(corpus, (str, bytes)) else corpus
    hits = 0
    count = 0
    for batch in _iter_eval_batches(config, tokens):
        logits, _ = forward_core(config, params, batch)
        pred = np.argmax(logits[:, :-1], axis=-1)
        hits += int(np.sum(pred == batch[:, 1:]))
        count += pred.size
    return hits / count


def linear_input_second_moments(weights: ModelBundle, token_batches) -> dict[str, np.ndarray]:
    """Per-input-feature mean of x^2 for every 2-D projection weight.

    Used by the curvature-proxy sensitivity scorer: the diagonal curvature
    of a linear layer's squared-error objective is proportional to the
    second moment of that layer's input features.
    """
    config, params = _bundle_params(weights)
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}

    def accumulate(name, x):
        flat = x.reshape(-1, x.shape[-1]).astype(np.float64)
        sums[name] = sums.get(name, 0.0) + np.sum(np.square(flat), axis=0)
        counts[name] = counts.get(name, 0) + flat.shape[0]

    for tokens in token_batches:
        tokens = _validate_tokens(config, np.asarray(tokens))
        logits, cache = forward_core(config, params, tokens, need_cache=True)
        for i, lc in enumerate(cache["layers"]):
            p = f"layers.{i}"
            for w in ("wq", "wk", "wv"):
                accumulate(f"{p}.attn.{w}", lc["a"])
            accumulate(f"{p}.attn.wo", lc["o"])
            accumulate(f"{p}.mlp.w1", lc["a2"])
            accumulate(f"{p}.mlp.w2", lc["gu"])
        accumulate("lm_head", cache["xf"])
    return {name: (sums[name] / counts[name]).astype(np.float32) for name in sums}


# ---------------------------------------------------------------------------
# reference training
# ---------------------------------------------------------------------------

def train_reference(config: TinyTransformerConfig, corpus: str, steps: int, seed: int,
                    batch_size: int = 8, seq_len: int | None = None,
                    lr: float = 1e-3, kind: LossKind = DEFAULT_LOSS) -> ModelBundle:
    """Train a reference model with Adam; deterministic for a given seed.

    ``steps == 0`` returns the seeded initialisation unchanged. Divergence
    (non-finite loss) raises TrainingError.
    """
    tokens = byte_tokenize(corpus)
    seq_len = min(seq_len or config.max_seq_len, config.max_seq_len)
    if len(tokens) < seq_len + 1:
        raise TrainingError(f"corpus has {len(tokens)} tokens, need > {seq_len}")
    if tokens.max() >= config.vocab_size:
        raise TrainingError("corpus not tokenizable within vocab_size")

    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    moment1 = {k: np.zeros_like(p) for k, p in params.items()}
    moment2 = {k: np.zeros_like(p) for k, p in params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    final_loss = math.nan

    for step in range(steps):
        starts = rng.integers(0, len(tokens) - seq_len, size=batch_size)
        batch = np.stack([tokens[s : s + seq_len] for s in starts])
        loss_out: list[float] = []
        grads = gradient_arrays(config, params, batch, kind, loss_out=loss_out)
        final_loss = loss_out[0]
        if not math.isfinite(final_loss):
            raise TrainingError(f"loss diverged at step {step}: {final_loss}")
        # cosine decay to 10% of the base rate
        lr_t = lr * (0.55 + 0.45 * math.cos(math.pi * step / max(steps, 1)))
        c1 = 1.0 - beta1 ** (step + 1)
        c2 = 1.0 - beta2 ** (step + 1)
        for name, g in grads.items():
            moment1[name] = beta1 * moment1[name] + (1 - beta1) * g
            moment2[name] = beta2 * moment2[name] + (1 - beta2) * g * g
            step_delta = lr_t * (moment1[name] / c1) / (np.sqrt(moment2[name] / c2) + eps)
            params[name] = params[name] - step_delta.astype(np.float32)

    meta = {
        "seed": str(seed),
        "steps": str(steps),
        "final_loss": repr(final_loss),
        "tokenizer": "byte",
    }
    return params_to_bundle(config, params, meta)
