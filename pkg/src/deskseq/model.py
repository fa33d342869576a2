"""PreLayerNorm transformer encoder and seq2seq models.

Covers initialization and weight-tying rules, attention-fusion cross-attention,
and the model-surgery operations: warm-starting a seq2seq model from a trained
encoder, and extracting the encoder from a trained seq2seq model.

Parameter naming scheme (prefixes are the unit of freezing):
    embed.tok, embed.pos            shared/source embeddings (encoder side)
    enc.{i}.attn|ffn|ln1|ln2        encoder layers
    enc.final_ln                    final norm after the last PreLN block
    dec.embed.tok (tied), dec.embed.pos
    dec.{i}.self|cross|ffn|ln1|ln2|ln3
    dec.final_ln
    mlm_head.*, lm_head.*           vocabulary projections
    fusion.{i}                      per-decoder-layer mixing logits
    head.*                          task heads attached at fine-tuning time
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .params import ParameterStore

STANDARD = "standard"
FUSION = "fusion"

NEG_INF = -1e9  # additive mask value; exp() underflows to exactly 0


@dataclass
class ModelConfig:
    encoder_layers: int
    decoder_layers: int = 0
    d_model: int = 64
    d_ffn: int = 256
    heads: int = 4
    vocab_size: int = 256
    max_positions: int = 128
    cross_attention: str = STANDARD
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.decoder_layers < 0:
            raise ValueError("decoder_layers must be >= 0")
        if self.cross_attention == FUSION and self.decoder_layers < 1:
            raise ValueError("fusion cross-attention requires a decoder")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# initialization


def trunc_normal(rng, shape, std=0.02, dtype=np.float64):
    """normal(0, std) truncated at +-2 std via rejection resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


def _add_linear(store, rng, name, d_out, d_in, dtype):
    store.add(f"{name}.w", trunc_normal(rng, (d_out, d_in), dtype=dtype))
    store.add(f"{name}.b", np.zeros(d_out, dtype=dtype))


def _add_ln(store, name, d, dtype):
    store.add(f"{name}.g", np.ones(d, dtype=dtype))
    store.add(f"{name}.b", np.zeros(d, dtype=dtype))


def _add_attn(store, rng, prefix, d, dtype):
    for proj in ("wq", "wk", "wv", "wo"):
        store.add(f"{prefix}.{proj}", trunc_normal(rng, (d, d), dtype=dtype))
    for proj in ("bq", "bk", "bv", "bo"):
        store.add(f"{prefix}.{proj}", np.zeros(d, dtype=dtype))


def _add_ffn(store, rng, prefix, d, dff, dtype):
    store.add(f"{prefix}.w1", trunc_normal(rng, (dff, d), dtype=dtype))
    store.add(f"{prefix}.b1", np.zeros(dff, dtype=dtype))
    store.add(f"{prefix}.w2", trunc_normal(rng, (d, dff), dtype=dtype))
    store.add(f"{prefix}.b2", np.zeros(d, dtype=dtype))


def _add_encoder_layers(store, rng, cfg, dtype):
    for i in range(cfg.encoder_layers):
        _add_ln(store, f"enc.{i}.ln1", cfg.d_model, dtype)
        _add_attn(store, rng, f"enc.{i}.attn", cfg.d_model, dtype)
        _add_ln(store, f"enc.{i}.ln2", cfg.d_model, dtype)
        _add_ffn(store, rng, f"enc.{i}.ffn", cfg.d_model, cfg.d_ffn, dtype)
    _add_ln(store, "enc.final_ln", cfg.d_model, dtype)


def _add_decoder_layers(store, rng, cfg, dtype):
    for i in range(cfg.decoder_layers):
        _add_ln(store, f"dec.{i}.ln1", cfg.d_model, dtype)
        _add_attn(store, rng, f"dec.{i}.self", cfg.d_model, dtype)
        _add_ln(store, f"dec.{i}.ln2", cfg.d_model, dtype)
        _add_attn(store, rng, f"dec.{i}.cross", cfg.d_model, dtype)
        _add_ln(store, f"dec.{i}.ln3", cfg.d_model, dtype)
        _add_ffn(store, rng, f"dec.{i}.ffn", cfg.d_model, cfg.d_ffn, dtype)
    _add_ln(store, "dec.final_ln", cfg.d_model, dtype)
    store.add("dec.embed.pos", trunc_normal(rng, (cfg.max_positions, cfg.d_model), dtype=dtype))
    if cfg.cross_attention == FUSION:
        for i in range(cfg.decoder_layers):
            store.add(f"fusion.{i}", fusion_init_logits(cfg.encoder_layers, dtype=dtype))


def fusion_init_logits(encoder_layers, dtype=np.float64, sharpness=4.0):
    """Mixing logits favoring the final encoder state, so training starts close
    to standard cross-attention while keeping nonzero gradients for all layers."""
    logits = np.zeros(encoder_layers + 1, dtype=dtype)
    logits[-1] = sharpness
    return logits


def init_mlm_encoder(cfg, seed, dtype=np.float64):
    """From-scratch MLM encoder; the vocabulary projection is tied to the
    input embedding (one tie group), with a separate output bias."""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    store.add("embed.tok", trunc_normal(rng, (cfg.vocab_size, cfg.d_model), dtype=dtype))
    store.add("embed.pos", trunc_normal(rng, (cfg.max_positions, cfg.d_model), dtype=dtype))
    _add_encoder_layers(store, rng, cfg, dtype)
    store.tie("mlm_head.w", "embed.tok")
    store.add("mlm_head.b", np.zeros(cfg.vocab_size, dtype=dtype))
    return store


def init_seq2seq(cfg, seed, dtype=np.float64):
    """From-scratch seq2seq model; encoder embedding, decoder embedding and the
    LM head share one table (BART convention)."""
    if cfg.decoder_layers < 1:
        raise ValueError("seq2seq model requires decoder_layers >= 1")
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    store.add("embed.tok", trunc_normal(rng, (cfg.vocab_size, cfg.d_model), dtype=dtype))
    store.add("embed.pos", trunc_normal(rng, (cfg.max_positions, cfg.d_model), dtype=dtype))
    _add_encoder_layers(store, rng, cfg, dtype)
    store.tie("dec.embed.tok", "embed.tok")
    _add_decoder_layers(store, rng, cfg, dtype)
    store.tie("lm_head.w", "embed.tok")
    store.add("lm_head.b", np.zeros(cfg.vocab_size, dtype=dtype))
    return store


# ---------------------------------------------------------------------------
# forward passes


def _attention(store, prefix, x_q, x_kv, heads, mask):
    """Multi-head attention.  mask is an additive ndarray broadcastable to the
    score shape [B, H, Tq, Tk], or None."""
    b, tq, d = x_q.shape
    tk = x_kv.shape[1]
    hd = d // heads

    def proj(x, w, bias, t):
        y = ag.add(ag.matmul(x, ag.transpose(store[w])), store[bias])
        y = ag.reshape(y, (b, t, heads, hd))
        return ag.transpose(y, (0, 2, 1, 3))  # [B, H, T, hd]

    q = proj(x_q, f"{prefix}.wq", f"{prefix}.bq", tq)
    k = proj(x_kv, f"{prefix}.wk", f"{prefix}.bk", tk)
    v = proj(x_kv, f"{prefix}.wv", f"{prefix}.bv", tk)
    scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    if mask is not None:
        scores = ag.add(scores, Tensor(mask))
    attn = ag.softmax(scores, axis=-1)
    ctx = ag.matmul(attn, v)  # [B, H, Tq, hd]
    ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
    return ag.add(ag.matmul(ctx, ag.transpose(store[f"{prefix}.wo"])), store[f"{prefix}.bo"])


def _ffn(store, prefix, x):
    h = ag.gelu(ag.add(ag.matmul(x, ag.transpose(store[f"{prefix}.w1"])), store[f"{prefix}.b1"]))
    return ag.add(ag.matmul(h, ag.transpose(store[f"{prefix}.w2"])), store[f"{prefix}.b2"])


def _maybe_dropout(x, p, rng):
    return ag.dropout(x, p, rng) if (p > 0.0 and rng is not None) else x


def _check_tokens(cfg, tokens):
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ag.ShapeError(f"token batch must be 2-D, got shape {tokens.shape}")
    if tokens.shape[1] > cfg.max_positions:
        raise ValueError(
            f"sequence length {tokens.shape[1]} exceeds max_positions {cfg.max_positions}"
        )
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    return tokens


def pad_attention_mask(pad_mask):
    """Additive [B, 1, 1, T] mask from a boolean real-token mask."""
    pad_mask = np.asarray(pad_mask, dtype=bool)
    m = np.where(pad_mask, 0.0, NEG_INF)
    return m[:, None, None, :]


def causal_mask(s):
    m = np.triu(np.full((s, s), NEG_INF), k=1)
    return m[None, None, :, :]


def encoder_forward(cfg, store, tokens, pad_mask=None, train_rng=None):
    """Returns encoder_layers + 1 states: the embedding output followed by each
    layer's residual-stream output (pre final-LN)."""
    tokens = _check_tokens(cfg, tokens)
    b, t = tokens.shape
    if pad_mask is None:
        pad_mask = np.ones((b, t), dtype=bool)
    p = cfg.dropout if train_rng is not None else 0.0
    x = ag.add(ag.embedding(store["embed.tok"], tokens),
               ag.embedding(store["embed.pos"], np.arange(t)))
    x = _maybe_dropout(x, p, train_rng)
    mask = pad_attention_mask(pad_mask)
    states = [x]
    for i in range(cfg.encoder_layers):
        h = ag.layer_norm(x, store[f"enc.{i}.ln1.g"], store[f"enc.{i}.ln1.b"])
        x = ag.add(x, _maybe_dropout(_attention(store, f"enc.{i}.attn", h, h, cfg.heads, mask), p, train_rng))
        h = ag.layer_norm(x, store[f"enc.{i}.ln2.g"], store[f"enc.{i}.ln2.b"])
        x = ag.add(x, _maybe_dropout(_ffn(store, f"enc.{i}.ffn", h), p, train_rng))
        states.append(x)
    return states


def encoder_output(store, states):
    """Final LN applied to the last encoder state; the memory heads read."""
    return ag.layer_norm(states[-1], store["enc.final_ln.g"], store["enc.final_ln.b"])


def fuse_memory(states, logits):
    """Convex combination over encoder states with softmax(logits) weights."""
    if np.asarray(logits.data if isinstance(logits, Tensor) else logits).shape != (len(states),):
        got = np.asarray(logits.data if isinstance(logits, Tensor) else logits).shape
        raise ag.ShapeError(f"fusion weights shape {got} does not match {len(states)} states")
    return ag.mix(states, ag.softmax(ag.as_tensor(logits)))


def decoder_forward(cfg, store, target_in, enc_states, src_pad_mask=None, train_rng=None):
    """Causal decoder with cross-attention over encoder memory; returns logits
    [B, S, vocab]."""
    if cfg.decoder_layers < 1:
        raise ValueError("model has no decoder")
    if enc_states is None or len(enc_states) != cfg.encoder_layers + 1:
        raise ValueError(
            f"expected {cfg.encoder_layers + 1} encoder states, got "
            f"{0 if enc_states is None else len(enc_states)}"
        )
    target_in = _check_tokens(cfg, target_in)
    b, s = target_in.shape
    t_src = enc_states[0].shape[1]
    if src_pad_mask is None:
        src_pad_mask = np.ones((b, t_src), dtype=bool)
    p = cfg.dropout if train_rng is not None else 0.0

    # the final encoder state enters cross-attention through the final LN,
    # so one-hot fusion degenerates exactly to standard cross-attention
    final_mem = encoder_output(store, enc_states)
    if cfg.cross_attention == FUSION:
        fusion_states = list(enc_states[:-1]) + [final_mem]
        memories = [fuse_memory(fusion_states, store[f"fusion.{i}"])
                    for i in range(cfg.decoder_layers)]
    else:
        memories = [final_mem] * cfg.decoder_layers

    x = ag.add(ag.embedding(store["dec.embed.tok"], target_in),
               ag.embedding(store["dec.embed.pos"], np.arange(s)))
    x = _maybe_dropout(x, p, train_rng)
    self_mask = causal_mask(s)
    cross_mask = pad_attention_mask(src_pad_mask)
    for i in range(cfg.decoder_layers):
        h = ag.layer_norm(x, store[f"dec.{i}.ln1.g"], store[f"dec.{i}.ln1.b"])
        x = ag.add(x, _maybe_dropout(_attention(store, f"dec.{i}.self", h, h, cfg.heads, self_mask), p, train_rng))
        h = ag.layer_norm(x, store[f"dec.{i}.ln2.g"], store[f"dec.{i}.ln2.b"])
        x = ag.add(x, _maybe_dropout(
            _attention(store, f"dec.{i}.cross", h, memories[i], cfg.heads, cross_mask), p, train_rng))
        h = ag.layer_norm(x, store[f"dec.{i}.ln3.g"], store[f"dec.{i}.ln3.b"])
        x = ag.add(x, _maybe_dropout(_ffn(store, f"dec.{i}.ffn", h), p, train_rng))
    x = ag.layer_norm(x, store["dec.final_ln.g"], store["dec.final_ln.b"])
    return ag.add(ag.matmul(x, ag.transpose(store["lm_head.w"])), store["lm_head.b"])


def mlm_logits(store, enc_out):
    return ag.add(ag.matmul(enc_out, ag.transpose(store["mlm_head.w"])), store["mlm_head.b"])


# ---------------------------------------------------------------------------
# model surgery (Recipes 1 and 2)


def warm_start_seq2seq(donor, cfg, seed, dtype=np.float64):
    """Build a seq2seq ParameterStore whose encoder is copied from a trained
    encoder-only model.

    Decoder layers are freshly initialized from `seed`.  The decoder embedding
    is tied (shared storage) to the encoder embedding; the LM head starts from
    the embedding values but is stored separately (untied) and trainable.
    """
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    encoder_names = [n for n in donor.names()
                     if n.startswith(("embed.", "enc."))]
    expected = _encoder_param_names(cfg)
    missing = sorted(set(expected) - set(encoder_names))
    if missing:
        raise ValueError(f"donor is missing encoder parameters: {missing}")
    for name in expected:
        src = donor[name]
        want = _encoder_param_shape(cfg, name)
        if src.data.shape != want:
            raise ValueError(
                f"donor shape mismatch for {name}: {src.data.shape} vs expected {want}"
            )
        store.add(name, src.data.astype(dtype).copy())
    store.tie("dec.embed.tok", "embed.tok")
    _add_decoder_layers(store, rng, cfg, dtype)
    store.add("lm_head.w", store["embed.tok"].data.copy())
    store.add("lm_head.b", np.zeros(cfg.vocab_size, dtype=dtype))
    return store


def extract_encoder(seq2seq_store, cfg):
    """Encoder-only ParameterStore from a seq2seq model, with a fresh MLM
    projection initialized from the input embedding table and stored
    independently (untied)."""
    if cfg.encoder_layers < 1:
        raise ValueError("model has no encoder layers to extract")
    store = ParameterStore()
    for name in _encoder_param_names(cfg):
        store.add(name, seq2seq_store[name].data.copy())
    store.add("mlm_head.w", seq2seq_store["embed.tok"].data.copy())
    store.add("mlm_head.b", np.zeros(cfg.vocab_size, dtype=store["embed.tok"].data.dtype))
    return store


def _encoder_param_names(cfg):
    names = ["embed.tok", "embed.pos"]
    for i in range(cfg.encoder_layers):
        for suffix in ("ln1.g", "ln1.b", "ln2.g", "ln2.b"):
            names.append(f"enc.{i}.{suffix}")
        for proj in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"):
            names.append(f"enc.{i}.attn.{proj}")
        for suffix in ("w1", "b1", "w2", "b2"):
            names.append(f"enc.{i}.ffn.{suffix}")
    names += ["enc.final_ln.g", "enc.final_ln.b"]
    return names


def _encoder_param_shape(cfg, name):
    d, dff = cfg.d_model, cfg.d_ffn
    if name == "embed.tok":
        return (cfg.vocab_size, d)
    if name == "embed.pos":
        return (cfg.max_positions, d)
    leaf = name.split(".")[-1]
    if name.endswith((".ln1.g", ".ln1.b", ".ln2.g", ".ln2.b")) or name.startswith("enc.final_ln"):
        return (d,)
    if leaf in ("wq", "wk", "wv", "wo"):
        return (d, d)
    if leaf in ("bq", "bk", "bv", "bo"):
        return (d,)
    if leaf == "w1":
        return (dff, d)
    if leaf == "b1":
        return (dff,)
    if leaf == "w2":
        return (d, dff)
    if leaf == "b2":
        return (d,)
    raise KeyError(name)


# ---------------------------------------------------------------------------
# task heads


@dataclass
class HeadSpec:
    kind: str  # "classification" | "labeling"
    label_count: int
    hidden: list = field(default_factory=lambda: [512])

    def __post_init__(self):
        if self.kind not in ("classification", "labeling"):
            raise ValueError(f"unknown head kind: {self.kind}")


def attach_head(store, spec, d_model, seed, dtype=np.float64):
    """Add task-head parameters (MLP with gelu hidden layers) to a store copy."""
    rng = np.random.default_rng(seed)
    out = store.copy()
    d_in = d_model
    for j, width in enumerate(spec.hidden):
        _add_linear(out, rng, f"head.{j}", width, d_in, dtype)
        d_in = width
    _add_linear(out, rng, "head.out", spec.label_count, d_in, dtype)
    return out


def head_forward(store, spec, features):
    """Run the task head on selected feature rows [N, d] -> logits [N, labels]."""
    x = features
    for j in range(len(spec.hidden)):
        x = ag.gelu(ag.add(ag.matmul(x, ag.transpose(store[f"head.{j}.w"])), store[f"head.{j}.b"]))
    return ag.add(ag.matmul(x, ag.transpose(store["head.out.w"])), store["head.out.b"])


def head_features(cfg, store, spec, tokens, pad_mask=None, word_starts=None, train_rng=None):
    """Encoder states at the head's attachment positions.

    classification: the first position of each sequence.
    labeling: the first subword of each word; `word_starts` is a list of
    strictly-increasing index lists, one per batch row.
    """
    states = encoder_forward(cfg, store, tokens, pad_mask, train_rng=train_rng)
    out = encoder_output(store, states)
    if spec.kind == "classification":
        b = np.asarray(tokens).shape[0]
        return ag.gather_rows(out, np.arange(b), np.zeros(b, dtype=int))
    if word_starts is None:
        raise ValueError("labeling head requires a word-boundary map")
    bidx, pidx = [], []
    for row, starts in enumerate(word_starts):
        if list(starts) != sorted(set(starts)):
            raise ValueError(f"word boundaries must be strictly increasing, got {starts}")
        for pos in starts:
            bidx.append(row)
            pidx.append(pos)
    return ag.gather_rows(out, np.array(bidx, dtype=int), np.array(pidx, dtype=int))
