"""
Small pre-layer-norm encoder-decoder transformer.

Token embeddings are shared by encoder, decoder and the output projection;
positions use learned absolute embeddings. Every sublayer has a hand-written
backward pass, so `loss_and_gradients` returns exact gradients for the tensors
marked trainable in `Parameters`.
"""
import logging
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import ShapeError
from app.models.parameters import ParameterCounts, Parameters
from app.schemas.adapter import AttentionClass
from app.schemas.model import DecodeConfig, ModelConfig
from app.services import numerics
from app.services.numerics import AttentionWeights

logger = logging.getLogger(__name__)

PAD_ID = 0
PROJECTIONS = ("q", "k", "v", "o")


class AttentionPath(NamedTuple):
    path: str
    kind: AttentionClass


def attention_paths(config: ModelConfig) -> List[AttentionPath]:
    """
    Every attention layer of the architecture, in forward order.
    """
    paths = [
        AttentionPath(f"encoder.{i}.self_attn", AttentionClass.ENCODER_SELF)
        for i in range(config.n_encoder_blocks)
    ]
    for i in range(config.n_decoder_blocks):
        paths.append(AttentionPath(f"decoder.{i}.self_attn", AttentionClass.DECODER_SELF))
        paths.append(AttentionPath(f"decoder.{i}.cross_attn", AttentionClass.DECODER_CROSS))
    return paths


def base_parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    d, ff = config.d_model, config.d_ff
    shapes: Dict[str, Tuple[int, ...]] = {
        "embed.token": (config.vocab_size, d),
        "embed.pos_source": (config.max_source_len, d),
        "embed.pos_target": (config.max_target_len, d),
    }

    def norm(prefix):
        shapes[f"{prefix}.gain"] = (d,)
        shapes[f"{prefix}.bias"] = (d,)

    def attn(prefix):
        for p in PROJECTIONS:
            shapes[f"{prefix}.{p}"] = (d, d)

    def feed_forward(prefix):
        shapes[f"{prefix}.w_in"] = (ff, d)
        shapes[f"{prefix}.w_out"] = (d, ff)

    for i in range(config.n_encoder_blocks):
        norm(f"encoder.{i}.attn_norm")
        attn(f"encoder.{i}.self_attn")
        norm(f"encoder.{i}.ff_norm")
        feed_forward(f"encoder.{i}.ff")
    norm("encoder.final_norm")
    for i in range(config.n_decoder_blocks):
        norm(f"decoder.{i}.self_norm")
        attn(f"decoder.{i}.self_attn")
        norm(f"decoder.{i}.cross_norm")
        attn(f"decoder.{i}.cross_attn")
        norm(f"decoder.{i}.ff_norm")
        feed_forward(f"decoder.{i}.ff")
    norm("decoder.final_norm")
    return shapes


def init_params(config: ModelConfig, seed: Optional[int] = None) -> Parameters:
    """
    Scaled-normal init (std = d_model ** -0.5), unit norm gains, zero biases.

    All tensors start trainable.
    """
    rng = np.random.default_rng(config.init_seed if seed is None else seed)
    std = config.d_model ** -0.5
    tensors = {}
    for name, shape in base_parameter_shapes(config).items():
        if name.endswith(".gain"):
            tensors[name] = np.ones(shape)
        elif name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(0.0, std, size=shape)
    return Parameters(config=config, tensors=tensors, trainable={k: True for k in tensors})


def base_parameter_count(config: ModelConfig) -> int:
    """
    Closed-form size of the base model.
    """
    d, ff = config.d_model, config.d_ff
    embeddings = config.vocab_size * d + (config.max_source_len + config.max_target_len) * d
    encoder_block = 4 * d * d + 2 * d * ff + 2 * (2 * d)
    decoder_block = 8 * d * d + 2 * d * ff + 3 * (2 * d)
    return (
        embeddings
        + config.n_encoder_blocks * encoder_block
        + 2 * d
        + config.n_decoder_blocks * decoder_block
        + 2 * d
    )


def count_parameters(config: ModelConfig, adapter_trainable: Optional[int] = None) -> ParameterCounts:
    """
    Closed-form totals. `adapter_trainable` is the adapter size from the adapters
    module; None means full fine-tuning (everything trainable).
    """
    total = base_parameter_count(config)
    trainable = total if adapter_trainable is None else adapter_trainable
    return ParameterCounts(total=total, trainable=trainable)


# ---------------------------------------------------------------------------
# Weight access (LoRA-aware)
# ---------------------------------------------------------------------------

def effective_weight(params: Parameters, path: str) -> np.ndarray:
    weight = params.tensors[path]
    a = params.tensors.get(f"{path}.lora_a")
    if a is None:
        return weight
    b = params.tensors[f"{path}.lora_b"]
    return weight + params.adapter.scaling * (b @ a)


def _attention_weights(params: Parameters, path: str) -> AttentionWeights:
    return AttentionWeights(
        q=effective_weight(params, f"{path}.q"),
        k=effective_weight(params, f"{path}.k"),
        v=effective_weight(params, f"{path}.v"),
        o=effective_weight(params, f"{path}.o"),
        prefix_k=params.tensors.get(f"{path}.prefix_k"),
        prefix_v=params.tensors.get(f"{path}.prefix_v"),
    )


class _GradientSink:
    """
    Collects gradients for trainable tensors, routing weight gradients into LoRA factors.
    """

    def __init__(self, params: Parameters):
        self.params = params
        self.grads: Dict[str, np.ndarray] = {}

    def add(self, name: str, grad: np.ndarray) -> None:
        if not self.params.trainable.get(name, False):
            return
        if name in self.grads:
            self.grads[name] = self.grads[name] + grad
        else:
            self.grads[name] = np.array(grad, dtype=np.float64, copy=True)

    def add_weight(self, path: str, grad: np.ndarray) -> None:
        self.add(path, grad)
        a_name, b_name = f"{path}.lora_a", f"{path}.lora_b"
        if a_name in self.params.tensors:
            scaling = self.params.adapter.scaling
            a = self.params.tensors[a_name]
            b = self.params.tensors[b_name]
            self.add(b_name, scaling * grad @ a.T)
            self.add(a_name, scaling * b.T @ grad)

    def add_attention(self, path: str, grads: Dict[str, np.ndarray]) -> None:
        for p in PROJECTIONS:
            self.add_weight(f"{path}.{p}", grads[p])
        if "prefix_k" in grads:
            self.add(f"{path}.prefix_k", grads["prefix_k"])
            self.add(f"{path}.prefix_v", grads["prefix_v"])


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def _as_ids(ids, max_len: int, vocab_size: int, what: str) -> np.ndarray:
    array = np.asarray(ids, dtype=np.int64)
    if array.ndim == 1:
        array = array[None, :]
    if array.ndim != 2:
        raise ShapeError(f"{what} ids must be batch x time, got shape {array.shape}")
    if array.shape[1] > max_len:
        raise ShapeError(f"{what} length {array.shape[1]} exceeds maximum {max_len}")
    if array.size and (array.min() < 0 or array.max() >= vocab_size):
        raise ShapeError(f"{what} ids outside the vocabulary")
    return array


def shift_right(target_ids: np.ndarray) -> np.ndarray:
    """Decoder inputs: pad as the start token, then the targets delayed by one."""
    decoder_in = np.full_like(target_ids, PAD_ID)
    decoder_in[:, 1:] = target_ids[:, :-1]
    return decoder_in


def _embed_tokens(params: Parameters, ids: np.ndarray, pos_name: str) -> np.ndarray:
    return params.tensors["embed.token"][ids] + params.tensors[pos_name][: ids.shape[1]]


def _encode(params: Parameters, source_ids: np.ndarray, keep_cache: bool):
    config = params.config
    t = params.tensors
    key_mask = (source_ids != PAD_ID)[:, None, :]
    h = _embed_tokens(params, source_ids, "embed.pos_source")
    caches = []
    for i in range(config.n_encoder_blocks):
        prefix = f"encoder.{i}"
        a_in, ln1 = numerics.layer_norm(h, t[f"{prefix}.attn_norm.gain"], t[f"{prefix}.attn_norm.bias"], config.layer_norm_eps)
        a_out, att = numerics.attention(a_in, a_in, _attention_weights(params, f"{prefix}.self_attn"), config.n_heads, key_mask)
        h = h + a_out
        f_in, ln2 = numerics.layer_norm(h, t[f"{prefix}.ff_norm.gain"], t[f"{prefix}.ff_norm.bias"], config.layer_norm_eps)
        w_in = effective_weight(params, f"{prefix}.ff.w_in")
        w_out = effective_weight(params, f"{prefix}.ff.w_out")
        pre = numerics.linear(f_in, w_in)
        act = numerics.gelu(pre)
        h = h + numerics.linear(act, w_out)
        if keep_cache:
            caches.append((ln1, att, ln2, f_in, pre, act, w_in, w_out))
    out, lnf = numerics.layer_norm(h, t["encoder.final_norm.gain"], t["encoder.final_norm.bias"], config.layer_norm_eps)
    return out, (caches, lnf, key_mask)


def _decode(params: Parameters, decoder_in: np.ndarray, memory: np.ndarray, memory_mask: np.ndarray, keep_cache: bool):
    config = params.config
    t = params.tensors
    length = decoder_in.shape[1]
    causal = np.tril(np.ones((length, length), dtype=bool))[None, :, :]
    h = _embed_tokens(params, decoder_in, "embed.pos_target")
    caches = []
    for i in range(config.n_decoder_blocks):
        prefix = f"decoder.{i}"
        s_in, ln1 = numerics.layer_norm(h, t[f"{prefix}.self_norm.gain"], t[f"{prefix}.self_norm.bias"], config.layer_norm_eps)
        s_out, self_att = numerics.attention(s_in, s_in, _attention_weights(params, f"{prefix}.self_attn"), config.n_heads, causal)
        h = h + s_out
        c_in, ln2 = numerics.layer_norm(h, t[f"{prefix}.cross_norm.gain"], t[f"{prefix}.cross_norm.bias"], config.layer_norm_eps)
        c_out, cross_att = numerics.attention(c_in, memory, _attention_weights(params, f"{prefix}.cross_attn"), config.n_heads, memory_mask)
        h = h + c_out
        f_in, ln3 = numerics.layer_norm(h, t[f"{prefix}.ff_norm.gain"], t[f"{prefix}.ff_norm.bias"], config.layer_norm_eps)
        w_in = effective_weight(params, f"{prefix}.ff.w_in")
        w_out = effective_weight(params, f"{prefix}.ff.w_out")
        pre = numerics.linear(f_in, w_in)
        act = numerics.gelu(pre)
        h = h + numerics.linear(act, w_out)
        if keep_cache:
            caches.append((ln1, self_att, ln2, cross_att, ln3, f_in, pre, act, w_in, w_out))
    out, lnf = numerics.layer_norm(h, t["decoder.final_norm.gain"], t["decoder.final_norm.bias"], config.layer_norm_eps)
    logits = out @ t["embed.token"].T
    return logits, (caches, lnf, out)


def forward(params: Parameters, source_ids, target_ids) -> np.ndarray:
    """
    Logits (batch x target_len x vocab) for teacher-forced targets.
    """
    config = params.config
    source = _as_ids(source_ids, config.max_source_len, config.vocab_size, "source")
    target = _as_ids(target_ids, config.max_target_len, config.vocab_size, "target")
    memory, (_, _, key_mask) = _encode(params, source, keep_cache=False)
    logits, _ = _decode(params, shift_right(target), memory, key_mask, keep_cache=False)
    return logits


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def _feed_forward_backward(grad_h, prefix, f_in, pre, act, w_in, w_out, sink):
    grad_act, grad_w_out = numerics.linear_backward(grad_h, act, w_out)
    grad_pre = numerics.gelu_backward(grad_act, pre)
    grad_f_in, grad_w_in = numerics.linear_backward(grad_pre, f_in, w_in)
    sink.add_weight(f"{prefix}.ff.w_out", grad_w_out)
    sink.add_weight(f"{prefix}.ff.w_in", grad_w_in)
    return grad_f_in


def _norm_backward(grad, cache, name, sink):
    grad_x, grad_gain, grad_bias = numerics.layer_norm_backward(grad, cache)
    sink.add(f"{name}.gain", grad_gain)
    sink.add(f"{name}.bias", grad_bias)
    return grad_x


def _embedding_backward(grad_x, ids, pos_name, sink):
    grad_token = np.zeros_like(sink.params.tensors["embed.token"])
    np.add.at(grad_token, ids, grad_x)
    sink.add("embed.token", grad_token)
    grad_pos = np.zeros_like(sink.params.tensors[pos_name])
    grad_pos[: ids.shape[1]] = grad_x.sum(axis=0)
    sink.add(pos_name, grad_pos)


def loss_and_gradients(
    params: Parameters,
    source_ids,
    target_ids,
    target_mask: Optional[np.ndarray] = None,
) -> Tuple[float, Dict[str, np.ndarray], int]:
    """
    Token-mean cross entropy and its gradients for every trainable tensor.

    `target_mask` defaults to the non-pad target positions. Frozen tensors have
    no entry in the returned gradient dict. Returns (loss, grads, n_tokens).
    """
    config = params.config
    source = _as_ids(source_ids, config.max_source_len, config.vocab_size, "source")
    target = _as_ids(target_ids, config.max_target_len, config.vocab_size, "target")
    mask = (target != PAD_ID) if target_mask is None else np.asarray(target_mask, dtype=bool)
    decoder_in = shift_right(target)

    memory, (enc_caches, enc_lnf, key_mask) = _encode(params, source, keep_cache=True)
    logits, (dec_caches, dec_lnf, dec_out) = _decode(params, decoder_in, memory, key_mask, keep_cache=True)
    loss = numerics.cross_entropy(logits, target, mask)
    grad_logits = numerics.cross_entropy_backward(logits, target, mask)

    sink = _GradientSink(params)
    t = params.tensors
    embedding = t["embed.token"]
    sink.add("embed.token", grad_logits.reshape(-1, grad_logits.shape[-1]).T @ dec_out.reshape(-1, dec_out.shape[-1]))
    grad_h = _norm_backward(grad_logits @ embedding, dec_lnf, "decoder.final_norm", sink)

    grad_memory = np.zeros_like(memory)
    for i in reversed(range(config.n_decoder_blocks)):
        prefix = f"decoder.{i}"
        ln1, self_att, ln2, cross_att, ln3, f_in, pre, act, w_in, w_out = dec_caches[i]
        grad_f_in = _feed_forward_backward(grad_h, prefix, f_in, pre, act, w_in, w_out, sink)
        grad_h = grad_h + _norm_backward(grad_f_in, ln3, f"{prefix}.ff_norm", sink)

        cross = numerics.attention_backward(grad_h, cross_att)
        sink.add_attention(f"{prefix}.cross_attn", cross)
        grad_memory += cross["x_kv"]
        grad_h = grad_h + _norm_backward(cross["x_q"], ln2, f"{prefix}.cross_norm", sink)

        self_grads = numerics.attention_backward(grad_h, self_att)
        sink.add_attention(f"{prefix}.self_attn", self_grads)
        grad_h = grad_h + _norm_backward(self_grads["x_q"] + self_grads["x_kv"], ln1, f"{prefix}.self_norm", sink)
    _embedding_backward(grad_h, decoder_in, "embed.pos_target", sink)

    grad_h = _norm_backward(grad_memory, enc_lnf, "encoder.final_norm", sink)
    for i in reversed(range(config.n_encoder_blocks)):
        prefix = f"encoder.{i}"
        ln1, att, ln2, f_in, pre, act, w_in, w_out = enc_caches[i]
        grad_f_in = _feed_forward_backward(grad_h, prefix, f_in, pre, act, w_in, w_out, sink)
        grad_h = grad_h + _norm_backward(grad_f_in, ln2, f"{prefix}.ff_norm", sink)
        att_grads = numerics.attention_backward(grad_h, att)
        sink.add_attention(f"{prefix}.self_attn", att_grads)
        grad_h = grad_h + _norm_backward(att_grads["x_q"] + att_grads["x_kv"], ln1, f"{prefix}.attn_norm", sink)
    _embedding_backward(grad_h, source, "embed.pos_source", sink)

    return loss, sink.grads, int(mask.sum())


def backward(params: Parameters, source_ids, target_ids, target_mask: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """
    Gradients of the token-mean loss for all trainable tensors.
    """
    _, grads, _ = loss_and_gradients(params, source_ids, target_ids, target_mask)
    return grads


def loss(params: Parameters, source_ids, target_ids, target_mask: Optional[np.ndarray] = None) -> float:
    config = params.config
    target = _as_ids(target_ids, config.max_target_len, config.vocab_size, "target")
    mask = (target != PAD_ID) if target_mask is None else np.asarray(target_mask, dtype=bool)
    return numerics.cross_entropy(forward(params, source_ids, target), target, mask)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def generate(params: Parameters, source_ids, decode: Optional[DecodeConfig] = None) -> List[List[int]]:
    """
    Greedy decoding. Each output ends with eos unless the length cap is hit first.

    `np.argmax` returns the first maximum, so ties go to the lowest token id.
    """
    config = params.config
    decode = decode or DecodeConfig(max_target_len=config.max_target_len)
    if decode.max_target_len > config.max_target_len:
        raise ShapeError(
            f"decode max_target_len {decode.max_target_len} exceeds model limit {config.max_target_len}"
        )
    source = _as_ids(source_ids, config.max_source_len, config.vocab_size, "source")
    memory, (_, _, key_mask) = _encode(params, source, keep_cache=False)
    batch = source.shape[0]
    decoder_in = np.full((batch, 1), PAD_ID, dtype=np.int64)
    outputs: List[List[int]] = [[] for _ in range(batch)]
    finished = np.zeros(batch, dtype=bool)
    for step in range(decode.max_target_len):
        logits, _ = _decode(params, decoder_in, memory, key_mask, keep_cache=False)
        next_ids = np.argmax(logits[:, step, :], axis=-1)
        for b in range(batch):
            if not finished[b]:
                outputs[b].append(int(next_ids[b]))
                finished[b] = next_ids[b] == decode.eos_id
        if finished.all() or step + 1 == decode.max_target_len:
            break
        next_col = np.where(finished, PAD_ID, next_ids)[:, None]
        decoder_in = np.concatenate([decoder_in, next_col], axis=1)
    return outputs


def embed(params: Parameters, source_ids) -> np.ndarray:
    """
    Unit-normalized mean of the final encoder states over non-pad positions.
    Returns (batch, d_model).
    """
    config = params.config
    source = _as_ids(source_ids, config.max_source_len, config.vocab_size, "source")
    present = source != PAD_ID
    if source.shape[1] == 0 or not present.any(axis=1).all():
        raise ShapeError("cannot embed an empty source sequence")
    states, _ = _encode(params, source, keep_cache=False)
    pooled = (states * present[..., None]).sum(axis=1) / present.sum(axis=1, keepdims=True)
    norms = np.linalg.norm(pooled, axis=1, keepdims=True)
    return pooled / np.maximum(norms, 1e-12)


def pad_batch(sequences: Sequence[Sequence[int]], length: Optional[int] = None) -> np.ndarray:
    """Right-pad id lists with PAD_ID into a (batch, length) array."""
    length = max((len(s) for s in sequences), default=0) if length is None else length
    batch = np.full((len(sequences), length), PAD_ID, dtype=np.int64)
    for i, seq in enumerate(sequences):
        batch[i, : len(seq)] = seq[:length]
    return batch
