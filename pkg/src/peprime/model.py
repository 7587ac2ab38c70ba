"""Partitioned model: transformer encoder -> single top adapter -> task head.

The encoder parameters are tagged PRETRAINED, the adapter (one
down-project / nonlinearity / up-project block after the final encoder
layer) is tagged LIGHTWEIGHT, and each task head (one linear layer) is
tagged HEAD. Logits for a sequence are head(adapter(encoder(tokens))).

The adapter carries a residual connection by default, so a zero adapter
is exactly the identity map on hidden states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .autodiff import Partition, Var

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    max_seq_len: int = 32
    n_labels: int = 7
    adapter_bottleneck: int = 8
    adapter_nonlinearity: str = "relu"  # relu | gelu
    adapter_residual: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.adapter_bottleneck < 1:
            raise ValueError("adapter_bottleneck must be >= 1")
        if self.n_labels < 2:
            raise ValueError("n_labels must be >= 2")
        if self.adapter_nonlinearity not in ("relu", "gelu"):
            raise ValueError(f"unknown adapter nonlinearity {self.adapter_nonlinearity!r}")

    def hash(self) -> str:
        return ad.stable_hash(asdict(self))


def desk_config(vocab_size: int, n_labels: int = 7) -> ModelConfig:
    """Small enough that full finite-difference checks finish in seconds."""
    return ModelConfig(vocab_size=vocab_size, d_model=32, n_layers=2, n_heads=2,
                       d_ff=64, max_seq_len=32, n_labels=n_labels, adapter_bottleneck=8)


class PartitionedModel:
    """Owns a ParameterRegistry and builds forward graphs over it.

    ``has_adapter=False`` builds the plain encoder+head model used by the
    full fine-tuning baseline, which carries no adapter parameters at all.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, has_adapter: bool = True,
                 registry: ad.ParameterRegistry | None = None):
        self.config = config
        self.has_adapter = has_adapter
        if registry is not None:
            self.registry = registry
            return
        self.registry = ad.ParameterRegistry()
        rng = np.random.default_rng(seed)
        c = config
        reg = self.registry
        emb_scale = 0.1
        reg.add("embed.tok", rng.normal(0, emb_scale, (c.vocab_size, c.d_model)), Partition.PRETRAINED)
        reg.add("embed.pos", rng.normal(0, emb_scale, (c.max_seq_len, c.d_model)), Partition.PRETRAINED)
        for layer in range(c.n_layers):
            pre = f"enc.{layer}"
            for name in ("wq", "wk", "wv", "wo"):
                reg.add(f"{pre}.attn.{name}", _glorot(rng, c.d_model, c.d_model), Partition.PRETRAINED)
                reg.add(f"{pre}.attn.{name}_b", np.zeros(c.d_model), Partition.PRETRAINED)
            reg.add(f"{pre}.ln1.g", np.ones(c.d_model), Partition.PRETRAINED)
            reg.add(f"{pre}.ln1.b", np.zeros(c.d_model), Partition.PRETRAINED)
            reg.add(f"{pre}.ffn.w1", _glorot(rng, c.d_model, c.d_ff), Partition.PRETRAINED)
            reg.add(f"{pre}.ffn.b1", np.zeros(c.d_ff), Partition.PRETRAINED)
            reg.add(f"{pre}.ffn.w2", _glorot(rng, c.d_ff, c.d_model), Partition.PRETRAINED)
            reg.add(f"{pre}.ffn.b2", np.zeros(c.d_model), Partition.PRETRAINED)
            reg.add(f"{pre}.ln2.g", np.ones(c.d_model), Partition.PRETRAINED)
            reg.add(f"{pre}.ln2.b", np.zeros(c.d_model), Partition.PRETRAINED)
        if has_adapter:
            self.init_adapter(rng)

    def init_adapter(self, rng):
        """Near-identity start: small noise on down-project, zeros on up-project."""
        c = self.config
        reg = self.registry
        for pid in ("adapter.down", "adapter.down_b", "adapter.up", "adapter.up_b"):
            if pid in reg:
                raise ad.ContractError("adapter already initialized")
        reg.add("adapter.down", rng.uniform(-1e-2, 1e-2, (c.d_model, c.adapter_bottleneck)), Partition.LIGHTWEIGHT)
        reg.add("adapter.down_b", np.zeros(c.adapter_bottleneck), Partition.LIGHTWEIGHT)
        reg.add("adapter.up", np.zeros((c.adapter_bottleneck, c.d_model)), Partition.LIGHTWEIGHT)
        reg.add("adapter.up_b", np.zeros(c.d_model), Partition.LIGHTWEIGHT)

    def add_head(self, name: str, rng):
        c = self.config
        bound = 1.0 / math.sqrt(c.d_model)
        self.registry.add(f"head.{name}.w", rng.uniform(-bound, bound, (c.d_model, c.n_labels)), Partition.HEAD)
        self.registry.add(f"head.{name}.b", np.zeros(c.n_labels), Partition.HEAD)

    def head_names(self):
        return sorted({pid.split(".")[1] for pid in self.registry.ids(Partition.HEAD)})

    def head_ids(self, name: str):
        ids = [f"head.{name}.w", f"head.{name}.b"]
        for pid in ids:
            if pid not in self.registry:
                raise KeyError(f"no head named {name!r}")
        return ids

    def clone(self) -> "PartitionedModel":
        return PartitionedModel(self.config, has_adapter=self.has_adapter,
                                registry=self.registry.deep_copy())

    # --- forward graphs ---------------------------------------------------

    def encode(self, token_ids, pad_mask, leaves) -> Var:
        """Per-token hidden states [seq_len, d_model]; pad keys masked out."""
        c = self.config
        token_ids = np.asarray(token_ids, dtype=np.int64)
        n = token_ids.size
        if n > c.max_seq_len:
            raise ad.ContractError(f"sequence length {n} exceeds max_seq_len {c.max_seq_len}")
        if token_ids.size and token_ids.max() >= c.vocab_size:
            raise ad.ContractError(f"token id {token_ids.max()} out of vocab range {c.vocab_size}")
        pad_mask = np.asarray(pad_mask, dtype=bool)
        key_mask = np.where(pad_mask, 0.0, NEG_INF)[None, :]  # additive over key axis

        x = ad.add(ad.embedding(leaves["embed.tok"], token_ids),
                   ad.embedding(leaves["embed.pos"], np.arange(n)))
        dh = c.d_model // c.n_heads
        inv_sqrt_dh = 1.0 / math.sqrt(dh)
        for layer in range(c.n_layers):
            pre = f"enc.{layer}"
            q = ad.add(ad.matmul(x, leaves[f"{pre}.attn.wq"]), leaves[f"{pre}.attn.wq_b"])
            k = ad.add(ad.matmul(x, leaves[f"{pre}.attn.wk"]), leaves[f"{pre}.attn.wk_b"])
            v = ad.add(ad.matmul(x, leaves[f"{pre}.attn.wv"]), leaves[f"{pre}.attn.wv_b"])
            heads = []
            for h in range(c.n_heads):
                lo, hi = h * dh, (h + 1) * dh
                qh, kh, vh = (ad.slice_cols(t, lo, hi) for t in (q, k, v))
                scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), inv_sqrt_dh)
                attn = ad.softmax_rows(scores, additive_mask=key_mask)
                heads.append(ad.matmul(attn, vh))
            att = ad.add(ad.matmul(ad.concat_cols(heads), leaves[f"{pre}.attn.wo"]),
                         leaves[f"{pre}.attn.wo_b"])
            x = ad.layer_norm(ad.add(x, att), leaves[f"{pre}.ln1.g"], leaves[f"{pre}.ln1.b"])
            h1 = ad.gelu(ad.add(ad.matmul(x, leaves[f"{pre}.ffn.w1"]), leaves[f"{pre}.ffn.b1"]))
            ff = ad.add(ad.matmul(h1, leaves[f"{pre}.ffn.w2"]), leaves[f"{pre}.ffn.b2"])
            x = ad.layer_norm(ad.add(x, ff), leaves[f"{pre}.ln2.g"], leaves[f"{pre}.ln2.b"])
        return x

    def adapt(self, hidden: Var, leaves) -> Var:
        c = self.config
        if hidden.data.shape[1] != c.d_model:
            raise ad.ShapeMismatchError("adapter", hidden.data.shape, (c.d_model,))
        z = ad.add(ad.matmul(hidden, leaves["adapter.down"]), leaves["adapter.down_b"])
        z = ad.relu(z) if c.adapter_nonlinearity == "relu" else ad.gelu(z)
        z = ad.add(ad.matmul(z, leaves["adapter.up"]), leaves["adapter.up_b"])
        return ad.add(hidden, z) if c.adapter_residual else z

    def classify(self, adapted: Var, head: str, leaves) -> Var:
        return ad.add(ad.matmul(adapted, leaves[f"head.{head}.w"]), leaves[f"head.{head}.b"])

    def logits(self, token_ids, pad_mask, head: str, leaves=None):
        """Full composition head(adapter(encoder(x))). Returns (logits, leaves)."""
        self.head_ids(head)
        if leaves is None:
            leaves = self.registry.leaf_vars()
        x = self.encode(token_ids, pad_mask, leaves)
        if self.has_adapter:
            x = self.adapt(x, leaves)
        return self.classify(x, head, leaves), leaves

    def batch_loss(self, batch, head: str):
        """Mean cross-entropy over non-pad tokens of a batch of sequences.

        ``batch`` is a list of (token_ids, label_ids) pairs; every
        sequence contributes its positions to one shared mean.
        Returns (loss Var, leaves).
        """
        leaves = self.registry.leaf_vars()
        logit_rows, gold, keep = [], [], []
        for token_ids, label_ids in batch:
            token_ids = np.asarray(token_ids, dtype=np.int64)
            label_ids = np.asarray(label_ids, dtype=np.int64)
            pad_mask = label_ids >= 0
            lg, _ = self.logits(token_ids, pad_mask, head, leaves)
            logit_rows.append(lg)
            gold.append(np.where(pad_mask, label_ids, 0))
            keep.append(pad_mask)
        stacked = _stack_rows(logit_rows)
        loss = ad.cross_entropy_mean(stacked, np.concatenate(gold), np.concatenate(keep))
        return loss, leaves

    def predict(self, token_ids, pad_mask, head: str):
        lg, _ = self.logits(token_ids, pad_mask, head)
        return lg.data.argmax(axis=1)


def _stack_rows(parts):
    out = Var(np.concatenate([p.data for p in parts], axis=0), tuple(parts))
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p._accum(g[lo:hi])

    out._backward = bwd
    return out


def _glorot(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out))


# --- parameter accounting -------------------------------------------------

def encoder_param_count(c: ModelConfig) -> int:
    per_layer = (4 * (c.d_model * c.d_model + c.d_model)      # attention projections
                 + 2 * 2 * c.d_model                          # two layernorms
                 + c.d_model * c.d_ff + c.d_ff + c.d_ff * c.d_model + c.d_model)
    return c.vocab_size * c.d_model + c.max_seq_len * c.d_model + c.n_layers * per_layer


def adapter_param_count(c: ModelConfig) -> int:
    b = c.adapter_bottleneck
    return c.d_model * b + b + b * c.d_model + c.d_model


def head_param_count(c: ModelConfig) -> int:
    return c.d_model * c.n_labels + c.n_labels


def count_trainable_fraction(config: ModelConfig, trainable_partitions,
                             adapter_present: bool = True) -> Fraction:
    """Exact trainable/total parameter ratio for one fine-tuning setting."""
    counts = {
        Partition.PRETRAINED: encoder_param_count(config),
        Partition.LIGHTWEIGHT: adapter_param_count(config) if adapter_present else 0,
        Partition.HEAD: head_param_count(config),
    }
    total = sum(counts.values())
    trainable = sum(counts[p] for p in trainable_partitions)
    return Fraction(trainable, total)


def format_fraction_percent(frac: Fraction) -> str:
    """One-significant-figure percentage, e.g. '100%', '0.4%', '3e-3%'."""
    pct = float(frac) * 100.0
    if pct >= 1.0:
        return f"{pct:.0f}%"
    if pct >= 0.01:
        return f"{pct:.1g}%"
    mantissa, exp = f"{pct:.0e}".split("e")
    return f"{mantissa}e{int(exp)}%"
