"""Attention parameter containers and MHA/GQA/DHA forward passes.

A model with H query heads per layer projects with per-head weights
w_q[h], w_k[j], w_v[j] of shape (d_model, d_k), stacked along a leading
head axis, plus one (d_model, d_model) output projection per layer.
Decoupled topologies let each layer carry fewer key/value heads than
query heads, with per-layer query->key and query->value index maps.

All forwards are causal: masked logits are set to -1e30 before softmax.
Projections are bias-free.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TopologyError
from .linalg import softmax_rows

MASK_VALUE = -1e30


@dataclass
class ModelConfig:
    """Static shape information for an attention stack / toy model."""

    n_layers: int
    n_query_heads: int
    head_dim: int
    d_model: int
    vocab_size: int
    max_seq: int

    def __post_init__(self):
        for name in ("n_layers", "n_query_heads", "head_dim", "d_model", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model != self.n_query_heads * self.head_dim:
            raise ConfigError(
                f"d_model ({self.d_model}) != n_query_heads * head_dim "
                f"({self.n_query_heads} * {self.head_dim})"
            )

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_query_heads": self.n_query_heads,
            "head_dim": self.head_dim,
            "d_model": self.d_model,
            "vocab_size": self.vocab_size,
            "max_seq": self.max_seq,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass
class AttentionParams:
    """One layer's attention weights.

    w_q: (H, d_model, d_k); w_k: (H_K, d_model, d_k); w_v: (H_V, d_model, d_k);
    w_o: (d_model, d_model). Indexing w_q[h] yields head h's projection.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    @property
    def n_query_heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def n_key_heads(self) -> int:
        return self.w_k.shape[0]

    @property
    def n_value_heads(self) -> int:
        return self.w_v.shape[0]

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[2]

    def copy(self) -> "AttentionParams":
        return AttentionParams(self.w_q.copy(), self.w_k.copy(), self.w_v.copy(), self.w_o.copy())


@dataclass
class DhaTopology:
    """Per-layer key/value head counts and query->head index maps.

    key_map[l] and value_map[l] are int arrays of length H mapping each
    query head to the key/value head it reads. Maps must be surjective
    onto [0, key_heads[l]) / [0, value_heads[l]).
    """

    key_heads: list = field(default_factory=list)
    value_heads: list = field(default_factory=list)
    key_map: list = field(default_factory=list)
    value_map: list = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.key_heads)

    @classmethod
    def identity(cls, n_layers: int, n_heads: int) -> "DhaTopology":
        """One key/value head per query head: DHA specializes to MHA."""
        ident = np.arange(n_heads)
        return cls(
            key_heads=[n_heads] * n_layers,
            value_heads=[n_heads] * n_layers,
            key_map=[ident.copy() for _ in range(n_layers)],
            value_map=[ident.copy() for _ in range(n_layers)],
        )

    @classmethod
    def uniform(cls, n_layers: int, n_heads: int, n_groups: int) -> "DhaTopology":
        """GQA-shaped topology: contiguous equal groups, shared K/V maps."""
        if n_heads % n_groups != 0:
            raise ConfigError(f"n_heads {n_heads} not divisible by n_groups {n_groups}")
        gmap = np.arange(n_heads) * n_groups // n_heads
        return cls(
            key_heads=[n_groups] * n_layers,
            value_heads=[n_groups] * n_layers,
            key_map=[gmap.copy() for _ in range(n_layers)],
            value_map=[gmap.copy() for _ in range(n_layers)],
        )

    def validate(self, n_query_heads: int):
        for l in range(self.n_layers):
            for kind, count, mapping in (
                ("key", self.key_heads[l], self.key_map[l]),
                ("value", self.value_heads[l], self.value_map[l]),
            ):
                mapping = np.asarray(mapping)
                if count > n_query_heads:
                    raise TopologyError(
                        f"layer {l}: {kind}_heads {count} exceeds query heads {n_query_heads}"
                    )
                if len(mapping) != n_query_heads:
                    raise TopologyError(
                        f"layer {l}: {kind}_map has length {len(mapping)}, expected {n_query_heads}"
                    )
                if mapping.min() < 0 or mapping.max() >= count:
                    raise TopologyError(
                        f"layer {l}: {kind}_map index out of range [0, {count})"
                    )
                if len(np.unique(mapping)) != count:
                    raise TopologyError(f"layer {l}: {kind}_map is not surjective onto {count} heads")

    def total_kv_heads(self) -> int:
        return int(sum(self.key_heads) + sum(self.value_heads))

    def to_dict(self) -> dict:
        return {
            "key_heads": [int(c) for c in self.key_heads],
            "value_heads": [int(c) for c in self.value_heads],
            "key_map": [[int(i) for i in m] for m in self.key_map],
            "value_map": [[int(i) for i in m] for m in self.value_map],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DhaTopology":
        return cls(
            key_heads=[int(c) for c in d["key_heads"]],
            value_heads=[int(c) for c in d["value_heads"]],
            key_map=[np.asarray(m, dtype=np.int64) for m in d["key_map"]],
            value_map=[np.asarray(m, dtype=np.int64) for m in d["value_map"]],
        )


@dataclass
class KvCacheSpec:
    """Inference-side cache sizing inputs."""

    batch: int
    seq_len: int
    bytes_per_element: int

    def __post_init__(self):
        for name in ("batch", "seq_len", "bytes_per_element"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")


def causal_mask(t: int) -> np.ndarray:
    """(t, t) additive mask: 0 on and below the diagonal, MASK_VALUE above."""
    return np.where(np.tril(np.ones((t, t), dtype=bool)), 0.0, MASK_VALUE)


def attend(q, k_sel, v_sel, w_o):
    """Scaled-dot attention over per-query-head key/value tensors.

    q, k_sel, v_sel: (B, H, T, d_k); w_o: (H*d_k, d_model).
    Returns (y, att) with y (B, T, d_model) and att (B, H, T, T).
    """
    b, h, t, dk = q.shape
    scores = (q @ k_sel.transpose(0, 1, 3, 2)) / np.sqrt(dk) + causal_mask(t)
    att = softmax_rows(scores)
    out = att @ v_sel                                    # (B, H, T, d_k)
    concat = out.transpose(0, 2, 1, 3).reshape(b, t, h * dk)
    return concat @ w_o, att


def layer_forward(x, layer: AttentionParams, key_map, value_map):
    """One attention layer on x (B, T, d_model) with explicit head maps."""
    key_map = np.asarray(key_map)
    value_map = np.asarray(value_map)
    if key_map.max() >= layer.n_key_heads or value_map.max() >= layer.n_value_heads:
        raise TopologyError(
            f"head map out of range: keys {key_map.max()}/{layer.n_key_heads}, "
            f"values {value_map.max()}/{layer.n_value_heads}"
        )
    q = np.einsum("btd,hdk->bhtk", x, layer.w_q)
    k = np.einsum("btd,jdk->bjtk", x, layer.w_k)
    v = np.einsum("btd,jdk->bjtk", x, layer.w_v)
    y, _ = attend(q, k[:, key_map], v[:, value_map], layer.w_o)
    return y


def _check_counts(layers, topo: DhaTopology):
    if len(layers) != topo.n_layers:
        raise TopologyError(f"{len(layers)} layers vs topology with {topo.n_layers}")
    for l, layer in enumerate(layers):
        if layer.n_key_heads != topo.key_heads[l] or layer.n_value_heads != topo.value_heads[l]:
            raise TopologyError(
                f"layer {l}: params carry {layer.n_key_heads}K/{layer.n_value_heads}V heads, "
                f"topology expects {topo.key_heads[l]}K/{topo.value_heads[l]}V"
            )


def dha_forward(x, layers, topo: DhaTopology) -> np.ndarray:
    """Apply the attention stack with per-layer decoupled head maps.

    x: (p, d_model) single sequence. Layers are applied sequentially.
    """
    _check_counts(layers, topo)
    h = np.asarray(x, dtype=np.float64)[None]
    for l, layer in enumerate(layers):
        h = layer_forward(h, layer, topo.key_map[l], topo.value_map[l])
    return h[0]


def mha_forward(x, layers) -> np.ndarray:
    """Standard multi-head attention stack: identity topology DHA."""
    for l, layer in enumerate(layers):
        if layer.n_key_heads != layer.n_query_heads or layer.n_value_heads != layer.n_query_heads:
            raise TopologyError(
                f"layer {l}: MHA needs one key/value head per query head, "
                f"got {layer.n_key_heads}K/{layer.n_value_heads}V for {layer.n_query_heads}Q"
            )
    topo = DhaTopology.identity(len(layers), layers[0].n_query_heads)
    return dha_forward(x, layers, topo)


def gqa_init_mean_pool(layers, n_groups: int):
    """Mean-pool key/value heads into contiguous groups of H/n_groups.

    Returns new per-layer params (fewer K/V heads) plus the shared-map
    topology. Query and output projections are untouched.
    """
    pooled = []
    for layer in layers:
        h = layer.n_query_heads
        if h % n_groups != 0:
            raise ConfigError(f"{h} heads not divisible into {n_groups} groups")
        g = h // n_groups
        w_k = layer.w_k.reshape(n_groups, g, *layer.w_k.shape[1:]).mean(axis=1)
        w_v = layer.w_v.reshape(n_groups, g, *layer.w_v.shape[1:]).mean(axis=1)
        pooled.append(AttentionParams(layer.w_q.copy(), w_k, w_v, layer.w_o.copy()))
    topo = DhaTopology.uniform(len(layers), layers[0].n_query_heads, n_groups)
    return pooled, topo


def kv_cache_bytes(config: ModelConfig, topo: DhaTopology, spec: KvCacheSpec) -> int:
    """Bytes of cached keys+values for one decode pass.

    Per layer: (H_l^K + H_l^V) * seq * d_k * batch * bytes. MHA and GQA
    are the identity / uniform special cases of the topology.
    """
    per_position = sum(int(k) + int(v) for k, v in zip(topo.key_heads, topo.value_heads))
    return per_position * spec.seq_len * config.head_dim * spec.batch * spec.bytes_per_element


def mha_kv_cache_bytes(config: ModelConfig, spec: KvCacheSpec) -> int:
    return kv_cache_bytes(config, DhaTopology.identity(config.n_layers, config.n_query_heads), spec)


def gqa_kv_cache_bytes(config: ModelConfig, n_groups: int, spec: KvCacheSpec) -> int:
    topo = DhaTopology.uniform(config.n_layers, config.n_query_heads, n_groups)
    return kv_cache_bytes(config, topo, spec)
