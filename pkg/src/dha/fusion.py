"""Linear head fusion: operator, losses, margin schedule, materialization.

During fusion training each query head h no longer reads one key/value
head; it reads a per-channel linear combination of its group's heads:

    key_h[:, c]   = sum_j omega_k[h, j, c] * (X @ w_k[member_j])[:, c]
    value_h[:, c] = sum_j omega_v[h, j, c] * (X @ w_v[member_j])[:, c]

At Kronecker-delta initialization (omega[h, j] = 1 iff member_j == h) the
fused forward reproduces plain multi-head attention exactly. The fusion
loss measures intra-group disagreement of the omega rows; when it hits
zero a single shared head per group reproduces the forward, and
``materialize_dha`` builds that head from the group-averaged coefficients.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .attention import AttentionParams, DhaTopology, attend
from .errors import ConfigError, TopologyError

__all__ = [
    "KindFusion", "FusionOperator", "MarginSchedule", "LagrangeState",
    "init_identity", "fused_forward", "fused_layer_forward", "fused_layer_backward",
    "head_pair_loss", "fusion_loss", "fusion_loss_grads",
    "margin", "margin_at", "constrained_penalty", "lagrange_step", "materialize_dha",
]


def _validate_partition(groups, n_heads):
    sizes = {len(g) for g in groups}
    if len(sizes) != 1:
        raise ConfigError(f"groups must have equal sizes, got {sorted(len(g) for g in groups)}")
    flat = sorted(i for g in groups for i in g)
    if flat != list(range(n_heads)):
        raise ConfigError(f"groups do not partition the {n_heads} query heads: {groups}")


@dataclass
class KindFusion:
    """One layer's fusion state for one projection kind (key or value).

    groups: list of equally-sized member arrays partitioning the query heads.
    omega: (H, g, C) coefficients; C is d_k (per-channel) or 1 (scalar mode).
    Row h is interpreted against the member order of h's own group.
    """

    groups: list
    omega: np.ndarray

    @property
    def group_size(self) -> int:
        return len(self.groups[0])

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def group_of(self, h: int) -> int:
        for n, members in enumerate(self.groups):
            if h in members:
                return n
        raise ConfigError(f"head {h} not in any group")

    def member_index(self) -> np.ndarray:
        """(H, g) array: row h lists h's group members in group order."""
        n_heads = self.omega.shape[0]
        idx = np.empty((n_heads, self.group_size), dtype=np.int64)
        for members in self.groups:
            for h in members:
                idx[h] = members
        return idx

    def copy(self) -> "KindFusion":
        return KindFusion([np.array(g) for g in self.groups], self.omega.copy())


@dataclass
class FusionOperator:
    """Per-layer, per-kind fusion coefficients for a whole attention stack."""

    key: list
    value: list
    per_channel: bool = True

    @property
    def n_layers(self) -> int:
        return len(self.key)

    def kind(self, name: str) -> list:
        if name not in ("key", "value"):
            raise ConfigError(f"kind must be 'key' or 'value', got {name!r}")
        return self.key if name == "key" else self.value

    def copy(self) -> "FusionOperator":
        return FusionOperator([k.copy() for k in self.key],
                              [v.copy() for v in self.value], self.per_channel)


@dataclass
class MarginSchedule:
    """Decaying fusion-loss tolerance t = max(0, base^step * (1 - step/warmup))."""

    base: float = 0.999
    warmup_steps: int = 200
    step: int = 0

    def __post_init__(self):
        if not 0.0 < self.base < 1.0:
            raise ConfigError(f"base must lie in (0, 1), got {self.base}")
        if self.warmup_steps < 1:
            raise ConfigError(f"warmup_steps must be >= 1, got {self.warmup_steps}")


@dataclass
class LagrangeState:
    """Nonnegative multiplier ascended on constraint violation."""

    lam: float = 0.0
    lr_lambda: float = 1e-2

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.lr_lambda <= 0:
            raise ConfigError(f"lr_lambda must be > 0, got {self.lr_lambda}")


def _delta_kind(groups, n_heads, dim) -> KindFusion:
    g = len(groups[0])
    omega = np.zeros((n_heads, g, dim))
    for members in groups:
        for j, m in enumerate(members):
            omega[m, j, :] = 1.0
    return KindFusion([np.asarray(m, dtype=np.int64) for m in groups], omega)


def _broadcast_groupings(grouping, n_layers):
    # A single partition (list of int lists) applies to every layer.
    if grouping and not isinstance(grouping[0][0], (list, tuple, np.ndarray)):
        return [grouping] * n_layers
    return grouping


def init_identity(layers, grouping_k, grouping_v, per_channel: bool = True) -> FusionOperator:
    """Kronecker-delta operator: fused forward == plain MHA forward."""
    n_heads = layers[0].n_query_heads
    dim = layers[0].head_dim if per_channel else 1
    grouping_k = _broadcast_groupings(grouping_k, len(layers))
    grouping_v = _broadcast_groupings(grouping_v, len(layers))
    if len(grouping_k) != len(layers) or len(grouping_v) != len(layers):
        raise ConfigError("need one grouping per layer and kind")
    key, value = [], []
    for gk, gv in zip(grouping_k, grouping_v):
        _validate_partition(gk, n_heads)
        _validate_partition(gv, n_heads)
        key.append(_delta_kind(gk, n_heads, dim))
        value.append(_delta_kind(gv, n_heads, dim))
    return FusionOperator(key, value, per_channel)


def _combine(src, kf: KindFusion):
    """(B, Hsrc, T, d_k) source heads -> (B, H, T, d_k) per-query fused heads."""
    gathered = src[:, kf.member_index()]                    # (B, H, g, T, d_k)
    return (gathered * kf.omega[None, :, :, None, :]).sum(axis=2), gathered


def fused_layer_forward(x, layer: AttentionParams, kf_key: KindFusion, kf_value: KindFusion):
    """One fused attention layer on x (B, T, d_model). Returns (y, cache)."""
    if layer.n_key_heads != layer.n_query_heads or layer.n_value_heads != layer.n_query_heads:
        raise TopologyError("fusion operates on full per-query key/value head sets")
    q = np.einsum("btd,hdk->bhtk", x, layer.w_q)
    k_src = np.einsum("btd,jdk->bjtk", x, layer.w_k)
    v_src = np.einsum("btd,jdk->bjtk", x, layer.w_v)
    k_sel, k_gat = _combine(k_src, kf_key)
    v_sel, v_gat = _combine(v_src, kf_value)
    y, att = attend(q, k_sel, v_sel, layer.w_o)
    cache = dict(x=x, q=q, k_src=k_src, v_src=v_src, k_gat=k_gat, v_gat=v_gat,
                 k_sel=k_sel, v_sel=v_sel, att=att, layer=layer,
                 kf_key=kf_key, kf_value=kf_value)
    return y, cache


def attend_backward(dy, q, k_sel, v_sel, att, w_o):
    """Reverse of :func:`dha.attention.attend`. Returns (dq, dk_sel, dv_sel, dw_o)."""
    b, h, t, dk = q.shape
    out = att @ v_sel
    concat = out.transpose(0, 2, 1, 3).reshape(b, t, h * dk)
    dw_o = concat.reshape(-1, h * dk).T @ dy.reshape(-1, dy.shape[-1])
    dconcat = dy @ w_o.T
    dout = dconcat.reshape(b, t, h, dk).transpose(0, 2, 1, 3)
    datt = dout @ v_sel.transpose(0, 1, 3, 2)
    dv_sel = att.transpose(0, 1, 3, 2) @ dout
    ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
    scale = 1.0 / np.sqrt(dk)
    dq = (ds @ k_sel) * scale
    dk_sel = (ds.transpose(0, 1, 3, 2) @ q) * scale
    return dq, dk_sel, dv_sel, dw_o


def _combine_backward(d_sel, gathered, kf: KindFusion, src_shape):
    """Backward through _combine: returns (d_src, d_omega)."""
    d_omega_full = np.einsum("bhtk,bhjtk->hjk", d_sel, gathered)
    if kf.omega.shape[-1] == 1:
        d_omega = d_omega_full.sum(axis=-1, keepdims=True)
    else:
        d_omega = d_omega_full
    d_gat = d_sel[:, :, None] * kf.omega[None, :, :, None, :]
    d_src = np.zeros(src_shape)
    idx = kf.member_index()
    for h in range(idx.shape[0]):
        d_src[:, idx[h]] += d_gat[:, h]
    return d_src, d_omega


def fused_layer_backward(dy, cache):
    """Gradients of a fused layer. Returns (dx, grads) with omega grads included."""
    layer = cache["layer"]
    x = cache["x"]
    dq, dk_sel, dv_sel, dw_o = attend_backward(
        dy, cache["q"], cache["k_sel"], cache["v_sel"], cache["att"], layer.w_o)
    dk_src, d_omega_k = _combine_backward(dk_sel, cache["k_gat"], cache["kf_key"], cache["k_src"].shape)
    dv_src, d_omega_v = _combine_backward(dv_sel, cache["v_gat"], cache["kf_value"], cache["v_src"].shape)
    grads = {
        "w_q": np.einsum("btd,bhtk->hdk", x, dq),
        "w_k": np.einsum("btd,bjtk->jdk", x, dk_src),
        "w_v": np.einsum("btd,bjtk->jdk", x, dv_src),
        "w_o": dw_o,
        "omega_k": d_omega_k,
        "omega_v": d_omega_v,
    }
    dx = (np.einsum("bhtk,hdk->btd", dq, layer.w_q)
          + np.einsum("bjtk,jdk->btd", dk_src, layer.w_k)
          + np.einsum("bjtk,jdk->btd", dv_src, layer.w_v))
    return dx, grads


def fused_forward(x, layers, op: FusionOperator) -> np.ndarray:
    """Apply the fused attention stack to a single (p, d_model) input."""
    if op.n_layers != len(layers):
        raise TopologyError(f"operator spans {op.n_layers} layers, params have {len(layers)}")
    h = np.asarray(x, dtype=np.float64)[None]
    for layer, kf_k, kf_v in zip(layers, op.key, op.value):
        h, _ = fused_layer_forward(h, layer, kf_k, kf_v)
    return h[0]


def head_pair_loss(op: FusionOperator, layer: int, kind: str, group: int, h: int, h2: int) -> float:
    """Mean squared difference of two query heads' omega rows in one group."""
    kf = op.kind(kind)[layer]
    members = list(kf.groups[group])
    if h not in members or h2 not in members:
        raise ConfigError(f"heads {h}, {h2} are not both in group {group} ({members})")
    diff = kf.omega[h] - kf.omega[h2]
    return float(np.mean(diff * diff))


def _kind_pair_sum(kf: KindFusion) -> float:
    total = 0.0
    for members in kf.groups:
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                diff = kf.omega[members[a]] - kf.omega[members[b]]
                total += float(np.mean(diff * diff))
    return total


def _kind_norm(kf: KindFusion) -> float:
    # H * g * C * 2 * (g - 1) / 2, with C the stored coefficient width.
    n_heads, g, dim = kf.omega.shape
    return n_heads * g * dim * (g - 1)


def fusion_loss(op: FusionOperator) -> float:
    """Intra-group omega disagreement, normalized and averaged over layers.

    Zero iff all omega rows within every group are identical; singleton
    groups contribute nothing.
    """
    total = 0.0
    for kf_k, kf_v in zip(op.key, op.value):
        layer_loss = 0.0
        for kf in (kf_k, kf_v):
            if kf.group_size > 1:
                layer_loss += _kind_pair_sum(kf) / _kind_norm(kf)
        total += layer_loss
    return total / op.n_layers


def fusion_loss_grads(op: FusionOperator):
    """Analytic d(fusion_loss)/d(omega) per layer and kind.

    For head h in a group: grad[h] = 2/(g*C*N*L) * sum_{h' != h} (omega_h - omega_h').
    """
    grads_k, grads_v = [], []
    n_layers = op.n_layers
    for kf_k, kf_v in zip(op.key, op.value):
        for kf, out in ((kf_k, grads_k), (kf_v, grads_v)):
            grad = np.zeros_like(kf.omega)
            if kf.group_size > 1:
                n_heads, g, dim = kf.omega.shape
                coeff = 2.0 / (g * dim * _kind_norm(kf) * n_layers)
                for members in kf.groups:
                    rows = kf.omega[members]
                    centered = rows * len(members) - rows.sum(axis=0, keepdims=True)
                    grad[members] = coeff * centered
            out.append(grad)
    return grads_k, grads_v


def margin(sched: MarginSchedule) -> float:
    """Current tolerance t = max(0, base^step * (1 - step/warmup))."""
    s = sched.step
    return max(0.0, sched.base ** s * (1.0 - s / sched.warmup_steps))


def margin_at(sched: MarginSchedule, step: int) -> float:
    return margin(replace(sched, step=step))


def constrained_penalty(loss_fusion: float, sched: MarginSchedule, lag: LagrangeState) -> float:
    """lambda * hinge(loss_fusion - t): zero while the constraint holds."""
    return lag.lam * max(loss_fusion - margin(sched), 0.0)


def lagrange_step(lag: LagrangeState, loss_fusion: float, t: float) -> LagrangeState:
    """Ascend the multiplier on the violation hinge; clamp at zero."""
    lam = max(0.0, lag.lam + lag.lr_lambda * max(loss_fusion - t, 0.0))
    return LagrangeState(lam=lam, lr_lambda=lag.lr_lambda)


def materialize_dha(layers, op: FusionOperator):
    """Collapse the operator into explicit fused heads and a topology.

    Group coefficients are averaged over the group's query heads; fused
    head columns are the omega-weighted sums of the member columns. Exact
    forward preservation holds when intra-group rows are identical
    (fusion_loss == 0); the call itself is valid at any loss.
    """
    new_layers = []
    topo = DhaTopology()
    for layer, kf_k, kf_v in zip(layers, op.key, op.value):
        fused = {}
        maps = {}
        for name, kf, src in (("key", kf_k, layer.w_k), ("value", kf_v, layer.w_v)):
            heads = []
            mapping = np.empty(layer.n_query_heads, dtype=np.int64)
            for n, members in enumerate(kf.groups):
                omega_bar = kf.omega[members].mean(axis=0)          # (g, C)
                heads.append((src[members] * omega_bar[:, None, :]).sum(axis=0))
                mapping[members] = n
            fused[name] = np.stack(heads)
            maps[name] = mapping
        new_layers.append(AttentionParams(layer.w_q.copy(), fused["key"],
                                          fused["value"], layer.w_o.copy()))
        topo.key_heads.append(kf_k.n_groups)
        topo.value_heads.append(kf_v.n_groups)
        topo.key_map.append(maps["key"])
        topo.value_map.append(maps["value"])
    return new_layers, topo
