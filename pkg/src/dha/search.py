"""Head grouping by simulated annealing and per-layer head-budget allocation.

Scores between heads come from weight-space similarity (pairwise CKA by
default, negated parameter MSE as an alternative). Grouping maximizes the
within-group score sum via simulated annealing with geometric cooling;
budgets are spread across layers by a greedy loss-proportional rule.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams
from .errors import ConfigError
from .similarity import cka, head_similarity_matrix

SCORE_MODES = ("cka", "neg_mse")


@dataclass
class ScoreMatrix:
    """Symmetric head-to-head affinity matrix; higher means more similar."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ConfigError(f"score matrix must be square, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ConfigError("score matrix must be finite")
        if np.max(np.abs(v - v.T)) > 1e-9:
            raise ConfigError("score matrix must be symmetric")
        self.values = v

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass
class Grouping:
    """Equal-size partition of head indices [0, P)."""

    groups: list

    def __post_init__(self):
        sizes = {len(g) for g in self.groups}
        if len(sizes) != 1:
            raise ConfigError(f"groups must be equal-sized, got {sorted(map(len, self.groups))}")
        flat = sorted(i for g in self.groups for i in g)
        if flat != list(range(len(flat))):
            raise ConfigError("groups must partition [0, P)")
        self.groups = [np.asarray(g, dtype=np.int64) for g in self.groups]

    @property
    def n_points(self) -> int:
        return sum(len(g) for g in self.groups)

    def canonical(self) -> "Grouping":
        groups = [np.sort(g) for g in self.groups]
        groups.sort(key=lambda g: int(g[0]))
        return Grouping(groups)

    def permutation(self) -> np.ndarray:
        """Head order that makes the groups contiguous: new i <- old perm[i]."""
        return np.concatenate(self.groups)


@dataclass
class LayerBudget:
    """Per-layer key/value head counts."""

    key_heads: list = field(default_factory=list)
    value_heads: list = field(default_factory=list)


def head_score_matrix(layers, layer_index: int, kind: str, mode: str = "cka") -> ScoreMatrix:
    """Pairwise head affinity for one layer from its weight matrices."""
    if mode not in SCORE_MODES:
        raise ConfigError(f"mode must be one of {SCORE_MODES}, got {mode!r}")
    if mode == "cka":
        return ScoreMatrix(head_similarity_matrix(layers, layer_index, kind).values)
    if not 0 <= layer_index < len(layers):
        raise ConfigError(f"layer {layer_index} out of range for {len(layers)} layers")
    heads = {"q": layers[layer_index].w_q, "k": layers[layer_index].w_k,
             "v": layers[layer_index].w_v}[kind]
    n = heads.shape[0]
    values = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = heads[i] - heads[j]
            values[i, j] = values[j, i] = -float(np.mean(d * d))
    return ScoreMatrix(values)


def grouping_score(m: ScoreMatrix, grouping: Grouping) -> float:
    """Sum of within-group affinities over ordered pairs (diagonal included), halved."""
    if grouping.n_points != m.size:
        raise ConfigError(f"grouping covers {grouping.n_points} points, matrix has {m.size}")
    total = 0.0
    for members in grouping.groups:
        sub = m.values[np.ix_(members, members)]
        total += float(sub.sum())
    return total / 2.0


def _anneal_once(values: np.ndarray, n_groups: int, rng) -> tuple:
    p = values.shape[0]
    per_group = p // n_groups
    points = rng.permutation(p)
    groups = points.reshape(n_groups, per_group)
    current = grouping_score(ScoreMatrix(values), Grouping(list(groups)))
    t = 100.0
    t_min = 0.001
    alpha = 0.9
    while t > t_min:
        i, j = rng.integers(0, n_groups, size=2)
        if i != j:
            a, b = rng.integers(0, per_group, size=2)
            new_groups = groups.copy()
            new_groups[i, a], new_groups[j, b] = new_groups[j, b], new_groups[i, a]
            new_score = grouping_score(ScoreMatrix(values), Grouping(list(new_groups)))
            delta = new_score - current
            if delta > 0 or math.exp(delta / t) > rng.random():
                groups = new_groups
                current = new_score
        t *= alpha
    return groups, current


def anneal_grouping(m: ScoreMatrix, n_groups: int, seed: int, restarts: int = 8):
    """Optimize grouping_score by simulated annealing.

    Uphill swaps are always accepted; downhill with probability exp(delta/T)
    under geometric cooling from T=100 to T=0.001 at rate 0.9. Runs
    ``restarts`` independent chains and keeps the best final state. The
    returned grouping is canonicalized (sorted members, groups ordered by
    first member) and the score equals grouping_score of that partition.
    """
    if m.size % n_groups != 0:
        raise ConfigError(f"{m.size} heads not divisible into {n_groups} groups")
    best_groups, best_score = None, -np.inf
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        groups, score = _anneal_once(m.values, n_groups, rng)
        if score > best_score:
            best_groups, best_score = groups, score
    grouping = Grouping(list(best_groups)).canonical()
    return grouping, grouping_score(m, grouping)


def allocate_layer_budgets(losses, total: int, alloc_set=(4, 8, 16),
                           min_alloc: int = None, max_alloc: int = None):
    """Greedy loss-proportional allocation of head counts across layers.

    Every layer starts at ``min_alloc`` (default: smallest of alloc_set).
    If the remainder affords it, the single highest-weight layer is
    upgraded to the largest value of the set. The rest is handed out in
    ``min_alloc``-sized increments to the layer maximizing loss/allocation
    (ties broken toward the lowest index) until the budget is spent.
    ``max_alloc`` optionally caps any single layer.
    """
    losses = np.asarray(losses, dtype=np.float64)
    n = len(losses)
    alloc_set = sorted(int(a) for a in alloc_set)
    if min_alloc is None:
        min_alloc = alloc_set[0]
    step = min_alloc
    top = alloc_set[-1]
    if np.any(losses < 0) or losses.sum() <= 0:
        raise ConfigError("losses must be nonnegative and not all zero")
    if total < n * min_alloc:
        raise ConfigError(f"budget {total} below minimum {n}*{min_alloc}")
    if (total - n * min_alloc) % step != 0:
        raise ConfigError(f"budget slack {total - n * min_alloc} not divisible by step {step}")
    if (top - min_alloc) % step != 0:
        raise ConfigError(f"allocation set {alloc_set} not reachable in steps of {step}")

    alloc = np.full(n, min_alloc, dtype=np.int64)
    weights = losses / losses.sum()
    remaining = total - int(alloc.sum())
    upgrades = min(1, remaining // top)
    if max_alloc is not None and top > max_alloc:
        upgrades = 0
    for _ in range(upgrades):
        idx = int(np.argmax(weights))
        alloc[idx] += top - min_alloc
        weights[idx] = 0.0
    remaining = total - int(alloc.sum())
    while remaining > 0:
        ratios = losses / alloc
        if max_alloc is not None:
            ratios = np.where(alloc + step <= max_alloc, ratios, -np.inf)
        idx = int(np.argmax(ratios))
        if not np.isfinite(ratios[idx]):
            raise ConfigError(f"cannot place remaining {remaining} under cap {max_alloc}")
        alloc[idx] += step
        remaining -= step
    return [int(a) for a in alloc]


def permute_heads(layers, groupings):
    """Reorder heads so each layer's group members sit contiguously.

    Applies the grouping-induced permutation to w_q/w_k/w_v head axes and
    to the matching d_k-row blocks of w_o; the forward function is
    unchanged. ``groupings`` is one Grouping per layer (or one for all).
    """
    if isinstance(groupings, Grouping):
        groupings = [groupings] * len(layers)
    if len(groupings) != len(layers):
        raise ConfigError(f"need {len(layers)} groupings, got {len(groupings)}")
    out = []
    for layer, grouping in zip(layers, groupings):
        perm = grouping.permutation()
        if len(perm) != layer.n_query_heads:
            raise ConfigError(f"permutation covers {len(perm)} heads, layer has {layer.n_query_heads}")
        h, dk = layer.n_query_heads, layer.head_dim
        w_o_blocks = layer.w_o.reshape(h, dk, -1)
        out.append(AttentionParams(
            w_q=layer.w_q[perm].copy(),
            w_k=layer.w_k[perm].copy(),
            w_v=layer.w_v[perm].copy(),
            w_o=w_o_blocks[perm].reshape(layer.w_o.shape).copy(),
        ))
    return out


@dataclass
class SearchResult:
    """Outputs of the search phase."""

    score_matrices: dict           # kind -> list of ScoreMatrix per layer
    layer_losses: dict             # kind -> per-layer fusion-difficulty proxies
    budget: LayerBudget
    groupings: dict                # kind -> list of Grouping per layer


def _pairwise_activation_mse(acts: np.ndarray) -> float:
    # acts: (B, J, T, d_k) per-head activations; mean squared gap over pairs.
    j = acts.shape[1]
    total = 0.0
    for a in range(j):
        for b in range(a + 1, j):
            d = acts[:, a] - acts[:, b]
            total += float(np.mean(d * d))
    return total / (j * (j - 1) / 2)


def run_search_phase(model, batches, *, kv_budget_total: int, steps: int = 240,
                     score_mode: str = "cka", min_alloc: int = None, seed: int = 0,
                     restarts: int = 8) -> SearchResult:
    """Measure head redundancy, then pick budgets and groupings.

    Runs ``steps`` forward passes (no parameter updates), accumulating for
    every layer and kind the mean pairwise gap between per-head key/value
    activations; layers whose heads disagree more are harder to fuse and
    receive more budget. Weight-space score matrices feed the annealer,
    which groups each layer's heads into its allocated head count.
    """
    from .training.model import attention_inputs

    layers = [block.attn for block in model.layers]
    n_heads = layers[0].n_query_heads
    n_layers = len(layers)
    if min_alloc is None:
        min_alloc = max(1, n_heads // 2)
    per_kind_budget, rem = divmod(kv_budget_total, 2)
    if rem:
        raise ConfigError(f"kv budget {kv_budget_total} must split evenly into key/value pools")

    batches = list(batches)
    if not batches:
        raise ConfigError("search needs at least one data batch")
    sums = {"key": np.zeros(n_layers), "value": np.zeros(n_layers)}
    used = 0
    while used < steps:
        batch = batches[used % len(batches)]
        inputs = attention_inputs(model, batch)
        for l, x in enumerate(inputs):
            k_acts = np.einsum("btd,jdk->bjtk", x, layers[l].w_k)
            v_acts = np.einsum("btd,jdk->bjtk", x, layers[l].w_v)
            sums["key"][l] += _pairwise_activation_mse(k_acts)
            sums["value"][l] += _pairwise_activation_mse(v_acts)
        used += 1
    losses = {kind: list(sums[kind] / steps) for kind in ("key", "value")}

    alloc_set = sorted({min_alloc, min(2 * min_alloc, n_heads), n_heads})
    budget = LayerBudget(
        key_heads=allocate_layer_budgets(losses["key"], per_kind_budget,
                                         alloc_set=alloc_set, min_alloc=min_alloc,
                                         max_alloc=n_heads),
        value_heads=allocate_layer_budgets(losses["value"], per_kind_budget,
                                           alloc_set=alloc_set, min_alloc=min_alloc,
                                           max_alloc=n_heads),
    )
    for kind, counts in (("key", budget.key_heads), ("value", budget.value_heads)):
        for l, count in enumerate(counts):
            if n_heads % count != 0:
                raise ConfigError(
                    f"layer {l} {kind} budget {count} does not divide {n_heads} query heads; "
                    f"choose a budget whose greedy allocation stays on divisors")

    scores = {"key": [], "value": []}
    groupings = {"key": [], "value": []}
    for kind, weight_kind in (("key", "k"), ("value", "v")):
        counts = budget.key_heads if kind == "key" else budget.value_heads
        for l in range(n_layers):
            m = head_score_matrix(layers, l, weight_kind, mode=score_mode)
            scores[kind].append(m)
            kind_id = 0 if kind == "key" else 1
            grouping, _ = anneal_grouping(m, counts[l], seed=int(seed) * 4 + kind_id * 2 + l,
                                          restarts=restarts)
            groupings[kind].append(grouping)
    return SearchResult(score_matrices=scores, layer_losses=losses,
                        budget=budget, groupings=groupings)
