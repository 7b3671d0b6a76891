"""Query-label-driven packing of clusters into a hierarchy.

Bottom clusters form the leaves of the final tree.  Each carries a label
set: the ids of the workload queries it is relevant to.  Packing one level
means assigning every lower node to one of ``N`` upper slots; a query must
then visit each upper node labeled with it plus all of that node's
children, so packing quality is the average number of node accesses per
query.  One level of packing is cast as a sequential decision process (add
one node per step; reward = the drop in average accesses) and solved with a
small deep Q-network trained with experience replay, a softly-updated
target network, epsilon-greedy exploration, and an action mask that hides
interchangeable empty slots.  Levels are stacked bottom-up until a new
level stops paying for itself.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import Rect, Workload

log = logging.getLogger(__name__)


# -------------------------------------------------------------- domain types


@dataclass
class UpperNode:
    """One node of a packed level: children from the level below, the union
    of their query labels, their joint MBR, and the total object weight
    beneath it (used to order nodes when packing the next level)."""

    id: int = 0
    child_ids: list[int] = field(default_factory=list)
    labels: set[int] = field(default_factory=set)
    mbr: Rect | None = None
    weight: int = 0

    @property
    def count(self) -> int:
        return len(self.child_ids)

    @property
    def empty(self) -> bool:
        return not self.child_ids

    def add(self, child_id: int, labels: Iterable[int], mbr: Rect,
            weight: int) -> None:
        self.child_ids.append(child_id)
        self.labels |= set(labels)
        self.mbr = mbr if self.mbr is None else _union_rect(self.mbr, mbr)
        self.weight += weight


@dataclass(frozen=True)
class Transition:
    """One step of packing experience: ``(state, action, reward, next_state)``
    plus whether the episode ended there."""

    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool

    def __post_init__(self) -> None:
        if self.action < 0:
            raise ValueError("action must be a non-negative slot index")


@dataclass(frozen=True)
class RlConfig:
    """Training settings for the packing Q-network.

    ``sync_period`` is the number of gradient steps between soft updates of
    the target network; ``epsilon`` decays multiplicatively per packing step
    from ``epsilon_start`` down to ``epsilon_floor``.  ``loss`` selects the
    temporal-difference loss: Huber (``smooth_l1``, the default) or plain
    squared error (``mse``); both use sum reduction.  ``group_ratio`` < 1
    pre-merges the bottom clusters into ``round(ratio * n)`` spatial groups
    before any Q-learning runs (a build accelerator); ``grouping`` picks the
    algorithm used for that.
    """

    replay_capacity: int = 256
    gamma: float = 0.99
    tau: float = 0.001
    epochs: int = 40
    batch_size: int = 32
    epsilon_start: float = 1.0
    epsilon_decay: float = 0.995
    epsilon_floor: float = 0.05
    sync_period: int = 1
    learning_rate: float = 1e-3
    loss: str = "smooth_l1"
    hidden: tuple[int, ...] = (64, 64)
    use_mask: bool = True
    group_ratio: float = 1.0
    grouping: str = "spectral"
    max_levels: int = 32

    def __post_init__(self) -> None:
        if self.replay_capacity < 1:
            raise ValueError("replay_capacity must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must be in (0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.epsilon_floor <= self.epsilon_start <= 1.0:
            raise ValueError("need 0 <= epsilon_floor <= epsilon_start <= 1")
        if not 0.0 < self.epsilon_decay <= 1.0:
            raise ValueError("epsilon_decay must be in (0, 1]")
        if self.sync_period < 1:
            raise ValueError("sync_period must be >= 1")
        if not self.learning_rate > 0.0:
            raise ValueError("learning_rate must be positive")
        if self.loss not in ("smooth_l1", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if not self.hidden:
            raise ValueError("need at least one hidden layer")
        if not 0.0 < self.group_ratio <= 1.0:
            raise ValueError("group_ratio must be in (0, 1]")
        if self.grouping not in ("spectral", "kmeans"):
            raise ValueError(f"unknown grouping {self.grouping!r}")
        if self.max_levels < 1:
            raise ValueError("max_levels must be >= 1")


# ------------------------------------------------------------------- helpers


def _union_rect(a: Rect, b: Rect) -> Rect:
    return Rect(min(a.xb, b.xb), min(a.yb, b.yb),
                max(a.xu, b.xu), max(a.yu, b.yu))


def _node_weight(node) -> int:
    """Object count beneath a node (clusters carry object ids; packed nodes
    carry an explicit weight)."""
    w = getattr(node, "weight", None)
    if w is not None:
        return int(w)
    return int(len(node.object_ids))


@dataclass(frozen=True)
class _Item:
    """A node to be packed, reduced to what the packer needs."""

    id: int
    labels: frozenset[int]
    mbr: Rect
    weight: int


def _level_layout(nodes: Sequence) -> tuple[list[_Item], dict[int, int]]:
    """Fixed processing order and query-bit mapping for one level.

    Nodes are packed in descending object-weight order (ties by id) so the
    heavy nodes anchor the early states; the distinct query ids labeling the
    level, in ascending order, become state-vector bit positions.  Both are
    functions of the node list alone, so training and the later greedy
    rollout reconstruct the identical layout.
    """
    items = [
        _Item(int(n.id), frozenset(n.labels), n.mbr, _node_weight(n))
        for n in nodes
    ]
    items.sort(key=lambda it: (-it.weight, it.id))
    qids = sorted({qid for it in items for qid in it.labels})
    qid_to_bit = {qid: b for b, qid in enumerate(qids)}
    return items, qid_to_bit


# --------------------------------------------------------------- MDP pieces


def avg_node_accesses(upper: Sequence[UpperNode], m: int) -> float:
    """Average node accesses per query over a (partially packed) level.

    A query accesses every non-empty upper node labeled with it, and then
    each of that node's children, so each labeled non-empty node costs
    ``1 + count``.  ``m`` is the number of queries the labels are drawn
    from (label ids must belong to those queries); queries labeling nothing
    contribute zero accesses.  Before any node is packed the value is 1 by
    convention, which makes the summed rewards of a full episode equal
    ``1 - final_accesses``.
    """
    if m <= 0:
        raise ValueError("m must be positive")
    total = 0
    any_nonempty = False
    for u in upper:
        if u.count > 0:
            any_nonempty = True
            total += len(u.labels) * (1 + u.count)
    if not any_nonempty:
        return 1.0
    return total / m


def reward(before: float, after: float) -> float:
    """Reward of a packing step: the drop in average node accesses."""
    return before - after


def encode_state(upper: Sequence[UpperNode], next_labels: Iterable[int],
                 m: int, n: int, normalize: bool = False) -> np.ndarray:
    """Encode a packing state as a ``(m + 1) * n + m`` float vector.

    Slot-major layout: for each of the ``n`` upper slots, ``m`` binary label
    indicators then one child count; the trailing ``m`` bits carry the
    labels of the incoming node.  Label ids must lie in ``[0, m)``.  With
    ``normalize`` the counts are divided by ``n`` for network input (the
    indicator bits are already in [0, 1]).
    """
    if len(upper) != n:
        raise ValueError(f"expected {n} upper slots, got {len(upper)}")
    vec = np.zeros((m + 1) * n + m, dtype=np.float64)
    for i, u in enumerate(upper):
        base = i * (m + 1)
        for qid in u.labels:
            vec[base + qid] = 1.0
        vec[base + m] = u.count / n if normalize else u.count
    base = (m + 1) * n
    for qid in next_labels:
        vec[base + qid] = 1.0
    return vec


def action_mask(upper: Sequence[UpperNode]) -> np.ndarray:
    """Boolean vector of allowed slots: every non-empty slot, plus only the
    lowest-indexed empty one (the empty slots are interchangeable)."""
    mask = np.zeros(len(upper), dtype=bool)
    first_empty = -1
    for i, u in enumerate(upper):
        if u.count > 0:
            mask[i] = True
        elif first_empty < 0:
            first_empty = i
    if first_empty >= 0:
        mask[first_empty] = True
    return mask


def choose_action(policy, state: np.ndarray, mask: np.ndarray,
                  epsilon: float = 0.0,
                  rng: np.random.Generator | None = None) -> int:
    """Epsilon-greedy action over the allowed slots.

    With probability ``epsilon`` a uniformly random allowed slot is drawn
    from ``rng``; otherwise the allowed slot with the highest Q-value wins
    (ties to the lowest index).  A masked slot is never returned.
    """
    import torch

    allowed = np.flatnonzero(mask)
    if len(allowed) == 0:
        raise ValueError("action mask allows no slot")
    if epsilon > 0.0:
        if rng is None:
            raise ValueError("epsilon > 0 requires an rng")
        if rng.random() < epsilon:
            return int(rng.choice(allowed))
    with torch.no_grad():
        q = policy(torch.from_numpy(state).unsqueeze(0)).numpy()[0]
    q = np.where(mask, q, -np.inf)
    return int(np.argmax(q))


# ------------------------------------------------------------------ Q-network


def _make_qnetwork(in_dim: int, out_dim: int, hidden: Sequence[int]):
    import torch

    class QNetwork(torch.nn.Module):
        """Feed-forward state-action value net: ``in_dim`` state features to
        one Q-value per upper slot."""

        def __init__(self) -> None:
            super().__init__()
            dims = [in_dim, *hidden, out_dim]
            layers: list[torch.nn.Module] = []
            for i in range(len(dims) - 1):
                layers.append(torch.nn.Linear(dims[i], dims[i + 1],
                                              dtype=torch.float64))
                if i < len(dims) - 2:
                    layers.append(torch.nn.ReLU())
            self.net = torch.nn.Sequential(*layers)
            self.in_dim = in_dim
            self.out_dim = out_dim
            self.hidden = tuple(int(h) for h in hidden)

        def forward(self, x):
            return self.net(x)

    return QNetwork()


def make_qnetwork(in_dim: int, out_dim: int,
                  hidden: Sequence[int] = (64, 64), seed: int = 0):
    """Freshly initialized policy network (float64, seeded init)."""
    import torch

    torch.manual_seed(seed)
    return _make_qnetwork(in_dim, out_dim, hidden)


def soft_update(policy, target, tau: float) -> None:
    """Interpolate the target parameters toward the policy's:
    ``theta_target = tau * theta_policy + (1 - tau) * theta_target``.

    Scratch buffers are cached on the target so the per-step update does not
    allocate; the arithmetic is the plain mul/mul/add composition above.
    """
    import torch

    bufs = getattr(target, "_blend_bufs", None)
    if bufs is None or len(bufs) != sum(1 for _ in target.parameters()):
        bufs = [(torch.empty_like(p), torch.empty_like(p))
                for p in target.parameters()]
        target._blend_bufs = bufs
    with torch.no_grad():
        for (pt, pp), (b1, b2) in zip(
                zip(target.parameters(), policy.parameters()), bufs):
            torch.mul(pp, tau, out=b1)
            torch.mul(pt, 1.0 - tau, out=b2)
            torch.add(b1, b2, out=pt)


def save_qnetwork(net, path: str | Path) -> None:
    """Store a Q-network as an ``.npz`` of weight arrays.

    Keys, in forward layer order: ``w0, b0, w1, b1, ...`` where ``wi`` is
    the i-th linear layer's weight matrix (shape ``[out, in]``) and ``bi``
    its bias; ``dims`` holds ``[in_dim, hidden..., out_dim]``.
    """
    arrays: dict[str, np.ndarray] = {
        "dims": np.asarray([net.in_dim, *net.hidden, net.out_dim],
                           dtype=np.int64)
    }
    linears = [mod for mod in net.net if hasattr(mod, "weight")]
    for i, lin in enumerate(linears):
        arrays[f"w{i}"] = lin.weight.detach().numpy()
        arrays[f"b{i}"] = lin.bias.detach().numpy()
    np.savez(path, **arrays)


def load_qnetwork(path: str | Path):
    """Rebuild a Q-network saved by :func:`save_qnetwork`."""
    import torch

    with np.load(path) as data:
        dims = [int(d) for d in data["dims"]]
        net = _make_qnetwork(dims[0], dims[-1], dims[1:-1])
        linears = [mod for mod in net.net if hasattr(mod, "weight")]
        with torch.no_grad():
            for i, lin in enumerate(linears):
                lin.weight.copy_(torch.from_numpy(data[f"w{i}"]))
                lin.bias.copy_(torch.from_numpy(data[f"b{i}"]))
    return net


# ------------------------------------------------------------ replay memory


class ReplayMemory:
    """Bounded FIFO store of transitions; sampling is uniform without
    replacement."""

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._buf: deque[Transition] = deque(maxlen=capacity)

    def push(self, t: Transition) -> None:
        self._buf.append(t)

    def sample(self, rng: np.random.Generator,
               batch_size: int) -> list[Transition]:
        k = min(batch_size, len(self._buf))
        idx = rng.choice(len(self._buf), size=k, replace=False)
        return [self._buf[int(i)] for i in idx]

    def __len__(self) -> int:
        return len(self._buf)

    def __iter__(self):
        return iter(self._buf)


# -------------------------------------------------------------- the episode


class _Episode:
    """Mutable state of packing one level: N upper slots filled one node per
    step, with labels remapped to bit positions for the state encoding.

    The encoded state vector and the access total are maintained
    incrementally — ``pack`` touches one slot, so only that slot's block
    changes — producing exactly the values ``encode_state`` and
    ``avg_node_accesses`` would recompute from scratch.
    """

    def __init__(self, items: Sequence[_Item], qid_to_bit: dict[int, int]):
        self.items = items
        self.n = len(items)
        self.m = len(qid_to_bit)
        self.bits = [
            frozenset(qid_to_bit[q] for q in it.labels) for it in items
        ]
        self.slots = [UpperNode(id=i) for i in range(self.n)]
        self.members: list[list[int]] = [[] for _ in range(self.n)]
        self._vec = np.zeros((self.m + 1) * self.n + self.m, dtype=np.float64)
        self._acc_total = 0  # sum of |labels| * (1 + count) over filled slots
        self._filled = 0

    def state(self, i: int) -> np.ndarray:
        out = self._vec.copy()
        if i < self.n:
            base = (self.m + 1) * self.n
            for qid in self.bits[i]:
                out[base + qid] = 1.0
        return out

    def accesses(self, m_denom: int) -> float:
        if m_denom <= 0:
            raise ValueError("m must be positive")
        if self._filled == 0:
            return 1.0
        return self._acc_total / m_denom

    def mask(self) -> np.ndarray:
        return action_mask(self.slots)

    def pack(self, i: int, action: int) -> None:
        it = self.items[i]
        slot = self.slots[action]
        if slot.count > 0:
            self._acc_total -= len(slot.labels) * (1 + slot.count)
        else:
            self._filled += 1
        slot.add(it.id, self.bits[i], it.mbr, it.weight)
        self._acc_total += len(slot.labels) * (1 + slot.count)
        self.members[action].append(i)
        base = action * (self.m + 1)
        for qid in self.bits[i]:
            self._vec[base + qid] = 1.0
        self._vec[base + self.m] = slot.count / self.n

    def emit(self) -> list[UpperNode]:
        """Non-empty slots as upper nodes, labels back in query-id space."""
        out: list[UpperNode] = []
        for member_idx in self.members:
            if not member_idx:
                continue
            node = UpperNode(id=len(out))
            for j in member_idx:
                it = self.items[j]
                node.add(it.id, it.labels, it.mbr, it.weight)
            node.child_ids.sort()
            out.append(node)
        return out


# ----------------------------------------------------------------- training


def _mask_from_state(state: np.ndarray, m: int, n: int) -> np.ndarray:
    """Recover the action mask of an encoded state from its count entries
    (slot j is empty iff entry ``j*(m+1)+m`` is zero)."""
    counts = state[m::m + 1][:n]
    mask = counts > 0
    empties = np.flatnonzero(~mask)
    if len(empties):
        mask[empties[0]] = True
    return mask


def _gradient_step(policy, target, batch: Sequence[Transition], opt,
                   cfg: RlConfig, m: int, n: int) -> float:
    import torch

    s = torch.from_numpy(np.stack([t.state for t in batch]))
    a = torch.tensor([t.action for t in batch], dtype=torch.long)
    r = torch.tensor([t.reward for t in batch], dtype=torch.float64)
    s2 = torch.from_numpy(np.stack([t.next_state for t in batch]))
    live = torch.tensor([not t.terminal for t in batch], dtype=torch.float64)

    q = policy(s).gather(1, a.unsqueeze(1)).squeeze(1)
    with torch.no_grad():
        qn = target(s2)
        if cfg.use_mask:
            # the bootstrap max ranges over the slots actually available in
            # the next state; Q-values of hidden duplicate empty slots are
            # never trained, so letting them into the max feeds garbage
            # targets back into the learned values
            nm = np.stack([_mask_from_state(t.next_state, m, n)
                           for t in batch])
            qn = qn.masked_fill(torch.from_numpy(~nm), -math.inf)
        nxt = qn.max(dim=1).values
    y = r + cfg.gamma * nxt * live
    if cfg.loss == "smooth_l1":
        loss = torch.nn.functional.smooth_l1_loss(q, y, reduction="sum")
    else:
        loss = torch.nn.functional.mse_loss(q, y, reduction="sum")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.detach())


def train_dqn(G: Sequence, W: Workload, cfg: RlConfig = RlConfig(),
              seed: int = 0, metrics_path: str | Path | None = None):
    """Learn a packing policy for one level by deep Q-learning.

    Each epoch replays the whole level from empty slots and a fresh replay
    memory: nodes arrive in the fixed layout order; the agent picks a
    masked epsilon-greedy slot, packs, banks the access-count drop as
    reward, stores the transition, and takes one gradient step on a replay
    batch against the softly-updated target network.  Access averages run
    over the whole workload, so queries a level prunes entirely count as
    zero accesses; the state encoding only spends bits on the queries that
    actually label this level.  Returns the trained policy network.
    ``metrics_path`` writes one CSV row per epoch: mean loss, summed
    reward, final average accesses.
    """
    import torch

    items, qid_to_bit = _level_layout(G)
    n, m = len(items), len(qid_to_bit)
    m_denom = len(W.queries)
    if n < 2:
        raise ValueError("need at least 2 nodes to learn a packing")
    if m == 0:
        raise ValueError("no query labels any node; packing has no signal")
    if m_denom == 0:
        raise ValueError("cannot pack against an empty workload")
    wids = {q.id for q in W}
    if not wids.issuperset(qid_to_bit):
        raise ValueError("node labels reference query ids missing from the "
                         "workload")

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    policy = _make_qnetwork((m + 1) * n + m, n, cfg.hidden)
    target = copy.deepcopy(policy)
    opt = torch.optim.Adam(policy.parameters(), lr=cfg.learning_rate)

    eps = cfg.epsilon_start
    gstep = 0
    rows: list[tuple[int, float, float, float]] = []
    for epoch in range(cfg.epochs):
        memory = ReplayMemory(cfg.replay_capacity)
        ep = _Episode(items, qid_to_bit)
        losses: list[float] = []
        sum_r = 0.0
        na_after = 1.0
        for i in range(n):
            s = ep.state(i)
            na_before = ep.accesses(m_denom)
            mask = ep.mask() if cfg.use_mask else np.ones(n, dtype=bool)
            a = choose_action(policy, s, mask, eps, rng)
            eps = max(cfg.epsilon_floor, eps * cfg.epsilon_decay)
            ep.pack(i, a)
            na_after = ep.accesses(m_denom)
            r = reward(na_before, na_after)
            sum_r += r
            memory.push(Transition(s, a, r, ep.state(i + 1), i == n - 1))
            loss = _gradient_step(policy, target,
                                  memory.sample(rng, cfg.batch_size),
                                  opt, cfg, m, n)
            if not math.isfinite(loss):
                raise RuntimeError(
                    f"packing loss diverged at epoch {epoch} step {i}: "
                    f"loss={loss}, summed reward so far {sum_r:.4g}")
            losses.append(loss)
            gstep += 1
            if gstep % cfg.sync_period == 0:
                soft_update(policy, target, cfg.tau)
        rows.append((epoch, float(np.mean(losses)), sum_r, na_after))

    if metrics_path is not None:
        with open(metrics_path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["epoch", "mean_loss", "sum_reward", "final_accesses"])
            wr.writerows(rows)
    return policy


def pack_level(G_level: Sequence, policy) -> list[UpperNode]:
    """Greedy masked rollout of a trained policy over one level; returns the
    non-empty upper nodes with merged labels, MBRs, and weights."""
    items, qid_to_bit = _level_layout(G_level)
    n, m = len(items), len(qid_to_bit)
    ep = _Episode(items, qid_to_bit)
    if n == 1:
        ep.pack(0, 0)
        return ep.emit()
    expect = (m + 1) * n + m
    if policy.in_dim != expect or policy.out_dim != n:
        raise ValueError(
            f"policy was trained for a different level shape: expected "
            f"input {expect} / output {n}, got {policy.in_dim} / "
            f"{policy.out_dim}")
    for i in range(n):
        a = choose_action(policy, ep.state(i), ep.mask())
        ep.pack(i, a)
    return ep.emit()


# ----------------------------------------------------- grouping accelerator


def group_clusters(G: Sequence, ratio: float, *, method: str = "spectral",
                   seed: int = 0) -> list[list]:
    """Group clusters into ``round(ratio * |G|)`` spatial groups.

    Each cluster is the 4-d point (xb, yb, xu, yu) of its MBR corners;
    groups come from spectral clustering on a nearest-neighbor similarity
    graph (``method="kmeans"`` uses plain k-means instead, and spectral
    failures fall back to it).  Groups are returned in first-appearance
    order of the input.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must be in (0, 1]")
    if method not in ("spectral", "kmeans"):
        raise ValueError(f"unknown grouping method {method!r}")
    nodes = list(G)
    n = len(nodes)
    if n == 0:
        return []
    k = min(n, max(1, int(round(ratio * n))))
    if k == n:
        return [[g] for g in nodes]
    if k == 1:
        return [nodes]

    feats = np.array(
        [[g.mbr.xb, g.mbr.yb, g.mbr.xu, g.mbr.yu] for g in nodes],
        dtype=np.float64)
    assign = None
    if method == "spectral":
        from sklearn.cluster import SpectralClustering

        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                sc = SpectralClustering(
                    n_clusters=k, affinity="nearest_neighbors",
                    n_neighbors=min(10, n - 1), assign_labels="kmeans",
                    random_state=seed)
                assign = sc.fit_predict(feats)
        except Exception as exc:  # degenerate graphs (duplicate rects etc.)
            log.warning("spectral grouping failed (%s); using k-means", exc)
    if assign is None:
        from sklearn.cluster import KMeans

        assign = KMeans(n_clusters=k, random_state=seed,
                        n_init=10).fit_predict(feats)

    order: dict[int, int] = {}
    groups: list[list] = []
    for node, lab in zip(nodes, assign):
        lab = int(lab)
        if lab not in order:
            order[lab] = len(groups)
            groups.append([])
        groups[order[lab]].append(node)
    return groups


def _merge_group(nodes: Sequence, gid: int) -> UpperNode:
    node = UpperNode(id=gid)
    for child in nodes:
        node.add(int(child.id), set(child.labels), child.mbr,
                 _node_weight(child))
    node.child_ids.sort()
    return node


# ------------------------------------------------------------ the hierarchy


def build_hierarchy(clusters: Sequence, W: Workload,
                    cfg: RlConfig = RlConfig(), seed: int = 0,
                    ) -> list[list[UpperNode]]:
    """Stack packed levels over the bottom clusters, bottom-up.

    Per level: train a fresh policy, roll it out greedily, and keep the
    level only if it helps.  A level whose summed greedy reward is <= -N —
    equivalently, whose workload-average accesses reach N + 1, the cost of
    scanning the N input nodes flat — or whose node count fails to shrink
    is discarded and ends the stacking; a kept single-node level ends it
    too (that node is the top).  With ``cfg.group_ratio`` < 1 the clusters
    are first pre-merged into spatial groups, which become the first
    level.  Returns the kept levels bottom-up; node ids are positions
    within their level, and ``child_ids`` refer to the level below (the
    clusters, for the first one).
    """
    if not clusters:
        raise ValueError("need at least one cluster")
    if not len(W.queries):
        raise ValueError("cannot pack against an empty workload")
    m_w = len(W.queries)
    levels: list[list[UpperNode]] = []
    current: Sequence = list(clusters)
    if len(current) == 1:
        return levels

    if cfg.group_ratio < 1.0:
        k = min(len(current), max(1, int(round(cfg.group_ratio * len(current)))))
        if k < len(current):
            groups = group_clusters(current, cfg.group_ratio,
                                    method=cfg.grouping, seed=seed)
            merged = [_merge_group(g, i) for i, g in enumerate(groups)]
            log.info("pre-merged %d clusters into %d spatial groups",
                     len(current), len(merged))
            levels.append(merged)
            current = merged

    for lvl in range(cfg.max_levels):
        n = len(current)
        if n < 2:
            break
        m_eff = len({qid for node in current for qid in node.labels})
        if m_eff == 0:
            log.info("level %d carries no query labels; stopping", lvl)
            break
        policy = train_dqn(current, W, cfg, seed=seed + lvl)
        uppers = pack_level(current, policy)
        na_final = avg_node_accesses(uppers, m_w)
        sum_r = 1.0 - na_final
        if sum_r <= -float(n):
            log.info("level %d discarded: summed reward %.3f <= -%d",
                     lvl, sum_r, n)
            break
        if len(uppers) >= n:
            log.info("level %d discarded: %d nodes did not shrink below %d",
                     lvl, len(uppers), n)
            break
        levels.append(uppers)
        if len(uppers) == 1:
            break
        current = uppers
    return levels
