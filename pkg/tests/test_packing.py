import csv
import math
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoword.core import Query, Rect, Workload
from geoword.packing import (
    ReplayMemory,
    RlConfig,
    Transition,
    UpperNode,
    action_mask,
    avg_node_accesses,
    build_hierarchy,
    choose_action,
    encode_state,
    group_clusters,
    load_qnetwork,
    make_qnetwork,
    pack_level,
    reward,
    save_qnetwork,
    soft_update,
    train_dqn,
)


@dataclass(frozen=True)
class PackNode:
    """Minimal packable node: id, query labels, MBR, object weight."""

    id: int
    labels: frozenset
    mbr: Rect
    weight: int


def unit_rect(i: int = 0) -> Rect:
    return Rect(float(i), 0.0, float(i) + 1.0, 1.0)


def flat_workload(m: int) -> Workload:
    return Workload(tuple(
        Query(i, Rect(0.0, 0.0, 100.0, 100.0), frozenset({i}), "UNI")
        for i in range(m)
    ))


def random_instance(rng: np.random.Generator, n: int, m: int) -> list[PackNode]:
    nodes = []
    for i in range(n):
        nl = int(rng.integers(1, m + 1))
        labels = frozenset(int(x) for x in rng.choice(m, size=nl, replace=False))
        x = float(rng.uniform(0, 100))
        y = float(rng.uniform(0, 100))
        nodes.append(PackNode(i, labels, Rect(x, y, x + rng.uniform(1, 10),
                                              y + rng.uniform(1, 10)),
                              int(rng.integers(1, 50))))
    return nodes


# --------------------------------------------------------- independent oracles


def accesses_oracle(upper, m):
    """Access count by direct per-query enumeration: a query visits each
    non-empty upper node labeled with it and then all that node's children."""
    if not any(u.count > 0 for u in upper):
        return 1.0
    total = 0
    for q in range(m):
        for u in upper:
            if u.count > 0 and q in u.labels:
                total += 1 + u.count
    return total / m


def set_partitions(idx):
    """Every partition of a list of indices into non-empty blocks."""
    if not idx:
        yield []
        return
    first, rest = idx[0], idx[1:]
    for part in set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]
        yield [[first]] + part


def partition_accesses(nodes, blocks, m):
    """Final average accesses of a one-level packing given as index blocks."""
    total = 0
    for blk in blocks:
        labels = frozenset().union(*[nodes[j].labels for j in blk])
        for q in range(m):
            if q in labels:
                total += 1 + len(blk)
    return total / m


def exhaustive_optimum(nodes, m):
    return min(partition_accesses(nodes, p, m)
               for p in set_partitions(list(range(len(nodes)))))


# training profile sized for instances with a handful of nodes: episodes are
# only a few gradient steps long, so propagating credit through the slowly
# interpolated target network needs many epochs and sustained exploration
SMALL = RlConfig(epochs=1000, epsilon_floor=0.1, epsilon_decay=0.9995)
QUICK = RlConfig(epochs=120)


# ----------------------------------------------------------------- unit tests


def test_rlconfig_validation():
    for bad in (dict(gamma=0.0), dict(gamma=1.0), dict(tau=0.0), dict(tau=1.0),
                dict(epochs=0), dict(batch_size=0), dict(replay_capacity=0),
                dict(epsilon_floor=0.5, epsilon_start=0.2),
                dict(epsilon_decay=0.0), dict(sync_period=0),
                dict(learning_rate=0.0), dict(loss="huberish"), dict(hidden=()),
                dict(group_ratio=0.0), dict(group_ratio=1.5),
                dict(grouping="dbscan"), dict(max_levels=0)):
        with pytest.raises(ValueError):
            RlConfig(**bad)


def test_transition_validation():
    s = np.zeros(3)
    with pytest.raises(ValueError):
        Transition(s, -1, 0.0, s, False)


def test_avg_node_accesses_worked_example():
    # {q0,q1} with 2 children and {q1} with 1 child over m=2:
    # q0 visits 1+2=3 nodes, q1 visits (1+2)+(1+1)=5, average 4
    a = UpperNode(0, [10, 11], {0, 1}, unit_rect(0), 2)
    b = UpperNode(1, [12], {1}, unit_rect(1), 1)
    assert avg_node_accesses([a, b], 2) == 4.0
    assert accesses_oracle([a, b], 2) == 4.0


def test_avg_node_accesses_empty_is_one():
    assert avg_node_accesses([], 3) == 1.0
    assert avg_node_accesses([UpperNode(i) for i in range(4)], 3) == 1.0


def test_avg_node_accesses_all_queries_all_nodes():
    # every query labels every node: each query visits the same nodes, so
    # the average equals that common per-query count
    ups = [UpperNode(i, [2 * i, 2 * i + 1], {0, 1, 2}, unit_rect(i), 2)
           for i in range(3)]
    common = sum(1 + u.count for u in ups)
    assert avg_node_accesses(ups, 3) == common
    assert accesses_oracle(ups, 3) == common


def test_avg_node_accesses_requires_positive_m():
    with pytest.raises(ValueError):
        avg_node_accesses([], 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_avg_node_accesses_slot_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 6))
    ups = []
    for i in range(int(rng.integers(1, 7))):
        k = int(rng.integers(0, 4))
        labels = set(int(x) for x in rng.choice(m, size=min(m, k), replace=False))
        children = [int(c) for c in range(k)]
        ups.append(UpperNode(i, children, labels if k else set(),
                             unit_rect(i) if k else None, k))
    base = avg_node_accesses(ups, m)
    perm = [ups[j] for j in rng.permutation(len(ups))]
    assert avg_node_accesses(perm, m) == base
    assert accesses_oracle(ups, m) == pytest.approx(base)


def test_reward_is_plain_difference():
    assert reward(3.0, 2.0) == 1.0
    assert reward(2.5, 2.5) == 0.0
    assert reward(1.0, 4.0) == -3.0


def test_telescoping_sum_of_rewards():
    """Over any action sequence, rewards telescope to initial minus final
    average accesses; exactly so when m is a power of two (all the averages
    are then dyadic rationals)."""
    checked_exact = 0
    for trial in range(100):
        rng = np.random.default_rng(1000 + trial)
        m = int(rng.choice([2, 4, 8]))
        n = int(rng.integers(2, 9))
        nodes = random_instance(rng, n, m)
        slots = [UpperNode(i) for i in range(n)]
        initial = avg_node_accesses(slots, m)
        total = 0.0
        for it in nodes:
            before = avg_node_accesses(slots, m)
            a = int(rng.integers(0, n))  # any slot, masked or not
            slots[a].add(it.id, it.labels, it.mbr, it.weight)
            total += reward(before, avg_node_accesses(slots, m))
        assert total == initial - avg_node_accesses(slots, m)
        checked_exact += 1
    assert checked_exact == 100
    # non-dyadic m telescopes too, up to float accumulation
    for trial in range(10):
        rng = np.random.default_rng(7000 + trial)
        m = int(rng.choice([3, 5, 7]))
        nodes = random_instance(rng, 6, m)
        slots = [UpperNode(i) for i in range(6)]
        initial = avg_node_accesses(slots, m)
        total = 0.0
        for it in nodes:
            before = avg_node_accesses(slots, m)
            a = int(rng.integers(0, 6))
            slots[a].add(it.id, it.labels, it.mbr, it.weight)
            total += reward(before, avg_node_accesses(slots, m))
        assert total == pytest.approx(initial - avg_node_accesses(slots, m),
                                      abs=1e-9)


def test_encode_state_layout():
    ups = [UpperNode(i) for i in range(3)]
    vec = encode_state(ups, {1}, 3, 3)
    assert vec.shape == (15,)
    assert not vec[:12].any()
    assert list(vec[12:]) == [0.0, 1.0, 0.0]

    ups[0].add(7, {0, 2}, unit_rect(0), 5)
    vec = encode_state(ups, set(), 3, 3)
    assert list(vec[:4]) == [1.0, 0.0, 1.0, 1.0]  # labels {0,2} then count 1
    assert not vec[4:].any()
    norm = encode_state(ups, set(), 3, 3, normalize=True)
    assert norm[3] == pytest.approx(1.0 / 3.0)

    with pytest.raises(ValueError):
        encode_state(ups, set(), 3, 4)


def test_action_mask_rules():
    empty = [UpperNode(i) for i in range(3)]
    assert list(action_mask(empty)) == [True, False, False]

    ups = [UpperNode(i) for i in range(4)]
    ups[0].add(1, {0}, unit_rect(0), 1)
    ups[2].add(2, {0}, unit_rect(2), 1)
    assert list(action_mask(ups)) == [True, True, True, False]

    for u in ups:
        if u.empty:
            u.add(9, {0}, unit_rect(9), 1)
    assert list(action_mask(ups)) == [True] * 4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.0, 0.3, 1.0]))
def test_choose_action_never_picks_masked_slot(seed, epsilon):
    rng = np.random.default_rng(seed)
    n, m = 5, 3
    net = make_qnetwork((m + 1) * n + m, n, (8,), seed=seed % 17)
    state = rng.normal(size=(m + 1) * n + m)
    mask = rng.random(n) < 0.5
    if not mask.any():
        mask[int(rng.integers(0, n))] = True
    for _ in range(10):
        a = choose_action(net, state, mask, epsilon, rng)
        assert mask[a]


def test_choose_action_requires_rng_when_exploring():
    net = make_qnetwork(9, 2, (4,))
    with pytest.raises(ValueError):
        choose_action(net, np.zeros(9), np.array([True, True]), 0.5, None)
    with pytest.raises(ValueError):
        choose_action(net, np.zeros(9), np.array([False, False]))


def test_replay_memory_capacity_and_fifo():
    mem = ReplayMemory(4)
    s = np.zeros(2)
    for i in range(10):
        mem.push(Transition(s, i, 0.0, s, False))
        assert len(mem) <= 4
    assert [t.action for t in mem] == [6, 7, 8, 9]  # oldest evicted first
    rng = np.random.default_rng(0)
    batch = mem.sample(rng, 8)
    assert len(batch) == 4
    assert sorted(t.action for t in batch) == [6, 7, 8, 9]
    with pytest.raises(ValueError):
        ReplayMemory(0)


def test_soft_update_is_exact_interpolation():
    import torch

    policy = make_qnetwork(9, 3, (8,), seed=1)
    target = make_qnetwork(9, 3, (8,), seed=2)
    tau = 0.001
    expected = [(tau * p + (1.0 - tau) * t).detach().clone()
                for p, t in zip(policy.parameters(), target.parameters())]
    soft_update(policy, target, tau)
    for want, got in zip(expected, target.parameters()):
        assert want.shape == got.shape
        assert torch.equal(want, got)  # bitwise, no drift


def test_qnetwork_save_load_roundtrip(tmp_path):
    import torch

    net = make_qnetwork(17, 4, (64, 64), seed=5)
    path = tmp_path / "policy.npz"
    save_qnetwork(net, path)
    net2 = load_qnetwork(path)
    assert (net2.in_dim, net2.hidden, net2.out_dim) == (17, (64, 64), 4)
    x = torch.randn(6, 17, dtype=torch.float64)
    assert torch.equal(net(x), net2(x))


# ------------------------------------------------------------------- training


def test_train_dqn_input_validation():
    w = flat_workload(2)
    with pytest.raises(ValueError):
        train_dqn([PackNode(0, frozenset({0}), unit_rect(), 1)], w, QUICK)
    unlabeled = [PackNode(i, frozenset(), unit_rect(i), 1) for i in range(3)]
    with pytest.raises(ValueError):
        train_dqn(unlabeled, w, QUICK)


def test_train_dqn_deterministic_under_seed(tmp_path):
    rng = np.random.default_rng(4)
    nodes = random_instance(rng, 5, 3)
    w = flat_workload(3)
    outs = []
    for run in range(2):
        path = tmp_path / f"metrics_{run}.csv"
        policy = train_dqn(nodes, w, QUICK, seed=11, metrics_path=path)
        packed = pack_level(nodes, policy)
        outs.append((tuple(tuple(u.child_ids) for u in packed),
                     path.read_text()))
    assert outs[0] == outs[1]


def test_train_dqn_metrics_csv(tmp_path):
    rng = np.random.default_rng(4)
    nodes = random_instance(rng, 4, 2)
    path = tmp_path / "metrics.csv"
    cfg = RlConfig(epochs=7)
    train_dqn(nodes, flat_workload(2), cfg, seed=0, metrics_path=path)
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 7
    assert set(rows[0]) == {"epoch", "mean_loss", "sum_reward",
                            "final_accesses"}
    assert all(math.isfinite(float(r["mean_loss"])) for r in rows)


def test_identical_label_pair_merges():
    # merging nodes with the same labels can only reduce accesses:
    # one node of 2 children costs 1+2=3 per query vs 2+2=4 when separate
    nodes = [PackNode(0, frozenset({0, 1}), unit_rect(0), 4),
             PackNode(1, frozenset({0, 1}), unit_rect(1), 4)]
    policy = train_dqn(nodes, flat_workload(2), QUICK, seed=0)
    packed = pack_level(nodes, policy)
    assert len(packed) == 1
    assert sorted(packed[0].child_ids) == [0, 1]


def test_disjoint_label_pair_stays_separate():
    # merging disjoint single-query nodes raises each query's accesses
    # (1+2=3 versus 1+1=2), so the learned packing keeps them apart
    nodes = [PackNode(0, frozenset({0}), unit_rect(0), 4),
             PackNode(1, frozenset({1}), unit_rect(1), 4)]
    policy = train_dqn(nodes, flat_workload(2), QUICK, seed=0)
    packed = pack_level(nodes, policy)
    assert len(packed) == 2


@pytest.mark.parametrize("seed", [1, 7, 8])
def test_small_instance_within_ten_percent_of_optimum(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 7))
    m = int(rng.integers(2, 5))
    nodes = random_instance(rng, n, m)
    m_eff = len({q for c in nodes for q in c.labels})
    opt = exhaustive_optimum(nodes, m_eff)
    policy = train_dqn(nodes, flat_workload(4), SMALL, seed=seed)
    got = avg_node_accesses(pack_level(nodes, policy), m_eff)
    assert got <= 1.10 * opt


def test_masked_training_converges_no_slower(tmp_path):
    """On a fixed instance, training with the action mask reaches the
    unmasked run's converged loss level at least as early as the unmasked
    run does."""
    rng = np.random.default_rng(0)
    nodes = []
    for i in range(12):
        nl = int(rng.integers(1, 4))
        labels = frozenset(int(x) for x in rng.choice(4, size=nl, replace=False))
        x, y = rng.uniform(0, 100, 2)
        nodes.append(PackNode(i, labels, Rect(x, y, x + 5, y + 5),
                              int(rng.integers(1, 50))))
    w = flat_workload(4)

    smoothed = {}
    for tag, use_mask in (("masked", True), ("plain", False)):
        path = tmp_path / f"{tag}.csv"
        cfg = RlConfig(epochs=300, use_mask=use_mask)
        train_dqn(nodes, w, cfg, seed=0, metrics_path=path)
        loss = np.array([float(r["mean_loss"])
                         for r in csv.DictReader(path.open())])
        smoothed[tag] = np.convolve(loss, np.ones(10) / 10, mode="valid")

    level = smoothed["plain"][-1]  # the unmasked run's converged loss
    first_masked = int(np.argmax(smoothed["masked"] <= level))
    first_plain = int(np.argmax(smoothed["plain"] <= level))
    assert smoothed["masked"][first_masked] <= level
    assert first_masked <= first_plain


# ----------------------------------------------------------------- pack_level


def test_pack_level_single_node_needs_no_policy():
    nodes = [PackNode(3, frozenset({0}), unit_rect(0), 2)]
    packed = pack_level(nodes, None)
    assert len(packed) == 1
    assert packed[0].child_ids == [3]
    assert packed[0].labels == {0}


def test_pack_level_rejects_mismatched_policy():
    rng = np.random.default_rng(2)
    nodes = random_instance(rng, 4, 2)
    policy = train_dqn(nodes, flat_workload(2), QUICK, seed=0)
    other = random_instance(rng, 5, 2)
    with pytest.raises(ValueError):
        pack_level(other, policy)


def test_pack_level_assignment_invariants():
    rng = np.random.default_rng(9)
    nodes = random_instance(rng, 6, 3)
    policy = train_dqn(nodes, flat_workload(3), QUICK, seed=3)
    packed = pack_level(nodes, policy)

    assert 1 <= len(packed) <= len(nodes)
    assert [u.id for u in packed] == list(range(len(packed)))
    assigned = sorted(c for u in packed for c in u.child_ids)
    assert assigned == sorted(n.id for n in nodes)  # each node exactly once
    by_id = {n.id: n for n in nodes}
    for u in packed:
        children = [by_id[c] for c in u.child_ids]
        assert u.count == len(u.child_ids)
        assert u.labels == frozenset().union(*[c.labels for c in children])
        assert u.weight == sum(c.weight for c in children)
        assert u.mbr.xb == min(c.mbr.xb for c in children)
        assert u.mbr.yb == min(c.mbr.yb for c in children)
        assert u.mbr.xu == max(c.mbr.xu for c in children)
        assert u.mbr.yu == max(c.mbr.yu for c in children)


# ------------------------------------------------------------------- grouping


def test_group_clusters_identity_when_ratio_one():
    rng = np.random.default_rng(1)
    nodes = random_instance(rng, 8, 2)
    groups = group_clusters(nodes, 1.0)
    assert [len(g) for g in groups] == [1] * 8
    assert [g[0].id for g in groups] == [n.id for n in nodes]


def test_group_clusters_count_follows_ratio():
    rng = np.random.default_rng(1)
    nodes = random_instance(rng, 10, 2)
    assert len(group_clusters(nodes, 0.2, method="kmeans")) == 2
    assert len(group_clusters(nodes, 0.5, method="kmeans")) == 5


@pytest.mark.parametrize("method", ["spectral", "kmeans"])
def test_group_clusters_separates_spatial_blobs(method):
    rng = np.random.default_rng(3)
    blob_a = [PackNode(i, frozenset({0}), Rect(x, y, x + 2, y + 2), 5)
              for i, (x, y) in enumerate(rng.uniform(0, 10, (6, 2)))]
    blob_b = [PackNode(6 + i, frozenset({1}), Rect(x, y, x + 2, y + 2), 5)
              for i, (x, y) in enumerate(rng.uniform(90, 100, (6, 2)))]
    groups = group_clusters(blob_a + blob_b, 2 / 12, method=method, seed=0)
    got = sorted(tuple(sorted(n.id for n in g)) for g in groups)
    assert got == [(0, 1, 2, 3, 4, 5), (6, 7, 8, 9, 10, 11)]


def test_group_clusters_validation():
    nodes = [PackNode(0, frozenset({0}), unit_rect(0), 1)]
    with pytest.raises(ValueError):
        group_clusters(nodes, 0.0)
    with pytest.raises(ValueError):
        group_clusters(nodes, 1.2)
    with pytest.raises(ValueError):
        group_clusters(nodes, 0.5, method="agglomerative")
    assert group_clusters([], 0.5) == []


# ------------------------------------------------------------ build_hierarchy


def test_build_hierarchy_single_cluster_is_flat():
    nodes = [PackNode(0, frozenset({0}), unit_rect(0), 2)]
    assert build_hierarchy(nodes, flat_workload(1), QUICK) == []
    with pytest.raises(ValueError):
        build_hierarchy([], flat_workload(1), QUICK)


def test_build_hierarchy_unlabeled_clusters_stay_flat():
    nodes = [PackNode(i, frozenset(), unit_rect(i), 2) for i in range(4)]
    assert build_hierarchy(nodes, flat_workload(1), QUICK) == []


def test_build_hierarchy_two_identical_pairs():
    """Four clusters forming two label-identical pairs pack into one level
    of exactly those two pairs; a further level would not shrink the node
    count (the pairs' labels are disjoint), so stacking stops there and the
    two nodes become the direct children of the tree root."""
    nodes = [PackNode(0, frozenset({0}), unit_rect(0), 4),
             PackNode(1, frozenset({0}), unit_rect(1), 4),
             PackNode(2, frozenset({1}), unit_rect(5), 4),
             PackNode(3, frozenset({1}), unit_rect(6), 4)]
    # exhaustive check that the pairs are the unique optimal packing
    m = 2
    best = min(set_partitions([0, 1, 2, 3]),
               key=lambda p: partition_accesses(nodes, p, m))
    assert sorted(tuple(sorted(b)) for b in best) == [(0, 1), (2, 3)]

    levels = build_hierarchy(nodes, flat_workload(2), SMALL, seed=0)
    assert len(levels) == 1
    children = sorted(tuple(u.child_ids) for u in levels[0])
    assert children == [(0, 1), (2, 3)]


def test_build_hierarchy_keeps_single_root_level():
    # three clusters labeled by 2 of the workload's 4 queries: merging them
    # costs those two queries 1+3=4 accesses each (what a flat scan of the
    # level costs every query) while the other two queries prune the single
    # node entirely, so the merged level beats flat and is kept
    nodes = [PackNode(i, frozenset({0, 1}), unit_rect(i), 3) for i in range(3)]
    levels = build_hierarchy(nodes, flat_workload(4), SMALL, seed=0)
    assert [len(l) for l in levels] == [1]
    assert sorted(levels[0][0].child_ids) == [0, 1, 2]


def test_build_hierarchy_discards_break_even_level():
    # same clusters, but every workload query labels every cluster: any
    # packing costs each query at least the flat-scan 1+N accesses, the
    # summed greedy reward cannot beat -N, and no level survives
    nodes = [PackNode(i, frozenset({0, 1}), unit_rect(i), 3) for i in range(3)]
    levels = build_hierarchy(nodes, flat_workload(2), SMALL, seed=0)
    assert levels == []


def test_build_hierarchy_group_ratio_premerges():
    rng = np.random.default_rng(3)
    blob_a = [PackNode(i, frozenset({0}), Rect(x, y, x + 2, y + 2), 5)
              for i, (x, y) in enumerate(rng.uniform(0, 10, (6, 2)))]
    blob_b = [PackNode(6 + i, frozenset({1}), Rect(x, y, x + 2, y + 2), 5)
              for i, (x, y) in enumerate(rng.uniform(90, 100, (6, 2)))]
    cfg = RlConfig(epochs=QUICK.epochs, group_ratio=2 / 12)
    levels = build_hierarchy(blob_a + blob_b, flat_workload(2), cfg, seed=0)
    assert levels, "grouping must produce a pre-merged level"
    first = sorted(tuple(u.child_ids) for u in levels[0])
    assert first == [(0, 1, 2, 3, 4, 5), (6, 7, 8, 9, 10, 11)]
    # ids within each level are positional
    assert [u.id for u in levels[0]] == list(range(len(levels[0])))


def test_build_hierarchy_levels_reference_level_below():
    rng = np.random.default_rng(12)
    nodes = random_instance(rng, 6, 2)
    levels = build_hierarchy(nodes, flat_workload(2), QUICK, seed=1)
    below = sorted(n.id for n in nodes)
    for level in levels:
        referenced = sorted(c for u in level for c in u.child_ids)
        assert referenced == below  # exactly the level below, once each
        below = sorted(u.id for u in level)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_episode_bookkeeping_matches_scratch_recompute(seed):
    """The episode's incrementally maintained state vector and access total
    equal a from-scratch encode_state / avg_node_accesses at every step."""
    from geoword.packing import _Episode, _level_layout, encode_state

    rng = np.random.default_rng(400 + seed)
    nodes = random_instance(rng, 7, 5)
    items, qid_to_bit = _level_layout(nodes)
    ep = _Episode(items, qid_to_bit)
    n, m = ep.n, ep.m
    for i in range(n):
        nxt = ep.bits[i]
        want = encode_state(ep.slots, nxt, m, n, normalize=True)
        np.testing.assert_array_equal(ep.state(i), want)
        assert ep.accesses(5) == avg_node_accesses(ep.slots, 5)
        ep.pack(i, int(rng.integers(0, n)))
    np.testing.assert_array_equal(
        ep.state(n), encode_state(ep.slots, frozenset(), m, n, normalize=True))
    assert ep.accesses(5) == avg_node_accesses(ep.slots, 5)
