"""Causal DAGs, d-separation, do-calculus rule checks and exact discrete inference.

The graph machinery (mutilation, Bayes-ball d-separation, the three do-calculus
rules) verifies the five-step backdoor-adjustment argument mechanically, while
``DiscreteScm`` supplies a brute-force interventional oracle via truncated
factorization so every graphical verdict can be cross-checked numerically.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

Node = str
Edge = tuple[str, str]

PROB_TOL = 1e-12

FSED_NODES = ("C", "E", "Q", "S", "T", "Y")
FSED_EDGES = (
    ("E", "T"),
    ("E", "C"),
    ("T", "C"),
    ("T", "S"),
    ("C", "S"),
    ("S", "Y"),
    ("Q", "Y"),
)


class GraphError(ValueError):
    """Malformed graph, unknown node, or invalid node-set argument."""


class ZeroProbabilityError(ValueError):
    """A conditioning event or conditional factor has probability zero."""


def _as_node_set(dag: "CausalDag", nodes: Iterable[Node], what: str) -> frozenset[Node]:
    out = frozenset(nodes)
    unknown = out - set(dag.nodes)
    if unknown:
        raise GraphError(f"unknown node(s) in {what}: {sorted(unknown)}")
    return out


def _require_disjoint(**sets: frozenset[Node]) -> None:
    names = list(sets)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            overlap = sets[a] & sets[b]
            if overlap:
                raise GraphError(f"sets {a} and {b} overlap: {sorted(overlap)}")


@dataclass(frozen=True)
class CausalDag:
    """A finite DAG over string-named nodes.

    Nodes and edges are normalized to sorted tuples so equality is
    order-independent and instances are hashable.
    """

    nodes: tuple[Node, ...]
    edges: tuple[Edge, ...]

    def __post_init__(self) -> None:
        nodes = tuple(sorted(set(self.nodes)))
        if len(nodes) != len(self.nodes):
            raise GraphError("duplicate node names")
        edges = tuple(sorted(self.edges))
        if len(set(edges)) != len(self.edges):
            raise GraphError("duplicate edges")
        node_set = set(nodes)
        for parent, child in edges:
            if parent not in node_set or child not in node_set:
                raise GraphError(f"edge ({parent}, {child}) references undeclared node")
            if parent == child:
                raise GraphError(f"self-loop on {parent}")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)
        self.topological_order()  # raises on cycles

    def parents(self, node: Node) -> frozenset[Node]:
        self._check_node(node)
        return frozenset(p for p, c in self.edges if c == node)

    def children(self, node: Node) -> frozenset[Node]:
        self._check_node(node)
        return frozenset(c for p, c in self.edges if p == node)

    def ancestors(self, nodes: Iterable[Node]) -> frozenset[Node]:
        """Strict ancestors of any node in `nodes`."""
        seed = _as_node_set(self, nodes, "ancestors()")
        seen: set[Node] = set()
        frontier = list(seed)
        while frontier:
            current = frontier.pop()
            for p in self.parents(current):
                if p not in seen:
                    seen.add(p)
                    frontier.append(p)
        return frozenset(seen)

    def descendants(self, nodes: Iterable[Node]) -> frozenset[Node]:
        """Strict descendants of any node in `nodes`."""
        seed = _as_node_set(self, nodes, "descendants()")
        seen: set[Node] = set()
        frontier = list(seed)
        while frontier:
            current = frontier.pop()
            for c in self.children(current):
                if c not in seen:
                    seen.add(c)
                    frontier.append(c)
        return frozenset(seen)

    def topological_order(self) -> tuple[Node, ...]:
        indeg = {n: 0 for n in self.nodes}
        for _, child in self.edges:
            indeg[child] += 1
        ready = sorted(n for n, d in indeg.items() if d == 0)
        order: list[Node] = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for c in sorted(self.children(n)):
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
            ready.sort()
        if len(order) != len(self.nodes):
            raise GraphError("graph contains a cycle")
        return tuple(order)

    def dump(self) -> str:
        """Plain-text dump: one `parent -> child` line per edge, sorted; isolated
        nodes appear as bare lines."""
        lines = [f"{p} -> {c}" for p, c in self.edges]
        linked = {n for e in self.edges for n in e}
        lines.extend(n for n in self.nodes if n not in linked)
        return "\n".join(lines)

    def _check_node(self, node: Node) -> None:
        if node not in self.nodes:
            raise GraphError(f"unknown node: {node!r}")


def fsed_graph() -> CausalDag:
    """The six-node trigger/context/support graph E->T, E->C, T->C, T->S, C->S, S->Y, Q->Y."""
    return CausalDag(FSED_NODES, FSED_EDGES)


def mutilate(
    dag: CausalDag,
    remove_incoming: Iterable[Node] = (),
    remove_outgoing: Iterable[Node] = (),
) -> CausalDag:
    """Return a copy of `dag` with incoming edges of `remove_incoming` and
    outgoing edges of `remove_outgoing` deleted. The input is unchanged."""
    cut_in = _as_node_set(dag, remove_incoming, "remove_incoming")
    cut_out = _as_node_set(dag, remove_outgoing, "remove_outgoing")
    edges = tuple(
        (p, c) for p, c in dag.edges if c not in cut_in and p not in cut_out
    )
    return CausalDag(dag.nodes, edges)


def d_separated(
    dag: CausalDag,
    x: Iterable[Node],
    y: Iterable[Node],
    z: Iterable[Node],
) -> bool:
    """Test whether every undirected path between `x` and `y` is blocked by `z`.

    Linear-time Bayes-ball reachability: a ball entering a node from a child
    ("up") passes to parents and children unless the node is conditioned on; a
    ball entering from a parent ("down") passes to children unless conditioned
    on, and bounces back to parents only at conditioned-or-ancestor-of-
    conditioned colliders.
    """
    xs = _as_node_set(dag, x, "X")
    ys = _as_node_set(dag, y, "Y")
    zs = _as_node_set(dag, z, "Z")
    _require_disjoint(X=xs, Y=ys, Z=zs)

    ancestors_of_z = dag.ancestors(zs) | zs
    # (node, came_from_child) states; starting nodes behave as if entered from
    # a virtual child so both parents and children are explored.
    queue: deque[tuple[Node, bool]] = deque((n, True) for n in xs)
    visited: set[tuple[Node, bool]] = set(queue)
    while queue:
        node, from_child = queue.popleft()
        if node in ys:
            return False
        moves: list[tuple[Node, bool]] = []
        if from_child:
            if node not in zs:
                moves.extend((p, True) for p in dag.parents(node))
                moves.extend((c, False) for c in dag.children(node))
        else:
            if node not in zs:
                moves.extend((c, False) for c in dag.children(node))
            if node in ancestors_of_z:
                moves.extend((p, True) for p in dag.parents(node))
        for state in moves:
            if state not in visited:
                visited.add(state)
                queue.append(state)
    return True


def rule_condition_holds(
    dag: CausalDag,
    rule: int,
    y: Iterable[Node],
    t_do: Iterable[Node],
    z: Iterable[Node],
    w: Iterable[Node],
) -> bool:
    """Check the graphical condition of do-calculus rule 1, 2 or 3.

    Rule 1 (drop an observation):    Y indep Z | T,W  in G with incoming(T) cut.
    Rule 2 (exchange do for see):    Y indep Z | T,W  in G with incoming(T) and
                                     outgoing(Z) cut.
    Rule 3 (drop an intervention):   Y indep Z | T,W  in G with incoming(T) cut
                                     and incoming(Z(W)) cut, where Z(W) holds the
                                     members of Z with no descendant in W once
                                     incoming(T) is cut.
    """
    ys = _as_node_set(dag, y, "Y")
    ts = _as_node_set(dag, t_do, "T_do")
    zs = _as_node_set(dag, z, "Z")
    ws = _as_node_set(dag, w, "W")
    _require_disjoint(Y=ys, T_do=ts, Z=zs, W=ws)
    if rule == 1:
        graph = mutilate(dag, remove_incoming=ts)
    elif rule == 2:
        graph = mutilate(dag, remove_incoming=ts, remove_outgoing=zs)
    elif rule == 3:
        g_t = mutilate(dag, remove_incoming=ts)
        z_w = frozenset(n for n in zs if not (g_t.descendants([n]) & ws))
        graph = mutilate(g_t, remove_incoming=z_w)
    else:
        raise GraphError(f"invalid do-calculus rule id: {rule!r}")
    return d_separated(graph, ys, zs, ts | ws)


@dataclass(frozen=True)
class RuleCondition:
    """One do-calculus condition: the factor it justifies plus the verdict."""

    rule: int
    y: frozenset[Node]
    t_do: frozenset[Node]
    z: frozenset[Node]
    w: frozenset[Node]
    reduces: str
    holds: bool

    def describe(self) -> str:
        def fmt(s: frozenset[Node]) -> str:
            return "{" + ",".join(sorted(s)) + "}"

        return (
            f"rule {self.rule}: {fmt(self.y)} indep {fmt(self.z)} | "
            f"{fmt(self.t_do | self.w)}  [{self.reduces}] -> "
            f"{'holds' if self.holds else 'VIOLATED'}"
        )


@dataclass(frozen=True)
class ProofStep:
    index: int
    rule: str
    conditions: tuple[RuleCondition, ...]
    verdict: bool


@dataclass(frozen=True)
class ProofStepReport:
    """Verdicts for the five-step backdoor-adjustment derivation."""

    steps: tuple[ProofStep, ...]

    @property
    def all_verified(self) -> bool:
        return all(s.verdict for s in self.steps)

    def describe(self) -> str:
        lines = []
        for step in self.steps:
            mark = "ok " if step.verdict else "FAIL"
            lines.append(f"step {step.index} [{mark}] {step.rule}")
            for cond in step.conditions:
                lines.append(f"    {cond.describe()}")
        return "\n".join(lines)


def verify_backdoor_proof(dag: CausalDag) -> ProofStepReport:
    """Mechanically check the five-step reduction of P(Y|do(C),E,Q) to the
    backdoor sum over the given graph.

    Steps 1-2 (total and conditional probability) are algebraic identities.
    Step 3 applies rule 3 twice to drop do(C) from the Y- and t-factors; step 4
    applies rule 1 three times to shrink the conditioning sets of the Y-, s-
    and t-factors; step 5 applies rule 2 to replace do(C) by conditioning in
    the s-factor.
    """
    required = {"E", "T", "C", "S", "Y", "Q"}
    missing = required - set(dag.nodes)
    if missing:
        raise GraphError(f"graph is missing required node(s): {sorted(missing)}")

    def cond(rule: int, y: set, t_do: set, z: set, w: set, reduces: str) -> RuleCondition:
        holds = rule_condition_holds(dag, rule, y, t_do, z, w)
        return RuleCondition(
            rule, frozenset(y), frozenset(t_do), frozenset(z), frozenset(w), reduces, holds
        )

    step1 = ProofStep(1, "total-probability", (), True)
    step2 = ProofStep(2, "conditional-probability", (), True)

    c3 = (
        cond(3, {"Y"}, set(), {"C"}, {"E", "T", "S", "Q"},
             "P(Y|do(C),e,t,s,q) = P(Y|e,t,s,q)"),
        cond(3, {"T"}, set(), {"C"}, {"E", "Q"},
             "P(t|do(C),e,q) = P(t|e,q)"),
    )
    step3 = ProofStep(3, "rule3", c3, all(c.holds for c in c3))

    c4 = (
        cond(1, {"Y"}, set(), {"E", "T"}, {"S", "Q"},
             "P(Y|e,t,s,q) = P(Y|s,q)"),
        cond(1, {"S"}, {"C"}, {"E", "Q"}, {"T"},
             "P(s|do(C),e,t,q) = P(s|do(C),t)"),
        cond(1, {"T"}, set(), {"Q"}, {"E"},
             "P(t|e,q) = P(t|e)"),
    )
    step4 = ProofStep(4, "rule1", c4, all(c.holds for c in c4))

    c5 = (
        cond(2, {"S"}, set(), {"C"}, {"T"},
             "P(s|do(C),t) = P(s|C,t)"),
    )
    step5 = ProofStep(5, "rule2", c5, all(c.holds for c in c5))

    return ProofStepReport((step1, step2, step3, step4, step5))


# ---------------------------------------------------------------------------
# Discrete structural causal models
# ---------------------------------------------------------------------------

Assignment = Mapping[Node, int]


@dataclass(frozen=True)
class DiscreteScm:
    """A DAG with finite node cardinalities and conditional probability tables.

    The CPT of a node has shape ``(card(p1), ..., card(pk), card(node))`` with
    parents ordered lexicographically; every row along the last axis is a
    probability vector.
    """

    dag: CausalDag
    cardinality: Mapping[Node, int]
    cpt: Mapping[Node, np.ndarray]

    def __post_init__(self) -> None:
        card = dict(self.cardinality)
        if set(card) != set(self.dag.nodes):
            raise GraphError("cardinality must cover exactly the graph's nodes")
        for n, c in card.items():
            if int(c) < 1:
                raise GraphError(f"cardinality of {n} must be positive")
        tables: dict[Node, np.ndarray] = {}
        for node in self.dag.nodes:
            if node not in self.cpt:
                raise GraphError(f"missing CPT for node {node}")
            parents = sorted(self.dag.parents(node))
            expect = tuple(card[p] for p in parents) + (card[node],)
            table = np.asarray(self.cpt[node], dtype=float)
            if table.shape != expect:
                raise GraphError(
                    f"CPT shape for {node} is {table.shape}, expected {expect} "
                    f"(parents {parents})"
                )
            if np.any(table < 0):
                raise GraphError(f"CPT for {node} has negative entries")
            sums = table.sum(axis=-1)
            if np.max(np.abs(sums - 1.0)) > PROB_TOL:
                raise GraphError(f"CPT rows for {node} do not sum to 1")
            table = table.copy()
            table.setflags(write=False)
            tables[node] = table
        object.__setattr__(self, "cardinality", card)
        object.__setattr__(self, "cpt", tables)

    def parent_order(self, node: Node) -> tuple[Node, ...]:
        return tuple(sorted(self.dag.parents(node)))

    def joint_shape(self) -> tuple[int, ...]:
        return tuple(self.cardinality[n] for n in self.dag.nodes)

    def joint(self) -> np.ndarray:
        """The full observational joint, axes ordered like `dag.nodes`."""
        out = np.ones(self.joint_shape())
        for node in self.dag.nodes:
            out = out * self._factor_tensor(node)
        return out

    def _factor_tensor(self, node: Node) -> np.ndarray:
        """The node's CPT broadcast against the full joint axis layout."""
        nodes = self.dag.nodes
        involved = list(self.parent_order(node)) + [node]
        axes = [nodes.index(v) for v in involved]
        table = np.transpose(self.cpt[node], np.argsort(axes))
        shape = [
            self.cardinality[n] if i in axes else 1 for i, n in enumerate(nodes)
        ]
        return table.reshape(shape)

    def _indicator(self, node: Node, value: int) -> np.ndarray:
        card = self.cardinality[node]
        if not 0 <= int(value) < card:
            raise GraphError(f"value {value} out of range for node {node} (card {card})")
        vec = np.zeros(card)
        vec[int(value)] = 1.0
        shape = [
            self.cardinality[n] if n == node else 1 for n in self.dag.nodes
        ]
        return vec.reshape(shape)


def _validate_assignment(scm: DiscreteScm, assignment: Assignment, what: str) -> dict[Node, int]:
    out: dict[Node, int] = {}
    for node, value in assignment.items():
        if node not in scm.dag.nodes:
            raise GraphError(f"unknown node in {what}: {node!r}")
        card = scm.cardinality[node]
        if not 0 <= int(value) < card:
            raise GraphError(
                f"{what}[{node}] = {value} out of range (cardinality {card})"
            )
        out[node] = int(value)
    return out


def interventional_distribution(
    scm: DiscreteScm,
    do: Assignment,
    given: Assignment,
    target: Node,
) -> np.ndarray:
    """P(target | do, given) by truncated factorization.

    The joint under intervention keeps the CPT factors of non-intervened nodes
    and pins intervened nodes to their forced values; conditioning then
    renormalizes over assignments consistent with `given`.
    """
    do_map = _validate_assignment(scm, do, "do")
    given_map = _validate_assignment(scm, given, "given")
    overlap = set(do_map) & set(given_map)
    if overlap:
        raise GraphError(f"assignment conflict between do and given: {sorted(overlap)}")
    if target in do_map or target in given_map:
        raise GraphError(f"target {target} must not appear in do or given")
    if target not in scm.dag.nodes:
        raise GraphError(f"unknown target node: {target!r}")

    tensor = np.ones(scm.joint_shape())
    for node in scm.dag.nodes:
        if node in do_map:
            tensor = tensor * scm._indicator(node, do_map[node])
        else:
            tensor = tensor * scm._factor_tensor(node)
    for node, value in given_map.items():
        tensor = tensor * scm._indicator(node, value)

    target_axis = scm.dag.nodes.index(target)
    other_axes = tuple(i for i in range(len(scm.dag.nodes)) if i != target_axis)
    marginal = tensor.sum(axis=other_axes)
    total = marginal.sum()
    if total <= 0.0:
        raise ZeroProbabilityError(
            f"conditioning event {dict(given_map)} has probability zero under do={dict(do_map)}"
        )
    out = marginal / total
    assert abs(out.sum() - 1.0) <= PROB_TOL
    return out


def _conditional_from_joint(
    joint: np.ndarray,
    nodes: tuple[Node, ...],
    target: Node,
    given: Mapping[Node, int],
    factor_name: str,
) -> np.ndarray:
    """Observational P(target | given) read off a joint tensor."""
    tensor = joint
    for node, value in given.items():
        axis = nodes.index(node)
        tensor = np.take(tensor, int(value), axis=axis)
        nodes = nodes[:axis] + nodes[axis + 1 :]
    target_axis = nodes.index(target)
    other = tuple(i for i in range(len(nodes)) if i != target_axis)
    marginal = tensor.sum(axis=other) if other else tensor
    total = marginal.sum()
    if total <= 0.0:
        raise ZeroProbabilityError(
            f"factor {factor_name}: conditioning event {dict(given)} has probability zero"
        )
    return marginal / total


def backdoor_estimate(
    scm: DiscreteScm,
    context_value: int,
    e_value: int,
    q_value: int,
) -> np.ndarray:
    """The backdoor sum over triggers and supports, every factor observational.

    Computes sum_t sum_s P(Y|s,q) P(s|C,t) P(t|e) from the joint distribution
    of `scm`. Zero-weight terms are skipped; a zero-probability conditioning
    event inside a positive-weight term raises, naming the factor.
    """
    if scm.dag != fsed_graph():
        raise GraphError("backdoor_estimate requires the 6-node trigger/context graph")
    _validate_assignment(
        scm, {"C": context_value, "E": e_value, "Q": q_value}, "arguments"
    )
    nodes = scm.dag.nodes
    joint = scm.joint()
    p_t = _conditional_from_joint(joint, nodes, "T", {"E": e_value}, "P(t | e)")
    out = np.zeros(scm.cardinality["Y"])
    for t in range(scm.cardinality["T"]):
        if p_t[t] == 0.0:
            continue
        p_s = _conditional_from_joint(
            joint, nodes, "S", {"C": context_value, "T": t}, "P(s | C, t)"
        )
        for s in range(scm.cardinality["S"]):
            weight = p_t[t] * p_s[s]
            if weight == 0.0:
                continue
            p_y = _conditional_from_joint(
                joint, nodes, "Y", {"S": s, "Q": q_value}, "P(Y | s, q)"
            )
            out += weight * p_y
    assert abs(out.sum() - 1.0) <= 1e-9
    return out


def ci_brute_force(
    scm: DiscreteScm,
    x: Iterable[Node],
    y: Iterable[Node],
    z: Iterable[Node],
    tol: float = 1e-9,
) -> bool:
    """Numerically test X independent of Y given Z in the scm's joint.

    True iff for every z with P(z) > 0 and all (x, y):
    |P(x,y|z) - P(x|z)P(y|z)| <= tol.
    """
    xs = _as_node_set(scm.dag, x, "X")
    ys = _as_node_set(scm.dag, y, "Y")
    zs = _as_node_set(scm.dag, z, "Z")
    _require_disjoint(X=xs, Y=ys, Z=zs)
    nodes = scm.dag.nodes
    joint = scm.joint()

    keep = sorted(xs) + sorted(ys) + sorted(zs)
    axes = [nodes.index(n) for n in keep]
    drop = tuple(i for i in range(len(nodes)) if i not in axes)
    marginal = joint.sum(axis=drop) if drop else joint
    # reorder surviving axes to X..., Y..., Z...
    surviving = [n for n in nodes if nodes.index(n) in axes]
    perm = [surviving.index(n) for n in keep]
    marginal = np.transpose(marginal, perm)

    nx = int(np.prod([scm.cardinality[n] for n in sorted(xs)])) if xs else 1
    ny = int(np.prod([scm.cardinality[n] for n in sorted(ys)])) if ys else 1
    nz = int(np.prod([scm.cardinality[n] for n in sorted(zs)])) if zs else 1
    blocks = marginal.reshape(nx, ny, nz)
    for k in range(nz):
        block = blocks[:, :, k]
        pz = block.sum()
        if pz <= 0.0:
            continue
        pxy = block / pz
        px = pxy.sum(axis=1, keepdims=True)
        py = pxy.sum(axis=0, keepdims=True)
        if np.max(np.abs(pxy - px * py)) > tol:
            return False
    return True


# ---------------------------------------------------------------------------
# Random model generation (test batches and the CLI oracle run)
# ---------------------------------------------------------------------------

def random_dag(rng: np.random.Generator, n_nodes: int, edge_prob: float = 0.4) -> CausalDag:
    """A random DAG: random topological order, each forward pair wired with
    probability `edge_prob`."""
    names = [f"X{i}" for i in range(n_nodes)]
    order = list(rng.permutation(names))
    edges = [
        (order[i], order[j])
        for i in range(n_nodes)
        for j in range(i + 1, n_nodes)
        if rng.random() < edge_prob
    ]
    return CausalDag(tuple(names), tuple(edges))


def random_cpt(rng: np.random.Generator, parent_cards: tuple[int, ...], card: int) -> np.ndarray:
    """Rows of uniform positives, normalized: generic tables without accidental
    independencies or zero-probability conditioning events."""
    raw = rng.uniform(0.05, 1.0, size=parent_cards + (card,))
    return raw / raw.sum(axis=-1, keepdims=True)


def random_scm(
    rng: np.random.Generator,
    dag: CausalDag,
    max_cardinality: int = 3,
) -> DiscreteScm:
    cards = {n: int(rng.integers(2, max_cardinality + 1)) for n in dag.nodes}
    cpts = {}
    for node in dag.nodes:
        parents = tuple(sorted(dag.parents(node)))
        parent_cards = tuple(cards[p] for p in parents)
        cpts[node] = random_cpt(rng, parent_cards, cards[node])
    return DiscreteScm(dag, cards, cpts)


def random_fsed_scm(rng: np.random.Generator, max_cardinality: int = 3) -> DiscreteScm:
    return random_scm(rng, fsed_graph(), max_cardinality)
