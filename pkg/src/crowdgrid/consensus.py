"""Deterministic quorum-based ordering service (three-phase BFT style).

n = 3f+1 in-process nodes agree on a sequence of opaque payloads.  The
simulation runs on a logical-time event queue: all randomness (link delays,
drops) flows from one seed, so identical seeds give identical traces.
Checkpointing and garbage collection are omitted; a view change carries only
the highest prepared certificate, which is enough to preserve safety across
leader changes at desk scale.

Fault injection: ``crash`` nodes never speak; an ``equivocate`` leader sends
conflicting proposals for the same sequence number to different peers.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, replace

import numpy as np


class ConsensusError(Exception):
    pass


@dataclass(frozen=True)
class Proposal:
    """Pre-prepare: the leader's block proposal for (view, seq)."""

    kind: str = field(default="pre-prepare", init=False)
    view: int = 0
    seq: int = 0
    digest: str = ""
    payload: object = None
    sender: int = 0


@dataclass(frozen=True)
class Prepare:
    kind: str = field(default="prepare", init=False)
    view: int = 0
    seq: int = 0
    digest: str = ""
    sender: int = 0


@dataclass(frozen=True)
class Commit:
    kind: str = field(default="commit", init=False)
    view: int = 0
    seq: int = 0
    digest: str = ""
    sender: int = 0


@dataclass(frozen=True)
class ViewChange:
    kind: str = field(default="view-change", init=False)
    new_view: int = 0
    # highest prepared certificate, if any: (view, seq, digest, payload)
    prepared: tuple | None = None
    sender: int = 0


@dataclass(frozen=True)
class NewView:
    kind: str = field(default="new-view", init=False)
    view: int = 0
    prepared: tuple | None = None
    sender: int = 0


Message = Proposal | Prepare | Commit | ViewChange | NewView


class OrdererNode:
    def __init__(self, node_id: int, n: int, behavior: str = "honest"):
        self.id = node_id
        self.n = n
        self.f = (n - 1) // 3
        self.view = 0
        self.behavior = behavior
        self.preprepared: dict = {}  # (view, seq) -> digest first seen
        self.payloads: dict = {}  # digest -> payload
        self.prepares: dict = {}  # (view, seq, digest) -> set of senders
        self.commits: dict = {}
        self.sent_prepare: set = set()  # (view, seq), one prepare each
        self.sent_commit: set = set()
        self.prepared_cert: dict = {}  # seq -> (view, digest)
        self.committed: dict = {}  # seq -> digest
        self.view_votes: dict = {}  # new_view -> {sender: prepared tuple}
        self.equivocation_seen: list = []

    @property
    def quorum(self) -> int:
        return 2 * self.f + 1

    def is_leader(self, view: int | None = None) -> bool:
        v = self.view if view is None else view
        return v % self.n == self.id

    def propose(self, seq: int, payload, digest: str) -> list[Proposal]:
        """Leader-only: emit the pre-prepare(s) for (view, seq)."""
        if not self.is_leader():
            raise ConsensusError(f"node {self.id} is not the leader of view {self.view}")
        msg = Proposal(view=self.view, seq=seq, digest=digest, payload=payload, sender=self.id)
        if self.behavior == "equivocate":
            fork = Proposal(view=self.view, seq=seq, digest=digest + ":fork",
                            payload=payload, sender=self.id)
            return [msg, fork]
        return [msg]

    def handle(self, msg: Message) -> list[Message]:
        """Process one message; returns the broadcasts it triggers."""
        if self.behavior == "crash":
            return []
        out: list[Message] = []
        if isinstance(msg, Proposal):
            if msg.view != self.view or not _leader_of(msg.view, self.n) == msg.sender:
                return []
            key = (msg.view, msg.seq)
            seen = self.preprepared.get(key)
            if seen is not None and seen != msg.digest:
                self.equivocation_seen.append((msg.view, msg.seq, seen, msg.digest))
                return []  # prepare only the first digest per (view, seq)
            if seen is None:
                self.preprepared[key] = msg.digest
                self.payloads[msg.digest] = msg.payload
                if key not in self.sent_prepare:
                    self.sent_prepare.add(key)
                    pr = Prepare(view=msg.view, seq=msg.seq, digest=msg.digest, sender=self.id)
                    out.append(pr)
                    out.extend(self.handle(pr))  # count own vote
        elif isinstance(msg, Prepare):
            votes = self.prepares.setdefault((msg.view, msg.seq, msg.digest), set())
            votes.add(msg.sender)
            prepared = (len(votes) >= self.quorum
                        and self.preprepared.get((msg.view, msg.seq)) == msg.digest)
            if prepared and (msg.view, msg.seq) not in self.sent_commit:
                self.sent_commit.add((msg.view, msg.seq))
                cur = self.prepared_cert.get(msg.seq)
                if cur is None or cur[0] <= msg.view:
                    self.prepared_cert[msg.seq] = (msg.view, msg.digest)
                cm = Commit(view=msg.view, seq=msg.seq, digest=msg.digest, sender=self.id)
                out.append(cm)
                out.extend(self.handle(cm))
        elif isinstance(msg, Commit):
            votes = self.commits.setdefault((msg.view, msg.seq, msg.digest), set())
            votes.add(msg.sender)
            if len(votes) >= self.quorum and msg.seq not in self.committed:
                self.committed[msg.seq] = msg.digest
        elif isinstance(msg, ViewChange):
            if msg.new_view <= self.view:
                return []
            slot = self.view_votes.setdefault(msg.new_view, {})
            slot[msg.sender] = msg.prepared
            if len(slot) >= self.quorum:
                self.view = msg.new_view
                if self.is_leader():
                    best = None
                    for cert in slot.values():
                        if cert is not None and (best is None or cert[0] > best[0]):
                            best = cert
                    out.append(NewView(view=self.view, prepared=best, sender=self.id))
        elif isinstance(msg, NewView):
            if msg.view >= self.view and _leader_of(msg.view, self.n) == msg.sender:
                self.view = msg.view
        return out

    def highest_prepared(self) -> tuple | None:
        if not self.prepared_cert:
            return None
        seq = max(self.prepared_cert)
        view, digest = self.prepared_cert[seq]
        return (view, seq, digest, self.payloads.get(digest))

    def make_view_change(self) -> ViewChange:
        return ViewChange(new_view=self.view + 1, prepared=self.highest_prepared(),
                          sender=self.id)


def _leader_of(view: int, n: int) -> int:
    return view % n


@dataclass
class NetworkSim:
    """Seeded event-queue message fabric between the orderer nodes."""

    n_nodes: int = 4
    seed: int = 0
    delay_range: tuple[float, float] = (1.0, 2.0)
    drop_prob: float = 0.0
    rng: np.random.Generator = field(init=False, repr=False)
    queue: list = field(default_factory=list, repr=False)
    now: float = 0.0
    _counter: int = 0
    trace: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def send(self, src: int, dst: int, msg: Message):
        # a dropped message is retried with backoff, so anything sent between
        # honest nodes is eventually delivered whenever drop_prob < 1
        delay = 0.0
        while self.drop_prob > 0 and self.rng.random() < self.drop_prob:
            self.trace.append({"t": self.now + delay, "drop": True, "src": src,
                               "dst": dst, "kind": msg.kind})
            delay += float(self.rng.uniform(*self.delay_range)) * 4.0
        delay += float(self.rng.uniform(*self.delay_range))
        self._counter += 1
        heapq.heappush(self.queue, (self.now + delay, self._counter, src, dst, msg))

    def broadcast(self, src: int, msg: Message, include_self: bool = False):
        for dst in range(self.n_nodes):
            if dst != src or include_self:
                self.send(src, dst, msg)

    def pop(self):
        if not self.queue:
            return None
        t, _, src, dst, msg = heapq.heappop(self.queue)
        self.now = t
        return src, dst, msg


@dataclass
class RunResult:
    committed: dict  # node id -> {seq: digest}
    payloads: dict  # digest -> payload (from honest nodes)
    stalled: bool
    steps: int
    view_changes: int
    trace: list
    equivocations: int

    def committed_sequence(self, node_id: int) -> list[str]:
        com = self.committed[node_id]
        return [com[s] for s in sorted(com)]


def run(network: NetworkSim, nodes: list[OrdererNode], batches: list, *,
        max_steps: int = 20_000, timeout: float = 60.0) -> RunResult:
    """Drive the ordering of ``batches``, a list of (payload, digest) pairs.

    Every node knows the batch queue (clients broadcast submissions), arms a
    timer whenever work is pending, and fires a view change on silence.
    Returns each node's committed map plus the full message trace; a
    liveness failure surfaces via ``stalled``, never hidden.
    """
    if not batches:
        return RunResult(committed={nd.id: {} for nd in nodes}, payloads={},
                         stalled=False, steps=0, view_changes=0, trace=[], equivocations=0)
    n = len(nodes)
    if n != 3 * ((n - 1) // 3) + 1:
        raise ConsensusError(f"n={n} is not of the form 3f+1")
    total = len(batches)
    proposed: set = set()
    fired_views: set = set()
    steps = 0

    def arm(nd: OrdererNode):
        if nd.behavior != "crash" and len(nd.committed) < total:
            network._counter += 1
            heapq.heappush(network.queue, (network.now + timeout, network._counter,
                                           nd.id, nd.id, ("timer", len(nd.committed))))

    def deliver_replies(nd: OrdererNode, replies):
        for reply in replies:
            network.broadcast(nd.id, reply)

    def leader_drive():
        # current leaders propose the next uncommitted sequence
        for nd in nodes:
            if nd.behavior == "crash" or not nd.is_leader():
                continue
            seq = len(nd.committed) + 1
            if seq <= total and (nd.view, seq) not in proposed:
                proposed.add((nd.view, seq))
                payload, digest = batches[seq - 1]
                cert = nd.prepared_cert.get(seq)
                if cert is not None:
                    # safety: a prepared sequence must be re-proposed as-is
                    digest = cert[1]
                    payload = nd.payloads.get(digest, payload)
                proposals = nd.propose(seq, payload, digest)
                for i, msg in enumerate(proposals):
                    if i == 0:
                        network.broadcast(nd.id, msg)
                    else:
                        # the conflicting fork goes to half the peers, so some
                        # nodes see both digests and some only the fork first
                        for dst in range(n):
                            if dst != nd.id and dst % 2 == 1:
                                network.send(nd.id, dst, msg)
                deliver_replies(nd, nd.handle(proposals[0]))

    for nd in nodes:
        arm(nd)
    leader_drive()

    while steps < max_steps:
        if all(len(nd.committed) >= total for nd in nodes if nd.behavior != "crash"):
            break
        item = network.pop()
        steps += 1
        if item is None:
            break  # nothing in flight and no timers left: give up immediately
        src, dst, msg = item
        node = nodes[dst]
        if isinstance(msg, tuple) and msg[0] == "timer":
            if node.behavior == "crash" or len(node.committed) != msg[1] \
                    or len(node.committed) >= total:
                continue  # stale timer: progress happened since it was armed
            vc = node.make_view_change()
            fired_views.add(vc.new_view)
            network.trace.append({"t": network.now, "src": dst, "dst": "*",
                                  "kind": "view-change", "view": vc.new_view})
            network.broadcast(node.id, vc)
            deliver_replies(node, node.handle(vc))
            arm(node)
            leader_drive()
            continue
        before = len(node.committed)
        network.trace.append({"t": network.now, "src": src, "dst": dst, "kind": msg.kind,
                              "view": getattr(msg, "view", getattr(msg, "new_view", -1)),
                              "seq": getattr(msg, "seq", -1)})
        deliver_replies(node, node.handle(msg))
        if len(node.committed) > before:
            arm(node)  # progress: restart the silence timer
        leader_drive()

    honest = [nd for nd in nodes if nd.behavior != "crash"]
    stalled = any(len(nd.committed) < total for nd in honest)
    payloads = {}
    for nd in honest:
        payloads.update({d: nd.payloads.get(d) for d in nd.committed.values()})
    return RunResult(committed={nd.id: dict(nd.committed) for nd in nodes},
                     payloads=payloads, stalled=stalled, steps=steps,
                     view_changes=len(fired_views), trace=network.trace,
                     equivocations=sum(len(nd.equivocation_seen) for nd in nodes))


def safety_violations(result: RunResult, nodes: list[OrdererNode]) -> list[tuple]:
    """Pairs of honest nodes that committed different digests at one seq."""
    out = []
    honest = [nd.id for nd in nodes if nd.behavior != "crash"]
    for i in honest:
        for j in honest:
            if j <= i:
                continue
            common = set(result.committed[i]) & set(result.committed[j])
            for seq in common:
                if result.committed[i][seq] != result.committed[j][seq]:
                    out.append((i, j, seq))
    return out


def trace_jsonl(result: RunResult) -> str:
    return "\n".join(json.dumps(ev, sort_keys=True) for ev in result.trace) + "\n"
