"""Prefix-tree KV cache over a finite slot pool.

One slot holds the KV state of one token. Nodes store contiguous token
segments; siblings are keyed by the first page of their segment. Eviction is
leaf-only LRU, skips pinned nodes, and either discards the slots or moves the
node to an unbounded host tier (offload).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence


class Tier(enum.Enum):
    DEVICE = "device"
    HOST = "host"


class EvictMode(enum.Enum):
    DISCARD = "discard"
    OFFLOAD = "offload"


class InsufficientSlots(Exception):
    """Raised when an insert cannot be satisfied even after eviction."""


class UnpinUnderflow(Exception):
    """Raised when a node would be unpinned more times than it was pinned."""


class SlotPool:
    """Fixed pool of KV slots handed out by index."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        # popped from the end, so slot 0 goes out first
        self._free = list(range(capacity - 1, -1, -1))

    @property
    def free(self) -> int:
        return len(self._free)

    @property
    def used(self) -> int:
        return self.capacity - len(self._free)

    def allocate(self, n: int) -> list[int]:
        if n > len(self._free):
            raise InsufficientSlots(f"need {n} slots, {len(self._free)} free")
        if n == 0:
            return []
        out = self._free[-n:]
        del self._free[-n:]
        out.reverse()
        return out

    def release(self, slots: Iterable[int]) -> None:
        self._free.extend(slots)


@dataclass(eq=False)
class CacheNode:
    segment: tuple
    slots: list
    parent: Optional["CacheNode"]
    ordinal: int
    last_access: int = 0
    pin_count: int = 0
    tier: Tier = Tier.DEVICE
    children: dict = field(default_factory=dict)
    device_children: int = 0

    def __repr__(self) -> str:
        return (
            f"CacheNode(#{self.ordinal}, len={len(self.segment)}, {self.tier.value}, "
            f"pins={self.pin_count}, t={self.last_access})"
        )


def _common_prefix(seg: tuple, tokens: Sequence, start: int) -> int:
    n = min(len(seg), len(tokens) - start)
    if tuple(tokens[start:start + n]) == seg[:n]:
        return n
    i = 0
    while i < n and seg[i] == tokens[start + i]:
        i += 1
    return i


class CacheTree:
    """Radix-style prefix cache with LRU eviction and pin protection.

    Parameters
    ----------
    capacity : int
        Number of device slots.
    page_size : int
        Matching and insertion granularity in tokens. Sequences are truncated
        to a whole number of pages, so every node boundary is page aligned.
    evict_mode : EvictMode
        What eviction does with a victim's slots.
    on_evict : callable, optional
        ``on_evict(node, mode)`` is called for every victim before it is
        detached or moved to the host tier.
    """

    def __init__(
        self,
        capacity: int,
        page_size: int = 1,
        evict_mode: EvictMode = EvictMode.DISCARD,
        on_evict: Optional[Callable[[CacheNode, EvictMode], None]] = None,
    ):
        if page_size < 1:
            raise ValueError("page_size must be >= 1")
        self.pool = SlotPool(capacity)
        self.page_size = page_size
        self.evict_mode = evict_mode
        self.on_evict = on_evict
        self.clock = 0
        self._next_ordinal = 1
        self.root = CacheNode(segment=(), slots=[], parent=None, ordinal=0)
        self._device: dict[int, CacheNode] = {}
        self.locked_slots = 0
        self.tokens_matched = 0
        self.tokens_requested = 0
        self.evicted_tokens = 0
        self.offloaded_tokens = 0
        self.reloaded_tokens = 0
        self.last_path: list[CacheNode] = []

    # -- bookkeeping ---------------------------------------------------------

    def _tick(self) -> int:
        self.clock += 1
        return self.clock

    def _new_node(self, segment, slots, parent, tier=Tier.DEVICE) -> CacheNode:
        node = CacheNode(segment=segment, slots=slots, parent=parent,
                         ordinal=self._next_ordinal, tier=tier)
        self._next_ordinal += 1
        if tier is Tier.DEVICE:
            self._device[node.ordinal] = node
        return node

    def _attach(self, parent: CacheNode, child: CacheNode) -> None:
        parent.children[self._key(child.segment)] = child
        child.parent = parent
        if child.tier is Tier.DEVICE:
            parent.device_children += 1

    def _detach(self, child: CacheNode) -> None:
        parent = child.parent
        del parent.children[self._key(child.segment)]
        if child.tier is Tier.DEVICE:
            parent.device_children -= 1

    def _set_tier(self, node: CacheNode, tier: Tier) -> None:
        if node.tier is tier:
            return
        delta = 1 if tier is Tier.DEVICE else -1
        node.tier = tier
        if node.parent is not None:
            node.parent.device_children += delta
        if tier is Tier.DEVICE:
            self._device[node.ordinal] = node
        else:
            self._device.pop(node.ordinal, None)

    def _truncate(self, tokens: Sequence) -> Sequence:
        if self.page_size == 1:
            return tokens
        n = len(tokens) - len(tokens) % self.page_size
        return tokens[:n]

    def _key(self, tokens: Sequence, start: int = 0) -> tuple:
        # siblings are keyed by their whole first page; a one-token key would
        # collide for siblings that diverge inside the first page
        return tuple(tokens[start:start + self.page_size])

    def _page_floor(self, n: int) -> int:
        return n - n % self.page_size

    def _split(self, node: CacheNode, k: int) -> CacheNode:
        """Split ``node`` so its first ``k`` tokens live in a new parent.

        The original object keeps the tail, so pins held through it remain
        valid: walking up from it now passes through the new head.
        """
        parent = node.parent
        self._detach(node)
        head = self._new_node(node.segment[:k], node.slots[:k], parent, node.tier)
        head.last_access = node.last_access
        head.pin_count = node.pin_count
        node.segment = node.segment[k:]
        node.slots = node.slots[k:] if node.tier is Tier.DEVICE else []
        self._attach(parent, head)
        self._attach(head, node)
        return head

    def _walk(self, tokens: Sequence, *, device_only: bool, split: bool):
        """Follow ``tokens`` from the root.

        Returns ``(matched_len, path)``. With ``split`` a partially matched
        node is split so that the path ends exactly at ``matched_len``.
        """
        node = self.root
        path: list[CacheNode] = []
        i = 0
        n = len(tokens)
        while i < n:
            child = node.children.get(self._key(tokens, i))
            if child is None or (device_only and child.tier is not Tier.DEVICE):
                break
            common = self._page_floor(_common_prefix(child.segment, tokens, i))
            if common == 0:
                break
            if common < len(child.segment):
                if not split:
                    path.append(child)
                    i += common
                    break
                child = self._split(child, common)
            path.append(child)
            i += common
            node = child
            if common < len(child.segment):
                break
        return i, path

    # -- public operations ---------------------------------------------------

    def match_prefix(self, tokens: Sequence) -> tuple[int, list[CacheNode]]:
        """Longest device-resident prefix of ``tokens``.

        Refreshes the LRU timestamp of every node on the matched path and
        accumulates the request into the hit window.
        """
        tokens = self._truncate(tokens)
        matched, path = self._walk(tokens, device_only=True, split=True)
        stamp = self._tick()
        for node in path:
            node.last_access = stamp
        self.tokens_matched += matched
        self.tokens_requested += len(tokens)
        return matched, path

    def _reclaimable(self, path: Sequence[CacheNode], matched: Optional[int] = None) -> int:
        # every unpinned device node is reachable by repeated leaf eviction;
        # the caller's matched prefix is protected while it inserts. On an
        # unsplit path only the matched head of the last node is protected.
        protected, pos = 0, 0
        for nd in path:
            size = len(nd.segment) if matched is None else min(len(nd.segment), matched - pos)
            pos += len(nd.segment)
            if nd.tier is Tier.DEVICE and nd.pin_count == 0:
                protected += size
        return self.pool.used - self.locked_slots - protected

    def required_slots(self, tokens: Sequence) -> int:
        """Slots an ``insert(tokens)`` would allocate, without side effects."""
        tokens = self._truncate(tokens)
        matched, path = self._walk(tokens, device_only=False, split=False)
        host = 0
        pos = 0
        for nd in path:
            seg_used = min(len(nd.segment), matched - pos)
            if nd.tier is Tier.HOST:
                host += seg_used
            pos += len(nd.segment)
        return host + len(tokens) - matched

    def can_insert(self, tokens: Sequence) -> bool:
        tokens = self._truncate(tokens)
        need = self.required_slots(tokens)
        if need <= self.pool.free:
            return True
        matched, path = self._walk(tokens, device_only=False, split=False)
        return need <= self.pool.free + self._reclaimable(path, matched)

    def insert(self, tokens: Sequence) -> int:
        """Make ``tokens`` fully device resident; returns slots allocated.

        Host-tier nodes on the path are brought back as fresh allocations
        (recomputed, not transferred). Evicts unpinned LRU leaves as needed.
        """
        tokens = self._truncate(tokens)
        matched, path = self._walk(tokens, device_only=False, split=True)
        host_nodes = [nd for nd in path if nd.tier is Tier.HOST]
        need = sum(len(nd.segment) for nd in host_nodes) + len(tokens) - matched
        if need > self.pool.free:
            if need > self.pool.free + self._reclaimable(path):
                raise InsufficientSlots(
                    f"need {need} slots; free {self.pool.free}, "
                    f"reclaimable {self._reclaimable(path)}"
                )
            anchor = path[-1] if path else None
            if anchor is not None:
                self._pin_from(anchor)
            try:
                self.evict(need - self.pool.free)
            finally:
                if anchor is not None:
                    self._unpin_from(anchor)
        for nd in host_nodes:
            nd.slots = self.pool.allocate(len(nd.segment))
            self._set_tier(nd, Tier.DEVICE)
            if nd.pin_count:
                self.locked_slots += len(nd.slots)
        if matched < len(tokens):
            parent = path[-1] if path else self.root
            seg = tuple(tokens[matched:])
            leaf = self._new_node(seg, self.pool.allocate(len(seg)), parent)
            self._attach(parent, leaf)
            path.append(leaf)
        stamp = self._tick()
        for nd in path:
            nd.last_access = stamp
        self.last_path = path
        return need

    def insert_path(self, tokens: Sequence) -> tuple[int, list[CacheNode]]:
        """Like :meth:`insert` but also returns the resident path."""
        need = self.insert(tokens)
        return need, self.last_path

    def load_back(self, tokens: Sequence) -> tuple[int, list[CacheNode]]:
        """Reload host-tier nodes that continue the device prefix of ``tokens``.

        Returns ``(reloaded_tokens, path)`` where ``path`` ends at the deepest
        device node after reloading. Reloaded tokens count as hits. Stops at the
        first node that cannot be given slots.
        """
        tokens = self._truncate(tokens)
        matched, path = self._walk(tokens, device_only=False, split=True)
        reloaded = 0
        device_path: list[CacheNode] = []
        for nd in path:
            if nd.tier is Tier.HOST:
                size = len(nd.segment)
                if size > self.pool.free:
                    reclaim = self._reclaimable(device_path)
                    if size > self.pool.free + reclaim:
                        break
                    anchor = device_path[-1] if device_path else None
                    if anchor is not None:
                        self._pin_from(anchor)
                    try:
                        self.evict(size - self.pool.free)
                    finally:
                        if anchor is not None:
                            self._unpin_from(anchor)
                nd.slots = self.pool.allocate(size)
                self._set_tier(nd, Tier.DEVICE)
                if nd.pin_count:
                    self.locked_slots += size
                reloaded += size
            device_path.append(nd)
        if reloaded:
            stamp = self._tick()
            for nd in device_path:
                nd.last_access = stamp
        self.reloaded_tokens += reloaded
        self.tokens_matched += reloaded
        return reloaded, device_path

    def release(self, tokens: Sequence) -> int:
        """Make the unshared, unpinned tail of ``tokens`` first to evict.

        Used when an owner is done with a sequence for good. The tail stays
        resident (later requests may still hit it) but sorts before every
        other node in LRU order. Walks up from the deepest node and stops at
        the first node that is pinned or has other children. Returns the
        tokens demoted.
        """
        _, path = self._walk(self._truncate(tokens), device_only=False, split=False)
        demoted = 0
        below = None
        for node in reversed(path):
            if node.pin_count or len(node.children) > (below is not None):
                break
            node.last_access = -1
            demoted += len(node.segment)
            below = node
        return demoted

    def _evictable(self) -> Optional[CacheNode]:
        best = None
        for node in self._device.values():
            if node.pin_count or node.device_children:
                continue
            if best is None or (node.last_access, node.ordinal) < (best.last_access, best.ordinal):
                best = node
        return best

    def evict(self, needed: int, mode: Optional[EvictMode] = None) -> int:
        """Free at least ``needed`` device slots if unpinned leaves allow.

        Victims are unpinned nodes without device children, least recently
        used first (ties: oldest node). Returns the slots reclaimed, which may
        be less than ``needed``.
        """
        if needed <= 0:
            raise ValueError("needed must be positive")
        mode = mode or self.evict_mode
        reclaimed = 0
        while reclaimed < needed:
            victim = self._evictable()
            if victim is None:
                break
            if self.on_evict is not None:
                self.on_evict(victim, mode)
            size = len(victim.slots)
            self.pool.release(victim.slots)
            victim.slots = []
            if mode is EvictMode.DISCARD:
                self._detach(victim)
                self._drop_subtree(victim)
            else:
                self._set_tier(victim, Tier.HOST)
                self.offloaded_tokens += size
            reclaimed += size
        self.evicted_tokens += reclaimed
        return reclaimed

    def _drop_subtree(self, node: CacheNode) -> None:
        stack = [node]
        while stack:
            nd = stack.pop()
            self._device.pop(nd.ordinal, None)
            stack.extend(nd.children.values())

    def _pin_from(self, node: CacheNode) -> None:
        while node is not None and node is not self.root:
            if node.pin_count == 0:
                self.locked_slots += len(node.slots)
            node.pin_count += 1
            node = node.parent

    def _unpin_from(self, node: CacheNode) -> None:
        probe = node
        while probe is not None and probe is not self.root:
            if probe.pin_count == 0:
                raise UnpinUnderflow(f"{probe!r} is not pinned")
            probe = probe.parent
        while node is not None and node is not self.root:
            node.pin_count -= 1
            if node.pin_count == 0:
                self.locked_slots -= len(node.slots)
            node = node.parent

    def pin_path(self, path: Sequence[CacheNode]) -> None:
        """Pin every node from the deepest node of ``path`` up to the root."""
        if path:
            self._pin_from(path[-1])

    def unpin_path(self, path: Sequence[CacheNode]) -> None:
        if path:
            self._unpin_from(path[-1])

    # -- signals -------------------------------------------------------------

    def usage(self) -> float:
        """Fraction of device slots holding any cached token."""
        return self.pool.used / self.pool.capacity

    def locked_usage(self) -> float:
        """Fraction of device slots held by pinned (in-flight) requests."""
        return self.locked_slots / self.pool.capacity

    def hit_rate(self) -> float:
        if self.tokens_requested == 0:
            return 1.0
        return self.tokens_matched / self.tokens_requested

    def reset_hit_window(self) -> None:
        self.tokens_matched = 0
        self.tokens_requested = 0

    # -- diagnostics ---------------------------------------------------------

    def nodes(self):
        """Yield ``(depth, node)`` for every non-root node, depth first."""
        stack = [(1, c) for c in reversed(self._sorted_children(self.root))]
        while stack:
            depth, node = stack.pop()
            yield depth, node
            stack.extend((depth + 1, c) for c in reversed(self._sorted_children(node)))

    @staticmethod
    def _sorted_children(node: CacheNode) -> list[CacheNode]:
        return sorted(node.children.values(), key=lambda c: c.ordinal)

    def node_tokens(self, node: CacheNode) -> tuple:
        """Full token sequence from the root through the end of ``node``."""
        parts = []
        while node is not None and node is not self.root:
            parts.append(node.segment)
            node = node.parent
        out: tuple = ()
        for seg in reversed(parts):
            out += seg
        return out

    def dump(self) -> str:
        lines = ["depth seg_len tier pin_count last_access"]
        for depth, node in self.nodes():
            lines.append(
                f"{depth} {len(node.segment)} {node.tier.value} "
                f"{node.pin_count} {node.last_access}"
            )
        return "\n".join(lines) + "\n"

    def check_invariants(self) -> None:
        """Assert structural invariants; used by tests and checked runs."""
        pool = self.pool
        assert pool.used + pool.free == pool.capacity
        assert 0 <= pool.used <= pool.capacity
        device_slots = 0
        locked = 0
        seen = 0
        for _, node in self.nodes():
            seen += 1
            assert node.segment, "non-root node with empty segment"
            assert node.parent.children[self._key(node.segment)] is node
            assert node.pin_count >= 0
            if node.tier is Tier.DEVICE:
                assert len(node.slots) == len(node.segment)
                assert node.parent is self.root or node.parent.tier is Tier.DEVICE
                device_slots += len(node.slots)
                if node.pin_count:
                    locked += len(node.slots)
            else:
                assert not node.slots
            assert node.device_children == sum(
                c.tier is Tier.DEVICE for c in node.children.values())
            if node.pin_count:
                assert node.parent is self.root or node.parent.pin_count >= node.pin_count
        assert device_slots == pool.used, (device_slots, pool.used)
        assert locked == self.locked_slots, (locked, self.locked_slots)
        assert len(self._device) == sum(
            1 for _, n in self.nodes() if n.tier is Tier.DEVICE)
