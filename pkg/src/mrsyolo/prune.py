"""LAMP scoring, global unstructured pruning and dependency-aware channel pruning."""

from __future__ import annotations

import base64
import copy
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .head import SRU
from .nn import Conv2d, Module


class PruneError(ValueError):
    pass


class RateUnreachable(PruneError):
    def __init__(self, rate: float, closest: float):
        self.rate, self.closest = rate, closest
        super().__init__(f"rate {rate:.4f} unreachable under channel constraints; "
                         f"closest achievable {closest:.4f}")


# ---------------------------------------------------------------------------
# LAMP

@dataclass
class LampScores:
    """Per-layer scores in ascending-magnitude order (ties: lower index first)."""

    index: np.ndarray
    magnitude: np.ndarray
    score: np.ndarray

    def by_index(self) -> np.ndarray:
        out = np.empty_like(self.score)
        out[self.index] = self.score
        return out


def lamp_scores(weights) -> LampScores:
    """score(u) = w_u^2 / sum of w_v^2 over v at or after u in ascending-|w| order.

    An all-zero suffix gives 0/0, taken as 0; the largest weight always
    scores exactly 1.
    """
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size == 0:
        raise ValueError("cannot score an empty layer")
    if not np.all(np.isfinite(w)):
        raise ValueError("layer contains non-finite weights")
    mag = np.abs(w)
    order = np.argsort(mag, kind="stable")
    top = mag.max()
    # scores are scale-free; normalizing first keeps tiny layers from underflowing
    sq = (mag[order] / top) ** 2 if top > 0 else np.zeros(mag.size)
    suffix = np.cumsum(sq[::-1])[::-1]
    score = np.divide(sq, suffix, out=np.zeros_like(sq), where=suffix > 0)
    score[-1] = 1.0
    return LampScores(order, mag[order], score)


def channel_magnitudes(conv: Conv2d) -> np.ndarray:
    w = conv.weight.data.reshape(conv.out_channels, -1)
    sq = np.sum(w * w, axis=1)
    if conv.bias is not None:
        sq = sq + conv.bias.data ** 2
    return np.sqrt(sq)


def channel_importance(conv: Conv2d) -> np.ndarray:
    """LAMP over per-output-channel filter norms (bias included), original order."""
    return lamp_scores(channel_magnitudes(conv)).by_index()


# ---------------------------------------------------------------------------
# plans

def _pack_mask(mask: np.ndarray) -> dict:
    return {"shape": list(mask.shape),
            "bits": base64.b64encode(np.packbits(mask.reshape(-1)).tobytes()).decode("ascii")}


def _unpack_mask(d: dict) -> np.ndarray:
    shape = tuple(d["shape"])
    n = int(np.prod(shape))
    bits = np.frombuffer(base64.b64decode(d["bits"]), dtype=np.uint8)
    return np.unpackbits(bits)[:n].astype(bool).reshape(shape)


@dataclass
class DependencyGroup:
    """Connected channel spaces that must be pruned consistently.

    ``producers`` are the conv layers whose output channels live in the group,
    ``consumers`` the layers reading them (with the input positions they read).
    Channels are removed in multiples of ``granularity`` per producer.
    """

    id: int
    producers: list
    consumers: dict
    granularity: int
    pinned: bool
    channels: dict                      # producer -> channel count before pruning
    kept: dict = field(default_factory=dict)   # producer -> surviving indices

    def to_json(self) -> dict:
        return {"id": self.id, "producers": self.producers,
                "consumers": {k: list(map(int, v)) for k, v in self.consumers.items()},
                "granularity": self.granularity, "pinned": self.pinned,
                "channels": self.channels,
                "kept": {k: list(map(int, v)) for k, v in self.kept.items()}}


@dataclass
class PrunePlan:
    mode: str
    rate: float
    achieved_rate: float
    threshold: float
    params_before: int
    params_after: int
    masks: dict = field(default_factory=dict)
    groups: list = field(default_factory=list)

    @property
    def shortfall(self) -> float:
        return self.rate - self.achieved_rate

    def to_json(self) -> dict:
        d = {"mode": self.mode, "rate": self.rate, "achieved_rate": self.achieved_rate,
             "threshold": self.threshold, "params_before": self.params_before,
             "params_after": self.params_after, "shortfall": self.shortfall}
        if self.mode == "unstructured":
            d["masks"] = {k: _pack_mask(m) for k, m in self.masks.items()}
        else:
            d["groups"] = [g.to_json() for g in self.groups]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PrunePlan":
        plan = cls(d["mode"], d["rate"], d["achieved_rate"], d["threshold"],
                   d["params_before"], d["params_after"])
        if "masks" in d:
            plan.masks = {k: _unpack_mask(v) for k, v in d["masks"].items()}
        for g in d.get("groups", []):
            plan.groups.append(DependencyGroup(g["id"], g["producers"], g["consumers"],
                                               g["granularity"], g["pinned"], g["channels"],
                                               g["kept"]))
        return plan


def _check_rate(rate: float, upper: float) -> None:
    if not (0.0 <= rate < upper) or not math.isfinite(rate):
        raise PruneError(f"rate must be in [0, {upper}), got {rate}")


# ---------------------------------------------------------------------------
# unstructured

def prunable_convs(model: Module) -> list:
    return [(n, m) for n, m in model.named_modules()
            if isinstance(m, Conv2d) and not m.protected]


def unstructured_prune(model: Module, rate: float) -> PrunePlan:
    """Global LAMP ranking over every conv weight except AKDC weight generators.

    The ``floor(rate * total)`` lowest-scoring weights are masked, walking the
    global order (score, layer order, index) and skipping any weight whose
    removal would empty its layer.
    """
    _check_rate(rate, 1.0)
    layers = prunable_convs(model)
    scores, layer_ids, idx = [], [], []
    for li, (_, conv) in enumerate(layers):
        s = lamp_scores(conv.weight.data)
        scores.append(s.score)
        layer_ids.append(np.full(s.score.size, li))
        idx.append(s.index)
    scores, layer_ids, idx = map(np.concatenate, (scores, layer_ids, idx))
    total = scores.size
    n_remove = int(math.floor(rate * total))
    order = np.lexsort((idx, layer_ids, scores))
    remaining = np.array([c.weight.size for _, c in layers])
    masks = [np.ones(c.weight.size, dtype=bool) for _, c in layers]
    removed, threshold = 0, 0.0
    for k in order:
        if removed == n_remove:
            break
        li = layer_ids[k]
        if remaining[li] == 1:
            continue
        masks[li][idx[k]] = False
        remaining[li] -= 1
        removed += 1
        threshold = float(scores[k])
    before = model.num_params()
    plan = PrunePlan("unstructured", rate, removed / before, threshold, before, before - removed)
    plan.masks = {name: m.reshape(c.weight.shape) for (name, c), m in zip(layers, masks)}
    return plan


def apply_masks(model: Module, plan: PrunePlan) -> Module:
    """Copy of ``model`` with masked weights set to zero."""
    out = copy.deepcopy(model)
    modules = dict(out.named_modules())
    for name, mask in plan.masks.items():
        conv = modules[name]
        conv.weight.data = np.where(mask, conv.weight.data, 0.0)
    return out


# ---------------------------------------------------------------------------
# channel dependency tracing

class ChannelTracer:
    """Union-find over integer channel labels produced by ``Module.trace``.

    Every non-grouped conv output channel gets a fresh label; depthwise convs
    pass labels through; grouped convs pin their inputs and outputs.  Blocks
    union labels that must disappear together and register equal-removal
    constraints with :meth:`balanced`.
    """

    def __init__(self, model: Module):
        self.names = {id(m): n for n, m in model.named_modules()}
        self.parent: list = []
        self.space: list = []          # label -> (space name, channel)
        self.pinned: set = set()
        self.conv_io: dict = {}        # conv name -> (in labels, out labels)
        self.convs: dict = {}          # conv name -> module
        self.norms: dict = {}          # SRU name -> labels
        self.constraints: list = []    # list of parts (label lists)

    def new_space(self, name: str, n: int) -> list:
        start = len(self.parent)
        self.parent.extend(range(start, start + n))
        self.space.extend((name, i) for i in range(n))
        return list(range(start, start + n))

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)

    def pin(self, labels) -> None:
        self.pinned.update(labels)

    def conv(self, module: Conv2d, labels: list) -> list:
        name = self.names[id(module)]
        if len(labels) != module.in_channels:
            raise PruneError(f"{name}: traced {len(labels)} input channels, "
                             f"weights expect {module.in_channels}")
        if module.depthwise:
            out = list(labels)
        else:
            out = self.new_space(name, module.out_channels)
            if module.groups > 1:
                self.pin(labels)
                self.pin(out)
            elif module.pin_out:
                self.pin(out)
        self.conv_io[name] = (list(labels), out)
        self.convs[name] = module
        return out

    def norm(self, module: SRU, labels: list) -> None:
        self.norms[self.names[id(module)]] = list(labels)

    def balanced(self, parts: Sequence[list]) -> None:
        self.constraints.append([list(p) for p in parts])


def trace_model(model: Module) -> ChannelTracer:
    tracer = ChannelTracer(model)
    labels = tracer.new_space("input", 3)
    tracer.pin(labels)
    model.trace(tracer, labels)
    return tracer


def _conv_params(conv: Conv2d, n_in: int, n_out: int) -> int:
    kh, kw = conv.kernel_size
    if conv.depthwise:
        per_out = kh * kw
    else:
        per_out = (n_in // conv.groups) * kh * kw
    return n_out * per_out + (n_out if conv.bias is not None else 0)


class ChannelPruner:
    """Traces a model once and precomputes the greedy removal order.

    ``prune(rate)`` takes the prefix of that order whose parameter reduction
    is closest to ``rate``, so results are monotone in ``rate``.
    """

    def __init__(self, model: Module):
        self.model = model
        t = self.tracer = trace_model(model)
        n = len(t.parent)
        self.root = np.array([t.find(i) for i in range(n)])
        comps = {}
        for lab, r in enumerate(self.root):
            comps.setdefault(int(r), []).append(lab)
        self.components = comps
        pinned_roots = {int(self.root[l]) for l in t.pinned}

        # importance: max over scoring producers' LAMP channel scores
        score = {}
        for name, (_, out) in t.conv_io.items():
            conv = t.convs[name]
            if conv.depthwise or conv.groups > 1 or conv.protected:
                continue
            s = channel_importance(conv)
            for lab, v in zip(out, s):
                r = int(self.root[lab])
                score[r] = max(score.get(r, 0.0), float(v))
        self.score = score

        bundles, constrained = self._bundles(pinned_roots)
        self.pinned_roots = pinned_roots
        self.bundles = bundles
        self.constrained_parts = constrained
        self._build_sequence()

    # -- bundles ----------------------------------------------------------
    def _rank_key(self, r: int):
        return (self.score.get(r, 0.0), r)

    def _bundles(self, pinned: set):
        t = self.tracer
        parts_roots = [[[int(self.root[l]) for l in p] for p in c] for c in t.constraints]
        seen = {}
        bad = set()
        for ci, parts in enumerate(parts_roots):
            for p in parts:
                for r in p:
                    if r in seen:
                        bad.add(ci)
                        bad.add(seen[r])
                    seen[r] = ci
            flat = [r for p in parts for r in p]
            if len(set(flat)) != len(flat):
                bad.add(ci)
        for ci in bad:
            pinned.update(r for p in parts_roots[ci] for r in p)

        bundles, constrained = [], []
        in_constraint = set(seen)
        for ci, parts in enumerate(parts_roots):
            if ci in bad:
                continue
            parts = [sorted(set(p), key=self._rank_key) for p in parts]
            depth = min(len(p) for p in parts)
            for p in parts:
                pinned.update(p[depth:])
            part_ids = []
            for p in parts:
                constrained.append(set(p[:depth]))
                part_ids.append(len(constrained) - 1)
            for k in range(depth):
                members = tuple(p[k] for p in parts)
                if any(m in pinned for m in members) or any(m not in self.score for m in members):
                    pinned.update(members)
                    continue
                bundles.append((members, tuple(part_ids)))
        for r in self.components:
            if r in in_constraint or r in pinned or r not in self.score:
                continue
            bundles.append(((r,), ()))
        # drop constrained bundles that became pinned through a later member
        bundles = [b for b in bundles if not any(m in pinned for m in b[0])]
        bundles.sort(key=lambda b: (float(np.mean([self.score[m] for m in b[0]])), min(b[0])))
        return bundles, constrained

    # -- greedy sequence ---------------------------------------------------
    def _build_sequence(self):
        t = self.tracer
        in_count, out_count = {}, {}
        self.label_uses = {}   # root -> list of (conv, "in"/"out", multiplicity)
        for name, (ins, outs) in t.conv_io.items():
            in_count[name], out_count[name] = len(ins), len(outs)
            for side, labs in (("in", ins), ("out", outs)):
                mult = {}
                for l in labs:
                    r = int(self.root[l])
                    mult[r] = mult.get(r, 0) + 1
                for r, m in mult.items():
                    self.label_uses.setdefault(r, []).append((name, side, m))
        norm_uses = {}
        for name, labs in t.norms.items():
            for l in labs:
                r = int(self.root[l])
                norm_uses[r] = norm_uses.get(r, 0) + 1

        space_size = {}
        space_members = {}
        for lab, (sp, _) in enumerate(t.space):
            space_size[sp] = space_size.get(sp, 0) + 1
            space_members.setdefault(int(self.root[lab]), {})
            d = space_members[int(self.root[lab])]
            d[sp] = d.get(sp, 0) + 1
        part_left = [len(p) for p in self.constrained_parts]

        total = self.model.num_params()
        self.params_before = total
        self.sequence = []   # (bundle index, params after)
        for bi, (members, part_ids) in enumerate(self.bundles):
            need = {}
            for m in members:
                for sp, c in space_members[m].items():
                    need[sp] = need.get(sp, 0) + c
            if any(space_size[sp] - c < 1 for sp, c in need.items()):
                continue
            if any(part_left[p] < 2 for p in part_ids):
                continue
            delta_in, delta_out = {}, {}
            saved = 0
            for m in members:
                for name, side, mult in self.label_uses.get(m, ()):
                    d = delta_in if side == "in" else delta_out
                    d[name] = d.get(name, 0) + mult
                saved += 2 * norm_uses.get(m, 0)
            for name in set(delta_in) | set(delta_out):
                conv = t.convs[name]
                ni, no = in_count[name], out_count[name]
                before = _conv_params(conv, ni, no)
                ni -= delta_in.get(name, 0)
                no -= delta_out.get(name, 0)
                saved += before - _conv_params(conv, ni, no)
                in_count[name], out_count[name] = ni, no
            for sp, c in need.items():
                space_size[sp] -= c
            for p in part_ids:
                part_left[p] -= 1
            total -= saved
            self.sequence.append((bi, total))

    def achievable_rates(self) -> np.ndarray:
        return np.array([0.0] + [1 - p / self.params_before for _, p in self.sequence])

    def prefix_for(self, rate: float) -> int:
        rates = self.achievable_rates()
        return int(np.argmin(np.abs(rates - rate)))

    # -- groups and rebuild -------------------------------------------------
    def dependency_groups(self, removed: set = frozenset()) -> list:
        t = self.tracer
        # connect spaces through shared components
        sp_parent = {}

        def sp_find(s):
            while sp_parent.setdefault(s, s) != s:
                sp_parent[s] = sp_parent[sp_parent[s]]
                s = sp_parent[s]
            return s

        first = {}
        for lab, (sp, _) in enumerate(t.space):
            r = int(self.root[lab])
            if r in first:
                a, b = sp_find(first[r]), sp_find(sp)
                if a != b:
                    sp_parent[max(a, b)] = min(a, b)
            else:
                first[r] = sp
                sp_find(sp)
        members = {}
        for sp in sp_parent:
            members.setdefault(sp_find(sp), []).append(sp)

        bundle_of = {}
        for members_, _ in self.bundles:
            for m in members_:
                bundle_of[m] = members_
        groups = []
        for gid, (key, spaces) in enumerate(sorted(members.items(), key=lambda kv: kv[0])):
            spaces_set = set(spaces)
            producers = [s for s in spaces if s in t.convs and not t.convs[s].protected]
            if not producers:
                continue
            prod_labels = {p: t.conv_io[p][1] for p in producers}
            roots = {int(self.root[l]) for labs in prod_labels.values() for l in labs}
            pinned = all(r in self.pinned_roots for r in roots)
            g = 1
            for b in {bundle_of[r] for r in roots if r in bundle_of}:
                for p, labs in prod_labels.items():
                    c = sum(1 for l in labs if int(self.root[l]) in b)
                    if c:
                        g = g * c // math.gcd(g, c)
            consumers = {}
            for name, (ins, _) in t.conv_io.items():
                pos = [i for i, l in enumerate(ins) if t.space[l][0] in spaces_set]
                if pos:
                    consumers[name] = pos
            kept = {p: [i for i, l in enumerate(labs) if int(self.root[l]) not in removed]
                    for p, labs in prod_labels.items()}
            groups.append(DependencyGroup(len(groups), producers, consumers, g, pinned,
                                          {p: len(l) for p, l in prod_labels.items()}, kept))
        return groups

    def removed_roots(self, k: int) -> set:
        out = set()
        for bi, _ in self.sequence[:k]:
            out.update(self.bundles[bi][0])
        return out

    def rebuild(self, removed: set) -> Module:
        t = self.tracer
        new = copy.deepcopy(self.model)
        modules = dict(new.named_modules())

        def keep(labs):
            return np.array([i for i, l in enumerate(labs) if int(self.root[l]) not in removed],
                            dtype=np.int64)

        for name, (ins, outs) in t.conv_io.items():
            conv = modules[name]
            ko = keep(outs)
            w = conv.weight.data[ko]
            if not conv.depthwise and conv.groups == 1:
                w = w[:, keep(ins)]
            conv.weight.data = np.ascontiguousarray(w)
            if conv.bias is not None:
                conv.bias.data = conv.bias.data[ko].copy()
        for name, labs in t.norms.items():
            sru = modules[name]
            k = keep(labs)
            sru.gamma.data = sru.gamma.data[k].copy()
            sru.beta.data = sru.beta.data[k].copy()
        return new

    def prune(self, rate: float, tolerance: Optional[float] = None) -> tuple:
        _check_rate(rate, 0.95)
        k = self.prefix_for(rate)
        removed = self.removed_roots(k)
        new = self.rebuild(removed) if k else copy.deepcopy(self.model)
        after = new.num_params()
        achieved = (self.params_before - after) / self.params_before
        if tolerance is not None and abs(achieved - rate) > tolerance:
            raise RateUnreachable(rate, achieved)
        threshold = max((float(np.mean([self.score[m] for m in self.bundles[bi][0]]))
                         for bi, _ in self.sequence[:k]), default=0.0)
        plan = PrunePlan("channel", rate, achieved, threshold, self.params_before, after)
        plan.groups = self.dependency_groups(removed)
        return new, plan


def build_dependency_groups(model: Module) -> list:
    return ChannelPruner(model).dependency_groups()


def channel_prune(model: Module, rate: float, tolerance: Optional[float] = None) -> tuple:
    """Structured pruning to the parameter-reduction fraction closest to ``rate``.

    Returns ``(pruned_model, plan)``.  With ``tolerance`` set, a result further
    than that from ``rate`` raises :class:`RateUnreachable`.
    """
    return ChannelPruner(model).prune(rate, tolerance)
