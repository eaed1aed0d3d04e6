"""The two semantic queries over a firmware image.

Query 1 ("what identity can the device claim?") is target reachability:
symbolically execute toward the code that serves descriptor data, and report
the path constraints that gate it. Query 2 ("is the endpoint data flow
consistent with that identity?") flags concrete data flowing into endpoint
buffers, either against predicted endpoint addresses or, when endpoints
cannot be predicted, by mixed symbolic/concrete writers to one address from
different blocks.

Supporting passes: iterative discovery of the memory bytes that must be
symbolic (interrupt handlers reading locations they never wrote are reading
the environment), and counter detection (delay counters guard injection
payloads and must be symbolic for the payload to be explored).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from . import isa, machine, solver, symexec, usbstatic
from .lifter import Region
from .solver import NOT_UNIQUE, is_symbolic, mk
from .symexec import (ExplorationConfig, Listener, STOP_ALL, SymbolicPolicy,
                      execute)

# USB constants surfaced when annotating path conditions. Names are hints for
# the analyst; values are from the USB 2.0 / HID class tables.
USB_CONSTANT_NAMES = {
    1: "DEVICE descriptor type",
    2: "CONFIGURATION descriptor type",
    3: "STRING descriptor type",
    4: "INTERFACE descriptor type",
    5: "ENDPOINT descriptor type",
    6: "GET_DESCRIPTOR request",
    9: "SET_CONFIGURATION request",
    33: "HID class descriptor type",
    34: "HID report descriptor type",
}

_REGION_BY_NAME = {"CODE": Region.CODE, "IRAM": Region.IRAM,
                   "SFR": Region.SFR, "XRAM": Region.XRAM}


def _as_region(r) -> Region:
    if isinstance(r, str):
        return _REGION_BY_NAME[r.upper()]
    return Region(r)


# ---------------------------------------------------------------------------
# Finding symbolic locations (per-ISR iterative discovery)
# ---------------------------------------------------------------------------

@dataclass
class IterationRecord:
    source: str
    iteration: int
    added: tuple | None          # (region name, addr) or None
    duration: float
    reason: str


@dataclass
class SymbolicLocationSet:
    locations: set              # {(Region, addr)}
    log: list[IterationRecord]

    def names(self) -> list[tuple[str, int]]:
        return sorted((Region(r).name, a) for r, a in self.locations)


class _RecordStores(Listener):
    """Track per-path locations written inside the active interrupt handler."""

    def on_store(self, site, state, region, addr, value):
        if state.active_isr is not None:
            ws = state.notes.get("wset", frozenset())
            state.notes["wset"] = ws | {(region, addr)}
        return None


class _CheckLoads(Listener):
    """Stop the run at the first in-handler load from a location neither
    written on this path nor already symbolic; that location is environment
    data. CODE loads are image constants and never qualify."""

    def __init__(self, known: set):
        self.known = known
        self.found: tuple | None = None

    def on_load(self, site, state, region, addr, value):
        if state.active_isr is None or region == Region.CODE:
            return None
        loc = (region, addr)
        if loc in self.known or loc in state.isr_written:
            return None
        if loc in state.notes.get("wset", frozenset()):
            return None
        self.found = loc
        return STOP_ALL


def find_symbolic_locations(image: bytes, tau: int = 16,
                            config: ExplorationConfig | None = None,
                            isr_map: dict[str, int] | None = None
                            ) -> SymbolicLocationSet:
    """Up to tau runs per ISR, each restricted to that single interrupt
    source; every run either grows the symbolic set by one location and
    restarts cold, or proves the handler free of fresh environment reads."""
    base = config or ExplorationConfig()
    isrs = machine.discover_isrs(image) if isr_map is None else isr_map
    locations: set = set()
    log: list[IterationRecord] = []
    for source in sorted(isrs):
        for it in range(1, tau + 1):
            t0 = time.monotonic()
            policy = SymbolicPolicy()
            policy.designate_all(locations)
            # Tight budgets: each run only has to reach the handler's next
            # fresh read, not saturate the whole program.
            cfg = ExplorationConfig(
                max_states=min(base.max_states, 192),
                block_repeat_threshold=min(base.block_repeat_threshold, 32),
                cooldown_min=2, cooldown_max=8,
                select_weights=base.select_weights,
                max_blocks=min(base.max_blocks, 4_000),
                max_indirect_fanout=base.max_indirect_fanout,
                only_interrupt_source=source,
                seed=base.seed,
                solver_timeout=base.solver_timeout)
            checker = _CheckLoads(locations)
            res = execute(image, policy, cfg,
                          listeners=[_RecordStores(), checker],
                          isr_map=isrs)
            dt = time.monotonic() - t0
            if checker.found is not None:
                locations.add(checker.found)
                region, addr = checker.found
                log.append(IterationRecord(source, it,
                                           (Region(region).name, addr), dt,
                                           res.reason))
            else:
                log.append(IterationRecord(source, it, None, dt, res.reason))
                break  # fixpoint for this handler; later runs are identical
    return SymbolicLocationSet(locations, log)


# ---------------------------------------------------------------------------
# Preconditions
# ---------------------------------------------------------------------------

RELATIONS = ("==", "!=", "<", ">", "bit-set", "bit-clear")


@dataclass(frozen=True)
class Precondition:
    region: object              # Region or name
    addr: int
    relation: str
    value: int


class PreconditionError(Exception):
    pass


class UnsatisfiablePreconditions(PreconditionError):
    pass


def _precondition_exprs(preconditions, policy: SymbolicPolicy):
    out = []
    for p in preconditions:
        region = _as_region(p.region)
        v = policy.lookup(region, p.addr)
        if v is None:
            raise PreconditionError(
                f"{Region(region).name}[0x{p.addr:04x}] is not designated "
                f"symbolic; preconditions may only constrain symbolic bytes")
        if p.relation == "==":
            e = mk("eq", (v, p.value), 1)
        elif p.relation == "!=":
            e = mk("ne", (v, p.value), 1)
        elif p.relation == "<":
            e = mk("ult", (v, p.value), 1)
        elif p.relation == ">":
            e = mk("ugt", (v, p.value), 1)
        elif p.relation == "bit-set":
            e = mk("ne", (mk("and", (v, 1 << p.value), 8), 0), 1)
        elif p.relation == "bit-clear":
            e = mk("eq", (mk("and", (v, 1 << p.value), 8), 0), 1)
        else:
            raise PreconditionError(f"unknown relation {p.relation!r}")
        note = (f"precondition {Region(region).name}[0x{p.addr:04x}] "
                f"{p.relation} {p.value}")
        out.append((e, note))
    return out


def apply_preconditions(state: symexec.ExecState, preconditions,
                        policy: SymbolicPolicy,
                        sat: solver.Solver | None = None) -> symexec.ExecState:
    """Conjoin preconditions into a state's path; reject unsatisfiable sets."""
    pairs = _precondition_exprs(preconditions, policy)
    sat = sat or solver.Solver()
    exprs = state.path.exprs() + [e for e, _ in pairs]
    if not sat.is_satisfiable(exprs):
        raise UnsatisfiablePreconditions(
            "; ".join(note for _, note in pairs))
    for e, note in pairs:
        state.path.append(e, -1, note)
    return state


# ---------------------------------------------------------------------------
# Query 1: claimed identity (target reachability)
# ---------------------------------------------------------------------------

@dataclass
class UsbConstraintNote:
    location: str
    value: int
    meaning: str | None


@dataclass
class Query1Target:
    target: int
    reached: bool
    wall_time: float
    states_explored: int
    coverage_at_hit: int
    path: list[dict] = field(default_factory=list)
    witness: dict = field(default_factory=dict)
    usb_constraints: list[UsbConstraintNote] = field(default_factory=list)


@dataclass
class Query1Report:
    policy_name: str
    targets: dict[int, Query1Target]
    states_explored: int
    blocks_executed: int
    coverage: int
    reason: str
    diagnostics: list[str]
    wall_time: float

    @property
    def any_reached(self) -> bool:
        return any(t.reached for t in self.targets.values())


def _usb_notes(path: solver.PathCondition) -> list[UsbConstraintNote]:
    notes = []
    for expr, _site, _note in path:
        if expr.op != "eq" or len(expr.args) != 2:
            continue
        a, b = expr.args
        if a.op == "var" and b.op == "const":
            notes.append(UsbConstraintNote(a.args[0], b.value,
                                           USB_CONSTANT_NAMES.get(b.value)))
        elif b.op == "var" and a.op == "const":
            notes.append(UsbConstraintNote(b.args[0], a.value,
                                           USB_CONSTANT_NAMES.get(a.value)))
    return notes


def resolve_policy(policy_source, symbolic_set=None) -> tuple[str, SymbolicPolicy]:
    if isinstance(policy_source, SymbolicPolicy):
        return "custom", policy_source
    if policy_source == "full":
        return "full", SymbolicPolicy.full()
    if policy_source == "partial":
        pol = SymbolicPolicy()
        if symbolic_set is not None:
            locs = (symbolic_set.locations
                    if isinstance(symbolic_set, SymbolicLocationSet)
                    else symbolic_set)
            pol.designate_all(locs)
        return "partial", pol
    raise ValueError(f"unknown policy source {policy_source!r}")


def query1(image: bytes, targets, policy_source="full", preconditions=(),
           symbolic_set=None, config: ExplorationConfig | None = None
           ) -> Query1Report:
    if not targets:
        raise ValueError("query1 requires at least one target instruction")
    name, policy = resolve_policy(policy_source, symbolic_set)
    base = config or ExplorationConfig()
    cfg = ExplorationConfig(**{**base.__dict__,
                               "targets": frozenset(targets),
                               "stop_when_targets_hit": True})
    init = _precondition_exprs(preconditions, policy) if preconditions else []
    if init:
        sat = solver.Solver(cfg.solver_timeout)
        if not sat.is_satisfiable([e for e, _ in init]):
            raise UnsatisfiablePreconditions(
                "; ".join(note for _, note in init))
    res = execute(image, policy, cfg, initial_constraints=init)
    out: dict[int, Query1Target] = {}
    sat = solver.Solver(cfg.solver_timeout)
    for t in sorted(targets):
        hit = res.target_hits.get(t)
        if hit is None:
            out[t] = Query1Target(t, False, res.wall_time,
                                  res.states_created, len(res.coverage))
            continue
        st = hit.state
        try:
            model = sat.model(st.path)
        except solver.Unsat:  # cannot happen for a reached target
            model = {}
        path_rows = [{"constraint": solver.to_text(e),
                      "site": f"0x{site:04x}" if site >= 0 else "initial",
                      "note": note}
                     for e, site, note in st.path]
        out[t] = Query1Target(
            t, True, hit.wall_time, hit.states_created, hit.coverage,
            path=path_rows,
            witness={k: model[k] for k in sorted(model)},
            usb_constraints=_usb_notes(st.path))
    return Query1Report(name, out, res.states_created, res.blocks_executed,
                        len(res.coverage), res.reason,
                        res.diagnostics + res.solver_diagnostics,
                        res.wall_time)


# ---------------------------------------------------------------------------
# Counter discovery
# ---------------------------------------------------------------------------

# Compute registers never count as delay counters.
_CORE_REGS = {("sfr", a) for a in (0xE0, 0xF0, 0xD0, 0x81, 0x82, 0x83)}


def find_counters(image: bytes,
                  instrs: list[isa.Instruction] | None = None
                  ) -> set[tuple[Region, int]]:
    """Addresses manipulated by add/sub-style instructions whose value never
    feeds an address or index computation: candidate delay counters."""
    if instrs is None:
        instrs = usbstatic.reachable_instructions(image)
    by_addr = {i.addr: i for i in instrs}
    counters: set[tuple[Region, int]] = set()

    def value_feeds_address(start_addr: int, loc) -> bool:
        """Taint walk through copies: does loc's value reach an address or
        @A+DPTR/@A+PC index operand?"""
        seen = set()
        start = by_addr[start_addr]
        queue = [(succ, frozenset((loc,)))
                 for succ in usbstatic._successors(start, by_addr)]
        budget = 512
        while queue and budget:
            budget -= 1
            addr, live = queue.pop()
            ins = by_addr.get(addr)
            if ins is None or (addr, live) in seen:
                continue
            seen.add((addr, live))
            sm = usbstatic._summarize(ins, usbstatic.default_is_a_reg)
            live_set = set(live)
            if live_set & set(sm.addr_load) or live_set & set(sm.addr_store):
                return True
            if ins.mnemonic in ("MOVC", "JMP") and usbstatic.ACC in live_set:
                return True  # @A+... index use
            new_live = live_set - set(sm.writes)
            if sm.copy and (live_set & set(sm.reads_value)):
                if sm.value_dst_reg is not None:
                    new_live.add(sm.value_dst_reg)
            if new_live:
                for succ in usbstatic._successors(ins, by_addr):
                    queue.append((succ, frozenset(new_live)))
        return False

    for ins in instrs:
        if ins.mnemonic not in ("INC", "DEC", "ADD", "ADDC", "SUBB"):
            continue
        op0 = ins.operands[0] if ins.operands else None
        if op0 is None:
            continue
        if op0.kind is isa.OpKind.DIRECT:
            loc = usbstatic._direct_loc(op0.value)
        elif op0.kind is isa.OpKind.REG:
            loc = usbstatic._reg_loc(op0.value)
        elif op0.kind is isa.OpKind.ACC:
            loc = usbstatic.ACC
        else:
            continue
        if loc in _CORE_REGS or loc[0] == "sfr":
            continue  # hardware registers are not data counters
        if value_feeds_address(ins.addr, loc):
            continue
        counters.add((Region.IRAM, loc[1]))

    # XRAM read-modify-write through a tracked DPTR constant
    M = usbstatic.prop_const_mem(instrs)
    ordered = sorted(instrs, key=lambda i: i.addr)
    for idx, ins in enumerate(ordered):
        if ins.mnemonic != "MOVX" or ins.operands[0].kind is not isa.OpKind.ACC:
            continue
        tracked = M.get(ins.addr, "src")[1]
        if tracked is None:
            continue
        window = ordered[idx + 1: idx + 5]
        bumped = any(w.mnemonic in ("INC", "DEC", "ADD", "ADDC", "SUBB")
                     and w.operands and w.operands[0].kind is isa.OpKind.ACC
                     for w in window)
        if not bumped:
            continue
        for w in window:
            if (w.mnemonic == "MOVX"
                    and w.operands[0].kind is not isa.OpKind.ACC
                    and M.get(w.addr, "dst")[1] == tracked):
                counters.add((Region.XRAM, tracked))
                break
    return counters


# ---------------------------------------------------------------------------
# Query 2
# ---------------------------------------------------------------------------

EP_PACKET_SIZES = (8, 16, 32, 64)

# Values that are protocol constants rather than injected data; flags whose
# payload sits in this set are labeled, never suppressed.
_KNOWN_PROTOCOL_BYTES = frozenset((0x55, 0x53, 0x42, 0x43))  # "USBC" CBW tag


@dataclass
class FlaggedAccess:
    site: int
    write_addr: int
    block: int
    values: list[int]
    label: str | None = None


@dataclass
class RankedWrite:
    write_addr: int
    writers: list[int]
    symbolic_sources: list[str]
    concrete_values: list[int]
    score: int


@dataclass
class Query2Report:
    kind: str
    flagged: list[FlaggedAccess]
    counters: list[tuple[str, int]]
    ranked: list[RankedWrite]
    states_explored: int
    blocks_executed: int
    coverage: int
    reason: str
    diagnostics: list[str]
    wall_time: float


def other_endpoint_addresses(ep0: set[int], max_ep: int = 4) -> set[int]:
    """Candidate non-control endpoint buffers: EP0 plus packet-size strides."""
    out = set()
    for e in ep0:
        for size in EP_PACKET_SIZES:
            for k in range(1, max_ep + 1):
                out.add((e + size * k) & 0xFFFF)
    return out


class _ConcreteFlowListener(Listener):
    """Flag target stores whose value is a single concrete byte under the
    path condition."""

    def __init__(self, target_sites: set[int], sat: solver.Solver):
        self.targets = target_sites
        self.sat = sat
        self.flags: dict[tuple[int, int], FlaggedAccess] = {}

    def on_store(self, site, state, region, addr, value):
        if site not in self.targets or region != Region.XRAM:
            return None
        if isinstance(value, int):
            v = value
        elif not is_symbolic(value):
            v = value.value
        else:
            v = self.sat.is_constant(state.path, value)
            if v is NOT_UNIQUE:
                return None
        key = (site, addr)
        fa = self.flags.get(key)
        if fa is None:
            label = ("known-protocol-constant"
                     if v in _KNOWN_PROTOCOL_BYTES else None)
            self.flags[key] = FlaggedAccess(site, addr, state.cur_block,
                                            [v], label)
        elif v not in fa.values:
            fa.values.append(v)
        return None


def query2_unexpected(image: bytes, ep0: set[int], symbolic_set,
                      max_ep: int = 4,
                      config: ExplorationConfig | None = None,
                      instrs: list[isa.Instruction] | None = None
                      ) -> Query2Report:
    """Concrete data flowing into predicted endpoint buffers.

    Endpoint buffers are predicted from EP0 by constant packet-size offsets;
    stores whose tracked destination lands there are targets. Delay counters
    are made symbolic in addition to the given set so threshold-guarded
    payloads are explored without unrolling."""
    if not ep0:
        raise ValueError("query2_unexpected requires a nonempty EP0 set")
    if instrs is None:
        instrs = usbstatic.reachable_instructions(image)
    other_eps = other_endpoint_addresses(ep0, max_ep)
    M = usbstatic.prop_const_mem(instrs)
    targets = set()
    for ins in instrs:
        if M.get(ins.addr, "dst")[1] in other_eps:
            targets.add(ins.addr)
    counters = find_counters(image, instrs)
    locs = (symbolic_set.locations
            if isinstance(symbolic_set, SymbolicLocationSet)
            else set(symbolic_set))
    policy = SymbolicPolicy()
    policy.designate_all(locs)
    policy.designate_all(counters)
    cfg = config or ExplorationConfig()
    sat = solver.Solver(cfg.solver_timeout)
    listener = _ConcreteFlowListener(targets, sat)
    res = execute(image, policy, cfg, listeners=[listener])
    flagged = sorted(listener.flags.values(),
                     key=lambda f: (f.write_addr, f.site))
    ranked = _rank_unexpected(flagged)
    return Query2Report("unexpected-flow", flagged,
                        sorted((Region(r).name, a) for r, a in counters),
                        ranked, res.states_created, res.blocks_executed,
                        len(res.coverage), res.reason,
                        res.diagnostics + sat.diagnostics, res.wall_time)


def _rank_unexpected(flagged: list[FlaggedAccess]) -> list[RankedWrite]:
    by_addr: dict[int, list[FlaggedAccess]] = {}
    for f in flagged:
        by_addr.setdefault(f.write_addr, []).append(f)
    rows = []
    for addr, items in by_addr.items():
        values = sorted({v for f in items for v in f.values})
        rows.append(RankedWrite(addr, sorted({f.site for f in items}),
                                [], values, len(values)))
    rows.sort(key=lambda r: (-r.score, r.write_addr))
    return rows


class _AccessRecorder(Listener):
    """Alg-5-style recording: per (address, block) symbolic/concrete marks."""

    def __init__(self):
        self.sym: dict[tuple[int, int], set] = {}       # (addr, block) -> var names
        self.conc: dict[tuple[int, int], dict] = {}     # (addr, block) -> {site: values}

    def on_store(self, site, state, region, addr, value):
        if region != Region.XRAM:
            return None
        key = (addr, state.cur_block)
        if is_symbolic(value):
            self.sym.setdefault(key, set()).update(value.vars())
        else:
            v = value if isinstance(value, int) else value.value
            self.conc.setdefault(key, {}).setdefault(site, set()).add(v)
        return None


def query2_inconsistent(image: bytes, policy: SymbolicPolicy,
                        config: ExplorationConfig | None = None
                        ) -> Query2Report:
    """Inconsistent data flow: an address written concretely in one block and
    symbolically in another. Write addresses are ranked by the number of
    distinct concrete values involved (single-value writers rank low; they
    are the documented false-positive shape)."""
    cfg = config or ExplorationConfig()
    rec = _AccessRecorder()
    res = execute(image, policy, cfg, listeners=[rec])
    sym_addrs: dict[int, set] = {}
    sym_sources: dict[int, set] = {}
    for (addr, block), names in rec.sym.items():
        sym_addrs.setdefault(addr, set()).add(block)
        sym_sources.setdefault(addr, set()).update(names)
    flagged: list[FlaggedAccess] = []
    for (addr, block), sites in sorted(rec.conc.items()):
        other_blocks = sym_addrs.get(addr, set()) - {block}
        if not other_blocks:
            continue
        for site, values in sorted(sites.items()):
            flagged.append(FlaggedAccess(site, addr, block, sorted(values)))
    by_addr: dict[int, list[FlaggedAccess]] = {}
    for f in flagged:
        by_addr.setdefault(f.write_addr, []).append(f)
    rows = []
    for addr, items in by_addr.items():
        values = sorted({v for f in items for v in f.values})
        rows.append(RankedWrite(addr, sorted({f.site for f in items}),
                                sorted(sym_sources.get(addr, ())),
                                values, len(values)))
    rows.sort(key=lambda r: (-r.score, r.write_addr))
    return Query2Report("inconsistent-flow", flagged, [], rows,
                        res.states_created, res.blocks_executed,
                        len(res.coverage), res.reason, res.diagnostics,
                        res.wall_time)
