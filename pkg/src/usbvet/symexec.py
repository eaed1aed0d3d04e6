"""Symbolic executor over the lifted IR.

States are self-contained: three byte-granular symbolic stores, a path
condition, coverage/interrupt bookkeeping. The PC is always concrete;
symbolic load/store addresses and indirect jump targets are resolved by
solver-bounded enumeration (forking one state per feasible concrete value,
up to a configurable fanout).

Interrupts are scheduled between blocks: an enabled, discovered ISR whose
cooldown has expired forks a state that enters the handler (hardware-style
return-address push, no nesting). Cooldowns are drawn per source per firing
from a seeded RNG, so whole explorations replay deterministically from the
config seed.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field

from . import isa, lifter, machine, solver
from .lifter import (Assign, Boundary, CallMark, CJump, Jump, Load, Put,
                     Region, RetMark, Store, Tmp)
from .solver import SymExpr, eval_op, mk

IE_ADDR = machine.IE


class SymbolicPolicyError(Exception):
    pass


class SymbolicPolicy:
    """Designated symbolic bytes; everything else reads its reset value."""

    def __init__(self):
        self.vars: dict[tuple[Region, int], SymExpr] = {}

    @staticmethod
    def var_name(region: Region, addr: int) -> str:
        return f"{Region(region).name.lower()}_{addr:04x}"

    def designate(self, region: Region, addr: int, length: int = 1,
                  name: str | None = None):
        for i in range(length):
            key = (Region(region), addr + i)
            if key in self.vars:
                raise SymbolicPolicyError(f"overlapping designation {key}")
            vname = name if (name and length == 1) else self.var_name(*key)
            self.vars[key] = solver.var(vname, 8)

    def designate_all(self, locations):
        for region, addr in locations:
            if (Region(region), addr) not in self.vars:
                self.designate(region, addr)

    def lookup(self, region: Region, addr: int):
        return self.vars.get((region, addr))

    def locations(self) -> set[tuple[Region, int]]:
        return set(self.vars)

    def copy(self) -> "SymbolicPolicy":
        p = SymbolicPolicy()
        p.vars = dict(self.vars)
        return p

    @staticmethod
    def full() -> "SymbolicPolicy":
        """All IRAM and XRAM bytes symbolic (SFRs stay concrete)."""
        p = SymbolicPolicy()
        for a in range(256):
            p.designate(Region.IRAM, a)
        for a in range(0x10000):
            p.vars[(Region.XRAM, a)] = solver.var(
                SymbolicPolicy.var_name(Region.XRAM, a), 8)
        return p


@dataclass
class ExplorationConfig:
    max_states: int = 4096
    block_repeat_threshold: int = 256
    cooldown_min: int = 20
    cooldown_max: int = 100
    select_weights: tuple[float, float] = (1.0, 1.0)  # (random, coverage-new)
    time_limit: float | None = None
    max_blocks: int = 250_000
    max_indirect_fanout: int = 16
    only_interrupt_source: str | None = None
    targets: frozenset = frozenset()
    stop_when_targets_hit: bool = True
    seed: int = 0
    solver_timeout: float = 5.0


KILL_PATH = "kill-path"
STOP_ALL = "stop-all"


class Listener:
    """Observation hooks. Returning KILL_PATH ends the path, STOP_ALL the run."""

    def on_load(self, site, state, region, addr, value):
        return None

    def on_store(self, site, state, region, addr, value):
        return None

    def on_block(self, state):
        return None

    def on_termination(self, states):
        return None


class ExecState:
    __slots__ = ("pc", "iram", "sfr", "xram", "path", "history",
                 "visit_counts", "stale", "cooldowns", "active_isr",
                 "isr_written", "notes", "last_cover_seq", "sid",
                 "terminated", "cur_site", "cur_block", "steps")

    def __init__(self):
        self.pc = 0
        self.iram: dict[int, object] = {}
        self.sfr: dict[int, object] = {}
        self.xram: dict[int, object] = {}
        self.path = solver.PathCondition()
        self.history: list[int] = []
        self.visit_counts: dict[int, int] = {}
        self.stale: dict[int, int] = {}
        self.cooldowns: dict[str, int] = {}
        self.active_isr: str | None = None
        self.isr_written: set = set()
        self.notes: dict = {}
        self.last_cover_seq = 0
        self.sid = 0
        self.terminated: str | None = None
        self.cur_site = 0
        self.cur_block = 0
        self.steps = 0

    def clone(self) -> "ExecState":
        c = ExecState.__new__(ExecState)
        c.pc = self.pc
        c.iram = dict(self.iram)
        c.sfr = dict(self.sfr)
        c.xram = dict(self.xram)
        c.path = self.path.copy()
        c.history = list(self.history)
        c.visit_counts = dict(self.visit_counts)
        c.stale = dict(self.stale)
        c.cooldowns = dict(self.cooldowns)
        c.active_isr = self.active_isr
        c.isr_written = set(self.isr_written)
        c.notes = dict(self.notes)
        c.last_cover_seq = self.last_cover_seq
        c.sid = self.sid
        c.terminated = None
        c.cur_site = self.cur_site
        c.cur_block = self.cur_block
        c.steps = self.steps
        return c

    def concrete_sp(self):
        v = self.sfr.get(machine.SP, machine.RESET_SP)
        return v if isinstance(v, int) else None


@dataclass
class TargetHit:
    target: int
    state: ExecState
    states_created: int
    coverage: int
    wall_time: float


@dataclass
class ExplorationResult:
    ended: list[ExecState]
    coverage: set[int]
    states_created: int
    blocks_executed: int
    reason: str
    diagnostics: list[str]
    target_hits: dict[int, TargetHit]
    wall_time: float
    solver_diagnostics: list[str] = field(default_factory=list)


def select_next(frontier: list[ExecState], config: ExplorationConfig,
                rng: random.Random) -> ExecState:
    """Interleave uniform-random choice with preference for the state that
    most recently grew the global coverage set."""
    if len(frontier) == 1:
        return frontier[0]
    rw, cw = config.select_weights
    total = rw + cw
    if total <= 0:
        rw, total = 1.0, 1.0
    if rng.random() * total < rw:
        return frontier[rng.randrange(len(frontier))]
    return max(frontier, key=lambda s: (s.last_cover_seq, -s.sid))


def schedule_interrupt(state: ExecState, isr_map: dict[str, int],
                       config: ExplorationConfig, rng: random.Random,
                       sat: solver.Solver) -> list[ExecState]:
    """Fork ISR-entry states for every eligible source.

    Eligible: handler discovered, no ISR frame already active (nesting is
    unsupported), cooldown expired, and the IE predicate (EA and the source
    bit) satisfiable under the path condition. The continuation also redraws
    the cooldown so a pending source does not fork at every block boundary.
    """
    if state.active_isr is not None:
        return []
    forks: list[ExecState] = []
    for source in sorted(isr_map):
        if config.only_interrupt_source and source != config.only_interrupt_source:
            continue
        if state.cooldowns.get(source, 0) > 0:
            continue
        ie = state.sfr.get(IE_ADDR, 0)
        _, bit = machine.INT_SOURCES[source]
        mask = 0x80 | (1 << bit)
        pred = None
        if isinstance(ie, int):
            if ie & mask != mask:
                continue
        else:
            pred = mk("eq", (mk("and", (ie, mask), 8), mask), 1)
            if not sat.is_satisfiable(state.path, (pred,)):
                continue
        sp = state.concrete_sp()
        if sp is None:
            continue  # symbolic stack pointer: cannot model the hardware push
        child = state.clone()
        if pred is not None:
            child.path.append(pred, state.pc, f"isr-enable:{source}")
        ret = state.pc
        child.iram[(sp + 1) & 0xFF] = ret & 0xFF
        child.iram[(sp + 2) & 0xFF] = ret >> 8
        child.sfr[machine.SP] = (sp + 2) & 0xFF
        child.isr_written.update({(Region.IRAM, (sp + 1) & 0xFF),
                                  (Region.IRAM, (sp + 2) & 0xFF),
                                  (Region.SFR, machine.SP)})
        child.pc = isr_map[source]
        child.active_isr = source
        draw = rng.randint(config.cooldown_min, config.cooldown_max)
        child.cooldowns[source] = draw
        state.cooldowns[source] = rng.randint(config.cooldown_min,
                                              config.cooldown_max)
        forks.append(child)
    return forks


_SFR_DEFAULTS = {machine.SP: machine.RESET_SP}


class Executor:
    def __init__(self, image: bytes, policy: SymbolicPolicy,
                 config: ExplorationConfig, listeners=(),
                 isr_map: dict[str, int] | None = None,
                 initial_constraints=()):
        self.initial_constraints = list(initial_constraints)
        self.image = bytes(image)
        self.policy = policy
        self.config = config
        self.listeners = list(listeners)
        self.program = lifter.lift_program(self.image)
        self.solver = solver.Solver(config.solver_timeout)
        self.rng = random.Random(config.seed)
        self.isr_map = machine.discover_isrs(self.image) if isr_map is None else isr_map
        self.covered: set[int] = set()
        self.cover_seq = 0
        self.states_created = 0
        self.blocks_executed = 0
        self.diagnostics: list[str] = []
        self.ended: list[ExecState] = []
        self.target_hits: dict[int, TargetHit] = {}
        self.stop_reason: str | None = None
        self.t0 = 0.0

    # -- state memory ------------------------------------------------------

    def _read(self, s: ExecState, region: Region, addr: int):
        if region == Region.IRAM:
            v = s.iram.get(addr)
            if v is None:
                v = self.policy.lookup(Region.IRAM, addr)
            return 0 if v is None else v
        if region == Region.SFR:
            v = s.sfr.get(addr)
            if v is None:
                v = self.policy.lookup(Region.SFR, addr)
            if v is None:
                return _SFR_DEFAULTS.get(addr, 0)
            return v
        if region == Region.XRAM:
            v = s.xram.get(addr)
            if v is None:
                v = self.policy.lookup(Region.XRAM, addr)
            return 0 if v is None else v
        # CODE: Harvard space, read-only image; mirror the interpreter's
        # read-zero past the end
        return self.image[addr] if addr < len(self.image) else 0

    @staticmethod
    def _write(s: ExecState, region: Region, addr: int, value):
        if region == Region.IRAM:
            s.iram[addr] = value
        elif region == Region.SFR:
            s.sfr[addr] = value
        elif region == Region.XRAM:
            s.xram[addr] = value
        else:
            raise AssertionError("store to CODE")
        if s.active_isr is not None:
            s.isr_written.add((region, addr))

    # -- helpers -----------------------------------------------------------

    def _fork(self, s: ExecState) -> ExecState:
        c = s.clone()
        self.states_created += 1
        c.sid = self.states_created
        return c

    def _terminate(self, s: ExecState, reason: str):
        s.terminated = reason
        self.ended.append(s)

    def _emit(self, which: str, site, state, region, addr, value) -> str | None:
        action = None
        for ln in self.listeners:
            cb = ln.on_load if which == "load" else ln.on_store
            r = cb(site, state, region, addr, value)
            if r == STOP_ALL:
                action = STOP_ALL
            elif r == KILL_PATH and action is None:
                action = KILL_PATH
        return action

    def _enumerate(self, s: ExecState, expr: SymExpr, bound: int,
                   what: str) -> list[int]:
        """Feasible concrete values of expr under the path, up to the fanout."""
        vals: list[int] = []
        extra: list[SymExpr] = []
        limit = self.config.max_indirect_fanout
        base = s.path.exprs()
        while len(vals) < limit:
            res = solver.check(base + extra, self.config.solver_timeout)
            if res.timed_out:
                self.diagnostics.append(f"solver timeout enumerating {what} "
                                        f"at 0x{s.cur_site:04x}")
                break
            if not res.sat:
                break
            v = solver.eval_expr(expr, res.model)
            vals.append(v)
            extra.append(mk("ne", (expr, v), 1))
        if len(vals) == limit and solver.check(base + extra,
                                               self.config.solver_timeout).sat:
            self.diagnostics.append(
                f"{what} fanout over {limit} at 0x{s.cur_site:04x}; extra "
                f"targets dropped")
        return [v for v in vals if v < bound] or self._oor(s, vals, bound, what)

    def _oor(self, s, vals, bound, what) -> list:
        if vals:
            self.diagnostics.append(
                f"symbolic {what} out of region at 0x{s.cur_site:04x} "
                f"(bound 0x{bound:x})")
        return []

    # -- block execution ---------------------------------------------------

    def _exec_from(self, s: ExecState, blk, idx: int, vals: list) -> list[ExecState]:
        """Run statements from idx; returns continuation states (PC advanced)."""
        stmts = blk.stmts
        image_len = len(self.image)
        i = idx
        while True:
            st = stmts[i]
            cls = st.__class__
            if cls is Assign:
                resolved = tuple(vals[a.i] if type(a) is Tmp else a
                                 for a in st.args)
                if all(type(v) is int for v in resolved):
                    vals[st.dst.i] = eval_op(st.op, resolved, st.width)
                else:
                    vals[st.dst.i] = mk(st.op, resolved, st.width)
            elif cls is Load:
                a = st.addr
                addr = vals[a.i] if type(a) is Tmp else a
                if type(addr) is not int:
                    bound = image_len if st.region == Region.CODE else (
                        0x10000 if st.region == Region.XRAM else 0x100)
                    choices = self._enumerate(s, addr, bound, "load address")
                    out = []
                    for v in choices:
                        child = self._fork(s)
                        child.path.append(mk("eq", (addr, v), 1), s.cur_site,
                                          "mem-index")
                        val = self._read(child, st.region, v)
                        act = self._emit("load", child.cur_site, child,
                                         st.region, v, val)
                        nv = list(vals)
                        nv[st.dst.i] = val
                        if act == STOP_ALL:
                            self.stop_reason = "listener-stop"
                            self._terminate(child, "listener-stop")
                            return out
                        if act == KILL_PATH:
                            self._terminate(child, "listener-kill")
                            continue
                        out.extend(self._exec_from(child, blk, i + 1, nv))
                    if not choices:
                        self._terminate(s, "mem-index-out-of-region")
                    return out
                val = self._read(s, st.region, addr)
                act = self._emit("load", s.cur_site, s, st.region, addr, val)
                vals[st.dst.i] = val
                if act == STOP_ALL:
                    self.stop_reason = "listener-stop"
                    self._terminate(s, "listener-stop")
                    return []
                if act == KILL_PATH:
                    self._terminate(s, "listener-kill")
                    return []
            elif cls is Store or cls is Put:
                if cls is Put:
                    region, addr, v = Region.SFR, st.reg, st.src
                else:
                    region, addr, v = st.region, st.addr, st.src
                value = vals[v.i] if type(v) is Tmp else v
                if type(addr) is Tmp:
                    addr = vals[addr.i]
                if type(addr) is not int:
                    bound = 0x10000 if region == Region.XRAM else 0x100
                    choices = self._enumerate(s, addr, bound, "store address")
                    out = []
                    for cv in choices:
                        child = self._fork(s)
                        child.path.append(mk("eq", (addr, cv), 1), s.cur_site,
                                          "mem-index")
                        self._write(child, region, cv, value)
                        act = self._emit("store", child.cur_site, child,
                                         region, cv, value)
                        if act == STOP_ALL:
                            self.stop_reason = "listener-stop"
                            self._terminate(child, "listener-stop")
                            return [o for o in out if o]
                        if act == KILL_PATH:
                            self._terminate(child, "listener-kill")
                            continue
                        out.extend(self._exec_from(child, blk, i + 1, list(vals)))
                    if not choices:
                        self._terminate(s, "mem-index-out-of-region")
                    return out
                self._write(s, region, addr, value)
                act = self._emit("store", s.cur_site, s, region, addr, value)
                if act == STOP_ALL:
                    self.stop_reason = "listener-stop"
                    self._terminate(s, "listener-stop")
                    return []
                if act == KILL_PATH:
                    self._terminate(s, "listener-kill")
                    return []
            elif cls is Boundary:
                s.cur_site = st.addr
                s.steps += 1
                if st.addr in self.config.targets and st.addr not in self.target_hits:
                    self.target_hits[st.addr] = TargetHit(
                        st.addr, s, self.states_created, len(self.covered),
                        time.monotonic() - self.t0)
                    self._terminate(s, f"target:0x{st.addr:04x}")
                    return []
            elif cls is CJump:
                c = st.cond
                cond = vals[c.i] if type(c) is Tmp else c
                site = s.cur_site
                if type(cond) is int:
                    s.pc = st.taken if cond else st.fall
                    return [s]
                neg = solver.bool_not(cond)
                base = s.path.exprs()
                t_ok = self.solver.is_satisfiable(base, (cond,))
                f_ok = self.solver.is_satisfiable(base, (neg,))
                if t_ok and f_ok:
                    child = self._fork(s)
                    child.path.append(cond, site, "taken")
                    child.pc = st.taken
                    s.path.append(neg, site, "fall")
                    s.pc = st.fall
                    return [s, child]
                if t_ok:
                    s.path.append(cond, site, "taken")
                    s.pc = st.taken
                    return [s]
                if f_ok:
                    s.path.append(neg, site, "fall")
                    s.pc = st.fall
                    return [s]
                self._terminate(s, "infeasible")
                return []
            elif cls is Jump or cls is RetMark:
                t = st.target
                target = vals[t.i] if type(t) is Tmp else t
                reti = cls is RetMark and st.reti
                if type(target) is int:
                    if reti:
                        s.active_isr = None
                    s.pc = target & 0xFFFF
                    return [s]
                choices = self._enumerate(s, target, len(self.image),
                                          "jump target")
                out = []
                for v in choices:
                    try:
                        isa.decode(self.image, v)
                    except isa.IsaError:
                        self.diagnostics.append(
                            f"indirect target 0x{v:04x} undecodable "
                            f"(site 0x{s.cur_site:04x})")
                        continue
                    child = self._fork(s)
                    child.path.append(mk("eq", (target, v), 1), s.cur_site,
                                      "indirect-target")
                    if reti:
                        child.active_isr = None
                    child.pc = v
                    out.append(child)
                if not choices:
                    self._terminate(s, "mem-index-out-of-region")
                elif not out:
                    self._terminate(s, "indirect-undecodable")
                return out
            # CallMark: marker only
            i += 1

    def _run_block(self, s: ExecState) -> list[ExecState]:
        try:
            blk = self.program.block(s.pc)
        except Exception as e:
            self._terminate(s, f"decode-error:{e}")
            return []
        s.cur_block = blk.addr
        outs = self._exec_from(s, blk, 0, [None] * blk.n_temps)
        self.blocks_executed += 1
        entry = blk.addr
        new_cover = False
        for a in blk.instr_addrs:
            if a not in self.covered:
                self.covered.add(a)
                new_cover = True
        if new_cover:
            self.cover_seq += 1
        survivors = []
        for o in outs:
            o.history.append(entry)
            o.visit_counts[entry] = o.visit_counts.get(entry, 0) + 1
            for k in o.cooldowns:
                if o.cooldowns[k] > 0:
                    o.cooldowns[k] -= 1
            if new_cover:
                o.last_cover_seq = self.cover_seq
                o.stale.clear()
            else:
                n = o.stale.get(entry, 0) + 1
                o.stale[entry] = n
                if n > self.config.block_repeat_threshold:
                    self._terminate(o, "loop-pruned")
                    continue
            for ln in self.listeners:
                r = ln.on_block(o)
                if r == STOP_ALL:
                    self.stop_reason = "listener-stop"
                elif r == KILL_PATH:
                    self._terminate(o, "listener-kill")
                    break
            if o.terminated is None:
                survivors.append(o)
        return survivors

    def run(self) -> ExplorationResult:
        self.t0 = time.monotonic()
        s0 = ExecState()
        for expr, note in self.initial_constraints:
            s0.path.append(expr, -1, note)
        self.states_created = 1
        frontier = [s0]
        reason = "complete"
        while frontier:
            if self.stop_reason:
                reason = self.stop_reason
                break
            if (self.config.targets
                    and self.config.stop_when_targets_hit
                    and all(t in self.target_hits for t in self.config.targets)):
                reason = "targets-hit"
                break
            if self.states_created >= self.config.max_states:
                reason = "state-limit"
                self.diagnostics.append("out of state budget: partial result")
                break
            if self.blocks_executed >= self.config.max_blocks:
                reason = "block-limit"
                break
            if (self.config.time_limit is not None
                    and time.monotonic() - self.t0 > self.config.time_limit):
                reason = "time-limit"
                break
            s = select_next(frontier, self.config, self.rng)
            frontier.remove(s)
            if s.pc >= len(self.image):
                self._terminate(s, "exit-image")
                continue
            survivors = self._run_block(s)
            for o in survivors:
                forks = schedule_interrupt(o, self.isr_map, self.config,
                                           self.rng, self.solver)
                for f in forks:
                    self.states_created += 1
                    f.sid = self.states_created
                frontier.extend(forks)
                frontier.append(o)
        for s in frontier:
            self._terminate(s, "unfinished")
        for ln in self.listeners:
            ln.on_termination(self.ended)
        return ExplorationResult(
            ended=self.ended,
            coverage=set(self.covered),
            states_created=self.states_created,
            blocks_executed=self.blocks_executed,
            reason=reason,
            diagnostics=list(self.diagnostics),
            target_hits=dict(self.target_hits),
            wall_time=time.monotonic() - self.t0,
            solver_diagnostics=list(self.solver.diagnostics),
        )


def execute(image: bytes, policy: SymbolicPolicy, config: ExplorationConfig,
            listeners=(), isr_map: dict[str, int] | None = None,
            initial_constraints=()) -> ExplorationResult:
    return Executor(image, policy, config, listeners, isr_map,
                    initial_constraints).run()
