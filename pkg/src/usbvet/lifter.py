"""Demand-driven lifter from 8051 machine code to a region-aware RISC-like IR.

Every memory access in the IR carries a region tag (CODE / IRAM / SFR / XRAM)
fixed at lift time: on the 8051 the addressing mode fully determines the
region, so no runtime resolution is needed. Flag side effects (carry, aux
carry, overflow, parity) are explicit IR stores into PSW. Register-bank
R0-R7 accesses lift to IRAM loads/stores at bank_base(PSW) + n, and DPTR is
the DPH:DPL pair, so direct writes to 0x82/0x83 stay coherent.

Value convention: IR temps hold unsigned integers masked to the statement's
result width; a condition is true when nonzero. PSW bit 0 is the live parity
of ACC, so full-byte reads of PSW substitute it explicitly in the IR.
"""

from __future__ import annotations

from enum import IntEnum

from . import isa, machine


class Region(IntEnum):
    CODE = 0
    IRAM = 1
    SFR = 2
    XRAM = 3


class Tmp:
    """Reference to a block-local single-assignment temporary."""
    __slots__ = ("i",)

    def __init__(self, i: int):
        self.i = i

    def __repr__(self):
        return f"t{self.i}"


# An atom is either an int constant or a Tmp.

class Boundary:
    __slots__ = ("addr", "length")

    def __init__(self, addr, length):
        self.addr = addr
        self.length = length


class Put:
    """Store to a named machine register (an SFR address)."""
    __slots__ = ("reg", "name", "src")

    def __init__(self, reg, name, src):
        self.reg = reg
        self.name = name
        self.src = src


class Load:
    __slots__ = ("dst", "region", "addr", "width")

    def __init__(self, dst, region, addr, width=8):
        self.dst = dst
        self.region = region
        self.addr = addr
        self.width = width


class Store:
    __slots__ = ("region", "addr", "src")

    def __init__(self, region, addr, src):
        self.region = region
        self.addr = addr
        self.src = src


class Assign:
    __slots__ = ("dst", "op", "args", "width")

    def __init__(self, dst, op, args, width):
        self.dst = dst
        self.op = op
        self.args = args
        self.width = width


class CJump:
    __slots__ = ("cond", "taken", "fall")

    def __init__(self, cond, taken, fall):
        self.cond = cond
        self.taken = taken
        self.fall = fall


class Jump:
    __slots__ = ("target",)

    def __init__(self, target):
        self.target = target


class CallMark:
    __slots__ = ("ret_addr",)

    def __init__(self, ret_addr):
        self.ret_addr = ret_addr


class RetMark:
    """Terminator for RET/RETI: indirect jump through the popped address."""
    __slots__ = ("target", "reti")

    def __init__(self, target, reti):
        self.target = target
        self.reti = reti


class UnliftableInstruction(Exception):
    pass


class IRBlock:
    __slots__ = ("addr", "stmts", "n_temps", "instr_addrs", "successors")

    def __init__(self, addr, stmts, n_temps, instr_addrs, successors):
        self.addr = addr
        self.stmts = stmts
        self.n_temps = n_temps
        self.instr_addrs = instr_addrs
        self.successors = successors


_PSW = machine.PSW
_ACC = machine.ACC
_B = machine.B
_SP = machine.SP
_DPL = machine.DPL
_DPH = machine.DPH

_REG_NAMES = {machine.ACC: "ACC", machine.B: "B", machine.PSW: "PSW",
              machine.SP: "SP", machine.DPL: "DPL", machine.DPH: "DPH"}

# PSW flag masks
_CY = 0x80
_AC = 0x40
_OV = 0x04


class _Emit:
    """Statement builder for one block."""

    def __init__(self):
        self.stmts: list = []
        self.n = 0

    def tmp(self, op, args, width) -> Tmp:
        t = Tmp(self.n)
        self.n += 1
        self.stmts.append(Assign(t, op, args, width))
        return t

    def load(self, region, addr, width=8) -> Tmp:
        t = Tmp(self.n)
        self.n += 1
        self.stmts.append(Load(t, region, addr, width))
        return t

    def store(self, region, addr, src):
        self.stmts.append(Store(region, addr, src))

    def put(self, reg, src):
        self.stmts.append(Put(reg, _REG_NAMES.get(reg, f"SFR_{reg:02x}"), src))

    # -- register file helpers ------------------------------------------

    def sfr(self, addr) -> Tmp:
        return self.load(Region.SFR, addr)

    def acc(self) -> Tmp:
        return self.sfr(_ACC)

    def set_acc(self, v):
        self.put(_ACC, v)

    def psw_raw(self) -> Tmp:
        return self.sfr(_PSW)

    def psw_norm(self) -> Tmp:
        """PSW with the parity bit substituted from ACC (bit 0 is combinational)."""
        raw = self.psw_raw()
        p = self.tmp("par", (self.acc(),), 8)
        hi = self.tmp("and", (raw, 0xFE), 8)
        return self.tmp("or", (hi, p), 8)

    def carry(self) -> Tmp:
        return self.tmp("shr", (self.psw_raw(), 7), 8)

    def set_flags(self, cy=None, ac=None, ov=None):
        mask = 0xFF
        if cy is not None:
            mask &= ~_CY
        if ac is not None:
            mask &= ~_AC
        if ov is not None:
            mask &= ~_OV
        v = self.tmp("and", (self.psw_raw(), mask), 8)
        if cy is not None:
            v = self.tmp("or", (v, self.tmp("shl", (cy, 7), 8)), 8)
        if ac is not None:
            v = self.tmp("or", (v, self.tmp("shl", (ac, 6), 8)), 8)
        if ov is not None:
            v = self.tmp("or", (v, self.tmp("shl", (ov, 2), 8)), 8)
        self.put(_PSW, v)

    def bank_slot(self, n: int) -> Tmp:
        base = self.tmp("and", (self.psw_raw(), 0x18), 8)
        return self.tmp("add", (base, n), 8)

    def reg_read(self, n: int) -> Tmp:
        return self.load(Region.IRAM, self.bank_slot(n))

    def reg_write(self, n: int, v):
        self.store(Region.IRAM, self.bank_slot(n), v)

    def dptr(self) -> Tmp:
        hi = self.tmp("shl", (self.sfr(_DPH), 8), 16)
        return self.tmp("or", (hi, self.sfr(_DPL)), 16)

    def set_dptr(self, v):
        self.put(_DPL, self.tmp("and", (v, 0xFF), 8))
        self.put(_DPH, self.tmp("shr", (v, 8), 8))

    # -- operand access --------------------------------------------------

    def read_operand(self, op: isa.Operand) -> Tmp | int:
        k = op.kind
        if k is isa.OpKind.ACC:
            return self.acc()
        if k is isa.OpKind.REG:
            return self.reg_read(op.value)
        if k is isa.OpKind.DIRECT:
            if op.value == _PSW:
                return self.psw_norm()
            region = Region.IRAM if op.value < 0x80 else Region.SFR
            return self.load(region, op.value)
        if k is isa.OpKind.INDIRECT:
            return self.load(Region.IRAM, self.reg_read(op.value))
        if k in (isa.OpKind.IMM8, isa.OpKind.IMM16):
            return op.value
        raise AssertionError(k)

    def write_operand(self, op: isa.Operand, v):
        k = op.kind
        if k is isa.OpKind.ACC:
            self.set_acc(v)
        elif k is isa.OpKind.REG:
            self.reg_write(op.value, v)
        elif k is isa.OpKind.DIRECT:
            if op.value >= 0x80:
                if op.value in _REG_NAMES:
                    self.put(op.value, v)
                else:
                    self.store(Region.SFR, op.value, v)
            else:
                self.store(Region.IRAM, op.value, v)
        elif k is isa.OpKind.INDIRECT:
            self.store(Region.IRAM, self.reg_read(op.value), v)
        else:
            raise AssertionError(k)

    def bit_location(self, bit: int) -> tuple[Region, int, int]:
        """(region, byte address, bit index) for a bit-address operand."""
        if bit < 0x80:
            return Region.IRAM, 0x20 + (bit >> 3), bit & 7
        return Region.SFR, bit & 0xF8, bit & 7

    def read_bit(self, bit: int) -> Tmp:
        region, addr, idx = self.bit_location(bit)
        if addr == _PSW:
            byte = self.psw_norm()
        else:
            byte = self.load(region, addr)
        return self.tmp("and", (self.tmp("shr", (byte, idx), 8), 1), 8)

    def write_bit_value(self, bit: int, v):
        """Read-modify-write of the containing byte; v must be 0/1."""
        region, addr, idx = self.bit_location(bit)
        byte = self.psw_norm() if addr == _PSW else self.load(region, addr)
        cleared = self.tmp("and", (byte, (~(1 << idx)) & 0xFF), 8)
        newb = self.tmp("or", (cleared, self.tmp("shl", (v, idx), 8)), 8)
        if addr in _REG_NAMES:
            self.put(addr, newb)
        else:
            self.store(region, addr, newb)

    def push(self, v):
        sp = self.sfr(_SP)
        sp1 = self.tmp("add", (sp, 1), 8)
        self.put(_SP, sp1)
        self.store(Region.IRAM, sp1, v)

    def add_with_flags(self, value, carry_in):
        a = self.acc()
        total = self.tmp("add", (self.tmp("add", (a, value), 16), carry_in), 16)
        r = self.tmp("and", (total, 0xFF), 8)
        cy = self.tmp("shr", (total, 8), 8)
        an = self.tmp("and", (a, 0x0F), 8)
        bn = self.tmp("and", (value, 0x0F), 8)
        nib = self.tmp("add", (self.tmp("add", (an, bn), 16), carry_in), 16)
        ac = self.tmp("shr", (nib, 4), 8)
        ac = self.tmp("and", (ac, 1), 8)
        xa = self.tmp("xor", (a, r), 8)
        xb = self.tmp("xor", (value, r), 8)
        ov = self.tmp("shr", (self.tmp("and", (xa, xb), 8), 7), 8)
        self.set_flags(cy=cy, ac=ac, ov=ov)
        self.set_acc(r)


def _lift_one(e: _Emit, ins: isa.Instruction) -> object | None:
    """Emit IR for one instruction; returns the terminator or None."""
    m = ins.mnemonic
    ops = ins.operands
    next_pc = (ins.addr + ins.length) & 0xFFFF

    if m == "NOP":
        return None
    if m in ("LJMP", "AJMP", "SJMP"):
        return Jump(ops[0].value)
    if m == "JMP":  # @A+DPTR
        t = e.tmp("add", (e.acc(), e.dptr()), 16)
        return Jump(t)
    if m in ("LCALL", "ACALL"):
        e.stmts.append(CallMark(next_pc))
        e.push(next_pc & 0xFF)
        e.push(next_pc >> 8)
        return Jump(ops[0].value)
    if m in ("RET", "RETI"):
        sp = e.sfr(_SP)
        hi = e.load(Region.IRAM, sp)
        sp1 = e.tmp("sub", (sp, 1), 8)
        lo = e.load(Region.IRAM, sp1)
        e.put(_SP, e.tmp("sub", (sp, 2), 8))
        target = e.tmp("or", (e.tmp("shl", (hi, 8), 16), lo), 16)
        return RetMark(target, m == "RETI")
    if m == "JZ":
        return CJump(e.tmp("eq", (e.acc(), 0), 8), ops[0].value, next_pc)
    if m == "JNZ":
        return CJump(e.tmp("ne", (e.acc(), 0), 8), ops[0].value, next_pc)
    if m == "JC":
        return CJump(e.carry(), ops[0].value, next_pc)
    if m == "JNC":
        return CJump(e.tmp("eq", (e.carry(), 0), 8), ops[0].value, next_pc)
    if m == "JB":
        return CJump(e.read_bit(ops[0].value), ops[1].value, next_pc)
    if m == "JNB":
        cond = e.tmp("eq", (e.read_bit(ops[0].value), 0), 8)
        return CJump(cond, ops[1].value, next_pc)
    if m == "JBC":
        region, addr, idx = e.bit_location(ops[0].value)
        byte = e.psw_norm() if addr == _PSW else e.load(region, addr)
        bit = e.tmp("and", (e.tmp("shr", (byte, idx), 8), 1), 8)
        cleared = e.tmp("and", (byte, (~(1 << idx)) & 0xFF), 8)
        # untaken arm must leave the stored byte untouched (PSW keeps its raw
        # dead parity bit), so reload raw for the else value
        old = e.psw_raw() if addr == _PSW else byte
        newb = e.tmp("ite", (bit, cleared, old), 8)
        if addr in _REG_NAMES:
            e.put(addr, newb)
        else:
            e.store(region, addr, newb)
        return CJump(bit, ops[1].value, next_pc)
    if m == "CJNE":
        a = e.read_operand(ops[0])
        b = e.read_operand(ops[1])
        e.set_flags(cy=e.tmp("ult", (a, b), 8))
        return CJump(e.tmp("ne", (a, b), 8), ops[2].value, next_pc)
    if m == "DJNZ":
        v = e.tmp("sub", (e.read_operand(ops[0]), 1), 8)
        e.write_operand(ops[0], v)
        return CJump(e.tmp("ne", (v, 0), 8), ops[1].value, next_pc)

    if m == "MOV":
        k0 = ops[0].kind
        if k0 is isa.OpKind.DPTR:
            e.put(_DPL, ops[1].value & 0xFF)
            e.put(_DPH, ops[1].value >> 8)
        elif k0 is isa.OpKind.CARRY:
            e.set_flags(cy=e.read_bit(ops[1].value))
        elif k0 is isa.OpKind.BIT:
            e.write_bit_value(ops[0].value, e.carry())
        else:
            e.write_operand(ops[0], e.read_operand(ops[1]))
        return None
    if m == "MOVC":
        if ops[1].kind is isa.OpKind.CODE_DPTR:
            addr = e.tmp("add", (e.acc(), e.dptr()), 16)
        else:  # @A+PC: base is the address of the *next* instruction
            addr = e.tmp("add", (e.acc(), next_pc), 16)
        e.set_acc(e.load(Region.CODE, addr))
        return None
    if m == "MOVX":
        if ops[0].kind is isa.OpKind.ACC:
            src = ops[1]
            addr = e.dptr() if src.kind is isa.OpKind.IND_DPTR else e.reg_read(src.value)
            e.set_acc(e.load(Region.XRAM, addr))
        else:
            dst = ops[0]
            addr = e.dptr() if dst.kind is isa.OpKind.IND_DPTR else e.reg_read(dst.value)
            e.store(Region.XRAM, addr, e.acc())
        return None
    if m == "ADD":
        e.add_with_flags(e.read_operand(ops[1]), 0)
        return None
    if m == "ADDC":
        e.add_with_flags(e.read_operand(ops[1]), e.carry())
        return None
    if m == "SUBB":
        a = e.acc()
        v = e.read_operand(ops[1])
        c = e.carry()
        total = e.tmp("sub", (e.tmp("sub", (a, v), 16), c), 16)
        r = e.tmp("and", (total, 0xFF), 8)
        cy = e.tmp("and", (e.tmp("shr", (total, 8), 16), 1), 8)  # borrow bit
        nib = e.tmp("sub", (e.tmp("sub", (e.tmp("and", (a, 0x0F), 8),
                                          e.tmp("and", (v, 0x0F), 8)), 16), c), 16)
        ac = e.tmp("and", (e.tmp("shr", (nib, 4), 16), 1), 8)
        xav = e.tmp("xor", (a, v), 8)
        xar = e.tmp("xor", (a, r), 8)
        ov = e.tmp("shr", (e.tmp("and", (xav, xar), 8), 7), 8)
        e.set_flags(cy=cy, ac=ac, ov=ov)
        e.set_acc(r)
        return None
    if m == "INC":
        if ops[0].kind is isa.OpKind.DPTR:
            e.set_dptr(e.tmp("add", (e.dptr(), 1), 16))
        else:
            e.write_operand(ops[0], e.tmp("add", (e.read_operand(ops[0]), 1), 8))
        return None
    if m == "DEC":
        e.write_operand(ops[0], e.tmp("sub", (e.read_operand(ops[0]), 1), 8))
        return None
    if m in ("ANL", "ORL", "XRL"):
        opname = {"ANL": "and", "ORL": "or", "XRL": "xor"}[m]
        if ops[0].kind is isa.OpKind.CARRY:
            bv = e.read_bit(ops[1].value)
            if ops[1].kind is isa.OpKind.NOT_BIT:
                bv = e.tmp("xor", (bv, 1), 8)
            e.set_flags(cy=e.tmp(opname, (e.carry(), bv), 8))
        else:
            r = e.tmp(opname, (e.read_operand(ops[0]), e.read_operand(ops[1])), 8)
            e.write_operand(ops[0], r)
        return None
    if m == "CLR":
        if ops[0].kind is isa.OpKind.ACC:
            e.set_acc(0)
        elif ops[0].kind is isa.OpKind.CARRY:
            e.set_flags(cy=0)
        else:
            e.write_bit_value(ops[0].value, 0)
        return None
    if m == "SETB":
        if ops[0].kind is isa.OpKind.CARRY:
            e.set_flags(cy=1)
        else:
            e.write_bit_value(ops[0].value, 1)
        return None
    if m == "CPL":
        if ops[0].kind is isa.OpKind.ACC:
            e.set_acc(e.tmp("xor", (e.acc(), 0xFF), 8))
        elif ops[0].kind is isa.OpKind.CARRY:
            e.set_flags(cy=e.tmp("xor", (e.carry(), 1), 8))
        else:
            b = e.read_bit(ops[0].value)
            e.write_bit_value(ops[0].value, e.tmp("xor", (b, 1), 8))
        return None
    if m == "RL":
        e.set_acc(e.tmp("rotl", (e.acc(), 1), 8))
        return None
    if m == "RR":
        e.set_acc(e.tmp("rotl", (e.acc(), 7), 8))
        return None
    if m == "RLC":
        a = e.acc()
        c = e.carry()
        e.set_flags(cy=e.tmp("shr", (a, 7), 8))
        e.set_acc(e.tmp("or", (e.tmp("shl", (a, 1), 8), c), 8))
        return None
    if m == "RRC":
        a = e.acc()
        c = e.carry()
        e.set_flags(cy=e.tmp("and", (a, 1), 8))
        e.set_acc(e.tmp("or", (e.tmp("shl", (c, 7), 8), e.tmp("shr", (a, 1), 8)), 8))
        return None
    if m == "SWAP":
        e.set_acc(e.tmp("rotl", (e.acc(), 4), 8))
        return None
    if m == "XCH":
        a = e.acc()
        other = e.read_operand(ops[1])
        e.set_acc(other)
        e.write_operand(ops[1], a)
        return None
    if m == "XCHD":
        a = e.acc()
        other = e.read_operand(ops[1])
        e.set_acc(e.tmp("or", (e.tmp("and", (a, 0xF0), 8),
                               e.tmp("and", (other, 0x0F), 8)), 8))
        e.write_operand(ops[1], e.tmp("or", (e.tmp("and", (other, 0xF0), 8),
                                             e.tmp("and", (a, 0x0F), 8)), 8))
        return None
    if m == "MUL":
        prod = e.tmp("mul", (e.acc(), e.sfr(_B)), 16)
        hi = e.tmp("shr", (prod, 8), 8)
        e.set_acc(e.tmp("and", (prod, 0xFF), 8))
        e.put(_B, hi)
        e.set_flags(cy=0, ov=e.tmp("ne", (hi, 0), 8))
        return None
    if m == "DIV":
        a = e.acc()
        b = e.sfr(_B)
        bz = e.tmp("eq", (b, 0), 8)
        q = e.tmp("ite", (bz, a, e.tmp("udiv", (a, b), 8)), 8)
        r = e.tmp("ite", (bz, b, e.tmp("umod", (a, b), 8)), 8)
        e.set_acc(q)
        e.put(_B, r)
        e.set_flags(cy=0, ov=bz)
        return None
    if m == "DA":
        a = e.acc()
        cy = e.carry()
        ac = e.tmp("and", (e.tmp("shr", (e.psw_raw(), 6), 8), 1), 8)
        lowsel = e.tmp("or", (e.tmp("ugt", (e.tmp("and", (a, 0x0F), 8), 9), 8), ac), 8)
        t1 = e.tmp("add", (a, e.tmp("ite", (lowsel, 0x06, 0), 8)), 16)
        cy1 = e.tmp("or", (e.tmp("shr", (t1, 8), 8), cy), 8)
        a1 = e.tmp("and", (t1, 0xFF), 8)
        highsel = e.tmp("or", (cy1, e.tmp("ugt", (e.tmp("shr", (a1, 4), 8), 9), 8)), 8)
        t2 = e.tmp("add", (a1, e.tmp("ite", (highsel, 0x60, 0), 8)), 16)
        cyf = e.tmp("or", (cy1, e.tmp("shr", (t2, 8), 8)), 8)
        e.set_acc(e.tmp("and", (t2, 0xFF), 8))
        e.set_flags(cy=cyf)
        return None
    if m == "PUSH":
        v = e.read_operand(ops[0])
        e.push(v)
        return None
    if m == "POP":
        sp = e.sfr(_SP)
        v = e.load(Region.IRAM, sp)
        e.put(_SP, e.tmp("sub", (sp, 1), 8))
        e.write_operand(ops[0], v)
        return None
    raise UnliftableInstruction(f"{m} at 0x{ins.addr:04x}")


# A block ends at the first control-flow instruction, a decode failure, the
# image end, or this many instructions (keeps NOP seas from producing one
# giant block).
MAX_BLOCK_INSTRS = 128


def lift_block(image: bytes, addr: int, max_instrs: int = MAX_BLOCK_INSTRS) -> IRBlock:
    """Lift the basic block starting at addr (terminator included)."""
    e = _Emit()
    instr_addrs: list[int] = []
    pos = addr
    terminator = None
    count = 0
    while True:
        ins = isa.decode(image, pos)  # first decode failure propagates to caller
        e.stmts.append(Boundary(ins.addr, ins.length))
        instr_addrs.append(ins.addr)
        terminator = _lift_one(e, ins)
        pos = (pos + ins.length) & 0xFFFF
        count += 1
        if terminator is not None:
            break
        if pos >= len(image) or count >= max_instrs:
            terminator = Jump(pos)
            break
        try:
            isa.decode(image, pos)
        except isa.IsaError:
            terminator = Jump(pos)  # runtime error surfaces if actually reached
            break
    e.stmts.append(terminator)
    if isinstance(terminator, Jump) and isinstance(terminator.target, int):
        succ = (terminator.target,)
    elif isinstance(terminator, CJump):
        succ = (terminator.taken, terminator.fall)
    else:
        succ = ()
    return IRBlock(addr, e.stmts, e.n, instr_addrs, succ)


class LiftedProgram:
    """Lazily populated cache of lifted blocks, keyed by entry address."""

    def __init__(self, image: bytes):
        self.image = bytes(image)
        self.cache: dict[int, IRBlock] = {}

    def block(self, addr: int) -> IRBlock:
        blk = self.cache.get(addr)
        if blk is None:
            blk = lift_block(self.image, addr)
            self.cache[addr] = blk
        return blk


def lift_program(image: bytes) -> LiftedProgram:
    return LiftedProgram(image)


# ---------------------------------------------------------------------------
# Concrete IR evaluation (ints only) -- reference executor for the lifter and
# the fast half of the lifter/interpreter differential tests.
# ---------------------------------------------------------------------------

# Operator semantics are owned by the expression module so the concrete and
# symbolic evaluations of the same IR can never drift apart.
from .solver import eval_op  # noqa: E402


def run_lifted(program: LiftedProgram, st: machine.ConcreteState,
               max_instrs: int) -> int:
    """Execute lifted IR concretely over a ConcreteState. Returns instructions run.

    Stops when max_instrs is reached, the PC leaves the image, or decoding
    fails at the PC. Accesses the raw memory images directly: all PSW parity
    and bank-pointer handling is already explicit in the IR.
    """
    image = program.image
    iram = st.iram
    sfr = st.sfr
    xram = st.xram
    executed = 0
    while st.pc < len(image):
        try:
            blk = program.block(st.pc)
        except isa.IsaError:
            break
        vals = [0] * blk.n_temps
        next_pc = None
        for stmt in blk.stmts:
            cls = stmt.__class__
            if cls is Assign:
                a = stmt.args
                resolved = tuple(vals[x.i] if type(x) is Tmp else x for x in a)
                vals[stmt.dst.i] = eval_op(stmt.op, resolved, stmt.width)
            elif cls is Load:
                a = stmt.addr
                addr = vals[a.i] if type(a) is Tmp else a
                r = stmt.region
                if r == Region.IRAM:
                    vals[stmt.dst.i] = iram[addr & 0xFF]
                elif r == Region.SFR:
                    vals[stmt.dst.i] = sfr[(addr - 0x80) & 0x7F]
                elif r == Region.XRAM:
                    vals[stmt.dst.i] = xram.get(addr & 0xFFFF, 0)
                else:
                    vals[stmt.dst.i] = image[addr] if addr < len(image) else 0
            elif cls is Store:
                a = stmt.addr
                addr = vals[a.i] if type(a) is Tmp else a
                v = stmt.src
                v = vals[v.i] if type(v) is Tmp else v
                r = stmt.region
                if r == Region.IRAM:
                    iram[addr & 0xFF] = v
                elif r == Region.SFR:
                    sfr[(addr - 0x80) & 0x7F] = v
                elif r == Region.XRAM:
                    xram[addr & 0xFFFF] = v
                else:
                    raise AssertionError("store to CODE")
            elif cls is Put:
                v = stmt.src
                sfr[stmt.reg - 0x80] = vals[v.i] if type(v) is Tmp else v
            elif cls is Boundary:
                if executed >= max_instrs:
                    st.pc = stmt.addr
                    return executed
                executed += 1
                st.instr_count += 1
            elif cls is CJump:
                c = stmt.cond
                c = vals[c.i] if type(c) is Tmp else c
                next_pc = stmt.taken if c else stmt.fall
            elif cls is Jump:
                t = stmt.target
                next_pc = vals[t.i] if type(t) is Tmp else t
            elif cls is RetMark:
                t = stmt.target
                next_pc = vals[t.i] if type(t) is Tmp else t
                if stmt.reti:
                    st.in_interrupt = False
            # CallMark: bookkeeping only
        st.pc = next_pc & 0xFFFF
    return executed


# ---------------------------------------------------------------------------
# Pretty printer (stable text form, one statement per line)
# ---------------------------------------------------------------------------

def _atom_text(a) -> str:
    if type(a) is Tmp:
        return f"t{a.i}"
    return f"0x{a:x}"


def _target_text(a) -> str:
    if type(a) is Tmp:
        return f"t{a.i}"
    return f"0x{a:04x}"


def format_block(blk: IRBlock) -> str:
    lines = [f"block 0x{blk.addr:04x}"]
    for s in blk.stmts:
        cls = s.__class__
        if cls is Boundary:
            lines.append(f"  instr 0x{s.addr:04x} len {s.length}")
        elif cls is Assign:
            args = ", ".join(_atom_text(a) for a in s.args)
            lines.append(f"  t{s.dst.i} = {s.op}.{s.width}({args})")
        elif cls is Load:
            lines.append(f"  t{s.dst.i} = load.{Region(s.region).name}"
                         f"[{_atom_text(s.addr)}]")
        elif cls is Store:
            lines.append(f"  store.{Region(s.region).name}[{_atom_text(s.addr)}]"
                         f" = {_atom_text(s.src)}")
        elif cls is Put:
            lines.append(f"  put {s.name} = {_atom_text(s.src)}")
        elif cls is CJump:
            lines.append(f"  cjump {_atom_text(s.cond)} ? 0x{s.taken:04x}"
                         f" : 0x{s.fall:04x}")
        elif cls is Jump:
            lines.append(f"  jump {_target_text(s.target)}")
        elif cls is CallMark:
            lines.append(f"  call-mark ret=0x{s.ret_addr:04x}")
        elif cls is RetMark:
            kind = "reti" if s.reti else "ret"
            lines.append(f"  {kind} {_target_text(s.target)}")
    return "\n".join(lines)
