"""Concrete 8051/8052 machine model.

Register file, the three runtime memory images (IRAM / SFR / XRAM; CODE is the
read-only image itself), interrupt-enable semantics and a plain interpreter.
The interpreter is a direct opcode dispatch, deliberately independent of the
IR lifter, so the two can be differentially tested against each other.

Conventions pinned here (and mirrored by the lifter):
  - PSW bit 0 (parity of ACC) is combinational hardware; the stored byte's
    bit 0 is dead and every read of PSW substitutes parity(ACC).
  - DIV AB with B == 0 leaves A and B unchanged and sets OV (the datasheet
    declares the results undefined).
  - MOVX @Ri addresses XRAM page 0 (P2 paging is not modeled).
  - XRAM and unimplemented SFR addresses read 0 until written.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import isa

# SFR addresses
P0 = 0x80
SP = 0x81
DPL = 0x82
DPH = 0x83
PCON = 0x87
TCON = 0x88
P1 = 0x90
SCON = 0x98
SBUF = 0x99
P2 = 0xA0
IE = 0xA8
P3 = 0xB0
IP = 0xB8
PSW = 0xD0
ACC = 0xE0
B = 0xF0
# 8052 timer-2 block
T2CON = 0xC8
RCAP2L = 0xCA
RCAP2H = 0xCB
TL2 = 0xCC
TH2 = 0xCD

SFR_NAMES = {
    P0: "P0", SP: "SP", DPL: "DPL", DPH: "DPH", PCON: "PCON", TCON: "TCON",
    P1: "P1", SCON: "SCON", SBUF: "SBUF", P2: "P2", IE: "IE", P3: "P3",
    IP: "IP", PSW: "PSW", ACC: "ACC", B: "B",
    T2CON: "T2CON", RCAP2L: "RCAP2L", RCAP2H: "RCAP2H", TL2: "TL2", TH2: "TH2",
}

# PSW bit positions
PSW_P = 0
PSW_OV = 2
PSW_RS = 3  # two bits
PSW_AC = 6
PSW_CY = 7

RESET_SP = 0x07

# Interrupt sources: vector address and IE enable bit.
INT_SOURCES = {
    "external0": (0x0003, 0),
    "timer0": (0x000B, 1),
    "external1": (0x0013, 2),
    "timer1": (0x001B, 3),
    "serial": (0x0023, 4),
    "timer2": (0x002B, 5),  # 8052
}
IE_EA_BIT = 7


class MachineError(Exception):
    pass


class StackOverflow(MachineError):
    pass


def parity(v: int) -> int:
    """1 if v has an odd number of set bits (8051 P flag convention)."""
    v ^= v >> 4
    v ^= v >> 2
    v ^= v >> 1
    return v & 1


@dataclass
class ConcreteState:
    pc: int = 0
    iram: bytearray = field(default_factory=lambda: bytearray(256))
    sfr: bytearray = field(default_factory=lambda: bytearray(128))
    xram: dict[int, int] = field(default_factory=dict)
    halted: bool = False
    instr_count: int = 0
    in_interrupt: bool = False

    def __post_init__(self):
        if self.sfr[SP - 0x80] == 0:
            self.sfr[SP - 0x80] = RESET_SP

    def clone(self) -> "ConcreteState":
        return ConcreteState(self.pc, bytearray(self.iram), bytearray(self.sfr),
                             dict(self.xram), self.halted, self.instr_count,
                             self.in_interrupt)

    # SFR access. Reads of PSW fold in the live parity bit.
    def read_sfr(self, addr: int) -> int:
        v = self.sfr[addr - 0x80]
        if addr == PSW:
            v = (v & 0xFE) | parity(self.sfr[ACC - 0x80])
        return v

    def write_sfr(self, addr: int, value: int):
        self.sfr[addr - 0x80] = value & 0xFF

    def read_direct(self, addr: int) -> int:
        if addr < 0x80:
            return self.iram[addr]
        return self.read_sfr(addr)

    def write_direct(self, addr: int, value: int):
        if addr < 0x80:
            self.iram[addr] = value & 0xFF
        else:
            self.write_sfr(addr, value)

    def read_xram(self, addr: int) -> int:
        return self.xram.get(addr & 0xFFFF, 0)

    def write_xram(self, addr: int, value: int):
        self.xram[addr & 0xFFFF] = value & 0xFF

    # Register bank helpers: R0-R7 alias IRAM[bank_base + n].
    def bank_base(self) -> int:
        return self.sfr[PSW - 0x80] & 0x18

    def reg(self, n: int) -> int:
        return self.iram[self.bank_base() + n]

    def set_reg(self, n: int, value: int):
        self.iram[self.bank_base() + n] = value & 0xFF

    @property
    def acc(self) -> int:
        return self.sfr[ACC - 0x80]

    @acc.setter
    def acc(self, v: int):
        self.sfr[ACC - 0x80] = v & 0xFF

    @property
    def dptr(self) -> int:
        return (self.sfr[DPH - 0x80] << 8) | self.sfr[DPL - 0x80]

    @dptr.setter
    def dptr(self, v: int):
        self.sfr[DPL - 0x80] = v & 0xFF
        self.sfr[DPH - 0x80] = (v >> 8) & 0xFF

    @property
    def sp(self) -> int:
        return self.sfr[SP - 0x80]

    @sp.setter
    def sp(self, v: int):
        self.sfr[SP - 0x80] = v & 0xFF

    def flag(self, bit: int) -> int:
        if bit == PSW_P:
            return parity(self.acc)
        return (self.sfr[PSW - 0x80] >> bit) & 1

    def set_flag(self, bit: int, value: int):
        raw = self.sfr[PSW - 0x80]
        if value:
            raw |= 1 << bit
        else:
            raw &= ~(1 << bit) & 0xFF
        self.sfr[PSW - 0x80] = raw

    # Bit-addressable space: 0x00-0x7F map to IRAM 0x20-0x2F, 0x80-0xFF to
    # SFR bits (byte address = bit & 0xF8).
    def bit_byte_addr(self, bit: int) -> int:
        if bit < 0x80:
            return 0x20 + (bit >> 3)
        return bit & 0xF8

    def read_bit(self, bit: int) -> int:
        byte = self.read_direct(self.bit_byte_addr(bit))
        return (byte >> (bit & 7)) & 1

    def write_bit(self, bit: int, value: int):
        addr = self.bit_byte_addr(bit)
        byte = self.read_direct(addr)
        mask = 1 << (bit & 7)
        self.write_direct(addr, (byte | mask) if value else (byte & ~mask))

    def push(self, value: int):
        if self.sp == 0xFF:
            raise StackOverflow(f"SP wrap at pc=0x{self.pc:04x}")
        self.sp = self.sp + 1
        self.iram[self.sp] = value & 0xFF

    def pop(self) -> int:
        v = self.iram[self.sp]
        self.sp = (self.sp - 1) & 0xFF
        return v

    def dump(self) -> str:
        """Textual snapshot for golden tests / debugging."""
        lines = [f"PC={self.pc:04x} SP={self.sp:02x} A={self.acc:02x} "
                 f"PSW={self.read_sfr(PSW):02x} DPTR={self.dptr:04x}"]
        for base in range(0, 256, 16):
            row = " ".join(f"{self.iram[base + i]:02x}" for i in range(16))
            lines.append(f"iram {base:02x}: {row}")
        for base in range(0x80, 0x100, 16):
            row = " ".join(f"{self.read_sfr(base + i) if base + i == PSW else self.sfr[base + i - 0x80]:02x}"
                           for i in range(16))
            lines.append(f"sfr  {base:02x}: {row}")
        for addr in sorted(self.xram):
            lines.append(f"xram {addr:04x}: {self.xram[addr]:02x}")
        return "\n".join(lines)


def _signed(v: int) -> int:
    return v - 256 if v > 127 else v


def _operand_value(st: ConcreteState, image: bytes, op: isa.Operand) -> int:
    k = op.kind
    if k is isa.OpKind.ACC:
        return st.acc
    if k is isa.OpKind.REG:
        return st.reg(op.value)
    if k is isa.OpKind.DIRECT:
        return st.read_direct(op.value)
    if k is isa.OpKind.INDIRECT:
        return st.iram[st.reg(op.value)]
    if k is isa.OpKind.IMM8 or k is isa.OpKind.IMM16:
        return op.value
    raise AssertionError(k)


def _operand_store(st: ConcreteState, op: isa.Operand, value: int):
    k = op.kind
    if k is isa.OpKind.ACC:
        st.acc = value
    elif k is isa.OpKind.REG:
        st.set_reg(op.value, value)
    elif k is isa.OpKind.DIRECT:
        st.write_direct(op.value, value)
    elif k is isa.OpKind.INDIRECT:
        st.iram[st.reg(op.value)] = value & 0xFF
    else:
        raise AssertionError(k)


def _add(st: ConcreteState, value: int, carry_in: int):
    a = st.acc
    total = a + value + carry_in
    st.set_flag(PSW_CY, total > 0xFF)
    st.set_flag(PSW_AC, ((a & 0x0F) + (value & 0x0F) + carry_in) > 0x0F)
    r = total & 0xFF
    st.set_flag(PSW_OV, ((a ^ r) & (value ^ r) & 0x80) != 0)
    st.acc = r


def _subb(st: ConcreteState, value: int):
    a = st.acc
    c = st.flag(PSW_CY)
    total = a - value - c
    st.set_flag(PSW_CY, total < 0)
    st.set_flag(PSW_AC, ((a & 0x0F) - (value & 0x0F) - c) < 0)
    r = total & 0xFF
    st.set_flag(PSW_OV, ((a ^ value) & (a ^ r) & 0x80) != 0)
    st.acc = r


def step_concrete(st: ConcreteState, image: bytes) -> ConcreteState:
    """Execute exactly one instruction, mutating and returning st."""
    if st.halted:
        raise MachineError("machine is halted")
    ins = isa.decode(image, st.pc)
    next_pc = (st.pc + ins.length) & 0xFFFF
    st.pc = next_pc
    st.instr_count += 1
    m = ins.mnemonic
    ops = ins.operands

    if m == "NOP":
        pass
    elif m in ("LJMP", "AJMP", "SJMP"):
        st.pc = ops[0].value
    elif m == "JMP":  # @A+DPTR
        st.pc = (st.acc + st.dptr) & 0xFFFF
    elif m in ("LCALL", "ACALL"):
        st.push(next_pc & 0xFF)
        st.push(next_pc >> 8)
        st.pc = ops[0].value
    elif m in ("RET", "RETI"):
        hi = st.pop()
        lo = st.pop()
        st.pc = (hi << 8) | lo
        if m == "RETI":
            st.in_interrupt = False
    elif m == "JZ":
        if st.acc == 0:
            st.pc = ops[0].value
    elif m == "JNZ":
        if st.acc != 0:
            st.pc = ops[0].value
    elif m == "JC":
        if st.flag(PSW_CY):
            st.pc = ops[0].value
    elif m == "JNC":
        if not st.flag(PSW_CY):
            st.pc = ops[0].value
    elif m == "JB":
        if st.read_bit(ops[0].value):
            st.pc = ops[1].value
    elif m == "JNB":
        if not st.read_bit(ops[0].value):
            st.pc = ops[1].value
    elif m == "JBC":
        if st.read_bit(ops[0].value):
            st.write_bit(ops[0].value, 0)
            st.pc = ops[1].value
    elif m == "CJNE":
        a = _operand_value(st, image, ops[0])
        b_val = _operand_value(st, image, ops[1])
        st.set_flag(PSW_CY, a < b_val)
        if a != b_val:
            st.pc = ops[2].value
    elif m == "DJNZ":
        v = (_operand_value(st, image, ops[0]) - 1) & 0xFF
        _operand_store(st, ops[0], v)
        if v != 0:
            st.pc = ops[1].value
    elif m == "MOV":
        k0 = ops[0].kind
        if k0 is isa.OpKind.DPTR:
            st.dptr = ops[1].value
        elif k0 is isa.OpKind.CARRY:
            st.set_flag(PSW_CY, st.read_bit(ops[1].value))
        elif k0 is isa.OpKind.BIT:
            st.write_bit(ops[0].value, st.flag(PSW_CY))
        else:
            _operand_store(st, ops[0], _operand_value(st, image, ops[1]))
    elif m == "MOVC":
        base = st.dptr if ops[1].kind is isa.OpKind.CODE_DPTR else next_pc
        addr = (st.acc + base) & 0xFFFF
        st.acc = image[addr] if addr < len(image) else 0
    elif m == "MOVX":
        if ops[0].kind is isa.OpKind.ACC:
            src = ops[1]
            addr = st.dptr if src.kind is isa.OpKind.IND_DPTR else st.reg(src.value)
            st.acc = st.read_xram(addr)
        else:
            dst = ops[0]
            addr = st.dptr if dst.kind is isa.OpKind.IND_DPTR else st.reg(dst.value)
            st.write_xram(addr, st.acc)
    elif m == "ADD":
        _add(st, _operand_value(st, image, ops[1]), 0)
    elif m == "ADDC":
        _add(st, _operand_value(st, image, ops[1]), st.flag(PSW_CY))
    elif m == "SUBB":
        _subb(st, _operand_value(st, image, ops[1]))
    elif m == "INC":
        if ops[0].kind is isa.OpKind.DPTR:
            st.dptr = (st.dptr + 1) & 0xFFFF
        else:
            _operand_store(st, ops[0],
                           (_operand_value(st, image, ops[0]) + 1) & 0xFF)
    elif m == "DEC":
        _operand_store(st, ops[0], (_operand_value(st, image, ops[0]) - 1) & 0xFF)
    elif m in ("ANL", "ORL", "XRL"):
        if ops[0].kind is isa.OpKind.CARRY:
            bit_op = ops[1]
            bv = st.read_bit(bit_op.value)
            if bit_op.kind is isa.OpKind.NOT_BIT:
                bv ^= 1
            c = st.flag(PSW_CY)
            st.set_flag(PSW_CY, (c & bv) if m == "ANL" else (c | bv))
        else:
            a = _operand_value(st, image, ops[0])
            b_val = _operand_value(st, image, ops[1])
            r = a & b_val if m == "ANL" else a | b_val if m == "ORL" else a ^ b_val
            _operand_store(st, ops[0], r)
    elif m == "CLR":
        if ops[0].kind is isa.OpKind.ACC:
            st.acc = 0
        elif ops[0].kind is isa.OpKind.CARRY:
            st.set_flag(PSW_CY, 0)
        else:
            st.write_bit(ops[0].value, 0)
    elif m == "SETB":
        if ops[0].kind is isa.OpKind.CARRY:
            st.set_flag(PSW_CY, 1)
        else:
            st.write_bit(ops[0].value, 1)
    elif m == "CPL":
        if ops[0].kind is isa.OpKind.ACC:
            st.acc = st.acc ^ 0xFF
        elif ops[0].kind is isa.OpKind.CARRY:
            st.set_flag(PSW_CY, st.flag(PSW_CY) ^ 1)
        else:
            st.write_bit(ops[0].value, st.read_bit(ops[0].value) ^ 1)
    elif m == "RL":
        a = st.acc
        st.acc = ((a << 1) | (a >> 7)) & 0xFF
    elif m == "RR":
        a = st.acc
        st.acc = ((a >> 1) | (a << 7)) & 0xFF
    elif m == "RLC":
        a = st.acc
        c = st.flag(PSW_CY)
        st.set_flag(PSW_CY, (a >> 7) & 1)
        st.acc = ((a << 1) | c) & 0xFF
    elif m == "RRC":
        a = st.acc
        c = st.flag(PSW_CY)
        st.set_flag(PSW_CY, a & 1)
        st.acc = (c << 7) | (a >> 1)
    elif m == "SWAP":
        a = st.acc
        st.acc = ((a << 4) | (a >> 4)) & 0xFF
    elif m == "XCH":
        other = _operand_value(st, image, ops[1])
        a = st.acc
        st.acc = other
        _operand_store(st, ops[1], a)
    elif m == "XCHD":
        other = _operand_value(st, image, ops[1])
        a = st.acc
        st.acc = (a & 0xF0) | (other & 0x0F)
        _operand_store(st, ops[1], (other & 0xF0) | (a & 0x0F))
    elif m == "MUL":
        prod = st.acc * st.sfr[B - 0x80]
        st.acc = prod & 0xFF
        st.write_sfr(B, prod >> 8)
        st.set_flag(PSW_CY, 0)
        st.set_flag(PSW_OV, prod > 0xFF)
    elif m == "DIV":
        b_val = st.sfr[B - 0x80]
        st.set_flag(PSW_CY, 0)
        if b_val == 0:
            st.set_flag(PSW_OV, 1)
        else:
            a = st.acc
            st.acc = a // b_val
            st.write_sfr(B, a % b_val)
            st.set_flag(PSW_OV, 0)
    elif m == "DA":
        a = st.acc
        cy = st.flag(PSW_CY)
        if (a & 0x0F) > 9 or st.flag(PSW_AC):
            a += 0x06
            if a > 0xFF:
                cy = 1
            a &= 0xFF
        if cy or ((a >> 4) & 0x0F) > 9:
            a += 0x60
            if a > 0xFF:
                cy = 1
            a &= 0xFF
        st.set_flag(PSW_CY, cy)
        st.acc = a
    elif m == "PUSH":
        st.push(st.read_direct(ops[0].value))
    elif m == "POP":
        st.write_direct(ops[0].value, st.pop())
    else:
        raise AssertionError(f"unhandled mnemonic {m}")
    return st


def run_concrete(st: ConcreteState, image: bytes, steps: int) -> ConcreteState:
    for _ in range(steps):
        if st.halted or st.pc >= len(image):
            break
        step_concrete(st, image)
    return st


def interrupt_enabled(ie_value: int, source: str) -> bool:
    """IE gating: global EA bit and the per-source enable bit must both be set."""
    _, bit = INT_SOURCES[source]
    return bool(ie_value & (1 << IE_EA_BIT)) and bool(ie_value & (1 << bit))


def discover_isrs(image: bytes) -> dict[str, int]:
    """Map interrupt sources to ISR entry addresses.

    A vector slot holding RETI means the source has no handler; a direct jump
    is a trampoline and the jump target is the entry; anything else means the
    handler body starts at the vector itself.
    """
    isrs: dict[str, int] = {}
    for source, (vector, _bit) in INT_SOURCES.items():
        if vector >= len(image):
            continue
        try:
            ins = isa.decode(image, vector)
        except isa.IsaError:
            continue
        if ins.mnemonic == "RETI":
            continue
        if ins.mnemonic in ("LJMP", "AJMP", "SJMP"):
            isrs[source] = ins.operands[0].value
        else:
            isrs[source] = vector
    return isrs
