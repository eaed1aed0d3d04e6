import pytest

from usbvet import machine


def fresh():
    return machine.ConcreteState()


def test_reset_sp():
    st = fresh()
    assert st.sp == 0x07


def test_nop_advances_pc_only():
    st = fresh()
    before = (bytes(st.iram), bytes(st.sfr))
    machine.step_concrete(st, bytes([0x00]))
    assert st.pc == 1 and st.instr_count == 1
    assert (bytes(st.iram), bytes(st.sfr)) == before


def test_mov_direct_direct_quirk():
    st = fresh()
    st.iram[0x30] = 0x5A
    machine.step_concrete(st, bytes([0x85, 0x30, 0x40]))
    assert st.iram[0x40] == 0x5A


def test_add_carry_example():
    st = fresh()
    st.acc = 0x01
    machine.step_concrete(st, bytes([0x24, 0xFF]))
    assert st.acc == 0x00
    assert st.flag(machine.PSW_CY) == 1


def test_add_exhaustive_against_independent_table():
    # expected carry/result computed with plain integer arithmetic
    for a in range(0, 256, 3):
        for v in range(0, 256, 7):
            st = fresh()
            st.acc = a
            machine.step_concrete(st, bytes([0x24, v]))
            assert st.acc == (a + v) & 0xFF
            assert st.flag(machine.PSW_CY) == (1 if a + v > 0xFF else 0)
            assert st.flag(machine.PSW_AC) == (
                1 if (a & 0xF) + (v & 0xF) > 0xF else 0)


def test_bank_aliasing_all_four_banks():
    st = fresh()
    for bank in range(4):
        st.write_sfr(machine.PSW, bank << 3)
        st.set_reg(3, 0x40 + bank)
        assert st.iram[bank * 8 + 3] == 0x40 + bank
        assert st.reg(3) == 0x40 + bank


def test_parity_bit_is_live():
    st = fresh()
    st.acc = 0x03  # two bits: even parity, P = 0
    assert st.read_sfr(machine.PSW) & 1 == 0
    st.acc = 0x07  # three bits: P = 1
    assert st.read_sfr(machine.PSW) & 1 == 1


def test_stack_push_pop():
    st = fresh()
    st.push(0xAA)
    st.push(0xBB)
    assert st.sp == 0x09
    assert st.pop() == 0xBB and st.pop() == 0xAA
    assert st.sp == 0x07


def test_stack_overflow():
    st = fresh()
    st.sp = 0xFF
    with pytest.raises(machine.StackOverflow):
        st.push(1)


def test_movc_beyond_image_reads_zero():
    st = fresh()
    st.acc = 0x10
    st.dptr = 0x1000  # image is 1 byte; 0x1010 is beyond it
    machine.step_concrete(st, bytes([0x93]))
    assert st.acc == 0


def test_movc_address_wraps_at_16_bits():
    st = fresh()
    st.acc = 0x10
    st.dptr = 0xFFF0  # 0x10000 wraps to 0x0000
    machine.step_concrete(st, bytes([0x93, 0x00]))
    assert st.acc == 0x93


def test_lcall_ret_roundtrip():
    image = bytearray(0x200)
    image[0x00:0x03] = bytes([0x12, 0x01, 0x00])  # LCALL 0x100
    image[0x100] = 0x22                           # RET
    st = fresh()
    machine.step_concrete(st, bytes(image))
    assert st.pc == 0x100 and st.sp == 0x09
    machine.step_concrete(st, bytes(image))
    assert st.pc == 0x03 and st.sp == 0x07


def test_div_by_zero_convention():
    st = fresh()
    st.acc = 0x42
    st.write_sfr(machine.B, 0)
    machine.step_concrete(st, bytes([0x84]))
    assert st.acc == 0x42 and st.read_sfr(machine.B) == 0
    assert st.flag(machine.PSW_OV) == 1
    assert st.flag(machine.PSW_CY) == 0


def test_discover_isrs_reti_means_no_handler():
    image = bytearray(0x400)
    image[0x000B] = 0x32
    isrs = machine.discover_isrs(bytes(image))
    assert "timer0" not in isrs


def test_discover_isrs_trampoline():
    image = bytearray(0x400)
    image[0x0003:0x0006] = bytes([0x02, 0x04, 0x00])  # LJMP 0x0400... truncated
    image.extend(bytes(0x100))
    isrs = machine.discover_isrs(bytes(image))
    assert isrs["external0"] == 0x0400


def test_discover_isrs_all_zero_image():
    isrs = machine.discover_isrs(bytes(0x400))
    for source, (vector, _bit) in machine.INT_SOURCES.items():
        assert isrs[source] == vector


def test_interrupt_enabled_predicate():
    assert not machine.interrupt_enabled(0x00, "external0")
    assert not machine.interrupt_enabled(0x01, "external0")  # EA clear
    assert not machine.interrupt_enabled(0x80, "external0")  # source clear
    assert machine.interrupt_enabled(0x81, "external0")
    assert machine.interrupt_enabled(0x82, "timer0")
    assert machine.interrupt_enabled(0xA0, "timer2")


def test_dump_snapshot_mentions_core_registers():
    st = fresh()
    st.acc = 0x12
    st.dptr = 0x3456
    text = st.dump()
    assert "A=12" in text and "DPTR=3456" in text and "SP=07" in text


def test_bit_addressing_iram_and_sfr():
    st = fresh()
    st.write_bit(0x00, 1)        # IRAM 0x20 bit 0
    assert st.iram[0x20] == 0x01
    st.write_bit(0xE0 + 3, 1)    # ACC.3
    assert st.acc == 0x08
    assert st.read_bit(0xE3) == 1


def test_jmp_a_dptr():
    st = fresh()
    st.acc = 4
    st.dptr = 0x100
    image = bytearray(0x200)
    image[0] = 0x73
    machine.step_concrete(st, bytes(image))
    assert st.pc == 0x104


def test_run_concrete_stops_at_image_end():
    st = fresh()
    machine.run_concrete(st, bytes([0x00, 0x00]), 100)
    assert st.pc == 2 and st.instr_count == 2
