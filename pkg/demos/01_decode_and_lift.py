#!/usr/bin/env python3
"""Walk through the front end: assemble a tiny 8051 routine, disassemble it,
and look at the region-aware IR the lifter produces for it."""

from usbvet import fwkit, isa, lifter

SRC = """
.org 0
    mov r7, #0           ; descriptor index
copy:
    mov a, r7
    mov dptr, #table     ; constant pointer into CODE
    movc a, @a+dptr      ; read a descriptor byte
    mov dptr, #0x7e00    ; EP0 FIFO
    movx @dptr, a        ; push it to the endpoint
    inc r7
    cjne r7, #5, copy
done:
    sjmp done
table:
.db 0x12, 0x01, 0x00, 0x02, 0x00
"""

image, symbols = fwkit.assemble_with_symbols(SRC)
print(f"assembled {len(image)} bytes; labels: "
      + ", ".join(f"{k}=0x{v:04x}" for k, v in sorted(symbols.items())))

print("\n--- linear sweep ---")
instrs, diags = isa.disassemble_sweep(image, 0)
for ins in instrs[:10]:
    print(f"  {ins.addr:04x}: {ins.raw.hex():<8} {ins.text()}")
print(f"  ... {len(diags)} decode diagnostics (data bytes)")

print("\n--- lifted IR for the copy block ---")
program = lifter.lift_program(image)
print(lifter.format_block(program.block(symbols["copy"])))

print("\nNote the region tags: the MOVC is a CODE load, the MOVX an XRAM")
print("store, and the R7 accesses go through bank-relative IRAM addresses.")
