import pytest

from usbvet import fwkit, queries, solver, symexec, usbstatic
from usbvet.lifter import Region
from usbvet.queries import Precondition
from usbvet.symexec import ExplorationConfig, SymbolicPolicy


def cfg(**kw):
    base = dict(seed=3, block_repeat_threshold=24, max_states=1500)
    base.update(kw)
    return ExplorationConfig(**base)


# ---------------------------------------------------------------------------
# Finding symbolic locations
# ---------------------------------------------------------------------------


def test_self_satisfied_isr_adds_nothing():
    # handler writes X then reads X back: no environment byte
    src = """
    .org 0x0000
        ljmp main
    .org 0x0003
        ljmp isr
    .org 0x000b
        reti
    .org 0x0013
        reti
    .org 0x001b
        reti
    .org 0x0023
        reti
    .org 0x002b
        reti
    main:
        mov sp, #0x47
        mov ie, #0x81
    idle:
        sjmp idle
    isr:
        mov psw, #0
        mov 0x30, #0x55
        mov a, 0x30
        reti
    """
    image, _ = fwkit.assemble_with_symbols(src)
    out = queries.find_symbolic_locations(image, tau=4, config=cfg())
    assert out.locations == set()


@pytest.mark.parametrize("k", [1, 2, 3])
def test_branchy_converges_to_exactly_k_bytes(k):
    image, man = fwkit.generate_fixture(
        fwkit.FixtureSpec(template="branchy", guard_count=k))
    out = queries.find_symbolic_locations(image, tau=k, config=cfg())
    got = {(Region(r).name, a) for r, a in out.locations}
    assert got == {(r, a) for r, a in man.env_bytes}
    added = [rec for rec in out.log if rec.added]
    assert len(added) == k  # one location per iteration until fixpoint


def test_symbolic_set_grows_monotonically():
    image, _ = fwkit.generate_fixture(
        fwkit.FixtureSpec(template="branchy", guard_count=3))
    out = queries.find_symbolic_locations(image, tau=3, config=cfg())
    seen = set()
    for rec in out.log:
        if rec.added:
            loc = tuple(rec.added)
            assert loc not in seen
            seen.add(loc)


def test_injector_env_bytes_discovered():
    image, man = fwkit.generate_fixture(fwkit.FixtureSpec(template="injector-hid"))
    out = queries.find_symbolic_locations(image, tau=8, config=cfg())
    got = {(Region(r).name, a) for r, a in out.locations}
    assert got == {(r, a) for r, a in man.env_bytes}


# ---------------------------------------------------------------------------
# Preconditions
# ---------------------------------------------------------------------------


def make_policy(*xram_addrs):
    pol = SymbolicPolicy()
    for a in xram_addrs:
        pol.designate(Region.XRAM, a)
    return pol


def test_apply_preconditions_empty_is_identity():
    st = symexec.ExecState()
    queries.apply_preconditions(st, [], make_policy())
    assert len(st.path) == 0


def test_apply_preconditions_conjoins_constraint():
    st = symexec.ExecState()
    pol = make_policy(0x7FE9)
    queries.apply_preconditions(st, [Precondition("XRAM", 0x7FE9, "==", 6)], pol)
    assert len(st.path) == 1
    assert solver.to_text(st.path.entries[0][0]) == "(xram_7fe9 == 6)"


def test_apply_preconditions_rejects_contradiction():
    st = symexec.ExecState()
    pol = make_policy(0x7FE9)
    with pytest.raises(queries.UnsatisfiablePreconditions):
        queries.apply_preconditions(
            st, [Precondition("XRAM", 0x7FE9, "==", 6),
                 Precondition("XRAM", 0x7FE9, "==", 7)], pol)


def test_apply_preconditions_requires_designation():
    st = symexec.ExecState()
    with pytest.raises(queries.PreconditionError):
        queries.apply_preconditions(
            st, [Precondition("XRAM", 0x7FE9, "==", 6)], make_policy())


def test_bit_relations():
    st = symexec.ExecState()
    pol = make_policy(0x7FAB)
    queries.apply_preconditions(
        st, [Precondition("XRAM", 0x7FAB, "bit-set", 0)], pol)
    assert "& 1" in solver.to_text(st.path.entries[0][0])


# ---------------------------------------------------------------------------
# Query 1
# ---------------------------------------------------------------------------


def test_query1_unguarded_target_trivial():
    src = """
    .org 0
        nop
    tgt:
        nop
    spin:
        sjmp spin
    """
    image, syms = fwkit.assemble_with_symbols(src)
    rep = queries.query1(image, [syms["tgt"]], "partial",
                         symbolic_set=set(), config=cfg())
    t = rep.targets[syms["tgt"]]
    assert t.reached
    assert t.usb_constraints == []


def test_query1_descriptor_request_constraints():
    image, man = fwkit.generate_fixture(fwkit.FixtureSpec(template="injector-hid"))
    symset = queries.find_symbolic_locations(image, tau=8, config=cfg())
    target = man.target_sites["hid_report_copy"]
    rep = queries.query1(image, [target], "partial", symbolic_set=symset,
                         config=cfg())
    t = rep.targets[target]
    assert t.reached
    texts = [row["constraint"] for row in t.path]
    assert any("xram_7fe9 == 6" in s for s in texts)
    assert any("xram_7feb == 0x22" in s for s in texts)
    meanings = {(n.location, n.value): n.meaning for n in t.usb_constraints}
    assert meanings[("xram_7fe9", 6)] == "GET_DESCRIPTOR request"
    assert meanings[("xram_7feb", 34)] == "HID report descriptor type"
    # witness satisfies the descriptor request shape
    assert t.witness["xram_7fe9"] == 6 and t.witness["xram_7feb"] == 34


def test_query1_policy_dominance():
    # every target reached under the partial policy is reached under full
    image, man = fwkit.generate_fixture(fwkit.FixtureSpec(template="injector-hid"))
    symset = queries.find_symbolic_locations(image, tau=8, config=cfg())
    targets = sorted(man.target_sites.values())
    partial = queries.query1(image, targets, "partial", symbolic_set=symset,
                             config=cfg())
    full = queries.query1(image, targets, "full", config=cfg())
    for t in targets:
        if partial.targets[t].reached:
            assert full.targets[t].reached


def test_query1_precondition_soundness():
    # preconditions prune, never add: reached-with-pre implies reached-without
    image, man = fwkit.generate_fixture(fwkit.FixtureSpec(template="injector-hid"))
    symset = queries.find_symbolic_locations(image, tau=8, config=cfg())
    target = man.target_sites["hid_report_copy"]
    pre = [Precondition("XRAM", man.setup_base + 1, "==", 6)]
    with_pre = queries.query1(image, [target], "partial", preconditions=pre,
                              symbolic_set=symset, config=cfg())
    without = queries.query1(image, [target], "partial", symbolic_set=symset,
                             config=cfg())
    assert with_pre.targets[target].reached
    assert without.targets[target].reached
    # and the precondition is part of the reported path
    notes = [row["note"] for row in with_pre.targets[target].path]
    assert any(n.startswith("precondition") for n in notes)


def test_query1_requires_targets():
    with pytest.raises(ValueError):
        queries.query1(bytes(16), [], "full")


# ---------------------------------------------------------------------------
# Counters
# ---------------------------------------------------------------------------


def test_counter_found_for_threshold_loop():
    src = """
    .org 0
    loop:
        inc 0x35
        mov a, 0x35
        cjne a, #0x10, loop
    spin:
        sjmp spin
    """
    image, _ = fwkit.assemble_with_symbols(src)
    ctrs = queries.find_counters(image)
    assert (Region.IRAM, 0x35) in ctrs


def test_add_feeding_index_is_not_counter():
    src = """
    .org 0
        mov a, r0
        add a, r1
        mov dptr, #0x0100
        movc a, @a+dptr
    spin:
        sjmp spin
    """
    image, _ = fwkit.assemble_with_symbols(src)
    assert queries.find_counters(image) == set()


def test_inc_feeding_indirect_address_is_not_counter():
    src = """
    .org 0
    loop:
        inc 0x35
        mov r0, 0x35
        mov a, @r0
        sjmp loop
    """
    image, _ = fwkit.assemble_with_symbols(src)
    assert (Region.IRAM, 0x35) not in queries.find_counters(image)


def test_xram_counter_via_tracked_dptr():
    src = """
    .org 0
    loop:
        mov dptr, #0x7c40
        movx a, @dptr
        inc a
        movx @dptr, a
        sjmp loop
    """
    image, _ = fwkit.assemble_with_symbols(src)
    assert (Region.XRAM, 0x7C40) in queries.find_counters(image)


def test_benign_fixture_has_no_counters():
    image, _ = fwkit.generate_fixture(fwkit.FixtureSpec(template="benign-hid"))
    assert queries.find_counters(image) == set()


def test_injector_counter_matches_manifest():
    image, man = fwkit.generate_fixture(fwkit.FixtureSpec(template="injector-hid"))
    ctrs = queries.find_counters(image)
    assert {(Region.IRAM, a) for a in man.counter_addrs} == ctrs


# ---------------------------------------------------------------------------
# Query 2
# ---------------------------------------------------------------------------


def test_other_endpoint_addresses():
    eps = queries.other_endpoint_addresses({0x7E00}, max_ep=4)
    assert 0x7E80 in eps          # 32*4 and 64*2
    assert 0x7E08 in eps
    assert 0x7E00 not in eps


def test_query2_unexpected_flags_injector_and_not_benign():
    for template, expect_flag in (("injector-hid", True), ("benign-hid", False)):
        image, man = fwkit.generate_fixture(fwkit.FixtureSpec(template=template))
        symset = queries.find_symbolic_locations(image, tau=8, config=cfg())
        inf = usbstatic.find_devspec_to_ep0(image, "hid")
        rep = queries.query2_unexpected(image, inf.ep0, symset, max_ep=4,
                                        config=cfg(seed=5))
        if expect_flag:
            mal = man.malicious_store_sites[0]
            assert any(f.site == mal for f in rep.flagged)
            assert ("IRAM", 0x35) in [tuple(c) for c in rep.counters]
        else:
            assert rep.flagged == []


def test_query2_unexpected_missed_without_counter_symbolication():
    # threshold loop longer than the prune budget: the payload is reachable
    # only once the counter byte is symbolic
    image, man = fwkit.generate_fixture(fwkit.FixtureSpec(template="injector-hid"))
    symset = queries.find_symbolic_locations(image, tau=8, config=cfg())
    inf = usbstatic.find_devspec_to_ep0(image, "hid")
    instrs = usbstatic.reachable_instructions(image)
    other = queries.other_endpoint_addresses(inf.ep0, 4)
    M = usbstatic.prop_const_mem(instrs)
    targets = {i.addr for i in instrs if M.get(i.addr, "dst")[1] in other}
    pol = SymbolicPolicy()
    pol.designate_all(symset.locations)  # env bytes only, counters left out
    sat = solver.Solver()
    listener = queries._ConcreteFlowListener(targets, sat)
    symexec.execute(image, pol, cfg(seed=5), listeners=[listener])
    mal = man.malicious_store_sites[0]
    assert not any(f.site == mal for f in listener.flags.values())


def test_query2_known_protocol_constant_is_labeled_not_suppressed():
    # benign-constant false-positive class: a CBW tag byte copied to an
    # endpoint buffer is flagged but labeled
    src = """
    .org 0x0000
        ljmp main
    .org 0x0003
        ljmp isr
    .org 0x000b
        reti
    .org 0x0013
        reti
    .org 0x001b
        reti
    .org 0x0023
        reti
    .org 0x002b
        reti
    main:
        mov sp, #0x47
        mov ie, #0x81
    loop:
        mov a, #0x55          ; 'U' of the USBC tag
        mov dptr, #0x6120
        movx @dptr, a
        sjmp loop
    isr:
        mov psw, #0
        mov dptr, #dev
        movx a, @dptr
        reti
    dev:
    """
    # plant descriptors so EP0 inference has something; EP0 0x6100 -> 0x6120
    src += """
.org 0x0200
ddesc:
.db 0x12, 0x01, 0x00, 0x02, 0x00, 0x00, 0x00, 0x40
.db 0x34, 0x12, 0x78, 0x56, 0x00, 0x01, 0x01, 0x02, 0x00, 0x01
cdesc:
.db 0x09, 0x02, 0x10, 0x00, 0x01, 0x01, 0x00, 0x80, 0x32
.db 0x09, 0x04, 0x00, 0x00, 0x00, 0x03, 0x00, 0x00, 0x00
"""
    image, syms = fwkit.assemble_with_symbols(src)
    rep = queries.query2_unexpected(image, {0x6100}, set(), max_ep=4,
                                    config=cfg())
    flags = [f for f in rep.flagged if f.write_addr == 0x6120]
    assert flags, rep.flagged
    assert flags[0].label == "known-protocol-constant"
    assert flags[0].values == [0x55]


def test_query2_inconsistent_ranks_injector_top():
    image, man = fwkit.generate_fixture(fwkit.FixtureSpec(template="injector-hid"))
    symset = queries.find_symbolic_locations(image, tau=8, config=cfg())
    pol = SymbolicPolicy()
    pol.designate_all(symset.locations)
    pol.designate_all(queries.find_counters(image))
    rep = queries.query2_inconsistent(image, pol, cfg(seed=5))
    assert rep.ranked
    top = rep.ranked[0]
    assert top.score >= 2
    assert man.malicious_store_sites[0] in top.writers
    assert top.write_addr in range(man.ep_buffers[0], man.ep_buffers[0] + 8)
    assert top.symbolic_sources  # the benign writer's variable names


def test_query2_inconsistent_concrete_only_address_not_flagged():
    # a byte written concretely from two different blocks but never
    # symbolically must not be flagged
    src = """
    .org 0
    a1: mov a, #1
        mov dptr, #0x6000
        movx @dptr, a
        sjmp a2
    .org 0x40
    a2: mov a, #2
        mov dptr, #0x6000
        movx @dptr, a
    spin:
        sjmp spin
    """
    image, _ = fwkit.assemble_with_symbols(src)
    rep = queries.query2_inconsistent(image, SymbolicPolicy(), cfg())
    assert rep.flagged == [] and rep.ranked == []


def test_query2_single_value_writer_low_rank():
    # a single-value concrete writer next to a symbolic writer is flagged but
    # ranks below a multi-value one
    src = """
    .org 0x0000
        ljmp main
    .org 0x0003
        ljmp isr
    .org 0x000b
        reti
    .org 0x0013
        reti
    .org 0x001b
        reti
    .org 0x0023
        reti
    .org 0x002b
        reti
    main:
        mov sp, #0x47
        mov ie, #0x81
    loop:
        mov a, #0x0b          ; single constant to 0x6000
        mov dptr, #0x6000
        movx @dptr, a
        mov a, 0x30           ; two constants to 0x6001
        jz w1
        mov a, #0x10
        sjmp w2
    w1: mov a, #0x20
        mov 0x30, #1
    w2: mov dptr, #0x6001
        movx @dptr, a
    spin:
        sjmp loop
    isr:
        mov psw, #0
        mov dptr, #0x7f00
        movx a, @dptr         ; environment byte
        mov dptr, #0x6000
        movx @dptr, a         ; symbolic writer for 0x6000
        mov dptr, #0x6001
        movx @dptr, a         ; and for 0x6001
        reti
    """
    image, _ = fwkit.assemble_with_symbols(src)
    pol = SymbolicPolicy()
    pol.designate(Region.XRAM, 0x7F00)
    rep = queries.query2_inconsistent(image, pol, cfg(seed=6))
    by_addr = {r.write_addr: r for r in rep.ranked}
    assert 0x6000 in by_addr and 0x6001 in by_addr
    assert by_addr[0x6001].score == 2 and by_addr[0x6000].score == 1
    assert rep.ranked[0].write_addr == 0x6001
