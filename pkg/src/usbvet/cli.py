"""Command-line frontend: configuration, the end-to-end analysis pipeline,
and machine-readable reporting.

Pipeline order: signature scan, target computation, symbolic reachability,
claimed-model construction, driver matching / expected-model comparison,
report. Partial failures (no descriptors, no targets, budget exhaustion)
degrade into diagnostics instead of aborting.

Reports are deterministic for a fixed (image, config incl. seed): volatile
wall-clock timings are kept out of the serialized document unless explicitly
requested.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, asdict

from . import queries, symexec, usbdb, usbstatic

TOOL_VERSION = "usbvet 0.1.0"

MAX_IMAGE_SIZE = 0x10000

EXIT_CONSISTENT = 0
EXIT_FLAGGED = 1
EXIT_INCOMPLETE = 2
EXIT_USAGE = 3


class ConfigInvalid(Exception):
    pass


class ImageTooLarge(Exception):
    pass


class IoError(Exception):
    pass


@dataclass
class RunConfig:
    image_path: str
    expected: str = "unknown"            # mass-storage | hid | composite | unknown
    query: str = "both"                  # identity | consistency | both
    policy: str = "auto"                 # full | partial | auto
    tau: int = 16
    max_ep: int = 4
    seed: int = 0
    time_limit: float | None = None
    state_limit: int = 4096
    preconditions: list[str] = field(default_factory=list)
    signatures_path: str | None = None
    ruledb_path: str | None = None
    report_path: str | None = None
    include_timing: bool = False

    def validate(self):
        if self.expected not in ("mass-storage", "hid", "composite", "unknown"):
            raise ConfigInvalid(f"expected class {self.expected!r}")
        if self.query not in ("identity", "consistency", "both"):
            raise ConfigInvalid(f"query {self.query!r}")
        if self.policy not in ("full", "partial", "auto"):
            raise ConfigInvalid(f"policy {self.policy!r}")
        if self.tau <= 0 or self.max_ep <= 0 or self.state_limit <= 0:
            raise ConfigInvalid("tau, max-ep and state-limit must be positive")


def parse_precondition(text: str) -> queries.Precondition:
    """REGION:ADDR:REL:VAL, e.g. XRAM:0x7fe9:==:6"""
    parts = text.split(":")
    if len(parts) != 4:
        raise ConfigInvalid(f"precondition {text!r} (want REGION:ADDR:REL:VAL)")
    region, addr_s, rel, val_s = parts
    if rel not in queries.RELATIONS:
        raise ConfigInvalid(f"precondition relation {rel!r}")
    try:
        return queries.Precondition(region.upper(), int(addr_s, 0), rel,
                                    int(val_s, 0))
    except (ValueError, KeyError) as e:
        raise ConfigInvalid(f"precondition {text!r}: {e}") from None


@dataclass
class AnalysisReport:
    tool: str
    config: dict
    status: str
    descriptor_hits: list
    ep0_inference: dict
    symbolic_set: dict
    query1: dict | None
    query2: dict | None
    claimed_model: dict
    driver_matches: list
    verdict: dict
    diagnostics: list
    timing: dict | None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["timing"] is None:
            del d["timing"]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def emit_report(report: AnalysisReport, path: str):
    """Write the report with stable key order for diffability."""
    try:
        with open(path, "w") as fh:
            fh.write(report.to_json())
    except OSError as e:
        raise IoError(f"cannot write report to {path!r}: {e}") from None


def _hx(v: int) -> str:
    return f"0x{v:04x}"


def _exploration_summary(rep) -> dict:
    return {"states_explored": rep.states_explored,
            "blocks_executed": rep.blocks_executed,
            "coverage_instructions": rep.coverage,
            "reason": rep.reason,
            "diagnostics": list(rep.diagnostics)}


def _q1_dict(rep: queries.Query1Report) -> dict:
    targets = {}
    for t, r in rep.targets.items():
        targets[_hx(t)] = {
            "reached": r.reached,
            "states_explored": r.states_explored,
            "coverage_at_hit": r.coverage_at_hit,
            "path_condition": r.path,
            "witness": {k: v for k, v in r.witness.items()},
            "usb_constraints": [{"location": n.location, "value": n.value,
                                 "meaning": n.meaning}
                                for n in r.usb_constraints],
        }
    return {"policy": rep.policy_name, "targets": targets,
            **_exploration_summary(rep)}


def _q2_dict(rep: queries.Query2Report) -> dict:
    return {
        "kind": rep.kind,
        "flagged": [{"site": _hx(f.site), "write_addr": _hx(f.write_addr),
                     "values": f.values, "label": f.label}
                    for f in rep.flagged],
        "counters": [[r, _hx(a)] for r, a in rep.counters],
        "ranked": [{"write_addr": _hx(r.write_addr),
                    "writers": [_hx(w) for w in r.writers],
                    "symbolic_sources": r.symbolic_sources,
                    "concrete_values": r.concrete_values,
                    "score": r.score}
                   for r in rep.ranked],
        **_exploration_summary(rep),
    }


def run_pipeline(config: RunConfig) -> tuple[AnalysisReport, int]:
    config.validate()
    try:
        with open(config.image_path, "rb") as fh:
            image = fh.read()
    except OSError as e:
        raise IoError(f"cannot read image {config.image_path!r}: {e}") from None
    if len(image) > MAX_IMAGE_SIZE:
        raise ImageTooLarge(f"{len(image)} bytes > {MAX_IMAGE_SIZE}")

    diagnostics: list[str] = []
    preconditions = [parse_precondition(p) for p in config.preconditions]
    patterns = usbstatic.DEFAULT_SIGNATURES
    if config.signatures_path:
        try:
            with open(config.signatures_path) as fh:
                patterns = tuple(usbstatic.parse_signature_file(fh.read()))
        except OSError as e:
            raise IoError(f"cannot read signatures: {e}") from None
    rules = None
    if config.ruledb_path:
        try:
            with open(config.ruledb_path) as fh:
                rules = usbdb.load_rules(fh.read())
        except OSError as e:
            raise IoError(f"cannot read rule db: {e}") from None

    base_cfg = symexec.ExplorationConfig(
        max_states=config.state_limit,
        time_limit=config.time_limit,
        seed=config.seed)

    # 1. signature scan + XREFs
    hits = usbstatic.scan_with_xrefs(image, patterns)
    hit_rows = [{"name": h.name, "addr": _hx(h.addr),
                 "bytes": h.matched.hex(),
                 "xrefs": [_hx(x) for x in h.xrefs]} for h in hits]

    # 2. EP0 inference and target computation per hunted class
    instrs = usbstatic.reachable_instructions(image)
    ep0_info: dict = {"classes": {}}
    targets: set[int] = set()
    hid_targets: set[int] = set()
    ep0_union: set[int] = set()
    for cls in ("hid", "mass-storage"):
        try:
            inf = usbstatic.find_devspec_to_ep0(image, cls, instrs=instrs,
                                                patterns=patterns)
        except usbstatic.NoDescriptors as e:
            diagnostics.append(f"NoDescriptors[{cls}]: {e}")
            ep0_info["classes"][cls] = {"error": "NoDescriptors"}
            continue
        ep0_info["classes"][cls] = {
            "ep0": sorted(_hx(a) for a in inf.ep0),
            "ep0_config_votes": sorted(_hx(a) for a in inf.ep0_1),
            "ep0_device_votes": sorted(_hx(a) for a in inf.ep0_2),
            "target_sites": [_hx(t) for t in inf.target_sites],
        }
        if cls == "mass-storage":
            ep0_info["classes"][cls]["note"] = (
                "mass-storage evidence uses the bulk-only CBW tag signature "
                "as a stand-in for class-specific descriptor data")
        targets.update(inf.target_sites)
        ep0_union.update(inf.ep0)
        if cls == "hid":
            hid_targets.update(inf.target_sites)

    # 3a. symbolic set (Alg. 3) for partial/auto policies
    symset = queries.SymbolicLocationSet(set(), [])
    policy_source = config.policy
    if config.policy in ("auto", "partial"):
        symset = queries.find_symbolic_locations(image, tau=config.tau,
                                                 config=base_cfg)
        policy_source = "partial"
    sym_dict = {
        "locations": [[r, _hx(a)] for r, a in symset.names()],
        "iterations": [{"source": rec.source, "iteration": rec.iteration,
                        "added": list(rec.added) if rec.added else None,
                        "reason": rec.reason,
                        **({"duration_s": round(rec.duration, 3)}
                           if config.include_timing else {})}
                       for rec in symset.log],
    }

    # 3b. Query 1 (identity reachability)
    q1 = None
    q1_dict = None
    if config.query in ("identity", "both") and targets:
        q1 = queries.query1(image, sorted(targets), policy_source,
                            preconditions=preconditions, symbolic_set=symset,
                            config=base_cfg)
        q1_dict = _q1_dict(q1)
    elif config.query in ("identity", "both"):
        diagnostics.append("no target instructions: identity query skipped")

    # 3c. Query 2 (consistency)
    q2_dict = None
    if config.query in ("consistency", "both"):
        q2_parts = {}
        if ep0_union:
            rep4 = queries.query2_unexpected(image, ep0_union, symset,
                                             max_ep=config.max_ep,
                                             config=base_cfg, instrs=instrs)
            q2_parts["unexpected_flow"] = _q2_dict(rep4)
        else:
            diagnostics.append("EP0 unknown: unexpected-flow query skipped")
            rep4 = None
        pol = symexec.SymbolicPolicy()
        pol.designate_all(symset.locations)
        pol.designate_all(queries.find_counters(image, instrs))
        rep5 = queries.query2_inconsistent(image, pol, base_cfg)
        q2_parts["inconsistent_flow"] = _q2_dict(rep5)
        q2_dict = q2_parts
    else:
        rep4 = rep5 = None

    # 4. claimed model from descriptors + reachability evidence
    claimed_ifaces: list[usbdb.ClaimedInterface] = []
    device = None
    cfg_desc = None
    for h in hits:
        if h.name == "DEVICE_DESC" and device is None:
            try:
                device = usbdb.parse_device_descriptor(image[h.addr:])
            except usbdb.MalformedDescriptor as e:
                diagnostics.append(f"device descriptor at {_hx(h.addr)}: {e}")
        elif h.name == "CONFIG_DESC" and cfg_desc is None:
            try:
                cfg_desc = usbdb.parse_configuration(image[h.addr:])
            except usbdb.MalformedDescriptor as e:
                diagnostics.append(f"config descriptor at {_hx(h.addr)}: {e}")
    if cfg_desc is not None:
        for iface in cfg_desc.interfaces:
            claimed_ifaces.append(usbdb.ClaimedInterface(
                iface.bInterfaceClass, iface.bInterfaceSubClass,
                iface.bInterfaceProtocol, confirmed=True,
                evidence="configuration descriptor"))
    hid_reached = [t for t in sorted(hid_targets)
                   if q1 is not None and q1.targets[t].reached]
    hid_static = bool(hid_targets) and q1 is None
    claims_hid = any(i.cls == usbdb.USB_CLASS_HID for i in claimed_ifaces)
    if hid_reached and not claims_hid:
        claimed_ifaces.append(usbdb.ClaimedInterface(
            usbdb.USB_CLASS_HID, 0, 0, confirmed=True,
            evidence=f"HID report copy at {_hx(hid_reached[0])} reached"))
    elif hid_static and not claims_hid:
        claimed_ifaces.append(usbdb.ClaimedInterface(
            usbdb.USB_CLASS_HID, 0, 0, confirmed=False,
            evidence="HID report target present (reachability not run)"))
    endpoints = []
    if cfg_desc is not None:
        for iface in cfg_desc.interfaces:
            for ep in iface.endpoints:
                endpoints.append({"address": f"0x{ep.bEndpointAddress:02x}",
                                  "type": ep.transfer_type,
                                  "direction": "in" if ep.direction_in else "out",
                                  "max_packet": ep.wMaxPacketSize})
    drivers = []
    if device is not None:
        drivers = usbdb.match_drivers(device,
                                      cfg_desc.interfaces if cfg_desc else [],
                                      rules)
    model = usbdb.ClaimedModel(
        device.bDeviceClass if device else None,
        device.bDeviceProtocol if device else None,
        claimed_ifaces, endpoints, drivers)

    # 5. comparison against the expected model
    verdict = usbdb.compare_models(model, config.expected)
    behavior_flagged = False
    flagged_sites: list[str] = []
    if rep4 is not None:
        real = [f for f in rep4.flagged if f.label is None]
        if real:
            behavior_flagged = True
            flagged_sites.extend(sorted({_hx(f.site) for f in real}))
    if rep5 is not None and rep5.ranked and rep5.ranked[0].score >= 2:
        behavior_flagged = True
        flagged_sites.extend(_hx(w) for w in rep5.ranked[0].writers)

    status = "completed"
    if not hits:
        status = "completed-with-findings-none"
    identity = "consistent" if verdict.consistent else "anomalous"
    verdict_dict = {
        "identity": identity,
        "behavior": "flagged" if behavior_flagged else "clean",
        "reasons": verdict.reasons,
        "warnings": verdict.warnings,
        "flagged_sites": sorted(set(flagged_sites)),
    }

    timing = None
    if config.include_timing:
        timing = {}
        if q1 is not None:
            timing["query1_s"] = round(q1.wall_time, 3)
        if rep4 is not None:
            timing["query2_unexpected_s"] = round(rep4.wall_time, 3)
        if rep5 is not None:
            timing["query2_inconsistent_s"] = round(rep5.wall_time, 3)

    report = AnalysisReport(
        tool=TOOL_VERSION,
        config={"image": config.image_path, "expected": config.expected,
                "query": config.query, "policy": config.policy,
                "tau": config.tau, "max_ep": config.max_ep,
                "seed": config.seed, "state_limit": config.state_limit,
                "time_limit": config.time_limit,
                "preconditions": list(config.preconditions),
                "cooldown_blocks": [base_cfg.cooldown_min,
                                    base_cfg.cooldown_max],
                "block_repeat_threshold": base_cfg.block_repeat_threshold,
                "indirect_fanout": base_cfg.max_indirect_fanout},
        status=status,
        descriptor_hits=hit_rows,
        ep0_inference=ep0_info,
        symbolic_set=sym_dict,
        query1=q1_dict,
        query2=q2_dict,
        claimed_model={
            "device_class": model.device_class,
            "device_protocol": model.device_protocol,
            "interfaces": [{"class": i.cls, "subclass": i.subclass,
                            "protocol": i.protocol, "confirmed": i.confirmed,
                            "evidence": i.evidence}
                           for i in model.interfaces],
            "endpoints": model.endpoints,
        },
        driver_matches=[{"rule": form, "driver": drv}
                        for form, drv in drivers],
        verdict=verdict_dict,
        diagnostics=diagnostics,
        timing=timing,
    )
    if not verdict.consistent or behavior_flagged:
        exit_code = EXIT_FLAGGED
    elif (config.query in ("identity", "both") and targets and q1 is not None
          and not q1.any_reached):
        exit_code = EXIT_INCOMPLETE
    else:
        exit_code = EXIT_CONSISTENT
    return report, exit_code


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="usbvet",
        description="Semantic queries over raw 8051 USB controller firmware")
    sub = ap.add_subparsers(dest="command", required=True)
    an = sub.add_parser("analyze", help="run the full analysis pipeline")
    an.add_argument("image", help="flat firmware image (<= 64 KiB)")
    an.add_argument("--expected", default=None,
                    choices=["mass-storage", "hid", "composite", "unknown"])
    an.add_argument("--query", default=None,
                    choices=["identity", "consistency", "both"])
    an.add_argument("--policy", default=None,
                    choices=["full", "partial", "auto"])
    an.add_argument("--tau", type=int, default=None)
    an.add_argument("--max-ep", type=int, default=None)
    an.add_argument("--seed", type=int, default=None)
    an.add_argument("--time-limit", type=float, default=None)
    an.add_argument("--state-limit", type=int, default=None)
    an.add_argument("--precondition", action="append", default=[],
                    metavar="REGION:ADDR:REL:VAL")
    an.add_argument("--signatures", default=None, metavar="FILE")
    an.add_argument("--ruledb", default=None, metavar="FILE")
    an.add_argument("--report", default=None, metavar="OUT")
    an.add_argument("--config", default=None, metavar="FILE",
                    help="JSON config mirroring the flags; flags override it")
    an.add_argument("--timing", action="store_true",
                    help="include wall-clock timings in the report "
                         "(breaks byte-determinism)")
    return ap


_CONFIG_KEYS = {
    "expected": "expected", "query": "query", "policy": "policy",
    "tau": "tau", "max_ep": "max_ep", "seed": "seed",
    "time_limit": "time_limit", "state_limit": "state_limit",
    "preconditions": "preconditions", "signatures": "signatures_path",
    "ruledb": "ruledb_path", "report": "report_path",
}


def config_from_args(args) -> RunConfig:
    cfg = RunConfig(image_path=args.image)
    if args.config:
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except OSError as e:
            raise IoError(f"cannot read config: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigInvalid(f"config file: {e}") from None
        for key, attr in _CONFIG_KEYS.items():
            if key in data:
                setattr(cfg, attr, data[key])
    overrides = {
        "expected": args.expected, "query": args.query, "policy": args.policy,
        "tau": args.tau, "max_ep": args.max_ep, "seed": args.seed,
        "time_limit": args.time_limit, "state_limit": args.state_limit,
        "signatures_path": args.signatures, "ruledb_path": args.ruledb,
        "report_path": args.report,
    }
    for attr, value in overrides.items():
        if value is not None:
            setattr(cfg, attr, value)
    if args.precondition:
        cfg.preconditions = list(args.precondition)
    cfg.include_timing = args.timing
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        report, code = run_pipeline(cfg)
    except (ConfigInvalid, IoError, ImageTooLarge) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    text = report.to_json()
    if cfg.report_path:
        emit_report(report, cfg.report_path)
        v = report.verdict
        print(f"identity: {v['identity']}  behavior: {v['behavior']}  "
              f"-> {cfg.report_path}")
    else:
        print(text, end="")
    return code


if __name__ == "__main__":
    sys.exit(main())
