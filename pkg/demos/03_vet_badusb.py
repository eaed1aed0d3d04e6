#!/usr/bin/env python3
"""The point of the whole tool: generate the three firmware shapes and run
both semantic queries on each. The storage stick hiding an HID identity is
caught by Query 1; the keystroke injector by Query 2."""

import tempfile
from pathlib import Path

from usbvet import cli, fwkit

RUNS = [
    ("benign-hid", "hid", "a keyboard that forwards what the user types"),
    ("storage-claiming-hid", "mass-storage",
     "a flash drive with a hidden HID claim path"),
    ("injector-hid", "hid", "a keyboard that injects a static scancode script"),
]

workdir = Path(tempfile.mkdtemp(prefix="usbvet-demo-"))
for template, expected, story in RUNS:
    image, manifest = fwkit.generate_fixture(fwkit.FixtureSpec(template=template))
    path = workdir / f"{template}.bin"
    path.write_bytes(image)
    config = cli.RunConfig(image_path=str(path), expected=expected,
                           query="both", policy="auto", tau=8, seed=7,
                           state_limit=1200)
    report, exit_code = cli.run_pipeline(config)
    v = report.verdict
    print(f"\n=== {template} ({story}) ===")
    print(f"expected class: {expected}")
    print(f"identity: {v['identity']}    behavior: {v['behavior']}    "
          f"exit code: {exit_code}")
    for reason in v["reasons"]:
        print(f"  reason: {reason}")
    if v["flagged_sites"]:
        print(f"  flagged store sites: {', '.join(v['flagged_sites'])}")
        mal = manifest.malicious_store_sites
        if mal:
            print(f"  (manifest ground truth: 0x{mal[0]:04x})")
    print(f"  drivers the OS would load: "
          + (", ".join(d["driver"] for d in report.driver_matches) or "none"))

print(f"\nreports and images left in {workdir}")
