"""usbvet: a semantic query engine for raw 8051/8052 USB controller firmware.

Disassembles and lifts binaries to a region-aware IR, symbolically executes
them with interrupt scheduling, and answers two domain queries: what USB
identity the firmware can claim, and whether its endpoint data flow is
consistent with that identity.
"""

__version__ = "0.1.0"
