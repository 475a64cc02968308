"""Simulator for eUICC remote SIM provisioning: card, SM-DP, SM-SR and MNO actors."""

from __future__ import annotations

from .apdu import ApduCommand, ApduResponse, StatusWord
from .euicc import Eid, Euicc, manufacture
from .network import FaultAction, FaultRule, Network
from .policy import Pol1
from .scenario import RunReport, Scenario, parse_scenario, run
from .subman import DownloadRequest, Mno, SmDp, SmSr, download_profile, mno_update_policy, smsr_change

__version__ = "0.1.0"

__all__ = [
    "ApduCommand", "ApduResponse", "StatusWord", "Eid", "Euicc", "manufacture", "FaultAction",
    "FaultRule", "Network", "Pol1", "RunReport", "Scenario", "parse_scenario", "run",
    "DownloadRequest", "Mno", "SmDp", "SmSr", "download_profile", "mno_update_policy", "smsr_change",
]
