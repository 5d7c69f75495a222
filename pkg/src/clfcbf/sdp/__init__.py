from .problem import (
    SdpProblem,
    SdpSolution,
    diagnose,
    extract_polynomial,
    psd_project_check,
)
from .ipm import SdpOptions, solve

__all__ = [
    "SdpOptions",
    "SdpProblem",
    "SdpSolution",
    "diagnose",
    "extract_polynomial",
    "psd_project_check",
    "solve",
]
