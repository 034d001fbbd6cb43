"""Convert public CLIP checkpoints into patchtag weight bundles."""

from .errors import UnsupportedCheckpointError
from .export import (
    BUNDLE_NAME,
    REFERENCE_PROBE,
    REPORT_NAME,
    ExportReport,
    export,
    read_report,
    tensor_checksums,
)
from .mapping import (
    convert_hf_tensors,
    convert_research_tensors,
    hf_tensor_table,
    research_tensor_table,
)
from .sources import SourceCheckpoint, load_source, read_vocab_files
from .verify import PROBE_TEXTS, ProbeResult, VerifyReport, verify

__all__ = [
    "BUNDLE_NAME",
    "ExportReport",
    "PROBE_TEXTS",
    "ProbeResult",
    "REFERENCE_PROBE",
    "REPORT_NAME",
    "SourceCheckpoint",
    "UnsupportedCheckpointError",
    "VerifyReport",
    "convert_hf_tensors",
    "convert_research_tensors",
    "export",
    "hf_tensor_table",
    "load_source",
    "read_report",
    "read_vocab_files",
    "research_tensor_table",
    "tensor_checksums",
    "verify",
]

__version__ = "0.1.0"
