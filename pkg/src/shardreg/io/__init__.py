from .nifti import NiftiFormatError, NiftiHeader, encode_nifti, parse_header, read_nifti, write_nifti
from .raw import read_raw, write_raw
from .synth import SynthPair, synth_pair

__all__ = [
    "NiftiFormatError", "NiftiHeader", "encode_nifti", "parse_header", "read_nifti", "write_nifti",
    "read_raw", "write_raw", "SynthPair", "synth_pair",
]
