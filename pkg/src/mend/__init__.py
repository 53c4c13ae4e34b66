"""Static patching of ARM32/Thumb ELF binaries by local reassembly."""

__version__ = "0.1.0"
