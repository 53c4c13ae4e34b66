"""Exception hierarchy shared by all pipeline stages.

Every failure that aborts a function patch is a ``MendError`` subclass; the
class name doubles as the typed abort reason written into reports.
"""


class MendError(Exception):
    """Base class for all pipeline errors."""

    @property
    def reason(self) -> str:
        return type(self).__name__


# elf-image
class ElfError(MendError):
    pass


class NotElf(ElfError):
    pass


class UnsupportedArch(ElfError):
    pass


class TruncatedFile(ElfError):
    pass


class LayoutConflict(ElfError):
    pass


class UnmappedAddress(ElfError):
    pass


class OutsideEditableRange(ElfError):
    pass


class IoError(ElfError):
    pass


# isa-codec
class CodecError(MendError):
    pass


class UnknownEncoding(CodecError):
    pass


class Misaligned(CodecError):
    pass


class OutOfRange(CodecError):
    pass


class NotEncodable(CodecError):
    pass


# flow-graphs
class FlowError(MendError):
    pass


class DecodeFailure(FlowError):
    def __init__(self, addr: int, cause: Exception | None = None):
        super().__init__(f"cannot decode instruction at {addr:#x}: {cause}")
        self.addr = addr
        self.cause = cause


class IndirectUnresolved(FlowError):
    pass


# matcher
class FunctionNotFound(MendError):
    pass


# slice-solver
class SolverError(MendError):
    pass


class SliceEscapes(SolverError):
    pass


class NonAffine(SolverError):
    pass


class Underdetermined(SolverError):
    pass


class Inconsistent(SolverError):
    pass


# reassembler
class ReassemblyError(MendError):
    pass


class RegionOverflow(ReassemblyError):
    pass


class RegionTooSmall(ReassemblyError):
    pass


class CapExceeded(ReassemblyError):
    pass


class ModeSwitchUnsafe(ReassemblyError):
    pass


class UnmappedEntry(ReassemblyError):
    """A block inside the replaced region is entered from outside but has no
    counterpart in the patch."""


# oracle-harness
class InterpreterError(MendError):
    pass


class FuelExhausted(InterpreterError):
    pass


class UndefinedInstruction(InterpreterError):
    pass


class UnmappedAccess(InterpreterError):
    pass
