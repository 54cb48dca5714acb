"""Exception hierarchy shared by all simulator layers."""


class AmePimError(Exception):
    """Base class for every error raised by the package."""


class EncodingError(AmePimError):
    """A 32-bit word does not decode to a well-formed PIM instruction."""


class AssemblyError(AmePimError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", col {column}"
            where += ": "
        super().__init__(where + message)


class ProgramError(AmePimError):
    """A PEP program violates a CRF constraint (size, JUMP nesting, EXIT)."""


class DeviceError(AmePimError):
    """Illegal command or state transition on the pseudo-channel model."""


class RoutingError(DeviceError):
    """Operand combination the PIM datapath cannot route."""


class LayoutError(AmePimError):
    """Out-of-range tile coordinate, overlapping region or exhausted space."""


class ScheduleError(AmePimError):
    """A PEP schedule request exceeds the loop bound or a region."""


class AmeError(AmePimError):
    """AME-level misuse: bad CSR value, invalid register, lifecycle."""


class ParseError(AmePimError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnsupportedInstruction(AmePimError):
    """AME instruction that has no PIM lowering."""

    def __init__(self, mnemonic, reason):
        self.mnemonic = mnemonic
        self.reason = reason
        super().__init__(f"{mnemonic}: {reason}")
