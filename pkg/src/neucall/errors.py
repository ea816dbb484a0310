"""Exception types shared across the pipeline."""


class NeucallError(Exception):
    """Base class for all library errors."""


# --- ingest ---

class NotElf(NeucallError):
    """File does not start with the ELF magic."""


class UnsupportedMachine(NeucallError):
    """ELF machine class not handled by the configured decoder."""


class DecodeError(NeucallError):
    """Instruction decoding failed at an address (non-fatal in linear sweep)."""

    def __init__(self, address: int, reason: str = ""):
        self.address = address
        self.reason = reason
        super().__init__(f"decode failed at 0x{address:x}" + (f": {reason}" if reason else ""))


class SchemaError(NeucallError):
    """Malformed record in an interchange file."""

    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class InvariantViolation(NeucallError):
    """A validated value breaks one of its structural invariants."""


# --- acfg ---

class ConfigViolation(NeucallError):
    """Feature configuration with inconsistent flags."""


class VersionMismatch(NeucallError):
    """Serialized artifact carries an unsupported format version."""


class CorruptGraph(NeucallError):
    """Serialized graph failed checksum / structural validation."""


# --- features ---

class MissingExternalVector(NeucallError):
    """External embedding file does not cover a required code node."""

    def __init__(self, block_address: int):
        self.block_address = block_address
        super().__init__(f"no external embedding for block 0x{block_address:x}")


class EigensolveFailure(NeucallError):
    """Eigendecomposition did not converge for a component."""


# --- model ---

class DimensionMismatch(NeucallError):
    """Tensor shapes inconsistent with the model configuration."""


class InvalidNode(NeucallError):
    """Node id is not a valid code node for pair prediction."""


class NonFiniteLoss(NeucallError):
    """Training batch produced a NaN/Inf loss."""

    def __init__(self, batch_id: str):
        self.batch_id = batch_id
        super().__init__(f"non-finite loss in batch {batch_id}")


class CorruptCheckpoint(NeucallError):
    """Checkpoint failed checksum / structural validation."""


# --- dataset ---

class TooFewProjects(NeucallError):
    """Project-level splitting needs at least three projects."""


class UnresolvedAddress(NeucallError):
    """Strict label validation hit an address with no recovered block/entry."""


# --- evaluate ---

class EmptyInput(NeucallError):
    """Metric computation over an empty sample list."""


class DegenerateClasses(NeucallError):
    """AUROC needs at least one positive and one negative."""


class NoIcalls(NeucallError):
    """AICT over zero indirect callsites."""
