"""Typed errors shared across the platform modules."""


class DatchainError(Exception):
    """Base class for all platform errors."""


# -- ledger --------------------------------------------------------------

class InvalidParent(DatchainError):
    """Block's prev_hash does not match the current head."""


class StaleIndex(DatchainError):
    """Block index does not extend the current height."""


class InvalidProof(DatchainError):
    """Consensus validity check failed for the block."""


class InvalidTransaction(DatchainError):
    """Transaction fails signature, sequence, or structural checks."""


class UnknownSender(DatchainError):
    """Sender address has no registered public key."""


class BadSignature(DatchainError):
    """Signature does not verify."""


# -- consensus -----------------------------------------------------------

class Exhausted(DatchainError):
    """Search budget spent without finding a valid nonce."""


class ClockSkew(DatchainError):
    """Observed clock is earlier than a recorded timestamp."""


class EmptySet(DatchainError):
    """Operation requires a non-empty validator set."""


class TooFewValidators(DatchainError):
    """More delegates requested than validators exist."""


# -- tangle --------------------------------------------------------------

class UnknownSite(DatchainError):
    """Site id not present in the tangle."""


class UnknownParent(DatchainError):
    """Referenced parent site does not exist."""


# -- marketplace ---------------------------------------------------------

class DuplicateAccount(DatchainError):
    """Address already registered."""


class UnknownAccount(DatchainError):
    """Address not registered."""


class DuplicateSensor(DatchainError):
    """Sensor id already registered."""


class UnknownSensor(DatchainError):
    """Sensor id not registered."""


class DuplicateStream(DatchainError):
    """Sensor already has a stream."""


class UnknownStream(DatchainError):
    """Stream id not registered."""


class UnknownSubscription(DatchainError):
    """Subscription id not registered."""


class InsufficientFunds(DatchainError):
    """Balance below the required amount."""


class StateDivergence(DatchainError):
    """Committed transaction failed replay validation: corrupted ledger."""


# -- vault ---------------------------------------------------------------

class PayloadTooLarge(DatchainError):
    """Sensor payload exceeds the 1 MiB cap."""


class NonceExhausted(DatchainError):
    """Per-key nonce counter space exhausted."""


class AuthFailure(DatchainError):
    """Authenticated decryption failed; data or key is wrong."""


class AccessDenied(DatchainError):
    """No active subscription covers this delivery."""


class AmbiguousAttribution(DatchainError):
    """More than one subscription key verifies a leaked tag."""


class NotFound(DatchainError):
    """No stored object under the requested id."""


class IntegrityFailure(DatchainError):
    """Stored bytes no longer hash to their content address."""


# -- simulation / service ------------------------------------------------

class ScenarioInvalid(DatchainError):
    """Simulation scenario fails validation."""


class ConfigError(DatchainError):
    """Malformed node or scenario configuration."""
