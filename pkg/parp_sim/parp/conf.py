"""Protocol and simulator parameters, sourced from the PARP dict in settings."""
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from django.conf import settings

from .errors import ParpError


class ConfigError(ParpError):
    """Raised for unknown or out-of-range configuration values."""


def _default_fees():
    """Return the flat per-method fee schedule."""
    return {"get_balance": 1, "send_transaction": 5, "get_channel_status": 0}


def _default_split():
    """Return the slashing split; the treasury takes whatever is left."""
    return {"client": "1/3", "witness": "1/3"}


@dataclass(frozen=True)
class ParpConfig:
    """All tunables of the protocol modules and the simulator in one place."""

    dispute_window: int = 16
    min_deposit: int = 1000
    reward_split: dict = field(default_factory=_default_split)
    hash_window: int = 256
    block_interval: int = 10
    consent_ttl: int = 20
    fees: dict = field(default_factory=_default_fees)
    probe_period: int = 8
    hs_timer: int = 5
    open_timeout: int = 30
    request_timeout: int = 30
    header_store_size: int = 300
    max_tx_size: int = 4096
    delay: tuple = (1, 2)
    max_delay: int = 10
    horizon: int = 2000
    seed: int = 0

    def __post_init__(self):
        """Reject values the modules cannot work with."""
        for name in ["dispute_window", "hash_window", "block_interval", "probe_period", "hs_timer", "max_delay"]:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1.", key=name)
        if sum(self.split_fractions().values()) > 1:
            raise ConfigError("Reward split hands out more than the whole deposit.", key="reward_split")
        for method, fee in self.fees.items():
            if fee < 0:
                raise ConfigError(f"Fee for {method} is negative.", key="fees")

    @classmethod
    def from_settings(cls, **overrides):
        """Build a config from settings.PARP, then apply explicit overrides (None values are skipped)."""
        known = {item.name for item in fields(cls)}
        values = {}
        for key, value in getattr(settings, "PARP", {}).items():
            values[key.lower()] = value
        values.update({key: value for key, value in overrides.items() if value is not None})
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"Unknown PARP settings: {', '.join(unknown)}.", keys=unknown)
        if "delay" in values:
            values["delay"] = tuple(values["delay"])
        return cls(**values)

    def with_overrides(self, **overrides):
        """Return a copy with the given fields replaced."""
        return replace(self, **{key: value for key, value in overrides.items() if value is not None})

    def split_fractions(self):
        """Return the configured client and witness shares as Fractions."""
        return {party: Fraction(share) for party, share in self.reward_split.items()}

    def fee_for(self, method_name):
        """Look up the fee of an RPC method by its snake_case name."""
        try:
            return self.fees[method_name]
        except KeyError as err:
            raise ConfigError(f"No fee configured for {method_name}.", method=method_name) from err

    def as_dict(self):
        """Return the config as a plain dict for traces and reports."""
        out = asdict(self)
        out["delay"] = list(self.delay)
        return out
