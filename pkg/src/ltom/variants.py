"""The five method variants and what each one switches on."""

from __future__ import annotations

from enum import Enum


class Variant(str, Enum):
    CDP = "CDP"  # one joint policy over both agents' observations
    NDDP = "NDDP"  # independent per-agent policies, no auxiliary losses
    NCDDP = "NCDDP"  # per-agent policies + the consensus loss only
    LATENT_TOM = "LATENT_TOM"  # full auxiliary loss, no communication
    LATENT_TOM_SL = "LATENT_TOM_SL"  # LATENT_TOM + one sync exchange per inference

    @classmethod
    def parse(cls, name) -> "Variant":
        if isinstance(name, cls):
            return name
        key = str(name).strip().upper().replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            known = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown variant {name!r} (known: {known})") from None

    @property
    def decentralized(self) -> bool:
        return self is not Variant.CDP

    @property
    def uses_nc(self) -> bool:
        return self in (Variant.NCDDP, Variant.LATENT_TOM, Variant.LATENT_TOM_SL)

    @property
    def uses_tom(self) -> bool:
        return self in (Variant.LATENT_TOM, Variant.LATENT_TOM_SL)

    @property
    def uses_conf(self) -> bool:
        return self.uses_tom

    @property
    def syncs(self) -> bool:
        return self is Variant.LATENT_TOM_SL


ALL_VARIANTS = tuple(Variant)
