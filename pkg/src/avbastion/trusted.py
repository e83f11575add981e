from dataclasses import dataclass, field

from avbastion.errors import Unauthorized
from avbastion.rng import Rng
from avbastion.vdisk import AuthToken


@dataclass
class ManifestEntry:
    """One AV component as the trusted side knows it."""
    role: str
    file_id: int
    name: str
    digest: int
    original_digest: int
    epoch: int = 0
    # keystream key of the current epoch, 0 while never obfuscated
    epoch_key: int = 0


@dataclass
class TrustedStore:
    """State that no attack operation can reach: keys, the token, the golden MBR and the manifest.

    Stands in for the special hardware / secured location. Attack functions
    never take one as a parameter.
    """
    seal_key: int
    definitions_key: int
    token: AuthToken
    golden_mbr: bytes = b""
    manifest: list[ManifestEntry] = field(default_factory=list)
    manifest_seal: int = 0
    epoch: int = 0

    def authorize(self, token: AuthToken) -> None:
        if token != self.token:
            raise Unauthorized("token does not match the trusted store")

    def component(self, role: str) -> ManifestEntry:
        for entry in self.manifest:
            if entry.role == role:
                return entry
        raise KeyError(f"no manifest entry for role '{role}'")


def provision(rng: Rng) -> TrustedStore:
    return TrustedStore(seal_key=rng.next_u64(),
                        definitions_key=rng.next_u64(),
                        token=AuthToken(rng.next_u64()))
