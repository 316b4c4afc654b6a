from dataclasses import dataclass, field
from typing import List, Optional

from app.config import MEMORY_LENGTH
from app.errors import ContractError
from app.services.streams import FeatureMap, Modality, Source


@dataclass
class MemoryBank:
    """
    Per-modality history of the last ``capacity`` feature maps, oldest first.

    Time indexes are strictly consecutive; a gap means an update was skipped.
    """

    modality: Modality
    capacity: int = MEMORY_LENGTH
    entries: List[FeatureMap] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ContractError(f"MemoryBank capacity must be >= 1, got {self.capacity}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def newest(self) -> Optional[FeatureMap]:
        return self.entries[-1] if self.entries else None

    @property
    def time_indexes(self) -> List[int]:
        return [e.time_index for e in self.entries]

    @property
    def sources(self) -> List[Source]:
        return [e.source for e in self.entries]

    def push(self, feature: FeatureMap) -> "MemoryBank":
        if feature.modality is not self.modality:
            raise ContractError(f"push: {feature.modality.value} feature into {self.modality.value} bank")
        newest = self.newest
        if newest is not None and feature.time_index != newest.time_index + 1:
            raise ContractError(
                f"push: non-consecutive time index {feature.time_index} after {newest.time_index} "
                f"({self.modality.value} bank)"
            )
        self.entries.append(feature)
        if len(self.entries) > self.capacity:
            del self.entries[0]
        return self

    def window(self) -> List[FeatureMap]:
        """
        The history S_M, oldest to newest, always ``capacity`` long.

        With fewer entries the oldest one is repeated at the front.
        """
        if not self.entries:
            raise ContractError(f"window: {self.modality.value} bank is empty")
        pad = self.capacity - len(self.entries)
        return [self.entries[0]] * pad + list(self.entries)


def update_policy(
    bank: MemoryBank,
    available: bool,
    extracted: Optional[FeatureMap] = None,
    compensated: Optional[FeatureMap] = None,
) -> MemoryBank:
    """
    Mechanical bank update after each frame.

    Live modality: store the extracted feature. Missing modality: store the
    compensated stand-in, so the history never has a hole.
    """
    if available:
        if extracted is None or compensated is not None:
            raise ContractError("update_policy: an available modality takes exactly the extracted feature")
        return bank.push(extracted.with_source(Source.EXTRACTED))
    if compensated is None or extracted is not None:
        raise ContractError("update_policy: a missing modality takes exactly the compensated feature")
    return bank.push(compensated.with_source(Source.COMPENSATED))


def history_bank(modality: Modality, frames, t: int, capacity: int) -> MemoryBank:
    """Bank as it stands before frame ``t`` when every earlier frame was extracted (training mode)."""
    bank = MemoryBank(modality, capacity)
    for s in range(max(0, t - capacity), t):
        bank.push(FeatureMap(modality, s, frames[s], Source.EXTRACTED))
    return bank
