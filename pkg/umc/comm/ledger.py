r"""
Bandwidth accounting of an episode.

Every transfer is attributed to its sender. Feature scalars are ``entries * channels`` of the
transmitted packet, query scalars are the cells of a broadcast query matrix. The communication
volume of an episode is the mean over agents of ``log(total scalars sent)``.
"""
import csv
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

from umc.comm.packet import SparsePacket
from umc.errors import EmptyLedgerError


logger: logging.Logger = logging.getLogger(__name__)

LEDGER_CSV_FIELDS = (
    "agent",
    "timestep",
    "feature_scalars",
    "query_scalars",
    "received_scalars",
    "transfers",
    "skipped",
)


@dataclass(frozen=True)
class TransferRecord:
    r"""One message on the bus. ``level`` is ``None`` for query broadcasts."""

    sender: int
    receiver: int
    timestep: int
    level: Optional[int]
    feature_scalars: int
    query_scalars: int
    skipped: bool = False


@dataclass
class AgentCounters:
    feature_scalars: int = 0
    query_scalars: int = 0
    received_scalars: int = 0
    transfers: int = 0
    skipped: int = 0

    @property
    def total(self) -> int:
        return self.feature_scalars + self.query_scalars


class CommLedger(object):
    r"""
    Per ``(agent, timestep)`` counters of transmitted and received scalars, plus the list of
    individual transfers. Counters only grow. A ledger must not be mutated from several workers
    at once.
    """

    def __init__(self):
        self._counters: Dict[Tuple[int, int], AgentCounters] = OrderedDict()
        self.transfers: List[TransferRecord] = []

    def _counter(self, agent: int, timestep: int) -> AgentCounters:
        key = (agent, timestep)
        if key not in self._counters:
            self._counters[key] = AgentCounters()
        return self._counters[key]

    def record_transfer(
        self,
        sender: int,
        receiver: int,
        timestep: int,
        packet: Optional[SparsePacket],
        query_scalars: int = 0,
        skipped: bool = False,
    ) -> TransferRecord:
        if query_scalars < 0:
            raise ValueError(f"query_scalars must be non-negative, found {query_scalars}.")
        feature_scalars = packet.scalar_count if packet is not None else 0
        record = TransferRecord(
            sender=sender,
            receiver=receiver,
            timestep=timestep,
            level=packet.level if packet is not None else None,
            feature_scalars=feature_scalars,
            query_scalars=query_scalars,
            skipped=skipped,
        )
        counter = self._counter(sender, timestep)
        counter.feature_scalars += feature_scalars
        counter.query_scalars += query_scalars
        counter.transfers += 1
        counter.skipped += int(skipped)
        if skipped:
            logger.debug(
                f"Agent {sender} skipped level {record.level} for agent {receiver} "
                f"at timestep {timestep}."
            )
        self.transfers.append(record)
        return record

    def record_receipt(self, receiver: int, timestep: int, decoded_scalars: int):
        r"""Count feature scalars a receiver decoded, the mirror image of feature transfers."""
        self._counter(receiver, timestep).received_scalars += decoded_scalars

    def __len__(self) -> int:
        return len(self.transfers)

    def __iter__(self) -> Iterator[Tuple[Tuple[int, int], AgentCounters]]:
        return iter(sorted(self._counters.items()))

    def agent_totals(self) -> Dict[int, int]:
        r"""Feature plus query scalars sent by every agent over all timesteps."""
        totals: Dict[int, int] = {}
        for (agent, _), counter in self:
            totals[agent] = totals.get(agent, 0) + counter.total
        return totals

    @property
    def sent_feature_scalars(self) -> int:
        return sum(counter.feature_scalars for _, counter in self)

    @property
    def received_feature_scalars(self) -> int:
        return sum(counter.received_scalars for _, counter in self)

    def feature_transfers(self) -> List[TransferRecord]:
        r"""Transfers which carried (or would have carried) a feature packet."""
        return [record for record in self.transfers if record.level is not None]

    def write_csv(self, path: str):
        with open(path, "w", newline="") as ledger_file:
            writer = csv.writer(ledger_file)
            writer.writerow(LEDGER_CSV_FIELDS)
            for (agent, timestep), counter in self:
                writer.writerow(
                    [
                        agent,
                        timestep,
                        counter.feature_scalars,
                        counter.query_scalars,
                        counter.received_scalars,
                        counter.transfers,
                        counter.skipped,
                    ]
                )


def record_transfer(
    ledger: CommLedger,
    sender: int,
    receiver: int,
    timestep: int,
    packet: Optional[SparsePacket],
    query_scalars: int = 0,
    skipped: bool = False,
) -> TransferRecord:
    r"""
    Add one transfer to the ledger: the sender's feature counter grows by
    ``packet.count * packet.channels`` and its query counter by ``query_scalars``. A query
    broadcast is recorded with ``packet=None``.
    """
    return ledger.record_transfer(sender, receiver, timestep, packet, query_scalars, skipped)


def communication_volume(ledger: CommLedger, log_base: float = math.e) -> float:
    r"""
    Mean over agents of ``log(feature scalars + query scalars)`` summed over the episode.
    Agents which sent nothing are left out of the mean.

    Raises
    ------
    umc.errors.EmptyLedgerError
        If no agent sent anything.
    """
    totals = [total for total in ledger.agent_totals().values() if total > 0]
    if len(totals) == 0:
        raise EmptyLedgerError("Communication volume of an empty ledger is undefined.")
    return sum(math.log(total) for total in totals) / len(totals) / math.log(log_base)
