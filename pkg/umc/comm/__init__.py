from .ledger import CommLedger, communication_volume, record_transfer
from .packet import SparsePacket, decode, encode


__all__ = [
    "SparsePacket",
    "encode",
    "decode",
    "CommLedger",
    "record_transfer",
    "communication_volume",
]
