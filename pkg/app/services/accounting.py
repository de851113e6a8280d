# app/services/accounting.py
"""Учёт трафика: float32 на проводе плюс фиксированный заголовок сообщения"""
from dataclasses import dataclass, field
from typing import Iterable

from app import config


def message_bytes(num_elements: int) -> int:
    return config.WIRE_BYTES_PER_ELEMENT * int(num_elements) + config.WIRE_HEADER_BYTES


@dataclass
class RoundTraffic:
    """Размеры сообщений (в элементах) по клиентам и направлениям"""

    uploads: dict[int, list[int]] = field(default_factory=dict)
    downloads: dict[int, list[int]] = field(default_factory=dict)

    @classmethod
    def for_clients(cls, client_ids: Iterable[int]) -> "RoundTraffic":
        ids = list(client_ids)
        return cls({m: [] for m in ids}, {m: [] for m in ids})

    def upload(self, client_id: int, *messages: int) -> None:
        self.uploads.setdefault(client_id, []).extend(int(n) for n in messages)

    def download(self, client_id: int, *messages: int) -> None:
        self.downloads.setdefault(client_id, []).extend(int(n) for n in messages)

    def merge(self, other: "RoundTraffic") -> "RoundTraffic":
        merged = RoundTraffic.for_clients(sorted(set(self.uploads) | set(other.uploads)))
        for source in (self, other):
            for m, msgs in source.uploads.items():
                merged.upload(m, *msgs)
            for m, msgs in source.downloads.items():
                merged.download(m, *msgs)
        return merged


def comm_accounting(traffic: RoundTraffic) -> tuple[dict[int, int], dict[int, int]]:
    """Байты по клиентам: (выгрузка, загрузка)"""
    up = {m: sum(message_bytes(n) for n in msgs) for m, msgs in sorted(traffic.uploads.items())}
    down = {m: sum(message_bytes(n) for n in msgs) for m, msgs in sorted(traffic.downloads.items())}
    return up, down
