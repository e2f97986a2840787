import os
from typing import Tuple
from dotenv import load_dotenv

load_dotenv()

FRAME_ADDR = os.getenv("SERVOSIM_FRAME_ADDR", "127.0.0.1:47001")
CMD_ADDR = os.getenv("SERVOSIM_CMD_ADDR", "127.0.0.1:47002")
LOG_LEVEL = os.getenv("SERVOSIM_LOG_LEVEL", "INFO").upper()
REPLY_TIMEOUT = float(os.getenv("SERVOSIM_REPLY_TIMEOUT", "5.0"))  # wall seconds per frame


def parse_addr(addr: str) -> Tuple[str, int]:
    """
    Splits "host:port" into a (host, port) tuple.
    A bare port ("47001") binds on loopback.
    """
    host, sep, port = addr.rpartition(":")
    if not sep:
        return "127.0.0.1", int(addr)
    return host or "127.0.0.1", int(port)


def format_addr(host: str, port: int) -> str:
    return f"{host}:{port}"
