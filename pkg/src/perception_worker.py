"""
Perception process: reads pseudo-depth frames from the controller's stream,
decides LEFT / RIGHT / CENTER and answers each decided frame with a command
datagram carrying the frame's seq.

Run standalone with
    python -m src.perception_worker --frame-addr 127.0.0.1:47001 --cmd-addr 127.0.0.1:47002
"""
import argparse
import asyncio
import logging
import sys
from typing import List, Tuple

from src.config import CMD_ADDR, FRAME_ADDR, LOG_LEVEL
from src.link import FrameKind, FrameMessage, LinkError, connect_perception, unframe
from src.percept import AvoidCommandMsg, DecisionParams, PerceptionPipeline

logger = logging.getLogger(__name__)


async def serve(frame_addr: str, cmd_addr: str, params: DecisionParams) -> int:
    """Runs until the controller closes the frame stream. Returns the number of decisions sent."""
    link = await connect_perception(frame_addr, cmd_addr)
    pipeline = PerceptionPipeline(params)
    sent = 0
    logger.info("[Perception] Connected to %s, replying to %s", frame_addr, cmd_addr)
    try:
        while True:
            item = await link.frames.next_frame()
            if item is None:
                break
            frame, reference = item
            msg = pipeline.process(
                frame.to_depth(), frame.seq, frame.timestamp_us,
                reference.to_depth() if reference is not None else None,
            )
            if msg is not None:
                link.send_command(msg)
                sent += 1
    finally:
        await link.close()
    logger.info("[Perception] Stream closed after %d decisions (%d frames dropped)",
                sent, pipeline.dropped + link.frames.dropped)
    return sent


def replay_log(data: bytes, params: DecisionParams) -> List[Tuple[FrameMessage, AvoidCommandMsg]]:
    """Re-decides every pseudo-depth frame of a recorded frame log."""
    pipeline = PerceptionPipeline(params)
    decisions = []
    references = {}
    offset = 0
    while offset < len(data):
        frame, used = unframe(data[offset:])
        offset += used
        if frame.kind == FrameKind.REFERENCE:
            references[frame.seq] = frame
            continue
        ref = references.pop(frame.seq, None)
        msg = pipeline.process(frame.to_depth(), frame.seq, frame.timestamp_us,
                               ref.to_depth() if ref is not None else None)
        if msg is not None:
            decisions.append((frame, msg))
    return decisions


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="perception_worker", description="Pseudo-depth avoidance decisions")
    parser.add_argument("--frame-addr", default=FRAME_ADDR, help="controller frame stream host:port")
    parser.add_argument("--cmd-addr", default=CMD_ADDR, help="controller command datagram host:port")
    parser.add_argument("--params", default=None, help="DecisionParams as JSON")
    args = parser.parse_args(argv)

    logging.basicConfig(level=LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s %(message)s")
    params = DecisionParams.model_validate_json(args.params) if args.params else DecisionParams()
    try:
        asyncio.run(serve(args.frame_addr, args.cmd_addr, params))
    except LinkError as e:
        logger.error("[Perception] %s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
