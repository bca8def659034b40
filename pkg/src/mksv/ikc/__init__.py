"""Inter-kernel communication: wire format, credit flow control, bulk transfer."""

from mksv.ikc.bulk import (BulkDescriptor, Direction, LoopbackLink, bulk_prepare,
                           bulk_transfer, crosses_page, gather, scatter)
from mksv.ikc.channel import Channel, PeerSession
from mksv.ikc.flow import ControlPage, credit_consume, credit_produce
from mksv.ikc.frames import (HEADER_SIZE, INLINE_CAPACITY, PAGE_SIZE, CallId, FrameKind,
                             IkcFrame, decode_frame, dump_line, encode_frame, is_remote)

__all__ = [
    "BulkDescriptor", "CallId", "Channel", "ControlPage", "Direction", "FrameKind",
    "HEADER_SIZE", "INLINE_CAPACITY", "IkcFrame", "LoopbackLink", "PAGE_SIZE",
    "PeerSession", "bulk_prepare", "bulk_transfer", "credit_consume", "credit_produce",
    "crosses_page", "decode_frame", "dump_line", "encode_frame", "gather", "is_remote",
    "scatter",
]
