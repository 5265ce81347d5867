//! Wire protocol shared by clients, the server and workers.
//!
//! Binary payloads never live inside the MessagePack header. They travel as
//! separate frames and the header refers to them by placeholder, so decoding
//! never has to reshape the header.

mod codec;
mod messages;
mod value;

pub use codec::{
    decode, decode_header, encode, encode_header, framed_len, read_message, write_message,
    Message, OpKind, ProtocolError, MAX_FRAMES,
};
pub use messages::{InputLocation, PeerMessage, StateSummary, ToClient, ToServer, ToWorker};
pub use value::{BlobPlaceholder, Value, BLOB_KEY};
