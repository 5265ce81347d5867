use std::collections::BTreeMap;
use std::io::{Cursor, Read};

use dtask_core::protocol::{
    decode, encode, framed_len, read_message, write_message, BlobPlaceholder, Message, OpKind, ProtocolError, Value,
};
use proptest::prelude::*;

fn scalar() -> impl Strategy<Value = Value> {
    prop_oneof![
        Just(Value::Nil),
        any::<bool>().prop_map(Value::Bool),
        (i64::MIN..0i64).prop_map(Value::Int),
        any::<u64>().prop_map(Value::UInt),
        any::<f64>().prop_filter("NaN never equals itself", |f| !f.is_nan()).prop_map(Value::Float),
        "[a-zA-Z0-9 _$-]{0,12}".prop_map(Value::Str),
        proptest::collection::vec(any::<u8>(), 0..24).prop_map(Value::Bin),
    ]
}

fn key() -> impl Strategy<Value = String> {
    "[a-z_][a-z0-9_]{0,8}".prop_filter("reserved keys", |k| k != "op")
}

fn tree() -> impl Strategy<Value = Value> {
    scalar().prop_recursive(3, 24, 5, |inner| {
        prop_oneof![
            proptest::collection::vec(inner.clone(), 0..5).prop_map(Value::Array),
            proptest::collection::btree_map(key(), inner, 0..5).prop_map(Value::Map),
        ]
    })
}

/// A valid message: random header fields plus `k` blobs, each referenced by
/// exactly one placeholder under its own key.
fn message() -> impl Strategy<Value = Message> {
    (
        proptest::sample::select(OpKind::ALL.to_vec()),
        proptest::collection::btree_map(key(), tree(), 0..6),
        proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..64), 0..=16),
    )
        .prop_map(|(op, fields, blobs)| {
            let mut header: BTreeMap<String, Value> = fields;
            header.insert("op".into(), Value::from(op.as_str()));
            let mut refs = Vec::new();
            for i in 0..blobs.len() {
                refs.push(Value::Blob(BlobPlaceholder { index: i as u32 }));
            }
            if !refs.is_empty() {
                // Nest some placeholders inside a list to exercise deep lookup.
                let split = refs.len() / 2;
                let nested: Vec<Value> = refs.drain(..split).collect();
                header.insert("blobs_nested".into(), Value::Array(nested));
                for (i, r) in refs.into_iter().enumerate() {
                    header.insert(format!("blob_{i}"), r);
                }
            }
            Message { header, blobs }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn decode_inverts_encode(m in message()) {
        let bytes = encode(&m).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.op().unwrap(), m.op().unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn encoded_size_is_exact(m in message()) {
        let bytes = encode(&m).unwrap();
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let expected = 4 + (4 + header_len) + m.blobs.iter().map(|b| 4 + b.len()).sum::<usize>();
        prop_assert_eq!(bytes.len(), expected);
        prop_assert_eq!(framed_len(std::iter::once(header_len).chain(m.blobs.iter().map(Vec::len))), expected);
        prop_assert_eq!(u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize, 1 + m.blobs.len());
    }

    #[test]
    fn distinct_messages_encode_differently(a in message(), b in message()) {
        if a != b {
            prop_assert_ne!(encode(&a).unwrap(), encode(&b).unwrap());
        }
    }

    #[test]
    fn every_truncation_is_rejected(m in message(), cut in any::<prop::sample::Index>()) {
        let bytes = encode(&m).unwrap();
        let at = cut.index(bytes.len());
        prop_assert!(decode(&bytes[..at]).is_err());
    }
}

/// Delivers at most `chunk` bytes per read call.
struct Trickle<'a> {
    data: &'a [u8],
    chunk: usize,
}

impl Read for Trickle<'_> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.chunk.min(buf.len()).min(self.data.len());
        buf[..n].copy_from_slice(&self.data[..n]);
        self.data = &self.data[n..];
        Ok(n)
    }
}

#[test]
fn stream_reads_resume_after_partial_reads() {
    let messages = vec![
        Message::new(OpKind::Heartbeat),
        Message::new(OpKind::TaskFinished).with("task", 7u64).with_blob("data", vec![1, 2, 3, 4, 5, 6, 7, 8]),
        Message::new(OpKind::ReleaseData).with("tasks", vec![1u64, 2, 3]),
    ];
    let mut wire = Vec::new();
    for m in &messages {
        write_message(&mut wire, m).unwrap();
    }
    for chunk in [1, 3, 7, 1000] {
        let mut stream = Trickle { data: &wire, chunk };
        for m in &messages {
            assert_eq!(&read_message(&mut stream).unwrap(), m);
        }
        assert!(matches!(read_message(&mut stream), Err(ProtocolError::ConnectionLost)));
    }
}

#[test]
fn eof_inside_a_message_is_a_truncation() {
    let mut wire = Vec::new();
    write_message(&mut wire, &Message::new(OpKind::Heartbeat)).unwrap();
    wire.pop();
    let err = read_message(&mut Cursor::new(wire)).unwrap_err();
    assert!(!matches!(err, ProtocolError::ConnectionLost), "{err:?}");
}

#[test]
fn minimal_and_single_blob_framing() {
    let m = Message::new(OpKind::Heartbeat);
    let bytes = encode(&m).unwrap();
    assert_eq!(&bytes[0..4], &1u32.to_le_bytes());
    assert_eq!(decode(&bytes).unwrap(), m);

    let m = Message::new(OpKind::TaskFinished).with("task", 1u64).with_blob("data", vec![0; 8]);
    let bytes = encode(&m).unwrap();
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    assert_eq!(&bytes[0..4], &2u32.to_le_bytes());
    assert_eq!(u32::from_le_bytes(bytes[8 + h..12 + h].try_into().unwrap()), 8);
    assert_eq!(bytes.len(), 4 + 4 + h + 4 + 8);
}
