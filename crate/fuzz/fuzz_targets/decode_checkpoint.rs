#![no_main]

use libfuzzer_sys::fuzz_target;
use refinegan::checkpoint::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(st) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&st).expect("decoded state encodes");
        assert_eq!(decode_checkpoint(&bytes).expect("own output decodes"), st);
    }
});
