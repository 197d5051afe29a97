#![no_main]

use libfuzzer_sys::fuzz_target;
use refinegan::kspace::{decode_grid, encode_grid};

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = decode_grid(data) {
        assert_eq!(g.data().len(), g.height() * g.width());
        assert_eq!(decode_grid(&encode_grid(&g)).expect("own output decodes"), g);
    }
});
