#![no_main]

use libfuzzer_sys::fuzz_target;
use refinegan::masks::{decode_pgm, encode_pgm, SamplingMask};

fuzz_target!(|data: &[u8]| {
    if let Ok((h, w, bits)) = decode_pgm(data) {
        assert_eq!(bits.len(), h * w);
        // anything accepted with DC set must re-encode to an equal raster
        if let Ok(m) = SamplingMask::from_bits(h, w, bits.clone(), refinegan::masks::Pattern::Random, 0.5, 0) {
            let (h2, w2, again) = decode_pgm(&encode_pgm(&m)).expect("own output decodes");
            assert_eq!((h2, w2), (h, w));
            assert_eq!(again, bits);
        }
    }
});
