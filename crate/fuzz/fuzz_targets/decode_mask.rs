#![no_main]

use libfuzzer_sys::fuzz_target;
use refinegan::masks::decode_mask;

// Input layout: sidecar text, a NUL byte, then the graymap.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(sidecar) = std::str::from_utf8(&data[..split]) else { return };
    let raster = data.get(split + 1..).unwrap_or(&[]);
    if let Ok(m) = decode_mask(raster, sidecar) {
        assert!(m.bits()[m.dc_index()]);
        assert!(m.rate() > 0.0 && m.rate() <= 1.0);
    }
});
