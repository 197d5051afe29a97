#![no_main]

use libfuzzer_sys::fuzz_target;
use refinegan::trainer::{history_from_csv, history_to_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = history_from_csv(text) {
        let _ = history_to_csv(&rows);
    }
});
