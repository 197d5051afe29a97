#![no_main]

use libfuzzer_sys::fuzz_target;
use refinegan::metrics::EvaluationReport;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = EvaluationReport::from_csv(text);
});
