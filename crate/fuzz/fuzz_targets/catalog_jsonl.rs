#![no_main]

use libfuzzer_sys::fuzz_target;
use minirec_core::catalog::Catalog;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = Catalog::from_jsonl(text);
    }
});
