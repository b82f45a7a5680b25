#![no_main]

use libfuzzer_sys::fuzz_target;
use minirec_core::tokenizer::Codebook;

fuzz_target!(|data: &[u8]| {
    if let Ok(cb) = Codebook::from_bytes(data) {
        // whatever decodes must encode back to the same bytes
        let again = Codebook::from_bytes(&cb.to_bytes()).expect("re-encoded codebook decodes");
        assert_eq!(again.to_bytes(), cb.to_bytes());
    }
});
