#![no_main]

use std::sync::OnceLock;

use libfuzzer_sys::fuzz_target;
use minirec_core::catalog::{generate_catalog, Catalog, InteractionLog};

fn catalog() -> &'static Catalog {
    static C: OnceLock<Catalog> = OnceLock::new();
    C.get_or_init(|| generate_catalog(0, 40, 8, 4).expect("catalog"))
}

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = InteractionLog::from_jsonl(text, catalog());
    }
});
