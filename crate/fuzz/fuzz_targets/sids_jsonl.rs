#![no_main]

use libfuzzer_sys::fuzz_target;
use minirec_core::tokenizer::SidTable;
use minirec_core::vocab::VocabLayout;

fuzz_target!(|data: &[u8]| {
    let Some((&k, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    if let Ok(table) = SidTable::from_jsonl(text, k as usize) {
        // an accepted table must give every item a token path in its layout
        let layout = VocabLayout::for_table(64, &table);
        for item in 0..table.len() as u32 {
            let toks = layout.item_tokens(&table, item).expect("accepted table tokenizes");
            assert!(toks.iter().all(|&t| (t as usize) < layout.size()));
        }
    }
});
