#![no_main]

use libfuzzer_sys::fuzz_target;
use minirec_core::decode::Trie;

// Input: paths separated by 0xFF bytes, one token per byte.
fuzz_target!(|data: &[u8]| {
    let mut trie = Trie::new();
    let mut inserted = Vec::new();
    for (item, chunk) in data.split(|&b| b == 0xFF).enumerate() {
        let path: Vec<u32> = chunk.iter().map(|&b| b as u32).collect();
        if trie.insert(&path, item as u32).is_ok() {
            inserted.push((path, item as u32));
        }
    }
    assert_eq!(trie.n_items(), inserted.len());
    for (path, item) in &inserted {
        assert_eq!(trie.lookup(path), Some(*item));
        for cut in 0..path.len() {
            let legal = trie.legal_next_tokens(&path[..cut]).expect("prefix of an inserted path");
            assert!(legal.contains(&path[cut]));
        }
    }
    let _ = trie.legal_next_tokens(&data.iter().map(|&b| b as u32).collect::<Vec<_>>());
});
