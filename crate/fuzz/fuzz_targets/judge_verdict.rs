#![no_main]

use libfuzzer_sys::fuzz_target;
use selfrefine::eval::parse_verdict;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Some(v) = parse_verdict(&text) {
        assert!((1..=3).contains(&v.rating));
    }
});
