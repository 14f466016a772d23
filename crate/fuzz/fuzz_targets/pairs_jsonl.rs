#![no_main]

use libfuzzer_sys::fuzz_target;
use selfrefine::refine::parse_pairs;

fuzz_target!(|data: &[u8]| {
    let _ = parse_pairs(data);
});
