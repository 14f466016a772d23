#![no_main]

use libfuzzer_sys::fuzz_target;
use selfrefine::corpus::parse_split_manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(splits) = parse_split_manifest(data) {
        for (fraction, split) in &splits {
            assert_eq!(*fraction, split.fraction);
        }
    }
});
