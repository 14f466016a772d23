#![no_main]

use libfuzzer_sys::fuzz_target;
use selfrefine::corpus::parse_demonstrations;

fuzz_target!(|data: &[u8]| {
    // every accepted record must pass validation on its own
    if let Ok(demos) = parse_demonstrations(data) {
        for d in &demos {
            assert!(d.validate().is_ok(), "accepted invalid record {}", d.id);
        }
    }
});
