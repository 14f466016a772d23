#![no_main]

use libfuzzer_sys::fuzz_target;
use selfrefine::teacher::parse_chat_reply;

fuzz_target!(|data: &[u8]| {
    if let Ok(body) = std::str::from_utf8(data) {
        let _ = parse_chat_reply(body);
    }
});
