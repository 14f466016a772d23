#![no_main]

use libfuzzer_sys::fuzz_target;
use selfrefine::policy::Checkpoint;

fuzz_target!(|data: &[u8]| {
    // a decoded checkpoint re-encodes to the same bytes
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        let again = Checkpoint::from_bytes(&ckpt.to_bytes()).expect("re-decode");
        assert!(ckpt.policy.params_bitwise_eq(&again.policy));
        assert_eq!(ckpt.meta, again.meta);
    }
});
