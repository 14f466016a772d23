#![no_main]

use libfuzzer_sys::fuzz_target;
use selfrefine::teacher::Expr;

fuzz_target!(|data: &[u8]| {
    if let Ok(src) = std::str::from_utf8(data) {
        if let Ok(expr) = Expr::parse(src) {
            let mut steps = Vec::new();
            assert_eq!(expr.steps(&mut steps), expr.eval());
        }
    }
});
