#![no_main]

use libfuzzer_sys::fuzz_target;
use selfrefine::answer::{extract, AnswerSpace};

fuzz_target!(|data: &[u8]| {
    let Some((&selector, rest)) = data.split_first() else {
        return;
    };
    let text = String::from_utf8_lossy(rest);
    let space = match selector % 3 {
        0 => AnswerSpace::labels(4),
        1 => AnswerSpace::labels(5),
        _ => AnswerSpace::Numeric,
    };
    if let Some(answer) = extract(&text, &space) {
        // extracted answers are canonical members of the space
        assert_eq!(space.normalize(&answer).as_deref(), Some(answer.as_str()));
        assert_eq!(extract(&answer, &space).as_deref(), Some(answer.as_str()));
    }
});
