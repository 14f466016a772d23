//! Answer extraction and normalization.
//!
//! A multiple-choice answer is the *last* standalone label in the text, where
//! a label is either an uppercase letter standing alone (`B`) or a letter in
//! either case followed by a closing parenthesis (`B)`, `b)`). A bare
//! lowercase letter is never a label because `a` is an English article.
//!
//! A numeric answer is the last standalone number. Numbers are compared by
//! value through a canonical decimal string, so `11.0`, `011` and `11` are
//! the same answer.

/// The set of answers a task admits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnswerSpace {
    Labels(Vec<char>),
    Numeric,
}

impl AnswerSpace {
    /// Labels `A`, `B`, ... for an `n`-way multiple-choice task.
    pub fn labels(n: usize) -> Self {
        AnswerSpace::Labels((b'A'..b'A' + n as u8).map(char::from).collect())
    }

    pub fn all_labels() -> Self {
        Self::labels(5)
    }

    /// Canonical form of a target under this space, or `None` when the
    /// target is not a member.
    pub fn normalize(&self, target: &str) -> Option<String> {
        match self {
            AnswerSpace::Labels(labels) => {
                let t = target.trim();
                let t = t.strip_suffix(')').unwrap_or(t);
                let mut chars = t.chars();
                let c = chars.next()?.to_ascii_uppercase();
                if chars.next().is_some() || !labels.contains(&c) {
                    return None;
                }
                Some(c.to_string())
            }
            AnswerSpace::Numeric => canonical_number(target.trim()),
        }
    }
}

/// Extracts the final committed answer from free text.
pub fn extract(text: &str, space: &AnswerSpace) -> Option<String> {
    match space {
        AnswerSpace::Labels(labels) => last_label(text, labels).map(|c| c.to_string()),
        AnswerSpace::Numeric => last_number(text),
    }
}

/// The last two non-empty lines of `text`.
pub fn final_segment(text: &str) -> String {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let start = lines.len().saturating_sub(2);
    lines[start..].join("\n")
}

/// Whether `answer` commits to `target` in its final segment.
///
/// Letter targets (`A`..`E`, optionally with `)`) are matched as labels, every
/// other target as a number. Matching is whole-token: target `1` does not
/// match an answer ending in `11`.
pub fn target_in(answer: &str, target: &str) -> bool {
    let labels = AnswerSpace::all_labels();
    let space = if labels.normalize(target).is_some() {
        labels
    } else {
        AnswerSpace::Numeric
    };
    let Some(want) = space.normalize(target) else {
        return false;
    };
    extract(&final_segment(answer), &space).is_some_and(|got| got == want)
}

fn last_label(text: &str, labels: &[char]) -> Option<char> {
    let chars: Vec<char> = text.chars().collect();
    let mut found = None;
    for (i, &c) in chars.iter().enumerate() {
        if !c.is_ascii_alphabetic() {
            continue;
        }
        let upper = c.to_ascii_uppercase();
        if !labels.contains(&upper) {
            continue;
        }
        if i > 0 && chars[i - 1].is_alphanumeric() {
            continue;
        }
        let next = chars.get(i + 1).copied();
        let paren = next == Some(')');
        if paren {
            found = Some(upper);
            continue;
        }
        if c.is_ascii_uppercase() && next.is_none_or(|n| !n.is_alphanumeric() && n != '\'') {
            found = Some(upper);
        }
    }
    found
}

fn last_number(text: &str) -> Option<String> {
    let bytes = text.as_bytes();
    let mut found = None;
    let mut i = 0;
    while i < bytes.len() {
        if !bytes[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let prev_ok = i == 0 || !is_word_byte(bytes[i - 1]) && bytes[i - 1] != b'.';
        let mut start = i;
        if i > 0 && bytes[i - 1] == b'-' && (i < 2 || !bytes[i - 2].is_ascii_alphanumeric()) {
            start = i - 1;
        }
        let mut end = i;
        while end < bytes.len() && bytes[end].is_ascii_digit() {
            end += 1;
        }
        if end + 1 < bytes.len() && bytes[end] == b'.' && bytes[end + 1].is_ascii_digit() {
            end += 1;
            while end < bytes.len() && bytes[end].is_ascii_digit() {
                end += 1;
            }
        }
        let next_ok = end == bytes.len() || !is_word_byte(bytes[end]);
        if prev_ok && next_ok {
            found = canonical_number(&text[start..end]);
        }
        i = end;
    }
    found
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b >= 0x80
}

/// Canonical decimal string: no leading zeros, no trailing fractional zeros,
/// no negative zero.
pub fn canonical_number(s: &str) -> Option<String> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, f),
        None => (body, ""),
    };
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if !int.bytes().all(|b| b.is_ascii_digit()) || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let int = int.trim_start_matches('0');
    let frac = frac.trim_end_matches('0');
    let int = if int.is_empty() { "0" } else { int };
    let mut out = String::new();
    if neg && !(int == "0" && frac.is_empty()) {
        out.push('-');
    }
    out.push_str(int);
    if !frac.is_empty() {
        out.push('.');
        out.push_str(frac);
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mc4() -> AnswerSpace {
        AnswerSpace::labels(4)
    }

    #[test]
    fn concluding_label_is_extracted() {
        let text = "Given these considerations, the only substance among the options that can be shaped into a triangle by itself is A) Ice.";
        assert_eq!(extract(text, &mc4()).as_deref(), Some("A"));
        assert_eq!(extract("Answer: B) steam", &mc4()).as_deref(), Some("B"));
    }

    #[test]
    fn last_mention_wins() {
        let text = "I considered A and B; final answer: B";
        assert_eq!(extract(text, &mc4()).as_deref(), Some("B"));
    }

    #[test]
    fn articles_are_not_labels() {
        assert_eq!(extract("it is a fruit", &mc4()), None);
        assert_eq!(extract("a) pear", &mc4()).as_deref(), Some("A"));
        assert_eq!(extract("Amber", &mc4()), None);
    }

    #[test]
    fn out_of_space_labels_are_ignored() {
        assert_eq!(extract("F) none of these", &mc4()), None);
        assert_eq!(extract("E) five", &mc4()), None);
        assert_eq!(extract("E) five", &AnswerSpace::labels(5)).as_deref(), Some("E"));
    }

    #[test]
    fn numbers_compare_by_value() {
        assert_eq!(extract("3+8=11.0", &AnswerSpace::Numeric).as_deref(), Some("11"));
        assert_eq!(extract("so 011 apples.", &AnswerSpace::Numeric).as_deref(), Some("11"));
        assert_eq!(extract("left with -3", &AnswerSpace::Numeric).as_deref(), Some("-3"));
        assert_eq!(extract("x2 and abc", &AnswerSpace::Numeric), None);
        assert_eq!(canonical_number("-0.00").as_deref(), Some("0"));
        assert_eq!(canonical_number("1.50").as_deref(), Some("1.5"));
        assert_eq!(canonical_number("."), None);
    }

    #[test]
    fn target_membership_is_whole_token() {
        assert!(target_in("the only one is A) Ice.", "A"));
        assert!(!target_in("B) steam", "A"));
        assert!(target_in("3+8 = 11", "11"));
        assert!(!target_in("3+8 = 11", "1"));
    }

    #[test]
    fn target_membership_looks_at_final_lines_only() {
        let text = "The answer is A)\nB) steam: a gas\nC) water: a liquid";
        assert!(!target_in(text, "A"));
        assert!(target_in(text, "C"));
        let cot = "A) pear: a fruit\nD) rose: a flower\nSo the answer is A) pear.";
        assert!(target_in(cot, "A"));
        assert!(!target_in(cot, "D"));
    }
}
