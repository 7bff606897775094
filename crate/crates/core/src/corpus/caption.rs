use std::sync::OnceLock;

use regex::Regex;

/// Captions shorter than this (in characters, after cleaning) are dropped.
pub const MIN_CAPTION_CHARS: usize = 30;

fn trailing_credit() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(\s*[^()]*/[^()]*\)\s*$").expect("valid regex"))
}

fn whitespace() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\s+").expect("valid regex"))
}

/// Strips trailing photographer/outlet credits such as `(NAME/SOURCE)` and
/// collapses whitespace. Returns `None` when fewer than
/// [`MIN_CAPTION_CHARS`] characters remain.
///
/// Only parenthesised segments that contain a slash and end the caption are
/// removed; parentheses elsewhere are left alone.
pub fn clean_caption(raw: &str) -> Option<String> {
    let mut text = raw.trim_end().to_string();
    loop {
        let Some(m) = trailing_credit().find(&text) else { break };
        text.truncate(m.start());
        text = text.trim_end().to_string();
    }
    let cleaned = whitespace().replace_all(text.trim(), " ").into_owned();
    (cleaned.chars().count() >= MIN_CAPTION_CHARS).then_some(cleaned)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_trailing_credit() {
        assert_eq!(
            clean_caption("Protesters gather outside the court on Monday morning. (TOM SMITH/NEW YORK TIMES)").as_deref(),
            Some("Protesters gather outside the court on Monday morning.")
        );
        assert_eq!(
            clean_caption("Protesters gather outside the court on Monday morning. ( TOM SMITH / AP )").as_deref(),
            Some("Protesters gather outside the court on Monday morning.")
        );
    }

    #[test]
    fn short_captions_are_dropped() {
        assert_eq!(clean_caption("Flag at dawn"), None);
        // exactly 29 and 30 characters
        assert_eq!(clean_caption(&"a".repeat(29)), None);
        assert_eq!(clean_caption(&"a".repeat(30)).map(|s| s.len()), Some(30));
        // long only because of the credit
        assert_eq!(clean_caption("Senator speaks (JANE DOE/GETTY IMAGES)"), None);
    }

    #[test]
    fn keeps_unrelated_parentheses() {
        let s = "The Senate chamber during the confirmation vote last week.";
        assert_eq!(clean_caption(s).as_deref(), Some(s));
        let s = "Officials (left to right) at the summit meeting in Geneva.";
        assert_eq!(clean_caption(s).as_deref(), Some(s));
        let s = "A 50/50 split (as reported) dominated the evening coverage.";
        assert_eq!(clean_caption(s).as_deref(), Some(s));
    }

    #[test]
    fn collapses_whitespace() {
        assert_eq!(
            clean_caption("  Crowds   line\tthe avenue\nbefore the parade begins.  ").as_deref(),
            Some("Crowds line the avenue before the parade begins.")
        );
    }

    #[test]
    fn multibyte_length_counts_characters() {
        let s = "é".repeat(30);
        assert_eq!(clean_caption(&s).as_deref(), Some(s.as_str()));
        assert_eq!(clean_caption(&"é".repeat(29)), None);
    }
}
