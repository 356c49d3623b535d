//! Removal of viewpoint, orientation and distance phrases from prompts that
//! will be paired with an edge map.

use serde::{Deserialize, Serialize};

const DIRECTION_WORDS: [&str; 3] = ["front", "rear", "side"];
const DIRECTION_QUALIFIERS: [&str; 3] = ["view", "profile", "perspective"];

/// Lowercase phrases, single-spaced, unique.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometryLexicon {
    phrases: Vec<String>,
}

fn normalize_phrase(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

// Word tokens for matching: hyphens and punctuation separate words.
fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Default for GeometryLexicon {
    fn default() -> Self {
        Self::parse(include_str!("../../templates/geometry_lexicon.txt"))
    }
}

impl GeometryLexicon {
    /// Normalizes and de-duplicates; empty entries are dropped.
    pub fn new<I, S>(phrases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out: Vec<String> = Vec::new();
        for p in phrases {
            let p = normalize_phrase(p.as_ref());
            if !p.is_empty() && !out.contains(&p) {
                out.push(p);
            }
        }
        Self { phrases: out }
    }

    /// Newline-delimited phrases; `#` starts a comment line.
    pub fn parse(text: &str) -> Self {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    /// First lexicon phrase found in `text`, matched case-insensitively on
    /// whole words. Bare `front`/`rear`/`side` only count when the next word
    /// is `view`, `profile` or `perspective`.
    pub fn find_match(&self, text: &str) -> Option<&str> {
        let tokens = words(text);
        self.phrases
            .iter()
            .find(|phrase| {
                let needle = words(phrase);
                if needle.is_empty() || needle.len() > tokens.len() {
                    return false;
                }
                let qualified = needle.len() == 1 && DIRECTION_WORDS.contains(&needle[0].as_str());
                (0..=tokens.len() - needle.len()).any(|i| {
                    tokens[i..i + needle.len()] == needle[..]
                        && (!qualified
                            || tokens
                                .get(i + 1)
                                .is_some_and(|next| DIRECTION_QUALIFIERS.contains(&next.as_str())))
                })
            })
            .map(String::as_str)
    }

    pub fn matches(&self, text: &str) -> bool {
        self.find_match(text).is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StripOutcome {
    pub text: String,
    pub removed_clauses: Vec<String>,
    /// Every clause matched; the caller decides what to do with the prompt.
    pub empty_output: bool,
}

struct Segment<'a> {
    text: &'a str,
    delimiter: Option<char>,
}

fn segments(prompt: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in prompt.char_indices() {
        if c == ',' || c == '.' {
            out.push(Segment {
                text: &prompt[start..i],
                delimiter: Some(c),
            });
            start = i + c.len_utf8();
        }
    }
    out.push(Segment {
        text: &prompt[start..],
        delimiter: None,
    });
    out
}

// Delimiters between two surviving clauses. Untouched boundaries keep their
// delimiter; across removed clauses commas vanish and a period survives.
fn join_delimiter(run: &[char], removed_between: bool) -> Option<char> {
    if removed_between {
        run.contains(&'.').then_some('.')
    } else {
        run.first().copied()
    }
}

fn tidy(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if c == ' ' && out.ends_with(' ') {
            continue;
        }
        if (c == ',' || c == '.') && out.ends_with(' ') {
            out.pop();
        }
        out.push(c);
    }
    out.trim().to_string()
}

fn strip_once(prompt: &str, lexicon: &GeometryLexicon, removed: &mut Vec<String>) -> String {
    let mut out = String::with_capacity(prompt.len());
    let mut run: Vec<char> = Vec::new();
    let mut removed_between = false;
    let mut any_kept = false;

    for seg in segments(prompt) {
        if lexicon.matches(seg.text) {
            removed.push(seg.text.trim().to_string());
            removed_between = true;
        } else {
            if any_kept {
                match join_delimiter(&run, removed_between) {
                    Some(d) => out.push(d),
                    // Keep the words apart; tidy() collapses doubles.
                    None => out.push(' '),
                }
            }
            out.push_str(seg.text);
            any_kept = true;
            run.clear();
            removed_between = false;
        }
        run.extend(seg.delimiter);
    }
    if any_kept {
        if let Some(d) = join_delimiter(&run, removed_between) {
            out.push(d);
        }
    }
    tidy(&out)
}

/// Drops every comma- or period-delimited clause that contains a lexicon
/// phrase. A prompt without matches is returned unchanged.
pub fn strip_geometry(prompt: &str, lexicon: &GeometryLexicon) -> StripOutcome {
    let mut removed = Vec::new();
    let mut text = prompt.to_string();
    // Removing a clause can join two survivors into a new match.
    while segments(&text).iter().any(|s| lexicon.matches(s.text)) {
        text = strip_once(&text, lexicon, &mut removed);
    }
    let empty_output = text.chars().all(|c| c.is_whitespace() || c == '.' || c == ',');
    if empty_output {
        text.clear();
    }
    StripOutcome {
        text,
        removed_clauses: removed,
        empty_output,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn drops_viewpoint_clause() {
        let out = strip_geometry(
            "A Boxer IFV, shown in a front three-quarter view, crosses mud.",
            &GeometryLexicon::default(),
        );
        assert_eq!(out.text, "A Boxer IFV crosses mud.");
        assert_eq!(out.removed_clauses, vec!["shown in a front three-quarter view"]);
        assert!(!out.empty_output);
    }

    #[test]
    fn untouched_prompt_is_returned_verbatim() {
        let p = "A T90  rolls through snow,   dust rising. Front armor plate glints.";
        let out = strip_geometry(p, &GeometryLexicon::default());
        assert_eq!(out.text, p);
        assert!(out.removed_clauses.is_empty());
    }

    #[test]
    fn total_match_warns() {
        let out = strip_geometry("Rear profile of a T90.", &GeometryLexicon::new(["rear profile"]));
        assert!(out.empty_output);
        assert_eq!(out.text, "");
    }

    #[test]
    fn period_survives_removed_sentence() {
        let lex = GeometryLexicon::default();
        assert_eq!(
            strip_geometry("A tank drives. Seen in rear view. Dust rises.", &lex).text,
            "A tank drives. Dust rises."
        );
        assert_eq!(
            strip_geometry("Aerial perspective of a convoy. A Scania leads it.", &lex).text,
            "A Scania leads it."
        );
        assert_eq!(
            strip_geometry("A Leopard waits, captured as an extreme close-up.", &lex).text,
            "A Leopard waits."
        );
    }

    #[test]
    fn joined_clauses_keep_a_space() {
        let lex = GeometryLexicon::default();
        assert_eq!(strip_geometry("A truck in snow,  rear view ,wet roads", &lex).text, "A truck in snow wet roads");
    }

    #[test]
    fn bare_directions_need_qualifier() {
        let lex = GeometryLexicon::default();
        assert!(!lex.matches("the front armor plate"));
        assert!(!lex.matches("parked roadside"));
        assert!(!lex.matches("seen from the side"));
        assert_eq!(lex.find_match("a clean side view"), Some("side"));
        assert_eq!(lex.find_match("Rear Perspective"), Some("rear"));
        assert_eq!(lex.find_match("shot at ground level"), Some("ground-level"));
        assert_eq!(lex.find_match("a Front Three Quarter angle"), Some("front three-quarter"));
    }

    #[test]
    fn joined_survivors_are_rechecked() {
        let lex = GeometryLexicon::default();
        let out = strip_geometry("A tank seen from the front, in an aerial perspective, view of the hull.", &lex);
        assert!(!segments(&out.text).iter().any(|s| lex.matches(s.text)));
        assert_eq!(strip_geometry(&out.text, &lex), StripOutcome { text: out.text.clone(), removed_clauses: vec![], empty_output: out.empty_output });
    }

    #[test]
    fn lexicon_normalizes() {
        let lex = GeometryLexicon::parse("# c\n  Side   Profile \nside profile\n\nclose-up\n");
        assert_eq!(lex.phrases(), &["side profile".to_string(), "close-up".to_string()]);
    }

    fn phrase_strategy() -> impl Strategy<Value = String> {
        let lex = GeometryLexicon::default();
        let mut pool: Vec<String> = lex.phrases().to_vec();
        pool.extend(["front view", "rear view", "side view", "front armor", "side skirts"].map(String::from));
        pool.extend(
            ["a Boxer", "mud", "dust", "the hull", "sunlight", "camouflage", "rain", "tracks"].map(String::from),
        );
        prop::sample::select(pool)
    }

    proptest! {
        #[test]
        fn strip_is_idempotent_and_clean(
            parts in prop::collection::vec((phrase_strategy(), phrase_strategy(), prop::sample::select(vec![", ", ". ", " ", " and "])), 1..8)
        ) {
            let lex = GeometryLexicon::default();
            let prompt: String = parts.iter().map(|(a, b, d)| format!("{a} {b}{d}")).collect();
            let once = strip_geometry(&prompt, &lex);
            for s in segments(&once.text) {
                prop_assert!(!lex.matches(s.text), "clause {:?} still matches", s.text);
            }
            let twice = strip_geometry(&once.text, &lex);
            prop_assert_eq!(&twice.text, &once.text);
        }
    }
}
