//! Main-text extraction from HTML using a drop / unwrap / keep tag policy.

use std::collections::BTreeSet;

use scraper::{Html, Node};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Elements nested deeper than this are rejected.
pub const MAX_DEPTH: usize = 2048;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExtractError {
    #[error("invalid tag policy: {0}")]
    InvalidPolicy(String),
    #[error("element nesting exceeds {0} levels")]
    TooDeep(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TagPolicy {
    pub drop_subtree: BTreeSet<String>,
    pub unwrap: BTreeSet<String>,
    pub keep: BTreeSet<String>,
}

fn set(names: &[&str]) -> BTreeSet<String> {
    names.iter().map(|s| s.to_string()).collect()
}

impl Default for TagPolicy {
    fn default() -> Self {
        Self {
            drop_subtree: set(&[
                "comment", "meta", "header", "menu", "rss", "sponsor", "script", "style", "nav",
                "footer", "aside",
            ]),
            unwrap: set(&["font", "div", "p", "span", "b", "i", "em", "strong", "a"]),
            keep: set(&["main", "article", "blog"]),
        }
    }
}

impl TagPolicy {
    pub fn validate(&self) -> Result<(), ExtractError> {
        let mut problems = Vec::new();
        for (name, s) in [
            ("drop_subtree", &self.drop_subtree),
            ("unwrap", &self.unwrap),
            ("keep", &self.keep),
        ] {
            for tag in s {
                if tag.is_empty() || *tag != tag.to_ascii_lowercase() {
                    problems.push(format!("{name}: tag {tag:?} must be non-empty lowercase"));
                }
            }
        }
        for (a, sa, b, sb) in [
            ("drop_subtree", &self.drop_subtree, "unwrap", &self.unwrap),
            ("drop_subtree", &self.drop_subtree, "keep", &self.keep),
            ("unwrap", &self.unwrap, "keep", &self.keep),
        ] {
            for tag in sa.intersection(sb) {
                problems.push(format!("tag {tag:?} is in both {a} and {b}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ExtractError::InvalidPolicy(problems.join("; ")))
        }
    }
}

// Elements that do not separate words; everything else is padded with spaces.
const INLINE: [&str; 25] = [
    "a", "abbr", "b", "bdi", "bdo", "cite", "code", "data", "dfn", "em", "font", "i", "kbd",
    "mark", "q", "s", "samp", "small", "span", "strong", "sub", "sup", "time", "u", "var",
];

struct Collector<'p> {
    policy: &'p TagPolicy,
    body: String,
    keep: String,
    keep_found: bool,
}

impl Collector<'_> {
    fn walk(&mut self, node: ego_tree::NodeRef<'_, Node>, depth: usize, in_body: bool, in_keep: bool) -> Result<(), ExtractError> {
        if depth > MAX_DEPTH {
            return Err(ExtractError::TooDeep(MAX_DEPTH));
        }
        match node.value() {
            Node::Text(t) => self.push(t, in_body, in_keep),
            Node::Comment(c) => {
                if !self.policy.drop_subtree.contains("comment") {
                    self.push(c, in_body, in_keep);
                }
            }
            Node::Element(el) => {
                let name = el.name();
                if self.policy.drop_subtree.contains(name) {
                    return Ok(());
                }
                let is_keep = self.policy.keep.contains(name);
                if is_keep && !in_keep {
                    self.keep_found = true;
                    self.keep.push(' ');
                }
                let inline = INLINE.contains(&name);
                if !inline {
                    self.push(" ", in_body, in_keep);
                }
                let in_body = in_body || name == "body";
                for child in node.children() {
                    self.walk(child, depth + 1, in_body, in_keep || is_keep)?;
                }
                if !inline {
                    self.push(" ", in_body, in_keep);
                }
            }
            _ => {
                for child in node.children() {
                    self.walk(child, depth + 1, in_body, in_keep)?;
                }
            }
        }
        Ok(())
    }

    fn push(&mut self, text: &str, in_body: bool, in_keep: bool) {
        if in_body {
            self.body.push_str(text);
        }
        if in_keep {
            self.keep.push_str(text);
        }
    }
}

/// Collapses whitespace runs and breaks any `<` + letter sequence so no
/// markup-like text survives.
pub fn normalize_whitespace(text: &str) -> String {
    let joined = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut out = String::with_capacity(joined.len());
    let mut chars = joined.chars().peekable();
    while let Some(c) = chars.next() {
        out.push(c);
        if c == '<' && chars.peek().is_some_and(|n| n.is_alphabetic()) {
            out.push(' ');
        }
    }
    out
}

/// Extracts main text. If any keep-tag subtree survives the drops, only keep
/// subtrees contribute (in document order); otherwise the whole body does.
pub fn extract_main_text(html: &[u8], policy: &TagPolicy) -> Result<String, ExtractError> {
    policy.validate()?;
    if html.is_empty() {
        return Ok(String::new());
    }
    let source = String::from_utf8_lossy(html);
    let doc = Html::parse_document(&source);
    let mut c = Collector {
        policy,
        body: String::new(),
        keep: String::new(),
        keep_found: false,
    };
    c.walk(doc.tree.root(), 0, false, false)?;
    let raw = if c.keep_found { &c.keep } else { &c.body };
    Ok(normalize_whitespace(raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn run(html: &str) -> String {
        extract_main_text(html.as_bytes(), &TagPolicy::default()).unwrap()
    }

    #[test]
    fn keep_subtree_only() {
        assert_eq!(
            run("<header>nav links</header><article>Hello <b>world</b></article>"),
            "Hello world"
        );
    }

    #[test]
    fn fallback_to_body() {
        assert_eq!(run("<p>a</p><p>b</p>"), "a b");
    }

    #[test]
    fn drop_wins_inside_keep() {
        assert_eq!(run("<article><script>x=1</script></article>"), "");
    }

    #[test]
    fn keep_inside_dropped_is_dropped() {
        assert_eq!(
            run("<footer><article>gone</article></footer><div>body text</div>"),
            "body text"
        );
    }

    #[test]
    fn multiple_keeps_in_order_and_nested_once() {
        assert_eq!(
            run("<div>x</div><main>one <article>two</article></main><blog>three</blog>"),
            "one two three"
        );
    }

    #[test]
    fn title_and_comments_excluded() {
        assert_eq!(
            run("<html><head><title>T</title><meta name=a content=b></head><body><!-- hidden -->seen</body></html>"),
            "seen"
        );
    }

    #[test]
    fn empty_and_invalid_bytes() {
        assert_eq!(extract_main_text(b"", &TagPolicy::default()).unwrap(), "");
        assert_eq!(
            extract_main_text(b"<p>caf\xff</p>", &TagPolicy::default()).unwrap(),
            "caf\u{fffd}"
        );
    }

    #[test]
    fn escaped_markup_is_neutralized() {
        assert_eq!(run("<p>&lt;b&gt;bold&lt;/b&gt; 1&lt;2</p>"), "< b>bold</b> 1<2");
    }

    #[test]
    fn deep_nesting_errors() {
        let html = format!("{}x{}", "<span>".repeat(MAX_DEPTH + 10), "</span>".repeat(MAX_DEPTH + 10));
        assert_eq!(
            extract_main_text(html.as_bytes(), &TagPolicy::default()),
            Err(ExtractError::TooDeep(MAX_DEPTH))
        );
    }

    #[test]
    fn invalid_policy_rejected() {
        let mut p = TagPolicy::default();
        p.keep.insert("div".into());
        p.drop_subtree.insert("Nav".into());
        let err = p.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("\"div\" is in both unwrap and keep"), "{msg}");
        assert!(msg.contains("\"Nav\""), "{msg}");
    }

    #[test]
    fn dropping_a_keep_ancestor_can_lengthen_output() {
        // Rule (c) fallback: once no keep subtree survives, the remaining body
        // is emitted, which may be longer than the former keep text.
        let html = "<section><article>x</article></section><div>much longer text</div>";
        let mut p = TagPolicy::default();
        assert_eq!(extract_main_text(html.as_bytes(), &p).unwrap(), "x");
        p.drop_subtree.insert("section".into());
        assert_eq!(extract_main_text(html.as_bytes(), &p).unwrap(), "much longer text");
    }

    fn arb_html(tags: &'static [&'static str]) -> impl Strategy<Value = String> {
        let leaf = "[a-z <]{0,8}".prop_map(|s| s.replace('<', "&lt;"));
        leaf.prop_recursive(4, 32, 4, move |inner| {
            (proptest::sample::select(tags), proptest::collection::vec(inner, 0..4))
                .prop_map(|(t, kids)| format!("<{t}>{}</{t}>", kids.concat()))
        })
    }

    const NO_KEEP: &[&str] = &["div", "p", "span", "section", "header", "b", "nav", "x-widget"];
    const WITH_KEEP: &[&str] = &["div", "p", "span", "section", "b", "nav"];

    proptest! {
        #[test]
        fn extra_drop_never_lengthens_without_keep(html in arb_html(NO_KEEP), extra in proptest::sample::select(vec!["section", "x-widget"])) {
            let base = TagPolicy::default();
            let mut more = base.clone();
            more.drop_subtree.insert(extra.to_string());
            let a = extract_main_text(html.as_bytes(), &base).unwrap();
            let b = extract_main_text(html.as_bytes(), &more).unwrap();
            prop_assert!(b.len() <= a.len());
        }

        #[test]
        fn extra_drop_never_lengthens_when_keep_survives(inner in arb_html(WITH_KEEP), outside in arb_html(WITH_KEEP)) {
            // The article sits at top level, so dropping "section" never removes it.
            let html = format!("{outside}<article>kept {inner}</article>");
            let base = TagPolicy::default();
            let mut more = base.clone();
            more.drop_subtree.insert("section".into());
            let a = extract_main_text(html.as_bytes(), &base).unwrap();
            let b = extract_main_text(html.as_bytes(), &more).unwrap();
            prop_assert!(b.len() <= a.len());
        }

        #[test]
        fn no_residual_markup(html in arb_html(NO_KEEP), raw in "[<a-z> /]{0,30}") {
            for doc in [html, raw] {
                let out = extract_main_text(doc.as_bytes(), &TagPolicy::default()).unwrap();
                let chars: Vec<char> = out.chars().collect();
                prop_assert!(!chars.windows(2).any(|w| w[0] == '<' && w[1].is_alphabetic()), "{out:?}");
            }
        }
    }
}
