//! Small helpers for reading and writing the XML interchange formats.

use roxmltree::Node;

pub fn escape_attr(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

/// Slash-separated element path used in schema error reports, e.g.
/// `/policies/policy[2]/ratelimit/@threshold`.
pub fn node_path(node: Node<'_, '_>) -> String {
    let mut parts = Vec::new();
    let mut cur = Some(node);
    while let Some(n) = cur {
        if n.is_element() {
            let name = n.tag_name().name();
            let idx = n
                .prev_siblings()
            .skip(1)
                .filter(|s| s.is_element() && s.tag_name().name() == name)
                .count();
            let total = n
                .parent()
                .map(|p| p.children().filter(|s| s.is_element() && s.tag_name().name() == name).count())
                .unwrap_or(1);
            if total > 1 {
                parts.push(format!("{name}[{}]", idx + 1));
            } else {
                parts.push(name.to_string());
            }
        }
        cur = n.parent();
    }
    parts.reverse();
    // the synthetic wrapper used for sibling roots is not part of the user's document
    if parts.first().map(|s| s.as_str()) == Some(crate::xml::WRAPPER) {
        parts.remove(0);
    }
    format!("/{}", parts.join("/"))
}

pub const WRAPPER: &str = "cssa-document";

/// Wraps a fragment that may hold several top-level elements into one document.
pub fn wrap_fragment(text: &str) -> String {
    let body = strip_declaration(text);
    format!("<{WRAPPER}>{body}</{WRAPPER}>")
}

fn strip_declaration(text: &str) -> &str {
    let t = text.trim_start_matches('\u{feff}').trim_start();
    if let Some(rest) = t.strip_prefix("<?xml") {
        if let Some(end) = rest.find("?>") {
            return &rest[end + 2..];
        }
    }
    t
}
