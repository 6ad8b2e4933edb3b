//! Just enough CSS to pick a verifiable probe rule out of a style sheet and
//! to check later that a fetched sheet still carries it.

use crate::domain::StyleProbe;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CssRule {
    pub selector: String,
    pub declarations: Vec<(String, String)>,
}

fn strip_comments(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("/*") {
        out.push_str(&rest[..start]);
        match rest[start + 2..].find("*/") {
            Some(end) => rest = &rest[start + 2 + end + 2..],
            None => return out,
        }
    }
    out.push_str(rest);
    out
}

/// Index one past the `}` closing the block opened at `open`, honoring nesting.
fn block_end(text: &str, open: usize) -> Option<usize> {
    let mut depth = 0usize;
    for (i, c) in text[open..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(open + i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Top-level style rules in source order. At-rules (and anything nested in
/// them) are skipped; an unterminated block ends parsing.
pub fn parse_rules(text: &str) -> Vec<CssRule> {
    let text = strip_comments(text);
    let mut rules = Vec::new();
    let mut pos = 0;
    while let Some(rel) = text[pos..].find('{') {
        let open = pos + rel;
        let Some(end) = block_end(&text, open) else {
            break;
        };
        let prelude = text[pos..open].trim();
        // A statement at-rule like `@import x;` may precede the next block.
        let selector = prelude.rsplit(';').next().unwrap_or("").trim();
        if !selector.is_empty() && !selector.starts_with('@') {
            let body = &text[open + 1..end - 1];
            let declarations = body
                .split(';')
                .filter_map(|decl| {
                    let (prop, value) = decl.split_once(':')?;
                    let prop = prop.trim().to_ascii_lowercase();
                    let value = value.trim();
                    (!prop.is_empty() && !value.is_empty()).then(|| (prop, value.to_string()))
                })
                .collect();
            rules.push(CssRule {
                selector: selector.to_string(),
                declarations,
            });
        }
        pos = end;
    }
    rules
}

fn is_simple_selector(sel: &str) -> bool {
    let ident = |s: &str| !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    let mut parts = sel.split(['.', '#']);
    let head = parts.next().unwrap_or_default();
    let head_ok = head.is_empty() || (ident(head) && head.starts_with(|c: char| c.is_ascii_alphabetic()));
    head_ok && parts.all(ident) && !sel.is_empty()
}

fn literal_value(property: &str, value: &str) -> Option<String> {
    let v = value.trim().to_ascii_lowercase();
    if v.contains("!important") || v.contains("var(") || v.contains("calc(") {
        return None;
    }
    if matches!(v.as_str(), "inherit" | "initial" | "unset" | "revert" | "currentcolor") {
        return None;
    }
    let ok = match property {
        "display" => v.chars().all(|c| c.is_ascii_alphabetic() || c == '-'),
        "color" => {
            v.chars().all(|c| c.is_ascii_alphabetic())
                || (v.starts_with('#')
                    && matches!(v.len(), 4 | 5 | 7 | 9)
                    && v[1..].chars().all(|c| c.is_ascii_hexdigit()))
                || ["rgb(", "rgba(", "hsl(", "hsla("]
                    .iter()
                    .any(|f| v.starts_with(f) && v.ends_with(')'))
        }
        _ => false,
    };
    ok.then_some(v)
}

/// First rule with a simple selector and a literal `color` or `display`
/// declaration, as a probe the client can verify through computed style.
pub fn extract_probe(text: &str) -> Option<StyleProbe> {
    parse_rules(text).into_iter().find_map(|rule| {
        let selector = rule.selector.split(',').next()?.trim().to_string();
        if !is_simple_selector(&selector) {
            return None;
        }
        rule.declarations.iter().find_map(|(prop, value)| {
            if prop != "color" && prop != "display" {
                return None;
            }
            literal_value(prop, value).map(|expected_value| StyleProbe {
                selector: selector.clone(),
                property: prop.clone(),
                expected_value,
            })
        })
    })
}

/// Whether a sheet would apply `probe`: some rule lists the probe selector
/// and the last matching declaration carries the expected value.
pub fn applies_probe(text: &str, probe: &StyleProbe) -> bool {
    let mut applied = None;
    for rule in parse_rules(text) {
        if !rule.selector.split(',').any(|s| s.trim() == probe.selector) {
            continue;
        }
        for (prop, value) in &rule.declarations {
            if *prop == probe.property {
                applied = Some(value.trim().to_ascii_lowercase());
            }
        }
    }
    applied.as_deref() == Some(probe.expected_value.as_str())
}
