//! Cross-checks between the markdown docs and the sources.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn doc_files() -> Vec<PathBuf> {
    let mut out = vec![root().join("README.md")];
    for e in std::fs::read_dir(root().join("docs")).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "md") {
            out.push(p);
        }
    }
    out
}

/// GitHub-style heading anchor.
fn slug(heading: &str) -> String {
    heading
        .trim()
        .to_lowercase()
        .chars()
        .filter_map(|c| match c {
            ' ' => Some('-'),
            c if c.is_alphanumeric() || c == '-' || c == '_' => Some(c),
            _ => None,
        })
        .collect()
}

fn anchors(text: &str) -> HashSet<String> {
    let mut fenced = false;
    let mut out = HashSet::new();
    for line in text.lines() {
        if line.starts_with("```") {
            fenced = !fenced;
        } else if !fenced && line.starts_with('#') {
            out.insert(slug(line.trim_start_matches('#')));
        }
    }
    out
}

/// Targets of `](target)` links outside code fences.
fn links(text: &str) -> Vec<String> {
    let mut fenced = false;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.starts_with("```") {
            fenced = !fenced;
            continue;
        }
        if fenced {
            continue;
        }
        let mut rest = line;
        while let Some(i) = rest.find("](") {
            rest = &rest[i + 2..];
            if let Some(j) = rest.find(')') {
                out.push(rest[..j].to_string());
                rest = &rest[j..];
            }
        }
    }
    out
}

#[test]
fn relative_links_and_anchors_resolve() {
    let mut bad = Vec::new();
    for file in doc_files() {
        let text = std::fs::read_to_string(&file).unwrap();
        for link in links(&text) {
            if link.starts_with("http://") || link.starts_with("https://") {
                continue;
            }
            let (path, anchor) = link.split_once('#').unwrap_or((&link, ""));
            let target = if path.is_empty() { file.clone() } else { file.parent().unwrap().join(path) };
            if !target.exists() {
                bad.push(format!("{}: missing {link}", file.display()));
                continue;
            }
            if !anchor.is_empty() && !anchors(&std::fs::read_to_string(&target).unwrap()).contains(anchor) {
                bad.push(format!("{}: no anchor {link}", file.display()));
            }
        }
    }
    assert!(bad.is_empty(), "{bad:#?}");
}

fn sources() -> String {
    fn walk(dir: &Path, out: &mut String) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, out);
            } else if p.extension().is_some_and(|x| x == "rs") {
                out.push_str(&std::fs::read_to_string(&p).unwrap());
            }
        }
    }
    let mut s = String::new();
    walk(&root().join("crates"), &mut s);
    s
}

#[test]
fn equation_entries_name_real_items() {
    let src = sources();
    let text = std::fs::read_to_string(root().join("docs/EQUATIONS.md")).unwrap();
    let mut missing = Vec::new();
    for line in text.lines().filter(|l| l.starts_with("- Code:") || l.starts_with("- Tests:")) {
        for name in line.split('`').skip(1).step_by(2) {
            if name.ends_with(".rs") {
                continue;
            }
            let item = name.rsplit("::").next().unwrap();
            let found = ["fn", "struct", "enum", "const"]
                .iter()
                .any(|kw| src.contains(&format!("{kw} {item}(")) || src.contains(&format!("{kw} {item} ")) || src.contains(&format!("{kw} {item}<")) || src.contains(&format!("{kw} {item}:")));
            if !found {
                missing.push(name.to_string());
            }
        }
    }
    assert!(missing.is_empty(), "unknown items: {missing:?}");
}

#[test]
fn docs_avoid_em_dashes() {
    for file in doc_files() {
        assert!(!std::fs::read_to_string(&file).unwrap().contains('\u{2014}'), "{}", file.display());
    }
}
