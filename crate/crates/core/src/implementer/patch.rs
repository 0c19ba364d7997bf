//! Strict unified-diff parsing and application.
//!
//! Hunks must match at their stated line numbers with exact context; there is
//! no fuzz and no offset search. A patch applies to all of its files or to
//! none of them.

use std::fmt::Write as _;

use thiserror::Error;

use super::tree::FileTree;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HunkLine {
    Context(String),
    Remove(String),
    Add(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hunk {
    pub header: String,
    pub old_start: usize,
    pub old_len: usize,
    pub new_start: usize,
    pub new_len: usize,
    pub lines: Vec<HunkLine>,
    /// `\ No newline at end of file` followed the last old-side line.
    pub old_missing_newline: bool,
    pub new_missing_newline: bool,
}

impl Hunk {
    fn old_lines(&self) -> impl Iterator<Item = &str> {
        self.lines.iter().filter_map(|l| match l {
            HunkLine::Context(s) | HunkLine::Remove(s) => Some(s.as_str()),
            HunkLine::Add(_) => None,
        })
    }

    fn new_lines(&self) -> impl Iterator<Item = &str> {
        self.lines.iter().filter_map(|l| match l {
            HunkLine::Context(s) | HunkLine::Add(s) => Some(s.as_str()),
            HunkLine::Remove(_) => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilePatch {
    /// `None` for `/dev/null` (file creation).
    pub old_path: Option<String>,
    /// `None` for `/dev/null` (file deletion).
    pub new_path: Option<String>,
    pub hunks: Vec<Hunk>,
}

impl FilePatch {
    pub fn display_path(&self) -> &str {
        self.new_path
            .as_deref()
            .or(self.old_path.as_deref())
            .unwrap_or("/dev/null")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Patch {
    pub files: Vec<FilePatch>,
}

impl Patch {
    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Every path named by a file header, old and new side.
    pub fn touched_paths(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .files
            .iter()
            .flat_map(|f| [f.old_path.as_deref(), f.new_path.as_deref()])
            .flatten()
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("no file headers (`--- `/`+++ `) found in diff text")]
    NoFileHeaders,
}

fn malformed(line: usize, message: impl Into<String>) -> ParseError {
    ParseError::Malformed {
        line: line + 1,
        message: message.into(),
    }
}

fn header_path(raw: &str) -> Option<String> {
    let raw = raw.split('\t').next().unwrap_or(raw).trim_end();
    if raw == "/dev/null" {
        return None;
    }
    let stripped = raw
        .strip_prefix("a/")
        .or_else(|| raw.strip_prefix("b/"))
        .unwrap_or(raw);
    Some(stripped.to_string())
}

fn parse_range(s: &str) -> Option<(usize, usize)> {
    match s.split_once(',') {
        Some((start, len)) => Some((start.parse().ok()?, len.parse().ok()?)),
        None => Some((s.parse().ok()?, 1)),
    }
}

fn parse_hunk_header(line: &str) -> Option<(usize, usize, usize, usize)> {
    let rest = line.strip_prefix("@@ -")?;
    let (ranges, _) = rest.split_once(" @@")?;
    let (old, new) = ranges.split_once(" +")?;
    let (os, ol) = parse_range(old)?;
    let (ns, nl) = parse_range(new)?;
    Some((os, ol, ns, nl))
}

/// Parses unified-diff text. Blank text is an empty patch; prose outside
/// file sections is ignored.
pub fn parse_patch(text: &str) -> Result<Patch, ParseError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut files = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        if let Some(old) = line.strip_prefix("--- ") {
            let new = lines
                .get(i + 1)
                .and_then(|l| l.strip_prefix("+++ "))
                .ok_or_else(|| malformed(i, "`--- ` header not followed by `+++ `"))?;
            let mut file = FilePatch {
                old_path: header_path(old),
                new_path: header_path(new),
                hunks: Vec::new(),
            };
            if file.old_path.is_none() && file.new_path.is_none() {
                return Err(malformed(i, "both sides are /dev/null"));
            }
            i += 2;
            while i < lines.len() && lines[i].starts_with("@@") {
                let (hunk, next) = parse_hunk(&lines, i)?;
                file.hunks.push(hunk);
                i = next;
            }
            if file.hunks.is_empty() {
                return Err(malformed(i.saturating_sub(1), format!("file {} has no hunks", file.display_path())));
            }
            files.push(file);
            continue;
        }
        if line.starts_with("@@") {
            return Err(malformed(i, "hunk header outside a file section"));
        }
        i += 1;
    }
    if files.is_empty() && !text.trim().is_empty() {
        return Err(ParseError::NoFileHeaders);
    }
    Ok(Patch { files })
}

fn parse_hunk(lines: &[&str], start: usize) -> Result<(Hunk, usize), ParseError> {
    let header = lines[start];
    let (old_start, old_len, new_start, new_len) =
        parse_hunk_header(header).ok_or_else(|| malformed(start, format!("bad hunk header `{header}`")))?;
    let mut hunk = Hunk {
        header: header.to_string(),
        old_start,
        old_len,
        new_start,
        new_len,
        lines: Vec::new(),
        old_missing_newline: false,
        new_missing_newline: false,
    };
    let (mut old_seen, mut new_seen) = (0usize, 0usize);
    let mut i = start + 1;
    while old_seen < old_len || new_seen < new_len {
        let Some(&line) = lines.get(i) else {
            return Err(malformed(i.saturating_sub(1), format!("hunk `{header}` is truncated")));
        };
        let (tag, body) = match line.chars().next() {
            Some(c @ (' ' | '-' | '+')) => (c, &line[1..]),
            // bare empty line: an empty context line whose leading space was lost
            None => (' ', ""),
            Some('\\') => {
                mark_missing_newline(&mut hunk);
                i += 1;
                continue;
            }
            Some(_) => {
                return Err(malformed(i, format!("unexpected line in hunk `{header}`: `{line}`")));
            }
        };
        match tag {
            ' ' => {
                old_seen += 1;
                new_seen += 1;
                hunk.lines.push(HunkLine::Context(body.to_string()));
            }
            '-' => {
                old_seen += 1;
                hunk.lines.push(HunkLine::Remove(body.to_string()));
            }
            _ => {
                new_seen += 1;
                hunk.lines.push(HunkLine::Add(body.to_string()));
            }
        }
        if old_seen > old_len || new_seen > new_len {
            return Err(malformed(i, format!("hunk `{header}` body does not match its line counts")));
        }
        i += 1;
    }
    while let Some(l) = lines.get(i) {
        if l.starts_with('\\') {
            mark_missing_newline(&mut hunk);
            i += 1;
        } else {
            break;
        }
    }
    Ok((hunk, i))
}

fn mark_missing_newline(hunk: &mut Hunk) {
    match hunk.lines.last() {
        Some(HunkLine::Remove(_)) => hunk.old_missing_newline = true,
        Some(HunkLine::Add(_)) => hunk.new_missing_newline = true,
        Some(HunkLine::Context(_)) => {
            hunk.old_missing_newline = true;
            hunk.new_missing_newline = true;
        }
        None => {}
    }
}

/// Result of applying a diff to a tree.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchOutcome {
    pub applied: bool,
    pub patch_log: String,
    pub patched_tree: Option<FileTree>,
}

impl PatchOutcome {
    fn rejected(log: String) -> Self {
        debug_assert!(!log.is_empty());
        Self {
            applied: false,
            patch_log: log,
            patched_tree: None,
        }
    }
}

struct TextFile {
    lines: Vec<String>,
    trailing_newline: bool,
}

impl TextFile {
    fn parse(text: &str) -> Self {
        Self {
            lines: text.lines().map(str::to_string).collect(),
            trailing_newline: text.is_empty() || text.ends_with('\n'),
        }
    }

    fn render(&self) -> String {
        let mut out = self.lines.join("\n");
        if self.trailing_newline && !self.lines.is_empty() {
            out.push('\n');
        }
        out
    }
}

fn hunk_label(idx: usize, path: &str, hunk: &Hunk) -> String {
    format!("hunk #{} of {} ({})", idx + 1, path, hunk.header.trim_end())
}

fn apply_hunks(path: &str, original: &str, hunks: &[Hunk], log: &mut String) -> Result<String, String> {
    let file = TextFile::parse(original);
    let mut out: Vec<String> = Vec::with_capacity(file.lines.len());
    let mut trailing_newline = file.trailing_newline;
    let mut cursor = 0usize;
    for (idx, hunk) in hunks.iter().enumerate() {
        let label = hunk_label(idx, path, hunk);
        // a zero-length old range names the line after which to insert
        let pos = if hunk.old_len == 0 { hunk.old_start } else { hunk.old_start.saturating_sub(1) };
        if hunk.old_len > 0 && hunk.old_start == 0 {
            return Err(format!("{label} FAILED: old range starts at line 0"));
        }
        if pos < cursor {
            return Err(format!("{label} FAILED: overlaps or precedes the previous hunk"));
        }
        if pos + hunk.old_len > file.lines.len() {
            return Err(format!(
                "{label} FAILED: old range ends at line {} but file has {} lines",
                pos + hunk.old_len,
                file.lines.len()
            ));
        }
        for (k, expected) in hunk.old_lines().enumerate() {
            let found = &file.lines[pos + k];
            if found != expected {
                return Err(format!(
                    "{label} FAILED: context mismatch at line {}: expected {:?}, found {:?}",
                    pos + k + 1,
                    expected,
                    found
                ));
            }
        }
        let touches_end = pos + hunk.old_len == file.lines.len();
        if touches_end && hunk.old_len > 0 && hunk.old_missing_newline == file.trailing_newline {
            return Err(format!("{label} FAILED: end-of-file newline marker does not match the file"));
        }
        out.extend(file.lines[cursor..pos].iter().cloned());
        out.extend(hunk.new_lines().map(str::to_string));
        cursor = pos + hunk.old_len;
        if touches_end {
            trailing_newline = !hunk.new_missing_newline;
        }
        let _ = writeln!(log, "{label} succeeded");
    }
    out.extend(file.lines[cursor..].iter().cloned());
    Ok(TextFile {
        lines: out,
        trailing_newline,
    }
    .render())
}

/// Applies `diff` to a copy of `baseline`. Failures are reported in the
/// outcome's log, never as errors.
pub fn apply_patch(baseline: &FileTree, diff: &str) -> PatchOutcome {
    let patch = match parse_patch(diff) {
        Ok(p) => p,
        Err(e) => return PatchOutcome::rejected(format!("diff does not parse: {e}\n")),
    };
    apply_parsed(baseline, &patch)
}

pub fn apply_parsed(baseline: &FileTree, patch: &Patch) -> PatchOutcome {
    let mut tree = baseline.clone();
    let mut log = String::new();
    for file in &patch.files {
        let path = file.display_path().to_string();
        let _ = writeln!(log, "patching file {path}");
        let result = match (&file.old_path, &file.new_path) {
            (None, Some(new)) => {
                if tree.get(new).is_some() {
                    Err(format!("cannot create {new}: file already exists"))
                } else {
                    apply_hunks(new, "", &file.hunks, &mut log).map(|text| {
                        tree.insert(new.clone(), text);
                    })
                }
            }
            (Some(old), new) => match tree.get(old).map(str::to_string) {
                None => Err(format!("cannot patch {old}: no such file in baseline")),
                Some(text) => apply_hunks(old, &text, &file.hunks, &mut log).and_then(|patched| {
                    match new {
                        None if !patched.is_empty() => {
                            Err(format!("cannot delete {old}: diff does not remove all of its content"))
                        }
                        None => {
                            tree.remove(old);
                            Ok(())
                        }
                        Some(new) => {
                            if new != old {
                                if tree.get(new).is_some() {
                                    return Err(format!("cannot rename {old} to {new}: target exists"));
                                }
                                tree.remove(old);
                            }
                            tree.insert(new.clone(), patched);
                            Ok(())
                        }
                    }
                }),
            },
            (None, None) => unreachable!("rejected by the parser"),
        };
        if let Err(msg) = result {
            let _ = writeln!(log, "{msg}");
            let _ = writeln!(log, "patch rejected; no files were changed");
            return PatchOutcome::rejected(log);
        }
    }
    if patch.is_empty() {
        log.push_str("empty diff; tree unchanged\n");
    }
    PatchOutcome {
        applied: true,
        patch_log: log,
        patched_tree: Some(tree),
    }
}
