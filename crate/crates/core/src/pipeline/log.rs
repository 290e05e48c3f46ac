use std::fmt::Display;
use std::io::Write;

/// Line-oriented `key=value` logging to stderr.
#[derive(Clone, Copy, Debug, Default)]
pub struct Logger {
    pub quiet: bool,
}

impl Logger {
    pub fn new(quiet: bool) -> Self {
        Self { quiet }
    }

    pub fn silent() -> Self {
        Self { quiet: true }
    }

    pub fn event(&self, event: &str, fields: &[(&str, &dyn Display)]) {
        if self.quiet {
            return;
        }
        let line = format_line(event, fields);
        let _ = writeln!(std::io::stderr().lock(), "{line}");
    }

    /// Always printed, even when quiet.
    pub fn error(&self, event: &str, fields: &[(&str, &dyn Display)]) {
        let line = format_line(event, fields);
        let _ = writeln!(std::io::stderr().lock(), "level=error {line}");
    }
}

fn quote(v: String) -> String {
    if v.is_empty() || v.contains(|c: char| c.is_whitespace() || c == '"' || c == '=') {
        format!("{v:?}")
    } else {
        v
    }
}

pub fn format_line(event: &str, fields: &[(&str, &dyn Display)]) -> String {
    let mut line = format!("event={}", quote(event.to_string()));
    for (k, v) in fields {
        line.push(' ');
        line.push_str(k);
        line.push('=');
        line.push_str(&quote(v.to_string()));
    }
    line
}
