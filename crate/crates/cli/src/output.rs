use std::io::Write;

use crate::args::Format;

/// Prints records either as a human line or as tab-separated `key=value`
/// fields. Values are flattened so each record stays on one line.
pub struct Out {
    format: Format,
}

impl Out {
    pub fn new(format: Format) -> Self {
        Self { format }
    }

    pub fn record(&self, text: impl AsRef<str>, fields: &[(&str, String)]) {
        let line = match self.format {
            Format::Text => text.as_ref().to_string(),
            Format::Structured => fields
                .iter()
                .map(|(k, v)| format!("{k}={}", flatten(v)))
                .collect::<Vec<_>>()
                .join("\t"),
        };
        let mut stdout = std::io::stdout().lock();
        let _ = writeln!(stdout, "{line}");
        let _ = stdout.flush();
    }

    /// Multi-line text shown only in text mode (certificates, audit logs).
    pub fn block(&self, text: &str) {
        if self.format == Format::Text {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
        }
    }
}

fn flatten(v: &str) -> String {
    v.replace('\\', "\\\\")
        .replace('\t', "\\t")
        .replace('\n', "\\n")
}

pub fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
