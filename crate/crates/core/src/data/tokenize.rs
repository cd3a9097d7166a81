use std::path::Path;

use crate::error::{Error, Result};

/// Backslash commands matched greedily by the lexicon tokenizer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon {
    /// Sorted and deduplicated.
    commands: Vec<String>,
}

pub const DEFAULT_LEXICON: &[&str] = &[
    "\\alpha", "\\beta", "\\cdot", "\\delta", "\\frac", "\\gamma", "\\infty", "\\int", "\\lambda",
    "\\left", "\\mathrm", "\\mu", "\\omega", "\\partial", "\\pi", "\\psi", "\\right", "\\sigma",
    "\\sqrt", "\\sum", "\\theta", "\\times",
];

impl Lexicon {
    pub fn new<S: Into<String>>(commands: impl IntoIterator<Item = S>) -> Result<Lexicon> {
        let mut commands: Vec<String> = commands.into_iter().map(Into::into).collect();
        for c in &commands {
            if c.len() < 2 || !c.starts_with('\\') || c.chars().any(char::is_whitespace) {
                return Err(Error::Invalid(format!("lexicon entry {c:?} is not a backslash command")));
            }
        }
        commands.sort();
        commands.dedup();
        Ok(Lexicon { commands })
    }

    pub fn default_commands() -> Lexicon {
        Lexicon::new(DEFAULT_LEXICON.iter().copied()).expect("built-in lexicon is valid")
    }

    /// One command per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Lexicon> {
        Lexicon::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn load(path: &Path) -> Result<Lexicon> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Lexicon::parse(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn commands(&self) -> &[String] {
        &self.commands
    }

    fn longest_match(&self, rest: &str) -> Option<&str> {
        self.commands
            .iter()
            .filter(|c| rest.starts_with(c.as_str()))
            .max_by_key(|c| c.len())
            .map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TokenizerMode {
    Chars,
    Lexicon(Lexicon),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Tokenized {
    pub tokens: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn tokenize(latex: &str, mode: &TokenizerMode) -> Tokenized {
    let mut out = Tokenized::default();
    match mode {
        TokenizerMode::Chars => {
            out.tokens = latex
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect();
        }
        TokenizerMode::Lexicon(lex) => {
            let mut i = 0;
            while i < latex.len() {
                let rest = &latex[i..];
                let ch = rest.chars().next().expect("non-empty remainder");
                if ch.is_whitespace() {
                    i += ch.len_utf8();
                    continue;
                }
                if ch == '\\' {
                    if let Some(cmd) = lex.longest_match(rest) {
                        out.tokens.push(cmd.to_string());
                        i += cmd.len();
                        continue;
                    }
                    let name: String = rest[1..]
                        .chars()
                        .take_while(|c| c.is_ascii_alphabetic())
                        .collect();
                    if !name.is_empty() {
                        let msg = format!("byte {i}: no lexicon entry for \\{name}, split into characters");
                        log::warn!("{msg}");
                        out.warnings.push(msg);
                    }
                }
                out.tokens.push(ch.to_string());
                i += ch.len_utf8();
            }
        }
    }
    out
}

pub fn detokenize(tokens: &[String], mode: &TokenizerMode) -> String {
    match mode {
        TokenizerMode::Chars => tokens.concat(),
        TokenizerMode::Lexicon(_) => tokens.join(" "),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(t: &Tokenized) -> Vec<&str> {
        t.tokens.iter().map(String::as_str).collect()
    }

    #[test]
    fn lexicon_command_is_one_token() {
        let mode = TokenizerMode::Lexicon(Lexicon::new(["\\psi"]).unwrap());
        assert_eq!(toks(&tokenize("\\psi^2", &mode)), ["\\psi", "^", "2"]);
    }

    #[test]
    fn chars_mode_and_empty() {
        assert_eq!(toks(&tokenize("x_i", &TokenizerMode::Chars)), ["x", "_", "i"]);
        assert_eq!(toks(&tokenize("a b", &TokenizerMode::Chars)), ["a", "b"]);
        assert!(tokenize("", &TokenizerMode::Chars).tokens.is_empty());
        let lex = TokenizerMode::Lexicon(Lexicon::default_commands());
        assert!(tokenize("  ", &lex).tokens.is_empty());
    }

    #[test]
    fn longest_match_wins() {
        let mode = TokenizerMode::Lexicon(Lexicon::new(["\\p", "\\pi", "\\psi"]).unwrap());
        assert_eq!(toks(&tokenize("\\pi\\p x", &mode)), ["\\pi", "\\p", "x"]);
    }

    #[test]
    fn unknown_command_splits_with_warning() {
        let mode = TokenizerMode::Lexicon(Lexicon::default_commands());
        let t = tokenize("\\foo{1}", &mode);
        assert_eq!(toks(&t), ["\\", "f", "o", "o", "{", "1", "}"]);
        assert_eq!(t.warnings.len(), 1);
    }

    #[test]
    fn lexicon_entries_are_validated() {
        assert!(Lexicon::new(["frac"]).is_err());
        let lex = Lexicon::parse("# greek\n\\psi\n\n\\alpha\n").unwrap();
        assert_eq!(lex.commands(), ["\\alpha", "\\psi"]);
    }
}
