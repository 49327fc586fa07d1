use std::fmt;

/// Normalized token sequence shared by every lexical metric.
///
/// Text is lowercased; runs of alphanumerics and underscores form words (so `___` survives as a
/// token), every other non-space character is a token on its own.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn from_text(text: &str) -> Self {
        let lower = text.to_lowercase();
        let mut tokens = Vec::new();
        let mut word = String::new();
        for c in lower.chars() {
            if c.is_alphanumeric() || c == '_' {
                word.push(c);
                continue;
            }
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                tokens.push(c.to_string());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
        Self(tokens)
    }

    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        Self(tokens.into_iter().map(Into::into).collect())
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

impl From<&str> for TokenSeq {
    fn from(text: &str) -> Self {
        Self::from_text(text)
    }
}
