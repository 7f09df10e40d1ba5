//! Minimal SQL lexer: enough to find keywords and identifiers outside string
//! literals and comments, with parenthesis depth.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    /// Bare word: keyword, identifier or number.
    Word,
    /// `"x"`, `` `x` `` or `[x]`; text holds the unquoted name.
    QuotedIdent,
    /// `'...'`; text holds the raw literal including quotes.
    StringLit,
    Symbol,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    /// Parenthesis depth at which the token starts.
    pub depth: usize,
}

impl Token {
    pub fn is_keyword(&self, kw: &str) -> bool {
        self.kind == TokenKind::Word && self.text.eq_ignore_ascii_case(kw)
    }

    /// Identifier-like tokens: bare words and quoted identifiers.
    pub fn identifier(&self) -> Option<&str> {
        matches!(self.kind, TokenKind::Word | TokenKind::QuotedIdent).then_some(self.text.as_str())
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '$'
}

/// Tokenizes `sql`. Unterminated literals or comments run to the end of input.
pub fn tokenize(sql: &str) -> Vec<Token> {
    let chars: Vec<char> = sql.chars().collect();
    let mut tokens = Vec::new();
    let mut depth = 0usize;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '-' && chars.get(i + 1) == Some(&'-') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
        } else if c == '/' && chars.get(i + 1) == Some(&'*') {
            i += 2;
            while i < chars.len() && !(chars[i] == '*' && chars.get(i + 1) == Some(&'/')) {
                i += 1;
            }
            i = (i + 2).min(chars.len());
        } else if c == '\'' {
            let start = i;
            i += 1;
            while i < chars.len() {
                if chars[i] == '\'' {
                    if chars.get(i + 1) == Some(&'\'') {
                        i += 2;
                        continue;
                    }
                    i += 1;
                    break;
                }
                i += 1;
            }
            tokens.push(Token {
                kind: TokenKind::StringLit,
                text: chars[start..i].iter().collect(),
                depth,
            });
        } else if c == '"' || c == '`' || c == '[' {
            let close = if c == '[' { ']' } else { c };
            let mut text = String::new();
            i += 1;
            while i < chars.len() {
                if chars[i] == close {
                    if close != ']' && chars.get(i + 1) == Some(&close) {
                        text.push(close);
                        i += 2;
                        continue;
                    }
                    i += 1;
                    break;
                }
                text.push(chars[i]);
                i += 1;
            }
            tokens.push(Token {
                kind: TokenKind::QuotedIdent,
                text,
                depth,
            });
        } else if is_word_char(c) {
            let start = i;
            while i < chars.len() && is_word_char(chars[i]) {
                i += 1;
            }
            tokens.push(Token {
                kind: TokenKind::Word,
                text: chars[start..i].iter().collect(),
                depth,
            });
        } else {
            if c == ')' {
                depth = depth.saturating_sub(1);
            }
            tokens.push(Token {
                kind: TokenKind::Symbol,
                text: c.to_string(),
                depth,
            });
            if c == '(' {
                depth += 1;
            }
            i += 1;
        }
    }
    tokens
}

/// True iff `ORDER BY` appears outside literals at parenthesis depth zero.
pub fn is_order_sensitive(sql: &str) -> bool {
    let tokens = tokenize(sql);
    tokens
        .windows(2)
        .any(|w| w[0].depth == 0 && w[0].is_keyword("order") && w[1].is_keyword("by"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_sensitivity_examples() {
        assert!(is_order_sensitive("SELECT a FROM t ORDER BY a"));
        assert!(is_order_sensitive("select a from t order\n  by a desc"));
        assert!(!is_order_sensitive(
            "SELECT a FROM (SELECT a FROM t ORDER BY a) LIMIT 1"
        ));
        assert!(!is_order_sensitive("SELECT 'order by' FROM t"));
        assert!(!is_order_sensitive("SELECT \"order\" FROM t -- order by a"));
        assert!(!is_order_sensitive("SELECT a FROM t /* ORDER BY a */"));
        assert!(!is_order_sensitive("SELECT border, byline FROM t"));
    }

    #[test]
    fn tokens_carry_depth() {
        let toks = tokenize("a (b (c)) d");
        let depths: Vec<_> = toks.iter().map(|t| (t.text.as_str(), t.depth)).collect();
        assert_eq!(
            depths,
            [
                ("a", 0),
                ("(", 0),
                ("b", 1),
                ("(", 1),
                ("c", 2),
                (")", 1),
                (")", 0),
                ("d", 0)
            ]
        );
    }

    #[test]
    fn escaped_quotes_stay_inside_literals() {
        let toks = tokenize("SELECT 'it''s' , \"a\"\"b\"");
        assert_eq!(toks[1].text, "'it''s'");
        assert_eq!(toks[3].text, "a\"b");
    }
}
