//! Source lexer for contract text.
//!
//! Comments and whitespace are dropped, numeric literals collapse to
//! [`NUM_TOKEN`], string literals collapse to [`STR_TOKEN`], and operators are
//! matched longest-first. Every other character becomes its own token, so the
//! lexer never fails.

pub const NUM_TOKEN: &str = "<NUM>";
pub const STR_TOKEN: &str = "<STR>";

// Longest first within each length class.
const OPERATORS: &[&str] = &[
    ">>>=", "<<=", ">>=", ">>>", "**=", "==", "!=", "<=", ">=", "&&", "||", "++", "--", "+=", "-=",
    "*=", "/=", "%=", "|=", "&=", "^=", "<<", ">>", "**", "=>", "->",
];

pub fn tokenize(source: &str) -> Vec<String> {
    let chars: Vec<char> = source.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
        } else if c == '/' && chars.get(i + 1) == Some(&'*') {
            i += 2;
            while i < chars.len() && !(chars[i] == '*' && chars.get(i + 1) == Some(&'/')) {
                i += 1;
            }
            i = (i + 2).min(chars.len());
        } else if c == '"' || c == '\'' {
            i += 1;
            while i < chars.len() && chars[i] != c {
                if chars[i] == '\\' {
                    i += 1;
                }
                i += 1;
            }
            i = (i + 1).min(chars.len());
            tokens.push(STR_TOKEN.to_string());
        } else if c.is_ascii_digit() {
            i += 1;
            while i < chars.len() {
                let d = chars[i];
                let continues = d.is_ascii_alphanumeric()
                    || d == '_'
                    || (d == '.' && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit()));
                if !continues {
                    break;
                }
                i += 1;
            }
            tokens.push(NUM_TOKEN.to_string());
        } else if is_ident_start(c) {
            let start = i;
            while i < chars.len() && is_ident_continue(chars[i]) {
                i += 1;
            }
            tokens.push(chars[start..i].iter().collect());
        } else if let Some(op) = match_operator(&chars[i..]) {
            i += op.chars().count();
            tokens.push(op.to_string());
        } else {
            tokens.push(c.to_string());
            i += 1;
        }
    }
    tokens
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || c == '$'
}

fn is_ident_continue(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '$'
}

fn match_operator(rest: &[char]) -> Option<&'static str> {
    OPERATORS.iter().copied().find(|op| {
        let len = op.chars().count();
        rest.len() >= len && op.chars().zip(rest).all(|(a, &b)| a == b)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn simple_declaration() {
        assert_eq!(toks("uint256 a = 1;"), ["uint256", "a", "=", "<NUM>", ";"]);
    }

    #[test]
    fn empty_and_comment_only() {
        assert!(toks("").is_empty());
        assert!(toks("/* only a comment */").is_empty());
        assert!(toks("// line comment").is_empty());
    }

    #[test]
    fn literals_collapse() {
        assert_eq!(
            toks("x = 0x1F + 1e18 + 2.5; s = \"hi \\\" there\"; c = 'a';"),
            [
                "x", "=", "<NUM>", "+", "<NUM>", "+", "<NUM>", ";", "s", "=", "<STR>", ";", "c",
                "=", "<STR>", ";"
            ]
        );
        assert_eq!(
            toks("pragma solidity ^0.4.24;"),
            ["pragma", "solidity", "^", "<NUM>", ";"]
        );
    }

    #[test]
    fn multi_char_operators() {
        assert_eq!(
            toks("a+=b>>>=c==d=>e"),
            ["a", "+=", "b", ">>>=", "c", "==", "d", "=>", "e"]
        );
        assert_eq!(toks("i++ ;x--"), ["i", "++", ";", "x", "--"]);
    }

    #[test]
    fn comments_inside_code() {
        assert_eq!(toks("a /* b */ c // d\ne"), ["a", "c", "e"]);
        assert_eq!(toks("a /* unterminated"), ["a"]);
    }

    #[test]
    fn unknown_characters_are_single_tokens() {
        assert_eq!(toks("a § b"), ["a", "§", "b"]);
        assert_eq!(toks("@#"), ["@", "#"]);
    }

    fn fragment() -> impl Strategy<Value = String> {
        prop::sample::select(vec![
            "uint256",
            "x",
            "=",
            "42",
            "0xff",
            ";",
            "\"str\"",
            "+=",
            "(",
            ")",
            "{",
            "}",
            "msg.sender",
            "/* c */",
            ">>>=",
            "!",
            "==",
            "_a$1",
            "'q'",
            "->",
        ])
        .prop_map(str::to_string)
    }

    proptest! {
        #[test]
        fn concatenation_at_token_boundary(
            a in prop::collection::vec(fragment(), 0..12),
            b in prop::collection::vec(fragment(), 0..12),
        ) {
            let s1 = format!("{} ", a.join(" "));
            let s2 = b.join(" ");
            let mut expected = tokenize(&s1);
            expected.extend(tokenize(&s2));
            prop_assert_eq!(tokenize(&format!("{s1}{s2}")), expected);
        }

        #[test]
        fn total_and_deterministic(s in ".{0,200}") {
            let first = tokenize(&s);
            prop_assert_eq!(&first, &tokenize(&s));
            prop_assert!(first.iter().all(|t| !t.is_empty() && !t.chars().any(char::is_whitespace)));
        }
    }
}
