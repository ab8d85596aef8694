//! Recursive-descent parser for the textual cell DSL.
//!
//! Canonical grammar:
//!
//! ```text
//! arch   := node ("|" uint)?
//! node   := SOURCE | OP "(" node ("," node)* ")" | "@ct(" node ")"
//! SOURCE := x_t | x_tm1 | h_tm1 | c_tm1 | posenc
//! ```
//!
//! Whitespace is ignored. The parser also accepts `Var('hm1')`-style
//! source aliases, typeset sources such as `$h_{t-1}$`, and a trailing
//! comma before a closing parenthesis.

use super::tree::{numbering, ArchNode, Architecture, NodePath};
use super::{DslError, OpKind};

pub fn parse(text: &str) -> Result<Architecture, DslError> {
    let mut p = Parser { src: text.as_bytes(), text, pos: 0, ct_mark: None };
    let root = p.node(&mut Vec::new())?;
    p.skip_ws();
    let mut ct_node = None;
    if p.peek() == Some(b'|') {
        p.pos += 1;
        p.skip_ws();
        let start = p.pos;
        while p.peek().is_some_and(|c| c.is_ascii_digit()) {
            p.pos += 1;
        }
        if start == p.pos {
            return Err(p.syntax("expected node number after `|`"));
        }
        let n: usize = text[start..p.pos].parse().map_err(|_| DslError::Syntax {
            pos: start,
            msg: "node number too large".into(),
        })?;
        ct_node = Some(n);
        p.skip_ws();
    }
    if p.pos != p.src.len() {
        return Err(p.syntax("unexpected trailing input"));
    }
    if let Some(path) = p.ct_mark.take() {
        if ct_node.is_some() {
            return Err(DslError::Syntax { pos: 0, msg: "both `@ct(...)` and `|n` given".into() });
        }
        let index = numbering(&root).iter().position(|q| *q == path).expect("marked node is an operator") + 1;
        ct_node = Some(index);
    }
    let arch = Architecture { root, ct_node };
    arch.validate_ct()?;
    Ok(arch)
}

struct Parser<'a> {
    src: &'a [u8],
    text: &'a str,
    pos: usize,
    ct_mark: Option<NodePath>,
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|c| c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn syntax(&self, msg: &str) -> DslError {
        DslError::Syntax { pos: self.pos, msg: msg.to_string() }
    }

    fn expect(&mut self, c: u8) -> Result<(), DslError> {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.syntax(&format!("expected `{}`", c as char)))
        }
    }

    fn ident(&mut self) -> &str {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_alphanumeric() || c == b'_') {
            self.pos += 1;
        }
        &self.text[start..self.pos]
    }

    fn node(&mut self, path: &mut NodePath) -> Result<ArchNode, DslError> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            None => Err(self.syntax("unexpected end of input")),
            Some(b'@') => {
                self.pos += 1;
                if self.ident() != "ct" {
                    return Err(DslError::Syntax { pos: start, msg: "expected `@ct(`".into() });
                }
                self.expect(b'(')?;
                let inner = self.node(path)?;
                self.expect(b')')?;
                if inner.is_leaf() {
                    return Err(DslError::Syntax { pos: start, msg: "`@ct` must wrap an operator node".into() });
                }
                if self.ct_mark.is_some() {
                    return Err(DslError::Syntax { pos: start, msg: "more than one `@ct` marker".into() });
                }
                self.ct_mark = Some(path.clone());
                Ok(inner)
            }
            Some(b'$') => {
                self.pos += 1;
                let body_start = self.pos;
                while self.peek().is_some_and(|c| c != b'$') {
                    self.pos += 1;
                }
                if self.peek().is_none() {
                    return Err(DslError::Syntax { pos: start, msg: "unterminated `$`".into() });
                }
                let body: String = self.text[body_start..self.pos]
                    .chars()
                    .filter(|c| !c.is_whitespace() && *c != '{' && *c != '}')
                    .collect();
                self.pos += 1;
                let op = match body.as_str() {
                    "x_t" => OpKind::X,
                    "x_t-1" => OpKind::Xm1,
                    "h_t-1" => OpKind::Hm1,
                    "c_t-1" => OpKind::Cm1,
                    _ => return Err(DslError::UnknownToken { pos: start, token: format!("${body}$") }),
                };
                Ok(ArchNode::leaf(op))
            }
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let name = self.ident().to_string();
                if name == "Var" {
                    return self.var_alias(start);
                }
                let Some(op) = OpKind::from_token(&name) else {
                    return Err(DslError::UnknownToken { pos: start, token: name });
                };
                if op.is_source() {
                    return Ok(ArchNode::leaf(op));
                }
                self.expect(b'(')?;
                let mut children = Vec::new();
                loop {
                    self.skip_ws();
                    if self.peek() == Some(b')') && !children.is_empty() {
                        self.pos += 1;
                        break;
                    }
                    path.push(children.len());
                    let child = self.node(path)?;
                    path.pop();
                    children.push(child);
                    self.skip_ws();
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b')') => {
                            self.pos += 1;
                            break;
                        }
                        _ => return Err(self.syntax("expected `,` or `)`")),
                    }
                }
                if children.len() != op.arity() {
                    return Err(DslError::Arity {
                        pos: start,
                        op: name,
                        expected: op.arity(),
                        found: children.len(),
                    });
                }
                Ok(ArchNode { op, children })
            }
            Some(_) => Err(self.syntax("expected an operator or source")),
        }
    }

    fn var_alias(&mut self, start: usize) -> Result<ArchNode, DslError> {
        self.expect(b'(')?;
        self.skip_ws();
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(self.syntax("expected quoted variable name")),
        };
        self.pos += 1;
        let name_start = self.pos;
        while self.peek().is_some_and(|c| c != quote) {
            self.pos += 1;
        }
        if self.peek().is_none() {
            return Err(DslError::Syntax { pos: start, msg: "unterminated string".into() });
        }
        let name = self.text[name_start..self.pos].to_string();
        self.pos += 1;
        self.expect(b')')?;
        let op = match name.as_str() {
            "x" | "x_t" => OpKind::X,
            "xm1" | "x_tm1" => OpKind::Xm1,
            "hm1" | "h_tm1" => OpKind::Hm1,
            "cm1" | "c_tm1" => OpKind::Cm1,
            "fixed_posenc" | "posenc" => OpKind::PosEnc,
            _ => return Err(DslError::UnknownToken { pos: start, token: format!("Var('{name}')") }),
        };
        Ok(ArchNode::leaf(op))
    }
}
