//! Random LaTeX token sequences with two-dimensional structure, and the
//! parser that recovers their layout tree.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ExprGrammar {
    /// Single-glyph operands (digits, letters, `\theta`, `\infty`).
    pub atoms: Vec<String>,
    /// Binary operators placed between terms (`+`, `-`, `=`, `\rightarrow`).
    pub operators: Vec<String>,
    /// Prefix functions written before an operand (`\sin`).
    pub functions: Vec<String>,
    pub allow_superscript: bool,
    pub allow_subscript: bool,
    pub allow_fraction: bool,
    pub allow_radical: bool,
    pub allow_parens: bool,
    /// `\sum _ { i = a } ^ { b } x` when `\sum` is enabled.
    pub allow_sum: bool,
    /// `\lim _ { x \rightarrow a } y` when `\lim` and `\rightarrow` are enabled.
    pub allow_lim: bool,
    /// Structure nesting budget; 0 yields a single atom.
    pub max_depth: usize,
    /// Bounds on the label length, `<eol>` included.
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Most terms joined in one row.
    pub max_terms: usize,
    /// Chance a term is a structure rather than a plain atom.
    pub structure_prob: f64,
    /// Chance a plain atom is repeated two or three times in a row.
    pub repeat_prob: f64,
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl Default for ExprGrammar {
    fn default() -> Self {
        ExprGrammar {
            atoms: strings(&[
                "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "a", "b", "n", "t", "x", "y",
                "\\theta", "\\infty",
            ]),
            operators: strings(&["+", "-", "=", "\\rightarrow"]),
            functions: strings(&["\\sin"]),
            allow_superscript: true,
            allow_subscript: true,
            allow_fraction: true,
            allow_radical: true,
            allow_parens: true,
            allow_sum: true,
            allow_lim: true,
            max_depth: 3,
            min_tokens: 3,
            max_tokens: 48,
            max_terms: 4,
            structure_prob: 0.35,
            repeat_prob: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Structure {
    Sup,
    Sub,
    Frac,
    Sqrt,
    Parens,
    Func,
    Sum,
    Lim,
}

impl ExprGrammar {
    /// The compact grammar used for small learnability experiments: digits
    /// 0–3, four letters, `+ - =` and the four layout structures.
    pub fn compact() -> Self {
        ExprGrammar {
            atoms: strings(&["0", "1", "2", "3", "x", "y", "a", "b"]),
            operators: strings(&["+", "-", "="]),
            functions: Vec::new(),
            allow_parens: false,
            allow_sum: false,
            allow_lim: false,
            max_depth: 2,
            max_tokens: 12,
            max_terms: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.atoms.is_empty() {
            return Err(Error::Config("grammar needs at least one atom".into()));
        }
        if self.max_tokens < 2 || self.min_tokens > self.max_tokens {
            return Err(Error::Config(format!(
                "token bounds [{}, {}] are unusable",
                self.min_tokens, self.max_tokens
            )));
        }
        if self.max_terms == 0 {
            return Err(Error::Config("max_terms must be positive".into()));
        }
        for p in [self.structure_prob, self.repeat_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn structures(&self) -> Vec<Structure> {
        let mut s = Vec::new();
        let pairs = [
            (self.allow_superscript, Structure::Sup),
            (self.allow_subscript, Structure::Sub),
            (self.allow_fraction, Structure::Frac),
            (self.allow_radical, Structure::Sqrt),
            (self.allow_parens, Structure::Parens),
            (!self.functions.is_empty(), Structure::Func),
            (self.allow_sum, Structure::Sum),
            (
                self.allow_lim && self.operators.iter().any(|o| o == "\\rightarrow"),
                Structure::Lim,
            ),
        ];
        for (on, st) in pairs {
            if on {
                s.push(st);
            }
        }
        s
    }

    /// Every token this grammar can emit, `<eol>` excluded.
    pub fn terminals(&self) -> Vec<String> {
        let mut t: Vec<String> = self.atoms.clone();
        t.extend(self.operators.iter().cloned());
        t.extend(self.functions.iter().cloned());
        for st in self.structures() {
            let extra: &[&str] = match st {
                Structure::Sup => &["^", "{", "}"],
                Structure::Sub => &["_", "{", "}"],
                Structure::Frac => &["\\frac", "{", "}"],
                Structure::Sqrt => &["\\sqrt", "{", "}"],
                Structure::Parens => &["(", ")"],
                Structure::Func => &[],
                Structure::Sum => &["\\sum", "_", "^", "{", "}", "="],
                Structure::Lim => &["\\lim", "_", "{", "}"],
            };
            t.extend(extra.iter().map(|s| s.to_string()));
        }
        t.sort();
        t.dedup();
        t
    }
}

fn pick<'a, R: Rng + ?Sized>(v: &'a [String], rng: &mut R) -> &'a str {
    v.choose(rng).map(String::as_str).unwrap_or("x")
}

fn emit_atom<R: Rng + ?Sized>(g: &ExprGrammar, rng: &mut R, out: &mut Vec<String>) {
    out.push(pick(&g.atoms, rng).to_string());
}

fn emit_group<R: Rng + ?Sized>(g: &ExprGrammar, depth: usize, rng: &mut R, out: &mut Vec<String>) {
    out.push("{".into());
    emit_expr(g, depth, rng, out);
    out.push("}".into());
}

fn emit_term<R: Rng + ?Sized>(g: &ExprGrammar, depth: usize, rng: &mut R, out: &mut Vec<String>) {
    let structures = g.structures();
    if structures.is_empty() || !rng.random_bool(g.structure_prob) {
        let atom = pick(&g.atoms, rng).to_string();
        let copies = if rng.random_bool(g.repeat_prob) {
            rng.random_range(2..=3)
        } else {
            1
        };
        for _ in 0..copies {
            out.push(atom.clone());
        }
        return;
    }
    let inner = depth - 1;
    match *structures.choose(rng).unwrap() {
        Structure::Sup => {
            emit_atom(g, rng, out);
            out.push("^".into());
            emit_group(g, inner, rng, out);
        }
        Structure::Sub => {
            emit_atom(g, rng, out);
            out.push("_".into());
            emit_group(g, inner, rng, out);
        }
        Structure::Frac => {
            out.push("\\frac".into());
            emit_group(g, inner, rng, out);
            emit_group(g, inner, rng, out);
        }
        Structure::Sqrt => {
            out.push("\\sqrt".into());
            emit_group(g, inner, rng, out);
        }
        Structure::Parens => {
            out.push("(".into());
            emit_expr(g, inner.max(1), rng, out);
            out.push(")".into());
        }
        Structure::Func => {
            out.push(pick(&g.functions, rng).to_string());
            emit_atom(g, rng, out);
        }
        Structure::Sum => {
            out.extend(["\\sum", "_", "{"].map(String::from));
            emit_atom(g, rng, out);
            out.push("=".into());
            emit_atom(g, rng, out);
            out.extend(["}", "^", "{"].map(String::from));
            emit_atom(g, rng, out);
            out.push("}".into());
            emit_atom(g, rng, out);
        }
        Structure::Lim => {
            out.extend(["\\lim", "_", "{"].map(String::from));
            emit_atom(g, rng, out);
            out.push("\\rightarrow".into());
            emit_atom(g, rng, out);
            out.push("}".into());
            emit_atom(g, rng, out);
        }
    }
}

fn emit_expr<R: Rng + ?Sized>(g: &ExprGrammar, depth: usize, rng: &mut R, out: &mut Vec<String>) {
    if depth == 0 {
        emit_atom(g, rng, out);
        return;
    }
    let terms = rng.random_range(1..=g.max_terms);
    for i in 0..terms {
        if i > 0 && !g.operators.is_empty() && rng.random_bool(0.75) {
            out.push(pick(&g.operators, rng).to_string());
        }
        emit_term(g, depth, rng, out);
    }
}

/// A random expression ending with `<eol>`.
///
/// With `max_depth = 0` the result is one atom and `<eol>`, regardless of
/// `min_tokens`. Otherwise candidates outside `[min_tokens, max_tokens]` are
/// redrawn; if none fits after many draws, atoms are padded or the row cut.
pub fn gen_expression<R: Rng + ?Sized>(g: &ExprGrammar, rng: &mut R) -> Vec<String> {
    let mut out = Vec::new();
    if g.max_depth == 0 {
        emit_atom(g, rng, &mut out);
        out.push("<eol>".into());
        return out;
    }
    for _ in 0..1000 {
        out.clear();
        emit_expr(g, g.max_depth, rng, &mut out);
        let n = out.len() + 1;
        if n >= g.min_tokens && n <= g.max_tokens {
            out.push("<eol>".into());
            return out;
        }
    }
    out.clear();
    while out.len() + 1 < g.min_tokens.max(2) {
        emit_atom(g, rng, &mut out);
    }
    out.push("<eol>".into());
    out
}

/// Layout tree of a token sequence. Indices point into the token list.
#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Atom {
        idx: usize,
    },
    Script {
        base: Box<Node>,
        sub: Option<Group>,
        sup: Option<Group>,
    },
    Frac {
        idx: usize,
        num: Group,
        den: Group,
    },
    Sqrt {
        idx: usize,
        arg: Group,
    },
}

/// A braced group, with the `^`/`_` that introduced it when it is a script.
#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub marker: Option<usize>,
    pub open: usize,
    pub close: usize,
    pub body: Vec<Node>,
}

struct Parser<'a, S> {
    tokens: &'a [S],
    pos: usize,
}

impl<S: AsRef<str>> Parser<'_, S> {
    fn peek(&self) -> Option<&str> {
        self.tokens.get(self.pos).map(AsRef::as_ref)
    }

    fn err(&self, msg: &str) -> Error {
        Error::Parse(format!("{msg} at token {}", self.pos))
    }

    fn group(&mut self, marker: Option<usize>) -> Result<Group> {
        if self.peek() != Some("{") {
            return Err(self.err("expected '{'"));
        }
        let open = self.pos;
        self.pos += 1;
        let body = self.row()?;
        if body.is_empty() {
            return Err(self.err("empty group"));
        }
        if self.peek() != Some("}") {
            return Err(self.err("expected '}'"));
        }
        let close = self.pos;
        self.pos += 1;
        Ok(Group {
            marker,
            open,
            close,
            body,
        })
    }

    fn row(&mut self) -> Result<Vec<Node>> {
        let mut nodes: Vec<Node> = Vec::new();
        while let Some(t) = self.peek() {
            match t {
                "}" => break,
                "{" => return Err(self.err("unexpected '{'")),
                "^" | "_" => {
                    let marker = self.pos;
                    let is_sup = t == "^";
                    self.pos += 1;
                    let grp = self.group(Some(marker))?;
                    let base = nodes.pop().ok_or_else(|| self.err("script without a base"))?;
                    let node = match base {
                        Node::Script { base, sub, sup } => match (is_sup, sub, sup) {
                            (true, sub, None) => Node::Script { base, sub, sup: Some(grp) },
                            (false, None, sup) => Node::Script { base, sub: Some(grp), sup },
                            _ => return Err(self.err("duplicate script")),
                        },
                        base => Node::Script {
                            base: Box::new(base),
                            sub: (!is_sup).then(|| grp.clone()),
                            sup: is_sup.then_some(grp),
                        },
                    };
                    nodes.push(node);
                }
                "\\frac" => {
                    let idx = self.pos;
                    self.pos += 1;
                    let num = self.group(None)?;
                    let den = self.group(None)?;
                    nodes.push(Node::Frac { idx, num, den });
                }
                "\\sqrt" => {
                    let idx = self.pos;
                    self.pos += 1;
                    let arg = self.group(None)?;
                    nodes.push(Node::Sqrt { idx, arg });
                }
                "<eol>" => return Err(self.err("<eol> inside the expression")),
                _ => {
                    nodes.push(Node::Atom { idx: self.pos });
                    self.pos += 1;
                }
            }
        }
        Ok(nodes)
    }
}

/// Parses a token sequence (optionally ending with `<eol>`) into a row of nodes.
pub fn parse<S: AsRef<str>>(tokens: &[S]) -> Result<Vec<Node>> {
    let body = crate::metrics::strip_eol(tokens);
    let mut p = Parser { tokens: body, pos: 0 };
    let row = p.row()?;
    if p.pos != body.len() {
        return Err(p.err("unbalanced '}'"));
    }
    if row.is_empty() {
        return Err(Error::Parse("empty expression".into()));
    }
    Ok(row)
}

fn flatten_into(nodes: &[Node], out: &mut Vec<usize>) {
    for n in nodes {
        match n {
            Node::Atom { idx } => out.push(*idx),
            Node::Script { base, sub, sup } => {
                flatten_into(std::slice::from_ref(base.as_ref()), out);
                let mut groups: Vec<&Group> = sub.iter().chain(sup.iter()).collect();
                groups.sort_by_key(|g| g.open);
                for g in groups {
                    out.push(g.marker.unwrap_or(g.open));
                    flatten_group(g, out);
                }
            }
            Node::Frac { idx, num, den } => {
                out.push(*idx);
                flatten_group(num, out);
                flatten_group(den, out);
            }
            Node::Sqrt { idx, arg } => {
                out.push(*idx);
                flatten_group(arg, out);
            }
        }
    }
}

fn flatten_group(g: &Group, out: &mut Vec<usize>) {
    out.push(g.open);
    flatten_into(&g.body, out);
    out.push(g.close);
}

/// Token indices in the order the tree would print them.
pub fn flatten(nodes: &[Node]) -> Vec<usize> {
    let mut out = Vec::new();
    flatten_into(nodes, &mut out);
    out
}
