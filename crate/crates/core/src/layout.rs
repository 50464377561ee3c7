//! The postfix module-layout language: token alphabet, stack-machine
//! validation, syntax trees, decoder legality masks and the text syntax.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Color, Property, Relation, Shape, Size};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Find,
    Compare,
    Describe,
    Exist,
    EqualTo,
    And,
    Filter,
    Relocate,
    Or,
    GreaterThan,
    LessThan,
    IsPresent,
    Count,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Output {
    Attention,
    Prediction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Signature {
    pub arity: usize,
    pub output: Output,
    pub uses_features: bool,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 13] = [
        ModuleKind::Find,
        ModuleKind::Compare,
        ModuleKind::Describe,
        ModuleKind::Exist,
        ModuleKind::EqualTo,
        ModuleKind::And,
        ModuleKind::Filter,
        ModuleKind::Relocate,
        ModuleKind::Or,
        ModuleKind::GreaterThan,
        ModuleKind::LessThan,
        ModuleKind::IsPresent,
        ModuleKind::Count,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Find => "find",
            ModuleKind::Compare => "compare",
            ModuleKind::Describe => "describe",
            ModuleKind::Exist => "exist",
            ModuleKind::EqualTo => "equal_to",
            ModuleKind::And => "and",
            ModuleKind::Filter => "filter",
            ModuleKind::Relocate => "relocate",
            ModuleKind::Or => "or",
            ModuleKind::GreaterThan => "greater_than",
            ModuleKind::LessThan => "less_than",
            ModuleKind::IsPresent => "is_present",
            ModuleKind::Count => "count",
        }
    }

    pub fn signature(self) -> Signature {
        use ModuleKind::*;
        use Output::*;
        let (arity, output, uses_features) = match self {
            Find => (0, Attention, true),
            Compare => (2, Prediction, true),
            Describe => (1, Prediction, true),
            Exist => (1, Prediction, false),
            EqualTo => (2, Prediction, false),
            And => (2, Attention, false),
            Filter => (1, Attention, true),
            Relocate => (1, Attention, true),
            Or => (2, Attention, false),
            GreaterThan => (2, Prediction, false),
            LessThan => (2, Prediction, false),
            IsPresent => (1, Prediction, false),
            Count => (1, Prediction, false),
        };
        Signature {
            arity,
            output,
            uses_features,
        }
    }

    pub fn arity(self) -> usize {
        self.signature().arity
    }

    pub fn is_prediction(self) -> bool {
        self.signature().output == Output::Prediction
    }

    /// Whether `binding` is the kind of argument this module takes.
    pub fn accepts(self, binding: &Binding) -> bool {
        match self {
            ModuleKind::Find | ModuleKind::Filter => matches!(
                binding,
                Binding::Color(_) | Binding::Shape(_) | Binding::Size(_)
            ),
            ModuleKind::Relocate => matches!(binding, Binding::Relation(_)),
            ModuleKind::Describe | ModuleKind::Compare => matches!(binding, Binding::Query(_)),
            _ => false,
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModuleKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ModuleKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown module `{s}`"))
    }
}

/// Decoder alphabet: the 13 module kinds followed by END.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    Module(ModuleKind),
    End,
}

pub const NUM_SYMBOLS: usize = 14;
pub const END_INDEX: usize = 13;

impl Symbol {
    pub fn all() -> impl Iterator<Item = Symbol> {
        (0..NUM_SYMBOLS).map(Symbol::from_index)
    }

    pub fn index(self) -> usize {
        match self {
            Symbol::Module(k) => k.index(),
            Symbol::End => END_INDEX,
        }
    }

    pub fn from_index(i: usize) -> Symbol {
        if i == END_INDEX {
            Symbol::End
        } else {
            Symbol::Module(ModuleKind::ALL[i])
        }
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Module(k) => k.fmt(f),
            Symbol::End => f.write_str("END"),
        }
    }
}

impl From<ModuleKind> for Symbol {
    fn from(k: ModuleKind) -> Symbol {
        Symbol::Module(k)
    }
}

impl From<&ModuleToken> for Symbol {
    fn from(t: &ModuleToken) -> Symbol {
        Symbol::Module(t.kind)
    }
}

impl From<&ModuleKind> for Symbol {
    fn from(k: &ModuleKind) -> Symbol {
        Symbol::Module(*k)
    }
}

impl From<&Symbol> for Symbol {
    fn from(s: &Symbol) -> Symbol {
        *s
    }
}

/// Symbolic argument of a module instance, used only by the oracle executor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Binding {
    Color(Color),
    Shape(Shape),
    Size(Size),
    Relation(Relation),
    Query(Property),
}

impl fmt::Display for Binding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Binding::Color(c) => write!(f, "color={c}"),
            Binding::Shape(s) => write!(f, "shape={s}"),
            Binding::Size(z) => write!(f, "size={z}"),
            Binding::Relation(r) => write!(f, "rel={r}"),
            Binding::Query(p) => write!(f, "attr={p}"),
        }
    }
}

impl FromStr for Binding {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| format!("binding `{s}` is not key=value"))?;
        match key {
            "color" => value.parse().map(Binding::Color),
            "shape" => value.parse().map(Binding::Shape),
            "size" => value.parse().map(Binding::Size),
            "rel" => value.parse().map(Binding::Relation),
            "attr" => value.parse().map(Binding::Query),
            _ => Err(format!("unknown binding key `{key}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModuleToken {
    pub kind: ModuleKind,
    pub binding: Option<Binding>,
}

impl ModuleToken {
    pub fn bare(kind: ModuleKind) -> ModuleToken {
        ModuleToken {
            kind,
            binding: None,
        }
    }

    pub fn bound(kind: ModuleKind, binding: Binding) -> ModuleToken {
        ModuleToken {
            kind,
            binding: Some(binding),
        }
    }
}

impl From<ModuleKind> for ModuleToken {
    fn from(kind: ModuleKind) -> ModuleToken {
        ModuleToken::bare(kind)
    }
}

impl fmt::Display for ModuleToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.binding {
            Some(b) => write!(f, "{}[{b}]", self.kind),
            None => write!(f, "{}", self.kind),
        }
    }
}

pub fn format_tokens(tokens: &[ModuleToken]) -> String {
    tokens
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn kinds_of(tokens: &[ModuleToken]) -> Vec<ModuleKind> {
    tokens.iter().map(|t| t.kind).collect()
}

/// Parses the whitespace-separated text syntax, e.g.
/// `find[color=red] find[shape=circle] and count`. Columns in errors are
/// 1-based character offsets.
pub fn parse_tokens(text: &str) -> Result<Vec<ModuleToken>> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    let column = |byte: usize| text[..byte].chars().count() + 1;
    while let Some(&(start, c)) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
            continue;
        }
        let mut end = start;
        while let Some(&(i, c)) = chars.peek() {
            if c.is_whitespace() {
                break;
            }
            end = i + c.len_utf8();
            chars.next();
        }
        out.push(parse_one(&text[start..end], start, &column)?);
    }
    if out.is_empty() {
        return Err(Error::LayoutSyntax {
            column: 1,
            message: "empty layout".into(),
        });
    }
    Ok(out)
}

fn parse_one(word: &str, offset: usize, column: &dyn Fn(usize) -> usize) -> Result<ModuleToken> {
    let err = |at: usize, message: String| Error::LayoutSyntax {
        column: column(offset + at),
        message,
    };
    let (name, binding) = match word.find('[') {
        None => {
            if let Some(i) = word.find(']') {
                return Err(err(i, "unmatched `]`".into()));
            }
            (word, None)
        }
        Some(open) => {
            if !word.ends_with(']') {
                return Err(err(word.len(), "expected `]` closing the binding".into()));
            }
            let inner = &word[open + 1..word.len() - 1];
            if let Some(i) = inner.find(['[', ']']) {
                return Err(err(open + 1 + i, "nested brackets".into()));
            }
            let binding = inner.parse::<Binding>().map_err(|m| err(open + 1, m))?;
            (&word[..open], Some(binding))
        }
    };
    let kind = name.parse::<ModuleKind>().map_err(|m| err(0, m))?;
    Ok(ModuleToken { kind, binding })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Violation {
    Empty,
    /// END may only be emitted by the decoder after a program is complete.
    EndInProgram,
    Underflow { arity: usize, depth: usize },
    /// A Prediction token followed by further tokens.
    PredictionNotFinal,
    /// Sequence ended without a Prediction token.
    MissingPrediction { depth: usize },
    /// The final Prediction left more than one value on the stack.
    FinalDepth { depth: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityReport {
    /// Stack depth after each accepted token.
    pub depths: Vec<usize>,
    pub violation: Option<(usize, Violation)>,
}

impl ValidityReport {
    pub fn is_valid(&self) -> bool {
        self.violation.is_none()
    }

    pub fn first_violation(&self) -> Option<usize> {
        self.violation.map(|(i, _)| i)
    }
}

impl fmt::Display for ValidityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.violation {
            None => write!(f, "valid"),
            Some((i, v)) => {
                let n = i + 1;
                match v {
                    Violation::Empty => write!(f, "empty layout"),
                    Violation::EndInProgram => write!(f, "invalid at token {n}: END inside a program"),
                    Violation::Underflow { arity, depth } => write!(
                        f,
                        "invalid at token {n}: stack underflow (needs {arity}, depth {depth})"
                    ),
                    Violation::PredictionNotFinal => {
                        write!(f, "invalid at token {n}: token follows a prediction")
                    }
                    Violation::MissingPrediction { depth } => write!(
                        f,
                        "invalid at token {n}: layout ends without a prediction (depth {depth})"
                    ),
                    Violation::FinalDepth { depth } => write!(
                        f,
                        "invalid at token {n}: prediction leaves depth {depth}, expected 1"
                    ),
                }
            }
        }
    }
}

/// Stack simulation over a token sequence. Accepts exactly the well-typed
/// postfix programs whose only Prediction token is the last one.
pub fn validate<T>(tokens: &[T]) -> ValidityReport
where
    for<'a> &'a T: Into<Symbol>,
{
    let mut depths = Vec::with_capacity(tokens.len());
    let fail = |depths: Vec<usize>, i: usize, v: Violation| ValidityReport {
        depths,
        violation: Some((i, v)),
    };
    if tokens.is_empty() {
        return fail(depths, 0, Violation::Empty);
    }
    let mut depth = 0usize;
    let last = tokens.len() - 1;
    for (i, t) in tokens.iter().enumerate() {
        let kind = match t.into() {
            Symbol::End => return fail(depths, i, Violation::EndInProgram),
            Symbol::Module(k) => k,
        };
        let arity = kind.arity();
        if arity > depth {
            return fail(depths, i, Violation::Underflow { arity, depth });
        }
        depth = depth - arity + 1;
        if kind.is_prediction() {
            if i != last {
                return fail(depths, i, Violation::PredictionNotFinal);
            }
            if depth != 1 {
                return fail(depths, i, Violation::FinalDepth { depth });
            }
        } else if i == last {
            return fail(depths, i, Violation::MissingPrediction { depth });
        }
        depths.push(depth);
    }
    ValidityReport {
        depths,
        violation: None,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntaxNode {
    pub token: ModuleToken,
    /// Position of this token in the postfix sequence.
    pub position: usize,
    pub children: Vec<SyntaxNode>,
}

impl SyntaxNode {
    pub fn len(&self) -> usize {
        1 + self.children.iter().map(SyntaxNode::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Checks arities and that every internal edge carries an attention map.
    pub fn well_typed(&self, is_root: bool) -> bool {
        let sig = self.token.kind.signature();
        let out_ok = if is_root {
            sig.output == Output::Prediction
        } else {
            sig.output == Output::Attention
        };
        out_ok
            && self.children.len() == sig.arity
            && self.children.iter().all(|c| c.well_typed(false))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntaxTree {
    pub root: SyntaxNode,
}

impl SyntaxTree {
    pub fn len(&self) -> usize {
        self.root.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn well_typed(&self) -> bool {
        self.root.well_typed(true)
    }
}

pub fn parse_rpn(tokens: &[ModuleToken]) -> Result<SyntaxTree> {
    let report = validate(tokens);
    if !report.is_valid() {
        return Err(Error::InvalidLayout(report));
    }
    let mut stack: Vec<SyntaxNode> = Vec::new();
    for (position, token) in tokens.iter().enumerate() {
        let at = stack.len() - token.kind.arity();
        let children = stack.split_off(at);
        stack.push(SyntaxNode {
            token: *token,
            position,
            children,
        });
    }
    let root = stack.pop().expect("validated program leaves one value");
    Ok(SyntaxTree { root })
}

/// Post-order traversal; inverse of [`parse_rpn`].
pub fn linearize(tree: &SyntaxTree) -> Vec<ModuleToken> {
    fn walk(node: &SyntaxNode, out: &mut Vec<ModuleToken>) {
        for c in &node.children {
            walk(c, out);
        }
        out.push(node.token);
    }
    let mut out = Vec::with_capacity(tree.len());
    walk(&tree.root, &mut out);
    out
}

/// Left-to-right decoder state used to build legality masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StackState {
    pub depth: usize,
    pub emitted: usize,
    pub terminated: bool,
}

impl StackState {
    pub fn new() -> StackState {
        StackState::default()
    }

    /// Advances past `sym`, which must be legal under the current mask.
    pub fn push(&mut self, sym: Symbol) {
        match sym {
            Symbol::End => {}
            Symbol::Module(k) => {
                self.depth = self.depth + 1 - k.arity();
                self.emitted += 1;
                self.terminated = k.is_prediction();
            }
        }
    }
}

pub type Mask = [bool; NUM_SYMBOLS];

/// Fewest tokens that complete a program from an unterminated stack of `depth`.
fn min_to_finish(depth: usize) -> usize {
    if depth >= 2 {
        depth - 1
    } else {
        1
    }
}

/// A token is legal iff it keeps at least one valid completion within
/// `max_len`. END is legal only right after a Prediction token.
pub fn legal_next_tokens(state: &StackState, max_len: usize) -> Mask {
    let mut mask = [false; NUM_SYMBOLS];
    if state.terminated {
        mask[END_INDEX] = true;
        return mask;
    }
    let after = state.emitted + 1;
    for k in ModuleKind::ALL {
        let arity = k.arity();
        if arity > state.depth || after > max_len {
            continue;
        }
        let next_depth = state.depth - arity + 1;
        mask[k.index()] = if k.is_prediction() {
            next_depth == 1
        } else {
            after + min_to_finish(next_depth) <= max_len
        };
    }
    mask
}

/// All valid programs of length at most `max_len`, by plain depth-first
/// search over kinds with arity-feasibility pruning.
pub fn enumerate_valid(max_len: usize) -> Vec<Vec<ModuleKind>> {
    fn dfs(prefix: &mut Vec<ModuleKind>, depth: usize, max_len: usize, out: &mut Vec<Vec<ModuleKind>>) {
        if prefix.len() == max_len {
            return;
        }
        for k in ModuleKind::ALL {
            let arity = k.arity();
            if arity > depth {
                continue;
            }
            let next = depth - arity + 1;
            prefix.push(k);
            if k.is_prediction() {
                if next == 1 {
                    out.push(prefix.clone());
                }
            } else if min_to_finish(next) <= max_len - prefix.len() {
                dfs(prefix, next, max_len, out);
            }
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    dfs(&mut Vec::new(), 0, max_len, &mut out);
    out
}
