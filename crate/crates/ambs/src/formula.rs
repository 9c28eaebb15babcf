//! Propositional safety formulas over labelled states.
//!
//! A formula is evaluated against the label set of a single state. Bounded
//! safety of a trace is then "every state up to the horizon satisfies the
//! formula" (see [`crate::trace`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of atomic propositions in one universe. Label sets are
/// stored as `u32` bitmasks, which also keeps truth-table enumeration cheap.
pub const MAX_ATOMS: usize = 32;

/// Index of an atomic proposition within its universe.
pub type AtomId = u16;

/// The ordered universe of atomic propositions a system labels states with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Atoms {
    names: Vec<String>,
}

impl Atoms {
    /// Atom names must be unique, non-empty identifiers (`[A-Za-z_][A-Za-z0-9_]*`).
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::config("atom universe is empty"));
        }
        if names.len() > MAX_ATOMS {
            return Err(Error::config(format!(
                "atom universe has {} atoms, limit is {MAX_ATOMS}",
                names.len()
            )));
        }
        let mut out: Vec<String> = Vec::with_capacity(names.len());
        for n in names {
            let n = n.as_ref();
            if !is_identifier(n) {
                return Err(Error::config(format!("invalid atom name {n:?}")));
            }
            if out.iter().any(|e| e == n) {
                return Err(Error::config(format!("duplicate atom name {n:?}")));
            }
            out.push(n.to_string());
        }
        Ok(Atoms { names: out })
    }

    pub fn id(&self, name: &str) -> Option<AtomId> {
        self.names.iter().position(|n| n == name).map(|i| i as AtomId)
    }

    pub fn name(&self, id: AtomId) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Set of atoms that hold at one state, as a bitmask over an [`Atoms`] universe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct LabelSet(u32);

impl LabelSet {
    pub const EMPTY: LabelSet = LabelSet(0);

    pub fn from_ids(ids: &[AtomId]) -> LabelSet {
        let mut bits = 0u32;
        for &id in ids {
            bits |= 1 << id;
        }
        LabelSet(bits)
    }

    /// Resolve `names` against `atoms`; unknown names are configuration errors.
    pub fn from_names<S: AsRef<str>>(names: &[S], atoms: &Atoms) -> Result<LabelSet> {
        let mut bits = 0u32;
        for n in names {
            let id = atoms
                .id(n.as_ref())
                .ok_or_else(|| Error::config(format!("unknown atom {:?} in label set", n.as_ref())))?;
            bits |= 1 << id;
        }
        Ok(LabelSet(bits))
    }

    pub fn contains(&self, id: AtomId) -> bool {
        self.0 & (1 << id) != 0
    }

    pub fn insert(&mut self, id: AtomId) {
        self.0 |= 1 << id;
    }

    pub fn bits(&self) -> u32 {
        self.0
    }

    pub fn from_bits(bits: u32) -> LabelSet {
        LabelSet(bits)
    }

    /// Atom names present in this set, for diagnostics.
    pub fn names<'a>(&self, atoms: &'a Atoms) -> Vec<&'a str> {
        (0..atoms.len() as AtomId)
            .filter(|id| self.contains(*id))
            .map(|id| atoms.name(id))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Atom(AtomId),
    Not(Box<Node>),
    And(Box<Node>, Box<Node>),
}

/// A parsed safety formula, bound to the universe it was parsed against.
///
/// Text syntax: `!a`, `a & b`, `a -> b`, parentheses. `&` binds tighter than
/// `->`, `!` tighter than both, `->` associates to the right. Implication is
/// parser-level sugar: `a -> b` is stored as `!(a & !b)`, so evaluation only
/// ever sees atoms, negation, and conjunction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyFormula {
    root: Node,
    text: String,
}

impl SafetyFormula {
    pub fn parse(text: &str, atoms: &Atoms) -> Result<SafetyFormula> {
        let tokens = lex(text)?;
        let mut p = Parser { tokens, pos: 0, atoms };
        let root = p.implication()?;
        if p.pos != p.tokens.len() {
            return Err(Error::config(format!(
                "trailing input after formula at token {:?}",
                p.tokens[p.pos]
            )));
        }
        Ok(SafetyFormula { root, text: text.trim().to_string() })
    }

    /// Truth of the formula at one state's labels.
    pub fn eval(&self, labels: LabelSet) -> bool {
        eval_node(&self.root, labels)
    }

    /// Largest atom id the formula mentions. Lets systems check that a
    /// formula fits their universe before evaluating it.
    pub fn max_atom_id(&self) -> AtomId {
        fn walk(n: &Node) -> AtomId {
            match n {
                Node::Atom(id) => *id,
                Node::Not(inner) => walk(inner),
                Node::And(a, b) => walk(a).max(walk(b)),
            }
        }
        walk(&self.root)
    }

    /// The source text this formula was parsed from.
    pub fn text(&self) -> &str {
        &self.text
    }
}

impl std::fmt::Display for SafetyFormula {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.text)
    }
}

fn eval_node(n: &Node, labels: LabelSet) -> bool {
    match n {
        Node::Atom(id) => labels.contains(*id),
        Node::Not(inner) => !eval_node(inner, labels),
        Node::And(a, b) => eval_node(a, labels) && eval_node(b, labels),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Not,
    And,
    Implies,
    LParen,
    RParen,
}

fn lex(text: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '!' => {
                out.push(Token::Not);
                i += 1;
            }
            '&' => {
                out.push(Token::And);
                i += 1;
            }
            '(' => {
                out.push(Token::LParen);
                i += 1;
            }
            ')' => {
                out.push(Token::RParen);
                i += 1;
            }
            '-' => {
                if i + 1 < bytes.len() && bytes[i + 1] == b'>' {
                    out.push(Token::Implies);
                    i += 2;
                } else {
                    return Err(Error::config("expected '>' after '-' in formula"));
                }
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                out.push(Token::Ident(text[start..i].to_string()));
            }
            other => return Err(Error::config(format!("unexpected character {other:?} in formula"))),
        }
    }
    if out.is_empty() {
        return Err(Error::config("empty formula"));
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    atoms: &'a Atoms,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn implication(&mut self) -> Result<Node> {
        let lhs = self.conjunction()?;
        if self.peek() == Some(&Token::Implies) {
            self.pos += 1;
            let rhs = self.implication()?;
            // a -> b  ==  !(a & !b)
            Ok(Node::Not(Box::new(Node::And(Box::new(lhs), Box::new(Node::Not(Box::new(rhs)))))))
        } else {
            Ok(lhs)
        }
    }

    fn conjunction(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while self.peek() == Some(&Token::And) {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        match self.peek().cloned() {
            Some(Token::Not) => {
                self.pos += 1;
                Ok(Node::Not(Box::new(self.unary()?)))
            }
            Some(Token::LParen) => {
                self.pos += 1;
                let inner = self.implication()?;
                if self.peek() != Some(&Token::RParen) {
                    return Err(Error::config("unclosed parenthesis in formula"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(Token::Ident(name)) => {
                self.pos += 1;
                let id = self
                    .atoms
                    .id(&name)
                    .ok_or_else(|| Error::config(format!("unknown atom {name:?} in formula")))?;
                Ok(Node::Atom(id))
            }
            other => Err(Error::config(format!("unexpected token {other:?} in formula"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atoms() -> Atoms {
        Atoms::new(&["collision", "red_light", "stop"]).unwrap()
    }

    #[test]
    fn implication_example() {
        let a = atoms();
        let f = SafetyFormula::parse("!collision & (red_light -> stop)", &a).unwrap();
        let labels = LabelSet::from_names(&["red_light"], &a).unwrap();
        assert!(!f.eval(labels));
        let ok = LabelSet::from_names(&["red_light", "stop"], &a).unwrap();
        assert!(f.eval(ok));
        assert!(f.eval(LabelSet::EMPTY));
        let crash = LabelSet::from_names(&["collision"], &a).unwrap();
        assert!(!f.eval(crash));
    }

    #[test]
    fn unknown_atom_is_config_error() {
        let a = atoms();
        let err = SafetyFormula::parse("!meteor", &a).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let err = LabelSet::from_names(&["meteor"], &a).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn syntax_errors() {
        let a = atoms();
        for bad in ["", "&", "stop &", "(stop", "stop -", "stop )", "3stop", "a -> "] {
            assert!(SafetyFormula::parse(bad, &a).is_err(), "accepted {bad:?}");
        }
    }

    #[test]
    fn implication_is_right_associative() {
        let a = atoms();
        let f = SafetyFormula::parse("collision -> red_light -> stop", &a).unwrap();
        // collision -> (red_light -> stop): true whenever collision is absent.
        // Left association would give (collision -> red_light) -> stop, which
        // is false at {red_light}.
        assert!(f.eval(LabelSet::EMPTY));
        let rl = LabelSet::from_names(&["red_light"], &a).unwrap();
        assert!(f.eval(rl));
        let c_rl = LabelSet::from_names(&["collision", "red_light"], &a).unwrap();
        assert!(!f.eval(c_rl));
        let c_rl_s = LabelSet::from_names(&["collision", "red_light", "stop"], &a).unwrap();
        assert!(f.eval(c_rl_s));
    }

    /// Independent semantics: compute the full set of satisfying label masks
    /// bottom-up with set algebra (atom = masks with the bit set, not =
    /// complement, and = intersection), then compare membership with `eval`.
    fn satisfying_masks(f: &SafetyFormula, n_atoms: usize) -> std::collections::BTreeSet<u32> {
        fn rec(n: &Node, n_atoms: usize) -> std::collections::BTreeSet<u32> {
            let all: std::collections::BTreeSet<u32> = (0u32..(1 << n_atoms)).collect();
            match n {
                Node::Atom(id) => all.into_iter().filter(|m| m & (1 << id) != 0).collect(),
                Node::Not(inner) => {
                    let s = rec(inner, n_atoms);
                    all.into_iter().filter(|m| !s.contains(m)).collect()
                }
                Node::And(a, b) => {
                    let sa = rec(a, n_atoms);
                    let sb = rec(b, n_atoms);
                    sa.intersection(&sb).copied().collect()
                }
            }
        }
        rec(&f.root, n_atoms)
    }

    #[test]
    fn eval_matches_truth_table_on_random_formulas() {
        use rand::SeedableRng;
        let a = atoms();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let text = random_formula_text(&mut rng, 0);
            let f = SafetyFormula::parse(&text, &a).unwrap();
            let sat = satisfying_masks(&f, a.len());
            for mask in 0u32..(1 << a.len()) {
                assert_eq!(
                    f.eval(LabelSet::from_bits(mask)),
                    sat.contains(&mask),
                    "formula {text:?} mask {mask:#b}"
                );
            }
        }

        fn random_formula_text(rng: &mut impl rand::RngCore, depth: usize) -> String {
            let names = ["collision", "red_light", "stop"];
            let choice = if depth >= 4 { 0 } else { rand::Rng::gen_range(rng, 0..5) };
            match choice {
                0 => names[rand::Rng::gen_range(rng, 0..names.len())].to_string(),
                1 => format!("!{}", random_formula_text(rng, depth + 1)),
                2 => format!(
                    "({} & {})",
                    random_formula_text(rng, depth + 1),
                    random_formula_text(rng, depth + 1)
                ),
                3 => format!(
                    "({} -> {})",
                    random_formula_text(rng, depth + 1),
                    random_formula_text(rng, depth + 1)
                ),
                _ => format!("({})", random_formula_text(rng, depth + 1)),
            }
        }
    }

    #[test]
    fn atoms_validation() {
        assert!(Atoms::new::<&str>(&[]).is_err());
        assert!(Atoms::new(&["a", "a"]).is_err());
        assert!(Atoms::new(&["1bad"]).is_err());
        assert!(Atoms::new(&[""]).is_err());
        let a = Atoms::new(&["hazard"]).unwrap();
        assert_eq!(a.id("hazard"), Some(0));
        assert_eq!(a.id("other"), None);
    }
}
