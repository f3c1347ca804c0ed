//! A small SMILES reader producing heavy-atom graphs.
//!
//! Covers the organic subset, bracket atoms, explicit bond symbols,
//! branches, ring closures (single digit and `%nn`) and aromatic lowercase
//! atoms. Charges, isotopes, hydrogen counts and chirality inside brackets
//! are consumed and dropped; `/`, `\` and `@` are ignored.

use std::collections::HashMap;

use thiserror::Error;

/// Errors raised while reading a SMILES string. Offsets are byte offsets.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmilesError {
    #[error("empty SMILES input")]
    EmptyInput,
    #[error("unsupported token {token:?} at byte {offset}")]
    UnsupportedToken { token: String, offset: usize },
    #[error("ring bond {label} opened at byte {offset} is never closed")]
    UnclosedRing { label: u32, offset: usize },
    #[error("unbalanced parenthesis at byte {offset}")]
    UnbalancedParen { offset: usize },
}

/// Bond orders. `Aromatic` is order 1.5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BondOrder {
    Single,
    Aromatic,
    Double,
    Triple,
}

impl BondOrder {
    pub fn as_f64(self) -> f64 {
        match self {
            BondOrder::Single => 1.0,
            BondOrder::Aromatic => 1.5,
            BondOrder::Double => 2.0,
            BondOrder::Triple => 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Atom {
    pub atomic_number: u8,
    pub aromatic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: BondOrder,
}

/// A parsed heavy-atom molecule.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MolSpec {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
}

impl MolSpec {
    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    /// Number of directed edges (two per bond).
    pub fn directed_edge_count(&self) -> usize {
        2 * self.bonds.len()
    }
}

const ELEMENTS: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh",
    "Fl", "Mc", "Lv", "Ts", "Og",
];

fn atomic_number(symbol: &str) -> Option<u8> {
    ELEMENTS
        .iter()
        .position(|s| *s == symbol)
        .map(|p| (p + 1) as u8)
}

/// Pending ring-closure: the atom that opened it, the bond symbol written at
/// the opening side (if any), and the byte offset for diagnostics.
struct RingOpen {
    atom: usize,
    order: Option<BondOrder>,
    offset: usize,
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    mol: MolSpec,
    /// Bonds written without a symbol between two aromatic atoms. Those that
    /// turn out not to lie on a ring are demoted to single bonds.
    implicit_aromatic: Vec<usize>,
    rings: HashMap<u32, RingOpen>,
}

/// Parses a SMILES string into a heavy-atom [`MolSpec`].
pub fn parse_smiles(text: &str) -> Result<MolSpec, SmilesError> {
    let text = text.trim();
    if text.is_empty() {
        return Err(SmilesError::EmptyInput);
    }
    let mut p = Parser {
        bytes: text.as_bytes(),
        pos: 0,
        mol: MolSpec::default(),
        implicit_aromatic: Vec::new(),
        rings: HashMap::new(),
    };
    p.run()?;
    Ok(p.finish())
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn unsupported(&self, offset: usize) -> SmilesError {
        let end = (offset + 1).min(self.bytes.len());
        SmilesError::UnsupportedToken {
            token: String::from_utf8_lossy(&self.bytes[offset..end]).into_owned(),
            offset,
        }
    }

    fn run(&mut self) -> Result<(), SmilesError> {
        // Stack of branch points; `prev` is the atom new atoms bond to.
        let mut stack: Vec<(Option<usize>, usize)> = Vec::new();
        let mut prev: Option<usize> = None;
        let mut pending_bond: Option<(BondOrder, usize)> = None;

        while let Some(c) = self.peek() {
            let offset = self.pos;
            match c {
                b'(' => {
                    if prev.is_none() || pending_bond.is_some() {
                        return Err(SmilesError::UnbalancedParen { offset });
                    }
                    stack.push((prev, offset));
                    self.pos += 1;
                }
                b')' => {
                    let (restored, _) =
                        stack.pop().ok_or(SmilesError::UnbalancedParen { offset })?;
                    if pending_bond.is_some() {
                        return Err(self.unsupported(offset));
                    }
                    prev = restored;
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b':' => {
                    if pending_bond.is_some() {
                        return Err(self.unsupported(offset));
                    }
                    let order = match c {
                        b'-' => BondOrder::Single,
                        b'=' => BondOrder::Double,
                        b'#' => BondOrder::Triple,
                        _ => BondOrder::Aromatic,
                    };
                    pending_bond = Some((order, offset));
                    self.pos += 1;
                }
                b'/' | b'\\' => {
                    // Directional single bonds; treated as plain single bonds.
                    if pending_bond.is_none() {
                        pending_bond = Some((BondOrder::Single, offset));
                    }
                    self.pos += 1;
                }
                b'.' => {
                    if pending_bond.is_some() {
                        return Err(self.unsupported(offset));
                    }
                    prev = None;
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => {
                    let label = self.ring_label()?;
                    let cur = prev.ok_or_else(|| self.unsupported(offset))?;
                    let written = pending_bond.take();
                    self.ring_bond(label, cur, written, offset)?;
                }
                _ => {
                    let atom = self.atom()?;
                    let idx = self.mol.atoms.len();
                    self.mol.atoms.push(atom);
                    if let Some(p) = prev {
                        let written = pending_bond.take();
                        self.add_bond(p, idx, written.map(|(o, off)| (o, off)), offset)?;
                    } else if let Some((_, off)) = pending_bond {
                        return Err(self.unsupported(off));
                    }
                    prev = Some(idx);
                }
            }
        }
        if let Some((_, off)) = pending_bond {
            return Err(self.unsupported(off));
        }
        if let Some((_, off)) = stack.pop() {
            return Err(SmilesError::UnbalancedParen { offset: off });
        }
        if let Some((label, open)) = self.rings.iter().min_by_key(|(_, r)| r.offset) {
            return Err(SmilesError::UnclosedRing {
                label: *label,
                offset: open.offset,
            });
        }
        if self.mol.atoms.is_empty() {
            return Err(SmilesError::EmptyInput);
        }
        Ok(())
    }

    fn ring_label(&mut self) -> Result<u32, SmilesError> {
        let start = self.pos;
        if self.bytes[self.pos] == b'%' {
            let digits = self.bytes.get(self.pos + 1..self.pos + 3);
            match digits {
                Some(d) if d.iter().all(u8::is_ascii_digit) => {
                    self.pos += 3;
                    Ok(((d[0] - b'0') * 10 + (d[1] - b'0')) as u32)
                }
                _ => Err(self.unsupported(start)),
            }
        } else {
            self.pos += 1;
            Ok((self.bytes[start] - b'0') as u32)
        }
    }

    fn ring_bond(
        &mut self,
        label: u32,
        atom: usize,
        written: Option<(BondOrder, usize)>,
        offset: usize,
    ) -> Result<(), SmilesError> {
        match self.rings.remove(&label) {
            None => {
                self.rings.insert(
                    label,
                    RingOpen {
                        atom,
                        order: written.map(|(o, _)| o),
                        offset,
                    },
                );
                Ok(())
            }
            Some(open) => {
                if open.atom == atom {
                    return Err(self.unsupported(offset));
                }
                let order = match (open.order, written.map(|(o, _)| o)) {
                    (Some(a), Some(b)) if a != b => return Err(self.unsupported(offset)),
                    (Some(a), _) => Some((a, open.offset)),
                    (None, Some(b)) => Some((b, offset)),
                    (None, None) => None,
                };
                self.add_bond(open.atom, atom, order, offset)
            }
        }
    }

    fn add_bond(
        &mut self,
        i: usize,
        j: usize,
        written: Option<(BondOrder, usize)>,
        offset: usize,
    ) -> Result<(), SmilesError> {
        if self
            .mol
            .bonds
            .iter()
            .any(|b| (b.i == i && b.j == j) || (b.i == j && b.j == i))
        {
            return Err(self.unsupported(offset));
        }
        let both_aromatic = self.mol.atoms[i].aromatic && self.mol.atoms[j].aromatic;
        let order = match written {
            Some((BondOrder::Aromatic, off)) => {
                if !both_aromatic {
                    return Err(self.unsupported(off));
                }
                BondOrder::Aromatic
            }
            Some((o, _)) => o,
            None if both_aromatic => {
                self.implicit_aromatic.push(self.mol.bonds.len());
                BondOrder::Aromatic
            }
            None => BondOrder::Single,
        };
        self.mol.bonds.push(Bond { i, j, order });
        Ok(())
    }

    fn atom(&mut self) -> Result<Atom, SmilesError> {
        let start = self.pos;
        let c = self.bytes[start];
        if c == b'[' {
            return self.bracket_atom();
        }
        // Organic subset, two-letter symbols first.
        let two = self.bytes.get(start..start + 2);
        if two == Some(b"Cl") {
            self.pos += 2;
            return Ok(Atom { atomic_number: 17, aromatic: false });
        }
        if two == Some(b"Br") {
            self.pos += 2;
            return Ok(Atom { atomic_number: 35, aromatic: false });
        }
        let (z, aromatic) = match c {
            b'B' => (5, false),
            b'C' => (6, false),
            b'N' => (7, false),
            b'O' => (8, false),
            b'P' => (15, false),
            b'S' => (16, false),
            b'F' => (9, false),
            b'I' => (53, false),
            b'b' => (5, true),
            b'c' => (6, true),
            b'n' => (7, true),
            b'o' => (8, true),
            b'p' => (15, true),
            b's' => (16, true),
            _ => return Err(self.unsupported(start)),
        };
        self.pos += 1;
        Ok(Atom { atomic_number: z, aromatic })
    }

    fn bracket_atom(&mut self) -> Result<Atom, SmilesError> {
        let open = self.pos;
        let close = self.bytes[open..]
            .iter()
            .position(|&b| b == b']')
            .map(|p| open + p)
            .ok_or_else(|| self.unsupported(open))?;
        let mut i = open + 1;
        // Isotope.
        while i < close && self.bytes[i].is_ascii_digit() {
            i += 1;
        }
        if i >= close {
            return Err(self.unsupported(i));
        }
        let (z, aromatic, len) = self.bracket_element(i, close)?;
        i += len;
        // Chirality, hydrogen count, charge, atom class: validated loosely, discarded.
        while i < close {
            match self.bytes[i] {
                b'@' | b'+' | b'-' | b'H' | b':' => i += 1,
                b'0'..=b'9' => i += 1,
                _ => return Err(self.unsupported(i)),
            }
        }
        self.pos = close + 1;
        Ok(Atom { atomic_number: z, aromatic })
    }

    fn bracket_element(&self, i: usize, close: usize) -> Result<(u8, bool, usize), SmilesError> {
        let rest = &self.bytes[i..close];
        for (sym, z) in [(&b"se"[..], 34u8), (b"as", 33), (b"te", 52)] {
            if rest.starts_with(sym) {
                return Ok((z, true, 2));
            }
        }
        match rest[0] {
            b'b' => return Ok((5, true, 1)),
            b'c' => return Ok((6, true, 1)),
            b'n' => return Ok((7, true, 1)),
            b'o' => return Ok((8, true, 1)),
            b'p' => return Ok((15, true, 1)),
            b's' => return Ok((16, true, 1)),
            _ => {}
        }
        if !rest[0].is_ascii_uppercase() {
            return Err(self.unsupported(i));
        }
        // Prefer the two-letter reading when it is a real element.
        if rest.len() >= 2 && rest[1].is_ascii_lowercase() {
            let sym = std::str::from_utf8(&rest[..2]).expect("ascii");
            if let Some(z) = atomic_number(sym) {
                return Ok((z, false, 2));
            }
        }
        let sym = std::str::from_utf8(&rest[..1]).expect("ascii");
        match atomic_number(sym) {
            Some(z) => Ok((z, false, 1)),
            None => Err(self.unsupported(i)),
        }
    }

    fn finish(mut self) -> MolSpec {
        if !self.implicit_aromatic.is_empty() {
            for &b in &self.implicit_aromatic {
                if !bond_on_cycle(&self.mol, b) {
                    self.mol.bonds[b].order = BondOrder::Single;
                }
            }
        }
        self.mol
    }
}

/// True when removing bond `skip` still leaves its endpoints connected.
fn bond_on_cycle(mol: &MolSpec, skip: usize) -> bool {
    let n = mol.atoms.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (k, b) in mol.bonds.iter().enumerate() {
        if k != skip {
            adj[b.i].push(b.j);
            adj[b.j].push(b.i);
        }
    }
    let (from, to) = (mol.bonds[skip].i, mol.bonds[skip].j);
    let mut seen = vec![false; n];
    let mut stack = vec![from];
    seen[from] = true;
    while let Some(v) = stack.pop() {
        if v == to {
            return true;
        }
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    false
}
