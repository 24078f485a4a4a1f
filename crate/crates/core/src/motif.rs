//! Motif-induced user adjacencies.
//!
//! Seven motifs are triangles over the directed social graph and three are
//! user-user-item triads. Each motif adjacency counts, for an unordered pair of
//! distinct users, the motif instances that contain both of them. All ten are
//! computed with the masked product `(P·Q) ⊙ T` over the mutual (`B`) and
//! one-way (`U`) parts of the relation matrix.

use std::fmt;
use std::str::FromStr;

use crate::error::{input, Error, Result};
use crate::sparse::{masked_sparse_product, split_bidirectional, SparseMatrix};

/// Minimum co-consumption count (exclusive) kept in the M10 adjacency.
pub const M10_THRESHOLD: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Motif {
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
    M7,
    M8,
    M9,
    M10,
}

impl Motif {
    pub const ALL: [Motif; 10] = [
        Motif::M1,
        Motif::M2,
        Motif::M3,
        Motif::M4,
        Motif::M5,
        Motif::M6,
        Motif::M7,
        Motif::M8,
        Motif::M9,
        Motif::M10,
    ];

    /// 1-based motif number.
    pub fn number(self) -> usize {
        self as usize + 1
    }

    pub fn from_number(n: usize) -> Result<Self> {
        if (1..=10).contains(&n) {
            Ok(Self::ALL[n - 1])
        } else {
            input(format!("unknown motif id M{n}"))
        }
    }

    /// Whether the masked-product sum is already symmetric, so that the
    /// adjacency is `C` rather than `C + Cᵀ`.
    pub fn is_symmetric(self) -> bool {
        matches!(
            self,
            Motif::M4 | Motif::M6 | Motif::M7 | Motif::M8 | Motif::M10
        )
    }

    /// Whether the motif involves an item node.
    pub fn uses_items(self) -> bool {
        matches!(self, Motif::M8 | Motif::M9 | Motif::M10)
    }
}

impl fmt::Display for Motif {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{}", self.number())
    }
}

impl FromStr for Motif {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let digits = s.trim().trim_start_matches(['M', 'm']);
        match digits.parse::<usize>() {
            Ok(n) => Self::from_number(n),
            Err(_) => input(format!("unknown motif id {s:?}")),
        }
    }
}

/// Shared operands for the ten motif computations.
struct MotifOperands {
    b: SparseMatrix,
    u: SparseMatrix,
    ut: SparseMatrix,
    co: Option<SparseMatrix>,
}

impl MotifOperands {
    fn new(s: &SparseMatrix, y: Option<&SparseMatrix>) -> Result<Self> {
        let (b, u) = split_bidirectional(s)?;
        let ut = u.transpose();
        let co = match y {
            Some(y) => Some(y.matmul(&y.transpose())?),
            None => None,
        };
        Ok(Self { b, u, ut, co })
    }

    fn raw(&self, motif: Motif) -> Result<SparseMatrix> {
        let (b, u, ut) = (&self.b, &self.u, &self.ut);
        let mp = masked_sparse_product;
        let sum = |terms: [SparseMatrix; 3]| -> Result<SparseMatrix> {
            let [a, b, c] = terms;
            a.add(&b)?.add(&c)
        };
        let co = || {
            self.co
                .as_ref()
                .ok_or_else(|| Error::Input(format!("{motif} needs the feedback matrix")))
        };
        match motif {
            Motif::M1 => mp(u, u, ut),
            Motif::M2 => sum([mp(b, u, ut)?, mp(u, b, ut)?, mp(u, u, b)?]),
            Motif::M3 => sum([mp(b, b, u)?, mp(b, u, b)?, mp(u, b, b)?]),
            Motif::M4 => mp(b, b, b),
            Motif::M5 => sum([mp(u, u, u)?, mp(u, ut, u)?, mp(ut, u, u)?]),
            Motif::M6 => sum([mp(u, b, u)?, mp(b, ut, ut)?, mp(ut, u, b)?]),
            Motif::M7 => sum([mp(ut, b, ut)?, mp(b, u, u)?, mp(u, ut, b)?]),
            Motif::M8 => co()?.hadamard(b),
            Motif::M9 => co()?.hadamard(u),
            Motif::M10 => Ok(co()?.clone()),
        }
    }

    fn adjacency(&self, motif: Motif) -> Result<SparseMatrix> {
        let c = self.raw(motif)?;
        let a = if motif.is_symmetric() {
            c
        } else {
            c.add(&c.transpose())?
        };
        let a = a.without_diagonal();
        Ok(if motif == Motif::M10 {
            a.filter(|_, _, v| v > M10_THRESHOLD)
        } else {
            a
        })
    }
}

fn check_inputs(s: &SparseMatrix, y: &SparseMatrix) -> Result<()> {
    if s.n_rows() != s.n_cols() {
        return input(format!("relation matrix {:?} is not square", s.shape()));
    }
    if y.n_rows() != s.n_rows() {
        return input(format!(
            "feedback matrix has {} users but the relation matrix has {}",
            y.n_rows(),
            s.n_rows()
        ));
    }
    if !y.is_binary() {
        return input("feedback matrix must be binary");
    }
    Ok(())
}

/// Motif-induced adjacency for one motif: raw instance counts, symmetric,
/// zero diagonal. M10 keeps only counts strictly above [`M10_THRESHOLD`].
pub fn motif_adjacency(s: &SparseMatrix, y: &SparseMatrix, motif: Motif) -> Result<SparseMatrix> {
    check_inputs(s, y)?;
    let ops = MotifOperands::new(s, motif.uses_items().then_some(y))?;
    ops.adjacency(motif)
}

/// The ten motif adjacencies, their sum with the relation matrix, and the
/// row-stochastic propagation matrix derived from that sum.
#[derive(Debug, Clone)]
pub struct MotifSet {
    pub motif_matrices: Vec<SparseMatrix>,
    pub combined: SparseMatrix,
    pub normalized: SparseMatrix,
}

impl MotifSet {
    /// Computes all ten motifs. With `binarize` every motif count is replaced by 1.
    pub fn build(s: &SparseMatrix, y: &SparseMatrix, binarize: bool) -> Result<Self> {
        check_inputs(s, y)?;
        let ops = MotifOperands::new(s, Some(y))?;
        let motifs = Motif::ALL
            .iter()
            .map(|&m| {
                let a = ops.adjacency(m)?;
                Ok(if binarize { a.binarized() } else { a })
            })
            .collect::<Result<Vec<_>>>()?;
        combined_adjacency(s, &motifs)
    }

    /// Propagation matrix built from the relation matrix alone.
    pub fn social_only(s: &SparseMatrix) -> Result<Self> {
        combined_adjacency(s, &[])
    }

    pub fn motif(&self, motif: Motif) -> Option<&SparseMatrix> {
        self.motif_matrices.get(motif as usize)
    }
}

/// Sums the relation matrix with the motif adjacencies and row-normalizes the
/// result. A row that is empty in the sum gets a unit self-loop first.
pub fn combined_adjacency(s: &SparseMatrix, motifs: &[SparseMatrix]) -> Result<MotifSet> {
    let mut combined = s.clone();
    for (k, a) in motifs.iter().enumerate() {
        if a.shape() != s.shape() {
            return input(format!(
                "motif matrix {} has shape {:?}, expected {:?}",
                k + 1,
                a.shape(),
                s.shape()
            ));
        }
        combined = combined.add(a)?;
    }
    let n = combined.n_rows();
    let isolated: Vec<(usize, usize, f64)> = (0..n)
        .filter(|&r| combined.row_nnz(r) == 0)
        .map(|r| (r, r, 1.0))
        .collect();
    let with_loops = combined.add(&SparseMatrix::from_triplets(n, n, &isolated)?)?;
    let inv: Vec<f64> = with_loops.row_sums().iter().map(|&d| 1.0 / d).collect();
    let normalized = with_loops.scale_rows(&inv);
    Ok(MotifSet {
        motif_matrices: motifs.to_vec(),
        combined,
        normalized,
    })
}
