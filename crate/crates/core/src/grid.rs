//! Grid coordinates, anti-diagonal partitioning, sequence orderings and the
//! attention visibility predicates shared by training and inference.
//!
//! Flat sequence positions always follow the same layout: `prefix_len`
//! condition positions, then the grid in raster order. Orderings used by a
//! decoder (raster or diagonal) only change *when* a position is produced,
//! never its flat index, so masks and positional encodings are functions of
//! coordinates alone.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord {
    pub row: usize,
    pub col: usize,
}

impl Coord {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    /// Index of the anti-diagonal this coordinate lies on.
    pub const fn diagonal(self) -> usize {
        self.row + self.col
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidDimension(format!(
            "grid must be at least 1x1, got {height}x{width}"
        )));
    }
    Ok(())
}

/// An `height x width` image of vocabulary indices, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    vocab: usize,
    tokens: Vec<Token>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, vocab: usize, tokens: Vec<Token>) -> Result<Self> {
        check_dims(height, width)?;
        if tokens.len() != height * width {
            return Err(Error::InvalidDimension(format!(
                "expected {} tokens for {height}x{width}, got {}",
                height * width,
                tokens.len()
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::IndexOutOfRange(format!(
                "token {bad} outside vocabulary of {vocab}"
            )));
        }
        Ok(Self {
            height,
            width,
            vocab,
            tokens,
        })
    }

    pub fn filled(height: usize, width: usize, vocab: usize, token: Token) -> Result<Self> {
        Self::new(height, width, vocab, vec![token; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Tokens in raster order.
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn get(&self, at: Coord) -> Token {
        self.tokens[at.row * self.width + at.col]
    }

    pub fn set(&mut self, at: Coord, token: Token) -> Result<()> {
        if token as usize >= self.vocab {
            return Err(Error::IndexOutOfRange(format!(
                "token {token} outside vocabulary of {}",
                self.vocab
            )));
        }
        if at.row >= self.height || at.col >= self.width {
            return Err(Error::IndexOutOfRange(format!("{at:?} outside grid")));
        }
        self.tokens[at.row * self.width + at.col] = token;
        Ok(())
    }
}

/// The anti-diagonals `D_t = {(p, q) | p + q = t}` of a grid, each listed
/// with ascending row index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiagonalSchedule {
    height: usize,
    width: usize,
    diagonals: Vec<Vec<Coord>>,
}

impl DiagonalSchedule {
    pub fn num_diagonals(&self) -> usize {
        self.diagonals.len()
    }

    pub fn diagonals(&self) -> &[Vec<Coord>] {
        &self.diagonals
    }

    pub fn diagonal(&self, t: usize) -> &[Coord] {
        &self.diagonals[t]
    }

    pub fn widths(&self) -> Vec<usize> {
        self.diagonals.iter().map(Vec::len).collect()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

pub fn diagonal_partition(height: usize, width: usize) -> Result<DiagonalSchedule> {
    check_dims(height, width)?;
    let diagonals = (0..height + width - 1)
        .map(|t| {
            let first = t.saturating_sub(width - 1);
            let last = t.min(height - 1);
            (first..=last).map(|p| Coord::new(p, t - p)).collect()
        })
        .collect();
    Ok(DiagonalSchedule {
        height,
        width,
        diagonals,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderKind {
    Raster,
    Diagonal,
}

/// Bijection between grid coordinates and positions in a generation order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrderMapping {
    kind: OrderKind,
    height: usize,
    width: usize,
    order: Vec<Coord>,
    index: Vec<usize>,
}

impl OrderMapping {
    pub fn new(kind: OrderKind, height: usize, width: usize) -> Result<Self> {
        let order: Vec<Coord> = match kind {
            OrderKind::Raster => {
                check_dims(height, width)?;
                (0..height)
                    .flat_map(|p| (0..width).map(move |q| Coord::new(p, q)))
                    .collect()
            }
            OrderKind::Diagonal => diagonal_partition(height, width)?
                .diagonals
                .into_iter()
                .flatten()
                .collect(),
        };
        let mut index = vec![0; order.len()];
        for (i, c) in order.iter().enumerate() {
            index[c.row * width + c.col] = i;
        }
        Ok(Self {
            kind,
            height,
            width,
            order,
            index,
        })
    }

    pub fn kind(&self) -> OrderKind {
        self.kind
    }

    pub fn coord_at(&self, position: usize) -> Coord {
        self.order[position]
    }

    pub fn position_of(&self, at: Coord) -> usize {
        self.index[at.row * self.width + at.col]
    }

    pub fn coords(&self) -> &[Coord] {
        &self.order
    }

    /// Flattens `grid` into this order.
    pub fn reorder(&self, grid: &TokenGrid) -> Result<Vec<Token>> {
        self.check(grid.height(), grid.width())?;
        Ok(self.order.iter().map(|&c| grid.get(c)).collect())
    }

    /// Inverse of [`OrderMapping::reorder`].
    pub fn restore(&self, sequence: &[Token], vocab: usize) -> Result<TokenGrid> {
        if sequence.len() != self.order.len() {
            return Err(Error::InvalidDimension(format!(
                "sequence of {} tokens for a {}x{} mapping",
                sequence.len(),
                self.height,
                self.width
            )));
        }
        let mut tokens = vec![0; sequence.len()];
        for (&c, &t) in self.order.iter().zip(sequence) {
            tokens[c.row * self.width + c.col] = t;
        }
        TokenGrid::new(self.height, self.width, vocab, tokens)
    }

    fn check(&self, height: usize, width: usize) -> Result<()> {
        if (height, width) != (self.height, self.width) {
            return Err(Error::InvalidDimension(format!(
                "grid {height}x{width} does not match mapping {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Left and upper neighbours of a grid position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Predecessors {
    pub horizontal: Option<Coord>,
    pub vertical: Option<Coord>,
}

pub fn predecessors(at: Coord) -> Predecessors {
    Predecessors {
        horizontal: (at.col > 0).then(|| Coord::new(at.row, at.col - 1)),
        vertical: (at.row > 0).then(|| Coord::new(at.row - 1, at.col)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    RasterCausal,
    DiagonalCausal,
}

impl MaskKind {
    pub fn name(self) -> &'static str {
        match self {
            MaskKind::RasterCausal => "raster-causal",
            MaskKind::DiagonalCausal => "diagonal-causal",
        }
    }
}

/// Visibility rule over the flat `prefix + grid` sequence.
///
/// Prefix keys are visible to every grid query; prefix queries see earlier
/// prefix positions only. Between grid positions the raster kind compares
/// raster indices and the diagonal kind compares diagonal indices, so two
/// positions on the same diagonal never see each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub prefix_len: usize,
    pub height: usize,
    pub width: usize,
}

impl MaskSpec {
    pub fn new(kind: MaskKind, prefix_len: usize, height: usize, width: usize) -> Result<Self> {
        check_dims(height, width)?;
        Ok(Self {
            kind,
            prefix_len,
            height,
            width,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.prefix_len + self.height * self.width
    }

    /// Flat position of a grid coordinate.
    pub fn position(&self, at: Coord) -> usize {
        self.prefix_len + at.row * self.width + at.col
    }

    /// Grid coordinate of a flat position, `None` for prefix positions.
    pub fn coord(&self, position: usize) -> Option<Coord> {
        let i = position.checked_sub(self.prefix_len)?;
        Some(Coord::new(i / self.width, i % self.width))
    }

    pub fn allows(&self, query: usize, key: usize) -> Result<bool> {
        let n = self.seq_len();
        if query >= n || key >= n {
            return Err(Error::IndexOutOfRange(format!(
                "mask query {query} / key {key} outside sequence of {n}"
            )));
        }
        Ok(self.allows_unchecked(query, key))
    }

    pub(crate) fn allows_unchecked(&self, query: usize, key: usize) -> bool {
        if query == key {
            return true;
        }
        let p = self.prefix_len;
        match (query < p, key < p) {
            (_, true) => key < query,
            (true, false) => false,
            (false, false) => match self.kind {
                MaskKind::RasterCausal => key < query,
                MaskKind::DiagonalCausal => {
                    let (qi, ki) = (query - p, key - p);
                    let w = self.width;
                    ki / w + ki % w < qi / w + qi % w
                }
            },
        }
    }

    /// Materializes the `queries x keys` block of the mask, row-major.
    pub fn tile(&self, queries: Range<usize>, keys: Range<usize>) -> Result<Vec<bool>> {
        let n = self.seq_len();
        if queries.end > n || keys.end > n {
            return Err(Error::IndexOutOfRange(format!(
                "tile {queries:?} x {keys:?} outside sequence of {n}"
            )));
        }
        let mut out = Vec::with_capacity(queries.len() * keys.len());
        for q in queries {
            out.extend(keys.clone().map(|k| self.allows_unchecked(q, k)));
        }
        Ok(out)
    }

    pub fn full(&self) -> Vec<bool> {
        let n = self.seq_len();
        self.tile(0..n, 0..n).expect("full range is in bounds")
    }
}

/// Convenience wrapper matching the predicate form used in tests and docs.
pub fn mask_allows(spec: &MaskSpec, query: usize, key: usize) -> Result<bool> {
    spec.allows(query, key)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_2x2() {
        let s = diagonal_partition(2, 2).unwrap();
        assert_eq!(s.num_diagonals(), 3);
        assert_eq!(
            s.diagonals(),
            &[
                vec![Coord::new(0, 0)],
                vec![Coord::new(0, 1), Coord::new(1, 0)],
                vec![Coord::new(1, 1)],
            ]
        );
    }

    #[test]
    fn partition_step_counts() {
        assert_eq!(diagonal_partition(16, 16).unwrap().num_diagonals(), 31);
        assert_eq!(diagonal_partition(32, 32).unwrap().num_diagonals(), 63);
    }

    #[test]
    fn partition_rejects_zero() {
        assert!(matches!(
            diagonal_partition(0, 3),
            Err(Error::InvalidDimension(_))
        ));
        assert!(matches!(
            diagonal_partition(3, 0),
            Err(Error::InvalidDimension(_))
        ));
    }

    #[test]
    fn partition_exhaustive_up_to_32() {
        for h in 1..=32 {
            for w in 1..=32 {
                let s = diagonal_partition(h, w).unwrap();
                assert_eq!(s.num_diagonals(), h + w - 1);
                let mut seen = vec![false; h * w];
                for (t, d) in s.diagonals().iter().enumerate() {
                    let expected = t.min(h - 1).min(w - 1).min(h + w - 2 - t) + 1;
                    assert_eq!(d.len(), expected, "{h}x{w} t={t}");
                    for pair in d.windows(2) {
                        assert!(pair[0].row < pair[1].row);
                    }
                    for c in d {
                        assert_eq!(c.diagonal(), t);
                        assert!(!seen[c.row * w + c.col]);
                        seen[c.row * w + c.col] = true;
                    }
                }
                assert!(seen.into_iter().all(|x| x));
            }
        }
    }

    #[test]
    fn mask_examples_4x4() {
        let diag = MaskSpec::new(MaskKind::DiagonalCausal, 0, 4, 4).unwrap();
        let raster = MaskSpec { kind: MaskKind::RasterCausal, ..diag };
        let q = diag.position(Coord::new(0, 3));
        let k = diag.position(Coord::new(2, 0));
        assert!(diag.allows(q, k).unwrap());
        assert!(!raster.allows(q, k).unwrap());

        let a = diag.position(Coord::new(0, 1));
        let b = diag.position(Coord::new(1, 0));
        assert!(!diag.allows(a, b).unwrap());
        assert!(!diag.allows(b, a).unwrap());
        for i in 0..16 {
            assert!(diag.allows(i, i).unwrap());
            assert!(raster.allows(i, i).unwrap());
        }
    }

    #[test]
    fn mask_out_of_range() {
        let m = MaskSpec::new(MaskKind::RasterCausal, 1, 2, 2).unwrap();
        assert!(matches!(m.allows(5, 0), Err(Error::IndexOutOfRange(_))));
        assert!(matches!(m.allows(0, 5), Err(Error::IndexOutOfRange(_))));
    }

    #[test]
    fn prefix_visibility() {
        for kind in [MaskKind::RasterCausal, MaskKind::DiagonalCausal] {
            let m = MaskSpec::new(kind, 3, 3, 3).unwrap();
            for q in 0..m.seq_len() {
                for k in 0..3 {
                    let expected = q >= 3 || k <= q;
                    assert_eq!(m.allows(q, k).unwrap(), expected);
                }
                if q < 3 {
                    for k in 3..m.seq_len() {
                        assert!(!m.allows(q, k).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn diagonal_mask_asymmetric_and_incomparable() {
        let diag = MaskSpec::new(MaskKind::DiagonalCausal, 1, 4, 4).unwrap();
        let raster = MaskSpec { kind: MaskKind::RasterCausal, ..diag };
        let n = diag.seq_len();
        let (mut diag_only, mut raster_only) = (false, false);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    assert!(!(diag.allows(i, j).unwrap() && diag.allows(j, i).unwrap()));
                }
                let (d, r) = (diag.allows(i, j).unwrap(), raster.allows(i, j).unwrap());
                diag_only |= d && !r;
                raster_only |= r && !d;
            }
        }
        assert!(diag_only && raster_only);
    }

    #[test]
    fn tile_matches_predicate() {
        let m = MaskSpec::new(MaskKind::DiagonalCausal, 2, 3, 4).unwrap();
        let t = m.tile(3..9, 1..7).unwrap();
        for (a, q) in (3..9).enumerate() {
            for (b, k) in (1..7).enumerate() {
                assert_eq!(t[a * 6 + b], m.allows(q, k).unwrap());
            }
        }
        assert!(m.tile(0..20, 0..1).is_err());
    }

    #[test]
    fn predecessor_examples() {
        let none = Predecessors {
            horizontal: None,
            vertical: None,
        };
        assert_eq!(predecessors(Coord::new(0, 0)), none);
        assert_eq!(
            predecessors(Coord::new(0, 5)),
            Predecessors {
                horizontal: Some(Coord::new(0, 4)),
                vertical: None
            }
        );
        assert_eq!(
            predecessors(Coord::new(3, 2)),
            Predecessors {
                horizontal: Some(Coord::new(3, 1)),
                vertical: Some(Coord::new(2, 2))
            }
        );
    }

    #[test]
    fn predecessors_lie_on_previous_diagonal() {
        for p in 0..6 {
            for q in 0..6 {
                let at = Coord::new(p, q);
                let pred = predecessors(at);
                let count = pred.horizontal.iter().chain(&pred.vertical).count();
                if p > 0 || q > 0 {
                    assert!(count >= 1);
                }
                if p > 0 && q > 0 {
                    assert_eq!(count, 2);
                }
                for c in pred.horizontal.iter().chain(&pred.vertical) {
                    assert_eq!(c.diagonal() + 1, at.diagonal());
                }
            }
        }
    }

    #[test]
    fn reorder_examples() {
        let g = TokenGrid::new(2, 2, 8, vec![1, 2, 3, 4]).unwrap();
        let raster = OrderMapping::new(OrderKind::Raster, 2, 2).unwrap();
        let diag = OrderMapping::new(OrderKind::Diagonal, 2, 2).unwrap();
        assert_eq!(raster.reorder(&g).unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(diag.reorder(&g).unwrap(), vec![1, 2, 3, 4]);

        let g3 = TokenGrid::new(3, 3, 16, (0..9).collect()).unwrap();
        let d3 = OrderMapping::new(OrderKind::Diagonal, 3, 3).unwrap();
        let seq = d3.reorder(&g3).unwrap();
        assert_eq!(seq, vec![0, 1, 3, 2, 4, 6, 5, 7, 8]);
        assert_eq!(d3.restore(&seq, 16).unwrap(), g3);
        assert!(d3.reorder(&g).is_err());
    }

    #[test]
    fn raster_index_formula() {
        let m = OrderMapping::new(OrderKind::Raster, 3, 5).unwrap();
        for p in 0..3 {
            for q in 0..5 {
                assert_eq!(m.position_of(Coord::new(p, q)), p * 5 + q);
            }
        }
    }

    #[test]
    fn token_grid_validation() {
        assert!(TokenGrid::new(2, 2, 4, vec![0, 1, 2, 4]).is_err());
        assert!(TokenGrid::new(2, 2, 4, vec![0, 1, 2]).is_err());
        let mut g = TokenGrid::filled(2, 3, 4, 0).unwrap();
        g.set(Coord::new(1, 2), 3).unwrap();
        assert_eq!(g.get(Coord::new(1, 2)), 3);
        assert!(g.set(Coord::new(1, 2), 4).is_err());
    }
}
